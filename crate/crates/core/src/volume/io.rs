//! NRRD subset and raw + JSON sidecar readers/writers.
//!
//! NRRD: `dimension: 3`, `type` float or uchar, `encoding: raw`, little endian,
//! diagonal `space directions` (or `spacings`), optional `space origin`. The
//! payload must be attached.
//!
//! Raw + JSON: `name.raw` holds the little-endian x-fastest payload and
//! `name.json` holds `{dims, spacing, origin, dtype}` with dtype "f32" or "u8".

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Geometry, LabelMap, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileFormat {
    Nrrd,
    RawJson,
}

impl FileFormat {
    /// `.nrrd` selects NRRD; `.raw` and `.json` select the sidecar format.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nrrd") => Ok(FileFormat::Nrrd),
            Some("raw") | Some("json") => Ok(FileFormat::RawJson),
            other => Err(Error::format(
                "extension",
                format!("cannot infer format from extension {other:?} of {}", path.display()),
            )),
        }
    }
}

impl std::str::FromStr for FileFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nrrd" => Ok(FileFormat::Nrrd),
            "raw-json" | "raw" => Ok(FileFormat::RawJson),
            other => Err(Error::format("format", format!("unknown format `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DType {
    F32,
    U8,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
}

pub fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("json"))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match FileFormat::from_path(path)? {
        FileFormat::Nrrd => read_nrrd(path),
        FileFormat::RawJson => read_raw_json(path),
    }
}

/// Reads any supported volume file and interprets its values as labels.
pub fn read_labelmap(path: impl AsRef<Path>) -> Result<LabelMap> {
    LabelMap::from_volume(&read_volume(path)?)
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>, format: FileFormat) -> Result<()> {
    write_volume_data(vol.geometry(), vol.data(), path, format)
}

/// Writes an f32 grid after checking it against the volume invariants.
pub fn write_volume_data(
    geometry: &Geometry,
    data: &[f32],
    path: impl AsRef<Path>,
    format: FileFormat,
) -> Result<()> {
    geometry.validate()?;
    if data.len() != geometry.len() {
        return Err(Error::Integrity(format!(
            "{} values for dims {:?}",
            data.len(),
            geometry.dims
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("refusing to write non-finite value at voxel {i}")));
    }
    let mut payload = Vec::with_capacity(data.len() * 4);
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_payload(geometry, DType::F32, &payload, path.as_ref(), format)
}

pub fn write_labelmap(lm: &LabelMap, path: impl AsRef<Path>, format: FileFormat) -> Result<()> {
    write_payload(lm.geometry(), DType::U8, lm.labels(), path.as_ref(), format)
}

fn write_payload(geometry: &Geometry, dtype: DType, payload: &[u8], path: &Path, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Nrrd => {
            let mut out = nrrd_header(geometry, dtype).into_bytes();
            out.extend_from_slice(payload);
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
        FileFormat::RawJson => {
            let (raw, json) = sidecar_paths(path);
            let sidecar = Sidecar {
                dims: geometry.dims,
                spacing: geometry.spacing,
                origin: geometry.origin,
                dtype: match dtype {
                    DType::F32 => "f32".into(),
                    DType::U8 => "u8".into(),
                },
            };
            fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
            fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
        }
    }
}

fn nrrd_header(g: &Geometry, dtype: DType) -> String {
    let [nx, ny, nz] = g.dims;
    let [sx, sy, sz] = g.spacing;
    let [ox, oy, oz] = g.origin;
    let ty = match dtype {
        DType::F32 => "float",
        DType::U8 => "uchar",
    };
    format!(
        "NRRD0004\n\
         type: {ty}\n\
         dimension: 3\n\
         space dimension: 3\n\
         sizes: {nx} {ny} {nz}\n\
         space directions: ({sx},0,0) (0,{sy},0) (0,0,{sz})\n\
         space origin: ({ox},{oy},{oz})\n\
         endian: little\n\
         encoding: raw\n\n"
    )
}

fn decode(dtype: DType, payload: &[u8]) -> Vec<f32> {
    match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::U8 => payload.iter().map(|&b| b as f32).collect(),
    }
}

fn check_payload(geometry: &Geometry, dtype: DType, len: usize) -> Result<()> {
    let expected = geometry.len() * dtype.size();
    if len != expected {
        return Err(Error::Integrity(format!(
            "payload has {len} bytes, dims {:?} of {dtype:?} require {expected}",
            geometry.dims
        )));
    }
    Ok(())
}

fn read_raw_json(path: &Path) -> Result<Volume> {
    let (raw, json) = sidecar_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let dtype = match sidecar.dtype.as_str() {
        "f32" => DType::F32,
        "u8" => DType::U8,
        other => return Err(Error::format("dtype", format!("unsupported dtype `{other}`"))),
    };
    let geometry = Geometry::new(sidecar.dims, sidecar.spacing, sidecar.origin)?;
    let payload = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    check_payload(&geometry, dtype, payload.len())?;
    Volume::new(geometry, decode(dtype, &payload))
}

fn parse_vector(field: &str, s: &str) -> Result<Vec<f64>> {
    let inner = s
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::format(field, format!("expected a parenthesized vector, got `{s}`")))?;
    inner
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(field, format!("bad number `{t}`")))
        })
        .collect()
}

fn parse_directions(value: &str) -> Result<[f64; 3]> {
    const FIELD: &str = "space directions";
    let vectors: Vec<&str> = value.split_whitespace().collect();
    if vectors.len() != 3 {
        return Err(Error::format(FIELD, format!("expected 3 vectors, got {}", vectors.len())));
    }
    let mut spacing = [0.0; 3];
    for (axis, v) in vectors.iter().enumerate() {
        let comps = parse_vector(FIELD, v)?;
        if comps.len() != 3 {
            return Err(Error::format(FIELD, format!("vector `{v}` is not 3D")));
        }
        for (j, &c) in comps.iter().enumerate() {
            if j != axis && c != 0.0 {
                return Err(Error::format(FIELD, "only diagonal directions are supported"));
            }
        }
        spacing[axis] = comps[axis];
    }
    Ok(spacing)
}

fn read_nrrd(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .map(|p| (p, p + 2))
        .or_else(|| bytes.windows(4).position(|w| w == b"\r\n\r\n").map(|p| (p, p + 4)))
        .ok_or_else(|| Error::format("header", "missing blank line terminating the header"))?;
    let header = std::str::from_utf8(&bytes[..header_end.0])
        .map_err(|_| Error::format("header", "header is not valid UTF-8"))?;
    let payload = &bytes[header_end.1..];

    let mut lines = header.lines();
    match lines.next() {
        Some(magic) if magic.starts_with("NRRD") => {}
        _ => return Err(Error::format("magic", "file does not start with NRRD")),
    }

    let mut dtype = None;
    let mut dimension = None;
    let mut sizes = None;
    let mut encoding = None;
    let mut endian = None;
    let mut spacing = None;
    let mut origin = [0.0; 3];
    for line in lines {
        let line = line.trim_end_matches('\r');
        if line.starts_with('#') || line.is_empty() || line.contains(":=") {
            continue;
        }
        let Some((key, value)) = line.split_once(": ") else {
            return Err(Error::format("header", format!("malformed line `{line}`")));
        };
        let value = value.trim();
        match key {
            "type" => {
                dtype = Some(match value {
                    "float" => DType::F32,
                    "uchar" | "unsigned char" | "uint8" | "uint8_t" => DType::U8,
                    other => return Err(Error::format("type", format!("unsupported type `{other}`"))),
                })
            }
            "dimension" => dimension = Some(value.to_string()),
            "sizes" => {
                let parsed: std::result::Result<Vec<usize>, _> = value.split_whitespace().map(str::parse).collect();
                let parsed = parsed.map_err(|_| Error::format("sizes", format!("bad sizes `{value}`")))?;
                if parsed.len() != 3 {
                    return Err(Error::format("sizes", format!("expected 3 sizes, got {}", parsed.len())));
                }
                sizes = Some([parsed[0], parsed[1], parsed[2]]);
            }
            "encoding" => encoding = Some(value.to_string()),
            "endian" => endian = Some(value.to_string()),
            "space directions" => spacing = Some(parse_directions(value)?),
            "spacings" => {
                let parsed: std::result::Result<Vec<f64>, _> = value.split_whitespace().map(str::parse).collect();
                let parsed = parsed.map_err(|_| Error::format("spacings", format!("bad spacings `{value}`")))?;
                if parsed.len() != 3 {
                    return Err(Error::format("spacings", "expected 3 spacings"));
                }
                spacing = Some([parsed[0], parsed[1], parsed[2]]);
            }
            "space origin" => {
                let v = parse_vector("space origin", value)?;
                if v.len() != 3 {
                    return Err(Error::format("space origin", "origin is not 3D"));
                }
                origin = [v[0], v[1], v[2]];
            }
            "data file" | "datafile" => {
                return Err(Error::format("data file", "detached payloads are not supported"));
            }
            _ => {}
        }
    }

    match dimension.as_deref() {
        Some("3") => {}
        Some(other) => return Err(Error::format("dimension", format!("expected 3, got {other}"))),
        None => return Err(Error::format("dimension", "missing")),
    }
    let dtype = dtype.ok_or_else(|| Error::format("type", "missing"))?;
    match encoding.as_deref() {
        Some("raw") => {}
        Some(other) => return Err(Error::format("encoding", format!("unsupported encoding `{other}`"))),
        None => return Err(Error::format("encoding", "missing")),
    }
    match (dtype, endian.as_deref()) {
        (_, Some("little")) | (DType::U8, None) | (DType::U8, Some(_)) => {}
        (_, Some(other)) => return Err(Error::format("endian", format!("unsupported endianness `{other}`"))),
        (_, None) => return Err(Error::format("endian", "missing for multi-byte type")),
    }
    let dims = sizes.ok_or_else(|| Error::format("sizes", "missing"))?;
    let geometry = Geometry::new(dims, spacing.unwrap_or([1.0; 3]), origin)?;
    check_payload(&geometry, dtype, payload.len())?;
    Volume::new(geometry, decode(dtype, payload))
}
