//! Network checkpoints: a JSON manifest plus one little-endian f32 blob.
//!
//! A checkpoint is a directory holding `manifest.json` and `params.bin`.
//! The manifest lists every tensor (parameters, BN buffers and, when
//! present, Adam moments named `adam.m.<param>` / `adam.v.<param>`) with its
//! shape and element offset into the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::net::{NetConfig, Network, Role};
use crate::optim::AdamState;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: Network<f32>,
    pub adam: Option<AdamState<f32>>,
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dtype: String,
    iteration: u64,
    config: NetConfig,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Borrowing view used to save without cloning the network.
pub struct CheckpointRef<'a> {
    net: &'a Network<f32>,
    adam: Option<&'a AdamState<f32>>,
    iteration: u64,
}

impl Checkpoint {
    pub fn borrowed<'a>(net: &'a Network<f32>, adam: Option<&'a AdamState<f32>>, iteration: u64) -> CheckpointRef<'a> {
        CheckpointRef { net, adam, iteration }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        Checkpoint::borrowed(&self.net, self.adam.as_ref(), self.iteration).save(dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                "format_version",
                format!("unsupported version {}", manifest.format_version),
            ));
        }
        if manifest.dtype != "f32" {
            return Err(Error::format("dtype", format!("expected f32, found {}", manifest.dtype)));
        }
        let bpath = dir.join(BLOB_FILE);
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Integrity(format!("blob length {} is not a multiple of 4", bytes.len())));
        }
        let blob: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if blob.len() != expected {
            return Err(Error::Integrity(format!(
                "blob holds {} values but the manifest describes {expected}",
                blob.len()
            )));
        }

        let mut net = Network::<f32>::zeros(manifest.config.clone())?;
        let mut entries = manifest.tensors.iter();
        let mut take = |name: &str, len: usize| -> Result<&[f32]> {
            let e = entries
                .next()
                .ok_or_else(|| Error::Integrity(format!("manifest ends before tensor {name}")))?;
            let n: usize = e.shape.iter().product();
            if e.name != name || n != len {
                return Err(Error::Integrity(format!(
                    "expected tensor {name} with {len} values, manifest has {} with {n}",
                    e.name
                )));
            }
            blob.get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Integrity(format!("tensor {name} lies outside the blob")))
        };
        let mut trainable = Vec::new();
        for (name, role, dst) in net.tensors_mut() {
            let len = dst.len();
            dst.copy_from_slice(take(&name, len)?);
            if role == Role::Trainable {
                trainable.push((name, len));
            }
        }
        let adam = match manifest.adam_step {
            None => None,
            Some(t) => {
                let mut st = AdamState::<f32>::new(trainable.iter().map(|t| t.1));
                st.t = t;
                for (i, (name, len)) in trainable.iter().enumerate() {
                    st.m[i].copy_from_slice(take(&format!("adam.m.{name}"), *len)?);
                }
                for (i, (name, len)) in trainable.iter().enumerate() {
                    st.v[i].copy_from_slice(take(&format!("adam.v.{name}"), *len)?);
                }
                st.validate()?;
                Some(st)
            }
        };
        if let Some(e) = entries.next() {
            return Err(Error::Integrity(format!("unexpected extra tensor {}", e.name)));
        }
        Ok(Checkpoint {
            net,
            adam,
            iteration: manifest.iteration,
        })
    }

    /// Loads and checks the stored network against the configuration of the current run.
    pub fn load_for(dir: impl AsRef<Path>, expected: &NetConfig) -> Result<Self> {
        let ck = Self::load(dir)?;
        let found = &ck.net.config;
        if found.activation != expected.activation {
            return Err(Error::Config(format!(
                "checkpoint was trained with {} activations, run expects {}",
                found.activation, expected.activation
            )));
        }
        if found != expected {
            return Err(Error::Config(format!(
                "checkpoint network {found:?} does not match configured network {expected:?}"
            )));
        }
        Ok(ck)
    }
}

impl CheckpointRef<'_> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        let mut bytes = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: bytes.len() / 4,
            });
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        };
        let all = self.net.tensors();
        for (name, _, shape, data) in &all {
            push(name.clone(), shape.clone(), data);
        }
        if let Some(st) = self.adam {
            let trainable: Vec<_> = all.iter().filter(|t| t.1 == Role::Trainable).collect();
            if trainable.len() != st.m.len() {
                return Err(Error::Validation("adam state does not match the network parameters".into()));
            }
            for (which, arrays) in [("m", &st.m), ("v", &st.v)] {
                for (t, a) in trainable.iter().zip(arrays.iter()) {
                    push(format!("adam.{which}.{}", t.0), t.2.clone(), a);
                }
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: "f32".into(),
            iteration: self.iteration,
            config: self.net.config.clone(),
            adam_step: self.adam.map(|s| s.t),
            tensors,
        };
        let bpath = dir.join(BLOB_FILE);
        fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetConfig {
        NetConfig {
            widths: vec![2, 3],
            head_widths: vec![4, 3],
            activation: Activation::Prelu,
            factors: vec![1, 3],
            out_block: 3,
        }
    }

    fn with_adam() -> Checkpoint {
        let mut net = Network::<f32>::init(small(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        net.pathways[0][0].bn_running_var[1] = 0.37;
        let lens: Vec<usize> = net.params_mut().iter().map(|p| p.1.len()).collect();
        let mut adam = AdamState::<f32>::new(lens);
        adam.t = 9;
        adam.m[0][0] = -0.5;
        adam.v[2][0] = 0.25;
        Checkpoint {
            net,
            adam: Some(adam),
            iteration: 123,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ck = with_adam();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let bits = |c: &Checkpoint| c.net.tensors().iter().flat_map(|t| t.3.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ck));
    }

    #[test]
    fn truncated_blob_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        with_adam().save(dir.path()).unwrap();
        let p = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn activation_guard() {
        let dir = tempfile::tempdir().unwrap();
        with_adam().save(dir.path()).unwrap();
        let mut relu = small();
        relu.activation = Activation::Relu;
        let err = Checkpoint::load_for(dir.path(), &relu).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("prelu")), "{err}");
        assert!(Checkpoint::load_for(dir.path(), &small()).is_ok());
    }

    #[test]
    fn without_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint {
            adam: None,
            ..with_adam()
        };
        ck.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ck);
    }
}
