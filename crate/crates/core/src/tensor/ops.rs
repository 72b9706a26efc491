use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{matmul, Scalar, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Gradients of a valid 3-D convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

fn conv_out_dims(stage: &str, x: &Tensor<impl Scalar>, w_len: usize, cout: usize, k: usize) -> Result<[usize; 3]> {
    let cin = x.channels();
    if w_len != cout * cin * k * k * k {
        return Err(Error::shape(
            stage,
            format!("weight has {w_len} values, expected {cout}x{cin}x{k}^3"),
        ));
    }
    let sp = x.spatial();
    if sp.iter().any(|&d| d < k) {
        return Err(Error::shape(stage, format!("spatial dims {sp:?} smaller than kernel {k}")));
    }
    Ok([sp[0] - k + 1, sp[1] - k + 1, sp[2] - k + 1])
}

/// Unfolds one sample `(Cin, D, H, W)` into a `(Cin*k^3) x (Do*Ho*Wo)` matrix.
fn im2col<T: Scalar>(x: &[T], cin: usize, sp: [usize; 3], k: usize, out: [usize; 3], cols: &mut [T]) {
    let [_, h, w] = sp;
    let [od, oh, ow] = out;
    let s = od * oh * ow;
    let mut row = 0;
    for ci in 0..cin {
        let xc = &x[ci * sp[0] * h * w..];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * s..(row + 1) * s];
                    for z in 0..od {
                        for y in 0..oh {
                            let src = (z + kz) * h * w + (y + ky) * w + kx;
                            let d0 = (z * oh + y) * ow;
                            dst[d0..d0 + ow].copy_from_slice(&xc[src..src + ow]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a sample gradient.
fn col2im<T: Scalar>(cols: &[T], cin: usize, sp: [usize; 3], k: usize, out: [usize; 3], dx: &mut [T]) {
    let [_, h, w] = sp;
    let [od, oh, ow] = out;
    let s = od * oh * ow;
    let mut row = 0;
    for ci in 0..cin {
        let dxc = &mut dx[ci * sp[0] * h * w..];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * s..(row + 1) * s];
                    for z in 0..od {
                        for y in 0..oh {
                            let d = (z + kz) * h * w + (y + ky) * w + kx;
                            let s0 = (z * oh + y) * ow;
                            for (o, &v) in dxc[d..d + ow].iter_mut().zip(&src[s0..s0 + ow]) {
                                *o += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Valid (unpadded) 3-D cross-correlation with a cubic kernel of side `k`.
/// Weights are laid out `(Cout, Cin, k, k, k)`.
pub fn conv3d_valid<T: Scalar>(x: &Tensor<T>, w: &[T], b: &[T], cout: usize, k: usize) -> Result<Tensor<T>> {
    let out = conv_out_dims("conv3d", x, w.len(), cout, k)?;
    if b.len() != cout {
        return Err(Error::shape("conv3d", format!("bias has {} values, expected {cout}", b.len())));
    }
    let cin = x.channels();
    let sp = x.spatial();
    let s = out.iter().product::<usize>();
    let kk = cin * k * k * k;
    let mut y = Tensor::zeros([x.batch(), cout, out[0], out[1], out[2]]);
    y.data_mut()
        .par_chunks_mut(cout * s)
        .enumerate()
        .for_each(|(n, yn)| {
            let xn = x.sample(n);
            if k == 1 {
                matmul(cout, kk, s, w, false, xn, false, yn, T::zero());
            } else {
                let mut cols = vec![T::zero(); kk * s];
                im2col(xn, cin, sp, k, out, &mut cols);
                matmul(cout, kk, s, w, false, &cols, false, yn, T::zero());
            }
            for (co, plane) in yn.chunks_mut(s).enumerate() {
                let bias = b[co];
                for v in plane {
                    *v += bias;
                }
            }
        });
    Ok(y)
}

/// Backward pass of [`conv3d_valid`]. Per-sample weight gradients are reduced
/// in sample order so the result does not depend on the thread schedule.
pub fn conv3d_valid_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    cout: usize,
    k: usize,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let out = conv_out_dims("conv3d backward", x, w.len(), cout, k)?;
    if dy.shape() != [x.batch(), cout, out[0], out[1], out[2]] {
        return Err(Error::shape(
            "conv3d backward",
            format!("upstream gradient shape {:?} does not match output", dy.shape()),
        ));
    }
    let cin = x.channels();
    let sp = x.spatial();
    let s = out.iter().product::<usize>();
    let kk = cin * k * k * k;
    let in_len = cin * sp.iter().product::<usize>();

    let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
    let partials: Vec<(Vec<T>, Vec<T>)> = match dx.as_mut() {
        Some(dx) => dx
            .data_mut()
            .par_chunks_mut(in_len)
            .enumerate()
            .map(|(n, dxn)| conv_sample_backward(x, w, dy, n, cin, sp, k, out, s, kk, Some(dxn)))
            .collect(),
        None => (0..x.batch())
            .into_par_iter()
            .map(|n| conv_sample_backward(x, w, dy, n, cin, sp, k, out, s, kk, None))
            .collect(),
    };
    let mut dw = vec![T::zero(); cout * kk];
    let mut db = vec![T::zero(); cout];
    for (pw, pb) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

#[allow(clippy::too_many_arguments)]
fn conv_sample_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    dy: &Tensor<T>,
    n: usize,
    cin: usize,
    sp: [usize; 3],
    k: usize,
    out: [usize; 3],
    s: usize,
    kk: usize,
    dxn: Option<&mut [T]>,
) -> (Vec<T>, Vec<T>) {
    let cout = dy.channels();
    let dyn_ = dy.sample(n);
    let xn = x.sample(n);
    let mut dw = vec![T::zero(); cout * kk];
    let db: Vec<T> = dyn_.chunks(s).map(|p| p.iter().copied().sum()).collect();
    if k == 1 {
        matmul(cout, s, kk, dyn_, false, xn, true, &mut dw, T::zero());
        if let Some(dxn) = dxn {
            matmul(kk, cout, s, w, true, dyn_, false, dxn, T::zero());
        }
    } else {
        let mut cols = vec![T::zero(); kk * s];
        im2col(xn, cin, sp, k, out, &mut cols);
        matmul(cout, s, kk, dyn_, false, &cols, true, &mut dw, T::zero());
        if let Some(dxn) = dxn {
            matmul(kk, cout, s, w, true, dyn_, false, &mut cols, T::zero());
            col2im(&cols, cin, sp, k, out, dxn);
        }
    }
    (dw, db)
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Saved state of a train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel normalization over `(N, D, H, W)` with batch statistics.
pub fn batchnorm_train<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = x.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("batchnorm", format!("{} channels but {} gamma", c, gamma.len())));
    }
    let n = x.batch();
    let s = x.spatial_len();
    let count = (n * s) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..n {
            sum += x.plane(b, ch).iter().map(|v| v.f64()).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for b in 0..n {
            sq += x.plane(b, ch).iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>();
        }
        let v = sq / count;
        mean[ch] = T::c(m);
        var[ch] = T::c(v);
        inv_std[ch] = T::c(1.0 / (v + eps).sqrt());
    }
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            let (m, is, g, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            let src = x.plane(b, ch);
            let xh = &mut xhat.data_mut()[off..off + s];
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = (v - m) * is;
            }
            let xh = &xhat.data()[off..off + s];
            for (o, &v) in y.data_mut()[off..off + s].iter_mut().zip(xh) {
                *o = v * g + be;
            }
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Inference-mode normalization with running statistics.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    let c = x.channels();
    if gamma.len() != c || running_mean.len() != c || running_var.len() != c || beta.len() != c {
        return Err(Error::shape("batchnorm", "parameter length does not match channels"));
    }
    let s = x.spatial_len();
    let scale: Vec<T> = (0..c)
        .map(|ch| gamma[ch] * T::c(1.0 / (running_var[ch].f64() + eps).sqrt()))
        .collect();
    let mut y = x.clone();
    for (i, plane) in y.data_mut().chunks_mut(s).enumerate() {
        let ch = i % c;
        let (m, sc, be) = (running_mean[ch], scale[ch], beta[ch]);
        for v in plane {
            *v = (*v - m) * sc + be;
        }
    }
    Ok(y)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(dy: &Tensor<T>, cache: &BnCache<T>, gamma: &[T]) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = dy.channels();
    let n = dy.batch();
    let s = dy.spatial_len();
    let count = (n * s) as f64;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = Tensor::zeros(dy.shape());
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            for (&g, &xh) in dy.plane(b, ch).iter().zip(cache.xhat.plane(b, ch)) {
                sum_dy += g.f64();
                sum_dy_xhat += g.f64() * xh.f64();
            }
        }
        dgamma[ch] = T::c(sum_dy_xhat);
        dbeta[ch] = T::c(sum_dy);
        // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
        let k = gamma[ch] * cache.inv_std[ch];
        let mean_dy = T::c(sum_dy / count);
        let mean_dyx = T::c(sum_dy_xhat / count);
        for b in 0..n {
            let off = (b * c + ch) * s;
            let xh = cache.xhat.plane(b, ch);
            let g = dy.plane(b, ch);
            for ((o, &gv), &xv) in dx.data_mut()[off..off + s].iter_mut().zip(g).zip(xh) {
                *o = k * (gv - mean_dy - xv * mean_dyx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Prelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "prelu" => Ok(Activation::Prelu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Prelu => "prelu",
        })
    }
}

#[inline]
fn slope_of<T: Scalar>(kind: Activation, slopes: &[T], ch: usize) -> T {
    match kind {
        Activation::Relu => T::zero(),
        Activation::Prelu => slopes[ch],
    }
}

/// `x` for `x >= 0`, otherwise `a_c * x` (`a_c = 0` for ReLU).
pub fn activation<T: Scalar>(x: &Tensor<T>, slopes: &[T], kind: Activation) -> Tensor<T> {
    let c = x.channels();
    let s = x.spatial_len();
    let mut y = x.clone();
    for (i, plane) in y.data_mut().chunks_mut(s).enumerate() {
        let a = slope_of(kind, slopes, i % c);
        for v in plane {
            if *v < T::zero() {
                *v = *v * a;
            }
        }
    }
    y
}

/// Returns `dx` and, for PReLU, the per-channel slope gradient.
pub fn activation_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    slopes: &[T],
    kind: Activation,
) -> (Tensor<T>, Option<Vec<T>>) {
    let c = x.channels();
    let s = x.spatial_len();
    let mut dx = dy.clone();
    let mut da = vec![T::zero(); c];
    for (i, (g, xv)) in dx.data_mut().chunks_mut(s).zip(x.data().chunks(s)).enumerate() {
        let ch = i % c;
        let a = slope_of(kind, slopes, ch);
        let mut acc = T::zero();
        for (gv, &v) in g.iter_mut().zip(xv) {
            if v < T::zero() {
                acc += *gv * v;
                *gv = *gv * a;
            }
        }
        da[ch] += acc;
    }
    let da = (kind == Activation::Prelu).then_some(da);
    (dx, da)
}

// ---------------------------------------------------------------------------
// Residual junctions, resampling and channel plumbing
// ---------------------------------------------------------------------------

fn residual_offsets(deep: [usize; 3], shallow: [usize; 3]) -> Result<[usize; 3]> {
    let mut off = [0; 3];
    for a in 0..3 {
        if shallow[a] < deep[a] || !(shallow[a] - deep[a]).is_multiple_of(2) {
            return Err(Error::shape(
                "residual",
                format!("shallow dims {shallow:?} cannot be center-cropped to {deep:?}"),
            ));
        }
        off[a] = (shallow[a] - deep[a]) / 2;
    }
    Ok(off)
}

/// `deep + crop(shallow)`, with missing shallow channels read as zero and
/// extra shallow channels dropped.
pub fn residual_add<T: Scalar>(deep: &Tensor<T>, shallow: &Tensor<T>) -> Result<Tensor<T>> {
    if deep.batch() != shallow.batch() {
        return Err(Error::shape("residual", "batch sizes differ"));
    }
    let [dd, dh, dw] = deep.spatial();
    let [_, sh, sw] = shallow.spatial();
    let off = residual_offsets(deep.spatial(), shallow.spatial())?;
    let shared = deep.channels().min(shallow.channels());
    let mut out = deep.clone();
    let s = deep.spatial_len();
    for n in 0..deep.batch() {
        for c in 0..shared {
            let src = shallow.plane(n, c);
            let base = (n * deep.channels() + c) * s;
            let dst = &mut out.data_mut()[base..base + s];
            for z in 0..dd {
                for y in 0..dh {
                    let si = ((z + off[0]) * sh + y + off[1]) * sw + off[2];
                    let di = (z * dh + y) * dw;
                    for (o, &v) in dst[di..di + dw].iter_mut().zip(&src[si..si + dw]) {
                        *o += v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`residual_add`] with respect to the shallow operand. The
/// gradient with respect to the deep operand is the upstream gradient itself.
pub fn residual_backward_shallow<T: Scalar>(dout: &Tensor<T>, shallow_shape: [usize; 5]) -> Result<Tensor<T>> {
    let [dd, dh, dw] = dout.spatial();
    let sp = [shallow_shape[2], shallow_shape[3], shallow_shape[4]];
    let off = residual_offsets(dout.spatial(), sp)?;
    let shared = dout.channels().min(shallow_shape[1]);
    let mut ds = Tensor::zeros(shallow_shape);
    let ss = sp.iter().product::<usize>();
    for n in 0..dout.batch() {
        for c in 0..shared {
            let src = dout.plane(n, c);
            let base = (n * shallow_shape[1] + c) * ss;
            let dst = &mut ds.data_mut()[base..base + ss];
            for z in 0..dd {
                for y in 0..dh {
                    let si = ((z + off[0]) * sp[1] + y + off[1]) * sp[2] + off[2];
                    let di = (z * dh + y) * dw;
                    dst[si..si + dw].copy_from_slice(&src[di..di + dw]);
                }
            }
        }
    }
    Ok(ds)
}

/// Nearest-neighbour upsampling: every voxel becomes a `k^3` block.
pub fn upsample_repeat<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k == 0 {
        return Err(Error::shape("upsample", "factor must be at least 1"));
    }
    let [d, h, w] = x.spatial();
    let (od, oh, ow) = (d * k, h * k, w * k);
    let mut y = Tensor::zeros([x.batch(), x.channels(), od, oh, ow]);
    let os = od * oh * ow;
    for (src, dst) in x.data().chunks(d * h * w).zip(y.data_mut().chunks_mut(os)) {
        for z in 0..od {
            for yy in 0..oh {
                let srow = &src[((z / k) * h + yy / k) * w..][..w];
                let drow = &mut dst[(z * oh + yy) * ow..][..ow];
                for (xx, o) in drow.iter_mut().enumerate() {
                    *o = srow[xx / k];
                }
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`upsample_repeat`]: sums each `k^3` block.
pub fn upsample_repeat_backward<T: Scalar>(dy: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [od, oh, ow] = dy.spatial();
    if k == 0 || od % k != 0 || oh % k != 0 || ow % k != 0 {
        return Err(Error::shape("upsample backward", "dims not divisible by factor"));
    }
    let (d, h, w) = (od / k, oh / k, ow / k);
    let mut dx = Tensor::zeros([dy.batch(), dy.channels(), d, h, w]);
    for (src, dst) in dy.data().chunks(od * oh * ow).zip(dx.data_mut().chunks_mut(d * h * w)) {
        for z in 0..od {
            for yy in 0..oh {
                let srow = &src[(z * oh + yy) * ow..][..ow];
                let drow = &mut dst[((z / k) * h + yy / k) * w..][..w];
                for (xx, &v) in srow.iter().enumerate() {
                    drow[xx / k] += v;
                }
            }
        }
    }
    Ok(dx)
}

fn crop_offsets(stage: &str, sp: [usize; 3], side: usize) -> Result<[usize; 3]> {
    if sp.iter().any(|&d| d < side) {
        return Err(Error::shape(stage, format!("cannot crop {sp:?} to side {side}")));
    }
    Ok(sp.map(|d| (d - side) / 2))
}

/// Centered cube of the given side; offset `floor((dim - side) / 2)` per axis.
pub fn center_crop<T: Scalar>(x: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let sp = x.spatial();
    let off = crop_offsets("center_crop", sp, side)?;
    let mut y = Tensor::zeros([x.batch(), x.channels(), side, side, side]);
    for (src, dst) in x.data().chunks(sp.iter().product()).zip(y.data_mut().chunks_mut(side * side * side)) {
        for z in 0..side {
            for yy in 0..side {
                let si = ((z + off[0]) * sp[1] + yy + off[1]) * sp[2] + off[2];
                dst[(z * side + yy) * side..][..side].copy_from_slice(&src[si..si + side]);
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`center_crop`]: zero-pads back to `spatial`.
pub fn center_crop_backward<T: Scalar>(dy: &Tensor<T>, spatial: [usize; 3]) -> Result<Tensor<T>> {
    let side = dy.spatial()[0];
    let off = crop_offsets("center_crop backward", spatial, side)?;
    let mut dx = Tensor::zeros([dy.batch(), dy.channels(), spatial[0], spatial[1], spatial[2]]);
    for (src, dst) in dy
        .data()
        .chunks(side * side * side)
        .zip(dx.data_mut().chunks_mut(spatial.iter().product()))
    {
        for z in 0..side {
            for yy in 0..side {
                let di = ((z + off[0]) * spatial[1] + yy + off[1]) * spatial[2] + off[2];
                dst[di..di + side].copy_from_slice(&src[(z * side + yy) * side..][..side]);
            }
        }
    }
    Ok(dx)
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
    let (n, sp) = (first.batch(), first.spatial());
    if parts.iter().any(|p| p.batch() != n || p.spatial() != sp) {
        return Err(Error::shape("concat", "batch or spatial dims differ between pathways"));
    }
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(n * c * first.spatial_len());
    for b in 0..n {
        for p in parts {
            data.extend_from_slice(p.sample(b));
        }
    }
    Tensor::from_vec([n, c, sp[0], sp[1], sp[2]], data)
}

/// Splits along the channel axis into consecutive groups of the given sizes.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if sizes.iter().sum::<usize>() != x.channels() {
        return Err(Error::shape("split", "channel sizes do not sum to tensor channels"));
    }
    let s = x.spatial_len();
    let sp = x.spatial();
    let mut start = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for &c in sizes {
        let mut data = Vec::with_capacity(x.batch() * c * s);
        for b in 0..x.batch() {
            let smp = x.sample(b);
            data.extend_from_slice(&smp[start * s..(start + c) * s]);
        }
        out.push(Tensor::from_vec([x.batch(), c, sp[0], sp[1], sp[2]], data)?);
        start += c;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Channel-wise softmax of `(N, C, D, H, W)` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.channels();
    let s = logits.spatial_len();
    let mut out = Tensor::zeros(logits.shape());
    let mut buf = vec![0.0f64; c];
    for n in 0..logits.batch() {
        let src = logits.sample(n);
        let base = n * c * s;
        for v in 0..s {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                buf[ch] = src[ch * s + v].f64();
                max = max.max(buf[ch]);
            }
            let mut z = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - max).exp();
                z += *b;
            }
            for ch in 0..c {
                out.data_mut()[base + ch * s + v] = T::c(buf[ch] / z);
            }
        }
    }
    out
}

/// Mean voxel-wise cross-entropy and its gradient. `targets` holds one label
/// per output voxel in `(N, D, H, W)` order.
pub fn softmax_ce<T: Scalar>(logits: &Tensor<T>, targets: &[u8]) -> Result<(f64, Tensor<T>)> {
    let c = logits.channels();
    let s = logits.spatial_len();
    let count = logits.batch() * s;
    if targets.len() != count {
        return Err(Error::shape(
            "softmax_ce",
            format!("{} targets for {} output voxels", targets.len(), count),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(Error::Validation(format!("target label {bad} out of range for {c} classes")));
    }
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    let inv = 1.0 / count as f64;
    for n in 0..logits.batch() {
        let lsrc = logits.sample(n);
        for v in 0..s {
            let t = targets[n * s + v] as usize;
            // log-sum-exp in f64 for a finite loss even when probs underflow
            let max = (0..c).map(|ch| lsrc[ch * s + v].f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|ch| (lsrc[ch * s + v].f64() - max).exp()).sum::<f64>().ln();
            loss += lse - lsrc[t * s + v].f64();
            let g = grad.data_mut();
            for ch in 0..c {
                let idx = n * c * s + ch * s + v;
                let p = g[idx].f64();
                g[idx] = T::c((p - if ch == t { 1.0 } else { 0.0 }) * inv);
            }
        }
    }
    Ok((loss * inv, grad))
}
