use crate::tensor::Scalar;
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates mirroring a list of parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lens: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = lens.into_iter().collect();
        AdamState {
            m: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m.len() != self.v.len() || self.m.iter().zip(&self.v).any(|(m, v)| m.len() != v.len()) {
            return Err(Error::Validation("adam moment arrays disagree in shape".into()));
        }
        if self.v.iter().flatten().any(|v| !(*v >= T::zero())) {
            return Err(Error::Validation("adam second moment must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn adam_step<T: Scalar>(params: &mut [&mut Vec<T>], grads: &[&[T]], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam",
            format!(
                "{} parameter arrays, {} gradient arrays, {} moment arrays",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape(
                "adam",
                format!("array {i}: parameter {} gradient {} moment {}", p.len(), g.len(), state.m[i].len()),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::c(BETA1), T::c(BETA2));
    let (c1, c2) = (T::c(1.0 - BETA1), T::c(1.0 - BETA2));
    let corr1 = T::c(1.0 - BETA1.powi(t));
    let corr2 = T::c(1.0 - BETA2.powi(t));
    let (lr, eps) = (T::c(lr), T::c(EPS));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + c1 * gj;
            v[j] = b2 * v[j] + c2 * gj * gj;
            let mhat = m[j] / corr1;
            let vhat = v[j] / corr2;
            p[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
