//! Layer and inter-token normalization statistics.
//!
//! Both normalizers share one statistics container and one affine
//! transform. Layer statistics reduce over channels within each token;
//! inter-token statistics reduce over tokens within each channel.
//! Variances are biased (divide by the count, not count - 1).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::CoreError;
use crate::tensor::{reduce_stats, Tensor, TokenTensor};

/// Which estimator produced a set of statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatsProvenance {
    Layer,
    InterToken,
    Dynamic,
}

/// Per-entry mean and variance, broadcast to the full `(B, T, C)` shape.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub provenance: StatsProvenance,
    /// Set when the reduced axis had length 1, making every variance 0.
    pub degenerate_axis: bool,
}

/// Per-channel scale and shift applied after normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    pub fn identity(channels: usize) -> Self {
        AffineParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn new(gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self, CoreError> {
        if gamma.len() != beta.len() {
            return Err(CoreError::invalid(format!(
                "gamma has {} channels, beta has {}",
                gamma.len(),
                beta.len()
            )));
        }
        if let Some(v) = gamma.iter().chain(&beta).find(|v| !v.is_finite()) {
            return Err(CoreError::invalid(format!("non-finite affine parameter {v}")));
        }
        Ok(AffineParams { gamma, beta })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Default variance floor used throughout the crate.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-token statistics over the channel axis.
pub fn ln_stats(x: &TokenTensor) -> Result<NormStats, CoreError> {
    let (b, t, c) = (x.batch(), x.tokens(), x.channels());
    if c == 0 {
        return Err(CoreError::EmptyInput("ln_stats: zero channels"));
    }
    let mut mean = vec![0.0; b * t * c];
    let mut var = vec![0.0; b * t * c];
    let data = x.tensor().data();
    for bt in 0..b * t {
        let row = &data[bt * c..(bt + 1) * c];
        let (m, v) = reduce_stats(row)?;
        mean[bt * c..(bt + 1) * c].fill(m);
        var[bt * c..(bt + 1) * c].fill(v);
    }
    Ok(NormStats {
        mean: Tensor::from_vec(vec![b, t, c], mean)?,
        var: Tensor::from_vec(vec![b, t, c], var)?,
        provenance: StatsProvenance::Layer,
        degenerate_axis: c == 1,
    })
}

/// Per-channel statistics over the token axis.
pub fn in_stats(x: &TokenTensor) -> Result<NormStats, CoreError> {
    let (b, t, c) = (x.batch(), x.tokens(), x.channels());
    if t == 0 {
        return Err(CoreError::EmptyInput("in_stats: zero tokens"));
    }
    let data = x.tensor().data();
    let mut mean = vec![0.0; b * t * c];
    let mut var = vec![0.0; b * t * c];
    let mut column = vec![0.0; t];
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                column[ti] = data[(bi * t + ti) * c + ci];
            }
            let (m, v) = reduce_stats(&column)?;
            for ti in 0..t {
                mean[(bi * t + ti) * c + ci] = m;
                var[(bi * t + ti) * c + ci] = v;
            }
        }
    }
    Ok(NormStats {
        mean: Tensor::from_vec(vec![b, t, c], mean)?,
        var: Tensor::from_vec(vec![b, t, c], var)?,
        provenance: StatsProvenance::InterToken,
        degenerate_axis: t == 1,
    })
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` per channel.
pub fn affine_normalize(
    x: &TokenTensor,
    stats: &NormStats,
    affine: &AffineParams,
    eps: f64,
) -> Result<TokenTensor, CoreError> {
    let (b, t, c) = (x.batch(), x.tokens(), x.channels());
    if eps <= 0.0 {
        return Err(CoreError::invalid("affine_normalize: eps must be positive"));
    }
    if stats.mean.shape() != x.tensor().shape() || stats.var.shape() != x.tensor().shape() {
        return Err(CoreError::ShapeMismatch {
            context: "affine_normalize stats",
            left: x.tensor().shape().to_vec(),
            right: stats.mean.shape().to_vec(),
        });
    }
    if affine.channels() != c {
        return Err(CoreError::invalid(format!(
            "affine has {} channels, input has {c}",
            affine.channels()
        )));
    }
    if let Some((index, value)) = stats.var.data().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(CoreError::invalid(format!(
            "negative variance {value} at flat index {index}"
        )));
    }
    let data = x.tensor().data();
    let mut out = vec![0.0; b * t * c];
    for bt in 0..b * t {
        for ci in 0..c {
            let i = bt * c + ci;
            let norm = (data[i] - stats.mean.data()[i]) / (stats.var.data()[i] + eps).sqrt();
            out[i] = norm * affine.gamma[ci] + affine.beta[ci];
        }
    }
    TokenTensor::from_parts(b, t, c, out)
}

/// Differentiable layer normalization over the channel axis of a
/// `(B, T, C)` tape value, with per-channel affine.
pub fn ln_forward_tape(tape: &Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
    let shape = tape.shape(x);
    let c = *shape.last().expect("ln_forward_tape: rank 0 input");
    let axis = shape.len() - 1;
    let mu = tape.mean_axis(x, axis);
    let xc = tape.sub(x, mu);
    let var = tape.mean_axis(tape.mul(xc, xc), axis);
    let y = tape.div(xc, tape.sqrt(tape.add_scalar(var, eps)));
    let mut affine_shape = vec![1; shape.len()];
    affine_shape[axis] = c;
    let gamma = tape.reshape(gamma, &affine_shape);
    let beta = tape.reshape(beta, &affine_shape);
    tape.add(tape.mul(y, gamma), beta)
}
