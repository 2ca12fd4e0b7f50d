//! Dynamic token normalization.
//!
//! Each head mixes per-token layer statistics with position-weighted
//! inter-token statistics. The mixing weights are `sigmoid(omega)`,
//! held separately for the mean and the variance, and the inter-token
//! weighting is a row-stochastic positional attention built from
//! relative positions on the (optionally pooled) patch grid:
//!
//!   mean_h = lam_h * ln_mean + (1 - lam_h) * P_h x_h
//!   var_h  = lam_h * ln_var  + (1 - lam_h) * [P_h(x_h^2) - (P_h x_h)^2]
//!
//! with `P_h = softmax_rows(R a_h)` and `R_ij = [dx^2 + dy^2, dx, dy]`.
//! At `lam = 1` every head reduces to layer normalization; at `lam = 0`
//! with uniform `P` and no pooling it reduces to inter-token
//! normalization. `a_h = [-1, 2*d1, 2*d2]` places each head's initial
//! attention peak at grid offset `(d1, d2)`: the row logit equals
//! `-(dx - d1)^2 - (dy - d2)^2` up to a per-row constant.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::CoreError;
use crate::grid::{
    build_rel_pos, init_offsets, pool_tokens, pooling_matrices, GridGeometry, RelPosEmbedding,
};
use crate::norm::{affine_normalize, ln_stats, AffineParams, NormStats, StatsProvenance};
use crate::tensor::{softmax_rows, Tensor, TokenTensor};

/// Row-stochastic positional attention for one head, on the pooled grid.
#[derive(Clone, Debug)]
pub struct PositionalAttention {
    head: usize,
    p: Tensor,
}

/// Maximum deviation of a row sum from 1 accepted at construction.
pub const ROW_SUM_TOL: f64 = 1e-6;

impl PositionalAttention {
    pub fn new(head: usize, p: Tensor) -> Result<Self, CoreError> {
        let t = match p.shape() {
            [r, c] if r == c => *r,
            s => {
                return Err(CoreError::invalid(format!(
                    "positional attention must be square, got {s:?}"
                )))
            }
        };
        if let Some((index, value)) = p.first_non_finite() {
            return Err(CoreError::NonFinite {
                context: "positional attention",
                index,
                value,
            });
        }
        for i in 0..t {
            let row = &p.data()[i * t..(i + 1) * t];
            if row.iter().any(|v| *v < 0.0) {
                return Err(CoreError::invalid(format!(
                    "positional attention row {i} has a negative entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(CoreError::invalid(format!(
                    "positional attention row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(PositionalAttention { head, p })
    }

    /// Exact uniform attention: every entry `1/T`.
    pub fn uniform(head: usize, tokens: usize) -> Self {
        PositionalAttention {
            head,
            p: Tensor::filled(&[tokens, tokens], 1.0 / tokens as f64),
        }
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn tokens(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.p
    }
}

/// Parameters of one normalizer instance: per-head mixing logits and
/// position coefficients, plus the per-channel affine.
#[derive(Clone, Debug, PartialEq)]
pub struct DtnParams {
    pub omega_mean: Vec<f64>,
    pub omega_var: Vec<f64>,
    pub a: Vec<[f64; 3]>,
    pub affine: AffineParams,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl DtnParams {
    /// Initial parameters: `omega = 0` (even mixture) and position
    /// coefficients `[-1, 2*d1, 2*d2]` from the centred offset window,
    /// identity affine.
    pub fn init(g: &GridGeometry, channels: usize) -> Result<Self, CoreError> {
        if channels == 0 || channels % g.heads() != 0 {
            return Err(CoreError::invalid(format!(
                "channel count {channels} not divisible by {} heads",
                g.heads()
            )));
        }
        let a = init_offsets(g.heads())
            .into_iter()
            .map(|(d1, d2)| [-1.0, 2.0 * d1 as f64, 2.0 * d2 as f64])
            .collect();
        Ok(DtnParams {
            omega_mean: vec![0.0; g.heads()],
            omega_var: vec![0.0; g.heads()],
            a,
            affine: AffineParams::identity(channels),
        })
    }

    pub fn heads(&self) -> usize {
        self.omega_mean.len()
    }

    pub fn channels(&self) -> usize {
        self.affine.channels()
    }

    pub fn lambda_mean(&self) -> Vec<f64> {
        self.omega_mean.iter().map(|w| sigmoid(*w)).collect()
    }

    pub fn lambda_var(&self) -> Vec<f64> {
        self.omega_var.iter().map(|w| sigmoid(*w)).collect()
    }

    pub fn validate(&self, g: &GridGeometry) -> Result<(), CoreError> {
        let h = g.heads();
        if self.omega_mean.len() != h || self.omega_var.len() != h || self.a.len() != h {
            return Err(CoreError::invalid(format!(
                "parameter head count ({}, {}, {}) does not match geometry heads {h}",
                self.omega_mean.len(),
                self.omega_var.len(),
                self.a.len()
            )));
        }
        if self.channels() % h != 0 {
            return Err(CoreError::invalid(format!(
                "channel count {} not divisible by {h} heads",
                self.channels()
            )));
        }
        let finite = self
            .omega_mean
            .iter()
            .chain(&self.omega_var)
            .chain(self.a.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(CoreError::invalid("non-finite normalizer parameter".to_string()));
        }
        Ok(())
    }
}

/// Positional attention for every head: `softmax_rows(R a_h)`.
pub fn build_positional_attention(
    r: &RelPosEmbedding,
    a: &[[f64; 3]],
) -> Result<Vec<PositionalAttention>, CoreError> {
    let t = r.tokens();
    let mut out = Vec::with_capacity(a.len());
    for (head, coeff) in a.iter().enumerate() {
        let mut logits = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                let rij = r.get(i, j);
                logits[i * t + j] = rij[0] * coeff[0] + rij[1] * coeff[1] + rij[2] * coeff[2];
            }
        }
        let p = softmax_rows(&Tensor::from_vec(vec![t, t], logits)?)?;
        out.push(PositionalAttention::new(head, p)?);
    }
    Ok(out)
}

/// Mixed statistics with explicit mixing weights per head (both in
/// `[0, 1]`). The inter-token variance is clamped at zero before the
/// mixture so downstream normalization never sees a negative variance.
pub fn dtn_stats_with_lambda(
    x: &TokenTensor,
    p: &[PositionalAttention],
    g: &GridGeometry,
    lambda_mean: &[f64],
    lambda_var: &[f64],
) -> Result<NormStats, CoreError> {
    let (b, t, c) = (x.batch(), x.tokens(), x.channels());
    let h = g.heads();
    if t != g.tokens() {
        return Err(CoreError::ShapeMismatch {
            context: "dtn_stats tokens",
            left: vec![t],
            right: vec![g.tokens()],
        });
    }
    if c % h != 0 {
        return Err(CoreError::invalid(format!(
            "channel count {c} not divisible by {h} heads"
        )));
    }
    g.require_inter_token()?;
    if p.len() != h || lambda_mean.len() != h || lambda_var.len() != h {
        return Err(CoreError::invalid(format!(
            "expected {h} heads, got {} attention matrices, {} mean weights, {} var weights",
            p.len(),
            lambda_mean.len(),
            lambda_var.len()
        )));
    }
    let tp = g.pooled_tokens();
    for pa in p {
        if pa.tokens() != tp {
            return Err(CoreError::ShapeMismatch {
                context: "positional attention size",
                left: vec![pa.tokens()],
                right: vec![tp],
            });
        }
    }
    for lam in lambda_mean.iter().chain(lambda_var) {
        if !lam.is_finite() || *lam < 0.0 || *lam > 1.0 {
            return Err(CoreError::invalid(format!(
                "mixing weight {lam} outside [0, 1]"
            )));
        }
    }

    let ln = ln_stats(x)?;
    let pooled = pool_tokens(x, g)?;
    let pooled_data = pooled.tensor().data();
    let width = c / h;

    let mut mean = vec![0.0; b * t * c];
    let mut var = vec![0.0; b * t * c];
    let mut mbar = vec![0.0; b * tp * width];
    let mut ebar = vec![0.0; b * tp * width];

    for head in 0..h {
        let pmat = p[head].matrix().data();
        mbar.fill(0.0);
        ebar.fill(0.0);
        for bi in 0..b {
            for u in 0..tp {
                let dst = (bi * tp + u) * width;
                for v in 0..tp {
                    let w = pmat[u * tp + v];
                    if w == 0.0 {
                        continue;
                    }
                    let src = (bi * tp + v) * c + head * width;
                    for j in 0..width {
                        let xv = pooled_data[src + j];
                        mbar[dst + j] += w * xv;
                        ebar[dst + j] += w * xv * xv;
                    }
                }
            }
        }
        let (lm, lv) = (lambda_mean[head], lambda_var[head]);
        for bi in 0..b {
            for ti in 0..t {
                let pid = g.pooled_index(ti);
                let pooled_base = (bi * tp + pid) * width;
                for j in 0..width {
                    let ci = head * width + j;
                    let i = (bi * t + ti) * c + ci;
                    let pm = mbar[pooled_base + j];
                    let pv = (ebar[pooled_base + j] - pm * pm).max(0.0);
                    mean[i] = lm * ln.mean.data()[i] + (1.0 - lm) * pm;
                    var[i] = lv * ln.var.data()[i] + (1.0 - lv) * pv;
                }
            }
        }
    }

    Ok(NormStats {
        mean: Tensor::from_vec(vec![b, t, c], mean)?,
        var: Tensor::from_vec(vec![b, t, c], var)?,
        provenance: StatsProvenance::Dynamic,
        degenerate_axis: false,
    })
}

/// Mixed statistics with weights taken from `params` via the sigmoid.
pub fn dtn_stats(
    x: &TokenTensor,
    params: &DtnParams,
    p: &[PositionalAttention],
    g: &GridGeometry,
) -> Result<NormStats, CoreError> {
    params.validate(g)?;
    dtn_stats_with_lambda(x, p, g, &params.lambda_mean(), &params.lambda_var())
}

/// Full forward pass: build positional attention from the parameters,
/// mix statistics, then normalize with the affine.
pub fn dtn_forward(
    x: &TokenTensor,
    params: &DtnParams,
    g: &GridGeometry,
    eps: f64,
) -> Result<TokenTensor, CoreError> {
    params.validate(g)?;
    if x.channels() != params.channels() {
        return Err(CoreError::ShapeMismatch {
            context: "dtn_forward channels",
            left: vec![x.channels()],
            right: vec![params.channels()],
        });
    }
    let r = build_rel_pos(g);
    let p = build_positional_attention(&r, &params.a)?;
    let stats = dtn_stats(x, params, &p, g)?;
    affine_normalize(x, &stats, &params.affine, eps)
}

// ── Tape (differentiable) path ──────────────────────────────────────

/// Tape handles for every trainable parameter of one normalizer.
#[derive(Clone, Copy, Debug)]
pub struct DtnVars {
    pub omega_mean: Var,
    pub omega_var: Var,
    /// Shape `(H, 3)`.
    pub a: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl DtnVars {
    /// Push every parameter of `params` onto the tape.
    pub fn from_params(tape: &Tape, params: &DtnParams) -> DtnVars {
        let h = params.heads();
        let a_flat: Vec<f64> = params.a.iter().flatten().copied().collect();
        DtnVars {
            omega_mean: tape.input(Tensor::from_vec(vec![h], params.omega_mean.clone()).unwrap()),
            omega_var: tape.input(Tensor::from_vec(vec![h], params.omega_var.clone()).unwrap()),
            a: tape.input(Tensor::from_vec(vec![h, 3], a_flat).unwrap()),
            gamma: tape.input(
                Tensor::from_vec(vec![params.channels()], params.affine.gamma.clone()).unwrap(),
            ),
            beta: tape.input(
                Tensor::from_vec(vec![params.channels()], params.affine.beta.clone()).unwrap(),
            ),
        }
    }
}

/// Differentiable forward pass on the tape; numerically equivalent to
/// `dtn_forward`. Panics on malformed shapes (programmer error).
pub fn dtn_forward_tape(tape: &Tape, x: Var, vars: &DtnVars, g: &GridGeometry, eps: f64) -> Var {
    let shape = tape.shape(x);
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let h = g.heads();
    assert_eq!(t, g.tokens(), "dtn_forward_tape: token count mismatch");
    assert_eq!(c % h, 0, "dtn_forward_tape: channels not divisible by heads");
    g.require_inter_token()
        .expect("dtn_forward_tape: pooled grid too small");
    let (tp, w) = (g.pooled_tokens(), c / h);

    // P = softmax(R a) per head, built on the pooled grid.
    let r_t = tape.input(build_rel_pos(g).as_matrix().swap_last2()); // (3, T'^2)
    let logits = tape.reshape(tape.matmul(vars.a, r_t), &[h, tp, tp]);
    let p = tape.softmax_last(logits);

    // Pooled per-head first and second moments.
    let (pool, up) = pooling_matrices(g);
    let pooled = tape.matmul(tape.input(pool), x); // (B, T', C)
    let ph = tape.permute(tape.reshape(pooled, &[b, tp, h, w]), &[0, 2, 1, 3]); // (B, H, T', w)
    let mbar = tape.matmul(p, ph);
    let ebar = tape.matmul(p, tape.mul(ph, ph));
    let vbar = tape.clamp_min(tape.sub(ebar, tape.mul(mbar, mbar)), 0.0);

    // Broadcast pooled statistics back to full resolution.
    let up_var = tape.input(up);
    let inter_mean = tape.matmul(up_var, mbar); // (B, H, T, w)
    let inter_var = tape.matmul(up_var, vbar);

    // Layer statistics at full resolution, shared across heads.
    let mu = tape.mean_axis(x, 2); // (B, T, 1)
    let xc = tape.sub(x, mu);
    let ln_var = tape.mean_axis(tape.mul(xc, xc), 2);
    let mu_r = tape.reshape(mu, &[b, 1, t, 1]);
    let ln_var_r = tape.reshape(ln_var, &[b, 1, t, 1]);

    // Per-head mixture weights.
    let lam_m = tape.reshape(tape.sigmoid(vars.omega_mean), &[1, h, 1, 1]);
    let lam_v = tape.reshape(tape.sigmoid(vars.omega_var), &[1, h, 1, 1]);
    let com_m = tape.add_scalar(tape.mul_scalar(lam_m, -1.0), 1.0);
    let com_v = tape.add_scalar(tape.mul_scalar(lam_v, -1.0), 1.0);
    let mean = tape.add(tape.mul(lam_m, mu_r), tape.mul(com_m, inter_mean));
    let var = tape.add(tape.mul(lam_v, ln_var_r), tape.mul(com_v, inter_var));

    // Normalize per head and restore (B, T, C).
    let xh = tape.permute(tape.reshape(x, &[b, t, h, w]), &[0, 2, 1, 3]);
    let y = tape.div(tape.sub(xh, mean), tape.sqrt(tape.add_scalar(var, eps)));
    let y = tape.reshape(tape.permute(y, &[0, 2, 1, 3]), &[b, t, c]);

    let gamma = tape.reshape(vars.gamma, &[1, 1, c]);
    let beta = tape.reshape(vars.beta, &[1, 1, c]);
    tape.add(tape.mul(y, gamma), beta)
}

// ── Serialization ───────────────────────────────────────────────────

/// On-disk form of one normalizer instance and its grid. `a` is stored
/// as an `H x 3` array of rows; unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtnLayerFile {
    pub omega_mean: Vec<f64>,
    pub omega_var: Vec<f64>,
    pub a: Vec<[f64; 3]>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    pub pool_s: usize,
}

impl DtnLayerFile {
    pub fn pack(params: &DtnParams, g: &GridGeometry) -> Self {
        DtnLayerFile {
            omega_mean: params.omega_mean.clone(),
            omega_var: params.omega_var.clone(),
            a: params.a.clone(),
            gamma: params.affine.gamma.clone(),
            beta: params.affine.beta.clone(),
            rows: g.rows(),
            cols: g.cols(),
            heads: g.heads(),
            pool_s: g.pool_s(),
        }
    }

    pub fn unpack(self) -> Result<(DtnParams, GridGeometry), CoreError> {
        let g = GridGeometry::new(self.rows, self.cols, self.heads, self.pool_s)?;
        let params = DtnParams {
            omega_mean: self.omega_mean,
            omega_var: self.omega_var,
            a: self.a,
            affine: AffineParams::new(self.gamma, self.beta)?,
        };
        params.validate(&g)?;
        Ok((params, g))
    }
}

pub fn save_dtn_layer(
    path: &Path,
    params: &DtnParams,
    g: &GridGeometry,
) -> Result<(), CoreError> {
    let file = DtnLayerFile::pack(params, g);
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_dtn_layer(path: &Path) -> Result<(DtnParams, GridGeometry), CoreError> {
    let text = std::fs::read_to_string(path)?;
    let file: DtnLayerFile = serde_json::from_str(&text)?;
    file.unpack()
}
