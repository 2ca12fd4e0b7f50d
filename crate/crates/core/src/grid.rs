//! Patch-grid geometry, relative positions, and token pooling.
//!
//! Tokens live on a `rows x cols` grid in row-major order. Relative
//! positions and positional attention are defined on the pooled grid
//! (side divided by `pool_s`); token statistics computed there are
//! broadcast back to full resolution by the inverse pooling map.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::tensor::{Tensor, TokenTensor};

/// Grid layout shared by one normalizer instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    rows: usize,
    cols: usize,
    heads: usize,
    pool_s: usize,
}

impl GridGeometry {
    pub fn new(rows: usize, cols: usize, heads: usize, pool_s: usize) -> Result<Self, CoreError> {
        if rows == 0 || cols == 0 {
            return Err(CoreError::geometry(format!("empty grid {rows}x{cols}")));
        }
        if heads == 0 {
            return Err(CoreError::geometry("head count must be at least 1"));
        }
        if pool_s == 0 {
            return Err(CoreError::geometry("pool size must be at least 1"));
        }
        if rows % pool_s != 0 || cols % pool_s != 0 {
            return Err(CoreError::geometry(format!(
                "pool size {pool_s} must divide grid {rows}x{cols}"
            )));
        }
        Ok(GridGeometry {
            rows,
            cols,
            heads,
            pool_s,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn pool_s(&self) -> usize {
        self.pool_s
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pooled_rows(&self) -> usize {
        self.rows / self.pool_s
    }

    pub fn pooled_cols(&self) -> usize {
        self.cols / self.pool_s
    }

    pub fn pooled_tokens(&self) -> usize {
        self.pooled_rows() * self.pooled_cols()
    }

    /// Inter-token statistics need at least two pooled tokens; a single
    /// pooled token has identically zero variance.
    pub fn require_inter_token(&self) -> Result<(), CoreError> {
        if self.pooled_tokens() < 2 {
            return Err(CoreError::geometry(format!(
                "pooled grid {}x{} leaves {} token(s); inter-token statistics need at least 2",
                self.pooled_rows(),
                self.pooled_cols(),
                self.pooled_tokens()
            )));
        }
        Ok(())
    }

    /// Pooled-grid index covering full-resolution token `t`.
    pub fn pooled_index(&self, t: usize) -> usize {
        let (r, c) = (t / self.cols, t % self.cols);
        (r / self.pool_s) * self.pooled_cols() + c / self.pool_s
    }
}

/// Per-head attention centre offsets `(d1, d2)` = (horizontal, vertical),
/// enumerated row-major over a centred window with d1 varying fastest.
pub fn init_offsets(heads: usize) -> Vec<(i64, i64)> {
    let side = (heads as f64).sqrt().ceil() as i64;
    let lo = -((side - 1) / 2);
    let hi = side / 2; // ceil((side-1)/2) for integer side
    let mut offsets = Vec::with_capacity(heads);
    'outer: for d2 in lo..=hi {
        for d1 in lo..=hi {
            offsets.push((d1, d2));
            if offsets.len() == heads {
                break 'outer;
            }
        }
    }
    offsets
}

/// Relative position features on the pooled grid, shape `(T', T', 3)`:
/// `[dx^2 + dy^2, dx, dy]` with `dx` the column and `dy` the row
/// difference from token `i` to token `j`.
#[derive(Clone, Debug)]
pub struct RelPosEmbedding {
    tokens: usize,
    data: Vec<f64>,
}

impl RelPosEmbedding {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn get(&self, i: usize, j: usize) -> [f64; 3] {
        let base = (i * self.tokens + j) * 3;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    /// Flat `(T'*T', 3)` matrix of the features.
    pub fn as_matrix(&self) -> Tensor {
        Tensor::from_vec(vec![self.tokens * self.tokens, 3], self.data.clone()).unwrap()
    }
}

/// Build the relative position features for the pooled grid of `g`.
pub fn build_rel_pos(g: &GridGeometry) -> RelPosEmbedding {
    let (rows, cols) = (g.pooled_rows(), g.pooled_cols());
    let t = rows * cols;
    let mut data = Vec::with_capacity(t * t * 3);
    for i in 0..t {
        let (ri, ci) = ((i / cols) as i64, (i % cols) as i64);
        for j in 0..t {
            let (rj, cj) = ((j / cols) as i64, (j % cols) as i64);
            let dx = (cj - ci) as f64;
            let dy = (rj - ri) as f64;
            data.push(dx * dx + dy * dy);
            data.push(dx);
            data.push(dy);
        }
    }
    RelPosEmbedding { tokens: t, data }
}

/// Row-normalized 0/1 band of odd width `k`: entry `(i, j)` is nonzero
/// iff `|i - j| <= (k-1)/2`, each row scaled to sum to 1.
pub fn banded_matrix(tokens: usize, k: usize) -> Result<Tensor, CoreError> {
    if tokens == 0 {
        return Err(CoreError::EmptyInput("banded_matrix"));
    }
    if k == 0 || k % 2 == 0 {
        return Err(CoreError::invalid(format!(
            "band width must be odd and positive, got {k}"
        )));
    }
    let half = (k - 1) / 2;
    let mut data = vec![0.0; tokens * tokens];
    for i in 0..tokens {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(tokens - 1);
        let weight = 1.0 / (hi - lo + 1) as f64;
        for j in lo..=hi {
            data[i * tokens + j] = weight;
        }
    }
    Tensor::from_vec(vec![tokens, tokens], data)
}

/// Average non-overlapping `pool_s x pool_s` patches of tokens,
/// producing `(B, T', C)`. `pool_s = 1` is the identity.
pub fn pool_tokens(x: &TokenTensor, g: &GridGeometry) -> Result<TokenTensor, CoreError> {
    if x.tokens() != g.tokens() {
        return Err(CoreError::ShapeMismatch {
            context: "pool_tokens",
            left: vec![x.tokens()],
            right: vec![g.tokens()],
        });
    }
    let s = g.pool_s();
    if s == 1 {
        return Ok(x.clone());
    }
    let (b, c) = (x.batch(), x.channels());
    let (prows, pcols) = (g.pooled_rows(), g.pooled_cols());
    let tp = prows * pcols;
    let inv = 1.0 / (s * s) as f64;
    let mut out = vec![0.0; b * tp * c];
    for bi in 0..b {
        for pr in 0..prows {
            for pc in 0..pcols {
                let dst = (bi * tp + pr * pcols + pc) * c;
                for dr in 0..s {
                    for dc in 0..s {
                        let t = (pr * s + dr) * g.cols() + pc * s + dc;
                        let src = (bi * g.tokens() + t) * c;
                        for ci in 0..c {
                            out[dst + ci] += x.tensor().data()[src + ci];
                        }
                    }
                }
                for ci in 0..c {
                    out[dst + ci] *= inv;
                }
            }
        }
    }
    TokenTensor::from_parts(b, tp, c, out)
}

/// Constant `(T', T)` matrix performing the pooling average, and its
/// `(T, T')` 0/1 transpose used to broadcast pooled values back.
pub fn pooling_matrices(g: &GridGeometry) -> (Tensor, Tensor) {
    let (t, tp, s) = (g.tokens(), g.pooled_tokens(), g.pool_s());
    let mut pool = Tensor::zeros(&[tp, t]);
    let mut up = Tensor::zeros(&[t, tp]);
    let inv = 1.0 / (s * s) as f64;
    for token in 0..t {
        let p = g.pooled_index(token);
        pool.data_mut()[p * t + token] = inv;
        up.data_mut()[token * tp + p] = 1.0;
    }
    (pool, up)
}
