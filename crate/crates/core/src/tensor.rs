//! Dense row-major f64 tensors with numpy-style broadcasting.
//!
//! Shapes are plain `Vec<usize>`; data is a contiguous row-major
//! buffer. Rank 0 is represented as shape `[]` with one element.

use crate::error::CoreError;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, CoreError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, v)| (i, *v))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, CoreError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::ShapeMismatch {
                context: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Row-major strides in elements.
    fn strides(&self) -> Vec<usize> {
        contiguous_strides(&self.shape)
    }

    /// Sum along `axis`. `keepdim` retains the axis with length 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        assert!(axis < self.shape.len(), "sum_axis: axis out of range");
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    out[dst + i] += self.data[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Tensor { shape, data: out }
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let n = self.shape[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Materialize with the last two axes swapped.
    pub fn swap_last2(&self) -> Tensor {
        let r = self.shape.len();
        assert!(r >= 2, "swap_last2 needs rank >= 2");
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Materialize a permutation of the axes.
    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let r = self.shape.len();
        assert_eq!(axes.len(), r, "permute: axis count mismatch");
        let mut seen = vec![false; r];
        for &a in axes {
            assert!(a < r && !seen[a], "permute: invalid axis list");
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = self.strides();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[off]);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                off += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Tensor {
            shape: out_shape,
            data: out,
        }
    }

    /// Materialize this tensor broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor, CoreError> {
        let merged = broadcast_shapes(&self.shape, shape)?;
        if merged != shape {
            return Err(CoreError::ShapeMismatch {
                context: "broadcast_to",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        if self.shape == shape {
            return Ok(self.clone());
        }
        let strides = broadcast_strides(&self.shape, shape);
        let numel: usize = shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        let mut off = 0usize;
        for _ in 0..numel {
            out.push(self.data[off]);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                off -= strides[ax] * shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: out,
        })
    }

    /// Sum a gradient shaped like a broadcast result back down to `target`.
    pub fn reduce_to(&self, target: &[usize]) -> Tensor {
        let mut g = self.clone();
        while g.shape.len() > target.len() {
            g = g.sum_axis(0, false);
        }
        for ax in 0..target.len() {
            if target[ax] == 1 && g.shape[ax] != 1 {
                g = g.sum_axis(ax, true);
            }
        }
        debug_assert_eq!(g.shape, target, "reduce_to: shapes not broadcast-compatible");
        g
    }
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for ax in (0..shape.len()).rev() {
        strides[ax] = acc;
        acc *= shape[ax];
    }
    strides
}

/// Shape of the broadcast of `a` and `b` (numpy rules, right-aligned).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>, CoreError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(CoreError::ShapeMismatch {
                context: "broadcast",
                left: a.to_vec(),
                right: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Per-axis element strides of `src` viewed as `out` (0 on broadcast axes).
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let src_strides = contiguous_strides(src);
    let offset = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < offset {
                0
            } else {
                let j = i - offset;
                if src[j] == 1 && out[i] != 1 {
                    0
                } else {
                    src_strides[j]
                }
            }
        })
        .collect()
}

/// Elementwise combine with broadcasting.
pub fn zip_broadcast(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, CoreError> {
    if a.shape == b.shape {
        let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let shape = broadcast_shapes(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..numel {
        out.push(f(a.data[oa], b.data[ob]));
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor { shape, data: out })
}

/// Batched matrix product over the last two axes with broadcast
/// leading axes: `(..., m, k) x (..., k, n) -> (..., m, n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, CoreError> {
    let (ra, rb) = (a.shape.len(), b.shape.len());
    if ra < 2 || rb < 2 {
        return Err(CoreError::ShapeMismatch {
            context: "matmul rank",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, ka) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (kb, n) = (b.shape[rb - 2], b.shape[rb - 1]);
    if ka != kb {
        return Err(CoreError::ShapeMismatch {
            context: "matmul inner dim",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let batch = broadcast_shapes(&a.shape[..ra - 2], &b.shape[..rb - 2])?;
    let batch_numel: usize = batch.iter().product();

    // Batch strides in units of whole matrices.
    let sa = matrix_batch_strides(&a.shape[..ra - 2], &batch);
    let sb = matrix_batch_strides(&b.shape[..rb - 2], &batch);
    let (mat_a, mat_b, mat_c) = (m * ka, kb * n, m * n);

    let mut out = vec![0.0; batch_numel * mat_c];
    let mut idx = vec![0usize; batch.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for bi in 0..batch_numel {
        matmul2d(
            &a.data[oa * mat_a..(oa + 1) * mat_a],
            &b.data[ob * mat_b..(ob + 1) * mat_b],
            &mut out[bi * mat_c..(bi + 1) * mat_c],
            m,
            ka,
            n,
        );
        for ax in (0..batch.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < batch[ax] {
                break;
            }
            oa -= sa[ax] * batch[ax];
            ob -= sb[ax] * batch[ax];
            idx[ax] = 0;
        }
    }
    let mut shape = batch;
    shape.push(m);
    shape.push(n);
    Ok(Tensor { shape, data: out })
}

fn matrix_batch_strides(src_batch: &[usize], out_batch: &[usize]) -> Vec<usize> {
    broadcast_strides(src_batch, out_batch)
}

fn matmul2d(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

// ── Token tensors ───────────────────────────────────────────────────

/// A batch of token sequences, shape `(B, T, C)`, all entries finite.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor(Tensor);

impl TokenTensor {
    pub fn new(t: Tensor) -> Result<Self, CoreError> {
        if t.shape().len() != 3 {
            return Err(CoreError::invalid(format!(
                "token tensor must have shape (B, T, C), got {:?}",
                t.shape()
            )));
        }
        if let Some((index, value)) = t.first_non_finite() {
            return Err(CoreError::NonFinite {
                context: "token tensor",
                index,
                value,
            });
        }
        Ok(TokenTensor(t))
    }

    pub fn from_parts(b: usize, t: usize, c: usize, data: Vec<f64>) -> Result<Self, CoreError> {
        TokenTensor::new(Tensor::from_vec(vec![b, t, c], data)?)
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn get(&self, b: usize, t: usize, c: usize) -> f64 {
        let (tt, cc) = (self.tokens(), self.channels());
        self.0.data()[(b * tt + t) * cc + c]
    }

    pub fn set(&mut self, b: usize, t: usize, c: usize, v: f64) {
        let (tt, cc) = (self.tokens(), self.channels());
        self.0.data_mut()[(b * tt + t) * cc + c] = v;
    }
}

/// Zero-copy view of one head's channel slice of a token tensor.
#[derive(Clone, Copy)]
pub struct HeadView<'a> {
    src: &'a TokenTensor,
    head: usize,
    heads: usize,
}

impl<'a> HeadView<'a> {
    pub fn head(&self) -> usize {
        self.head
    }

    /// Channels per head.
    pub fn width(&self) -> usize {
        self.src.channels() / self.heads
    }

    pub fn batch(&self) -> usize {
        self.src.batch()
    }

    pub fn tokens(&self) -> usize {
        self.src.tokens()
    }

    pub fn get(&self, b: usize, t: usize, j: usize) -> f64 {
        debug_assert!(j < self.width());
        self.src.get(b, t, self.head * self.width() + j)
    }

    /// Materialize the slice as `(B, T, C/H)`.
    pub fn to_tensor(&self) -> Tensor {
        let (b, t, w) = (self.batch(), self.tokens(), self.width());
        let mut data = Vec::with_capacity(b * t * w);
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..w {
                    data.push(self.get(bi, ti, j));
                }
            }
        }
        Tensor {
            shape: vec![b, t, w],
            data,
        }
    }
}

/// Split the channel axis into `heads` equal contiguous slices.
pub fn split_heads(x: &TokenTensor, heads: usize) -> Result<Vec<HeadView<'_>>, CoreError> {
    if heads == 0 || x.channels() % heads != 0 {
        return Err(CoreError::invalid(format!(
            "channel count {} not divisible by {} heads",
            x.channels(),
            heads
        )));
    }
    Ok((0..heads).map(|head| HeadView { src: x, head, heads }).collect())
}

/// Merge per-head `(B, T, C/H)` tensors back along the channel axis.
/// Exact inverse of `split_heads` followed by `to_tensor`.
pub fn concat_heads(parts: &[Tensor]) -> Result<TokenTensor, CoreError> {
    if parts.is_empty() {
        return Err(CoreError::EmptyInput("concat_heads"));
    }
    let (b, t, w) = match parts[0].shape() {
        [b, t, w] => (*b, *t, *w),
        s => {
            return Err(CoreError::invalid(format!(
                "concat_heads expects rank-3 parts, got {s:?}"
            )))
        }
    };
    for p in parts {
        if p.shape() != [b, t, w] {
            return Err(CoreError::ShapeMismatch {
                context: "concat_heads",
                left: parts[0].shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let heads = parts.len();
    let c = heads * w;
    let mut data = vec![0.0; b * t * c];
    for (h, p) in parts.iter().enumerate() {
        for bi in 0..b {
            for ti in 0..t {
                let src = (bi * t + ti) * w;
                let dst = (bi * t + ti) * c + h * w;
                data[dst..dst + w].copy_from_slice(&p.data()[src..src + w]);
            }
        }
    }
    TokenTensor::from_parts(b, t, c, data)
}

// ── Small numeric helpers ───────────────────────────────────────────

/// Mean and biased variance of a slice. Errors on empty input.
pub fn reduce_stats(values: &[f64]) -> Result<(f64, f64), CoreError> {
    if values.is_empty() {
        return Err(CoreError::EmptyInput("reduce_stats"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Row-wise numerically stable softmax of a rank-2 tensor.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor, CoreError> {
    let [rows, cols] = match m.shape() {
        [r, c] => [*r, *c],
        s => {
            return Err(CoreError::invalid(format!(
                "softmax_rows expects rank 2, got {s:?}"
            )))
        }
    };
    if cols == 0 {
        return Err(CoreError::EmptyInput("softmax_rows"));
    }
    if let Some((index, value)) = m.first_non_finite() {
        return Err(CoreError::NonFinite {
            context: "softmax_rows input",
            index,
            value,
        });
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &m.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Tensor::from_vec(vec![rows, cols], out)
}

/// Central-difference gradient of a scalar function.
/// Errors if any probe evaluates to a non-finite value.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>, CoreError>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(CoreError::invalid("finite_diff_grad: step must be positive"));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe);
        probe[i] = theta[i] - h;
        let down = f(&probe);
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(CoreError::NonFinite {
                context: "finite_diff_grad probe",
                index: i,
                value: if up.is_finite() { down } else { up },
            });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_row_matches_hand_value() {
        let m = Tensor::from_vec(vec![1, 2], vec![0.0, 3.0_f64.ln()]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_extreme_logits() {
        let m = Tensor::from_vec(vec![2, 3], vec![1e4, -1e4, 0.0, 300.0, 300.0, -300.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        for r in 0..2 {
            let sum: f64 = s.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            assert!(s.data()[r * 3..(r + 1) * 3].iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn softmax_rows_rejects_nan() {
        let m = Tensor::from_vec(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn reduce_stats_matches_hand_values() {
        let (mean, var) = reduce_stats(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mean, 2.5);
        assert_eq!(var, 1.25);
        assert!(reduce_stats(&[]).is_err());
    }

    #[test]
    fn finite_diff_on_square_gives_two_theta() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8, "got {}", g[0]);
    }

    #[test]
    fn finite_diff_reports_non_finite_probe() {
        let err = finite_diff_grad(|t| t[0].ln(), &[0.0], 1e-4).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { .. }));
    }

    #[test]
    fn broadcast_shapes_follow_numpy_rules() {
        assert_eq!(broadcast_shapes(&[3, 1], &[4]).unwrap(), vec![3, 4]);
        assert_eq!(
            broadcast_shapes(&[2, 1, 5], &[3, 1]).unwrap(),
            vec![2, 3, 5]
        );
        assert!(broadcast_shapes(&[2], &[3]).is_err());
    }

    #[test]
    fn zip_broadcast_adds_row_vector() {
        let a = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(vec![3], vec![10., 20., 30.]).unwrap();
        let c = zip_broadcast(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
    }

    #[test]
    fn reduce_to_sums_over_broadcast_axes() {
        let g = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let r = g.reduce_to(&[3]);
        assert_eq!(r.data(), &[5., 7., 9.]);
        let r2 = g.reduce_to(&[2, 1]);
        assert_eq!(r2.data(), &[6., 15.]);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_broadcasts_leading_axes() {
        // (2,2,2) x (2,2) applies the same right matrix per batch.
        let a = Tensor::from_vec(vec![2, 2, 2], vec![1., 0., 0., 1., 2., 0., 0., 2.]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![5., 6., 7., 8.]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.data(), &[5., 6., 7., 8., 10., 12., 14., 16.]);
        // (1,2,2) batch against (3,1,2,2) broadcasts to (3,1,...).
        let a2 = Tensor::from_vec(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b2 = Tensor::from_vec(vec![3, 1, 2, 2], (0..12).map(|v| v as f64).collect()).unwrap();
        let c2 = matmul(&a2, &b2).unwrap();
        assert_eq!(c2.shape(), &[3, 1, 2, 2]);
    }

    #[test]
    fn permute_and_swap_last2_roundtrip() {
        let a = Tensor::from_vec(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let p = a.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.permute(&[1, 2, 0]);
        assert_eq!(back, a);
        let t = a.swap_last2();
        assert_eq!(t.shape(), &[2, 4, 3]);
        assert_eq!(t.data()[0 * 12 + 1 * 3 + 2], a.data()[0 * 12 + 2 * 4 + 1]);
    }

    #[test]
    fn split_concat_heads_roundtrip_is_bit_exact() {
        let x = TokenTensor::from_parts(2, 3, 4, (0..24).map(|v| v as f64 * 0.37).collect())
            .unwrap();
        let views = split_heads(&x, 2).unwrap();
        assert_eq!(views[1].get(1, 2, 0), x.get(1, 2, 2));
        let parts: Vec<Tensor> = views.iter().map(|v| v.to_tensor()).collect();
        let back = concat_heads(&parts).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn token_tensor_rejects_non_finite() {
        assert!(TokenTensor::from_parts(1, 1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(TokenTensor::from_parts(1, 1, 2, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn split_heads_requires_divisible_channels() {
        let x = TokenTensor::from_parts(1, 2, 3, vec![0.0; 6]).unwrap();
        assert!(split_heads(&x, 2).is_err());
    }
}
