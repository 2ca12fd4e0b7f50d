//! Synthetic patch-grid classification tasks.
//!
//! Each sample is a grid of patch feature vectors. `LocalTexture` is
//! decidable from one designated patch alone; `GlobalShape` hides the
//! label in the relative position of two markers whose single-patch
//! marginals are identical across classes, so no per-patch readout can
//! beat chance. `ConstantLabel` is a trivial smoke-test task.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dtn_core::tensor::Tensor;

use crate::error::ToyError;

/// Grid side used by all built-in tasks.
pub const TASK_ROWS: usize = 6;
pub const TASK_COLS: usize = 6;
/// Feature dimension of one patch.
pub const TASK_PATCH_DIM: usize = 8;
/// Patch carrying the signal for `LocalTexture` (row 2, column 2).
pub const TEXTURE_PATCH: usize = 14;
/// Signal amplitude added on top of the background noise.
pub const SIGNAL_AMPLITUDE: f64 = 2.0;
/// Standard deviation of the background noise.
pub const NOISE_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Class flips the sign of an alternating pattern in one fixed patch.
    LocalTexture,
    /// Two markers share a row (class 0) or a column (class 1).
    GlobalShape,
    /// Pure noise, every label 0.
    ConstantLabel,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task, ToyError> {
        match s {
            "local-texture" => Ok(Task::LocalTexture),
            "global-shape" => Ok(Task::GlobalShape),
            "constant-label" => Ok(Task::ConstantLabel),
            other => Err(ToyError::config(format!(
                "unknown task '{other}' (expected local-texture, global-shape, or constant-label)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::LocalTexture => "local-texture",
            Task::GlobalShape => "global-shape",
            Task::ConstantLabel => "constant-label",
        }
    }

    pub fn all() -> [Task; 3] {
        [Task::LocalTexture, Task::GlobalShape, Task::ConstantLabel]
    }
}

/// A labelled set of grid samples, inputs shaped `(N, T, patch_dim)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    pub patch_dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    /// Gather the samples at `idx` into a batch tensor plus labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let stride = self.tokens() * self.patch_dim;
        let mut data = Vec::with_capacity(idx.len() * stride);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            assert!(i < self.len(), "batch: index {i} out of range");
            data.extend_from_slice(&self.inputs.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(vec![idx.len(), self.tokens(), self.patch_dim], data).unwrap(),
            labels,
        )
    }

    /// Split into a leading train part and trailing eval part.
    pub fn split(&self, train_frac: f64) -> (Dataset, Dataset) {
        assert!(
            (0.0..=1.0).contains(&train_frac),
            "split: fraction must lie in [0, 1]"
        );
        let n_train = ((self.len() as f64) * train_frac).round() as usize;
        let head: Vec<usize> = (0..n_train).collect();
        let tail: Vec<usize> = (n_train..self.len()).collect();
        let make = |idx: &[usize]| {
            let (inputs, labels) = self.batch(idx);
            Dataset {
                inputs,
                labels,
                rows: self.rows,
                cols: self.cols,
                patch_dim: self.patch_dim,
            }
        };
        (make(&head), make(&tail))
    }

    fn patch(&self, sample: usize, token: usize) -> &[f64] {
        let stride = self.tokens() * self.patch_dim;
        let start = sample * stride + token * self.patch_dim;
        &self.inputs.data()[start..start + self.patch_dim]
    }
}

/// Generate `n` samples of `task`. Labels alternate 0, 1, 0, 1, ... so
/// every prefix is balanced (`ConstantLabel` is all zeros). The same
/// `(task, n, seed)` triple always produces identical bytes.
pub fn generate(task: Task, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols, p) = (TASK_ROWS, TASK_COLS, TASK_PATCH_DIM);
    let t = rows * cols;
    let mut data = Vec::with_capacity(n * t * p);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = match task {
            Task::ConstantLabel => 0,
            _ => i % 2,
        };
        labels.push(label);
        let base = data.len();
        for _ in 0..t * p {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(z * NOISE_SIGMA);
        }
        match task {
            Task::LocalTexture => {
                // Alternating +/- pattern, sign flipped by the class.
                let sign = if label == 0 { 1.0 } else { -1.0 };
                for k in 0..p {
                    let alt = if k % 2 == 0 { 1.0 } else { -1.0 };
                    data[base + TEXTURE_PATCH * p + k] += sign * alt * SIGNAL_AMPLITUDE;
                }
            }
            Task::GlobalShape => {
                // Two distinct cells sharing a row (class 0) or a
                // column (class 1); the pair is uniform over its class,
                // so each single cell is a marker with probability
                // 2/t for both classes.
                let (fixed_n, moving_n) = if label == 0 { (rows, cols) } else { (cols, rows) };
                let line = rng.random_range(0..fixed_n);
                let first = rng.random_range(0..moving_n);
                let second = loop {
                    let c = rng.random_range(0..moving_n);
                    if c != first {
                        break c;
                    }
                };
                let (t1, t2) = if label == 0 {
                    (line * cols + first, line * cols + second)
                } else {
                    (first * cols + line, second * cols + line)
                };
                for token in [t1, t2] {
                    for k in 0..p {
                        data[base + token * p + k] += SIGNAL_AMPLITUDE;
                    }
                }
            }
            Task::ConstantLabel => {}
        }
    }
    Dataset {
        inputs: Tensor::from_vec(vec![n, t, p], data).unwrap(),
        labels,
        rows,
        cols,
        patch_dim: p,
    }
}

/// Accuracy of logistic regression on each single patch.
#[derive(Clone, Debug)]
pub struct ProbeReport {
    /// Eval accuracy per patch index.
    pub per_patch: Vec<f64>,
    pub best: f64,
    pub best_patch: usize,
}

/// Fit a logistic readout on every patch independently (full-batch
/// gradient descent on the train split) and report eval accuracies.
/// A task is "local" when some patch probes far above chance and
/// "global" when none does.
pub fn single_patch_probe(
    train: &Dataset,
    eval: &Dataset,
    steps: usize,
    lr: f64,
) -> Result<ProbeReport, ToyError> {
    if train.is_empty() || eval.is_empty() {
        return Err(ToyError::config("probe needs non-empty train and eval sets"));
    }
    if train.patch_dim != eval.patch_dim || train.tokens() != eval.tokens() {
        return Err(ToyError::config("probe: train and eval sets disagree in shape"));
    }
    let p = train.patch_dim;
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut per_patch = Vec::with_capacity(train.tokens());
    for token in 0..train.tokens() {
        let mut w = vec![0.0f64; p];
        let mut b = 0.0f64;
        let n = train.len() as f64;
        for _ in 0..steps {
            let mut gw = vec![0.0f64; p];
            let mut gb = 0.0f64;
            for i in 0..train.len() {
                let x = train.patch(i, token);
                let z: f64 = x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + b;
                let err = sigmoid(z) - train.labels[i] as f64;
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += err * xi;
                }
                gb += err;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= lr * g / n;
            }
            b -= lr * gb / n;
        }
        let correct = (0..eval.len())
            .filter(|&i| {
                let x = eval.patch(i, token);
                let z: f64 = x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + b;
                let pred = usize::from(z > 0.0);
                pred == eval.labels[i]
            })
            .count();
        per_patch.push(correct as f64 / eval.len() as f64);
    }
    let (best_patch, &best) = per_patch
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    Ok(ProbeReport {
        per_patch,
        best,
        best_patch,
    })
}
