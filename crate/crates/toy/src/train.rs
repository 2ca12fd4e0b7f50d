//! Deterministic training loop: AdamW with cosine decay, a fresh tape
//! per step, divergence detection, mixing-weight traces, and JSON
//! checkpoints. Identical configs and seeds produce byte-identical
//! artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dtn_core::analysis::LAMBDA_TRACE_HEADER;
use dtn_core::autodiff::{Gradients, Var};
use dtn_core::autodiff::Tape;
use dtn_core::tensor::Tensor;

use crate::error::ToyError;
use crate::model::{cross_entropy, model_forward, predictions, push_params, ModelConfig, ModelWeights, Param};
use crate::tasks::{generate, Dataset, Task};

fn default_batch() -> usize {
    64
}

fn default_samples() -> usize {
    2000
}

fn default_eval_frac() -> f64 {
    0.25
}

fn default_lr() -> f64 {
    5e-3
}

fn default_weight_decay() -> f64 {
    0.05
}

fn default_trace_every() -> usize {
    10
}

fn default_threads() -> usize {
    1
}

fn default_divergence_threshold() -> f64 {
    1e6
}

/// Optimization settings. Everything that affects the result is here,
/// so two runs with equal configs and seeds are bit-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_eval_frac")]
    pub eval_frac: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Mixing weights are appended to the trace every this many steps.
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
    /// Worker threads for evaluation only; never changes results.
    #[serde(default = "default_threads")]
    pub threads: usize,
    /// A finite loss above this still counts as divergence.
    #[serde(default = "default_divergence_threshold")]
    pub divergence_threshold: f64,
}

impl TrainConfig {
    pub fn quick(steps: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch: default_batch(),
            samples: default_samples(),
            eval_frac: default_eval_frac(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            seed,
            trace_every: default_trace_every(),
            threads: default_threads(),
            divergence_threshold: default_divergence_threshold(),
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        if self.steps == 0 || self.batch == 0 || self.samples < 4 {
            return Err(ToyError::config(
                "steps and batch must be positive, samples at least 4",
            ));
        }
        if !(0.05..=0.95).contains(&self.eval_frac) {
            return Err(ToyError::config("eval_frac must lie in [0.05, 0.95]"));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(ToyError::config("lr must be positive and finite"));
        }
        if self.weight_decay < 0.0 || self.trace_every == 0 || self.threads == 0 {
            return Err(ToyError::config(
                "weight_decay must be non-negative, trace_every and threads positive",
            ));
        }
        if self.divergence_threshold <= 0.0 {
            return Err(ToyError::config("divergence_threshold must be positive"));
        }
        Ok(())
    }
}

/// One serialized parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub decay: bool,
}

/// A fully self-describing snapshot of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub task: String,
    pub step: usize,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_weights(
        cfg: &ModelConfig,
        seed: u64,
        task: Task,
        step: usize,
        weights: &ModelWeights,
    ) -> Checkpoint {
        let params = weights
            .params
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
                decay: p.decay,
            })
            .collect();
        Checkpoint {
            config: cfg.clone(),
            seed,
            task: task.name().to_string(),
            step,
            params,
        }
    }

    pub fn into_weights(&self) -> Result<ModelWeights, ToyError> {
        self.config.validate()?;
        let params = self
            .params
            .iter()
            .map(|r| {
                let value = Tensor::from_vec(r.shape.clone(), r.data.clone())?;
                Ok(Param {
                    name: r.name.clone(),
                    value,
                    decay: r.decay,
                })
            })
            .collect::<Result<Vec<_>, ToyError>>()?;
        let restored = ModelWeights { params };
        // Restored runs must expose exactly the parameters a fresh
        // model of this config would have.
        let fresh = ModelWeights::init(&self.config, 0)?;
        if fresh.params.len() != restored.params.len()
            || fresh
                .params
                .iter()
                .zip(&restored.params)
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(ToyError::config(
                "checkpoint parameters do not match the stored model config",
            ));
        }
        Ok(restored)
    }

    pub fn save(&self, path: &Path) -> Result<(), ToyError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, ToyError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    fn new(weights: &ModelWeights, weight_decay: f64) -> AdamW {
        let zeros: Vec<Tensor> = weights
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One decoupled-decay update. Decay touches only parameters whose
    /// `decay` flag is set, so mixing logits and affines drift freely.
    fn step(&mut self, weights: &mut ModelWeights, grads: &[&Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in weights.params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = p.value.data_mut();
            for k in 0..theta.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let mut update = mhat / (vhat.sqrt() + self.eps);
                if p.decay {
                    update += self.weight_decay * theta[k];
                }
                theta[k] -= lr * update;
            }
        }
    }
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let progress = step as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn append_lambda_rows(trace: &mut String, step: usize, cfg: &ModelConfig, weights: &ModelWeights) {
    for (layer, head, lm, lv) in weights.lambda_values(cfg) {
        writeln!(trace, "{step},{layer},{head},{lm},{lv}").unwrap();
    }
}

fn gather_grads<'a>(grads: &'a Gradients, vars: &[Var], zeros: &'a [Tensor]) -> Vec<&'a Tensor> {
    vars.iter()
        .enumerate()
        .map(|(i, v)| grads.get(*v).unwrap_or(&zeros[i]))
        .collect()
}

/// Everything a finished run produces.
pub struct TrainOutput {
    pub weights: ModelWeights,
    pub checkpoint: Checkpoint,
    /// CSV mixing-weight trace ("step,layer,head,lambda_mean,lambda_var").
    pub lambda_trace: String,
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

/// Train a model on `task` from scratch. Fails with `Diverged` when
/// the loss leaves the finite, plausible range; the error carries the
/// last usable snapshot.
pub fn train(cfg: &ModelConfig, tcfg: &TrainConfig, task: Task) -> Result<TrainOutput, ToyError> {
    cfg.validate()?;
    tcfg.validate()?;
    let data = generate(task, tcfg.samples, tcfg.seed.wrapping_add(0x5EED));
    if data.tokens() != cfg.tokens() || data.patch_dim != cfg.patch_dim {
        return Err(ToyError::config(format!(
            "model expects {} tokens of dim {}, task provides {} of dim {}",
            cfg.tokens(),
            cfg.patch_dim,
            data.tokens(),
            data.patch_dim
        )));
    }
    let (train_set, eval_set) = data.split(1.0 - tcfg.eval_frac);
    let mut weights = ModelWeights::init(cfg, tcfg.seed)?;
    let zeros: Vec<Tensor> = weights
        .params
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();
    let mut opt = AdamW::new(&weights, tcfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(0xBA7C4));

    let mut trace = String::new();
    writeln!(trace, "# seed={}", tcfg.seed).unwrap();
    writeln!(trace, "{LAMBDA_TRACE_HEADER}").unwrap();
    append_lambda_rows(&mut trace, 0, cfg, &weights);

    let mut losses = Vec::with_capacity(tcfg.steps);
    let mut prev = weights.clone();
    for step in 0..tcfg.steps {
        let idx: Vec<usize> = (0..tcfg.batch)
            .map(|_| rng.random_range(0..train_set.len()))
            .collect();
        let (bx, by) = train_set.batch(&idx);
        let tape = Tape::new();
        let vars = push_params(&tape, &weights);
        let out = model_forward(&tape, cfg, &weights, &vars, &bx);
        let loss = cross_entropy(&tape, out.logits, &by);
        let loss_v = tape.value(loss).data()[0];
        if !loss_v.is_finite() || loss_v > tcfg.divergence_threshold {
            return Err(ToyError::Diverged {
                step,
                last_good: Box::new(Checkpoint::from_weights(cfg, tcfg.seed, task, step, &prev)),
            });
        }
        losses.push(loss_v);
        let grads = tape.backward(loss);
        let grad_refs = gather_grads(&grads, &vars, &zeros);
        prev.clone_from(&weights);
        opt.step(&mut weights, &grad_refs, cosine_lr(tcfg.lr, step, tcfg.steps));
        if weights.params.iter().any(|p| !p.value.all_finite()) {
            return Err(ToyError::Diverged {
                step,
                last_good: Box::new(Checkpoint::from_weights(cfg, tcfg.seed, task, step, &prev)),
            });
        }
        let done = step + 1;
        if done % tcfg.trace_every == 0 || done == tcfg.steps {
            append_lambda_rows(&mut trace, done, cfg, &weights);
        }
    }

    let train_accuracy = eval_accuracy(cfg, &weights, &train_set, tcfg.threads);
    let eval_accuracy = eval_accuracy(cfg, &weights, &eval_set, tcfg.threads);
    let checkpoint = Checkpoint::from_weights(cfg, tcfg.seed, task, tcfg.steps, &weights);
    Ok(TrainOutput {
        weights,
        checkpoint,
        lambda_trace: trace,
        losses,
        train_accuracy,
        eval_accuracy,
    })
}

fn accuracy_on_slice(cfg: &ModelConfig, weights: &ModelWeights, data: &Dataset, lo: usize, hi: usize) -> usize {
    let mut correct = 0;
    let mut start = lo;
    while start < hi {
        let end = (start + 128).min(hi);
        let idx: Vec<usize> = (start..end).collect();
        let (bx, by) = data.batch(&idx);
        let tape = Tape::new();
        let vars = push_params(&tape, weights);
        let out = model_forward(&tape, cfg, weights, &vars, &bx);
        let preds = predictions(&tape.value(out.logits));
        correct += preds.iter().zip(&by).filter(|(p, y)| p == y).count();
        start = end;
    }
    correct
}

/// Fraction of `data` classified correctly. `threads > 1` splits the
/// samples across scoped threads; every sample is scored independently
/// so the result never depends on the thread count.
pub fn eval_accuracy(cfg: &ModelConfig, weights: &ModelWeights, data: &Dataset, threads: usize) -> f64 {
    assert!(threads > 0, "eval_accuracy: threads must be positive");
    if data.is_empty() {
        return 0.0;
    }
    let n = data.len();
    let workers = threads.min(n);
    let correct: usize = if workers == 1 {
        accuracy_on_slice(cfg, weights, data, 0, n)
    } else {
        let chunk = n.div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let lo = w * chunk;
                    let hi = ((w + 1) * chunk).min(n);
                    scope.spawn(move || accuracy_on_slice(cfg, weights, data, lo, hi))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).sum()
        })
    };
    correct as f64 / n as f64
}
