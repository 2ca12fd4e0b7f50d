//! A small pre-norm transformer encoder over patch-grid tokens.
//!
//! The first `dtn_layers` blocks normalize with the dynamic normalizer
//! (or plain layer normalization when `leading_norm` says so, which
//! gives a structurally identical baseline); the remaining blocks
//! always use layer normalization. A learned class token is appended
//! to the sequence only after the leading blocks, so the dynamic
//! normalizer always sees exactly the grid tokens. The classifier
//! reads the class token, or the mean token when no class token exists
//! (`dtn_layers == layers`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use dtn_core::autodiff::{Tape, Var};
use dtn_core::dtn::{dtn_forward_tape, DtnParams, DtnVars};
use dtn_core::grid::{init_offsets, GridGeometry};
use dtn_core::norm::{ln_forward_tape, AffineParams, DEFAULT_EPS};
use dtn_core::tensor::Tensor;

use crate::error::ToyError;

/// Normalizer used by the leading blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    #[serde(rename = "dtn")]
    Dynamic,
    #[serde(rename = "ln")]
    Layer,
}

fn default_pool() -> usize {
    1
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    /// Leading blocks carrying the configurable normalizer; the class
    /// token is appended after them.
    pub dtn_layers: usize,
    #[serde(default)]
    pub leading_norm: NormKind,
    pub heads: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "default_pool")]
    pub pool_s: usize,
    pub patch_dim: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl ModelConfig {
    /// Default harness configuration for the synthetic 6x6 tasks.
    /// `dtn_layers` follows the 5L/6 placement rule.
    pub fn toy(rows: usize, cols: usize, patch_dim: usize, classes: usize) -> Self {
        let layers = 3;
        ModelConfig {
            layers,
            dtn_layers: 5 * layers / 6,
            leading_norm: NormKind::Dynamic,
            heads: 4,
            channels: 24,
            rows,
            cols,
            pool_s: 1,
            patch_dim,
            mlp_ratio: 2,
            classes,
            eps: DEFAULT_EPS,
        }
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn geometry(&self) -> Result<GridGeometry, ToyError> {
        Ok(GridGeometry::new(self.rows, self.cols, self.heads, self.pool_s)?)
    }

    /// Block index before which the class token is appended; `None`
    /// when every block is a leading block (mean-token classifier).
    pub fn class_token_block(&self) -> Option<usize> {
        (self.dtn_layers < self.layers).then_some(self.dtn_layers)
    }

    pub fn block_norm(&self, block: usize) -> NormKind {
        if block < self.dtn_layers {
            self.leading_norm
        } else {
            NormKind::Layer
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        if self.layers == 0 {
            return Err(ToyError::config("layers must be at least 1"));
        }
        if self.dtn_layers > self.layers {
            return Err(ToyError::config(format!(
                "dtn_layers {} exceeds layers {}",
                self.dtn_layers, self.layers
            )));
        }
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(ToyError::config(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.patch_dim == 0 || self.mlp_ratio == 0 || self.classes < 2 {
            return Err(ToyError::config(
                "patch_dim and mlp_ratio must be positive, classes at least 2",
            ));
        }
        if self.eps <= 0.0 {
            return Err(ToyError::config("eps must be positive"));
        }
        let g = self.geometry()?;
        if self.dtn_layers > 0 && self.leading_norm == NormKind::Dynamic {
            g.require_inter_token()?;
        }
        Ok(())
    }
}

/// One named weight tensor. `decay` marks it for weight decay; norm
/// parameters, biases, and embeddings are excluded so the mixing
/// logits can drift freely.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub params: Vec<Param>,
}

impl ModelWeights {
    /// Deterministic initialization: matrices and embeddings from
    /// N(0, 0.02^2), biases and shifts zero, gains one, mixing logits
    /// zero, position coefficients from the centred offset rule.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ToyError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * 0.02)
                .collect();
            Tensor::from_vec(shape.to_vec(), data).unwrap()
        };
        let (c, h, t, p) = (cfg.channels, cfg.heads, cfg.tokens(), cfg.patch_dim);
        let hidden = cfg.mlp_ratio * c;
        let mut params = Vec::new();
        let mut push = |name: String, value: Tensor, decay: bool| {
            params.push(Param { name, value, decay });
        };

        push("patch.w".into(), normal(&[p, c]), true);
        push("patch.b".into(), Tensor::zeros(&[c]), false);
        push("pos".into(), normal(&[t, c]), false);
        push("cls".into(), normal(&[c]), false);

        let offsets = init_offsets(h);
        for b in 0..cfg.layers {
            for norm in ["n1", "n2"] {
                if cfg.block_norm(b) == NormKind::Dynamic {
                    let a_flat: Vec<f64> = offsets
                        .iter()
                        .flat_map(|&(d1, d2)| [-1.0, 2.0 * d1 as f64, 2.0 * d2 as f64])
                        .collect();
                    push(format!("b{b}.{norm}.omega_mean"), Tensor::zeros(&[h]), false);
                    push(format!("b{b}.{norm}.omega_var"), Tensor::zeros(&[h]), false);
                    push(
                        format!("b{b}.{norm}.a"),
                        Tensor::from_vec(vec![h, 3], a_flat).unwrap(),
                        false,
                    );
                }
                push(format!("b{b}.{norm}.gamma"), Tensor::filled(&[c], 1.0), false);
                push(format!("b{b}.{norm}.beta"), Tensor::zeros(&[c]), false);
            }
            push(format!("b{b}.qkv.w"), normal(&[c, 3 * c]), true);
            push(format!("b{b}.qkv.b"), Tensor::zeros(&[3 * c]), false);
            push(format!("b{b}.proj.w"), normal(&[c, c]), true);
            push(format!("b{b}.proj.b"), Tensor::zeros(&[c]), false);
            push(format!("b{b}.mlp.w1"), normal(&[c, hidden]), true);
            push(format!("b{b}.mlp.b1"), Tensor::zeros(&[hidden]), false);
            push(format!("b{b}.mlp.w2"), normal(&[hidden, c]), true);
            push(format!("b{b}.mlp.b2"), Tensor::zeros(&[c]), false);
        }
        push("final.gamma".into(), Tensor::filled(&[c], 1.0), false);
        push("final.beta".into(), Tensor::zeros(&[c]), false);
        push("head.w".into(), normal(&[c, cfg.classes]), true);
        push("head.b".into(), Tensor::zeros(&[cfg.classes]), false);

        Ok(ModelWeights { params })
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.params[self.index_of(name)].value
    }

    /// Extract one dynamic-normalizer instance, e.g. block 0, `n2`.
    pub fn dtn_params(&self, block: usize, norm: &str) -> Option<DtnParams> {
        let prefix = format!("b{block}.{norm}");
        let find = |suffix: &str| {
            self.params
                .iter()
                .find(|p| p.name == format!("{prefix}.{suffix}"))
                .map(|p| p.value.clone())
        };
        let omega_mean = find("omega_mean")?;
        let omega_var = find("omega_var")?;
        let a = find("a")?;
        let gamma = find("gamma")?;
        let beta = find("beta")?;
        let a_rows: Vec<[f64; 3]> = a
            .data()
            .chunks(3)
            .map(|ch| [ch[0], ch[1], ch[2]])
            .collect();
        Some(DtnParams {
            omega_mean: omega_mean.data().to_vec(),
            omega_var: omega_var.data().to_vec(),
            a: a_rows,
            affine: AffineParams::new(gamma.data().to_vec(), beta.data().to_vec()).ok()?,
        })
    }

    /// All mixing weights as (normalizer index, head, mean, var) rows,
    /// normalizers numbered in forward order (two per leading block).
    pub fn lambda_values(&self, cfg: &ModelConfig) -> Vec<(usize, usize, f64, f64)> {
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut out = Vec::new();
        let mut layer = 0usize;
        for b in 0..cfg.layers {
            if cfg.block_norm(b) != NormKind::Dynamic {
                continue;
            }
            for norm in ["n1", "n2"] {
                let om = self.get(&format!("b{b}.{norm}.omega_mean"));
                let ov = self.get(&format!("b{b}.{norm}.omega_var"));
                for head in 0..cfg.heads {
                    out.push((
                        layer,
                        head,
                        sigmoid(om.data()[head]),
                        sigmoid(ov.data()[head]),
                    ));
                }
                layer += 1;
            }
        }
        out
    }
}

/// Push every parameter onto a tape, aligned with `weights.params`.
pub fn push_params(tape: &Tape, weights: &ModelWeights) -> Vec<Var> {
    weights
        .params
        .iter()
        .map(|p| tape.input(p.value.clone()))
        .collect()
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Post-softmax attention per block, shape `(B, H, T_b, T_b)`
    /// where `T_b` includes the class token once appended.
    pub attention: Vec<Var>,
    /// Residual stream entering each block.
    pub block_inputs: Vec<Var>,
    /// Output of each block's first normalizer.
    pub norm1_outputs: Vec<Var>,
}

struct VarLookup<'a> {
    weights: &'a ModelWeights,
    vars: &'a [Var],
}

impl VarLookup<'_> {
    fn get(&self, name: &str) -> Var {
        self.vars[self.weights.index_of(name)]
    }
}

fn mhsa(
    tape: &Tape,
    x: Var,
    heads: usize,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
) -> (Var, Var) {
    let shape = tape.shape(x);
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let w = c / heads;
    let qkv = tape.add(tape.matmul(x, qkv_w), qkv_b);
    let to_heads = |v: Var| {
        let r = tape.reshape(v, &[b, t, heads, w]);
        tape.permute(r, &[0, 2, 1, 3])
    };
    let q = to_heads(tape.narrow(qkv, 2, 0, c));
    let k = to_heads(tape.narrow(qkv, 2, c, c));
    let v = to_heads(tape.narrow(qkv, 2, 2 * c, c));
    let scores = tape.mul_scalar(
        tape.matmul(q, tape.permute(k, &[0, 1, 3, 2])),
        1.0 / (w as f64).sqrt(),
    );
    let attn = tape.softmax_last(scores);
    let ctx = tape.matmul(attn, v);
    let merged = tape.reshape(tape.permute(ctx, &[0, 2, 1, 3]), &[b, t, c]);
    let out = tape.add(tape.matmul(merged, proj_w), proj_b);
    (out, attn)
}

/// Run the model on raw patch features `x` of shape `(B, T, patch_dim)`.
pub fn model_forward(
    tape: &Tape,
    cfg: &ModelConfig,
    weights: &ModelWeights,
    vars: &[Var],
    x: &Tensor,
) -> ForwardOutput {
    let lk = VarLookup { weights, vars };
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 3, "model_forward: input must be (B, T, patch_dim)");
    let b = shape[0];
    assert_eq!(shape[1], cfg.tokens(), "model_forward: token count mismatch");
    assert_eq!(shape[2], cfg.patch_dim, "model_forward: patch dim mismatch");
    let g = cfg.geometry().expect("validated config");

    let xin = tape.input(x.clone());
    let mut h = tape.add(tape.matmul(xin, lk.get("patch.w")), lk.get("patch.b"));
    let pos = tape.reshape(lk.get("pos"), &[1, cfg.tokens(), cfg.channels]);
    h = tape.add(h, pos);

    let mut attention = Vec::with_capacity(cfg.layers);
    let mut block_inputs = Vec::with_capacity(cfg.layers);
    let mut norm1_outputs = Vec::with_capacity(cfg.layers);
    for block in 0..cfg.layers {
        if cfg.class_token_block() == Some(block) {
            let cls = tape.reshape(lk.get("cls"), &[1, 1, cfg.channels]);
            let zeros = tape.input(Tensor::zeros(&[b, 1, cfg.channels]));
            let cls_b = tape.add(zeros, cls);
            h = tape.concat(&[h, cls_b], 1);
        }
        block_inputs.push(h);
        let norm = |tape: &Tape, which: &str, input: Var| -> Var {
            match cfg.block_norm(block) {
                NormKind::Dynamic => {
                    let dtn = DtnVars {
                        omega_mean: lk.get(&format!("b{block}.{which}.omega_mean")),
                        omega_var: lk.get(&format!("b{block}.{which}.omega_var")),
                        a: lk.get(&format!("b{block}.{which}.a")),
                        gamma: lk.get(&format!("b{block}.{which}.gamma")),
                        beta: lk.get(&format!("b{block}.{which}.beta")),
                    };
                    dtn_forward_tape(tape, input, &dtn, &g, cfg.eps)
                }
                NormKind::Layer => ln_forward_tape(
                    tape,
                    input,
                    lk.get(&format!("b{block}.{which}.gamma")),
                    lk.get(&format!("b{block}.{which}.beta")),
                    cfg.eps,
                ),
            }
        };
        let n1 = norm(tape, "n1", h);
        norm1_outputs.push(n1);
        let (attn_out, attn) = mhsa(
            tape,
            n1,
            cfg.heads,
            lk.get(&format!("b{block}.qkv.w")),
            lk.get(&format!("b{block}.qkv.b")),
            lk.get(&format!("b{block}.proj.w")),
            lk.get(&format!("b{block}.proj.b")),
        );
        attention.push(attn);
        h = tape.add(h, attn_out);

        let n2 = norm(tape, "n2", h);
        let up = tape.add(
            tape.matmul(n2, lk.get(&format!("b{block}.mlp.w1"))),
            lk.get(&format!("b{block}.mlp.b1")),
        );
        let act = tape.gelu(up);
        let down = tape.add(
            tape.matmul(act, lk.get(&format!("b{block}.mlp.w2"))),
            lk.get(&format!("b{block}.mlp.b2")),
        );
        h = tape.add(h, down);
    }

    let hn = ln_forward_tape(tape, h, lk.get("final.gamma"), lk.get("final.beta"), cfg.eps);
    let pooled = match cfg.class_token_block() {
        Some(_) => {
            let cls_pos = cfg.tokens(); // appended at the end
            tape.reshape(tape.narrow(hn, 1, cls_pos, 1), &[b, cfg.channels])
        }
        None => tape.reshape(tape.mean_axis(hn, 1), &[b, cfg.channels]),
    };
    let logits = tape.add(tape.matmul(pooled, lk.get("head.w")), lk.get("head.b"));
    ForwardOutput {
        logits,
        attention,
        block_inputs,
        norm1_outputs,
    }
}

/// Mean cross-entropy of `logits` against integer `labels`.
pub fn cross_entropy(tape: &Tape, logits: Var, labels: &[usize]) -> Var {
    let shape = tape.shape(logits);
    let (b, k) = (shape[0], shape[1]);
    assert_eq!(labels.len(), b, "cross_entropy: label count mismatch");
    let logp = tape.log_softmax_last(logits);
    let mut onehot = Tensor::zeros(&[b, k]);
    for (i, &label) in labels.iter().enumerate() {
        assert!(label < k, "cross_entropy: label {label} out of range");
        onehot.data_mut()[i * k + label] = 1.0;
    }
    let picked = tape.mul(logp, tape.input(onehot));
    tape.mul_scalar(tape.sum_all(picked), -1.0 / b as f64)
}

/// Argmax predictions from a logits tensor of shape `(B, K)`.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            dtn_layers: 1,
            leading_norm: NormKind::Dynamic,
            heads: 2,
            channels: 8,
            rows: 2,
            cols: 3,
            pool_s: 1,
            patch_dim: 5,
            mlp_ratio: 2,
            classes: 2,
            eps: DEFAULT_EPS,
        }
    }

    fn patch_input(b: usize, t: usize, p: usize, seed: f64) -> Tensor {
        Tensor::from_vec(
            vec![b, t, p],
            (0..b * t * p)
                .map(|i| ((i as f64) * 0.171 + seed).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_shapes_and_attention_sizes() {
        let cfg = tiny_cfg();
        let weights = ModelWeights::init(&cfg, 3).unwrap();
        let tape = Tape::new();
        let vars = push_params(&tape, &weights);
        let x = patch_input(4, 6, 5, 0.0);
        let out = model_forward(&tape, &cfg, &weights, &vars, &x);
        assert_eq!(tape.shape(out.logits), vec![4, 2]);
        assert_eq!(out.attention.len(), 2);
        // Leading block attends over 6 grid tokens, later blocks over 7.
        assert_eq!(tape.shape(out.attention[0]), vec![4, 2, 6, 6]);
        assert_eq!(tape.shape(out.attention[1]), vec![4, 2, 7, 7]);
        // Attention rows are stochastic.
        let a = tape.value(out.attention[1]);
        for row in a.data().chunks(7) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_mixing_matches_layer_norm_baseline() {
        // Same weights, leading norm swapped: with omega at +1000 the
        // dynamic blocks become exact layer norm, so logits must agree.
        for dtn_layers in [0usize, 1, 2] {
            let mut cfg = tiny_cfg();
            cfg.dtn_layers = dtn_layers;
            let mut weights = ModelWeights::init(&cfg, 9).unwrap();
            for p in weights.params.iter_mut() {
                if p.name.contains("omega") {
                    p.value = Tensor::filled(p.value.shape(), 1000.0);
                }
            }
            let mut ln_cfg = cfg.clone();
            ln_cfg.leading_norm = NormKind::Layer;
            let ln_weights = ModelWeights::init(&ln_cfg, 9).unwrap();
            // The LN model lacks omega/a entries; shared names must match.
            let x = patch_input(3, 6, 5, 1.25);

            let tape = Tape::new();
            let vars = push_params(&tape, &weights);
            let out = model_forward(&tape, &cfg, &weights, &vars, &x);
            let dtn_logits = tape.value(out.logits);

            let tape2 = Tape::new();
            let vars2 = push_params(&tape2, &ln_weights);
            let out2 = model_forward(&tape2, &ln_cfg, &ln_weights, &vars2, &x);
            let ln_logits = tape2.value(out2.logits);

            let worst = dtn_logits
                .data()
                .iter()
                .zip(ln_logits.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(
                worst < 1e-7,
                "dtn_layers={dtn_layers}: saturated model deviates by {worst}"
            );
        }
    }

    #[test]
    fn placement_rule_changes_structure() {
        // All-leading vs no-leading models differ in logits even with
        // identical seeds: the class token path is structural.
        let mut all = tiny_cfg();
        all.dtn_layers = 2;
        all.leading_norm = NormKind::Layer;
        let mut none = tiny_cfg();
        none.dtn_layers = 0;
        none.leading_norm = NormKind::Layer;
        assert_eq!(all.class_token_block(), None);
        assert_eq!(none.class_token_block(), Some(0));
        let wa = ModelWeights::init(&all, 5).unwrap();
        let wn = ModelWeights::init(&none, 5).unwrap();
        let x = patch_input(2, 6, 5, 0.6);
        let ta = Tape::new();
        let va = push_params(&ta, &wa);
        let la = ta.value(model_forward(&ta, &all, &wa, &va, &x).logits);
        let tn = Tape::new();
        let vn = push_params(&tn, &wn);
        let ln = tn.value(model_forward(&tn, &none, &wn, &vn, &x).logits);
        let diff: f64 = la
            .data()
            .iter()
            .zip(ln.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "structural change must alter outputs");
    }

    #[test]
    fn init_is_deterministic_and_named_consistently() {
        let cfg = tiny_cfg();
        let a = ModelWeights::init(&cfg, 42).unwrap();
        let b = ModelWeights::init(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = ModelWeights::init(&cfg, 43).unwrap();
        assert_ne!(a, c);
        assert!(a.params.iter().any(|p| p.name == "b0.n1.omega_mean"));
        assert!(a.params.iter().all(|p| p.name != "b1.n1.omega_mean"));
        // Decay flags: matrices yes, everything else no.
        for p in &a.params {
            let is_matrix = p.name.ends_with(".w")
                || p.name.ends_with(".w1")
                || p.name.ends_with(".w2");
            assert_eq!(p.decay, is_matrix, "decay flag wrong for {}", p.name);
        }
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let tape = Tape::new();
        let logits = tape.input(Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = cross_entropy(&tape, logits, &[1]);
        let v = tape.value(loss).data()[0];
        assert!((v - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn model_gradients_flow_to_every_parameter() {
        let cfg = tiny_cfg();
        let weights = ModelWeights::init(&cfg, 7).unwrap();
        let tape = Tape::new();
        let vars = push_params(&tape, &weights);
        let x = patch_input(2, 6, 5, 2.0);
        let out = model_forward(&tape, &cfg, &weights, &vars, &x);
        let loss = cross_entropy(&tape, out.logits, &[0, 1]);
        let grads = tape.backward(loss);
        for (p, v) in weights.params.iter().zip(&vars) {
            let g = grads.get(*v);
            assert!(g.is_some(), "no gradient for {}", p.name);
            let norm: f64 = g.unwrap().data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm.is_finite(), "non-finite gradient for {}", p.name);
        }
    }
}
