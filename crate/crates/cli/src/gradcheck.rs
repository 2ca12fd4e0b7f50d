//! Finite-difference certification: analytic gradients through one
//! normalizer layer (every parameter group and the input) and through
//! a two-block toy model, against central differences at h = 1e-4.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dtn_core::autodiff::check_gradients;
use dtn_core::dtn::{dtn_forward_tape, DtnVars};
use dtn_core::grid::GridGeometry;
use dtn_core::norm::DEFAULT_EPS;
use dtn_core::tensor::Tensor;

use dtn_toy::model::{cross_entropy, model_forward, ModelConfig, ModelWeights, NormKind};

use crate::config::RunConfig;
use crate::CliError;

const DEFAULT_TRIALS: usize = 8;
const LAYER_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-4;

pub const LAYER_GROUPS: [&str; 6] = ["x", "omega_mean", "omega_var", "a", "gamma", "beta"];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Worst relative error per layer parameter group over `trials`
/// random restarts, in `LAYER_GROUPS` order.
pub fn layer_errors(g: &GridGeometry, channels: usize, batch: usize, seed: u64, trials: usize) -> Result<Vec<f64>, CliError> {
    let h = g.heads();
    let t = g.tokens();
    let mut worst = vec![0.0f64; LAYER_GROUPS.len()];
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
        let inputs = vec![
            rand_tensor(&mut rng, &[batch, t, channels], -2.0, 2.0),
            rand_tensor(&mut rng, &[h], -2.0, 2.0),
            rand_tensor(&mut rng, &[h], -2.0, 2.0),
            rand_tensor(&mut rng, &[h, 3], -2.0, 2.0),
            rand_tensor(&mut rng, &[channels], 0.5, 1.5),
            rand_tensor(&mut rng, &[channels], -0.5, 0.5),
        ];
        // A fixed random probe turns the output into a scalar without
        // letting gradient components cancel.
        let probe = rand_tensor(&mut rng, &[batch, t, channels], -1.0, 1.0);
        let geometry = *g;
        let report = check_gradients(
            move |tape, vars| {
                let dtn = DtnVars {
                    omega_mean: vars[1],
                    omega_var: vars[2],
                    a: vars[3],
                    gamma: vars[4],
                    beta: vars[5],
                };
                let y = dtn_forward_tape(tape, vars[0], &dtn, &geometry, DEFAULT_EPS);
                tape.sum_all(tape.mul(y, tape.input(probe.clone())))
            },
            &inputs,
            FD_STEP,
        )?;
        for (w, e) in worst.iter_mut().zip(&report.per_input) {
            *w = w.max(*e);
        }
    }
    Ok(worst)
}

/// Tiny two-block model used for end-to-end certification: small
/// enough that perturbing every coordinate stays fast.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        dtn_layers: 1,
        leading_norm: NormKind::Dynamic,
        heads: 2,
        channels: 4,
        rows: 2,
        cols: 2,
        pool_s: 1,
        patch_dim: 3,
        mlp_ratio: 2,
        classes: 2,
        eps: DEFAULT_EPS,
    }
}

/// Worst relative error per model parameter over `trials` restarts;
/// returns (parameter names, errors).
pub fn model_errors(seed: u64, trials: usize) -> Result<(Vec<String>, Vec<f64>), CliError> {
    let cfg = tiny_model_config();
    let names: Vec<String> = ModelWeights::init(&cfg, 0)
        .map_err(|e| CliError::config(e.to_string()))?
        .params
        .iter()
        .map(|p| p.name.clone())
        .collect();
    let mut worst = vec![0.0f64; names.len()];
    for trial in 0..trials {
        let trial_seed = seed.wrapping_add(trial as u64);
        let mut weights = ModelWeights::init(&cfg, trial_seed)
            .map_err(|e| CliError::config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed ^ 0x5EED_F00D);
        // Move every parameter off its init point so the check does
        // not certify a special configuration.
        for p in weights.params.iter_mut() {
            for v in p.value.data_mut().iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        let x = rand_tensor(&mut rng, &[2, cfg.tokens(), cfg.patch_dim], -1.5, 1.5);
        let labels = vec![0usize, 1];
        let inputs: Vec<Tensor> = weights.params.iter().map(|p| p.value.clone()).collect();
        let cfg2 = cfg.clone();
        let weights2 = weights.clone();
        let report = check_gradients(
            move |tape, vars| {
                let out = model_forward(tape, &cfg2, &weights2, vars, &x);
                cross_entropy(tape, out.logits, &labels)
            },
            &inputs,
            FD_STEP,
        )?;
        for (w, e) in worst.iter_mut().zip(&report.per_input) {
            *w = w.max(*e);
        }
    }
    Ok((names, worst))
}

pub fn run(cfg: &RunConfig, trials: Option<usize>) -> Result<(), CliError> {
    let trials = trials.unwrap_or(DEFAULT_TRIALS);
    if trials == 0 {
        return Err(CliError::config("trials must be positive"));
    }
    let layer_tol = cfg.tol.unwrap_or(LAYER_TOL);
    let model_tol = cfg.tol.map(|t| t * 10.0).unwrap_or(MODEL_TOL);

    let rows = cfg.file.rows.unwrap_or(3);
    let cols = cfg.file.cols.unwrap_or(3);
    let heads = cfg.file.heads.unwrap_or(2);
    let channels = cfg.file.channels.unwrap_or(8);
    let pool_s = cfg.file.pool_s.unwrap_or(1);
    let batch = cfg.file.batch.unwrap_or(2);
    let g = GridGeometry::new(rows, cols, heads, pool_s)?;
    g.require_inter_token()?;

    println!(
        "gradcheck: {trials} trials, seed {}, h = {FD_STEP:e}, layer grid {rows}x{cols}, {heads} heads, {channels} channels",
        cfg.seed
    );
    let layer = layer_errors(&g, channels, batch, cfg.seed, trials)?;
    println!("normalizer layer (tolerance {layer_tol:e}):");
    for (name, err) in LAYER_GROUPS.iter().zip(&layer) {
        println!("  {name}: max relative error = {err:e}");
    }
    for (name, err) in LAYER_GROUPS.iter().zip(&layer) {
        if !(*err < layer_tol) {
            return Err(CliError::check(format!(
                "layer gradient for {name} off by {err:e} (tolerance {layer_tol:e})"
            )));
        }
    }

    let (names, model) = model_errors(cfg.seed, trials)?;
    let (worst_idx, worst) = model
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    println!("two-block model (tolerance {model_tol:e}):");
    for (name, err) in names.iter().zip(&model) {
        println!("  {name}: max relative error = {err:e}");
    }
    if !(*worst < model_tol) {
        return Err(CliError::check(format!(
            "model gradient for {} off by {worst:e} (tolerance {model_tol:e})",
            names[worst_idx]
        )));
    }
    println!("PASS: all gradients certified");
    Ok(())
}
