//! `analyze`: attention distances, variation coefficients, and token
//! magnitudes from a trained checkpoint, plus mixing-trace summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dtn_core::analysis::{
    mean_attention_distance, parse_lambda_trace, summarize_lambda, token_magnitude,
    variation_coefficient,
};
use dtn_core::dtn::{build_positional_attention, dtn_stats};
use dtn_core::grid::{build_rel_pos, GridGeometry};
use dtn_core::norm::{in_stats, ln_stats};
use dtn_core::tensor::{Tensor, TokenTensor};

use dtn_toy::model::{model_forward, push_params, ModelConfig, ModelWeights, NormKind};
use dtn_toy::tasks::{generate, Task};
use dtn_toy::train::Checkpoint;

use dtn_core::autodiff::Tape;

use crate::config::RunConfig;
use crate::CliError;

const DEFAULT_BATCH: usize = 64;

/// Attention over the grid tokens only: later blocks carry a class
/// token appended after the grid, so its row and column are stripped
/// and the remaining rows renormalized before measuring distances.
fn grid_attention(a: &Tensor, sample: usize, head: usize, t: usize) -> Tensor {
    let shape = a.shape();
    let (heads, tb) = (shape[1], shape[2]);
    let mut out = vec![0.0; t * t];
    let base = (sample * heads + head) * tb * tb;
    for i in 0..t {
        let row = &a.data()[base + i * tb..base + i * tb + t];
        let sum: f64 = row.iter().sum();
        let denom = sum.max(1e-12);
        for j in 0..t {
            out[i * t + j] = row[j] / denom;
        }
    }
    Tensor::from_vec(vec![t, t], out).unwrap()
}

struct BlockMetrics {
    /// Mean attention distance per head, averaged over the batch.
    distance: Vec<f64>,
    /// Mean per-head token magnitude after the first normalizer.
    magnitude: Vec<f64>,
}

fn forward_metrics(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    x: &Tensor,
) -> Result<Vec<BlockMetrics>, CliError> {
    let tape = Tape::new();
    let vars = push_params(&tape, weights);
    let out = model_forward(&tape, cfg, weights, &vars, x);
    let b = x.shape()[0];
    let t = cfg.tokens();
    // Distances are measured on the un-pooled token grid.
    let grid = GridGeometry::new(cfg.rows, cfg.cols, cfg.heads, 1)?;
    let mut blocks = Vec::with_capacity(cfg.layers);
    for block in 0..cfg.layers {
        let attn = tape.value(out.attention[block]);
        let mut distance = vec![0.0; cfg.heads];
        for (head, slot) in distance.iter_mut().enumerate() {
            let mut total = 0.0;
            for sample in 0..b {
                let a = grid_attention(&attn, sample, head, t);
                total += mean_attention_distance(&a, &grid)?;
            }
            *slot = total / b as f64;
        }
        let n1 = tape.value(out.norm1_outputs[block]);
        let tokens_b = n1.shape()[1];
        let tok = TokenTensor::new(n1)?;
        let mags = token_magnitude(&tok, cfg.heads)?;
        let mut magnitude = vec![0.0; cfg.heads];
        for (head, slot) in magnitude.iter_mut().enumerate() {
            let mut total = 0.0;
            for sample in 0..b {
                for ti in 0..tokens_b {
                    total += mags.data()[(sample * cfg.heads + head) * tokens_b + ti];
                }
            }
            *slot = total / (b * tokens_b) as f64;
        }
        blocks.push(BlockMetrics {
            distance,
            magnitude,
        });
    }

    Ok(blocks)
}

fn entry_variation(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    x: &Tensor,
) -> Result<(f64, f64, Option<f64>), CliError> {
    // Variation coefficients of the stream entering block 0, under
    // each normalizer's statistics.
    let tape = Tape::new();
    let vars = push_params(&tape, weights);
    let out = model_forward(&tape, cfg, weights, &vars, x);
    let entry = TokenTensor::new(tape.value(out.block_inputs[0]))?;
    let vc_ln = variation_coefficient(&entry, &ln_stats(&entry)?)?;
    let vc_in = variation_coefficient(&entry, &in_stats(&entry)?)?;
    let vc_dtn = match (cfg.block_norm(0) == NormKind::Dynamic, weights.dtn_params(0, "n1")) {
        (true, Some(params)) => {
            let g = cfg.geometry().map_err(|e| CliError::config(e.to_string()))?;
            let r = build_rel_pos(&g);
            let p = build_positional_attention(&r, &params.a)?;
            Some(variation_coefficient(&entry, &dtn_stats(&entry, &params, &p, &g)?)?)
        }
        _ => None,
    };
    Ok((vc_ln, vc_in, vc_dtn))
}

pub fn run(
    cfg: &RunConfig,
    checkpoint: &Path,
    trace: Option<&Path>,
    batch: Option<usize>,
) -> Result<(), CliError> {
    let batch = batch.unwrap_or(DEFAULT_BATCH);
    if batch == 0 {
        return Err(CliError::config("batch must be positive"));
    }
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| CliError::config(e.to_string()))?;
    let weights = ckpt.into_weights().map_err(|e| CliError::config(e.to_string()))?;
    let model = &ckpt.config;
    let task = Task::parse(&ckpt.task)?;
    // Fresh task samples, deterministic in the recorded seed.
    let data = generate(task, batch, ckpt.seed.wrapping_add(0xA11A));
    if data.tokens() != model.tokens() || data.patch_dim != model.patch_dim {
        return Err(CliError::config(
            "checkpoint model does not match the task geometry",
        ));
    }
    let idx: Vec<usize> = (0..batch).collect();
    let (x, _) = data.batch(&idx);

    println!(
        "analyze: checkpoint {} (task {}, step {}, seed {}), batch {batch}",
        checkpoint.display(),
        ckpt.task,
        ckpt.step,
        ckpt.seed
    );

    let blocks = forward_metrics(model, &weights, &x)?;
    let mut dist_csv = format!("# seed={}\nblock,head,mean_attention_distance\n", ckpt.seed);
    let mut mag_csv = format!("# seed={}\nblock,head,mean_token_magnitude\n", ckpt.seed);
    for (block, m) in blocks.iter().enumerate() {
        for head in 0..model.heads {
            writeln!(dist_csv, "{block},{head},{}", m.distance[head]).unwrap();
            writeln!(mag_csv, "{block},{head},{}", m.magnitude[head]).unwrap();
        }
        let line: Vec<String> = m.distance.iter().map(|d| format!("{d:.3}")).collect();
        println!("  block {block} attention distance per head: {}", line.join(", "));
    }

    let (vc_ln, vc_in, vc_dtn) = entry_variation(model, &weights, &x)?;
    match vc_dtn {
        Some(v) => println!(
            "  variation coefficient at block 0: layer {vc_ln:.4}, instance {vc_in:.4}, mixed {v:.4}"
        ),
        None => println!("  variation coefficient at block 0: layer {vc_ln:.4}, instance {vc_in:.4}"),
    }

    let dir = cfg.out_dir()?;
    let dist_path = dir.join("attention-distance.csv");
    let mag_path = dir.join("magnitudes.csv");
    fs::write(&dist_path, dist_csv)?;
    fs::write(&mag_path, mag_csv)?;
    println!("wrote {}", dist_path.display());
    println!("wrote {}", mag_path.display());

    if let Some(trace_path) = trace {
        let text = fs::read_to_string(trace_path)?;
        let rows = parse_lambda_trace(&text)?;
        let summaries = summarize_lambda(&rows);
        println!("mixing weights ({} normalizer/head pairs):", summaries.len());
        for s in &summaries {
            println!(
                "  layer {} head {}: mean {:.3} -> {:.3}, var {:.3} -> {:.3}",
                s.layer, s.head, s.start_mean, s.end_mean, s.start_var, s.end_var
            );
        }
    }
    Ok(())
}
