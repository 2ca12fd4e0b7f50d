//! `train`: run the toy harness on a synthetic task and write the
//! checkpoint plus the mixing-weight trace CSV.

use std::fs;

use dtn_toy::model::{ModelConfig, NormKind};
use dtn_toy::tasks::{Task, TASK_COLS, TASK_PATCH_DIM, TASK_ROWS};
use dtn_toy::train::{train, TrainConfig};

use crate::config::RunConfig;
use crate::CliError;

pub struct Flags {
    pub task: Option<String>,
    pub norm: Option<String>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub samples: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub trace_every: Option<usize>,
}

fn parse_norm(s: &str) -> Result<NormKind, CliError> {
    match s {
        "dtn" => Ok(NormKind::Dynamic),
        "ln" => Ok(NormKind::Layer),
        other => Err(CliError::config(format!(
            "unknown norm '{other}' (expected dtn or ln)"
        ))),
    }
}

fn norm_tag(norm: NormKind) -> &'static str {
    match norm {
        NormKind::Dynamic => "dtn",
        NormKind::Layer => "ln",
    }
}

/// Model and optimizer settings resolved from flags and config file.
pub fn resolve(cfg: &RunConfig, flags: &Flags) -> Result<(ModelConfig, TrainConfig, Task), CliError> {
    let task = Task::parse(
        flags
            .task
            .as_deref()
            .or(cfg.file.task.as_deref())
            .unwrap_or("local-texture"),
    )?;
    let norm = parse_norm(
        flags
            .norm
            .as_deref()
            .or(cfg.file.norm.as_deref())
            .unwrap_or("dtn"),
    )?;
    let mut model = ModelConfig::toy(TASK_ROWS, TASK_COLS, TASK_PATCH_DIM, 2);
    model.leading_norm = norm;
    if let Some(layers) = cfg.file.layers {
        model.layers = layers;
        model.dtn_layers = 5 * layers / 6;
    }
    if let Some(d) = cfg.file.dtn_layers {
        model.dtn_layers = d;
    }
    if let Some(h) = cfg.file.heads {
        model.heads = h;
    }
    if let Some(c) = cfg.file.channels {
        model.channels = c;
    }
    if let Some(m) = cfg.file.mlp_ratio {
        model.mlp_ratio = m;
    }

    let mut tc = TrainConfig::quick(flags.steps.or(cfg.file.steps).unwrap_or(300), cfg.seed);
    if let Some(b) = flags.batch.or(cfg.file.batch) {
        tc.batch = b;
    }
    if let Some(s) = flags.samples.or(cfg.file.samples) {
        tc.samples = s;
    }
    if let Some(lr) = flags.lr.or(cfg.file.lr) {
        tc.lr = lr;
    }
    if let Some(wd) = flags.weight_decay.or(cfg.file.weight_decay) {
        tc.weight_decay = wd;
    }
    if let Some(te) = flags.trace_every.or(cfg.file.trace_every) {
        tc.trace_every = te;
    }
    tc.threads = cfg.threads;
    Ok((model, tc, task))
}

pub fn run(cfg: &RunConfig, flags: Flags) -> Result<(), CliError> {
    let (model, tc, task) = resolve(cfg, &flags)?;
    let tag = format!("{}-{}-seed{}", task.name(), norm_tag(model.leading_norm), tc.seed);
    println!(
        "train: task {}, norm {}, {} steps, batch {}, lr {}, seed {}",
        task.name(),
        norm_tag(model.leading_norm),
        tc.steps,
        tc.batch,
        tc.lr,
        tc.seed
    );
    let out = train(&model, &tc, task)?;
    let dir = cfg.out_dir()?;
    let ckpt_path = dir.join(format!("checkpoint-{tag}.json"));
    let trace_path = dir.join(format!("lambda-{tag}.csv"));
    out.checkpoint
        .save(&ckpt_path)
        .map_err(|e| CliError::config(e.to_string()))?;
    fs::write(&trace_path, &out.lambda_trace)?;
    println!(
        "final loss {:.6}, train accuracy {:.4}, eval accuracy {:.4}",
        out.losses.last().unwrap(),
        out.train_accuracy,
        out.eval_accuracy
    );
    println!("wrote {}", ckpt_path.display());
    println!("wrote {}", trace_path.display());
    Ok(())
}
