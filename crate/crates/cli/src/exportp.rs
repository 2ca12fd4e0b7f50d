//! `export-p`: positional attention maps as PGM heatmaps, either at
//! initialization for a chosen geometry or from a trained checkpoint.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dtn_core::analysis::write_pgm_heatmap;
use dtn_core::dtn::{build_positional_attention, DtnParams};
use dtn_core::grid::{build_rel_pos, GridGeometry};

use dtn_toy::model::NormKind;
use dtn_toy::train::Checkpoint;

use crate::config::RunConfig;
use crate::CliError;

fn export_maps(
    dir: &Path,
    stem: &str,
    params: &DtnParams,
    g: &GridGeometry,
    written: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    let r = build_rel_pos(g);
    let maps = build_positional_attention(&r, &params.a)?;
    for (head, map) in maps.iter().enumerate() {
        let path = dir.join(format!("{stem}-h{head}.pgm"));
        write_pgm_heatmap(&path, map.matrix())?;
        written.push(path);
    }
    Ok(())
}

pub fn run(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    rows: Option<usize>,
    cols: Option<usize>,
    heads: Option<usize>,
) -> Result<(), CliError> {
    let dir = cfg.out_dir()?.clone();
    let mut written = Vec::new();
    let seed;
    match checkpoint {
        None => {
            let rows = rows.unwrap_or(6);
            let cols = cols.unwrap_or(6);
            let heads = heads.unwrap_or(4);
            let g = GridGeometry::new(rows, cols, heads, cfg.file.pool_s.unwrap_or(1))?;
            g.require_inter_token()?;
            let params = DtnParams::init(&g, heads)?;
            println!(
                "export-p: initial maps for {rows}x{cols} grid, {heads} heads"
            );
            export_maps(&dir, "p-init", &params, &g, &mut written)?;
            seed = cfg.seed;
        }
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(|e| CliError::config(e.to_string()))?;
            let weights = ckpt
                .into_weights()
                .map_err(|e| CliError::config(e.to_string()))?;
            let model = &ckpt.config;
            let g = model
                .geometry()
                .map_err(|e| CliError::config(e.to_string()))?;
            println!(
                "export-p: trained maps from {} (task {}, step {})",
                path.display(),
                ckpt.task,
                ckpt.step
            );
            let mut found = false;
            for block in 0..model.layers {
                if model.block_norm(block) != NormKind::Dynamic {
                    continue;
                }
                for norm in ["n1", "n2"] {
                    let params = weights.dtn_params(block, norm).ok_or_else(|| {
                        CliError::config(format!("checkpoint lacks b{block}.{norm} parameters"))
                    })?;
                    export_maps(&dir, &format!("p-b{block}-{norm}"), &params, &g, &mut written)?;
                    found = true;
                }
            }
            if !found {
                return Err(CliError::config(
                    "checkpoint holds no dynamic normalizer blocks to export",
                ));
            }
            seed = ckpt.seed;
        }
    }
    let mut manifest = format!("seed {seed}\n");
    for path in &written {
        writeln!(manifest, "{}", path.display()).unwrap();
        println!("wrote {}", path.display());
    }
    let manifest_path = dir.join("p-manifest.txt");
    fs::write(&manifest_path, manifest)?;
    println!("wrote {}", manifest_path.display());
    Ok(())
}
