//! `complexity`: analytic cost deltas for the normalizer, either for
//! a named encoder preset or for a custom geometry from a config file.
//! Preset runs double as a check: the computed delta must land within
//! 20% of the published reference delta.

use dtn_core::complexity::{
    complexity_report, preset, preset_report, ComplexityReport, VitPreset, VIT_GRID, VIT_LAYERS, VIT_PRESETS,
};
use dtn_core::grid::GridGeometry;

use crate::config::RunConfig;
use crate::CliError;

fn print_report(r: &ComplexityReport) {
    println!(
        "  grid {} tokens ({} after pooling), {} channels, {} heads, normalizer in {} of {} encoders",
        r.tokens, r.pooled_tokens, r.channels, r.heads, r.dtn_layers, r.layer_count
    );
    let b = &r.per_layer;
    println!(
        "  per layer: +{} ops (stat products {}, position logits {}, row softmax {}, moments {}, mixture {}, pooling {})",
        r.delta_flops_per_layer,
        b.p_product_macs,
        b.logit_macs,
        b.softmax_flops,
        b.moment_flops,
        b.mixture_flops,
        b.pooling_flops
    );
    println!(
        "  params per normalizer: 2C+3H = {} reporting basis, 2C+5H = {} as implemented (layer norm: {})",
        r.dtn_params_per_layer_basis, r.dtn_params_per_layer_actual, r.ln_params_per_layer
    );
}

fn check_preset(p: &VitPreset, r: &ComplexityReport) -> Result<(), CliError> {
    let computed = r.delta_gflops();
    let reference = p.reference_gflops - p.base_gflops;
    println!(
        "  delta flops ~ {computed:.2}G (reference: {:.2}G -> {:.2}G)",
        p.base_gflops, p.reference_gflops
    );
    println!(
        "  added params: {} ({:.5}% of {:.1}M)",
        r.added_params_actual,
        100.0 * r.added_param_fraction(p.params),
        p.params as f64 / 1e6
    );
    let rel = (computed - reference).abs() / reference;
    if rel > 0.2 {
        return Err(CliError::check(format!(
            "{}: computed delta {computed:.3}G misses reference {reference:.3}G by {:.0}%",
            p.name,
            rel * 100.0
        )));
    }
    Ok(())
}

pub fn run(cfg: &RunConfig, model: Option<String>, pool_s: Option<usize>) -> Result<(), CliError> {
    let pool_s = pool_s.unwrap_or(1);
    if let Some(name) = model {
        let p = preset(&name).ok_or_else(|| {
            let known: Vec<&str> = VIT_PRESETS.iter().map(|p| p.name).collect();
            CliError::config(format!(
                "unknown model '{name}' (known: {})",
                known.join(", ")
            ))
        })?;
        println!("{} ({}x{} grid, {} encoders):", p.name, VIT_GRID.0, VIT_GRID.1, VIT_LAYERS);
        let r = preset_report(p, pool_s)?;
        print_report(&r);
        check_preset(p, &r)?;
        println!("PASS: delta within 20% of reference");
        return Ok(());
    }
    if let (Some(rows), Some(cols), Some(heads), Some(channels)) = (
        cfg.file.rows,
        cfg.file.cols,
        cfg.file.heads,
        cfg.file.channels,
    ) {
        let layers = cfg.file.layers.unwrap_or(VIT_LAYERS);
        let dtn_layers = cfg.file.dtn_layers.unwrap_or_else(|| 5 * layers / 6);
        let g = GridGeometry::new(rows, cols, heads, pool_s)?;
        let r = complexity_report(&g, channels, layers, dtn_layers)?;
        println!("custom geometry:");
        print_report(&r);
        println!("  delta flops ~ {:.4}G", r.delta_gflops());
        return Ok(());
    }
    // No model named: report every preset.
    for p in VIT_PRESETS {
        println!("{}:", p.name);
        let r = preset_report(p, pool_s)?;
        print_report(&r);
        check_preset(p, &r)?;
    }
    println!("PASS: all preset deltas within 20% of reference");
    Ok(())
}
