//! Analytic cost model for adding dynamic normalization to a
//! transformer encoder stack.
//!
//! Costs count one multiply-accumulate as a single operation, matching
//! the convention used for the reference model sizes below. Parameter
//! counts come in two flavours: the reporting basis `2C + 3H` (affine
//! plus one mixing weight and three position coefficients per head)
//! and the actual implementation count `2C + 5H`, which carries
//! separate mixing weights for the mean and the variance.

use serde::Serialize;

use crate::error::CoreError;
use crate::grid::GridGeometry;

/// Per-layer operation counts added by one dynamic normalizer.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CostBreakdown {
    /// Two weighted token aggregations (first and second moment).
    pub p_product_macs: u64,
    /// Building the per-head logits from the three position features.
    pub logit_macs: u64,
    /// Row softmax over the pooled grid (max, exp, sum, divide).
    pub softmax_flops: u64,
    /// Squares, products, and the variance clamp on the pooled grid.
    pub moment_flops: u64,
    /// Mixing the two statistics at full resolution (two lerps).
    pub mixture_flops: u64,
    /// Token averaging when pooling is active.
    pub pooling_flops: u64,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.p_product_macs
            + self.logit_macs
            + self.softmax_flops
            + self.moment_flops
            + self.mixture_flops
            + self.pooling_flops
    }
}

/// Cost and parameter deltas for a stack of `layer_count` encoders of
/// which the first `dtn_layers` carry a dynamic normalizer.
#[derive(Clone, Debug, Serialize)]
pub struct ComplexityReport {
    pub tokens: usize,
    pub pooled_tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub layer_count: usize,
    pub dtn_layers: usize,
    /// Layer normalization it replaces: gamma and beta.
    pub ln_params_per_layer: u64,
    /// Reporting basis: `2C + 3H`.
    pub dtn_params_per_layer_basis: u64,
    /// Implementation count: `2C + 5H`.
    pub dtn_params_per_layer_actual: u64,
    pub added_params_basis: u64,
    pub added_params_actual: u64,
    pub per_layer: CostBreakdown,
    pub delta_flops_per_layer: u64,
    pub delta_flops_model: u64,
}

impl ComplexityReport {
    /// Fraction of a model's parameter count taken by the added
    /// normalizer parameters.
    pub fn added_param_fraction(&self, model_params: u64) -> f64 {
        self.added_params_actual as f64 / model_params as f64
    }

    pub fn delta_gflops(&self) -> f64 {
        self.delta_flops_model as f64 / 1e9
    }
}

pub fn complexity_report(
    g: &GridGeometry,
    channels: usize,
    layer_count: usize,
    dtn_layers: usize,
) -> Result<ComplexityReport, CoreError> {
    if channels == 0 || channels % g.heads() != 0 {
        return Err(CoreError::invalid(format!(
            "channel count {channels} not divisible by {} heads",
            g.heads()
        )));
    }
    if dtn_layers > layer_count {
        return Err(CoreError::invalid(format!(
            "dtn layer count {dtn_layers} exceeds stack depth {layer_count}"
        )));
    }
    let (t, tp, h, c) = (
        g.tokens() as u64,
        g.pooled_tokens() as u64,
        g.heads() as u64,
        channels as u64,
    );
    let per_layer = CostBreakdown {
        p_product_macs: 2 * tp * tp * c,
        logit_macs: 3 * h * tp * tp,
        softmax_flops: 4 * h * tp * tp,
        moment_flops: 3 * tp * c,
        mixture_flops: 4 * t * c,
        pooling_flops: if g.pool_s() > 1 { t * c } else { 0 },
    };
    let delta_flops_per_layer = per_layer.total();
    Ok(ComplexityReport {
        tokens: g.tokens(),
        pooled_tokens: g.pooled_tokens(),
        channels,
        heads: g.heads(),
        layer_count,
        dtn_layers,
        ln_params_per_layer: 2 * c,
        dtn_params_per_layer_basis: 2 * c + 3 * h,
        dtn_params_per_layer_actual: 2 * c + 5 * h,
        added_params_basis: 3 * h * dtn_layers as u64,
        added_params_actual: 5 * h * dtn_layers as u64,
        per_layer,
        delta_flops_per_layer,
        delta_flops_model: delta_flops_per_layer * dtn_layers as u64,
    })
}

/// Reference vision-transformer configurations (224 px, 16 px patches:
/// a 14 x 14 token grid, 12 encoders, normalizer in the first 10).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct VitPreset {
    pub name: &'static str,
    pub heads: usize,
    pub channels: usize,
    /// Parameter count of the unmodified model.
    pub params: u64,
    /// Cost of the unmodified model, in billions of operations.
    pub base_gflops: f64,
    /// Published cost with the dynamic normalizer, for comparison.
    pub reference_gflops: f64,
}

pub const VIT_GRID: (usize, usize) = (14, 14);
pub const VIT_LAYERS: usize = 12;
pub const VIT_DTN_LAYERS: usize = 10;

pub const VIT_PRESETS: &[VitPreset] = &[
    VitPreset { name: "vit-t", heads: 3, channels: 192, params: 5_700_000, base_gflops: 1.26, reference_gflops: 1.40 },
    VitPreset { name: "vit-t-star", heads: 4, channels: 192, params: 5_700_000, base_gflops: 1.26, reference_gflops: 1.40 },
    VitPreset { name: "vit-s", heads: 6, channels: 384, params: 22_100_000, base_gflops: 4.60, reference_gflops: 4.88 },
    VitPreset { name: "vit-s-star", heads: 9, channels: 432, params: 27_800_000, base_gflops: 5.77, reference_gflops: 6.08 },
    VitPreset { name: "vit-b", heads: 12, channels: 768, params: 86_500_000, base_gflops: 17.58, reference_gflops: 18.13 },
    VitPreset { name: "vit-b-star", heads: 16, channels: 768, params: 86_500_000, base_gflops: 17.58, reference_gflops: 18.13 },
];

/// Look up a preset by name; accepts `vit-s-star` and `vit-s*` forms.
pub fn preset(name: &str) -> Option<&'static VitPreset> {
    let canon = name.trim().to_ascii_lowercase().replace('*', "-star");
    VIT_PRESETS.iter().find(|p| p.name == canon)
}

/// Report for a preset at pooling `pool_s` (1 leaves the grid intact).
pub fn preset_report(p: &VitPreset, pool_s: usize) -> Result<ComplexityReport, CoreError> {
    let g = GridGeometry::new(VIT_GRID.0, VIT_GRID.1, p.heads, pool_s)?;
    complexity_report(&g, p.channels, VIT_LAYERS, VIT_DTN_LAYERS)
}
