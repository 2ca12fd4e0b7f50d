//! Robustness fuzz: extreme position coefficients, saturated mixing
//! logits, constant tokens, and pooling must never produce negative
//! variances or non-finite outputs.

use dtn_core::dtn::{build_positional_attention, dtn_forward, dtn_stats, DtnParams};
use dtn_core::grid::{build_rel_pos, GridGeometry};
use dtn_core::norm::DEFAULT_EPS;
use dtn_core::tensor::TokenTensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
enum DataKind {
    Smooth,
    Large,
    ConstantTokens,
    ConstantEverything,
}

fn build_input(rng: &mut ChaCha8Rng, kind: DataKind, b: usize, t: usize, c: usize) -> TokenTensor {
    let data: Vec<f64> = match kind {
        DataKind::Smooth => (0..b * t * c).map(|_| rng.random_range(-3.0..3.0)).collect(),
        DataKind::Large => (0..b * t * c)
            .map(|_| rng.random_range(-100.0..100.0))
            .collect(),
        DataKind::ConstantTokens => {
            // Every token identical: inter-token variance is exactly 0.
            let proto: Vec<f64> = (0..c).map(|_| rng.random_range(-10.0..10.0)).collect();
            (0..b * t).flat_map(|_| proto.clone()).collect()
        }
        DataKind::ConstantEverything => vec![rng.random_range(-10.0..10.0); b * t * c],
    };
    TokenTensor::from_parts(b, t, c, data).unwrap()
}

fn config() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, u64)> {
    // rows, cols, heads, width, batch, kind index, seed
    (
        prop::sample::select(vec![2usize, 3, 4, 6, 8]),
        prop::sample::select(vec![1usize, 2, 3, 4, 8]),
        prop::sample::select(vec![1usize, 2, 4]),
        1usize..=3,
        1usize..=2,
        0usize..4,
        any::<u64>(),
    )
        .prop_filter("need 2+ tokens", |(r, c, ..)| r * c >= 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn extreme_parameters_keep_stats_and_outputs_finite(
        (rows, cols, heads, width, b, kind_idx, seed) in config(),
    ) {
        let kinds = [
            DataKind::Smooth,
            DataKind::Large,
            DataKind::ConstantTokens,
            DataKind::ConstantEverything,
        ];
        let kind = kinds[kind_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GridGeometry::new(rows, cols, heads, 1).unwrap();
        let c = heads * width;
        let x = build_input(&mut rng, kind, b, g.tokens(), c);

        let mut params = DtnParams::init(&g, c).unwrap();
        for coeff in params.a.iter_mut() {
            for v in coeff.iter_mut() {
                *v = rng.random_range(-100.0..100.0);
            }
        }
        for w in params.omega_mean.iter_mut().chain(params.omega_var.iter_mut()) {
            *w = rng.random_range(-30.0..30.0);
        }

        let p = build_positional_attention(&build_rel_pos(&g), &params.a).unwrap();
        for pa in &p {
            prop_assert!(pa.matrix().all_finite());
        }
        let stats = dtn_stats(&x, &params, &p, &g).unwrap();
        prop_assert!(stats.mean.all_finite(), "{kind:?}: non-finite mean");
        for (i, v) in stats.var.data().iter().enumerate() {
            prop_assert!(v.is_finite() && *v >= 0.0, "{kind:?}: var[{i}] = {v}");
        }
        let y = dtn_forward(&x, &params, &g, DEFAULT_EPS).unwrap();
        prop_assert!(y.tensor().all_finite(), "{kind:?}: non-finite output");
    }

    #[test]
    fn pooled_geometries_stay_finite_under_extremes(
        seed in any::<u64>(),
        kind_idx in 0usize..4,
    ) {
        let kinds = [
            DataKind::Smooth,
            DataKind::Large,
            DataKind::ConstantTokens,
            DataKind::ConstantEverything,
        ];
        let kind = kinds[kind_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GridGeometry::new(4, 6, 2, 2).unwrap();
        let x = build_input(&mut rng, kind, 2, 24, 6);
        let mut params = DtnParams::init(&g, 6).unwrap();
        for coeff in params.a.iter_mut() {
            for v in coeff.iter_mut() {
                *v = rng.random_range(-100.0..100.0);
            }
        }
        let p = build_positional_attention(&build_rel_pos(&g), &params.a).unwrap();
        let stats = dtn_stats(&x, &params, &p, &g).unwrap();
        prop_assert!(stats.var.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        let y = dtn_forward(&x, &params, &g, DEFAULT_EPS).unwrap();
        prop_assert!(y.tensor().all_finite());
    }
}
