//! Degeneracy suite: the mixed normalizer collapses onto layer
//! normalization at lambda = 1 and onto instance normalization at
//! lambda = 0 with uniform (or maximally wide banded) positional
//! attention. Random shapes and inputs, seeded and reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dtn_core::dtn::{dtn_forward, dtn_stats_with_lambda, DtnParams, PositionalAttention};
use dtn_core::grid::{banded_matrix, GridGeometry};
use dtn_core::norm::{affine_normalize, in_stats, ln_stats, AffineParams, DEFAULT_EPS};
use dtn_core::tensor::TokenTensor;

use crate::config::RunConfig;
use crate::CliError;

const DEFAULT_CASES: usize = 100;
const DEFAULT_TOL: f64 = 1e-9;

struct Case {
    x: TokenTensor,
    g: GridGeometry,
    params: DtnParams,
}

fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..=4);
    // Grid with at least two tokens, at most 64.
    let (rows, cols) = loop {
        let r = rng.random_range(1..=8);
        let c = rng.random_range(1..=8);
        if r * c >= 2 && r * c <= 64 {
            break (r, c);
        }
    };
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let width = rng.random_range(1..=(32 / heads).min(8));
    let c = heads * width;
    let g = GridGeometry::new(rows, cols, heads, 1).unwrap();
    let t = rows * cols;
    let x = TokenTensor::from_parts(
        b,
        t,
        c,
        (0..b * t * c).map(|_| rng.random_range(-3.0..3.0)).collect(),
    )
    .unwrap();
    let mut params = DtnParams::init(&g, c).unwrap();
    for row in params.a.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    params.affine = AffineParams::new(
        (0..c).map(|_| rng.random_range(0.5..1.5)).collect(),
        (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
    )
    .unwrap();
    Case { x, g, params }
}

fn max_abs_diff(a: &TokenTensor, b: &TokenTensor) -> f64 {
    a.tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Max deviations over `cases` random inputs, in suite order:
/// lambda=1 vs LN, lambda=0 uniform vs IN, lambda=0 banded vs IN.
pub fn deviations(seed: u64, cases: usize) -> Result<[f64; 3], CliError> {
    let mut worst = [0.0f64; 3];
    for i in 0..cases {
        let case = random_case(seed.wrapping_add(i as u64));
        let (x, g) = (&case.x, &case.g);
        let h = g.heads();
        let eps = DEFAULT_EPS;

        // Saturated mixing logits make lambda exactly 1.
        let mut ln_like = case.params.clone();
        ln_like.omega_mean = vec![1000.0; h];
        ln_like.omega_var = vec![1000.0; h];
        let got = dtn_forward(x, &ln_like, g, eps)?;
        let want = affine_normalize(x, &ln_stats(x)?, &ln_like.affine, eps)?;
        worst[0] = worst[0].max(max_abs_diff(&got, &want));

        // Zero position coefficients give an exactly uniform map;
        // omega at -1000 makes lambda exactly 0.
        let mut in_like = case.params.clone();
        in_like.omega_mean = vec![-1000.0; h];
        in_like.omega_var = vec![-1000.0; h];
        in_like.a = vec![[0.0; 3]; h];
        let got = dtn_forward(x, &in_like, g, eps)?;
        let want = affine_normalize(x, &in_stats(x)?, &in_like.affine, eps)?;
        worst[1] = worst[1].max(max_abs_diff(&got, &want));

        // A band covering every token is the uniform map again.
        let t = g.tokens();
        let band = banded_matrix(t, 2 * t - 1)?;
        let p: Vec<PositionalAttention> = (0..h)
            .map(|head| PositionalAttention::new(head, band.clone()))
            .collect::<Result<_, _>>()?;
        let stats = dtn_stats_with_lambda(x, &p, g, &vec![0.0; h], &vec![0.0; h])?;
        let got = affine_normalize(x, &stats, &case.params.affine, eps)?;
        let want = affine_normalize(x, &in_stats(x)?, &case.params.affine, eps)?;
        worst[2] = worst[2].max(max_abs_diff(&got, &want));
    }
    Ok(worst)
}

pub fn run(cfg: &RunConfig, cases: Option<usize>) -> Result<(), CliError> {
    let cases = cases.unwrap_or(DEFAULT_CASES);
    let tol = cfg.tol.unwrap_or(DEFAULT_TOL);
    if cases == 0 {
        return Err(CliError::config("cases must be positive"));
    }
    let names = [
        "mixed(lambda=1) vs layer norm",
        "mixed(lambda=0, uniform) vs instance norm",
        "mixed(lambda=0, banded 2T-1) vs instance norm",
    ];
    let worst = deviations(cfg.seed, cases)?;
    println!("equiv: {cases} cases, seed {}, tolerance {tol:e}", cfg.seed);
    for (name, dev) in names.iter().zip(&worst) {
        println!("  {name}: max |delta| = {dev:e}");
    }
    for (name, dev) in names.iter().zip(&worst) {
        if !(*dev < tol) {
            return Err(CliError::check(format!(
                "{name} deviated by {dev:e} (tolerance {tol:e})"
            )));
        }
    }
    println!("PASS: all degeneracies within {tol:e}");
    Ok(())
}
