//! Positional attention: row-stochasticity and initial locality,
//! checked against a brute-force argmax oracle on every grid from
//! 2x2 to 8x8 for 1, 4, and 9 heads.

use dtn_core::dtn::{build_positional_attention, DtnParams};
use dtn_core::grid::{build_rel_pos, init_offsets, GridGeometry};

/// Independent oracle: the initial logit from offset (d1, d2) to a

/// displacement (dx, dy) is -( (dx-d1)^2 + (dy-d2)^2 ) up to a per-row
/// constant, so the in-grid argmax is the token at that displacement.
fn brute_force_argmax(
    rows: usize,
    cols: usize,
    token: usize,
    d1: i64,
    d2: i64,
) -> Option<usize> {
    let (ri, ci) = ((token / cols) as i64, (token % cols) as i64);
    let mut best: Option<(f64, usize)> = None;
    for j in 0..rows * cols {
        let (rj, cj) = ((j / cols) as i64, (j % cols) as i64);
        let dx = (cj - ci - d1) as f64;
        let dy = (rj - ri - d2) as f64;
        let score = -(dx * dx + dy * dy);
        if best.map(|(s, _)| score > s).unwrap_or(true) {
            best = Some((score, j));
        }
    }
    best.map(|(_, j)| j)
}

#[test]
fn rows_are_stochastic_and_interior_peaks_sit_at_offsets() {
    let mut checked_rows = 0usize;
    let mut checked_peaks = 0usize;
    for rows in 2..=8usize {
        for cols in 2..=8usize {
            for heads in [1usize, 4, 9] {
                let g = GridGeometry::new(rows, cols, heads, 1).unwrap();
                let params = DtnParams::init(&g, 2 * heads).unwrap();
                let p = build_positional_attention(&build_rel_pos(&g), &params.a).unwrap();
                let offsets = init_offsets(heads);
                for (h, &(d1, d2)) in offsets.iter().enumerate() {
                    let mat = p[h].matrix();
                    let t = g.tokens();
                    for i in 0..t {
                        let row = &mat.data()[i * t..(i + 1) * t];
                        let sum: f64 = row.iter().sum();
                        assert!(
                            (sum - 1.0).abs() < 1e-9,
                            "{rows}x{cols} h{h}: row {i} sums to {sum}"
                        );
                        checked_rows += 1;

                        // Interior token: the whole offset window stays
                        // inside the grid.
                        let (ri, ci) = ((i / cols) as i64, (i % cols) as i64);
                        let (tr, tc) = (ri + d2, ci + d1);
                        if tr < 0 || tr >= rows as i64 || tc < 0 || tc >= cols as i64 {
                            continue;
                        }
                        let target = (tr as usize) * cols + tc as usize;
                        let argmax = row
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .unwrap()
                            .0;
                        let oracle = brute_force_argmax(rows, cols, i, d1, d2).unwrap();
                        assert_eq!(
                            argmax, target,
                            "{rows}x{cols} head {h} offset ({d1},{d2}): token {i} peaks at {argmax}"
                        );
                        assert_eq!(argmax, oracle);
                        checked_peaks += 1;
                    }
                }
            }
        }
    }
    assert!(checked_rows > 10_000, "suite must cover every grid row");
    assert!(checked_peaks > 4_000, "suite must cover interior tokens");
}

#[test]
fn offset_windows_are_centred_and_truncated() {
    for heads in 1..=16usize {
        let offsets = init_offsets(heads);
        assert_eq!(offsets.len(), heads);
        let side = (heads as f64).sqrt().ceil() as i64;
        for &(d1, d2) in &offsets {
            assert!(d1 >= -((side - 1) / 2) && d1 <= side / 2);
            assert!(d2 >= -((side - 1) / 2) && d2 <= side / 2);
        }
        // Offsets are unique.
        let mut dedup = offsets.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), heads);
    }
}
