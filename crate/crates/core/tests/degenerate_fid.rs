use nalgebra::{DMatrix, DVector};
use pixgan::metrics::{fid, trace_sqrt_product, GaussianStats};
use serde::Deserialize;

/// Covariance of a collapsed generator's features: a nearly rank-one 24×24 block of
/// ~1e-37 entries scattered through an otherwise zero 128×128 matrix.
#[derive(Deserialize)]
struct Fixture {
    dim: usize,
    live: Vec<usize>,
    block: Vec<f64>,
}

fn collapsed_covariance() -> DMatrix<f64> {
    let f: Fixture =
        serde_json::from_str(include_str!("fixtures/degenerate_covariance.json")).unwrap();
    let k = f.live.len();
    let mut s = DMatrix::zeros(f.dim, f.dim);
    for (a, &i) in f.live.iter().enumerate() {
        for (b, &j) in f.live.iter().enumerate() {
            s[(i, j)] = f.block[a * k + b];
        }
    }
    s
}

#[test]
fn collapsed_generator_statistics_give_a_finite_distance() {
    let g = collapsed_covariance();
    let d = g.nrows();
    let reference = DMatrix::from_fn(d, d, |i, j| if i == j { 0.5 } else { 0.0 })
        + DMatrix::from_element(d, d, 0.01);
    let r = GaussianStats::new(DVector::from_element(d, 1.0), reference.clone(), 10).unwrap();
    let c = GaussianStats::new(DVector::zeros(d), g.clone(), 10).unwrap();
    let v = fid(&r, &c).unwrap();
    // Tr(Σg) and the cross term are ~1e-17 at most, so FID is the mean term plus Tr(Σr)
    let want = d as f64 + reference.trace();
    assert!((v - want).abs() < 1e-9 * want, "{v} vs {want}");
    assert!((fid(&c, &r).unwrap() - v).abs() < 1e-9);
    assert!(fid(&c, &c).unwrap().abs() < 1e-12);
    assert!((trace_sqrt_product(&g, &g).unwrap() - g.trace()).abs() < 1e-30);
}
