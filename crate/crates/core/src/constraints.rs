//! Sparse pixel constraints and the masking operator.
//!
//! A [`ConstraintMap`] pairs a value plane with an explicit binary mask. A constrained
//! pixel whose prescribed value is 0 would be invisible in the value plane alone, so
//! the mask is always carried (and fed to the networks) alongside it.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Fraction of pixels constrained per image.
pub const DEFAULT_RATE: f64 = 0.005;
/// Per-pixel squared error below which a constraint counts as satisfied.
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMap {
    side: usize,
    values: Vec<f32>,
    mask: Vec<bool>,
    count: usize,
}

impl ConstraintMap {
    pub fn new(side: usize, values: Vec<f32>, mask: Vec<bool>) -> Result<Self> {
        let n = side * side;
        if side == 0 || values.len() != n || mask.len() != n {
            return Err(Error::dim(format!(
                "constraint planes must both hold {n} entries (got {} values, {} mask)",
                values.len(),
                mask.len()
            )));
        }
        for (i, (&v, &m)) in values.iter().zip(&mask).enumerate() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "constraint value {v} at {i} outside [-1, 1]"
                )));
            }
            if !m && v != 0.0 {
                return Err(Error::invalid(format!(
                    "unmasked pixel {i} carries value {v}"
                )));
            }
        }
        let count = mask.iter().filter(|&&m| m).count();
        Ok(Self {
            side,
            values,
            mask,
            count,
        })
    }

    pub fn empty(side: usize) -> Self {
        Self {
            side,
            values: vec![0.0; side * side],
            mask: vec![false; side * side],
            count: 0,
        }
    }

    /// Builds a map from `(row, col, value)` triples.
    pub fn from_triples(side: usize, triples: &[(usize, usize, f32)]) -> Result<Self> {
        let mut values = vec![0.0; side * side];
        let mut mask = vec![false; side * side];
        for &(r, c, v) in triples {
            if r >= side || c >= side {
                return Err(Error::dim(format!(
                    "({r}, {c}) outside a {side}x{side} grid"
                )));
            }
            let i = r * side + c;
            if mask[i] {
                return Err(Error::invalid(format!(
                    "duplicate constraint at ({r}, {c})"
                )));
            }
            mask[i] = true;
            values[i] = v;
        }
        Self::new(side, values, mask)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Mask as a 0/1 float plane.
    pub fn mask_plane(&self) -> impl Iterator<Item = f32> + '_ {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 })
    }

    /// Constrained locations in row-major order.
    pub fn triples(&self) -> Vec<(usize, usize, f32)> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i / self.side, i % self.side, self.values[i]))
            .collect()
    }

    fn check_grid(&self, grid: &ImageGrid) -> Result<()> {
        grid.check_side(self.side)
    }
}

/// Number of pixels constrained at `rate` on a `side × side` grid.
pub fn constraint_count(side: usize, rate: f64) -> usize {
    (rate * (side * side) as f64).round() as usize
}

/// Draws `round(rate·P²)` distinct pixel locations uniformly and copies the image values there.
pub fn sample_constraints<R: Rng + ?Sized>(
    image: &ImageGrid,
    rate: f64,
    rng: &mut R,
) -> ConstraintMap {
    assert!(
        (0.0..=1.0).contains(&rate),
        "constraint rate {rate} outside [0, 1]"
    );
    let side = image.side();
    let n = side * side;
    let k = constraint_count(side, rate);
    let mut values = vec![0.0; n];
    let mut mask = vec![false; n];
    for i in rand::seq::index::sample(rng, n, k) {
        mask[i] = true;
        values[i] = image.pixels()[i];
    }
    ConstraintMap {
        side,
        values,
        mask,
        count: k,
    }
}

/// Hadamard product `M(C) ⊙ image`.
pub fn apply_mask(c: &ConstraintMap, image: &ImageGrid) -> Result<ImageGrid> {
    c.check_grid(image)?;
    let pixels = c
        .mask
        .iter()
        .zip(image.pixels())
        .map(|(&m, &x)| if m { x } else { 0.0 })
        .collect();
    Ok(ImageGrid::from_raw(c.side, pixels))
}

/// `‖C − M(C) ⊙ G‖²`, accumulated in `f64` in row-major order.
pub fn constraint_penalty(c: &ConstraintMap, generated: &ImageGrid) -> Result<f64> {
    c.check_grid(generated)?;
    Ok(penalty_slice(&c.values, &c.mask, generated.pixels()))
}

pub(crate) fn penalty_slice(values: &[f32], mask: &[bool], generated: &[f32]) -> f64 {
    values
        .iter()
        .zip(mask)
        .zip(generated)
        .map(|((&v, &m), &g)| {
            let masked = if m { g as f64 } else { 0.0 };
            let d = v as f64 - masked;
            d * d
        })
        .sum()
}

/// Gradient of [`constraint_penalty`] with respect to the generated pixels: `−2·M·(C − M⊙G)`.
pub fn penalty_gradient(c: &ConstraintMap, generated: &ImageGrid) -> Result<Vec<f64>> {
    c.check_grid(generated)?;
    Ok(c.values
        .iter()
        .zip(&c.mask)
        .zip(generated.pixels())
        .map(|((&v, &m), &g)| if m { -2.0 * (v as f64 - g as f64) } else { 0.0 })
        .collect())
}

/// Mean squared error over the constrained pixels only.
pub fn constraint_mse(c: &ConstraintMap, generated: &ImageGrid) -> Result<f64> {
    if c.count == 0 {
        return Err(Error::UndefinedMetric(
            "constraint MSE of an empty constraint map".into(),
        ));
    }
    Ok(constraint_penalty(c, generated)? / c.count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Satisfaction {
    Absent,
    Satisfied,
    Unsatisfied,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SatisfactionMap {
    pub side: usize,
    pub cells: Vec<Satisfaction>,
}

impl SatisfactionMap {
    pub fn satisfied(&self) -> usize {
        self.cells
            .iter()
            .filter(|&&s| s == Satisfaction::Satisfied)
            .count()
    }

    pub fn unsatisfied(&self) -> usize {
        self.cells
            .iter()
            .filter(|&&s| s == Satisfaction::Unsatisfied)
            .count()
    }

    /// One text row per image row: `.` absent, `+` satisfied, `x` unsatisfied.
    pub fn render(&self) -> Vec<String> {
        self.cells
            .chunks(self.side)
            .map(|row| {
                row.iter()
                    .map(|s| match s {
                        Satisfaction::Absent => '.',
                        Satisfaction::Satisfied => '+',
                        Satisfaction::Unsatisfied => 'x',
                    })
                    .collect()
            })
            .collect()
    }
}

/// Marks each constrained pixel satisfied when its squared error is below `epsilon`.
pub fn satisfaction_map(
    c: &ConstraintMap,
    generated: &ImageGrid,
    epsilon: f64,
) -> Result<SatisfactionMap> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    c.check_grid(generated)?;
    let cells = c
        .values
        .iter()
        .zip(&c.mask)
        .zip(generated.pixels())
        .map(|((&v, &m), &g)| {
            if !m {
                Satisfaction::Absent
            } else {
                let d = v as f64 - g as f64;
                if d * d < epsilon {
                    Satisfaction::Satisfied
                } else {
                    Satisfaction::Unsatisfied
                }
            }
        })
        .collect();
    Ok(SatisfactionMap {
        side: c.side,
        cells,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintEntry {
    row: i64,
    col: i64,
    value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintFile {
    side: usize,
    constraints: Vec<ConstraintEntry>,
}

/// Serializes a map as `{"side": P, "constraints": [{"row", "col", "value"}, ...]}`.
pub fn to_json(c: &ConstraintMap) -> String {
    let file = ConstraintFile {
        side: c.side,
        constraints: c
            .triples()
            .into_iter()
            .map(|(r, col, v)| ConstraintEntry {
                row: r as i64,
                col: col as i64,
                value: v as f64,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("constraint file serializes")
}

/// Parses the JSON triple format, naming the offending entry on failure.
pub fn from_json(text: &str) -> Result<ConstraintMap> {
    let file: ConstraintFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        entry: format!("line {} column {}", e.line(), e.column()),
        reason: e.to_string(),
    })?;
    if file.side == 0 {
        return Err(Error::Parse {
            entry: "side".into(),
            reason: "must be positive".into(),
        });
    }
    let mut triples = Vec::with_capacity(file.constraints.len());
    let mut seen = vec![false; file.side * file.side];
    for (i, e) in file.constraints.iter().enumerate() {
        let bad = |reason: String| Error::Parse {
            entry: format!("constraints[{i}]"),
            reason,
        };
        let side = file.side as i64;
        if e.row < 0 || e.row >= side || e.col < 0 || e.col >= side {
            return Err(bad(format!(
                "({}, {}) outside a {side}x{side} grid",
                e.row, e.col
            )));
        }
        if !e.value.is_finite() || !(-1.0..=1.0).contains(&e.value) {
            return Err(bad(format!("value {} outside [-1, 1]", e.value)));
        }
        let flat = (e.row * side + e.col) as usize;
        if seen[flat] {
            return Err(bad(format!("duplicate location ({}, {})", e.row, e.col)));
        }
        seen[flat] = true;
        triples.push((e.row as usize, e.col as usize, e.value as f32));
    }
    ConstraintMap::from_triples(file.side, &triples)
}

pub fn read_constraint_file(path: impl AsRef<Path>) -> Result<ConstraintMap> {
    from_json(&fs::read_to_string(path)?)
}

pub fn write_constraint_file(c: &ConstraintMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(c))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(side: usize, px: &[f32]) -> ImageGrid {
        ImageGrid::new(side, px.to_vec()).unwrap()
    }

    #[test]
    fn default_rate_on_mnist_gives_four_pixels() {
        assert_eq!(constraint_count(28, DEFAULT_RATE), 4);
        let img = ImageGrid::filled(28, 0.3).unwrap();
        let c = sample_constraints(&img, DEFAULT_RATE, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(c.count(), 4);
        assert_eq!(c.mask().iter().filter(|&&m| m).count(), 4);
    }

    #[test]
    fn zero_rate_is_empty() {
        let img = ImageGrid::filled(28, 0.3).unwrap();
        let c = sample_constraints(&img, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(c, ConstraintMap::empty(28));
    }

    #[test]
    fn sampling_is_deterministic() {
        let px: Vec<f32> = (0..784).map(|i| (i as f32 / 392.0) - 1.0).collect();
        let img = grid(28, &px);
        let a = sample_constraints(&img, 0.05, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_constraints(&img, 0.05, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        for (r, c, v) in a.triples() {
            assert_eq!(v, img.get(r, c));
        }
    }

    #[test]
    fn mask_identity_and_annihilator() {
        let img = grid(2, &[0.1, -0.2, 0.3, 0.7]);
        let all = ConstraintMap::new(2, img.pixels().to_vec(), vec![true; 4]).unwrap();
        assert_eq!(apply_mask(&all, &img).unwrap(), img);
        let none = ConstraintMap::empty(2);
        assert_eq!(apply_mask(&none, &img).unwrap().pixels(), &[0.0; 4]);
        let one = ConstraintMap::from_triples(2, &[(0, 0, 0.7)]).unwrap();
        let img = grid(2, &[0.7, 0.5, 0.5, 0.5]);
        assert_eq!(
            apply_mask(&one, &img).unwrap().pixels(),
            &[0.7, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let c = ConstraintMap::empty(3);
        let img = ImageGrid::filled(2, 0.0).unwrap();
        assert!(matches!(apply_mask(&c, &img), Err(Error::Dimension(_))));
        assert!(matches!(
            constraint_penalty(&c, &img),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn penalty_examples() {
        let one = ConstraintMap::from_triples(2, &[(1, 1, 1.0)]).unwrap();
        let g = grid(2, &[0.9, -0.9, 0.0, 0.5]);
        assert_eq!(constraint_penalty(&one, &g).unwrap(), 0.25);

        let two = ConstraintMap::from_triples(2, &[(0, 0, 1.0), (1, 0, -1.0)]).unwrap();
        let zeros = ImageGrid::filled(2, 0.0).unwrap();
        assert_eq!(constraint_penalty(&two, &zeros).unwrap(), 2.0);
        assert_eq!(constraint_mse(&two, &zeros).unwrap(), 1.0);

        let exact = grid(2, &[1.0, 0.3, -1.0, 0.2]);
        assert_eq!(constraint_penalty(&two, &exact).unwrap(), 0.0);
        assert_eq!(constraint_mse(&two, &exact).unwrap(), 0.0);
    }

    #[test]
    fn mse_of_empty_map_is_undefined() {
        let g = ImageGrid::filled(2, 0.0).unwrap();
        assert!(matches!(
            constraint_mse(&ConstraintMap::empty(2), &g),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn satisfaction_examples() {
        let c = ConstraintMap::from_triples(2, &[(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let g = grid(2, &[0.8, 0.5, 0.0, 0.0]);
        let s = satisfaction_map(&c, &g, DEFAULT_EPSILON).unwrap();
        assert_eq!(
            s.cells,
            vec![
                Satisfaction::Satisfied,
                Satisfaction::Unsatisfied,
                Satisfaction::Absent,
                Satisfaction::Absent
            ]
        );
        assert_eq!(s.render(), vec!["+x", ".."]);
        assert!(satisfaction_map(&c, &g, 0.0).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let c = ConstraintMap::from_triples(28, &[(0, 3, 0.25), (27, 27, -1.0)]).unwrap();
        assert_eq!(from_json(&to_json(&c)).unwrap(), c);

        let bad = r#"{"side": 28, "constraints": [{"row": 0, "col": 0, "value": 0.5},
                     {"row": 1, "col": 1, "value": 1.5}]}"#;
        match from_json(bad) {
            Err(Error::Parse { entry, reason }) => {
                assert_eq!(entry, "constraints[1]");
                assert!(reason.contains("1.5"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let oob = r#"{"side": 4, "constraints": [{"row": 4, "col": 0, "value": 0.0}]}"#;
        assert!(matches!(from_json(oob), Err(Error::Parse { .. })));
        let dup = r#"{"side": 4, "constraints": [{"row": 1, "col": 0, "value": 0.0},
                     {"row": 1, "col": 0, "value": 0.1}]}"#;
        assert!(
            matches!(from_json(dup), Err(Error::Parse { entry, .. }) if entry == "constraints[1]")
        );
        assert!(matches!(from_json("{not json"), Err(Error::Parse { .. })));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f32>, Vec<bool>, Vec<f32>, Vec<f32>)> {
        (
            proptest::collection::vec(-1.0f32..=1.0, 16),
            proptest::collection::vec(any::<bool>(), 16),
            proptest::collection::vec(-1.0f32..=1.0, 16),
            proptest::collection::vec(-1.0f32..=1.0, 16),
        )
    }

    proptest! {
        #[test]
        fn masking_is_idempotent((vals, mask, img, _) in arb_case()) {
            let vals: Vec<f32> = vals.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
            let c = ConstraintMap::new(4, vals, mask).unwrap();
            let x = ImageGrid::new(4, img).unwrap();
            let once = apply_mask(&c, &x).unwrap();
            prop_assert_eq!(apply_mask(&c, &once).unwrap(), once);
        }

        #[test]
        fn unconstrained_pixels_do_not_matter((vals, mask, img, other) in arb_case()) {
            let vals: Vec<f32> = vals.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
            let c = ConstraintMap::new(4, vals, mask.clone()).unwrap();
            let g = ImageGrid::new(4, img.clone()).unwrap();
            let perturbed: Vec<f32> = img.iter().zip(&other).zip(&mask)
                .map(|((&a, &b), &m)| if m { a } else { b }).collect();
            let h = ImageGrid::new(4, perturbed).unwrap();
            prop_assert_eq!(constraint_penalty(&c, &g).unwrap(), constraint_penalty(&c, &h).unwrap());
            prop_assert_eq!(satisfaction_map(&c, &g, 0.1).unwrap(), satisfaction_map(&c, &h, 0.1).unwrap());
            if c.count() > 0 {
                prop_assert_eq!(constraint_mse(&c, &g).unwrap(), constraint_mse(&c, &h).unwrap());
            }
        }

        #[test]
        fn exact_agreement_satisfies_everything((vals, mask, img, _) in arb_case(), eps in 1e-6f64..1.0) {
            let vals: Vec<f32> = vals.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
            let c = ConstraintMap::new(4, vals.clone(), mask.clone()).unwrap();
            let g: Vec<f32> = img.iter().zip(&vals).zip(&mask).map(|((&x, &v), &m)| if m { v } else { x }).collect();
            let s = satisfaction_map(&c, &ImageGrid::new(4, g).unwrap(), eps).unwrap();
            prop_assert_eq!(s.satisfied(), c.count());
        }
    }
}
