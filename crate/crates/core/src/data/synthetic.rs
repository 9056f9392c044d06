//! Seeded synthetic datasets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::table::{Column, RawTable};

/// Per-dimension offset of each class mean from the origin.
pub const TWO_GAUSSIAN_SHIFT: f64 = 0.75;

/// Balanced two-class Gaussian mixture: class `c` has mean `±0.75` in every
/// dimension and unit variance. Labels alternate 0/1, target column `label`.
pub fn two_gaussians(rows: usize, features: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..rows).map(|i| i % 2).collect();
    let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(rows); features];
    for &y in &labels {
        let mean = if y == 1 { TWO_GAUSSIAN_SHIFT } else { -TWO_GAUSSIAN_SHIFT };
        for col in cols.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            col.push(Some(mean + z));
        }
    }
    let mut columns: Vec<Column> = cols
        .into_iter()
        .enumerate()
        .map(|(j, v)| Column::numeric(format!("x{j}"), v))
        .collect();
    columns.push(Column::numeric(
        "label",
        labels.iter().map(|&y| Some(y as f64)).collect(),
    ));
    RawTable::new(columns, "label").expect("synthetic table is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::preprocess::{encode_target, TaskHint};

    #[test]
    fn deterministic_and_balanced() {
        let a = two_gaussians(200, 8, 1);
        let b = two_gaussians(200, 8, 1);
        assert_eq!(a, b);
        assert_eq!(a.n_features(), 8);
        let y = encode_target(&a, TaskHint::Auto).unwrap();
        assert_eq!(y.class_counts().unwrap(), vec![100, 100]);
    }
}
