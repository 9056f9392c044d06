//! Train/validation/test splitting and transfer feature partitioning.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::preprocess::{encode_target, FeatureMatrix, LabelVector, PreprocessState, TaskHint};
use super::table::RawTable;
use crate::error::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Split sizes for `b` rows: `round(0.7b)`, `round(0.1b)`, remainder.
    pub fn sizes(b: usize) -> (usize, usize, usize) {
        let train = (TRAIN_FRACTION * b as f64).round() as usize;
        let val = ((VAL_FRACTION * b as f64).round() as usize).min(b - train);
        (train, val, b - train - val)
    }
}

/// Seeded split of `labels.len()` rows. Classification labels are stratified
/// unless some class has fewer than three members.
pub fn split_indices(labels: &LabelVector, seed: u64) -> Result<SplitIndices> {
    let b = labels.len();
    if b < 10 {
        return Err(Error::Data(format!("splitting needs at least 10 rows, got {b}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_train, n_val, _) = SplitIndices::sizes(b);

    let stratify = match labels.class_counts() {
        Some(counts) => {
            let ok = counts.iter().all(|&c| c == 0 || c >= 3);
            if !ok {
                log::warn!("a class has fewer than 3 members; falling back to an unstratified split");
            }
            ok
        }
        None => false,
    };

    let order: Vec<usize> = if stratify {
        let labels = labels.classes().expect("classification labels");
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            members[l].push(i);
        }
        // each row gets its fractional position within its shuffled class;
        // sorting by that position interleaves classes proportionally
        let mut keyed = Vec::with_capacity(b);
        for (class, rows) in members.iter_mut().enumerate() {
            rows.shuffle(&mut rng);
            let n = rows.len() as f64;
            for (rank, &row) in rows.iter().enumerate() {
                keyed.push(((rank as f64 + 0.5) / n, class, row));
            }
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().map(|(_, _, row)| row).collect()
    } else {
        let mut all: Vec<usize> = (0..b).collect();
        all.shuffle(&mut rng);
        all
    };

    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, val, test })
}

/// Preprocessed train/validation/test partitions.
///
/// Reads of the test partition go through [`DatasetSplit::test`], which
/// counts them so that protocols can assert the test rows stayed untouched.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: (FeatureMatrix, LabelVector),
    pub val: (FeatureMatrix, LabelVector),
    test: (FeatureMatrix, LabelVector),
    pub indices: SplitIndices,
    pub seed: u64,
    test_reads: Arc<AtomicUsize>,
}

impl DatasetSplit {
    pub fn from_parts(features: &FeatureMatrix, labels: &LabelVector, indices: SplitIndices, seed: u64) -> Self {
        let part = |rows: &[usize]| (features.select_rows(rows), labels.select_rows(rows));
        DatasetSplit {
            train: part(&indices.train),
            val: part(&indices.val),
            test: part(&indices.test),
            indices,
            seed,
            test_reads: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn test(&self) -> &(FeatureMatrix, LabelVector) {
        self.test_reads.fetch_add(1, Ordering::SeqCst);
        &self.test
    }

    /// Number of times the test partition has been read, shared by clones.
    pub fn test_reads(&self) -> usize {
        self.test_reads.load(Ordering::SeqCst)
    }

    pub fn n_features(&self) -> usize {
        self.train.0.n_features()
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.train.1 {
            LabelVector::Classification { num_classes, .. } => Some(*num_classes),
            LabelVector::Regression { .. } => None,
        }
    }
}

/// Splits already-preprocessed data.
pub fn split(features: &FeatureMatrix, labels: &LabelVector, seed: u64) -> Result<DatasetSplit> {
    if features.n_rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} labels",
            features.n_rows(),
            labels.len()
        )));
    }
    let indices = split_indices(labels, seed)?;
    Ok(DatasetSplit::from_parts(features, labels, indices, seed))
}

/// Full pipeline from a raw table: split on the labels, fit preprocessing on
/// the training rows only, then apply it to every row.
pub fn prepare(raw: &RawTable, seed: u64, task: TaskHint) -> Result<(DatasetSplit, PreprocessState)> {
    let labels = encode_target(raw, task)?;
    let indices = split_indices(&labels, seed)?;
    let state = PreprocessState::fit(raw, &indices.train, task)?;
    let (features, labels) = state.apply(raw)?;
    Ok((DatasetSplit::from_parts(&features, &labels, indices, seed), state))
}

/// Partitions feature columns into a shared set plus two disjoint remainders.
/// Returns tables `(shared ∪ r1, shared ∪ r2)`, both with every row and the target.
pub fn transfer_split(raw: &RawTable, overlap_fraction: f64, seed: u64) -> Result<(RawTable, RawTable)> {
    let n = raw.n_features();
    if n < 4 {
        return Err(Error::Data(format!("transfer split needs at least 4 features, got {n}")));
    }
    if !(0.0..=1.0).contains(&overlap_fraction) {
        return Err(Error::Config(format!(
            "overlap fraction {overlap_fraction} outside [0, 1]"
        )));
    }
    let shared = (overlap_fraction * n as f64).round() as usize;
    if shared >= n {
        return Err(Error::Config(format!(
            "overlap {overlap_fraction} leaves no disjoint features out of {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rest = n - shared;
    let r1 = rest.div_ceil(2);
    let names: Vec<String> = raw.feature_columns().map(|c| c.name.clone()).collect();
    let pick = |mut idx: Vec<usize>| -> Vec<String> {
        idx.sort_unstable();
        idx.into_iter().map(|i| names[i].clone()).collect()
    };
    let set1 = pick([&order[..shared], &order[shared..shared + r1]].concat());
    let set2 = pick([&order[..shared], &order[shared + r1..]].concat());
    Ok((raw.with_features(&set1)?, raw.with_features(&set2)?))
}

/// Balanced weights `B / (C · count_c)`.
pub fn class_weights(labels: &LabelVector) -> Result<Vec<f64>> {
    let counts = labels
        .class_counts()
        .ok_or_else(|| Error::Data("class weights need a classification target".into()))?;
    if counts.len() < 2 {
        return Err(Error::Data("class weights need at least two classes".into()));
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {c} has no rows")));
    }
    let b = labels.len() as f64;
    let c = counts.len() as f64;
    Ok(counts.iter().map(|&k| b / (c * k as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::table::{Column, ColumnKind};

    fn balanced(b: usize) -> LabelVector {
        LabelVector::Classification {
            labels: (0..b).map(|i| i % 2).collect(),
            num_classes: 2,
        }
    }

    #[test]
    fn sizes_follow_proportions() {
        assert_eq!(SplitIndices::sizes(1000), (700, 100, 200));
        assert_eq!(SplitIndices::sizes(100), (70, 10, 20));
        let s = split_indices(&balanced(1000), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (700, 100, 200));
    }

    #[test]
    fn stratified_and_deterministic() {
        let y = balanced(100);
        let a = split_indices(&y, 7).unwrap();
        let b = split_indices(&y, 7).unwrap();
        assert_eq!(a, b);
        let labels = y.classes().unwrap();
        for (part, n) in [(&a.train, 70), (&a.val, 10), (&a.test, 20)] {
            assert_eq!(part.len(), n);
            let pos = part.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(pos * 2, n);
        }
        let mut all: Vec<usize> = [a.train, a.val, a.test].concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn rare_class_falls_back_to_unstratified() {
        let mut labels = vec![0; 20];
        labels[3] = 1;
        let y = LabelVector::Classification { labels, num_classes: 2 };
        let s = split_indices(&y, 1).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 20);
    }

    #[test]
    fn class_weight_formula() {
        let y = balanced(100);
        assert_eq!(class_weights(&y).unwrap(), vec![1.0, 1.0]);
        let mut labels = vec![0; 90];
        labels.extend(vec![1; 10]);
        let w = class_weights(&LabelVector::Classification { labels, num_classes: 2 }).unwrap();
        assert!((w[0] - 100.0 / 180.0).abs() < 1e-15);
        assert_eq!(w[1], 5.0);
        let single = LabelVector::Classification { labels: vec![0; 100], num_classes: 1 };
        assert!(class_weights(&single).is_err());
    }

    fn wide_table(n: usize) -> RawTable {
        let mut cols: Vec<Column> = (0..n)
            .map(|j| Column::numeric(format!("f{j}"), (0..12).map(|i| Some((i * j) as f64)).collect()))
            .collect();
        cols.push(Column::text(
            "y",
            ColumnKind::Binary,
            (0..12).map(|i| Some(if i % 2 == 0 { "a" } else { "b" }.to_string())).collect(),
        ));
        RawTable::new(cols, "y").unwrap()
    }

    #[test]
    fn transfer_partition_arithmetic() {
        let raw = wide_table(10);
        let (s1, s2) = transfer_split(&raw, 0.5, 4).unwrap();
        let f1: Vec<&str> = s1.feature_columns().map(|c| c.name.as_str()).collect();
        let f2: Vec<&str> = s2.feature_columns().map(|c| c.name.as_str()).collect();
        let shared = f1.iter().filter(|n| f2.contains(n)).count();
        assert_eq!(shared, 5);
        assert_eq!(f1.len() + f2.len(), 15);
        assert_eq!(s1.target_name(), "y");
        assert_eq!(s2.n_rows(), 12);

        let (d1, d2) = transfer_split(&raw, 0.0, 4).unwrap();
        assert!(d1.feature_columns().all(|c| d2.column(&c.name).is_none()));
        assert!(transfer_split(&raw, 1.0, 4).is_err());
        assert!(transfer_split(&wide_table(3), 0.5, 4).is_err());
    }
}
