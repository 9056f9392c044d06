//! Imputation, encoding and standardization fitted on a row subset.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::table::{distinct_text, first_appearance, Column, ColumnData, ColumnKind, RawTable};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PREPROCESS_STATE_VERSION: u32 = 1;

/// Row-major `B×N` matrix of preprocessed features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    feature_names: Vec<String>,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_rows: usize, feature_names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_rows * feature_names.len() {
            return Err(Error::Shape(format!(
                "{} values for {n_rows}x{} matrix",
                values.len(),
                feature_names.len()
            )));
        }
        Ok(FeatureMatrix {
            n_rows,
            feature_names,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.n_features();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_features() + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, j)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_features());
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            n_rows: rows.len(),
            feature_names: self.feature_names.clone(),
            values,
        }
    }

    /// `[rows, N]` tensor for the given rows.
    pub fn batch(&self, rows: &[usize]) -> Tensor {
        let m = self.select_rows(rows);
        Tensor::new(vec![rows.len(), self.n_features()], m.values)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_rows, self.n_features()], self.values.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Task {
    Classification { num_classes: usize },
    Regression,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskHint {
    #[default]
    Auto,
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelVector {
    Classification { labels: Vec<usize>, num_classes: usize },
    Regression { targets: Vec<f64> },
}

impl LabelVector {
    pub fn len(&self) -> usize {
        match self {
            LabelVector::Classification { labels, .. } => labels.len(),
            LabelVector::Regression { targets } => targets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            LabelVector::Classification { num_classes, .. } => Task::Classification {
                num_classes: *num_classes,
            },
            LabelVector::Regression { .. } => Task::Regression,
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            LabelVector::Classification { labels, .. } => Some(labels),
            LabelVector::Regression { .. } => None,
        }
    }

    pub fn targets(&self) -> Option<&[f64]> {
        match self {
            LabelVector::Regression { targets } => Some(targets),
            LabelVector::Classification { .. } => None,
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> LabelVector {
        match self {
            LabelVector::Classification { labels, num_classes } => LabelVector::Classification {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                num_classes: *num_classes,
            },
            LabelVector::Regression { targets } => LabelVector::Regression {
                targets: rows.iter().map(|&r| targets[r]).collect(),
            },
        }
    }

    /// Per-class row counts (classification only).
    pub fn class_counts(&self) -> Option<Vec<usize>> {
        match self {
            LabelVector::Classification { labels, num_classes } => {
                let mut counts = vec![0; *num_classes];
                for &l in labels {
                    counts[l] += 1;
                }
                Some(counts)
            }
            LabelVector::Regression { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetEncoding {
    /// Class `i` is the `i`-th entry; numeric targets are keyed by their
    /// shortest round-trip decimal rendering.
    Classes { classes: Vec<String> },
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureTransformKind {
    Numeric {
        median: f64,
        mean: f64,
        std: f64,
    },
    /// Ordinal codes in first-appearance order on the fit rows; `null` is the
    /// missing sentinel. Unseen values map to `categories.len()`.
    Categorical {
        categories: Vec<Option<String>>,
        mean: f64,
        std: f64,
    },
    Binary {
        negative: String,
        positive: String,
        fill: f64,
    },
    Dropped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransform {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureTransformKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub version: u32,
    pub target_name: String,
    pub target: TargetEncoding,
    pub features: Vec<FeatureTransform>,
}

/// Fits preprocessing on `fit_on` rows and applies it to every row.
pub fn preprocess(
    raw: &RawTable,
    fit_on: &[usize],
) -> Result<(FeatureMatrix, LabelVector, PreprocessState)> {
    preprocess_with(raw, fit_on, TaskHint::Auto)
}

pub fn preprocess_with(
    raw: &RawTable,
    fit_on: &[usize],
    task: TaskHint,
) -> Result<(FeatureMatrix, LabelVector, PreprocessState)> {
    let state = PreprocessState::fit(raw, fit_on, task)?;
    let (x, y) = state.apply(raw)?;
    Ok((x, y, state))
}

/// Encodes the target column alone; the class vocabulary spans all rows.
pub fn encode_target(raw: &RawTable, task: TaskHint) -> Result<LabelVector> {
    let state = PreprocessState {
        version: PREPROCESS_STATE_VERSION,
        target_name: raw.target_name().to_string(),
        target: fit_target(raw.target(), task)?,
        features: Vec::new(),
    };
    state.apply_target(raw)
}

fn standardize_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // relative threshold so that round-off on constant columns reads as zero variance
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    (mean, if std <= 1e-12 * scale { 0.0 } else { std })
}

fn standardize(v: f64, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        (v - mean) / std
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn numeric_key(v: f64) -> String {
    format!("{v}")
}

impl PreprocessState {
    pub fn fit(raw: &RawTable, fit_on: &[usize], task: TaskHint) -> Result<Self> {
        if fit_on.is_empty() {
            return Err(Error::Data("preprocessing needs at least one fit row".into()));
        }
        if let Some(&bad) = fit_on.iter().find(|&&r| r >= raw.n_rows()) {
            return Err(Error::Data(format!("fit row {bad} out of range")));
        }
        let target = fit_target(raw.target(), task)?;
        let mut features = Vec::with_capacity(raw.n_features());
        for col in raw.feature_columns() {
            let kind = fit_column(col, fit_on);
            if kind == FeatureTransformKind::Dropped {
                log::warn!("dropping column '{}': no values on the fit rows", col.name);
            }
            features.push(FeatureTransform {
                name: col.name.clone(),
                kind,
            });
        }
        Ok(PreprocessState {
            version: PREPROCESS_STATE_VERSION,
            target_name: raw.target_name().to_string(),
            target,
            features,
        })
    }

    pub fn task(&self) -> Task {
        match &self.target {
            TargetEncoding::Classes { classes } => Task::Classification {
                num_classes: classes.len(),
            },
            TargetEncoding::Regression => Task::Regression,
        }
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features
            .iter()
            .filter(|f| f.kind != FeatureTransformKind::Dropped)
            .map(|f| f.name.clone())
            .collect()
    }

    pub fn apply(&self, raw: &RawTable) -> Result<(FeatureMatrix, LabelVector)> {
        let x = self.apply_features(raw)?;
        let y = self.apply_target(raw)?;
        Ok((x, y))
    }

    pub fn apply_features(&self, raw: &RawTable) -> Result<FeatureMatrix> {
        let rows = raw.n_rows();
        let kept: Vec<&FeatureTransform> = self
            .features
            .iter()
            .filter(|f| f.kind != FeatureTransformKind::Dropped)
            .collect();
        let n = kept.len();
        let mut values = vec![0.0; rows * n];
        for (j, f) in kept.iter().enumerate() {
            let col = raw
                .column(&f.name)
                .ok_or_else(|| Error::Schema(format!("column '{}' missing from table", f.name)))?;
            let encoded = encode_column(col, &f.kind)?;
            for (i, v) in encoded.into_iter().enumerate() {
                values[i * n + j] = v;
            }
        }
        FeatureMatrix::new(rows, kept.iter().map(|f| f.name.clone()).collect(), values)
    }

    pub fn apply_target(&self, raw: &RawTable) -> Result<LabelVector> {
        let col = raw
            .column(&self.target_name)
            .ok_or_else(|| Error::Schema(format!("target column '{}' not found", self.target_name)))?;
        match &self.target {
            TargetEncoding::Regression => match &col.data {
                ColumnData::Numeric(v) => {
                    let targets = v
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x.ok_or_else(|| Error::Data(format!("target missing at row {i}"))))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(LabelVector::Regression { targets })
                }
                ColumnData::Text(_) => Err(Error::Data("regression target must be numeric".into())),
            },
            TargetEncoding::Classes { classes } => {
                let index: HashMap<&str, usize> =
                    classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
                let keys: Vec<Option<String>> = match &col.data {
                    ColumnData::Numeric(v) => v.iter().map(|x| x.map(numeric_key)).collect(),
                    ColumnData::Text(v) => v.clone(),
                };
                let labels = keys
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let k = k
                            .as_deref()
                            .ok_or_else(|| Error::Data(format!("target missing at row {i}")))?;
                        index
                            .get(k)
                            .copied()
                            .ok_or_else(|| Error::Data(format!("unknown class '{k}' at row {i}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LabelVector::Classification {
                    labels,
                    num_classes: classes.len(),
                })
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let state: PreprocessState = serde_json::from_str(text)?;
        if state.version != PREPROCESS_STATE_VERSION {
            return Err(Error::Schema(format!(
                "unsupported preprocess state version {}",
                state.version
            )));
        }
        Ok(state)
    }
}

/// Class vocabulary covers every row: it is a label set, not a statistic.
fn fit_target(col: &Column, task: TaskHint) -> Result<TargetEncoding> {
    match (&col.data, task) {
        (ColumnData::Numeric(_), TaskHint::Regression) => Ok(TargetEncoding::Regression),
        (ColumnData::Text(_), TaskHint::Regression) => {
            Err(Error::Data(format!("target '{}' is not numeric", col.name)))
        }
        (ColumnData::Numeric(v), hint) => {
            let mut present: Vec<f64> = v.iter().flatten().copied().collect();
            present.sort_by(|a, b| a.total_cmp(b));
            present.dedup();
            let integral = present.iter().all(|x| x.fract() == 0.0);
            if hint == TaskHint::Auto && !(integral && present.len() <= 20) {
                return Ok(TargetEncoding::Regression);
            }
            Ok(TargetEncoding::Classes {
                classes: present.into_iter().map(numeric_key).collect(),
            })
        }
        (ColumnData::Text(v), _) => Ok(TargetEncoding::Classes {
            classes: distinct_text(v),
        }),
    }
}

fn fit_column(col: &Column, fit_on: &[usize]) -> FeatureTransformKind {
    match (&col.data, col.kind) {
        (ColumnData::Numeric(v), _) => {
            let present: Vec<f64> = fit_on.iter().filter_map(|&r| v[r]).collect();
            if present.is_empty() {
                return FeatureTransformKind::Dropped;
            }
            let med = median(present);
            let imputed: Vec<f64> = fit_on.iter().map(|&r| v[r].unwrap_or(med)).collect();
            let (mean, std) = standardize_stats(&imputed);
            FeatureTransformKind::Numeric { median: med, mean, std }
        }
        (ColumnData::Text(v), ColumnKind::Binary) => {
            if fit_on.iter().all(|&r| v[r].is_none()) {
                return FeatureTransformKind::Dropped;
            }
            let distinct = distinct_text(v);
            let (negative, positive) = match distinct.as_slice() {
                [a, b] => (a.clone(), b.clone()),
                [a] => (a.clone(), a.clone()),
                _ => return fit_categorical(v, fit_on),
            };
            let (mut ones, mut total) = (0usize, 0usize);
            for &r in fit_on {
                if let Some(s) = &v[r] {
                    total += 1;
                    if *s == positive && positive != negative {
                        ones += 1;
                    }
                }
            }
            let fill = if 2 * ones > total { 1.0 } else { 0.0 };
            FeatureTransformKind::Binary { negative, positive, fill }
        }
        (ColumnData::Text(v), _) => fit_categorical(v, fit_on),
    }
}

fn fit_categorical(v: &[Option<String>], fit_on: &[usize]) -> FeatureTransformKind {
    if fit_on.iter().all(|&r| v[r].is_none()) {
        return FeatureTransformKind::Dropped;
    }
    let categories = first_appearance(fit_on.iter().map(|&r| &v[r]));
    let codes = categorical_codes(fit_on.iter().map(|&r| &v[r]), &categories);
    let (mean, std) = standardize_stats(&codes);
    FeatureTransformKind::Categorical { categories, mean, std }
}

fn categorical_codes<'s>(
    values: impl Iterator<Item = &'s Option<String>>,
    categories: &[Option<String>],
) -> Vec<f64> {
    let index: HashMap<&Option<String>, usize> =
        categories.iter().enumerate().map(|(i, c)| (c, i)).collect();
    values
        .map(|v| index.get(v).copied().unwrap_or(categories.len()) as f64)
        .collect()
}

fn encode_column(col: &Column, kind: &FeatureTransformKind) -> Result<Vec<f64>> {
    match (kind, &col.data) {
        (FeatureTransformKind::Numeric { median, mean, std }, ColumnData::Numeric(v)) => Ok(v
            .iter()
            .map(|x| standardize(x.unwrap_or(*median), *mean, *std))
            .collect()),
        (FeatureTransformKind::Categorical { categories, mean, std }, ColumnData::Text(v)) => {
            Ok(categorical_codes(v.iter(), categories)
                .into_iter()
                .map(|c| standardize(c, *mean, *std))
                .collect())
        }
        (FeatureTransformKind::Binary { positive, negative, fill }, ColumnData::Text(v)) => Ok(v
            .iter()
            .map(|x| match x {
                None => *fill,
                Some(s) if s == positive && positive != negative => 1.0,
                Some(_) => 0.0,
            })
            .collect()),
        (FeatureTransformKind::Dropped, _) => Ok(Vec::new()),
        (k, _) => Err(Error::Schema(format!(
            "column '{}' has kind {:?}, incompatible with fitted transform {:?}",
            col.name, col.kind, k
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::table::read_csv;

    fn table(text: &str) -> RawTable {
        read_csv(text.as_bytes(), "y", &HashMap::new()).unwrap()
    }

    #[test]
    fn numeric_missing_imputed_with_median() {
        let t = table("a,y\n1,0\n?,1\n3,0\n");
        let state = PreprocessState::fit(&t, &[0, 1, 2], TaskHint::Auto).unwrap();
        match &state.features[0].kind {
            FeatureTransformKind::Numeric { median, mean, .. } => {
                assert_eq!(*median, 2.0);
                assert_eq!(*mean, 2.0);
            }
            other => panic!("{other:?}"),
        }
        let (x, _) = state.apply(&t).unwrap();
        // [1,2,3] standardized
        let s = (2.0f64 / 3.0).sqrt();
        assert!((x.get(0, 0) + 1.0 / s).abs() < 1e-12);
        assert_eq!(x.get(1, 0), 0.0);
    }

    #[test]
    fn binary_sorted_lexicographically() {
        let t = table("a,y\nyes,0\nno,1\nyes,1\n");
        let (x, _, _) = preprocess(&t, &[0, 1, 2]).unwrap();
        assert_eq!(x.column(0), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn standardized_mean_zero_std_one() {
        let t = table("a,b,y\n1,x,0\n5,y,1\n2,z,0\n8,x,1\n4,y,0\n");
        let (x, _, _) = preprocess(&t, &[0, 1, 2, 3, 4]).unwrap();
        for j in 0..2 {
            let c = x.column(j);
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let std = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64).sqrt();
            assert!(mean.abs() < 1e-6);
            assert!((std - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn categorical_first_appearance_with_missing_code() {
        let t = table("a,y\nred,0\n?,1\nblue,0\nred,1\ngreen,0\n");
        let state = PreprocessState::fit(&t, &[0, 1, 2, 3], TaskHint::Auto).unwrap();
        match &state.features[0].kind {
            FeatureTransformKind::Categorical { categories, .. } => {
                assert_eq!(
                    categories,
                    &vec![Some("red".to_string()), None, Some("blue".to_string())]
                );
            }
            other => panic!("{other:?}"),
        }
        // "green" was never seen on the fit rows: it takes the reserved code 3
        let (x, _) = state.apply(&t).unwrap();
        let c = x.column(0);
        assert!(c[4] > c[2]);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let t = table("a,y\n7,0\n7,1\n7,0\n");
        let (x, _, _) = preprocess(&t, &[0, 1, 2]).unwrap();
        assert_eq!(x.column(0), vec![0.0; 3]);
    }

    #[test]
    fn all_missing_column_dropped() {
        let t = table("a,b,y\n?,1,0\n?,2,1\n?,3,0\n");
        let (x, _, state) = preprocess(&t, &[0, 1, 2]).unwrap();
        assert_eq!(x.n_features(), 1);
        assert_eq!(state.features[0].kind, FeatureTransformKind::Dropped);
    }

    #[test]
    fn target_classes_and_regression() {
        let t = table("a,y\n1,b\n2,a\n3,b\n");
        let (_, y, _) = preprocess(&t, &[0, 1, 2]).unwrap();
        assert_eq!(y, LabelVector::Classification { labels: vec![1, 0, 1], num_classes: 2 });
        let r = table("a,y\n1,0.5\n2,1.25\n3,-2\n");
        let (_, y, _) = preprocess(&r, &[0, 1, 2]).unwrap();
        assert_eq!(y, LabelVector::Regression { targets: vec![0.5, 1.25, -2.0] });
    }

    #[test]
    fn state_round_trip_reapplies_bit_identically() {
        let t = table("a,b,c,y\n1.3,x,yes,0\n?,y,no,1\n2.9,?,yes,0\n-4.1,x,?,1\n0.2,z,no,0\n");
        let (x, y, state) = preprocess(&t, &[0, 1, 3]).unwrap();
        let back = PreprocessState::from_json(&state.to_json().unwrap()).unwrap();
        assert_eq!(back, state);
        let (x2, y2) = back.apply(&t).unwrap();
        assert_eq!(x2, x);
        assert_eq!(y2, y);
        for (a, b) in x.values().iter().zip(x2.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
