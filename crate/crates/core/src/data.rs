//! Core value types shared by every stage: feature and label matrices,
//! hard label vectors, datasets and train/validation splits.
//!
//! Class indices are 0-based everywhere.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Result, StctError};

fn check_finite(m: &Array2<f64>, what: &str) -> Result<()> {
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos / m.ncols().max(1), pos % m.ncols().max(1));
        return Err(StctError::input(format!(
            "{what} has a non-finite entry at ({r}, {c})"
        )));
    }
    Ok(())
}

/// n×d matrix of sample features or embeddings, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Array2<f64>);

impl FeatureMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(StctError::input(format!(
                "feature matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        check_finite(&data, "feature matrix")?;
        Ok(FeatureMatrix(data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix(self.0.select(Axis(0), idx))
    }

    /// Subtracts the column means.
    pub fn centered(&self) -> FeatureMatrix {
        let n = self.n() as f64;
        let mut means = vec![0.0; self.d()];
        for row in self.0.rows() {
            for (m, v) in means.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        let mut out = self.0.clone();
        for mut row in out.rows_mut() {
            for (v, m) in row.iter_mut().zip(means.iter()) {
                *v -= m / n;
            }
        }
        FeatureMatrix(out)
    }
}

/// n×C matrix of labels treated as hyper-parameters.
///
/// Starts one-hot; meta updates make rows arbitrary finite reals and no
/// renormalization is ever applied.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix(Array2<f64>);

impl SoftLabelMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(StctError::input("label matrix needs at least one class"));
        }
        check_finite(&data, "label matrix")?;
        Ok(SoftLabelMatrix(data))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn select(&self, idx: &[usize]) -> SoftLabelMatrix {
        SoftLabelMatrix(self.0.select(Axis(0), idx))
    }

    /// Overwrites rows `idx[k]` with row `k` of `rows`.
    pub fn write_rows(&mut self, idx: &[usize], rows: &SoftLabelMatrix) {
        debug_assert_eq!(idx.len(), rows.n());
        for (k, &i) in idx.iter().enumerate() {
            self.0.row_mut(i).assign(&rows.0.row(k));
        }
    }
}

/// Integer class labels, one per sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HardLabelVector(pub Vec<usize>);

impl HardLabelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn select(&self, idx: &[usize]) -> HardLabelVector {
        HardLabelVector(idx.iter().map(|&i| self.0[i]).collect())
    }

    /// Fraction of positions where `self` equals `truth`.
    pub fn accuracy(&self, truth: &HardLabelVector) -> Result<f64> {
        label_agreement(self, truth)
    }
}

impl From<Vec<usize>> for HardLabelVector {
    fn from(v: Vec<usize>) -> Self {
        HardLabelVector(v)
    }
}

/// Features plus (possibly noisy) labels.
///
/// `clean_labels` and `corruption_mask` are bookkeeping for evaluation; no
/// correction or training routine reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: FeatureMatrix,
    pub labels: SoftLabelMatrix,
    pub clean_labels: Option<HardLabelVector>,
    pub corruption_mask: Option<Vec<bool>>,
}

impl Dataset {
    pub fn new(
        features: FeatureMatrix,
        labels: SoftLabelMatrix,
        clean_labels: Option<HardLabelVector>,
        corruption_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let n = features.n();
        if labels.n() != n {
            return Err(StctError::input(format!(
                "dataset has {n} feature rows but {} label rows",
                labels.n()
            )));
        }
        if let Some(c) = &clean_labels {
            if c.len() != n {
                return Err(StctError::input(format!(
                    "clean label vector has length {} for {n} samples",
                    c.len()
                )));
            }
        }
        if let Some(m) = &corruption_mask {
            if m.len() != n {
                return Err(StctError::input(format!(
                    "corruption mask has length {} for {n} samples",
                    m.len()
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            clean_labels,
            corruption_mask,
        })
    }

    pub fn n(&self) -> usize {
        self.features.n()
    }

    pub fn classes(&self) -> usize {
        self.labels.classes()
    }
}

/// Disjoint sub-training / noisy-validation partition of `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub n: usize,
}

/// One-hot encoding of `labels` over `classes` columns.
pub fn one_hot(labels: &HardLabelVector, classes: usize) -> Result<SoftLabelMatrix> {
    if classes == 0 {
        return Err(StctError::input("class count must be positive"));
    }
    let mut m = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.0.iter().enumerate() {
        if l >= classes {
            return Err(StctError::input(format!(
                "label {l} at position {i} is out of range for {classes} classes"
            )));
        }
        m[[i, l]] = 1.0;
    }
    Ok(SoftLabelMatrix(m))
}

/// Row-wise argmax. Ties go to the lowest column.
pub fn harden(soft: &SoftLabelMatrix) -> HardLabelVector {
    HardLabelVector(soft.0.rows().into_iter().map(argmax_row).collect())
}

pub(crate) fn argmax_row(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if v > best_v {
            best = j;
            best_v = v;
        }
    }
    best
}

/// Fraction of positions at which `a` and `b` agree.
pub fn label_agreement(a: &HardLabelVector, b: &HardLabelVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(StctError::input(format!(
            "label vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let same = a.0.iter().zip(&b.0).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

pub(crate) fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(StctError::input("ragged rows"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n, d), flat).map_err(|e| StctError::input(e.to_string()))
}
