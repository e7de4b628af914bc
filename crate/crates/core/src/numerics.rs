//! Dense kernels: regularized least squares via Cholesky, cosine
//! neighbor queries, temperature softmax and clamped cross-entropy.
//!
//! Every reduction runs in a fixed order so results are bitwise
//! reproducible for a given input.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::data::{FeatureMatrix, SoftLabelMatrix};
use crate::error::{Result, StctError};

/// Floor applied to probabilities before taking logs.
pub const CE_CLAMP: f64 = 1e-12;

/// d×C regression coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix(pub Array2<f64>);

/// How the ridge term added to a Gram matrix is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// Use this value as is.
    Absolute(f64),
    /// Multiply the mean diagonal entry of the Gram matrix, `trace(AᵀA)/d`.
    Relative(f64),
}

impl Ridge {
    pub fn resolve(&self, gram: &Array2<f64>) -> f64 {
        match *self {
            Ridge::Absolute(v) => v,
            Ridge::Relative(k) => {
                let d = gram.nrows().max(1) as f64;
                k * gram.diag().sum() / d
            }
        }
    }
}

/// Cholesky factor of `AᵀA + reg·I`, reused across solves.
#[derive(Debug, Clone)]
pub struct GramFactor {
    lower: Array2<f64>,
    reg: f64,
}

impl GramFactor {
    pub fn new(a: ArrayView2<'_, f64>, reg: f64) -> Result<Self> {
        let gram = a.t().dot(&a);
        Self::from_gram(gram, reg)
    }

    pub fn with_ridge(a: ArrayView2<'_, f64>, ridge: Ridge) -> Result<Self> {
        let gram = a.t().dot(&a);
        let reg = ridge.resolve(&gram);
        Self::from_gram(gram, reg)
    }

    pub fn from_gram(mut gram: Array2<f64>, reg: f64) -> Result<Self> {
        if !(reg >= 0.0 && reg.is_finite()) {
            return Err(StctError::input(format!(
                "ridge must be finite and >= 0, got {reg}"
            )));
        }
        let d = gram.nrows();
        for i in 0..d {
            gram[[i, i]] += reg;
        }
        let mut l = Array2::<f64>::zeros((d, d));
        // tolerance relative to the largest diagonal entry
        let scale = (0..d).map(|i| gram[[i, i]].abs()).fold(0.0, f64::max);
        let tol = scale * d as f64 * f64::EPSILON;
        for j in 0..d {
            let mut s = gram[[j, j]];
            for k in 0..j {
                s -= l[[j, k]] * l[[j, k]];
            }
            if !(s > tol) {
                return Err(StctError::Singular(format!(
                    "Gram matrix AᵀA + {reg}·I is not positive definite (pivot {j} = {s:e}); \
                     features are collinear or n < d, use a positive ridge"
                )));
            }
            let ljj = s.sqrt();
            l[[j, j]] = ljj;
            for i in j + 1..d {
                let mut s = gram[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / ljj;
            }
        }
        Ok(GramFactor { lower: l, reg })
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `(AᵀA + reg·I) X = rhs` column by column.
    pub fn solve(&self, rhs: &Array2<f64>) -> Array2<f64> {
        let d = self.dim();
        assert_eq!(rhs.nrows(), d, "rhs rows must match Gram dimension");
        let l = &self.lower;
        let mut out = rhs.clone();
        for mut col in out.axis_iter_mut(Axis(1)) {
            // forward: L y = b
            for i in 0..d {
                let mut s = col[i];
                for k in 0..i {
                    s -= l[[i, k]] * col[k];
                }
                col[i] = s / l[[i, i]];
            }
            // backward: Lᵀ x = y
            for i in (0..d).rev() {
                let mut s = col[i];
                for k in i + 1..d {
                    s -= l[[k, i]] * col[k];
                }
                col[i] = s / l[[i, i]];
            }
        }
        out
    }
}

/// Least-squares coefficients `W = (AᵀA + reg·I)⁻¹ AᵀB`.
pub fn ridge_solve(a: &FeatureMatrix, b: &SoftLabelMatrix, reg: f64) -> Result<CoefficientMatrix> {
    if a.n() != b.n() {
        return Err(StctError::input(format!(
            "design has {} rows but targets have {}",
            a.n(),
            b.n()
        )));
    }
    let factor = GramFactor::new(a.view(), reg)?;
    let atb = a.view().t().dot(&b.view());
    Ok(CoefficientMatrix(factor.solve(&atb)))
}

fn row_norms(h: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    h.rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.dot(&r).sqrt();
            if n == 0.0 {
                Err(StctError::input(format!("row {i} has zero norm")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

fn topk_from_sims(sims: impl Iterator<Item = (usize, f64)>, k: usize) -> Vec<usize> {
    let mut all: Vec<(usize, f64)> = sims.collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < all.len() {
        all.select_nth_unstable_by(k, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all.into_iter().map(|(j, _)| j).collect()
}

/// The `k` rows most cosine-similar to row `i`, self excluded.
///
/// Ordered by decreasing similarity; ties go to the lower index.
pub fn pairwise_cosine_topk(h: &FeatureMatrix, i: usize, k: usize) -> Result<Vec<usize>> {
    let n = h.n();
    if i >= n {
        return Err(StctError::input(format!("row {i} out of range for {n} rows")));
    }
    if k == 0 || k >= n {
        return Err(StctError::input(format!("k = {k} must lie in [1, {}]", n - 1)));
    }
    let norms = row_norms(h.view())?;
    let v = h.view();
    let xi = v.row(i);
    Ok(topk_from_sims(
        (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, xi.dot(&v.row(j)) / (norms[i] * norms[j]))),
        k,
    ))
}

/// [`pairwise_cosine_topk`] for every row at once. Rows are processed in
/// parallel; each query is independent, so output does not depend on the
/// thread count.
pub fn cosine_topk_all(h: &FeatureMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = h.n();
    if k == 0 || k >= n {
        return Err(StctError::input(format!(
            "k = {k} must lie in [1, {}]",
            n.saturating_sub(1)
        )));
    }
    let norms = row_norms(h.view())?;
    let mut unit = h.as_array().clone();
    for (mut r, nr) in unit.rows_mut().into_iter().zip(&norms) {
        r.mapv_inplace(|v| v / nr);
    }
    let unit = &unit;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let xi = unit.row(i);
            topk_from_sims(
                (0..n).filter(|&j| j != i).map(|j| (j, xi.dot(&unit.row(j)))),
                k,
            )
        })
        .collect())
}

/// Row-wise `exp(M/tau)` normalized to sum to one (max-subtracted).
pub fn softmax_rows(m: ArrayView2<'_, f64>, tau: f64) -> Result<Array2<f64>> {
    if !(tau > 0.0) {
        return Err(StctError::input(format!("temperature must be > 0, got {tau}")));
    }
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"), tau);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `-Σ q_j ln(max(p_j, 1e-12))`.
pub fn cross_entropy(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut s = 0.0;
    for (pj, qj) in p.iter().zip(q.iter()) {
        if *qj != 0.0 {
            s -= qj * pj.max(CE_CLAMP).ln();
        }
    }
    s
}
