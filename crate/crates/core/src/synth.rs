//! Seeded Gaussian-mixture benchmarks with controllable separation,
//! standing in for pretrained embeddings.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{one_hot, Dataset, FeatureMatrix, HardLabelVector};
use crate::error::{Result, StctError};
use crate::numerics::{GramFactor, Ridge};

/// Where the class centers go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// `sep · e_c`; needs `C <= d`.
    #[default]
    Axes,
    /// `sep · u_c` with `u_c` uniform on the unit sphere, drawn from this seed.
    RandomDirections(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub classes: usize,
    pub n: usize,
    pub d: usize,
    /// Center distance from the origin in units of the component standard deviation.
    pub sep: f64,
    pub balance: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub placement: Placement,
}

impl MixtureSpec {
    pub fn balanced(classes: usize, n: usize, d: usize, sep: f64, seed: u64) -> Self {
        MixtureSpec {
            classes,
            n,
            d,
            sep,
            balance: vec![1.0 / classes as f64; classes],
            seed,
            placement: Placement::Axes,
        }
    }

    /// The fixed benchmark used throughout the test suites:
    /// C = 10, d = 32, n = 5000, sep = 6, balanced, seed 17.
    pub fn standard_benchmark() -> Self {
        Self::balanced(10, 5000, 32, 6.0, 17)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.n == 0 || self.d == 0 {
            return Err(StctError::input("mixture needs classes, samples and dimensions"));
        }
        if !(self.sep >= 0.0 && self.sep.is_finite()) {
            return Err(StctError::input(format!("sep = {} must be >= 0", self.sep)));
        }
        if self.balance.len() != self.classes || self.balance.iter().any(|p| !(*p >= 0.0)) {
            return Err(StctError::input("balance needs one nonnegative weight per class"));
        }
        let s: f64 = self.balance.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(StctError::input(format!("balance sums to {s}, not 1")));
        }
        if self.placement == Placement::Axes && self.classes > self.d {
            return Err(StctError::input(format!(
                "axis placement needs C <= d, got C = {} and d = {}",
                self.classes, self.d
            )));
        }
        Ok(())
    }

    /// C×d matrix of class centers.
    pub fn centers(&self) -> Result<Array2<f64>> {
        self.validate()?;
        let mut c = Array2::zeros((self.classes, self.d));
        match self.placement {
            Placement::Axes => {
                for k in 0..self.classes {
                    c[[k, k]] = self.sep;
                }
            }
            Placement::RandomDirections(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for mut row in c.rows_mut() {
                    let v: Vec<f64> = (0..self.d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for (dst, x) in row.iter_mut().zip(&v) {
                        *dst = self.sep * x / norm;
                    }
                }
            }
        }
        Ok(c)
    }
}

/// Draws `spec.n` samples: class from `balance`, then unit-variance
/// isotropic noise around the class center.
pub fn gaussian_mixture(spec: &MixtureSpec) -> Result<Dataset> {
    let centers = spec.centers()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = Array2::zeros((spec.n, spec.d));
    let mut y = Vec::with_capacity(spec.n);
    for mut row in x.rows_mut() {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut cls = spec.classes - 1;
        for (k, p) in spec.balance.iter().enumerate() {
            acc += p;
            if u < acc {
                cls = k;
                break;
            }
        }
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = centers[[cls, j]] + z;
        }
        y.push(cls);
    }
    let clean = HardLabelVector(y);
    Dataset::new(
        FeatureMatrix::new(x)?,
        one_hot(&clean, spec.classes)?,
        Some(clean),
        None,
    )
}

/// Nearest-center class for every row; the Bayes classifier of a balanced
/// isotropic mixture.
pub fn nearest_center(features: &FeatureMatrix, centers: &Array2<f64>) -> HardLabelVector {
    HardLabelVector(
        features
            .view()
            .rows()
            .into_iter()
            .map(|x| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (k, c) in centers.rows().into_iter().enumerate() {
                    let d: f64 = x.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                best
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    /// Minimum over all samples of the signed one-vs-rest margin for each class.
    pub min_margin: Vec<f64>,
}

impl MarginReport {
    pub fn all_positive(&self) -> bool {
        self.min_margin.iter().all(|m| *m > 0.0)
    }
}

/// Fits a least-squares ±1 separator (with intercept) per class and
/// reports the smallest signed margin it achieves.
pub fn margin_report(dataset: &Dataset) -> Result<MarginReport> {
    let clean = dataset
        .clean_labels
        .as_ref()
        .ok_or_else(|| StctError::input("margin report needs clean labels"))?;
    let n = dataset.n();
    let d = dataset.features.d();
    let mut design = Array2::ones((n, d + 1));
    design.slice_mut(ndarray::s![.., ..d]).assign(dataset.features.as_array());
    let factor = GramFactor::with_ridge(design.view(), Ridge::Relative(1e-9))?;
    let classes = dataset.classes();
    let mut targets = Array2::from_elem((n, classes), -1.0);
    for (i, &y) in clean.as_slice().iter().enumerate() {
        targets[[i, y]] = 1.0;
    }
    let w = factor.solve(&design.t().dot(&targets));
    let scores = design.dot(&w);
    let min_margin = (0..classes)
        .map(|c| {
            scores
                .index_axis(Axis(1), c)
                .iter()
                .zip(targets.index_axis(Axis(1), c).iter())
                .map(|(s, t)| s * t)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(MarginReport { min_margin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::naive;

    #[test]
    fn same_seed_bit_identical() {
        let spec = MixtureSpec::balanced(4, 300, 6, 3.0, 5);
        let a = gaussian_mixture(&spec).unwrap();
        let b = gaussian_mixture(&spec).unwrap();
        assert_eq!(a, b);
        let c = gaussian_mixture(&MixtureSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn axis_placement_needs_room() {
        let spec = MixtureSpec::balanced(5, 10, 3, 1.0, 0);
        assert!(gaussian_mixture(&spec).is_err());
        let spec = MixtureSpec {
            placement: Placement::RandomDirections(4),
            ..spec
        };
        let ds = gaussian_mixture(&spec).unwrap();
        assert_eq!(ds.features.d(), 3);
        let c = spec.centers().unwrap();
        for r in c.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn well_separated_benchmark_is_one_nn_separable() {
        let ds = gaussian_mixture(&MixtureSpec::balanced(10, 5000, 32, 8.0, 17)).unwrap();
        let rows: Vec<Vec<f64>> = ds.features.view().rows().into_iter().map(|r| r.to_vec()).collect();
        let acc = naive::loo_one_nn_accuracy(&rows, ds.clean_labels.as_ref().unwrap().as_slice());
        assert!(acc >= 0.999, "{acc}");
    }

    #[test]
    fn zero_separation_is_class_blind() {
        let ds = gaussian_mixture(&MixtureSpec::balanced(10, 5000, 32, 0.0, 17)).unwrap();
        let test = gaussian_mixture(&MixtureSpec::balanced(10, 5000, 32, 0.0, 18)).unwrap();
        let acc = naive::softmax_regression_accuracy(&ds, &test, 10);
        assert!((acc - 0.1).abs() <= 0.03, "{acc}");
    }

    #[test]
    fn margins() {
        let ds = gaussian_mixture(&MixtureSpec::balanced(10, 5000, 32, 8.0, 17)).unwrap();
        let rep = margin_report(&ds).unwrap();
        assert!(rep.all_positive(), "{:?}", rep.min_margin);
        assert_eq!(rep, margin_report(&ds).unwrap());
        let ds = gaussian_mixture(&MixtureSpec::balanced(10, 5000, 32, 0.0, 17)).unwrap();
        assert!(!margin_report(&ds).unwrap().all_positive());
    }

    #[test]
    fn proportions_and_means() {
        let spec = MixtureSpec {
            balance: vec![0.5, 0.3, 0.2],
            ..MixtureSpec::balanced(3, 20_000, 4, 2.0, 9)
        };
        let ds = gaussian_mixture(&spec).unwrap();
        let y = ds.clean_labels.as_ref().unwrap();
        let centers = spec.centers().unwrap();
        for (c, p) in spec.balance.iter().enumerate() {
            let idx: Vec<usize> = (0..spec.n).filter(|&i| y.as_slice()[i] == c).collect();
            let count = idx.len() as f64;
            let sigma = (spec.n as f64 * p * (1.0 - p)).sqrt();
            assert!((count - spec.n as f64 * p).abs() <= 3.0 * sigma);
            let sub = ds.features.select(&idx);
            let mean = sub.as_array().mean_axis(Axis(0)).unwrap();
            for j in 0..spec.d {
                assert!((mean[j] - centers[[c, j]]).abs() <= 3.0 / count.sqrt() * 1.5);
            }
        }
    }
}
