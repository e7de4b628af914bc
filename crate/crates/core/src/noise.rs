//! Noise transition matrices, seeded label corruption and the analytic
//! quantities that relate noisy and clean accuracy.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::HardLabelVector;
use crate::error::{Result, StctError};

/// How symmetric noise treats the original class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    /// A corrupted label is drawn uniformly from all C classes, the original included.
    #[default]
    IncludeSelf,
    /// A corrupted label is drawn uniformly from the other C-1 classes.
    ExcludeSelf,
}

impl std::str::FromStr for Convention {
    type Err = StctError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "include" | "include_self" | "includeself" => Ok(Convention::IncludeSelf),
            "exclude" | "exclude_self" | "excludeself" => Ok(Convention::ExcludeSelf),
            other => Err(StctError::input(format!("unknown noise convention '{other}'"))),
        }
    }
}

/// Where a transition matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Symmetric(Convention),
    Asymmetric,
    Custom,
}

/// Row-stochastic C×C matrix, `t[i][j] = Pr[noisy = j | clean = i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTransitionMatrix {
    t: Array2<f64>,
    kind: NoiseKind,
}

impl NoiseTransitionMatrix {
    pub fn new(t: Array2<f64>) -> Result<Self> {
        Self::with_kind(t, NoiseKind::Custom)
    }

    fn with_kind(t: Array2<f64>, kind: NoiseKind) -> Result<Self> {
        if t.nrows() != t.ncols() || t.nrows() == 0 {
            return Err(StctError::input(format!(
                "transition matrix must be square and non-empty, got {}x{}",
                t.nrows(),
                t.ncols()
            )));
        }
        for (i, row) in t.rows().into_iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(StctError::input(format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(StctError::input(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(NoiseTransitionMatrix { t, kind })
    }

    pub fn classes(&self) -> usize {
        self.t.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.t
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    /// Classes `i` for which `t[i][i] > max_{j≠i} t[i][j]` fails.
    pub fn dominance_violations(&self) -> Vec<usize> {
        let c = self.classes();
        (0..c)
            .filter(|&i| {
                let off = (0..c)
                    .filter(|&j| j != i)
                    .map(|j| self.t[[i, j]])
                    .fold(f64::NEG_INFINITY, f64::max);
                !(self.t[[i, i]] > off)
            })
            .collect()
    }

    /// Whether the diagonal strictly dominates every row, i.e. the clean
    /// class stays the most likely observed label.
    pub fn is_diagonally_dominant(&self) -> bool {
        self.dominance_violations().is_empty()
    }
}

/// Class probabilities `Pr[Y = i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior(Vec<f64>);

impl ClassPrior {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) {
            return Err(StctError::input("prior entries must be nonnegative"));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(StctError::input(format!("prior sums to {s}, not 1")));
        }
        Ok(ClassPrior(p))
    }

    pub fn uniform(classes: usize) -> Self {
        ClassPrior(vec![1.0 / classes as f64; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_rate(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(StctError::input(format!("noise rate {rho} outside [0, 1]")));
    }
    Ok(())
}

/// Uniform label noise at rate `rho`.
pub fn make_symmetric_t(classes: usize, rho: f64, convention: Convention) -> Result<NoiseTransitionMatrix> {
    if classes < 2 {
        return Err(StctError::input("symmetric noise needs at least 2 classes"));
    }
    check_rate(rho)?;
    let c = classes as f64;
    let (diag, off) = match convention {
        Convention::IncludeSelf => ((1.0 - rho) + rho / c, rho / c),
        Convention::ExcludeSelf => (1.0 - rho, rho / (c - 1.0)),
    };
    let t = Array2::from_shape_fn((classes, classes), |(i, j)| if i == j { diag } else { off });
    NoiseTransitionMatrix::with_kind(normalize_rows(t), NoiseKind::Symmetric(convention))
}

/// Pair-flip noise: class `i` becomes `flip_map[i]` with probability `rho`.
/// Classes mapped to `None` are left untouched.
pub fn make_asymmetric_t(classes: usize, rho: f64, flip_map: &[Option<usize>]) -> Result<NoiseTransitionMatrix> {
    check_rate(rho)?;
    if flip_map.len() != classes {
        return Err(StctError::input(format!(
            "flip map has {} entries for {classes} classes",
            flip_map.len()
        )));
    }
    let mut t = Array2::eye(classes);
    for (i, target) in flip_map.iter().enumerate() {
        if let Some(j) = *target {
            if j == i {
                return Err(StctError::input(format!("flip map sends class {i} to itself")));
            }
            if j >= classes {
                return Err(StctError::input(format!("flip target {j} out of range")));
            }
            t[[i, i]] = 1.0 - rho;
            t[[i, j]] = rho;
        }
    }
    NoiseTransitionMatrix::with_kind(t, NoiseKind::Asymmetric)
}

/// `i → (i + 1) mod C`.
pub fn cyclic_flip_map(classes: usize) -> Vec<Option<usize>> {
    (0..classes).map(|i| Some((i + 1) % classes)).collect()
}

// Pins row sums to one after the rate arithmetic.
fn normalize_rows(mut t: Array2<f64>) -> Array2<f64> {
    for mut row in t.rows_mut() {
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    t
}

/// Resamples each label from its row of `t`. Returns the noisy labels and
/// a mask of the entries that changed.
pub fn inject_noise(
    clean: &HardLabelVector,
    t: &NoiseTransitionMatrix,
    seed: u64,
) -> Result<(HardLabelVector, Vec<bool>)> {
    let c = t.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = Vec::with_capacity(clean.len());
    let mut mask = Vec::with_capacity(clean.len());
    for (i, &y) in clean.as_slice().iter().enumerate() {
        if y >= c {
            return Err(StctError::input(format!(
                "label {y} at position {i} out of range for {c} classes"
            )));
        }
        let u: f64 = rng.random();
        let row = t.t.row(y);
        let mut acc = 0.0;
        let mut pick = c - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        // zero-probability tail columns can never be picked
        while row[pick] == 0.0 && pick > 0 {
            pick -= 1;
        }
        noisy.push(pick);
        mask.push(pick != y);
    }
    Ok((HardLabelVector(noisy), mask))
}

/// Accuracy on noisy labels of the classifier that is optimal on clean
/// labels: `Σ_i prior[i]·t[i][i]`.
pub fn expected_noisy_accuracy(prior: &ClassPrior, t: &NoiseTransitionMatrix) -> Result<f64> {
    if prior.0.len() != t.classes() {
        return Err(StctError::input("prior and transition matrix disagree on class count"));
    }
    // Compensated sum, so a uniform prior on the identity gives exactly 1.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (i, p) in prior.0.iter().enumerate() {
        let x = p * t.t[[i, i]];
        let s = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - s) + x } else { (x - s) + sum };
        sum = s;
    }
    Ok(sum + comp)
}

/// Row-normalized confusion counts, `rates[i][j] = Pr(pred = j | truth = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
    /// `None` for classes absent from the ground truth.
    pub rates: Vec<Option<Vec<f64>>>,
}

impl ConfusionMatrix {
    pub fn undefined_rows(&self) -> Vec<usize> {
        self.rates
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.is_none().then_some(i))
            .collect()
    }
}

pub fn confusion_matrix(pred: &HardLabelVector, truth: &HardLabelVector, classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(StctError::input(format!(
            "prediction length {} differs from truth length {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut counts = Array2::<u64>::zeros((classes, classes));
    for (&p, &y) in pred.as_slice().iter().zip(truth.as_slice()) {
        if p >= classes || y >= classes {
            return Err(StctError::input(format!("label out of range for {classes} classes")));
        }
        counts[[y, p]] += 1;
    }
    let rates = counts
        .rows()
        .into_iter()
        .map(|r| {
            let total: u64 = r.sum();
            (total > 0).then(|| r.iter().map(|&c| c as f64 / total as f64).collect())
        })
        .collect();
    Ok(ConfusionMatrix { counts, rates })
}

/// Two-sided Hoeffding bound `2·exp(-2·n_v·eps²)`, uncapped.
pub fn hoeffding_bound(n_v: usize, eps: f64) -> f64 {
    2.0 * (-2.0 * n_v as f64 * eps * eps).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_identity() {
        for conv in [Convention::IncludeSelf, Convention::ExcludeSelf] {
            let t = make_symmetric_t(5, 0.0, conv).unwrap();
            assert_eq!(t.as_array(), &Array2::<f64>::eye(5));
        }
        let t = make_asymmetric_t(4, 0.0, &cyclic_flip_map(4)).unwrap();
        assert_eq!(t.as_array(), &Array2::<f64>::eye(4));
    }

    #[test]
    fn symmetric_ninety_percent_conventions() {
        let t = make_symmetric_t(10, 0.9, Convention::IncludeSelf).unwrap();
        assert!((t.as_array()[[3, 3]] - 0.19).abs() < 1e-12);
        assert!((t.as_array()[[3, 4]] - 0.09).abs() < 1e-12);
        assert!(t.is_diagonally_dominant());

        let t = make_symmetric_t(10, 0.9, Convention::ExcludeSelf).unwrap();
        assert!((t.as_array()[[3, 3]] - 0.1).abs() < 1e-12);
        assert!((t.as_array()[[3, 4]] - 0.1).abs() < 1e-12);
        assert!(!t.is_diagonally_dominant());
        assert_eq!(t.dominance_violations().len(), 10);
    }

    #[test]
    fn rate_out_of_range() {
        assert!(make_symmetric_t(3, 1.5, Convention::IncludeSelf).is_err());
        assert!(make_symmetric_t(3, -0.1, Convention::IncludeSelf).is_err());
        assert!(make_symmetric_t(1, 0.1, Convention::IncludeSelf).is_err());
    }

    #[test]
    fn asymmetric_definition() {
        let t = make_asymmetric_t(3, 0.4, &[Some(1), None, None]).unwrap();
        let expect = ndarray::array![[0.6, 0.4, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(t.as_array(), &expect);
        assert!(make_asymmetric_t(3, 0.4, &[Some(0), None, None]).is_err());
    }

    #[test]
    fn asymmetric_dominance_iff_below_half() {
        for k in 0..=20 {
            let rho = k as f64 / 20.0;
            let t = make_asymmetric_t(4, rho, &cyclic_flip_map(4)).unwrap();
            assert_eq!(t.is_diagonally_dominant(), rho < 0.5, "rho {rho}");
        }
    }

    #[test]
    fn identity_noise_changes_nothing() {
        let clean: HardLabelVector = (0..100).map(|i| i % 4).collect::<Vec<_>>().into();
        let t = make_symmetric_t(4, 0.0, Convention::IncludeSelf).unwrap();
        let (noisy, mask) = inject_noise(&clean, &t, 9).unwrap();
        assert_eq!(noisy, clean);
        assert!(mask.iter().all(|m| !m));
    }

    #[test]
    fn corruption_fraction_include_self() {
        let n = 100_000;
        let clean: HardLabelVector = (0..n).map(|i| i % 10).collect::<Vec<_>>().into();
        let t = make_symmetric_t(10, 0.5, Convention::IncludeSelf).unwrap();
        let (noisy, mask) = inject_noise(&clean, &t, 1).unwrap();
        let frac = mask.iter().filter(|m| **m).count() as f64 / n as f64;
        assert!((frac - 0.45).abs() <= 0.01, "{frac}");
        let (again, _) = inject_noise(&clean, &t, 1).unwrap();
        assert_eq!(noisy, again);
    }

    #[test]
    fn empirical_transitions_converge() {
        let per_class = 1_000_000;
        let c = 4;
        let clean: HardLabelVector = (0..per_class * c).map(|i| i % c).collect::<Vec<_>>().into();
        let t = make_asymmetric_t(c, 0.3, &cyclic_flip_map(c)).unwrap();
        let t = NoiseTransitionMatrix::new(
            0.5 * t.as_array() + 0.5 * make_symmetric_t(c, 0.6, Convention::IncludeSelf).unwrap().as_array(),
        )
        .unwrap();
        let (noisy, _) = inject_noise(&clean, &t, 5).unwrap();
        let conf = confusion_matrix(&noisy, &clean, c).unwrap();
        for i in 0..c {
            let row = conf.rates[i].as_ref().unwrap();
            for j in 0..c {
                assert!((row[j] - t.as_array()[[i, j]]).abs() <= 0.005);
            }
        }
    }

    #[test]
    fn noisy_accuracy_values() {
        let t = make_symmetric_t(6, 0.0, Convention::IncludeSelf).unwrap();
        assert_eq!(expected_noisy_accuracy(&ClassPrior::uniform(6), &t).unwrap(), 1.0);
        let t = make_symmetric_t(10, 0.8, Convention::IncludeSelf).unwrap();
        let a = expected_noisy_accuracy(&ClassPrior::uniform(10), &t).unwrap();
        assert!((a - 0.28).abs() < 1e-12);
        let t = make_symmetric_t(2, 0.2, Convention::ExcludeSelf).unwrap();
        let a = expected_noisy_accuracy(&ClassPrior::uniform(2), &t).unwrap();
        assert!((a - 0.8).abs() < 1e-12);
    }

    #[test]
    fn confusion_examples() {
        let truth: HardLabelVector = vec![0, 1, 2, 1, 0].into();
        let c = confusion_matrix(&truth, &truth, 3).unwrap();
        for i in 0..3 {
            let r = c.rates[i].as_ref().unwrap();
            for j in 0..3 {
                assert_eq!(r[j], if i == j { 1.0 } else { 0.0 });
            }
        }
        let zeros: HardLabelVector = vec![0; 5].into();
        let c = confusion_matrix(&zeros, &truth, 3).unwrap();
        assert!(c.rates.iter().all(|r| r.as_ref().unwrap() == &vec![1.0, 0.0, 0.0]));
        let c = confusion_matrix(&zeros, &truth, 4).unwrap();
        assert_eq!(c.undefined_rows(), vec![3]);
    }

    #[test]
    fn confusion_matches_counting() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
        let c = confusion_matrix(&pred.clone().into(), &truth.clone().into(), 4).unwrap();
        for i in 0..4 {
            let total = truth.iter().filter(|&&y| y == i).count();
            for j in 0..4 {
                let hits = truth.iter().zip(&pred).filter(|(&y, &p)| y == i && p == j).count();
                assert_eq!(c.rates[i].as_ref().unwrap()[j], hits as f64 / total as f64);
            }
        }
    }

    #[test]
    fn hoeffding_values() {
        assert!((hoeffding_bound(1000, 1e-9) - 2.0).abs() < 1e-9);
        let b = hoeffding_bound(1000, 0.05);
        assert!((b - 2.0 * (-5.0f64).exp()).abs() < 1e-15);
        assert!((b - 0.013476).abs() < 1e-6);
        assert!(hoeffding_bound(2000, 0.05) < b);
        assert!(hoeffding_bound(1000, 0.06) < b);
    }

    #[test]
    fn generated_rows_sum_to_one() {
        for c in 2..12 {
            for k in 0..=10 {
                let rho = k as f64 / 10.0;
                for conv in [Convention::IncludeSelf, Convention::ExcludeSelf] {
                    let t = make_symmetric_t(c, rho, conv).unwrap();
                    for r in t.as_array().rows() {
                        assert!((r.sum() - 1.0).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}
