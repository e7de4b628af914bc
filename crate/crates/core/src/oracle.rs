//! Independent verification oracles: finite differences, Monte Carlo
//! simulations and brute-force recomputation.
//!
//! Nothing here calls into the routines it checks. The `naive` helpers
//! work on plain `Vec<Vec<f64>>` with scalar loops.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Hypergeometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, SoftLabelMatrix};
use crate::error::{Result, StctError};
use crate::noise::{hoeffding_bound, make_symmetric_t, expected_noisy_accuracy, ClassPrior, Convention, NoiseTransitionMatrix};
use crate::synth::{gaussian_mixture, MixtureSpec};

pub mod naive {
    use crate::data::Dataset;

    pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if a.is_empty() {
            return Vec::new();
        }
        (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
    }

    pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let m = b.first().map_or(0, |r| r.len());
        a.iter()
            .map(|row| {
                let mut out = vec![0.0; m];
                for (k, aik) in row.iter().enumerate() {
                    for j in 0..m {
                        out[j] += aik * b[k][j];
                    }
                }
                out
            })
            .collect()
    }

    /// Gauss-Jordan inverse with partial pivoting. `None` if singular.
    pub fn inverse(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = r.clone();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
            if m[piv][col].abs() < 1e-300 {
                return None;
            }
            m.swap(col, piv);
            let p = m[col][col];
            for v in m[col].iter_mut() {
                *v /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = m[r][col];
                    if f != 0.0 {
                        for c in 0..2 * n {
                            m[r][c] -= f * m[col][c];
                        }
                    }
                }
            }
        }
        Some(m.into_iter().map(|r| r[n..].to_vec()).collect())
    }

    /// `(AᵀA + reg·I)⁻¹ AᵀB` through an explicit inverse.
    pub fn ridge(a: &[Vec<f64>], b: &[Vec<f64>], reg: f64) -> Option<Vec<Vec<f64>>> {
        let at = transpose(a);
        let mut g = matmul(&at, a);
        for (i, row) in g.iter_mut().enumerate() {
            row[i] += reg;
        }
        Some(matmul(&matmul(&inverse(&g)?, &at), b))
    }

    /// Indices of the `k` rows most cosine-similar to row `i` (excluding
    /// `i`), by decreasing similarity, ties to the lower index.
    pub fn cosine_neighbors(rows: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
        let norm = |r: &Vec<f64>| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ni = norm(&rows[i]);
        let mut sims: Vec<(f64, usize)> = rows
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, r)| {
                let dot: f64 = r.iter().zip(&rows[i]).map(|(a, b)| a * b).sum();
                (dot / (ni * norm(r)), j)
            })
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        sims.into_iter().take(k).map(|(_, j)| j).collect()
    }

    /// Leave-one-out accuracy of the Euclidean 1-NN classifier.
    pub fn loo_one_nn_accuracy(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut hits = 0;
        for i in 0..rows.len() {
            let mut best = f64::INFINITY;
            let mut who = i;
            for j in 0..rows.len() {
                if j == i {
                    continue;
                }
                let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best {
                    best = d;
                    who = j;
                }
            }
            if labels[who] == labels[i] {
                hits += 1;
            }
        }
        hits as f64 / rows.len() as f64
    }

    /// Fits multinomial logistic regression (with bias) by full-batch
    /// gradient descent on `train` and returns accuracy on `test`.
    pub fn softmax_regression_accuracy(train: &Dataset, test: &Dataset, classes: usize) -> f64 {
        let x = train.features.as_array();
        let y = train.clean_labels.as_ref().expect("clean labels").as_slice();
        let (n, d) = x.dim();
        let mut w = vec![vec![0.0; classes]; d + 1];
        let lr = 0.1;
        for _ in 0..200 {
            let mut g = vec![vec![0.0; classes]; d + 1];
            for i in 0..n {
                let mut z: Vec<f64> = (0..classes)
                    .map(|c| w[d][c] + (0..d).map(|j| x[[i, j]] * w[j][c]).sum::<f64>())
                    .collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in z.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for c in 0..classes {
                    let r = z[c] / s - if c == y[i] { 1.0 } else { 0.0 };
                    for j in 0..d {
                        g[j][c] += r * x[[i, j]];
                    }
                    g[d][c] += r;
                }
            }
            for j in 0..=d {
                for c in 0..classes {
                    w[j][c] -= lr * g[j][c] / n as f64;
                }
            }
        }
        let xt = test.features.as_array();
        let yt = test.clean_labels.as_ref().expect("clean labels").as_slice();
        let mut hits = 0;
        for i in 0..xt.nrows() {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..classes {
                let v = w[d][c] + (0..d).map(|j| xt[[i, j]] * w[j][c]).sum::<f64>();
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            if best == yt[i] {
                hits += 1;
            }
        }
        hits as f64 / xt.nrows() as f64
    }
}

fn naive_validation_loss(ht: &[Vec<f64>], hv: &[Vec<f64>], yt: &[Vec<f64>], yv: &[Vec<f64>], reg: f64) -> f64 {
    let w = naive::ridge(ht, yt, reg).expect("nonsingular oracle system");
    let pred = naive::matmul(hv, &w);
    let mut s = 0.0;
    for (a, b) in yv.iter().zip(&pred) {
        for (x, y) in a.iter().zip(b) {
            s += (x - y) * (x - y);
        }
    }
    s / yv.len() as f64
}

/// Central-difference gradient of the ridge validation loss with respect
/// to the sub-training labels. The validation labels are held fixed.
pub fn fd_label_gradient(
    ht: &[Vec<f64>],
    hv: &[Vec<f64>],
    yt: &[Vec<f64>],
    yv: &[Vec<f64>],
    reg: f64,
    h: f64,
) -> Vec<Vec<f64>> {
    assert!(h > 0.0);
    let mut y = yt.to_vec();
    let mut g = vec![vec![0.0; yt.first().map_or(0, |r| r.len())]; yt.len()];
    for i in 0..yt.len() {
        for j in 0..yt[i].len() {
            let orig = y[i][j];
            y[i][j] = orig + h;
            let up = naive_validation_loss(ht, hv, &y, yv, reg);
            y[i][j] = orig - h;
            let down = naive_validation_loss(ht, hv, &y, yv, reg);
            y[i][j] = orig;
            g[i][j] = (up - down) / (2.0 * h);
        }
    }
    g
}

/// Central-difference gradient of an arbitrary scalar function.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Per-trial results of repeated random split sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub n: usize,
    pub subtrain_prob: f64,
    pub rounds: usize,
    pub trials: usize,
    /// `(beta, fraction of trials whose coverage after `rounds` is >= beta)`.
    pub achieved: Vec<(f64, f64)>,
    pub mean_coverage: f64,
    /// Sorted per-trial rounds until every sample had been in a sub-training split.
    pub full_coverage_rounds: Vec<usize>,
}

impl CoverageSummary {
    pub fn fraction_at(&self, beta: f64) -> Option<f64> {
        self.achieved.iter().find(|(b, _)| *b == beta).map(|(_, f)| *f)
    }

    /// Empirical `q`-quantile of the full-coverage time: smallest `s` with
    /// at least a `q` fraction of trials fully covered after `s` rounds.
    pub fn full_coverage_quantile(&self, q: f64) -> usize {
        let t = self.full_coverage_rounds.len();
        let need = ((q * t as f64) - 1e-9).ceil().max(1.0) as usize;
        self.full_coverage_rounds[need.min(t) - 1]
    }
}

/// Simulates `trials` sequences of uniform splits whose sub-training side
/// has `round(p·n)` samples.
///
/// Only the number of never-covered samples matters for coverage, and
/// under an exact-size uniform split the count of those landing in the
/// sub-training side is hypergeometric, so each round is one draw. Every
/// trial runs until full coverage to record its full-coverage time.
pub fn mc_coverage(n: usize, p: f64, rounds: usize, trials: usize, betas: &[f64], seed: u64) -> CoverageSummary {
    assert!(n >= 1 && p > 0.0 && p < 1.0 && trials >= 1);
    let take = ((p * n as f64).round() as u64).clamp(1, n as u64);
    let per_trial: Vec<(f64, usize)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64 + 1);
            let mut uncovered = n as u64;
            let mut at_rounds = 0.0;
            let mut full = 0;
            let mut s = 0;
            while uncovered > 0 || s < rounds {
                s += 1;
                if uncovered > 0 {
                    uncovered -= Hypergeometric::new(n as u64, uncovered, take)
                        .expect("valid hypergeometric")
                        .sample(&mut rng);
                    if uncovered == 0 {
                        full = s;
                    }
                }
                if s == rounds {
                    at_rounds = 1.0 - uncovered as f64 / n as f64;
                }
            }
            (at_rounds, full)
        })
        .collect();
    let mut full_coverage_rounds: Vec<usize> = per_trial.iter().map(|(_, f)| *f).collect();
    full_coverage_rounds.sort_unstable();
    let achieved = betas
        .iter()
        .map(|&b| {
            let hits = per_trial.iter().filter(|(c, _)| *c >= b).count();
            (b, hits as f64 / trials as f64)
        })
        .collect();
    let mean_coverage = per_trial.iter().map(|(c, _)| c).sum::<f64>() / trials as f64;
    CoverageSummary {
        n,
        subtrain_prob: p,
        rounds,
        trials,
        achieved,
        mean_coverage,
        full_coverage_rounds,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingOutcome {
    pub n_v: usize,
    pub eps: f64,
    pub trials: usize,
    pub reference_risk: f64,
    pub frequency: f64,
    pub bound: f64,
}

impl HoeffdingOutcome {
    pub fn within_bound(&self) -> bool {
        self.frequency <= self.bound
    }
}

/// Number of population draws used for the reference risk.
pub const REFERENCE_DRAWS: usize = 1_000_000;

/// Frequency over `trials` fresh `n_v`-samples of
/// `|empirical 0-1 risk − reference risk| >= eps`.
///
/// The reference risk is estimated from [`REFERENCE_DRAWS`] draws on a
/// separate stream of the same seed.
pub fn mc_hoeffding<C, S>(classifier: &C, sampler: &S, n_v: usize, eps: f64, trials: usize, seed: u64) -> HoeffdingOutcome
where
    C: Fn(&[f64]) -> usize + Sync,
    S: Fn(&mut ChaCha8Rng) -> (Vec<f64>, usize) + Sync,
{
    let errors = |rng: &mut ChaCha8Rng, m: usize| -> usize {
        (0..m)
            .filter(|_| {
                let (x, y) = sampler(rng);
                classifier(&x) != y
            })
            .count()
    };
    // Reference risk from fixed chunks so the sum order does not depend on threads.
    let chunks = 100;
    let per = REFERENCE_DRAWS / chunks;
    let ref_errs: Vec<usize> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 << 40 | c as u64);
            errors(&mut rng, per)
        })
        .collect();
    let reference_risk = ref_errs.iter().sum::<usize>() as f64 / (per * chunks) as f64;
    let deviations: Vec<bool> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let risk = errors(&mut rng, n_v) as f64 / n_v as f64;
            (risk - reference_risk).abs() >= eps
        })
        .collect();
    HoeffdingOutcome {
        n_v,
        eps,
        trials,
        reference_risk,
        frequency: deviations.iter().filter(|d| **d).count() as f64 / trials as f64,
        bound: hoeffding_bound(n_v, eps),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyAccuracyOutcome {
    /// Mean accuracy against freshly corrupted labels.
    pub noisy_accuracy: f64,
    pub clean_accuracy: f64,
    /// `Σ prior_i · T_ii` with the prior taken from the spec's balance.
    pub predicted: f64,
}

fn nearest_center_scalar(x: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

fn draw_from_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Evaluates the nearest-center classifier of `spec`'s mixture against
/// `trials` independent corruptions of its clean labels through `t`.
pub fn mc_noisy_accuracy(spec: &MixtureSpec, t: &NoiseTransitionMatrix, trials: usize, seed: u64) -> Result<NoisyAccuracyOutcome> {
    if t.classes() != spec.classes {
        return Err(StctError::input("transition matrix and mixture disagree on class count"));
    }
    let ds = gaussian_mixture(spec)?;
    let centers: Vec<Vec<f64>> = spec.centers()?.rows().into_iter().map(|r| r.to_vec()).collect();
    let clean = ds.clean_labels.as_ref().expect("generated data carries clean labels").as_slice();
    let pred: Vec<usize> = ds
        .features
        .view()
        .rows()
        .into_iter()
        .map(|r| nearest_center_scalar(&r.to_vec(), &centers))
        .collect();
    let n = clean.len() as f64;
    let clean_accuracy = pred.iter().zip(clean).filter(|(a, b)| a == b).count() as f64 / n;
    let rows: Vec<Vec<f64>> = t.as_array().rows().into_iter().map(|r| r.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let mut hits = 0;
        for (p, y) in pred.iter().zip(clean) {
            if draw_from_row(&rows[*y], rng.random()) == *p {
                hits += 1;
            }
        }
        total += hits as f64 / n;
    }
    let predicted = spec.balance.iter().enumerate().map(|(i, p)| p * rows[i][i]).sum();
    Ok(NoisyAccuracyOutcome {
        noisy_accuracy: total / trials as f64,
        clean_accuracy,
        predicted,
    })
}

/// How an oracle comparison is judged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Tolerance {
    Absolute(f64),
    Relative(f64),
    /// Implementation value must not exceed the oracle value.
    AtMost,
    /// Implementation value must be at least the oracle value.
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub inputs_digest: String,
    pub oracle_value: f64,
    pub implementation_value: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub tolerance: Tolerance,
    pub pass: bool,
}

/// FNV-1a over the textual description of an oracle's inputs.
pub fn digest(inputs: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in inputs.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

impl OracleReport {
    pub fn new(name: &str, inputs: &str, oracle_value: f64, implementation_value: f64, tolerance: Tolerance) -> Self {
        let abs_error = (implementation_value - oracle_value).abs();
        let rel_error = abs_error / oracle_value.abs().max(f64::MIN_POSITIVE);
        let pass = match tolerance {
            Tolerance::Absolute(t) => abs_error <= t,
            Tolerance::Relative(t) => rel_error <= t,
            Tolerance::AtMost => implementation_value <= oracle_value,
            Tolerance::AtLeast => implementation_value >= oracle_value,
        };
        OracleReport {
            name: name.to_string(),
            inputs_digest: digest(inputs),
            oracle_value,
            implementation_value,
            abs_error,
            rel_error,
            tolerance,
            pass,
        }
    }
}

pub fn write_reports(path: &Path, reports: &[OracleReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Theorems,
    Gradients,
    Coverage,
    All,
}

impl std::str::FromStr for Suite {
    type Err = StctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theorems" => Ok(Suite::Theorems),
            "gradients" => Ok(Suite::Gradients),
            "coverage" => Ok(Suite::Coverage),
            "all" => Ok(Suite::All),
            other => Err(StctError::input(format!("unknown suite {other:?}"))),
        }
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Theorems | Suite::All) {
        out.extend(noisy_accuracy_reports()?);
        out.extend(hoeffding_reports()?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        out.extend(gradient_reports()?);
    }
    if matches!(suite, Suite::Coverage | Suite::All) {
        out.extend(coverage_reports()?);
    }
    Ok(out)
}

/// Labels of the benchmark mixture pushed through symmetric noise, drawn
/// one sample at a time.
pub fn noisy_mixture_sampler(
    spec: &MixtureSpec,
    rho: f64,
    convention: Convention,
) -> Result<(Vec<Vec<f64>>, impl Fn(&mut ChaCha8Rng) -> (Vec<f64>, usize) + Sync)> {
    spec.validate()?;
    let centers: Vec<Vec<f64>> = spec.centers()?.rows().into_iter().map(|r| r.to_vec()).collect();
    let t: Vec<Vec<f64>> = make_symmetric_t(spec.classes, rho, convention)?
        .as_array()
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    let balance = spec.balance.clone();
    let cs = centers.clone();
    let sampler = move |rng: &mut ChaCha8Rng| {
        let y = draw_from_row(&balance, rng.random());
        let x: Vec<f64> = cs[y]
            .iter()
            .map(|c| {
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                c + z
            })
            .collect();
        let noisy = draw_from_row(&t[y], rng.random());
        (x, noisy)
    };
    Ok((centers, sampler))
}

/// Noisy and clean accuracy of the nearest-center classifier against the
/// closed form, for three transition matrices.
pub fn noisy_accuracy_reports() -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let bench = MixtureSpec::standard_benchmark();
    let cases = [
        ("noisy_accuracy_c10_rho0.8_include", bench.clone(), 0.8, Convention::IncludeSelf),
        ("noisy_accuracy_c2_rho0.2_exclude", MixtureSpec::balanced(2, 5000, 32, 6.0, 17), 0.2, Convention::ExcludeSelf),
        ("noisy_accuracy_identity", bench.clone(), 0.0, Convention::IncludeSelf),
    ];
    for (name, spec, rho, conv) in cases {
        let t = make_symmetric_t(spec.classes, rho, conv)?;
        let mc = mc_noisy_accuracy(&spec, &t, 20, 101)?;
        let implemented = expected_noisy_accuracy(&ClassPrior::new(spec.balance.clone())?, &t)?;
        let inputs = format!("{spec:?} rho={rho} {conv:?} trials=20 seed=101");
        out.push(OracleReport::new(name, &inputs, mc.noisy_accuracy, implemented, Tolerance::Absolute(0.01)));
        out.push(OracleReport::new(
            &format!("{name}_clean_accuracy"),
            &inputs,
            0.999,
            mc.clean_accuracy,
            Tolerance::AtLeast,
        ));
    }
    Ok(out)
}

/// Deviation frequencies of the empirical risk at three validation sizes,
/// each against its concentration bound, plus their ordering.
pub fn hoeffding_reports() -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let bench = MixtureSpec::standard_benchmark();
    let (centers, sampler) = noisy_mixture_sampler(&bench, 0.5, Convention::ExcludeSelf)?;
    let classifier = |x: &[f64]| nearest_center_scalar(x, &centers);
    let mut freq = Vec::new();
    for n_v in [250, 500, 1000] {
        let h = mc_hoeffding(&classifier, &sampler, n_v, 0.05, 10_000, 7);
        let inputs = format!("benchmark rho=0.5 exclude n_v={n_v} eps=0.05 trials=10000 seed=7");
        out.push(OracleReport::new(
            &format!("hoeffding_n{n_v}"),
            &inputs,
            h.bound,
            h.frequency,
            Tolerance::AtMost,
        ));
        freq.push(h.frequency);
    }
    out.push(OracleReport::new(
        "hoeffding_decreasing_250_500",
        "paired runs above",
        freq[0],
        freq[1],
        Tolerance::AtMost,
    ));
    out.push(OracleReport::new(
        "hoeffding_decreasing_500_1000",
        "paired runs above",
        freq[1],
        freq[2],
        Tolerance::AtMost,
    ));
    Ok(out)
}

fn rows_of(m: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> ndarray::Array2<f64> {
    ndarray::Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Worst relative error of the meta update against `−eta·∇` from finite
/// differences, over `instances` random problems.
pub fn meta_gradient_check(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let nt = rng.random_range(2..=20);
        let nv = rng.random_range(1..=20);
        let d = rng.random_range(1..=5);
        let c = rng.random_range(1..=4);
        let ht = random_matrix(&mut rng, nt, d);
        let hv = random_matrix(&mut rng, nv, d);
        let yt = random_matrix(&mut rng, nt, c);
        let yv = random_matrix(&mut rng, nv, c);
        let reg = rng.random_range(0.01..1.0);
        let eta = rng.random_range(0.01..1.0);
        let updated = crate::meta::meta_label_update(
            &FeatureMatrix::new(ht.clone())?,
            &FeatureMatrix::new(hv.clone())?,
            &SoftLabelMatrix::new(yt.clone())?,
            &SoftLabelMatrix::new(yv.clone())?,
            eta,
            reg,
        )?;
        let g = fd_label_gradient(&rows_of(&ht), &rows_of(&hv), &rows_of(&yt), &rows_of(&yv), reg, 1e-5);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..nt {
            for j in 0..c {
                let step = updated.as_array()[[i, j]] - yt[[i, j]];
                num += (step + eta * g[i][j]).powi(2);
                den += (eta * g[i][j]).powi(2);
            }
        }
        if den > 0.0 {
            worst = worst.max((num / den).sqrt());
        }
    }
    Ok(worst)
}

/// Worst relative error of the SRL objective's analytic gradient against
/// finite differences over `points` random parameter draws.
pub fn srl_gradient_check(points: usize, seed: u64) -> Result<f64> {
    use crate::srl::{srl_total_loss, SrlBatch, SrlConfig, SrlModel};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let (d, c, m) = (6, 3, 4);
        let model = SrlModel::new(d, &[5, 4], c, 3, seed.wrapping_add(p as u64))?;
        let cfg = SrlConfig {
            // low threshold so the unlabeled gate is open for some rows
            lambda: rng.random_range(0.2..0.5),
            tau: rng.random_range(0.1..1.0),
            ..SrlConfig::default()
        };
        let batch = SrlBatch {
            x_labeled: random_matrix(&mut rng, 5, d) * 2.0,
            y_labeled: (0..5).map(|_| rng.random_range(0..c)).collect(),
            x_weak: random_matrix(&mut rng, 4, d) * 2.0,
            x_strong: random_matrix(&mut rng, 4, d) * 2.0,
            anchors: random_matrix(&mut rng, m, d) * 2.0,
        };
        let (_, grads) = srl_total_loss(&model, &batch, &cfg)?;
        let analytic = grads.flatten();
        let theta = model.flatten();
        let numeric = fd_gradient(
            |th| {
                let m2 = model.with_flat(th).expect("same layout");
                srl_total_loss(&m2, &batch, &cfg).expect("finite loss").0.total
            },
            &theta,
            1e-5,
        );
        let num: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = numeric.iter().map(|b| b * b).sum();
        worst = worst.max((num / den.max(1e-300)).sqrt());
    }
    Ok(worst)
}

pub fn gradient_reports() -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let worst = meta_gradient_check(100, 11)?;
    out.push(OracleReport::new(
        "meta_update_vs_fd",
        "100 random instances n_t,n_v<=20 d<=5 C<=4 seed=11 h=1e-5",
        0.0,
        worst,
        Tolerance::Absolute(1e-6),
    ));

    // zero residual: validation labels equal the ridge fit
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ht = rows_of(&random_matrix(&mut rng, 8, 3));
    let hv = rows_of(&random_matrix(&mut rng, 5, 3));
    let yt = rows_of(&random_matrix(&mut rng, 8, 2));
    let w = naive::ridge(&ht, &yt, 0.1).ok_or_else(|| StctError::Singular("oracle ridge".into()))?;
    let yv = naive::matmul(&hv, &w);
    let g = fd_label_gradient(&ht, &hv, &yt, &yv, 0.1, 1e-5);
    let gmax = g.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
    out.push(OracleReport::new(
        "fd_zero_residual",
        "8x3/5x3 C=2 reg=0.1 seed=12",
        0.0,
        gmax,
        Tolerance::Absolute(1e-8),
    ));

    let worst = srl_gradient_check(20, 13)?;
    out.push(OracleReport::new(
        "srl_total_loss_vs_fd",
        "20 random points d=6 hidden=[5,4] C=3 p=3 M=4 seed=13 h=1e-5",
        0.0,
        worst,
        Tolerance::Absolute(1e-5),
    ));
    Ok(out)
}

pub fn coverage_reports() -> Result<Vec<OracleReport>> {
    use crate::meta::{required_sampling_times, sampling_times_for_subtrain_prob};
    let mut out = Vec::new();
    let cases: [(usize, f64, f64, usize); 3] = [(50_000, 0.5, 0.9999, 1000), (1000, 0.5, 0.99, 10_000), (100, 0.3, 0.99, 10_000)];
    for (n, p, beta, trials) in cases {
        let s = required_sampling_times(n, 1.0 - p, beta)?;
        let mc = mc_coverage(n, p, s, trials, &[beta], 23);
        let inputs = format!("n={n} p={p} beta={beta} trials={trials} seed=23");
        out.push(OracleReport::new(
            &format!("coverage_n{n}_fraction_at_bound"),
            &inputs,
            0.5,
            mc.fraction_at(beta).unwrap_or(0.0),
            Tolerance::AtLeast,
        ));
        let max_q = 1.0 - 10.0 / trials as f64;
        for q in [0.5, 0.9, 0.99] {
            if q > max_q {
                continue;
            }
            out.push(OracleReport::new(
                &format!("coverage_n{n}_full_time_q{q}"),
                &inputs,
                mc.full_coverage_quantile(q) as f64,
                sampling_times_for_subtrain_prob(n, p, q) as f64,
                Tolerance::Absolute(1.0),
            ));
        }
        let long = mc_coverage(n, p, 5 * s, trials.min(1000), &[beta], 29);
        out.push(OracleReport::new(
            &format!("coverage_n{n}_five_times_bound"),
            &format!("{inputs} rounds={}", 5 * s),
            0.999,
            long.fraction_at(beta).unwrap_or(0.0),
            Tolerance::AtLeast,
        ));
    }
    let zero = mc_coverage(1000, 0.5, 0, 1000, &[0.5], 31);
    out.push(OracleReport::new(
        "coverage_zero_rounds",
        "n=1000 p=0.5 rounds=0",
        0.0,
        zero.mean_coverage,
        Tolerance::Absolute(0.0),
    ));
    Ok(out)
}
