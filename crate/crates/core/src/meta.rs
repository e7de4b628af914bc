//! Noisy meta correction: labels are treated as hyper-parameters and
//! moved along the exact gradient of a closed-form validation loss, where
//! the validation set is a random slice of the noisy training data.
//!
//! One round samples a split, fits a ridge model on the sub-training
//! embeddings, and takes `steps_per_split` gradient steps on the
//! sub-training labels so that the fit explains the validation labels.
//! The corrected rows are written back and the next round resamples.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{harden, label_agreement, FeatureMatrix, HardLabelVector, SoftLabelMatrix, SplitIndices};
use crate::error::{Result, StctError};
use crate::numerics::{GramFactor, Ridge};

/// Units of [`NmcConfig::eta`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EtaUnits {
    /// Step passed to the update is `eta · n_t`. The curvature of the
    /// validation loss in the labels shrinks like `1/n_t`, so this keeps a
    /// given `eta` meaningful across dataset sizes.
    #[default]
    PerSample,
    /// Step passed to the update is `eta`.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmcConfig {
    /// Fraction of samples placed in the noisy validation split.
    pub r: f64,
    pub eta: f64,
    pub eta_units: EtaUnits,
    /// Target fraction for the sampling-times bound.
    pub beta: f64,
    /// Stop once this fraction of hardened labels is unchanged between rounds.
    pub delta: f64,
    pub steps_per_split: usize,
    pub ridge: Ridge,
    /// Column-center embeddings before fitting (the linear model has no intercept).
    pub center: bool,
    /// Upper bound on `step · curvature`, where curvature is the largest
    /// eigenvalue of the validation loss Hessian in the labels. Values up
    /// to 1 never overshoot; smaller values also keep a single split from
    /// fitting its validation labels outright, which would inflate label
    /// scale round after round. `None` applies the step as given.
    pub step_cap: Option<f64>,
    pub seed: u64,
}

impl Default for NmcConfig {
    fn default() -> Self {
        NmcConfig {
            r: 0.5,
            eta: 2.0,
            eta_units: EtaUnits::PerSample,
            beta: 0.9999,
            delta: 0.998,
            steps_per_split: 10,
            ridge: Ridge::Relative(10.0),
            center: true,
            step_cap: Some(0.1),
            seed: 0,
        }
    }
}

impl NmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(StctError::input(format!("sampling rate r = {} must lie in (0, 1)", self.r)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(StctError::input(format!("eta = {} must be finite and >= 0", self.eta)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(StctError::input(format!("beta = {} must lie in (0, 1)", self.beta)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(StctError::input(format!("delta = {} must lie in (0, 1]", self.delta)));
        }
        if self.steps_per_split == 0 {
            return Err(StctError::input("steps_per_split must be positive"));
        }
        if let Some(c) = self.step_cap {
            if !(c > 0.0 && c.is_finite()) {
                return Err(StctError::input(format!("step_cap = {c} must be positive")));
            }
        }
        match self.ridge {
            Ridge::Absolute(v) | Ridge::Relative(v) if !(v >= 0.0 && v.is_finite()) => {
                Err(StctError::input(format!("ridge {v} must be finite and >= 0")))
            }
            _ => Ok(()),
        }
    }

    fn raw_eta(&self, n_train: usize) -> f64 {
        match self.eta_units {
            EtaUnits::PerSample => self.eta * n_train as f64,
            EtaUnits::Raw => self.eta,
        }
    }
}

/// One completed sampling round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmcRound {
    pub round: usize,
    /// Validation loss after this round's updates.
    pub val_loss: f64,
    /// Fraction of hardened labels unchanged since the previous round.
    pub agreement: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NmcTrace {
    pub rounds: Vec<NmcRound>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Agreement,
    SamplingBound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmcOutcome {
    pub corrected: SoftLabelMatrix,
    pub trace: NmcTrace,
    pub stop: StopReason,
}

/// Uniform random partition with `round(r·n)` validation samples.
/// Both index lists come back sorted.
pub fn sample_split(n: usize, r: f64, seed: u64) -> Result<SplitIndices> {
    if !(r > 0.0 && r < 1.0) {
        return Err(StctError::input(format!("sampling rate r = {r} must lie in (0, 1)")));
    }
    let n_v = (r * n as f64).round() as usize;
    if n_v == 0 || n_v >= n {
        return Err(StctError::DegenerateSplit { n, r });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut val_idx = perm[..n_v].to_vec();
    let mut train_idx = perm[n_v..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(SplitIndices { train_idx, val_idx, n })
}

fn check_shapes(ht: &FeatureMatrix, yt: &SoftLabelMatrix, hv: &FeatureMatrix) -> Result<()> {
    if ht.d() != hv.d() {
        return Err(StctError::input(format!(
            "sub-training embeddings have {} columns, validation has {}",
            ht.d(),
            hv.d()
        )));
    }
    if ht.n() != yt.n() {
        return Err(StctError::input(format!(
            "{} sub-training embeddings but {} label rows",
            ht.n(),
            yt.n()
        )));
    }
    Ok(())
}

/// Ridge predictions on the validation split,
/// `Hv (HtᵀHt + reg·I)⁻¹ Htᵀ Yt`.
pub fn predict_validation(
    ht: &FeatureMatrix,
    yt: &SoftLabelMatrix,
    hv: &FeatureMatrix,
    reg: f64,
) -> Result<SoftLabelMatrix> {
    check_shapes(ht, yt, hv)?;
    let factor = GramFactor::new(ht.view(), reg)?;
    let w = factor.solve(&ht.view().t().dot(&yt.view()));
    SoftLabelMatrix::new(hv.view().dot(&w))
}

/// Squared Frobenius distance divided by the number of validation rows.
pub fn validation_loss(yv: &SoftLabelMatrix, yv_pred: &SoftLabelMatrix) -> Result<f64> {
    if yv.as_array().dim() != yv_pred.as_array().dim() {
        return Err(StctError::input(format!(
            "validation labels {:?} vs predictions {:?}",
            yv.as_array().dim(),
            yv_pred.as_array().dim()
        )));
    }
    let mut s = 0.0;
    for (a, b) in yv.as_array().iter().zip(yv_pred.as_array().iter()) {
        s += (a - b) * (a - b);
    }
    Ok(s / yv.n().max(1) as f64)
}

/// Fixed pieces of one split, with the Gram factorization computed once.
pub struct MetaProblem<'a> {
    ht: &'a Array2<f64>,
    hv: &'a Array2<f64>,
    yv: &'a Array2<f64>,
    factor: GramFactor,
}

impl<'a> MetaProblem<'a> {
    pub fn new(ht: &'a FeatureMatrix, hv: &'a FeatureMatrix, yv: &'a SoftLabelMatrix, factor: GramFactor) -> Result<Self> {
        if ht.d() != hv.d() || factor.dim() != ht.d() {
            return Err(StctError::input("embedding widths disagree"));
        }
        if hv.n() != yv.n() {
            return Err(StctError::input(format!(
                "{} validation embeddings but {} label rows",
                hv.n(),
                yv.n()
            )));
        }
        Ok(MetaProblem {
            ht: ht.as_array(),
            hv: hv.as_array(),
            yv: yv.as_array(),
            factor,
        })
    }

    fn residual(&self, yt: &Array2<f64>) -> Array2<f64> {
        let w = self.factor.solve(&self.ht.t().dot(yt));
        self.yv - &self.hv.dot(&w)
    }

    /// Validation loss at the given sub-training labels.
    pub fn loss(&self, yt: &Array2<f64>) -> f64 {
        let r = self.residual(yt);
        r.iter().map(|v| v * v).sum::<f64>() / self.yv.nrows() as f64
    }

    /// Largest eigenvalue of the loss Hessian in one label column,
    /// `(2/n_v)·Ht G⁻¹ HvᵀHv G⁻¹ Htᵀ`, by power iteration on the similar
    /// d×d product.
    pub fn curvature(&self) -> f64 {
        let gt = self.ht.t().dot(self.ht);
        let gv = self.hv.t().dot(self.hv);
        let m = self.factor.solve(&gv.dot(&self.factor.solve(&gt)));
        let d = m.nrows();
        let mut v = Array2::from_elem((d, 1), 1.0 / (d as f64).sqrt());
        let mut lam = 0.0;
        for _ in 0..200 {
            let w = m.dot(&v);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return norm;
            }
            let done = (norm - lam).abs() <= 1e-10 * norm;
            lam = norm;
            v = w / norm;
            if done {
                break;
            }
        }
        2.0 * lam / self.yv.nrows().max(1) as f64
    }

    /// One gradient step of size `eta` on `yt`:
    /// `yt += (2·eta/n_v) Ht G⁻¹ Hvᵀ (Yv − Hv G⁻¹ Htᵀ yt)`.
    pub fn step(&self, yt: &mut Array2<f64>, eta: f64) {
        if eta == 0.0 {
            return;
        }
        let r = self.residual(yt);
        let b = self.factor.solve(&self.hv.t().dot(&r));
        let scale = 2.0 * eta / self.yv.nrows() as f64;
        yt.scaled_add(scale, &self.ht.dot(&b));
    }
}

/// A single meta gradient step on the sub-training labels.
pub fn meta_label_update(
    ht: &FeatureMatrix,
    hv: &FeatureMatrix,
    yt: &SoftLabelMatrix,
    yv: &SoftLabelMatrix,
    eta: f64,
    reg: f64,
) -> Result<SoftLabelMatrix> {
    check_shapes(ht, yt, hv)?;
    if yt.classes() != yv.classes() {
        return Err(StctError::input("label widths disagree"));
    }
    if !(eta >= 0.0) {
        return Err(StctError::input(format!("eta = {eta} must be >= 0")));
    }
    let problem = MetaProblem::new(ht, hv, yv, GramFactor::new(ht.view(), reg)?)?;
    let mut y = yt.as_array().clone();
    problem.step(&mut y, eta);
    SoftLabelMatrix::new(y).map_err(|_| StctError::Divergence(format!("labels non-finite after step with eta = {eta}")))
}

/// Smallest `s` with `n·ln(1 − (1−p)^s) ≥ ln β`, where `p` is the per-round
/// probability that a sample lands in the sub-training split.
pub fn sampling_times_for_subtrain_prob(n: usize, p: f64, beta: f64) -> usize {
    assert!(p > 0.0 && p < 1.0 && beta > 0.0 && beta < 1.0 && n >= 1);
    let n_f = n as f64;
    let ln_beta = beta.ln();
    let ok = |s: usize| n_f * (-(1.0 - p).powi(s as i32)).ln_1p() >= ln_beta;
    // ln(1 − exp(ln β / n)) / ln(1 − p)
    let closed = (-(ln_beta / n_f).exp_m1()).ln() / (-p).ln_1p();
    let mut s = closed.ceil().max(1.0) as usize;
    while s > 1 && ok(s - 1) {
        s -= 1;
    }
    while !ok(s) {
        s += 1;
    }
    s
}

/// Sampling rounds needed so that, with probability `beta`, every sample
/// has been in the sub-training split at least once. `r` is the validation
/// fraction, so the sub-training probability is `1 − r`.
pub fn required_sampling_times(n: usize, r: f64, beta: f64) -> Result<usize> {
    if !(r > 0.0 && r < 1.0) || !(beta > 0.0 && beta < 1.0) || n == 0 {
        return Err(StctError::input(format!(
            "need 0 < r < 1, 0 < beta < 1, n >= 1 (got r = {r}, beta = {beta}, n = {n})"
        )));
    }
    Ok(sampling_times_for_subtrain_prob(n, 1.0 - r, beta))
}

/// Runs correction rounds until consecutive hardened labels agree on at
/// least `delta` of the samples, or the sampling-times bound is reached.
///
/// `clean` only feeds the `label_acc` column of the trace.
pub fn run_nmc(
    features: &FeatureMatrix,
    labels: &SoftLabelMatrix,
    cfg: &NmcConfig,
    clean: Option<&HardLabelVector>,
) -> Result<NmcOutcome> {
    cfg.validate()?;
    let n = features.n();
    if labels.n() != n {
        return Err(StctError::input(format!("{n} embeddings but {} label rows", labels.n())));
    }
    if let Some(c) = clean {
        if c.len() != n {
            return Err(StctError::input("clean label vector length differs"));
        }
    }
    let h = if cfg.center { features.centered() } else { features.clone() };
    let cap = required_sampling_times(n, cfg.r, cfg.beta)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut y = labels.clone();
    let mut prev = harden(&y);
    let mut trace = NmcTrace::default();
    let mut round = 0;
    loop {
        round += 1;
        let split = sample_split(n, cfg.r, seeds.next_u64())?;
        let ht = h.select(&split.train_idx);
        let hv = h.select(&split.val_idx);
        let yv = y.select(&split.val_idx);
        let factor = GramFactor::with_ridge(ht.view(), cfg.ridge)?;
        let problem = MetaProblem::new(&ht, &hv, &yv, factor)?;
        let mut eta = cfg.raw_eta(ht.n());
        if let Some(cap) = cfg.step_cap {
            let k = problem.curvature();
            if eta * k > cap {
                eta = cap / k;
            }
        }
        let mut yt = y.select(&split.train_idx).into_inner();
        for _ in 0..cfg.steps_per_split {
            problem.step(&mut yt, eta);
        }
        if yt.iter().any(|v| !v.is_finite()) {
            return Err(StctError::Divergence(format!(
                "labels became non-finite in round {round}; eta = {} is too large",
                cfg.eta
            )));
        }
        let val_loss = problem.loss(&yt);
        y.write_rows(&split.train_idx, &SoftLabelMatrix::new(yt)?);

        let hard = harden(&y);
        let agreement = label_agreement(&hard, &prev)?;
        let label_acc = clean.map(|c| label_agreement(&hard, c)).transpose()?;
        trace.rounds.push(NmcRound {
            round,
            val_loss,
            agreement,
            label_acc,
        });
        let stop = if round >= 2 && agreement >= cfg.delta {
            Some(StopReason::Agreement)
        } else if round >= cap {
            Some(StopReason::SamplingBound)
        } else {
            None
        };
        if let Some(stop) = stop {
            return Ok(NmcOutcome {
                corrected: y,
                trace,
                stop,
            });
        }
        prev = hard;
    }
}
