use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{featurewise_std, perturb_rows};
use super::loss::{srl_total_loss, LossParts, SrlBatch, UnlabeledTarget};
use super::model::SrlModel;
use crate::data::{FeatureMatrix, SoftLabelMatrix};
use crate::error::{Result, StctError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrlConfig {
    /// Confidence threshold of the unlabeled loss.
    pub lambda: f64,
    /// Temperature of the instance similarity.
    pub tau: f64,
    /// Anchors sampled from the unlabeled set per step.
    pub anchors: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Passes over the labeled set per call of [`train_srl`].
    pub epochs: usize,
    pub sigma_w: f64,
    pub sigma_s: f64,
    pub drop_p: f64,
    pub target: UnlabeledTarget,
    /// When false only the supervised term is optimized.
    pub use_unlabeled: bool,
    pub hidden: Vec<usize>,
    pub proj_dim: usize,
    pub seed: u64,
}

impl Default for SrlConfig {
    fn default() -> Self {
        SrlConfig {
            lambda: 0.95,
            tau: 0.1,
            anchors: 128,
            lr: 0.002,
            momentum: 0.9,
            batch_labeled: 64,
            batch_unlabeled: 128,
            epochs: 10,
            sigma_w: 0.05,
            sigma_s: 0.2,
            drop_p: 0.1,
            target: UnlabeledTarget::Soft,
            use_unlabeled: true,
            hidden: vec![64, 32],
            proj_dim: 16,
            seed: 0,
        }
    }
}

impl SrlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StctError::input(m));
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda = {} must lie in (0, 1)", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau = {} must be positive", self.tau));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be >= 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} must lie in [0, 1)", self.momentum));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.sigma_w >= 0.0 && self.sigma_s >= 0.0) {
            return bad("augmentation scales must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.drop_p) {
            return bad(format!("drop_p = {} must lie in [0, 1)", self.drop_p));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.proj_dim == 0 {
            return bad(format!("bad architecture {:?} / {}", self.hidden, self.proj_dim));
        }
        Ok(())
    }

    pub fn new_model(&self, input: usize, classes: usize) -> Result<SrlModel> {
        SrlModel::new(input, &self.hidden, classes, self.proj_dim, self.seed)
    }
}

/// Mean loss terms over the steps of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrlEpoch {
    pub epoch: usize,
    pub loss: LossParts,
}

fn rows(x: ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Mini-batch SGD with momentum (`v ← μv + g`, `θ ← θ − lr·v`).
///
/// Every epoch shuffles the labeled rows into batches; each step draws an
/// unlabeled batch and a fresh anchor set without replacement. Labeled
/// inputs and anchors get the weak augmentation, unlabeled inputs get both.
pub fn train_srl(
    mut model: SrlModel,
    x_labeled: ArrayView2<'_, f64>,
    y_labeled: &[usize],
    x_unlabeled: ArrayView2<'_, f64>,
    cfg: &SrlConfig,
) -> Result<(SrlModel, Vec<SrlEpoch>)> {
    cfg.validate()?;
    if x_labeled.nrows() == 0 {
        return Err(StctError::NonConvergence(
            "no labeled samples; the supervised term is what anchors training".into(),
        ));
    }
    if x_labeled.nrows() != y_labeled.len() {
        return Err(StctError::input("labeled rows and labels differ"));
    }
    let d = model.input_dim();
    if x_labeled.ncols() != d || (x_unlabeled.nrows() > 0 && x_unlabeled.ncols() != d) {
        return Err(StctError::input(format!("model expects {d} features")));
    }
    if let Some(y) = y_labeled.iter().find(|y| **y >= model.classes()) {
        return Err(StctError::input(format!("label {y} out of range")));
    }

    let all = ndarray::concatenate(Axis(0), &[x_labeled, x_unlabeled]).expect("same width");
    let scale = featurewise_std(all.view());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = model.zeros_like();
    let n_l = x_labeled.nrows();
    let n_u = if cfg.use_unlabeled { x_unlabeled.nrows() } else { 0 };
    let mut order: Vec<usize> = (0..n_l).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_labeled) {
            let xl = perturb_rows(rows(x_labeled, chunk).view(), &scale, cfg.sigma_w, 0.0, &mut rng)?;
            let yl = chunk.iter().map(|&i| y_labeled[i]).collect();
            let (x_weak, x_strong, anchors) = if n_u > 0 {
                let ui = index::sample(&mut rng, n_u, cfg.batch_unlabeled.min(n_u)).into_vec();
                let xu = rows(x_unlabeled, &ui);
                let xw = perturb_rows(xu.view(), &scale, cfg.sigma_w, 0.0, &mut rng)?;
                let xs = perturb_rows(xu.view(), &scale, cfg.sigma_s, cfg.drop_p, &mut rng)?;
                let ai = index::sample(&mut rng, n_u, cfg.anchors.min(n_u)).into_vec();
                let xa = perturb_rows(rows(x_unlabeled, &ai).view(), &scale, cfg.sigma_w, 0.0, &mut rng)?;
                (xw, xs, xa)
            } else {
                let empty = Array2::zeros((0, d));
                (empty.clone(), empty.clone(), empty)
            };
            let batch = SrlBatch {
                x_labeled: xl,
                y_labeled: yl,
                x_weak,
                x_strong,
                anchors,
            };
            let (parts, grads) = srl_total_loss(&model, &batch, cfg).map_err(|e| e.context(format!("SRL epoch {epoch}")))?;
            velocity.for_each_param_mut(&grads, |v, g| *v = cfg.momentum * *v + g);
            model.for_each_param_mut(&velocity, |p, v| *p -= cfg.lr * v);
            sum.labeled += parts.labeled;
            sum.unlabeled += parts.unlabeled;
            sum.consistency += parts.consistency;
            sum.total += parts.total;
            sum.gate_rate += parts.gate_rate;
            steps += 1;
        }
        if !model.is_finite() {
            return Err(StctError::Divergence(format!("SRL parameters non-finite after epoch {epoch}")));
        }
        let k = steps as f64;
        trace.push(SrlEpoch {
            epoch,
            loss: LossParts {
                labeled: sum.labeled / k,
                unlabeled: sum.unlabeled / k,
                consistency: sum.consistency / k,
                total: sum.total / k,
                gate_rate: sum.gate_rate / k,
            },
        });
    }
    Ok((model, trace))
}

/// Row-stochastic class probabilities for `x`.
pub fn predict(model: &SrlModel, x: &FeatureMatrix) -> Result<SoftLabelMatrix> {
    model.predict(x)
}
