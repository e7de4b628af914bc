use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::model::{Gradients, SrlModel};
use super::SrlConfig;
use crate::error::{Result, StctError};
use crate::numerics::{cross_entropy, softmax_in_place, CE_CLAMP};

/// Target used by the unlabeled loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlabeledTarget {
    /// The weak-view probability row itself.
    #[default]
    Soft,
    /// One-hot of the weak-view argmax.
    Hard,
}

fn check_rows(p: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    for (i, r) in p.rows().into_iter().enumerate() {
        if r.iter().any(|v| !(*v >= 0.0)) || (r.sum() - 1.0).abs() > 1e-9 {
            return Err(StctError::input(format!("{what} row {i} is not a probability vector")));
        }
    }
    Ok(())
}

fn argmax(r: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, v) in r.iter().enumerate() {
        if *v > r[best] {
            best = j;
        }
    }
    best
}

/// Mean cross-entropy of predicted rows against one-hot labels.
pub fn loss_labeled(pw: ArrayView2<'_, f64>, y: &[usize]) -> Result<f64> {
    if pw.nrows() != y.len() {
        return Err(StctError::input(format!("{} prediction rows for {} labels", pw.nrows(), y.len())));
    }
    check_rows(pw, "prediction")?;
    if y.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (r, &c) in pw.rows().into_iter().zip(y) {
        if c >= pw.ncols() {
            return Err(StctError::input(format!("label {c} out of range")));
        }
        s -= r[c].max(CE_CLAMP).ln();
    }
    Ok(s / y.len() as f64)
}

/// Confidence-gated cross-entropy of strong-view predictions against the
/// weak-view rows, averaged over all unlabeled rows. Rows whose weak
/// confidence is not strictly above `lambda` contribute zero.
pub fn loss_unlabeled(pw: ArrayView2<'_, f64>, ps: ArrayView2<'_, f64>, lambda: f64) -> Result<f64> {
    loss_unlabeled_with(pw, ps, lambda, UnlabeledTarget::Soft)
}

pub fn loss_unlabeled_with(
    pw: ArrayView2<'_, f64>,
    ps: ArrayView2<'_, f64>,
    lambda: f64,
    target: UnlabeledTarget,
) -> Result<f64> {
    if pw.dim() != ps.dim() {
        return Err(StctError::input("weak and strong prediction shapes differ"));
    }
    check_rows(pw, "weak prediction")?;
    check_rows(ps, "strong prediction")?;
    if pw.nrows() == 0 {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (w, st) in pw.rows().into_iter().zip(ps.rows()) {
        let conf = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if conf > lambda {
            s += match target {
                UnlabeledTarget::Soft => cross_entropy(st, w),
                UnlabeledTarget::Hard => -st[argmax(w)].max(CE_CLAMP).ln(),
            };
        }
    }
    Ok(s / pw.nrows() as f64)
}

/// Softmax over `z · anchor_j / tau`.
pub fn instance_similarity(anchors: ArrayView2<'_, f64>, z: ArrayView1<'_, f64>, tau: f64) -> Result<Array1<f64>> {
    if !(tau > 0.0) {
        return Err(StctError::input(format!("temperature {tau} must be positive")));
    }
    if anchors.ncols() != z.len() {
        return Err(StctError::input("anchor width differs from projection width"));
    }
    let unit = |r: ArrayView1<'_, f64>| (r.dot(&r).sqrt() - 1.0).abs() <= 1e-9;
    if !unit(z) || !anchors.rows().into_iter().all(unit) {
        return Err(StctError::input("similarity inputs must be unit-norm rows"));
    }
    let mut s = anchors.dot(&z).to_vec();
    softmax_in_place(&mut s, tau);
    Ok(Array1::from(s))
}

/// Mean cross-entropy of strong-view similarity rows against weak-view rows.
pub fn loss_consistency(ss: ArrayView2<'_, f64>, sw: ArrayView2<'_, f64>) -> Result<f64> {
    if ss.dim() != sw.dim() {
        return Err(StctError::input("similarity shapes differ"));
    }
    check_rows(ss, "strong similarity")?;
    check_rows(sw, "weak similarity")?;
    if ss.nrows() == 0 {
        return Ok(0.0);
    }
    let s: f64 = ss.rows().into_iter().zip(sw.rows()).map(|(a, b)| cross_entropy(a, b)).sum();
    Ok(s / ss.nrows() as f64)
}

/// Already-augmented inputs for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct SrlBatch {
    pub x_labeled: Array2<f64>,
    pub y_labeled: Vec<usize>,
    /// Weak and strong views of the same unlabeled rows.
    pub x_weak: Array2<f64>,
    pub x_strong: Array2<f64>,
    pub anchors: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub labeled: f64,
    pub unlabeled: f64,
    pub consistency: f64,
    pub total: f64,
    /// Fraction of unlabeled rows that passed the confidence gate.
    pub gate_rate: f64,
}

fn log_rows(p: &Array2<f64>) -> Array2<f64> {
    p.mapv(|v| v.max(CE_CLAMP).ln())
}

// Gradient of `Σ_ij t_ij · c_ij` with respect to the logits of the softmax
// rows `t`: `t ⊙ (c − rowsum(t ⊙ c))`.
fn through_softmax(t: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
    let mut g = t * c;
    for (mut row, tr) in g.rows_mut().into_iter().zip(t.rows()) {
        let s = row.sum();
        row.zip_mut_with(&tr, |v, tv| *v -= tv * s);
    }
    g
}

fn softmax_scaled(m: Array2<f64>, tau: f64) -> Array2<f64> {
    let mut m = m;
    for mut row in m.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"), tau);
    }
    m
}

/// `ℒ_L + ℒ_U + ℒ_Con` and its exact gradient for every parameter.
///
/// Targets are differentiated too: the weak-view probabilities in the
/// unlabeled term (soft mode) and the weak-view similarities and anchors
/// in the consistency term all carry gradient. The confidence gate is
/// piecewise constant and contributes none.
pub fn srl_total_loss(model: &SrlModel, batch: &SrlBatch, cfg: &SrlConfig) -> Result<(LossParts, Gradients)> {
    let mut grads = model.zeros_like();
    let mut parts = LossParts::default();
    let c = model.classes();

    let n_l = batch.x_labeled.nrows();
    if n_l != batch.y_labeled.len() {
        return Err(StctError::input("labeled batch rows and labels differ"));
    }
    if n_l > 0 {
        let fwd = model.forward(batch.x_labeled.view());
        let mut g = fwd.probs.clone();
        let mut s = 0.0;
        for (i, &y) in batch.y_labeled.iter().enumerate() {
            if y >= c {
                return Err(StctError::input(format!("label {y} out of range for {c} classes")));
            }
            s -= fwd.probs[[i, y]].max(CE_CLAMP).ln();
            g[[i, y]] -= 1.0;
        }
        parts.labeled = s / n_l as f64;
        g /= n_l as f64;
        model.backward(&fwd, Some(&g), None, &mut grads);
    }

    let n_u = batch.x_weak.nrows();
    if batch.x_strong.nrows() != n_u {
        return Err(StctError::input("weak and strong views differ in rows"));
    }
    if n_u > 0 {
        let fw = model.forward(batch.x_weak.view());
        let fs = model.forward(batch.x_strong.view());
        let scale = 1.0 / n_u as f64;

        let log_ps = log_rows(&fs.probs);
        let mut target = Array2::zeros(fw.probs.raw_dim());
        let mut gated = 0;
        for (i, w) in fw.probs.rows().into_iter().enumerate() {
            let conf = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if conf > cfg.lambda {
                gated += 1;
                match cfg.target {
                    UnlabeledTarget::Soft => target.row_mut(i).assign(&w),
                    UnlabeledTarget::Hard => target[[i, argmax(w)]] = 1.0,
                }
            }
        }
        parts.gate_rate = gated as f64 / n_u as f64;
        parts.unlabeled = -(&target * &log_ps).sum() * scale;
        // d/d strong logits: rowsum(t)·p_s − t
        let mut g_s = &fs.probs * &target.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1)) - &target;
        g_s *= scale;
        let g_w = match cfg.target {
            UnlabeledTarget::Soft => {
                // gated rows only; ungated target rows are zero
                let mut mask = target.mapv(|_| 0.0);
                for (i, r) in target.rows().into_iter().enumerate() {
                    if r.sum() > 0.0 {
                        mask.row_mut(i).fill(1.0);
                    }
                }
                through_softmax(&fw.probs, &(-&log_ps * scale * &mask))
            }
            UnlabeledTarget::Hard => Array2::zeros(fw.probs.raw_dim()),
        };

        let mut g_zs = Array2::zeros(fs.z.raw_dim());
        let mut g_zw = Array2::zeros(fw.z.raw_dim());
        let m = batch.anchors.nrows();
        if m > 0 {
            let fa = model.forward(batch.anchors.view());
            let tau = cfg.tau;
            let ss = softmax_scaled(fs.z.dot(&fa.z.t()), tau);
            let sw = softmax_scaled(fw.z.dot(&fa.z.t()), tau);
            let log_ss = log_rows(&ss);
            parts.consistency = -(&sw * &log_ss).sum() * scale;
            // logits of both similarity softmaxes are z·a/τ
            let g_ls = (&ss - &sw) * (scale / tau);
            let g_lw = through_softmax(&sw, &(-&log_ss * scale)) / tau;
            g_zs = g_ls.dot(&fa.z);
            g_zw = g_lw.dot(&fa.z);
            let g_za = g_ls.t().dot(&fs.z) + g_lw.t().dot(&fw.z);
            model.backward(&fa, None, Some(&g_za), &mut grads);
        }
        model.backward(&fs, Some(&g_s), Some(&g_zs), &mut grads);
        model.backward(&fw, Some(&g_w), Some(&g_zw), &mut grads);
    }

    parts.total = parts.labeled + parts.unlabeled + parts.consistency;
    if !parts.total.is_finite() {
        return Err(StctError::Divergence(format!("SRL loss is {}", parts.total)));
    }
    Ok((parts, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize, sharp: f64) -> Array2<f64> {
        let mut m = Array2::from_shape_fn((n, c), |_| rng.random_range(-1.0..1.0) * sharp);
        for mut r in m.rows_mut() {
            softmax_in_place(r.as_slice_mut().unwrap(), 1.0);
        }
        m
    }

    #[test]
    fn labeled_examples() {
        let p = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(loss_labeled(p.view(), &[0, 1]).unwrap() <= 1e-11);
        let u = Array2::from_elem((3, 10), 0.1);
        assert!((loss_labeled(u.view(), &[0, 4, 9]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(loss_labeled(u.view(), &[0]).is_err());
    }

    #[test]
    fn labeled_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_probs(&mut rng, 9, 4, 2.0);
        let y: Vec<usize> = (0..9).map(|i| i % 4).collect();
        let mut expect = 0.0;
        for i in 0..9 {
            expect -= p[[i, y[i]]].ln();
        }
        expect /= 9.0;
        assert!((loss_labeled(p.view(), &y).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn unlabeled_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pw = random_probs(&mut rng, 6, 3, 0.1);
        let ps = random_probs(&mut rng, 6, 3, 1.0);
        assert_eq!(loss_unlabeled(pw.view(), ps.view(), 0.95).unwrap(), 0.0);
        let one = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(loss_unlabeled(one.view(), one.view(), 0.5).unwrap().abs() <= 1e-11);
        // strict inequality: confidence exactly at the threshold is excluded
        let half = array![[0.5, 0.5]];
        assert_eq!(loss_unlabeled(half.view(), half.view(), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn unlabeled_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pw = random_probs(&mut rng, 12, 4, 6.0);
        let ps = random_probs(&mut rng, 12, 4, 2.0);
        let lambda = 0.7;
        let mut expect = 0.0;
        for i in 0..12 {
            let conf = (0..4).map(|j| pw[[i, j]]).fold(0.0, f64::max);
            if conf > lambda {
                for j in 0..4 {
                    expect -= pw[[i, j]] * ps[[i, j]].ln();
                }
            }
        }
        expect /= 12.0;
        assert!((loss_unlabeled(pw.view(), ps.view(), lambda).unwrap() - expect).abs() < 1e-13);
    }

    #[test]
    fn unlabeled_monotone_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pw = random_probs(&mut rng, 50, 3, 4.0);
        let ps = random_probs(&mut rng, 50, 3, 2.0);
        let mut prev = f64::INFINITY;
        for k in 0..=20 {
            let l = loss_unlabeled(pw.view(), ps.view(), k as f64 / 20.0).unwrap();
            assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn similarity_examples() {
        let a = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let z = array![0.0, 0.0, 1.0];
        let s = instance_similarity(a.view(), z.view(), 0.1).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);
        let z = array![1.0, 0.0, 0.0];
        let s = instance_similarity(a.view(), z.view(), 0.05).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-6);
        assert!(instance_similarity(a.view(), array![2.0, 0.0, 0.0].view(), 0.1).is_err());
    }

    #[test]
    fn similarity_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let rows: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut rng)).collect();
        let z = unit(&mut rng);
        let a = Array2::from_shape_fn((6, 4), |(i, j)| rows[i][j]);
        let tau = 0.3;
        let e: Vec<f64> = rows
            .iter()
            .map(|r| (r.iter().zip(&z).map(|(x, y)| x * y).sum::<f64>() / tau).exp())
            .collect();
        let tot: f64 = e.iter().sum();
        let s = instance_similarity(a.view(), Array1::from(z).view(), tau).unwrap();
        assert!((s.sum() - 1.0).abs() < 1e-12);
        for j in 0..6 {
            assert!((s[j] - e[j] / tot).abs() < 1e-14);
        }
    }

    #[test]
    fn consistency_examples() {
        let one = Array2::from_shape_fn((3, 16), |(i, j)| if i == j { 1.0 } else { 0.0 });
        assert!(loss_consistency(one.view(), one.view()).unwrap() <= 1e-11);
        let uni = Array2::from_elem((3, 16), 1.0 / 16.0);
        assert!((loss_consistency(uni.view(), one.view()).unwrap() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn consistency_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ss = random_probs(&mut rng, 7, 5, 2.0);
        let sw = random_probs(&mut rng, 7, 5, 2.0);
        let mut expect = 0.0;
        for i in 0..7 {
            for j in 0..5 {
                expect -= sw[[i, j]] * ss[[i, j]].ln();
            }
        }
        expect /= 7.0;
        assert!((loss_consistency(ss.view(), sw.view()).unwrap() - expect).abs() < 1e-13);
    }

    fn batch(rng: &mut ChaCha8Rng, d: usize, c: usize, nl: usize, nu: usize, m: usize) -> SrlBatch {
        let mut r = |n: usize| Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let (xl, xw, xs, xa) = (r(nl), r(nu), r(nu), r(m));
        SrlBatch {
            x_labeled: xl,
            y_labeled: (0..nl).map(|i| i % c).collect(),
            x_weak: xw,
            x_strong: xs,
            anchors: xa,
        }
    }

    fn cfg(lambda: f64, target: UnlabeledTarget) -> SrlConfig {
        SrlConfig {
            lambda,
            tau: 0.5,
            target,
            ..SrlConfig::default()
        }
    }

    #[test]
    fn total_loss_parts_match_standalone_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = SrlModel::new(6, &[5, 4], 3, 4, 8).unwrap();
        let b = batch(&mut rng, 6, 3, 5, 6, 4);
        let c = cfg(0.4, UnlabeledTarget::Soft);
        let (parts, _) = srl_total_loss(&model, &b, &c).unwrap();
        let pl = model.forward(b.x_labeled.view()).probs;
        assert!((parts.labeled - loss_labeled(pl.view(), &b.y_labeled).unwrap()).abs() < 1e-12);
        let fw = model.forward(b.x_weak.view());
        let fs = model.forward(b.x_strong.view());
        let lu = loss_unlabeled(fw.probs.view(), fs.probs.view(), 0.4).unwrap();
        assert!((parts.unlabeled - lu).abs() < 1e-12);
        let fa = model.forward(b.anchors.view());
        let sim = |z: &Array2<f64>| {
            let rows: Vec<Array1<f64>> =
                z.rows().into_iter().map(|r| instance_similarity(fa.z.view(), r, 0.5).unwrap()).collect();
            Array2::from_shape_fn((rows.len(), 4), |(i, j)| rows[i][j])
        };
        let lc = loss_consistency(sim(&fs.z).view(), sim(&fw.z).view()).unwrap();
        assert!((parts.consistency - lc).abs() < 1e-12);
        assert_eq!(parts.total, parts.labeled + parts.unlabeled + parts.consistency);
    }

    #[test]
    fn empty_unlabeled_is_labeled_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = SrlModel::new(6, &[5], 3, 4, 9).unwrap();
        let b = batch(&mut rng, 6, 3, 5, 0, 0);
        let (parts, _) = srl_total_loss(&model, &b, &SrlConfig::default()).unwrap();
        assert_eq!(parts.total, parts.labeled);
        assert_eq!(parts.unlabeled, 0.0);
    }

    #[test]
    fn duplicated_batch_keeps_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = SrlModel::new(6, &[5], 3, 4, 10).unwrap();
        let b = batch(&mut rng, 6, 3, 4, 5, 3);
        let dup = |m: &Array2<f64>| ndarray::concatenate![ndarray::Axis(0), m.view(), m.view()];
        let b2 = SrlBatch {
            x_labeled: dup(&b.x_labeled),
            y_labeled: [b.y_labeled.clone(), b.y_labeled.clone()].concat(),
            x_weak: dup(&b.x_weak),
            x_strong: dup(&b.x_strong),
            anchors: b.anchors.clone(),
        };
        let c = cfg(0.3, UnlabeledTarget::Soft);
        let a = srl_total_loss(&model, &b, &c).unwrap().0.total;
        let d = srl_total_loss(&model, &b2, &c).unwrap().0.total;
        assert!((a - d).abs() < 1e-12);
    }

    fn fd_check(target: UnlabeledTarget, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SrlModel::new(6, &[5, 4], 3, 3, seed).unwrap();
        let b = batch(&mut rng, 6, 3, 4, 5, 4);
        let c = cfg(0.35, target);
        let (parts, g) = srl_total_loss(&model, &b, &c).unwrap();
        assert!(parts.gate_rate > 0.0, "gate closed, check is vacuous");
        let analytic = g.flatten();
        let numeric = crate::oracle::fd_gradient(
            |th| srl_total_loss(&model.with_flat(th).unwrap(), &b, &c).unwrap().0.total,
            &model.flatten(),
            1e-5,
        );
        let num: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = numeric.iter().map(|v| v * v).sum();
        assert!((num / den).sqrt() <= 1e-5, "rel {}", (num / den).sqrt());
    }

    #[test]
    fn gradients_match_fd_soft_targets() {
        for s in 0..5 {
            fd_check(UnlabeledTarget::Soft, 100 + s);
        }
    }

    #[test]
    fn gradients_match_fd_hard_targets() {
        for s in 0..3 {
            fd_check(UnlabeledTarget::Hard, 200 + s);
        }
    }
}
