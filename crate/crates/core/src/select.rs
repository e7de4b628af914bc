//! Clean-sample selection: neighbors in embedding space vote on each
//! sample's class, and within each class the samples whose label agrees
//! best with the vote are kept as labeled data.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{harden, Dataset, FeatureMatrix, HardLabelVector};
use crate::error::{Result, StctError};
use crate::numerics::{cosine_topk_all, CE_CLAMP};

/// n×C row-stochastic neighbor-vote matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMatrix(pub Array2<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub k: usize,
    /// Per-epoch trust increment.
    pub mu: f64,
    /// Alternation index, starting at 1.
    pub epoch: usize,
}

impl SelectionConfig {
    /// Fraction of each class to keep: `min(1, mu·epoch)`.
    pub fn mu_hat(&self) -> f64 {
        (self.mu * self.epoch as f64).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(StctError::input("k must be at least 1"));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(StctError::input(format!("mu = {} must lie in (0, 1]", self.mu)));
        }
        if self.epoch == 0 {
            return Err(StctError::input("epoch counts from 1"));
        }
        Ok(())
    }
}

/// 40% of the expected per-class count, clamped to `[1, n-1]`.
pub fn default_k(n: usize, classes: usize) -> usize {
    let k = (0.4 * n as f64 / classes.max(1) as f64).round() as usize;
    k.clamp(1, n.saturating_sub(1).max(1))
}

/// Normalized class histogram over each sample's `k` cosine-nearest
/// neighbors (self excluded).
pub fn knn_pseudo_labels(
    h: &FeatureMatrix,
    hard: &HardLabelVector,
    k: usize,
    classes: usize,
) -> Result<PseudoLabelMatrix> {
    if hard.len() != h.n() {
        return Err(StctError::input(format!(
            "{} embeddings but {} labels",
            h.n(),
            hard.len()
        )));
    }
    if let Some(&bad) = hard.as_slice().iter().find(|&&y| y >= classes) {
        return Err(StctError::input(format!("label {bad} out of range for {classes} classes")));
    }
    let neighbors = cosine_topk_all(h, k)?;
    let mut out = Array2::zeros((h.n(), classes));
    let w = 1.0 / k as f64;
    for (i, nb) in neighbors.iter().enumerate() {
        for &j in nb {
            out[[i, hard.as_slice()[j]]] += w;
        }
    }
    Ok(PseudoLabelMatrix(out))
}

/// Per-class clean sets.
///
/// Within class `c`, samples are ranked by `-ln Yp[i][c]` and the lowest
/// `ceil(mu_hat·count_c)` are kept; samples tied with the last kept value
/// are kept too. Index lists come back sorted.
pub fn select_clean(hard: &HardLabelVector, yp: &PseudoLabelMatrix, mu_hat: f64) -> Result<Vec<Vec<usize>>> {
    if !(mu_hat > 0.0 && mu_hat <= 1.0) {
        return Err(StctError::input(format!("mu_hat = {mu_hat} must lie in (0, 1]")));
    }
    if yp.0.nrows() != hard.len() {
        return Err(StctError::input("pseudo labels and hard labels differ in length"));
    }
    let classes = yp.0.ncols();
    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); classes];
    for (i, &y) in hard.as_slice().iter().enumerate() {
        if y >= classes {
            return Err(StctError::input(format!("label {y} out of range")));
        }
        let ce = -yp.0[[i, y]].max(CE_CLAMP).ln();
        members[y].push((ce, i));
    }
    Ok(members
        .into_iter()
        .map(|mut m| {
            if m.is_empty() {
                return Vec::new();
            }
            m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let keep = ((mu_hat * m.len() as f64) - 1e-9).ceil().max(1.0) as usize;
            let keep = keep.min(m.len());
            let boundary = m[keep - 1].0;
            let mut sel: Vec<usize> = m.iter().take_while(|(ce, _)| *ce <= boundary).map(|(_, i)| *i).collect();
            sel.sort_unstable();
            sel
        })
        .collect())
}

/// Selected samples with their hardened labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub idx: Vec<usize>,
    pub features: Option<FeatureMatrix>,
    pub labels: HardLabelVector,
}

/// Remaining samples, labels discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub idx: Vec<usize>,
    pub features: Option<FeatureMatrix>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }
}

/// Splits `dataset` into the selected labeled part and the unlabeled rest.
/// Feature matrices are `None` when the corresponding side is empty.
pub fn split_labeled_unlabeled(dataset: &Dataset, selected: &[Vec<usize>]) -> Result<(LabeledSet, UnlabeledSet)> {
    let n = dataset.n();
    let mut taken = vec![false; n];
    let mut lab: Vec<usize> = Vec::new();
    for set in selected {
        for &i in set {
            if i >= n {
                return Err(StctError::input(format!("selected index {i} out of range")));
            }
            if taken[i] {
                return Err(StctError::input(format!("index {i} selected twice")));
            }
            taken[i] = true;
            lab.push(i);
        }
    }
    lab.sort_unstable();
    let unl: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    let hard = harden(&dataset.labels);
    let pick = |idx: &[usize]| (!idx.is_empty()).then(|| dataset.features.select(idx));
    Ok((
        LabeledSet {
            features: pick(&lab),
            labels: hard.select(&lab),
            idx: lab,
        },
        UnlabeledSet {
            features: pick(&unl),
            idx: unl,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::one_hot;
    use crate::oracle::naive;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unanimous_neighbors_give_one_hot() {
        let h = FeatureMatrix::new(array![[1.0, 0.0], [1.0, 0.1], [1.0, -0.1], [0.0, 1.0], [0.1, 1.0], [-0.1, 1.0]]).unwrap();
        let hard: HardLabelVector = vec![0, 0, 0, 1, 1, 1].into();
        let yp = knn_pseudo_labels(&h, &hard, 2, 2).unwrap();
        assert_eq!(yp.0.row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(yp.0.row(3).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn evenly_split_neighbors() {
        // row 0 sits between two pairs at equal angles
        let h = FeatureMatrix::new(array![[1.0, 0.0], [1.0, 1.0], [1.0, -1.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let hard: HardLabelVector = vec![0, 0, 1, 0, 1].into();
        let yp = knn_pseudo_labels(&h, &hard, 2, 2).unwrap();
        assert_eq!(yp.0.row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let hard: Vec<usize> = (0..60).map(|_| rng.random_range(0..3)).collect();
        let h = FeatureMatrix::from_rows(&rows).unwrap();
        let yp = knn_pseudo_labels(&h, &hard.clone().into(), 5, 3).unwrap();
        for i in 0..60 {
            let nb = naive::cosine_neighbors(&rows, i, 5);
            let mut counts = [0usize; 3];
            for j in nb {
                counts[hard[j]] += 1;
            }
            for c in 0..3 {
                assert!((yp.0[[i, c]] - counts[c] as f64 / 5.0).abs() < 1e-15);
            }
            assert!((yp.0.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_quantile_keeps_everyone() {
        let hard: HardLabelVector = vec![0, 1, 0, 2, 1, 0].into();
        let yp = PseudoLabelMatrix(Array2::from_elem((6, 3), 1.0 / 3.0));
        let sel = select_clean(&hard, &yp, 1.0).unwrap();
        assert_eq!(sel, vec![vec![0, 2, 5], vec![1, 4], vec![3]]);
    }

    #[test]
    fn agreeing_half_selected() {
        let hard: HardLabelVector = vec![0; 8].into();
        let agree: HardLabelVector = vec![0, 1, 0, 1, 0, 1, 0, 1].into();
        let yp = PseudoLabelMatrix(one_hot(&agree, 2).unwrap().into_inner());
        let sel = select_clean(&hard, &yp, 0.5).unwrap();
        assert_eq!(sel[0], vec![0, 2, 4, 6]);
        assert!(sel[1].is_empty());
    }

    #[test]
    fn ties_at_boundary_are_included() {
        let hard: HardLabelVector = vec![0; 4].into();
        let yp = PseudoLabelMatrix(array![[0.9, 0.1], [0.5, 0.5], [0.5, 0.5], [0.2, 0.8]]);
        let sel = select_clean(&hard, &yp, 0.5).unwrap();
        assert_eq!(sel[0], vec![0, 1, 2]);
    }

    #[test]
    fn selection_matches_sorting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let n = 80;
            let hard: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let mut yp = Array2::from_shape_fn((n, 4), |_| rng.random_range(0.0..1.0));
            for mut r in yp.rows_mut() {
                let s = r.sum();
                r.mapv_inplace(|v| v / s);
            }
            let mu_hat = rng.random_range(0.05..1.0);
            let sel = select_clean(&hard.clone().into(), &PseudoLabelMatrix(yp.clone()), mu_hat).unwrap();
            for c in 0..4 {
                let mut m: Vec<(f64, usize)> = (0..n)
                    .filter(|&i| hard[i] == c)
                    .map(|i| (-(yp[[i, c]].max(1e-12)).ln(), i))
                    .collect();
                m.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let keep = ((mu_hat * m.len() as f64) - 1e-9).ceil() as usize;
                let mut expect: Vec<usize> = m[..keep.max(1).min(m.len())].iter().map(|p| p.1).collect();
                expect.sort();
                assert_eq!(sel[c], expect);
            }
        }
    }

    #[test]
    fn empty_class_gives_empty_selection() {
        let hard: HardLabelVector = vec![0, 0].into();
        let yp = PseudoLabelMatrix(array![[1.0, 0.0, 0.0], [0.5, 0.5, 0.0]]);
        let sel = select_clean(&hard, &yp, 0.5).unwrap();
        assert!(sel[1].is_empty() && sel[2].is_empty());
        assert!(select_clean(&hard, &yp, 0.0).is_err());
    }

    fn toy_dataset(n: usize) -> Dataset {
        let f = FeatureMatrix::new(Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64 + 1.0)).unwrap();
        let l = one_hot(&(0..n).map(|i| i % 3).collect::<Vec<_>>().into(), 3).unwrap();
        Dataset::new(f, l, None, None).unwrap()
    }

    #[test]
    fn split_extremes_and_counts() {
        let ds = toy_dataset(9);
        let all = vec![vec![0, 3, 6], vec![1, 4, 7], vec![2, 5, 8]];
        let (l, u) = split_labeled_unlabeled(&ds, &all).unwrap();
        assert_eq!(l.len(), 9);
        assert!(u.is_empty() && u.features.is_none());
        assert_eq!(l.labels.0, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);

        let (l, u) = split_labeled_unlabeled(&ds, &[vec![], vec![], vec![]]).unwrap();
        assert!(l.is_empty());
        assert_eq!(u.idx, (0..9).collect::<Vec<_>>());

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let sel: Vec<Vec<usize>> = (0..3)
                .map(|c| (0..9).filter(|i| i % 3 == c && rng.random_bool(0.5)).collect())
                .collect();
            let (l, u) = split_labeled_unlabeled(&ds, &sel).unwrap();
            assert_eq!(l.len() + u.len(), 9);
        }
        assert!(split_labeled_unlabeled(&ds, &[vec![1], vec![1]]).is_err());
    }

    #[test]
    fn mu_hat_schedule() {
        let cfg = SelectionConfig { k: 5, mu: 0.1, epoch: 3 };
        assert!((cfg.mu_hat() - 0.3).abs() < 1e-12);
        assert_eq!(SelectionConfig { epoch: 20, ..cfg }.mu_hat(), 1.0);
        assert_eq!(default_k(5000, 10), 200);
        assert_eq!(default_k(3, 1), 1);
    }
}
