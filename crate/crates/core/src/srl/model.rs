use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{FeatureMatrix, SoftLabelMatrix};
use crate::error::{Result, StctError};
use crate::numerics::softmax_in_place;

/// Affine map `x W + b`, with `W` stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    fn xavier(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Layer {
            w: Array2::from_shape_fn((input, output), |_| rng.random_range(-bound..bound)),
            b: Array1::zeros(output),
        }
    }

    fn zeros_like(&self) -> Self {
        Layer {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    // Adds the parameter gradient for input `x` and output gradient `g`,
    // returns the input gradient.
    fn accumulate(&self, x: ArrayView2<'_, f64>, g: &Array2<f64>, into: &mut Layer) -> Array2<f64> {
        into.w += &x.t().dot(g);
        into.b += &g.sum_axis(Axis(0));
        g.dot(&self.w.t())
    }
}

/// Tanh MLP encoder with a softmax classification head and a
/// unit-normalized projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct SrlModel {
    pub encoder: Vec<Layer>,
    pub cls: Layer,
    pub proj: Layer,
}

/// Parameter gradients share the model layout.
pub type Gradients = SrlModel;

pub(crate) struct Forward {
    /// Input followed by every encoder activation.
    pub acts: Vec<Array2<f64>>,
    pub probs: Array2<f64>,
    pub proj_norm: Array1<f64>,
    pub z: Array2<f64>,
}

impl Forward {
    pub fn embedding(&self) -> &Array2<f64> {
        self.acts.last().expect("input is always present")
    }
}

impl SrlModel {
    /// `input → hidden[0] → … → hidden[last]` encoder, heads on top.
    pub fn new(input: usize, hidden: &[usize], classes: usize, proj_dim: usize, seed: u64) -> Result<Self> {
        if input == 0 || classes == 0 || proj_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(StctError::input(format!(
                "bad architecture: input {input}, hidden {hidden:?}, classes {classes}, projection {proj_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(hidden.len());
        let mut prev = input;
        for &h in hidden {
            encoder.push(Layer::xavier(prev, h, &mut rng));
            prev = h;
        }
        let cls = Layer::xavier(prev, classes, &mut rng);
        let proj = Layer::xavier(prev, proj_dim, &mut rng);
        Ok(SrlModel { encoder, cls, proj })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].w.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.cls.w.nrows()
    }

    pub fn classes(&self) -> usize {
        self.cls.w.ncols()
    }

    pub fn proj_dim(&self) -> usize {
        self.proj.w.ncols()
    }

    pub(crate) fn zeros_like(&self) -> Gradients {
        SrlModel {
            encoder: self.encoder.iter().map(Layer::zeros_like).collect(),
            cls: self.cls.zeros_like(),
            proj: self.proj.zeros_like(),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder.iter().chain([&self.cls, &self.proj])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.encoder.iter_mut().chain([&mut self.cls, &mut self.proj])
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    /// Copy of the model with parameters replaced from [`SrlModel::flatten`] order.
    pub fn with_flat(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.num_params() {
            return Err(StctError::input(format!(
                "{} parameters given, model has {}",
                theta.len(),
                self.num_params()
            )));
        }
        let mut m = self.clone();
        let mut it = theta.iter();
        for l in m.layers_mut() {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(m)
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub(crate) fn for_each_param_mut(&mut self, other: &Gradients, mut f: impl FnMut(&mut f64, f64)) {
        for (l, g) in self.layers_mut().zip(other.layers()) {
            for (v, gv) in l.w.iter_mut().zip(g.w.iter()) {
                f(v, *gv);
            }
            for (v, gv) in l.b.iter_mut().zip(g.b.iter()) {
                f(v, *gv);
            }
        }
    }

    /// Encoder output `f_enc(x)`.
    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for l in &self.encoder {
            a = l.apply(a.view()).mapv_into(f64::tanh);
        }
        a
    }

    pub(crate) fn forward(&self, x: ArrayView2<'_, f64>) -> Forward {
        let mut acts = Vec::with_capacity(self.encoder.len() + 1);
        acts.push(x.to_owned());
        for l in &self.encoder {
            let a = l.apply(acts.last().expect("nonempty").view()).mapv_into(f64::tanh);
            acts.push(a);
        }
        let h = acts.last().expect("nonempty").view();
        let mut probs = self.cls.apply(h);
        for mut row in probs.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("standard layout"), 1.0);
        }
        let mut z = self.proj.apply(h);
        let mut proj_norm = Array1::zeros(z.nrows());
        for (mut row, nrm) in z.rows_mut().into_iter().zip(proj_norm.iter_mut()) {
            *nrm = row.dot(&row).sqrt().max(1e-12);
            row /= *nrm;
        }
        Forward {
            acts,
            probs,
            proj_norm,
            z,
        }
    }

    /// Backpropagates gradients with respect to the classification logits
    /// and the normalized projections, adding parameter gradients to `grads`.
    pub(crate) fn backward(&self, fwd: &Forward, g_logits: Option<&Array2<f64>>, g_z: Option<&Array2<f64>>, grads: &mut Gradients) {
        let h = fwd.embedding().view();
        let mut g_h: Array2<f64> = Array2::zeros(h.raw_dim());
        if let Some(g) = g_logits {
            g_h += &self.cls.accumulate(h, g, &mut grads.cls);
        }
        if let Some(gz) = g_z {
            // d(u/|u|) = (I − z zᵀ)/|u|
            let mut g_u = gz.clone();
            for ((mut gu, z), nrm) in g_u.rows_mut().into_iter().zip(fwd.z.rows()).zip(fwd.proj_norm.iter()) {
                let dot = gu.dot(&z);
                gu.scaled_add(-dot, &z);
                gu /= *nrm;
            }
            g_h += &self.proj.accumulate(h, &g_u, &mut grads.proj);
        }
        let mut g_a = g_h;
        for (k, l) in self.encoder.iter().enumerate().rev() {
            let a = &fwd.acts[k + 1];
            let g_pre = g_a * &a.mapv(|v| 1.0 - v * v);
            g_a = l.accumulate(fwd.acts[k].view(), &g_pre, &mut grads.encoder[k]);
        }
    }

    /// Class probabilities `g_cls(f_enc(x))`, no augmentation.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<SoftLabelMatrix> {
        if x.d() != self.input_dim() {
            return Err(StctError::input(format!(
                "model expects {} features, got {}",
                self.input_dim(),
                x.d()
            )));
        }
        SoftLabelMatrix::new(self.forward(x.view()).probs)
            .map_err(|_| StctError::Divergence("model produced non-finite probabilities".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::harden;

    fn scalar_forward(m: &SrlModel, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in &m.encoder {
            a = (0..l.w.ncols())
                .map(|j| (l.b[j] + (0..a.len()).map(|i| a[i] * l.w[[i, j]]).sum::<f64>()).tanh())
                .collect();
        }
        (0..m.cls.w.ncols())
            .map(|j| m.cls.b[j] + (0..a.len()).map(|i| a[i] * m.cls.w[[i, j]]).sum::<f64>())
            .collect()
    }

    #[test]
    fn predict_matches_scalar_forward() {
        let m = SrlModel::new(5, &[7, 4], 3, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((40, 5), |_| rng.random_range(-3.0..3.0));
        let p = m.predict(&FeatureMatrix::new(x.clone()).unwrap()).unwrap();
        for r in p.view().rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let hard = harden(&p);
        for (i, row) in x.rows().into_iter().enumerate() {
            let logits = scalar_forward(&m, &row.to_vec());
            let arg = (0..3).max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a))).unwrap();
            assert_eq!(hard.as_slice()[i], arg);
        }
        assert_eq!(p, m.predict(&FeatureMatrix::new(x).unwrap()).unwrap());
    }

    #[test]
    fn projections_are_unit() {
        let m = SrlModel::new(4, &[6], 3, 5, 3).unwrap();
        let x = Array2::from_shape_fn((10, 4), |(i, j)| (i * 4 + j) as f64 * 0.1 - 1.0);
        let f = m.forward(x.view());
        for r in f.z.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let m = SrlModel::new(3, &[4, 2], 2, 2, 0).unwrap();
        let theta = m.flatten();
        assert_eq!(theta.len(), m.num_params());
        assert_eq!(m.with_flat(&theta).unwrap(), m);
        assert!(m.with_flat(&theta[1..]).is_err());
        assert!(SrlModel::new(3, &[], 2, 2, 0).is_err());
    }
}
