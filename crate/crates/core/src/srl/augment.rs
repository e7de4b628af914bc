//! Vector-domain weak and strong augmentations.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, StctError};

/// Population standard deviation of every column.
pub fn featurewise_std(x: ArrayView2<'_, f64>) -> Array1<f64> {
    if x.nrows() == 0 {
        return Array1::zeros(x.ncols());
    }
    x.std_axis(Axis(0), 0.0)
}

fn check(sigma: f64, drop_p: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(StctError::input(format!("noise scale {sigma} must be >= 0")));
    }
    if !(0.0..1.0).contains(&drop_p) {
        return Err(StctError::input(format!("dropout probability {drop_p} must lie in [0, 1)")));
    }
    Ok(())
}

/// `x + N(0, (sigma·scale)²)` per coordinate, then each coordinate zeroed
/// with probability `drop_p`.
pub fn perturb_rows(
    x: ArrayView2<'_, f64>,
    scale: &Array1<f64>,
    sigma: f64,
    drop_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    check(sigma, drop_p)?;
    if scale.len() != x.ncols() {
        return Err(StctError::input("scale vector width differs from features"));
    }
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        for (v, s) in row.iter_mut().zip(scale.iter()) {
            if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * s * z;
            }
            if drop_p > 0.0 && rng.random::<f64>() < drop_p {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Small Gaussian jitter scaled by the featurewise standard deviation.
pub fn augment_weak(x: &[f64], scale: &[f64], sigma_w: f64, seed: u64) -> Result<Vec<f64>> {
    augment_strong(x, scale, sigma_w, 0.0, seed)
}

/// Larger jitter followed by independent coordinate dropout.
pub fn augment_strong(x: &[f64], scale: &[f64], sigma_s: f64, drop_p: f64, seed: u64) -> Result<Vec<f64>> {
    let row = ArrayView2::from_shape((1, x.len()), x).expect("single row");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = perturb_rows(row, &Array1::from(scale.to_vec()), sigma_s, drop_p, &mut rng)?;
    Ok(out.into_raw_vec_and_offset().0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scale_is_identity() {
        let x = [1.0, -2.0, 3.5];
        let s = [1.0, 2.0, 0.5];
        assert_eq!(augment_weak(&x, &s, 0.0, 4).unwrap(), x.to_vec());
        assert_eq!(augment_strong(&x, &s, 0.0, 0.0, 4).unwrap(), x.to_vec());
        assert!(augment_strong(&x, &s, 0.1, 1.0, 4).is_err());
        assert!(augment_weak(&x, &s, -0.1, 4).is_err());
    }

    #[test]
    fn seeded() {
        let x = [1.0; 8];
        let s = [1.0; 8];
        assert_eq!(augment_weak(&x, &s, 0.3, 9).unwrap(), augment_weak(&x, &s, 0.3, 9).unwrap());
        assert_ne!(augment_weak(&x, &s, 0.3, 9).unwrap(), augment_weak(&x, &s, 0.3, 10).unwrap());
        assert_eq!(
            augment_strong(&x, &s, 0.3, 0.2, 9).unwrap(),
            augment_strong(&x, &s, 0.3, 0.2, 9).unwrap()
        );
    }

    #[test]
    fn weak_mean_is_unbiased() {
        let x = [0.5, -1.0, 2.0];
        let s = [1.0, 3.0, 0.2];
        let sigma = 0.05;
        let trials = 10_000;
        let mut mean = [0.0; 3];
        for t in 0..trials {
            let a = augment_weak(&x, &s, sigma, t).unwrap();
            for j in 0..3 {
                mean[j] += a[j] / trials as f64;
            }
        }
        for j in 0..3 {
            let se = sigma * s[j] / (trials as f64).sqrt();
            assert!((mean[j] - x[j]).abs() <= 3.0 * se, "coord {j}");
        }
    }

    #[test]
    fn dropout_count() {
        let x = vec![1.0; 1000];
        let s = vec![1.0; 1000];
        let mut inside = 0;
        for seed in 0..200 {
            let a = augment_strong(&x, &s, 0.0, 0.1, seed).unwrap();
            let zeros = a.iter().filter(|v| **v == 0.0).count();
            if (70..=130).contains(&zeros) {
                inside += 1;
            }
        }
        assert!(inside >= 198, "{inside}");
    }

    #[test]
    fn std_of_constant_column_is_zero() {
        let x = ndarray::array![[1.0, 2.0], [1.0, 4.0]];
        assert_eq!(featurewise_std(x.view()), ndarray::array![0.0, 1.0]);
    }
}
