//! Hutchinson estimate of the squared Frobenius norm of a Jacobian.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Mean over `n_samples` draws `eps ~ N(0, I_d)` of `||eps^T J||^2 / d`.
/// `f_vjp` maps `eps` to `eps^T J`.
pub fn hutchinson_penalty<F, R>(mut f_vjp: F, d: usize, n_samples: usize, rng: &mut R) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    if d == 0 || n_samples == 0 {
        return Err(Error::Config("penalty needs d >= 1 and at least one sample".into()));
    }
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let w = f_vjp(&eps)?;
        let sq: f64 = w.iter().map(|v| v * v).sum();
        if !sq.is_finite() {
            return Err(Error::Numeric("Jacobian penalty".into()));
        }
        acc += sq / d as f64;
    }
    Ok(acc / n_samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_jacobian_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let p = hutchinson_penalty(|e| Ok(vec![0.0; e.len()]), 8, 1, &mut rng).unwrap();
            assert_eq!(p, 0.0);
        }
    }

    #[test]
    fn identity_jacobian_has_unit_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = hutchinson_penalty(|e| Ok(e.to_vec()), 32, 10_000, &mut rng).unwrap();
        assert!((p - 1.0).abs() < 0.03, "{p}");
    }

    #[test]
    fn rejects_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(hutchinson_penalty(|e| Ok(e.to_vec()), 0, 1, &mut rng).is_err());
    }
}
