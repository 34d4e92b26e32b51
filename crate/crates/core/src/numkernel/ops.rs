//! Value-level primitives shared by inference and by the tape's forward pass.

use super::tensor::{check_dims, dot, norm, Vector};
use super::KernelError;

/// Norm below which a vector has no direction.
pub const NORM_EPS: f64 = 1e-12;

/// Floor applied to the second argument of [`kl_div`] before the log.
pub const KL_CLAMP: f64 = 1e-12;

pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64, KernelError> {
    check_dims(x.len(), y.len())?;
    let nx = norm(x);
    let ny = norm(y);
    if nx <= NORM_EPS || ny <= NORM_EPS {
        return Err(KernelError::ZeroNormVector);
    }
    Ok(dot(x, y) / (nx * ny))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Vector::from(exps.into_iter().map(|e| e / total).collect::<Vec<_>>())
}

/// `KL(p || q)` with `0·ln 0 = 0` and `q` clamped at [`KL_CLAMP`].
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64, KernelError> {
    check_dims(p.len(), q.len())?;
    Ok(p.iter().zip(q).map(|(&pi, &qi)| kl_term(pi, qi)).sum())
}

pub(crate) fn kl_term(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (p.ln() - q.max(KL_CLAMP).ln())
    } else {
        0.0
    }
}

/// Squared Euclidean distance, summed over components (not averaged).
pub fn mse(x: &[f64], y: &[f64]) -> Result<f64, KernelError> {
    check_dims(x.len(), y.len())?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let expected = 1.0 / 2f64.sqrt();
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.7071067811865475).abs() < 1e-15);
        assert!((expected - 0.7071067811865475).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(KernelError::ZeroNormVector)));
        assert!(matches!(cosine_sim(&[1.0, 0.0], &[1e-13, 0.0]), Err(KernelError::ZeroNormVector)));
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 0.0]),
            Err(KernelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(&*softmax(&[0.0; 4]), &[0.25; 4]);
        let e = 1f64.exp();
        let s = softmax(&[1.0, 0.0]);
        assert!((s[0] - e / (e + 1.0)).abs() < 1e-16);
        assert!((s[0] - 0.7310585786300049).abs() < 1e-15);
        assert!((s[1] - 0.2689414213699951).abs() < 1e-15);
        for c in [-30.0, 0.0, 2.5, 41.0] {
            let s = softmax(&[c, c + 3f64.ln()]);
            assert!((s[0] - 0.25).abs() < 1e-12 && (s[1] - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_div(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert!((kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 0.6931471805599453).abs() < 1e-15);
        assert_eq!(kl_div(&[0.25, 0.75], &[0.25, 0.75]).unwrap(), 0.0);
        assert!(kl_div(&[1.0], &[0.5, 0.5]).is_err());
        // clamped log keeps a zero q finite
        assert!(kl_div(&[1.0, 0.0], &[0.0, 1.0]).unwrap().is_finite());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(mse(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 25.0);
        assert!(mse(&[1.0], &[]).is_err());
    }
}
