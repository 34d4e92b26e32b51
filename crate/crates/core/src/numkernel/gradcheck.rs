//! Central finite-difference comparison for tape gradients.

use super::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    /// Finite-difference step.
    pub step: f64,
    /// Bound on `‖a − n‖ / max(‖a‖, ‖n‖)` per parameter tensor.
    pub relative: f64,
    /// Bound on `‖a − n‖` for tensors whose gradient norm is at or below `magnitude_floor`.
    pub absolute: f64,
    pub magnitude_floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { step: 1e-5, relative: 1e-4, absolute: 1e-7, magnitude_floor: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    /// Which parameter tensor.
    pub param: usize,
    /// Flat row-major index of the entry with the largest disagreement.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Norm-wise relative error of the whole tensor.
    pub relative_error: f64,
    /// `max(‖a‖, ‖n‖)`.
    pub scale: f64,
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every entry of every parameter.
pub fn numeric_gradient<F>(mut f: F, params: &[Tensor2], step: f64) -> Vec<Tensor2>
where
    F: FnMut(&[Tensor2]) -> f64,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let (r, c) = params[p].shape();
        let mut g = Tensor2::zeros(r, c);
        for i in 0..r * c {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = f(&work);
            work[p].data_mut()[i] = orig - step;
            let down = f(&work);
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Every parameter tensor whose analytic and numeric gradients disagree beyond `tol`.
///
/// Entry-wise relative error is dominated by finite-difference roundoff once an
/// entry falls near `ε·|f| / h`, so the comparison is made per tensor in L2 norm.
pub fn compare(analytic: &[Tensor2], numeric: &[Tensor2], tol: &Tolerance) -> Vec<Mismatch> {
    let mut bad = Vec::new();
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let (mut worst, mut worst_diff) = (0, -1.0);
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let d = (av - nv).abs();
            diff2 += d * d;
            a2 += av * av;
            n2 += nv * nv;
            if d > worst_diff || d.is_nan() {
                (worst, worst_diff) = (i, d);
            }
        }
        let (diff, scale) = (diff2.sqrt(), a2.sqrt().max(n2.sqrt()));
        let relative_error = if scale > 0.0 { diff / scale } else { 0.0 };
        let ok = if scale > tol.magnitude_floor { relative_error <= tol.relative } else { diff <= tol.absolute };
        if !ok || !a2.is_finite() {
            let (analytic, numeric) = a.data().get(worst).zip(n.data().get(worst)).map_or((0.0, 0.0), |(x, y)| (*x, *y));
            bad.push(Mismatch { param: p, index: worst, analytic, numeric, relative_error, scale });
        }
    }
    bad
}
