//! Adaptive Simpson quadrature.

use crate::error::{Error, Result};

const MAX_DEPTH: u32 = 48;

/// Integrate `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Quadrature(format!("non-finite interval [{a}, {b}]")));
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    // Split into a few panels first so narrow features are not missed by the
    // initial five-point estimate.
    const PANELS: usize = 8;
    let h = (hi - lo) / PANELS as f64;
    let mut total = 0.0;
    for k in 0..PANELS {
        let x0 = lo + k as f64 * h;
        let x1 = if k + 1 == PANELS { hi } else { x0 + h };
        let fa = f(x0);
        let fb = f(x1);
        let m = 0.5 * (x0 + x1);
        let fm = f(m);
        let whole = simpson(x0, x1, fa, fm, fb);
        total += refine(&f, x0, x1, fa, fm, fb, whole, tol / PANELS as f64, MAX_DEPTH)?;
    }
    if !total.is_finite() {
        return Err(Error::Quadrature("integrand produced a non-finite value".into()));
    }
    Ok(sign * total)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn refine<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return Err(Error::Quadrature(format!("non-finite integrand near {m}")));
    }
    // below the rounding floor further halving cannot help
    let floor = 64.0 * f64::EPSILON * (left.abs() + right.abs());
    if delta.abs() <= 15.0 * tol.max(floor) || depth == 0 || (b - a) <= f64::EPSILON * m.abs().max(1.0) {
        return Ok(left + right + delta / 15.0);
    }
    Ok(refine(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
        + refine(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_exponential() {
        let v = integrate(|x| x * x, 0.0, 1.0, 1e-14).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-14);
        let v = integrate(f64::exp, 0.0, 2.0, 1e-13).unwrap();
        assert!((v - (2f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn reversed_interval_changes_sign() {
        let a = integrate(|x| x.sin(), 0.0, 1.0, 1e-12).unwrap();
        let b = integrate(|x| x.sin(), 1.0, 0.0, 1e-12).unwrap();
        assert_eq!(a, -b);
    }

    #[test]
    fn non_finite_integrand_is_an_error() {
        assert!(integrate(|x| 1.0 / x, -1.0, 1.0, 1e-10).is_err());
    }
}
