//! Adaptive Gauss–Kronrod integration on finite intervals.

use num_complex::Complex64;

use crate::error::{Result, TomoError};

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];

const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];

// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F: FnMut(f64) -> Complex64>(f: &mut F, a: f64, b: f64) -> (Complex64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += s * WGK[j];
        if j % 2 == 1 {
            gauss += s * WG[j / 2];
        }
    }
    let est = kron * h;
    let err = ((kron - gauss) * h).norm();
    (est, err)
}

/// Integrates `f` over `[a, b]` by bisecting the interval with the largest
/// error estimate until the total estimate falls below
/// `max(abs_tol, rel_tol * |I|)`.
pub fn integrate<F: FnMut(f64) -> Complex64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Result<Complex64> {
    let (est, err) = gk15(&mut f, a, b);
    let mut intervals = vec![(a, b, est, err)];
    loop {
        let total: Complex64 = intervals.iter().map(|iv| iv.2).sum();
        let total_err: f64 = intervals.iter().map(|iv| iv.3).sum();
        if !total.re.is_finite() || !total.im.is_finite() {
            return Err(TomoError::Convergence("integrand not finite".into()));
        }
        if total_err <= abs_tol.max(rel_tol * total.norm()) {
            return Ok(total);
        }
        if intervals.len() >= max_intervals {
            return Err(TomoError::Convergence(format!(
                "quadrature error {total_err:e} after {max_intervals} subintervals"
            )));
        }
        let (worst, _) = intervals.iter().enumerate().max_by(|x, y| x.1 .3.total_cmp(&y.1 .3)).expect("non-empty");
        let (lo, hi, _, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (e1, r1) = gk15(&mut f, lo, mid);
        let (e2, r2) = gk15(&mut f, mid, hi);
        intervals.push((lo, mid, e1, r1));
        intervals.push((mid, hi, e2, r2));
    }
}

/// Real-valued convenience wrapper.
pub fn integrate_real<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Result<f64> {
    integrate(|x| Complex64::new(f(x), 0.0), a, b, abs_tol, rel_tol, max_intervals).map(|c| c.re)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_oscillatory() {
        let v = integrate_real(|x| x.powi(5) - 2.0 * x, 0.0, 2.0, 1e-14, 1e-14, 10).unwrap();
        assert!((v - (64.0 / 6.0 - 4.0)).abs() < 1e-12);
        let v = integrate(|x| Complex64::from_polar(1.0, 40.0 * x), 0.0, 1.0, 1e-13, 1e-13, 500).unwrap();
        let want = (Complex64::from_polar(1.0, 40.0) - 1.0) / Complex64::new(0.0, 40.0);
        assert!((v - want).norm() < 1e-12);
    }

    #[test]
    fn reports_failure() {
        let r = integrate_real(|x| 1.0 / x.sqrt().max(1e-300), 0.0, 1.0, 1e-15, 0.0, 3);
        assert!(matches!(r, Err(TomoError::Convergence(_))));
    }
}
