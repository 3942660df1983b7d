//! Rectangle probabilities P(a <= X <= b) for a zero-mean multivariate
//! normal with unit variances, exact to quadrature tolerance in up to three
//! constrained dimensions.
//!
//! Dimensions left unconstrained (both limits infinite) marginalise out by
//! dropping their rows and columns. Two and three dimensions reduce to one
//! and two by conditioning on the first coordinate; the outer integral is
//! adaptive Gauss-Kronrod over the clamped support.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::math::{normal, quad};

/// Most constrained dimensions the exact evaluator accepts.
pub const MAX_EXACT_DIM: usize = 3;

/// Integration limits are clamped here; the discarded tail mass is below
/// 1.1e-21 per side, far under any tolerance we run at.
const Z_CLAMP: f64 = 9.5;

/// Treat |rho| above this as a degenerate (comonotone) pair.
const RHO_DEGENERATE: f64 = 1.0 - 1e-12;

/// P(lower <= X <= upper) for X ~ N(0, corr) with unit diagonal.
///
/// `tol` is an absolute tolerance passed to the quadrature. Infinite limits
/// are allowed; a dimension bounded on neither side is marginalised out and
/// an empty interval yields 0.
pub fn rect_prob(corr: &DMatrix<f64>, lower: &[f64], upper: &[f64], tol: f64) -> Result<f64> {
    let n = lower.len();
    if upper.len() != n || corr.nrows() != n || corr.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "rect_prob: corr {}x{}, lower {}, upper {}",
            corr.nrows(),
            corr.ncols(),
            n,
            upper.len()
        )));
    }
    for i in 0..n {
        if (corr[(i, i)] - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "rect_prob: corr[{i},{i}] = {} is not a unit variance",
                corr[(i, i)]
            )));
        }
        if lower[i].is_nan() || upper[i].is_nan() {
            return Err(Error::InvalidParameter(format!("rect_prob: NaN limit at {i}")));
        }
    }

    for i in 0..n {
        if lower[i] >= upper[i] {
            return Ok(0.0);
        }
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| !(lower[i] == f64::NEG_INFINITY && upper[i] == f64::INFINITY))
        .collect();
    let m = keep.len();
    if m == 0 {
        return Ok(1.0);
    }
    if m > MAX_EXACT_DIM {
        return Err(Error::TooManyDimensions { got: m, max: MAX_EXACT_DIM });
    }

    let a: Vec<f64> = keep.iter().map(|&i| lower[i]).collect();
    let b: Vec<f64> = keep.iter().map(|&i| upper[i]).collect();
    let sub = DMatrix::from_fn(m, m, |r, c| corr[(keep[r], keep[c])]);

    if (0..m).all(|r| (0..m).all(|c| r == c || sub[(r, c)].abs() < 1e-14)) {
        return Ok((0..m).map(|i| phi_diff(a[i], b[i])).product());
    }

    Ok(match m {
        1 => phi_diff(a[0], b[0]),
        2 => rect2(a[0], b[0], a[1], b[1], sub[(0, 1)], tol),
        3 => rect3(&a, &b, &sub, tol),
        _ => unreachable!(),
    })
}

fn phi_diff(a: f64, b: f64) -> f64 {
    (normal::cdf(b) - normal::cdf(a)).max(0.0)
}

fn clamp_lo(a: f64) -> f64 {
    a.max(-Z_CLAMP)
}

fn clamp_hi(b: f64) -> f64 {
    b.min(Z_CLAMP)
}

/// Points where the conditional factor for an inner dimension starts or
/// stops moving: the x at which `(limit - slope·x) / s` crosses the clamp
/// band. Outside those, the factor is flat at 0 or 1 and panels are trivial.
fn transition_points(pts: &mut Vec<f64>, limit: f64, slope: f64, s: f64) {
    if slope.abs() < 1e-14 || !limit.is_finite() {
        return;
    }
    pts.push((limit - Z_CLAMP * s) / slope);
    pts.push((limit + Z_CLAMP * s) / slope);
}

/// Sorted seed points for the outer integral: the interval ends plus every
/// interior feature location.
fn seed_points(lo: f64, hi: f64, mut interior: Vec<f64>) -> Vec<f64> {
    interior.retain(|x| *x > lo && *x < hi);
    interior.push(lo);
    interior.push(hi);
    interior.sort_by(|p, q| p.partial_cmp(q).unwrap());
    interior.dedup_by(|p, q| (*p - *q).abs() <= 1e-12 * (p.abs() + q.abs() + 1.0));
    interior
}

fn rect2(a1: f64, b1: f64, a2: f64, b2: f64, rho: f64, tol: f64) -> f64 {
    if rho.abs() >= RHO_DEGENERATE {
        // X2 = sign(rho) X1 almost surely: intersect the two intervals.
        let (c, d) = if rho > 0.0 { (a2 / rho, b2 / rho) } else { (b2 / rho, a2 / rho) };
        return phi_diff(a1.max(c), b1.min(d));
    }
    let s = (1.0 - rho * rho).sqrt();
    let f = |x: f64| {
        normal::pdf(x) * (normal::cdf((b2 - rho * x) / s) - normal::cdf((a2 - rho * x) / s))
    };
    let mut interior = vec![0.0];
    transition_points(&mut interior, a2, rho, s);
    transition_points(&mut interior, b2, rho, s);
    let pts = seed_points(clamp_lo(a1), clamp_hi(b1), interior);
    quad::integrate_seeded(&f, &pts, 0.5 * tol, 1).clamp(0.0, 1.0)
}

fn rect3(a: &[f64], b: &[f64], corr: &DMatrix<f64>, tol: f64) -> f64 {
    // Condition on the first coordinate: (X2, X3) | X1 = x is normal with
    // mean (r21 x, r31 x) and covariance C = Sigma_22 - r r^T.
    let r21 = corr[(0, 1)];
    let r31 = corr[(0, 2)];
    let r23 = corr[(1, 2)];
    let c11 = (1.0 - r21 * r21).max(1e-300);
    let c22 = (1.0 - r31 * r31).max(1e-300);
    let c12 = r23 - r21 * r31;
    let s1 = c11.sqrt();
    let s2 = c22.sqrt();
    let rr = (c12 / (s1 * s2)).clamp(-1.0, 1.0);

    let inner_tol = 0.25 * tol;
    let f = |x: f64| {
        normal::pdf(x)
            * rect2(
                (a[1] - r21 * x) / s1,
                (b[1] - r21 * x) / s1,
                (a[2] - r31 * x) / s2,
                (b[2] - r31 * x) / s2,
                rr,
                inner_tol,
            )
    };
    let mut interior = vec![0.0];
    transition_points(&mut interior, a[1], r21, s1);
    transition_points(&mut interior, b[1], r21, s1);
    transition_points(&mut interior, a[2], r31, s2);
    transition_points(&mut interior, b[2], r31, s2);
    let pts = seed_points(clamp_lo(a[0]), clamp_hi(b[0]), interior);
    quad::integrate_seeded(&f, &pts, 0.5 * tol, 1).clamp(0.0, 1.0)
}
