//! Dense complex linear-algebra helpers shared by the physics modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{EspError, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
pub const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };
pub const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Thin singular value decomposition `A = U diag(s) Vᴴ`, singular values
/// sorted descending. The largest-magnitude entry of each right singular
/// vector is made real-positive; the left vector carries the same phase.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: CMat,
    pub s: Vec<f64>,
    pub v: CMat,
}

pub fn svd(a: &CMat) -> Svd {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Svd {
            u: CMat::zeros(m, 0),
            s: vec![],
            v: CMat::zeros(n, 0),
        };
    }
    let dec = a.clone().svd(true, true);
    let u = dec.u.expect("left vectors requested");
    let v = dec.v_t.expect("right vectors requested").adjoint();
    let mut order: Vec<usize> = (0..dec.singular_values.len()).collect();
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));

    let r = order.len();
    let mut uo = CMat::zeros(m, r);
    let mut vo = CMat::zeros(n, r);
    let mut s = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        let vc = v.column(src);
        let (imax, _) =
            vc.iter().enumerate().fold(
                (0, -1.0),
                |(bi, bv), (i, c)| if c.norm() > bv + 1e-14 { (i, c.norm()) } else { (bi, bv) },
            );
        let pivot = vc[imax];
        let phase = if pivot.norm() > 0.0 {
            pivot.conj() / pivot.norm()
        } else {
            ONE
        };
        vo.set_column(dst, &(vc * phase));
        uo.set_column(dst, &(u.column(src) * phase));
        s.push(dec.singular_values[src]);
    }
    Svd { u: uo, s, v: vo }
}

/// Extends the orthonormal columns of `q` (m×r, r ≤ m) to a full m×m unitary.
pub fn complete_basis(q: &CMat) -> CMat {
    let (m, r) = q.shape();
    if r >= m {
        return q.clone();
    }
    let mut aug = CMat::zeros(m, r + m);
    aug.view_mut((0, 0), (m, r)).copy_from(q);
    aug.view_mut((0, r), (m, m)).copy_from(&CMat::identity(m, m));
    let mut full = aug.qr().q();
    full.view_mut((0, 0), (m, r)).copy_from(q);
    // re-orthogonalise the completion against the fixed block
    for c in r..m {
        let mut col = full.column(c).into_owned();
        for p in 0..c {
            let basis = full.column(p).into_owned();
            let proj = basis.dotc(&col);
            col -= basis * proj;
        }
        let nrm = col.norm();
        full.set_column(c, &(col / Complex64::from(nrm)));
    }
    full
}

/// Full SVD: unitary `U` (m×m), `V` (n×n) and min(m, n) singular values.
pub fn full_svd(a: &CMat) -> Svd {
    let thin = svd(a);
    Svd {
        u: complete_basis(&thin.u),
        v: complete_basis(&thin.v),
        s: thin.s,
    }
}

pub fn frobenius(a: &CMat) -> f64 {
    a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// 2-norm condition number from the singular values.
pub fn condition_number(a: &CMat) -> f64 {
    let s = svd(a).s;
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Solves `A X = B` by LU. Fails with a condition-number report when `A` is
/// numerically singular.
pub fn solve(a: &CMat, b: &CMat) -> Result<CMat> {
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(EspError::DimensionMismatch(format!(
            "solve: A is {:?}, B is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let lu = a.clone().lu();
    let x = lu.solve(b);
    match x {
        Some(x) if x.iter().all(|c| c.re.is_finite() && c.im.is_finite()) => {
            let cond = rcond_estimate(a, &x, b);
            if cond > 1e14 {
                return Err(EspError::NearResonance { cond });
            }
            Ok(x)
        }
        _ => Err(EspError::NearResonance {
            cond: condition_number(a),
        }),
    }
}

// Cheap singularity screen: ‖A‖‖X‖/‖B‖ lower-bounds cond(A) for the solved
// right-hand sides; only the full SVD is reported when it trips.
fn rcond_estimate(a: &CMat, x: &CMat, b: &CMat) -> f64 {
    let nb = frobenius(b);
    if nb == 0.0 {
        return 1.0;
    }
    let est = frobenius(a) * frobenius(x) / nb;
    if est > 1e12 {
        condition_number(a)
    } else {
        est
    }
}

/// Max-abs deviation of `AᴴA` from the identity.
pub fn unitarity_error(a: &CMat) -> f64 {
    let g = a.adjoint() * a;
    let n = g.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for k in 0..n {
            let target = if i == k { ONE } else { ZERO };
            worst = worst.max((g[(i, k)] - target).norm());
        }
    }
    worst
}

/// Circularly-symmetric complex Gaussian sample with the given variance.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

pub fn complex_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, variance: f64) -> CVec {
    CVec::from_iterator(n, (0..n).map(|_| complex_normal(rng, variance)))
}

/// Haar-distributed n×n unitary (QR of a Ginibre matrix with the diagonal
/// phase correction).
pub fn random_unitary<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CMat {
    let g = CMat::from_fn(n, n, |_, _| complex_normal(rng, 1.0));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..n {
        let d = r[(c, c)];
        if d.norm() > 0.0 {
            let ph = d / d.norm();
            let col = q.column(c) * ph;
            q.set_column(c, &col);
        }
    }
    q
}

/// `r` Haar-distributed orthonormal columns in `C^n` (thin QR of a Ginibre
/// matrix with the diagonal phase correction).
pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, n: usize, r: usize) -> CMat {
    assert!(r <= n, "cannot draw {r} orthonormal columns in dimension {n}");
    let g = CMat::from_fn(n, r, |_, _| complex_normal(rng, 1.0));
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for c in 0..r {
        let d = rr[(c, c)];
        if d.norm() > 0.0 {
            let col = q.column(c) * (d / d.norm());
            q.set_column(c, &col);
        }
    }
    q
}

/// Random point on the complex unit sphere in `C^n`.
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CVec {
    let v = complex_normal_vec(rng, n, 1.0);
    let nrm = v.norm();
    v / Complex64::from(nrm)
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_phase(theta: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let w = theta.rem_euclid(tau);
    if w >= tau {
        0.0
    } else {
        w
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_pm_pi(theta: f64) -> f64 {
    let pi = std::f64::consts::PI;
    wrap_phase(theta + pi) - pi
}
