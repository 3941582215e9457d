//! Degrees of freedom of radiating apertures and of paraxial links, and the
//! DFT beam codebook of a half-wavelength ULA.
//!
//! Counts are per polarization. Formula results are returned unrounded; use
//! [`DofResult::rounded`] when an integer mode count is needed.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::em::Medium;
use crate::linalg::CMat;
use crate::{EspError, Result};

/// Relative slack on lattice-membership tests so that points lying exactly
/// on the boundary are not lost to rounding.
const BOUNDARY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ApertureGeometry {
    Segment { length: f64 },
    Rectangle { lx: f64, ly: f64 },
    Box { lx: f64, ly: f64, lz: f64 },
}

impl ApertureGeometry {
    pub fn square(side: f64) -> Self {
        Self::Rectangle { lx: side, ly: side }
    }

    pub fn cube(side: f64) -> Self {
        Self::Box {
            lx: side,
            ly: side,
            lz: side,
        }
    }

    fn lengths(&self) -> Vec<f64> {
        match *self {
            Self::Segment { length } => vec![length],
            Self::Rectangle { lx, ly } => vec![lx, ly],
            Self::Box { lx, ly, lz } => vec![lx, ly, lz],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths().iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(EspError::param("geometry", "all lengths must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinkGeometry {
    /// Two parallel, centre-aligned segments of lengths `lt`, `lr` at distance `d`.
    Segments { lt: f64, lr: f64, d: f64 },
    /// Two parallel, centre-aligned squares of areas `at`, `ar` at distance `d`.
    Squares { at: f64, ar: f64, d: f64 },
}

impl LinkGeometry {
    pub fn distance(&self) -> f64 {
        match *self {
            Self::Segments { d, .. } | Self::Squares { d, .. } => d,
        }
    }

    /// Paraxial regime marker: receiver extent small compared with the distance.
    pub fn is_paraxial(&self) -> bool {
        match *self {
            Self::Segments { lt, lr, d } => lt.max(lr) < d,
            Self::Squares { at, ar, d } => at.max(ar).sqrt() < d,
        }
    }

    /// `ζ = Lr / sqrt(4d² + Lr²)`, with `Lr = sqrt(Ar)` for squares.
    pub fn zeta(&self) -> f64 {
        let (lr, d) = match *self {
            Self::Segments { lr, d, .. } => (lr, d),
            Self::Squares { ar, d, .. } => (ar.sqrt(), d),
        };
        lr / (4.0 * d * d + lr * lr).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let vals = match *self {
            Self::Segments { lt, lr, d } => [lt, lr, d],
            Self::Squares { at, ar, d } => [at, ar, d],
        };
        if vals.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(EspError::param(
                "geometry",
                "lengths, areas and distance must be finite and > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofMethod {
    Formula,
    Lattice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkMethod {
    Classic,
    Corrected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DofResult {
    pub value: f64,
    pub lattice_count: Option<u64>,
    pub method: DofMethod,
}

impl DofResult {
    fn formula(value: f64) -> Self {
        Self {
            value,
            lattice_count: None,
            method: DofMethod::Formula,
        }
    }

    fn lattice(count: u64) -> Self {
        Self {
            value: count as f64,
            lattice_count: Some(count),
            method: DofMethod::Lattice,
        }
    }

    /// Integer mode count, rounding half up.
    pub fn rounded(&self) -> u64 {
        (self.value + 0.5).floor().max(0.0) as u64
    }

    /// Scales the per-polarization count to `n` polarizations.
    pub fn with_polarizations(self, n: u32) -> Self {
        Self {
            value: self.value * n as f64,
            lattice_count: self.lattice_count.map(|c| c * n as u64),
            method: self.method,
        }
    }
}

/// Degrees of freedom of the field radiated into unbounded space by a
/// current distribution confined to `geometry`.
pub fn dof_unbounded(geometry: &ApertureGeometry, medium: &Medium, method: DofMethod) -> Result<DofResult> {
    geometry.validate()?;
    let lam = medium.wavelength();
    if geometry.lengths().iter().any(|&l| l < 4.0 * lam) {
        log::warn!("aperture side below 4 wavelengths; DoF formulas assume L >> lambda");
    }
    match method {
        DofMethod::Formula => formula_unbounded(geometry, lam),
        DofMethod::Lattice => Ok(DofResult::lattice(lattice_unbounded(geometry, lam))),
    }
}

fn formula_unbounded(geometry: &ApertureGeometry, lam: f64) -> Result<DofResult> {
    match *geometry {
        ApertureGeometry::Segment { length } => Ok(DofResult::formula(2.0 * length / lam)),
        ApertureGeometry::Rectangle { lx, ly } if lx == ly => Ok(DofResult::formula(PI * lx * lx / (lam * lam))),
        ApertureGeometry::Box { lx, ly, lz } if lx == ly && ly == lz => {
            Ok(DofResult::formula(PI / 3.0 + 4.0 * PI * lx * lx / (lam * lam)))
        }
        _ => Err(EspError::Unsupported(
            "closed-form DoF exists for squares and cubes only; use the lattice method".into(),
        )),
    }
}

fn lattice_unbounded(geometry: &ApertureGeometry, lam: f64) -> u64 {
    match *geometry {
        ApertureGeometry::Segment { length } => {
            let nmax = (length / lam * (1.0 + BOUNDARY_SLACK)).floor() as u64;
            2 * nmax + 1
        }
        ApertureGeometry::Rectangle { lx, ly } => {
            let (ax, ay) = (lx / lam, ly / lam);
            let nx_max = (ax * (1.0 + BOUNDARY_SLACK)).floor() as i64;
            let mut count = 0u64;
            for nx in -nx_max..=nx_max {
                let fx = nx as f64 / ax;
                let rem = 1.0 - fx * fx;
                if rem < -BOUNDARY_SLACK {
                    continue;
                }
                let ny_max = (ay * rem.max(0.0).sqrt() * (1.0 + BOUNDARY_SLACK) + BOUNDARY_SLACK).floor() as i64;
                count += (2 * ny_max + 1) as u64;
            }
            count
        }
        ApertureGeometry::Box { lx, ly, lz } => {
            // Shell |k| in [k0 - δ/2, k0 + δ/2] with δ = 2π/L; in index units
            // (k_i = 2π n_i / L_i) the radius is L/λ and the half-thickness 1/2
            // for a cube. Unequal sides use the geometric-mean side for δ.
            let side = (lx * ly * lz).cbrt();
            let k0 = 2.0 * PI / lam;
            let half = PI / side;
            let (lo, hi) = (k0 - half, k0 + half);
            let step = [2.0 * PI / lx, 2.0 * PI / ly, 2.0 * PI / lz];
            let lim = |s: f64| (hi / s).ceil() as i64 + 1;
            let (mx, my, mz) = (lim(step[0]), lim(step[1]), lim(step[2]));
            let mut count = 0u64;
            for nx in -mx..=mx {
                let kx = nx as f64 * step[0];
                for ny in -my..=my {
                    let ky = ny as f64 * step[1];
                    for nz in -mz..=mz {
                        let kz = nz as f64 * step[2];
                        let k = (kx * kx + ky * ky + kz * kz).sqrt();
                        if k >= lo * (1.0 - BOUNDARY_SLACK) && k <= hi * (1.0 + BOUNDARY_SLACK) {
                            count += 1;
                        }
                    }
                }
            }
            count
        }
    }
}

/// Degrees of freedom of a paraxial link between two apertures.
pub fn dof_link(geometry: &LinkGeometry, medium: &Medium, method: LinkMethod) -> Result<DofResult> {
    geometry.validate()?;
    let lam = medium.wavelength();
    let zeta = geometry.zeta();
    let value = match (*geometry, method) {
        (LinkGeometry::Segments { lt, lr, d }, LinkMethod::Classic) => lt * lr / (lam * d),
        (LinkGeometry::Segments { lt, .. }, LinkMethod::Corrected) => 2.0 * lt / lam * zeta,
        (LinkGeometry::Squares { at, ar, d }, LinkMethod::Classic) => at * ar / (lam * lam * d * d),
        (LinkGeometry::Squares { at, ar, .. }, LinkMethod::Corrected) => {
            if at >= ar {
                return Err(EspError::param(
                    "geometry",
                    "corrected square-link DoF requires At < Ar; swap transmitter and receiver roles",
                ));
            }
            4.0 * at / (lam * lam) * zeta * zeta.atan()
        }
    };
    Ok(DofResult::formula(value))
}

/// DFT beamforming codebook of an N-element half-wavelength ULA.
#[derive(Debug, Clone)]
pub struct DftCodebook {
    /// Column `n` is the beam `(1/√N) e^{-j2πmn/N}`, m = 0..N-1.
    pub matrix: CMat,
    /// `(n, γ_n)` with `γ_n = arcsin(2n/N)` for n = 0, ±1, …, ±⌊N/2⌋ (radians).
    pub beams: Vec<(i64, f64)>,
}

pub fn dft_codebook(n: usize) -> Result<DftCodebook> {
    if n == 0 {
        return Err(EspError::param("n", "codebook size must be >= 1"));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let matrix = CMat::from_fn(n, n, |m, col| {
        let idx = ((m * col) % n) as f64;
        Complex64::from_polar(scale, -2.0 * PI * idx / n as f64)
    });
    let half = (n / 2) as i64;
    let mut beams = vec![(0, 0.0)];
    for k in 1..=half {
        let g = (2.0 * k as f64 / n as f64).clamp(-1.0, 1.0).asin();
        beams.push((k, g));
        beams.push((-k, -g));
    }
    Ok(DftCodebook { matrix, beams })
}
