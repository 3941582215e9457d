//! Communication modes between sampled spaces, water-filling and capacity.

use num_complex::Complex64;

use crate::em::{green_dyadic, project, CurrentElement, Medium, Vec3};
use crate::linalg::{full_svd, svd, CMat, CVec};
use crate::{EspError, Result};

/// A region of space discretised into unit-amplitude current elements.
#[derive(Debug, Clone)]
pub struct SampledSpace {
    pub elements: Vec<CurrentElement>,
    pub pitch: f64,
}

impl SampledSpace {
    pub fn new(elements: Vec<CurrentElement>, pitch: f64, medium: &Medium) -> Result<Self> {
        if elements.is_empty() {
            return Err(EspError::param(
                "elements",
                "sampled space must contain at least one element",
            ));
        }
        if !(pitch.is_finite() && pitch > 0.0) {
            return Err(EspError::param("pitch", "must be finite and > 0"));
        }
        if pitch > medium.wavelength() / 2.0 * (1.0 + 1e-12) {
            log::warn!("sampling pitch {pitch} exceeds lambda/2: space is undersampled");
        }
        Ok(Self { elements, pitch })
    }

    /// Uniformly sampled straight segment.
    ///
    /// Samples sit at the centres of `round(length / pitch)` cells along
    /// `axis`; every element has polarization `orientation` and length
    /// `element_length`.
    pub fn segment(
        center: Vec3,
        axis: Vec3,
        length: f64,
        pitch: f64,
        orientation: Vec3,
        element_length: f64,
        medium: &Medium,
    ) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(EspError::param("length", "must be finite and > 0"));
        }
        let axis = axis.normalize();
        let n = ((length / pitch).round() as usize).max(1);
        let step = length / n as f64;
        let elements = (0..n)
            .map(|i| {
                let offset = (i as f64 + 0.5) * step - length / 2.0;
                CurrentElement::new(
                    center + axis * offset,
                    orientation,
                    element_length,
                    Complex64::new(1.0, 0.0),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(elements, step, medium)
    }

    /// Default sampling pitch of λ/4.
    pub fn default_pitch(medium: &Medium) -> f64 {
        medium.wavelength() / 4.0
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Coupling from `src` currents to `dst` fields:
/// `[G]_{m,n} = l_m l_n p̂_m · G_e(r_m − r_n) · p̂_n`.
pub fn coupling_matrix(src: &SampledSpace, dst: &SampledSpace, medium: &Medium) -> Result<CMat> {
    let mut g = CMat::zeros(dst.len(), src.len());
    for (m, rx) in dst.elements.iter().enumerate() {
        for (n, tx) in src.elements.iter().enumerate() {
            let sep = rx.position - tx.position;
            if sep.norm() == 0.0 {
                return Err(EspError::Singular(format!(
                    "dst element {m} coincides with src element {n}"
                )));
            }
            let gd = green_dyadic(&sep, medium)?;
            g[(m, n)] = project(&gd, &rx.orientation, &tx.orientation) * (rx.length * tx.length);
        }
    }
    Ok(g)
}

/// Singular triplets of a coupling matrix: `coupling = left · diag(σ) · rightᴴ`.
#[derive(Debug, Clone)]
pub struct ModeDecomposition {
    /// Columns are receive modes.
    pub left_basis: CMat,
    /// Non-negative, descending.
    pub singular_values: Vec<f64>,
    /// Columns are transmit modes.
    pub right_basis: CMat,
}

impl ModeDecomposition {
    pub fn reconstruct(&self) -> CMat {
        let s = CVec::from_iterator(
            self.singular_values.len(),
            self.singular_values.iter().map(|&x| Complex64::from(x)),
        );
        &self.left_basis * CMat::from_diagonal(&s) * self.right_basis.adjoint()
    }

    /// Mode gains `σ_n²`.
    pub fn gains(&self) -> Vec<f64> {
        self.singular_values.iter().map(|s| s * s).collect()
    }
}

pub fn mode_decomposition(coupling: &CMat) -> Result<ModeDecomposition> {
    if coupling.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
        return Err(EspError::param("coupling", "matrix has non-finite entries"));
    }
    let d = svd(coupling);
    Ok(ModeDecomposition {
        left_basis: d.u,
        singular_values: d.s,
        right_basis: d.v,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DofCriterion {
    /// Modes with `σ_n² ≥ σ_1² · 10^(-t/10)`.
    ThresholdDb(f64),
    /// Smallest `N` capturing fraction `f` of `Σ σ_n²`.
    EnergyFraction(f64),
}

/// Number of well-coupled modes.
pub fn count_dof(decomposition: &ModeDecomposition, criterion: DofCriterion) -> Result<usize> {
    let gains = decomposition.gains();
    if gains.is_empty() {
        return Err(EspError::param("decomposition", "no singular values"));
    }
    match criterion {
        DofCriterion::ThresholdDb(t) => {
            let floor = gains[0] * 10f64.powf(-t / 10.0);
            Ok(gains.iter().take_while(|&&g| g >= floor).count().max(1))
        }
        DofCriterion::EnergyFraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(EspError::param("energy_fraction", "must lie in (0, 1]"));
            }
            let total: f64 = gains.iter().sum();
            let target = f * total;
            let mut acc = 0.0;
            for (i, g) in gains.iter().enumerate() {
                acc += g;
                if acc >= target * (1.0 - 1e-15) {
                    return Ok(i + 1);
                }
            }
            Ok(gains.len())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation {
    pub powers: Vec<f64>,
    /// Water level μ.
    pub water_level: f64,
}

const BISECTION_ITERS: usize = 200;

/// Water-filling over parallel channels with gains `σ_n²`:
/// `p_n = max(μ − noise/σ_n², 0)`, `Σ p_n = total_power`.
pub fn water_filling(gains: &[f64], noise_power: f64, total_power: f64) -> Result<PowerAllocation> {
    if gains.is_empty() {
        return Err(EspError::param("gains", "at least one channel is required"));
    }
    if gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(EspError::param("gains", "all gains must be finite and > 0"));
    }
    if !(noise_power.is_finite() && noise_power > 0.0) {
        return Err(EspError::param("noise_power", "must be finite and > 0"));
    }
    if !(total_power.is_finite() && total_power > 0.0) {
        return Err(EspError::param("total_power", "must be finite and > 0"));
    }
    let floors: Vec<f64> = gains.iter().map(|g| noise_power / g).collect();
    let filled = |mu: f64| floors.iter().map(|c| (mu - c).max(0.0)).sum::<f64>();

    let cmin = floors.iter().cloned().fold(f64::INFINITY, f64::min);
    let cmax = floors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (cmin, cmax + total_power);
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if filled(mid) < total_power {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Close the level exactly on the active set found by bisection.
    let bracket = 0.5 * (lo + hi);
    let active: Vec<usize> = (0..floors.len()).filter(|&i| floors[i] < bracket).collect();
    let mu = if active.is_empty() {
        bracket
    } else {
        (total_power + active.iter().map(|&i| floors[i]).sum::<f64>()) / active.len() as f64
    };
    let powers = floors.iter().map(|c| (mu - c).max(0.0)).collect();
    Ok(PowerAllocation {
        powers,
        water_level: mu,
    })
}

/// Sum capacity `Σ log₂(1 + p_n σ_n² / noise)` under a given allocation.
pub fn capacity_with_powers(gains: &[f64], powers: &[f64], noise_power: f64) -> f64 {
    gains
        .iter()
        .zip(powers)
        .map(|(g, p)| (1.0 + p * g / noise_power).log2())
        .sum()
}

/// Water-filling capacity of parallel channels, bits/s/Hz.
pub fn link_capacity(gains: &[f64], noise_power: f64, total_power: f64) -> Result<f64> {
    let alloc = water_filling(gains, noise_power, total_power)?;
    Ok(capacity_with_powers(gains, &alloc.powers, noise_power))
}

/// Rank tolerance relative to the largest singular value.
const RANK_TOL: f64 = 1e-10;

fn numerical_rank(s: &[f64]) -> usize {
    match s.first() {
        Some(&top) if top > 0.0 => s.iter().filter(|&&x| x > RANK_TOL * top).count(),
        _ => 0,
    }
}

/// Source → device → receiver link through a reconfigurable scatterer,
/// `H = H_R R H_T`, with `H_T: K × n_t` and `H_R: n_r × K`.
#[derive(Debug, Clone)]
pub struct CascadeLink {
    pub h_t: CMat,
    pub h_r: CMat,
}

impl CascadeLink {
    pub fn new(h_t: CMat, h_r: CMat) -> Result<Self> {
        if h_r.ncols() != h_t.nrows() {
            return Err(EspError::DimensionMismatch(format!(
                "H_R is {:?} but H_T is {:?}: inner dimension K must agree",
                h_r.shape(),
                h_t.shape()
            )));
        }
        Ok(Self { h_t, h_r })
    }

    /// Device size K.
    pub fn k(&self) -> usize {
        self.h_t.nrows()
    }

    /// Coupling matrices `Γ_T`, `Γ_R` as singular values of `H_T`, `H_R`.
    pub fn gamma_t(&self) -> Vec<f64> {
        svd(&self.h_t).s
    }

    pub fn gamma_r(&self) -> Vec<f64> {
        svd(&self.h_r).s
    }

    /// Usable modes into the device.
    pub fn n(&self) -> usize {
        numerical_rank(&self.gamma_t())
    }

    /// Usable modes out of the device.
    pub fn m(&self) -> usize {
        numerical_rank(&self.gamma_r())
    }

    /// End-to-end mode count `N_c = min(N, M)`.
    pub fn n_c(&self) -> usize {
        self.n().min(self.m())
    }
}

#[derive(Debug, Clone)]
pub struct CascadeCapacity {
    pub capacity: f64,
    /// Products `(σ̃_k^T σ̃_k^R)²`, k = 1..K, descending.
    pub product_gains: Vec<f64>,
    /// Powers per product channel; zero beyond `N_c`.
    pub powers: Vec<f64>,
    pub n_c: usize,
}

/// Capacity of the cascade with the capacity-optimal device.
pub fn cascade_capacity(link: &CascadeLink, noise_power: f64, total_power: f64) -> Result<CascadeCapacity> {
    let k = link.k();
    let st = link.gamma_t();
    let sr = link.gamma_r();
    let n_c = numerical_rank(&st).min(numerical_rank(&sr));
    let product_gains: Vec<f64> = (0..k)
        .map(|i| {
            let a = st.get(i).copied().unwrap_or(0.0);
            let b = sr.get(i).copied().unwrap_or(0.0);
            (a * b).powi(2)
        })
        .collect();
    let mut powers = vec![0.0; k];
    let mut capacity = 0.0;
    if n_c > 0 {
        let usable = &product_gains[..n_c];
        let alloc = water_filling(usable, noise_power, total_power)?;
        capacity = capacity_with_powers(usable, &alloc.powers, noise_power);
        powers[..n_c].copy_from_slice(&alloc.powers);
    } else if !(noise_power > 0.0 && total_power > 0.0) {
        return Err(EspError::param("power", "noise and total power must be > 0"));
    }
    Ok(CascadeCapacity {
        capacity,
        product_gains,
        powers,
        n_c,
    })
}

/// Water-filling capacity of an arbitrary end-to-end matrix `H`.
pub fn matrix_capacity(h: &CMat, noise_power: f64, total_power: f64) -> Result<f64> {
    let s = svd(h).s;
    let r = numerical_rank(&s);
    if r == 0 {
        return Ok(0.0);
    }
    let gains: Vec<f64> = s[..r].iter().map(|x| x * x).collect();
    link_capacity(&gains, noise_power, total_power)
}

#[derive(Debug, Clone)]
pub struct ScatterSolution {
    /// `R = V_R U_Tᴴ`, K × K unitary.
    pub r: CMat,
    /// Set when either link has repeated singular values, so the optimal
    /// device is not unique.
    pub degenerate: bool,
}

/// Capacity-optimal lossless device matrix `R = V_R U_Tᴴ`, where `U_T` are the
/// left singular vectors of `H_T` and `V_R` the right singular vectors of `H_R`.
pub fn optimal_scatter_matrix(h_t: &CMat, h_r: &CMat) -> Result<ScatterSolution> {
    if h_r.ncols() != h_t.nrows() {
        return Err(EspError::DimensionMismatch(format!(
            "H_R is {:?} but H_T is {:?}",
            h_r.shape(),
            h_t.shape()
        )));
    }
    let t = full_svd(h_t);
    let r = full_svd(h_r);
    let repeated = |s: &[f64]| {
        let top = s.first().copied().unwrap_or(0.0);
        s.windows(2)
            .any(|w| top > 0.0 && (w[0] - w[1]).abs() <= 1e-9 * top && w[1] > RANK_TOL * top)
    };
    let degenerate = repeated(&t.s) || repeated(&r.s);
    if degenerate {
        log::warn!("repeated singular values: optimal scatter matrix is not unique");
    }
    Ok(ScatterSolution {
        r: &r.v * t.u.adjoint(),
        degenerate,
    })
}
