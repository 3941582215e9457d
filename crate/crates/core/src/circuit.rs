//! Multiport circuit model of port-loaded dipole arrays.
//!
//! Port equation `−(Z_L + Z) i = v`, with `Z` the mutual impedance matrix of
//! the elements and `Z_L` the diagonal load matrix. The same machinery drives
//! the dynamic scattering array (DSA) precoder.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::em::{green_dyadic, project, CurrentElement, Medium, Vec3};
use crate::linalg::{frobenius, solve, svd, CMat, CVec, J, ONE, ZERO};
use crate::modes::{coupling_matrix, SampledSpace};
use crate::rng;
use crate::{EspError, Result};

/// Hertzian dipoles sharing one element length.
#[derive(Debug, Clone)]
pub struct DipoleArray {
    pub positions: Vec<Vec3>,
    pub orientations: Vec<Vec3>,
    pub element_length: f64,
    /// Finite self-reactance added to every diagonal entry of `Z`, Ω.
    pub self_reactance: f64,
}

impl DipoleArray {
    pub fn new(
        positions: Vec<Vec3>,
        orientations: Vec<Vec3>,
        element_length: f64,
        self_reactance: f64,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(EspError::param("positions", "array must contain at least one element"));
        }
        if positions.len() != orientations.len() {
            return Err(EspError::DimensionMismatch(format!(
                "{} positions but {} orientations",
                positions.len(),
                orientations.len()
            )));
        }
        if !(element_length.is_finite() && element_length > 0.0) {
            return Err(EspError::param("element_length", "must be finite and > 0"));
        }
        if !self_reactance.is_finite() {
            return Err(EspError::param("self_reactance", "must be finite"));
        }
        for (i, o) in orientations.iter().enumerate() {
            if (o.norm() - 1.0).abs() > 1e-12 {
                return Err(EspError::param(
                    "orientations",
                    format!("element {i} is not a unit vector"),
                ));
            }
        }
        for i in 0..positions.len() {
            for k in 0..i {
                if positions[i] == positions[k] {
                    return Err(EspError::Singular(format!("elements {k} and {i} share a position")));
                }
            }
        }
        Ok(Self {
            positions,
            orientations,
            element_length,
            self_reactance,
        })
    }

    /// Hexagonal array: centre element plus `rings` concentric hexagonal
    /// rings at lattice spacing `spacing`, all with orientation `p`. Element 0
    /// is the centre; the rest are ordered by ring, then by angle.
    pub fn hexagonal(rings: usize, spacing: f64, p: Vec3, element_length: f64, self_reactance: f64) -> Result<Self> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(EspError::param("spacing", "must be finite and > 0"));
        }
        let n = rings as i64;
        let mut cells: Vec<(i64, f64, Vec3)> = Vec::new();
        for q in -n..=n {
            for r in -n..=n {
                let ring = q.abs().max(r.abs()).max((q + r).abs());
                if ring > n {
                    continue;
                }
                let x = spacing * (q as f64 + r as f64 / 2.0);
                let y = spacing * (r as f64) * 3f64.sqrt() / 2.0;
                let angle = if ring == 0 {
                    0.0
                } else {
                    crate::linalg::wrap_phase(y.atan2(x) + 1e-9)
                };
                cells.push((ring, angle, Vec3::new(x, y, 0.0)));
            }
        }
        cells.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let positions: Vec<Vec3> = cells.into_iter().map(|c| c.2).collect();
        let orientations = vec![p; positions.len()];
        Self::new(positions, orientations, element_length, self_reactance)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The array as a sampled space of unit-amplitude elements.
    pub fn as_space(&self, medium: &Medium) -> Result<SampledSpace> {
        let elements = self
            .positions
            .iter()
            .zip(&self.orientations)
            .map(|(p, o)| CurrentElement::new(*p, *o, self.element_length, ONE))
            .collect::<Result<Vec<_>>>()?;
        let pitch = self.min_spacing().unwrap_or(medium.wavelength() / 4.0);
        SampledSpace::new(elements, pitch.min(medium.wavelength() / 2.0), medium)
    }

    fn min_spacing(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..self.len() {
            for k in 0..i {
                let d = (self.positions[i] - self.positions[k]).norm();
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }
}

/// Hertzian-dipole radiation resistance `(2πη/3)(l/λ)²`.
pub fn radiation_resistance(element_length: f64, medium: &Medium) -> f64 {
    2.0 * std::f64::consts::PI * medium.impedance() / 3.0 * (element_length / medium.wavelength()).powi(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpedanceMatrix {
    pub z: CMat,
}

impl ImpedanceMatrix {
    pub fn size(&self) -> usize {
        self.z.nrows()
    }

    /// `max |Z − Zᵀ| / max |Z|`.
    pub fn symmetry_error(&self) -> f64 {
        let scale = self.z.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let diff = (&self.z - self.z.transpose())
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        if scale > 0.0 {
            diff / scale
        } else {
            diff
        }
    }

    /// Real part of `Z`, symmetrised.
    pub fn resistance(&self) -> DMatrix<f64> {
        let re = self.z.map(|c| c.re);
        (&re + re.transpose()) * 0.5
    }

    /// Imaginary part of `Z`.
    pub fn reactance(&self) -> DMatrix<f64> {
        self.z.map(|c| c.im)
    }

    /// Smallest eigenvalue of `Re{Z}`.
    pub fn min_resistance_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.resistance())
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Mutual impedance matrix of a dipole array.
///
/// Off-diagonal entries are the open-circuit voltage induced across element
/// `m` by a unit current on element `n`, `−l² p̂_m·G_e(r_m − r_n)·p̂_n`.
/// Diagonal entries are `R_rad + j·self_reactance`.
pub fn impedance_matrix(array: &DipoleArray, medium: &Medium) -> Result<ImpedanceMatrix> {
    let k = array.len();
    let l2 = array.element_length * array.element_length;
    if array.element_length > medium.wavelength() / 10.0 {
        log::warn!("element length {} exceeds lambda/10", array.element_length);
    }
    let diag = Complex64::new(radiation_resistance(array.element_length, medium), array.self_reactance);
    let mut z = CMat::zeros(k, k);
    for m in 0..k {
        z[(m, m)] = diag;
        for n in 0..k {
            if n == m {
                continue;
            }
            let sep = array.positions[m] - array.positions[n];
            if sep.norm() == 0.0 {
                return Err(EspError::Singular(format!("elements {n} and {m} coincide")));
            }
            let g = green_dyadic(&sep, medium)?;
            z[(m, n)] = -project(&g, &array.orientations[m], &array.orientations[n]) * l2;
        }
    }
    Ok(ImpedanceMatrix { z })
}

/// Port loads `z_L,k = r_k + jθ_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadVector {
    pub reactance: Vec<f64>,
    /// Resistive parts; `None` for purely reactive loads.
    pub resistance: Option<Vec<f64>>,
}

impl LoadVector {
    pub fn reactive(theta: Vec<f64>) -> Self {
        Self {
            reactance: theta,
            resistance: None,
        }
    }

    pub fn with_resistance(theta: Vec<f64>, resistance: Vec<f64>) -> Result<Self> {
        if resistance.len() != theta.len() {
            return Err(EspError::DimensionMismatch(
                "resistance and reactance lengths differ".into(),
            ));
        }
        if resistance.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(EspError::param("resistance", "must be finite and >= 0"));
        }
        Ok(Self {
            reactance: theta,
            resistance: Some(resistance),
        })
    }

    pub fn len(&self) -> usize {
        self.reactance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reactance.is_empty()
    }

    pub fn impedance(&self, k: usize) -> Complex64 {
        let r = self.resistance.as_ref().map_or(0.0, |r| r[k]);
        Complex64::new(r, self.reactance[k])
    }

    /// Diagonal load matrix `Z_L(θ)`.
    pub fn matrix(&self) -> CMat {
        let d = CVec::from_iterator(self.len(), (0..self.len()).map(|k| self.impedance(k)));
        CMat::from_diagonal(&d)
    }

    /// Power dissipated in the loads, `Σ Re{z_L,k}|i_k|²`.
    pub fn dissipated_power(&self, currents: &CVec) -> f64 {
        match &self.resistance {
            None => 0.0,
            Some(r) => r.iter().zip(currents.iter()).map(|(r, i)| r * i.norm_sqr()).sum(),
        }
    }
}

fn system_matrix(z: &ImpedanceMatrix, loads: &LoadVector) -> Result<CMat> {
    if loads.len() != z.size() {
        return Err(EspError::DimensionMismatch(format!(
            "{} loads for a {}-port impedance matrix",
            loads.len(),
            z.size()
        )));
    }
    let mut m = z.z.clone();
    for k in 0..loads.len() {
        m[(k, k)] += loads.impedance(k);
    }
    Ok(m)
}

/// Reflection matrix `R(θ) = −Z (Z_L(θ) + Z)⁻¹`, obtained by solving
/// `(Z_L + Z)ᵀ Rᵀ = −Zᵀ`.
pub fn reflection_matrix(z: &ImpedanceMatrix, loads: &LoadVector) -> Result<CMat> {
    let m = system_matrix(z, loads)?;
    let rt = solve(&m.transpose(), &(-z.z.transpose()))?;
    Ok(rt.transpose())
}

/// Radiated power `iᴴ Re{Z} i` of a lossless structure.
pub fn radiated_power(z: &ImpedanceMatrix, currents: &CVec) -> Result<f64> {
    if currents.len() != z.size() {
        return Err(EspError::DimensionMismatch(format!(
            "{} currents for a {}-port impedance matrix",
            currents.len(),
            z.size()
        )));
    }
    let re = z.z.map(|c| Complex64::from(c.re));
    let p = currents.dotc(&(re * currents)).re;
    let scale = currents.norm_squared() * z.z.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
    if p < 0.0 {
        if p >= -1e-12 * scale.max(1.0) {
            return Ok(0.0);
        }
        return Err(EspError::PassivityViolation(p));
    }
    Ok(p)
}

/// Reactive loads that make a target current resonate.
#[derive(Debug, Clone)]
pub struct CharacteristicLoads {
    pub loads: LoadVector,
    /// Largest imaginary part of the ratio `[Im{Z} i_s]_k / [i_s]_k`; zero
    /// when every port can be tuned exactly.
    pub ratio_imaginary: f64,
}

/// Loads `θ_k = −[Im{Z} i_s]_k / [i_s]_k` cancelling the reactive part of every
/// port equation.
pub fn characteristic_mode_loads(z: &ImpedanceMatrix, target: &CVec) -> Result<CharacteristicLoads> {
    if target.len() != z.size() {
        return Err(EspError::DimensionMismatch(
            "target current length differs from Z".into(),
        ));
    }
    if let Some(k) = target.iter().position(|c| c.norm() == 0.0) {
        return Err(EspError::param("target", format!("entry {k} is zero: cannot divide")));
    }
    let x = z.z.map(|c| Complex64::from(c.im));
    let xi = x * target;
    let mut theta = Vec::with_capacity(target.len());
    let mut worst: f64 = 0.0;
    for (num, den) in xi.iter().zip(target.iter()) {
        let ratio = num / den;
        theta.push(-ratio.re);
        worst = worst.max(ratio.im.abs());
    }
    if worst > 1e-9 * xi.camax().max(f64::MIN_POSITIVE) {
        log::warn!("characteristic-mode ratio is not real (imaginary residual {worst:.3e})");
    }
    Ok(CharacteristicLoads {
        loads: LoadVector::reactive(theta),
        ratio_imaginary: worst,
    })
}

/// Active/passive split of a DSA: the first `n_active` ports are driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DsaConfig {
    pub ports: usize,
    pub n_active: usize,
}

impl DsaConfig {
    pub fn new(ports: usize, n_active: usize) -> Result<Self> {
        if n_active == 0 || n_active > ports {
            return Err(EspError::param("n_active", format!("must lie in 1..={ports}")));
        }
        Ok(Self { ports, n_active })
    }

    pub fn n_passive(&self) -> usize {
        self.ports - self.n_active
    }

    /// Selection matrix `Q` (K × N_a).
    pub fn selection(&self) -> CMat {
        CMat::from_fn(self.ports, self.n_active, |r, c| if r == c { ONE } else { ZERO })
    }
}

fn check_dsa(z: &ImpedanceMatrix, config: &DsaConfig, receive_coupling: &CMat) -> Result<()> {
    if config.ports != z.size() {
        return Err(EspError::DimensionMismatch(format!(
            "config has {} ports, Z has {}",
            config.ports,
            z.size()
        )));
    }
    if receive_coupling.ncols() != z.size() {
        return Err(EspError::DimensionMismatch(format!(
            "receive coupling has {} columns, expected {}",
            receive_coupling.ncols(),
            z.size()
        )));
    }
    Ok(())
}

/// Port currents `i = −(Z_L + Z)⁻¹ Q v_a`.
pub fn dsa_currents(z: &ImpedanceMatrix, loads: &LoadVector, config: &DsaConfig, v_a: &CVec) -> Result<CVec> {
    if v_a.len() != config.n_active {
        return Err(EspError::DimensionMismatch(format!(
            "{} drive voltages for {} active ports",
            v_a.len(),
            config.n_active
        )));
    }
    let m = system_matrix(z, loads)?;
    let drive = config.selection() * v_a;
    let i = solve(&m, &CMat::from_column_slice(drive.len(), 1, drive.as_slice()))?;
    Ok(-i.column(0).into_owned())
}

/// Noiseless DSA response `y = −B (Z_L(θ) + Z)⁻¹ Q v_a`.
pub fn dsa_forward(
    z: &ImpedanceMatrix,
    loads: &LoadVector,
    config: &DsaConfig,
    v_a: &CVec,
    receive_coupling: &CMat,
) -> Result<CVec> {
    check_dsa(z, config, receive_coupling)?;
    Ok(receive_coupling * dsa_currents(z, loads, config, v_a)?)
}

/// End-to-end transfer `F(θ) = −B (Z_L(θ) + Z)⁻¹ Q`.
pub fn dsa_transfer(
    z: &ImpedanceMatrix,
    loads: &LoadVector,
    config: &DsaConfig,
    receive_coupling: &CMat,
) -> Result<CMat> {
    check_dsa(z, config, receive_coupling)?;
    let m = system_matrix(z, loads)?;
    let x = solve(&m, &config.selection())?;
    Ok(-(receive_coupling * x))
}

/// Coupling from array port currents to receiver samples.
pub fn receive_coupling(array: &DipoleArray, receiver: &SampledSpace, medium: &Medium) -> Result<CMat> {
    coupling_matrix(&array.as_space(medium)?, receiver, medium)
}

/// Point scatterer with complex reflectivity (m²-like scale factor).
#[derive(Debug, Clone, Copy)]
pub struct PointScatterer {
    pub position: Vec3,
    pub orientation: Vec3,
    pub reflectivity: Complex64,
}

/// Channel from array currents to receiver samples through point scatterers
/// only (no direct path): `Σ_s ρ_s G_{Rx←s} G_{s←DSA}`. Its rank is at most
/// the number of scatterers.
pub fn scatterer_channel(
    array: &DipoleArray,
    scatterers: &[PointScatterer],
    receiver: &SampledSpace,
    medium: &Medium,
) -> Result<CMat> {
    let src = array.as_space(medium)?;
    let mut total = CMat::zeros(receiver.len(), array.len());
    for s in scatterers {
        let el = CurrentElement::new(s.position, s.orientation, array.element_length, ONE)?;
        let point = SampledSpace {
            elements: vec![el],
            pitch: medium.wavelength() / 4.0,
        };
        let inbound = coupling_matrix(&src, &point, medium)?;
        let outbound = coupling_matrix(&point, receiver, medium)?;
        total += outbound * inbound * s.reflectivity;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMethod {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone)]
pub struct DsaOptions {
    /// Per-column radiated power `P_T`.
    pub power: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    pub seed: u64,
    pub gradient: GradientMethod,
    /// Stop when the objective decrement falls below this.
    pub tolerance: f64,
}

impl Default for DsaOptions {
    fn default() -> Self {
        Self {
            power: 1.0,
            max_iterations: 400,
            restarts: 8,
            seed: 0,
            gradient: GradientMethod::Analytic,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DsaSolution {
    pub loads: LoadVector,
    /// Power-normalised achieved response `Ĥ = c F(θ̂)`.
    pub achieved: CMat,
    /// Complex scale `c` with `|c|² = P_T / P̄(θ̂)`.
    pub scale: Complex64,
    /// `‖Ĥ − H_o‖²_F / ‖H_o‖²_F`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Restart that produced the solution (0 = resonant start).
    pub restart: usize,
    /// Objective after each accepted iteration of the winning restart.
    pub history: Vec<f64>,
}

/// Objective of the power-normalised DSA fit.
pub struct DsaProblem<'a> {
    z: &'a ImpedanceMatrix,
    config: DsaConfig,
    b: &'a CMat,
    target: &'a CMat,
    power: f64,
    target_norm2: f64,
    resistance: CMat,
}

struct Eval {
    value: f64,
    f: CMat,
    mean_power: f64,
    s: Complex64,
}

impl<'a> DsaProblem<'a> {
    pub fn new(z: &'a ImpedanceMatrix, config: DsaConfig, b: &'a CMat, target: &'a CMat, power: f64) -> Result<Self> {
        check_dsa(z, &config, b)?;
        if target.shape() != (b.nrows(), config.n_active) {
            return Err(EspError::DimensionMismatch(format!(
                "target is {:?}, expected {:?}",
                target.shape(),
                (b.nrows(), config.n_active)
            )));
        }
        if !(power.is_finite() && power > 0.0) {
            return Err(EspError::param("power", "must be finite and > 0"));
        }
        let target_norm2 = frobenius(target).powi(2);
        if target_norm2 == 0.0 {
            return Err(EspError::param("target", "must be non-zero"));
        }
        Ok(Self {
            z,
            config,
            b,
            target,
            power,
            target_norm2,
            resistance: z.z.map(|c| Complex64::from(c.re)),
        })
    }

    fn system(&self, theta: &[f64]) -> CMat {
        let mut m = self.z.z.clone();
        for (k, t) in theta.iter().enumerate() {
            m[(k, k)] += J * *t;
        }
        m
    }

    fn eval_with(&self, x: &CMat) -> Eval {
        let f = -(self.b * x);
        let na = self.config.n_active as f64;
        let mean_power = (x.adjoint() * &self.resistance * x).trace().re / na;
        let s = (f.adjoint() * self.target).trace();
        let a = frobenius(&f).powi(2);
        let value = (self.power * a / mean_power - 2.0 * (self.power / mean_power).sqrt() * s.norm()
            + self.target_norm2)
            / self.target_norm2;
        Eval {
            value,
            f,
            mean_power,
            s,
        }
    }

    /// Normalised residual `J(θ)`.
    pub fn objective(&self, theta: &[f64]) -> Result<f64> {
        let x = solve(&self.system(theta), &self.config.selection())?;
        Ok(self.eval_with(&x).value)
    }

    /// Objective and analytic gradient through the linear solve.
    pub fn gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let k = self.config.ports;
        let minv = solve(&self.system(theta), &CMat::identity(k, k))?;
        let x = minv.columns(0, self.config.n_active).into_owned();
        let e = self.eval_with(&x);
        let na = self.config.n_active as f64;
        let a = frobenius(&e.f).powi(2);
        let snorm = e.s.norm();
        let pbar = e.mean_power;

        let bm = self.b * &minv;
        let f_bm = e.f.adjoint() * &bm;
        let h_bm = self.target.adjoint() * &bm;
        let xr_m = x.adjoint() * &self.resistance * &minv;

        let mut grad = vec![0.0; k];
        for (kk, g) in grad.iter_mut().enumerate() {
            let mut ta = ZERO;
            let mut ts = ZERO;
            let mut tp = ZERO;
            for n in 0..self.config.n_active {
                let xk = x[(kk, n)];
                ta += xk * f_bm[(n, kk)];
                ts += xk * h_bm[(n, kk)];
                tp += xk * xr_m[(n, kk)];
            }
            let da = 2.0 * (J * ta).re;
            let ds = (J * ts).conj();
            let dabs = if snorm > 0.0 { (e.s.conj() * ds).re / snorm } else { 0.0 };
            let dp = 2.0 / na * (-J * tp).re;
            let d = self.power * (da / pbar - a * dp / (pbar * pbar))
                - 2.0 * self.power.sqrt() * (dabs / pbar.sqrt() - 0.5 * snorm * dp / pbar.powf(1.5));
            *g = d / self.target_norm2;
        }
        Ok((e.value, grad))
    }

    /// Forward finite-difference gradient with step `1e-3·(X + |θ_k|)`, where
    /// `X = max|Im Z|` sets the reactance unit.
    pub fn gradient_fd(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let f0 = self.objective(theta)?;
        let scale = self.reactance_scale();
        let mut grad = vec![0.0; theta.len()];
        let mut t = theta.to_vec();
        for k in 0..theta.len() {
            let h = 1e-3 * (scale + theta[k].abs());
            t[k] = theta[k] + h;
            grad[k] = (self.objective(&t)? - f0) / h;
            t[k] = theta[k];
        }
        Ok((f0, grad))
    }

    /// `max |Im Z|`, the natural reactance scale.
    pub fn reactance_scale(&self) -> f64 {
        self.z
            .z
            .iter()
            .map(|c| c.im.abs())
            .fold(0.0, f64::max)
            .max(self.z.z[(0, 0)].re)
    }

    /// Power-normalised response `c F(θ)` and its scale.
    pub fn achieved(&self, theta: &[f64]) -> Result<(CMat, Complex64)> {
        let x = solve(&self.system(theta), &self.config.selection())?;
        let e = self.eval_with(&x);
        let phase = if e.s.norm() > 0.0 { e.s / e.s.norm() } else { ONE };
        let c = phase * (self.power / e.mean_power).sqrt();
        Ok((e.f * c, c))
    }

    fn value_and_grad(&self, theta: &[f64], method: GradientMethod) -> Result<(f64, Vec<f64>)> {
        match method {
            GradientMethod::Analytic => self.gradient(theta),
            GradientMethod::FiniteDifference => self.gradient_fd(theta),
        }
    }
}

struct RunOutcome {
    theta: Vec<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// BFGS on the inverse Hessian with Armijo backtracking; only decreasing steps
// are accepted.
fn bfgs(problem: &DsaProblem, start: Vec<f64>, opts: &DsaOptions) -> Result<RunOutcome> {
    let n = start.len();
    let scale = problem.reactance_scale();
    let mut theta = start;
    let (mut f, mut g) = problem.value_and_grad(&theta, opts.gradient)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let gnorm = dot(&g, &g).sqrt();
    if gnorm > 0.0 {
        h *= 0.1 * scale / gnorm;
    }
    let mut history = vec![f];
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iterations {
        iterations = it + 1;
        let gv = nalgebra::DVector::from_column_slice(&g);
        let mut dir: Vec<f64> = (-(&h * &gv)).iter().cloned().collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n) * (0.1 * scale / dot(&g, &g).sqrt().max(f64::MIN_POSITIVE));
            dir = g.iter().map(|x| -x * h[(0, 0)]).collect();
            slope = dot(&g, &dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            if let Ok(ft) = problem.objective(&trial) {
                if ft.is_finite() && ft <= f + 1e-4 * step * slope && ft < f {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((next, fnext)) = accepted else {
            converged = true;
            break;
        };
        let (fn2, gnext) = match problem.value_and_grad(&next, opts.gradient) {
            Ok(v) => v,
            Err(_) => break,
        };
        debug_assert!((fn2 - fnext).abs() <= 1e-9 * fnext.abs().max(1.0));
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnext.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            let sv = nalgebra::DVector::from_column_slice(&s);
            let yv = nalgebra::DVector::from_column_slice(&y);
            if it == 0 {
                h = DMatrix::identity(n, n) * (sy / dot(&y, &y));
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - &sv * yv.transpose() * rho;
            let right = &eye - &yv * sv.transpose() * rho;
            h = left * &h * right + &sv * sv.transpose() * rho;
        }
        let decrement = f - fnext;
        theta = next;
        f = fnext;
        g = gnext;
        history.push(f);
        if decrement < opts.tolerance {
            converged = true;
            break;
        }
    }
    Ok(RunOutcome {
        theta,
        value: f,
        iterations,
        converged,
        history,
    })
}

/// Reactive loads minimising `‖c F(θ) − H_o‖²_F / ‖H_o‖²_F` where the complex
/// scale `c` fixes the mean per-column radiated power at `P_T` and aligns the
/// global phase with the target.
///
/// Runs BFGS from θ = 0 and from `restarts` random starts uniform in
/// `±5 max|Im Z|`; restarts execute in parallel and the lowest residual wins,
/// ties going to the lower restart index.
pub fn dsa_optimize(
    z: &ImpedanceMatrix,
    config: &DsaConfig,
    receive_coupling: &CMat,
    target: &CMat,
    opts: &DsaOptions,
) -> Result<DsaSolution> {
    let problem = DsaProblem::new(z, *config, receive_coupling, target, opts.power)?;
    let k = config.ports;
    let spread = 5.0
        * z.z
            .iter()
            .map(|c| c.im.abs())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
    let starts: Vec<Vec<f64>> = (0..=opts.restarts)
        .map(|r| {
            if r == 0 {
                vec![0.0; k]
            } else {
                let mut g = rng::stream("dsa-restart", opts.seed, r as u64);
                (0..k).map(|_| g.random_range(-spread..=spread)).collect()
            }
        })
        .collect();
    let runs: Vec<(usize, Result<RunOutcome>)> = starts
        .into_par_iter()
        .enumerate()
        .map(|(i, s)| (i, bfgs(&problem, s, opts)))
        .collect();

    let mut best: Option<(usize, RunOutcome)> = None;
    let mut last_err = None;
    for (i, run) in runs {
        match run {
            Ok(out) => {
                let better = match &best {
                    None => true,
                    Some((_, b)) => out.value < b.value,
                };
                if better {
                    best = Some((i, out));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((restart, out)) = best else {
        return Err(last_err.unwrap_or(EspError::Unsupported("no restart completed".into())));
    };
    if !out.converged {
        log::warn!("dsa_optimize: iteration limit reached, returning best-so-far");
    }
    let (achieved, scale) = problem.achieved(&out.theta)?;
    Ok(DsaSolution {
        loads: LoadVector::reactive(out.theta),
        achieved,
        scale,
        residual: out.value,
        iterations: out.iterations,
        converged: out.converged,
        restart,
        history: out.history,
    })
}

/// Mode-domain quality of a DSA precoder.
#[derive(Debug, Clone)]
pub struct PrecoderReport {
    /// Off-diagonal over diagonal power of `U_rᴴ Ĥ`, dB.
    pub leakage_db: f64,
    /// Per-column loss `10 log₁₀(G_ideal / G_n)`, dB.
    pub gain_loss_db: Vec<f64>,
    /// Ideal per-mode gains per unit radiated power.
    pub ideal_gain: Vec<f64>,
}

/// Target for diagonalising a rank-`r` channel with `r` active ports:
/// `H_o = U_r diag(√(P_T G_n))`, where `G_n = σ_n² / (v_nᴴ Re{Z} v_n)` is the
/// gain of mode `n` per unit radiated power with a fully active array.
pub fn mode_target(z: &ImpedanceMatrix, channel: &CMat, n_modes: usize, power: f64) -> Result<(CMat, Vec<f64>)> {
    let d = svd(channel);
    if n_modes == 0 || n_modes > d.s.len() {
        return Err(EspError::param("n_modes", format!("must lie in 1..={}", d.s.len())));
    }
    let re = z.z.map(|c| Complex64::from(c.re));
    let mut target = CMat::zeros(channel.nrows(), n_modes);
    let mut gains = Vec::with_capacity(n_modes);
    for n in 0..n_modes {
        let v = d.v.column(n).into_owned();
        let p = v.dotc(&(&re * &v)).re;
        if !(p > 0.0) {
            return Err(EspError::PassivityViolation(p));
        }
        let gain = d.s[n] * d.s[n] / p;
        gains.push(gain);
        target.set_column(n, &(d.u.column(n) * Complex64::from((power * gain).sqrt())));
    }
    Ok((target, gains))
}

/// Leakage and gain loss of a precoder in the channel's receive mode basis.
pub fn precoder_report(
    z: &ImpedanceMatrix,
    config: &DsaConfig,
    channel: &CMat,
    solution: &DsaSolution,
    ideal_gain: &[f64],
) -> Result<PrecoderReport> {
    let na = config.n_active;
    let d = svd(channel);
    let basis = d.u.columns(0, na).into_owned();
    let proj = basis.adjoint() * &solution.achieved;
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..na {
        for k in 0..na {
            if i == k {
                diag += proj[(i, k)].norm_sqr();
            } else {
                off += proj[(i, k)].norm_sqr();
            }
        }
    }
    let m = system_matrix(z, &solution.loads)?;
    let x = solve(&m, &config.selection())? * (-solution.scale);
    let mut loss = Vec::with_capacity(na);
    for n in 0..na {
        let col = x.column(n).into_owned();
        let p = radiated_power(z, &col)?;
        let g = proj[(n, n)].norm_sqr() / p;
        loss.push(10.0 * (ideal_gain[n] / g).log10());
    }
    Ok(PrecoderReport {
        leakage_db: 10.0 * (off / diag).log10(),
        gain_loss_db: loss,
        ideal_gain: ideal_gain.to_vec(),
    })
}

/// Exact mode transfer through a scattering device with self-coupling `G` and
/// device response `D`: `U D (I − G D)⁻¹ V⁻¹`. Returns the transfer and the
/// condition number of `V`; a warning is logged above 1e8.
pub fn mode_transfer_exact(u: &CMat, d: &CMat, g: &CMat, v: &CMat) -> Result<(CMat, f64)> {
    let n = d.nrows();
    let feedback = CMat::identity(n, n) - g * d;
    let inner = d * solve(&feedback, &CMat::identity(n, n))?;
    let (vinv, cond) = conditioned_inverse(v)?;
    Ok((u * inner * vinv, cond))
}

/// Born approximation of [`mode_transfer_exact`]: `U D V⁻¹`.
pub fn mode_transfer_born(u: &CMat, d: &CMat, v: &CMat) -> Result<(CMat, f64)> {
    let (vinv, cond) = conditioned_inverse(v)?;
    Ok((u * d * vinv, cond))
}

fn conditioned_inverse(v: &CMat) -> Result<(CMat, f64)> {
    if !v.is_square() {
        return Err(EspError::DimensionMismatch("mode basis must be square".into()));
    }
    let cond = crate::linalg::condition_number(v);
    if cond > 1e8 {
        log::warn!("ill-conditioned mode basis: condition number {cond:.3e}");
    }
    let n = v.nrows();
    Ok((solve(v, &CMat::identity(n, n))?, cond))
}
