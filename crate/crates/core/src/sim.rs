//! Stacked intelligent metasurfaces: layered diffraction model, phase-mask
//! training and wave-domain DFT direction finding.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::{PI, TAU};

use crate::em::Medium;
use crate::linalg::{complex_normal, frobenius, wrap_phase, wrap_pm_pi, CMat, CVec, ZERO};
use crate::{rng, EspError, Result};

/// Geometry of a SIM with square layers of `side × side` atoms.
///
/// Layer `l` (1..=L) sits at `z = l·d_layer`; the input aperture at `z = 0`
/// uses the same lattice. Atom `m` has lattice coordinates
/// `(u, v) = (m mod side, m div side)`.
#[derive(Debug, Clone)]
pub struct SimStack {
    pub layers: usize,
    pub side: usize,
    pub atom_spacing: f64,
    pub layer_spacing: f64,
    pub atom_area: f64,
    /// Readout matrix `H_R` (N_a × M).
    pub readout: CMat,
    pub medium: Medium,
    propagation: CMat,
}

/// Rayleigh-Sommerfeld coefficient between two atoms at distance `d` across
/// a layer gap `gap`: `(A·gap/d²)(1/(2πd) − j/λ) e^{jκ₀d}`.
pub fn rayleigh_sommerfeld(area: f64, gap: f64, d: f64, medium: &Medium) -> Complex64 {
    let lambda = medium.wavelength();
    let amp = Complex64::new(1.0 / (2.0 * PI * d), -1.0 / lambda);
    amp * (area * gap / (d * d)) * Complex64::from_polar(1.0, medium.wavenumber() * d)
}

impl SimStack {
    /// Stack with a default readout: `side_a × side_a` antennas on a centred
    /// λ/2 lattice one layer spacing behind the last layer.
    pub fn new(
        layers: usize,
        side: usize,
        atom_spacing: f64,
        layer_spacing: f64,
        antennas: usize,
        medium: Medium,
    ) -> Result<Self> {
        let side_a = perfect_square(antennas).ok_or_else(|| EspError::param("antennas", "must be a perfect square"))?;
        let mut stack = Self::with_readout(
            layers,
            side,
            atom_spacing,
            layer_spacing,
            CMat::zeros(antennas, side * side),
            medium,
        )?;
        let a = stack.atom_area;
        let pitch = medium.wavelength() / 2.0;
        let center_a = (side_a as f64 - 1.0) / 2.0;
        let z = layer_spacing;
        stack.readout = CMat::from_fn(antennas, side * side, |n, m| {
            let (ax, ay) = (
                ((n % side_a) as f64 - center_a) * pitch,
                ((n / side_a) as f64 - center_a) * pitch,
            );
            let (px, py) = stack.atom_xy(m);
            let d = ((ax - px).powi(2) + (ay - py).powi(2) + z * z).sqrt();
            rayleigh_sommerfeld(a, z, d, &medium)
        });
        Ok(stack)
    }

    /// Stack with a caller-supplied readout matrix. Atom area defaults to
    /// `atom_spacing²`.
    pub fn with_readout(
        layers: usize,
        side: usize,
        atom_spacing: f64,
        layer_spacing: f64,
        readout: CMat,
        medium: Medium,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(EspError::param("layers", "must be >= 1"));
        }
        if side == 0 {
            return Err(EspError::param("side", "must be >= 1"));
        }
        if !(atom_spacing.is_finite() && atom_spacing > 0.0) {
            return Err(EspError::param("atom_spacing", "must be finite and > 0"));
        }
        if !(layer_spacing.is_finite() && layer_spacing > 0.0) {
            return Err(EspError::param("layer_spacing", "must be finite and > 0"));
        }
        let m = side * side;
        if readout.ncols() != m {
            return Err(EspError::DimensionMismatch(format!(
                "readout has {} columns for {} atoms",
                readout.ncols(),
                m
            )));
        }
        if readout.nrows() >= m {
            log::warn!(
                "SIM with {} atoms per layer and {} antennas: M > N_a is recommended",
                m,
                readout.nrows()
            );
        }
        let mut stack = Self {
            layers,
            side,
            atom_spacing,
            layer_spacing,
            atom_area: atom_spacing * atom_spacing,
            readout,
            medium,
            propagation: CMat::zeros(0, 0),
        };
        stack.propagation = stack.build_propagation();
        Ok(stack)
    }

    pub fn atoms(&self) -> usize {
        self.side * self.side
    }

    pub fn antennas(&self) -> usize {
        self.readout.nrows()
    }

    /// Centred transverse position of atom `m`.
    pub fn atom_xy(&self, m: usize) -> (f64, f64) {
        let c = (self.side as f64 - 1.0) / 2.0;
        (
            ((m % self.side) as f64 - c) * self.atom_spacing,
            ((m / self.side) as f64 - c) * self.atom_spacing,
        )
    }

    fn build_propagation(&self) -> CMat {
        let n = self.atoms();
        let gap = self.layer_spacing;
        CMat::from_fn(n, n, |m, i| {
            let (xm, ym) = self.atom_xy(m);
            let (xi, yi) = self.atom_xy(i);
            let d = ((xm - xi).powi(2) + (ym - yi).powi(2) + gap * gap).sqrt();
            rayleigh_sommerfeld(self.atom_area, gap, d, &self.medium)
        })
    }

    /// Copy of this stack with a different layer count.
    pub fn with_layers(&self, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(EspError::param("layers", "must be >= 1"));
        }
        let mut s = self.clone();
        s.layers = layers;
        Ok(s)
    }
}

fn perfect_square(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n && n > 0).then_some(r)
}

/// Propagation matrix `W^(l)` into layer `l` (1-based) from the previous
/// layer, or from the input aperture for `l = 1`.
pub fn layer_propagation(stack: &SimStack, layer: usize) -> Result<CMat> {
    if layer == 0 || layer > stack.layers {
        return Err(EspError::param("layer", format!("must lie in 1..={}", stack.layers)));
    }
    Ok(stack.propagation.clone())
}

/// Phase masks `θ_m^(l)`, one row per layer, wrapped to `[0, 2π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTensor {
    pub theta: DMatrix<f64>,
}

impl PhaseTensor {
    pub fn new(theta: DMatrix<f64>) -> Self {
        Self {
            theta: theta.map(wrap_phase),
        }
    }

    pub fn zeros(layers: usize, atoms: usize) -> Self {
        Self {
            theta: DMatrix::zeros(layers, atoms),
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, layers: usize, atoms: usize) -> Self {
        Self {
            theta: DMatrix::from_fn(layers, atoms, |_, _| rng.random_range(0.0..TAU)),
        }
    }

    pub fn layers(&self) -> usize {
        self.theta.nrows()
    }

    /// Diagonal of `Φ^(l)` (0-based layer).
    pub fn mask(&self, layer: usize) -> CVec {
        CVec::from_iterator(
            self.theta.ncols(),
            self.theta.row(layer).iter().map(|t| Complex64::from_polar(1.0, *t)),
        )
    }

    /// Rounds every phase to the nearest of `2^bits` uniform levels.
    pub fn quantized(&self, bits: u32) -> Result<Self> {
        if bits == 0 || bits > 16 {
            return Err(EspError::param("bits", "must lie in 1..=16"));
        }
        let levels = (1u32 << bits) as f64;
        let step = TAU / levels;
        Ok(Self::new(self.theta.map(|t| ((t / step).round() % levels) * step)))
    }
}

fn check_phases(stack: &SimStack, phases: &PhaseTensor) -> Result<()> {
    if phases.theta.shape() != (stack.layers, stack.atoms()) {
        return Err(EspError::DimensionMismatch(format!(
            "phases are {:?}, stack needs {:?}",
            phases.theta.shape(),
            (stack.layers, stack.atoms())
        )));
    }
    Ok(())
}

fn scale_rows(d: &CVec, a: &CMat) -> CMat {
    let mut out = a.clone();
    for c in 0..out.ncols() {
        for (r, s) in d.iter().enumerate() {
            out[(r, c)] *= s;
        }
    }
    out
}

/// Overall SIM response `R(θ) = Φ^(L) W^(L) ⋯ Φ^(1) W^(1)`.
pub fn sim_response(stack: &SimStack, phases: &PhaseTensor) -> Result<CMat> {
    check_phases(stack, phases)?;
    let w = &stack.propagation;
    let mut r = scale_rows(&phases.mask(0), w);
    for l in 1..stack.layers {
        r = scale_rows(&phases.mask(l), &(w * r));
    }
    Ok(r)
}

/// Unitary 2D DFT on a `√N_a × √N_a` grid: Kronecker product of two 1D
/// unitary DFTs.
pub fn dft_target(n_a: usize) -> Result<CMat> {
    let s = perfect_square(n_a).ok_or_else(|| EspError::param("n_a", "must be a perfect square"))?;
    let f = dft_1d(s);
    Ok(f.kronecker(&f))
}

fn dft_1d(n: usize) -> CMat {
    let norm = (n as f64).sqrt();
    CMat::from_fn(n, n, |k, u| {
        Complex64::from_polar(1.0 / norm, -TAU * (k * u) as f64 / n as f64)
    })
}

/// Direction-finding target for `N_a` antennas behind `M` atoms: row
/// `n = k_y √N_a + k_x` is the spatial harmonic
/// `e^{−j2π(k_x u + k_y v)/√N_a}/√M` on the atom lattice. Equals
/// [`dft_target`] when `M = N_a`.
pub fn doa_target(n_a: usize, atoms: usize) -> Result<CMat> {
    let sa = perfect_square(n_a).ok_or_else(|| EspError::param("n_a", "must be a perfect square"))?;
    let sm = perfect_square(atoms).ok_or_else(|| EspError::param("atoms", "must be a perfect square"))?;
    let norm = (atoms as f64).sqrt();
    Ok(CMat::from_fn(n_a, atoms, |n, m| {
        let (kx, ky) = ((n % sa) as f64, (n / sa) as f64);
        let (u, v) = ((m % sm) as f64, (m / sm) as f64);
        Complex64::from_polar(1.0 / norm, -TAU * (kx * u + ky * v) / sa as f64)
    }))
}

/// Plane wave on the input lattice, `z_m = e^{−j(ψ_x u_m + ψ_y v_m)}`.
pub fn plane_wave(side: usize, psi_x: f64, psi_y: f64) -> CVec {
    CVec::from_iterator(
        side * side,
        (0..side * side).map(|m| {
            let (u, v) = ((m % side) as f64, (m / side) as f64);
            Complex64::from_polar(1.0, -(psi_x * u + psi_y * v))
        }),
    )
}

/// Electrical angle of DFT bin `k` on a grid of `n` bins, in `[−π, π)`.
pub fn bin_angle(k: usize, n: usize) -> f64 {
    wrap_pm_pi(-TAU * k as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub decay: f64,
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the loss by less than this fraction
    /// of the initial loss.
    pub stop_threshold: f64,
    /// Fit a free complex output scale `β` together with the phases.
    pub learn_scale: bool,
    /// Reject loss-increasing steps (halving the rate) instead of taking them.
    pub reject_increase: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            decay: 0.99,
            max_iterations: 10_000,
            stop_threshold: 1e-6,
            learn_scale: false,
            reject_increase: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(EspError::param("learning_rate", "must be finite and > 0"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(EspError::param("decay", "must lie in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(EspError::param("max_iterations", "must be >= 1"));
        }
        if !(self.stop_threshold.is_finite() && self.stop_threshold > 0.0) {
            return Err(EspError::param("stop_threshold", "must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub phases: PhaseTensor,
    /// Loss after initialisation and after every accepted step.
    pub history: Vec<f64>,
    /// Output scale (1 unless `learn_scale`).
    pub scale: Complex64,
    pub iterations: usize,
    pub converged: bool,
}

impl TrainResult {
    pub fn final_loss(&self) -> f64 {
        *self.history.last().expect("history is never empty")
    }
}

/// Loss `Γ = ‖β H_R R(θ) − H_o‖²_F` with `β = 1`, or minimised over `β` when
/// `learn_scale` is set. Returns the loss and the `β` used.
pub fn sim_loss(stack: &SimStack, phases: &PhaseTensor, target: &CMat, learn_scale: bool) -> Result<(f64, Complex64)> {
    let p = &stack.readout * sim_response(stack, phases)?;
    check_target(&p, target)?;
    let beta = optimal_scale(&p, target, learn_scale);
    Ok((frobenius(&(p * beta - target)).powi(2), beta))
}

fn check_target(p: &CMat, target: &CMat) -> Result<()> {
    if p.shape() != target.shape() {
        return Err(EspError::DimensionMismatch(format!(
            "target is {:?}, SIM output is {:?}",
            target.shape(),
            p.shape()
        )));
    }
    Ok(())
}

fn optimal_scale(p: &CMat, target: &CMat, learn: bool) -> Complex64 {
    if !learn {
        return Complex64::from(1.0);
    }
    let pp = frobenius(p).powi(2);
    if pp == 0.0 {
        return ZERO;
    }
    (p.adjoint() * target).trace() / pp
}

/// Loss and analytic gradient `∂Γ/∂θ_m^(l)` (L × M).
pub fn sim_gradient(
    stack: &SimStack,
    phases: &PhaseTensor,
    target: &CMat,
    learn_scale: bool,
) -> Result<(f64, DMatrix<f64>, Complex64)> {
    check_phases(stack, phases)?;
    let w = &stack.propagation;
    let layers = stack.layers;
    let masks: Vec<CVec> = (0..layers).map(|l| phases.mask(l)).collect();

    // right[l] = W Φ^(l−1) ⋯ Φ^(1) W (input to mask l), 0-based.
    let mut right = Vec::with_capacity(layers);
    let mut acc = w.clone();
    for l in 0..layers {
        right.push(acc.clone());
        if l + 1 < layers {
            acc = w * scale_rows(&masks[l], &acc);
        }
    }
    let response = scale_rows(&masks[layers - 1], &right[layers - 1]);
    let p = &stack.readout * &response;
    check_target(&p, target)?;
    let beta = optimal_scale(&p, target, learn_scale);
    let err = &p * beta - target;
    let loss = frobenius(&err).powi(2);

    let mut grad = DMatrix::zeros(layers, stack.atoms());
    // left = β H_R Φ^(L) W ⋯ Φ^(l+1) W, built from the output side.
    let mut left = &stack.readout * beta;
    let eh = err.adjoint();
    for l in (0..layers).rev() {
        let c = &eh * &left;
        let b = &right[l];
        for m in 0..stack.atoms() {
            let mut s = ZERO;
            for i in 0..c.nrows() {
                s += b[(m, i)] * c[(i, m)];
            }
            grad[(l, m)] = -2.0 * (masks[l][m] * s).im;
        }
        if l > 0 {
            left = scale_rows_right(&left, &masks[l]) * w;
        }
    }
    Ok((loss, grad, beta))
}

fn scale_rows_right(a: &CMat, d: &CVec) -> CMat {
    let mut out = a.clone();
    for (c, s) in d.iter().enumerate() {
        for v in out.column_mut(c).iter_mut() {
            *v *= s;
        }
    }
    out
}

/// Gradient-descent phase training.
///
/// Phases start uniform in `[0, 2π)` from `seed`. Each iteration normalises
/// the gradient per layer so its largest component is π, steps by the
/// learning rate and decays the rate. With `reject_increase`, steps that
/// raise the loss are discarded and the rate halved, so the accepted history
/// is non-increasing.
pub fn sim_train(stack: &SimStack, target: &CMat, schedule: &TrainSchedule, seed: u64) -> Result<TrainResult> {
    let mut g = rng::stream("sim-train", seed, 0);
    let start = PhaseTensor::random(&mut g, stack.layers, stack.atoms());
    sim_train_from(stack, target, schedule, start)
}

/// [`sim_train`] from given initial phases.
pub fn sim_train_from(
    stack: &SimStack,
    target: &CMat,
    schedule: &TrainSchedule,
    start: PhaseTensor,
) -> Result<TrainResult> {
    schedule.validate()?;
    check_phases(stack, &start)?;
    let mut phases = start;
    let (mut loss, mut grad, mut beta) = sim_gradient(stack, &phases, target, schedule.learn_scale)?;
    let initial = loss;
    let mut history = vec![loss];
    let mut eta = schedule.learning_rate;
    let mut converged = false;
    let mut iterations = 0;
    if initial == 0.0 {
        return Ok(TrainResult {
            phases,
            history,
            scale: beta,
            iterations,
            converged: true,
        });
    }
    for it in 0..schedule.max_iterations {
        iterations = it + 1;
        let mut step = grad.clone();
        for l in 0..step.nrows() {
            let peak = step.row(l).iter().fold(0.0f64, |a, b| a.max(b.abs()));
            if peak > 0.0 {
                let s = PI / peak;
                step.row_mut(l).iter_mut().for_each(|v| *v *= s);
            }
        }
        let trial = PhaseTensor::new(&phases.theta - step * eta);
        let (tl, tg, tb) = sim_gradient(stack, &trial, target, schedule.learn_scale)?;
        if !tl.is_finite() || tl > 10.0 * initial {
            if schedule.reject_increase {
                eta *= 0.5;
                continue;
            }
            return Err(EspError::Diverged { loss: tl, initial });
        }
        if schedule.reject_increase && tl > loss {
            eta *= 0.5;
            if eta < 1e-12 {
                converged = true;
                break;
            }
            continue;
        }
        let decrement = loss - tl;
        phases = trial;
        loss = tl;
        grad = tg;
        beta = tb;
        history.push(loss);
        eta *= schedule.decay;
        if decrement.abs() < schedule.stop_threshold * initial {
            converged = true;
            break;
        }
    }
    Ok(TrainResult {
        phases,
        history,
        scale: beta,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoaEstimate {
    pub psi_x: f64,
    pub psi_y: f64,
    /// DFT bin `(k_x, k_y)` of the strongest antenna.
    pub bin: (usize, usize),
    /// Accumulated energy per receive antenna.
    pub energy: Vec<f64>,
}

/// Energy-detection DoA: accumulates `|H_R R(θ) z + n|²` over `snapshots`
/// noisy snapshots and returns the grid angles of the strongest antenna.
pub fn doa_estimate<R: Rng + ?Sized>(
    stack: &SimStack,
    phases: &PhaseTensor,
    incident: &CVec,
    noise_power: f64,
    snapshots: usize,
    rng: &mut R,
) -> Result<DoaEstimate> {
    if incident.len() != stack.atoms() {
        return Err(EspError::DimensionMismatch(format!(
            "incident wave has {} samples for {} atoms",
            incident.len(),
            stack.atoms()
        )));
    }
    if snapshots == 0 {
        return Err(EspError::param("snapshots", "must be >= 1"));
    }
    if !(noise_power.is_finite() && noise_power >= 0.0) {
        return Err(EspError::param("noise_power", "must be finite and >= 0"));
    }
    let n_a = stack.antennas();
    let sa = perfect_square(n_a).ok_or_else(|| EspError::param("antennas", "must be a perfect square"))?;
    let y = &stack.readout * sim_response(stack, phases)? * incident;
    let mut energy = vec![0.0; n_a];
    for _ in 0..snapshots {
        for (n, e) in energy.iter_mut().enumerate() {
            let noise = if noise_power > 0.0 {
                complex_normal(rng, noise_power)
            } else {
                ZERO
            };
            *e += (y[n] + noise).norm_sqr();
        }
    }
    let best = energy
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0;
    let (kx, ky) = (best % sa, best / sa);
    Ok(DoaEstimate {
        psi_x: bin_angle(kx, sa),
        psi_y: bin_angle(ky, sa),
        bin: (kx, ky),
        energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::unitarity_error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn medium() -> Medium {
        Medium::free_space(1.0).unwrap()
    }

    fn stack(layers: usize, side: usize, antennas: usize) -> SimStack {
        SimStack::new(layers, side, 0.5, 1.0, antennas, medium()).unwrap()
    }

    #[test]
    fn propagation_symmetric_and_on_axis() {
        let s = stack(2, 3, 4);
        let w = layer_propagation(&s, 1).unwrap();
        assert!(frobenius(&(&w - w.transpose())) < 1e-14);
        let expect = s.atom_area / 1.0 * ((1.0 / (TAU * 1.0)).powi(2) + 1.0).sqrt();
        assert!((w[(4, 4)].norm() - expect).abs() < 1e-12);
        assert!(layer_propagation(&s, 0).is_err());
        assert!(layer_propagation(&s, 3).is_err());
    }

    #[test]
    fn far_regime_phase() {
        let m = medium();
        let d = 100.0;
        let w = rayleigh_sommerfeld(0.25, d, d, &m);
        let expect = wrap_pm_pi(m.wavenumber() * d - PI / 2.0);
        assert!((wrap_pm_pi(w.arg() - expect)).abs() < 0.05);
    }

    #[test]
    fn zero_layer_spacing_rejected() {
        assert!(SimStack::new(1, 2, 0.5, 0.0, 1, medium()).is_err());
    }

    #[test]
    fn zero_phases_give_plain_product() {
        let s = stack(3, 2, 1);
        let r = sim_response(&s, &PhaseTensor::zeros(3, 4)).unwrap();
        let w = layer_propagation(&s, 1).unwrap();
        assert!(frobenius(&(r - &w * &w * &w)) < 1e-14);
    }

    #[test]
    fn last_layer_offset_is_global_phase() {
        let s = stack(2, 3, 4);
        let mut g = ChaCha8Rng::seed_from_u64(1);
        let p = PhaseTensor::random(&mut g, 2, 9);
        let mut q = p.theta.clone();
        q.row_mut(1).iter_mut().for_each(|t| *t += 0.7);
        let r0 = sim_response(&s, &p).unwrap();
        let r1 = sim_response(&s, &PhaseTensor::new(q)).unwrap();
        assert!(frobenius(&(r1 - r0 * Complex64::from_polar(1.0, 0.7))) < 1e-12);
    }

    #[test]
    fn dft_targets() {
        let h = dft_target(4).unwrap();
        assert!(h.iter().all(|c| (c.re.abs() - 0.5).abs() < 1e-15 && c.im.abs() < 1e-15));
        let h = dft_target(16).unwrap();
        assert!(unitarity_error(&h) < 1e-12);
        assert!(h.row(0).iter().all(|c| (c - Complex64::from(0.25)).norm() < 1e-15));
        assert!(dft_target(5).is_err());
        let d = doa_target(16, 16).unwrap();
        assert!(frobenius(&(d - h)) < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = stack(2, 3, 4);
        let mut g = ChaCha8Rng::seed_from_u64(2);
        let target = CMat::from_fn(4, 9, |_, _| complex_normal(&mut g, 1.0));
        let p = PhaseTensor::random(&mut g, 2, 9);
        for learn in [false, true] {
            let (_, grad, _) = sim_gradient(&s, &p, &target, learn).unwrap();
            for l in 0..2 {
                for m in 0..9 {
                    let mut a = p.theta.clone();
                    a[(l, m)] += 1e-5;
                    let mut b = p.theta.clone();
                    b[(l, m)] -= 1e-5;
                    let fa = sim_loss(&s, &PhaseTensor { theta: a }, &target, learn).unwrap().0;
                    let fb = sim_loss(&s, &PhaseTensor { theta: b }, &target, learn).unwrap().0;
                    let fd = (fa - fb) / 2e-5;
                    let scale = grad.iter().fold(0.0f64, |x, y| x.max(y.abs()));
                    assert!(
                        (fd - grad[(l, m)]).abs() < 1e-4 * scale,
                        "{l},{m}: {fd} {}",
                        grad[(l, m)]
                    );
                }
            }
        }
    }

    #[test]
    fn scalar_optimum() {
        let m = medium();
        let readout = CMat::from_element(1, 1, Complex64::new(0.3, -0.4));
        let s = SimStack::with_readout(1, 1, 0.5, 1.0, readout.clone(), m).unwrap();
        let w = layer_propagation(&s, 1).unwrap()[(0, 0)];
        let h_o = Complex64::from_polar(readout[(0, 0)].norm() * w.norm(), 1.1);
        let target = CMat::from_element(1, 1, h_o);
        let res = sim_train(&s, &target, &TrainSchedule::default(), 4).unwrap();
        let best = wrap_phase((h_o / (readout[(0, 0)] * w)).arg());
        let got = res.phases.theta[(0, 0)];
        assert!(wrap_pm_pi(got - best).abs() < 1e-3, "{got} vs {best}");
        assert!(res.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quantizer_levels() {
        let p = PhaseTensor::new(DMatrix::from_row_slice(1, 3, &[0.1, 3.0, 6.2]));
        let q = p.quantized(1).unwrap();
        assert_eq!(q.theta.as_slice(), &[0.0, PI, 0.0]);
        assert!(p.quantized(0).is_err());
    }

    #[test]
    fn noiseless_doa_on_ideal_dft() {
        // readout that realises the DFT exactly with a one-layer, zero-phase SIM
        let s0 = stack(1, 4, 16);
        let w = layer_propagation(&s0, 1).unwrap();
        let winv = crate::linalg::solve(&w, &CMat::identity(16, 16)).unwrap();
        let readout = dft_target(16).unwrap() * winv;
        let s = SimStack::with_readout(1, 4, 0.5, 1.0, readout, medium()).unwrap();
        let p = PhaseTensor::zeros(1, 16);
        let mut g = ChaCha8Rng::seed_from_u64(3);
        for kx in 0..4 {
            for ky in 0..4 {
                let z = plane_wave(4, bin_angle(kx, 4), bin_angle(ky, 4));
                let est = doa_estimate(&s, &p, &z, 0.0, 1, &mut g).unwrap();
                assert_eq!(est.bin, (kx, ky));
            }
        }
    }

    #[test]
    fn more_snapshots_lower_doa_error() {
        let s0 = stack(1, 4, 16);
        let w = layer_propagation(&s0, 1).unwrap();
        let winv = crate::linalg::solve(&w, &CMat::identity(16, 16)).unwrap();
        let s = SimStack::with_readout(1, 4, 0.5, 1.0, dft_target(16).unwrap() * winv, medium()).unwrap();
        let p = PhaseTensor::zeros(1, 16);
        let response = &s.readout * sim_response(&s, &p).unwrap();
        let mse = |snapshots: usize| {
            let mut total = 0.0;
            for t in 0..200 {
                let mut g = ChaCha8Rng::seed_from_u64(t);
                let (px, py) = (g.random_range(-PI..PI), g.random_range(-PI..PI));
                let z = plane_wave(4, px, py);
                let noise = (&response * &z).norm_squared() / 16.0;
                let est = doa_estimate(&s, &p, &z, noise, snapshots, &mut g).unwrap();
                let (ex, ey) = (wrap_pm_pi(est.psi_x - px), wrap_pm_pi(est.psi_y - py));
                total += 0.5 * (ex * ex + ey * ey);
            }
            total / 200.0
        };
        let (one, many) = (mse(1), mse(64));
        assert!(many <= one, "T=64 {many} vs T=1 {one}");
    }

    #[test]
    fn deeper_stack_fits_no_worse() {
        let target = doa_target(16, 36).unwrap();
        let norm = target.norm_squared();
        let schedule = TrainSchedule {
            learn_scale: true,
            max_iterations: 2000,
            ..TrainSchedule::default()
        };
        let median_loss = |layers: usize| {
            let s = SimStack::new(layers, 6, 0.5, 0.5, 16, medium()).unwrap();
            let mut v: Vec<f64> = (0..10)
                .map(|seed| sim_train(&s, &target, &schedule, seed).unwrap().final_loss() / norm)
                .collect();
            v.sort_by(f64::total_cmp);
            0.5 * (v[4] + v[5])
        };
        let (one, three) = (median_loss(1), median_loss(3));
        assert!(three <= one, "L=3 {three} vs L=1 {one}");
    }

    proptest! {
        #[test]
        fn layer_phase_offset_is_a_gauge(seed in any::<u64>(), layer in 0usize..3, c in -PI..PI) {
            let s = stack(3, 3, 4);
            let mut g = ChaCha8Rng::seed_from_u64(seed);
            let p = PhaseTensor::random(&mut g, 3, 9);
            let mut q = p.theta.clone();
            q.row_mut(layer).iter_mut().for_each(|t| *t += c);
            let q = PhaseTensor::new(q);
            let r0 = sim_response(&s, &p).unwrap();
            let r1 = sim_response(&s, &q).unwrap();
            prop_assert!(frobenius(&(r1 - r0 * Complex64::from_polar(1.0, c))) < 1e-10);
            let det: Complex64 = q.mask(layer).iter().product();
            prop_assert!((det.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn quantized_phases_stay_on_levels(seed in any::<u64>(), bits in 1u32..6) {
            let mut g = ChaCha8Rng::seed_from_u64(seed);
            let p = PhaseTensor::random(&mut g, 2, 9).quantized(bits).unwrap();
            let step = 2.0 * PI / (1u32 << bits) as f64;
            for t in p.theta.iter() {
                let k = t / step;
                prop_assert!((k - k.round()).abs() < 1e-9);
            }
        }
    }
}
