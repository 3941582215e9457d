//! Self-conjugating metasurface link: retrodirective beam alignment by a
//! modified power method with data carried in the conjugated phase.

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use std::f64::consts::TAU;

use crate::linalg::{
    complex_normal, complex_normal_vec, random_orthonormal, random_unit_vector, svd, wrap_phase, wrap_pm_pi, CMat, CVec,
};
use crate::{rng, EspError, Result};

/// Synthetic rank-`r` channel `H = Σ σ_i u_i v_iᴴ` (M × N).
#[derive(Debug, Clone)]
pub struct MimoChannel {
    pub h: CMat,
    pub singular_values: Vec<f64>,
    pub seed: u64,
}

impl MimoChannel {
    /// AP antenna count N.
    pub fn n(&self) -> usize {
        self.h.ncols()
    }

    /// SCM cell count M.
    pub fn m(&self) -> usize {
        self.h.nrows()
    }

    /// Dominant right singular vector, the beam the power method converges to.
    pub fn top_direction(&self) -> CVec {
        svd(&self.h).v.column(0).into_owned()
    }
}

/// Draws `H` with prescribed singular values and Haar-random singular bases.
pub fn make_channel(n: usize, m: usize, singular_values: &[f64], seed: u64) -> Result<MimoChannel> {
    let r = singular_values.len();
    if r == 0 || r > n.min(m) {
        return Err(EspError::param("rank", format!("must lie in 1..={}", n.min(m))));
    }
    if singular_values.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(EspError::param("singular_values", "must be finite and > 0"));
    }
    let mut g = rng::stream("scm-channel", seed, 0);
    let u = random_orthonormal(&mut g, m, r);
    let v = random_orthonormal(&mut g, n, r);
    let mut h = CMat::zeros(m, n);
    for (i, s) in singular_values.iter().enumerate() {
        h += u.column(i) * v.column(i).adjoint() * Complex64::from(*s);
    }
    Ok(MimoChannel {
        h,
        singular_values: singular_values.to_vec(),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modulation {
    Bpsk,
    Qpsk,
    Psk(u32),
}

impl Modulation {
    pub fn order(&self) -> u32 {
        match self {
            Modulation::Bpsk => 2,
            Modulation::Qpsk => 4,
            Modulation::Psk(m) => *m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order() < 2 {
            return Err(EspError::param("modulation", "PSK order must be >= 2"));
        }
        Ok(())
    }

    /// Phase of symbol `index`, `2π·index/order`.
    pub fn phase(&self, index: u32) -> f64 {
        TAU * (index % self.order()) as f64 / self.order() as f64
    }

    /// Nearest constellation phase; ties go to the smaller index.
    pub fn detect(&self, phase: f64) -> u32 {
        let p = wrap_phase(phase);
        let mut best = (0, f64::INFINITY);
        for k in 0..self.order() {
            let d = wrap_pm_pi(p - self.phase(k)).abs();
            if d < best.1 - 1e-12 {
                best = (k, d);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScmParams {
    pub tx_power: f64,
    /// SCM gain `g ∈ (0, 1]`.
    pub gain: f64,
    /// Noise power per SCM cell.
    pub sensor_noise: f64,
    /// Noise power per AP antenna.
    pub ap_noise: f64,
    pub modulation: Modulation,
}

impl ScmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tx_power.is_finite() && self.tx_power > 0.0) {
            return Err(EspError::param("tx_power", "must be finite and > 0"));
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(EspError::param("gain", "must lie in (0, 1]"));
        }
        if !(self.sensor_noise.is_finite() && self.sensor_noise >= 0.0) {
            return Err(EspError::param("sensor_noise", "must be finite and >= 0"));
        }
        if !(self.ap_noise.is_finite() && self.ap_noise >= 0.0) {
            return Err(EspError::param("ap_noise", "must be finite and >= 0"));
        }
        self.modulation.validate()
    }

    /// AP noise giving `SNR_max = P g² σ₁⁴ / σ²_AP` for this channel.
    pub fn ap_noise_for(channel: &MimoChannel, tx_power: f64, gain: f64, snr_max_db: f64) -> f64 {
        let s1 = channel.singular_values.iter().cloned().fold(0.0, f64::max);
        tx_power * gain * gain * s1.powi(4) / 10f64.powf(snr_max_db / 10.0)
    }
}

/// Outputs of one power-method iteration.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub y: CVec,
    pub x_next: CVec,
    pub u: Complex64,
    pub detected: u32,
}

/// One iteration: the AP sends `x[k−1]`, the SCM returns
/// `g e^{jθ} z*` with `z = √P H x + η`, and the AP observes
/// `y = Hᵀ r + n*`, i.e. `y = e^{jθ} A* x* + g e^{jθ} Hᵀ η* + n*`.
pub fn scm_step<R: Rng + ?Sized>(
    x: &CVec,
    channel: &MimoChannel,
    params: &ScmParams,
    data_phase: f64,
    rng: &mut R,
) -> Result<StepOutput> {
    if x.len() != channel.n() {
        return Err(EspError::DimensionMismatch(format!(
            "beam has {} entries for {} AP antennas",
            x.len(),
            channel.n()
        )));
    }
    let eta = if params.sensor_noise > 0.0 {
        complex_normal_vec(rng, channel.m(), params.sensor_noise)
    } else {
        CVec::zeros(channel.m())
    };
    let z = &channel.h * x * Complex64::from(params.tx_power.sqrt()) + eta;
    let rot = Complex64::from_polar(params.gain, data_phase);
    let r = z.conjugate() * rot;
    let mut y = channel.h.transpose() * r;
    if params.ap_noise > 0.0 {
        for v in y.iter_mut() {
            *v += complex_normal(rng, params.ap_noise).conj();
        }
    }
    let norm = y.norm();
    let x_next = if norm > 0.0 {
        y.conjugate() / Complex64::from(norm)
    } else {
        x.clone()
    };
    let u = x.dotc(&x_next);
    let detected = params.modulation.detect(-u.arg());
    Ok(StepOutput { y, x_next, u, detected })
}

/// Post-combining SNR of the echo produced by beam `x`:
/// `P g² ‖HᴴH x‖² / (σ²_AP + g² σ²_η ‖H̄ w‖²)`, `w` the unit signal direction.
pub fn beam_snr(x: &CVec, channel: &MimoChannel, params: &ScmParams) -> f64 {
    let s = channel.h.adjoint() * (&channel.h * x);
    let signal = params.tx_power * params.gain * params.gain * s.norm_squared();
    let sn = s.norm();
    let sensor = if sn > 0.0 && params.sensor_noise > 0.0 {
        let w = s.conjugate() / Complex64::from(sn);
        params.gain * params.gain * params.sensor_noise * (channel.h.conjugate() * w).norm_squared()
    } else {
        0.0
    };
    let noise = params.ap_noise + sensor;
    if noise > 0.0 {
        signal / noise
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub x: CVec,
    pub u: Complex64,
    pub snr_db: f64,
    pub sent: u32,
    pub detected: u32,
    /// `|v₁ᴴ x[k]|` against the dominant right singular vector.
    pub alignment: f64,
}

#[derive(Debug, Clone)]
pub struct LinkTrajectory {
    pub x0: CVec,
    pub records: Vec<StepRecord>,
}

impl LinkTrajectory {
    pub fn symbol_errors(&self) -> usize {
        self.records.iter().filter(|r| r.sent != r.detected).count()
    }

    /// Errors counted from iteration `from` (1-based) onward.
    pub fn symbol_errors_from(&self, from: usize) -> usize {
        self.records
            .iter()
            .skip(from.saturating_sub(1))
            .filter(|r| r.sent != r.detected)
            .count()
    }

    pub fn snr_db(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.snr_db).collect()
    }

    pub fn final_alignment(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.alignment)
    }
}

/// Runs the loop for `packet.len()` iterations from a random unit `x[0]`.
/// `SNR[k]` is [`beam_snr`] of `x[k]` in dB.
pub fn run_link<R: Rng + ?Sized>(
    channel: &MimoChannel,
    params: &ScmParams,
    packet: &[u32],
    rng: &mut R,
) -> Result<LinkTrajectory> {
    params.validate()?;
    if packet.is_empty() {
        return Err(EspError::param("packet", "needs at least one symbol"));
    }
    let x0 = random_unit_vector(rng, channel.n());
    run_link_from(channel, params, packet, x0, rng)
}

/// [`run_link`] from a given unit-norm `x[0]`.
pub fn run_link_from<R: Rng + ?Sized>(
    channel: &MimoChannel,
    params: &ScmParams,
    packet: &[u32],
    x0: CVec,
    rng: &mut R,
) -> Result<LinkTrajectory> {
    params.validate()?;
    if (x0.norm() - 1.0).abs() > 1e-12 {
        return Err(EspError::param("x0", "must have unit norm"));
    }
    let v1 = channel.top_direction();
    let mut x = x0.clone();
    let mut records = Vec::with_capacity(packet.len());
    for &sym in packet {
        let out = scm_step(&x, channel, params, params.modulation.phase(sym), rng)?;
        x = out.x_next;
        records.push(StepRecord {
            snr_db: 10.0 * beam_snr(&x, channel, params).log10(),
            alignment: v1.dotc(&x).norm(),
            x: x.clone(),
            u: out.u,
            sent: sym % params.modulation.order(),
            detected: out.detected,
        });
    }
    Ok(LinkTrajectory { x0, records })
}

/// `SNR_boot = SNR_max / N` in dB.
pub fn bootstrap_snr(snr_max_db: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(EspError::param("n", "must be >= 1"));
    }
    Ok(snr_max_db - 10.0 * (n as f64).log10())
}

/// Monte-Carlo setup for SNR-trajectory campaigns.
#[derive(Debug, Clone)]
pub struct LinkCampaign {
    pub n: usize,
    pub m: usize,
    pub singular_values: Vec<f64>,
    pub tx_power: f64,
    pub gain: f64,
    pub sensor_noise: f64,
    pub snr_max_db: f64,
    pub modulation: Modulation,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub seed: u64,
    pub trajectory: LinkTrajectory,
}

impl LinkCampaign {
    /// One trial: channel, `x[0]`, noise and data drawn from streams keyed by
    /// `seed`.
    pub fn run_trial(&self, seed: u64) -> Result<TrialResult> {
        let channel = make_channel(self.n, self.m, &self.singular_values, seed)?;
        let params = ScmParams {
            tx_power: self.tx_power,
            gain: self.gain,
            sensor_noise: self.sensor_noise,
            ap_noise: ScmParams::ap_noise_for(&channel, self.tx_power, self.gain, self.snr_max_db),
            modulation: self.modulation,
        };
        params.validate()?;
        let mut g = rng::stream("scm-link", seed, 0);
        let order = self.modulation.order();
        let packet: Vec<u32> = (0..self.iterations).map(|_| g.random_range(0..order)).collect();
        let trajectory = run_link(&channel, &params, &packet, &mut g)?;
        Ok(TrialResult { seed, trajectory })
    }

    /// Runs all seeds in parallel; results come back in seed order.
    pub fn run(&self, seeds: &[u64]) -> Result<Vec<TrialResult>> {
        if self.iterations == 0 {
            return Err(EspError::param("iterations", "must be >= 1"));
        }
        seeds.par_iter().map(|&s| self.run_trial(s)).collect()
    }
}

/// Median of each iteration's SNR across trials, dB.
pub fn median_snr(trials: &[TrialResult]) -> Vec<f64> {
    let Some(first) = trials.first() else {
        return vec![];
    };
    (0..first.trajectory.records.len())
        .map(|k| {
            median(
                &trials
                    .iter()
                    .map(|t| t.trajectory.records[k].snr_db)
                    .collect::<Vec<_>>(),
            )
        })
        .collect()
}

/// Median with the mean of the two central values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// First iteration (1-based) whose SNR is within `tol_db` of `target_db` and
/// stays there, if any.
pub fn convergence_iteration(snr_db: &[f64], target_db: f64, tol_db: f64) -> Option<usize> {
    let ok: Vec<bool> = snr_db.iter().map(|s| (s - target_db).abs() <= tol_db).collect();
    (0..ok.len()).find(|&k| ok[k..].iter().all(|b| *b)).map(|k| k + 1)
}
