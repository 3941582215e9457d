//! Python bindings for `esp-core`.

use esp_core::circuit::{
    dsa_optimize, impedance_matrix, mode_target, precoder_report, scatterer_channel, DipoleArray, DsaConfig,
    DsaOptions, PointScatterer,
};
use esp_core::dof::{self, ApertureGeometry, DofMethod, LinkGeometry, LinkMethod};
use esp_core::em::{Medium, Vec3};
use esp_core::modes::{self, coupling_matrix, mode_decomposition, SampledSpace};
use esp_core::ris::{self, Angle, RisStructure};
use esp_core::scm::{self, LinkCampaign, Modulation};
use esp_core::sim::{self, PhaseTensor, TrainSchedule};
use esp_core::{Complex64, EspError};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: EspError) -> PyErr {
    match e {
        EspError::InvalidParameter { .. } | EspError::DimensionMismatch(_) | EspError::Unsupported(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn medium(wavelength: f64) -> PyResult<Medium> {
    Medium::free_space(wavelength).map_err(err)
}

fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

/// Mode count of an aperture with side `lengths` (1, 2 or 3 entries).
#[pyfunction]
#[pyo3(signature = (lengths, method = "formula", wavelength = 1.0))]
fn dof_unbounded(lengths: Vec<f64>, method: &str, wavelength: f64) -> PyResult<f64> {
    let geometry = match lengths[..] {
        [length] => ApertureGeometry::Segment { length },
        [lx, ly] => ApertureGeometry::Rectangle { lx, ly },
        [lx, ly, lz] => ApertureGeometry::Box { lx, ly, lz },
        _ => return Err(PyValueError::new_err("lengths must have 1, 2 or 3 entries")),
    };
    let method = match method {
        "formula" => DofMethod::Formula,
        "lattice" => DofMethod::Lattice,
        _ => return Err(PyValueError::new_err("method must be 'formula' or 'lattice'")),
    };
    Ok(dof::dof_unbounded(&geometry, &medium(wavelength)?, method)
        .map_err(err)?
        .value)
}

/// Paraxial link DoF for `shape` in {"segments", "squares"}; squares take areas.
#[pyfunction]
#[pyo3(signature = (shape, tx, rx, distance, method = "classic", wavelength = 1.0))]
fn dof_link(shape: &str, tx: f64, rx: f64, distance: f64, method: &str, wavelength: f64) -> PyResult<f64> {
    let geometry = match shape {
        "segments" => LinkGeometry::Segments {
            lt: tx,
            lr: rx,
            d: distance,
        },
        "squares" => LinkGeometry::Squares {
            at: tx,
            ar: rx,
            d: distance,
        },
        _ => return Err(PyValueError::new_err("shape must be 'segments' or 'squares'")),
    };
    let method = match method {
        "classic" => LinkMethod::Classic,
        "corrected" => LinkMethod::Corrected,
        _ => return Err(PyValueError::new_err("method must be 'classic' or 'corrected'")),
    };
    Ok(dof::dof_link(&geometry, &medium(wavelength)?, method)
        .map_err(err)?
        .value)
}

/// Returns `(powers, water_level)`.
#[pyfunction]
fn water_filling(gains: Vec<f64>, noise_power: f64, total_power: f64) -> PyResult<(Vec<f64>, f64)> {
    let a = modes::water_filling(&gains, noise_power, total_power).map_err(err)?;
    Ok((a.powers, a.water_level))
}

#[pyfunction]
fn link_capacity(gains: Vec<f64>, noise_power: f64, total_power: f64) -> PyResult<f64> {
    modes::link_capacity(&gains, noise_power, total_power).map_err(err)
}

/// Singular values of the coupling between two parallel z-polarised segments
/// along x, separated by `distance` along y.
#[pyfunction]
#[pyo3(signature = (tx_length, rx_length, distance, pitch = 0.5, element_length = 0.01, wavelength = 1.0))]
fn segment_modes(
    tx_length: f64,
    rx_length: f64,
    distance: f64,
    pitch: f64,
    element_length: f64,
    wavelength: f64,
) -> PyResult<Vec<f64>> {
    let m = medium(wavelength)?;
    let seg = |y: f64, len: f64| {
        SampledSpace::segment(
            Vec3::new(0.0, y, 0.0),
            Vec3::x(),
            len,
            pitch * wavelength,
            Vec3::z(),
            element_length * wavelength,
            &m,
        )
    };
    let tx = seg(0.0, tx_length).map_err(err)?;
    let rx = seg(distance, rx_length).map_err(err)?;
    let g = coupling_matrix(&tx, &rx, &m).map_err(err)?;
    Ok(mode_decomposition(&g).map_err(err)?.singular_values)
}

#[pyfunction]
fn ris_dof(cells: u64, structure: &str) -> PyResult<u64> {
    let s = match structure {
        "diagonal" => RisStructure::Diagonal,
        "nondiagonal-reciprocal" => RisStructure::NondiagonalReciprocal,
        "nondiagonal-nonreciprocal" => RisStructure::NondiagonalNonreciprocal,
        _ => return Err(PyValueError::new_err("unknown structure")),
    };
    ris::ris_dof(cells, s).map_err(err)
}

#[pyfunction]
fn bootstrap_snr(snr_max_db: f64, n: usize) -> PyResult<f64> {
    scm::bootstrap_snr(snr_max_db, n).map_err(err)
}

fn angle(deg: (f64, f64)) -> PyResult<Angle> {
    Angle::from_degrees(deg.0, deg.1).map_err(err)
}

/// Square reflecting surface with half-wavelength cells.
#[pyclass(module = "esp")]
struct RisPanel {
    inner: ris::RisPanel,
    medium: Medium,
}

#[pymethods]
impl RisPanel {
    #[new]
    #[pyo3(signature = (side, wavelength = 1.0))]
    fn new(side: usize, wavelength: f64) -> PyResult<Self> {
        Ok(Self {
            inner: ris::RisPanel::new(side, wavelength / 2.0).map_err(err)?,
            medium: medium(wavelength)?,
        })
    }

    #[getter]
    fn cells(&self) -> usize {
        self.inner.cells()
    }

    /// Angles are `(elevation, azimuth)` in degrees.
    fn configure(&mut self, incident: (f64, f64), desired: (f64, f64)) -> PyResult<()> {
        self.inner
            .configure(&angle(incident)?, &angle(desired)?, &self.medium)
            .map_err(err)
    }

    #[getter]
    fn phases(&self) -> Vec<Vec<f64>> {
        self.inner
            .phases
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    fn pattern(&self, incident: (f64, f64), directions: Vec<(f64, f64)>) -> PyResult<Vec<f64>> {
        let dirs = directions.into_iter().map(angle).collect::<PyResult<Vec<_>>>()?;
        Ok(ris::reflected_pattern(
            &self.inner,
            &angle(incident)?,
            &dirs,
            &self.medium,
        ))
    }

    /// Strongest direction on a hemisphere grid: `(elevation, azimuth, magnitude)`.
    #[pyo3(signature = (incident, step_deg = 1.0))]
    fn peak(&self, incident: (f64, f64), step_deg: f64) -> PyResult<(f64, f64, f64)> {
        let grid = ris::hemisphere_grid(step_deg.to_radians()).map_err(err)?;
        let (a, v) = ris::pattern_peak(&self.inner, &angle(incident)?, &grid, &self.medium)
            .ok_or_else(|| PyRuntimeError::new_err("empty grid"))?;
        Ok((a.elevation.to_degrees(), a.azimuth.to_degrees(), v))
    }
}

/// Stacked metasurface with a square atom grid and `antennas` receivers.
#[pyclass(module = "esp")]
struct SimStack {
    inner: sim::SimStack,
    phases: PhaseTensor,
}

#[pymethods]
impl SimStack {
    #[new]
    #[pyo3(signature = (layers, side, antennas, atom_spacing = 0.5, layer_spacing = 0.5, wavelength = 1.0))]
    fn new(
        layers: usize,
        side: usize,
        antennas: usize,
        atom_spacing: f64,
        layer_spacing: f64,
        wavelength: f64,
    ) -> PyResult<Self> {
        let inner = sim::SimStack::new(layers, side, atom_spacing, layer_spacing, antennas, medium(wavelength)?)
            .map_err(err)?;
        let phases = PhaseTensor::zeros(layers, inner.atoms());
        Ok(Self { inner, phases })
    }

    #[getter]
    fn atoms(&self) -> usize {
        self.inner.atoms()
    }

    #[getter]
    fn phases(&self) -> Vec<Vec<f64>> {
        self.phases
            .theta
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    /// Fits the 2D-DFT target; returns the loss history normalised by the
    /// target energy. The trained phases are kept.
    #[pyo3(signature = (seed = 0, max_iterations = 10_000, learning_rate = 0.1))]
    fn train(&mut self, seed: u64, max_iterations: usize, learning_rate: f64) -> PyResult<Vec<f64>> {
        let target = sim::doa_target(self.inner.antennas(), self.inner.atoms()).map_err(err)?;
        let schedule = TrainSchedule {
            learning_rate,
            max_iterations,
            learn_scale: true,
            ..TrainSchedule::default()
        };
        let r = sim::sim_train(&self.inner, &target, &schedule, seed).map_err(err)?;
        let norm = target.norm_squared();
        self.phases = r.phases;
        Ok(r.history.iter().map(|l| l / norm).collect())
    }

    /// Estimates `(psi_x, psi_y)` of a plane wave with the given electrical angles.
    #[pyo3(signature = (psi_x, psi_y, noise_power = 0.0, snapshots = 1, seed = 0))]
    fn estimate_doa(
        &self,
        psi_x: f64,
        psi_y: f64,
        noise_power: f64,
        snapshots: usize,
        seed: u64,
    ) -> PyResult<(f64, f64)> {
        let side = (self.inner.atoms() as f64).sqrt().round() as usize;
        let z = sim::plane_wave(side, psi_x, psi_y);
        let mut g = esp_core::rng::seeded(seed);
        let e = sim::doa_estimate(&self.inner, &self.phases, &z, noise_power, snapshots, &mut g).map_err(err)?;
        Ok((e.psi_x, e.psi_y))
    }
}

/// Self-conjugating link campaign; `run` returns per-iteration SNR in dB.
#[pyclass(module = "esp")]
struct ScmLink {
    inner: LinkCampaign,
}

#[pymethods]
impl ScmLink {
    #[new]
    #[pyo3(signature = (n, m, singular_values, snr_max_db, iterations, modulation = "bpsk", sensor_noise = 0.0))]
    fn new(
        n: usize,
        m: usize,
        singular_values: Vec<f64>,
        snr_max_db: f64,
        iterations: usize,
        modulation: &str,
        sensor_noise: f64,
    ) -> PyResult<Self> {
        let modulation = match modulation {
            "bpsk" => Modulation::Bpsk,
            "qpsk" => Modulation::Qpsk,
            other => match other.strip_prefix("psk").and_then(|o| o.parse().ok()) {
                Some(order) => Modulation::Psk(order),
                None => return Err(PyValueError::new_err("modulation must be bpsk, qpsk or pskN")),
            },
        };
        Ok(Self {
            inner: LinkCampaign {
                n,
                m,
                singular_values,
                tx_power: 1.0,
                gain: 1.0,
                sensor_noise,
                snr_max_db,
                modulation,
                iterations,
            },
        })
    }

    fn run(&self, seed: u64) -> PyResult<Vec<f64>> {
        Ok(self.inner.run_trial(seed).map_err(err)?.trajectory.snr_db())
    }

    /// Median SNR trajectory over `seeds`.
    fn median(&self, seeds: Vec<u64>) -> PyResult<Vec<f64>> {
        let trials = self.inner.run(&seeds).map_err(err)?;
        Ok(scm::median_snr(&trials))
    }
}

/// Fits a hexagonal DSA to the strongest `n_active` modes of a scattering
/// channel toward a receive segment. Returns `(leakage_db, gain_loss_db, residual)`.
#[pyfunction]
#[pyo3(signature = (rings, spacing, n_active, receiver_center, receiver_length, scatterers, restarts = 8, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn dsa_precoder(
    rings: usize,
    spacing: f64,
    n_active: usize,
    receiver_center: [f64; 3],
    receiver_length: f64,
    scatterers: Vec<([f64; 3], (f64, f64))>,
    restarts: usize,
    seed: u64,
) -> PyResult<(f64, Vec<f64>, f64)> {
    let m = medium(1.0)?;
    let array = DipoleArray::hexagonal(rings, spacing, Vec3::z(), 0.01, 0.0).map_err(err)?;
    let z = impedance_matrix(&array, &m).map_err(err)?;
    let rx = SampledSpace::segment(
        vec3(receiver_center),
        Vec3::y(),
        receiver_length,
        0.5,
        Vec3::z(),
        0.01,
        &m,
    )
    .map_err(err)?;
    let scatterers: Vec<PointScatterer> = scatterers
        .into_iter()
        .map(|(p, (re, im))| PointScatterer {
            position: vec3(p),
            orientation: Vec3::z(),
            reflectivity: Complex64::new(re, im),
        })
        .collect();
    let h = scatterer_channel(&array, &scatterers, &rx, &m).map_err(err)?;
    let config = DsaConfig::new(array.len(), n_active).map_err(err)?;
    let (target, ideal) = mode_target(&z, &h, n_active, 1.0).map_err(err)?;
    let opts = DsaOptions {
        restarts,
        seed,
        ..DsaOptions::default()
    };
    let sol = dsa_optimize(&z, &config, &h, &target, &opts).map_err(err)?;
    let rep = precoder_report(&z, &config, &h, &sol, &ideal).map_err(err)?;
    Ok((rep.leakage_db, rep.gain_loss_db, sol.residual))
}

#[pymodule]
fn esp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", esp_core::VERSION)?;
    m.add_function(wrap_pyfunction!(dof_unbounded, m)?)?;
    m.add_function(wrap_pyfunction!(dof_link, m)?)?;
    m.add_function(wrap_pyfunction!(water_filling, m)?)?;
    m.add_function(wrap_pyfunction!(link_capacity, m)?)?;
    m.add_function(wrap_pyfunction!(segment_modes, m)?)?;
    m.add_function(wrap_pyfunction!(ris_dof, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_snr, m)?)?;
    m.add_function(wrap_pyfunction!(dsa_precoder, m)?)?;
    m.add_class::<RisPanel>()?;
    m.add_class::<SimStack>()?;
    m.add_class::<ScmLink>()?;
    Ok(())
}
