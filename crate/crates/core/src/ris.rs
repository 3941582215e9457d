//! Reflecting intelligent surfaces: anomalous-reflection phase profiles and
//! array-factor patterns.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::em::Medium;
use crate::linalg::wrap_phase;
use crate::{EspError, Result};

/// Direction in the front hemisphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Angle {
    /// Elevation from broadside, `[0, π/2]`.
    pub elevation: f64,
    /// Azimuth, `[0, 2π)`.
    pub azimuth: f64,
}

impl Angle {
    pub fn new(elevation: f64, azimuth: f64) -> Result<Self> {
        if !(elevation.is_finite() && (0.0..=FRAC_PI_2).contains(&elevation)) {
            return Err(EspError::param("elevation", "must lie in [0, pi/2]"));
        }
        if !azimuth.is_finite() {
            return Err(EspError::param("azimuth", "must be finite"));
        }
        Ok(Self {
            elevation,
            azimuth: wrap_phase(azimuth),
        })
    }

    pub fn from_degrees(elevation: f64, azimuth: f64) -> Result<Self> {
        Self::new(elevation.to_radians(), azimuth.to_radians())
    }

    pub fn broadside() -> Self {
        Self {
            elevation: 0.0,
            azimuth: 0.0,
        }
    }

    pub fn ux(&self) -> f64 {
        self.elevation.sin() * self.azimuth.cos()
    }

    pub fn uy(&self) -> f64 {
        self.elevation.sin() * self.azimuth.sin()
    }

    pub fn unit(&self) -> [f64; 3] {
        [self.ux(), self.uy(), self.elevation.cos()]
    }

    /// Great-circle distance to `other`, radians.
    pub fn separation(&self, other: &Angle) -> f64 {
        let (a, b) = (self.unit(), other.unit());
        let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
        dot.acos()
    }
}

/// Square panel of `side × side` phase-only cells, `ρ_{i,j} = e^{jθ_{i,j}}`.
/// Row `i` and column `j` of `phases` are cell indices `i, j = 1..side`.
#[derive(Debug, Clone, PartialEq)]
pub struct RisPanel {
    pub side: usize,
    pub spacing: f64,
    pub phases: DMatrix<f64>,
}

impl RisPanel {
    /// Panel with all phases zero.
    pub fn new(side: usize, spacing: f64) -> Result<Self> {
        if side == 0 {
            return Err(EspError::param("side", "must be >= 1"));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(EspError::param("spacing", "must be finite and > 0"));
        }
        Ok(Self {
            side,
            spacing,
            phases: DMatrix::zeros(side, side),
        })
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    /// Linear cell index `k = i + side·(j − 1)` (1-based `i`, `j`).
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i + self.side * (j - 1)
    }

    /// Applies the anomalous-reflection law. Only λ/2 spacing is supported.
    pub fn configure(&mut self, incident: &Angle, desired: &Angle, medium: &Medium) -> Result<()> {
        if (self.spacing - medium.wavelength() / 2.0).abs() > 1e-9 * medium.wavelength() {
            return Err(EspError::Unsupported(format!(
                "phase law assumes lambda/2 cells, got spacing {}",
                self.spacing
            )));
        }
        self.phases = anomalous_phase_profile(incident, desired, self.side);
        Ok(())
    }

    pub fn reflection(&self, i: usize, j: usize) -> Complex64 {
        Complex64::from_polar(1.0, self.phases[(i - 1, j - 1)])
    }
}

/// Phase profile `θ_{i,j} = −πi(u_x^inc + u_x^ref) − πj(u_y^inc + u_y^ref)`
/// for λ/2 cells, wrapped to `[0, 2π)`.
pub fn anomalous_phase_profile(incident: &Angle, desired: &Angle, side: usize) -> DMatrix<f64> {
    let sx = incident.ux() + desired.ux();
    let sy = incident.uy() + desired.uy();
    DMatrix::from_fn(side, side, |r, c| {
        let (i, j) = ((r + 1) as f64, (c + 1) as f64);
        let t = -PI * i * sx - PI * j * sy;
        if t.abs() < 1e-12 {
            0.0
        } else {
            wrap_phase(t)
        }
    })
}

/// Array-factor magnitude of the reflected field toward each direction.
pub fn reflected_pattern(panel: &RisPanel, incident: &Angle, directions: &[Angle], medium: &Medium) -> Vec<f64> {
    let step = medium.wavenumber() * panel.spacing;
    let rho = panel.phases.map(|t| Complex64::from_polar(1.0, t));
    let n = panel.side;
    directions
        .par_iter()
        .map(|dir| {
            let ax = step * (incident.ux() + dir.ux());
            let ay = step * (incident.uy() + dir.uy());
            let px: Vec<Complex64> = (1..=n).map(|i| Complex64::from_polar(1.0, ax * i as f64)).collect();
            let py: Vec<Complex64> = (1..=n).map(|j| Complex64::from_polar(1.0, ay * j as f64)).collect();
            let mut acc = Complex64::new(0.0, 0.0);
            for (c, yc) in py.iter().enumerate() {
                let mut col = Complex64::new(0.0, 0.0);
                for (r, xr) in px.iter().enumerate() {
                    col += rho[(r, c)] * xr;
                }
                acc += col * yc;
            }
            acc.norm()
        })
        .collect()
}

/// Hemisphere grid with `step` spacing in elevation and azimuth. Broadside
/// appears once.
pub fn hemisphere_grid(step: f64) -> Result<Vec<Angle>> {
    if !(step.is_finite() && step > 0.0) {
        return Err(EspError::param("step", "must be finite and > 0"));
    }
    let n_el = (FRAC_PI_2 / step).round() as usize;
    let n_az = (TAU / step).round() as usize;
    let mut grid = vec![Angle::broadside()];
    for e in 1..=n_el {
        let el = (e as f64 * step).min(FRAC_PI_2);
        for a in 0..n_az {
            grid.push(Angle {
                elevation: el,
                azimuth: a as f64 * step,
            });
        }
    }
    Ok(grid)
}

/// Direction of the largest pattern value on `grid` (first wins on ties).
pub fn pattern_peak(panel: &RisPanel, incident: &Angle, grid: &[Angle], medium: &Medium) -> Option<(Angle, f64)> {
    let values = reflected_pattern(panel, incident, grid, medium);
    let mut best: Option<(Angle, f64)> = None;
    for (a, v) in grid.iter().zip(values) {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((*a, v));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RisStructure {
    Diagonal,
    NondiagonalReciprocal,
    NondiagonalNonreciprocal,
}

/// Tunable degrees of freedom of a `K`-cell surface.
pub fn ris_dof(k: u64, structure: RisStructure) -> Result<u64> {
    if k == 0 {
        return Err(EspError::param("k", "must be >= 1"));
    }
    Ok(match structure {
        RisStructure::Diagonal => k,
        RisStructure::NondiagonalReciprocal => k * (k - 1) / 2,
        RisStructure::NondiagonalNonreciprocal => k * k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn medium() -> Medium {
        Medium::free_space(1.0).unwrap()
    }

    #[test]
    fn zero_profiles() {
        let p = anomalous_phase_profile(&Angle::broadside(), &Angle::broadside(), 8);
        assert!(p.iter().all(|t| *t == 0.0));
        let inc = Angle::from_degrees(35.0, 20.0).unwrap();
        let spec = Angle::from_degrees(35.0, 200.0).unwrap();
        let p = anomalous_phase_profile(&inc, &spec, 16);
        assert!(p.iter().all(|t| *t == 0.0));
    }

    #[test]
    fn retroreflection_gradient() {
        let inc = Angle::from_degrees(20.0, 10.0).unwrap();
        let p = anomalous_phase_profile(&inc, &inc, 6);
        let expect = wrap_phase(-TAU * inc.ux());
        for r in 0..5 {
            let d = wrap_phase(p[(r + 1, 0)] - p[(r, 0)]);
            assert!((d - expect).abs() < 1e-9 || (TAU - (d - expect).abs()) < 1e-9);
        }
    }

    #[test]
    fn matched_peak_equals_cell_count() {
        let m = medium();
        let mut panel = RisPanel::new(16, 0.5).unwrap();
        let inc = Angle::from_degrees(30.0, 45.0).unwrap();
        let des = Angle::from_degrees(50.0, 300.0).unwrap();
        panel.configure(&inc, &des, &m).unwrap();
        let v = reflected_pattern(&panel, &inc, &[des], &m)[0];
        assert!((v - 256.0).abs() < 1e-9);
    }

    #[test]
    fn broadside_peak_for_zero_phases() {
        let m = medium();
        let panel = RisPanel::new(8, 0.5).unwrap();
        let grid = hemisphere_grid(2f64.to_radians()).unwrap();
        let (peak, v) = pattern_peak(&panel, &Angle::broadside(), &grid, &m).unwrap();
        assert_eq!(peak, Angle::broadside());
        assert!((v - 64.0).abs() < 1e-9);
    }

    #[test]
    fn other_spacing_rejected() {
        let mut panel = RisPanel::new(4, 0.3).unwrap();
        assert!(panel
            .configure(&Angle::broadside(), &Angle::broadside(), &medium())
            .is_err());
    }

    #[test]
    fn dof_counts() {
        assert_eq!(ris_dof(4, RisStructure::Diagonal).unwrap(), 4);
        assert_eq!(ris_dof(4, RisStructure::NondiagonalReciprocal).unwrap(), 6);
        assert_eq!(ris_dof(4, RisStructure::NondiagonalNonreciprocal).unwrap(), 16);
        assert!(ris_dof(0, RisStructure::Diagonal).is_err());
    }

    #[test]
    fn angle_validation() {
        assert!(Angle::new(-0.1, 0.0).is_err());
        assert!(Angle::new(2.0, 0.0).is_err());
        assert!((Angle::new(0.3, -0.5).unwrap().azimuth - (TAU - 0.5)).abs() < 1e-15);
    }

    fn angle() -> impl Strategy<Value = Angle> {
        (0.0f64..80.0, 0.0f64..360.0).prop_map(|(e, a)| Angle::from_degrees(e, a).unwrap())
    }

    proptest! {
        #[test]
        fn profile_is_wrapped(inc in angle(), des in angle(), side in 1usize..12) {
            let p = anomalous_phase_profile(&inc, &des, side);
            prop_assert!(p.iter().all(|t| (0.0..2.0 * PI).contains(t)));
        }

        #[test]
        fn configured_panel_is_matched_toward_desired(inc in angle(), des in angle(), side in 2usize..10) {
            let m = medium();
            let mut panel = RisPanel::new(side, 0.5).unwrap();
            panel.configure(&inc, &des, &m).unwrap();
            let v = reflected_pattern(&panel, &inc, &[des], &m)[0];
            prop_assert!((v - (side * side) as f64).abs() < 1e-9 * (side * side) as f64);
        }

        #[test]
        fn common_phase_leaves_pattern_unchanged(inc in angle(), des in angle(), dirs in prop::collection::vec(angle(), 1..6), c in 0.0f64..6.0) {
            let m = medium();
            let mut panel = RisPanel::new(5, 0.5).unwrap();
            panel.configure(&inc, &des, &m).unwrap();
            let a = reflected_pattern(&panel, &inc, &dirs, &m);
            panel.phases = panel.phases.map(|t| wrap_phase(t + c));
            let b = reflected_pattern(&panel, &inc, &dirs, &m);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
