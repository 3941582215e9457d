//! Free-space electromagnetics for monochromatic sources.
//!
//! Time convention is `e^{+jωt}`; outgoing spherical waves carry
//! `e^{-jκ₀|r|}`. All quantities are complex envelopes at a single frequency.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::{EspError, Result};

pub type Vec3 = Vector3<f64>;
pub type CVec3 = Vector3<Complex64>;
/// 3×3 complex dyadic, field per unit current moment (V/m per A·m).
pub type ComplexDyadic = Matrix3<Complex64>;

/// Free-space impedance η₀ in ohms.
pub const FREE_SPACE_IMPEDANCE: f64 = 376.730_313_412;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default relative tolerance of [`is_radiating`].
pub const RADIATING_TOLERANCE: f64 = 1e-9;

const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Homogeneous propagation medium. The wavenumber is always derived from the
/// wavelength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Medium {
    wavelength: f64,
    impedance: f64,
}

impl Medium {
    pub fn new(wavelength: f64, impedance: f64) -> Result<Self> {
        if !(wavelength.is_finite() && wavelength > 0.0) {
            return Err(EspError::param("wavelength", "must be finite and > 0"));
        }
        if !(impedance.is_finite() && impedance > 0.0) {
            return Err(EspError::param("impedance", "must be finite and > 0"));
        }
        Ok(Self { wavelength, impedance })
    }

    /// Free space at the given wavelength.
    pub fn free_space(wavelength: f64) -> Result<Self> {
        Self::new(wavelength, FREE_SPACE_IMPEDANCE)
    }

    /// Free space at a carrier frequency in Hz.
    pub fn from_frequency(frequency: f64) -> Result<Self> {
        if !(frequency.is_finite() && frequency > 0.0) {
            return Err(EspError::param("frequency", "must be finite and > 0"));
        }
        Self::free_space(SPEED_OF_LIGHT / frequency)
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn impedance(&self) -> f64 {
        self.impedance
    }

    /// κ₀ = 2π/λ.
    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }
}

/// A Hertzian dipole: an infinitesimal current element of moment `l·a·p̂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurrentElement {
    pub position: Vec3,
    pub orientation: Vec3,
    pub length: f64,
    pub amplitude: Complex64,
}

impl CurrentElement {
    pub fn new(position: Vec3, orientation: Vec3, length: f64, amplitude: Complex64) -> Result<Self> {
        check_unit(&orientation, "orientation")?;
        if !(length.is_finite() && length > 0.0) {
            return Err(EspError::param("length", "must be finite and > 0"));
        }
        if !position.iter().all(|c| c.is_finite()) {
            return Err(EspError::param("position", "must be finite"));
        }
        Ok(Self {
            position,
            orientation,
            length,
            amplitude,
        })
    }

    /// Current moment `l·a·p̂` (A·m).
    pub fn moment(&self) -> CVec3 {
        self.orientation.map(|c| Complex64::from(c * self.length)) * self.amplitude
    }
}

fn check_unit(v: &Vec3, name: &'static str) -> Result<()> {
    if (v.norm() - 1.0).abs() > 1e-12 {
        return Err(EspError::param(
            name,
            format!("must be a unit vector, |v| = {}", v.norm()),
        ));
    }
    Ok(())
}

/// The three bracketed terms of the dyadic Green's function, each already
/// multiplied by the common prefactor: radiative (1/r), intermediate (1/r²)
/// and reactive (1/r³). Their sum is [`green_dyadic`].
pub fn green_terms(r: &Vec3, medium: &Medium) -> Result<[ComplexDyadic; 3]> {
    let dist = r.norm();
    if !(dist > 0.0) || !dist.is_finite() {
        return Err(EspError::Singular(format!("|r| = {dist}")));
    }
    let lambda = medium.wavelength();
    let k0 = medium.wavenumber();
    let rhat = r / dist;
    let outer = rhat * rhat.transpose();
    let eye = Matrix3::<f64>::identity();
    let transverse = eye - outer;
    let longitudinal = eye - 3.0 * outer;

    let prefactor = -J * medium.impedance() * Complex64::from_polar(1.0, -k0 * dist) / (2.0 * lambda * dist);
    let inv_kr = lambda / (2.0 * PI * dist);

    let cast = |m: Matrix3<f64>| m.map(Complex64::from);
    let radiative = cast(transverse) * prefactor;
    let intermediate = cast(longitudinal) * (prefactor * (-J * inv_kr));
    let reactive = cast(longitudinal) * (prefactor * (-inv_kr * inv_kr));
    Ok([radiative, intermediate, reactive])
}

/// Free-space dyadic Green's function `G_e(r)`.
///
/// `E(r) = G_e(r - s) · (l a p̂)` for a Hertzian dipole at `s`.
pub fn green_dyadic(r: &Vec3, medium: &Medium) -> Result<ComplexDyadic> {
    let [a, b, c] = green_terms(r, medium)?;
    Ok(a + b + c)
}

/// Bilinear coupling `p̂_a · G · p̂_b`.
pub fn project(g: &ComplexDyadic, a: &Vec3, b: &Vec3) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..3 {
        for k in 0..3 {
            acc += g[(i, k)] * (a[i] * b[k]);
        }
    }
    acc
}

/// Electric field at `r` radiated by a set of current elements.
pub fn field_from_currents(elements: &[CurrentElement], r: &Vec3, medium: &Medium) -> Result<CVec3> {
    let mut field = CVec3::zeros();
    for el in elements {
        let sep = r - el.position;
        if sep.norm() == 0.0 {
            return Err(EspError::Singular(format!(
                "evaluation point coincides with element at {:?}",
                el.position
            )));
        }
        field += green_dyadic(&sep, medium)? * el.moment();
    }
    Ok(field)
}

/// Far-field pattern factor `jκ₀η r̂×(r̂×J̃)` along `direction`.
///
/// The spherical spreading factor `e^{-jκ₀R}/(4πR)` is left to the caller.
/// The source spectrum uses `e^{+jκ₀ r̂·r_k}` so that the pattern matches the
/// `e^{-jκ₀|r - r_k|}` phase of each element at large range.
pub fn far_field(elements: &[CurrentElement], direction: &Vec3, medium: &Medium) -> Result<CVec3> {
    check_unit(direction, "direction")?;
    let k0 = medium.wavenumber();
    let mut spectrum = CVec3::zeros();
    for el in elements {
        let phase = Complex64::from_polar(1.0, k0 * direction.dot(&el.position));
        spectrum += el.moment() * phase;
    }
    let dir = direction.map(Complex64::from);
    let inner = dir.cross(&spectrum);
    Ok(dir.cross(&inner) * (J * k0 * medium.impedance()))
}

/// Spherical spreading factor `e^{-jκ₀R}/(4πR)` applied to a far-field
/// pattern to obtain the field at range `R`.
pub fn spherical_spreading(range: f64, medium: &Medium) -> Complex64 {
    Complex64::from_polar(1.0, -medium.wavenumber() * range) / (4.0 * PI * range)
}

/// True when `k` lies on the radiation sphere `|k|² = κ₀²` within a relative
/// tolerance.
pub fn is_radiating(k: &Vec3, medium: &Medium, tolerance: f64) -> bool {
    let k0sq = medium.wavenumber().powi(2);
    (k.norm_squared() - k0sq).abs() <= tolerance * k0sq
}

/// Visible-region predicate for transverse wavenumbers of a planar source.
pub fn is_visible(kx: f64, ky: f64, medium: &Medium) -> bool {
    kx * kx + ky * ky <= medium.wavenumber().powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn medium() -> Medium {
        Medium::free_space(0.01).unwrap()
    }

    fn fro(m: &ComplexDyadic) -> f64 {
        m.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn near_terms_small_at_hundred_wavelengths() {
        let m = medium();
        let r = Vec3::new(0.3, -0.4, 0.866).normalize() * 100.0 * m.wavelength();
        let [rad, mid, reac] = green_terms(&r, &m).unwrap();
        assert!(fro(&mid) < 0.02 * fro(&rad));
        assert!(fro(&reac) < 0.02 * fro(&rad));
    }

    #[test]
    fn radiative_term_is_transverse() {
        let m = medium();
        let r = Vec3::new(1.0, 2.0, -0.5) * m.wavelength();
        let [rad, _, _] = green_terms(&r, &m).unwrap();
        let rhat = (r / r.norm()).map(Complex64::from);
        assert!((rad * rhat).norm() < 1e-12 * fro(&rad));
    }

    #[test]
    fn reciprocity_random() {
        let m = medium();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ) * 0.05;
            let g = green_dyadic(&r, &m).unwrap();
            let gm = green_dyadic(&-r, &m).unwrap().transpose();
            let scale = fro(&g);
            for (a, b) in g.iter().zip(gm.iter()) {
                assert!((a - b).norm() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn zero_separation_is_singular() {
        assert!(matches!(
            green_dyadic(&Vec3::zeros(), &medium()),
            Err(EspError::Singular(_))
        ));
    }

    #[test]
    fn coincident_field_point_errors() {
        let m = medium();
        let el = CurrentElement::new(Vec3::zeros(), Vec3::z(), 1e-4, Complex64::new(1.0, 0.0)).unwrap();
        assert!(field_from_currents(&[el], &Vec3::zeros(), &m).is_err());
    }

    #[test]
    fn doubling_amplitudes_doubles_field() {
        let m = medium();
        let els: Vec<_> = (0..3)
            .map(|i| {
                CurrentElement::new(
                    Vec3::new(i as f64 * 0.003, 0.0, 0.001 * i as f64),
                    Vec3::new(0.0, 0.6, 0.8),
                    1e-4,
                    Complex64::new(0.3 * i as f64 + 0.1, -0.7),
                )
                .unwrap()
            })
            .collect();
        let doubled: Vec<_> = els
            .iter()
            .map(|e| CurrentElement {
                amplitude: e.amplitude * 2.0,
                ..*e
            })
            .collect();
        let p = Vec3::new(0.02, 0.05, -0.01);
        let a = field_from_currents(&els, &p, &m).unwrap();
        let b = field_from_currents(&doubled, &p, &m).unwrap();
        // power-of-two scaling is exact in floating point
        assert_eq!(a * Complex64::from(2.0), b);
    }

    #[test]
    fn no_radiation_along_dipole_axis() {
        let m = medium();
        let el = CurrentElement::new(Vec3::zeros(), Vec3::z(), 1e-4, Complex64::new(1.0, 0.0)).unwrap();
        let r = Vec3::z() * 1000.0 * m.wavelength();
        let [rad, _, _] = green_terms(&r, &m).unwrap();
        let e = rad * el.moment();
        assert!(e.norm() < 1e-15);
    }

    #[test]
    fn half_wave_pair_cancels_endfire() {
        let m = medium();
        let lam = m.wavelength();
        let els: Vec<_> = [-0.25, 0.25]
            .iter()
            .map(|x| {
                CurrentElement::new(
                    Vec3::new(x * lam, 0.0, 0.0),
                    Vec3::z(),
                    lam / 100.0,
                    Complex64::new(1.0, 0.0),
                )
                .unwrap()
            })
            .collect();
        let broadside = field_from_currents(&els, &(Vec3::y() * 1000.0 * lam), &m)
            .unwrap()
            .norm();
        let endfire = field_from_currents(&els, &(Vec3::x() * 1000.0 * lam), &m)
            .unwrap()
            .norm();
        assert!(endfire < 1e-3 * broadside, "endfire {endfire} broadside {broadside}");
    }

    #[test]
    fn far_field_transverse_and_consistent() {
        let m = medium();
        let lam = m.wavelength();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let els: Vec<_> = (0..4)
            .map(|i| {
                let o = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                CurrentElement::new(
                    Vec3::new(i as f64 * 2.0 * lam / 3.0, 0.0, 0.0),
                    o,
                    lam / 50.0,
                    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                )
                .unwrap()
            })
            .collect();
        for _ in 0..20 {
            let dir = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let ff = far_field(&els, &dir, &m).unwrap();
            let dot: Complex64 = ff.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
            assert!(dot.norm() < 1e-10 * ff.norm());

            let range = 1e4 * lam;
            let predicted = ff * spherical_spreading(range, &m);
            let exact = field_from_currents(&els, &(dir * range), &m).unwrap();
            assert!((predicted - exact).norm() < 0.01 * exact.norm());
        }
    }

    #[test]
    fn far_field_single_element_magnitude() {
        let m = medium();
        let a = Complex64::new(0.6, -0.8) * 2.5;
        let l = m.wavelength() / 20.0;
        let el = CurrentElement::new(Vec3::new(0.01, 0.02, 0.0), Vec3::z(), l, a).unwrap();
        let ff = far_field(&[el], &Vec3::x(), &m).unwrap();
        let expected = m.wavenumber() * m.impedance() * l * a.norm();
        assert!((ff.norm() - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn far_field_rejects_non_unit() {
        assert!(far_field(&[], &Vec3::new(1.0, 1.0, 0.0), &medium()).is_err());
    }

    #[test]
    fn radiating_predicate() {
        let m = medium();
        let k0 = m.wavenumber();
        assert!(is_radiating(&Vec3::new(k0, 0.0, 0.0), &m, RADIATING_TOLERANCE));
        assert!(!is_radiating(&Vec3::new(k0, k0, 0.0), &m, RADIATING_TOLERANCE));
        assert!(!is_radiating(&Vec3::zeros(), &m, RADIATING_TOLERANCE));
        assert!(is_visible(0.5 * k0, 0.5 * k0, &m));
        assert!(!is_visible(k0, 0.1 * k0, &m));
    }

    #[test]
    fn medium_validation() {
        assert!(Medium::new(-1.0, 377.0).is_err());
        assert!(Medium::new(1.0, 0.0).is_err());
        let m = Medium::from_frequency(28e9).unwrap();
        assert!((m.wavelength() - 0.010_706_873).abs() < 1e-8);
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    fn element() -> impl Strategy<Value = CurrentElement> {
        (vec3(), vec3(), -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("orientation", |(_, o, _, _)| o.norm() > 0.1)
            .prop_map(|(p, o, a, b)| CurrentElement::new(p * 0.02, o.normalize(), 1e-4, Complex64::new(a, b)).unwrap())
    }

    proptest! {
        #[test]
        fn dyadic_is_reciprocal(r in vec3().prop_filter("separation", |r| r.norm() > 1e-3)) {
            let m = medium();
            let g = green_dyadic(&r, &m).unwrap();
            let gm = green_dyadic(&-r, &m).unwrap().transpose();
            for (a, b) in g.iter().zip(gm.iter()) {
                prop_assert!((a - b).norm() <= 1e-12 * fro(&g));
            }
        }

        #[test]
        fn fields_superpose(
            a in prop::collection::vec(element(), 1..4),
            b in prop::collection::vec(element(), 1..4),
            r in vec3(),
        ) {
            let m = medium();
            let at = r + Vec3::new(0.0, 0.0, 0.5);
            let both: Vec<CurrentElement> = a.iter().chain(&b).cloned().collect();
            let sum = field_from_currents(&a, &at, &m).unwrap() + field_from_currents(&b, &at, &m).unwrap();
            let joint = field_from_currents(&both, &at, &m).unwrap();
            prop_assert!((joint - sum).norm() <= 1e-12 * sum.norm().max(1e-300));
        }

        #[test]
        fn far_field_has_no_radial_part(a in prop::collection::vec(element(), 1..4), d in vec3()) {
            prop_assume!(d.norm() > 0.1);
            let u = d.normalize();
            let e = far_field(&a, &u, &medium()).unwrap();
            let radial = e.x * u.x + e.y * u.y + e.z * u.z;
            prop_assert!(radial.norm() <= 1e-12 * e.norm().max(1e-300));
        }
    }
}
