//! Scene geometry: array steering vectors and the per-path delay, Doppler
//! and attenuation derived from BS/UE/scatterer positions and velocities.
//!
//! Frame: right-handed, BS-centred for angles. Azimuth is measured in the
//! x-y plane from +x, elevation from +z (elevation 0 is the zenith). The
//! planar array lies in the x-y plane, element (p, q) sitting at
//! `d_a * (p, q, 0)`; antenna index is `p * cols + q`.

use nalgebra::{DVector, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub type Vec3 = Vector3<f64>;

/// Minimum separation between scene points before they count as coincident.
const COINCIDENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpaGeometry {
    pub rows: usize,
    pub cols: usize,
    /// Element spacing in meters.
    pub element_spacing: f64,
    /// Carrier frequency in Hz.
    pub carrier_frequency: f64,
}

impl UpaGeometry {
    pub fn new(
        rows: usize,
        cols: usize,
        element_spacing: f64,
        carrier_frequency: f64,
    ) -> Result<Self> {
        let geom = Self {
            rows,
            cols,
            element_spacing,
            carrier_frequency,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Array with half-wavelength spacing at `carrier_frequency`.
    pub fn half_wavelength(rows: usize, cols: usize, carrier_frequency: f64) -> Result<Self> {
        Self::new(
            rows,
            cols,
            SPEED_OF_LIGHT / carrier_frequency / 2.0,
            carrier_frequency,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidConfig(format!(
                "array size {}x{} must be at least 1x1",
                self.rows, self.cols
            )));
        }
        if !(self.element_spacing > 0.0) || !self.element_spacing.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "element spacing {} must be positive",
                self.element_spacing
            )));
        }
        if !(self.carrier_frequency > 0.0) || !self.carrier_frequency.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "carrier frequency {} must be positive",
                self.carrier_frequency
            )));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    pub fn num_elements(&self) -> usize {
        self.rows * self.cols
    }

    /// Wavenumber times element spacing, `2π d_a / λ`.
    pub(crate) fn phase_scale(&self) -> f64 {
        2.0 * PI * self.element_spacing / self.wavelength()
    }
}

/// Azimuth/elevation pair in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnglePair {
    pub azimuth: f64,
    pub elevation: f64,
}

impl AnglePair {
    /// Builds an angle pair, wrapping azimuth into (-π, π]. Elevation must lie
    /// in [0, π].
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        if !azimuth.is_finite() || !elevation.is_finite() {
            return Err(Error::NonFinite("angle"));
        }
        if !(0.0..=PI).contains(&elevation) {
            return Err(Error::InvalidConfig(format!(
                "elevation {elevation} outside [0, π]"
            )));
        }
        Ok(Self {
            azimuth: wrap_angle(azimuth),
            elevation,
        })
    }

    pub fn from_degrees(azimuth_deg: f64, elevation_deg: f64) -> Result<Self> {
        Self::new(azimuth_deg.to_radians(), elevation_deg.to_radians())
    }

    /// Angles of a (not necessarily normalized) direction vector.
    pub fn from_direction(dir: &Vec3) -> Result<Self> {
        let norm = dir.norm();
        if !(norm > 0.0) {
            return Err(Error::DegenerateGeometry("zero-length direction".into()));
        }
        let z = (dir.z / norm).clamp(-1.0, 1.0);
        Self::new(dir.y.atan2(dir.x), z.acos())
    }

    /// Unit vector pointing along this angle.
    pub fn direction(&self) -> Vec3 {
        let (st, ct) = self.elevation.sin_cos();
        let (sp, cp) = self.azimuth.sin_cos();
        Vec3::new(st * cp, st * sp, ct)
    }
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Vec3,
    #[serde(default = "Vec3::zeros")]
    pub velocity: Vec3,
    /// Variance of the complex Gaussian reflection factor.
    pub reflection_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub bs_position: Vec3,
    pub ue_position: Vec3,
    pub ue_velocity: Vec3,
    pub scatterers: Vec<Scatterer>,
    pub bs_array: UpaGeometry,
    pub ue_array: UpaGeometry,
}

impl SceneConfig {
    /// The evaluation scene: 28 GHz, 8x8 BS array, single-antenna UE moving
    /// at -40 km/h along x, one static scatterer.
    pub fn reference() -> Self {
        let fc = 28e9;
        Self {
            bs_position: Vec3::new(50.0, 4.75, 7.0),
            ue_position: Vec3::new(140.0, 0.0, 2.0),
            ue_velocity: Vec3::new(kmh_to_ms(-40.0), 0.0, 0.0),
            scatterers: vec![Scatterer {
                position: Vec3::new(60.0, 3.0, 3.0),
                velocity: Vec3::zeros(),
                reflection_variance: 10.0,
            }],
            bs_array: UpaGeometry::half_wavelength(8, 8, fc).expect("valid array"),
            ue_array: UpaGeometry::half_wavelength(1, 1, fc).expect("valid array"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bs_array.validate()?;
        self.ue_array.validate()?;
        if self.bs_array.carrier_frequency != self.ue_array.carrier_frequency {
            return Err(Error::InvalidConfig(
                "BS and UE arrays must share the carrier frequency".into(),
            ));
        }
        let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
        if !finite(&self.bs_position) || !finite(&self.ue_position) || !finite(&self.ue_velocity) {
            return Err(Error::NonFinite("scene endpoints"));
        }
        if (self.bs_position - self.ue_position).norm() <= COINCIDENT_TOL {
            return Err(Error::DegenerateGeometry("BS and UE coincide".into()));
        }
        for (i, s) in self.scatterers.iter().enumerate() {
            if !finite(&s.position) || !finite(&s.velocity) {
                return Err(Error::NonFinite("scatterer"));
            }
            if (s.position - self.bs_position).norm() <= COINCIDENT_TOL
                || (s.position - self.ue_position).norm() <= COINCIDENT_TOL
            {
                return Err(Error::DegenerateGeometry(format!(
                    "scatterer {i} coincides with an endpoint"
                )));
            }
            if !(s.reflection_variance >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "scatterer {i} reflection variance must be non-negative"
                )));
            }
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        self.bs_array.wavelength()
    }
}

pub fn kmh_to_ms(kmh: f64) -> f64 {
    kmh / 3.6
}

/// One propagation path. Index 0 is the line-of-sight path; index `k >= 1`
/// is the single-bounce path via scatterer `k - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathParams {
    pub index: usize,
    /// Angle of arrival at the BS.
    pub aoa: AnglePair,
    /// Angle of departure at the UE.
    pub aod: AnglePair,
    /// Aggregate delay in seconds.
    pub delay: f64,
    /// Aggregate Doppler in Hz; positive when the path is shortening.
    pub doppler: f64,
    /// Complex amplitude `b_{C,k}`. [`derive_paths`] fills NLoS paths with a
    /// unit reflection factor; see [`realize_gains`].
    pub gain: Complex64,
    /// `(r_{k,1}, r_{k,2})`: UE-to-scatterer and scatterer-to-BS lengths. For
    /// the LoS path the second leg is zero.
    pub leg_ranges: (f64, f64),
    /// Reflection-factor variance; `None` for the LoS path.
    pub reflection_variance: Option<f64>,
}

impl PathParams {
    pub fn is_line_of_sight(&self) -> bool {
        self.index == 0
    }

    /// Aggregate propagation length `c * delay`.
    pub fn aggregate_range(&self) -> f64 {
        self.leg_ranges.0 + self.leg_ranges.1
    }
}

/// Steering vector of a planar array, `exp(-j 2π/λ d_a (p cosφ sinθ + q sinφ sinθ))`
/// stacked row-major with `p` outer.
pub fn steering_vector(geom: &UpaGeometry, angle: &AnglePair) -> DVector<Complex64> {
    let (u, v) = direction_cosines(angle);
    let scale = geom.phase_scale();
    DVector::from_iterator(
        geom.num_elements(),
        (0..geom.rows).flat_map(move |p| {
            (0..geom.cols)
                .map(move |q| Complex64::from_polar(1.0, -scale * (p as f64 * u + q as f64 * v)))
        }),
    )
}

/// `(sinθ cosφ, sinθ sinφ)`, the in-plane direction cosines the array sees.
pub(crate) fn direction_cosines(angle: &AnglePair) -> (f64, f64) {
    let st = angle.elevation.sin();
    (st * angle.azimuth.cos(), st * angle.azimuth.sin())
}

/// Rate of change of `|a - b|` for points moving with `va`, `vb`.
fn range_rate(a: &Vec3, va: &Vec3, b: &Vec3, vb: &Vec3) -> f64 {
    let d = a - b;
    d.dot(&(va - vb)) / d.norm()
}

/// Derives the LoS path and one single-bounce path per scatterer.
///
/// Doppler is `-(d/dt of the total path length) / λ`, so a closing range
/// gives a positive Doppler. The BS is static.
pub fn derive_paths(scene: &SceneConfig) -> Result<Vec<PathParams>> {
    scene.validate()?;
    let lambda = scene.wavelength();
    let bs = scene.bs_position;
    let ue = scene.ue_position;
    let v_ue = scene.ue_velocity;
    let still = Vec3::zeros();

    let mut paths = Vec::with_capacity(1 + scene.scatterers.len());
    let r01 = (ue - bs).norm();
    let mut los = PathParams {
        index: 0,
        aoa: AnglePair::from_direction(&(ue - bs))?,
        aod: AnglePair::from_direction(&(bs - ue))?,
        delay: r01 / SPEED_OF_LIGHT,
        doppler: -range_rate(&ue, &v_ue, &bs, &still) / lambda,
        gain: Complex64::new(0.0, 0.0),
        leg_ranges: (r01, 0.0),
        reflection_variance: None,
    };
    los.gain = path_gain(&los, lambda, Complex64::new(1.0, 0.0))?;
    paths.push(los);

    for (i, s) in scene.scatterers.iter().enumerate() {
        let r1 = (ue - s.position).norm();
        let r2 = (s.position - bs).norm();
        let rate = range_rate(&ue, &v_ue, &s.position, &s.velocity)
            + range_rate(&s.position, &s.velocity, &bs, &still);
        let mut path = PathParams {
            index: i + 1,
            aoa: AnglePair::from_direction(&(s.position - bs))?,
            aod: AnglePair::from_direction(&(s.position - ue))?,
            delay: (r1 + r2) / SPEED_OF_LIGHT,
            doppler: -rate / lambda,
            gain: Complex64::new(0.0, 0.0),
            leg_ranges: (r1, r2),
            reflection_variance: Some(s.reflection_variance),
        };
        path.gain = path_gain(&path, lambda, Complex64::new(1.0, 0.0))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Free-space attenuation of a path. LoS: `λ / (4π r)`. NLoS: the bi-static
/// radar amplitude `λ / ((4π)^{3/2} r1 r2)` scaled by the reflection draw.
pub fn path_gain(path: &PathParams, wavelength: f64, reflection: Complex64) -> Result<Complex64> {
    let (r1, r2) = path.leg_ranges;
    if path.is_line_of_sight() {
        if !(r1 > 0.0) {
            return Err(Error::DegenerateGeometry("zero LoS range".into()));
        }
        let b = (wavelength.powi(2) / (4.0 * PI * r1).powi(2)).sqrt();
        Ok(Complex64::new(b, 0.0))
    } else {
        if !(r1 > 0.0) || !(r2 > 0.0) {
            return Err(Error::DegenerateGeometry(format!(
                "zero leg range on path {}",
                path.index
            )));
        }
        let amp = (wavelength.powi(2) / ((4.0 * PI).powi(3) * r1.powi(2) * r2.powi(2))).sqrt();
        Ok(reflection * amp)
    }
}

/// Replaces each NLoS path gain with its attenuation times the matching
/// reflection draw (`reflections[k - 1]` for path `k`).
pub fn realize_gains(
    paths: &mut [PathParams],
    wavelength: f64,
    reflections: &[Complex64],
) -> Result<()> {
    let nlos = paths.iter().filter(|p| !p.is_line_of_sight()).count();
    if reflections.len() != nlos {
        return Err(Error::DimensionMismatch {
            what: "reflection draws",
            expected: nlos,
            actual: reflections.len(),
        });
    }
    for path in paths.iter_mut().filter(|p| !p.is_line_of_sight()) {
        path.gain = path_gain(path, wavelength, reflections[path.index - 1])?;
    }
    Ok(())
}
