//! UE identification and localization, and scatterer localization on the
//! bi-static ellipsoid whose foci are the BS and the UE.
//!
//! All positions are relative to the BS.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::geometry::{AnglePair, Vec3};

/// An (AoA, range) pair produced by the estimator chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetCandidate {
    pub angle: AnglePair,
    /// Aggregate range for NLoS, direct range for LoS, m.
    pub range: f64,
    pub aoa_index: usize,
    pub doppler_index: usize,
    pub range_index: usize,
    /// Received power in the beam the candidate came from, `wᴴ R_x w`.
    pub beam_power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidParams {
    /// Semi-major axis, half the aggregate range.
    pub a: f64,
    /// Half the BS-UE distance.
    pub c: f64,
    /// `a² - c²`.
    pub b2: f64,
}

impl EllipsoidParams {
    /// Fails when the aggregate range does not exceed the baseline, which
    /// leaves no ellipsoid (or a degenerate segment).
    pub fn new(aggregate_range: f64, baseline: f64) -> Result<Self> {
        if !aggregate_range.is_finite() || !baseline.is_finite() {
            return Err(Error::NonFinite("ellipsoid ranges"));
        }
        if !(baseline > 0.0) {
            return Err(Error::DegenerateGeometry("zero BS-UE baseline".into()));
        }
        let a = 0.5 * aggregate_range;
        let c = 0.5 * baseline;
        let b2 = a * a - c * c;
        if !(b2 > 0.0) {
            return Err(Error::InfeasibleEllipsoid {
                aggregate: aggregate_range,
                baseline,
            });
        }
        Ok(Self { a, c, b2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Ue,
    Scatterer,
}

impl TargetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetKind::Ue => "ue",
            TargetKind::Scatterer => "scatterer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationEstimate {
    pub position: Vec3,
    pub kind: TargetKind,
}

/// Angle offset `p_rot = (0, π/2) - p_UE` taking global angles to the frame
/// where the BS→UE direction is `+x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationAngles {
    pub azimuth: f64,
    pub elevation: f64,
}

impl RotationAngles {
    pub fn toward(ue: &AnglePair) -> Self {
        Self {
            azimuth: -ue.azimuth,
            elevation: FRAC_PI_2 - ue.elevation,
        }
    }
}

/// Global-to-local frame change: rotate about `z` by the azimuth offset, then
/// about the new `y` axis by the elevation offset (positive offsets tilt `+z`
/// toward `+x`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRotation {
    matrix: Matrix3<f64>,
}

impl FrameRotation {
    pub fn new(p_rot: RotationAngles) -> Self {
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), p_rot.azimuth);
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), p_rot.elevation);
        Self {
            matrix: (ry * rz).into_inner(),
        }
    }

    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        self.matrix * p
    }

    pub fn to_global(&self, p: &Vec3) -> Vec3 {
        self.matrix.transpose() * p
    }
}

/// Global-to-local rotation of a point; [`rotate_back`] undoes it.
pub fn rotate_coordinates(point: &Vec3, p_rot: RotationAngles) -> Vec3 {
    FrameRotation::new(p_rot).to_local(point)
}

/// Inverse of [`rotate_coordinates`] for the same `p_rot`.
pub fn rotate_back(point: &Vec3, p_rot: RotationAngles) -> Vec3 {
    FrameRotation::new(p_rot).to_global(point)
}

/// Picks the smallest-range candidate as the UE. Ranges within `tie_tol` of
/// each other count as equal; among those the strongest beam wins, then the
/// lowest `(aoa, doppler, range)` index. Returns the UE and the remaining candidates in input order.
pub fn identify_ue(
    candidates: &[TargetCandidate],
    tie_tol: f64,
) -> Result<(TargetCandidate, Vec<TargetCandidate>)> {
    let min = candidates
        .iter()
        .map(|c| c.range)
        .min_by(f64::total_cmp)
        .ok_or(Error::NoCandidates)?;
    let (pos, ue) = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.range <= min + tie_tol)
        .min_by(|(_, a), (_, b)| {
            b.beam_power.total_cmp(&a.beam_power).then(
                (a.aoa_index, a.doppler_index, a.range_index).cmp(&(
                    b.aoa_index,
                    b.doppler_index,
                    b.range_index,
                )),
            )
        })
        .expect("the minimum is always within tolerance of itself");
    let rest = candidates
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != pos)
        .map(|(_, c)| *c)
        .collect();
    Ok((*ue, rest))
}

/// `Ω₀ = r (sinθ cosφ, sinθ sinφ, cosθ)`.
pub fn locate_ue(angle: &AnglePair, range: f64) -> Result<LocationEstimate> {
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::DegenerateGeometry(format!(
            "UE range must be positive, got {range}"
        )));
    }
    Ok(LocationEstimate {
        position: angle.direction() * range,
        kind: TargetKind::Ue,
    })
}

/// Below this `|cos φ̃|` the `y`-based form replaces `y = x tan φ̃`.
const AZIMUTH_SINGULAR: f64 = 1e-6;
/// Below this `sin θ̃` the ray is taken as the local `z` axis.
const ELEVATION_SINGULAR: f64 = 1e-12;

/// Intersection of the ray from the BS along `angle` with the ellipsoid of
/// aggregate range `aggregate_range` whose foci are the BS and `ue_location`.
pub fn locate_scatterer(
    angle: &AnglePair,
    aggregate_range: f64,
    ue_location: &Vec3,
) -> Result<LocationEstimate> {
    let baseline = ue_location.norm();
    let ell = EllipsoidParams::new(aggregate_range, baseline)?;
    let ue_angle = AnglePair::from_direction(ue_location)?;
    let frame = FrameRotation::new(RotationAngles::toward(&ue_angle));
    let local = frame.to_local(&angle.direction());
    let (phi, theta) = (local.y.atan2(local.x), local.z.clamp(-1.0, 1.0).acos());
    let point = solve_local(&ell, phi, theta);
    Ok(LocationEstimate {
        position: frame.to_global(&point),
        kind: TargetKind::Scatterer,
    })
}

/// Local-frame solution of
/// `(x - c)²/a² + (y² + z²)/b² = 1`, `y = x tan φ̃`, `z = |S| cos θ̃`.
fn solve_local(ell: &EllipsoidParams, phi: f64, theta: f64) -> Vec3 {
    let EllipsoidParams { a, c, b2 } = *ell;
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    if st < ELEVATION_SINGULAR {
        return Vec3::new(0.0, 0.0, ct.signum() * b2 / a);
    }
    let cot_t = ct / st;
    let root_sign = |s: f64| if s >= 0.0 { 1.0 } else { -1.0 };
    let (x, y) = if cp.abs() >= AZIMUTH_SINGULAR {
        let tan_p = sp / cp;
        let d = b2 + a * a * (cot_t * cot_t + tan_p * tan_p + cot_t * cot_t * tan_p * tan_p);
        let disc = (b2 * b2 * c * c + b2 * (a * a - c * c) * d).sqrt();
        let x = (b2 * c + root_sign(cp) * disc) / d;
        (x, x * tan_p)
    } else {
        let cot_p = cp / sp;
        let d = b2 * cot_p * cot_p + a * a * (1.0 + cot_t * cot_t + cot_t * cot_t * cot_p * cot_p);
        let disc = (b2 * b2 * c * c * cot_p * cot_p + b2 * (a * a - c * c) * d).sqrt();
        let y = (b2 * c * cot_p + root_sign(sp) * disc) / d;
        (y * cot_p, y)
    };
    let z = ((x * x + y * y) * (1.0 + cot_t * cot_t)).sqrt() * ct;
    Vec3::new(x, y, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{derive_paths, SceneConfig};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn cand(range: f64, aoa_index: usize) -> TargetCandidate {
        TargetCandidate {
            angle: AnglePair::new(0.0, FRAC_PI_2).unwrap(),
            range,
            aoa_index,
            doppler_index: 0,
            range_index: 0,
            beam_power: 1.0,
        }
    }

    /// Ray-parameter oracle: `|S| + |S - U| = 2a` along `S = t d` gives
    /// `t = b² / (a - d·U/2)`.
    fn ray_oracle(dir: &Vec3, aggregate: f64, ue: &Vec3) -> Vec3 {
        let a = aggregate / 2.0;
        let c = ue.norm() / 2.0;
        let b2 = a * a - c * c;
        let t = b2 / (a - dir.dot(ue) / 2.0);
        dir * t
    }

    #[test]
    fn ue_has_smallest_range() {
        let (ue, rest) = identify_ue(&[cand(90.26, 0), cand(90.97, 1)], 1e-3).unwrap();
        assert_eq!(ue.aoa_index, 0);
        assert_eq!(rest.len(), 1);
        let (ue, rest) = identify_ue(&[cand(40.0, 3)], 1e-3).unwrap();
        assert_eq!(ue.aoa_index, 3);
        assert!(rest.is_empty());
        let (ue, _) = identify_ue(&[cand(50.0, 2), cand(50.0, 1), cand(70.0, 0)], 1e-3).unwrap();
        assert_eq!(ue.aoa_index, 1);
        assert!(matches!(identify_ue(&[], 1e-3), Err(Error::NoCandidates)));
    }

    #[test]
    fn near_ties_prefer_lower_aoa_index() {
        let (ue, _) = identify_ue(&[cand(90.31, 0), cand(90.29, 1)], 0.1).unwrap();
        assert_eq!(ue.aoa_index, 0);
        let (ue, _) = identify_ue(&[cand(90.31, 0), cand(90.29, 1)], 0.001).unwrap();
        assert_eq!(ue.aoa_index, 1);
    }

    #[test]
    fn near_ties_prefer_stronger_beam() {
        let weak = TargetCandidate {
            beam_power: 0.2,
            ..cand(90.26, 0)
        };
        let strong = TargetCandidate {
            beam_power: 5.0,
            ..cand(90.27, 1)
        };
        let (ue, rest) = identify_ue(&[weak, strong], 0.1).unwrap();
        assert_eq!(ue.aoa_index, 1);
        assert_eq!(rest, vec![weak]);
        let (ue, _) = identify_ue(&[weak, strong], 1e-3).unwrap();
        assert_eq!(ue.aoa_index, 0);
    }

    #[test]
    fn ue_examples() {
        let p = locate_ue(&AnglePair::new(0.0, FRAC_PI_2).unwrap(), 10.0)
            .unwrap()
            .position;
        assert!((p - Vec3::new(10.0, 0.0, 0.0)).norm() < 1e-12);
        let p = locate_ue(&AnglePair::new(1.0, 0.0).unwrap(), 5.0)
            .unwrap()
            .position;
        assert!((p - Vec3::new(0.0, 0.0, 5.0)).norm() < 1e-12);
        assert!(locate_ue(&AnglePair::new(0.0, 1.0).unwrap(), 0.0).is_err());
    }

    #[test]
    fn reference_ue_round_trip() {
        let paths = derive_paths(&SceneConfig::reference()).unwrap();
        let p = locate_ue(&paths[0].aoa, paths[0].aggregate_range())
            .unwrap()
            .position;
        assert!((p - Vec3::new(90.0, -4.75, -5.0)).norm() < 1e-9);
    }

    #[test]
    fn reference_scatterer_round_trip() {
        let paths = derive_paths(&SceneConfig::reference()).unwrap();
        let ue = Vec3::new(90.0, -4.75, -5.0);
        let s = locate_scatterer(&paths[1].aoa, paths[1].aggregate_range(), &ue)
            .unwrap()
            .position;
        assert!((s - Vec3::new(10.0, -1.75, -4.0)).norm() < 1e-6, "{s:?}");
    }

    #[test]
    fn segment_scatterer_is_infeasible() {
        let ue = Vec3::new(90.0, -4.75, -5.0);
        let dir = AnglePair::from_direction(&ue).unwrap();
        let r = locate_scatterer(&dir, ue.norm(), &ue);
        assert!(matches!(r, Err(Error::InfeasibleEllipsoid { .. })));
        assert!(locate_scatterer(&dir, ue.norm() - 1.0, &ue).is_err());
    }

    #[test]
    fn rotation_maps_ue_direction_to_x() {
        let ue = Vec3::new(90.0, -4.75, -5.0);
        let angle = AnglePair::from_direction(&ue).unwrap();
        let rot = RotationAngles::toward(&angle);
        let x = rotate_coordinates(&ue.normalize(), rot);
        assert!((x - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        let id = RotationAngles {
            azimuth: 0.0,
            elevation: 0.0,
        };
        let p = Vec3::new(1.0, -2.0, 3.0);
        assert!((rotate_coordinates(&p, id) - p).norm() < 1e-15);
    }

    #[test]
    fn singular_local_angles() {
        let ell = EllipsoidParams::new(12.0, 8.0).unwrap();
        // Straight up in the local frame.
        let up = solve_local(&ell, 0.3, 0.0);
        assert!((up - Vec3::new(0.0, 0.0, ell.b2 / ell.a)).norm() < 1e-12);
        // Along local +y: cos φ̃ = 0.
        let side = solve_local(&ell, FRAC_PI_2, FRAC_PI_2);
        let expected = ray_oracle(&Vec3::new(0.0, 1.0, 0.0), 12.0, &Vec3::new(8.0, 0.0, 0.0));
        assert!((side - expected).norm() < 1e-9, "{side:?} {expected:?}");
        let back = solve_local(&ell, -FRAC_PI_2, 2.0);
        let dir = AnglePair::new(-FRAC_PI_2, 2.0).unwrap().direction();
        assert!((back - ray_oracle(&dir, 12.0, &Vec3::new(8.0, 0.0, 0.0))).norm() < 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec3(lo: f64, hi: f64) -> impl Strategy<Value = Vec3> {
            (lo..hi, lo..hi, lo..hi).prop_map(|(x, y, z)| Vec3::new(x, y, z))
        }

        proptest! {
            #[test]
            fn rotation_is_isometry(az in -PI..PI, el in -PI..PI, p in vec3(-100.0, 100.0), q in vec3(-100.0, 100.0)) {
                let rot = RotationAngles { azimuth: az, elevation: el };
                let (rp, rq) = (rotate_coordinates(&p, rot), rotate_coordinates(&q, rot));
                prop_assert!((rp.norm() - p.norm()).abs() < 1e-12 * p.norm().max(1.0));
                prop_assert!(((rp - rq).norm() - (p - q).norm()).abs() < 1e-12 * (p - q).norm().max(1.0));
                prop_assert!((rotate_back(&rp, rot) - p).norm() < 1e-12 * p.norm().max(1.0));
            }

            #[test]
            fn scatterer_round_trip(ue in vec3(-150.0, 150.0), s in vec3(-150.0, 150.0)) {
                prop_assume!(ue.norm() > 1.0 && s.norm() > 1.0);
                let aggregate = s.norm() + (s - ue).norm();
                prop_assume!(aggregate - ue.norm() > 1e-3);
                let angle = AnglePair::from_direction(&s).unwrap();
                let est = locate_scatterer(&angle, aggregate, &ue).unwrap().position;
                prop_assert!((est - s).norm() < 1e-6, "{:?} vs {:?}", est, s);
                // Focal sum and ray membership.
                prop_assert!((est.norm() + (est - ue).norm() - aggregate).abs() < 1e-6);
                let back = AnglePair::from_direction(&est).unwrap();
                prop_assert!((back.direction() - angle.direction()).norm() < 1e-9);
                // Independent ray-parameter oracle.
                prop_assert!((est - ray_oracle(&angle.direction(), aggregate, &ue)).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn ellipsoid_params() {
        let e = EllipsoidParams::new(90.97405202638998, 90.26384935288324).unwrap();
        assert_relative_eq!(e.b2, e.a * e.a - e.c * e.c);
        assert!(e.a > e.c);
    }
}
