//! The sensing chain on one CSI tensor: AoA estimation, per-beam spatial
//! filtering, DPO estimation, optional Kalman enhancement, range estimation,
//! UE identification and localization.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::aoa::{
    apply_spatial_filter, correlation_matrix, default_aoa_search, estimate_aoas,
    make_spatial_filter, AoaResult,
};
use crate::channel::{CsiTensor, OfdmConfig};
use crate::drde::{
    default_doppler_search, default_range_search, enhance_csi_matrix, estimate_dpo,
    estimate_ranges, DpoEstimate, RangeEstimate,
};
use crate::error::{Error, Result};
use crate::localization::{
    identify_ue, locate_scatterer, locate_ue, LocationEstimate, TargetCandidate,
};
use crate::subspace::{SearchConfig, MODEL_ORDER_EPS};

/// Case 1 runs the Kalman CSI enhancer before range estimation; Case 2 does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessingCase {
    Kf,
    Plain,
}

impl ProcessingCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProcessingCase::Kf => "kf",
            ProcessingCase::Plain => "plain",
        }
    }
}

impl fmt::Display for ProcessingCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProcessingCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kf" => Ok(ProcessingCase::Kf),
            "plain" => Ok(ProcessingCase::Plain),
            other => Err(Error::InvalidConfig(format!(
                "unknown case {other:?}, expected kf or plain"
            ))),
        }
    }
}

/// Search grids and detection thresholds for the three estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub aoa: SearchConfig,
    pub doppler: SearchConfig,
    pub range: SearchConfig,
    /// Eigen-gap margins for the AoA, Doppler and range model orders.
    #[serde(default = "default_eps")]
    pub aoa_order_eps: f64,
    #[serde(default = "default_eps")]
    pub doppler_order_eps: f64,
    #[serde(default = "default_eps")]
    pub range_order_eps: f64,
    /// Range candidates within this distance of the UE range are treated as
    /// the UE seen through another beam, m.
    #[serde(default = "default_tie")]
    pub ue_range_tolerance: f64,
}

fn default_eps() -> f64 {
    MODEL_ORDER_EPS
}

fn default_tie() -> f64 {
    0.25
}

impl SearchSettings {
    pub fn for_ofdm(ofdm: &OfdmConfig) -> Self {
        Self {
            aoa: default_aoa_search(),
            doppler: default_doppler_search(ofdm),
            range: default_range_search(ofdm),
            aoa_order_eps: MODEL_ORDER_EPS,
            doppler_order_eps: MODEL_ORDER_EPS,
            range_order_eps: MODEL_ORDER_EPS,
            ue_range_tolerance: default_tie(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.aoa.validate()?;
        self.doppler.validate()?;
        self.range.validate()?;
        for eps in [
            self.aoa_order_eps,
            self.doppler_order_eps,
            self.range_order_eps,
        ] {
            if !(eps >= 0.0) || !eps.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "model-order margin must be non-negative, got {eps}"
                )));
            }
        }
        if !(self.ue_range_tolerance >= 0.0) {
            return Err(Error::InvalidConfig(
                "UE range tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BeamReport {
    pub aoa_index: usize,
    pub dpo: Vec<DpoEstimate>,
    pub dpo_order: usize,
    pub ranges: Vec<RangeEstimate>,
}

#[derive(Debug, Clone)]
pub struct SensingReport {
    pub case: ProcessingCase,
    pub aoa: AoaResult,
    pub beams: Vec<BeamReport>,
    pub candidates: Vec<TargetCandidate>,
    pub ue: Option<(TargetCandidate, LocationEstimate)>,
    pub scatterers: Vec<(TargetCandidate, LocationEstimate)>,
    /// Candidates dropped because their range matched the UE range.
    pub ue_duplicates: usize,
    /// Candidates dropped because no ellipsoid exists for their range.
    pub infeasible: usize,
}

/// Runs the full chain on one tensor.
pub fn sense(
    csi: &CsiTensor,
    settings: &SearchSettings,
    case: ProcessingCase,
) -> Result<SensingReport> {
    csi.validate()?;
    settings.validate()?;
    let ofdm = csi.ofdm;
    let rx = correlation_matrix(csi);
    let snapshots = ofdm.subcarriers * ofdm.packets;
    let aoa = estimate_aoas(
        &rx,
        &csi.array,
        &settings.aoa,
        settings.aoa_order_eps,
        Some(snapshots),
    )?;
    let noise = aoa.noise_power.max(0.0);

    let mut beams = Vec::with_capacity(aoa.estimates.len());
    let mut candidates = Vec::new();
    for (l, est) in aoa.estimates.iter().enumerate() {
        let w = make_spatial_filter(&est.angle, &csi.array);
        let beam_power = (w.adjoint() * &rx * &w)[(0, 0)].re;
        let h = apply_spatial_filter(csi, &w)?;
        let dpo = estimate_dpo(
            &h,
            &ofdm,
            &settings.doppler,
            settings.doppler_order_eps,
            Some(noise),
            l,
        )?;
        let mut ranges = Vec::new();
        match case {
            ProcessingCase::Kf => {
                for d in &dpo.estimates {
                    let enhanced = enhance_csi_matrix(&h, d.transfer_factor, noise)?;
                    let r = estimate_ranges(
                        &enhanced.data,
                        &ofdm,
                        &settings.range,
                        settings.range_order_eps,
                        Some(enhanced.remaining_interference(noise)),
                        l,
                        d.doppler_index,
                    )?;
                    ranges.extend(r.estimates);
                }
            }
            ProcessingCase::Plain => {
                if !dpo.estimates.is_empty() {
                    let r = estimate_ranges(
                        &h,
                        &ofdm,
                        &settings.range,
                        settings.range_order_eps,
                        Some(noise),
                        l,
                        0,
                    )?;
                    ranges.extend(r.estimates);
                }
            }
        }
        for r in &ranges {
            candidates.push(TargetCandidate {
                angle: est.angle,
                range: r.value,
                aoa_index: l,
                doppler_index: r.doppler_index,
                range_index: r.range_index,
                beam_power,
            });
        }
        beams.push(BeamReport {
            aoa_index: l,
            dpo: dpo.estimates,
            dpo_order: dpo.model_order,
            ranges,
        });
    }

    let mut report = SensingReport {
        case,
        aoa,
        beams,
        candidates: candidates.clone(),
        ue: None,
        scatterers: Vec::new(),
        ue_duplicates: 0,
        infeasible: 0,
    };
    if candidates.is_empty() {
        return Ok(report);
    }
    let (ue, rest) = identify_ue(&candidates, settings.ue_range_tolerance)?;
    let ue_loc = locate_ue(&ue.angle, ue.range)?;
    for cand in rest {
        if (cand.range - ue.range).abs() <= settings.ue_range_tolerance {
            report.ue_duplicates += 1;
            continue;
        }
        match locate_scatterer(&cand.angle, cand.range, &ue_loc.position) {
            Ok(loc) => report.scatterers.push((cand, loc)),
            Err(Error::InfeasibleEllipsoid { .. }) => report.infeasible += 1,
            Err(e) => return Err(e),
        }
    }
    report.ue = Some((ue, ue_loc));
    Ok(report)
}
