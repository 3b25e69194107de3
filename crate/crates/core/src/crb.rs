//! Cramér-Rao bound for range estimation from beam-domain CSI, and a
//! finite-difference Fisher information check on the Gaussian model.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::SPEED_OF_LIGHT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrbInputs {
    /// Post-beamforming SNR `γ`, linear.
    pub received_snr: f64,
    pub subcarrier_spacing: f64,
    pub subcarriers: usize,
    pub packets: usize,
}

impl CrbInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.received_snr > 0.0) || !self.received_snr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "SNR must be positive, got {}",
                self.received_snr
            )));
        }
        if !(self.subcarrier_spacing > 0.0) || self.subcarriers == 0 || self.packets == 0 {
            return Err(Error::InvalidConfig(
                "CRB needs positive spacing and sizes".into(),
            ));
        }
        Ok(())
    }
}

fn sum_squares(n: usize) -> f64 {
    (0..n).map(|k| (k * k) as f64).sum()
}

/// `C_r = c² / (γ 8π² Δf² M_s Σ_{n<N_c} n²)`, in m².
pub fn crb_range(inputs: &CrbInputs) -> Result<f64> {
    inputs.validate()?;
    let df = inputs.subcarrier_spacing;
    Ok(SPEED_OF_LIGHT * SPEED_OF_LIGHT
        / (inputs.received_snr
            * 8.0
            * PI
            * PI
            * df
            * df
            * inputs.packets as f64
            * sum_squares(inputs.subcarriers)))
}

/// Relative disagreement between the two finite-difference curvatures above
/// which the step is rejected.
const CURVATURE_SPREAD_TOL: f64 = 1e-2;

/// Fisher information for range, `-E[∂² ln p / ∂r²]` at `r0`, from a
/// central second difference of the expected negative log-likelihood
/// `g(r) = Σ_{n,m} |B(r0) - B(r)|² / σ²` with
/// `B_{n,m}(r) = √γ σ exp(j2π m T f) exp(-j2π n Δf r / c)`. Two step sizes are
/// combined by Richardson extrapolation; if they disagree by more than 1% the
/// step is too coarse for a quadratic fit.
pub fn fisher_numeric(inputs: &CrbInputs, r0: f64, step: f64) -> Result<f64> {
    inputs.validate()?;
    if !(step > 0.0) || !step.is_finite() || !r0.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "bad Fisher step {step} at {r0}"
        )));
    }
    // Any Doppler and noise level give the same curvature; fix σ² = 1.
    let amp = inputs.received_snr.sqrt();
    let doppler_phase = 0.37;
    let signal = |r: f64, n: usize, m: usize| -> Complex64 {
        let phase = doppler_phase * m as f64
            - 2.0 * PI * n as f64 * inputs.subcarrier_spacing * r / SPEED_OF_LIGHT;
        Complex64::from_polar(amp, phase)
    };
    let g = |r: f64| -> f64 {
        let mut acc = 0.0;
        for m in 0..inputs.packets {
            for n in 0..inputs.subcarriers {
                acc += (signal(r0, n, m) - signal(r, n, m)).norm_sqr();
            }
        }
        acc
    };
    // g(r0) = 0 exactly, so the second difference needs only the two sides.
    let curvature = |h: f64| (g(r0 + h) + g(r0 - h)) / (h * h);
    let coarse = curvature(step);
    let fine = curvature(step / 2.0);
    let spread = ((coarse - fine) / fine).abs();
    if !(spread <= CURVATURE_SPREAD_TOL) {
        return Err(Error::StepTooLarge { step, spread });
    }
    Ok((4.0 * fine - coarse) / 3.0)
}
