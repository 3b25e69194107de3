//! Estimated-CSI synthesis: multipath OFDM channel seen through a transmit
//! beamformer, per-packet timing/frequency offsets and additive noise.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{self, derive_paths, steering_vector, PathParams, SceneConfig, UpaGeometry};

/// Tolerance on `‖w_T‖₂ = 1`.
const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfdmConfig {
    pub subcarriers: usize,
    /// Subcarrier spacing in Hz.
    pub subcarrier_spacing: f64,
    /// CSI estimates (packets) per coherent processing interval.
    pub packets: usize,
    pub symbols_per_packet: usize,
    /// UE transmit power in watts.
    pub tx_power: f64,
}

impl OfdmConfig {
    /// 256 subcarriers at 480 kHz, 64 packets of 7 symbols, unit power.
    pub fn reference() -> Self {
        Self {
            subcarriers: 256,
            subcarrier_spacing: 480e3,
            packets: 64,
            symbols_per_packet: 7,
            tx_power: 1.0,
        }
    }

    /// Time between consecutive CSI estimates, `P_s / Δf`.
    pub fn packet_interval(&self) -> f64 {
        self.symbols_per_packet as f64 / self.subcarrier_spacing
    }

    pub fn bandwidth(&self) -> f64 {
        self.subcarriers as f64 * self.subcarrier_spacing
    }

    pub fn validate(&self) -> Result<()> {
        if self.subcarriers < 2 || self.packets < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 subcarriers and 2 packets, got {} and {}",
                self.subcarriers, self.packets
            )));
        }
        if self.symbols_per_packet == 0 {
            return Err(Error::InvalidConfig(
                "symbols_per_packet must be positive".into(),
            ));
        }
        if !(self.subcarrier_spacing > 0.0) || !self.subcarrier_spacing.is_finite() {
            return Err(Error::InvalidConfig(
                "subcarrier spacing must be positive".into(),
            ));
        }
        if !(self.tx_power >= 0.0) || !self.tx_power.is_finite() {
            return Err(Error::InvalidConfig("tx_power must be non-negative".into()));
        }
        Ok(())
    }
}

/// Standard deviations of the per-packet timing offset (s) and CFO (Hz).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockModel {
    pub timing_std: f64,
    pub cfo_std: f64,
}

impl ClockModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.timing_std >= 0.0) || !(self.cfo_std >= 0.0) {
            return Err(Error::InvalidConfig(
                "clock standard deviations must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClockDraws {
    /// Timing offset per packet, seconds.
    pub timing: Vec<f64>,
    /// Carrier frequency offset per packet, Hz.
    pub cfo: Vec<f64>,
}

impl ClockDraws {
    pub fn zeros(packets: usize) -> Self {
        Self {
            timing: vec![0.0; packets],
            cfo: vec![0.0; packets],
        }
    }

    pub fn len(&self) -> usize {
        self.timing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timing.is_empty()
    }
}

/// Deterministic RNG for an independent stream of a seeded experiment.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws i.i.d. real Gaussian timing offsets and CFOs, one of each per packet.
pub fn draw_clock_offsets(clock: &ClockModel, packets: usize, seed: u64) -> ClockDraws {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut draws = ClockDraws::zeros(packets);
    for m in 0..packets {
        let t: f64 = rng.sample(StandardNormal);
        let f: f64 = rng.sample(StandardNormal);
        draws.timing[m] = clock.timing_std * t;
        draws.cfo[m] = clock.cfo_std * f;
    }
    draws
}

/// Circularly-symmetric complex Gaussian sample with the given variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// One reflection factor per scatterer, `β ~ CN(0, σ²_{Cβ,k})`.
pub fn draw_reflections(scene: &SceneConfig, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    scene
        .scatterers
        .iter()
        .map(|s| complex_gaussian(&mut rng, s.reflection_variance))
        .collect()
}

/// Transmit beamformer matched to the LoS departure angle,
/// `conj(a(p_T,0)) / sqrt(P_r Q_r)`.
pub fn default_transmit_beamformer(scene: &SceneConfig) -> Result<DVector<Complex64>> {
    let paths = derive_paths(scene)?;
    let a = steering_vector(&scene.ue_array, &paths[0].aod);
    let n = a.len() as f64;
    Ok(a.map(|z| z.conj() / n.sqrt()))
}

/// Transmit gain `χ_T = a(p_T)ᵀ w_T`.
pub fn transmit_gain(
    ue_array: &UpaGeometry,
    path: &PathParams,
    w_t: &DVector<Complex64>,
) -> Complex64 {
    steering_vector(ue_array, &path.aod).dot(w_t)
}

fn check_beamformer(ue_array: &UpaGeometry, w_t: &DVector<Complex64>) -> Result<()> {
    if w_t.len() != ue_array.num_elements() {
        return Err(Error::DimensionMismatch {
            what: "transmit beamformer",
            expected: ue_array.num_elements(),
            actual: w_t.len(),
        });
    }
    let norm = w_t.norm();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::NonUnitBeamformer(norm));
    }
    Ok(())
}

/// CSI tensor `ĥ_{C,n,m}` stored as the `A x (N_c M_s)` matrix whose column
/// `m * N_c + n` is the antenna snapshot at subcarrier `n` of packet `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiTensor {
    pub data: DMatrix<Complex64>,
    pub ofdm: OfdmConfig,
    pub array: UpaGeometry,
}

impl CsiTensor {
    pub fn zeros(ofdm: OfdmConfig, array: UpaGeometry) -> Self {
        Self {
            data: DMatrix::zeros(array.num_elements(), ofdm.subcarriers * ofdm.packets),
            ofdm,
            array,
        }
    }

    pub fn from_data(
        data: DMatrix<Complex64>,
        ofdm: OfdmConfig,
        array: UpaGeometry,
    ) -> Result<Self> {
        let t = Self { data, ofdm, array };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        self.ofdm.validate()?;
        self.array.validate()?;
        if self.data.nrows() != self.array.num_elements() {
            return Err(Error::DimensionMismatch {
                what: "tensor antennas",
                expected: self.array.num_elements(),
                actual: self.data.nrows(),
            });
        }
        let snaps = self.ofdm.subcarriers * self.ofdm.packets;
        if self.data.ncols() != snaps {
            return Err(Error::DimensionMismatch {
                what: "tensor snapshots",
                expected: snaps,
                actual: self.data.ncols(),
            });
        }
        if self
            .data
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::NonFinite("CSI tensor"));
        }
        Ok(())
    }

    pub fn antennas(&self) -> usize {
        self.data.nrows()
    }

    pub fn subcarriers(&self) -> usize {
        self.ofdm.subcarriers
    }

    pub fn packets(&self) -> usize {
        self.ofdm.packets
    }

    /// `(antennas, subcarriers, packets)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.antennas(), self.subcarriers(), self.packets())
    }

    #[inline]
    pub fn column_index(&self, subcarrier: usize, packet: usize) -> usize {
        packet * self.ofdm.subcarriers + subcarrier
    }

    pub fn get(&self, antenna: usize, subcarrier: usize, packet: usize) -> Complex64 {
        self.data[(antenna, self.column_index(subcarrier, packet))]
    }

    pub fn snapshot(&self, subcarrier: usize, packet: usize) -> DVector<Complex64> {
        self.data
            .column(self.column_index(subcarrier, packet))
            .into_owned()
    }
}

/// Synthesizes the estimated CSI for a scene. `reflections` supplies one
/// reflection factor per scatterer; noise is `CN(0, noise_power)` per entry,
/// drawn from `seed`.
pub fn simulate_csi(
    scene: &SceneConfig,
    ofdm: &OfdmConfig,
    draws: &ClockDraws,
    w_t: &DVector<Complex64>,
    noise_power: f64,
    reflections: &[Complex64],
    seed: u64,
) -> Result<CsiTensor> {
    let mut paths = derive_paths(scene)?;
    geometry::realize_gains(&mut paths, scene.wavelength(), reflections)?;
    simulate_csi_from_paths(
        &paths,
        &scene.bs_array,
        &scene.ue_array,
        ofdm,
        draws,
        w_t,
        noise_power,
        seed,
    )
}

/// [`simulate_csi`] over an explicit path list with realized gains.
#[allow(clippy::too_many_arguments)]
pub fn simulate_csi_from_paths(
    paths: &[PathParams],
    bs_array: &UpaGeometry,
    ue_array: &UpaGeometry,
    ofdm: &OfdmConfig,
    draws: &ClockDraws,
    w_t: &DVector<Complex64>,
    noise_power: f64,
    seed: u64,
) -> Result<CsiTensor> {
    ofdm.validate()?;
    check_beamformer(ue_array, w_t)?;
    if draws.len() != ofdm.packets || draws.cfo.len() != ofdm.packets {
        return Err(Error::DimensionMismatch {
            what: "clock draws",
            expected: ofdm.packets,
            actual: draws.len(),
        });
    }
    if !(noise_power >= 0.0) {
        return Err(Error::InvalidConfig(
            "noise power must be non-negative".into(),
        ));
    }

    let n_c = ofdm.subcarriers;
    let t_p = ofdm.packet_interval();
    let df = ofdm.subcarrier_spacing;
    let amp = ofdm.tx_power.sqrt();

    // Per-path receive vector √P b χ_T a(p_R).
    let receive: Vec<DVector<Complex64>> = paths
        .iter()
        .map(|p| {
            let chi_t = transmit_gain(ue_array, p, w_t);
            steering_vector(bs_array, &p.aoa) * (p.gain * chi_t * amp)
        })
        .collect();

    let mut csi = CsiTensor::zeros(*ofdm, *bs_array);
    for m in 0..ofdm.packets {
        let mf = m as f64;
        for (path, g) in paths.iter().zip(&receive) {
            let doppler_phase = 2.0 * PI * mf * t_p * (path.doppler + draws.cfo[m]);
            let delay = path.delay + draws.timing[m];
            for n in 0..n_c {
                let phase = doppler_phase - 2.0 * PI * n as f64 * df * delay;
                let rot = Complex64::from_polar(1.0, phase);
                let mut col = csi.data.column_mut(m * n_c + n);
                col.axpy(rot, g, Complex64::new(1.0, 0.0));
            }
        }
    }

    if noise_power > 0.0 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for z in csi.data.iter_mut() {
            *z += complex_gaussian(&mut rng, noise_power);
        }
    }
    Ok(csi)
}

/// Sum over paths of `|b_k χ_{T,k}|²`, with NLoS gains taken in expectation
/// over the reflection factor.
fn expected_path_power(scene: &SceneConfig, w_t: &DVector<Complex64>) -> Result<f64> {
    check_beamformer(&scene.ue_array, w_t)?;
    let paths = derive_paths(scene)?;
    Ok(paths
        .iter()
        .map(|p| {
            let chi = transmit_gain(&scene.ue_array, p, w_t);
            // derive_paths fills NLoS gains with a unit reflection factor.
            let beta_power = p.reflection_variance.unwrap_or(1.0);
            (p.gain * chi).norm_sqr() * beta_power
        })
        .sum())
}

/// Per-antenna uplink communication SNR in dB,
/// `P_t Σ_k |b_k χ_{T,k}|² / σ_N²`.
pub fn uplink_snr(
    scene: &SceneConfig,
    ofdm: &OfdmConfig,
    w_t: &DVector<Complex64>,
    noise_power: f64,
) -> Result<f64> {
    if !(noise_power > 0.0) {
        return Err(Error::ZeroNoisePower);
    }
    let power = expected_path_power(scene, w_t)?;
    Ok(10.0 * (ofdm.tx_power * power / noise_power).log10())
}

/// Transmit power that puts [`uplink_snr`] at `target_db`.
pub fn calibrate_power_for_snr(
    scene: &SceneConfig,
    target_db: f64,
    w_t: &DVector<Complex64>,
    noise_power: f64,
) -> Result<f64> {
    if !(noise_power > 0.0) {
        return Err(Error::ZeroNoisePower);
    }
    let power = expected_path_power(scene, w_t)?;
    Ok(noise_power * 10f64.powf(target_db / 10.0) / power)
}
