//! Monte-Carlo experiments: TOML configuration, per-trial scoring against the
//! scene ground truth, sweeps, CSV output and the binary CSI tensor dump.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::channel::{
    calibrate_power_for_snr, default_transmit_beamformer, draw_clock_offsets, draw_reflections,
    simulate_csi, stream_rng, transmit_gain, ClockModel, CsiTensor, OfdmConfig,
};
use crate::crb::{crb_range, CrbInputs};
use crate::error::{Error, Result};
use crate::geometry::{
    derive_paths, kmh_to_ms, wrap_angle, AnglePair, Scatterer, SceneConfig, UpaGeometry, Vec3,
};
use crate::pipeline::{sense, ProcessingCase, SearchSettings, SensingReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScattererSection {
    pub position: [f64; 3],
    /// m/s.
    #[serde(default)]
    pub velocity: [f64; 3],
    pub reflection_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    /// Hz.
    pub carrier_frequency: f64,
    /// BS array rows and columns, half-wavelength spacing.
    pub bs_array: [usize; 2],
    #[serde(default = "single_antenna")]
    pub ue_array: [usize; 2],
    pub bs_position: [f64; 3],
    pub ue_position: [f64; 3],
    /// UE velocity in km/h.
    pub ue_velocity_kmh: [f64; 3],
    /// Noise power per CSI entry, W.
    pub noise_power: f64,
    #[serde(default)]
    pub scatterers: Vec<ScattererSection>,
}

fn single_antenna() -> [usize; 2] {
    [1, 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfdmSection {
    pub subcarriers: usize,
    /// Hz.
    pub subcarrier_spacing: f64,
    pub packets: usize,
    pub symbols_per_packet: usize,
    /// Per-antenna uplink SNR in dB; sets the transmit power when the noise
    /// power is positive.
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// Transmit power in W, used when `snr_db` is absent or the noise is zero.
    #[serde(default)]
    pub tx_power: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// A single point with the configured values.
    #[default]
    None,
    SnrDb,
    TimingStd,
    CfoStd,
    /// Square BS array with this many rows and columns.
    ArraySize,
}

impl SweepParameter {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepParameter::None => "none",
            SweepParameter::SnrDb => "snr_db",
            SweepParameter::TimingStd => "timing_std",
            SweepParameter::CfoStd => "cfo_std",
            SweepParameter::ArraySize => "array_size",
        }
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub parameter: SweepParameter,
    #[serde(default)]
    pub values: Vec<f64>,
}

/// Overrides of the default search grids and detection margins.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub aoa_grid_points: Option<usize>,
    pub doppler_grid_points: Option<usize>,
    pub range_grid_points: Option<usize>,
    pub max_iterations: Option<usize>,
    pub aoa_order_eps: Option<f64>,
    pub doppler_order_eps: Option<f64>,
    pub range_order_eps: Option<f64>,
    pub ue_range_tolerance: Option<f64>,
}

impl SearchSection {
    pub fn settings(&self, ofdm: &OfdmConfig) -> SearchSettings {
        let mut s = SearchSettings::for_ofdm(ofdm);
        if let Some(n) = self.aoa_grid_points {
            s.aoa.grid_points = n;
        }
        if let Some(n) = self.doppler_grid_points {
            s.doppler.grid_points = n;
        }
        if let Some(n) = self.range_grid_points {
            s.range.grid_points = n;
        }
        if let Some(n) = self.max_iterations {
            s.aoa.max_iterations = n;
            s.doppler.max_iterations = n;
            s.range.max_iterations = n;
        }
        if let Some(e) = self.aoa_order_eps {
            s.aoa_order_eps = e;
        }
        if let Some(e) = self.doppler_order_eps {
            s.doppler_order_eps = e;
        }
        if let Some(e) = self.range_order_eps {
            s.range_order_eps = e;
        }
        if let Some(t) = self.ue_range_tolerance {
            s.ue_range_tolerance = t;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_trial")]
    pub trials: usize,
    #[serde(default = "kf_case")]
    pub case: ProcessingCase,
    pub scene: SceneSection,
    pub ofdm: OfdmSection,
    #[serde(default)]
    pub clock: ClockModel,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub search: SearchSection,
}

fn one_trial() -> usize {
    1
}

fn kf_case() -> ProcessingCase {
    ProcessingCase::Kf
}

/// Everything a trial needs at one sweep point.
#[derive(Debug, Clone)]
pub struct PointSetup {
    pub scene: SceneConfig,
    pub ofdm: OfdmConfig,
    pub clock: ClockModel,
    pub noise_power: f64,
    pub settings: SearchSettings,
    /// Per-antenna uplink SNR, dB; `None` when the noise is zero.
    pub comm_snr_db: Option<f64>,
}

impl ExperimentConfig {
    /// The evaluation scene at 16 dB with a 240 Hz CFO spread.
    pub fn reference() -> Self {
        let scene = SceneConfig::reference();
        let ofdm = OfdmConfig::reference();
        let v3 = |v: &Vec3| [v.x, v.y, v.z];
        Self {
            seed: 1,
            trials: 100,
            case: ProcessingCase::Kf,
            scene: SceneSection {
                carrier_frequency: scene.bs_array.carrier_frequency,
                bs_array: [scene.bs_array.rows, scene.bs_array.cols],
                ue_array: [scene.ue_array.rows, scene.ue_array.cols],
                bs_position: v3(&scene.bs_position),
                ue_position: v3(&scene.ue_position),
                ue_velocity_kmh: [-40.0, 0.0, 0.0],
                noise_power: 4.9177e-12,
                scatterers: scene
                    .scatterers
                    .iter()
                    .map(|s| ScattererSection {
                        position: v3(&s.position),
                        velocity: v3(&s.velocity),
                        reflection_variance: s.reflection_variance,
                    })
                    .collect(),
            },
            ofdm: OfdmSection {
                subcarriers: ofdm.subcarriers,
                subcarrier_spacing: ofdm.subcarrier_spacing,
                packets: ofdm.packets,
                symbols_per_packet: ofdm.symbols_per_packet,
                snr_db: Some(16.0),
                tx_power: None,
            },
            clock: ClockModel {
                timing_std: 0.0,
                cfo_std: 240.0,
            },
            sweep: SweepSection::default(),
            search: SearchSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.sweep.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("sweep values must be finite".into()));
        }
        if self.sweep.parameter != SweepParameter::None && self.sweep.values.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "sweep over {} needs at least one value",
                self.sweep.parameter
            )));
        }
        if !(self.scene.noise_power >= 0.0) {
            return Err(Error::InvalidConfig(
                "noise power must be non-negative".into(),
            ));
        }
        for value in self.sweep_values() {
            self.point(value)?;
        }
        Ok(())
    }

    /// The sweep values, or a single `None` when nothing is swept.
    pub fn sweep_values(&self) -> Vec<Option<f64>> {
        match self.sweep.parameter {
            SweepParameter::None => vec![None],
            _ => self.sweep.values.iter().map(|&v| Some(v)).collect(),
        }
    }

    /// Builds the scene, OFDM parameters and search settings at one sweep
    /// value.
    pub fn point(&self, value: Option<f64>) -> Result<PointSetup> {
        let s = &self.scene;
        let mut bs_array = s.bs_array;
        let mut clock = self.clock;
        let mut snr_db = self.ofdm.snr_db;
        if let Some(v) = value {
            match self.sweep.parameter {
                SweepParameter::None => {}
                SweepParameter::SnrDb => snr_db = Some(v),
                SweepParameter::TimingStd => clock.timing_std = v,
                SweepParameter::CfoStd => clock.cfo_std = v,
                SweepParameter::ArraySize => {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(Error::InvalidConfig(format!(
                            "array size must be a positive integer, got {v}"
                        )));
                    }
                    bs_array = [v as usize, v as usize];
                }
            }
        }
        clock.validate()?;
        let fc = s.carrier_frequency;
        let vec3 = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
        let scene = SceneConfig {
            bs_position: vec3(s.bs_position),
            ue_position: vec3(s.ue_position),
            ue_velocity: vec3(s.ue_velocity_kmh).map(kmh_to_ms),
            scatterers: s
                .scatterers
                .iter()
                .map(|k| Scatterer {
                    position: vec3(k.position),
                    velocity: vec3(k.velocity),
                    reflection_variance: k.reflection_variance,
                })
                .collect(),
            bs_array: UpaGeometry::half_wavelength(bs_array[0], bs_array[1], fc)?,
            ue_array: UpaGeometry::half_wavelength(s.ue_array[0], s.ue_array[1], fc)?,
        };
        scene.validate()?;
        let mut ofdm = OfdmConfig {
            subcarriers: self.ofdm.subcarriers,
            subcarrier_spacing: self.ofdm.subcarrier_spacing,
            packets: self.ofdm.packets,
            symbols_per_packet: self.ofdm.symbols_per_packet,
            tx_power: self.ofdm.tx_power.unwrap_or(1.0),
        };
        let comm_snr_db = match snr_db {
            Some(db) if s.noise_power > 0.0 => {
                let w = default_transmit_beamformer(&scene)?;
                ofdm.tx_power = calibrate_power_for_snr(&scene, db, &w, s.noise_power)?;
                Some(db)
            }
            _ => None,
        };
        ofdm.validate()?;
        let settings = self.search.settings(&ofdm);
        settings.validate()?;
        Ok(PointSetup {
            scene,
            ofdm,
            clock,
            noise_power: s.noise_power,
            settings,
            comm_snr_db,
        })
    }
}

impl PointSetup {
    /// Post-beamforming SNR of the LoS path, `P_t |b_0 χ_T χ_R|² / σ_N²`,
    /// with the matched receive gain `χ_R = √(PQ)`. `None` at zero noise.
    pub fn los_beam_snr(&self) -> Result<Option<f64>> {
        if self.noise_power <= 0.0 {
            return Ok(None);
        }
        let paths = derive_paths(&self.scene)?;
        let w = default_transmit_beamformer(&self.scene)?;
        let chi_t = transmit_gain(&self.scene.ue_array, &paths[0], &w);
        let chi_r2 = self.scene.bs_array.num_elements() as f64;
        Ok(Some(
            self.ofdm.tx_power * (paths[0].gain * chi_t).norm_sqr() * chi_r2 / self.noise_power,
        ))
    }

    /// `√C_r` for the UE range at the LoS post-beamforming SNR.
    pub fn sqrt_crb(&self) -> Result<Option<f64>> {
        let Some(gamma) = self.los_beam_snr()? else {
            return Ok(None);
        };
        let c_r = crb_range(&CrbInputs {
            received_snr: gamma,
            subcarrier_spacing: self.ofdm.subcarrier_spacing,
            subcarriers: self.ofdm.subcarriers,
            packets: self.ofdm.packets,
        })?;
        Ok(Some(c_r.sqrt()))
    }
}

/// Seeds of the independent random draws in one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialSeeds {
    pub clock: u64,
    pub reflections: u64,
    pub noise: u64,
}

impl TrialSeeds {
    /// Derived from stream `trial` of the experiment seed, so trials are
    /// independent and reproducible in any execution order.
    pub fn derive(seed: u64, trial: u64) -> Self {
        let mut rng = stream_rng(seed, trial);
        Self {
            clock: rng.next_u64(),
            reflections: rng.next_u64(),
            noise: rng.next_u64(),
        }
    }
}

/// Simulates the CSI tensor of one trial.
pub fn simulate_trial(setup: &PointSetup, seeds: TrialSeeds) -> Result<CsiTensor> {
    let w = default_transmit_beamformer(&setup.scene)?;
    let draws = draw_clock_offsets(&setup.clock, setup.ofdm.packets, seeds.clock);
    let reflections = draw_reflections(&setup.scene, seeds.reflections);
    simulate_csi(
        &setup.scene,
        &setup.ofdm,
        &draws,
        &w,
        setup.noise_power,
        &reflections,
        seeds.noise,
    )
}

/// Estimation errors for one detected target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetError {
    /// `√(Δφ² + Δθ²)` with the azimuth difference wrapped, rad.
    pub aoa: f64,
    pub range: f64,
    pub location: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    pub ue: Option<TargetError>,
    /// One entry per scene scatterer; `None` when nothing was associated.
    pub scatterers: Vec<Option<TargetError>>,
    pub infeasible: usize,
    /// Set when a pipeline stage failed.
    pub error: Option<String>,
}

/// Angular distance used for the AoA error.
pub fn aoa_error(estimate: &AnglePair, truth: &AnglePair) -> f64 {
    wrap_angle(estimate.azimuth - truth.azimuth).hypot(estimate.elevation - truth.elevation)
}

/// Scores a sensing report against the scene. The UE is the pipeline's own
/// pick. Each scene scatterer is matched to the localized candidate with the
/// closest AoA, ties broken by the closer aggregate range.
pub fn score_report(
    scene: &SceneConfig,
    report: &SensingReport,
) -> Result<(Option<TargetError>, Vec<Option<TargetError>>)> {
    let paths = derive_paths(scene)?;
    let ue_truth = scene.ue_position - scene.bs_position;
    let ue = report.ue.as_ref().map(|(cand, loc)| TargetError {
        aoa: aoa_error(&cand.angle, &paths[0].aoa),
        range: (cand.range - paths[0].aggregate_range()).abs(),
        location: (loc.position - ue_truth).norm(),
    });
    let scatterers = scene
        .scatterers
        .iter()
        .zip(&paths[1..])
        .map(|(s, path)| {
            let truth = s.position - scene.bs_position;
            report
                .scatterers
                .iter()
                .map(|(cand, loc)| TargetError {
                    aoa: aoa_error(&cand.angle, &path.aoa),
                    range: (cand.range - path.aggregate_range()).abs(),
                    location: (loc.position - truth).norm(),
                })
                .min_by(|a, b| a.aoa.total_cmp(&b.aoa).then(a.range.total_cmp(&b.range)))
        })
        .collect();
    Ok((ue, scatterers))
}

/// Simulates, senses and scores one trial. Stage failures are recorded in
/// the outcome rather than returned.
pub fn run_trial(
    setup: &PointSetup,
    case: ProcessingCase,
    seed: u64,
    trial: usize,
) -> TrialOutcome {
    let seeds = TrialSeeds::derive(seed, trial as u64);
    let result = simulate_trial(setup, seeds)
        .and_then(|csi| sense(&csi, &setup.settings, case))
        .and_then(|report| score_report(&setup.scene, &report).map(|s| (report, s)));
    match result {
        Ok((report, (ue, scatterers))) => TrialOutcome {
            trial,
            ue,
            scatterers,
            infeasible: report.infeasible,
            error: None,
        },
        Err(e) => TrialOutcome {
            trial,
            ue: None,
            scatterers: vec![None; setup.scene.scatterers.len()],
            infeasible: 0,
            error: Some(e.to_string()),
        },
    }
}

/// RMSEs over the trials in which the target was detected.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetStats {
    pub detections: usize,
    pub aoa_rmse: Option<f64>,
    pub range_rmse: Option<f64>,
    pub location_rmse: Option<f64>,
}

impl TargetStats {
    pub fn from_errors<'a>(errors: impl IntoIterator<Item = &'a TargetError>) -> Self {
        let (mut n, mut a, mut r, mut l) = (0usize, 0.0, 0.0, 0.0);
        for e in errors {
            n += 1;
            a += e.aoa * e.aoa;
            r += e.range * e.range;
            l += e.location * e.location;
        }
        let rmse = |s: f64| (n > 0).then(|| (s / n as f64).sqrt());
        Self {
            detections: n,
            aoa_rmse: rmse(a),
            range_rmse: rmse(r),
            location_rmse: rmse(l),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointReport {
    /// `None` when nothing is swept.
    pub sweep_value: Option<f64>,
    pub comm_snr_db: Option<f64>,
    pub beam_snr_db: Option<f64>,
    pub sqrt_crb: Option<f64>,
    pub ue: TargetStats,
    /// Pooled over all scene scatterers.
    pub scatterer: TargetStats,
    pub infeasible: usize,
    pub failed: usize,
    pub trials: usize,
    pub outcomes: Vec<TrialOutcome>,
}

impl PointReport {
    pub fn aggregate(
        sweep_value: Option<f64>,
        setup: &PointSetup,
        outcomes: Vec<TrialOutcome>,
    ) -> Result<Self> {
        let gamma = setup.los_beam_snr()?;
        Ok(Self {
            sweep_value,
            comm_snr_db: setup.comm_snr_db,
            beam_snr_db: gamma.map(|g| 10.0 * g.log10()),
            sqrt_crb: setup.sqrt_crb()?,
            ue: TargetStats::from_errors(outcomes.iter().filter_map(|o| o.ue.as_ref())),
            scatterer: TargetStats::from_errors(
                outcomes.iter().flat_map(|o| o.scatterers.iter().flatten()),
            ),
            infeasible: outcomes.iter().map(|o| o.infeasible).sum(),
            failed: outcomes.iter().filter(|o| o.error.is_some()).count(),
            trials: outcomes.len(),
            outcomes,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmseReport {
    pub sweep: SweepParameter,
    pub case: ProcessingCase,
    pub points: Vec<PointReport>,
}

/// Runs `cfg.trials` trials per sweep point in parallel. Trial `t` at every
/// point uses the same seeds, so points differ only in the swept quantity.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<RmseReport> {
    cfg.validate()?;
    let mut points = Vec::new();
    for value in cfg.sweep_values() {
        let setup = cfg.point(value)?;
        let outcomes: Vec<TrialOutcome> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(&setup, cfg.case, cfg.seed, t))
            .collect();
        points.push(PointReport::aggregate(value, &setup, outcomes)?);
    }
    Ok(RmseReport {
        sweep: cfg.sweep.parameter,
        case: cfg.case,
        points,
    })
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub sweep_name: String,
    pub sweep_value: Option<f64>,
    pub target_kind: String,
    pub metric: String,
    pub value: f64,
    pub trials: usize,
    pub case: ProcessingCase,
}

/// Flattens a report into CSV rows: per-target RMSEs and detection counts
/// for `ue` and `scatterer`, then point-level quantities under `all`.
/// Undefined RMSEs (no detections) are omitted.
pub fn report_rows(report: &RmseReport) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for p in &report.points {
        let mut push = |kind: &str, metric: &str, value: f64| {
            rows.push(CsvRow {
                sweep_name: report.sweep.as_str().to_string(),
                sweep_value: p.sweep_value,
                target_kind: kind.to_string(),
                metric: metric.to_string(),
                value,
                trials: p.trials,
                case: report.case,
            })
        };
        for (kind, stats) in [("ue", &p.ue), ("scatterer", &p.scatterer)] {
            if let Some(v) = stats.aoa_rmse {
                push(kind, "aoa_rmse_rad", v);
            }
            if let Some(v) = stats.range_rmse {
                push(kind, "range_rmse_m", v);
            }
            if let Some(v) = stats.location_rmse {
                push(kind, "location_rmse_m", v);
            }
            push(kind, "detections", stats.detections as f64);
        }
        if let Some(v) = p.sqrt_crb {
            push("ue", "sqrt_crb_m", v);
        }
        if let Some(v) = p.comm_snr_db {
            push("all", "comm_snr_db", v);
        }
        if let Some(v) = p.beam_snr_db {
            push("all", "beam_snr_db", v);
        }
        push("all", "infeasible_candidates", p.infeasible as f64);
        push("all", "failed_trials", p.failed as f64);
    }
    rows
}

pub fn write_csv<W: Write>(rows: &[CsvRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub const CSV_HEADER: [&str; 7] = [
    "sweep_name",
    "sweep_value",
    "target_kind",
    "metric",
    "value",
    "trials",
    "case",
];

/// Writes the report as CSV to `path`.
pub fn emit_csv(report: &RmseReport, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(&report_rows(report), BufWriter::new(file))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::InvalidConfig(format!(
            "unexpected CSV header {header:?}"
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// First token of a tensor dump header.
pub const TENSOR_MAGIC: &str = "JCAS-CSI-1";

/// Writes a tensor as one ASCII header line followed by the entries as
/// little-endian f64 pairs `(re, im)`, antenna index fastest, then
/// subcarrier, then packet.
pub fn write_tensor<W: Write>(csi: &CsiTensor, mut out: W) -> Result<()> {
    csi.validate()?;
    let (a, o) = (&csi.array, &csi.ofdm);
    let header = format!(
        "{TENSOR_MAGIC} rows={} cols={} element_spacing={} carrier_frequency={} subcarriers={} packets={} subcarrier_spacing={} symbols_per_packet={} tx_power={}\n",
        a.rows, a.cols, a.element_spacing, a.carrier_frequency, o.subcarriers, o.packets,
        o.subcarrier_spacing, o.symbols_per_packet, o.tx_power
    );
    let io = |e| Error::io("<tensor output>", e);
    out.write_all(header.as_bytes()).map_err(io)?;
    let mut buf = Vec::with_capacity(16 * csi.data.len());
    for z in csi.data.iter() {
        buf.extend_from_slice(&z.re.to_le_bytes());
        buf.extend_from_slice(&z.im.to_le_bytes());
    }
    out.write_all(&buf).map_err(io)?;
    out.flush().map_err(io)
}

pub fn read_tensor<R: Read>(input: R) -> Result<CsiTensor> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io("<tensor input>", e))?;
    let mut tokens = line.trim_end_matches('\n').split(' ');
    if tokens.next() != Some(TENSOR_MAGIC) {
        return Err(Error::TensorFormat(format!(
            "missing {TENSOR_MAGIC} header"
        )));
    }
    let mut fields = std::collections::HashMap::new();
    for t in tokens {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| Error::TensorFormat(format!("bad header field {t:?}")))?;
        fields.insert(k, v);
    }
    fn get<T: std::str::FromStr>(
        fields: &std::collections::HashMap<&str, &str>,
        key: &str,
    ) -> Result<T> {
        fields
            .get(key)
            .ok_or_else(|| Error::TensorFormat(format!("header lacks {key}")))?
            .parse()
            .map_err(|_| Error::TensorFormat(format!("bad value for {key}")))
    }
    let array = UpaGeometry::new(
        get(&fields, "rows")?,
        get(&fields, "cols")?,
        get(&fields, "element_spacing")?,
        get(&fields, "carrier_frequency")?,
    )?;
    let ofdm = OfdmConfig {
        subcarriers: get(&fields, "subcarriers")?,
        subcarrier_spacing: get(&fields, "subcarrier_spacing")?,
        packets: get(&fields, "packets")?,
        symbols_per_packet: get(&fields, "symbols_per_packet")?,
        tx_power: get(&fields, "tx_power")?,
    };
    ofdm.validate()?;
    let antennas = array.num_elements();
    let columns = ofdm.subcarriers * ofdm.packets;
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<tensor input>", e))?;
    let expected = 16 * antennas * columns;
    if bytes.len() != expected {
        return Err(Error::TensorFormat(format!(
            "expected {expected} payload bytes, found {}",
            bytes.len()
        )));
    }
    let values: Vec<crate::Complex64> = bytes
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            crate::Complex64::new(re, im)
        })
        .collect();
    let data = nalgebra::DMatrix::from_vec(antennas, columns, values);
    CsiTensor::from_data(data, ofdm, array)
}

pub fn save_tensor(csi: &CsiTensor, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(csi, BufWriter::new(file)).map_err(|e| relabel(e, path))
}

pub fn load_tensor(path: &Path) -> Result<CsiTensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(file).map_err(|e| relabel(e, path))
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    const REFERENCE_TOML: &str = include_str!("../configs/reference.toml");
    const GOLDEN_CSV: &str = include_str!("../tests/golden/fixture_report.csv");

    fn small(cfg: &mut ExperimentConfig) {
        cfg.ofdm.subcarriers = 32;
        cfg.ofdm.packets = 16;
    }

    #[test]
    fn shipped_config_is_the_reference_scene() {
        let cfg = ExperimentConfig::from_toml_str(REFERENCE_TOML).unwrap();
        let mut expected = ExperimentConfig::reference();
        expected.sweep = SweepSection {
            parameter: SweepParameter::SnrDb,
            values: vec![8.0, 12.0, 16.0],
        };
        expected.search = SearchSection {
            aoa_grid_points: Some(64),
            aoa_order_eps: Some(1.0),
            doppler_order_eps: Some(1.0),
            range_order_eps: Some(1.0),
            ue_range_tolerance: Some(0.25),
            ..SearchSection::default()
        };
        assert_eq!(cfg, expected);
        let p = cfg.point(None).unwrap();
        let reference = SceneConfig::reference();
        assert_eq!(p.scene.bs_position, reference.bs_position);
        assert_eq!(p.scene.ue_position, reference.ue_position);
        assert_eq!(p.scene.scatterers, reference.scatterers);
        assert_relative_eq!(p.scene.ue_velocity.x, -40.0 / 3.6, max_relative = 1e-15);
        assert_eq!(p.scene.bs_array, reference.bs_array);
        assert_eq!(p.ofdm.subcarriers, 256);
        assert_eq!(p.ofdm.packets, 64);
        assert_eq!(p.noise_power, 4.9177e-12);
        assert_eq!(p.settings, SearchSettings::for_ofdm(&p.ofdm));
    }

    #[test]
    fn config_rejects_bad_input() {
        let mut cfg = ExperimentConfig::reference();
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::reference();
        cfg.sweep = SweepSection {
            parameter: SweepParameter::SnrDb,
            values: vec![f64::NAN],
        };
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::reference();
        cfg.sweep = SweepSection {
            parameter: SweepParameter::ArraySize,
            values: vec![4.5],
        };
        assert!(cfg.validate().is_err());
        assert!(matches!(
            ExperimentConfig::from_toml_str("seed = 1\nbogus = 2"),
            Err(Error::ConfigParse(_))
        ));
        let text = REFERENCE_TOML.replace("timing_std = 0.0", "timing_std = -1.0");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = REFERENCE_TOML.replace("timing_std = 0.0", "jitter = 0.0");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(Error::ConfigParse(_))
        ));
        let text = REFERENCE_TOML.replace("timing_std = 0.0\n", "");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.clock.timing_std, 0.0);
    }

    #[test]
    fn sweep_axes_reach_the_point() {
        let mut cfg = ExperimentConfig::reference();
        for (parameter, value) in [
            (SweepParameter::SnrDb, 4.0),
            (SweepParameter::TimingStd, 5e-9),
            (SweepParameter::CfoStd, 60.0),
            (SweepParameter::ArraySize, 4.0),
        ] {
            cfg.sweep = SweepSection {
                parameter,
                values: vec![value],
            };
            let p = cfg.point(Some(value)).unwrap();
            match parameter {
                SweepParameter::SnrDb => assert_eq!(p.comm_snr_db, Some(4.0)),
                SweepParameter::TimingStd => assert_eq!(p.clock.timing_std, 5e-9),
                SweepParameter::CfoStd => assert_eq!(p.clock.cfo_std, 60.0),
                SweepParameter::ArraySize => assert_eq!(p.scene.bs_array.num_elements(), 16),
                SweepParameter::None => unreachable!(),
            }
        }
    }

    #[test]
    fn noiseless_point_uses_configured_power() {
        let mut cfg = ExperimentConfig::reference();
        cfg.scene.noise_power = 0.0;
        cfg.ofdm.tx_power = Some(2.0);
        let p = cfg.point(None).unwrap();
        assert_eq!(p.ofdm.tx_power, 2.0);
        assert_eq!(p.comm_snr_db, None);
        assert_eq!(p.sqrt_crb().unwrap(), None);
    }

    #[test]
    fn crb_uses_beamformed_los_snr() {
        let p = ExperimentConfig::reference().point(None).unwrap();
        let gamma = p.los_beam_snr().unwrap().unwrap();
        // Direct evaluation of P |b0|² PQ / σ² with a single-antenna UE.
        let paths = derive_paths(&p.scene).unwrap();
        let direct = p.ofdm.tx_power * paths[0].gain.norm_sqr() * 64.0 / p.noise_power;
        assert_relative_eq!(gamma, direct, max_relative = 1e-12);
        let c_r = 1.3884793631218558e-5 / gamma;
        assert_relative_eq!(
            p.sqrt_crb().unwrap().unwrap(),
            c_r.sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn trial_seeds_are_independent_streams() {
        let a = TrialSeeds::derive(7, 0);
        assert_eq!(a, TrialSeeds::derive(7, 0));
        assert_ne!(a, TrialSeeds::derive(7, 1));
        assert_ne!(a, TrialSeeds::derive(8, 0));
        assert_ne!(a.clock, a.noise);
    }

    #[test]
    fn aoa_error_wraps_azimuth() {
        let a = AnglePair::new(PI - 0.01, 1.0).unwrap();
        let b = AnglePair::new(-PI + 0.02, 1.04).unwrap();
        assert_relative_eq!(aoa_error(&a, &b), 0.03f64.hypot(0.04), max_relative = 1e-9);
    }

    #[test]
    fn rmse_of_constant_error() {
        let e = TargetError {
            aoa: 0.1,
            range: -0.3f64.abs(),
            location: 2.0,
        };
        let s = TargetStats::from_errors([e, e, e].iter());
        assert_eq!(s.detections, 3);
        assert_relative_eq!(s.aoa_rmse.unwrap(), 0.1, max_relative = 1e-15);
        assert_relative_eq!(s.range_rmse.unwrap(), 0.3, max_relative = 1e-15);
        assert_relative_eq!(s.location_rmse.unwrap(), 2.0, max_relative = 1e-15);
        let empty = TargetStats::from_errors(std::iter::empty());
        assert_eq!(empty.detections, 0);
        assert!(empty.range_rmse.is_none());
    }

    #[test]
    fn rmse_is_root_mean_square() {
        let errs: Vec<TargetError> = [1.0, 2.0, 2.0]
            .iter()
            .map(|&r| TargetError {
                aoa: 0.0,
                range: r,
                location: r,
            })
            .collect();
        let s = TargetStats::from_errors(&errs);
        assert_relative_eq!(s.range_rmse.unwrap(), 3.0f64.sqrt(), max_relative = 1e-15);
    }

    fn fixture() -> RmseReport {
        let stats = |d: usize, a: f64, r: f64, l: f64| TargetStats {
            detections: d,
            aoa_rmse: Some(a),
            range_rmse: Some(r),
            location_rmse: Some(l),
        };
        RmseReport {
            sweep: SweepParameter::SnrDb,
            case: ProcessingCase::Kf,
            points: vec![
                PointReport {
                    sweep_value: Some(8.0),
                    comm_snr_db: Some(8.0),
                    beam_snr_db: Some(26.0618),
                    sqrt_crb: Some(1.8e-4),
                    ue: stats(10, 1.5e-3, 0.0125, 0.25),
                    scatterer: TargetStats::default(),
                    infeasible: 2,
                    failed: 0,
                    trials: 10,
                    outcomes: Vec::new(),
                },
                PointReport {
                    sweep_value: Some(16.0),
                    comm_snr_db: Some(16.0),
                    beam_snr_db: Some(34.0618),
                    sqrt_crb: Some(7.2e-5),
                    ue: stats(10, 4e-4, 0.005, 0.1),
                    scatterer: stats(7, 0.02, 0.5, 12.5),
                    infeasible: 0,
                    failed: 1,
                    trials: 10,
                    outcomes: Vec::new(),
                },
            ],
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let report = RmseReport {
            sweep: SweepParameter::None,
            case: ProcessingCase::Plain,
            points: Vec::new(),
        };
        let mut out = Vec::new();
        write_csv(&report_rows(&report), &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "sweep_name,sweep_value,target_kind,metric,value,trials,case\n"
        );
    }

    #[test]
    fn csv_round_trip() {
        let rows = report_rows(&fixture());
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        assert_eq!(read_csv(out.as_slice()).unwrap(), rows);
        let single = RmseReport {
            sweep: SweepParameter::None,
            case: ProcessingCase::Kf,
            points: vec![PointReport {
                sweep_value: None,
                ..fixture().points[0].clone()
            }],
        };
        let rows = report_rows(&single);
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        assert_eq!(read_csv(out.as_slice()).unwrap(), rows);
    }

    #[test]
    fn csv_matches_golden_file() {
        let mut out = Vec::new();
        write_csv(&report_rows(&fixture()), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), GOLDEN_CSV);
    }

    #[test]
    fn emit_csv_reports_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("out.csv");
        assert!(matches!(emit_csv(&fixture(), &path), Err(Error::Io { .. })));
        let ok = dir.path().join("out.csv");
        emit_csv(&fixture(), &ok).unwrap();
        assert_eq!(std::fs::read_to_string(ok).unwrap(), GOLDEN_CSV);
    }

    fn small_tensor() -> CsiTensor {
        let mut cfg = ExperimentConfig::reference();
        small(&mut cfg);
        cfg.clock.timing_std = 5e-9;
        let p = cfg.point(None).unwrap();
        simulate_trial(&p, TrialSeeds::derive(3, 0)).unwrap()
    }

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let t = small_tensor();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        let header_len = buf.iter().position(|&b| b == b'\n').unwrap() + 1;
        assert_eq!(buf.len(), header_len + 16 * 64 * 32 * 16);
        assert!(buf.starts_with(b"JCAS-CSI-1 rows=8 cols=8 "));
        // First entry: antenna 0, subcarrier 0, packet 0.
        let re = f64::from_le_bytes(buf[header_len..header_len + 8].try_into().unwrap());
        assert_eq!(re, t.get(0, 0, 0).re);
        let back = read_tensor(buf.as_slice()).unwrap();
        assert_eq!(back, t);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        save_tensor(&t, &path).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), t);
    }

    #[test]
    fn malformed_tensor_rejected() {
        let t = small_tensor();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            read_tensor(truncated),
            Err(Error::TensorFormat(_))
        ));
        assert!(matches!(
            read_tensor(&b"NOPE rows=1\n"[..]),
            Err(Error::TensorFormat(_))
        ));
        let text = String::from_utf8_lossy(&buf[..40]).replace("rows=8", "rows=x");
        let mut bad = text.into_bytes();
        bad.extend_from_slice(&buf[40..]);
        assert!(matches!(
            read_tensor(bad.as_slice()),
            Err(Error::TensorFormat(_))
        ));
        assert!(matches!(
            load_tensor(Path::new("/nonexistent/t.bin")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn trial_is_deterministic() {
        let mut cfg = ExperimentConfig::reference();
        small(&mut cfg);
        let p = cfg.point(None).unwrap();
        let a = run_trial(&p, ProcessingCase::Kf, 5, 2);
        let b = run_trial(&p, ProcessingCase::Kf, 5, 2);
        assert_eq!(a, b);
        assert_eq!(a.trial, 2);
        assert_eq!(a.scatterers.len(), 1);
    }

    #[test]
    fn failed_stage_is_recorded() {
        let mut cfg = ExperimentConfig::reference();
        small(&mut cfg);
        let mut p = cfg.point(None).unwrap();
        // A one-point grid has no strict local minimum.
        p.settings.aoa.grid_points = 1;
        let o = run_trial(&p, ProcessingCase::Plain, 1, 0);
        assert!(o.error.is_some());
        assert!(o.ue.is_none());
        let report = PointReport::aggregate(None, &p, vec![o]).unwrap();
        assert_eq!(report.failed, 1);
        assert_eq!(report.ue.detections, 0);
    }

    #[test]
    fn single_trial_sweep_reduces_to_trial() {
        let mut cfg = ExperimentConfig::reference();
        small(&mut cfg);
        cfg.trials = 1;
        let report = run_sweep(&cfg).unwrap();
        assert_eq!(report.points.len(), 1);
        let p = &report.points[0];
        let trial = run_trial(&cfg.point(None).unwrap(), cfg.case, cfg.seed, 0);
        assert_eq!(p.outcomes, vec![trial.clone()]);
        if let Some(e) = trial.ue {
            assert_eq!(p.ue.range_rmse, Some(e.range));
            assert_eq!(p.ue.location_rmse, Some(e.location));
        }
    }
}
