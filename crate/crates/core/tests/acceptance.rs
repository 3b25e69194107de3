//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;

use jcas_core::aoa::{
    apply_spatial_filter, correlation_matrix, default_aoa_search, estimate_aoas,
    make_spatial_filter,
};
use jcas_core::channel::{
    complex_gaussian, default_transmit_beamformer, draw_clock_offsets, simulate_csi, stream_rng,
    ClockDraws, ClockModel, CsiTensor, OfdmConfig,
};
use jcas_core::crb::{crb_range, fisher_numeric, CrbInputs};
use jcas_core::drde::{kf_enhance, verify_decoupling};
use jcas_core::geometry::{derive_paths, kmh_to_ms, SceneConfig, Vec3};
use jcas_core::harness::{run_sweep, run_trial, ExperimentConfig, SweepParameter, SweepSection};
use jcas_core::pipeline::ProcessingCase;
use jcas_core::subspace::MODEL_ORDER_EPS;
use jcas_core::Complex64;

type Check = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn reference_at(
    snr_db: f64,
    timing_std: f64,
    trials: usize,
    case: ProcessingCase,
) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference();
    cfg.trials = trials;
    cfg.case = case;
    cfg.clock = ClockModel {
        timing_std,
        cfo_std: 240.0,
    };
    cfg.ofdm.snr_db = Some(snr_db);
    cfg
}

/// Noiseless, offset-free reference scene: both targets recovered.
fn noiseless_exactness() -> Verdict {
    let mut cfg = ExperimentConfig::reference();
    cfg.scene.noise_power = 0.0;
    cfg.clock = ClockModel::default();
    cfg.trials = 1;
    let setup = cfg.point(None).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let mut ok = true;
    let mut elapsed = 0.0;
    for case in [ProcessingCase::Kf, ProcessingCase::Plain] {
        let start = Instant::now();
        let outcome = pool.install(|| run_trial(&setup, case, cfg.seed, 0));
        elapsed = f64::max(elapsed, start.elapsed().as_secs_f64());
        let targets: Vec<_> = std::iter::once(outcome.ue)
            .chain(outcome.scatterers.iter().copied())
            .collect();
        for t in targets {
            match t {
                Some(e) => {
                    worst = (
                        worst.0.max(e.aoa),
                        worst.1.max(e.range),
                        worst.2.max(e.location),
                    );
                }
                None => ok = false,
            }
        }
        ok &= outcome.error.is_none();
    }
    ok &= worst.0 < 1e-3 && worst.1 < 1e-2 && worst.2 < 1e-1 && elapsed < 60.0;
    verdict(
        ok,
        format!(
            "max aoa err {:.2e} rad (< 1e-3), range {:.2e} m (< 1e-2), location {:.2e} m (< 1e-1), slowest trial {elapsed:.2} s single-threaded (< 60)",
            worst.0, worst.1, worst.2
        ),
    )
}

/// UE range RMSE within 3 √C_r at 8, 12 and 16 dB.
fn crb_attainment() -> Verdict {
    let mut cfg = reference_at(16.0, 0.0, 100, ProcessingCase::Kf);
    cfg.sweep = SweepSection {
        parameter: SweepParameter::SnrDb,
        values: vec![8.0, 12.0, 16.0],
    };
    let report = run_sweep(&cfg).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for p in &report.points {
        let crb = p.sqrt_crb.unwrap();
        let ratio = p.ue.range_rmse.map_or(f64::INFINITY, |r| r / crb);
        ok &= ratio <= 3.0 && p.ue.detections == p.trials;
        parts.push(format!(
            "{} dB: rmse {:.3e} m, sqrt(crb) {:.3e} m, ratio {ratio:.1} ({} detections)",
            p.sweep_value.unwrap(),
            p.ue.range_rmse.unwrap_or(f64::NAN),
            crb,
            p.ue.detections
        ));
    }
    verdict(ok, format!("{} (ratio <= 3)", parts.join("; ")))
}

/// Case 1 scatterer localization RMSE at least 10 dB below Case 2.
fn kf_gain() -> Verdict {
    let run = |case| {
        let report = run_sweep(&reference_at(16.0, 5e-9, 100, case)).unwrap();
        report.points[0].scatterer
    };
    let kf = run(ProcessingCase::Kf);
    let plain = run(ProcessingCase::Plain);
    let required = 10f64.powf(10.0 / 20.0);
    let (ok, ratio) = match (kf.location_rmse, plain.location_rmse) {
        (Some(k), Some(p)) => (p / k >= required, p / k),
        _ => (false, f64::NAN),
    };
    verdict(
        ok,
        format!(
            "scatterer location rmse kf {:.3e} m ({} detections), plain {:.3e} m ({} detections), ratio {ratio:.2} ({:.1} dB, need >= 10 dB)",
            kf.location_rmse.unwrap_or(f64::NAN),
            kf.detections,
            plain.location_rmse.unwrap_or(f64::NAN),
            plain.detections,
            20.0 * ratio.log10()
        ),
    )
}

/// The unit-modulus scalar that per-packet offsets put on snapshot `(n, m)`.
fn offset_phase(draws: &ClockDraws, ofdm: &OfdmConfig, n: usize, m: usize) -> Complex64 {
    let t = ofdm.packet_interval();
    Complex64::from_polar(
        1.0,
        2.0 * PI * m as f64 * t * draws.cfo[m]
            - 2.0 * PI * n as f64 * ofdm.subcarrier_spacing * draws.timing[m],
    )
}

fn rotate(csi: &CsiTensor, draws: &ClockDraws) -> CsiTensor {
    let mut out = csi.clone();
    let nc = csi.ofdm.subcarriers;
    for (k, mut col) in out.data.column_iter_mut().enumerate() {
        col *= offset_phase(draws, &csi.ofdm, k % nc, k / nc);
    }
    out
}

fn rel(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// R_x unchanged by timing and frequency offsets.
fn offset_immunity() -> Verdict {
    let cfg = reference_at(16.0, 5e-9, 1, ProcessingCase::Kf);
    let setup = cfg.point(None).unwrap();
    let w = default_transmit_beamformer(&setup.scene).unwrap();
    let draws = draw_clock_offsets(&setup.clock, setup.ofdm.packets, 11);
    let zeros = ClockDraws::zeros(setup.ofdm.packets);
    let reflections = vec![Complex64::new(1.3, -2.1)];
    let sim = |d: &ClockDraws, noise: f64| {
        simulate_csi(&setup.scene, &setup.ofdm, d, &w, noise, &reflections, 7).unwrap()
    };
    // The simulator applies the offsets as one scalar per snapshot.
    let clean = sim(&zeros, 0.0);
    let model_err = rel(&sim(&draws, 0.0).data, &rotate(&clean, &draws).data);
    let noiseless_err = rel(
        &correlation_matrix(&sim(&draws, 0.0)),
        &correlation_matrix(&clean),
    );
    // Fixed noise realization carried through the same per-snapshot scalar.
    let noisy = sim(&zeros, setup.noise_power);
    let r0 = correlation_matrix(&noisy);
    let r1 = correlation_matrix(&rotate(&noisy, &draws));
    let noisy_err = rel(&r1, &r0);
    let snapshots = Some(setup.ofdm.subcarriers * setup.ofdm.packets);
    let est = |r| {
        estimate_aoas(
            r,
            &noisy.array,
            &default_aoa_search(),
            MODEL_ORDER_EPS,
            snapshots,
        )
        .unwrap()
    };
    let (a0, a1) = (est(&r0), est(&r1));
    let same = a0.estimates.len() == a1.estimates.len()
        && a0.estimates.iter().zip(&a1.estimates).all(|(x, y)| {
            (x.angle.azimuth - y.angle.azimuth).abs() < 1e-9
                && (x.angle.elevation - y.angle.elevation).abs() < 1e-9
        });
    let worst = model_err.max(noiseless_err).max(noisy_err);
    verdict(
        worst <= 1e-12 && same,
        format!(
            "relative Frobenius error noiseless {noiseless_err:.1e}, fixed noise {noisy_err:.1e}, snapshot model {model_err:.1e} (<= 1e-12); {} AoAs identical: {same}",
            a0.estimates.len()
        ),
    )
}

/// Lowest grid SNR from which the RMSE stays at or below `reference`.
/// Trials without a UE detection count as unbounded error.
fn required_snr(snrs: &[f64], rmse: &[f64], reference: f64) -> Option<f64> {
    let mut best = None;
    for (s, r) in snrs.iter().zip(rmse).rev() {
        if *r <= reference {
            best = Some(*s);
        } else {
            break;
        }
    }
    best
}

/// 4x4 needs 6 ± 2 dB more SNR than 8x8 for the same UE range RMSE.
fn array_shift() -> Verdict {
    let snrs: Vec<f64> = (-22..=-4).map(f64::from).collect();
    let curve = |size: usize| -> Vec<f64> {
        let mut cfg = reference_at(16.0, 5e-9, 25, ProcessingCase::Kf);
        cfg.scene.bs_array = [size, size];
        cfg.sweep = SweepSection {
            parameter: SweepParameter::SnrDb,
            values: snrs.clone(),
        };
        run_sweep(&cfg)
            .unwrap()
            .points
            .iter()
            .map(|p| match p.ue.range_rmse {
                Some(r) if p.ue.detections == p.trials => r,
                _ => f64::INFINITY,
            })
            .collect()
    };
    let big = curve(8);
    let small = curve(4);
    let floor = big.last().unwrap().max(*small.last().unwrap());
    let reference = 1.5 * floor;
    let s8 = required_snr(&snrs, &big, reference);
    let s4 = required_snr(&snrs, &small, reference);
    let shift = match (s8, s4) {
        (Some(a), Some(b)) => b - a,
        _ => f64::NAN,
    };
    let fmt = |c: &[f64]| {
        c.iter()
            .map(|r| format!("{r:.2}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    verdict(
        (shift - 6.0).abs() <= 2.0,
        format!(
            "reference rmse {reference:.3} m; 8x8 reaches it at {s8:?} dB, 4x4 at {s4:?} dB, shift {shift:.1} dB (6 +- 2); 8x8 rmse [{}] 4x4 rmse [{}] over {:?}..{:?} dB",
            fmt(&big),
            fmt(&small),
            snrs[0],
            snrs[snrs.len() - 1]
        ),
    )
}

/// Noise-subspace residuals at the true range and DPO on random scenes.
fn decoupling() -> Verdict {
    let mut rng = stream_rng(2024, 0);
    let ofdm = OfdmConfig::reference();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut scene = SceneConfig::reference();
        scene.scatterers.clear();
        scene.ue_position = scene.bs_position
            + Vec3::new(
                rng.random_range(20.0..250.0),
                rng.random_range(-80.0..80.0),
                rng.random_range(-20.0..20.0),
            );
        scene.ue_velocity = Vec3::new(
            kmh_to_ms(rng.random_range(-120.0..120.0)),
            kmh_to_ms(rng.random_range(-120.0..120.0)),
            0.0,
        );
        let path = derive_paths(&scene).unwrap().remove(0);
        let w = default_transmit_beamformer(&scene).unwrap();
        let csi = simulate_csi(
            &scene,
            &ofdm,
            &ClockDraws::zeros(ofdm.packets),
            &w,
            0.0,
            &[],
            0,
        )
        .unwrap();
        let beam = make_spatial_filter(&path.aoa, &csi.array);
        let h = apply_spatial_filter(&csi, &beam).unwrap();
        let (r, f) = verify_decoupling(&h, &ofdm, path.aggregate_range(), path.doppler).unwrap();
        worst = worst.max(r).max(f);
    }
    verdict(
        worst < 1e-8,
        format!("max residual {worst:.2e} over 50 scenes (< 1e-8)"),
    )
}

/// Numerical Fisher information times the closed-form bound.
fn fisher_consistency() -> Verdict {
    let mut worst = 0.0f64;
    for gamma in [0.1, 1.0, 10.0, 100.0] {
        let inputs = CrbInputs {
            received_snr: gamma,
            subcarrier_spacing: 480e3,
            subcarriers: 256,
            packets: 64,
        };
        let product = fisher_numeric(&inputs, 90.0, 1e-3).unwrap() * crb_range(&inputs).unwrap();
        worst = worst.max((product - 1.0).abs());
    }
    verdict(
        worst <= 0.01,
        format!("max |F C - 1| = {worst:.2e} over gamma in {{0.1, 1, 10, 100}} (<= 1e-2)"),
    )
}

/// Degenerate and structural properties of the Kalman enhancer.
fn kf_suite() -> Verdict {
    let mut rng = stream_rng(77, 0);
    let mut failures = Vec::new();
    for trial in 0..200 {
        let len = rng.random_range(1..=96);
        let a = Complex64::from_polar(1.0, rng.random_range(-PI..PI));
        let noise = rng.random_range(0.0..4.0);
        let h: Vec<Complex64> = (0..len).map(|_| complex_gaussian(&mut rng, 2.0)).collect();

        let id = kf_enhance(&h, a, 0.0).unwrap();
        if id.filtered.iter().zip(&h).any(|(x, y)| x != y) {
            failures.push(format!("identity at trial {trial}"));
        }

        let c = complex_gaussian(&mut rng, 1.0);
        let constant = vec![c; len];
        let out = kf_enhance(&constant, Complex64::new(1.0, 0.0), noise).unwrap();
        if out.filtered.iter().any(|z| *z != c) {
            failures.push(format!("constant at trial {trial}"));
        }

        let out = kf_enhance(&h, a, noise).unwrap();
        let mut last = out.initial_variance;
        for s in &out.steps {
            if s.gain.im != 0.0 || !(0.0..=1.0).contains(&s.gain.re) {
                failures.push(format!("gain {} at trial {trial}", s.gain));
            }
            if s.posterior_variance > last || s.posterior_variance > s.prior_variance {
                failures.push(format!("variance increase at trial {trial}"));
            }
            last = s.posterior_variance;
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "identity at zero noise, exact constant input, gain in [0, 1], nonincreasing variance over 200 random sequences".into()
        } else {
            format!(
                "{} violations, first: {}",
                failures.len(),
                failures[..failures.len().min(5)].join(", ")
            )
        },
    )
}

#[test]
fn acceptance() {
    let checks: [Check; 8] = [
        ("noiseless exactness", noiseless_exactness),
        ("CRB attainment", crb_attainment),
        ("KF gain", kf_gain),
        ("AoA offset immunity", offset_immunity),
        ("array-size SNR shift", array_shift),
        ("range/Doppler decoupling", decoupling),
        ("Fisher/CRB consistency", fisher_consistency),
        ("KF degenerate cases", kf_suite),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let v = check();
        println!(
            "criterion {} {name}: {} ({:.1} s) {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
        if !v.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
