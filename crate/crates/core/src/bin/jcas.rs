use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use jcas_core::harness::{
    emit_csv, load_tensor, report_rows, run_sweep, save_tensor, simulate_trial, write_csv, CsvRow,
    ExperimentConfig, TrialSeeds,
};
use jcas_core::pipeline::{sense, ProcessingCase, SearchSettings};
use jcas_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "jcas",
    version,
    about = "Uplink bi-static sensing simulator and estimator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trial and dump its CSI tensor.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trial index whose random draws are used.
        #[arg(long, default_value_t = 0)]
        trial: u64,
    },
    /// Run the estimator chain on a tensor dump and write the targets as CSV.
    Sense {
        #[command(flatten)]
        common: Common,
        /// Tensor dump written by `simulate`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Monte-Carlo RMSE sweep written as CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Range CRB at every sweep point written as CSV.
    Crb {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; the built-in reference scene when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when omitted (required for `simulate`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the processing case.
    #[arg(long, value_parser = parse_case)]
    case: Option<ProcessingCase>,
    /// Overrides the number of trials per sweep point.
    #[arg(long)]
    trials: Option<usize>,
}

fn parse_case(s: &str) -> std::result::Result<ProcessingCase, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::reference(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(case) = self.case {
            cfg.case = case;
        }
        if let Some(trials) = self.trials {
            cfg.trials = trials;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn writer(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(path) => Box::new(BufWriter::new(
                File::create(path).map_err(|e| io_err(path, e))?,
            )),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One line of `sense` output.
#[derive(Serialize)]
struct TargetRow {
    target_kind: &'static str,
    aoa_index: usize,
    doppler_index: usize,
    range_index: usize,
    azimuth_rad: f64,
    elevation_rad: f64,
    range_m: f64,
    x_m: f64,
    y_m: f64,
    z_m: f64,
}

fn simulate(common: &Common, trial: u64) -> Result<()> {
    let cfg = common.config()?;
    let Some(out) = &common.out else {
        return Err(Error::InvalidConfig("simulate needs --out".into()));
    };
    let setup = cfg.point(cfg.sweep_values()[0])?;
    let csi = simulate_trial(&setup, TrialSeeds::derive(cfg.seed, trial))?;
    save_tensor(&csi, out)
}

fn sense_cmd(common: &Common, input: &Path) -> Result<()> {
    let csi = load_tensor(input)?;
    let (settings, case) = match &common.config {
        Some(_) => {
            let cfg = common.config()?;
            (cfg.search.settings(&csi.ofdm), cfg.case)
        }
        None => (
            SearchSettings::for_ofdm(&csi.ofdm),
            common.case.unwrap_or(ProcessingCase::Kf),
        ),
    };
    let report = sense(&csi, &settings, case)?;
    let mut w = csv::Writer::from_writer(common.writer()?);
    let targets = report
        .ue
        .iter()
        .map(|t| ("ue", t))
        .chain(report.scatterers.iter().map(|t| ("scatterer", t)));
    for (kind, (cand, loc)) in targets {
        w.serialize(TargetRow {
            target_kind: kind,
            aoa_index: cand.aoa_index,
            doppler_index: cand.doppler_index,
            range_index: cand.range_index,
            azimuth_rad: cand.angle.azimuth,
            elevation_rad: cand.angle.elevation,
            range_m: cand.range,
            x_m: loc.position.x,
            y_m: loc.position.y,
            z_m: loc.position.z,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn sweep(common: &Common) -> Result<()> {
    let report = run_sweep(&common.config()?)?;
    match &common.out {
        Some(path) => emit_csv(&report, path),
        None => write_csv(&report_rows(&report), io::stdout().lock()),
    }
}

fn crb(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let mut rows = Vec::new();
    for value in cfg.sweep_values() {
        let setup = cfg.point(value)?;
        let row = |kind: &str, metric: &str, v: f64| CsvRow {
            sweep_name: cfg.sweep.parameter.as_str().to_string(),
            sweep_value: value,
            target_kind: kind.to_string(),
            metric: metric.to_string(),
            value: v,
            trials: 0,
            case: cfg.case,
        };
        if let Some(gamma) = setup.los_beam_snr()? {
            rows.push(row("all", "beam_snr_db", 10.0 * gamma.log10()));
        }
        if let Some(c) = setup.sqrt_crb()? {
            rows.push(row("ue", "sqrt_crb_m", c));
        }
    }
    write_csv(&rows, common.writer()?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common, trial } => simulate(common, *trial),
        Command::Sense { common, input } => sense_cmd(common, input),
        Command::Sweep { common } => sweep(common),
        Command::Crb { common } => crb(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
