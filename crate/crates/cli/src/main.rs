use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hetquery::experiment::{
    ablation_csv, attention_csv, link_document, report_json, run_ablation, run_experiment, scene_only, RunConfig,
    RunReport, Timing,
};
use hetquery::qswap::SwapMode;
use hetquery::scene::SceneDocument;
use hetquery::weights::{init_weights, save_weights};
use hetquery::{DecoderWeightsF32, Error, Result};

#[derive(Parser)]
#[command(name = "hetquery", version, about = "Heterogeneous-query fusion decoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset used when no config file is given.
    #[arg(long)]
    preset: Option<String>,
    /// Dotted overrides such as `decoder.layers=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for the scene and every rendered input.
    #[arg(long)]
    scene_seed: Option<u64>,
    /// Seed for decoder weight initialization.
    #[arg(long)]
    weights_seed: Option<u64>,
    /// `append` or `replace`.
    #[arg(long)]
    qswap_mode: Option<SwapMode>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => return Err(Error::Config("pass either --config or --preset, not both".into())),
            (Some(path), None) => RunConfig::from_json(&fs::read_to_string(path)?)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::default(),
        };
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.scene_seed {
            overrides.push(format!("seeds.scene={s}"));
        }
        if let Some(s) = self.weights_seed {
            overrides.push(format!("seeds.weights={s}"));
        }
        if let Some(m) = self.qswap_mode {
            let name = match m {
                SwapMode::Append => "append",
                SwapMode::Replace => "replace",
            };
            overrides.push(format!("decoder.qswap.mode={name}"));
        }
        base.with_overrides(&overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene and camera rig as JSON.
    GenScene {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Decode one scene and write the run report.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Report path; falls back to `output.report` in the config.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Per-stage wall-clock JSON; defaults to `<report>.timing.json`.
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Type-to-type attention statistics CSV from a report.
    AnalyzeAttn {
        report: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Top cross-type links JSON from a report.
    Links {
        report: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Component and QMix-placement ablation CSV.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write seeded decoder weights to a `.cfw` file.
    InitWeights {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene { config, out } => {
            let cfg = config.load()?;
            let (scene, rig) = scene_only(&cfg)?;
            let doc = SceneDocument::new(&scene, &rig);
            write(&out, &(serde_json::to_string_pretty(&doc)? + "\n"))
        }
        Command::Run { config, out, timing } => {
            let cfg = config.load()?;
            let out = out
                .or_else(|| cfg.output.report.as_ref().map(PathBuf::from))
                .ok_or_else(|| Error::Config("no report path: pass --out or set output.report".into()))?;
            let (report, times): (RunReport, Timing) = match config.precision {
                Precision::F64 => run_experiment::<f64>(&cfg)?,
                Precision::F32 => run_experiment::<f32>(&cfg)?,
            };
            write(&out, &report_json(&report)?)?;
            let timing_path = timing
                .or_else(|| cfg.output.timing.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| {
                    let mut p = out.clone().into_os_string();
                    p.push(".timing.json");
                    PathBuf::from(p)
                });
            write(&timing_path, &(serde_json::to_string_pretty(&times)? + "\n"))
        }
        Command::AnalyzeAttn { report, out } => write(&out, &attention_csv(&read_report(&report)?)?),
        Command::Links { report, out } => {
            let doc = link_document(&read_report(&report)?)?;
            write(&out, &(serde_json::to_string_pretty(&doc)? + "\n"))
        }
        Command::Ablate { config, out } => {
            let cfg = config.load()?;
            let rows = match config.precision {
                Precision::F64 => run_ablation::<f64>(&cfg)?,
                Precision::F32 => run_ablation::<f32>(&cfg)?,
            };
            write(&out, &ablation_csv(&rows))
        }
        Command::InitWeights { config, out } => {
            let cfg = config.load()?;
            let weights: DecoderWeightsF32 = init_weights(cfg.seeds.weights, &cfg.decoder)?;
            save_weights(&weights, &cfg.decoder, &out)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
