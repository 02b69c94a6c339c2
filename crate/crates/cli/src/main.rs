mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use itl_core::data::write_site;
use itl_core::engine::{run_scheme, RunWriter};
use itl_core::metrics::{evaluate_site, metrics_csv, MetricsRow};
use itl_core::model::load_checkpoint;
use log::info;

use config::{ExperimentConfig, OUTPUT_ROOT_ENV};

#[derive(Parser)]
#[command(name = "itl", version, about = "Incremental transfer learning for multi-site segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic sites and write them as manifests.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: config `output_dir`, or $ITL_OUTPUT_ROOT/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured scheme over all sites in order.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; must be empty or absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the test split of every configured site.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// CSV destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build forgetting tables, comparison and cost tables and loss plots.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_dir(cfg: &ExperimentConfig, out: Option<PathBuf>, leaf: &str) -> PathBuf {
    if let Some(o) = out {
        return o;
    }
    if let Some(o) = &cfg.output_dir {
        return o.clone();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(leaf)
}

fn ensure_fresh(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        bail!("run directory {} is not empty; refusing to overwrite", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth_data(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    if cfg.data.synthetic.is_empty() {
        bail!("config has no [[data.synthetic]] sites");
    }
    let dir = default_dir(&cfg, out, "data");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for site in itl_core::data::synthesize_sites(&cfg.data.synthetic)? {
        let path = write_site(&site, &dir)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let leaf = format!("{}_seed{}", cfg.train.scheme, cfg.train.seed);
    let dir = default_dir(&cfg, out, &leaf);
    ensure_fresh(&dir)?;
    let sites = cfg.load_sites()?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    info!(
        "training {} on {} sites into {}",
        cfg.train.scheme,
        sites.len(),
        dir.display()
    );
    let mut writer = RunWriter::create(&dir)?;
    let outcome = run_scheme(&sites, &cfg.setup(), &mut writer)?;
    writer.finish(&outcome)?;
    for row in outcome.metrics_rows() {
        info!(
            "phase {} site {}: DSC {:.2}% HD95 {:.2} mm",
            row.phase, row.site, row.dsc_percent, row.hd95_mm
        );
    }
    println!("{}", dir.display());
    Ok(())
}

fn evaluate(checkpoint: &Path, config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let model = load_checkpoint(checkpoint)?;
    let sites = cfg.load_sites()?;
    let mut rows = Vec::new();
    for site in &sites {
        let m = evaluate_site(&model, site, cfg.train.threshold)
            .with_context(|| format!("evaluating site {}", site.site_id()))?;
        rows.push(MetricsRow {
            scheme: cfg.train.scheme.as_str().to_string(),
            backbone: model.encoder.spec.kind.as_str().to_string(),
            gamma: cfg.train.gamma_percent,
            phase: model.phase_index,
            site: m.site_id,
            dsc_percent: m.dsc_percent,
            hd95_mm: m.hd95_mm,
        });
    }
    let text = metrics_csv(&rows)?;
    match out {
        Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { config, out } => synth_data(&config, out),
        Command::Train { config, out, seed } => train(&config, out, seed),
        Command::Evaluate { checkpoint, config, out } => evaluate(&checkpoint, &config, out),
        Command::Report { runs, out } => {
            let loaded = runs.iter().map(|d| report::load_run(d)).collect::<Result<Vec<_>>>()?;
            for p in report::write_report(&loaded, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
