//! Pipeline driver: synth -> sample -> filter -> pack -> pretrain ->
//! finetune -> eval -> sweep -> plot.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error. `GFM_LOG`
//! controls verbosity; logs are JSON lines on stderr.

mod commands;
mod config;
mod manifest;
mod plot;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{canonical_bytes, load_config, RunConfig};
use manifest::with_manifest;

#[derive(Parser)]
#[command(name = "geofm", version, about = "Geospatial masked-autoencoder pipeline")]
struct Cli {
    /// Run configuration (JSON, one section per stage).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-pool size; defaults to available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic tile corpus and climate grid.
    Synth,
    /// Stratified-sample tiles from the climate grid.
    Sample,
    /// Quality-filter sampled tiles into the chip index.
    Filter,
    /// Compute band stats and pack the chunked sample store.
    Pack,
    /// Pretrain the masked autoencoder on the store.
    Pretrain,
    /// Fine-tune for segmentation or cloud-gap imputation.
    Finetune,
    /// Evaluate the fine-tuned model on the held-out split.
    Eval,
    /// Data-efficiency sweep over training fractions.
    Sweep,
    /// Render a CSV log as an SVG line chart.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        x: Option<String>,
        #[arg(long)]
        y: Option<String>,
    },
    /// Run every stage in order.
    Run,
}

fn main() {
    init_logging();
    let cli = Cli::parse();
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(2, |n| n.get()));
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
        log::debug!("rayon pool already initialized: {e}");
    }
    match dispatch(&cli, workers) {
        Ok(()) => {}
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn dispatch(cli: &Cli, workers: usize) -> anyhow::Result<()> {
    if let Command::Plot { input, output, x, y } = &cli.command {
        commands::plot_cmd::run(input, output, x.as_deref(), y.as_deref())?;
        return Ok(());
    }

    let cfg = load_overridden_config(cli)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    match &cli.command {
        Command::Synth => stage_synth(&cfg)?,
        Command::Sample => stage_sample(&cfg)?,
        Command::Filter => stage_filter(&cfg)?,
        Command::Pack => stage_pack(&cfg)?,
        Command::Pretrain => stage_pretrain(&cfg, workers)?,
        Command::Finetune => stage_finetune(&cfg)?,
        Command::Eval => stage_eval(&cfg)?,
        Command::Sweep => stage_sweep(&cfg)?,
        Command::Run => {
            stage_synth(&cfg)?;
            stage_sample(&cfg)?;
            stage_filter(&cfg)?;
            stage_pack(&cfg)?;
            stage_pretrain(&cfg, workers)?;
            stage_finetune(&cfg)?;
            stage_eval(&cfg)?;
            stage_sweep(&cfg)?;
        }
        Command::Plot { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn load_overridden_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("--config is required for this command"))?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn stage_synth(cfg: &RunConfig) -> anyhow::Result<()> {
    with_manifest("synth", &cfg.out_dir, &canonical_bytes(cfg), &[], || {
        commands::synth::run(cfg)
    })?;
    Ok(())
}

fn stage_sample(cfg: &RunConfig) -> anyhow::Result<()> {
    let p = commands::Paths::new(&cfg.out_dir);
    with_manifest(
        "sample",
        &cfg.out_dir,
        &canonical_bytes(cfg),
        &[p.climate_csv()],
        || commands::sample::run(cfg),
    )?;
    Ok(())
}

fn stage_filter(cfg: &RunConfig) -> anyhow::Result<()> {
    let p = commands::Paths::new(&cfg.out_dir);
    with_manifest(
        "filter",
        &cfg.out_dir,
        &canonical_bytes(cfg),
        &[p.sampled_tiles()],
        || commands::filter::run(cfg),
    )?;
    Ok(())
}

fn stage_pack(cfg: &RunConfig) -> anyhow::Result<()> {
    let p = commands::Paths::new(&cfg.out_dir);
    with_manifest(
        "pack",
        &cfg.out_dir,
        &canonical_bytes(cfg),
        &[p.index_jsonl()],
        || commands::pack::run(cfg),
    )?;
    Ok(())
}

fn stage_pretrain(cfg: &RunConfig, workers: usize) -> anyhow::Result<()> {
    let p = commands::Paths::new(&cfg.out_dir);
    with_manifest(
        "pretrain",
        &cfg.out_dir,
        &canonical_bytes(cfg),
        &[p.store_dir().join("manifest.json")],
        || commands::pretrain::run(cfg, workers),
    )?;
    Ok(())
}

fn stage_finetune(cfg: &RunConfig) -> anyhow::Result<()> {
    let p = commands::Paths::new(&cfg.out_dir);
    with_manifest(
        "finetune",
        &cfg.out_dir,
        &canonical_bytes(cfg),
        &[p.store_dir().join("manifest.json")],
        || commands::finetune::run(cfg),
    )?;
    Ok(())
}

fn stage_eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let p = commands::Paths::new(&cfg.out_dir);
    with_manifest(
        "eval",
        &cfg.out_dir,
        &canonical_bytes(cfg),
        &[p.finetune_dir().join("ckpt.bin")],
        || commands::eval::run(cfg),
    )?;
    Ok(())
}

fn stage_sweep(cfg: &RunConfig) -> anyhow::Result<()> {
    let p = commands::Paths::new(&cfg.out_dir);
    with_manifest(
        "sweep",
        &cfg.out_dir,
        &canonical_bytes(cfg),
        &[p.store_dir().join("manifest.json")],
        || commands::sweep::run(cfg),
    )?;
    Ok(())
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("GFM_LOG", "info");
    env_logger::Builder::from_env(env)
        .format(|buf, record| {
            let line = serde_json::json!({
                "ts": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                "level": record.level().to_string(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}
