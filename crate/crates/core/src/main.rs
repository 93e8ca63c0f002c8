use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ds3net::eval::{
    dump_difficulty, evaluate_predictions, export_error_maps, format_sweep_table, run_sweep, write_sweep_csv,
    EvalOptions, ReportMeta,
};
use ds3net::nets::NetBundle;
use ds3net::phantom_data::{build_split_with, export_split, import_split, DatasetSplit, SplitPart};
use ds3net::trainer::{predict_samples, train_to_dir, TrainConfig};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "ds3net", version, about = "Semi-supervised T1ce synthesis on procedural phantoms")]
struct Cli {
    /// Seed for data generation, initialisation and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON training configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset split and write it to disk.
    GenData(GenData),
    /// Run both training stages and save checkpoints and metrics.
    Train(Train),
    /// Score a checkpoint on one split part.
    Eval(Eval),
    /// Paired-only vs semi-supervised comparison over paired fractions.
    Sweep(Sweep),
    /// Write difficulty maps of a checkpoint's own predictions as PNGs.
    DumpDifficulty(Dump),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 40)]
    patients: usize,
    #[arg(long, default_value_t = 8)]
    slices: usize,
    #[arg(long, default_value_t = 0.05)]
    paired_fraction: f64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Dataset directory; defaults to `<out-dir>/data`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Toggles {
    #[arg(long)]
    paired_only: bool,
    #[arg(long)]
    disable_map: bool,
    #[arg(long)]
    disable_fd: bool,
    #[arg(long)]
    disable_id: bool,
    #[arg(long)]
    freeze_teacher: bool,
}

#[derive(Args)]
struct DataSource {
    /// Dataset directory written by `gen-data`; generated from the config
    /// when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    /// Start from the desk-scale smoke configuration.
    #[arg(long)]
    smoke: bool,
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    toggles: Toggles,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: DataSource,
    /// One of paired, unpaired, val, test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    foreground_only: bool,
    /// Also write per-sample error maps.
    #[arg(long)]
    error_maps: bool,
}

#[derive(Args)]
struct Sweep {
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.5,1.0")]
    fractions: Vec<f64>,
    #[arg(long)]
    smoke: bool,
}

#[derive(Args)]
struct Dump {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: DataSource,
    #[arg(long, default_value = "val")]
    split: String,
    /// Maximum number of samples to dump.
    #[arg(long, default_value_t = 16)]
    count: usize,
}

fn load_config(cli: &Cli, smoke: bool) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None if smoke => TrainConfig::smoke(cli.seed.unwrap_or(0)),
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(source: &DataSource, cfg: &TrainConfig) -> Result<DatasetSplit> {
    match &source.data {
        Some(dir) => import_split(dir).with_context(|| format!("importing {}", dir.display())),
        None => Ok(cfg.data.build()?),
    }
}

fn parse_part(name: &str) -> Result<SplitPart> {
    match SplitPart::ALL.into_iter().find(|p| p.name() == name) {
        Some(p) => Ok(p),
        None => bail!("unknown split part {name:?}"),
    }
}

fn load_checkpoint(path: &Path) -> Result<NetBundle<f32>> {
    let (bundle, _meta) = NetBundle::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(bundle)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData(a) => {
            let seed = cli.seed.unwrap_or(0);
            let split = build_split_with(a.patients, a.slices, a.paired_fraction, seed, a.size)?;
            let out = a.out.clone().unwrap_or_else(|| cli.out_dir.join("data"));
            export_split(&split, &out)?;
            for part in SplitPart::ALL {
                println!("{:<9} {:>5} slices", part.name(), split.part(part).len());
            }
            println!("split hash {}", split.meta.hash);
        }
        Command::Train(a) => {
            let mut cfg = load_config(&cli, a.smoke)?;
            let t = &mut cfg.toggles;
            t.paired_only |= a.toggles.paired_only;
            t.disable_map |= a.toggles.disable_map;
            t.disable_fd |= a.toggles.disable_fd;
            t.disable_id |= a.toggles.disable_id;
            t.freeze_teacher |= a.toggles.freeze_teacher;
            let split = load_split(&a.source, &cfg)?;
            let start = Instant::now();
            let outcome = train_to_dir(&cfg, &split, &cli.out_dir)?;
            println!(
                "trained {} steps in {:.1}s; stage-1 checkpoint epoch {}; outputs in {}",
                outcome.log().len(),
                start.elapsed().as_secs_f64(),
                outcome.stage1.checkpoint_epoch,
                cli.out_dir.display()
            );
        }
        Command::Eval(a) => {
            let cfg = load_config(&cli, false)?;
            let split = load_split(&a.source, &cfg)?;
            let samples = split.part(parse_part(&a.split)?);
            let model = load_checkpoint(&a.checkpoint)?;
            let preds = predict_samples(&model, samples)?;
            let meta = ReportMeta {
                config_hash: cfg.hash(),
                checkpoint_id: model.params_hash(),
                split_name: a.split.clone(),
            };
            let opts = EvalOptions {
                foreground_only: a.foreground_only,
            };
            let report = evaluate_predictions(&preds, samples, meta, opts)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            std::fs::write(cli.out_dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
            report.write_csv(&cli.out_dir.join("per_sample.csv"))?;
            if a.error_maps {
                export_error_maps(&preds, samples, &cli.out_dir.join("error_maps"))?;
            }
            println!(
                "{} samples: SSIM {:.4}  PSNR {}  MSE {:.6}",
                report.samples.len(),
                report.mean_ssim,
                report.mean_psnr,
                report.mean_mse
            );
        }
        Command::Sweep(a) => {
            let cfg = load_config(&cli, a.smoke)?;
            let rows = run_sweep(&cfg, &a.fractions)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            write_sweep_csv(&rows, &cli.out_dir.join("sweep.csv"))?;
            print!("{}", format_sweep_table(&rows));
        }
        Command::DumpDifficulty(a) => {
            let cfg = load_config(&cli, false)?;
            let split = load_split(&a.source, &cfg)?;
            let samples = split.part(parse_part(&a.split)?);
            let model = load_checkpoint(&a.checkpoint)?;
            let n = a.count.min(samples.len());
            let paths = dump_difficulty(&model, &samples[..n], cfg.clamp_max, &cli.out_dir.join("difficulty"))?;
            println!("wrote {} maps to {}", paths.len(), cli.out_dir.join("difficulty").display());
        }
    }
    Ok(())
}
