use std::path::PathBuf;
use std::process::exit;

use clap::{Parser, Subcommand};

use glasseg::{data, metrics, pipeline, Error, Result};

#[derive(Parser)]
#[command(
    name = "glasseg",
    about = "Train, evaluate, and run a progressive glass segmentation network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a corpus (image/ + mask/ layout) and write a checkpoint.
    Train {
        /// Flat key=value config file; omit for defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write probability maps for every image in a directory.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of input images (png/jpg).
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction PNGs against name-matched ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Output prefix; writes <out>.csv and <out>.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset statistics: location heatmap, area and contrast histograms.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Location-prior baseline mask from the training masks.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        /// Output mask PNG path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = data::DEFAULT_SIZE)]
        size: usize,
    },
    /// Generate a reproducible synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 96)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data: root, out } => {
            let (net_cfg, train_cfg) = match config {
                Some(path) => pipeline::parse_config(&std::fs::read_to_string(&path)?)?,
                None => pipeline::parse_config("")?,
            };
            let corpus = data::load_corpus(&root)?;
            let result = pipeline::train(&corpus, net_cfg, &train_cfg, &out)?;
            let last = result.log.last().map(|s| s.loss.total).unwrap_or(f64::NAN);
            println!(
                "trained {} steps, final loss {last:.6}, checkpoint at {}",
                result.iterations,
                result.checkpoint_path.display()
            );
        }
        Command::Predict { ckpt, images, out } => {
            let files = pipeline::list_images(&images)?;
            let written = pipeline::predict(&ckpt, &files, &out)?;
            println!("wrote {} prediction maps to {}", written.len(), out.display());
        }
        Command::Eval { pred, gt, out } => {
            let report = pipeline::eval_command(&pred, &gt, &out)?;
            println!(
                "iou {:.2}  wf {}  mae {:.4}  ber {}  ({} images, {} excluded from wf, {} from ber)",
                report.mean_iou,
                report
                    .mean_wf
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "n/a".into()),
                report.mean_mae,
                report
                    .mean_ber
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_else(|| "n/a".into()),
                report.per_image.len(),
                report.wf_excluded,
                report.ber_excluded,
            );
        }
        Command::Stats { data: root, out } => {
            let corpus = data::load_corpus(&root)?;
            let stats = data::compute_stats(&corpus)?;
            data::write_stats(&stats, &out)?;
            println!("stats for {} images written to {}", stats.count, out.display());
        }
        Command::Baseline { data: root, out, size } => {
            let corpus = data::load_corpus(&root)?;
            let masks: Vec<_> = corpus.iter().map(|s| s.mask.clone()).collect();
            let baseline = metrics::statistics_baseline(&masks, (size, size))?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            data::mask_to_gray8(&baseline).save(&out)?;
            println!("baseline mask written to {}", out.display());
        }
        Command::Synth { out, n, side, seed } => {
            let corpus = data::make_synthetic_corpus(n, side, seed)?;
            data::write_corpus(&corpus, &out)?;
            println!("wrote {n} synthetic pairs to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        exit(Error::exit_code(&e));
    }
}
