use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use myoseg_core::config::ExperimentConfig;
use myoseg_core::experiment::{
    compute_stats, generate_datasets, parse_metrics_csv, run_all, stats_csv, strategies, train_strategy, EXPERIMENTS,
};
use myoseg_core::infer::{argmax_labels, predict};
use myoseg_core::metrics::evaluate_case;
use myoseg_core::volume::{read_volume, write_volume, AnyVolume};
use myoseg_tensor::checkpoint::Checkpoint;

#[derive(Parser)]
#[command(name = "myoseg", version, about = "Myocardium segmentation under contrast shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic phantoms.
    Phantom {
        #[command(subcommand)]
        action: PhantomAction,
    },
    /// Train one model on the configured training phantoms.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        strategy: Strategy,
        #[arg(long)]
        out: PathBuf,
        /// Optional `iteration,lr,loss` log.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Predict a label map (and optionally per-class probabilities).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for one MET_FLOAT volume per class.
        #[arg(long)]
        probs: Option<PathBuf>,
        /// Working spacing in mm; defaults to the checkpoint's.
        #[arg(long)]
        spacing: Option<f64>,
    },
    /// DSC, ASSD and blood-pool HU for one prediction.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 1)]
        class: u8,
        #[arg(long)]
        out: PathBuf,
        /// Also print DSC after largest-component filtering.
        #[arg(long)]
        verbose: bool,
    },
    /// Friedman and pairwise signed-rank tests over a metrics CSV.
    Stats {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// The full four-experiment comparison.
    Experiment {
        #[command(subcommand)]
        action: ExperimentAction,
    },
}

#[derive(Subcommand)]
enum PhantomAction {
    /// Write the configured training and test phantoms as MetaImage files.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExperimentAction {
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    None,
    Global,
    Compartment,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::read(path).with_context(|| format!("reading config {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { action: PhantomAction::Gen { config, out } } => {
            let cfg = load_config(&config)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let data = generate_datasets(&cfg)?;
            for (id, case) in data.train.iter().chain(&data.test) {
                write_volume(&AnyVolume::Hu(case.image.clone()), &out.join(format!("{}_image.mhd", id)))?;
                write_volume(&AnyVolume::Labels(case.labels.clone()), &out.join(format!("{}_labels.mhd", id)))?;
            }
            println!("wrote {} training and {} test phantoms to {}", data.train.len(), data.test.len(), out.display());
        }
        Command::Train { config, strategy, out, loss_log } => {
            let cfg = load_config(&config)?;
            let data = generate_datasets(&cfg)?;
            let [none, global, compartment] = strategies(&cfg);
            let s = match strategy {
                Strategy::None => none,
                Strategy::Global => global,
                Strategy::Compartment => compartment,
            };
            let mut log = match &loss_log {
                Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => None,
            };
            let ckpt = train_strategy(&cfg, &data.train, &s, log.as_mut().map(|f| f as &mut dyn std::io::Write))?;
            ckpt.write(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("trained {} model, final loss {}", s.name(), ckpt.metadata.get("final_loss").map_or("?", String::as_str));
        }
        Command::Infer { ckpt, image, out, probs, spacing } => {
            let ck = Checkpoint::read(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            let spacing = match spacing {
                Some(s) => s,
                None => ck.metadata.get("target_spacing").and_then(|s| s.parse().ok()).unwrap_or(1.0),
            };
            let img = read_volume(&image)?.into_hu()?;
            let map = predict(&ck.to_model()?, &img, spacing)?;
            write_volume(&AnyVolume::Labels(argmax_labels(&map)), &out)?;
            if let Some(dir) = probs {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                for c in 0..map.num_classes() {
                    write_volume(&AnyVolume::Float(map.channel(c)), &dir.join(format!("class_{}.mhd", c)))?;
                }
            }
        }
        Command::Evaluate { pred, reference, image, class, out, verbose } => {
            let p = read_volume(&pred)?.into_labels()?;
            let r = read_volume(&reference)?.into_labels()?;
            let img = read_volume(&image)?.into_hu()?;
            let id = pred.file_stem().and_then(|s| s.to_str()).unwrap_or("case");
            let m = evaluate_case(id, &p, &r, &img, class)?;
            let flag = if m.assd_mm.is_none() { "empty_prediction" } else { "" };
            let csv = format!(
                "case_id,experiment,dsc,assd_mm,bloodpool_mean_hu,flag\n{},,{},{},{},{}\n",
                m.case_id,
                m.dsc,
                m.assd_mm.map_or(String::new(), |a| a.to_string()),
                m.bloodpool_mean_hu,
                flag
            );
            fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            if verbose {
                println!(
                    "{}: dsc {:.4}, dsc after largest component {:.4}, assd {} mm, blood pool {:.1} HU",
                    m.case_id,
                    m.dsc,
                    m.dsc_lcc,
                    m.assd_mm.map_or("n/a".to_string(), |a| format!("{:.3}", a)),
                    m.bloodpool_mean_hu
                );
            }
        }
        Command::Stats { metrics, out } => {
            let text = fs::read_to_string(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
            let m = parse_metrics_csv(&text)?;
            if m.iter().any(|e| e.len() != m[0].len()) || m[0].is_empty() {
                bail!("metrics must list the same non-empty case set for {}", EXPERIMENTS.join(", "));
            }
            let dsc: Vec<Vec<f64>> = m.iter().map(|e| e.iter().map(|c| c.dsc).collect()).collect();
            fs::write(&out, stats_csv(&compute_stats(&dsc)?)).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Experiment { action: ExperimentAction::Run { config, out } } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let report = run_all(&cfg, &out, |msg| eprintln!("{}", msg))?;
            for (i, s) in report.summary.iter().enumerate() {
                println!("{}: mean DSC {:.4} (sd {:.4})", EXPERIMENTS[i], s.dsc.mean, s.dsc.sd);
            }
            println!("friedman chi2 {:.4}, p {:.3e}", report.stats.friedman.chi2, report.stats.friedman.p);
            println!("reports written to {}", out.display());
        }
    }
    Ok(())
}
