use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use plab::diagnostics::spectral_trajectory;
use plab::harness::{self, parse_list, ExperimentConfig};
use plab::models::load_checkpoint;
use plab::regularizers::RegularizerKind;

#[derive(Parser)]
#[command(name = "plab", version, about = "Trainability experiments on small MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one task stream and write metrics.csv, manifest.json and checkpoint.bin.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a grid of regularizer kinds and strengths.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lambdas: String,
        #[arg(long)]
        kinds: String,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-fitting a two-unit network whose first layer has spectral norm c + 1/c.
    DemoA1 {
        #[arg(long, default_value = "1,10,100")]
        c: String,
        #[arg(long, default_value = "0.1,0.01,0.001")]
        alpha: String,
        #[arg(long)]
        json: bool,
    },
    /// Steps to re-fit as the conditioning of the first layer worsens.
    DemoS32 {
        #[arg(long, default_value = "0.5,0.1,0.02")]
        a: String,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long)]
        json: bool,
    },
    /// Per-layer spectra of a saved checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn steps_text(s: Option<u64>) -> String {
    s.map_or_else(|| "not reached".to_string(), |s| s.to_string())
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.out = Some(out);
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let result = harness::run_experiment(&cfg)?;
            println!("task\tstep\ttrain_acc\ttest_acc\tmean_sigma_max");
            for t in &result.tasks {
                println!(
                    "{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                    t.task, t.step, t.train_accuracy, t.test_accuracy, t.mean_sigma_max
                );
            }
            if let Some(out) = &cfg.out {
                println!("wrote {}", out.display());
            }
        }
        Command::Sweep { config, lambdas, kinds, seeds, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.out = Some(out);
            }
            let lambdas: Vec<f64> = parse_list("lambdas", &lambdas)?;
            let kinds = kinds
                .split(',')
                .map(|k| RegularizerKind::parse(k.trim()).with_context(|| format!("unknown kind {k:?}")))
                .collect::<Result<Vec<_>>>()?;
            let seeds: Vec<u64> = match seeds {
                Some(s) => parse_list("seeds", &s)?,
                None => vec![cfg.seed],
            };
            let rows = harness::sweep(&cfg, &kinds, &lambdas, &seeds)?;
            print!("{}", harness::summary_csv(&rows));
        }
        Command::DemoA1 { c, alpha, json } => {
            let report = harness::illustrative_demo(&parse_list("c", &c)?, &parse_list("alpha", &alpha)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
                return Ok(());
            }
            println!("c\tsigma_max(w1)\t|g_w2|\t|g_w1|\t|g_w2|^2\t|g_w1|^2\tratio\tclosed_form_err");
            for r in &report.rows {
                println!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.1e}",
                    r.c, r.sigma_max_w1, r.norm_w2, r.norm_w1, r.norm_sq_w2, r.norm_sq_w1, r.norm_ratio,
                    r.closed_form_error
                );
            }
            println!();
            println!("c\talpha\tsteps to loss < {}", harness::DEMO_LOSS_TARGET);
            for r in &report.rows {
                for p in &r.curves {
                    println!("{}\t{}\t{}", r.c, p.alpha, steps_text(p.steps));
                }
            }
            println!("smallest spectral norm is fastest at every step size: {}", report.ordering_holds);
        }
        Command::DemoS32 { a, alpha, json } => {
            let report = harness::section32_demo(&parse_list("a", &a)?, alpha)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
                return Ok(());
            }
            println!("a\tkappa(theta1)\tgrad_theta2\tclosed_form_err\tsteps to loss < {}", harness::DEMO_LOSS_TARGET);
            for r in &report.rows {
                println!(
                    "{}\t{:.1}\t({:.6}, {:.6})\t{:.1e}\t{}",
                    r.a,
                    r.condition_theta1,
                    r.grad_theta2[0],
                    r.grad_theta2[1],
                    r.closed_form_error,
                    steps_text(r.steps)
                );
            }
            println!("steps strictly increase as a decreases: {}", report.monotone);
        }
        Command::Analyze { checkpoint } => {
            let params =
                load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let spectra = spectral_trajectory(&params)?;
            if spectra.is_empty() {
                bail!("checkpoint has no layers");
            }
            println!("layer\tshape\tsigma_max\tsigma_min\terank\tstable_rank\tcondition\trank");
            for (l, (s, layer)) in spectra.iter().zip(&params.layers).enumerate() {
                println!(
                    "{}\t{}x{}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.4e}\t{}",
                    l + 1,
                    layer.weight.rows(),
                    layer.weight.cols(),
                    s.sigma_max,
                    s.sigma_min,
                    s.erank,
                    s.stable_rank,
                    s.condition,
                    s.rank
                );
            }
        }
    }
    Ok(())
}
