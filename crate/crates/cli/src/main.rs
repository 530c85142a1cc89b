use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use odlab::harness::{self, ablate, comparison_table, gradcheck, train, Dataset, TrainConfig, DEFAULT_SEEDS};
use odlab::network::checkpoint;
use odlab::synthdata::{generate_split, read_jsonl, write_jsonl, Split};

/// Exit status for a broken invariant (non-finite loss, gradient mismatch, ...).
const INVARIANT_EXIT: u8 = 2;

#[derive(Parser)]
#[command(name = "odlab", version, about = "Online-distillation lab for a small DETR-style detector")]
struct Cli {
    /// Root directory for run outputs when --out is not given.
    #[arg(long, env = "ODLAB_OUT", default_value = "runs", global = true)]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic split as JSON lines.
    GenerateData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Config whose [data] section sets counts and object sizes.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to <out-root>/<run.name>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a JSON-lines dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run an ablation preset over several seeds.
    Ablate {
        #[arg(long)]
        preset: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Base config shared by every row of the grid.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on one batch.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 32)]
        n_params: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Summarize run directories into a comparison table and curve CSV.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Where to write comparison.md and curves.csv; defaults to --runs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenerateData { seed, out, split, config } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.data.seed = seed;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let scenes = generate_split(&cfg.data, split, cfg.model.num_classes)?;
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            write_jsonl(&out, &scenes)?;
            println!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Command::Train { config, out, seed } => {
            let mut cfg = load_config(Some(&config))?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            let dir = out.unwrap_or_else(|| cli.out_root.join(&cfg.run.name));
            cfg.run.out_dir = Some(dir.clone());
            let rec = train(&cfg)?;
            let last = rec.final_row();
            println!(
                "{}: epoch {} AP {:.4} AP50 {:.4} instability {:.4} (ema {:.4}) consistency {:.4} in {:.1}s -> {}",
                cfg.run.name,
                last.epoch,
                last.ap,
                last.ap50,
                last.instability_online,
                last.instability_ema,
                last.consistency,
                rec.wall_clock_secs,
                dir.display()
            );
        }
        Command::Eval { checkpoint: path, data } => {
            let (header, params) = checkpoint::load(&path)?;
            let mut cfg = match header.extra.get("config").and_then(|c| c.as_str()) {
                Some(toml) => TrainConfig::from_toml(toml)?,
                None => TrainConfig::default(),
            };
            cfg.model = header.config.clone();
            let scenes = read_jsonl(&data, cfg.model.num_classes)?;
            let set = Dataset::from_scenes(&cfg, scenes);
            let ev = harness::evaluate(&params, &set, &cfg)?;
            println!(
                "{} ({}, epoch {:?}) on {} scenes: AP {:.4} AP50 {:.4}",
                path.display(),
                header.tag,
                header.epoch,
                set.scenes.len(),
                ev.ap(&set),
                ev.ap50(&set)
            );
        }
        Command::Ablate { preset, seeds, config } => {
            let base = load_config(config.as_deref())?;
            let seeds = seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
            let result = ablate(&preset, &base, &seeds, Some(&cli.out_root))?;
            let table = comparison_table(&result.summary);
            let dir = cli.out_root.join(&preset);
            fs::write(dir.join("comparison.md"), &table)?;
            print!("{table}");
        }
        Command::Gradcheck { config, n_params, tolerance } => {
            let cfg = load_config(Some(&config))?;
            let report = gradcheck(&cfg, n_params)?;
            for e in &report.entries {
                println!("{:>8} {:<32} analytic {:+.6e} numeric {:+.6e} rel {:.2e}", e.index, e.name, e.analytic, e.numeric, e.rel_err);
            }
            println!("loss {:.6} max rel. err. {:.3e} (tolerance {tolerance:e})", report.loss, report.max_rel_err);
            if !(report.max_rel_err < tolerance) {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(INVARIANT_EXIT));
            }
        }
        Command::Report { runs, out } => {
            if !runs.is_dir() {
                bail!("{} is not a directory", runs.display());
            }
            let (table, curves) = harness::report(&runs)?;
            let out = out.unwrap_or(runs);
            fs::create_dir_all(&out)?;
            fs::write(out.join("comparison.md"), &table)?;
            fs::write(out.join("curves.csv"), curves)?;
            print!("{table}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invariant = e.downcast_ref::<odlab::Error>().is_some_and(|e| e.is_invariant_violation());
            ExitCode::from(if invariant { INVARIANT_EXIT } else { 1 })
        }
    }
}
