use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use s4dec::config::{RunConfig, TaskKind, TaskSection};
use s4dec::data::{generate, read_dataset, write_dataset};
use s4dec::eval::{metrics_csv, metrics_json};
use s4dec::{average_files, evaluate, run_longform_experiment, train, Checkpoint};

#[derive(Parser)]
#[command(
    name = "s4dec",
    version,
    about = "Train and evaluate S4 and Transformer decoders on synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Copy,
    Reverse,
    Continuous,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model; writes the log, kept checkpoints and their average.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the first entry of `seeds`.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `<out_dir>/<variant>_seed<N>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a discrete dataset and print bucketed error rates as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// Also write the bucket table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Average checkpoints elementwise.
    Avg {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        ckpts: Vec<PathBuf>,
    },
    /// Train both variants and compare them on concatenated long inputs.
    Longform {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<out_dir>/longform`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as line-delimited JSON.
    GenData {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        #[arg(long, default_value_t = 20)]
        max_len: usize,
        #[arg(long, default_value_t = 16)]
        vocab: usize,
        /// Frame width for the continuous task.
        #[arg(long, default_value_t = 8)]
        features: usize,
        /// Seeds the continuous task's sinusoid dictionary.
        #[arg(long, default_value_t = 1)]
        dict_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Merge examples k at a time (discrete tasks only).
        #[arg(long)]
        concat: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config, seed, out } => {
            let cfg = RunConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let out = out.unwrap_or_else(|| {
                let v = serde_json::to_value(cfg.model.variant).expect("variant serializes");
                cfg.out_dir
                    .join(format!("{}_seed{seed}", v.as_str().unwrap_or("model")))
            });
            let data = s4dec::data::TaskData::generate(&cfg.task)?;
            let res = train(&cfg, seed, &data, Some(&out))?;
            for r in &res.log {
                println!("{}", serde_json::to_string(r)?);
            }
            eprintln!("wrote {}", out.display());
        }
        Cmd::Eval { ckpt, data, beam, csv } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = read_dataset(&data)?;
            let beam = beam.unwrap_or(ck.manifest.config.beam);
            let ev = evaluate(&ck, &ds, beam)?;
            println!("{}", serde_json::to_string_pretty(&metrics_json(&ev.metrics))?);
            if let Some(p) = csv {
                metrics_csv(&p, &ev.metrics)?;
            }
        }
        Cmd::Avg { out, ckpts } => {
            average_files(&ckpts)?.save(&out)?;
        }
        Cmd::Longform { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("longform"));
            let report = run_longform_experiment(&cfg, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&report.to_json())?);
        }
        Cmd::GenData {
            task,
            n,
            min_len,
            max_len,
            vocab,
            features,
            dict_seed,
            seed,
            concat,
            out,
        } => {
            let kind = match task {
                TaskArg::Copy => TaskKind::Copy,
                TaskArg::Reverse => TaskKind::Reverse,
                TaskArg::Continuous => TaskKind::Continuous,
            };
            let section = TaskSection {
                kind,
                vocab,
                features,
                min_len,
                max_len,
                data_seed: dict_seed,
                ..TaskSection::default()
            };
            let mut ds = generate(&section, n, seed)?;
            if let Some(k) = concat {
                let s4dec::data::Dataset::Discrete(d) = &ds else {
                    bail!("--concat needs a discrete task");
                };
                ds = s4dec::data::Dataset::Discrete(s4dec_core::tasks::concat_longform(d, k)?);
            }
            write_dataset(&out, &ds).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}
