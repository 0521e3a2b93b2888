//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use muffin_core::data::{synth_generate, Split};

use crate::config::{load_synth_spec, RunConfig};
use crate::error::{bail, Error, Result};
use crate::inspect::{gate_spread, inspect_filters, inspect_gates, write_filters, write_gates};
use crate::parallel::{evaluate_model, resolve_threads};
use crate::run::{self, format_report, format_rows, popularity_report, SweepParam, Variant};
use crate::{cache, checkpoint, dataset, tsv};

#[derive(Debug, Parser)]
#[command(name = "muffin", version, about = "Frequency-domain sequential recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Deduplicate, k-core filter and index a TSV log into a dataset cache.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_core: usize,
    },
    /// Generate a synthetic interaction log.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write `user<TAB>population` lines here.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train every configured seed and evaluate on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint, or the popularity baseline without one.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        min_core: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the full model and its ablated variants over shared seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,no-uaf,no-gfm,no-lfm,no-aux,no-bal,mlp-uaf")]
        variants: Vec<String>,
    },
    /// Dump per-user effective filter amplitudes at one layer.
    InspectFilters {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Raw user ids.
        #[arg(long, value_delimiter = ',', required = true)]
        users: Vec<String>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_core: usize,
    },
    /// Dump mean band probabilities per layer over the test split.
    InspectGates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_core: usize,
    },
    /// Train one run per grid value and seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// K, alpha, beta or c.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "valid" => Split::Valid,
        "test" => Split::Test,
        _ => bail!(Config, "unknown split {s:?}; expected train, valid or test"),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { input, output, min_core } => {
            let ds = dataset::prepare(&tsv::read_log(&input)?, min_core)?;
            let hash = cache::save(&output, &ds, min_core)?;
            let s = ds.stats();
            println!("users          {}", s.users);
            println!("items          {}", s.items);
            println!("interactions   {}", s.interactions);
            println!("avg length     {:.2}", s.avg_length);
            println!("sparsity       {:.4}%", 100.0 * s.sparsity);
            println!("dropped users  {}", ds.dropped_users.len());
            println!("sha256         {hash}");
        }
        Command::Synth { spec, output, labels } => {
            let corpus = synth_generate(&load_synth_spec(&spec)?)?;
            tsv::write_log(&output, &corpus.log)?;
            if let Some(path) = labels {
                let mut text = String::from("user\tpopulation\n");
                for u in &corpus.users {
                    let pop = serde_json::to_string(&u.population).expect("population serializes");
                    text.push_str(&format!("{}\t{}\n", u.id, pop.trim_matches('"')));
                }
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            println!("{} interactions from {} users", corpus.log.len(), corpus.users.len());
        }
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let ds = dataset::load(&cfg.data)?;
            info!("{} users, {} items", ds.num_users(), ds.num_items());
            let (runs, summary) = run::train_all(&cfg, &ds, &cfg.run.output)?;
            for r in &runs {
                println!("seed {}  best epoch {}  ({:.1} s)", r.seed, r.best_epoch, r.secs);
                print!("{}", format_report(&r.test));
            }
            if runs.len() > 1 {
                for (i, k) in summary.ks.iter().enumerate() {
                    println!("ndcg@{k}  {:.5} ± {:.5}", summary.ndcg_mean[i], summary.ndcg_std[i]);
                }
            }
        }
        Command::Evaluate { dataset: path, checkpoint: ckpt, split, ks, min_core, output } => {
            let ds = dataset::load_path(&path, min_core)?;
            let split = parse_split(&split)?;
            let threads = resolve_threads(0);
            let report = match ckpt {
                Some(c) => evaluate_model(&checkpoint::load(&c)?, &ds, split, &ks, 256, threads)?,
                None => popularity_report(&ds, split, &ks, threads)?,
            };
            print!("{}", format_report(&report));
            if let Some(out) = output {
                run::write_json(&out, &report)?;
            }
        }
        Command::Ablate { config, variants } => {
            let cfg = load_config(&config)?;
            let variants = variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?;
            let ds = dataset::load(&cfg.data)?;
            let rows = run::ablate(&cfg, &ds, &variants, &cfg.run.output)?;
            print!("{}", format_rows(&rows));
        }
        Command::InspectFilters { checkpoint: ckpt, dataset: path, users, layer, output, min_core } => {
            let params = checkpoint::load(&ckpt)?;
            let ds = dataset::load_path(&path, min_core)?;
            let dump = inspect_filters(&params, &ds, &users, layer)?;
            write_filters(&output, &dump)?;
            for b in ["global", "local"] {
                let std = dump.bin_std(b);
                if !std.is_empty() {
                    let varying = std.iter().filter(|s| **s > 0.0).count();
                    println!("{b}: {varying}/{} bins vary across {} users", std.len(), dump.users.len());
                }
            }
        }
        Command::InspectGates { checkpoint: ckpt, dataset: path, output, min_core } => {
            let params = checkpoint::load(&ckpt)?;
            let ds = dataset::load_path(&path, min_core)?;
            let gates = inspect_gates(&params, &ds, 256)?;
            write_gates(&output, &gates)?;
            for (l, row) in gates.iter().enumerate() {
                let p: Vec<String> = row.iter().map(|p| format!("{p:.4}")).collect();
                println!("layer {l}: [{}]  spread {:.4}", p.join(", "), gate_spread(row));
            }
        }
        Command::Sweep { config, param, grid } => {
            let cfg = load_config(&config)?;
            let param: SweepParam = param.parse()?;
            run::sweep_configs(&cfg, param, &grid)?;
            let ds = dataset::load(&cfg.data)?;
            let rows = run::sweep(&cfg, &ds, param, &grid, &cfg.run.output)?;
            print!("{}", format_rows(&rows));
        }
    }
    Ok(())
}
