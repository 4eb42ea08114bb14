//! The `orderflow` command line: train, eval-moo, diagnose, oracle, compare
//! and sample subcommands over run-configuration files.

use clap::{Parser, Subcommand};
use orderflow::runner::{self, OracleParams, OracleSelect};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "orderflow", version, about = "Order-preserving GFlowNet training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a sampler and write the run log, visit log and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained multi-objective sampler against the reference front.
    #[command(name = "eval-moo")]
    EvalMoo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Total candidates to generate.
        #[arg(long)]
        candidates: Option<usize>,
        /// Number of sampling rounds the candidates are split into.
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exploration ratios, L1-to-target and the learned-reward landscape.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Visit log written by `train` (defaults to visits.csv beside the
        /// checkpoint).
        #[arg(long)]
        visits: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form verification of the ranked-chain propositions.
    Oracle {
        /// Which suite: prop1, prop2, prop3 or all.
        #[arg(default_value = "all")]
        which: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        l: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train several configurations over shared seeds and compare a metric.
    Compare {
        /// Configuration files (repeat the flag; at least two).
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Comma-separated seed list shared by every configuration.
        #[arg(long)]
        seeds: String,
        /// Metric column from the final run-log row:
        /// loss, logz, r1, r2, r3 or l1.
        #[arg(long, default_value = "r2")]
        metric: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Boosted sampling: rank candidates by the learned reward.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of candidates to return.
        #[arg(long, default_value_t = 8)]
        candidates: usize,
        /// Sample candidates * boost-ratio terminals and keep the best.
        #[arg(long = "boost-ratio", default_value_t = 1)]
        boost_ratio: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> orderflow::Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Train { config, seed, out } => {
            let cfg = runner::load_config(&config, seed, out.as_deref())?;
            let (artifacts, output) = runner::cmd_train(&cfg)?;
            if let Some(last) = output.log.rows.last() {
                println!(
                    "trained {} rounds: loss {:.6}, logZ {:.4}, visited ratio {:.4}",
                    last.round, last.loss, last.log_z, last.ratio_visited
                );
            }
            println!("run log: {}", artifacts.runlog.display());
            println!("checkpoint: {}", artifacts.checkpoint.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::EvalMoo {
            config,
            checkpoint,
            candidates,
            rounds,
            seed,
            out,
        } => {
            let mut cfg = runner::load_config(&config, seed, None)?;
            if let Some(c) = candidates {
                cfg.eval.candidates = c;
            }
            if let Some(r) = rounds {
                cfg.eval.rounds = r;
            }
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out));
            let report = runner::cmd_eval_moo(&cfg, &checkpoint, &out_dir)?;
            print!("{}", report.to_kv());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Diagnose {
            config,
            checkpoint,
            visits,
            out,
        } => {
            let cfg = runner::load_config(&config, None, None)?;
            let visits = visits.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map(|p| p.join("visits.csv"))
                    .unwrap_or_else(|| PathBuf::from("visits.csv"))
            });
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out));
            let body = runner::cmd_diagnose(&cfg, &checkpoint, &visits, &out_dir)?;
            print!("{body}");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Oracle {
            which,
            n,
            gamma,
            l,
            k,
        } => {
            let select = OracleSelect::parse(&which)?;
            let params = OracleParams { n, gamma, l, k };
            let (report, ok) = runner::cmd_oracle(select, &params)?;
            print!("{report}");
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::Compare {
            configs,
            seeds,
            metric,
            out,
        } => {
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| orderflow::Error::config(format!("bad seed `{s}`")))
                })
                .collect::<orderflow::Result<_>>()?;
            let csv = runner::cmd_compare(&configs, &seeds, &metric, out.as_deref())?;
            print!("{csv}");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sample {
            config,
            checkpoint,
            candidates,
            boost_ratio,
            seed,
            out,
        } => {
            let cfg = runner::load_config(&config, seed, None)?;
            let picked =
                runner::cmd_sample(&cfg, &checkpoint, candidates, boost_ratio, out.as_deref())?;
            let env = cfg.build_env()?;
            for (s, lr) in &picked {
                println!("{}\t{lr}", env.encode_state(s));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
