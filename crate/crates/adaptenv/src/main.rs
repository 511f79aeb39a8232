//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 when a verification or evaluation check
//! fails, 2 on user/config errors.

use adaptenv::config::{apply_env_overrides, RunConfig};
use adaptenv::error::Error;
use adaptenv::experiment::{self, load_checkpoint, RunSummary};
use adaptenv::fetch::{fetch_mnist, FileStatus};
use adaptenv::objectives::Method;
use adaptenv::plot::{load_run_dir, plot_runs};
use adaptenv::theory::{run_verification_suite, SuiteConfig};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "adaptenv",
    about = "Adaptive environment discovery for robust training",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download (or verify) the MNIST IDX files with pinned checksums.
    Fetch {
        /// Target data directory.
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// Alternative mirror base URL.
        #[arg(long)]
        mirror: Option<String>,
    },
    /// Train every seed of a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the data directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Override the training subsample size.
        #[arg(long)]
        subsample: Option<usize>,
    },
    /// Re-evaluate a checkpointed run on its test environments.
    Evaluate {
        /// Run directory holding checkpoint.bin and summary.json.
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Train several methods on one base config and report gains.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Methods to run, e.g. --methods ERM,IRM,A_IRM
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Run the bound-verification suite and write a machine-readable report.
    VerifyTheory {
        /// Report output path (JSON lines).
        #[arg(long, default_value = "theory_report.jsonl")]
        out: PathBuf,
        /// Fault injection for self-tests: degenerate dual bracket "lo,hi".
        #[arg(long, hide = true)]
        inject_dual_bracket: Option<String>,
    },
    /// Emit figures and data tables from completed run directories.
    Plot {
        /// Run directories.
        #[arg(required = false)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::PolicyConfig(_) | Error::Format(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(
    path: &PathBuf,
    out: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    subsample: Option<usize>,
    seed: Option<u64>,
) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    apply_env_overrides(&mut cfg);
    if let Some(out) = out {
        cfg.run.out_dir = out;
    }
    if let Some(dir) = data_dir {
        cfg.run.data_dir = dir;
    }
    if let Some(n) = subsample {
        cfg.run.subsample_train = n;
    }
    if let Some(s) = seed {
        cfg.run.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Fetch { data_dir, mirror } => {
            let statuses = fetch_mnist(&data_dir, mirror.as_deref())?;
            for (name, status) in statuses {
                let tag = match status {
                    FileStatus::Cached => "ok (cached)",
                    FileStatus::Downloaded => "downloaded",
                };
                println!("{name}: {tag}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            seed,
            out,
            data_dir,
            subsample,
        } => {
            let cfg = load_config(&config, out, data_dir, subsample, seed)?;
            let (outputs, agg) = experiment::run_all(&cfg)?;
            for o in &outputs {
                println!(
                    "{} seed {}: worst-case {:.4}, mean {:.4} (run dir {})",
                    o.summary.method,
                    o.summary.seed,
                    o.summary.worst_case_acc,
                    o.summary.mean_acc,
                    cfg.run_dir(o.summary.seed).display()
                );
            }
            println!(
                "{} aggregate over {:?}: worst-case {:.4} ± {:.4}, mean {:.4} ± {:.4}{}",
                agg.method,
                agg.seeds,
                agg.worst_mean,
                agg.worst_std,
                agg.mean_mean,
                agg.mean_std,
                if agg.baseline { " [baseline]" } else { "" }
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate {
            run_dir,
            config,
            data_dir,
        } => {
            let cfg = load_config(&config, None, data_dir, None, None)?;
            let state = load_checkpoint(&run_dir)?;
            let mnist = match cfg.run.dataset {
                adaptenv::config::DatasetKind::SyntheticGroups => None,
                _ => Some(adaptenv::transforms::load_mnist(&cfg.run.data_dir)?),
            };
            let seed = state.run_seed;
            let data = experiment::prepare(&cfg, mnist.as_ref(), seed)?;
            let profile = match (&data.grouped_test, data.test_sets.is_empty()) {
                (Some(g), _) => adaptenv::metrics::group_accuracy_profile(&state.model, g)?,
                (None, false) => {
                    adaptenv::metrics::env_accuracy_profile(&state.model, &data.test_sets)?
                }
                _ => return Err(Error::config("no test environments")),
            };
            let worst = adaptenv::metrics::worst_case_accuracy(&profile)?;
            for (d, a) in profile.descriptors.iter().zip(&profile.accuracies) {
                println!("{d}: {a:.4}");
            }
            println!("worst-case: {worst:.4}  mean: {:.4}", profile.mean());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            methods,
            out,
            data_dir,
        } => {
            let base = load_config(&config, out, data_dir, None, None)?;
            let methods: Vec<Method> = if methods.is_empty() {
                vec![base.robust.method]
            } else {
                methods
                    .iter()
                    .map(|m| {
                        serde_json::from_value(serde_json::Value::String(m.clone()))
                            .map_err(|_| Error::config(format!("unknown method '{m}'")))
                    })
                    .collect::<Result<_, _>>()?
            };
            let mut aggregates = Vec::new();
            let mut summaries: Vec<RunSummary> = Vec::new();
            for method in methods {
                let mut cfg = base.clone();
                cfg.robust.method = method;
                cfg.validate()?;
                let (outputs, agg) = experiment::run_all(&cfg)?;
                summaries.extend(outputs.into_iter().map(|o| o.summary));
                aggregates.push(agg);
            }
            println!("{:<12} {:>18} {:>18} {:>8}", "method", "worst-case", "mean", "gain");
            for agg in &aggregates {
                let counterpart = agg.method.fixed_counterpart();
                let gain = counterpart
                    .and_then(|c| aggregates.iter().find(|a| a.method == c))
                    .map(|base| agg.worst_mean - base.worst_mean);
                println!(
                    "{:<12} {:>9.4} ± {:.4} {:>9.4} ± {:.4} {:>8}{}",
                    agg.method.to_string(),
                    agg.worst_mean,
                    agg.worst_std,
                    agg.mean_mean,
                    agg.mean_std,
                    gain.map(|g| format!("{:+.3}", g)).unwrap_or_else(|| "—".into()),
                    if agg.baseline { " [baseline]" } else { "" }
                );
            }
            let report = serde_json::json!({
                "aggregates": aggregates,
                "runs": summaries,
            });
            std::fs::create_dir_all(&base.run.out_dir)?;
            std::fs::write(
                base.run.out_dir.join("sweep.json"),
                serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::config(format!("sweep report: {e}")))?,
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyTheory {
            out,
            inject_dual_bracket,
        } => {
            let mut cfg = SuiteConfig::default();
            if let Some(spec) = inject_dual_bracket {
                let parts: Vec<&str> = spec.split(',').collect();
                if parts.len() != 2 {
                    return Err(Error::config("--inject-dual-bracket expects 'lo,hi'"));
                }
                let lo: f64 = parts[0]
                    .parse()
                    .map_err(|_| Error::config("bad bracket lower bound"))?;
                let hi: f64 = parts[1]
                    .parse()
                    .map_err(|_| Error::config("bad bracket upper bound"))?;
                cfg.inject_dual_bracket = Some((lo, hi));
            }
            let records = run_verification_suite(&cfg)?;
            let mut lines = String::new();
            let mut all_pass = true;
            for r in &records {
                println!(
                    "{:<28} lhs {:>12.6e}  rhs {:>12.6e}  slack {:>12.6e}  {}",
                    r.name,
                    r.lhs,
                    r.rhs,
                    r.slack,
                    if r.pass { "PASS" } else { "FAIL" }
                );
                all_pass &= r.pass;
                lines.push_str(
                    &serde_json::to_string(r).map_err(|e| Error::config(format!("report: {e}")))?,
                );
                lines.push('\n');
            }
            std::fs::write(&out, lines)?;
            println!("report written to {}", out.display());
            Ok(if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Plot { runs, out } => {
            // plot failures (empty list, missing metrics) exit 1, not 2
            if runs.is_empty() {
                eprintln!("error: no run directories given");
                return Ok(ExitCode::from(1));
            }
            let loaded: Result<Vec<_>, Error> = runs.iter().map(|d| load_run_dir(d)).collect();
            match loaded.and_then(|data| plot_runs(&data, &out)) {
                Ok(written) => {
                    for f in written {
                        println!("wrote {f}");
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Ok(ExitCode::from(1))
                }
            }
        }
    }
}
