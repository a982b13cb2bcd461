//! Command-line front end: generate cohorts, train, score, evaluate, run
//! ablations and sweeps, export embeddings and run the built-in self-check.
//!
//! Exit codes: 0 success, 1 failure (including a failed self-check), 2 usage error.

mod selfcheck;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use expltv::checkpoint::Checkpoint;
use expltv::metrics::{evaluate, read_scores_file, write_scores, EvalConfig, EvalReport};
use expltv::model::{ExpLtv, Variant};
use expltv::synthcohort::{generate, read_csv, split, write_csv, CohortSpec, Dataset, Segment};
use expltv::trainer::{run_ablation, score, sweep, sweep_csv, train, SweepParam, TrainConfig};
use expltv::{Error, Result};

#[derive(Parser)]
#[command(name = "expltv", version, about = "LTV prediction with game-whale expert routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic cohort.
    Generate {
        /// Cohort spec (TOML); defaults are used for omitted keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the cohort size in the spec.
        #[arg(long)]
        n_users: Option<usize>,
    },
    /// Train a model and write a checkpoint plus the per-epoch log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint path (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Training log path; defaults to the checkpoint path with a `.log.csv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on data, or a score file.
    Evaluate {
        #[arg(long, requires = "data", conflicts_with = "scores")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        /// Score file as written by `score`.
        #[arg(long, required_unless_present = "checkpoint")]
        scores: Option<PathBuf>,
        /// Which split of `--data` to evaluate, using the checkpoint's split settings.
        #[arg(long, value_enum, default_value_t = Part::Test)]
        part: Part,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Write per-user scores for every record.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model variant and report test metrics.
    Ablate {
        #[arg(long)]
        variant: Variant,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        report: ReportArgs,
        /// Also save the trained checkpoint here.
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
    },
    /// Train once per value of one hyperparameter and tabulate test metrics.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values; defaults to the standard grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        recall_k: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write upper-level embeddings with true segment and whale labels.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run gradient, probability and metric checks on built-in fixtures.
    Selfcheck {
        /// Perturb one analytic gradient before checking (the gradient suite must fail).
        #[arg(long)]
        corrupt_gradient: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Training configuration (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Level-curve CSV path.
    #[arg(long)]
    levels_out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    recall_k: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    level_k: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    All,
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

fn eval_config(recall_k: Option<Vec<usize>>, level_k: Option<Vec<usize>>) -> EvalConfig {
    let mut cfg = EvalConfig::default();
    if let Some(k) = recall_k {
        cfg.recall_ks = k;
    }
    if let Some(k) = level_k {
        cfg.level_ks = k;
    }
    cfg
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(path) => write_file(path, contents),
        None => {
            print!("{contents}");
            std::io::stdout().flush().ok();
            Ok(())
        }
    }
}

fn write_report(report: &EvalReport, args: &ReportArgs) -> Result<()> {
    let text = match args.format {
        Format::Text => report.to_text(),
        Format::Csv => report.to_csv(),
    };
    emit(args.out.as_deref(), &text)?;
    if let Some(path) = &args.levels_out {
        write_file(path, &report.level_curves_csv())?;
    }
    Ok(())
}

fn load_config(run: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = match &run.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_model(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, ExpLtv, Dataset)> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_model()?;
    let dataset = read_csv(data, Some(model.schema.layout()))?;
    Ok((ck, model, dataset))
}

fn stats_sidecar(spec: &CohortSpec, data: &Dataset) -> String {
    let whale_segment = data
        .records
        .iter()
        .filter(|r| r.segment == Some(Segment::Whale))
        .count();
    format!(
        "n_users={}\nseed={}\npurchase_rate={}\npurchase_rate_target={}\nwhale_rate={}\nwhale_rate_target={}\nwhale_threshold={}\nheavy_segment_users={}\ntop1pct_spender_share={}\n",
        data.len(),
        spec.seed,
        data.purchase_rate(),
        spec.purchase_rate,
        data.whale_rate(),
        spec.whale_rate,
        spec.r,
        whale_segment,
        data.top_spender_share(0.01)
    )
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Generate {
            spec,
            out,
            seed,
            n_users,
        } => {
            let mut spec = match spec {
                Some(path) => CohortSpec::load(&path)?,
                None => CohortSpec::default(),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            if let Some(n) = n_users {
                spec.n_users = n;
            }
            let data = generate(&spec)?;
            write_csv(&data, &out)?;
            let stats = stats_sidecar(&spec, &data);
            write_file(&with_suffix(&out, ".stats"), &stats)?;
            print!("{stats}");
        }
        Command::Train { run, out, log } => {
            let cfg = load_config(&run)?;
            let data = read_csv(&run.data, None)?;
            let splits = split(&data, &cfg.split)?;
            let outcome = train(&splits, &cfg)?;
            Checkpoint::new(&outcome.model, &cfg).save(&out)?;
            let log_path = log.unwrap_or_else(|| out.with_extension("log.csv"));
            write_file(&log_path, &outcome.log.to_csv())?;
            let best = outcome.log.selected();
            println!(
                "selected_epoch={}\nval_gini={}\nepochs_run={}\ncheckpoint={}\nlog={}",
                best.epoch,
                best.val_gini,
                outcome.log.epochs.len() - 1,
                out.display(),
                log_path.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            data,
            scores,
            part,
            report,
        } => {
            let cfg = eval_config(report.recall_k.clone(), report.level_k.clone());
            let users = match (checkpoint, data, scores) {
                (Some(ck), Some(data), None) => {
                    let (ck, model, dataset) = load_model(&ck, &data)?;
                    let records = match part {
                        Part::All => dataset.records,
                        part => {
                            let s = split(&dataset, &ck.config.split)?;
                            match part {
                                Part::Train => s.train.records,
                                Part::Valid => s.valid.records,
                                _ => s.test.records,
                            }
                        }
                    };
                    score(&model, &records)?
                }
                (None, None, Some(path)) => read_scores_file(&path)?,
                _ => unreachable!("clap enforces the argument groups"),
            };
            write_report(&evaluate(&users, &cfg)?, &report)?;
        }
        Command::Score { checkpoint, data, out } => {
            let (_, model, dataset) = load_model(&checkpoint, &data)?;
            let scored = score(&model, &dataset.records)?;
            let file = fs::File::create(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            write_scores(&scored, std::io::BufWriter::new(file))?;
        }
        Command::Ablate {
            variant,
            run,
            report,
            checkpoint_out,
        } => {
            let cfg = load_config(&run)?;
            let data = read_csv(&run.data, None)?;
            let splits = split(&data, &cfg.split)?;
            let eval = eval_config(report.recall_k.clone(), report.level_k.clone());
            let (result, outcome) = run_ablation(variant, &splits, &cfg, &eval)?;
            if let Some(path) = checkpoint_out {
                Checkpoint::new(&outcome.model, &outcome.config).save(&path)?;
            }
            write_report(&result, &report)?;
        }
        Command::Sweep {
            param,
            values,
            run,
            recall_k,
            out,
        } => {
            let cfg = load_config(&run)?;
            let data = read_csv(&run.data, None)?;
            let splits = split(&data, &cfg.split)?;
            let values = if values.is_empty() {
                param.default_values()
            } else {
                values
            };
            let rows = sweep(param, &values, &splits, &cfg, &eval_config(recall_k, None))?;
            emit(out.as_deref(), &sweep_csv(param, &rows))?;
        }
        Command::ExportEmbeddings { checkpoint, data, out } => {
            let (_, model, dataset) = load_model(&checkpoint, &data)?;
            let users = model.encode(&dataset.records)?;
            let e = model.embeddings(&users)?;
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_path(&out)
                .map_err(|e| Error::Serde(format!("{}: {e}", out.display())))?;
            let mut header = vec!["user_id".to_string()];
            header.extend((0..e.cols()).map(|j| format!("e{j}")));
            header.extend(["segment".to_string(), "g".to_string()]);
            let csv_err = |e: csv::Error| Error::Serde(e.to_string());
            w.write_record(&header).map_err(csv_err)?;
            for (i, r) in dataset.records.iter().enumerate() {
                let mut row = vec![r.user_id.to_string()];
                row.extend(e.row(i).iter().map(f64::to_string));
                row.push(r.segment.map_or_else(String::new, |s| s.code().to_string()));
                row.push(u8::from(r.whale).to_string());
                w.write_record(&row).map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
        }
        Command::Selfcheck { corrupt_gradient } => {
            return Ok(if selfcheck::run(corrupt_gradient) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
