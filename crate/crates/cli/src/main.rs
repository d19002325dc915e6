use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Deserialize;

use predgen_core::data::{self, DatasetSpec, Split};
use predgen_core::harness::{
    ablate_to_dir, evaluate_split, prepare_for_model, train, write_artifacts, Axis, Pooling, RunConfig,
};
use predgen_core::mi::{dpi_compare, mi_report_csv, mi_vs_k, token_mi_csv, token_mi_matrix, MiRow, MineConfig, Representation};
use predgen_core::model::Checkpoint;
use predgen_core::Error;

#[derive(Parser)]
#[command(name = "predgen", version, about = "Prediction through token generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its artifacts.
    Train(Common),
    /// Score a checkpoint on both splits of the configured dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Matched-seed runs over one axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// max_steps_for_sampling, granularity or loss_combiner.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the axis's standard sweep.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Pooled versus reduced-representation mutual information.
    EstimateMi {
        #[command(flatten)]
        common: Common,
        /// Predictor-style checkpoint; overrides the config.
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Generator or PredGen checkpoint; overrides the config.
        #[arg(long)]
        generative: Option<PathBuf>,
        /// Rank k: a number, a list `1,2,4` or a range `1..8`.
        #[arg(long)]
        k: Option<String>,
    },
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::MissingColumn(_) | Error::Row { .. } => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// Errors while reading inputs are usage errors.
fn input(e: Error) -> Failure {
    Failure::usage(e.to_string())
}

type CliResult<T> = Result<T, Failure>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn load_run_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::from_json(&read(&common.config)?).map_err(input)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| Failure::runtime(Error::Io {
        path: out.to_path_buf(),
        source: e,
    }))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Failure::runtime(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn cmd_train(common: &Common) -> CliResult<()> {
    let cfg = load_run_config(common)?;
    create_out(&common.out)?;
    let run = train(&cfg).map_err(Failure::runtime)?;
    let dir = write_artifacts(&common.out, &run).map_err(Failure::runtime)?;
    if common.verbose > 0 {
        eprintln!("train {:?}", run.train);
        eprintln!("test {:?}", run.test);
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_evaluate(common: &Common, checkpoint: &Path) -> CliResult<()> {
    let cfg = load_run_config(common)?;
    let ck = Checkpoint::from_json(&read(checkpoint)?).map_err(input)?;
    let dataset = data::build(&cfg.dataset).map_err(input)?;
    let prepared = prepare_for_model(dataset, ck.config.clone()).map_err(input)?;
    let mut records = Vec::new();
    for split in [Split::Train, Split::Test] {
        let m = evaluate_split(&ck.params, &prepared, cfg.regime, cfg.pooling(), cfg.cls(), split)
            .map_err(Failure::runtime)?;
        if common.verbose > 0 {
            eprintln!("{m:?}");
        }
        records.push(m);
    }
    create_out(&common.out)?;
    let json = serde_json::to_string_pretty(&records).map_err(|e| Failure::runtime(e.into()))?;
    write_file(&common.out.join("metrics.json"), &json)
}

fn cmd_ablate(common: &Common, axis: &str, values: &[String], seeds: &[u64]) -> CliResult<()> {
    let axis = Axis::parse(axis).map_err(input)?;
    let cfg = load_run_config(common)?;
    let values = if values.is_empty() { axis.default_values() } else { values.to_vec() };
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    create_out(&common.out)?;
    let rows = ablate_to_dir(&cfg, axis, &values, &seeds, &common.out).map_err(Failure::runtime)?;
    if common.verbose > 0 {
        for r in &rows {
            eprintln!("{}={} seed {}: {:?}", axis.name(), r.value, r.seed, r.test);
        }
    }
    println!("{}", common.out.join("ablation.csv").display());
    Ok(())
}

/// Inputs of `estimate-mi`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MiConfig {
    dataset: DatasetSpec,
    #[serde(default)]
    predictor_checkpoint: Option<PathBuf>,
    #[serde(default)]
    generative_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pooling: Pooling,
    #[serde(default = "default_ks")]
    k: Vec<usize>,
    /// Generated position whose state is compared with every input position.
    #[serde(default)]
    target_position: usize,
    #[serde(default)]
    mine: MineConfig,
}

fn default_ks() -> Vec<usize> {
    vec![2]
}

fn parse_ks(s: &str) -> CliResult<Vec<usize>> {
    let bad = || Failure::usage(format!("--k expects N, a list like 1,2,4 or a range like 1..8; got {s:?}"));
    let ks: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(bad());
    }
    Ok(ks)
}

fn load_checkpoint(path: Option<PathBuf>, which: &str) -> CliResult<Checkpoint> {
    let path = path.ok_or_else(|| Failure::usage(format!("no {which} checkpoint given")))?;
    Checkpoint::from_json(&read(&path)?).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn cmd_estimate_mi(common: &Common, predictor: Option<PathBuf>, generative: Option<PathBuf>, k: Option<&str>) -> CliResult<()> {
    let mut cfg: MiConfig = serde_json::from_str(&read(&common.config)?).map_err(|e| Failure::usage(format!("json: {e}")))?;
    if let Some(seed) = common.seed {
        cfg.mine.seed = seed;
    }
    let ks = match k {
        Some(s) => parse_ks(s)?,
        None if cfg.k.is_empty() || cfg.k.contains(&0) => return Err(Failure::usage("k values must be positive")),
        None => cfg.k.clone(),
    };
    let p_ck = load_checkpoint(predictor.or(cfg.predictor_checkpoint.take()), "predictor")?;
    let g_ck = load_checkpoint(generative.or(cfg.generative_checkpoint.take()), "generative")?;
    let dataset = data::build(&cfg.dataset).map_err(input)?;
    let p_prep = prepare_for_model(dataset.clone(), p_ck.config.clone()).map_err(input)?;
    let g_prep = prepare_for_model(dataset, g_ck.config.clone()).map_err(input)?;
    let name = cfg.dataset.display_name();
    let seed = cfg.mine.seed;

    let (pooled, first) = dpi_compare((&p_ck.params, &p_prep, cfg.pooling), (&g_ck.params, &g_prep), ks[0], &cfg.mine)
        .map_err(Failure::runtime)?;
    let mut rows = vec![
        MiRow {
            dataset: name.clone(),
            representation: Representation::Pooled,
            k: None,
            seed,
            nats: pooled.nats,
        },
        MiRow {
            dataset: name.clone(),
            representation: Representation::Reduced,
            k: Some(ks[0]),
            seed,
            nats: first.nats,
        },
    ];
    if ks.len() > 1 {
        for (k, est) in mi_vs_k(&g_ck.params, &g_prep, &ks[1..], &cfg.mine).map_err(Failure::runtime)? {
            rows.push(MiRow {
                dataset: name.clone(),
                representation: Representation::Reduced,
                k: Some(k),
                seed,
                nats: est.nats,
            });
        }
    }
    let token = token_mi_matrix(&g_ck.params, &g_prep, cfg.target_position, &cfg.mine).map_err(Failure::runtime)?;
    if common.verbose > 0 {
        eprint!("{}", mi_report_csv(&rows));
    }
    create_out(&common.out)?;
    write_file(&common.out.join("mi_report.csv"), &mi_report_csv(&rows))?;
    write_file(&common.out.join("token_mi.csv"), &token_mi_csv(&token))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(common) => cmd_train(&common),
        Command::Evaluate { common, checkpoint } => cmd_evaluate(&common, &checkpoint),
        Command::Ablate {
            common,
            axis,
            values,
            seeds,
        } => cmd_ablate(&common, &axis, &values, &seeds),
        Command::EstimateMi {
            common,
            predictor,
            generative,
            k,
        } => cmd_estimate_mi(&common, predictor, generative, k.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
