use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Regime, RunConfig, SamplingMode};
use super::eval::Metrics;
use super::run::{train, write_artifacts, RunOutput};
use crate::error::{Error, Result};
use crate::losses::Combiner;

pub const THREADS_ENV: &str = "PREDGEN_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    MaxStepsForSampling,
    Granularity,
    LossCombiner,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max_steps_for_sampling" | "sampling" => Ok(Self::MaxStepsForSampling),
            "granularity" | "sampling_granularity" => Ok(Self::Granularity),
            "loss_combiner" | "loss" => Ok(Self::LossCombiner),
            _ => Err(Error::Config(format!(
                "unknown ablation axis {s:?} (expected max_steps_for_sampling, granularity or loss_combiner)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MaxStepsForSampling => "max_steps_for_sampling",
            Self::Granularity => "granularity",
            Self::LossCombiner => "loss_combiner",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: Vec<&str> = match self {
            Self::MaxStepsForSampling => vec!["50", "1000", "7000"],
            Self::Granularity => vec!["sequence", "token"],
            Self::LossCombiner => Combiner::ALL.iter().map(|c| c.name()).collect(),
        };
        v.into_iter().map(String::from).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            Self::MaxStepsForSampling => {
                let t: u64 = value
                    .parse()
                    .map_err(|_| Error::Config(format!("max_steps_for_sampling value {value:?} is not an integer")))?;
                cfg.max_steps_for_sampling = Some(t);
            }
            Self::Granularity => cfg.sampling_granularity = Some(SamplingMode::parse(value)?),
            Self::LossCombiner => {
                cfg.loss = Some(
                    Combiner::parse(value).ok_or_else(|| Error::Config(format!("unknown loss combiner {value:?}")))?,
                );
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: Axis,
    pub value: String,
    pub seed: u64,
    pub dataset: String,
    pub final_loss: Option<f64>,
    pub train: Metrics,
    pub test: Metrics,
}

/// Worker count: `PREDGEN_THREADS` if set, otherwise the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Matched-seed runs for every `(value, seed)`; rows come back in input order.
pub fn ablate(base: &RunConfig, axis: Axis, values: &[String], seeds: &[u64]) -> Result<Vec<(AblationRow, RunOutput)>> {
    if base.regime != Regime::Predgen {
        return Err(Error::Config("ablations vary PredGen settings; set regime to predgen".into()));
    }
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one value and one seed".into()));
    }
    let mut jobs = Vec::new();
    for value in values {
        let cfg = axis.apply(base, value)?;
        for &seed in seeds {
            jobs.push((value.clone(), cfg.with_seed(seed)));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(value, cfg)| {
                let run = train(cfg)?;
                let row = AblationRow {
                    axis,
                    value: value.clone(),
                    seed: cfg.seed,
                    dataset: cfg.dataset.display_name(),
                    final_loss: run.final_loss(),
                    train: run.train.clone(),
                    test: run.test.clone(),
                };
                Ok((row, run))
            })
            .collect()
    })
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("axis,value,seed,dataset,final_loss,test_accuracy,test_mse,test_mae,test_exact_match\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.axis.name(),
            r.value,
            r.seed,
            r.dataset,
            cell(r.final_loss),
            cell(r.test.accuracy),
            cell(r.test.mse),
            cell(r.test.mae),
            cell(r.test.exact_match)
        );
    }
    out
}

/// Runs the ablation and writes every run directory plus `ablation.csv`.
pub fn ablate_to_dir(
    base: &RunConfig,
    axis: Axis,
    values: &[String],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let results = ablate(base, axis, values, seeds)?;
    let mut rows = Vec::with_capacity(results.len());
    for (row, run) in results {
        write_artifacts(out, &run)?;
        rows.push(row);
    }
    let path = out.join("ablation.csv");
    std::fs::write(&path, ablation_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
