use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Regime, RunConfig};
use super::eval::{evaluate_split, Metrics};
use super::train::{prepare, Prepared, StepLoss, Trainer};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::math::ParamStore;
use crate::model::{Checkpoint, ModelConfig, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: RunConfig,
    pub model: ModelConfig,
    pub params: ParamStore,
    pub losses: Vec<StepLoss>,
    pub evals: Vec<EvalRecord>,
    pub train: Metrics,
    pub test: Metrics,
    pub rng_state: RngState,
}

impl RunOutput {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.model.clone(), self.rng_state.clone(), self.params.clone())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().map(|l| l.combined)
    }
}

fn evaluate_both(trainer: &Trainer, out: &mut Vec<EvalRecord>) -> Result<(Metrics, Metrics)> {
    let cfg = trainer.config();
    let step = trainer.steps_done();
    let mut pair = Vec::with_capacity(2);
    for split in [Split::Train, Split::Test] {
        let m = evaluate_split(trainer.params(), trainer.prepared(), cfg.regime, cfg.pooling(), cfg.cls(), split)?;
        out.push(EvalRecord {
            step,
            metrics: m.clone(),
        });
        pair.push(m);
    }
    let test = pair.pop().expect("two splits");
    let train = pair.pop().expect("two splits");
    Ok((train, test))
}

/// Trains the configured regime and evaluates it on both splits.
pub fn train(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    train_prepared(cfg, prepare(cfg)?)
}

pub fn train_prepared(cfg: &RunConfig, prepared: Prepared) -> Result<RunOutput> {
    let mut trainer = Trainer::new(cfg.clone(), prepared)?;
    let mut losses = Vec::with_capacity(cfg.optimizer.steps as usize);
    let mut evals = Vec::new();
    for _ in 0..cfg.optimizer.steps {
        losses.push(trainer.step()?);
        let done = trainer.steps_done();
        if let Some(every) = cfg.eval_every {
            if done % every == 0 && done < cfg.optimizer.steps {
                evaluate_both(&trainer, &mut evals)?;
            }
        }
    }
    let (train, test) = evaluate_both(&trainer, &mut evals)?;
    let rng_state = RngState::capture(cfg.seed, trainer.batch_rng());
    let model = trainer.prepared().model.clone();
    Ok(RunOutput {
        config: cfg.clone(),
        model,
        params: trainer.into_params(),
        losses,
        evals,
        train,
        test,
        rng_state,
    })
}

fn require(cfg: &RunConfig, regime: Regime) -> Result<()> {
    if cfg.regime != regime {
        return Err(Error::Config(format!(
            "expected regime {}, got {}",
            regime.name(),
            cfg.regime.name()
        )));
    }
    Ok(())
}

/// Pooled input states into a linear head.
pub fn train_predictor(cfg: &RunConfig) -> Result<RunOutput> {
    require(cfg, Regime::Predictor)?;
    train(cfg)
}

/// Teacher-forced token cross-entropy only.
pub fn train_generator(cfg: &RunConfig) -> Result<RunOutput> {
    require(cfg, Regime::Generator)?;
    train(cfg)
}

/// Scheduled sampling plus writer and director losses from one forward pass.
pub fn train_predgen(cfg: &RunConfig) -> Result<RunOutput> {
    require(cfg, Regime::Predgen)?;
    train(cfg)
}

/// Metrics of `params` on `split` under `cfg`.
pub fn evaluate(params: &ParamStore, cfg: &RunConfig, split: Split) -> Result<Metrics> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    evaluate_split(params, &prepared, cfg.regime, cfg.pooling(), cfg.cls(), split)
}

/// Directory name derived from the canonical JSON of the config.
pub fn run_dir_name(cfg: &RunConfig) -> Result<String> {
    let canonical = serde_json::to_string(cfg)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(format!("run-{}", &hex::encode(digest)[..12]))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `step,L_W,L_D,combined`, with empty cells for absent components.
pub fn losses_csv(losses: &[StepLoss]) -> String {
    let mut out = String::from("step,L_W,L_D,combined\n");
    for l in losses {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            l.step,
            fmt_opt(l.writer),
            fmt_opt(l.director),
            l.combined
        );
    }
    out
}

#[derive(Serialize)]
struct FinalMetrics<'a> {
    regime: Regime,
    dataset: &'a str,
    seed: u64,
    steps: u64,
    train: &'a Metrics,
    test: &'a Metrics,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes config.json, losses.csv, metrics.jsonl, metrics.json and
/// checkpoint.json under `out/run-<hash>/`; returns that directory.
pub fn write_artifacts(out: &Path, run: &RunOutput) -> Result<PathBuf> {
    let dir = out.join(run_dir_name(&run.config)?);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join("config.json"), &serde_json::to_string_pretty(&run.config)?)?;
    write(&dir.join("losses.csv"), &losses_csv(&run.losses))?;
    let mut jsonl = String::new();
    for rec in &run.evals {
        jsonl.push_str(&serde_json::to_string(rec)?);
        jsonl.push('\n');
    }
    write(&dir.join("metrics.jsonl"), &jsonl)?;
    let summary = FinalMetrics {
        regime: run.config.regime,
        dataset: &run.config.dataset.display_name(),
        seed: run.config.seed,
        steps: run.config.optimizer.steps,
        train: &run.train,
        test: &run.test,
    };
    write(&dir.join("metrics.json"), &serde_json::to_string_pretty(&summary)?)?;
    run.checkpoint().save(&dir.join("checkpoint.json"))?;
    Ok(dir)
}
