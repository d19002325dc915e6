use serde::{Deserialize, Serialize};

use crate::adapters::ClsSpec;
use crate::data::{DatasetSpec, TaskKind};
use crate::error::{Error, Result};
use crate::losses::{Combiner, OrderedPenalty, DEFAULT_EPS};
use crate::model::{ModelConfig, Vocab};
use crate::sampling::{Granularity, SamplingSchedule};

pub const DEFAULT_MAX_STEPS_FOR_SAMPLING: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Predictor,
    Generator,
    Predgen,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Predictor => "predictor",
            Regime::Generator => "generator",
            Regime::Predgen => "predgen",
        }
    }
}

/// Representation the predictor's head reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Last input token.
    #[default]
    LastToken,
    Mean,
    /// The separator appended after the input.
    Sep,
}

/// Scheduled-sampling granularity, or `off` for pure teacher forcing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Sequence,
    Token,
    Off,
}

impl SamplingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            other => Granularity::parse(other).map(|g| match g {
                Granularity::Sequence => Self::Sequence,
                Granularity::Token => Self::Token,
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sequence => "sequence",
            Self::Token => "token",
            Self::Off => "off",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Derived from the dataset when absent.
    #[serde(default)]
    pub context_len: Option<usize>,
}

fn default_d_model() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: default_d_model(),
            n_layers: default_layers(),
            n_heads: default_heads(),
            context_len: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_lr() -> f64 {
    3e-4
}
fn default_steps() -> u64 {
    500
}
fn default_batch() -> usize {
    16
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            steps: default_steps(),
            batch_size: default_batch(),
        }
    }
}

/// Everything one training run needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub regime: Regime,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps_for_sampling: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_granularity: Option<SamplingMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<Combiner>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_clamp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordered_alpha: Option<OrderedPenalty>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_spec: Option<ClsSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling: Option<Pooling>,
    /// Evaluate every this many steps in addition to the end of training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<u64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn new(regime: Regime, dataset: DatasetSpec) -> Self {
        Self {
            regime,
            dataset,
            model: ModelSection::default(),
            optimizer: OptimizerSection::default(),
            seed: 0,
            max_steps_for_sampling: None,
            sampling_granularity: None,
            loss: None,
            eps_clamp: None,
            ordered_alpha: None,
            cls_spec: None,
            pooling: None,
            eval_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let forbid = |present: bool, key: &str| {
            if present {
                Err(Error::Config(format!("{key} is not allowed for regime {}", self.regime.name())))
            } else {
                Ok(())
            }
        };
        match self.regime {
            Regime::Predictor => {
                forbid(self.max_steps_for_sampling.is_some(), "max_steps_for_sampling")?;
                forbid(self.sampling_granularity.is_some(), "sampling_granularity")?;
                forbid(self.loss.is_some(), "loss")?;
                forbid(self.eps_clamp.is_some(), "eps_clamp")?;
                forbid(self.ordered_alpha.is_some(), "ordered_alpha")?;
                forbid(self.cls_spec.is_some(), "cls_spec")?;
            }
            Regime::Generator => {
                forbid(self.max_steps_for_sampling.is_some(), "max_steps_for_sampling")?;
                forbid(self.sampling_granularity.is_some(), "sampling_granularity")?;
                forbid(self.loss.is_some(), "loss")?;
                forbid(self.eps_clamp.is_some(), "eps_clamp")?;
                forbid(self.ordered_alpha.is_some(), "ordered_alpha")?;
                forbid(self.cls_spec.is_some(), "cls_spec")?;
                forbid(self.pooling.is_some(), "pooling")?;
            }
            Regime::Predgen => {
                forbid(self.pooling.is_some(), "pooling")?;
                if self.max_steps_for_sampling == Some(0) {
                    return Err(Error::Config("max_steps_for_sampling must be positive".into()));
                }
                if self.dataset.task() == TaskKind::Classification && self.ordered_alpha.is_some() {
                    return Err(Error::Config("ordered_alpha applies to regression tasks only".into()));
                }
                if self.dataset.task() == TaskKind::Regression && self.cls_spec.is_some() {
                    return Err(Error::Config("cls_spec applies to classification tasks only".into()));
                }
            }
        }
        if let Some(eps) = self.eps_clamp {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::Config("eps_clamp must be positive".into()));
            }
        }
        let opt = &self.optimizer;
        if !(opt.learning_rate > 0.0 && opt.learning_rate.is_finite()) {
            return Err(Error::Config("optimizer.learning_rate must be positive".into()));
        }
        if opt.batch_size == 0 {
            return Err(Error::Config("optimizer.batch_size must be positive".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn combiner(&self) -> Combiner {
        self.loss.unwrap_or(Combiner::Wdal)
    }

    pub fn eps(&self) -> f64 {
        self.eps_clamp.unwrap_or(DEFAULT_EPS)
    }

    pub fn cls(&self) -> ClsSpec {
        self.cls_spec.unwrap_or_default()
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling.unwrap_or_default()
    }

    /// The schedule used by PredGen, `None` for teacher forcing throughout.
    pub fn schedule(&self) -> Result<Option<SamplingSchedule>> {
        if self.regime != Regime::Predgen {
            return Ok(None);
        }
        let granularity = match self.sampling_granularity.unwrap_or_default() {
            SamplingMode::Off => return Ok(None),
            SamplingMode::Sequence => Granularity::Sequence,
            SamplingMode::Token => Granularity::Token,
        };
        let t = self.max_steps_for_sampling.unwrap_or(DEFAULT_MAX_STEPS_FOR_SAMPLING);
        SamplingSchedule::new(t, granularity, self.seed).map(Some)
    }

    pub fn model_config(&self, context_len: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            context_len: self.model.context_len.unwrap_or(context_len),
            vocab_size: Vocab::new().size(),
            seed: self.seed,
        }
    }

    /// Same run with a different seed for both the model and the data.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg
    }
}
