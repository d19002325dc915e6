use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Pooling, Regime, RunConfig};
use crate::adapters::{classify_node, HEAD_PARAM};
use crate::data::{self, Dataset, Split, Target, TaskKind};
use crate::error::{Error, Result};
use crate::losses::{ordered_ce_targets, writer_ce_node, Combiner, LossCombiner, OrderedPenalty};
use crate::math::autodiff::linear;
use crate::math::optim::BoundParams;
use crate::math::{Adam, CeTarget, Graph, NumericArray, ParamStore, Var};
use crate::model::transformer::next_tokens;
use crate::model::{forward_packed, init_params, rollout_batch, ModelConfig, PackedForward, Vocab};
use crate::sampling::{token_mask, Granularity, SamplingSchedule};

pub const PREDICTOR_W: &str = "predictor.w";
pub const PREDICTOR_B: &str = "predictor.b";

const HEAD_INIT_STD: f64 = 0.02;
const BATCH_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;

/// One example as token ids: the input `X` and the gold target `Y` (ending in EOS).
#[derive(Clone, Debug, PartialEq)]
pub struct Framed {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub value: Target,
}

impl Framed {
    /// `X` followed by SEP: what generation starts from.
    pub fn prefix(&self) -> Vec<usize> {
        let mut p = self.input.clone();
        p.push(Vocab::SEP);
        p
    }
}

/// A dataset turned into token ids, with the model shape it needs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub train: Vec<Framed>,
    pub test: Vec<Framed>,
    pub model: ModelConfig,
    pub max_target: usize,
}

impl Prepared {
    pub fn split(&self, split: Split) -> &[Framed] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    prepare_with(cfg, data::build(&cfg.dataset)?)
}

pub fn prepare_with(cfg: &RunConfig, dataset: Dataset) -> Result<Prepared> {
    let needed = needed_context(&dataset)?;
    frame(dataset, cfg.model_config(needed))
}

/// Frames `dataset` for an already-built model, such as one restored from a
/// checkpoint.
pub fn prepare_for_model(dataset: Dataset, model: ModelConfig) -> Result<Prepared> {
    frame(dataset, model)
}

fn needed_context(dataset: &Dataset) -> Result<usize> {
    Ok(dataset.max_input_len() + 1 + dataset.max_target_len()?)
}

fn frame(dataset: Dataset, model: ModelConfig) -> Result<Prepared> {
    let vocab = Vocab::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &dataset.examples {
        let mut target = vocab.encode(&dataset.target_text(e.target)?)?;
        target.push(Vocab::EOS);
        let framed = Framed {
            input: vocab.encode(&e.input_text)?,
            target,
            value: e.target,
        };
        match e.split {
            Split::Train => train.push(framed),
            Split::Test => test.push(framed),
        }
    }
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if dataset.task == TaskKind::Classification {
        if let Some(c) = dataset.examples.iter().filter_map(|e| e.target.class()).find(|&c| c >= dataset.num_classes) {
            return Err(Error::Config(format!("class {c} outside {} classes", dataset.num_classes)));
        }
    }
    let max_target = dataset.max_target_len()?;
    let needed = needed_context(&dataset)?;
    model.validate()?;
    if model.context_len < needed {
        return Err(Error::ContextOverflow {
            len: needed,
            context_len: model.context_len,
        });
    }
    Ok(Prepared {
        dataset,
        train,
        test,
        model,
        max_target,
    })
}

/// Transformer parameters plus whatever head the regime trains jointly.
pub fn init_run_params(cfg: &RunConfig, prepared: &Prepared) -> Result<ParamStore> {
    let mut params = init_params(&prepared.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(HEAD_STREAM);
    let d = prepared.model.d_model;
    let classes = prepared.dataset.num_classes;
    let task = prepared.dataset.task;
    match cfg.regime {
        Regime::Predictor => {
            let out = if task == TaskKind::Classification { classes } else { 1 };
            params.insert_normal(PREDICTOR_W, d, out, HEAD_INIT_STD, &mut rng);
            params.insert(PREDICTOR_B, NumericArray::zeros(&[1, out]));
        }
        Regime::Predgen if task == TaskKind::Classification => {
            params.insert_normal(HEAD_PARAM, d, classes, HEAD_INIT_STD, &mut rng);
        }
        _ => {}
    }
    Ok(params)
}

/// Per-step losses; absent components are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub writer: Option<f64>,
    pub director: Option<f64>,
    pub combined: f64,
}

/// Teacher-forced pass over `X, SEP, conditioning` for each example.
struct TargetPass {
    fwd: PackedForward,
    /// `(logit row, gold id)` for each target position, per example.
    writer_rows: Vec<Vec<(usize, usize)>>,
    /// State rows of the target region, per example.
    target_spans: Vec<Range<usize>>,
}

fn target_pass(
    g: &mut Graph,
    bound: &BoundParams,
    model: &ModelConfig,
    batch: &[&Framed],
    conditioning: &[Vec<usize>],
) -> Result<TargetPass> {
    let seqs: Vec<Vec<usize>> = batch
        .iter()
        .zip(conditioning)
        .map(|(f, c)| {
            let mut s = f.prefix();
            s.extend_from_slice(c);
            s
        })
        .collect();
    let views: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let fwd = forward_packed(g, bound, model, &views)?;
    let mut writer_rows = Vec::with_capacity(batch.len());
    let mut target_spans = Vec::with_capacity(batch.len());
    for (f, span) in batch.iter().zip(&fwd.spans) {
        let n = f.input.len();
        writer_rows.push(
            f.target
                .iter()
                .enumerate()
                .map(|(t, &gold)| (span.start + n + t, gold))
                .collect(),
        );
        target_spans.push(span.start + n + 1..span.end);
    }
    Ok(TargetPass {
        fwd,
        writer_rows,
        target_spans,
    })
}

/// Target for the predictor's regression head, scaled to the dataset range.
fn normalize(y: f64, range: (f64, f64)) -> f64 {
    let width = range.1 - range.0;
    if width > 0.0 {
        (y - range.0) / width
    } else {
        y - range.0
    }
}

pub(crate) fn denormalize(t: f64, range: (f64, f64)) -> f64 {
    let width = range.1 - range.0;
    if width > 0.0 {
        range.0 + t * width
    } else {
        range.0 + t
    }
}

/// Pooled input states (`B x d`) that feed the predictor head.
pub fn pooled_states(
    g: &mut Graph,
    bound: &BoundParams,
    model: &ModelConfig,
    batch: &[&Framed],
    pooling: Pooling,
) -> Result<Var> {
    let seqs: Vec<Vec<usize>> = batch
        .iter()
        .map(|f| match pooling {
            Pooling::Sep => f.prefix(),
            Pooling::LastToken | Pooling::Mean => f.input.clone(),
        })
        .collect();
    let views: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let fwd = forward_packed(g, bound, model, &views)?;
    let pooled = match pooling {
        Pooling::LastToken | Pooling::Sep => {
            let rows: Vec<usize> = fwd.spans.iter().map(|s| s.end - 1).collect();
            g.select_rows(fwd.states, &rows)?
        }
        Pooling::Mean => g.group_mean(fwd.states, &fwd.spans)?,
    };
    Ok(pooled)
}

/// Predictor head outputs (`B x C`, or `B x 1` for regression) for `batch`.
pub(crate) fn predictor_outputs(
    g: &mut Graph,
    bound: &BoundParams,
    model: &ModelConfig,
    batch: &[&Framed],
    pooling: Pooling,
) -> Result<Var> {
    let pooled = pooled_states(g, bound, model, batch, pooling)?;
    linear(g, pooled, bound.var(PREDICTOR_W)?, Some(bound.var(PREDICTOR_B)?))
}

/// Training state for one run.
pub struct Trainer {
    cfg: RunConfig,
    prepared: Prepared,
    params: ParamStore,
    adam: Adam,
    combiner: LossCombiner,
    schedule: Option<SamplingSchedule>,
    alpha: OrderedPenalty,
    batch_rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig, prepared: Prepared) -> Result<Self> {
        cfg.validate()?;
        let params = init_run_params(&cfg, &prepared)?;
        let alpha = match &cfg.ordered_alpha {
            Some(a) => a.clone(),
            None => OrderedPenalty::reference(prepared.max_target),
        };
        if cfg.regime == Regime::Predgen && prepared.dataset.task == TaskKind::Regression && alpha.len() < prepared.max_target {
            return Err(Error::LengthMismatch {
                what: "ordered_alpha shorter than the longest target",
                left: alpha.len(),
                right: prepared.max_target,
            });
        }
        let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        batch_rng.set_stream(BATCH_STREAM);
        Ok(Self {
            adam: Adam::new(cfg.optimizer.learning_rate),
            combiner: LossCombiner::new(cfg.combiner(), cfg.eps()),
            schedule: cfg.schedule()?,
            alpha,
            batch_rng,
            step: 0,
            params,
            prepared,
            cfg,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn prepared(&self) -> &Prepared {
        &self.prepared
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamStore) {
        self.params = params;
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn batch_rng(&self) -> &ChaCha8Rng {
        &self.batch_rng
    }

    /// Indices of the next training batch, drawn without replacement.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let n = self.prepared.train.len();
        index::sample(&mut self.batch_rng, n, self.cfg.optimizer.batch_size.min(n)).into_vec()
    }

    /// Tokens fed in the target region for `batch` at `step`: gold, or a
    /// mix of gold and the model's own greedy tokens.
    pub fn conditioning(&self, batch: &[usize], step: u64) -> Result<Vec<Vec<usize>>> {
        let framed: Vec<&Framed> = batch.iter().map(|&i| &self.prepared.train[i]).collect();
        let mut out: Vec<Vec<usize>> = framed.iter().map(|f| f.target.clone()).collect();
        let Some(schedule) = &self.schedule else {
            return Ok(out);
        };
        let p = schedule.mixing_prob(step);
        let mut rng = schedule.rng(0, step);
        let model = &self.prepared.model;
        match schedule.granularity {
            Granularity::Sequence => {
                let coins: Vec<bool> = framed.iter().map(|_| rand::Rng::gen_bool(&mut rng, p)).collect();
                let chosen: Vec<usize> = (0..framed.len()).filter(|&i| coins[i]).collect();
                if chosen.is_empty() {
                    return Ok(out);
                }
                let prefixes: Vec<Vec<usize>> = chosen.iter().map(|&i| framed[i].prefix()).collect();
                let views: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
                let len = chosen.iter().map(|&i| framed[i].target.len()).max().unwrap_or(0);
                let rolled = rollout_batch(&self.params, model, &views, len)?;
                for (&i, r) in chosen.iter().zip(rolled) {
                    let m = out[i].len();
                    out[i] = r[..m].to_vec();
                }
            }
            Granularity::Token => {
                let masks: Vec<Vec<bool>> = framed.iter().map(|f| token_mask(f.target.len(), p, &mut rng)).collect();
                let mut seqs: Vec<Vec<usize>> = framed.iter().map(|f| f.prefix()).collect();
                let max_m = framed.iter().map(|f| f.target.len()).max().unwrap_or(0);
                for t in 0..max_m {
                    let ask: Vec<usize> = (0..framed.len())
                        .filter(|&i| t < masks[i].len() && masks[i][t])
                        .collect();
                    let next = if ask.is_empty() {
                        Vec::new()
                    } else {
                        let views: Vec<&[usize]> = ask.iter().map(|&i| seqs[i].as_slice()).collect();
                        next_tokens(&self.params, model, &views)?
                    };
                    let mut next = next.into_iter();
                    for (i, seq) in seqs.iter_mut().enumerate() {
                        if t < masks[i].len() {
                            let tok = if masks[i][t] {
                                next.next().expect("one token per request")
                            } else {
                                framed[i].target[t]
                            };
                            seq.push(tok);
                        }
                    }
                }
                for (o, (seq, f)) in out.iter_mut().zip(seqs.iter().zip(&framed)) {
                    *o = seq[f.input.len() + 1..].to_vec();
                }
            }
        }
        Ok(out)
    }

    /// Records the loss graph for `batch` at `step` with the current parameters.
    fn build(&self, g: &mut Graph, bound: &BoundParams, batch: &[usize], step: u64) -> Result<(Var, StepLoss)> {
        let framed: Vec<&Framed> = batch.iter().map(|&i| &self.prepared.train[i]).collect();
        let model = &self.prepared.model;
        let task = self.prepared.dataset.task;
        let inv_b = 1.0 / framed.len() as f64;
        match self.cfg.regime {
            Regime::Predictor => {
                let out = predictor_outputs(g, bound, model, &framed, self.cfg.pooling())?;
                let loss = match task {
                    TaskKind::Classification => {
                        let targets: Vec<CeTarget> = framed
                            .iter()
                            .enumerate()
                            .map(|(row, f)| CeTarget {
                                row,
                                class: f.value.class().expect("class target"),
                                weight: inv_b,
                            })
                            .collect();
                        g.softmax_cross_entropy(out, &targets)?
                    }
                    TaskKind::Regression => {
                        let range = self.prepared.dataset.range;
                        let targets: Vec<(usize, f64)> = framed
                            .iter()
                            .enumerate()
                            .map(|(row, f)| (row, normalize(f.value.real().expect("real target"), range)))
                            .collect();
                        g.squared_error(out, &targets)?
                    }
                };
                let value = g.value(loss).item();
                Ok((
                    loss,
                    StepLoss {
                        step,
                        writer: None,
                        director: Some(value),
                        combined: value,
                    },
                ))
            }
            Regime::Generator => {
                let gold: Vec<Vec<usize>> = framed.iter().map(|f| f.target.clone()).collect();
                let pass = target_pass(g, bound, model, &framed, &gold)?;
                let rows: Vec<(usize, usize)> = pass.writer_rows.concat();
                let lw = writer_ce_node(g, pass.fwd.logits, &rows)?;
                let value = g.value(lw).item();
                Ok((
                    lw,
                    StepLoss {
                        step,
                        writer: Some(value),
                        director: None,
                        combined: value,
                    },
                ))
            }
            Regime::Predgen => {
                let conditioning = self.conditioning(batch, step)?;
                let pass = target_pass(g, bound, model, &framed, &conditioning)?;
                let rows: Vec<(usize, usize)> = pass.writer_rows.concat();
                let lw = writer_ce_node(g, pass.fwd.logits, &rows)?;
                let ld = match task {
                    TaskKind::Classification => {
                        let head = bound.var(HEAD_PARAM)?;
                        let logits = classify_node(g, pass.fwd.states, &pass.target_spans, head, self.cfg.cls())?;
                        let targets: Vec<CeTarget> = framed
                            .iter()
                            .enumerate()
                            .map(|(row, f)| CeTarget {
                                row,
                                class: f.value.class().expect("class target"),
                                weight: inv_b,
                            })
                            .collect();
                        g.softmax_cross_entropy(logits, &targets)?
                    }
                    TaskKind::Regression => {
                        let mut targets = Vec::new();
                        for r in &pass.writer_rows {
                            targets.extend(ordered_ce_targets(r, &self.alpha, inv_b)?);
                        }
                        g.softmax_cross_entropy(pass.fwd.logits, &targets)?
                    }
                };
                let (w, d) = (g.value(lw).item(), g.value(ld).item());
                let (value, da, db) = self.combiner.evaluate(w, d)?;
                let combined = g.binary_scalar(lw, ld, value, da, db);
                Ok((
                    combined,
                    StepLoss {
                        step,
                        writer: Some(w),
                        director: Some(d),
                        combined: value,
                    },
                ))
            }
        }
    }

    /// Losses for `batch` at `step` without touching any state.
    pub fn losses_on(&self, batch: &[usize], step: u64) -> Result<StepLoss> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        Ok(self.build(&mut g, &bound, batch, step)?.1)
    }

    /// Loss value and parameter gradients for `batch` at `step`.
    pub fn gradients_on(&self, batch: &[usize], step: u64) -> Result<(StepLoss, BTreeMap<String, NumericArray>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let (loss, record) = self.build(&mut g, &bound, batch, step)?;
        let mut grads = g.backward(loss)?;
        Ok((record, bound.collect(&mut grads)))
    }

    /// One optimizer step on `batch`.
    pub fn step_on(&mut self, batch: &[usize]) -> Result<StepLoss> {
        let (record, grads) = self.gradients_on(batch, self.step)?;
        if !record.combined.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        if self.combiner.kind == Combiner::Adaptive {
            if let (Some(w), Some(d)) = (record.writer, record.director) {
                self.combiner.adaptive.update(w, d);
            }
        }
        self.adam.step(&mut self.params, &grads);
        self.step += 1;
        Ok(record)
    }

    pub fn step(&mut self) -> Result<StepLoss> {
        let batch = self.next_batch();
        self.step_on(&batch)
    }
}
