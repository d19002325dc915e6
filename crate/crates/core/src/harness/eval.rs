use serde::{Deserialize, Serialize};

use super::config::{Pooling, Regime};
use super::train::{denormalize, predictor_outputs, Framed, Prepared};
use crate::adapters::{adapt_classify, decode_number, ClassifierHead, ClsSpec};
use crate::data::{Split, TaskKind};
use crate::error::Result;
use crate::math::autodiff::softmax;
use crate::math::{Graph, ParamStore};
use crate::model::transformer::argmax;
use crate::model::{generate_batch, Vocab};

/// Decoded values closer than this to the gold value count as exact.
pub const EXACT_MATCH_TOL: f64 = 1e-4;

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub split: Split,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    /// Outputs that could not be read as a prediction.
    pub invalid_outputs: usize,
}

/// What a trained model said for one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Output {
    Class(Option<usize>),
    Real(Option<f64>),
}

pub fn is_exact(pred: f64, gold: f64) -> bool {
    (pred - gold).abs() < EXACT_MATCH_TOL
}

/// Scores outputs against gold targets. Unreadable numeric outputs count as
/// the largest possible error over `range`.
pub fn score(split: Split, outputs: &[Output], gold: &[&Framed], range: (f64, f64)) -> Metrics {
    let n = outputs.len();
    let mut metrics = Metrics {
        split,
        n,
        accuracy: None,
        mse: None,
        mae: None,
        exact_match: None,
        invalid_outputs: 0,
    };
    if n == 0 {
        return metrics;
    }
    let worst = range.1 - range.0;
    let (mut correct, mut se, mut ae, mut exact) = (0usize, 0.0, 0.0, 0usize);
    let mut is_class = false;
    for (out, f) in outputs.iter().zip(gold) {
        match *out {
            Output::Class(c) => {
                is_class = true;
                match c {
                    Some(c) if Some(c) == f.value.class() => correct += 1,
                    Some(_) => {}
                    None => metrics.invalid_outputs += 1,
                }
            }
            Output::Real(v) => {
                let y = f.value.real().unwrap_or(f64::NAN);
                match v {
                    Some(v) => {
                        se += (v - y) * (v - y);
                        ae += (v - y).abs();
                        exact += usize::from(is_exact(v, y));
                    }
                    None => {
                        metrics.invalid_outputs += 1;
                        se += worst * worst;
                        ae += worst;
                    }
                }
            }
        }
    }
    let n_f = n as f64;
    if is_class {
        metrics.accuracy = Some(correct as f64 / n_f);
    } else {
        metrics.mse = Some(se / n_f);
        metrics.mae = Some(ae / n_f);
        metrics.exact_match = Some(exact as f64 / n_f);
    }
    metrics
}

/// Free-running greedy outputs for `examples`.
pub fn predict(
    params: &ParamStore,
    prepared: &Prepared,
    regime: Regime,
    pooling: Pooling,
    cls: ClsSpec,
    examples: &[&Framed],
) -> Result<Vec<Output>> {
    let task = prepared.dataset.task;
    let model = &prepared.model;
    let vocab = Vocab::new();
    let mut outputs = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        if regime == Regime::Predictor {
            let mut g = Graph::new();
            let bound = params.bind_frozen(&mut g);
            let out = predictor_outputs(&mut g, &bound, model, chunk, pooling)?;
            let values = g.value(out);
            for r in 0..chunk.len() {
                outputs.push(match task {
                    TaskKind::Classification => Output::Class(Some(argmax(&softmax(values.row(r))))),
                    TaskKind::Regression => Output::Real(Some(denormalize(values.row(r)[0], prepared.dataset.range))),
                });
            }
            continue;
        }
        let prefixes: Vec<Vec<usize>> = chunk.iter().map(|f| f.prefix()).collect();
        let views: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
        let generations = generate_batch(params, model, &views, prepared.max_target)?;
        for generation in generations {
            let ids = generation.tokens.ids();
            outputs.push(match (task, regime) {
                (TaskKind::Regression, _) => Output::Real(decode_number(ids, &vocab).ok()),
                (TaskKind::Classification, Regime::Predgen) => {
                    let head = ClassifierHead::from_params(params, cls)?;
                    Output::Class(adapt_classify(&generation.states, &head).ok().and_then(|p| p.class()))
                }
                (TaskKind::Classification, _) => {
                    let end = ids.iter().position(|&t| t == Vocab::EOS).unwrap_or(ids.len());
                    let text = vocab.decode(&ids[..end]);
                    Output::Class(text.parse().ok().filter(|&c: &usize| c < prepared.dataset.num_classes))
                }
            });
        }
    }
    Ok(outputs)
}

pub fn evaluate_split(
    params: &ParamStore,
    prepared: &Prepared,
    regime: Regime,
    pooling: Pooling,
    cls: ClsSpec,
    split: Split,
) -> Result<Metrics> {
    let examples: Vec<&Framed> = prepared.split(split).iter().collect();
    let outputs = predict(params, prepared, regime, pooling, cls, &examples)?;
    Ok(score(split, &outputs, &examples, prepared.dataset.range))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Target;

    fn real(y: f64) -> Framed {
        Framed {
            input: vec![],
            target: vec![Vocab::EOS],
            value: Target::Real(y),
        }
    }

    #[test]
    fn constant_prediction_mse_is_spread_around_it() {
        let gold = [real(0.0), real(1.0), real(2.0), real(5.0)];
        let refs: Vec<&Framed> = gold.iter().collect();
        let outputs = vec![Output::Real(Some(1.0)); 4];
        let m = score(Split::Test, &outputs, &refs, (0.0, 5.0));
        assert!((m.mse.unwrap() - (1.0 + 0.0 + 1.0 + 16.0) / 4.0).abs() < 1e-12);
        assert_eq!(m.exact_match, Some(0.25));
    }

    #[test]
    fn decode_failure_scores_worst_case() {
        let gold = [real(0.5)];
        let m = score(Split::Test, &[Output::Real(None)], &[&gold[0]], (0.0, 1.0));
        assert_eq!(m.mse, Some(1.0));
        assert_eq!(m.mae, Some(1.0));
        assert_eq!(m.exact_match, Some(0.0));
        assert_eq!(m.invalid_outputs, 1);
    }

    #[test]
    fn exact_match_threshold() {
        assert!(is_exact(5.00009, 5.0));
        assert!(!is_exact(5.00011, 5.0));
        assert!(!is_exact(-5.0, 5.0));
    }
}
