//! Writer cross-entropy, the writer-director alignment loss (WDAL), its
//! baselines, and the ordered-penalty cross-entropy used for numeric targets.
//!
//! WDAL is evaluated in its max/exp form,
//! `max(L_W², L_D²) · exp(−|log L_W − log L_D|)`, with both inputs clamped
//! below by `eps`. For positive inputs this equals `L_W · L_D`; the product is
//! never substituted for it so that the clamped, log-space evaluation is what
//! actually runs during training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::autodiff::log_sum_exp;
use crate::math::{CeTarget, Graph, NumericArray, Var};
use crate::model::{TokenSequence, Vocab};

pub const DEFAULT_EPS: f64 = 1e-8;

/// Weights from the four-token worked example; longer targets continue at 1.0.
pub const REFERENCE_ALPHA: [f64; 4] = [1.67, 1.33, 1.01, 1.00];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Wdal,
    Multiplicative,
    Adaptive,
    DirectorOnly,
}

impl Combiner {
    pub const ALL: [Combiner; 4] = [
        Combiner::Wdal,
        Combiner::Multiplicative,
        Combiner::Adaptive,
        Combiner::DirectorOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Combiner::Wdal => "wdal",
            Combiner::Multiplicative => "multiplicative",
            Combiner::Adaptive => "adaptive",
            Combiner::DirectorOnly => "director_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub writer: f64,
    pub director: f64,
    pub combined: f64,
    pub combiner: Combiner,
}

/// Position weights `α₁ ≥ α₂ ≥ … > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct OrderedPenalty {
    alpha: Vec<f64>,
}

impl TryFrom<Vec<f64>> for OrderedPenalty {
    type Error = Error;

    fn try_from(alpha: Vec<f64>) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<OrderedPenalty> for Vec<f64> {
    fn from(p: OrderedPenalty) -> Self {
        p.alpha
    }
}

impl OrderedPenalty {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Empty("ordered penalty"));
        }
        if alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::Config("ordered penalty weights must be positive".into()));
        }
        if alpha.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config(format!(
                "ordered penalty must be non-increasing, got {alpha:?}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            alpha: vec![1.0; len.max(1)],
        }
    }

    /// [`REFERENCE_ALPHA`] extended with 1.0 up to `len` positions.
    pub fn reference(len: usize) -> Self {
        let mut alpha: Vec<f64> = REFERENCE_ALPHA.to_vec();
        alpha.resize(len.max(alpha.len()), 1.0);
        Self { alpha }
    }

    pub fn weights(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// Per-position `−log softmax(logits[t])[gold_t]`; `None` at PAD positions.
pub fn token_ce(logits: &NumericArray, gold: &TokenSequence) -> Result<Vec<Option<f64>>> {
    if logits.rows() != gold.len() {
        return Err(Error::LengthMismatch {
            what: "logit rows vs gold tokens",
            left: logits.rows(),
            right: gold.len(),
        });
    }
    gold.ids()
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            if id == Vocab::PAD {
                return Ok(None);
            }
            let row = logits.row(t);
            if id >= row.len() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: row.len(),
                });
            }
            Ok(Some(log_sum_exp(row) - row[id]))
        })
        .collect()
}

/// Mean token cross-entropy over non-PAD positions.
pub fn writer_ce(logits: &NumericArray, gold: &TokenSequence) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Empty("writer_ce target"));
    }
    let ce: Vec<f64> = token_ce(logits, gold)?.into_iter().flatten().collect();
    if ce.is_empty() {
        return Err(Error::Empty("writer_ce target is all padding"));
    }
    Ok(ce.iter().sum::<f64>() / ce.len() as f64)
}

/// `Σ αᵢ · CEᵢ` over non-PAD positions.
pub fn ordered_ce(logits: &NumericArray, gold: &TokenSequence, alpha: &OrderedPenalty) -> Result<f64> {
    if alpha.len() < gold.len() {
        return Err(Error::LengthMismatch {
            what: "ordered penalty shorter than target",
            left: alpha.len(),
            right: gold.len(),
        });
    }
    Ok(token_ce(logits, gold)?
        .into_iter()
        .zip(alpha.weights())
        .filter_map(|(ce, a)| ce.map(|c| a * c))
        .sum())
}

fn check_finite(lw: f64, ld: f64) -> Result<()> {
    if lw.is_finite() && ld.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss pair ({lw}, {ld})")))
    }
}

/// WDAL with the default clamp.
pub fn wdal(lw: f64, ld: f64) -> Result<f64> {
    wdal_with_eps(lw, ld, DEFAULT_EPS)
}

pub fn wdal_with_eps(lw: f64, ld: f64, eps: f64) -> Result<f64> {
    check_finite(lw, ld)?;
    let (w, d) = (lw.max(eps), ld.max(eps));
    let authority = (w * w).max(d * d);
    let alignment = (-(w.ln() - d.ln()).abs()).exp();
    Ok(authority * alignment)
}

/// Gradient of [`wdal`] with respect to `(L_W, L_D)`.
pub fn wdal_grad(lw: f64, ld: f64) -> Result<(f64, f64)> {
    wdal_grad_with_eps(lw, ld, DEFAULT_EPS)
}

/// Chain rule through the max/exp form. At `L_W = L_D` the authority term
/// uses the subgradient element with `a = ½` and the alignment term has zero
/// derivative. Inputs below `eps` sit on the flat part of the clamp.
pub fn wdal_grad_with_eps(lw: f64, ld: f64, eps: f64) -> Result<(f64, f64)> {
    check_finite(lw, ld)?;
    let (w, d) = (lw.max(eps), ld.max(eps));
    let authority = (w * w).max(d * d);
    let diff = w.ln() - d.ln();
    let alignment = (-diff.abs()).exp();

    let (auth_w, auth_d) = if w > d {
        (2.0 * w, 0.0)
    } else if w < d {
        (0.0, 2.0 * d)
    } else {
        (0.5 * 2.0 * w, 0.5 * 2.0 * d)
    };
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let align_w = -alignment * sign / w;
    let align_d = alignment * sign / d;

    let gw = auth_w * alignment + authority * align_w;
    let gd = auth_d * alignment + authority * align_d;
    Ok((
        if lw < eps { 0.0 } else { gw },
        if ld < eps { 0.0 } else { gd },
    ))
}

/// Plain product, no clamping.
pub fn multiplicative(lw: f64, ld: f64) -> f64 {
    lw * ld
}

/// Exponential moving averages of recent loss magnitudes for [`adaptive`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveState {
    pub ema_writer: f64,
    pub ema_director: f64,
    pub decay: f64,
}

impl Default for AdaptiveState {
    fn default() -> Self {
        Self {
            ema_writer: 1.0,
            ema_director: 1.0,
            decay: 0.99,
        }
    }
}

impl AdaptiveState {
    /// Weight on the writer term; the director gets `1 − w`.
    pub fn writer_weight(&self) -> f64 {
        self.ema_director / (self.ema_writer + self.ema_director)
    }

    pub fn update(&mut self, lw: f64, ld: f64) {
        self.ema_writer = self.decay * self.ema_writer + (1.0 - self.decay) * lw.abs();
        self.ema_director = self.decay * self.ema_director + (1.0 - self.decay) * ld.abs();
    }
}

/// Inverse-magnitude weighted sum `w·L_W + (1 − w)·L_D`.
pub fn adaptive(lw: f64, ld: f64, state: &AdaptiveState) -> f64 {
    let w = state.writer_weight();
    w * lw + (1.0 - w) * ld
}

/// Stateful combiner used inside a training loop.
#[derive(Clone, Debug)]
pub struct LossCombiner {
    pub kind: Combiner,
    pub eps: f64,
    pub adaptive: AdaptiveState,
}

impl LossCombiner {
    pub fn new(kind: Combiner, eps: f64) -> Self {
        Self {
            kind,
            eps,
            adaptive: AdaptiveState::default(),
        }
    }

    /// Value and partials of the configured combination at `(lw, ld)`.
    pub fn evaluate(&self, lw: f64, ld: f64) -> Result<(f64, f64, f64)> {
        check_finite(lw, ld)?;
        Ok(match self.kind {
            Combiner::Wdal => {
                let (gw, gd) = wdal_grad_with_eps(lw, ld, self.eps)?;
                (wdal_with_eps(lw, ld, self.eps)?, gw, gd)
            }
            Combiner::Multiplicative => (multiplicative(lw, ld), ld, lw),
            Combiner::Adaptive => {
                let w = self.adaptive.writer_weight();
                (adaptive(lw, ld, &self.adaptive), w, 1.0 - w)
            }
            Combiner::DirectorOnly => (ld, 0.0, 1.0),
        })
    }

    /// Records the combination of two scalar graph nodes and advances any
    /// internal state.
    pub fn combine(&mut self, g: &mut Graph, lw: Var, ld: Var) -> Result<(Var, LossBreakdown)> {
        let (w, d) = (g.value(lw).item(), g.value(ld).item());
        let (value, da, db) = self.evaluate(w, d)?;
        if self.kind == Combiner::Adaptive {
            self.adaptive.update(w, d);
        }
        let var = g.binary_scalar(lw, ld, value, da, db);
        Ok((
            var,
            LossBreakdown {
                writer: w,
                director: d,
                combined: value,
                combiner: self.kind,
            },
        ))
    }
}

/// Graph version of [`writer_ce`]: mean CE over `(row, gold id)` pairs.
pub fn writer_ce_node(g: &mut Graph, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
    let kept: Vec<&(usize, usize)> = targets.iter().filter(|(_, id)| *id != Vocab::PAD).collect();
    if kept.is_empty() {
        return Err(Error::Empty("writer_ce target"));
    }
    let w = 1.0 / kept.len() as f64;
    let ce: Vec<CeTarget> = kept
        .iter()
        .map(|&&(row, class)| CeTarget { row, class, weight: w })
        .collect();
    g.softmax_cross_entropy(logits, &ce)
}

/// Graph version of [`ordered_ce`] for one sequence's target rows.
pub fn ordered_ce_targets(rows: &[(usize, usize)], alpha: &OrderedPenalty, scale: f64) -> Result<Vec<CeTarget>> {
    if alpha.len() < rows.len() {
        return Err(Error::LengthMismatch {
            what: "ordered penalty shorter than target",
            left: alpha.len(),
            right: rows.len(),
        });
    }
    Ok(rows
        .iter()
        .zip(alpha.weights())
        .filter(|((_, id), _)| *id != Vocab::PAD)
        .map(|(&(row, class), &a)| CeTarget {
            row,
            class,
            weight: a * scale,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SequenceRole;

    fn seq(ids: &[usize], vocab: usize) -> TokenSequence {
        TokenSequence::new(ids.to_vec(), SequenceRole::Input, vocab).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = NumericArray::zeros(&[3, 32]);
        let l = writer_ce(&logits, &seq(&[4, 5, 6], 32)).unwrap();
        assert!((l - 32f64.ln()).abs() < 1e-12);
        assert!((l - 3.4657).abs() < 1e-4);
    }

    #[test]
    fn two_token_vocab_gives_ln2() {
        let logits = NumericArray::zeros(&[1, 2]);
        let l = writer_ce(&logits, &seq(&[0], 2));
        // id 0 is PAD, so everything is masked
        assert!(l.is_err());
        let l = writer_ce(&logits, &seq(&[1], 2)).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn peaked_logits_drive_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut logits = NumericArray::zeros(&[1, 8]);
            logits.set(0, 5, margin);
            let l = writer_ce(&logits, &seq(&[5], 8)).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn pad_positions_are_excluded() {
        let mut logits = NumericArray::zeros(&[2, 4]);
        logits.set(1, 0, 100.0);
        let with_pad = writer_ce(&logits, &seq(&[2, Vocab::PAD], 4)).unwrap();
        assert!((with_pad - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let logits = NumericArray::zeros(&[2, 4]);
        assert!(matches!(
            writer_ce(&logits, &seq(&[1], 4)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn wdal_worked_values() {
        assert!((wdal(2.0, 3.0).unwrap() - 6.0).abs() < 1e-12);
        assert!((wdal(1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        for c in [1e-3, 0.7, 4.0, 123.0] {
            assert!((wdal(c, c).unwrap() - c * c).abs() <= 1e-12 * c * c);
        }
        assert!(wdal(f64::NAN, 1.0).is_err());
        assert!(wdal(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn wdal_grad_worked_values() {
        let (a, b) = wdal_grad(2.0, 3.0).unwrap();
        assert!((a - 3.0).abs() < 1e-9 && (b - 2.0).abs() < 1e-9);
        let (a, b) = wdal_grad(1.0, 5.0).unwrap();
        assert!((a - 5.0).abs() < 1e-9 && (b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wdal_grad_at_tie_is_the_symmetric_subgradient() {
        for c in [0.1, 1.0, 2.5] {
            let (a, b) = wdal_grad(c, c).unwrap();
            // element of {(s·2c, (1−s)·2c) : s ∈ [0, 1]} with s = ½
            let s = a / (2.0 * c);
            assert!((0.0..=1.0).contains(&s));
            assert!((b - (1.0 - s) * 2.0 * c).abs() < 1e-12);
            assert!((s - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn multiplicative_baseline() {
        assert_eq!(multiplicative(2.0, 3.0), 6.0);
        assert_eq!(multiplicative(0.0, 17.0), 0.0);
        assert_eq!(multiplicative(1e8, 1e-8), 1.0);
    }

    #[test]
    fn adaptive_baseline() {
        let fresh = AdaptiveState::default();
        assert_eq!(adaptive(2.0, 4.0, &fresh), 3.0);
        assert_eq!(adaptive(1.5, 0.5, &fresh), 1.0);
        let skewed = AdaptiveState {
            ema_writer: 1e9,
            ema_director: 1.0,
            decay: 0.99,
        };
        assert!(skewed.writer_weight() < 1e-8);
        assert!((adaptive(2.0, 4.0, &skewed) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn ordered_penalty_validation() {
        assert!(OrderedPenalty::new(vec![1.0, 2.0]).is_err());
        assert!(OrderedPenalty::new(vec![1.0, 0.0]).is_err());
        assert!(OrderedPenalty::new(vec![]).is_err());
        assert!(OrderedPenalty::new(REFERENCE_ALPHA.to_vec()).is_ok());
        assert_eq!(OrderedPenalty::reference(6).weights(), &[1.67, 1.33, 1.01, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn ordered_ce_uniform_weights_is_sum_of_ce() {
        let logits = NumericArray::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let gold = seq(&[1, 3, 2], 4);
        let per: f64 = token_ce(&logits, &gold).unwrap().into_iter().flatten().sum();
        assert_eq!(ordered_ce(&logits, &gold, &OrderedPenalty::uniform(3)).unwrap(), per);
        let mean = writer_ce(&logits, &gold).unwrap();
        assert!((ordered_ce(&logits, &gold, &OrderedPenalty::uniform(3)).unwrap() - 3.0 * mean).abs() < 1e-12);
    }

    #[test]
    fn ordered_ce_perfect_logits_vanish_and_short_alpha_errors() {
        let mut logits = NumericArray::zeros(&[2, 4]);
        logits.set(0, 1, 1e3);
        logits.set(1, 2, 1e3);
        let gold = seq(&[1, 2], 4);
        assert_eq!(ordered_ce(&logits, &gold, &OrderedPenalty::uniform(2)).unwrap(), 0.0);
        assert!(ordered_ce(&logits, &gold, &OrderedPenalty::uniform(1)).is_err());
    }

    #[test]
    fn combiner_node_carries_partials() {
        let mut g = Graph::new();
        let lw = g.leaf(NumericArray::scalar(2.0));
        let ld = g.leaf(NumericArray::scalar(3.0));
        let mut comb = LossCombiner::new(Combiner::Wdal, DEFAULT_EPS);
        let (out, br) = comb.combine(&mut g, lw, ld).unwrap();
        assert!((br.combined - 6.0).abs() < 1e-12);
        let grads = g.backward(out).unwrap();
        assert!((grads.get(lw).unwrap().item() - 3.0).abs() < 1e-9);
        assert!((grads.get(ld).unwrap().item() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn adaptive_combiner_updates_its_averages() {
        let mut comb = LossCombiner::new(Combiner::Adaptive, DEFAULT_EPS);
        let mut g = Graph::new();
        let lw = g.leaf(NumericArray::scalar(2.0));
        let ld = g.leaf(NumericArray::scalar(4.0));
        let (_, br) = comb.combine(&mut g, lw, ld).unwrap();
        assert_eq!(br.combined, 3.0);
        assert!((comb.adaptive.ema_writer - 1.01).abs() < 1e-12);
        assert!((comb.adaptive.ema_director - 1.03).abs() < 1e-12);
    }
}
