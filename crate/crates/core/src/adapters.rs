//! Task adapters: map the hidden states of generated tokens to a class
//! distribution, and convert between numbers and digit-token sequences.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ordered_ce, OrderedPenalty};
use crate::math::autodiff::softmax;
use crate::math::{Graph, NumericArray, ParamStore, Var};
use crate::model::{pool, HiddenStates, PoolSpec, SequenceRole, TokenSequence, Vocab};

pub const HEAD_PARAM: &str = "adapter.w";

/// Which embedding of the generated span feeds the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsSpec {
    #[default]
    LastGeneratedToken,
    MeanOfGenerated,
}

impl ClsSpec {
    fn pool_spec(self) -> PoolSpec {
        match self {
            ClsSpec::LastGeneratedToken => PoolSpec::LastToken,
            ClsSpec::MeanOfGenerated => PoolSpec::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    /// `num_classes x d`.
    pub weight: NumericArray,
    pub cls: ClsSpec,
}

impl ClassifierHead {
    pub fn new(weight: NumericArray, cls: ClsSpec) -> Result<Self> {
        if weight.rows() < 2 {
            return Err(Error::Config("classifier head needs at least two classes".into()));
        }
        Ok(Self { weight, cls })
    }

    /// Reads the head from a parameter store, where it is kept as `d x C`.
    pub fn from_params(params: &ParamStore, cls: ClsSpec) -> Result<Self> {
        Self::new(params.get(HEAD_PARAM)?.transpose(), cls)
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    ClassDistribution(Vec<f64>),
    RealValue(f64),
}

impl Prediction {
    /// Most probable class; ties go to the lower index.
    pub fn class(&self) -> Option<usize> {
        match self {
            Prediction::ClassDistribution(p) => Some(crate::model::transformer::argmax(p)),
            Prediction::RealValue(_) => None,
        }
    }
}

/// `softmax(W · CLS(states))` over the generated span.
pub fn adapt_classify(states: &HiddenStates, head: &ClassifierHead) -> Result<Prediction> {
    if states.is_empty() {
        return Err(Error::Empty("generated span (generation stopped before any token)"));
    }
    let cls = pool(states, head.cls.pool_spec())?;
    if cls.cols() != head.weight.cols() {
        return Err(Error::Dimension {
            op: "adapt_classify",
            left: head.weight.shape().to_vec(),
            right: cls.shape().to_vec(),
        });
    }
    let logits = cls.matmul(&head.weight.transpose())?;
    Ok(Prediction::ClassDistribution(softmax(logits.data())))
}

/// Classifier logits (`B x C`) for spans of a packed state matrix.
pub fn classify_node(g: &mut Graph, states: Var, spans: &[Range<usize>], head: Var, cls: ClsSpec) -> Result<Var> {
    if spans.iter().any(Range::is_empty) {
        return Err(Error::Empty("generated span"));
    }
    let pooled = match cls {
        ClsSpec::LastGeneratedToken => {
            let rows: Vec<usize> = spans.iter().map(|s| s.end - 1).collect();
            g.select_rows(states, &rows)?
        }
        ClsSpec::MeanOfGenerated => g.group_mean(states, spans)?,
    };
    g.matmul(pooled, head)
}

/// Parses `['-'] digits ['.' digits]` up to EOS (or the end of the tokens).
///
/// Leading zeros are fine, and either side of the point may be empty as long
/// as at least one digit is present and a point is followed by a digit.
pub fn decode_number(tokens: &[usize], vocab: &Vocab) -> Result<f64> {
    let mut text = String::new();
    let mut seen_dot = false;
    let mut int_digits = 0;
    let mut frac_digits = 0;
    let mut end = tokens.len();
    for (i, &id) in tokens.iter().enumerate() {
        if id == Vocab::EOS {
            end = i;
            break;
        }
        let ch = vocab.symbol(id).ok_or(Error::Decode {
            position: i,
            reason: "special token inside number",
        })?;
        match ch {
            '-' if i == 0 => text.push('-'),
            '0'..='9' => {
                if seen_dot {
                    frac_digits += 1;
                } else {
                    int_digits += 1;
                }
                text.push(ch);
            }
            '.' if seen_dot => {
                return Err(Error::Decode {
                    position: i,
                    reason: "second decimal point",
                })
            }
            '.' => {
                seen_dot = true;
                text.push('.');
            }
            _ => {
                return Err(Error::Decode {
                    position: i,
                    reason: "unexpected symbol",
                })
            }
        }
    }
    if int_digits + frac_digits == 0 {
        return Err(Error::Decode {
            position: end,
            reason: "no digits",
        });
    }
    if seen_dot && frac_digits == 0 {
        return Err(Error::Decode {
            position: end,
            reason: "decimal point without fraction digits",
        });
    }
    if text.starts_with("-.") {
        text.insert(1, '0');
    } else if text.starts_with('.') {
        text.insert(0, '0');
    }
    text.parse::<f64>().map_err(|_| Error::Decode {
        position: 0,
        reason: "unparseable number",
    })
}

/// [`decode_number`] over a plain string.
pub fn decode_number_str(text: &str, vocab: &Vocab) -> Result<f64> {
    decode_number(&vocab.encode(text)?, vocab)
}

pub const MAX_ENCODABLE: f64 = 1e6;

/// Fixed-point rendering with exactly `decimals` fraction digits, rounding
/// half away from zero on the shortest decimal representation of `x`.
pub fn render_number(x: f64, decimals: usize) -> Result<String> {
    if !x.is_finite() {
        return Err(Error::Encode {
            value: x,
            reason: "not finite",
        });
    }
    if x.abs() >= MAX_ENCODABLE {
        return Err(Error::Encode {
            value: x,
            reason: "magnitude at or above 1e6",
        });
    }
    if decimals > 6 {
        return Err(Error::Encode {
            value: x,
            reason: "more than 6 decimals",
        });
    }
    let repr = format!("{}", x.abs());
    let (int_part, frac_part) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int_part.bytes().map(|b| b - b'0').collect();
    let int_len = digits.len();
    let frac: Vec<u8> = frac_part.bytes().map(|b| b - b'0').collect();
    digits.extend((0..decimals).map(|i| frac.get(i).copied().unwrap_or(0)));
    if frac.get(decimals).is_some_and(|&d| d >= 5) {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let int_len = int_len + (digits.len() - int_len - decimals);
    let mut out = String::new();
    if x < 0.0 && digits.iter().any(|&d| d != 0) {
        out.push('-');
    }
    let int_digits = &digits[..int_len];
    let first_nonzero = int_digits.iter().position(|&d| d != 0).unwrap_or(int_len - 1);
    out.extend(int_digits[first_nonzero..].iter().map(|d| char::from(b'0' + d)));
    if decimals > 0 {
        out.push('.');
        out.extend(digits[int_len..].iter().map(|d| char::from(b'0' + d)));
    }
    Ok(out)
}

/// Gold target tokens for `x`: the rendered digits followed by EOS.
pub fn encode_number(x: f64, decimals: usize, vocab: &Vocab) -> Result<TokenSequence> {
    let mut ids = vocab.encode(&render_number(x, decimals)?)?;
    ids.push(Vocab::EOS);
    TokenSequence::new(ids, SequenceRole::Gold, vocab.size())
}

/// Director loss for numeric targets: the ordered-penalty cross-entropy.
pub fn regression_director_loss(logits: &NumericArray, gold: &TokenSequence, alpha: &OrderedPenalty) -> Result<f64> {
    ordered_ce(logits, gold, alpha)
}
