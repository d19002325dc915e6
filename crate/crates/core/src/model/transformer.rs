//! Pre-norm decoder-only transformer with learned positions and an untied
//! output head.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{SequenceRole, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::math::autodiff::{linear, log_sum_exp};
use crate::math::optim::BoundParams;
use crate::math::{Graph, NumericArray, ParamStore, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("context_len", self.context_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

/// Per-token final-layer representations for a contiguous span of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub values: NumericArray,
    /// Absolute position of the first row.
    pub span_offset: usize,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        if self.values.is_empty() {
            0
        } else {
            self.values.rows()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Rows `range` (relative to this span) as a new span.
    pub fn slice(&self, range: Range<usize>) -> HiddenStates {
        let d = self.dim();
        let data = self.values.data()[range.start * d..range.end * d].to_vec();
        HiddenStates {
            values: NumericArray::from_parts(range.len(), d, data),
            span_offset: self.span_offset + range.start,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSpec {
    LastToken,
    Mean,
}

/// Deterministic reduction of `n x d` states to a single `1 x d` row.
pub fn pool(states: &HiddenStates, spec: PoolSpec) -> Result<NumericArray> {
    if states.is_empty() {
        return Err(Error::Empty("pool over empty states"));
    }
    let n = states.len();
    match spec {
        PoolSpec::LastToken => Ok(NumericArray::row_vector(states.values.row(n - 1).to_vec())),
        PoolSpec::Mean => {
            let d = states.dim();
            let mut out = vec![0.0; d];
            for r in 0..n {
                out.iter_mut().zip(states.values.row(r)).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= n as f64);
            Ok(NumericArray::row_vector(out))
        }
    }
}

pub fn init_params(config: &ModelConfig) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (d, v, f) = (config.d_model, config.vocab_size, config.d_ff());
    let mut p = ParamStore::new();
    p.insert_normal("tok_emb", v, d, INIT_STD, &mut rng);
    p.insert_normal("pos_emb", config.context_len, d, INIT_STD, &mut rng);
    for l in 0..config.n_layers {
        let pre = format!("h{l}");
        for ln in ["ln1", "ln2"] {
            p.insert(format!("{pre}.{ln}.gain"), NumericArray::filled(&[1, d], 1.0));
            p.insert(format!("{pre}.{ln}.bias"), NumericArray::zeros(&[1, d]));
        }
        for proj in ["q", "k", "v", "o"] {
            p.insert_normal(&format!("{pre}.attn.{proj}.w"), d, d, INIT_STD, &mut rng);
            p.insert(format!("{pre}.attn.{proj}.b"), NumericArray::zeros(&[1, d]));
        }
        p.insert_normal(&format!("{pre}.mlp.fc.w"), d, f, INIT_STD, &mut rng);
        p.insert(format!("{pre}.mlp.fc.b"), NumericArray::zeros(&[1, f]));
        p.insert_normal(&format!("{pre}.mlp.proj.w"), f, d, INIT_STD, &mut rng);
        p.insert(format!("{pre}.mlp.proj.b"), NumericArray::zeros(&[1, d]));
    }
    p.insert("ln_f.gain", NumericArray::filled(&[1, d], 1.0));
    p.insert("ln_f.bias", NumericArray::zeros(&[1, d]));
    p.insert_normal("lm_head.w", d, v, INIT_STD, &mut rng);
    Ok(p)
}

/// Graph handles produced by a packed forward pass.
#[derive(Clone, Debug)]
pub struct PackedForward {
    /// `N x |V|`; row `t` of a span scores the token at `t + 1`.
    pub logits: Var,
    /// `N x d` final-layer representations.
    pub states: Var,
    /// Row range of each input sequence.
    pub spans: Vec<Range<usize>>,
}

/// Forward pass over several sequences packed into one `N x d` matrix.
pub fn forward_packed(
    g: &mut Graph,
    p: &BoundParams,
    config: &ModelConfig,
    seqs: &[&[usize]],
) -> Result<PackedForward> {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut spans = Vec::with_capacity(seqs.len());
    for seq in seqs {
        if seq.is_empty() {
            return Err(Error::Empty("forward over an empty sequence"));
        }
        if seq.len() > config.context_len {
            return Err(Error::ContextOverflow {
                len: seq.len(),
                context_len: config.context_len,
            });
        }
        let start = ids.len();
        ids.extend_from_slice(seq);
        positions.extend(0..seq.len());
        spans.push(start..ids.len());
    }

    let tok = g.gather(p.var("tok_emb")?, &ids)?;
    let pos = g.gather(p.var("pos_emb")?, &positions)?;
    let mut x = g.add(tok, pos)?;
    for l in 0..config.n_layers {
        let name = |s: &str| format!("h{l}.{s}");
        let h = g.layer_norm(x, p.var(&name("ln1.gain"))?, p.var(&name("ln1.bias"))?)?;
        let q = linear(g, h, p.var(&name("attn.q.w"))?, Some(p.var(&name("attn.q.b"))?))?;
        let k = linear(g, h, p.var(&name("attn.k.w"))?, Some(p.var(&name("attn.k.b"))?))?;
        let v = linear(g, h, p.var(&name("attn.v.w"))?, Some(p.var(&name("attn.v.b"))?))?;
        let a = g.causal_attention(q, k, v, &spans, config.n_heads)?;
        let a = linear(g, a, p.var(&name("attn.o.w"))?, Some(p.var(&name("attn.o.b"))?))?;
        x = g.add(x, a)?;
        let h = g.layer_norm(x, p.var(&name("ln2.gain"))?, p.var(&name("ln2.bias"))?)?;
        let m = linear(g, h, p.var(&name("mlp.fc.w"))?, Some(p.var(&name("mlp.fc.b"))?))?;
        let m = g.gelu(m);
        let m = linear(g, m, p.var(&name("mlp.proj.w"))?, Some(p.var(&name("mlp.proj.b"))?))?;
        x = g.add(x, m)?;
    }
    let states = g.layer_norm(x, p.var("ln_f.gain")?, p.var("ln_f.bias")?)?;
    let logits = g.matmul(states, p.var("lm_head.w")?)?;
    Ok(PackedForward {
        logits,
        states,
        spans,
    })
}

/// Teacher-forced forward over one sequence: `(logits L x |V|, states L x d)`.
pub fn forward(
    params: &ParamStore,
    config: &ModelConfig,
    ids: &TokenSequence,
) -> Result<(NumericArray, HiddenStates)> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let out = forward_packed(&mut g, &bound, config, &[ids.ids()])?;
    Ok((
        g.value(out.logits).clone(),
        HiddenStates {
            values: g.value(out.states).clone(),
            span_offset: 0,
        },
    ))
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy next token after each of several prefixes, in one packed pass.
pub fn next_tokens(params: &ParamStore, config: &ModelConfig, prefixes: &[&[usize]]) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let out = forward_packed(&mut g, &bound, config, prefixes)?;
    let logits = g.value(out.logits);
    Ok(out
        .spans
        .iter()
        .map(|span| argmax(logits.row(span.end - 1)))
        .collect())
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: TokenSequence,
    /// States of the generated tokens, offset to their absolute positions.
    pub states: HiddenStates,
}

/// Greedy decoding from `prefix`, stopping after EOS or `max_new` tokens.
pub fn generate(
    params: &ParamStore,
    config: &ModelConfig,
    prefix: &TokenSequence,
    max_new: usize,
) -> Result<Generation> {
    Ok(generate_batch(params, config, &[prefix.ids()], max_new)?
        .pop()
        .expect("one prefix in, one generation out"))
}

/// Greedy decoding for several prefixes at once.
pub fn generate_batch(
    params: &ParamStore,
    config: &ModelConfig,
    prefixes: &[&[usize]],
    max_new: usize,
) -> Result<Vec<Generation>> {
    for prefix in prefixes {
        if prefix.is_empty() {
            return Err(Error::Empty("generation prefix"));
        }
        if prefix.len() + max_new > config.context_len {
            return Err(Error::ContextOverflow {
                len: prefix.len() + max_new,
                context_len: config.context_len,
            });
        }
    }
    let mut seqs: Vec<Vec<usize>> = prefixes.iter().map(|p| p.to_vec()).collect();
    let mut done = vec![max_new == 0; prefixes.len()];
    for _ in 0..max_new {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let views: Vec<&[usize]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let next = next_tokens(params, config, &views)?;
        for (&i, tok) in active.iter().zip(next) {
            seqs[i].push(tok);
            if tok == Vocab::EOS || seqs[i].len() - prefixes[i].len() == max_new {
                done[i] = true;
            }
        }
    }

    let d = config.d_model;
    let with_tokens: Vec<usize> = (0..seqs.len())
        .filter(|&i| seqs[i].len() > prefixes[i].len())
        .collect();
    let mut states: Vec<Option<HiddenStates>> = vec![None; seqs.len()];
    if !with_tokens.is_empty() {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let views: Vec<&[usize]> = with_tokens.iter().map(|&i| seqs[i].as_slice()).collect();
        let out = forward_packed(&mut g, &bound, config, &views)?;
        let all = g.value(out.states);
        for (&i, span) in with_tokens.iter().zip(&out.spans) {
            let start = prefixes[i].len();
            let data = all.data()[(span.start + start) * d..span.end * d].to_vec();
            states[i] = Some(HiddenStates {
                values: NumericArray::from_parts(span.len() - start, d, data),
                span_offset: start,
            });
        }
    }

    seqs.into_iter()
        .zip(states)
        .zip(prefixes)
        .map(|((seq, st), prefix)| {
            let generated = seq[prefix.len()..].to_vec();
            Ok(Generation {
                tokens: TokenSequence::new(generated, SequenceRole::Generated, config.vocab_size)?,
                states: st.unwrap_or(HiddenStates {
                    values: NumericArray::zeros(&[0, d]),
                    span_offset: prefix.len(),
                }),
            })
        })
        .collect()
}

/// Free-running greedy rollout of exactly `len` tokens (EOS does not stop it).
pub fn rollout_batch(
    params: &ParamStore,
    config: &ModelConfig,
    prefixes: &[&[usize]],
    len: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut seqs: Vec<Vec<usize>> = prefixes.iter().map(|p| p.to_vec()).collect();
    for _ in 0..len {
        let views: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let next = next_tokens(params, config, &views)?;
        for (s, t) in seqs.iter_mut().zip(next) {
            s.push(t);
        }
    }
    Ok(seqs
        .into_iter()
        .zip(prefixes)
        .map(|(s, p)| s[p.len()..].to_vec())
        .collect())
}

/// `log P(target | prefix)` from a single teacher-forced pass.
pub fn sequence_log_prob(
    params: &ParamStore,
    config: &ModelConfig,
    prefix: &[usize],
    target: &[usize],
) -> Result<f64> {
    let full: Vec<usize> = prefix.iter().chain(target).copied().collect();
    let seq = TokenSequence::new(full, SequenceRole::Input, config.vocab_size)?;
    let (logits, _) = forward(params, config, &seq)?;
    Ok(target
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let row = logits.row(prefix.len() + t - 1);
            row[tok] - log_sum_exp(row)
        })
        .sum())
}
