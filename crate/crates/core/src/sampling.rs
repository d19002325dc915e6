//! Scheduled sampling: how often training conditions on the model's own
//! tokens instead of the gold ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SequenceRole, TokenSequence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Sequence,
    Token,
}

impl Granularity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(Self::Sequence),
            "token" => Ok(Self::Token),
            _ => Err(Error::Config(format!("unknown sampling granularity {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sequence => "sequence",
            Self::Token => "token",
        }
    }
}

/// Linear ramp from gold conditioning (`p = 0`) to self-conditioning (`p = 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub max_steps_for_sampling: u64,
    pub granularity: Granularity,
    pub seed: u64,
}

impl SamplingSchedule {
    pub fn new(max_steps_for_sampling: u64, granularity: Granularity, seed: u64) -> Result<Self> {
        if max_steps_for_sampling == 0 {
            return Err(Error::Config("max_steps_for_sampling must be positive".into()));
        }
        Ok(Self {
            max_steps_for_sampling,
            granularity,
            seed,
        })
    }

    pub fn mixing_prob(&self, step: u64) -> f64 {
        (step as f64 / self.max_steps_for_sampling as f64).min(1.0)
    }

    /// Decision stream for one worker at one step.
    pub fn rng(&self, worker: u64, step: u64) -> ChaCha8Rng {
        step_rng(self.seed, worker, step)
    }
}

pub fn step_rng(seed: u64, worker: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step);
    rng
}

/// One Bernoulli(p) draw: the generated sequence with probability `p`.
pub fn mix_sequence<R: Rng + ?Sized>(
    gold: &TokenSequence,
    generated: &TokenSequence,
    p: f64,
    rng: &mut R,
) -> TokenSequence {
    if rng.gen_bool(p.clamp(0.0, 1.0)) {
        generated.clone()
    } else {
        gold.clone()
    }
}

/// Per-position Bernoulli(p) mixing.
///
/// `provider` receives the mixed prefix built so far and returns the model's
/// own next token; it is only called at positions that take that token.
pub fn mix_token<R, F>(gold: &TokenSequence, mut provider: F, p: f64, rng: &mut R) -> Result<TokenSequence>
where
    R: Rng + ?Sized,
    F: FnMut(&[usize]) -> Result<usize>,
{
    let p = p.clamp(0.0, 1.0);
    let mut out = Vec::with_capacity(gold.len());
    for &g in gold.ids() {
        let tok = if rng.gen_bool(p) { provider(&out)? } else { g };
        out.push(tok);
    }
    Ok(TokenSequence::from_ids_unchecked(out, SequenceRole::Input))
}

/// Per-position decisions alone: `true` where the model's token is used.
pub fn token_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<bool> {
    let p = p.clamp(0.0, 1.0);
    (0..len).map(|_| rng.gen_bool(p)).collect()
}
