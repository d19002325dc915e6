use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::math::array::{dot, gemm_acc, gemm_at_b_acc};
use crate::math::autodiff::{gelu_with_grad, log_sum_exp, softmax};
use crate::math::{Adam, NumericArray, ParamStore};

/// Statistics network and training schedule for [`mine_estimate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MineConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Batches averaged for the reported value.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
}

fn default_hidden() -> usize {
    128
}
fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-4
}
fn default_eval_batches() -> usize {
    10
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            eval_batches: default_eval_batches(),
        }
    }
}

impl MineConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Lower-bound mutual-information estimate in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    pub nats: f64,
    pub n_samples: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// Columns shifted to zero mean and scaled to unit variance; constant
/// columns become zero.
pub fn standardize(x: &NumericArray) -> NumericArray {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for c in 0..d {
        let mean = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var.sqrt() > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        for r in 0..n {
            out.set(r, c, (x.get(r, c) - mean) * scale);
        }
    }
    out
}

struct Network {
    params: ParamStore,
}

impl Network {
    fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        params.insert_normal("w1", input, hidden, (1.0 / input as f64).sqrt(), rng);
        params.insert("b1", NumericArray::zeros(&[1, hidden]));
        params.insert_normal("w2", hidden, 1, (1.0 / hidden as f64).sqrt(), rng);
        params.insert("b2", NumericArray::zeros(&[1, 1]));
        Self { params }
    }
}

/// Joint rows followed by the same rows with `z` permuted by `perm`.
fn paired_batch(y: &NumericArray, z: &NumericArray, rows: &[usize], perm: &[usize]) -> NumericArray {
    let (dy, dz) = (y.cols(), z.cols());
    let b = rows.len();
    let mut data = Vec::with_capacity(2 * b * (dy + dz));
    for &r in rows {
        data.extend_from_slice(y.row(r));
        data.extend_from_slice(z.row(r));
    }
    for (i, &r) in rows.iter().enumerate() {
        data.extend_from_slice(y.row(r));
        data.extend_from_slice(z.row(rows[perm[i]]));
    }
    NumericArray::new(vec![2 * b, dy + dz], data).expect("sizes agree")
}

/// Donsker-Varadhan objective `E_joint[T] − log E_marginal[e^T]` on one
/// paired batch, with the gradient of its negation when `grads` is set.
fn dv_pass(net: &Network, batch: &NumericArray, grads: bool) -> Result<(f64, Option<BTreeMap<String, NumericArray>>)> {
    let (rows, input) = (batch.rows(), batch.cols());
    let b = rows / 2;
    let (w1, b1) = (net.params.get("w1")?, net.params.get("b1")?);
    let (w2, b2) = (net.params.get("w2")?, net.params.get("b2")?.item());
    let hidden = w1.cols();

    let mut pre = Vec::with_capacity(rows * hidden);
    for _ in 0..rows {
        pre.extend_from_slice(b1.data());
    }
    gemm_acc(batch.data(), w1.data(), &mut pre, rows, input, hidden);
    let mut act = vec![0.0; rows * hidden];
    let mut slope = if grads { vec![0.0; rows * hidden] } else { Vec::new() };
    for (i, &x) in pre.iter().enumerate() {
        let (v, d) = gelu_with_grad(x);
        act[i] = v;
        if grads {
            slope[i] = d;
        }
    }
    let t: Vec<f64> = act.chunks_exact(hidden).map(|h| dot(h, w2.data()) + b2).collect();
    let joint = t[..b].iter().sum::<f64>() / b as f64;
    let objective = joint - (log_sum_exp(&t[b..]) - (b as f64).ln());
    if !grads {
        return Ok((objective, None));
    }

    // d(−objective)/dT
    let mut dt = vec![-1.0 / b as f64; b];
    dt.extend(softmax(&t[b..]));
    let mut gw2 = vec![0.0; hidden];
    let mut dpre = vec![0.0; rows * hidden];
    for r in 0..rows {
        let (h, s) = (&act[r * hidden..(r + 1) * hidden], &slope[r * hidden..(r + 1) * hidden]);
        gw2.iter_mut().zip(h).for_each(|(g, x)| *g += dt[r] * x);
        let out = &mut dpre[r * hidden..(r + 1) * hidden];
        for ((o, &w), &d) in out.iter_mut().zip(w2.data()).zip(s) {
            *o = dt[r] * w * d;
        }
    }
    let mut gw1 = vec![0.0; input * hidden];
    gemm_at_b_acc(batch.data(), &dpre, &mut gw1, rows, input, hidden);
    let mut gb1 = vec![0.0; hidden];
    for chunk in dpre.chunks_exact(hidden) {
        gb1.iter_mut().zip(chunk).for_each(|(g, x)| *g += x);
    }
    let mut out = BTreeMap::new();
    out.insert("w1".to_string(), NumericArray::new(vec![input, hidden], gw1)?);
    out.insert("b1".to_string(), NumericArray::new(vec![1, hidden], gb1)?);
    out.insert("w2".to_string(), NumericArray::new(vec![hidden, 1], gw2)?);
    out.insert("b2".to_string(), NumericArray::scalar(dt.iter().sum()));
    Ok((objective, Some(out)))
}

/// MINE estimate of `I(y; z)` from row-aligned samples.
///
/// Marginal samples come from permuting `z` within each batch.
pub fn mine_estimate(y: &NumericArray, z: &NumericArray, cfg: &MineConfig) -> Result<MIEstimate> {
    let n = y.rows();
    if y.is_empty() || z.is_empty() {
        return Err(Error::Empty("MINE samples"));
    }
    if z.rows() != n {
        return Err(Error::LengthMismatch {
            what: "MINE y and z rows",
            left: n,
            right: z.rows(),
        });
    }
    if cfg.batch_size < 2 || n < cfg.batch_size {
        return Err(Error::Config(format!(
            "MINE needs at least batch_size = {} pairs (and a batch of at least 2), got {n}",
            cfg.batch_size
        )));
    }
    if !(y.is_finite() && z.is_finite()) {
        return Err(Error::NonFinite("MINE input".into()));
    }
    let (y, z) = (standardize(y), standardize(z));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::new(y.cols() + z.cols(), cfg.hidden, &mut rng);
    let mut adam = Adam::new(cfg.learning_rate);
    let b = cfg.batch_size;
    let mut order: Vec<usize> = (0..n).collect();
    let mut perm: Vec<usize> = (0..b).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks_exact(b) {
            perm.shuffle(&mut rng);
            let (objective, grads) = dv_pass(&net, &paired_batch(&y, &z, rows, &perm), true)?;
            if !objective.is_finite() {
                return Err(Error::NonFinite("MINE objective".into()));
            }
            adam.step(&mut net.params, &grads.expect("requested"));
        }
    }
    let mut total = 0.0;
    let batches = cfg.eval_batches.max(1);
    for _ in 0..batches {
        order.shuffle(&mut rng);
        perm.shuffle(&mut rng);
        let (objective, _) = dv_pass(&net, &paired_batch(&y, &z, &order[..b], &perm), false)?;
        total += objective;
    }
    Ok(MIEstimate {
        nats: total / batches as f64,
        n_samples: n,
        epochs: cfg.epochs,
        seed: cfg.seed,
    })
}
