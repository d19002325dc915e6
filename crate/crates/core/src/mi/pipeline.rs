use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::mine::{mine_estimate, MIEstimate, MineConfig};
use crate::data::{Target, TaskKind};
use crate::error::{Error, Result};
use crate::harness::train::{pooled_states, Framed, Prepared};
use crate::harness::Pooling;
use crate::math::{truncated_svd, Graph, NumericArray, ParamStore};
use crate::model::{forward_packed, generate_batch, HiddenStates};

const CHUNK: usize = 64;

/// Top-`k` rows of `Σ Vᵀ` for one sequence's states (`k x d`).
///
/// Spans shorter than `k` are padded with zero rows first. Each row is
/// oriented to have a non-negative dot product with the summed states.
pub fn reduce_states(z: &HiddenStates, k: usize) -> Result<NumericArray> {
    if z.is_empty() {
        return Err(Error::Empty("states to reduce"));
    }
    if k == 0 || k > z.dim() {
        return Err(Error::InvalidRank {
            k,
            rows: z.len(),
            cols: z.dim(),
        });
    }
    let (n, d) = (z.len(), z.dim());
    let mut scores = if n >= k {
        truncated_svd(&z.values, k)?
    } else {
        let mut data = z.values.data().to_vec();
        data.resize(k * d, 0.0);
        truncated_svd(&NumericArray::new(vec![k, d], data)?, k)?
    };
    let mut total = vec![0.0; d];
    for r in 0..n {
        total.iter_mut().zip(z.values.row(r)).for_each(|(t, x)| *t += x);
    }
    for c in 0..k {
        let row = scores.row_mut(c);
        if row.iter().zip(&total).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
            row.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(scores)
}

/// Every example, train split first.
pub fn all_examples(prepared: &Prepared) -> Vec<&Framed> {
    prepared.train.iter().chain(&prepared.test).collect()
}

/// One-hot class rows or a single real column.
pub fn target_matrix(examples: &[&Framed], task: TaskKind, num_classes: usize) -> Result<NumericArray> {
    let n = examples.len();
    match task {
        TaskKind::Classification => {
            let mut m = NumericArray::zeros(&[n, num_classes]);
            for (r, f) in examples.iter().enumerate() {
                match f.value {
                    Target::Class(c) if c < num_classes => m.set(r, c, 1.0),
                    _ => return Err(Error::Config("class target outside num_classes".into())),
                }
            }
            Ok(m)
        }
        TaskKind::Regression => {
            let values: Result<Vec<f64>> = examples
                .iter()
                .map(|f| f.value.real().ok_or_else(|| Error::Config("regression needs real targets".into())))
                .collect();
            NumericArray::new(vec![n, 1], values?)
        }
    }
}

/// Pooled input representation `Z_p` of each example (`N x d`).
pub fn pooled_representations(
    params: &ParamStore,
    prepared: &Prepared,
    pooling: Pooling,
    examples: &[&Framed],
) -> Result<NumericArray> {
    let d = prepared.model.d_model;
    let mut data = Vec::with_capacity(examples.len() * d);
    for chunk in examples.chunks(CHUNK) {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let pooled = pooled_states(&mut g, &bound, &prepared.model, chunk, pooling)?;
        data.extend_from_slice(g.value(pooled).data());
    }
    NumericArray::new(vec![examples.len(), d], data)
}

/// Final-layer states of the greedily generated span of each example.
pub fn generated_states(params: &ParamStore, prepared: &Prepared, examples: &[&Framed]) -> Result<Vec<HiddenStates>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(CHUNK) {
        let prefixes: Vec<Vec<usize>> = chunk.iter().map(|f| f.prefix()).collect();
        let views: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
        out.extend(
            generate_batch(params, &prepared.model, &views, prepared.max_target)?
                .into_iter()
                .map(|g| g.states),
        );
    }
    Ok(out)
}

/// Reduced representation `Z_r` of each span, flattened to `N x (k·d)`.
pub fn reduced_representations(states: &[HiddenStates], k: usize) -> Result<NumericArray> {
    let first = states.first().ok_or(Error::Empty("reduced representations"))?;
    let d = first.dim();
    let mut data = Vec::with_capacity(states.len() * k * d);
    for s in states {
        data.extend_from_slice(reduce_states(s, k)?.data());
    }
    NumericArray::new(vec![states.len(), k * d], data)
}

/// `I(Y; Z_p)` for a pooled model against `I(Y; Z_r)` for a generative one,
/// over all train and test examples, with the same MINE settings.
pub fn dpi_compare(
    predictor: (&ParamStore, &Prepared, Pooling),
    generative: (&ParamStore, &Prepared),
    k: usize,
    cfg: &MineConfig,
) -> Result<(MIEstimate, MIEstimate)> {
    let (p_params, p_prep, pooling) = predictor;
    let (g_params, g_prep) = generative;
    let p_examples = all_examples(p_prep);
    let g_examples = all_examples(g_prep);
    let y_p = target_matrix(&p_examples, p_prep.dataset.task, p_prep.dataset.num_classes)?;
    let y_g = target_matrix(&g_examples, g_prep.dataset.task, g_prep.dataset.num_classes)?;
    let z_p = pooled_representations(p_params, p_prep, pooling, &p_examples)?;
    let z_r = reduced_representations(&generated_states(g_params, g_prep, &g_examples)?, k)?;
    Ok((mine_estimate(&y_p, &z_p, cfg)?, mine_estimate(&y_g, &z_r, cfg)?))
}

/// `I(Y; Z_r)` of a generative model for each `k`.
pub fn mi_vs_k(params: &ParamStore, prepared: &Prepared, ks: &[usize], cfg: &MineConfig) -> Result<Vec<(usize, MIEstimate)>> {
    let examples = all_examples(prepared);
    let y = target_matrix(&examples, prepared.dataset.task, prepared.dataset.num_classes)?;
    let states = generated_states(params, prepared, &examples)?;
    ks.iter()
        .map(|&k| Ok((k, mine_estimate(&y, &reduced_representations(&states, k)?, cfg)?)))
        .collect()
}

/// MI between each input position's state and the state of the generated
/// token at `target_position`, one row per position (`n x 1`).
///
/// Positions run over the shortest input, so every example contributes to
/// every row.
pub fn token_mi_matrix(
    params: &ParamStore,
    prepared: &Prepared,
    target_position: usize,
    cfg: &MineConfig,
) -> Result<NumericArray> {
    let examples = all_examples(prepared);
    let n = examples.iter().map(|f| f.input.len()).min().ok_or(Error::Empty("token MI dataset"))?;
    if n == 0 {
        return Err(Error::Empty("token MI inputs"));
    }
    let d = prepared.model.d_model;
    let generated = generated_states(params, prepared, &examples)?;
    let mut predicted = Vec::with_capacity(examples.len() * d);
    for s in &generated {
        if target_position >= s.len() {
            return Err(Error::Config(format!(
                "target_position {target_position} beyond a generated span of {} tokens",
                s.len()
            )));
        }
        predicted.extend_from_slice(s.values.row(target_position));
    }
    let predicted = NumericArray::new(vec![examples.len(), d], predicted)?;
    let mut per_position: Vec<Vec<f64>> = vec![Vec::with_capacity(examples.len() * d); n];
    for chunk in examples.chunks(CHUNK) {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let views: Vec<&[usize]> = chunk.iter().map(|f| f.input.as_slice()).collect();
        let fwd = forward_packed(&mut g, &bound, &prepared.model, &views)?;
        let states = g.value(fwd.states);
        for span in &fwd.spans {
            for (i, rows) in per_position.iter_mut().enumerate() {
                rows.extend_from_slice(states.row(span.start + i));
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    for rows in per_position {
        let z = NumericArray::new(vec![examples.len(), d], rows)?;
        out.push(mine_estimate(&z, &predicted, cfg)?.nats);
    }
    NumericArray::new(vec![n, 1], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Pooled,
    Reduced,
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pooled => "pooled",
            Self::Reduced => "reduced",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiRow {
    pub dataset: String,
    pub representation: Representation,
    pub k: Option<usize>,
    pub seed: u64,
    pub nats: f64,
}

pub fn mi_report_csv(rows: &[MiRow]) -> String {
    let mut out = String::from("dataset,representation,k,seed,nats\n");
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.dataset, r.representation.name(), k, r.seed, r.nats);
    }
    out
}

pub fn token_mi_csv(matrix: &NumericArray) -> String {
    let mut out = String::from("position,nats\n");
    for r in 0..matrix.rows() {
        let _ = writeln!(out, "{},{}", r, matrix.get(r, 0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn states(rows: &[Vec<f64>]) -> HiddenStates {
        HiddenStates {
            values: NumericArray::from_rows(rows).unwrap(),
            span_offset: 0,
        }
    }

    #[test]
    fn components_point_along_the_summed_state() {
        // first coordinate near zero, so a coordinate-based sign would flip
        for eps in [1e-9, -1e-9] {
            let z = states(&[vec![eps, 2.0, 1.0], vec![eps, 1.0, 2.0]]);
            let r = reduce_states(&z, 2).unwrap();
            for c in 0..2 {
                let along: f64 = r.row(c).iter().zip([2.0 * eps, 3.0, 3.0]).map(|(a, b)| a * b).sum();
                assert!(along >= -1e-12, "{eps} {c} {along}");
            }
            assert!(r.row(0)[1] > 0.0 && r.row(0)[2] > 0.0);
        }
    }

    #[test]
    fn short_spans_are_padded() {
        let z = HiddenStates {
            values: NumericArray::from_rows(&[vec![3.0, 4.0, 0.0]]).unwrap(),
            span_offset: 7,
        };
        let r = reduce_states(&z, 2).unwrap();
        assert_eq!(r.shape(), &[2, 3]);
        assert!((r.row(0)[0] - 3.0).abs() < 1e-12 && (r.row(0)[1] - 4.0).abs() < 1e-12);
        assert!(r.row(1).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn empty_states_are_rejected() {
        let z = HiddenStates {
            values: NumericArray::zeros(&[0, 3]),
            span_offset: 0,
        };
        assert!(reduce_states(&z, 1).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let rows = [MiRow {
            dataset: "toy".into(),
            representation: Representation::Reduced,
            k: Some(2),
            seed: 1,
            nats: 0.5,
        }];
        assert_eq!(mi_report_csv(&rows), "dataset,representation,k,seed,nats\ntoy,reduced,2,1,0.5\n");
    }
}
