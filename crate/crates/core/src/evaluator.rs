//! Metrics and diagnostics for trained models.

use std::io::{self, Write};

use disenpoi_autodiff::{Tape, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::{haversine_km, GeoGraph, LatLon};
use crate::ingest::Sample;
use crate::model::{forward, Batch, Model, ModelError};

/// Predictions are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const LOGLOSS_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC needs at least one positive and one negative label")]
    DegenerateLabels,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Area under the ROC curve by rank sum; tied scores share their mean rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, kept integral
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        doubled_rank_sum += positives * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * n) as f64)
}

/// Mean binary cross-entropy with clamped predictions; 0 for no samples.
pub fn logloss(scores: &[f64], labels: &[u8]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = s.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / scores.len() as f64
}

fn check_compatible(model: &Model, graph: &GeoGraph) -> Result<()> {
    if graph.num_nodes() != model.config.num_pois {
        return Err(ModelError::ManifestMismatch(format!(
            "model has {} POIs, data has {}",
            model.config.num_pois,
            graph.num_nodes()
        ))
        .into());
    }
    Ok(())
}

/// Predicted probabilities in sample order.
pub fn score_samples(model: &Model, graph: &GeoGraph, samples: &[Sample], batch_size: usize) -> Result<Vec<f64>> {
    check_compatible(model, graph)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Batch::from_samples(chunk);
        let mut tape = Tape::new();
        let (_, w) = model.bind(&mut tape, false)?;
        let f = forward(&mut tape, model, &w, graph, &batch)?;
        out.extend_from_slice(tape.value(f.y_hat).data());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub cos_geo_geo_proxy: f64,
    pub cos_geo_seq_proxy: f64,
    pub cos_seq_seq_proxy: f64,
    pub cos_seq_geo_proxy: f64,
    /// `mean[cos(e_g', p_g') - cos(e_g', p_s')]`.
    pub geo_margin: f64,
    /// `mean[cos(e_s', p_s') - cos(e_s', p_g')]`.
    pub seq_margin: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recommendation_distance_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub auc: f64,
    pub logloss: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slices: Vec<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

/// AUC and logloss over `samples`.
pub fn evaluate_split(model: &Model, graph: &GeoGraph, samples: &[Sample], split: &str, batch_size: usize) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let scores = score_samples(model, graph, samples, batch_size)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    Ok(MetricsReport {
        split: split.to_string(),
        auc: auc(&scores, &labels)?,
        logloss: logloss(&scores, &labels),
        n_samples: samples.len(),
        train_fraction: None,
        slices: Vec::new(),
        diagnostics: None,
    })
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Mean cosines between projected representations and proxies. When
/// `export` is given, writes `sample, role, values...` rows for the raw
/// and projected vectors of every sample.
pub fn disentanglement_diagnostics(
    model: &Model,
    graph: &GeoGraph,
    samples: &[Sample],
    batch_size: usize,
    mut export: Option<&mut dyn Write>,
) -> Result<Diagnostics> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    check_compatible(model, graph)?;
    let mut sums = [0.0; 4];
    let mut offset = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Batch::from_samples(chunk);
        let mut tape = Tape::new();
        let (_, w) = model.bind(&mut tape, false)?;
        let f = forward(&mut tape, model, &w, graph, &batch)?;
        let v = |var| tape.value(var);
        let (eg, pg, es, ps) = (v(f.e_geo_proj), v(f.p_geo_proj), v(f.e_seq_proj), v(f.p_seq_proj));
        for r in 0..batch.len() {
            sums[0] += cosine(eg.row(r), pg.row(r));
            sums[1] += cosine(eg.row(r), ps.row(r));
            sums[2] += cosine(es.row(r), ps.row(r));
            sums[3] += cosine(es.row(r), pg.row(r));
        }
        if let Some(w) = export.as_deref_mut() {
            let roles: [(&str, &Tensor); 8] = [
                ("e_geo", v(f.e_geo)),
                ("e_seq", v(f.e_seq)),
                ("p_geo", v(f.p_geo)),
                ("p_seq", v(f.p_seq)),
                ("e_geo_proj", eg),
                ("e_seq_proj", es),
                ("p_geo_proj", pg),
                ("p_seq_proj", ps),
            ];
            for r in 0..batch.len() {
                for (role, t) in &roles {
                    write!(w, "{}\t{role}", offset + r)?;
                    for x in t.row(r) {
                        write!(w, "\t{x:?}")?;
                    }
                    writeln!(w)?;
                }
            }
        }
        offset += batch.len();
    }
    let n = samples.len() as f64;
    let [gg, gs, ss, sg] = sums.map(|s| s / n);
    Ok(Diagnostics {
        cos_geo_geo_proxy: gg,
        cos_geo_seq_proxy: gs,
        cos_seq_seq_proxy: ss,
        cos_seq_geo_proxy: sg,
        geo_margin: gg - gs,
        seq_margin: ss - sg,
        recommendation_distance_km: None,
        top_k: None,
    })
}

/// Scores every candidate after `context`, keeps the `top_k` best and
/// returns their mean distance from the last visited POI.
pub fn recommendation_distance(
    model: &Model,
    graph: &GeoGraph,
    coords: &[LatLon],
    context: &[usize],
    pool: &[usize],
    top_k: usize,
    batch_size: usize,
) -> Result<f64> {
    let &anchor = context.last().ok_or(ModelError::EmptyContext)?;
    if pool.is_empty() || top_k == 0 {
        return Err(EvalError::Empty);
    }
    let candidates: Vec<Sample> = pool
        .iter()
        .map(|&target| Sample {
            user_index: 0,
            context: context.to_vec(),
            target,
            label: 0,
        })
        .collect();
    let scores = score_samples(model, graph, &candidates, batch_size)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    // ties broken by pool position for determinism
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let k = top_k.min(pool.len());
    let total: f64 = order[..k].iter().map(|&i| haversine_km(coords[anchor], coords[pool[i]])).sum();
    Ok(total / k as f64)
}

/// Mean of [`recommendation_distance`] over the positive samples, with
/// every POI outside the context as the candidate pool.
pub fn mean_recommendation_distance(
    model: &Model,
    graph: &GeoGraph,
    coords: &[LatLon],
    samples: &[Sample],
    top_k: usize,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for s in samples.iter().filter(|s| s.label == 1) {
        let mut in_context = vec![false; coords.len()];
        for &v in &s.context {
            in_context[v] = true;
        }
        let pool: Vec<usize> = (0..coords.len()).filter(|&v| !in_context[v]).collect();
        total += recommendation_distance(model, graph, coords, &s.context, &pool, top_k, batch_size)?;
        count += 1;
    }
    if count == 0 {
        return Err(EvalError::Empty);
    }
    Ok(total / count as f64)
}
