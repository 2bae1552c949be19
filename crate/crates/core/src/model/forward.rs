//! Batched forward pass on a single tape.

use std::collections::HashMap;

use disenpoi_autodiff::{Tape, Tensor, Var};

use super::layers::{
    binary_cross_entropy, contrastive_loss, geo_propagate, ggnn_propagate, predict, proxy_matrices, soft_attention,
    AttentionPlan, SessionBatch,
};
use super::{Model, ModelError, Result, Weights};
use crate::graphs::GeoGraph;
use crate::ingest::Sample;

/// Samples grouped by context. Identical contexts are encoded once.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub contexts: Vec<Vec<usize>>,
    /// Index into `contexts` for every sample.
    pub sample_context: Vec<usize>,
    pub targets: Vec<usize>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut index: HashMap<&'a [usize], usize> = HashMap::new();
        let mut batch = Batch {
            contexts: Vec::new(),
            sample_context: Vec::new(),
            targets: Vec::new(),
            labels: Vec::new(),
        };
        for s in samples {
            let next = batch.contexts.len();
            let c = *index.entry(s.context.as_slice()).or_insert(next);
            if c == next {
                batch.contexts.push(s.context.clone());
            }
            batch.sample_context.push(c);
            batch.targets.push(s.target);
            batch.labels.push(f64::from(s.label));
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn validate(&self, num_pois: usize) -> Result<()> {
        for ctx in &self.contexts {
            if ctx.is_empty() {
                return Err(ModelError::EmptyContext);
            }
        }
        let all = self.contexts.iter().flatten().chain(&self.targets);
        if let Some(&index) = all.into_iter().find(|&&v| v >= num_pois) {
            return Err(ModelError::PoiOutOfRange { index, num_pois });
        }
        Ok(())
    }
}

/// Per-sample intermediate results, one row per sample of the batch.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub e_geo: Var,
    pub e_seq: Var,
    pub p_geo: Var,
    pub p_seq: Var,
    pub e_geo_proj: Var,
    pub e_seq_proj: Var,
    pub p_geo_proj: Var,
    pub p_seq_proj: Var,
    pub h_target: Var,
    pub x_target: Var,
    /// `n x 1` probabilities.
    pub y_hat: Var,
    /// `n x 1` contrastive loss per sample.
    pub contrastive: Var,
}

/// Runs the network for every sample of `batch`.
pub fn forward(tape: &mut Tape, model: &Model, w: &Weights<Var>, graph: &GeoGraph, batch: &Batch) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let n = batch.len();
    let d = cfg.dim;
    batch.validate(cfg.num_pois)?;
    if graph.num_nodes() != cfg.num_pois {
        return Err(ModelError::ManifestMismatch(format!(
            "geo graph has {} nodes, model expects {}",
            graph.num_nodes(),
            cfg.num_pois
        )));
    }
    let contexts: Vec<&[usize]> = batch.contexts.iter().map(Vec::as_slice).collect();
    let sample_ctx = batch.sample_context.clone();

    let x_target = tape.gather_rows(w.embedding, batch.targets.clone())?;
    let (geo_pool, seq_pool) = proxy_matrices(&contexts, Some(graph), cfg.num_pois)?;

    let (e_geo, p_geo, h_target) = if cfg.disable_geo_graph {
        let z = tape.constant(Tensor::zeros(n, d))?;
        (z, z, z)
    } else {
        let mut nodes: Vec<usize> = contexts.iter().flat_map(|c| c.iter().copied()).chain(batch.targets.iter().copied()).collect();
        nodes.sort_unstable();
        nodes.dedup();
        let row_of: HashMap<usize, usize> = nodes.iter().enumerate().map(|(r, &v)| (v, r)).collect();
        let h = geo_propagate(tape, w.embedding, &w.geo, graph, &nodes)?;
        let target_rows: Vec<usize> = batch.targets.iter().map(|t| row_of[t]).collect();
        let h_target = tape.gather_rows(h, target_rows)?;
        let keys: Vec<Vec<usize>> = sample_ctx
            .iter()
            .map(|&c| contexts[c].iter().map(|v| row_of[v]).collect())
            .collect();
        let plan = AttentionPlan::new(&keys)?;
        let e_geo = soft_attention(tape, h_target, h, &w.attn_geo, &plan)?;
        let pooled = tape.spmm(geo_pool, w.embedding)?;
        let p_geo = tape.gather_rows(pooled, sample_ctx.clone())?;
        (e_geo, p_geo, h_target)
    };

    let (e_seq, p_seq) = if cfg.disable_seq_graph {
        let z = tape.constant(Tensor::zeros(n, d))?;
        (z, z)
    } else {
        let sessions = SessionBatch::new(&contexts)?;
        let h = ggnn_propagate(tape, w.embedding, &w.ggnn, &sessions, cfg.ggnn_steps)?;
        let positions = sessions.position_rows();
        let mut starts = Vec::with_capacity(contexts.len());
        let mut acc = 0;
        for c in &contexts {
            starts.push(acc);
            acc += c.len();
        }
        let keys: Vec<Vec<usize>> = sample_ctx
            .iter()
            .map(|&c| positions[starts[c]..starts[c] + contexts[c].len()].to_vec())
            .collect();
        let plan = AttentionPlan::new(&keys)?;
        let e_seq = soft_attention(tape, x_target, h, &w.attn_seq, &plan)?;
        let pooled = tape.spmm(seq_pool, w.embedding)?;
        let p_seq = tape.gather_rows(pooled, sample_ctx.clone())?;
        (e_seq, p_seq)
    };

    let e_geo_proj = tape.matmul(e_geo, w.proj_geo)?;
    let p_geo_proj = tape.matmul(p_geo, w.proj_geo)?;
    let e_seq_proj = tape.matmul(e_seq, w.proj_seq)?;
    let p_seq_proj = tape.matmul(p_seq, w.proj_seq)?;
    let contrastive = contrastive_loss(
        tape,
        e_geo_proj,
        p_geo_proj,
        e_seq_proj,
        p_seq_proj,
        !cfg.disable_geo_graph,
        !cfg.disable_seq_graph,
    )?;
    let y_hat = predict(tape, &w.mlp, e_geo, e_seq, x_target, h_target)?;
    Ok(ForwardOutput {
        e_geo,
        e_seq,
        p_geo,
        p_seq,
        e_geo_proj,
        e_seq_proj,
        p_geo_proj,
        p_seq_proj,
        h_target,
        x_target,
        y_hat,
        contrastive,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    /// `mean(L_rec) + beta * mean(L_con)`, or just the first term when
    /// `beta == 0`.
    pub total: Var,
    pub recommendation: Var,
    pub contrastive: Var,
}

/// Batch objective. At `beta == 0` the contrastive term is left out of the
/// graph entirely, so no gradient reaches the proxies through it.
pub fn batch_loss(tape: &mut Tape, out: &ForwardOutput, labels: &[f64], beta: f64) -> Result<BatchLoss> {
    let bce = binary_cross_entropy(tape, out.y_hat, labels)?;
    let recommendation = tape.mean_rows(bce)?;
    let contrastive = tape.mean_rows(out.contrastive)?;
    let total = if beta == 0.0 {
        recommendation
    } else {
        let weighted = tape.scalar_mul(contrastive, beta)?;
        tape.add(recommendation, weighted)?
    };
    Ok(BatchLoss {
        total,
        recommendation,
        contrastive,
    })
}
