//! Building blocks of the forward pass, each recorded on a tape.

use std::sync::Arc;

use disenpoi_autodiff::{SparseBuilder, SparseMatrix, Tape, Tensor, Var};

use super::{Attention, GeoLayer, Ggnn, Mlp, ModelError, Result};
use crate::graphs::{build_seq_graph, GeoGraph, SeqGraph};

/// Predictions are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const BCE_CLAMP_EPS: f64 = 1e-7;

/// Distance kernel applied to the interaction term of geo messages.
pub fn distance_kernel(distance_km: f64) -> f64 {
    (-distance_km * distance_km).exp()
}

/// Layer-`L` geographical representations of `node_set`, one row per entry
/// (duplicates allowed).
///
/// Per layer, node `j` receives
/// `h_j W1 + sum_{i in N(j)} c_ij (h_i W1 + w(d_ij) (h_i ⊙ h_j) W2)` with
/// `c_ij = 1 / sqrt(|N_i| |N_j|)`, followed by LeakyReLU. Only the L-hop
/// neighborhood of `node_set` is evaluated; degrees come from the full
/// graph, so the rows equal those of whole-graph propagation.
pub fn geo_propagate(
    tape: &mut Tape,
    embedding: Var,
    layers: &[GeoLayer<Var>],
    graph: &GeoGraph,
    node_set: &[usize],
) -> Result<Var> {
    let num_pois = tape.shape(embedding).0;
    if let Some(&bad) = node_set.iter().find(|&&v| v >= num_pois || v >= graph.num_nodes()) {
        return Err(ModelError::PoiOutOfRange {
            index: bad,
            num_pois: num_pois.min(graph.num_nodes()),
        });
    }
    let depth = layers.len();
    let khop = graph.k_hop(node_set, depth);
    let mut local = vec![usize::MAX; graph.num_nodes()];
    for (i, &v) in khop.nodes.iter().enumerate() {
        local[v] = i;
    }
    let outer = khop.level_sizes[depth];
    let mut h = tape.gather_rows(embedding, khop.nodes[..outer].to_vec())?;
    for (l, layer) in layers.iter().enumerate() {
        let n_in = khop.level_sizes[depth - l];
        let n_out = khop.level_sizes[depth - l - 1];
        let mut norm = SparseBuilder::new(n_in);
        let mut weighted = SparseBuilder::new(n_in);
        for &node in &khop.nodes[..n_out] {
            let deg_j = graph.degree(node) as f64;
            let (nbrs, dists) = graph.neighbors(node);
            for (&i, &d) in nbrs.iter().zip(dists) {
                let c = 1.0 / (graph.degree(i) as f64 * deg_j).sqrt();
                norm.push(local[i], c)?;
                weighted.push(local[i], c * distance_kernel(d))?;
            }
            norm.finish_row();
            weighted.finish_row();
        }
        let own = tape.slice_rows(h, 0, n_out)?;
        let agg = tape.spmm(norm.build(), h)?;
        let agg_w = tape.spmm(weighted.build(), h)?;
        let interaction = tape.mul(own, agg_w)?;
        let linear = tape.add(own, agg)?;
        let m1 = tape.matmul(linear, layer.w_message)?;
        let m2 = tape.matmul(interaction, layer.w_interaction)?;
        let pre = tape.add(m1, m2)?;
        h = tape.leaky_relu(pre)?;
    }
    let rows: Vec<usize> = node_set.iter().map(|&v| local[v]).collect();
    Ok(tape.gather_rows(h, rows)?)
}

/// Session graphs of several contexts stacked block-diagonally.
#[derive(Clone, Debug)]
pub struct SessionBatch {
    pub graphs: Vec<SeqGraph>,
    /// First stacked row of each graph.
    pub offsets: Vec<usize>,
    /// POI of every stacked row.
    pub node_pois: Vec<usize>,
    pub in_matrix: Arc<SparseMatrix>,
    pub out_matrix: Arc<SparseMatrix>,
}

impl SessionBatch {
    pub fn new(contexts: &[&[usize]]) -> Result<Self> {
        let graphs: Vec<SeqGraph> = contexts
            .iter()
            .map(|c| {
                if c.is_empty() {
                    Err(ModelError::EmptyContext)
                } else {
                    Ok(build_seq_graph(c))
                }
            })
            .collect::<Result<_>>()?;
        Self::from_graphs(graphs)
    }

    pub fn from_graphs(graphs: Vec<SeqGraph>) -> Result<Self> {
        let total: usize = graphs.iter().map(SeqGraph::num_nodes).sum();
        let mut offsets = Vec::with_capacity(graphs.len());
        let mut node_pois = Vec::with_capacity(total);
        let mut in_b = SparseBuilder::new(total);
        let mut out_b = SparseBuilder::new(total);
        for g in &graphs {
            let base = node_pois.len();
            offsets.push(base);
            node_pois.extend_from_slice(&g.nodes);
            for (matrix, builder) in [(&g.in_matrix, &mut in_b), (&g.out_matrix, &mut out_b)] {
                for r in 0..matrix.rows() {
                    for (c, &v) in matrix.row(r).iter().enumerate() {
                        if v != 0.0 {
                            builder.push(base + c, v)?;
                        }
                    }
                    builder.finish_row();
                }
            }
        }
        Ok(Self {
            graphs,
            offsets,
            node_pois,
            in_matrix: Arc::new(in_b.build()),
            out_matrix: Arc::new(out_b.build()),
        })
    }

    /// Stacked row of every context position, context after context.
    pub fn position_rows(&self) -> Vec<usize> {
        self.graphs
            .iter()
            .zip(&self.offsets)
            .flat_map(|(g, &base)| g.alias.iter().map(move |&a| base + a))
            .collect()
    }
}

/// Gated propagation over stacked session graphs; returns the node states
/// after `steps` updates, one row per stacked node.
///
/// Each step aggregates `a = [In h | Out h] W_a + b`, then
/// `z = σ(a Wz + h Uz)`, `r = σ(a Wr + h Ur)`,
/// `h~ = tanh(a Wo + (r ⊙ h) Uo)`, `h <- (1 - z) ⊙ h + z ⊙ h~`.
pub fn ggnn_propagate(
    tape: &mut Tape,
    embedding: Var,
    ggnn: &Ggnn<Var>,
    sessions: &SessionBatch,
    steps: usize,
) -> Result<Var> {
    let num_pois = tape.shape(embedding).0;
    if let Some(&bad) = sessions.node_pois.iter().find(|&&v| v >= num_pois) {
        return Err(ModelError::PoiOutOfRange { index: bad, num_pois });
    }
    let mut h = tape.gather_rows(embedding, sessions.node_pois.clone())?;
    for _ in 0..steps {
        let incoming = tape.spmm(sessions.in_matrix.clone(), h)?;
        let outgoing = tape.spmm(sessions.out_matrix.clone(), h)?;
        let both = tape.concat_cols(&[incoming, outgoing])?;
        let agg = tape.matmul(both, ggnn.w_aggregate)?;
        let a = tape.add(agg, ggnn.bias)?;

        let z = gate(tape, a, ggnn.w_update, h, ggnn.u_update)?;
        let z = tape.sigmoid(z)?;
        let r = gate(tape, a, ggnn.w_reset, h, ggnn.u_reset)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let cand = gate(tape, a, ggnn.w_candidate, rh, ggnn.u_candidate)?;
        let cand = tape.tanh(cand)?;

        let delta = tape.sub(cand, h)?;
        let step = tape.mul(z, delta)?;
        h = tape.add(h, step)?;
    }
    Ok(h)
}

fn gate(tape: &mut Tape, a: Var, w: Var, h: Var, u: Var) -> Result<Var> {
    let left = tape.matmul(a, w)?;
    let right = tape.matmul(h, u)?;
    Ok(tape.add(left, right)?)
}

/// Which key rows each sample attends over.
#[derive(Clone, Debug)]
pub struct AttentionPlan {
    /// Key row of every attention term.
    pub key_rows: Arc<[usize]>,
    /// Sample (query row) of every attention term.
    pub sample_rows: Arc<[usize]>,
    /// `samples x terms` 0/1 matrix summing terms per sample.
    pub segments: Arc<SparseMatrix>,
}

impl AttentionPlan {
    /// `keys_per_sample[s]` lists the key rows of sample `s`.
    pub fn new(keys_per_sample: &[Vec<usize>]) -> Result<Self> {
        let total: usize = keys_per_sample.iter().map(Vec::len).sum();
        let mut key_rows = Vec::with_capacity(total);
        let mut sample_rows = Vec::with_capacity(total);
        let mut seg = SparseBuilder::new(total);
        for (s, keys) in keys_per_sample.iter().enumerate() {
            for &k in keys {
                seg.push(key_rows.len(), 1.0)?;
                key_rows.push(k);
                sample_rows.push(s);
            }
            seg.finish_row();
        }
        Ok(Self {
            key_rows: key_rows.into(),
            sample_rows: sample_rows.into(),
            segments: Arc::new(seg.build()),
        })
    }
}

/// Unnormalized soft attention: for sample `s` with query `q_s`,
/// `e_s = sum_i w_i k_i` with `w_i = alpha^T σ(q_s Q + k_i K)`.
pub fn soft_attention(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    attn: &Attention<Var>,
    plan: &AttentionPlan,
) -> Result<Var> {
    let q = tape.matmul(queries, attn.query)?;
    let k = tape.matmul(keys, attn.key)?;
    let q_terms = tape.gather_rows(q, plan.sample_rows.clone())?;
    let k_terms = tape.gather_rows(k, plan.key_rows.clone())?;
    let pre = tape.add(q_terms, k_terms)?;
    let act = tape.sigmoid(pre)?;
    let weights = tape.matmul(act, attn.alpha)?;
    let values = tape.gather_rows(keys, plan.key_rows.clone())?;
    let weighted = tape.scale_rows(values, weights)?;
    Ok(tape.spmm(plan.segments.clone(), weighted)?)
}

/// Pooling matrices for the two proxies, one row per context, columns
/// indexed by POI.
///
/// The sequential proxy averages the context embeddings with multiplicity.
/// The geographical proxy averages the embeddings of every neighbor of
/// every context POI, weighted by how often each appears in that double
/// sum; a context with no neighbors at all falls back to the sequential
/// proxy.
pub fn proxy_matrices(contexts: &[&[usize]], graph: Option<&GeoGraph>, num_pois: usize) -> Result<(SparseMatrix, SparseMatrix)> {
    let mut geo = SparseBuilder::new(num_pois);
    let mut seq = SparseBuilder::new(num_pois);
    for ctx in contexts {
        if ctx.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        let w = 1.0 / ctx.len() as f64;
        for &v in ctx.iter() {
            seq.push(v, w)?;
        }
        seq.finish_row();
        let total: usize = graph.map_or(0, |g| ctx.iter().map(|&v| g.degree(v)).sum());
        match graph {
            Some(g) if total > 0 => {
                let w = 1.0 / total as f64;
                for &v in ctx.iter() {
                    for &j in g.neighbors(v).0 {
                        geo.push(j, w)?;
                    }
                }
            }
            _ => {
                for &v in ctx.iter() {
                    geo.push(v, w)?;
                }
            }
        }
        geo.finish_row();
    }
    Ok((geo.build(), seq.build()))
}

/// `(p_geo, p_seq)` for each context, as stacked rows.
pub fn proxies(tape: &mut Tape, embedding: Var, contexts: &[&[usize]], graph: &GeoGraph) -> Result<(Var, Var)> {
    let num_pois = tape.shape(embedding).0;
    let (geo, seq) = proxy_matrices(contexts, Some(graph), num_pois)?;
    let p_geo = tape.spmm(geo, embedding)?;
    let p_seq = tape.spmm(seq, embedding)?;
    Ok((p_geo, p_seq))
}

/// Row-wise inner products, `n x 1`.
pub fn row_dot(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let prod = tape.mul(a, b)?;
    Ok(tape.sum_cols(prod)?)
}

/// Ranking term `softplus(<a, q> - <a, p>)` per row.
pub fn ranking_term(tape: &mut Tape, anchor: Var, positive: Var, negative: Var) -> Result<Var> {
    let neg = row_dot(tape, anchor, negative)?;
    let pos = row_dot(tape, anchor, positive)?;
    let margin = tape.sub(neg, pos)?;
    Ok(tape.softplus(margin)?)
}

/// Per-row contrastive loss on projected vectors:
/// `f(e_g', p_g', p_s') + f(e_s', p_s', p_g')`. A disabled branch drops
/// its own term.
pub fn contrastive_loss(
    tape: &mut Tape,
    e_geo: Var,
    p_geo: Var,
    e_seq: Var,
    p_seq: Var,
    include_geo: bool,
    include_seq: bool,
) -> Result<Var> {
    let rows = tape.shape(e_geo).0;
    let mut total = tape.constant(Tensor::zeros(rows, 1))?;
    if include_geo {
        let term = ranking_term(tape, e_geo, p_geo, p_seq)?;
        total = tape.add(total, term)?;
    }
    if include_seq {
        let term = ranking_term(tape, e_seq, p_seq, p_geo)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// `σ(MLP([e_g | e_s | x_t | h_t]))`, one probability per row.
pub fn predict(tape: &mut Tape, mlp: &Mlp<Var>, e_geo: Var, e_seq: Var, x_target: Var, h_target: Var) -> Result<Var> {
    let input = tape.concat_cols(&[e_geo, e_seq, x_target, h_target])?;
    let hidden = tape.matmul(input, mlp.w_hidden)?;
    let hidden = tape.add(hidden, mlp.b_hidden)?;
    let hidden = tape.leaky_relu(hidden)?;
    let logit = tape.matmul(hidden, mlp.w_out)?;
    let logit = tape.add(logit, mlp.b_out)?;
    Ok(tape.sigmoid(logit)?)
}

/// Per-row binary cross-entropy with clamped predictions.
pub fn binary_cross_entropy(tape: &mut Tape, y_hat: Var, labels: &[f64]) -> Result<Var> {
    let y = Tensor::column_vector(labels.to_vec());
    let not_y = y.map(|v| 1.0 - v);
    let y = tape.constant(y)?;
    let not_y = tape.constant(not_y)?;
    let p = tape.clamp(y_hat, BCE_CLAMP_EPS, 1.0 - BCE_CLAMP_EPS)?;
    let log_p = tape.log(p)?;
    let neg_p = tape.scalar_mul(p, -1.0)?;
    let one_minus = tape.add_scalar(neg_p, 1.0)?;
    let log_q = tape.log(one_minus)?;
    let a = tape.mul(log_p, y)?;
    let b = tape.mul(log_q, not_y)?;
    let sum = tape.add(a, b)?;
    Ok(tape.scalar_mul(sum, -1.0)?)
}
