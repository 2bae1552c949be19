//! Reference implementations written for clarity, not speed.

use std::collections::BTreeSet;

use crate::Mat;

const EARTH_RADIUS_KM: f64 = 6371.0088;
const LEAKY_SLOPE: f64 = 0.01;

/// Haversine distance in the arcsine form.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let s = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * s.sqrt().min(1.0).asin()
}

/// All pairs `0 < d <= delta_d`, checked one by one. Neighbor lists are
/// sorted by index.
pub fn brute_force_edges(coords: &[(f64, f64)], delta_d: f64) -> Vec<Vec<(usize, f64)>> {
    let n = coords.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = haversine_km(coords[i], coords[j]);
            if d > 0.0 && d <= delta_d {
                adj[i].push((j, d));
            }
        }
    }
    adj
}

pub fn vec_mat(v: &[f64], m: &Mat) -> Vec<f64> {
    let cols = m.first().map_or(0, Vec::len);
    let mut out = vec![0.0; cols];
    for (k, &vk) in v.iter().enumerate() {
        for c in 0..cols {
            out[c] += vk * m[k][c];
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Whole-graph geographical propagation, one node and one neighbor at a
/// time. `layers[l] = (W1, W2)`.
pub fn geo_propagate(x: &Mat, adj: &[Vec<(usize, f64)>], layers: &[(Mat, Mat)]) -> Mat {
    let n = x.len();
    let mut h = x.clone();
    for (w1, w2) in layers {
        let mut next = Vec::with_capacity(n);
        for j in 0..n {
            let mut total = vec_mat(&h[j], w1);
            for &(i, d) in &adj[j] {
                let c = 1.0 / ((adj[i].len() * adj[j].len()) as f64).sqrt();
                let own = vec_mat(&h[i], w1);
                let prod: Vec<f64> = h[i].iter().zip(&h[j]).map(|(a, b)| a * b).collect();
                let inter = vec_mat(&prod, w2);
                let kernel = (-d * d).exp();
                for k in 0..total.len() {
                    total[k] += c * (own[k] + kernel * inter[k]);
                }
            }
            next.push(total.into_iter().map(leaky).collect());
        }
        h = next;
    }
    h
}

/// Distinct nodes, alias of every position, and the row-normalized
/// in/out adjacency of a session.
pub struct Session {
    pub nodes: Vec<usize>,
    pub alias: Vec<usize>,
    pub in_matrix: Mat,
    pub out_matrix: Mat,
}

pub fn session(context: &[usize]) -> Session {
    let mut nodes: Vec<usize> = Vec::new();
    for &v in context {
        if !nodes.contains(&v) {
            nodes.push(v);
        }
    }
    let alias: Vec<usize> = context.iter().map(|v| nodes.iter().position(|u| u == v).unwrap()).collect();
    let n = nodes.len();
    let edges: BTreeSet<(usize, usize)> = alias.windows(2).map(|w| (w[0], w[1])).collect();
    let mut in_matrix = vec![vec![0.0; n]; n];
    let mut out_matrix = vec![vec![0.0; n]; n];
    for v in 0..n {
        let succ: Vec<usize> = edges.iter().filter(|e| e.0 == v).map(|e| e.1).collect();
        let pred: Vec<usize> = edges.iter().filter(|e| e.1 == v).map(|e| e.0).collect();
        for &u in &succ {
            out_matrix[v][u] = 1.0 / succ.len() as f64;
        }
        for &u in &pred {
            in_matrix[v][u] = 1.0 / pred.len() as f64;
        }
    }
    Session {
        nodes,
        alias,
        in_matrix,
        out_matrix,
    }
}

pub struct GgnnWeights {
    /// `2D x D`; rows `0..D` act on the incoming aggregate.
    pub w_aggregate: Mat,
    pub bias: Vec<f64>,
    pub w_update: Mat,
    pub u_update: Mat,
    pub w_reset: Mat,
    pub u_reset: Mat,
    pub w_candidate: Mat,
    pub u_candidate: Mat,
}

/// Node states after `steps` gated updates, node by node.
pub fn ggnn(x_nodes: &Mat, in_matrix: &Mat, out_matrix: &Mat, w: &GgnnWeights, steps: usize) -> Mat {
    let n = x_nodes.len();
    let d = x_nodes.first().map_or(0, Vec::len);
    let mut h = x_nodes.clone();
    for _ in 0..steps {
        let mut next = Vec::with_capacity(n);
        for v in 0..n {
            let mut incoming = vec![0.0; d];
            let mut outgoing = vec![0.0; d];
            for u in 0..n {
                for k in 0..d {
                    incoming[k] += in_matrix[v][u] * h[u][k];
                    outgoing[k] += out_matrix[v][u] * h[u][k];
                }
            }
            let stacked: Vec<f64> = incoming.into_iter().chain(outgoing).collect();
            let a = add(&vec_mat(&stacked, &w.w_aggregate), &w.bias);
            let z: Vec<f64> = add(&vec_mat(&a, &w.w_update), &vec_mat(&h[v], &w.u_update)).into_iter().map(sigmoid).collect();
            let r: Vec<f64> = add(&vec_mat(&a, &w.w_reset), &vec_mat(&h[v], &w.u_reset)).into_iter().map(sigmoid).collect();
            let rh: Vec<f64> = r.iter().zip(&h[v]).map(|(a, b)| a * b).collect();
            let cand: Vec<f64> = add(&vec_mat(&a, &w.w_candidate), &vec_mat(&rh, &w.u_candidate))
                .into_iter()
                .map(f64::tanh)
                .collect();
            next.push((0..d).map(|k| (1.0 - z[k]) * h[v][k] + z[k] * cand[k]).collect());
        }
        h = next;
    }
    h
}

/// `sum_i w_i k_i` with `w_i = alpha . sigmoid(q Q + k_i K)`.
pub fn attention(query: &[f64], keys: &Mat, alpha: &[f64], q: &Mat, k: &Mat) -> Vec<f64> {
    let qq = vec_mat(query, q);
    let mut out = vec![0.0; query.len()];
    for key in keys {
        let kk = vec_mat(key, k);
        let w: f64 = qq.iter().zip(&kk).zip(alpha).map(|((a, b), al)| al * sigmoid(a + b)).sum();
        for (o, &x) in out.iter_mut().zip(key) {
            *o += w * x;
        }
    }
    out
}

/// `(p_geo, p_seq)` by direct double sums.
pub fn proxies(context: &[usize], adj: &[Vec<(usize, f64)>], x: &Mat) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let mut p_seq = vec![0.0; d];
    for &v in context {
        for k in 0..d {
            p_seq[k] += x[v][k] / context.len() as f64;
        }
    }
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for &v in context {
        for &(j, _) in &adj[v] {
            for k in 0..d {
                sum[k] += x[j][k];
            }
            count += 1;
        }
    }
    if count == 0 {
        return (p_seq.clone(), p_seq);
    }
    (sum.into_iter().map(|s| s / count as f64).collect(), p_seq)
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn contrastive(e_geo: &[f64], p_geo: &[f64], e_seq: &[f64], p_seq: &[f64]) -> f64 {
    softplus(dot(e_geo, p_seq) - dot(e_geo, p_geo)) + softplus(dot(e_seq, p_geo) - dot(e_seq, p_seq))
}

/// AUC by counting every positive/negative pair; ties count one half.
pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut doubled = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                doubled += 2;
            } else if si == sj {
                doubled += 1;
            }
        }
    }
    doubled as f64 / (2 * pairs) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_degree_of_latitude() {
        let d = haversine_km((0.0, 0.0), (1.0, 0.0));
        assert!((d - EARTH_RADIUS_KM * std::f64::consts::PI / 180.0).abs() < 1e-9);
    }

    #[test]
    fn auc_hand_case() {
        assert_eq!(auc_pairs(&[0.8, 0.4, 0.3, 0.6], &[1, 1, 0, 0]), 0.75);
    }

    #[test]
    fn session_chain() {
        let s = session(&[4, 7, 4, 9]);
        assert_eq!(s.nodes, vec![4, 7, 9]);
        assert_eq!(s.alias, vec![0, 1, 0, 2]);
        assert_eq!(s.out_matrix[0], vec![0.0, 0.5, 0.5]);
        assert_eq!(s.in_matrix[0], vec![0.0, 1.0, 0.0]);
    }
}
