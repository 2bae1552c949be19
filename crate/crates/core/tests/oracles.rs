//! Model operations against the straight-line reference implementations.

use disenpoi::autodiff::{Tape, Tensor};
use disenpoi::evaluator::auc;
use disenpoi::graphs::{build_geo_graph, GeoGraph, LatLon};
use disenpoi::model::layers::{
    contrastive_loss, geo_propagate, ggnn_propagate, proxies, soft_attention, AttentionPlan, SessionBatch,
};
use disenpoi::model::{Attention, GeoLayer, Ggnn};
use disenpoi_testkit::oracle::{self, GgnnWeights};
use disenpoi_testkit::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 128;
const TOL: f64 = 1e-10;

fn mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
}

fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

fn assert_rows_close(got: &Tensor, want: &[Vec<f64>], what: &str) {
    assert_eq!(got.rows(), want.len(), "{what}: row count");
    for (r, row) in want.iter().enumerate() {
        for (c, &w) in row.iter().enumerate() {
            let g = got.get(r, c);
            assert!((g - w).abs() <= TOL * (1.0 + w.abs()), "{what}[{r},{c}]: {g} vs {w}");
        }
    }
}

/// Random POIs clustered within a few km so the 1 km graph has structure.
fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> (Vec<(f64, f64)>, GeoGraph) {
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|_| (35.0 + rng.gen_range(0.0..0.02), 139.0 + rng.gen_range(0.0..0.02)))
        .collect();
    let latlon: Vec<LatLon> = coords.iter().map(|&(a, b)| LatLon::new(a, b)).collect();
    (coords, build_geo_graph(&latlon, 1.0).unwrap())
}

fn oracle_adjacency(g: &GeoGraph) -> Vec<Vec<(usize, f64)>> {
    (0..g.num_nodes())
        .map(|i| {
            let (n, d) = g.neighbors(i);
            n.iter().copied().zip(d.iter().copied()).collect()
        })
        .collect()
}

#[test]
fn geo_propagate_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..INSTANCES {
        let n = rng.gen_range(2..=10);
        let d = rng.gen_range(1..=4);
        let depth = rng.gen_range(0..=3);
        let (_, graph) = random_graph(&mut rng, n);
        let x = mat(&mut rng, n, d, 1.0);
        let layers: Vec<(Mat, Mat)> = (0..depth).map(|_| (mat(&mut rng, d, d, 1.0), mat(&mut rng, d, d, 1.0))).collect();
        let node_set: Vec<usize> = (0..rng.gen_range(1..=n)).map(|_| rng.gen_range(0..n)).collect();

        let want = oracle::geo_propagate(&x, &oracle_adjacency(&graph), &layers);
        let mut tape = Tape::new();
        let xv = tape.constant(tensor(&x)).unwrap();
        let lv: Vec<GeoLayer<_>> = layers
            .iter()
            .map(|(w1, w2)| GeoLayer {
                w_message: tape.constant(tensor(w1)).unwrap(),
                w_interaction: tape.constant(tensor(w2)).unwrap(),
            })
            .collect();
        let h = geo_propagate(&mut tape, xv, &lv, &graph, &node_set).unwrap();
        let expected: Vec<Vec<f64>> = node_set.iter().map(|&v| want[v].clone()).collect();
        assert_rows_close(tape.value(h), &expected, "geo");
    }
}

#[test]
fn geo_graph_matches_brute_force_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..INSTANCES {
        let n = rng.gen_range(2..=30);
        let (coords, graph) = random_graph(&mut rng, n);
        let brute = oracle::brute_force_edges(&coords, 1.0);
        for (i, expected) in brute.iter().enumerate() {
            let (nbrs, dists) = graph.neighbors(i);
            let want: Vec<usize> = expected.iter().map(|e| e.0).collect();
            assert_eq!(nbrs, want.as_slice(), "node {i}");
            for (got, e) in dists.iter().zip(expected) {
                assert!((got - e.1).abs() < 1e-9);
            }
        }
    }
}

fn ggnn_weights(rng: &mut ChaCha8Rng, d: usize) -> GgnnWeights {
    GgnnWeights {
        w_aggregate: mat(rng, 2 * d, d, 1.0),
        bias: mat(rng, 1, d, 1.0).remove(0),
        w_update: mat(rng, d, d, 1.0),
        u_update: mat(rng, d, d, 1.0),
        w_reset: mat(rng, d, d, 1.0),
        u_reset: mat(rng, d, d, 1.0),
        w_candidate: mat(rng, d, d, 1.0),
        u_candidate: mat(rng, d, d, 1.0),
    }
}

#[test]
fn ggnn_matches_step_by_step_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..INSTANCES {
        let num_pois = 6;
        let d = rng.gen_range(1..=4);
        let steps = rng.gen_range(1..=3);
        let x = mat(&mut rng, num_pois, d, 1.0);
        let w = ggnn_weights(&mut rng, d);
        let contexts: Vec<Vec<usize>> = (0..rng.gen_range(1..=3))
            .map(|_| (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..num_pois)).collect())
            .collect();

        let mut tape = Tape::new();
        let c = |t: &mut Tape, m: &Mat| t.constant(tensor(m)).unwrap();
        let params = Ggnn {
            w_aggregate: c(&mut tape, &w.w_aggregate),
            bias: c(&mut tape, &vec![w.bias.clone()]),
            w_update: c(&mut tape, &w.w_update),
            u_update: c(&mut tape, &w.u_update),
            w_reset: c(&mut tape, &w.w_reset),
            u_reset: c(&mut tape, &w.u_reset),
            w_candidate: c(&mut tape, &w.w_candidate),
            u_candidate: c(&mut tape, &w.u_candidate),
        };
        let xv = c(&mut tape, &x);
        let refs: Vec<&[usize]> = contexts.iter().map(Vec::as_slice).collect();
        let sessions = SessionBatch::new(&refs).unwrap();
        let h = ggnn_propagate(&mut tape, xv, &params, &sessions, steps).unwrap();
        let got = tape.value(h);

        let positions = sessions.position_rows();
        let mut pos = 0;
        for ctx in &contexts {
            let s = oracle::session(ctx);
            let xs: Mat = s.nodes.iter().map(|&v| x[v].clone()).collect();
            let states = oracle::ggnn(&xs, &s.in_matrix, &s.out_matrix, &w, steps);
            for &a in &s.alias {
                let row = got.row(positions[pos]);
                for k in 0..d {
                    assert!((row[k] - states[a][k]).abs() <= TOL, "{} vs {}", row[k], states[a][k]);
                }
                pos += 1;
            }
        }
    }
}

#[test]
fn attention_matches_manual_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..INSTANCES {
        let d = rng.gen_range(1..=5);
        let num_keys = rng.gen_range(1..=6);
        let keys = mat(&mut rng, num_keys, d, 1.0);
        let num_queries = rng.gen_range(1..=3);
        let queries = mat(&mut rng, num_queries, d, 1.0);
        let alpha = mat(&mut rng, d, 1, 1.0);
        let q = mat(&mut rng, d, d, 1.0);
        let k = mat(&mut rng, d, d, 1.0);
        let plan_keys: Vec<Vec<usize>> = queries
            .iter()
            .map(|_| (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..num_keys)).collect())
            .collect();

        let mut tape = Tape::new();
        let attn = Attention {
            alpha: tape.constant(tensor(&alpha)).unwrap(),
            query: tape.constant(tensor(&q)).unwrap(),
            key: tape.constant(tensor(&k)).unwrap(),
        };
        let qv = tape.constant(tensor(&queries)).unwrap();
        let kv = tape.constant(tensor(&keys)).unwrap();
        let plan = AttentionPlan::new(&plan_keys).unwrap();
        let e = soft_attention(&mut tape, qv, kv, &attn, &plan).unwrap();

        let alpha_flat: Vec<f64> = alpha.iter().map(|r| r[0]).collect();
        let want: Vec<Vec<f64>> = queries
            .iter()
            .zip(&plan_keys)
            .map(|(query, idx)| {
                let ks: Mat = idx.iter().map(|&i| keys[i].clone()).collect();
                oracle::attention(query, &ks, &alpha_flat, &q, &k)
            })
            .collect();
        assert_rows_close(tape.value(e), &want, "attention");
    }
}

#[test]
fn single_key_attention_is_scaled_key() {
    let mut tape = Tape::new();
    let attn = Attention {
        alpha: tape.constant(Tensor::column_vector(vec![1.0, 2.0])).unwrap(),
        query: tape.constant(Tensor::identity(2)).unwrap(),
        key: tape.constant(Tensor::identity(2)).unwrap(),
    };
    let q = tape.constant(Tensor::row_vector(vec![0.0, 0.0])).unwrap();
    let k = tape.constant(Tensor::row_vector(vec![0.0, 3.0])).unwrap();
    let plan = AttentionPlan::new(&[vec![0]]).unwrap();
    let e = soft_attention(&mut tape, q, k, &attn, &plan).unwrap();
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    let w = s(0.0) + 2.0 * s(3.0);
    assert_eq!(tape.value(e).row(0), &[0.0, 3.0 * w]);
}

#[test]
fn proxies_match_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..INSTANCES {
        let n = rng.gen_range(2..=12);
        let d = rng.gen_range(1..=4);
        let (_, graph) = random_graph(&mut rng, n);
        let x = mat(&mut rng, n, d, 1.0);
        let contexts: Vec<Vec<usize>> = (0..rng.gen_range(1..=3))
            .map(|_| (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..n)).collect())
            .collect();
        let refs: Vec<&[usize]> = contexts.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(tensor(&x)).unwrap();
        let (pg, ps) = proxies(&mut tape, xv, &refs, &graph).unwrap();
        let adj = oracle_adjacency(&graph);
        let (want_g, want_s): (Vec<_>, Vec<_>) = contexts.iter().map(|c| oracle::proxies(c, &adj, &x)).unzip();
        assert_rows_close(tape.value(pg), &want_g, "p_geo");
        assert_rows_close(tape.value(ps), &want_s, "p_seq");
    }
}

#[test]
fn contrastive_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..INSTANCES {
        let d = rng.gen_range(1..=5);
        let v = mat(&mut rng, 4, d, 2.0);
        let mut tape = Tape::new();
        let vars: Vec<_> = v.iter().map(|r| tape.constant(Tensor::row_vector(r.clone())).unwrap()).collect();
        let l = contrastive_loss(&mut tape, vars[0], vars[1], vars[2], vars[3], true, true).unwrap();
        let want = oracle::contrastive(&v[0], &v[1], &v[2], &v[3]);
        assert!((tape.value(l).item() - want).abs() <= TOL);
        assert!(tape.value(l).item() > 0.0);
    }
}

#[test]
fn auc_matches_pair_counting_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..INSTANCES {
        let n = rng.gen_range(2..=200);
        // coarse scores force plenty of ties
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..12u8)) / 11.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        assert_eq!(auc(&scores, &labels).unwrap(), oracle::auc_pairs(&scores, &labels));
    }
}
