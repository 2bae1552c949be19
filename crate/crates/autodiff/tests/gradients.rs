//! Finite-difference checks over the whole primitive set.

use disenpoi_autodiff::gradcheck::{analytic_gradient, max_relative_error, numeric_gradient};
use disenpoi_autodiff::{grad_check, Result, SparseMatrix, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POINTS: usize = 100;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

/// Reduces any tensor to a scalar through fixed random weights so every
/// output element contributes a distinct coefficient.
fn weighted_total(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(uniform(&mut rng, r, c, 0.5, 1.5))?;
    t.inner_product(y, w)
}

fn check_unary(name: &str, lo: f64, hi: f64, op: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut worst: f64 = 0.0;
    for i in 0..POINTS {
        let (r, c) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let p = uniform(&mut rng, r, c, lo, hi);
        let err = grad_check(
            |t, x| {
                let y = op(t, x)?;
                weighted_total(t, y, i as u64)
            },
            &p,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "{name}: max relative error {worst}");
}

#[test]
fn elementwise_primitives() {
    check_unary("sigmoid", -1.0, 1.0, |t, x| t.sigmoid(x));
    check_unary("tanh", -1.0, 1.0, |t, x| t.tanh(x));
    check_unary("leaky_relu", -1.0, 1.0, |t, x| t.leaky_relu(x));
    check_unary("softplus", -1.0, 1.0, |t, x| t.softplus(x));
    check_unary("log", 0.5, 1.5, |t, x| t.log(x));
    check_unary("clamp", -1.0, 1.0, |t, x| t.clamp(x, -0.5, 0.5));
    check_unary("scalar_mul", -1.0, 1.0, |t, x| t.scalar_mul(x, -2.5));
    check_unary("add_scalar", -1.0, 1.0, |t, x| t.add_scalar(x, 0.75));
}

#[test]
fn reductions_and_reshaping() {
    check_unary("sum_rows", -1.0, 1.0, |t, x| t.sum_rows(x));
    check_unary("mean_rows", -1.0, 1.0, |t, x| t.mean_rows(x));
    check_unary("sum_cols", -1.0, 1.0, |t, x| t.sum_cols(x));
    check_unary("slice_row", -1.0, 1.0, |t, x| {
        let r = t.shape(x).0 - 1;
        t.slice_row(x, r)
    });
    check_unary("gather_rows", -1.0, 1.0, |t, x| {
        let n = t.shape(x).0;
        t.gather_rows(x, vec![n - 1, 0, n - 1])
    });
    check_unary("concat_rows", -1.0, 1.0, |t, x| {
        let sq = t.mul(x, x)?;
        t.concat_rows(&[x, sq, x])
    });
    check_unary("concat_cols", -1.0, 1.0, |t, x| {
        let th = t.tanh(x)?;
        t.concat_cols(&[th, x])
    });
    check_unary("self_inner_product", -1.0, 1.0, |t, x| t.inner_product(x, x));
}

#[test]
fn binary_primitives_against_second_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..POINTS {
        let (n, k, m) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let a = uniform(&mut rng, n, k, -1.0, 1.0);
        let b = uniform(&mut rng, k, m, -1.0, 1.0);
        let same = uniform(&mut rng, n, k, -1.0, 1.0);
        let row = uniform(&mut rng, 1, k, -1.0, 1.0);
        let col = uniform(&mut rng, n, 1, -1.0, 1.0);
        let seed = i as u64;

        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>, Tensor)> = vec![
            ("matmul_left", Box::new(|t: &mut Tape, x| { let bv = t.constant(b.clone())?; t.matmul(x, bv) }), a.clone()),
            ("matmul_right", Box::new(|t: &mut Tape, x| { let av = t.constant(a.clone())?; t.matmul(av, x) }), b.clone()),
            ("add", Box::new(|t: &mut Tape, x| { let o = t.constant(same.clone())?; t.add(o, x) }), a.clone()),
            ("add_broadcast", Box::new(|t: &mut Tape, x| { let o = t.constant(same.clone())?; t.add(o, x) }), row.clone()),
            ("sub_left", Box::new(|t: &mut Tape, x| { let o = t.constant(same.clone())?; t.sub(x, o) }), a.clone()),
            ("sub_broadcast", Box::new(|t: &mut Tape, x| { let o = t.constant(same.clone())?; t.sub(o, x) }), row.clone()),
            ("mul", Box::new(|t: &mut Tape, x| { let o = t.constant(same.clone())?; t.mul(x, o) }), a.clone()),
            ("scale_rows_matrix", Box::new(|t: &mut Tape, x| { let w = t.constant(col.clone())?; t.scale_rows(x, w) }), a.clone()),
            ("scale_rows_weights", Box::new(|t: &mut Tape, x| { let o = t.constant(same.clone())?; t.scale_rows(o, x) }), col.clone()),
            ("inner_product", Box::new(|t: &mut Tape, x| { let o = t.constant(same.clone())?; t.inner_product(o, x) }), a.clone()),
        ];
        for (name, f, point) in cases {
            let err = grad_check(
                |t, x| {
                    let y = f(t, x)?;
                    if t.shape(y) == (1, 1) {
                        Ok(y)
                    } else {
                        weighted_total(t, y, seed)
                    }
                },
                &point,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} at point {i}: {err}");
        }
    }
}

#[test]
fn sparse_product_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..POINTS {
        let (rows, cols, width) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=4));
        let entries: Vec<Vec<(usize, f64)>> = (0..rows)
            .map(|_| {
                (0..rng.gen_range(0..=3))
                    .map(|_| (rng.gen_range(0..cols), rng.gen_range(-1.0..1.0)))
                    .collect()
            })
            .collect();
        let sp = SparseMatrix::from_rows(cols, &entries).unwrap();
        let p = uniform(&mut rng, cols, width, -1.0, 1.0);
        let err = grad_check(
            |t, x| {
                let y = t.spmm(sp.clone(), x)?;
                let y = t.tanh(y)?;
                weighted_total(t, y, i as u64)
            },
            &p,
        )
        .unwrap();
        assert!(err < 1e-4, "spmm point {i}: {err}");
    }
}

/// A random composite of primitives shaped like one attention + GRU step.
fn composite(t: &mut Tape, x: Var, w: &Tensor, v: &Tensor) -> Result<Var> {
    let wv = t.constant(w.clone())?;
    let vv = t.constant(v.clone())?;
    let a = t.matmul(x, wv)?;
    let z = t.sigmoid(a)?;
    let h = t.tanh(x)?;
    let gated = t.mul(z, h)?;
    let mixed = t.sub(h, gated)?;
    let lr = t.leaky_relu(mixed)?;
    let weights = t.matmul(lr, vv)?;
    let pooled = t.scale_rows(h, weights)?;
    let summed = t.sum_rows(pooled)?;
    let sp = t.softplus(summed)?;
    let m = t.mean_rows(sp)?;
    let total = t.sum_cols(m)?;
    let c = t.clamp(total, -1e3, 1e3)?;
    t.add_scalar(c, 1.0)
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..POINTS {
        let d = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=8);
        let x = uniform(&mut rng, n, d, -1.0, 1.0);
        let w = uniform(&mut rng, d, d, -1.0, 1.0);
        let v = uniform(&mut rng, d, 1, -1.0, 1.0);
        let f = |t: &mut Tape, xv: Var| composite(t, xv, &w, &v);
        let analytic = analytic_gradient(&f, &x).unwrap();
        let numeric = numeric_gradient(&f, &x, 1e-5).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "composite: {err}");
    }
}

#[test]
fn repeated_passes_give_identical_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = uniform(&mut rng, 4, 3, -1.0, 1.0);
    let w = uniform(&mut rng, 3, 3, -1.0, 1.0);
    let v = uniform(&mut rng, 3, 1, -1.0, 1.0);
    let f = |t: &mut Tape, xv: Var| composite(t, xv, &w, &v);
    let first = analytic_gradient(&f, &x).unwrap();
    let second = analytic_gradient(&f, &x).unwrap();
    assert_eq!(first, second);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, 3, 3, -1.0, 1.0);
        let w = uniform(&mut rng, 3, 3, -1.0, 1.0);
        let f = |t: &mut Tape, xv: Var| -> Result<Var> {
            let s = t.sigmoid(xv)?;
            let sq = t.mul(s, s)?;
            let r = t.sum_rows(sq)?;
            t.sum_cols(r)
        };
        let g = |t: &mut Tape, xv: Var| -> Result<Var> {
            let wv = t.constant(w.clone())?;
            let p = t.matmul(xv, wv)?;
            let th = t.tanh(p)?;
            let r = t.sum_rows(th)?;
            t.sum_cols(r)
        };
        let combo = |t: &mut Tape, xv: Var| -> Result<Var> {
            let fv = f(t, xv)?;
            let gv = g(t, xv)?;
            let fa = t.scalar_mul(fv, a)?;
            let gb = t.scalar_mul(gv, b)?;
            t.add(fa, gb)
        };
        let gf = analytic_gradient(&f, &x).unwrap();
        let gg = analytic_gradient(&g, &x).unwrap();
        let gc = analytic_gradient(&combo, &x).unwrap();
        let expected = gf.zip_map(&gg, |p, q| a * p + b * q);
        prop_assert!(gc.max_abs_diff(&expected) < 1e-10);
    }
}
