//! Backprop versus central finite differences, op by op and end to end.

use dmha_core::features::aggregate_layers;
use dmha_core::gradcheck::{check_model, check_params, GroupError, STEP};
use dmha_core::graph::{Graph, Var};
use dmha_core::rng::{purpose, stream};
use dmha_core::tensor::{ParamId, ParamStore, Tensor};
use dmha_core::{AttentionVariant, Result};
use rand::Rng;

const TOL: f64 = 1e-4;

fn random(dims: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = stream(seed, purpose::INIT, 99);
    Tensor::from_fn(dims, |_| r.random_range(lo..hi))
}

/// Reduces `out` to a scalar through fixed random weights so no op sees a
/// trivially constant upstream gradient.
fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let dims = g.dims(out).to_vec();
    let w = g.constant(&random(&dims, -1.0, 1.0, 1234))?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn assert_close(report: &[GroupError]) {
    for group in report {
        assert!(group.max_rel_err < TOL, "{group:?}");
    }
}

/// Checks a unary op on a random 5×7 input drawn from `[lo, hi)`.
fn check_unary(lo: f64, hi: f64, op: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) {
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[5, 7], lo, hi, 1));
    let report = check_params(&mut store, STEP, |g, s| {
        let x = g.param(s, x)?;
        let y = op(g, x)?;
        project(g, y)
    })
    .unwrap();
    assert_close(&report);
}

fn check_binary(a_dims: &[usize], b_dims: &[usize], op: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>) {
    let mut store = ParamStore::new();
    let a = store.add("a", random(a_dims, -1.0, 1.0, 2));
    let b = store.add("b", random(b_dims, -1.0, 1.0, 3));
    let report = check_params(&mut store, STEP, |g, s| {
        let (a, b) = (g.param(s, a)?, g.param(s, b)?);
        let y = op(g, a, b)?;
        project(g, y)
    })
    .unwrap();
    assert_close(&report);
}

#[test]
fn matmul() {
    check_binary(&[5, 7], &[7, 3], |g, a, b| g.matmul(a, b));
}

#[test]
fn transpose() {
    check_unary(-1.0, 1.0, |g, x| g.transpose(x));
}

#[test]
fn add_and_mul() {
    check_binary(&[5, 7], &[5, 7], |g, a, b| g.add(a, b));
    check_binary(&[5, 7], &[5, 7], |g, a, b| g.mul(a, b));
}

#[test]
fn add_row_bias() {
    check_binary(&[5, 7], &[7], |g, a, b| g.add_row(a, b));
}

#[test]
fn affine() {
    check_unary(-1.0, 1.0, |g, x| g.affine(x, -0.7, 0.3));
}

#[test]
fn softmax_rows() {
    check_unary(-3.0, 3.0, |g, x| g.softmax_rows(x));
}

#[test]
fn layer_norm() {
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[5, 7], -2.0, 2.0, 4));
    let gain = store.add("gain", random(&[7], 0.5, 1.5, 5));
    let bias = store.add("bias", random(&[7], -0.5, 0.5, 6));
    let report = check_params(&mut store, STEP, |g, s| {
        let (x, gain, bias) = (g.param(s, x)?, g.param(s, gain)?, g.param(s, bias)?);
        let y = g.layer_norm(x, gain, bias, 1e-5)?;
        project(g, y)
    })
    .unwrap();
    assert_close(&report);
}

#[test]
fn gelu() {
    check_unary(-3.0, 3.0, |g, x| g.gelu(x));
}

#[test]
fn dropout_with_fixed_mask() {
    check_unary(-1.0, 1.0, |g, x| g.dropout(x, 0.3, true, &mut stream(5, purpose::DROPOUT, 0)));
}

#[test]
fn slice_and_concat() {
    check_unary(-1.0, 1.0, |g, x| g.slice_cols(x, 2, 3));
    check_binary(&[5, 7], &[2, 7], |g, a, b| g.concat_rows(&[a, b]));
    check_binary(&[5, 7], &[5, 3], |g, a, b| g.concat_cols(&[a, b, a]));
}

#[test]
fn reshape() {
    check_unary(-1.0, 1.0, |g, x| g.reshape(x, &[7, 5]));
}

#[test]
fn log_above_floor() {
    check_unary(0.1, 2.0, |g, x| g.log_clamped(x, 1e-12));
}

#[test]
fn powf() {
    check_unary(0.1, 2.0, |g, x| g.powf(x, 2.0));
    check_unary(0.1, 2.0, |g, x| g.powf(x, 0.5));
}

#[test]
fn reductions() {
    check_unary(-1.0, 1.0, |g, x| g.sum(x));
    check_unary(-1.0, 1.0, |g, x| g.mean(x));
}

#[test]
fn gather_rows() {
    check_unary(-1.0, 1.0, |g, x| g.gather_rows(x, &[0, 6, 3, 3, 1]));
}

#[test]
fn weighted_sum_gradient() {
    // loss = sum(W·x)
    let mut store = ParamStore::new();
    let w = store.add("w", random(&[4, 6], -1.0, 1.0, 7));
    let x = random(&[6, 1], -1.0, 1.0, 8);
    let report = check_params(&mut store, 1e-3, |g, s| {
        let w = g.param(s, w)?;
        let x = g.constant(&x)?;
        let y = g.matmul(w, x)?;
        g.sum(y)
    })
    .unwrap();
    assert_close(&report);
}

#[test]
fn reused_tensor_gradients_add() {
    check_unary(-1.0, 1.0, |g, x| {
        let sq = g.mul(x, x)?;
        g.add(sq, x)
    });
}

#[test]
fn aggregation_logits() {
    let mut store = ParamStore::new();
    let logits = store.add("logits", random(&[4], -1.0, 1.0, 9));
    let layers = random(&[4, 3 * 5], -1.0, 1.0, 10);
    let report = check_params(&mut store, STEP, |g, s| {
        let a = g.constant(&layers)?;
        let l = g.param(s, logits)?;
        let y = aggregate_layers(g, a, l, 3, 5)?;
        project(g, y)
    })
    .unwrap();
    assert_close(&report);
}

#[test]
fn end_to_end_both_variants() {
    for variant in [AttentionVariant::Standard, AttentionVariant::Subvector] {
        let report = check_model(variant, 0, false).unwrap();
        assert!(report.max_rel_err() < TOL, "{report:?}");
        assert!(report.groups.iter().all(|g| g.elements > 0));
    }
}

#[test]
fn stochastic_graph_is_refused() {
    assert!(check_model(AttentionVariant::Standard, 0, true).is_err());
}

#[test]
fn unused_param_is_reported_as_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store.add("used", random(&[3], -1.0, 1.0, 11));
    let _unused: ParamId = store.add("unused", random(&[2], -1.0, 1.0, 12));
    let report = check_params(&mut store, STEP, |g, s| {
        let x = g.param(s, used)?;
        g.sum(x)
    })
    .unwrap();
    assert_eq!(report[1].max_abs_diff, 0.0);
}
