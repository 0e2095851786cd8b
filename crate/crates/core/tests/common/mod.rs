//! Independent reference implementations shared by integration tests.
//!
//! Everything here is plain f64 scalar loops over `Vec`s and never touches the
//! graph engine, so agreement with the library is meaningful. The acceptance
//! suite in the cli crate includes this file by path.
#![allow(dead_code)]

use std::f64::consts::PI;

use dmha_core::dmha::{attention_pool, standard_mha, subvector_mha};
use dmha_core::graph::Graph;
use dmha_core::rng::{purpose, stream, Rng as StreamRng};
use dmha_core::tensor::Tensor;
use dmha_core::{AttentionVariant, DmhaModel, ModelConfig};
use rand::Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x · W` for row-major `w` of shape `[x[0].len() × cols]`.
pub fn project(x: &Rows, w: &[f64], cols: usize) -> Rows {
    x.iter()
        .map(|row| (0..cols).map(|c| row.iter().enumerate().map(|(k, v)| v * w[k * cols + c]).sum()).collect())
        .collect()
}

pub fn pool_loop(rows: &Rows, u: &[f64]) -> Vec<f64> {
    let c = u.len();
    let scores: Vec<f64> = rows.iter().map(|r| dot(r, u) / (c as f64).sqrt()).collect();
    let w = softmax(&scores);
    (0..c).map(|k| rows.iter().zip(&w).map(|(r, wl)| wl * r[k]).sum()).collect()
}

pub struct StdParams {
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub o: Vec<f64>,
}

pub fn std_mha_loop(x: &Rows, p: &StdParams, d: usize) -> Rows {
    let h = p.q.len();
    let t = x.len();
    let mut cat = vec![Vec::with_capacity(h * d); t];
    for j in 0..h {
        let (q, k, v) = (project(x, &p.q[j], d), project(x, &p.k[j], d), project(x, &p.v[j], d));
        for i in 0..t {
            let scores: Vec<f64> = (0..t).map(|l| dot(&q[i], &k[l]) / (d as f64).sqrt()).collect();
            let w = softmax(&scores);
            for c in 0..d {
                cat[i].push((0..t).map(|l| w[l] * v[l][c]).sum());
            }
        }
    }
    project(&cat, &p.o, d)
}

pub fn subvector_loop(x: &Rows, us: &[Vec<f64>]) -> Rows {
    let dh = us[0].len();
    us.iter()
        .enumerate()
        .map(|(j, u)| {
            let chunk: Rows = x.iter().map(|r| r[j * dh..(j + 1) * dh].to_vec()).collect();
            pool_loop(&chunk, u)
        })
        .collect()
}

pub fn rows_of(t: &Tensor<f32>) -> Rows {
    let (r, c) = t.matrix_dims();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect()).collect()
}

pub fn random_matrix(r: &mut StreamRng, rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::from_fn(&[rows, cols], |_| r.random_range(-1.5f32..1.5))
}

pub fn param(model: &DmhaModel<f32>, name: &str) -> Vec<f64> {
    let id = model.params.find(name).unwrap_or_else(|| panic!("no param {name}"));
    model.params.get(id).data().iter().map(|&v| v as f64).collect()
}

pub fn std_params(model: &DmhaModel<f32>) -> StdParams {
    let h = model.config().heads;
    let per_head = |w: &str| (0..h).map(|j| param(model, &format!("mha.{w}.{j}"))).collect();
    StdParams { q: per_head("wq"), k: per_head("wk"), v: per_head("wv"), o: param(model, "mha.wo") }
}

pub fn queries(model: &DmhaModel<f32>) -> Vec<Vec<f64>> {
    (0..model.config().heads).map(|j| param(model, &format!("mha.u.{j}"))).collect()
}

/// Largest absolute difference; panics on a length mismatch.
pub fn max_abs_diff(got: &[f32], want: &Rows) -> f64 {
    let flat: Vec<f64> = want.iter().flatten().cloned().collect();
    assert_eq!(got.len(), flat.len(), "output length");
    got.iter().zip(&flat).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max)
}

pub fn random_model(r: &mut StreamRng, variant: AttentionVariant) -> DmhaModel<f32> {
    let heads = [1, 2, 4][r.random_range(0..3)];
    let dim = heads * r.random_range(1..4) * 2;
    let cfg = ModelConfig {
        variant,
        heads,
        dim,
        acoustic_layers: 1,
        hidden_width: 4,
        hidden_layers: 0,
        dropout: 0.0,
    };
    DmhaModel::new(cfg, r).unwrap()
}

// Each `*_max_err` runs `instances` random cases drawn from `seed` and
// returns the worst absolute deviation from the loop implementation.

pub fn attention_pool_max_err(seed: u64, instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = stream(seed, purpose::INIT, i);
        let (l, c) = (r.random_range(1..9), r.random_range(1..9));
        let x = random_matrix(&mut r, l, c);
        let u = random_matrix(&mut r, 1, c).reshape(&[c]).unwrap();
        let mut g = Graph::new();
        let (xv, uv) = (g.constant(&x).unwrap(), g.constant(&u).unwrap());
        let out = attention_pool(&mut g, xv, uv).unwrap();
        let want = pool_loop(&rows_of(&x), &u.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
        worst = worst.max(max_abs_diff(g.value(out), &vec![want]));
    }
    worst
}

pub fn standard_mha_max_err(seed: u64, instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = stream(seed, purpose::INIT, i);
        let model = random_model(&mut r, AttentionVariant::Standard);
        let d = model.config().dim;
        let t = r.random_range(1..7);
        let x = random_matrix(&mut r, t, d);
        let mut g = Graph::new();
        let bound = model.bind(&mut g).unwrap();
        let xv = g.constant(&x).unwrap();
        let out = standard_mha(&mut g, xv, bound.standard_heads().unwrap()).unwrap();
        worst = worst.max(max_abs_diff(g.value(out), &std_mha_loop(&rows_of(&x), &std_params(&model), d)));
    }
    worst
}

pub fn subvector_mha_max_err(seed: u64, instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = stream(seed, purpose::INIT, i);
        let model = random_model(&mut r, AttentionVariant::Subvector);
        let t = r.random_range(1..7);
        let x = random_matrix(&mut r, t, model.config().dim);
        let mut g = Graph::new();
        let bound = model.bind(&mut g).unwrap();
        let xv = g.constant(&x).unwrap();
        let out = subvector_mha(&mut g, xv, bound.subvector_queries().unwrap()).unwrap();
        worst = worst.max(max_abs_diff(g.value(out), &subvector_loop(&rows_of(&x), &queries(&model))));
    }
    worst
}

/// Alternates variants; every third instance has no text rows.
pub fn fuse_and_pool_max_err(seed: u64, instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = stream(seed, purpose::INIT, i);
        let variant = if i % 2 == 0 { AttentionVariant::Standard } else { AttentionVariant::Subvector };
        let model = random_model(&mut r, variant);
        let d = model.config().dim;
        let t1 = r.random_range(1..5);
        let acoustic = random_matrix(&mut r, t1, d);
        let t2 = r.random_range(1..4);
        let text = (i % 3 != 0).then(|| random_matrix(&mut r, t2, d));

        let mut g = Graph::new();
        let bound = model.bind(&mut g).unwrap();
        let av = g.constant(&acoustic).unwrap();
        let tv = text.as_ref().map(|t| g.constant(t).unwrap());
        let out = model.fuse_and_pool(&mut g, &bound, av, tv).unwrap();

        let mut x = rows_of(&acoustic);
        if let Some(t) = &text {
            x.extend(rows_of(t));
        }
        let first = match variant {
            AttentionVariant::Standard => std_mha_loop(&x, &std_params(&model), d),
            AttentionVariant::Subvector => subvector_loop(&x, &queries(&model)),
        };
        let want = pool_loop(&first, &param(&model, "pool.u"));
        worst = worst.max(max_abs_diff(g.value(out), &vec![want]));
    }
    worst
}

pub fn sine(freq: f64, rate: f64, n: usize) -> Vec<f32> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin() as f32).collect()
}

/// Frequency of the largest DFT magnitude, scanned at 0.25 Hz steps.
pub fn dominant_frequency(w: &[f32], rate: f64, lo: f64, hi: f64) -> f64 {
    let mut best = (0.0, lo);
    let mut f = lo;
    while f <= hi {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &x) in w.iter().enumerate() {
            let ph = 2.0 * PI * f * i as f64 / rate;
            re += x as f64 * ph.cos();
            im -= x as f64 * ph.sin();
        }
        let mag = re * re + im * im;
        if mag > best.0 {
            best = (mag, f);
        }
        f += 0.25;
    }
    best.1
}

pub fn power(w: &[f32]) -> f64 {
    w.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / w.len() as f64
}

/// Measured SNR in dB of `mixed` relative to the clean `signal`.
pub fn measured_snr(signal: &[f32], mixed: &[f32]) -> f64 {
    let residual: Vec<f32> = mixed.iter().zip(signal).map(|(m, s)| m - s).collect();
    10.0 * (power(signal) / power(&residual)).log10()
}
