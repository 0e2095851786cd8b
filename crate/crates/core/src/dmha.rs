//! The DMHA model.
//!
//! Acoustic and text frames are stacked into one sequence `X ∈ R^{T×D}`
//! (`T = T1 + T2`) and passed through a first attention layer:
//!
//! - standard: `concat(head_1..head_H) · W^O` with
//!   `head_j = softmax(X W_j^Q (X W_j^K)ᵀ / √D) · X W_j^V`, emitting `T` vectors
//!   of width `D`;
//! - sub-vector: each frame is split into `H` chunks of width `D/H` and chunk
//!   sequence `j` is pooled with its own trainable query `u_j` (scale
//!   `1/√(D/H)`), emitting `H` vectors of width `D/H`.
//!
//! A second attention pooling with query `u′` collapses those `L` vectors into
//! the utterance vector `c ∈ R^C`, which feeds the classifier: an input layer
//! and `hidden_layers` hidden layers (dense → layer norm → GELU → dropout),
//! then a dense output layer and a softmax over the 8 classes.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{aggregate_layers, FeatureRecord};
use crate::graph::{Graph, Var};
use crate::tensor::{ParamId, ParamStore, Scalar, Tensor};
use crate::NUM_CLASSES;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Standard,
    Subvector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: AttentionVariant,
    pub heads: usize,
    /// Feature width `D` shared by both modalities.
    pub dim: usize,
    /// Number of acoustic extractor layers being aggregated.
    pub acoustic_layers: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::Subvector,
            heads: 4,
            dim: 1024,
            acoustic_layers: 24,
            hidden_width: 512,
            hidden_layers: 4,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.acoustic_layers == 0 || self.hidden_width == 0 {
            return Err(Error::invalid("heads, dim, acoustic_layers and hidden_width must be positive"));
        }
        if self.variant == AttentionVariant::Subvector && self.dim % self.heads != 0 {
            return Err(Error::invalid(alloc::format!(
                "sub-vector attention needs heads ({}) to divide dim ({})",
                self.heads,
                self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(alloc::format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Width `C` of the pooled utterance vector.
    pub fn pooled_dim(&self) -> usize {
        match self.variant {
            AttentionVariant::Standard => self.dim,
            AttentionVariant::Subvector => self.dim / self.heads,
        }
    }

    /// Closed-form learnable-parameter count of the first attention layer.
    pub fn first_layer_param_formula(&self) -> usize {
        let (h, d) = (self.heads, self.dim);
        match self.variant {
            AttentionVariant::Standard => h * 3 * d * d + h * d * d,
            AttentionVariant::Subvector => h * (d / h),
        }
    }
}

/// Learnable-parameter counts per model component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub aggregator: usize,
    pub first_layer: usize,
    pub pooling: usize,
    pub classifier: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
enum FirstLayer {
    Standard {
        query: Vec<ParamId>,
        key: Vec<ParamId>,
        value: Vec<ParamId>,
        output: ParamId,
    },
    Subvector {
        queries: Vec<ParamId>,
    },
}

#[derive(Clone, Copy, Debug)]
struct DenseBlock {
    weight: ParamId,
    bias: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    layer_logits: ParamId,
    first: FirstLayer,
    pool_query: ParamId,
    blocks: Vec<DenseBlock>,
    out_weight: ParamId,
    out_bias: ParamId,
}

/// Per-head projections of the standard first layer inside one graph.
#[derive(Clone, Debug)]
pub struct StandardHeads {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub output: Var,
}

#[derive(Clone, Debug)]
enum BoundFirst {
    Standard(StandardHeads),
    Subvector(Vec<Var>),
}

/// Model parameters registered in one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    layer_logits: Var,
    first: BoundFirst,
    pool_query: Var,
    blocks: Vec<[Var; 4]>,
    out_weight: Var,
    out_bias: Var,
}

#[derive(Clone, Debug)]
pub struct DmhaModel<T = f32> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

fn uniform<T: Scalar, R: RngCore + ?Sized>(dims: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::of(rng.random_range(-bound..=bound)))
}

impl<T: Scalar> DmhaModel<T> {
    /// Fan-in uniform initialisation: `U(±1/√fan_in)` for matrices, `U(±1/√C)`
    /// for attention queries, zeros for biases and layer logits, unit layer
    /// norm gains.
    pub fn new<R: RngCore + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, &mut |dims, fan_in| uniform(dims, 1.0 / libm::sqrt(fan_in as f64), rng))
    }

    /// Every weight and query zero; layer norm gains one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, &mut |dims, _| Tensor::zeros(dims))
    }

    fn build(config: ModelConfig, init: &mut dyn FnMut(&[usize], usize) -> Tensor<T>) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.dim, config.heads);
        let mut params = ParamStore::new();
        let layer_logits = params.add("agg.logits", Tensor::zeros(&[config.acoustic_layers]));
        let first = match config.variant {
            AttentionVariant::Standard => {
                let mut proj = |kind: &str| -> Vec<ParamId> {
                    (0..h).map(|j| params.add(alloc::format!("mha.{kind}.{j}"), init(&[d, d], d))).collect()
                };
                let query = proj("wq");
                let key = proj("wk");
                let value = proj("wv");
                let output = params.add("mha.wo", init(&[h * d, d], h * d));
                FirstLayer::Standard {
                    query,
                    key,
                    value,
                    output,
                }
            }
            AttentionVariant::Subvector => {
                let dh = d / h;
                FirstLayer::Subvector {
                    queries: (0..h).map(|j| params.add(alloc::format!("mha.u.{j}"), init(&[dh], dh))).collect(),
                }
            }
        };
        let c = config.pooled_dim();
        let pool_query = params.add("pool.u", init(&[c], c));
        let mut blocks = Vec::with_capacity(config.hidden_layers + 1);
        let mut width = c;
        for i in 0..=config.hidden_layers {
            let out = config.hidden_width;
            blocks.push(DenseBlock {
                weight: params.add(alloc::format!("cls.{i}.weight"), init(&[width, out], width)),
                bias: params.add(alloc::format!("cls.{i}.bias"), Tensor::zeros(&[out])),
                ln_gain: params.add(alloc::format!("cls.{i}.ln_gain"), Tensor::filled(&[out], T::one())),
                ln_bias: params.add(alloc::format!("cls.{i}.ln_bias"), Tensor::zeros(&[out])),
            });
            width = out;
        }
        let out_weight = params.add("cls.out.weight", init(&[width, NUM_CLASSES], width));
        let out_bias = params.add("cls.out.bias", Tensor::zeros(&[NUM_CLASSES]));
        Ok(Self {
            config,
            params,
            layout: Layout {
                layer_logits,
                first,
                pool_query,
                blocks,
                out_weight,
                out_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer_logits(&self) -> &Tensor<T> {
        self.params.get(self.layout.layer_logits)
    }

    pub fn param_count(&self) -> ParamCounts {
        let mut counts = ParamCounts {
            aggregator: 0,
            first_layer: 0,
            pooling: 0,
            classifier: 0,
            total: 0,
        };
        for p in self.params.iter() {
            let n = p.tensor.numel();
            let slot = match p.name.split('.').next() {
                Some("agg") => &mut counts.aggregator,
                Some("mha") => &mut counts.first_layer,
                Some("pool") => &mut counts.pooling,
                _ => &mut counts.classifier,
            };
            *slot += n;
            counts.total += n;
        }
        counts
    }

    /// Registers every parameter in `g` once.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound> {
        self.bind_store(g, &self.params)
    }

    /// Like [`bind`](Self::bind) but reads values from `p`, which must share
    /// this model's layout (e.g. a perturbed copy of its parameters).
    pub fn bind_store(&self, g: &mut Graph<T>, p: &ParamStore<T>) -> Result<Bound> {
        if p.len() != self.params.len() || p.iter().zip(self.params.iter()).any(|(a, b)| a.tensor.dims() != b.tensor.dims()) {
            return Err(Error::invalid("parameter store does not match the model layout"));
        }
        let l = &self.layout;
        let all = |ids: &[ParamId], g: &mut Graph<T>| -> Result<Vec<Var>> { ids.iter().map(|&id| g.param(p, id)).collect() };
        let first = match &l.first {
            FirstLayer::Standard {
                query,
                key,
                value,
                output,
            } => BoundFirst::Standard(StandardHeads {
                query: all(query, g)?,
                key: all(key, g)?,
                value: all(value, g)?,
                output: g.param(p, *output)?,
            }),
            FirstLayer::Subvector { queries } => BoundFirst::Subvector(all(queries, g)?),
        };
        let blocks = l
            .blocks
            .iter()
            .map(|b| Ok([g.param(p, b.weight)?, g.param(p, b.bias)?, g.param(p, b.ln_gain)?, g.param(p, b.ln_bias)?]))
            .collect::<Result<_>>()?;
        Ok(Bound {
            layer_logits: g.param(p, l.layer_logits)?,
            first,
            pool_query: g.param(p, l.pool_query)?,
            blocks,
            out_weight: g.param(p, l.out_weight)?,
            out_bias: g.param(p, l.out_bias)?,
        })
    }

    /// Learnable weighted sum of the record's acoustic layers → `[T1 × D]`.
    pub fn aggregate(&self, g: &mut Graph<T>, bound: &Bound, rec: &FeatureRecord) -> Result<Var> {
        let (layers, frames, dim) = (rec.layers(), rec.frames(), rec.dim());
        if layers != self.config.acoustic_layers {
            return Err(Error::shape(
                "aggregate_layers",
                alloc::format!("record has {layers} layers, model expects {}", self.config.acoustic_layers),
            ));
        }
        let flat = rec.acoustic.cast::<T>().reshape(&[layers, frames * dim])?;
        let acoustic = g.constant(&flat)?;
        aggregate_layers(g, acoustic, bound.layer_logits, frames, dim)
    }

    /// First attention layer on the configured variant.
    pub fn first_layer(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let (_, d) = g.rows_cols(x);
        if d != self.config.dim {
            return Err(Error::shape("first_layer", alloc::format!("input width {d}, model dim {}", self.config.dim)));
        }
        match &bound.first {
            BoundFirst::Standard(heads) => standard_mha(g, x, heads),
            BoundFirst::Subvector(queries) => subvector_mha(g, x, queries),
        }
    }

    /// Row-stacks acoustic `[T1 × D]` and text `[T2 × D]` frames, runs the first
    /// layer and pools the result into `[1 × C]`.
    pub fn fuse_and_pool(&self, g: &mut Graph<T>, bound: &Bound, acoustic: Var, text: Option<Var>) -> Result<Var> {
        let x = match text {
            Some(t) => {
                if g.rows_cols(t).1 != g.rows_cols(acoustic).1 {
                    return Err(Error::shape(
                        "fuse_and_pool",
                        alloc::format!("acoustic width {} vs text width {}", g.rows_cols(acoustic).1, g.rows_cols(t).1),
                    ));
                }
                g.concat_rows(&[acoustic, t])?
            }
            None => acoustic,
        };
        let first = self.first_layer(g, bound, x)?;
        attention_pool(g, first, bound.pool_query)
    }

    /// Utterance vector `[1 × C]` for one record.
    pub fn encode(&self, g: &mut Graph<T>, bound: &Bound, rec: &FeatureRecord) -> Result<Var> {
        let acoustic = self.aggregate(g, bound, rec)?;
        let text = match &rec.text {
            Some(t) => Some(g.constant(&t.cast::<T>())?),
            None => None,
        };
        self.fuse_and_pool(g, bound, acoustic, text)
    }

    /// Class probabilities `[B × 8]` for pooled vectors `c` of shape `[B × C]`.
    pub fn classify<R: RngCore + ?Sized>(&self, g: &mut Graph<T>, bound: &Bound, c: Var, training: bool, rng: &mut R) -> Result<Var> {
        let width = g.rows_cols(c).1;
        if width != self.config.pooled_dim() {
            return Err(Error::shape(
                "classify",
                alloc::format!("input width {width}, classifier expects {}", self.config.pooled_dim()),
            ));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let mut h = c;
        for &[w, b, gain, shift] in &bound.blocks {
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, b)?;
            let z = g.layer_norm(z, gain, shift, eps)?;
            let z = g.gelu(z)?;
            h = g.dropout(z, self.config.dropout, training, rng)?;
        }
        let logits = g.matmul(h, bound.out_weight)?;
        let logits = g.add_row(logits, bound.out_bias)?;
        g.softmax_rows(logits)
    }

    /// Probabilities `[B × 8]` for a batch of records.
    pub fn forward_batch<R: RngCore + ?Sized>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        records: &[&FeatureRecord],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let pooled = records.iter().map(|rec| self.encode(g, bound, rec)).collect::<Result<Vec<_>>>()?;
        let c = g.concat_rows(&pooled)?;
        self.classify(g, bound, c, training, rng)
    }

    /// Eval-mode class probabilities for every record.
    pub fn predict_proba(&self, records: &[FeatureRecord], batch_size: usize) -> Result<Vec<[f32; NUM_CLASSES]>> {
        let mut out = Vec::with_capacity(records.len());
        // dropout is off in eval mode; the stream is never drawn from
        let mut unused = crate::rng::stream(0, 0, 0);
        for chunk in records.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let bound = self.bind(&mut g)?;
            let refs: Vec<&FeatureRecord> = chunk.iter().collect();
            let probs = self.forward_batch(&mut g, &bound, &refs, false, &mut unused)?;
            for row in g.value(probs).chunks(NUM_CLASSES) {
                let mut p = [0.0f32; NUM_CLASSES];
                for (dst, &src) in p.iter_mut().zip(row) {
                    *dst = src.as_f64() as f32;
                }
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Named copies of every parameter, in registration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.cast::<f32>())).collect()
    }

    /// Overwrites parameters from named tensors. Every model parameter must be
    /// present with matching dims.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::invalid(alloc::format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::invalid(alloc::format!("unknown parameter `{name}`")))?;
            if self.params.get(id).dims() != t.dims() {
                return Err(Error::shape(
                    "load_named",
                    alloc::format!("`{name}` has dims {:?}, expected {:?}", t.dims(), self.params.get(id).dims()),
                ));
            }
            let dst = self.params.get_mut(id);
            for (d, &s) in dst.data_mut().iter_mut().zip(t.data()) {
                *d = T::of(s as f64);
            }
        }
        Ok(())
    }

    /// Same model with every parameter converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DmhaModel<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.add(p.name.clone(), p.tensor.cast::<U>());
        }
        DmhaModel {
            config: self.config.clone(),
            params,
            layout: self.layout.clone(),
        }
    }
}

/// Standard multi-head attention over `x: [T × D]`; output `[T × D]`.
/// Scores are scaled by `1/√D`.
pub fn standard_mha<T: Scalar>(g: &mut Graph<T>, x: Var, heads: &StandardHeads) -> Result<Var> {
    let (_, d) = g.rows_cols(x);
    let h = heads.query.len();
    if h == 0 || heads.key.len() != h || heads.value.len() != h {
        return Err(Error::invalid("standard attention needs the same positive number of Q/K/V projections"));
    }
    let inv_sqrt_d = T::one() / T::of_usize(d).sqrt();
    let mut outs = Vec::with_capacity(h);
    for j in 0..h {
        let q = g.matmul(x, heads.query[j])?;
        let k = g.matmul(x, heads.key[j])?;
        let v = g.matmul(x, heads.value[j])?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, inv_sqrt_d)?;
        let weights = g.softmax_rows(scores)?;
        outs.push(g.matmul(weights, v)?);
    }
    let cat = g.concat_cols(&outs)?;
    g.matmul(cat, heads.output)
}

/// Sub-vector multi-head attention over `x: [T × D]` with one query of width
/// `D/H` per head; output `[H × D/H]`.
pub fn subvector_mha<T: Scalar>(g: &mut Graph<T>, x: Var, queries: &[Var]) -> Result<Var> {
    let (_, d) = g.rows_cols(x);
    let h = queries.len();
    if h == 0 || d % h != 0 {
        return Err(Error::invalid(alloc::format!("{h} heads do not divide width {d}")));
    }
    let dh = d / h;
    let pooled = queries
        .iter()
        .enumerate()
        .map(|(j, &u)| {
            let chunk = g.slice_cols(x, j * dh, dh)?;
            attention_pool(g, chunk, u)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&pooled)
}

/// Dot-product attention pooling of `cin: [L × C]` with query `u: [C]`:
/// `w = softmax_l(c_lᵀu / √C)`, output `Σ_l w_l c_l` as `[1 × C]`.
pub fn attention_pool<T: Scalar>(g: &mut Graph<T>, cin: Var, query: Var) -> Result<Var> {
    let (_, c) = g.rows_cols(cin);
    if g.value(query).len() != c {
        return Err(Error::shape(
            "attention_pool",
            alloc::format!("query width {} vs input width {c}", g.value(query).len()),
        ));
    }
    let u = g.reshape(query, &[c, 1])?;
    let logits = g.matmul(cin, u)?;
    let logits = g.scale(logits, T::one() / T::of_usize(c).sqrt())?;
    let row = g.transpose(logits)?;
    let weights = g.softmax_rows(row)?;
    g.matmul(weights, cin)
}

/// Attention weights used by [`attention_pool`], for inspection.
pub fn attention_pool_weights<T: Scalar>(cin: &Tensor<T>, query: &[T]) -> Result<Vec<T>> {
    let (l, c) = cin.matrix_dims();
    if query.len() != c {
        return Err(Error::shape("attention_pool", "query width"));
    }
    let scale = T::one() / T::of_usize(c).sqrt();
    let mut w: Vec<T> = (0..l)
        .map(|i| cin.row(i).iter().zip(query).map(|(&a, &b)| a * b).sum::<T>() * scale)
        .collect();
    crate::tensor::kernels::softmax_in_place(&mut w);
    Ok(w)
}

impl Bound {
    pub fn standard_heads(&self) -> Option<&StandardHeads> {
        match &self.first {
            BoundFirst::Standard(h) => Some(h),
            BoundFirst::Subvector(_) => None,
        }
    }

    pub fn subvector_queries(&self) -> Option<&[Var]> {
        match &self.first {
            BoundFirst::Subvector(q) => Some(q),
            BoundFirst::Standard(_) => None,
        }
    }

    pub fn pool_query(&self) -> Var {
        self.pool_query
    }
}
