//! The shared-weight transformer decoder.
//!
//! One layer runs, in order: type adapters and type embeddings, shared
//! self-attention over all queries, base deformable sampling on both BEV
//! grids, QSwap (BEV only), perspective-view sampling, cross-attention
//! aggregation, QMix, the MLP, and the detection head whose box center
//! becomes the query's next position. The same [`DecoderWeights`] instance
//! drives every layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, GridKind, PvFeatureMap};
use crate::kernel::{
    dot, multi_head_attention, relu, sigmoid, softmax, AttentionMask, LayerNorm, Linear, Matrix, MhaWeights,
};
use crate::qinit::{BoxState, QuerySet, QueryType};
use crate::qmix::{attention_type_stats, build_cross_type_mask, QmixWeights, TypeAttentionStats};
use crate::qswap::{
    base_points, normalize_sample_scores, predict_base_samples, select_neighbors, swap_samples, QSwapConfig,
    SampleOrigin, SamplePoint, SamplingHead,
};
use crate::scalar::Real;
use crate::scene::{project_to_view, CameraRig};

/// Where the cross-type attention step sits in a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QmixPlacement {
    /// After aggregation (the default QMix).
    PostAgg,
    /// Between shared self-attention and sampling.
    PreAgg,
    /// An extra unmasked self-attention after aggregation, no QMix.
    PostSelf,
    /// Extra unmasked self-attention followed by QMix, both after aggregation.
    PostSelfCross,
}

impl QmixPlacement {
    pub const ALL: [QmixPlacement; 4] = [
        QmixPlacement::PreAgg,
        QmixPlacement::PostSelf,
        QmixPlacement::PostSelfCross,
        QmixPlacement::PostAgg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QmixPlacement::PostAgg => "post_agg",
            QmixPlacement::PreAgg => "pre_agg",
            QmixPlacement::PostSelf => "post_self",
            QmixPlacement::PostSelfCross => "post_self_cross",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub num_classes: usize,
    /// Perspective-view sampling points per visible camera.
    pub k_pv: usize,
    pub qswap: QSwapConfig,
    pub enable_qmix: bool,
    pub enable_qswap: bool,
    pub qmix_placement: QmixPlacement,
    /// Predicted centers are clipped to `[-extent, extent]` on every axis.
    pub extent: f64,
    /// Initial BEV offset range in meters.
    pub sample_range: f64,
    /// Initial PV offset range in pixels.
    pub pv_range: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            d: 256,
            heads: 8,
            num_classes: 10,
            k_pv: 4,
            qswap: QSwapConfig::default(),
            enable_qmix: true,
            enable_qswap: true,
            qmix_placement: QmixPlacement::PostAgg,
            extent: 51.2,
            sample_range: 4.0,
            pv_range: 16.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide model width {}",
                self.heads, self.d
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        if !(self.extent > 0.0) {
            return Err(Error::Config(format!("extent must be positive, got {}", self.extent)));
        }
        self.qswap.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationWeights<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    /// `d -> C` class logits.
    pub class: Linear<T>,
    /// `d -> (dx, dy, dz, log w, log l, log h, sin yaw, cos yaw, vx, vy)`.
    pub boxes: Linear<T>,
}

pub const BOX_OUTPUTS: usize = 10;

/// The single weight set shared by every decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights<T> {
    /// Indexed by [`QueryType::index`].
    pub adapters: [AdapterWeights<T>; 3],
    pub type_embeddings: [Vec<T>; 3],
    pub self_attention: MhaWeights<T>,
    pub self_norm: LayerNorm<T>,
    /// Indexed by [`GridKind::index`].
    pub bev_heads: [SamplingHead<T>; 2],
    pub pv_head: SamplingHead<T>,
    pub aggregation: AggregationWeights<T>,
    pub qmix: QmixWeights<T>,
    /// Extra unmasked attention used by the post-self placements.
    pub post_self: MhaWeights<T>,
    pub head: HeadWeights<T>,
}

fn visit_linear<T: Real>(name: &str, l: &Linear<T>, f: &mut dyn FnMut(&str, &[usize], &[T])) {
    f(&format!("{name}.weight"), &[l.weight.rows(), l.weight.cols()], l.weight.data());
    f(&format!("{name}.bias"), &[l.bias.len()], &l.bias);
}

fn visit_linear_mut<T: Real>(name: &str, l: &mut Linear<T>, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
    let shape = [l.weight.rows(), l.weight.cols()];
    f(&format!("{name}.weight"), &shape, l.weight.data_mut());
    let n = l.bias.len();
    f(&format!("{name}.bias"), &[n], &mut l.bias);
}

impl<T: Real> DecoderWeights<T> {
    /// All-zero weights (unit layer-norm gains, configured sampling ranges)
    /// with the shapes `config` requires.
    pub fn zeros(config: &DecoderConfig) -> Self {
        let d = config.d;
        let adapter = || AdapterWeights {
            hidden: Linear::zeros(d, d),
            out: Linear::zeros(d, d),
        };
        let bev_head = || SamplingHead {
            linear: Linear::zeros(d, 3 * config.qswap.k_base),
            range: T::of(config.sample_range),
        };
        Self {
            adapters: [adapter(), adapter(), adapter()],
            type_embeddings: [vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]],
            self_attention: MhaWeights::zeros(d, config.heads),
            self_norm: LayerNorm::new(d),
            bev_heads: [bev_head(), bev_head()],
            pv_head: SamplingHead {
                linear: Linear::zeros(d, 3 * config.k_pv),
                range: T::of(config.pv_range),
            },
            aggregation: AggregationWeights {
                query: Linear::zeros(d, d),
                key: Linear::zeros(d, d),
                value: Linear::zeros(d, d),
                output: Linear::zeros(d, d),
            },
            qmix: QmixWeights {
                attention: MhaWeights::zeros(d, config.heads),
                ffn: crate::qmix::FeedForward::zeros(d),
            },
            post_self: MhaWeights::zeros(d, config.heads),
            head: HeadWeights {
                class: Linear::zeros(d, config.num_classes),
                boxes: Linear::zeros(d, BOX_OUTPUTS),
            },
        }
    }

    /// Visits every tensor in canonical order with its name and shape.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for t in QueryType::ALL {
            let a = &self.adapters[t.index()];
            visit_linear(&format!("adapter.{}.hidden", t.name()), &a.hidden, f);
            visit_linear(&format!("adapter.{}.out", t.name()), &a.out, f);
        }
        for t in QueryType::ALL {
            let e = &self.type_embeddings[t.index()];
            f(&format!("type_embedding.{}", t.name()), &[e.len()], e);
        }
        visit_mha("self_attention", &self.self_attention, f);
        f("self_norm.gamma", &[self.self_norm.gamma.len()], &self.self_norm.gamma);
        f("self_norm.beta", &[self.self_norm.beta.len()], &self.self_norm.beta);
        for g in GridKind::ALL {
            let h = &self.bev_heads[g.index()];
            visit_linear(&format!("sampling.{}", g.name()), &h.linear, f);
            f(&format!("sampling.{}.range", g.name()), &[1], std::slice::from_ref(&h.range));
        }
        visit_linear("sampling.pv", &self.pv_head.linear, f);
        f("sampling.pv.range", &[1], std::slice::from_ref(&self.pv_head.range));
        let agg = &self.aggregation;
        visit_linear("aggregation.query", &agg.query, f);
        visit_linear("aggregation.key", &agg.key, f);
        visit_linear("aggregation.value", &agg.value, f);
        visit_linear("aggregation.output", &agg.output, f);
        visit_mha("qmix.attention", &self.qmix.attention, f);
        let ffn = &self.qmix.ffn;
        f("mlp.norm.gamma", &[ffn.norm.gamma.len()], &ffn.norm.gamma);
        f("mlp.norm.beta", &[ffn.norm.beta.len()], &ffn.norm.beta);
        visit_linear("mlp.expand", &ffn.expand, f);
        visit_linear("mlp.contract", &ffn.contract, f);
        visit_mha("post_self", &self.post_self, f);
        visit_linear("head.class", &self.head.class, f);
        visit_linear("head.boxes", &self.head.boxes, f);
    }

    /// Mutable counterpart of [`DecoderWeights::visit`], same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for t in QueryType::ALL {
            let a = &mut self.adapters[t.index()];
            visit_linear_mut(&format!("adapter.{}.hidden", t.name()), &mut a.hidden, f);
            visit_linear_mut(&format!("adapter.{}.out", t.name()), &mut a.out, f);
        }
        for t in QueryType::ALL {
            let e = &mut self.type_embeddings[t.index()];
            let n = e.len();
            f(&format!("type_embedding.{}", t.name()), &[n], e);
        }
        visit_mha_mut("self_attention", &mut self.self_attention, f);
        let n = self.self_norm.gamma.len();
        f("self_norm.gamma", &[n], &mut self.self_norm.gamma);
        f("self_norm.beta", &[n], &mut self.self_norm.beta);
        for g in GridKind::ALL {
            let h = &mut self.bev_heads[g.index()];
            visit_linear_mut(&format!("sampling.{}", g.name()), &mut h.linear, f);
            f(&format!("sampling.{}.range", g.name()), &[1], std::slice::from_mut(&mut h.range));
        }
        visit_linear_mut("sampling.pv", &mut self.pv_head.linear, f);
        f("sampling.pv.range", &[1], std::slice::from_mut(&mut self.pv_head.range));
        let agg = &mut self.aggregation;
        visit_linear_mut("aggregation.query", &mut agg.query, f);
        visit_linear_mut("aggregation.key", &mut agg.key, f);
        visit_linear_mut("aggregation.value", &mut agg.value, f);
        visit_linear_mut("aggregation.output", &mut agg.output, f);
        visit_mha_mut("qmix.attention", &mut self.qmix.attention, f);
        let ffn = &mut self.qmix.ffn;
        let n = ffn.norm.gamma.len();
        f("mlp.norm.gamma", &[n], &mut ffn.norm.gamma);
        f("mlp.norm.beta", &[n], &mut ffn.norm.beta);
        visit_linear_mut("mlp.expand", &mut ffn.expand, f);
        visit_linear_mut("mlp.contract", &mut ffn.contract, f);
        visit_mha_mut("post_self", &mut self.post_self, f);
        visit_linear_mut("head.class", &mut self.head.class, f);
        visit_linear_mut("head.boxes", &mut self.head.boxes, f);
    }

    /// `(name, shape)` of every tensor, canonical order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        self.visit(&mut |name, shape, _| specs.push((name.to_string(), shape.to_vec())));
        specs
    }

    /// Checks that every tensor has the shape `config` implies and that all
    /// values are finite.
    pub fn check(&self, config: &DecoderConfig) -> Result<()> {
        let expect = Self::zeros(config).tensor_specs();
        let got = self.tensor_specs();
        if expect != got {
            let diff = expect
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{} {:?} vs {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("{} tensors vs {}", expect.len(), got.len()));
            return Err(Error::Config(format!("weights do not match decoder config: {diff}")));
        }
        if self.self_attention.heads != config.heads
            || self.qmix.attention.heads != config.heads
            || self.post_self.heads != config.heads
        {
            return Err(Error::Config("attention head count differs from config".into()));
        }
        let mut bad = None;
        self.visit(&mut |name, _, data| {
            if bad.is_none() && data.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(Error::Config(format!("tensor {name} has non-finite values"))),
            None => Ok(()),
        }
    }
}

fn visit_mha<T: Real>(name: &str, m: &MhaWeights<T>, f: &mut dyn FnMut(&str, &[usize], &[T])) {
    visit_linear(&format!("{name}.query"), &m.query, f);
    visit_linear(&format!("{name}.key"), &m.key, f);
    visit_linear(&format!("{name}.value"), &m.value, f);
    visit_linear(&format!("{name}.output"), &m.output, f);
}

fn visit_mha_mut<T: Real>(name: &str, m: &mut MhaWeights<T>, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
    visit_linear_mut(&format!("{name}.query"), &mut m.query, f);
    visit_linear_mut(&format!("{name}.key"), &mut m.key, f);
    visit_linear_mut(&format!("{name}.value"), &mut m.value, f);
    visit_linear_mut(&format!("{name}.output"), &mut m.output, f);
}

/// Rendered scene inputs consumed by the decoder.
#[derive(Clone, Debug)]
pub struct SceneFeatures<T> {
    pub img_bev: FeatureGrid<T>,
    pub rad_bev: FeatureGrid<T>,
    pub pv: Vec<PvFeatureMap<T>>,
    pub rig: CameraRig,
}

impl<T: Real> SceneFeatures<T> {
    pub fn grid(&self, kind: GridKind) -> &FeatureGrid<T> {
        match kind {
            GridKind::ImgBev => &self.img_bev,
            GridKind::RadBev => &self.rad_bev,
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        let widths = [self.img_bev.channels(), self.rad_bev.channels()]
            .into_iter()
            .chain(self.pv.iter().map(|m| m.channels()));
        if let Some(w) = widths.into_iter().find(|&w| w != d) {
            return Err(Error::Dimension(format!("feature map has {w} channels, decoder expects {d}")));
        }
        if self.pv.len() != self.rig.cameras.len() {
            return Err(Error::Dimension(format!(
                "{} perspective maps for {} cameras",
                self.pv.len(),
                self.rig.cameras.len()
            )));
        }
        Ok(())
    }
}

/// Residual two-layer adapter per query type, then the type embedding:
/// `q + out_t(relu(hidden_t(q))) + e_t`.
pub fn apply_type_adapter<T: Real>(
    queries: &Matrix<T>,
    types: &[QueryType],
    weights: &DecoderWeights<T>,
) -> Result<Matrix<T>> {
    if types.len() != queries.rows() {
        return Err(Error::Dimension(format!("{} types for {} queries", types.len(), queries.rows())));
    }
    let mut out = queries.clone();
    for t in QueryType::ALL {
        let rows: Vec<usize> = (0..types.len()).filter(|&i| types[i] == t).collect();
        if rows.is_empty() {
            continue;
        }
        let a = &weights.adapters[t.index()];
        let mut h = a.hidden.forward_rows(&queries.select_rows(&rows))?;
        h.data_mut().iter_mut().for_each(|v| *v = relu(*v));
        let delta = a.out.forward_rows(&h)?;
        let emb = &weights.type_embeddings[t.index()];
        for (k, &i) in rows.iter().enumerate() {
            for ((o, &dv), &e) in out.row_mut(i).iter_mut().zip(delta.row(k)).zip(emb) {
                *o += dv + e;
            }
        }
    }
    Ok(out)
}

/// Sinusoidal encoding of a 3D position into `d` channels. Channel `j`
/// encodes axis `j % 3` at frequency band `(j / 3) / 2`, sine on even
/// `j / 3` and cosine on odd.
pub fn positional_encoding<T: Real>(p: [T; 3], d: usize) -> Vec<T> {
    let per_axis = d.div_ceil(3).max(1);
    (0..d)
        .map(|j| {
            let band = j / 3;
            let exponent = T::of(2.0 * (band / 2) as f64 / per_axis as f64);
            let arg = p[j % 3] / T::of(10_000.0).powf(exponent);
            if band % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

/// Unmasked self-attention over every query. Positional encodings are added
/// to queries and keys only; the result is `LN(x + MHA(x + pe, x + pe, x))`.
/// Returns the new embeddings and the head-averaged weights (the affinity).
pub fn shared_self_attention<T: Real>(
    queries: &Matrix<T>,
    positions: &[[T; 3]],
    weights: &DecoderWeights<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let (n, d) = queries.shape();
    if positions.len() != n {
        return Err(Error::Dimension(format!("{} positions for {n} queries", positions.len())));
    }
    let mut with_pos = queries.clone();
    for (i, p) in positions.iter().enumerate() {
        for (o, e) in with_pos.row_mut(i).iter_mut().zip(positional_encoding(*p, d)) {
            *o += e;
        }
    }
    let (attended, affinity) =
        multi_head_attention(&with_pos, &with_pos, queries, &AttentionMask::open(n, n), &weights.self_attention)?;
    let summed = queries.add(&attended)?;
    Ok((weights.self_norm.apply_rows(&summed), affinity))
}

/// Where a sampled token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    ImgBev,
    RadBev,
    Pv { camera: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token<T> {
    pub value: Vec<T>,
    /// Normalized sampling weight within the token's source set.
    pub weight: T,
    pub source: TokenSource,
}

/// Gathers one query's tokens: BEV tokens from the given (possibly swapped)
/// sample sets, and PV tokens from `K_pv` learned pixel offsets around the
/// query's projection in every camera that sees it. BEV weights are
/// normalized per grid set, PV weights jointly across cameras.
pub fn sample_features<T: Real>(
    embedding: &[T],
    position: [T; 3],
    sets: &[Vec<SamplePoint<T>>; 2],
    features: &SceneFeatures<T>,
    weights: &DecoderWeights<T>,
    k_pv: usize,
) -> Result<Vec<Token<T>>> {
    let mut tokens = Vec::new();
    for kind in GridKind::ALL {
        let set = &sets[kind.index()];
        let grid = features.grid(kind);
        let norm = normalize_sample_scores(set);
        let source = match kind {
            GridKind::ImgBev => TokenSource::ImgBev,
            GridKind::RadBev => TokenSource::RadBev,
        };
        for (p, w) in set.iter().zip(norm) {
            tokens.push(Token {
                value: grid.sample([position[0] + p.offset[0], position[1] + p.offset[1]]),
                weight: w,
                source,
            });
        }
    }
    if k_pv == 0 {
        return Ok(tokens);
    }
    let mut pv_tokens = Vec::new();
    let mut pv_scores = Vec::new();
    let mut offsets = None;
    for (cam_idx, cam) in features.rig.cameras.iter().enumerate() {
        let Some([u, v, _]) = project_to_view(position, cam) else {
            continue;
        };
        let offsets = match &offsets {
            Some(o) => o,
            None => offsets.insert(predict_base_samples(embedding, &weights.pv_head, k_pv)?),
        };
        for &([du, dv], score) in offsets.iter() {
            pv_tokens.push(Token {
                value: features.pv[cam_idx].sample_pixel(u + du, v + dv),
                weight: T::zero(),
                source: TokenSource::Pv { camera: cam_idx },
            });
            pv_scores.push(score);
        }
    }
    for (t, w) in pv_tokens.iter_mut().zip(softmax(&pv_scores)) {
        t.weight = w;
    }
    tokens.extend(pv_tokens);
    Ok(tokens)
}

/// Single-query cross-attention over its tokens:
/// `logit_t = <Wq q + bq, Wk x_t + bk> / sqrt(d) + ln w_t`, softmax over all
/// tokens, and `q + Wo (Wv sum_t a_t x_t + bv) + bo`. Queries without tokens
/// pass through unchanged.
pub fn aggregate_features<T: Real>(embedding: &[T], tokens: &[Token<T>], weights: &AggregationWeights<T>) -> Result<Vec<T>> {
    if tokens.is_empty() {
        return Ok(embedding.to_vec());
    }
    let q = weights.query.forward(embedding)?;
    let pulled = weights.key.transpose_apply(&q);
    let mixed = mix_tokens(&pulled, dot(&q, &weights.key.bias), tokens);
    let value = weights.value.forward(&mixed)?;
    let update = weights.output.forward(&value)?;
    Ok(embedding.iter().zip(update).map(|(&e, u)| e + u).collect())
}

/// Attention-weighted token sum for one query. `pulled = Wk^T q` and
/// `bias_term = <q, bk>` so that `<q, Wk x + bk> = <pulled, x> + bias_term`.
fn mix_tokens<T: Real>(pulled: &[T], bias_term: T, tokens: &[Token<T>]) -> Vec<T> {
    let d = pulled.len();
    let scale = T::one() / T::of_usize(d).sqrt();
    let logits: Vec<T> = tokens
        .iter()
        .map(|t| (dot(pulled, &t.value) + bias_term) * scale + t.weight.ln())
        .collect();
    let mut mixed = vec![T::zero(); d];
    for (t, a) in tokens.iter().zip(softmax(&logits)) {
        crate::kernel::axpy(a, &t.value, &mut mixed);
    }
    mixed
}

/// Batched [`aggregate_features`] over every query, gathering tokens one
/// query at a time.
fn aggregate_all<T: Real>(
    emb: &Matrix<T>,
    mut tokens_of: impl FnMut(usize) -> Result<Vec<Token<T>>>,
    weights: &AggregationWeights<T>,
) -> Result<Matrix<T>> {
    let (n, d) = emb.shape();
    let q = weights.query.forward_rows(emb)?;
    let key_t = Linear {
        weight: weights.key.weight.transpose(),
        bias: vec![T::zero(); d],
    };
    let pulled = key_t.forward_rows(&q)?;
    let mut mixed = Matrix::zeros(n, d);
    let mut has_tokens = vec![false; n];
    for i in 0..n {
        let tokens = tokens_of(i)?;
        if tokens.is_empty() {
            continue;
        }
        has_tokens[i] = true;
        let m = mix_tokens(pulled.row(i), dot(q.row(i), &weights.key.bias), &tokens);
        mixed.row_mut(i).copy_from_slice(&m);
    }
    let update = weights.output.forward_rows(&weights.value.forward_rows(&mixed)?)?;
    let mut out = emb.clone();
    for i in (0..n).filter(|&i| has_tokens[i]) {
        for (o, &u) in out.row_mut(i).iter_mut().zip(update.row(i)) {
            *o += u;
        }
    }
    Ok(out)
}

/// Decoded box for one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxPrediction<T> {
    pub center: [T; 3],
    /// `(w, l, h)`
    pub size: [T; 3],
    pub yaw: T,
    pub velocity: [T; 2],
}

pub const MIN_BOX_SIZE: f64 = 0.1;
pub const MAX_BOX_SIZE: f64 = 30.0;

/// Class probabilities and a refined box. The new query position is the
/// box center.
pub fn detection_head<T: Real>(
    embedding: &[T],
    position: [T; 3],
    weights: &HeadWeights<T>,
    extent: f64,
) -> Result<(Vec<T>, BoxPrediction<T>)> {
    let scores: Vec<T> = weights.class.forward(embedding)?.into_iter().map(sigmoid).collect();
    let r = weights.boxes.forward(embedding)?;
    if r.len() != BOX_OUTPUTS {
        return Err(Error::Dimension(format!("box head emits {} values", r.len())));
    }
    let e = T::of(extent);
    let center = [0, 1, 2].map(|k| (position[k] + r[k]).max(-e).min(e));
    let size = [3, 4, 5].map(|k| r[k].exp().max(T::of(MIN_BOX_SIZE)).min(T::of(MAX_BOX_SIZE)));
    let mut yaw = r[6].atan2(r[7]);
    if yaw <= -T::PI() {
        yaw = T::PI();
    }
    Ok((
        scores,
        BoxPrediction {
            center,
            size,
            yaw,
            velocity: [r[8], r[9]],
        },
    ))
}

/// Everything one layer produced.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput<T> {
    /// Sigmoid class scores, `N x C`.
    pub class_scores: Matrix<T>,
    pub boxes: Vec<BoxPrediction<T>>,
    /// Query positions after the update (the box centers).
    pub positions: Vec<[T; 3]>,
    /// Embeddings leaving the layer.
    pub embeddings: Matrix<T>,
    /// Shared self-attention weights (the QSwap affinity).
    pub self_attn: Matrix<T>,
    pub qmix_attn: Option<Matrix<T>>,
    pub post_self_attn: Option<Matrix<T>>,
    pub self_stats: TypeAttentionStats,
    pub qmix_stats: Option<TypeAttentionStats>,
    /// Final per-query sample sets, indexed by [`GridKind::index`].
    pub sample_sets: Vec<[Vec<SamplePoint<T>>; 2]>,
    pub neighbors: Vec<Vec<usize>>,
}

impl<T: Real> LayerOutput<T> {
    /// Number of shared points across all queries and grids.
    pub fn shared_points(&self) -> usize {
        self.sample_sets
            .iter()
            .flat_map(|s| s.iter())
            .flat_map(|s| s.iter())
            .filter(|p| p.origin == SampleOrigin::Shared)
            .count()
    }

    /// Per-query confidence: the max class score.
    pub fn confidences(&self) -> Vec<T> {
        self.class_scores
            .iter_rows()
            .map(|r| r.iter().copied().fold(T::zero(), T::max))
            .collect()
    }
}

fn residual_attention<T: Real>(x: &Matrix<T>, mask: &AttentionMask, weights: &MhaWeights<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let (out, attn) = multi_head_attention(x, x, x, mask, weights)?;
    Ok((x.add(&out)?, attn))
}

struct LayerState<T> {
    embeddings: Matrix<T>,
    positions: Vec<[T; 3]>,
    boxes: Vec<BoxState<T>>,
}

/// Runs `config.layers` decoder layers with the shared weight set.
pub fn decode<T: Real>(
    features: &SceneFeatures<T>,
    queries: &QuerySet<T>,
    weights: &DecoderWeights<T>,
    config: &DecoderConfig,
) -> Result<Vec<LayerOutput<T>>> {
    config.validate()?;
    queries.validate()?;
    weights.check(config)?;
    features.check(config.d)?;
    if queries.dim() != config.d {
        return Err(Error::Dimension(format!(
            "queries are {}-wide, decoder is {}-wide",
            queries.dim(),
            config.d
        )));
    }
    if queries.is_empty() {
        return Err(Error::Config("decoder needs at least one query".into()));
    }
    let types = &queries.types;
    let cross_mask = build_cross_type_mask(types)?;
    let open_mask = AttentionMask::open(types.len(), types.len());
    let mut state = LayerState {
        embeddings: queries.embeddings.clone(),
        positions: queries.positions.clone(),
        boxes: queries.boxes.clone(),
    };
    let mut outputs = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let out = decode_layer(features, types, &cross_mask, &open_mask, &mut state, weights, config)?;
        outputs.push(out);
    }
    Ok(outputs)
}

fn decode_layer<T: Real>(
    features: &SceneFeatures<T>,
    types: &[QueryType],
    cross_mask: &AttentionMask,
    open_mask: &AttentionMask,
    state: &mut LayerState<T>,
    weights: &DecoderWeights<T>,
    config: &DecoderConfig,
) -> Result<LayerOutput<T>> {
    let n = types.len();
    let qmix_at = |p: QmixPlacement| config.enable_qmix && config.qmix_placement == p;

    let adapted = apply_type_adapter(&state.embeddings, types, weights)?;
    let (mut emb, affinity) = shared_self_attention(&adapted, &state.positions, weights)?;

    let mut qmix_attn = None;
    if qmix_at(QmixPlacement::PreAgg) {
        let (x, a) = residual_attention(&emb, cross_mask, &weights.qmix.attention)?;
        emb = x;
        qmix_attn = Some(a);
    }

    // Base sampling points on both BEV grids.
    let k_base = config.qswap.k_base;
    let mut sets: [Vec<Vec<SamplePoint<T>>>; 2] = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for kind in GridKind::ALL {
        let head = &weights.bev_heads[kind.index()];
        for i in 0..n {
            let samples = predict_base_samples(emb.row(i), head, k_base)?;
            sets[kind.index()].push(base_points(i, kind, &samples));
        }
    }

    let mut neighbors = vec![Vec::new(); n];
    if config.enable_qswap {
        for (i, nb) in neighbors.iter_mut().enumerate() {
            let b = state.boxes[i];
            *nb = select_neighbors(i, affinity.row(i), (b.w, b.l), &state.positions, &config.qswap)?;
        }
        for kind in GridKind::ALL {
            let swapped = swap_samples(&sets[kind.index()], &state.positions, &neighbors, &affinity, &config.qswap)?;
            sets[kind.index()] = swapped;
        }
    }

    let [img_sets, rad_sets] = sets;
    let sample_sets: Vec<[Vec<SamplePoint<T>>; 2]> = img_sets.into_iter().zip(rad_sets).map(|(a, b)| [a, b]).collect();

    emb = aggregate_all(
        &emb,
        |i| sample_features(emb.row(i), state.positions[i], &sample_sets[i], features, weights, config.k_pv),
        &weights.aggregation,
    )?;

    let mut post_self_attn = None;
    if config.enable_qmix
        && matches!(config.qmix_placement, QmixPlacement::PostSelf | QmixPlacement::PostSelfCross)
    {
        let (x, a) = residual_attention(&emb, open_mask, &weights.post_self)?;
        emb = x;
        post_self_attn = Some(a);
    }
    if qmix_at(QmixPlacement::PostAgg) || qmix_at(QmixPlacement::PostSelfCross) {
        let (x, a) = residual_attention(&emb, cross_mask, &weights.qmix.attention)?;
        emb = x;
        qmix_attn = Some(a);
    }
    emb = weights.qmix.ffn.apply_rows(&emb)?;

    let mut class_scores = Matrix::zeros(n, config.num_classes);
    let mut boxes = Vec::with_capacity(n);
    for i in 0..n {
        let (scores, b) = detection_head(emb.row(i), state.positions[i], &weights.head, config.extent)?;
        class_scores.row_mut(i).copy_from_slice(&scores);
        state.positions[i] = b.center;
        state.boxes[i] = BoxState {
            w: b.size[0],
            l: b.size[1],
            h: b.size[2],
            yaw: b.yaw,
        };
        boxes.push(b);
    }
    state.embeddings = emb.clone();

    let self_stats = attention_type_stats(&affinity, types)?;
    let qmix_stats = qmix_attn.as_ref().map(|a| attention_type_stats(a, types)).transpose()?;
    Ok(LayerOutput {
        class_scores,
        boxes,
        positions: state.positions.clone(),
        embeddings: emb,
        self_attn: affinity,
        qmix_attn,
        post_self_attn,
        self_stats,
        qmix_stats,
        sample_sets,
        neighbors,
    })
}
