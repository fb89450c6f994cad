//! Frozen sequential-recommender backbones and diet application.
//!
//! Two architectures are supported:
//!
//! * **SASRec-lite** — embedding + learned positions, two pre-norm
//!   transformer blocks (4-head causal self-attention with separate Q/K/V/out
//!   projections, two-layer tanh feed-forward, residual connections), final
//!   layer norm on the last position. The 12 projection weights (6 per
//!   block) are the maskable set.
//! * **Caser-lite** — the embedding window viewed as a `max_len × d` image;
//!   four horizontal filters of heights 1..=4 (tanh, max-over-time pooled),
//!   sixteen vertical `max_len × 1` filters, concatenated into one
//!   fully-connected tanh layer of width `d`. The six kernels (four
//!   horizontal, one vertical bank, one fc) are the maskable set.
//!
//! Scoring is the dot product of the final hidden state with candidate item
//! embeddings. Embeddings, biases, and positions are never masked; they ride
//! along the dense transfer path. Inference here is the *direct* path — the
//! same kernel calls, in the same order, as the training graphs built by
//! [`build_train_graph`], so the two routes agree bitwise and can check each
//! other.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{CustomGradRule, Graph, GraphError, NodeId};
use crate::math;
use crate::rng::{xavier_normal, Rng};
use crate::tensor::{self, Tensor};

/// Additive pre-softmax value for disallowed attention positions. Finite, so
/// the non-finite guard never trips, but far enough below any real logit
/// that the masked probability underflows to exactly zero.
pub const ATTN_MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    SasRec,
    Caser,
}

impl Arch {
    pub fn tag(&self) -> u8 {
        match self {
            Arch::SasRec => 0,
            Arch::Caser => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Arch> {
        match tag {
            0 => Some(Arch::SasRec),
            1 => Some(Arch::Caser),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::SasRec => "sasrec",
            Arch::Caser => "caser",
        }
    }
}

/// Model hyperparameters. The defaults are the experiment configuration:
/// embedding 64, two 4-head blocks, window 5, and 4/16 Caser filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hyper {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
    pub horiz_filters: usize,
    pub vert_filters: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper { d: 64, blocks: 2, heads: 4, max_len: 5, horiz_filters: 4, vert_filters: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    ConvHorizontal,
    ConvVertical,
}

/// One maskable layer: its stable name, kind, and flattened `d_out × d_in`
/// view. Registry order is architecture-definition order and never changes —
/// the wire format depends on it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub d_out: usize,
    pub d_in: usize,
}

impl LayerSpec {
    pub fn numel(&self) -> usize {
        self.d_out * self.d_in
    }

    fn zero_mask(&self) -> LayerMask {
        LayerMask {
            name: self.name.clone(),
            d_out: self.d_out,
            d_in: self.d_in,
            bits: vec![0; self.numel()],
            keep_count: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneError {
    InvalidHyper(String),
    UnknownItem { id: usize, n_items: usize },
    EmptySequence,
    DietShapeMismatch { layer: String, detail: String },
    KeepCountViolation { layer: String, expected: usize, actual: usize },
    BufferTooSmall { needed: usize, have: usize },
    Graph(GraphError),
}

impl core::fmt::Display for BackboneError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            BackboneError::InvalidHyper(s) => write!(f, "invalid hyperparameters: {s}"),
            BackboneError::UnknownItem { id, n_items } => {
                write!(f, "unknown item id {id} (catalog size {n_items})")
            }
            BackboneError::EmptySequence => write!(f, "empty interaction sequence"),
            BackboneError::DietShapeMismatch { layer, detail } => {
                write!(f, "diet shape mismatch at layer {layer}: {detail}")
            }
            BackboneError::KeepCountViolation { layer, expected, actual } => {
                write!(f, "layer {layer}: popcount {actual} != declared keep count {expected}")
            }
            BackboneError::BufferTooSmall { needed, have } => {
                write!(f, "shared buffer holds {have} values, largest layer needs {needed}")
            }
            BackboneError::Graph(e) => write!(f, "graph error: {e}"),
        }
    }
}

impl From<GraphError> for BackboneError {
    fn from(e: GraphError) -> Self {
        BackboneError::Graph(e)
    }
}

/// Where maskable layer weights live.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightStore {
    /// One tensor per registry layer.
    PerLayer(Vec<Tensor>),
    /// A single flat buffer; every layer reads the prefix of its own size.
    /// Writes to the buffer are visible through every layer view.
    Shared(Vec<f64>),
}

/// A frozen (or, in the dense modes, trainable) backbone: embeddings,
/// positions, and the registry of maskable layers with their weights and
/// biases.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub arch: Arch,
    pub hyper: Hyper,
    pub n_items: usize,
    pub embedding: Tensor,
    /// Learned positions, `max_len × d`. SASRec only; empty for Caser.
    pub positional: Tensor,
    pub layers: Vec<LayerSpec>,
    pub store: WeightStore,
    /// One `1 × d_out` bias per registry layer. Never masked.
    pub biases: Vec<Tensor>,
}

/// The registry for an architecture, in definition order.
pub fn layer_registry(arch: Arch, hyper: &Hyper) -> Vec<LayerSpec> {
    let d = hyper.d;
    let mut layers = Vec::new();
    match arch {
        Arch::SasRec => {
            for b in 0..hyper.blocks {
                for part in ["attn_q", "attn_k", "attn_v", "attn_out", "ffn_1", "ffn_2"] {
                    layers.push(LayerSpec {
                        name: format!("block{b}.{part}"),
                        kind: LayerKind::Linear,
                        d_out: d,
                        d_in: d,
                    });
                }
            }
        }
        Arch::Caser => {
            for h in 1..=hyper.horiz_filters {
                layers.push(LayerSpec {
                    name: format!("conv_h{h}"),
                    kind: LayerKind::ConvHorizontal,
                    d_out: 1,
                    d_in: h * d,
                });
            }
            layers.push(LayerSpec {
                name: "conv_v".to_string(),
                kind: LayerKind::ConvVertical,
                d_out: hyper.vert_filters,
                d_in: hyper.max_len,
            });
            let fc_in = hyper.horiz_filters + hyper.vert_filters * d;
            layers.push(LayerSpec {
                name: "fc".to_string(),
                kind: LayerKind::Linear,
                d_out: d,
                d_in: fc_in,
            });
        }
    }
    layers
}

/// Build a backbone with Xavier-normal weights (biases start at zero).
/// Tensors are drawn from `rng` in a fixed documented order — embedding,
/// positions, then registry layers — so one seed pins every weight.
pub fn build_backbone(
    arch: Arch,
    n_items: usize,
    hyper: Hyper,
    rng: &mut Rng,
) -> Result<BackboneParams, BackboneError> {
    if n_items == 0 {
        return Err(BackboneError::InvalidHyper("n_items must be >= 1".to_string()));
    }
    if hyper.d == 0 || hyper.max_len == 0 || hyper.blocks == 0 {
        return Err(BackboneError::InvalidHyper("zero extent".to_string()));
    }
    if arch == Arch::SasRec && hyper.d % hyper.heads != 0 {
        return Err(BackboneError::InvalidHyper(format!(
            "heads {} must divide d {}",
            hyper.heads, hyper.d
        )));
    }
    if arch == Arch::Caser && hyper.horiz_filters > hyper.max_len {
        return Err(BackboneError::InvalidHyper(
            "horizontal filter heights exceed the window".to_string(),
        ));
    }

    let embedding = xavier_normal(n_items, hyper.d, rng);
    let positional = match arch {
        Arch::SasRec => xavier_normal(hyper.max_len, hyper.d, rng),
        Arch::Caser => Tensor::zeros(0, 0),
    };
    let layers = layer_registry(arch, &hyper);
    let mut weights = Vec::with_capacity(layers.len());
    let mut biases = Vec::with_capacity(layers.len());
    for spec in &layers {
        weights.push(xavier_normal(spec.d_out, spec.d_in, rng));
        biases.push(Tensor::zeros(1, spec.d_out));
    }
    Ok(BackboneParams {
        arch,
        hyper,
        n_items,
        embedding,
        positional,
        layers,
        store: WeightStore::PerLayer(weights),
        biases,
    })
}

impl BackboneParams {
    /// The weight of registry layer `i` as an owned `d_out × d_in` tensor.
    /// For a shared store this materializes the prefix view.
    pub fn layer_weight(&self, i: usize) -> Tensor {
        let spec = &self.layers[i];
        match &self.store {
            WeightStore::PerLayer(ws) => ws[i].clone(),
            WeightStore::Shared(buf) => {
                Tensor::from_vec(spec.d_out, spec.d_in, buf[..spec.numel()].to_vec())
            }
        }
    }

    /// Borrowed flat view of layer `i`'s weight (row-major).
    pub fn layer_weight_slice(&self, i: usize) -> &[f64] {
        match &self.store {
            WeightStore::PerLayer(ws) => ws[i].data(),
            WeightStore::Shared(buf) => &buf[..self.layers[i].numel()],
        }
    }

    /// Number of maskable weight elements: `Σ d_out·d_in` over the registry.
    pub fn maskable_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.numel()).sum()
    }

    /// Every parameter the dense-shipping path transfers: maskable weights
    /// plus biases and learned positions. Embeddings are excluded — they are
    /// cached edge-side as candidate embeddings under every policy.
    pub fn dense_transfer_param_count(&self) -> usize {
        let weights: usize = match &self.store {
            WeightStore::PerLayer(_) => self.maskable_param_count(),
            WeightStore::Shared(buf) => buf.len(),
        };
        let biases: usize = self.biases.iter().map(|b| b.numel()).sum();
        weights + biases + self.positional.numel()
    }

    /// FNV-1a digest over every parameter byte; used by the frozen-weight
    /// conservation tests.
    pub fn content_digest(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_tensor(&self.embedding);
        h.write_tensor(&self.positional);
        match &self.store {
            WeightStore::PerLayer(ws) => {
                for w in ws {
                    h.write_tensor(w);
                }
            }
            WeightStore::Shared(buf) => {
                for v in buf {
                    h.write_u64(v.to_bits());
                }
            }
        }
        for b in &self.biases {
            h.write_tensor(b);
        }
        h.finish()
    }

    /// Truncate a context to the model window: the most recent `max_len`
    /// items.
    pub fn window<'a>(&self, seq: &'a [usize]) -> &'a [usize] {
        let l = seq.len().min(self.hyper.max_len);
        &seq[seq.len() - l..]
    }

    fn check_sequence(&self, seq: &[usize]) -> Result<(), BackboneError> {
        if seq.is_empty() {
            return Err(BackboneError::EmptySequence);
        }
        for &id in seq {
            if id >= self.n_items {
                return Err(BackboneError::UnknownItem { id, n_items: self.n_items });
            }
        }
        Ok(())
    }
}

// ── FNV-1a ───────────────────────────────────────────────────────────

/// 64-bit FNV-1a. Also the wire format's layer-name hash.
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    fn write_tensor(&mut self, t: &Tensor) {
        for v in t.data() {
            self.write_u64(v.to_bits());
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv::new();
    h.write(bytes);
    h.finish()
}

// ── Diet ─────────────────────────────────────────────────────────────

/// `keep_count = max(1, round(keep_ratio · n))` with half-up rounding,
/// capped at `n`.
pub fn keep_count_for(keep_ratio: f64, n: usize) -> usize {
    let k = math::round_half_up(keep_ratio * n as f64) as usize;
    k.clamp(1, n)
}

/// One layer's binary mask, row-major over the flattened weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
    /// One byte per element, value 0 or 1.
    pub bits: Vec<u8>,
    pub keep_count: usize,
}

impl LayerMask {
    pub fn numel(&self) -> usize {
        self.bits.len()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// Count of output rows whose mask bits are all zero.
    pub fn zero_rows(&self) -> usize {
        (0..self.d_out)
            .filter(|&r| self.bits[r * self.d_in..(r + 1) * self.d_in].iter().all(|&b| b == 0))
            .count()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_vec(self.d_out, self.d_in, self.bits.iter().map(|&b| b as f64).collect())
    }
}

/// Per-layer binary masks plus the keep ratio that produced them — the only
/// thing that travels cloud → edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Diet {
    pub keep_ratio: f64,
    pub layers: Vec<LayerMask>,
}

impl Diet {
    /// The identity diet: every bit one.
    pub fn ones(backbone: &BackboneParams) -> Diet {
        let layers = backbone
            .layers
            .iter()
            .map(|spec| LayerMask {
                name: spec.name.clone(),
                d_out: spec.d_out,
                d_in: spec.d_in,
                bits: vec![1; spec.numel()],
                keep_count: spec.numel(),
            })
            .collect();
        Diet { keep_ratio: 1.0, layers }
    }

    /// All-zero masks; only reachable through the unchecked apply path.
    pub fn zeros(backbone: &BackboneParams) -> Diet {
        let layers = backbone.layers.iter().map(|spec| spec.zero_mask()).collect();
        Diet { keep_ratio: 0.0, layers }
    }

    /// A seeded uniform-random diet at `keep_ratio` (the `random-prune`
    /// baseline).
    pub fn random(backbone: &BackboneParams, keep_ratio: f64, rng: &mut Rng) -> Diet {
        let layers = backbone
            .layers
            .iter()
            .map(|spec| {
                let n = spec.numel();
                let keep = keep_count_for(keep_ratio, n);
                let mut idx: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut idx);
                let mut bits = vec![0u8; n];
                for &i in &idx[..keep] {
                    bits[i] = 1;
                }
                LayerMask {
                    name: spec.name.clone(),
                    d_out: spec.d_out,
                    d_in: spec.d_in,
                    bits,
                    keep_count: keep,
                }
            })
            .collect();
        Diet { keep_ratio, layers }
    }

    pub fn mask_bit_count(&self) -> usize {
        self.layers.iter().map(|l| l.numel()).sum()
    }

    /// Positional validation against a backbone registry: names, shapes and
    /// popcounts must all line up.
    pub fn validate(&self, backbone: &BackboneParams) -> Result<(), BackboneError> {
        if self.layers.len() != backbone.layers.len() {
            return Err(BackboneError::DietShapeMismatch {
                layer: "<registry>".to_string(),
                detail: format!(
                    "diet has {} layers, backbone has {}",
                    self.layers.len(),
                    backbone.layers.len()
                ),
            });
        }
        for (mask, spec) in self.layers.iter().zip(backbone.layers.iter()) {
            if mask.name != spec.name || mask.d_out != spec.d_out || mask.d_in != spec.d_in {
                return Err(BackboneError::DietShapeMismatch {
                    layer: spec.name.clone(),
                    detail: format!(
                        "mask is {}({}x{}), layer is {}({}x{})",
                        mask.name, mask.d_out, mask.d_in, spec.name, spec.d_out, spec.d_in
                    ),
                });
            }
            let pop = mask.popcount();
            if pop != mask.keep_count {
                return Err(BackboneError::KeepCountViolation {
                    layer: spec.name.clone(),
                    expected: mask.keep_count,
                    actual: pop,
                });
            }
        }
        Ok(())
    }
}

// ── Masked backbone ──────────────────────────────────────────────────

/// A backbone with a diet applied: effective weights are `w ⊙ m`,
/// materialized once. The underlying backbone is untouched.
pub struct MaskedBackbone<'a> {
    pub backbone: &'a BackboneParams,
    pub diet: Diet,
    effective: Vec<Tensor>,
}

/// Apply a diet (validated) to a backbone.
pub fn apply_diet<'a>(
    backbone: &'a BackboneParams,
    diet: &Diet,
) -> Result<MaskedBackbone<'a>, BackboneError> {
    diet.validate(backbone)?;
    Ok(apply_diet_unchecked(backbone, diet))
}

/// Apply without popcount validation (shapes must still match). Used by the
/// degenerate-mask tests and internal callers that built the diet themselves.
pub fn apply_diet_unchecked<'a>(backbone: &'a BackboneParams, diet: &Diet) -> MaskedBackbone<'a> {
    let effective = backbone
        .layers
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mask = &diet.layers[i];
            assert_eq!(mask.numel(), spec.numel(), "diet layer size mismatch");
            let mut w = backbone.layer_weight(i);
            for (wv, &b) in w.data_mut().iter_mut().zip(mask.bits.iter()) {
                if b == 0 {
                    *wv = 0.0;
                }
            }
            w
        })
        .collect();
    MaskedBackbone { backbone, diet: diet.clone(), effective }
}

impl<'a> MaskedBackbone<'a> {
    /// The dense view: identity diet.
    pub fn dense(backbone: &'a BackboneParams) -> MaskedBackbone<'a> {
        apply_diet_unchecked(backbone, &Diet::ones(backbone))
    }

    pub fn effective_weight(&self, i: usize) -> &Tensor {
        &self.effective[i]
    }

    /// Final hidden state for a (window-truncated) context.
    pub fn hidden(&self, seq: &[usize]) -> Result<Tensor, BackboneError> {
        self.backbone.check_sequence(seq)?;
        let ctx = self.backbone.window(seq);
        match self.backbone.arch {
            Arch::SasRec => Ok(self.sasrec_hidden(ctx)),
            Arch::Caser => Ok(self.caser_hidden(ctx)),
        }
    }

    /// One score per candidate id: dot of the final hidden state with each
    /// candidate embedding.
    pub fn forward_scores(
        &self,
        seq: &[usize],
        candidates: &[usize],
    ) -> Result<Vec<f64>, BackboneError> {
        for &c in candidates {
            if c >= self.backbone.n_items {
                return Err(BackboneError::UnknownItem { id: c, n_items: self.backbone.n_items });
            }
        }
        let h = self.hidden(seq)?;
        let cand = tensor::gather_rows(&self.backbone.embedding, candidates);
        let scores = tensor::matmul(&h, &cand.transpose());
        Ok(scores.into_data())
    }

    /// Scores against the full catalog.
    pub fn forward_scores_all(&self, seq: &[usize]) -> Result<Vec<f64>, BackboneError> {
        let h = self.hidden(seq)?;
        let scores = tensor::matmul(&h, &self.backbone.embedding.transpose());
        Ok(scores.into_data())
    }

    fn linear(&self, i: usize, x: &Tensor) -> Tensor {
        // x (l × d_in) · Wᵀ + b, matching the graph's transpose+matmul nodes.
        let w = &self.effective[i];
        let y = tensor::matmul(x, &w.transpose());
        tensor::add(&y, &self.backbone.biases[i])
    }

    fn sasrec_hidden(&self, ctx: &[usize]) -> Tensor {
        let b = self.backbone;
        let l = ctx.len();
        let d = b.hyper.d;
        let heads = b.hyper.heads;
        let dh = d / heads;
        let x0 = tensor::gather_rows(&b.embedding, ctx);
        let pos = tensor::slice_rows(&b.positional, 0, l);
        let mut x = tensor::add(&x0, &pos);
        let causal = causal_mask(l);
        for blk in 0..b.hyper.blocks {
            let base = blk * 6;
            let a = tensor::layernorm_rows(&x);
            let q = self.linear(base, &a);
            let k = self.linear(base + 1, &a);
            let v = self.linear(base + 2, &a);
            let mut heads_out: Option<Tensor> = None;
            for h in 0..heads {
                let qh = tensor::slice_cols(&q, h * dh, (h + 1) * dh);
                let kh = tensor::slice_cols(&k, h * dh, (h + 1) * dh);
                let vh = tensor::slice_cols(&v, h * dh, (h + 1) * dh);
                let s =
                    tensor::scale(&tensor::matmul(&qh, &kh.transpose()), 1.0 / math::sqrt(dh as f64));
                let s = tensor::add(&s, &causal);
                let p = tensor::softmax_rows(&s);
                let oh = tensor::matmul(&p, &vh);
                heads_out = Some(match heads_out {
                    None => oh,
                    Some(acc) => tensor::concat_cols(&acc, &oh),
                });
            }
            let o = self.linear(base + 3, &heads_out.unwrap());
            x = tensor::add(&x, &o);
            let f = tensor::layernorm_rows(&x);
            let f1 = self.linear(base + 4, &f).map(math::tanh);
            let f2 = self.linear(base + 5, &f1);
            x = tensor::add(&x, &f2);
        }
        let last = tensor::slice_rows(&x, l - 1, l);
        tensor::layernorm_rows(&last)
    }

    fn caser_hidden(&self, ctx: &[usize]) -> Tensor {
        let b = self.backbone;
        let d = b.hyper.d;
        let ll = b.hyper.max_len;
        let x = tensor::gather_rows(&b.embedding, ctx);
        // Left-pad with zero rows to the full window height.
        let image = if ctx.len() < ll {
            tensor::concat_rows(&Tensor::zeros(ll - ctx.len(), d), &x)
        } else {
            x
        };
        // Horizontal filters: one layer per height, tanh then max-over-time.
        let mut feats: Option<Tensor> = None;
        for (i, spec) in b.layers.iter().enumerate() {
            if spec.kind != LayerKind::ConvHorizontal {
                continue;
            }
            let h = spec.d_in / d;
            let kernel = self.effective[i].reshaped(h, d);
            let bias = self.backbone.biases[i].data()[0];
            let mut vals: Option<Tensor> = None;
            for o in 0..=(ll - h) {
                let patch = tensor::slice_rows(&image, o, o + h);
                let v = tensor::reduce_sum_all(&tensor::mul(&patch, &kernel)) + bias;
                let v = Tensor::scalar(math::tanh(v));
                vals = Some(match vals {
                    None => v,
                    Some(acc) => tensor::concat_cols(&acc, &v),
                });
            }
            let (m, _) = tensor::reduce_max_all(&vals.unwrap());
            let m = Tensor::scalar(m);
            feats = Some(match feats {
                None => m,
                Some(acc) => tensor::concat_cols(&acc, &m),
            });
        }
        // Vertical bank: (imageᵀ · Vᵀ) is d × n_filters; add the per-filter
        // bias as a broadcast row, then flatten.
        let vi = b.layers.iter().position(|l| l.kind == LayerKind::ConvVertical).unwrap();
        let vt = tensor::matmul(&image.transpose(), &self.effective[vi].transpose());
        let vt = tensor::add(&vt, &self.backbone.biases[vi]);
        let vflat = vt.reshaped(1, d * b.hyper.vert_filters);
        let cat = tensor::concat_cols(&feats.unwrap(), &vflat);
        let fci = b.layers.len() - 1;
        self.linear(fci, &cat).map(math::tanh)
    }

    /// Zero mask rows per registry layer (whole filters the edge can skip).
    pub fn zero_rows_per_layer(&self) -> Vec<usize> {
        self.diet.layers.iter().map(|m| m.zero_rows()).collect()
    }
}

/// The additive causal mask constant for length `l`.
pub fn causal_mask(l: usize) -> Tensor {
    let mut m = Tensor::zeros(l, l);
    for i in 0..l {
        for j in (i + 1)..l {
            m.set(i, j, ATTN_MASK_VALUE);
        }
    }
    m
}

// ── Training graph construction ──────────────────────────────────────

/// How the maskable weights enter a training graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    /// Trainable parameter leaves named `w.<layer>` (dense training modes).
    Trainable,
    /// Frozen constants baked into the graph.
    Frozen,
    /// One trainable flat buffer `w_max`; every layer reads its prefix.
    SharedTrainable,
}

/// How masks enter a training graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskSource {
    /// No masking: effective weight is the raw weight.
    None,
    /// One input leaf `mask.<layer>` (`1 × numel`) per registry layer;
    /// gradients w.r.t. these inputs are the straight-through seeds for the
    /// generator stack.
    InputPerLayer,
    /// One trainable score leaf `score.<layer>` per registry layer, hard
    /// top-k binarized in-graph (the shared-mask training mode).
    ParamScores { keep_ratio: f64 },
}

/// Names of the leaves a training graph exposes.
pub mod leaves {
    pub const CTX_IDS: &str = "ctx_ids";
    pub const CAND_IDS: &str = "cand_ids";
    pub const EMBEDDING: &str = "emb";
    pub const POSITIONAL: &str = "pos";
    pub const W_MAX: &str = "w_max";
    pub const LOSS: &str = "loss";
    pub const SCORES: &str = "scores";

    pub fn weight(layer: &str) -> alloc::string::String {
        alloc::format!("w.{layer}")
    }

    pub fn bias(layer: &str) -> alloc::string::String {
        alloc::format!("b.{layer}")
    }

    pub fn mask(layer: &str) -> alloc::string::String {
        alloc::format!("mask.{layer}")
    }

    pub fn score(layer: &str) -> alloc::string::String {
        alloc::format!("score.{layer}")
    }
}

/// A built training graph plus the shape it was built for.
pub struct TrainGraph {
    pub graph: Graph,
    pub ctx_len: usize,
    pub n_candidates: usize,
}

/// Build the per-sample training graph for a context of exactly `ctx_len`
/// items and `n_candidates` scored ids (target first, negatives after).
/// Output `loss` is the summed binary cross-entropy with the first candidate
/// as the positive; output `scores` is the raw `1 × n_candidates` row.
pub fn build_train_graph(
    backbone: &BackboneParams,
    ctx_len: usize,
    n_candidates: usize,
    weights: WeightSource,
    masks: MaskSource,
) -> Result<TrainGraph, BackboneError> {
    assert!(ctx_len >= 1 && ctx_len <= backbone.hyper.max_len);
    assert!(n_candidates >= 2, "need a target and at least one negative");
    let mut g = Graph::new();
    let ctx = g.ids(leaves::CTX_IDS, ctx_len)?;
    let cand = g.ids(leaves::CAND_IDS, n_candidates)?;

    let emb = match weights {
        WeightSource::Trainable => g.param(leaves::EMBEDDING, backbone.n_items, backbone.hyper.d)?,
        _ => g.constant(Arc::new(backbone.embedding.clone())),
    };

    let w_max = if weights == WeightSource::SharedTrainable {
        let len = match &backbone.store {
            WeightStore::Shared(buf) => buf.len(),
            WeightStore::PerLayer(_) => {
                backbone.layers.iter().map(|l| l.numel()).max().unwrap_or(0)
            }
        };
        Some(g.param(leaves::W_MAX, 1, len)?)
    } else {
        None
    };

    let mut effective = Vec::with_capacity(backbone.layers.len());
    let mut bias_nodes = Vec::with_capacity(backbone.layers.len());
    for (i, spec) in backbone.layers.iter().enumerate() {
        let raw = match weights {
            WeightSource::Trainable => {
                g.param(&leaves::weight(&spec.name), spec.d_out, spec.d_in)?
            }
            WeightSource::Frozen => g.constant(Arc::new(backbone.layer_weight(i))),
            WeightSource::SharedTrainable => {
                let sl = g.slice_cols(w_max.unwrap(), 0, spec.numel())?;
                g.reshape(sl, spec.d_out, spec.d_in)?
            }
        };
        let eff = match masks {
            MaskSource::None => raw,
            MaskSource::InputPerLayer => {
                let m = g.input(&leaves::mask(&spec.name), 1, spec.numel())?;
                let m = g.reshape(m, spec.d_out, spec.d_in)?;
                g.mul(raw, m)?
            }
            MaskSource::ParamScores { keep_ratio } => {
                let s = g.param(&leaves::score(&spec.name), 1, spec.numel())?;
                let keep = keep_count_for(keep_ratio, spec.numel());
                let m = g.custom_grad(s, CustomGradRule::BinarizeTopkRows { keep_count: keep })?;
                let m = g.reshape(m, spec.d_out, spec.d_in)?;
                g.mul(raw, m)?
            }
        };
        effective.push(eff);
        let b = match weights {
            WeightSource::Trainable => g.param(&leaves::bias(&spec.name), 1, spec.d_out)?,
            _ => g.constant(Arc::new(backbone.biases[i].clone())),
        };
        bias_nodes.push(b);
    }

    let linear = |g: &mut Graph, i: usize, x: NodeId| -> Result<NodeId, GraphError> {
        let wt = g.transpose(effective[i])?;
        let y = g.matmul(x, wt)?;
        g.add(y, bias_nodes[i])
    };

    let hidden = match backbone.arch {
        Arch::SasRec => {
            let pos_full = match weights {
                WeightSource::Trainable => {
                    g.param(leaves::POSITIONAL, backbone.hyper.max_len, backbone.hyper.d)?
                }
                _ => g.constant(Arc::new(backbone.positional.clone())),
            };
            let pos = if ctx_len == backbone.hyper.max_len {
                pos_full
            } else {
                g.slice_rows(pos_full, 0, ctx_len)?
            };
            let x0 = g.gather(emb, ctx)?;
            let mut x = g.add(x0, pos)?;
            let causal = g.constant(Arc::new(causal_mask(ctx_len)));
            let d = backbone.hyper.d;
            let heads = backbone.hyper.heads;
            let dh = d / heads;
            for blk in 0..backbone.hyper.blocks {
                let base = blk * 6;
                let a = g.layernorm_rows(x)?;
                let q = linear(&mut g, base, a)?;
                let k = linear(&mut g, base + 1, a)?;
                let v = linear(&mut g, base + 2, a)?;
                let mut heads_out: Option<NodeId> = None;
                for h in 0..heads {
                    let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
                    let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
                    let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
                    let kt = g.transpose(kh)?;
                    let s = g.matmul(qh, kt)?;
                    let s = g.scale(s, 1.0 / math::sqrt(dh as f64))?;
                    let s = g.add(s, causal)?;
                    let p = g.softmax_rows(s)?;
                    let oh = g.matmul(p, vh)?;
                    heads_out = Some(match heads_out {
                        None => oh,
                        Some(acc) => g.concat_cols(acc, oh)?,
                    });
                }
                let o = linear(&mut g, base + 3, heads_out.unwrap())?;
                x = g.add(x, o)?;
                let f = g.layernorm_rows(x)?;
                let f1p = linear(&mut g, base + 4, f)?;
                let f1 = g.tanh(f1p)?;
                let f2 = linear(&mut g, base + 5, f1)?;
                x = g.add(x, f2)?;
            }
            let last = g.slice_rows(x, ctx_len - 1, ctx_len)?;
            g.layernorm_rows(last)?
        }
        Arch::Caser => {
            let d = backbone.hyper.d;
            let ll = backbone.hyper.max_len;
            let x = g.gather(emb, ctx)?;
            let image = if ctx_len < ll {
                let pad = g.constant(Arc::new(Tensor::zeros(ll - ctx_len, d)));
                g.concat_rows(pad, x)?
            } else {
                x
            };
            let mut feats: Option<NodeId> = None;
            for (i, spec) in backbone.layers.iter().enumerate() {
                if spec.kind != LayerKind::ConvHorizontal {
                    continue;
                }
                let h = spec.d_in / d;
                let kernel = g.reshape(effective[i], h, d)?;
                let mut vals: Option<NodeId> = None;
                for o in 0..=(ll - h) {
                    let patch = g.slice_rows(image, o, o + h)?;
                    let prod = g.mul(patch, kernel)?;
                    let sum = g.reduce_sum(prod)?;
                    let sum = g.add(sum, bias_nodes[i])?;
                    let act = g.tanh(sum)?;
                    vals = Some(match vals {
                        None => act,
                        Some(acc) => g.concat_cols(acc, act)?,
                    });
                }
                let m = g.reduce_max(vals.unwrap())?;
                feats = Some(match feats {
                    None => m,
                    Some(acc) => g.concat_cols(acc, m)?,
                });
            }
            let vi = backbone
                .layers
                .iter()
                .position(|l| l.kind == LayerKind::ConvVertical)
                .unwrap();
            let it = g.transpose(image)?;
            let vt0 = g.transpose(effective[vi])?;
            let vt = g.matmul(it, vt0)?;
            let vt = g.add(vt, bias_nodes[vi])?;
            let vflat = g.reshape(vt, 1, d * backbone.hyper.vert_filters)?;
            let cat = g.concat_cols(feats.unwrap(), vflat)?;
            let fci = backbone.layers.len() - 1;
            let z = linear(&mut g, fci, cat)?;
            g.tanh(z)?
        }
    };

    let cand_emb = g.gather(emb, cand)?;
    let cand_t = g.transpose(cand_emb)?;
    let scores = g.matmul(hidden, cand_t)?;
    g.mark_output(leaves::SCORES, scores);

    // loss = softplus(-s⁺) + Σ softplus(s⁻)
    let s_pos = g.slice_cols(scores, 0, 1)?;
    let neg_pos = g.scale(s_pos, -1.0)?;
    let pos_term = g.softplus(neg_pos)?;
    let s_neg = g.slice_cols(scores, 1, n_candidates)?;
    let neg_terms = g.softplus(s_neg)?;
    let neg_sum = g.reduce_sum(neg_terms)?;
    let loss = g.add(pos_term, neg_sum)?;
    g.mark_output(leaves::LOSS, loss);

    Ok(TrainGraph { graph: g, ctx_len, n_candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Binding;

    fn small_sasrec() -> BackboneParams {
        let hyper = Hyper { d: 16, blocks: 2, heads: 4, max_len: 5, ..Hyper::default() };
        build_backbone(Arch::SasRec, 30, hyper, &mut Rng::new(7)).unwrap()
    }

    fn small_caser() -> BackboneParams {
        let hyper = Hyper { d: 16, blocks: 2, heads: 4, max_len: 5, ..Hyper::default() };
        build_backbone(Arch::Caser, 30, hyper, &mut Rng::new(7)).unwrap()
    }

    #[test]
    fn sasrec_registry_has_twelve_linear_layers() {
        let b = build_backbone(Arch::SasRec, 100, Hyper::default(), &mut Rng::new(1)).unwrap();
        assert_eq!(b.layers.len(), 12);
        assert!(b.layers.iter().all(|l| l.kind == LayerKind::Linear));
        assert!(b.layers.iter().all(|l| l.d_out == 64 && l.d_in == 64));
        assert_eq!(b.maskable_param_count(), 12 * 64 * 64);
    }

    #[test]
    fn caser_registry_lists_kernels_and_fc() {
        let b = build_backbone(Arch::Caser, 100, Hyper::default(), &mut Rng::new(1)).unwrap();
        let names: Vec<&str> = b.layers.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, vec!["conv_h1", "conv_h2", "conv_h3", "conv_h4", "conv_v", "fc"]);
        assert_eq!(b.layers[4].d_out, 16);
        assert_eq!(b.layers[5].d_in, 4 + 16 * 64);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_backbone(Arch::SasRec, 50, Hyper::default(), &mut Rng::new(3)).unwrap();
        let b = build_backbone(Arch::SasRec, 50, Hyper::default(), &mut Rng::new(3)).unwrap();
        assert_eq!(a.content_digest(), b.content_digest());
        let c = build_backbone(Arch::SasRec, 50, Hyper::default(), &mut Rng::new(4)).unwrap();
        assert_ne!(a.content_digest(), c.content_digest());
    }

    #[test]
    fn heads_must_divide_d() {
        let hyper = Hyper { d: 30, heads: 4, ..Hyper::default() };
        assert!(matches!(
            build_backbone(Arch::SasRec, 10, hyper, &mut Rng::new(1)),
            Err(BackboneError::InvalidHyper(_))
        ));
    }

    #[test]
    fn ones_diet_matches_dense_forward() {
        let b = small_sasrec();
        let ones = apply_diet(&b, &Diet::ones(&b)).unwrap();
        let dense = MaskedBackbone::dense(&b);
        let seq = vec![1, 5, 9, 2];
        assert_eq!(ones.forward_scores_all(&seq).unwrap(), dense.forward_scores_all(&seq).unwrap());
    }

    #[test]
    fn zero_diet_annihilates_weights() {
        let b = small_sasrec();
        let mb = apply_diet_unchecked(&b, &Diet::zeros(&b));
        for i in 0..b.layers.len() {
            assert!(mb.effective_weight(i).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_diet_caser_scores_all_identical() {
        // Dead linear path and zero biases leave the Caser hidden state at
        // tanh(0) = 0, so every candidate scores 0.
        let b = small_caser();
        let mb = apply_diet_unchecked(&b, &Diet::zeros(&b));
        let scores = mb.forward_scores_all(&[3, 4]).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn random_mask_is_elementwise_product() {
        let b = small_sasrec();
        let mut rng = Rng::new(11);
        let diet = Diet::random(&b, 0.4, &mut rng);
        let mb = apply_diet(&b, &diet).unwrap();
        for (i, spec) in b.layers.iter().enumerate() {
            let w = b.layer_weight(i);
            let m = &diet.layers[i];
            for e in 0..spec.numel() {
                let expect = w.data()[e] * m.bits[e] as f64;
                assert_eq!(mb.effective_weight(i).data()[e], expect);
            }
        }
    }

    #[test]
    fn masked_forward_equals_premultiplied_dense_forward() {
        let b = small_sasrec();
        let diet = Diet::random(&b, 0.5, &mut Rng::new(13));
        let mb = apply_diet(&b, &diet).unwrap();

        // A backbone whose stored weights were pre-multiplied by the mask.
        let mut pre = b.clone();
        if let WeightStore::PerLayer(ws) = &mut pre.store {
            for (i, w) in ws.iter_mut().enumerate() {
                for (v, &bit) in w.data_mut().iter_mut().zip(diet.layers[i].bits.iter()) {
                    *v *= bit as f64;
                }
            }
        }
        let dense_pre = MaskedBackbone::dense(&pre);
        let seq = vec![2, 7, 1, 20, 4, 9, 28];
        assert_eq!(
            mb.forward_scores_all(&seq).unwrap(),
            dense_pre.forward_scores_all(&seq).unwrap()
        );
    }

    #[test]
    fn truncation_uses_last_window() {
        for b in [small_sasrec(), small_caser()] {
            let long: Vec<usize> = vec![9, 8, 7, 6, 5, 4, 3, 2, 1];
            let mb = MaskedBackbone::dense(&b);
            let full = mb.forward_scores_all(&long).unwrap();
            let tail = mb.forward_scores_all(&long[long.len() - 5..]).unwrap();
            assert_eq!(full, tail);
        }
    }

    #[test]
    fn unknown_item_and_empty_sequence_are_errors() {
        let b = small_sasrec();
        let mb = MaskedBackbone::dense(&b);
        assert!(matches!(mb.forward_scores_all(&[55]), Err(BackboneError::UnknownItem { .. })));
        assert!(matches!(mb.forward_scores_all(&[]), Err(BackboneError::EmptySequence)));
    }

    #[test]
    fn diet_validation_rejects_popcount_drift() {
        let b = small_sasrec();
        let mut diet = Diet::ones(&b);
        diet.layers[0].bits[0] = 0; // popcount no longer matches keep_count
        assert!(matches!(apply_diet(&b, &diet), Err(BackboneError::KeepCountViolation { .. })));
    }

    /// The graph-composition oracle: direct inference equals the training
    /// graph's score output, bitwise, for both architectures and all lengths.
    #[test]
    fn direct_forward_matches_graph_forward() {
        for b in [small_sasrec(), small_caser()] {
            let diet = Diet::random(&b, 0.3, &mut Rng::new(5));
            let mb = apply_diet(&b, &diet).unwrap();
            for len in 1..=5usize {
                let seq: Vec<usize> = (0..len).map(|i| (i * 7 + 2) % 30).collect();
                let cands = vec![4usize, 17, 23];
                let direct = mb.forward_scores(&seq, &cands).unwrap();

                let tg = build_train_graph(
                    &b,
                    len,
                    cands.len(),
                    WeightSource::Frozen,
                    MaskSource::InputPerLayer,
                )
                .unwrap();
                let mut bind = Binding::new();
                bind.bind_ids(leaves::CTX_IDS, Arc::new(seq.clone()));
                bind.bind_ids(leaves::CAND_IDS, Arc::new(cands.clone()));
                for m in &diet.layers {
                    bind.bind_tensor(
                        &leaves::mask(&m.name),
                        Tensor::from_vec(1, m.numel(), m.bits.iter().map(|&x| x as f64).collect()),
                    );
                }
                let eval = tg.graph.forward(&bind).unwrap();
                let graph_scores = eval.output(leaves::SCORES).unwrap();
                assert_eq!(direct.as_slice(), graph_scores.data(), "arch {:?} len {len}", b.arch);
            }
        }
    }

    #[test]
    fn keep_count_rounding_is_half_up_with_floor_one() {
        assert_eq!(keep_count_for(0.5, 4), 2);
        assert_eq!(keep_count_for(0.1, 4), 1); // round(0.4) = 0, floored to 1
        assert_eq!(keep_count_for(0.125, 4), 1); // round(0.5) = 1 (half-up)
        assert_eq!(keep_count_for(1.0, 7), 7);
        assert_eq!(keep_count_for(0.375, 4), 2); // round(1.5) = 2
    }
}
