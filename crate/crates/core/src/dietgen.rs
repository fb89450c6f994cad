//! Cloud-side diet generation.
//!
//! Per maskable layer the cloud keeps an independent triple: a GRU sequence
//! extractor that compresses the user's recent items into a `d`-vector, an
//! element hypernetwork (one affine map `d → d_out·d_in`) that scores every
//! weight element, and a row hypernetwork (`d → d_out`, softmaxed) whose
//! output rescales whole rows so unhelpful filters sink below the keep
//! threshold and drop out entirely. Binarization keeps exactly
//! `max(1, round(keep_ratio · n))` elements by absolute score, ties to the
//! lowest flat index; its backward is the straight-through identity.
//!
//! Everything exists twice: as direct functions (serving, evaluation, unit
//! oracles) and as a batched training graph built by
//! [`build_generator_graph`]. Both paths call the same kernels in the same
//! order, so their outputs agree exactly and each checks the other.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{
    keep_count_for, BackboneError, BackboneParams, Diet, LayerMask, LayerSpec, WeightStore,
};
use crate::graph::{topk_keep_mask, CustomGradRule, Graph};
use crate::math;
use crate::rng::{xavier_normal, Rng};
use crate::tensor::{self, Tensor};

// ── GRU ──────────────────────────────────────────────────────────────

/// Gated recurrent unit cell, gates stacked `[r; z; n]` in the weight rows:
///
/// ```text
/// r  = sigmoid(x·W_irᵀ + b_ir + h·W_hrᵀ + b_hr)
/// z  = sigmoid(x·W_izᵀ + b_iz + h·W_hzᵀ + b_hz)
/// n  = tanh  (x·W_inᵀ + b_in + r ⊙ (h·W_hnᵀ + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
///
/// With all-zero parameters and `h₀ = 0` the state stays exactly zero: the
/// gates sit at ½ and the candidate `n` is `tanh(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    /// `3d × d` input-to-hidden weights.
    pub w_ih: Tensor,
    /// `3d × d` hidden-to-hidden weights.
    pub w_hh: Tensor,
    /// `1 × 3d` input bias.
    pub b_ih: Tensor,
    /// `1 × 3d` hidden bias.
    pub b_hh: Tensor,
}

impl GruCell {
    pub fn zeros(d: usize) -> Self {
        GruCell {
            w_ih: Tensor::zeros(3 * d, d),
            w_hh: Tensor::zeros(3 * d, d),
            b_ih: Tensor::zeros(1, 3 * d),
            b_hh: Tensor::zeros(1, 3 * d),
        }
    }

    pub fn init(d: usize, rng: &mut Rng) -> Self {
        GruCell {
            w_ih: xavier_normal(3 * d, d, rng),
            w_hh: xavier_normal(3 * d, d, rng),
            b_ih: Tensor::zeros(1, 3 * d),
            b_hh: Tensor::zeros(1, 3 * d),
        }
    }

    fn d(&self) -> usize {
        self.w_ih.cols()
    }

    /// One cell step for a batch of rows (`x`, `h`: `B × d`).
    pub fn step(&self, x: &Tensor, h: &Tensor) -> Tensor {
        let d = self.d();
        let gx = tensor::add(&tensor::matmul(x, &self.w_ih.transpose()), &self.b_ih);
        let gh = tensor::add(&tensor::matmul(h, &self.w_hh.transpose()), &self.b_hh);
        let r = tensor::add(&tensor::slice_cols(&gx, 0, d), &tensor::slice_cols(&gh, 0, d))
            .map(math::sigmoid);
        let z = tensor::add(&tensor::slice_cols(&gx, d, 2 * d), &tensor::slice_cols(&gh, d, 2 * d))
            .map(math::sigmoid);
        let hn = tensor::slice_cols(&gh, 2 * d, 3 * d);
        let n = tensor::add(&tensor::slice_cols(&gx, 2 * d, 3 * d), &tensor::mul(&r, &hn))
            .map(math::tanh);
        // (1 − z) ⊙ n + z ⊙ h
        let one_minus_z =
            tensor::add(&tensor::scale(&z, -1.0), &Tensor::full(z.rows(), z.cols(), 1.0));
        tensor::add(&tensor::mul(&one_minus_z, &n), &tensor::mul(&z, h))
    }

    /// Run over a sequence of row embeddings (`l × d`), returning the final
    /// hidden state (`1 × d`).
    pub fn run(&self, seq: &Tensor) -> Tensor {
        let mut h = Tensor::zeros(1, self.d());
        for t in 0..seq.rows() {
            let x = tensor::slice_rows(seq, t, t + 1);
            h = self.step(&x, &h);
        }
        h
    }
}

// ── Per-layer generator ──────────────────────────────────────────────

/// The extractor + hypernetwork triple for one maskable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGenerator {
    pub gru: GruCell,
    /// `(d_out·d_in) × d` element hypernetwork weight.
    pub hyper_w: Tensor,
    /// `1 × (d_out·d_in)` element hypernetwork bias.
    pub hyper_b: Tensor,
    /// `d_out × d` row hypernetwork weight.
    pub row_w: Tensor,
    /// `1 × d_out` row hypernetwork bias.
    pub row_b: Tensor,
}

/// One generator triple per maskable layer, plus the keep ratio — the whole
/// cloud-side apparatus. Never shipped to edges.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorStack {
    pub d: usize,
    pub keep_ratio: f64,
    /// Row-importance correction on (the full method) or off (element-only).
    pub use_correction: bool,
    pub layer_specs: Vec<LayerSpec>,
    pub layers: Vec<LayerGenerator>,
}

/// Parts of a layer generator, in parameter-iteration order.
const GEN_PARTS: [&str; 8] =
    ["w_ih", "w_hh", "b_ih", "b_hh", "hyper_w", "hyper_b", "row_w", "row_b"];

/// Base magnitude of the positive element-score bias at initialization.
///
/// The binarizer ranks by absolute value while its backward is the
/// straight-through identity, so the identity's sign is only right while a
/// score sits on the positive side. Starting every score at a positive
/// offset (with a positive random spread for a diverse initial ranking)
/// keeps early training in that regime; scores an element must lose cross
/// zero only under sustained pressure.
pub const SCORE_BIAS_BASE: f64 = 0.1;

/// Positive random score offsets: `base · (1 + |N(0,1)|)`.
pub fn positive_score_init(n: usize, base: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(1, n);
    for v in t.data_mut() {
        *v = base * (1.0 + math::abs(rng.next_normal()));
    }
    t
}

impl GeneratorStack {
    /// Fresh stack for a backbone: Xavier weights, zero biases, one triple
    /// per registry layer, drawn in registry order.
    pub fn init(
        backbone: &BackboneParams,
        keep_ratio: f64,
        use_correction: bool,
        rng: &mut Rng,
    ) -> GeneratorStack {
        let d = backbone.hyper.d;
        let layers = backbone
            .layers
            .iter()
            .map(|spec| LayerGenerator {
                gru: GruCell::init(d, rng),
                hyper_w: xavier_normal(spec.numel(), d, rng),
                hyper_b: positive_score_init(spec.numel(), SCORE_BIAS_BASE, rng),
                row_w: xavier_normal(spec.d_out, d, rng),
                row_b: Tensor::zeros(1, spec.d_out),
            })
            .collect();
        GeneratorStack {
            d,
            keep_ratio,
            use_correction,
            layer_specs: backbone.layers.clone(),
            layers,
        }
    }

    pub fn param_name(layer: &str, part: &str) -> String {
        format!("gen.{layer}.{part}")
    }

    fn part_ref<'t>(gen: &'t LayerGenerator, part: &str) -> &'t Tensor {
        match part {
            "w_ih" => &gen.gru.w_ih,
            "w_hh" => &gen.gru.w_hh,
            "b_ih" => &gen.gru.b_ih,
            "b_hh" => &gen.gru.b_hh,
            "hyper_w" => &gen.hyper_w,
            "hyper_b" => &gen.hyper_b,
            "row_w" => &gen.row_w,
            "row_b" => &gen.row_b,
            _ => unreachable!(),
        }
    }

    fn part_mut<'t>(gen: &'t mut LayerGenerator, part: &str) -> &'t mut Tensor {
        match part {
            "w_ih" => &mut gen.gru.w_ih,
            "w_hh" => &mut gen.gru.w_hh,
            "b_ih" => &mut gen.gru.b_ih,
            "b_hh" => &mut gen.gru.b_hh,
            "hyper_w" => &mut gen.hyper_w,
            "hyper_b" => &mut gen.hyper_b,
            "row_w" => &mut gen.row_w,
            "row_b" => &mut gen.row_b,
            _ => unreachable!(),
        }
    }

    fn trained_parts(&self) -> &'static [&'static str] {
        if self.use_correction {
            &GEN_PARTS
        } else {
            &GEN_PARTS[..6]
        }
    }

    /// Visit every trainable parameter in a fixed documented order.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (spec, gen) in self.layer_specs.iter().zip(self.layers.iter()) {
            for part in self.trained_parts() {
                f(&Self::param_name(&spec.name, part), Self::part_ref(gen, part));
            }
        }
    }

    /// Visit every trainable parameter mutably, same order as
    /// [`Self::for_each_param`].
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        let trained: &[&str] = if self.use_correction { &GEN_PARTS } else { &GEN_PARTS[..6] };
        for (spec, gen) in self.layer_specs.iter().zip(self.layers.iter_mut()) {
            for part in trained {
                f(&Self::param_name(&spec.name, part), Self::part_mut(gen, part));
            }
        }
    }
}

// ── Direct ops ───────────────────────────────────────────────────────

/// Final GRU state over a non-empty sequence of item embeddings.
pub fn extract_features(
    extractor: &GruCell,
    seq_embeddings: &Tensor,
) -> Result<Tensor, BackboneError> {
    if seq_embeddings.rows() == 0 {
        return Err(BackboneError::EmptySequence);
    }
    Ok(extractor.run(seq_embeddings))
}

/// Element scores for one layer: affine map of the extracted features,
/// reshaped row-major to the layer's `d_out × d_in`.
pub fn element_scores(gen: &LayerGenerator, features: &Tensor, spec: &LayerSpec) -> Tensor {
    assert_eq!(features.shape(), (1, gen.gru.d()), "feature vector must be 1 x d");
    let flat = tensor::add(&tensor::matmul(features, &gen.hyper_w.transpose()), &gen.hyper_b);
    flat.reshaped(spec.d_out, spec.d_in)
}

/// Row importance for one layer: softmax over the row hypernetwork logits.
/// Softmax keeps every entry positive so the absolute-value ranking in the
/// binarizer is not flipped by negative importances.
pub fn row_importance(gen: &LayerGenerator, features: &Tensor) -> Tensor {
    assert_eq!(features.shape(), (1, gen.gru.d()), "feature vector must be 1 x d");
    let logits = tensor::add(&tensor::matmul(features, &gen.row_w.transpose()), &gen.row_b);
    tensor::softmax_rows(&logits)
}

/// Scale every score row by its importance: `S̃[a,b] = S[a,b] · r[a]`.
pub fn correct_scores(scores: &Tensor, importance: &Tensor) -> Tensor {
    assert_eq!(importance.shape(), (1, scores.rows()), "importance length must match rows");
    let mut out = scores.clone();
    for a in 0..out.rows() {
        let r = importance.data()[a];
        for v in out.row_mut(a) {
            *v *= r;
        }
    }
    out
}

/// Hard top-k over the flattened scores: exactly
/// `max(1, round(keep_ratio·n))` ones at the largest absolute values, ties
/// to the lowest flat index.
pub fn binarize_topk(scores: &Tensor, keep_ratio: f64, spec: &LayerSpec) -> LayerMask {
    let n = scores.numel();
    assert!(n > 0, "empty layer");
    assert!(keep_ratio > 0.0 && keep_ratio <= 1.0, "keep_ratio must be in (0, 1]");
    let keep = keep_count_for(keep_ratio, n);
    let mask = topk_keep_mask(scores.data(), keep);
    LayerMask {
        name: spec.name.clone(),
        d_out: spec.d_out,
        d_in: spec.d_in,
        bits: mask.iter().map(|&v| v as u8).collect(),
        keep_count: keep,
    }
}

/// The straight-through gradient of the masked-weight product: the
/// binarizer passes the upstream gradient through unchanged, so the score
/// gradient is `upstream ⊙ w` at kept and dropped positions alike.
pub fn ste_backward(upstream: &Tensor, frozen_w: &Tensor) -> Tensor {
    assert_eq!(upstream.shape(), frozen_w.shape(), "shape mismatch");
    tensor::mul(upstream, frozen_w)
}

/// Generate the full per-layer diet for one user context. Pure function of
/// (stack parameters, sequence): the same context always produces the same
/// diet.
pub fn generate_diet(
    stack: &GeneratorStack,
    backbone: &BackboneParams,
    seq: &[usize],
) -> Result<Diet, BackboneError> {
    if seq.is_empty() {
        return Err(BackboneError::EmptySequence);
    }
    for &id in seq {
        if id >= backbone.n_items {
            return Err(BackboneError::UnknownItem { id, n_items: backbone.n_items });
        }
    }
    assert_eq!(stack.layer_specs.len(), backbone.layers.len(), "stack does not match registry");
    let window = backbone.window(seq);
    let embedded = tensor::gather_rows(&backbone.embedding, window);
    let mut layers = Vec::with_capacity(stack.layers.len());
    for (gen, spec) in stack.layers.iter().zip(stack.layer_specs.iter()) {
        let features = extract_features(&gen.gru, &embedded)?;
        let scores = element_scores(gen, &features, spec);
        let corrected = if stack.use_correction {
            let imp = row_importance(gen, &features);
            correct_scores(&scores, &imp)
        } else {
            scores
        };
        layers.push(binarize_topk(&corrected, stack.keep_ratio, spec));
    }
    Ok(Diet { keep_ratio: stack.keep_ratio, layers })
}

/// Mean fraction of rows per layer that survive (keep at least one bit),
/// without and with correction, over a set of user contexts — the data
/// series behind the zero-row analysis.
pub fn nonzero_row_fractions(
    stack: &GeneratorStack,
    backbone: &BackboneParams,
    contexts: &[Vec<usize>],
) -> Result<Vec<(String, f64, f64)>, BackboneError> {
    let mut uncorrected = stack.clone();
    uncorrected.use_correction = false;
    let mut corrected = stack.clone();
    corrected.use_correction = true;
    let nl = backbone.layers.len();
    let mut acc_un = vec![0.0f64; nl];
    let mut acc_co = vec![0.0f64; nl];
    for ctx in contexts {
        let du = generate_diet(&uncorrected, backbone, ctx)?;
        let dc = generate_diet(&corrected, backbone, ctx)?;
        for i in 0..nl {
            let rows = backbone.layers[i].d_out as f64;
            acc_un[i] += 1.0 - du.layers[i].zero_rows() as f64 / rows;
            acc_co[i] += 1.0 - dc.layers[i].zero_rows() as f64 / rows;
        }
    }
    let n = contexts.len().max(1) as f64;
    Ok(backbone
        .layers
        .iter()
        .enumerate()
        .map(|(i, spec)| (spec.name.clone(), acc_un[i] / n, acc_co[i] / n))
        .collect())
}

// ── Shared-buffer (single-layer) storage ─────────────────────────────

/// Xavier-initialized flat buffer shaped like the largest maskable layer.
pub fn init_shared_buffer(backbone: &BackboneParams, rng: &mut Rng) -> Vec<f64> {
    let largest = backbone
        .layers
        .iter()
        .max_by_key(|l| l.numel())
        .expect("backbone has at least one layer");
    xavier_normal(largest.d_out, largest.d_in, rng).into_data()
}

/// Rebind a backbone so every maskable layer aliases the prefix of one
/// shared buffer (registry-flattening row-major order). Weight storage
/// becomes the buffer itself; a later write to the buffer is visible through
/// every layer view.
pub fn dieting_bind(buffer: Vec<f64>, backbone: &mut BackboneParams) -> Result<(), BackboneError> {
    let needed = backbone.layers.iter().map(|l| l.numel()).max().unwrap_or(0);
    if buffer.len() < needed {
        return Err(BackboneError::BufferTooSmall { needed, have: buffer.len() });
    }
    backbone.store = WeightStore::Shared(buffer);
    Ok(())
}

// ── Batched generator graph ──────────────────────────────────────────

/// Leaf and output names used by the generator graph.
pub mod gen_leaves {
    pub fn step_ids(t: usize) -> alloc::string::String {
        alloc::format!("gen_step{t}")
    }

    /// Per-row index of the GRU state to read (`len − 1`).
    pub const SELECT: &str = "gen_sel";

    pub fn mask(layer: &str) -> alloc::string::String {
        alloc::format!("mask.{layer}")
    }
}

/// The batched mask-generation graph: `batch` user rows in, one binarized
/// mask row per user per layer out.
pub struct GeneratorGraph {
    pub graph: Graph,
    pub batch: usize,
    pub max_len: usize,
    /// Id used to pad step-id slots past a row's length (the extra zero
    /// embedding row).
    pub pad_id: usize,
}

/// The frozen embedding table plus one zero row at index `n_items` for
/// padding slots.
pub fn padded_embedding(backbone: &BackboneParams) -> Tensor {
    tensor::concat_rows(&backbone.embedding, &Tensor::zeros(1, backbone.hyper.d))
}

/// Build the batched generator graph. Per layer: unrolled GRU over
/// `max_len` gathered item embeddings, per-row state selection at `len−1`,
/// element scores, optional row-importance correction, hard binarization.
/// Outputs are named `mask.<layer>` (`batch × numel`), and backward seeds on
/// them flow straight through the binarizer into every generator parameter.
pub fn build_generator_graph(
    stack: &GeneratorStack,
    backbone: &BackboneParams,
    batch: usize,
) -> Result<GeneratorGraph, BackboneError> {
    let d = stack.d;
    let max_len = backbone.hyper.max_len;
    let mut g = Graph::new();
    let emb = g.constant(Arc::new(padded_embedding(backbone)));
    let mut step_ids = Vec::with_capacity(max_len);
    for t in 0..max_len {
        step_ids.push(g.ids(&gen_leaves::step_ids(t), batch)?);
    }
    let sel = g.ids(gen_leaves::SELECT, batch)?;
    let ones = g.constant(Arc::new(Tensor::full(batch, d, 1.0)));
    let h0 = g.constant(Arc::new(Tensor::zeros(batch, d)));

    for spec in stack.layer_specs.iter() {
        let name = &spec.name;
        let w_ih = g.param(&GeneratorStack::param_name(name, "w_ih"), 3 * d, d)?;
        let w_hh = g.param(&GeneratorStack::param_name(name, "w_hh"), 3 * d, d)?;
        let b_ih = g.param(&GeneratorStack::param_name(name, "b_ih"), 1, 3 * d)?;
        let b_hh = g.param(&GeneratorStack::param_name(name, "b_hh"), 1, 3 * d)?;
        let hyper_w = g.param(&GeneratorStack::param_name(name, "hyper_w"), spec.numel(), d)?;
        let hyper_b = g.param(&GeneratorStack::param_name(name, "hyper_b"), 1, spec.numel())?;

        let mut h = h0;
        let mut states = Vec::with_capacity(max_len);
        for &ids in &step_ids {
            let x = g.gather(emb, ids)?;
            // One GRU step, mirroring GruCell::step node for node.
            let wt = g.transpose(w_ih)?;
            let gx0 = g.matmul(x, wt)?;
            let gx = g.add(gx0, b_ih)?;
            let ht = g.transpose(w_hh)?;
            let gh0 = g.matmul(h, ht)?;
            let gh = g.add(gh0, b_hh)?;
            let rx = g.slice_cols(gx, 0, d)?;
            let rh = g.slice_cols(gh, 0, d)?;
            let r0 = g.add(rx, rh)?;
            let r = g.sigmoid(r0)?;
            let zx = g.slice_cols(gx, d, 2 * d)?;
            let zh = g.slice_cols(gh, d, 2 * d)?;
            let z0 = g.add(zx, zh)?;
            let z = g.sigmoid(z0)?;
            let hn = g.slice_cols(gh, 2 * d, 3 * d)?;
            let nx = g.slice_cols(gx, 2 * d, 3 * d)?;
            let rhn = g.mul(r, hn)?;
            let n0 = g.add(nx, rhn)?;
            let n = g.tanh(n0)?;
            let neg_z = g.scale(z, -1.0)?;
            let omz = g.add(neg_z, ones)?;
            let a = g.mul(omz, n)?;
            let b = g.mul(z, h)?;
            h = g.add(a, b)?;
            states.push(h);
        }
        let features = g.row_select(states, sel)?;
        let swt = g.transpose(hyper_w)?;
        let s0 = g.matmul(features, swt)?;
        let scores = g.add(s0, hyper_b)?;
        let corrected = if stack.use_correction {
            let row_w = g.param(&GeneratorStack::param_name(name, "row_w"), spec.d_out, d)?;
            let row_b = g.param(&GeneratorStack::param_name(name, "row_b"), 1, spec.d_out)?;
            let rwt = g.transpose(row_w)?;
            let l0 = g.matmul(features, rwt)?;
            let logits = g.add(l0, row_b)?;
            let imp = g.softmax_rows(logits)?;
            let expanded = g.repeat_interleave_cols(imp, spec.d_in)?;
            g.mul(scores, expanded)?
        } else {
            scores
        };
        let keep = keep_count_for(stack.keep_ratio, spec.numel());
        let mask =
            g.custom_grad(corrected, CustomGradRule::BinarizeTopkRows { keep_count: keep })?;
        g.mark_output(&gen_leaves::mask(name), mask);
    }

    Ok(GeneratorGraph { graph: g, batch, max_len, pad_id: backbone.n_items })
}

/// Bind a batch of variable-length contexts (each already window-truncated,
/// 1..=max_len items) into a generator-graph binding: left-aligned step ids
/// padded with `pad_id`, and the per-row state selector.
pub fn bind_generator_batch(
    gg: &GeneratorGraph,
    stack: &GeneratorStack,
    contexts: &[&[usize]],
    binding: &mut crate::graph::Binding,
) {
    assert_eq!(contexts.len(), gg.batch, "context count must equal graph batch");
    for t in 0..gg.max_len {
        let ids: Vec<usize> =
            contexts.iter().map(|c| if t < c.len() { c[t] } else { gg.pad_id }).collect();
        binding.bind_ids(&gen_leaves::step_ids(t), Arc::new(ids));
    }
    let sel: Vec<usize> = contexts
        .iter()
        .map(|c| {
            assert!(!c.is_empty() && c.len() <= gg.max_len, "contexts must be 1..=max_len");
            c.len() - 1
        })
        .collect();
    binding.bind_ids(gen_leaves::SELECT, Arc::new(sel));
    stack.for_each_param(|name, t| {
        binding.bind(name, Arc::new(t.clone()));
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{apply_diet, build_backbone, Arch, Hyper, MaskedBackbone};
    use crate::graph::Binding;

    fn toy_backbone() -> BackboneParams {
        let hyper = Hyper { d: 8, blocks: 1, heads: 2, max_len: 5, ..Hyper::default() };
        build_backbone(Arch::SasRec, 20, hyper, &mut Rng::new(3)).unwrap()
    }

    fn toy_spec(d_out: usize, d_in: usize) -> LayerSpec {
        LayerSpec {
            name: alloc::string::String::from("toy"),
            kind: crate::backbone::LayerKind::Linear,
            d_out,
            d_in,
        }
    }

    #[test]
    fn zero_gru_fixes_features_at_zero() {
        let cell = GruCell::zeros(4);
        let seq = Tensor::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.1).collect());
        let h = extract_features(&cell, &seq).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_computed_cell() {
        // d = 1, hand-picked scalars: w_ih = [1; 2; 3], w_hh zero, biases
        // b_ih = [0.1, 0.2, 0.3], b_hh = 0. With x = 0.5 and h0 = 0:
        //   r = sigmoid(0.6), z = sigmoid(1.2), n = tanh(1.8 + r·0),
        //   h' = (1−z)·n + z·0.
        let cell = GruCell {
            w_ih: Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]),
            w_hh: Tensor::zeros(3, 1),
            b_ih: Tensor::from_vec(1, 3, vec![0.1, 0.2, 0.3]),
            b_hh: Tensor::zeros(1, 3),
        };
        let seq = Tensor::from_vec(1, 1, vec![0.5]);
        let h = extract_features(&cell, &seq).unwrap();
        let z = math::sigmoid(1.2);
        let n = math::tanh(1.8);
        let expect = (1.0 - z) * n;
        assert!((h.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn gru_is_order_sensitive() {
        let cell = GruCell::init(8, &mut Rng::new(5));
        let a = xavier_normal(3, 8, &mut Rng::new(6));
        let mut swapped = a.clone();
        for c in 0..8 {
            let tmp = swapped.at(0, c);
            let v2 = swapped.at(2, c);
            swapped.set(0, c, v2);
            swapped.set(2, c, tmp);
        }
        let h1 = extract_features(&cell, &a).unwrap();
        let h2 = extract_features(&cell, &swapped).unwrap();
        assert_ne!(h1.data(), h2.data());
    }

    #[test]
    fn element_scores_zero_weights_reproduce_bias() {
        let spec = toy_spec(2, 3);
        let mut gen = LayerGenerator {
            gru: GruCell::zeros(4),
            hyper_w: Tensor::zeros(6, 4),
            hyper_b: Tensor::from_vec(1, 6, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            row_w: Tensor::zeros(2, 4),
            row_b: Tensor::zeros(1, 2),
        };
        let features = Tensor::row_vec(vec![0.3, -0.1, 0.9, 0.0]);
        let s = element_scores(&gen, &features, &spec);
        assert_eq!(s.shape(), (2, 3));
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        // And the general case equals the dense matmul oracle.
        gen.hyper_w = xavier_normal(6, 4, &mut Rng::new(9));
        let s2 = element_scores(&gen, &features, &spec);
        let oracle =
            tensor::add(&tensor::matmul(&features, &gen.hyper_w.transpose()), &gen.hyper_b);
        assert_eq!(s2.data(), oracle.data());
    }

    #[test]
    fn different_features_different_scores() {
        let spec = toy_spec(2, 2);
        let gen = LayerGenerator {
            gru: GruCell::zeros(3),
            hyper_w: xavier_normal(4, 3, &mut Rng::new(11)),
            hyper_b: Tensor::zeros(1, 4),
            row_w: Tensor::zeros(2, 3),
            row_b: Tensor::zeros(1, 2),
        };
        let f1 = Tensor::row_vec(vec![1.0, 0.0, 0.0]);
        let f2 = Tensor::row_vec(vec![0.0, 1.0, 0.0]);
        assert_ne!(
            element_scores(&gen, &f1, &spec).data(),
            element_scores(&gen, &f2, &spec).data()
        );
    }

    #[test]
    fn row_importance_is_a_softmax() {
        let gen = LayerGenerator {
            gru: GruCell::zeros(2),
            hyper_w: Tensor::zeros(4, 2),
            hyper_b: Tensor::zeros(1, 4),
            row_w: Tensor::zeros(2, 2),
            row_b: Tensor::from_vec(1, 2, vec![0.0, 0.0]),
        };
        let f = Tensor::row_vec(vec![0.0, 0.0]);
        // Zero logits → uniform.
        assert_eq!(row_importance(&gen, &f).data(), &[0.5, 0.5]);

        // Logits [ln 1, ln 2] → [1/3, 2/3].
        let gen2 = LayerGenerator {
            row_b: Tensor::from_vec(1, 2, vec![0.0, math::ln(2.0)]),
            ..gen.clone()
        };
        let imp = row_importance(&gen2, &f);
        assert!((imp.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((imp.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        let sum: f64 = imp.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(imp.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn correct_scores_is_row_scaling() {
        let s = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let r = Tensor::row_vec(vec![0.5, 0.5]);
        assert_eq!(correct_scores(&s, &r).data(), &[0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn uniform_importance_preserves_selection() {
        let spec = toy_spec(3, 4);
        let mut rng = Rng::new(21);
        for _ in 0..50 {
            let s = xavier_normal(3, 4, &mut rng);
            let uniform = Tensor::full(1, 3, 1.0 / 3.0);
            let plain = binarize_topk(&s, 0.5, &spec);
            let scaled = binarize_topk(&correct_scores(&s, &uniform), 0.5, &spec);
            assert_eq!(plain.bits, scaled.bits);
        }
    }

    #[test]
    fn skewed_importance_empties_a_row() {
        let spec = toy_spec(2, 2);
        let s = Tensor::from_vec(2, 2, vec![9.0, 9.0, 1.0, 1.0]);
        let r = Tensor::row_vec(vec![0.001, 0.999]);
        let mask = binarize_topk(&correct_scores(&s, &r), 0.5, &spec);
        // |S̃| = [[0.009, 0.009], [0.999, 0.999]]: both keeps land in row 1.
        assert_eq!(mask.bits, vec![0, 0, 1, 1]);
        assert_eq!(mask.zero_rows(), 1);
    }

    #[test]
    fn binarize_hand_case_and_keep_all() {
        let spec = toy_spec(1, 4);
        let s = Tensor::row_vec(vec![0.5, -0.9, 0.1, 0.3]);
        assert_eq!(binarize_topk(&s, 0.5, &spec).bits, vec![1, 1, 0, 0]);
        assert_eq!(binarize_topk(&s, 1.0, &spec).bits, vec![1, 1, 1, 1]);
    }

    #[test]
    fn binarize_matches_independent_sort_oracle() {
        // Brute-force oracle: full sort on (|v| desc, index asc).
        let mut rng = Rng::new(33);
        for round in 0..200 {
            let n = 1 + rng.next_usize(64);
            let mut vals = vec![0.0f64; n];
            for v in vals.iter_mut() {
                *v = rng.next_normal();
                // Inject ties now and then.
                if rng.next_usize(4) == 0 {
                    *v = math::round_half_up(*v * 2.0) / 2.0;
                }
            }
            let keep_ratio = (rng.next_usize(100) + 1) as f64 / 100.0;
            let spec = toy_spec(1, n);
            let got = binarize_topk(&Tensor::row_vec(vals.clone()), keep_ratio, &spec);

            let keep = keep_count_for(keep_ratio, n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                math::abs(vals[b]).total_cmp(&math::abs(vals[a])).then(a.cmp(&b))
            });
            let mut expect = vec![0u8; n];
            for &i in &order[..keep] {
                expect[i] = 1;
            }
            assert_eq!(got.bits, expect, "round {round}");
            assert_eq!(got.popcount(), keep);
        }
    }

    #[test]
    fn ste_backward_unit_upstream_returns_weights() {
        let w = xavier_normal(3, 3, &mut Rng::new(41));
        let up = Tensor::full(3, 3, 1.0);
        assert_eq!(ste_backward(&up, &w).data(), w.data());
        // A dropped position (mask bit 0) still receives w-weighted gradient.
        assert!(ste_backward(&up, &w).data()[0] != 0.0);
    }

    #[test]
    fn ste_end_to_end_matches_hand_chain() {
        // Graph: scores (param) → binarize → ⊙ w → weighted sum. The score
        // gradient must be c ⊙ w, at dropped entries too.
        let mut g = Graph::new();
        let s = g.param("s", 2, 2).unwrap();
        let m = g.custom_grad(s, CustomGradRule::BinarizeTopkRows { keep_count: 1 }).unwrap();
        let w = g.constant(Arc::new(Tensor::from_vec(2, 2, vec![2.0, -3.0, 0.5, 4.0])));
        let eff = g.mul(w, m).unwrap();
        let c = g.constant(Arc::new(Tensor::from_vec(2, 2, vec![1.0, 10.0, 100.0, 1000.0])));
        let weighted = g.mul(eff, c).unwrap();
        let loss = g.reduce_sum(weighted).unwrap();
        g.mark_output("loss", loss);
        let mut bind = Binding::new();
        bind.bind_tensor("s", Tensor::from_vec(2, 2, vec![0.9, 0.1, -0.2, 0.8]));
        let eval = g.forward(&bind).unwrap();
        let grads = eval.backward(&[("loss", Tensor::scalar(1.0))]).unwrap();
        // d loss/d eff = c; d eff/d m = w; STE: d loss/d s = c ⊙ w.
        assert_eq!(grads.get("s").unwrap().data(), &[2.0, -30.0, 50.0, 4000.0]);
    }

    #[test]
    fn generate_diet_is_deterministic_and_keep_all_is_identity() {
        let b = toy_backbone();
        let stack = GeneratorStack::init(&b, 1.0, true, &mut Rng::new(2));
        let seq = vec![1, 4, 9];
        let d1 = generate_diet(&stack, &b, &seq).unwrap();
        let d2 = generate_diet(&stack, &b, &seq).unwrap();
        assert_eq!(d1, d2);
        assert!(d1.layers.iter().all(|m| m.popcount() == m.numel()));
        let mb = apply_diet(&b, &d1).unwrap();
        let dense = MaskedBackbone::dense(&b);
        assert_eq!(mb.forward_scores_all(&seq).unwrap(), dense.forward_scores_all(&seq).unwrap());
    }

    #[test]
    fn distinct_histories_get_distinct_diets() {
        let b = toy_backbone();
        let stack = GeneratorStack::init(&b, 0.3, true, &mut Rng::new(8));
        let d1 = generate_diet(&stack, &b, &[1, 2, 3]).unwrap();
        let d2 = generate_diet(&stack, &b, &[10, 11, 12]).unwrap();
        assert_ne!(d1, d2);
    }

    #[test]
    fn mask_cardinality_is_exact() {
        let b = toy_backbone();
        for &kr in &[0.05, 0.1, 0.33, 0.5, 0.9] {
            let stack = GeneratorStack::init(&b, kr, true, &mut Rng::new(14));
            let diet = generate_diet(&stack, &b, &[2, 5]).unwrap();
            for (m, spec) in diet.layers.iter().zip(b.layers.iter()) {
                assert_eq!(m.popcount(), keep_count_for(kr, spec.numel()));
            }
        }
    }

    #[test]
    fn shared_buffer_aliases_every_layer_prefix() {
        let mut b = toy_backbone();
        let buf = init_shared_buffer(&b, &mut Rng::new(77));
        dieting_bind(buf, &mut b).unwrap();
        // Equal-size layers read identical weights.
        let w0 = b.layer_weight(0);
        let w5 = b.layer_weight(5);
        assert_eq!(w0.data(), w5.data());
        // A buffer write shows through every view.
        if let WeightStore::Shared(buf) = &mut b.store {
            buf[0] = 7.0;
        }
        for i in 0..b.layers.len() {
            assert_eq!(b.layer_weight_slice(i)[0], 7.0);
        }
    }

    #[test]
    fn shared_buffer_too_small_is_rejected() {
        let mut b = toy_backbone();
        assert!(matches!(
            dieting_bind(vec![0.0; 3], &mut b),
            Err(BackboneError::BufferTooSmall { .. })
        ));
    }

    /// The batched generator graph and the direct path produce identical
    /// masks for a mixed-length batch, including padded rows.
    #[test]
    fn generator_graph_matches_direct_generation() {
        let b = toy_backbone();
        for correction in [false, true] {
            let stack = GeneratorStack::init(&b, 0.25, correction, &mut Rng::new(19));
            let gg = build_generator_graph(&stack, &b, 4).unwrap();
            let contexts: Vec<Vec<usize>> =
                vec![vec![1], vec![3, 7, 2], vec![5, 5, 5, 5, 5], vec![8, 0]];
            let refs: Vec<&[usize]> = contexts.iter().map(|c| c.as_slice()).collect();
            let mut bind = Binding::new();
            bind_generator_batch(&gg, &stack, &refs, &mut bind);
            let eval = gg.graph.forward(&bind).unwrap();
            for (row, ctx) in contexts.iter().enumerate() {
                let direct = generate_diet(&stack, &b, ctx).unwrap();
                for (li, spec) in b.layers.iter().enumerate() {
                    let out = eval.output(&gen_leaves::mask(&spec.name)).unwrap();
                    let got: Vec<u8> = out.row(row).iter().map(|&v| v as u8).collect();
                    assert_eq!(got, direct.layers[li].bits, "row {row} layer {}", spec.name);
                }
            }
        }
    }

    #[test]
    fn trained_part_listing_respects_correction_flag() {
        let b = toy_backbone();
        let with = GeneratorStack::init(&b, 0.2, true, &mut Rng::new(1));
        let without = GeneratorStack::init(&b, 0.2, false, &mut Rng::new(1));
        let mut n_with = 0;
        let mut n_without = 0;
        with.for_each_param(|_, _| n_with += 1);
        without.for_each_param(|_, _| n_without += 1);
        assert_eq!(n_with, b.layers.len() * 8);
        assert_eq!(n_without, b.layers.len() * 6);
    }
}
