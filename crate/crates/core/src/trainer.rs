//! Cloud-side optimization: Adam with a triangular learning-rate schedule
//! over the six training modes.
//!
//! * `base` — dense training of the backbone itself (embeddings, positions,
//!   weights, biases).
//! * `random-prune` — a fixed seeded random mask at the keep ratio; the
//!   surviving weights train dense-style.
//! * `mask-only` — backbone frozen; one global score map per layer learns a
//!   shared mask through the straight-through binarizer.
//! * `mask-gen` — backbone frozen; per-layer extractors + element
//!   hypernetworks learn personalized masks (no row correction).
//! * `diet` — `mask-gen` plus row-importance correction.
//! * `dieting` — `diet` with every layer aliasing one shared trainable
//!   buffer, so edge storage is a single layer plus masks.
//!
//! The loss is binary cross-entropy with sampled negatives, computed in its
//! softplus form so perfect separation stays finite. Per optimizer step the
//! batch is: generator graph forward (batched over samples), per-sample
//! masked-backbone forward/backward, straight-through seeds back through the
//! generator graph, fixed-order gradient reduction, one Adam update.
//! Everything is seeded and the reduction order is fixed, so two runs with
//! one config are bitwise identical.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{
    apply_diet_unchecked, build_train_graph, leaves, BackboneError, BackboneParams, Diet,
    MaskSource, MaskedBackbone, TrainGraph, WeightSource, WeightStore,
};
use crate::data::{build_sequences, Sample, SplitResult, TestCase};
use crate::dietgen::{
    build_generator_graph, dieting_bind, gen_leaves, generate_diet,
    init_shared_buffer, GeneratorStack,
};
use crate::graph::{Binding, GraphError};
use crate::math;
use crate::metrics::{evaluate, EvalError, MetricSummary};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

// ── Config ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Base,
    RandomPrune,
    MaskOnly,
    MaskGen,
    Diet,
    Dieting,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::RandomPrune => "random-prune",
            Mode::MaskOnly => "mask-only",
            Mode::MaskGen => "mask-gen",
            Mode::Diet => "diet",
            Mode::Dieting => "dieting",
        }
    }

    pub fn from_name(s: &str) -> Option<Mode> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Some(Mode::Base),
            "random-prune" | "random" => Some(Mode::RandomPrune),
            "mask-only" | "mask" => Some(Mode::MaskOnly),
            "mask-gen" | "mg" => Some(Mode::MaskGen),
            "diet" => Some(Mode::Diet),
            "dieting" => Some(Mode::Dieting),
            _ => None,
        }
    }

    /// Modes that train mask generators.
    pub fn uses_generator(&self) -> bool {
        matches!(self, Mode::MaskGen | Mode::Diet | Mode::Dieting)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub keep_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the triangular schedule (0.001 for the small
    /// MovieLens-scale runs, 0.1 for the larger catalogs).
    pub lr_base: f64,
    /// Schedule period in optimizer steps; `None` stretches one triangle
    /// over the whole run.
    pub cycle_length: Option<usize>,
    pub seed: u64,
    pub negatives_per_positive: usize,
    /// Cap on training positions per user per epoch, taken from the end of
    /// the sequence (the most recent window). `None` uses every prefix.
    pub positions_per_user: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Diet,
            keep_ratio: 0.1,
            epochs: 200,
            batch_size: 32,
            lr_base: 0.001,
            cycle_length: None,
            seed: 17,
            negatives_per_positive: 1,
            positions_per_user: Some(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Config(String),
    EmptyTrainingSplit,
    Backbone(BackboneError),
    Graph(GraphError),
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Config(s) => write!(f, "bad config: {s}"),
            TrainError::EmptyTrainingSplit => write!(f, "empty training split"),
            TrainError::Backbone(e) => write!(f, "{e}"),
            TrainError::Graph(e) => write!(f, "{e}"),
        }
    }
}

impl From<BackboneError> for TrainError {
    fn from(e: BackboneError) -> Self {
        TrainError::Backbone(e)
    }
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Graph(e)
    }
}

// ── Loss and schedule ────────────────────────────────────────────────

/// Binary cross-entropy with sampled negatives, in softplus form:
/// `softplus(−s⁺) + Σ softplus(s⁻)`. Equals
/// `−ln σ(s⁺) − Σ ln(1 − σ(s⁻))` but stays finite for any finite scores.
pub fn compute_loss(score_target: f64, negative_scores: &[f64]) -> f64 {
    let mut loss = math::softplus(-score_target);
    for &s in negative_scores {
        loss += math::softplus(s);
    }
    loss
}

/// Triangular schedule: linear 0 → `lr_base` over the first half cycle,
/// back to 0 over the second, repeating.
pub fn triangular_lr(step: usize, lr_base: f64, cycle_length: usize) -> f64 {
    assert!(cycle_length >= 2, "cycle length must be at least 2");
    let pos = (step % cycle_length) as f64;
    let half = cycle_length as f64 / 2.0;
    lr_base * (1.0 - math::abs(pos - half) / half)
}

// ── Adam ─────────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moment estimates plus the shared step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter (call once per optimizer step,
    /// before the per-parameter updates).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Standard bias-corrected Adam update for one named parameter.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        assert_eq!(param.shape(), grad.shape(), "grad shape mismatch for {name}");
        assert!(grad.is_finite_all(), "non-finite gradient for {name}");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.rows(), param.cols()), Tensor::zeros(param.rows(), param.cols())));
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
        let bc2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
        let pd = param.data_mut();
        for i in 0..pd.len() {
            let g = grad.data()[i];
            let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * g;
            let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            pd[i] -= lr * m_hat / (math::sqrt(v_hat) + ADAM_EPS);
        }
    }
}

// ── Executor ─────────────────────────────────────────────────────────

/// Fan-out hook for batch work. Implementations must return results in
/// task-index order; the trainer reduces them sequentially so the float
/// summation order is fixed no matter how tasks were scheduled.
pub trait Executor {
    fn map_collect<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T>;
}

/// Runs tasks inline on the calling thread.
pub struct SerialExecutor;

impl Executor for SerialExecutor {
    fn map_collect<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        (0..n).map(f).collect()
    }
}

// ── Training artifacts ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Everything a run produces besides the (possibly updated) backbone.
pub struct TrainOutcome {
    pub stack: Option<GeneratorStack>,
    /// One global score map per layer (`mask-only` mode).
    pub score_maps: Option<Vec<Tensor>>,
    /// The fixed mask of a `random-prune` run.
    pub fixed_diet: Option<Diet>,
    pub log: Vec<StepRecord>,
    pub final_epoch_loss: f64,
}

// ── Parameter store ──────────────────────────────────────────────────

/// Named tensors bound into graphs per evaluation and updated in place by
/// Adam between bindings.
struct ParamSet {
    map: BTreeMap<String, Arc<Tensor>>,
    /// Insertion order, fixed for the whole run; Adam walks it.
    order: Vec<String>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet { map: BTreeMap::new(), order: Vec::new() }
    }

    fn insert(&mut self, name: &str, t: Tensor) {
        if self.map.insert(name.to_string(), Arc::new(t)).is_none() {
            self.order.push(name.to_string());
        }
    }

    fn bind_all(&self, b: &mut Binding) {
        for (k, v) in &self.map {
            b.bind(k, v.clone());
        }
    }

    fn get(&self, name: &str) -> &Tensor {
        self.map.get(name).expect("param present")
    }

    fn get_mut(&mut self, name: &str) -> &mut Tensor {
        Arc::make_mut(self.map.get_mut(name).expect("param present"))
    }
}

/// Gradient accumulator with fixed-order merge.
#[derive(Default)]
struct GradSet {
    map: BTreeMap<String, Tensor>,
}

impl GradSet {
    fn add(&mut self, name: &str, g: &Tensor) {
        match self.map.get_mut(name) {
            Some(acc) => tensor::add_assign(acc, g),
            None => {
                self.map.insert(name.to_string(), g.clone());
            }
        }
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

// ── fit ──────────────────────────────────────────────────────────────

fn validate_config(cfg: &TrainConfig) -> Result<(), TrainError> {
    if !(cfg.keep_ratio > 0.0 && cfg.keep_ratio <= 1.0) {
        return Err(TrainError::Config(format!("keep_ratio {} outside (0, 1]", cfg.keep_ratio)));
    }
    if cfg.lr_base <= 0.0 {
        return Err(TrainError::Config("lr_base must be positive".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be >= 1".into()));
    }
    if cfg.negatives_per_positive == 0 {
        return Err(TrainError::Config("need at least one negative per positive".into()));
    }
    if let Some(c) = cfg.cycle_length {
        if c < 2 {
            return Err(TrainError::Config("cycle_length must be >= 2".into()));
        }
    }
    Ok(())
}

/// Training samples per the config: every sliding-window prefix, optionally
/// capped to the most recent `positions_per_user` per sequence.
fn training_samples(cfg: &TrainConfig, split: &SplitResult, max_len: usize) -> Vec<Sample> {
    let all = build_sequences(&split.train_seqs, max_len);
    match cfg.positions_per_user {
        None => all,
        Some(k) => {
            // Samples are emitted per sequence in position order; keep the
            // last k of each sequence.
            let mut counts = vec![0usize; split.train_seqs.len()];
            for s in &all {
                counts[s.seq_index] += 1;
            }
            let mut kept = Vec::new();
            let mut seen = vec![0usize; split.train_seqs.len()];
            for s in all {
                seen[s.seq_index] += 1;
                if seen[s.seq_index] + k > counts[s.seq_index] {
                    kept.push(s);
                }
            }
            kept
        }
    }
}

fn sample_negatives(
    rng: &mut Rng,
    n_items: usize,
    target: usize,
    context: &[usize],
    count: usize,
) -> Vec<usize> {
    let mut negs = Vec::with_capacity(count);
    let mut guard = 0usize;
    while negs.len() < count {
        let cand = rng.next_usize(n_items);
        guard += 1;
        if guard > 100 * (count + 1) {
            // Degenerate catalogs: fall back to any non-target id.
            if cand != target {
                negs.push(cand);
            }
            continue;
        }
        if cand == target || context.contains(&cand) || negs.contains(&cand) {
            continue;
        }
        negs.push(cand);
    }
    negs
}

/// Train per the config. The backbone is mutated only in the dense modes
/// (`base`, `random-prune`: trained weights written back) and in `dieting`
/// (the shared buffer is trained and written back). In every other mode it
/// is bitwise untouched.
pub fn fit<E: Executor>(
    cfg: &TrainConfig,
    split: &SplitResult,
    backbone: &mut BackboneParams,
    exec: &E,
) -> Result<TrainOutcome, TrainError> {
    validate_config(cfg)?;
    let max_len = backbone.hyper.max_len;
    let samples = training_samples(cfg, split, max_len);
    if samples.is_empty() {
        return Err(TrainError::EmptyTrainingSplit);
    }
    if backbone.n_items < cfg.negatives_per_positive + 2 {
        return Err(TrainError::Config("catalog too small for negative sampling".into()));
    }

    let root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.derive(1);
    let mut neg_rng = root.derive(2);
    let mut init_rng = root.derive(3);

    // DIETING rebinds weight storage to the shared buffer up front so the
    // training graphs read the right layout.
    if cfg.mode == Mode::Dieting {
        if !matches!(backbone.store, WeightStore::Shared(_)) {
            let buf = init_shared_buffer(backbone, &mut init_rng);
            dieting_bind(buf, backbone)?;
        }
    }

    let n_cand = 1 + cfg.negatives_per_positive;
    let (weight_source, mask_source) = match cfg.mode {
        Mode::Base => (WeightSource::Trainable, MaskSource::None),
        Mode::RandomPrune => (WeightSource::Trainable, MaskSource::InputPerLayer),
        Mode::MaskOnly => {
            (WeightSource::Frozen, MaskSource::ParamScores { keep_ratio: cfg.keep_ratio })
        }
        Mode::MaskGen | Mode::Diet => (WeightSource::Frozen, MaskSource::InputPerLayer),
        Mode::Dieting => (WeightSource::SharedTrainable, MaskSource::InputPerLayer),
    };
    let graphs: Vec<TrainGraph> = (1..=max_len)
        .map(|l| build_train_graph(backbone, l, n_cand, weight_source, mask_source))
        .collect::<Result<_, _>>()?;

    // Trainable parameter store.
    let mut params = ParamSet::new();
    match cfg.mode {
        Mode::Base | Mode::RandomPrune => {
            params.insert(leaves::EMBEDDING, backbone.embedding.clone());
            params.insert(leaves::POSITIONAL, backbone.positional.clone());
            for (i, spec) in backbone.layers.iter().enumerate() {
                params.insert(&leaves::weight(&spec.name), backbone.layer_weight(i));
                params.insert(&leaves::bias(&spec.name), backbone.biases[i].clone());
            }
        }
        Mode::MaskOnly => {
            // Positive-side score init: see dietgen::SCORE_BIAS_BASE.
            for spec in &backbone.layers {
                params.insert(
                    &leaves::score(&spec.name),
                    crate::dietgen::positive_score_init(
                        spec.numel(),
                        crate::dietgen::SCORE_BIAS_BASE,
                        &mut init_rng,
                    ),
                );
            }
        }
        Mode::MaskGen | Mode::Diet | Mode::Dieting => {
            if cfg.mode == Mode::Dieting {
                if let WeightStore::Shared(buf) = &backbone.store {
                    params.insert(leaves::W_MAX, Tensor::from_vec(1, buf.len(), buf.clone()));
                }
            }
        }
    }

    // Generator stack for the personalized modes.
    let mut stack = if cfg.mode.uses_generator() {
        let s = GeneratorStack::init(
            backbone,
            cfg.keep_ratio,
            matches!(cfg.mode, Mode::Diet | Mode::Dieting),
            &mut init_rng,
        );
        s.for_each_param(|name, t| params.insert(name, t.clone()));
        Some(s)
    } else {
        None
    };

    let fixed_diet = if cfg.mode == Mode::RandomPrune {
        Some(Diet::random(backbone, cfg.keep_ratio, &mut init_rng))
    } else {
        None
    };

    // Generator chunking: the graph batches this many sample rows.
    let gen_chunk = cfg.batch_size.min(32).max(1);
    let gen_graph = match &stack {
        Some(s) => Some(build_generator_graph(s, backbone, gen_chunk)?),
        None => None,
    };

    let n_batches = samples.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * n_batches).max(2);
    let cycle = cfg.cycle_length.unwrap_or(total_steps).max(2);

    let mut adam = AdamState::new();
    let mut log = Vec::with_capacity(cfg.epochs * n_batches);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_loss = 0.0;

    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        epoch_loss = 0.0;
        for batch_idx in 0..n_batches {
            let lo = batch_idx * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(samples.len());
            let batch: Vec<&Sample> = order[lo..hi].iter().map(|&i| &samples[i]).collect();
            // Negatives are drawn in batch order from one stream —
            // scheduling cannot reorder them.
            let negatives: Vec<Vec<usize>> = batch
                .iter()
                .map(|s| {
                    sample_negatives(
                        &mut neg_rng,
                        backbone.n_items,
                        s.target,
                        &s.context,
                        cfg.negatives_per_positive,
                    )
                })
                .collect();

            let step = adam.step_count() as usize;
            let lr = triangular_lr(step, cfg.lr_base, cycle);
            let (loss_sum, acc) = match (&stack, &gen_graph) {
                (Some(s), Some(gg)) => run_generator_batch(
                    backbone, &graphs, s, gg, &params, &batch, &negatives, exec,
                )?,
                _ => run_plain_batch(&graphs, &params, fixed_diet.as_ref(), &batch, &negatives, exec)?,
            };
            apply_adam(&mut params, acc, &mut adam, lr, batch.len());
            let loss = loss_sum / batch.len() as f64;
            epoch_loss += loss_sum;
            log.push(StepRecord { epoch, step, lr, loss });
        }
        epoch_loss /= samples.len() as f64;
    }

    // Write trained parameters back where the mode owns them.
    match cfg.mode {
        Mode::Base | Mode::RandomPrune => {
            backbone.embedding = params.get(leaves::EMBEDDING).clone();
            backbone.positional = params.get(leaves::POSITIONAL).clone();
            let mut weights = Vec::with_capacity(backbone.layers.len());
            for spec in &backbone.layers {
                weights.push(params.get(&leaves::weight(&spec.name)).clone());
            }
            backbone.store = WeightStore::PerLayer(weights);
            for (i, spec) in backbone.layers.iter().enumerate() {
                backbone.biases[i] = params.get(&leaves::bias(&spec.name)).clone();
            }
        }
        Mode::Dieting => {
            if let WeightStore::Shared(buf) = &mut backbone.store {
                *buf = params.get(leaves::W_MAX).data().to_vec();
            }
        }
        _ => {}
    }
    if let Some(s) = &mut stack {
        s.for_each_param_mut(|name, t| {
            *t = params.get(name).clone();
        });
    }
    let score_maps = if cfg.mode == Mode::MaskOnly {
        Some(
            backbone
                .layers
                .iter()
                .map(|spec| params.get(&leaves::score(&spec.name)).clone())
                .collect(),
        )
    } else {
        None
    };

    Ok(TrainOutcome { stack, score_maps, fixed_diet, log, final_epoch_loss: epoch_loss })
}

/// Gradient pass for the dense / shared-score modes: per-sample
/// forward/backward fanned out over the executor, fixed-order reduction.
/// Returns the summed batch loss and accumulated gradients.
fn run_plain_batch<E: Executor>(
    graphs: &[TrainGraph],
    params: &ParamSet,
    fixed_diet: Option<&Diet>,
    batch: &[&Sample],
    negatives: &[Vec<usize>],
    exec: &E,
) -> Result<(f64, GradSet), TrainError> {
    type SampleOut = Result<(f64, crate::graph::Gradients), TrainError>;
    let run_one = |i: usize| -> SampleOut {
        let sample = batch[i];
        let len = sample.context.len().min(graphs.len());
        let tg = &graphs[len - 1];
        let mut bind = Binding::new();
        params.bind_all(&mut bind);
        let ctx: Vec<usize> = sample.context[sample.context.len() - len..].to_vec();
        bind.bind_ids(leaves::CTX_IDS, Arc::new(ctx));
        let mut cand = vec![sample.target];
        cand.extend_from_slice(&negatives[i]);
        bind.bind_ids(leaves::CAND_IDS, Arc::new(cand));
        if let Some(diet) = fixed_diet {
            for m in &diet.layers {
                bind.bind_tensor(
                    &leaves::mask(&m.name),
                    Tensor::from_vec(1, m.numel(), m.bits.iter().map(|&b| b as f64).collect()),
                );
            }
        }
        let eval = tg.graph.forward(&bind).map_err(TrainError::Graph)?;
        let loss = eval.output(leaves::LOSS).map_err(TrainError::Graph)?.data()[0];
        let grads =
            eval.backward(&[(leaves::LOSS, Tensor::scalar(1.0))]).map_err(TrainError::Graph)?;
        Ok((loss, grads))
    };
    let outs = exec.map_collect(batch.len(), &run_one);

    let mut acc = GradSet::default();
    let mut loss_sum = 0.0;
    for out in outs {
        let (loss, grads) = out?;
        loss_sum += loss;
        for (name, g) in grads.iter() {
            if params.map.contains_key(name) {
                acc.add(name, g);
            }
        }
    }
    Ok((loss_sum, acc))
}

/// Gradient pass for the generator modes: batched mask generation,
/// per-sample masked backbone passes, straight-through seeds back into the
/// generator graph, fixed-order reduction. Returns the summed batch loss
/// and accumulated gradients.
#[allow(clippy::too_many_arguments)]
fn run_generator_batch<E: Executor>(
    backbone: &BackboneParams,
    graphs: &[TrainGraph],
    stack: &GeneratorStack,
    gen_graph: &crate::dietgen::GeneratorGraph,
    params: &ParamSet,
    batch: &[&Sample],
    negatives: &[Vec<usize>],
    exec: &E,
) -> Result<(f64, GradSet), TrainError> {
    let max_len = backbone.hyper.max_len;
    let chunk = gen_graph.batch;
    let n_chunks = batch.len().div_ceil(chunk);
    let layer_names: Vec<&str> = backbone.layers.iter().map(|l| l.name.as_str()).collect();

    type ChunkOut = Result<(f64, GradSet), TrainError>;
    let run_chunk = |ci: usize| -> ChunkOut {
        let lo = ci * chunk;
        let hi = (lo + chunk).min(batch.len());
        let real = hi - lo;
        // Pad the chunk with the first context; padded rows get zero seeds.
        let contexts: Vec<&[usize]> = (0..chunk)
            .map(|r| {
                let s = batch[lo + r.min(real - 1)];
                let c = &s.context;
                &c[c.len() - c.len().min(max_len)..]
            })
            .collect();
        let mut gbind = Binding::new();
        // Current stack params come from the shared store, not the stale
        // stack struct.
        for t in 0..gen_graph.max_len {
            let ids: Vec<usize> = contexts
                .iter()
                .map(|c| if t < c.len() { c[t] } else { gen_graph.pad_id })
                .collect();
            gbind.bind_ids(&gen_leaves::step_ids(t), Arc::new(ids));
        }
        let sel: Vec<usize> = contexts.iter().map(|c| c.len() - 1).collect();
        gbind.bind_ids(gen_leaves::SELECT, Arc::new(sel));
        stack.for_each_param(|name, _| {
            gbind.bind(name, params.map.get(name).expect("stack param in store").clone());
        });
        let gen_eval = gen_graph.graph.forward(&gbind).map_err(TrainError::Graph)?;

        // Per-sample backbone pass; gather straight-through seeds.
        let mut seeds: BTreeMap<&str, Tensor> = layer_names
            .iter()
            .map(|&n| {
                let numel =
                    backbone.layers.iter().find(|l| l.name == n).unwrap().numel();
                (n, Tensor::zeros(chunk, numel))
            })
            .collect();
        let mut loss_sum = 0.0;
        for r in 0..real {
            let sample = batch[lo + r];
            let len = sample.context.len().min(max_len);
            let tg = &graphs[len - 1];
            let mut bind = Binding::new();
            params.bind_all(&mut bind);
            let ctx: Vec<usize> = sample.context[sample.context.len() - len..].to_vec();
            bind.bind_ids(leaves::CTX_IDS, Arc::new(ctx));
            let mut cand = vec![sample.target];
            cand.extend_from_slice(&negatives[lo + r]);
            bind.bind_ids(leaves::CAND_IDS, Arc::new(cand));
            for &name in &layer_names {
                let masks = gen_eval.output(&gen_leaves::mask(name)).map_err(TrainError::Graph)?;
                bind.bind_tensor(
                    &leaves::mask(name),
                    Tensor::from_vec(1, masks.cols(), masks.row(r).to_vec()),
                );
            }
            let eval = tg.graph.forward(&bind).map_err(TrainError::Graph)?;
            loss_sum += eval.output(leaves::LOSS).map_err(TrainError::Graph)?.data()[0];
            let grads = eval
                .backward(&[(leaves::LOSS, Tensor::scalar(1.0))])
                .map_err(TrainError::Graph)?;
            for &name in &layer_names {
                if let Some(g) = grads.get(&leaves::mask(name)) {
                    seeds.get_mut(name).unwrap().row_mut(r).copy_from_slice(g.data());
                }
            }
            // DIETING: the shared buffer receives gradients directly.
            if let Some(g) = grads.get(leaves::W_MAX) {
                // Accumulated below through the grad set.
                loss_w_max_accumulate(&mut seeds, g);
            }
        }

        // Straight-through: seed the generator graph with the mask grads.
        let seed_list: Vec<(String, Tensor)> = layer_names
            .iter()
            .map(|&n| (gen_leaves::mask(n), seeds.get(n).unwrap().clone()))
            .collect();
        let seed_refs: Vec<(&str, Tensor)> =
            seed_list.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
        let gen_grads = gen_eval.backward(&seed_refs).map_err(TrainError::Graph)?;

        let mut acc = GradSet::default();
        for (name, g) in gen_grads.iter() {
            if params.map.contains_key(name) {
                acc.add(name, g);
            }
        }
        if let Some(g) = seeds.get("\u{0}w_max") {
            acc.add(leaves::W_MAX, g);
        }
        Ok((loss_sum, acc))
    };

    let outs = exec.map_collect(n_chunks, &run_chunk);
    let mut acc = GradSet::default();
    let mut loss_sum = 0.0;
    for out in outs {
        let (l, g) = out?;
        loss_sum += l;
        for (name, t) in g.map.iter() {
            acc.add(name, t);
        }
    }
    Ok((loss_sum, acc))
}

/// Stash the w_max gradient under a reserved key inside the seed map (it is
/// not a mask seed, but it shares the fixed-order reduction path).
fn loss_w_max_accumulate<'k>(seeds: &mut BTreeMap<&'k str, Tensor>, g: &Tensor) {
    match seeds.get_mut("\u{0}w_max") {
        Some(acc) => tensor::add_assign(acc, g),
        None => {
            seeds.insert("\u{0}w_max", g.clone());
        }
    }
}

/// Mean-normalize accumulated gradients and apply one Adam step over the
/// parameter store in its fixed order.
fn apply_adam(params: &mut ParamSet, acc: GradSet, adam: &mut AdamState, lr: f64, batch: usize) {
    adam.begin_step();
    let scale = 1.0 / batch as f64;
    let order = params.order.clone();
    for name in &order {
        if let Some(g) = acc.get(name) {
            let mean = tensor::scale(g, scale);
            adam.update(name, params.get_mut(name), &mean, lr);
        }
    }
}

// ── Evaluation of trained artifacts ──────────────────────────────────

/// How to score test cases for a trained run.
pub enum ModelKind<'a> {
    /// Dense forward through the (possibly trained) backbone.
    Dense,
    /// Per-user generated diets.
    Generated(&'a GeneratorStack),
    /// One shared mask from global score maps.
    SharedScores(&'a [Tensor], f64),
    /// A fixed diet (random-prune).
    Fixed(&'a Diet),
}

/// Mean NDCG@N / Hit@N of a trained artifact over the test cases.
pub fn evaluate_model(
    backbone: &BackboneParams,
    kind: &ModelKind<'_>,
    test: &[TestCase],
    top_n: usize,
    exclude_context: bool,
) -> Result<MetricSummary, EvalError<BackboneError>> {
    match kind {
        ModelKind::Dense => {
            let mb = MaskedBackbone::dense(backbone);
            evaluate(test, backbone.n_items, top_n, exclude_context, |case| {
                mb.forward_scores_all(&case.context)
            })
        }
        ModelKind::Fixed(diet) => {
            let mb = apply_diet_unchecked(backbone, diet);
            evaluate(test, backbone.n_items, top_n, exclude_context, |case| {
                mb.forward_scores_all(&case.context)
            })
        }
        ModelKind::SharedScores(maps, keep_ratio) => {
            let diet = diet_from_score_maps(backbone, maps, *keep_ratio);
            let mb = apply_diet_unchecked(backbone, &diet);
            evaluate(test, backbone.n_items, top_n, exclude_context, |case| {
                mb.forward_scores_all(&case.context)
            })
        }
        ModelKind::Generated(stack) => {
            evaluate(test, backbone.n_items, top_n, exclude_context, |case| {
                let diet = generate_diet(stack, backbone, &case.context)?;
                let mb = apply_diet_unchecked(backbone, &diet);
                mb.forward_scores_all(&case.context)
            })
        }
    }
}

/// The shared mask of a `mask-only` run: binarize each global score map.
pub fn diet_from_score_maps(
    backbone: &BackboneParams,
    maps: &[Tensor],
    keep_ratio: f64,
) -> Diet {
    let layers = backbone
        .layers
        .iter()
        .zip(maps.iter())
        .map(|(spec, m)| {
            crate::dietgen::binarize_topk(&m.reshaped(spec.d_out, spec.d_in), keep_ratio, spec)
        })
        .collect();
    Diet { keep_ratio, layers }
}
