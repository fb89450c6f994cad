//! Edge-cloud protocol: the diet wire format, transmission / storage / FLOPs
//! accounting, and the session simulator.
//!
//! Wire layout (all integers little-endian):
//!
//! ```text
//! magic  "DIETv1"                                   6 bytes
//! layer_count: u16                                  2 bytes
//! per layer:
//!   name_hash:     u64 (FNV-1a of the layer name)   8 bytes
//!   element_count: u32                              4 bytes
//!   keep_count:    u32                              4 bytes
//! payload, per layer: ceil(n/8) bytes — row-major elements, LSB-first
//! within each byte, zero padding bits, byte-aligned per layer
//! ```
//!
//! Decoding validates everything it can see — magic, exact length, counts,
//! per-layer popcount against the declared keep count, zero padding — and
//! validates name hashes and shapes positionally against the target
//! backbone's registry, so any single corrupted byte is rejected with a
//! structured error rather than silently accepted.
//!
//! Cost model: transmission follows the standard accounting — `32·N` bits
//! for dense float shipping, `32·2·α·N` for CSR-style sparse shipping with
//! nonzero fraction α, and `N` bits for a binary mask (plus the real header
//! when a concrete encoded diet is measured). FLOPs count multiply-
//! accumulates of weight application only: a `d_out × d_in` layer with `z`
//! all-zero mask rows contributes `(d_out − z) · d_in` per applied position;
//! embedding lookups and candidate scoring are not counted.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{
    apply_diet_unchecked, fnv1a, BackboneError, BackboneParams, Diet, LayerKind, LayerMask,
    MaskedBackbone, WeightStore,
};
use crate::data::{ItemId, TestCase, UserId};
use crate::dietgen::{generate_diet, GeneratorStack};
use crate::metrics::{hit_at_n, ndcg_at_n, rank_top_n};

pub const WIRE_MAGIC: &[u8; 6] = b"DIETv1";
/// Bits per shipped parameter in the dense and CSR accountings.
pub const FLOAT_BITS: u64 = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireError {
    BadMagic,
    Truncated { needed: usize, have: usize },
    TrailingBytes { extra: usize },
    LayerCountMismatch { wire: usize, registry: usize },
    NameHashMismatch { layer_index: usize },
    ElementCountMismatch { layer_index: usize, wire: usize, registry: usize },
    KeepCountInvalid { layer_index: usize, keep: usize, elements: usize },
    PopcountMismatch { layer_index: usize, declared: usize, actual: usize },
    NonzeroPadding { layer_index: usize },
}

impl core::fmt::Display for WireError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            WireError::BadMagic => write!(f, "bad magic bytes"),
            WireError::Truncated { needed, have } => {
                write!(f, "truncated message: need {needed} bytes, have {have}")
            }
            WireError::TrailingBytes { extra } => write!(f, "{extra} trailing bytes"),
            WireError::LayerCountMismatch { wire, registry } => {
                write!(f, "wire has {wire} layers, registry has {registry}")
            }
            WireError::NameHashMismatch { layer_index } => {
                write!(f, "layer {layer_index}: name hash does not match registry")
            }
            WireError::ElementCountMismatch { layer_index, wire, registry } => {
                write!(f, "layer {layer_index}: {wire} elements on wire, registry has {registry}")
            }
            WireError::KeepCountInvalid { layer_index, keep, elements } => {
                write!(f, "layer {layer_index}: keep count {keep} > {elements} elements")
            }
            WireError::PopcountMismatch { layer_index, declared, actual } => {
                write!(f, "layer {layer_index}: popcount {actual} != declared {declared}")
            }
            WireError::NonzeroPadding { layer_index } => {
                write!(f, "layer {layer_index}: padding bits are not zero")
            }
        }
    }
}

/// Serialize a diet. Deterministic: the same diet always yields the same
/// bytes.
pub fn encode_diet(diet: &Diet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WIRE_MAGIC);
    out.extend_from_slice(&(diet.layers.len() as u16).to_le_bytes());
    for m in &diet.layers {
        out.extend_from_slice(&fnv1a(m.name.as_bytes()).to_le_bytes());
        out.extend_from_slice(&(m.numel() as u32).to_le_bytes());
        out.extend_from_slice(&(m.keep_count as u32).to_le_bytes());
    }
    for m in &diet.layers {
        let mut byte = 0u8;
        for (e, &bit) in m.bits.iter().enumerate() {
            if bit != 0 {
                byte |= 1 << (e % 8);
            }
            if e % 8 == 7 {
                out.push(byte);
                byte = 0;
            }
        }
        if m.bits.len() % 8 != 0 {
            out.push(byte);
        }
    }
    out
}

/// Parse and validate a diet against the backbone it targets. The realized
/// aggregate keep fraction (`Σ keep / Σ elements`) becomes the diet's
/// `keep_ratio`.
pub fn decode_diet(bytes: &[u8], backbone: &BackboneParams) -> Result<Diet, WireError> {
    let have = bytes.len();
    if have < WIRE_MAGIC.len() + 2 {
        return Err(WireError::Truncated { needed: WIRE_MAGIC.len() + 2, have });
    }
    if &bytes[..6] != WIRE_MAGIC {
        return Err(WireError::BadMagic);
    }
    let layer_count = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if layer_count != backbone.layers.len() {
        return Err(WireError::LayerCountMismatch {
            wire: layer_count,
            registry: backbone.layers.len(),
        });
    }
    let header_len = 8 + 16 * layer_count;
    if have < header_len {
        return Err(WireError::Truncated { needed: header_len, have });
    }

    struct Entry {
        elements: usize,
        keep: usize,
    }
    let mut entries = Vec::with_capacity(layer_count);
    let mut payload_len = 0usize;
    for (i, spec) in backbone.layers.iter().enumerate() {
        let off = 8 + 16 * i;
        let hash = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let elements = u32::from_le_bytes(bytes[off + 8..off + 12].try_into().unwrap()) as usize;
        let keep = u32::from_le_bytes(bytes[off + 12..off + 16].try_into().unwrap()) as usize;
        if hash != fnv1a(spec.name.as_bytes()) {
            return Err(WireError::NameHashMismatch { layer_index: i });
        }
        if elements != spec.numel() {
            return Err(WireError::ElementCountMismatch {
                layer_index: i,
                wire: elements,
                registry: spec.numel(),
            });
        }
        if keep > elements {
            return Err(WireError::KeepCountInvalid { layer_index: i, keep, elements });
        }
        payload_len += elements.div_ceil(8);
        entries.push(Entry { elements, keep });
    }
    let total = header_len + payload_len;
    if have < total {
        return Err(WireError::Truncated { needed: total, have });
    }
    if have > total {
        return Err(WireError::TrailingBytes { extra: have - total });
    }

    let mut layers = Vec::with_capacity(layer_count);
    let mut offset = header_len;
    let mut keep_total = 0usize;
    let mut elem_total = 0usize;
    for (i, entry) in entries.iter().enumerate() {
        let nbytes = entry.elements.div_ceil(8);
        let chunk = &bytes[offset..offset + nbytes];
        offset += nbytes;
        let mut bits = vec![0u8; entry.elements];
        let mut pop = 0usize;
        for (e, bit) in bits.iter_mut().enumerate() {
            if (chunk[e / 8] >> (e % 8)) & 1 == 1 {
                *bit = 1;
                pop += 1;
            }
        }
        // Padding bits beyond the element count must be zero.
        if entry.elements % 8 != 0 {
            let last = chunk[nbytes - 1];
            let used = entry.elements % 8;
            if last >> used != 0 {
                return Err(WireError::NonzeroPadding { layer_index: i });
            }
        }
        if pop != entry.keep {
            return Err(WireError::PopcountMismatch {
                layer_index: i,
                declared: entry.keep,
                actual: pop,
            });
        }
        let spec = &backbone.layers[i];
        keep_total += entry.keep;
        elem_total += entry.elements;
        layers.push(LayerMask {
            name: spec.name.clone(),
            d_out: spec.d_out,
            d_in: spec.d_in,
            bits,
            keep_count: entry.keep,
        });
    }
    Ok(Diet { keep_ratio: keep_total as f64 / elem_total as f64, layers })
}

/// Size of an encoded diet in bits (header and per-layer padding included).
pub fn encoded_diet_bits(diet: &Diet) -> u64 {
    8 * encode_diet(diet).len() as u64
}

// ── Transmission accounting ──────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransmissionMethod {
    /// Dense float shipping: `32 · N` bits.
    Dense,
    /// Compressed sparse row/column shipping: `32 · 2 · α · N` bits, with α
    /// the nonzero fraction.
    Csr,
    /// Binary mask shipping: `N` bits (headerless formula; see
    /// [`encoded_diet_bits`] for a concrete message).
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolError {
    InvalidArgument(String),
    Wire(WireError),
    Backbone(BackboneError),
}

impl core::fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ProtocolError::InvalidArgument(s) => write!(f, "invalid argument: {s}"),
            ProtocolError::Wire(e) => write!(f, "wire error: {e}"),
            ProtocolError::Backbone(e) => write!(f, "{e}"),
        }
    }
}

impl From<WireError> for ProtocolError {
    fn from(e: WireError) -> Self {
        ProtocolError::Wire(e)
    }
}

impl From<BackboneError> for ProtocolError {
    fn from(e: BackboneError) -> Self {
        ProtocolError::Backbone(e)
    }
}

/// Bits to transmit `n_params` under the given method. `nonzero_fraction`
/// only matters for the sparse method.
pub fn transmission_bits(
    method: TransmissionMethod,
    n_params: usize,
    nonzero_fraction: f64,
) -> Result<u64, ProtocolError> {
    if !(0.0..=1.0).contains(&nonzero_fraction) {
        return Err(ProtocolError::InvalidArgument(alloc::format!(
            "nonzero fraction {nonzero_fraction} outside [0, 1]"
        )));
    }
    Ok(match method {
        TransmissionMethod::Dense => FLOAT_BITS * n_params as u64,
        TransmissionMethod::Csr => {
            let exact = FLOAT_BITS as f64 * 2.0 * nonzero_fraction * n_params as f64;
            crate::math::round_half_up(exact) as u64
        }
        TransmissionMethod::Binary => n_params as u64,
    })
}

// ── FLOPs accounting ─────────────────────────────────────────────────

/// Multiply-accumulate count of one forward pass at the given context
/// length. Weight application only: per layer, `(d_out − z) · d_in` per
/// applied position, with `z` the layer's all-zero mask rows. Linear layers
/// apply once per window position; horizontal conv filters once per valid
/// offset; the vertical bank once per embedding column; the final Caser
/// fully-connected layer once.
pub fn count_flops(mb: &MaskedBackbone<'_>, seq_len: usize) -> u64 {
    let b = mb.backbone;
    let l = seq_len.min(b.hyper.max_len).max(1);
    let mut total = 0u64;
    for (i, spec) in b.layers.iter().enumerate() {
        let z = mb.diet.layers[i].zero_rows();
        let live_rows = (spec.d_out - z) as u64;
        let per_application = live_rows * spec.d_in as u64;
        let applications = match (b.arch, spec.kind) {
            (crate::backbone::Arch::SasRec, _) => l as u64,
            (crate::backbone::Arch::Caser, LayerKind::ConvHorizontal) => {
                let h = spec.d_in / b.hyper.d;
                (b.hyper.max_len - h + 1) as u64
            }
            (crate::backbone::Arch::Caser, LayerKind::ConvVertical) => b.hyper.d as u64,
            (crate::backbone::Arch::Caser, LayerKind::Linear) => 1,
        };
        total += per_application * applications;
    }
    total
}

// ── Storage accounting ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageMode {
    /// Full frozen maskable weights stored once, plus one mask per scenario.
    Diet,
    /// Only the shared buffer stored, plus one mask per scenario.
    Dieting,
}

/// Edge storage in bits for `n_scenarios` application scenarios sharing one
/// backbone. Mask bits use the headerless `N` formula.
pub fn storage_bits(
    mode: StorageMode,
    backbone: &BackboneParams,
    n_scenarios: usize,
) -> Result<u64, ProtocolError> {
    if n_scenarios == 0 {
        return Err(ProtocolError::InvalidArgument("n_scenarios must be >= 1".into()));
    }
    let mask_bits = backbone.maskable_param_count() as u64;
    let weight_params = match mode {
        StorageMode::Diet => backbone.maskable_param_count() as u64,
        StorageMode::Dieting => match &backbone.store {
            WeightStore::Shared(buf) => buf.len() as u64,
            WeightStore::PerLayer(_) => {
                backbone.layers.iter().map(|l| l.numel()).max().unwrap_or(0) as u64
            }
        },
    };
    Ok(FLOAT_BITS * weight_params + n_scenarios as u64 * mask_bits)
}

// ── Session simulation ───────────────────────────────────────────────

/// One timestamped interaction event at an edge. A set `interest_shift`
/// flag marks a drastic interest change and triggers a diet refresh under
/// the on-shift policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionEvent {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: i64,
    pub interest_shift: bool,
}

/// One edge's session: the context known at session start plus the ordered
/// rank-request events.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSession {
    pub user: UserId,
    pub context: Vec<ItemId>,
    pub events: Vec<SessionEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshPolicy {
    /// One model refresh at session start only.
    PerSession,
    /// Session-start refresh plus one more before any event flagged as an
    /// interest shift.
    OnShift,
}

/// What the cloud ships on a refresh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShippingMode {
    /// Dense float weights (the no-mask baseline).
    DenseWeights,
    /// An encoded binary diet from the generator stack.
    BinaryDiet,
}

/// Cost and quality report for one edge (or the aggregate of all edges).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostReport {
    pub transmit_bits: u64,
    pub storage_bits: u64,
    pub flops: u64,
    pub ndcg_at_10: f64,
    pub hit_at_10: f64,
}

pub struct SessionOutcome {
    pub per_edge: Vec<(UserId, CostReport)>,
    /// Bits and FLOPs summed; metrics averaged per ranked event.
    pub aggregate: CostReport,
}

/// Build one single-request session per test case (the leave-one-out
/// shape: context known, the held-out target is the rank request).
pub fn sessions_from_tests(tests: &[TestCase]) -> Vec<UserSession> {
    tests
        .iter()
        .map(|t| UserSession {
            user: t.user,
            context: t.context.clone(),
            events: vec![SessionEvent {
                user: t.user,
                item: t.target,
                timestamp: 0,
                interest_shift: false,
            }],
        })
        .collect()
}

/// Simulate every edge session: refresh (generate, encode, "transmit",
/// decode, apply), then rank each event with the cached masked model,
/// accruing transmission bits, storage bits, FLOPs, and ranking metrics.
/// Events join the context once ranked, so later refreshes see them.
#[allow(clippy::too_many_arguments)]
pub fn simulate_session(
    backbone: &BackboneParams,
    stack: Option<&GeneratorStack>,
    sessions: &[UserSession],
    policy: RefreshPolicy,
    shipping: ShippingMode,
    storage: StorageMode,
    n_scenarios: usize,
    exclude_context: bool,
    top_n: usize,
) -> Result<SessionOutcome, ProtocolError> {
    if shipping == ShippingMode::BinaryDiet && stack.is_none() {
        return Err(ProtocolError::InvalidArgument(
            "binary-diet shipping needs a generator stack".into(),
        ));
    }
    let edge_storage = storage_bits(storage, backbone, n_scenarios)?;
    let mut per_edge = Vec::with_capacity(sessions.len());
    let mut agg = CostReport { storage_bits: 0, ..Default::default() };
    let mut total_events = 0usize;

    for session in sessions {
        let mut report = CostReport { storage_bits: edge_storage, ..Default::default() };
        let mut context = session.context.clone();

        // Refresh closure: returns the (possibly regenerated) diet and the
        // bits the refresh cost.
        let refresh = |context: &[ItemId]| -> Result<(Diet, u64), ProtocolError> {
            match shipping {
                ShippingMode::DenseWeights => {
                    let bits = transmission_bits(
                        TransmissionMethod::Dense,
                        backbone.dense_transfer_param_count(),
                        1.0,
                    )?;
                    Ok((Diet::ones(backbone), bits))
                }
                ShippingMode::BinaryDiet => {
                    let diet = generate_diet(stack.unwrap(), backbone, context)?;
                    let bytes = encode_diet(&diet);
                    // Edge side: decode and validate before applying.
                    let decoded = decode_diet(&bytes, backbone)?;
                    Ok((decoded, 8 * bytes.len() as u64))
                }
            }
        };

        let (mut diet, bits) = refresh(&context)?;
        report.transmit_bits += bits;
        let mut mb = apply_diet_unchecked(backbone, &diet);

        let mut excluded = vec![false; backbone.n_items];
        for event in &session.events {
            if policy == RefreshPolicy::OnShift && event.interest_shift {
                let (d, bits) = refresh(&context)?;
                diet = d;
                report.transmit_bits += bits;
                mb = apply_diet_unchecked(backbone, &diet);
            }
            let scores = mb.forward_scores_all(&context)?;
            let window = backbone.window(&context).len();
            report.flops += count_flops(&mb, window);
            let ranked = if exclude_context {
                for &i in &context {
                    excluded[i] = true;
                }
                excluded[event.item] = false;
                let r = rank_top_n(&scores, top_n, &excluded);
                for &i in &context {
                    excluded[i] = false;
                }
                r
            } else {
                rank_top_n(&scores, top_n, &[])
            };
            report.ndcg_at_10 += ndcg_at_n(&ranked, event.item, top_n);
            report.hit_at_10 += hit_at_n(&ranked, event.item, top_n);
            context.push(event.item);
        }

        let n_events = session.events.len().max(1) as f64;
        report.ndcg_at_10 /= n_events;
        report.hit_at_10 /= n_events;

        agg.transmit_bits += report.transmit_bits;
        agg.storage_bits += report.storage_bits;
        agg.flops += report.flops;
        agg.ndcg_at_10 += report.ndcg_at_10 * session.events.len() as f64;
        agg.hit_at_10 += report.hit_at_10 * session.events.len() as f64;
        total_events += session.events.len();
        per_edge.push((session.user, report));
    }

    if total_events > 0 {
        agg.ndcg_at_10 /= total_events as f64;
        agg.hit_at_10 /= total_events as f64;
    }
    Ok(SessionOutcome { per_edge, aggregate: agg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, keep_count_for, Arch, Hyper};
    use crate::rng::Rng;

    fn toy_backbone() -> BackboneParams {
        let hyper = Hyper { d: 8, blocks: 1, heads: 2, max_len: 5, ..Hyper::default() };
        build_backbone(Arch::SasRec, 20, hyper, &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn packing_is_lsb_first() {
        let b = toy_backbone();
        let mut diet = Diet::zeros(&b);
        // Craft the documented example in the first four bits of layer 0.
        diet.layers[0].bits[0] = 1;
        diet.layers[0].bits[2] = 1;
        diet.layers[0].bits[3] = 1;
        diet.layers[0].keep_count = 3;
        let bytes = encode_diet(&diet);
        let header = 8 + 16 * diet.layers.len();
        assert_eq!(bytes[header], 0b0000_1101);
    }

    #[test]
    fn round_trip_is_lossless() {
        let b = toy_backbone();
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let kr = (rng.next_usize(99) + 1) as f64 / 100.0;
            let diet = Diet::random(&b, kr, &mut rng);
            let bytes = encode_diet(&diet);
            let back = decode_diet(&bytes, &b).unwrap();
            assert_eq!(back.layers, diet.layers);
            assert_eq!(encode_diet(&back), bytes);
        }
    }

    #[test]
    fn corrupted_keep_count_is_rejected() {
        let b = toy_backbone();
        let diet = Diet::random(&b, 0.3, &mut Rng::new(7));
        let mut bytes = encode_diet(&diet);
        // keep_count of layer 0 lives at offset 8 + 12.
        bytes[20] ^= 1;
        assert!(matches!(
            decode_diet(&bytes, &b),
            Err(WireError::PopcountMismatch { .. }) | Err(WireError::KeepCountInvalid { .. })
        ));
    }

    #[test]
    fn bad_magic_truncation_and_trailing_are_rejected() {
        let b = toy_backbone();
        let diet = Diet::random(&b, 0.5, &mut Rng::new(9));
        let bytes = encode_diet(&diet);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_diet(&bad, &b), Err(WireError::BadMagic));

        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_diet(short, &b), Err(WireError::Truncated { .. })));

        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(decode_diet(&long, &b), Err(WireError::TrailingBytes { extra: 1 }));
    }

    #[test]
    fn dense_csr_binary_formulas() {
        assert_eq!(transmission_bits(TransmissionMethod::Dense, 1000, 1.0).unwrap(), 32_000);
        assert_eq!(transmission_bits(TransmissionMethod::Csr, 1000, 0.2).unwrap(), 12_800);
        assert_eq!(transmission_bits(TransmissionMethod::Binary, 1000, 0.2).unwrap(), 1000);
        assert!(transmission_bits(TransmissionMethod::Csr, 10, 1.5).is_err());
    }

    #[test]
    fn flops_dense_and_zero_rows() {
        // One linear layer 4x8 applied once per position.
        let hyper = Hyper { d: 8, blocks: 1, heads: 2, max_len: 5, ..Hyper::default() };
        let b = build_backbone(Arch::SasRec, 20, hyper, &mut Rng::new(3)).unwrap();
        let dense = MaskedBackbone::dense(&b);
        // 6 layers of 8x8, applied once per position.
        assert_eq!(count_flops(&dense, 1), 6 * 64);
        assert_eq!(count_flops(&dense, 5), 5 * 6 * 64);

        // Zero out one full row of layer 0: count drops by d_in per position.
        let mut diet = Diet::ones(&b);
        for e in 0..8 {
            diet.layers[0].bits[e] = 0;
        }
        diet.layers[0].keep_count -= 8;
        let mb = apply_diet_unchecked(&b, &diet);
        assert_eq!(count_flops(&mb, 1), 6 * 64 - 8);

        // All-zero diet: nothing to compute.
        let zeros = apply_diet_unchecked(&b, &Diet::zeros(&b));
        assert_eq!(count_flops(&zeros, 3), 0);
    }

    #[test]
    fn storage_shrinks_under_shared_buffer() {
        let b = toy_backbone();
        let n_p = b.maskable_param_count() as u64;
        let diet1 = storage_bits(StorageMode::Diet, &b, 1).unwrap();
        assert_eq!(diet1, 32 * n_p + n_p);
        let largest = b.layers.iter().map(|l| l.numel()).max().unwrap() as u64;
        let dieting3 = storage_bits(StorageMode::Dieting, &b, 3).unwrap();
        assert_eq!(dieting3, 32 * largest + 3 * n_p);
        assert!(dieting3 < storage_bits(StorageMode::Diet, &b, 3).unwrap());
        assert!(storage_bits(StorageMode::Diet, &b, 0).is_err());
    }

    #[test]
    fn single_refresh_session_transmits_one_diet() {
        let b = toy_backbone();
        let stack = GeneratorStack::init(&b, 0.25, true, &mut Rng::new(4));
        let sessions = vec![UserSession {
            user: 0,
            context: vec![1, 2, 3],
            events: vec![SessionEvent { user: 0, item: 5, timestamp: 1, interest_shift: false }],
        }];
        let out = simulate_session(
            &b,
            Some(&stack),
            &sessions,
            RefreshPolicy::PerSession,
            ShippingMode::BinaryDiet,
            StorageMode::Diet,
            1,
            false,
            10,
        )
        .unwrap();
        let diet = generate_diet(&stack, &b, &[1, 2, 3]).unwrap();
        assert_eq!(out.aggregate.transmit_bits, encoded_diet_bits(&diet));
    }

    #[test]
    fn cached_diet_keeps_transmission_flat_as_events_grow() {
        let b = toy_backbone();
        let stack = GeneratorStack::init(&b, 0.25, true, &mut Rng::new(4));
        let make = |n_events: usize| UserSession {
            user: 0,
            context: vec![1, 2],
            events: (0..n_events)
                .map(|i| SessionEvent {
                    user: 0,
                    item: 3 + i,
                    timestamp: i as i64,
                    interest_shift: false,
                })
                .collect(),
        };
        let run = |s: UserSession| {
            simulate_session(
                &b,
                Some(&stack),
                &[s],
                RefreshPolicy::PerSession,
                ShippingMode::BinaryDiet,
                StorageMode::Diet,
                1,
                false,
                10,
            )
            .unwrap()
            .aggregate
        };
        let one = run(make(1));
        let many = run(make(6));
        assert_eq!(one.transmit_bits, many.transmit_bits);
        assert!(many.flops > one.flops);
    }

    #[test]
    fn on_shift_policy_retransmits() {
        let b = toy_backbone();
        let stack = GeneratorStack::init(&b, 0.25, true, &mut Rng::new(4));
        let session = UserSession {
            user: 0,
            context: vec![1, 2],
            events: vec![
                SessionEvent { user: 0, item: 4, timestamp: 0, interest_shift: false },
                SessionEvent { user: 0, item: 9, timestamp: 1, interest_shift: true },
            ],
        };
        let run = |policy| {
            simulate_session(
                &b,
                Some(&stack),
                &[session.clone()],
                policy,
                ShippingMode::BinaryDiet,
                StorageMode::Diet,
                1,
                false,
                10,
            )
            .unwrap()
            .aggregate
            .transmit_bits
        };
        let per_session = run(RefreshPolicy::PerSession);
        let on_shift = run(RefreshPolicy::OnShift);
        assert!(on_shift > per_session);
    }

    #[test]
    fn dense_vs_binary_shipping_ratio_is_close_to_word_size() {
        // At the default scale (12 layers of 64x64) the dense:binary ratio
        // sits just under 32 once the mask header amortizes.
        let b = build_backbone(Arch::SasRec, 50, Hyper::default(), &mut Rng::new(2)).unwrap();
        let stack = GeneratorStack::init(&b, 0.1, true, &mut Rng::new(3));
        let sessions = vec![UserSession {
            user: 0,
            context: vec![1, 2, 3],
            events: vec![SessionEvent { user: 0, item: 5, timestamp: 0, interest_shift: false }],
        }];
        let run = |shipping| {
            simulate_session(
                &b,
                Some(&stack),
                &sessions,
                RefreshPolicy::PerSession,
                shipping,
                StorageMode::Diet,
                1,
                false,
                10,
            )
            .unwrap()
            .aggregate
            .transmit_bits
        };
        let dense = run(ShippingMode::DenseWeights);
        let binary = run(ShippingMode::BinaryDiet);
        let ratio = dense as f64 / binary as f64;
        assert!((31.5..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn single_bit_mutations_are_always_rejected() {
        // The format carries no checksum, so its corruption guarantee is:
        // any single flipped bit is caught (magic, counts, hashes, popcount
        // against keep count, or padding). Multi-bit flips that conserve a
        // layer's popcount can forge a different valid diet by design.
        let b = toy_backbone();
        let diet = Diet::random(&b, 0.4, &mut Rng::new(11));
        let bytes = encode_diet(&diet);
        let mut rng = Rng::new(12);
        let rounds = 100;
        for round in 0..rounds {
            let mut mutated = bytes.clone();
            let pos = rng.next_usize(mutated.len() * 8);
            mutated[pos / 8] ^= 1 << (pos % 8);
            assert!(
                decode_diet(&mutated, &b).is_err(),
                "round {round}: bit flip at {pos} accepted"
            );
        }
    }

    #[test]
    fn keep_counts_relate_to_ratio() {
        let b = toy_backbone();
        let diet = Diet::random(&b, 0.37, &mut Rng::new(21));
        for (m, spec) in diet.layers.iter().zip(b.layers.iter()) {
            assert_eq!(m.keep_count, keep_count_for(0.37, spec.numel()));
        }
    }
}
