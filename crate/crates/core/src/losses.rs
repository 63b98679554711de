//! The training objectives: teacher-forced next-token loss, segmentation
//! CE + DICE, the marker/token/count depth composite, and the soft
//! codebook-mixing depth reconstruction.
//!
//! All differentiable losses are built on [`Tape`] nodes so one backward
//! sweep covers the whole batch. Logits arrive as a single `[B*T, V]`
//! tensor where row `b*seq_len + t` holds the logits produced at position
//! `t` of sample `b`, predicting the token at position `t + 1`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::codebook::{decode_latents_tape, depth_to_patch_rows, VqError, VqVaeParams};
use crate::fmath;
use crate::grammar::{DepthSpan, Vocabulary};
use crate::scene::DepthMap;
use crate::tape::{Tape, TapeError, TensorId};
use crate::tensor::Tensor;

/// Smoothing constant in the DICE denominator and numerator; keeps the
/// ratio defined when both masks are empty.
pub const DICE_EPSILON: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    NoSupervisedPositions,
    SupervisedAtStart { sample: usize },
    SpanAtSequenceStart { sample: usize },
    BatchLayout { what: &'static str, expected: usize, got: usize },
    NonBinaryMask { value: f64 },
    NegativeWeight { name: &'static str, value: f64 },
    NonFinite { component: &'static str, value: f64 },
    EmptyBatch,
    Tape(TapeError),
    Vq(VqError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::NoSupervisedPositions => write!(f, "no supervised positions"),
            LossError::SupervisedAtStart { sample } => {
                write!(f, "supervised position at sequence start in sample {sample}")
            }
            LossError::SpanAtSequenceStart { sample } => {
                write!(f, "span at sequence start in sample {sample}")
            }
            LossError::BatchLayout { what, expected, got } => {
                write!(f, "batch layout mismatch for {what}: expected {expected}, got {got}")
            }
            LossError::NonBinaryMask { value } => {
                write!(f, "segmentation target contains non-binary value {value}")
            }
            LossError::NegativeWeight { name, value } => {
                write!(f, "loss weight {name} is negative: {value}")
            }
            LossError::NonFinite { component, value } => {
                write!(f, "non-finite {component} loss: {value}")
            }
            LossError::EmptyBatch => write!(f, "empty batch"),
            LossError::Tape(e) => write!(f, "tape failure in loss: {e}"),
            LossError::Vq(e) => write!(f, "depth branch failure in loss: {e}"),
        }
    }
}

impl From<TapeError> for LossError {
    fn from(e: TapeError) -> Self {
        LossError::Tape(e)
    }
}

impl From<VqError> for LossError {
    fn from(e: VqError) -> Self {
        LossError::Vq(e)
    }
}

/// Mixing coefficients of the total objective. Defaults carry the
/// published values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_r: f64,
    pub seg_ce_weight: f64,
    pub seg_dice_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_m: 0.3,
            lambda_t: 0.5,
            lambda_c: 0.2,
            lambda_d: 1.0,
            lambda_r: 1.0,
            seg_ce_weight: 1.0,
            seg_dice_weight: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let named = [
            ("lambda_m", self.lambda_m),
            ("lambda_t", self.lambda_t),
            ("lambda_c", self.lambda_c),
            ("lambda_d", self.lambda_d),
            ("lambda_r", self.lambda_r),
            ("seg_ce_weight", self.seg_ce_weight),
            ("seg_dice_weight", self.seg_dice_weight),
        ];
        for (name, value) in named {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Every sub-term of one batch, plus span statistics, in plain numbers.
/// Written as one line of `losses.jsonl` per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub llm: f64,
    pub seg_ce: f64,
    pub seg_dice: f64,
    pub seg_total: f64,
    pub marker: f64,
    pub token: f64,
    pub count: f64,
    pub depth_composite: f64,
    pub depth_recon: f64,
    pub total: f64,
    pub valid_spans: usize,
    pub mean_interior_len: f64,
    pub offgrammar_interior: usize,
}

/// Raw unweighted sub-terms, as read off their tape nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub llm: f64,
    pub seg_ce: f64,
    pub seg_dice: f64,
    pub marker: f64,
    pub token: f64,
    pub count: f64,
    pub depth_recon: f64,
}

/// Target-span statistics of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpanStats {
    pub valid_spans: usize,
    /// Mean interior length over samples that have a span; 0 if none do.
    pub mean_interior_len: f64,
    /// Interior positions whose target id is not a depth-code id.
    pub offgrammar_interior: usize,
}

pub fn span_stats(
    spans: &[Option<DepthSpan>],
    targets: &[u32],
    seq_len: usize,
    vocab: &Vocabulary,
) -> SpanStats {
    let mut stats = SpanStats::default();
    let mut interior_total = 0usize;
    for (b, span) in spans.iter().enumerate() {
        let Some(sp) = span else { continue };
        stats.valid_spans += 1;
        interior_total += sp.l;
        for t in sp.s + 1..sp.e {
            if !vocab.is_code(targets[b * seq_len + t]) {
                stats.offgrammar_interior += 1;
            }
        }
    }
    if stats.valid_spans > 0 {
        stats.mean_interior_len = interior_total as f64 / stats.valid_spans as f64;
    }
    stats
}

fn expect_len(what: &'static str, expected: usize, got: usize) -> Result<(), LossError> {
    if expected != got {
        return Err(LossError::BatchLayout { what, expected, got });
    }
    Ok(())
}

fn logits_rows(tape: &Tape, logits: TensorId) -> Result<(usize, usize), LossError> {
    tape.value(logits).dims2().map_err(|_| LossError::BatchLayout {
        what: "logits rank",
        expected: 2,
        got: tape.value(logits).shape().len(),
    })
}

/// Teacher-forced next-token cross entropy, averaged over all supervised
/// positions in the batch. A position `t` with `supervise[t]` set is
/// predicted by logits row `t - 1`, so position 0 can never be supervised.
pub fn llm_loss(
    tape: &mut Tape,
    logits: TensorId,
    targets: &[u32],
    supervise: &[bool],
    seq_len: usize,
) -> Result<TensorId, LossError> {
    if seq_len == 0 || targets.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let (rows, _v) = logits_rows(tape, logits)?;
    expect_len("target ids", rows, targets.len())?;
    expect_len("supervise mask", rows, supervise.len())?;
    if rows % seq_len != 0 {
        return Err(LossError::BatchLayout { what: "rows per sample", expected: seq_len, got: rows });
    }
    let batch = rows / seq_len;
    let mut pairs = Vec::new();
    for b in 0..batch {
        for t in 0..seq_len {
            let pos = b * seq_len + t;
            if !supervise[pos] {
                continue;
            }
            if t == 0 {
                return Err(LossError::SupervisedAtStart { sample: b });
            }
            pairs.push((pos - 1, targets[pos] as usize));
        }
    }
    if pairs.is_empty() {
        return Err(LossError::NoSupervisedPositions);
    }
    let divisor = pairs.len() as f64;
    Ok(tape.ce_mean(logits, &pairs, divisor)?)
}

fn span_batch(
    tape: &Tape,
    logits: TensorId,
    targets: &[u32],
    spans: &[Option<DepthSpan>],
    seq_len: usize,
) -> Result<usize, LossError> {
    if spans.is_empty() || seq_len == 0 {
        return Err(LossError::EmptyBatch);
    }
    let (rows, _v) = logits_rows(tape, logits)?;
    expect_len("target ids", rows, targets.len())?;
    expect_len("rows for spans", spans.len() * seq_len, rows)?;
    Ok(spans.len())
}

/// Marker placement loss: cross entropy at the two positions that must
/// produce DSTART and DEND, averaged over the batch. Samples without a
/// span contribute zero.
pub fn marker_loss(
    tape: &mut Tape,
    logits: TensorId,
    targets: &[u32],
    spans: &[Option<DepthSpan>],
    seq_len: usize,
) -> Result<TensorId, LossError> {
    let batch = span_batch(tape, logits, targets, spans, seq_len)?;
    let mut pairs = Vec::new();
    for (b, span) in spans.iter().enumerate() {
        let Some(sp) = span else { continue };
        if sp.s == 0 {
            return Err(LossError::SpanAtSequenceStart { sample: b });
        }
        let base = b * seq_len;
        pairs.push((base + sp.s - 1, targets[base + sp.s] as usize));
        pairs.push((base + sp.e - 1, targets[base + sp.e] as usize));
    }
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    Ok(tape.ce_mean(logits, &pairs, batch as f64)?)
}

/// Interior depth-token loss: per-sample mean cross entropy over the
/// span interior (full-vocabulary CE), averaged over the batch.
pub fn token_loss(
    tape: &mut Tape,
    logits: TensorId,
    targets: &[u32],
    spans: &[Option<DepthSpan>],
    seq_len: usize,
) -> Result<TensorId, LossError> {
    let batch = span_batch(tape, logits, targets, spans, seq_len)?;
    let mut per_sample = Vec::new();
    for (b, span) in spans.iter().enumerate() {
        let Some(sp) = span else { continue };
        if sp.l == 0 {
            continue;
        }
        let base = b * seq_len;
        let mut pairs = Vec::with_capacity(sp.l);
        for t in sp.s + 1..sp.e {
            pairs.push((base + t - 1, targets[base + t] as usize));
        }
        per_sample.push(tape.ce_mean(logits, &pairs, (sp.l * batch) as f64)?);
    }
    if per_sample.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let ones = vec![1.0; per_sample.len()];
    Ok(tape.weighted_sum(&per_sample, &ones)?)
}

/// Length penalty `(1/B) * sum ln(1 + |l_b - n|)` over target-parsed
/// spans; an absent span counts as length zero, an empty batch as zero
/// loss. Never touches the tape, so its gradient with respect to any
/// logits is identically zero.
pub fn count_loss(spans: &[Option<DepthSpan>], n: usize) -> f64 {
    if spans.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for span in spans {
        let l = span.map_or(0, |sp| sp.l);
        let diff = l.abs_diff(n);
        total += fmath::ln_1p(diff as f64);
    }
    total / spans.len() as f64
}

/// Weighted depth composite `lambda_m*marker + lambda_t*token +
/// lambda_c*count`; the count term enters the graph as a constant shift.
pub fn depth_composite(
    tape: &mut Tape,
    marker: TensorId,
    token: TensorId,
    count: f64,
    weights: &LossWeights,
) -> Result<TensorId, LossError> {
    weights.validate()?;
    let mixed = tape.weighted_sum(&[marker, token], &[weights.lambda_m, weights.lambda_t])?;
    Ok(tape.add_const(mixed, weights.lambda_c * count))
}

/// Expected-latent mixing followed by the frozen decode: each row of
/// `probs` is a weight vector over the codebook, rows beyond `n` are
/// dropped, and missing rows are padded with the codebook-mean embedding.
/// Returns the decoded `n x patch-pixels` node. Exact one-hot rows
/// reproduce `detokenize` bit for bit because both run the same decoder
/// on the same embedding bits.
pub fn decode_soft_codes(
    tape: &mut Tape,
    probs: TensorId,
    params: &VqVaeParams,
) -> Result<TensorId, LossError> {
    let (rows, cols) = logits_rows(tape, probs)?;
    let cb = &params.codebook;
    expect_len("mixing columns", cb.k, cols)?;
    let n = params.n();
    let entries = tape.constant(Tensor::from_vec(&[cb.k, cb.e], cb.entries.clone()).unwrap());
    let mut mixed = tape.matmul(probs, entries)?;
    if rows > n {
        mixed = tape.slice_rows(mixed, 0, n)?;
    } else if rows < n {
        let pad = mean_pad(tape, cb.mean_entry(), n - rows);
        mixed = tape.concat_rows(&[mixed, pad])?;
    }
    Ok(decode_latents_tape(tape, mixed, params)?)
}

fn mean_pad(tape: &mut Tape, mean: Vec<f64>, rows: usize) -> TensorId {
    let e = mean.len();
    let mut data = Vec::with_capacity(rows * e);
    for _ in 0..rows {
        data.extend_from_slice(&mean);
    }
    tape.constant(Tensor::from_vec(&[rows, e], data).unwrap())
}

/// Differentiable depth reconstruction: per spanned sample, softmax the
/// interior logits over the depth-code columns, mix the codebook with
/// the resulting weights, decode with the frozen decoder, and take MSE
/// against the ground-truth map. Samples without a span reconstruct the
/// zero map and contribute `mean(Y^2)` as a constant. Gradients reach
/// the logits only; codebook and decoder enter as tape constants.
pub fn soft_depth_reconstruction(
    tape: &mut Tape,
    logits: TensorId,
    spans: &[Option<DepthSpan>],
    vocab: &Vocabulary,
    params: &VqVaeParams,
    gt_depth: &[DepthMap],
    seq_len: usize,
) -> Result<TensorId, LossError> {
    if spans.is_empty() || seq_len == 0 {
        return Err(LossError::EmptyBatch);
    }
    expect_len("ground-truth depth maps", spans.len(), gt_depth.len())?;
    let (rows, _v) = logits_rows(tape, logits)?;
    expect_len("rows for spans", spans.len() * seq_len, rows)?;
    if vocab.code_count() != params.codebook.k {
        return Err(LossError::BatchLayout {
            what: "vocabulary code count",
            expected: params.codebook.k,
            got: vocab.code_count(),
        });
    }
    let code_range = vocab.code_ids();
    let (code_lo, code_hi) = (code_range.start as usize, code_range.end as usize);
    let batch = spans.len();
    let pixels = (params.image_height * params.image_width) as f64;

    let mut spanned = Vec::new();
    let mut constant_part = 0.0;
    for (b, span) in spans.iter().enumerate() {
        let gt = &gt_depth[b];
        if (gt.height, gt.width) != (params.image_height, params.image_width) {
            return Err(LossError::Vq(VqError::GeometryMismatch {
                expected: (params.image_height, params.image_width),
                got: (gt.height, gt.width),
            }));
        }
        let Some(sp) = span else {
            constant_part += gt.values.iter().map(|y| y * y).sum::<f64>() / pixels;
            continue;
        };
        let decoded = if sp.l > 0 {
            let base = b * seq_len;
            let block = tape.slice_rows(logits, base + sp.s, base + sp.e - 1)?;
            let code_logits = tape.slice_cols(block, code_lo, code_hi)?;
            let probs = tape.softmax_rows(code_logits, None)?;
            decode_soft_codes(tape, probs, params)?
        } else {
            let pad = mean_pad(tape, params.codebook.mean_entry(), params.n());
            decode_latents_tape(tape, pad, params)?
        };
        let gt_rows = depth_to_patch_rows(gt, params.patch_size)?;
        spanned.push(tape.mse_vs(decoded, &gt_rows)?);
    }

    let inv_b = 1.0 / batch as f64;
    if spanned.is_empty() {
        return Ok(tape.constant(Tensor::scalar(constant_part * inv_b)));
    }
    let weights = vec![inv_b; spanned.len()];
    let mixed = tape.weighted_sum(&spanned, &weights)?;
    Ok(tape.add_const(mixed, constant_part * inv_b))
}

/// Segmentation loss nodes: mean binary cross entropy, smoothed DICE,
/// and their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct SegLoss {
    pub ce: TensorId,
    pub dice: TensorId,
    pub total: TensorId,
}

/// Pixel-wise BCE plus DICE against a binary mask, both on sigmoid
/// probabilities.
pub fn seg_recon_loss(
    tape: &mut Tape,
    mask_logits: TensorId,
    gt_mask: &[f64],
    weights: &LossWeights,
) -> Result<SegLoss, LossError> {
    weights.validate()?;
    if gt_mask.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    for &g in gt_mask {
        if g != 0.0 && g != 1.0 {
            return Err(LossError::NonBinaryMask { value: g });
        }
    }
    let ce = tape.bce_with_logits_mean(mask_logits, gt_mask)?;
    let probs = tape.sigmoid(mask_logits);
    let gt_node = tape.constant(
        Tensor::from_vec(tape.value(mask_logits).shape(), gt_mask.to_vec())
            .map_err(|_| LossError::BatchLayout {
                what: "segmentation mask",
                expected: tape.value(mask_logits).numel(),
                got: gt_mask.len(),
            })?,
    );
    let intersection = tape.dot(probs, gt_node)?;
    let scaled = tape.scale(intersection, 2.0);
    let numerator = tape.add_const(scaled, DICE_EPSILON);
    let prob_sum = tape.sum_all(probs);
    let gt_sum: f64 = gt_mask.iter().sum();
    let denominator = tape.add_const(prob_sum, gt_sum + DICE_EPSILON);
    let overlap = tape.div_scalar(numerator, denominator)?;
    let negated = tape.scale(overlap, -1.0);
    let dice = tape.add_const(negated, 1.0);
    let total = tape.weighted_sum(&[ce, dice], &[weights.seg_ce_weight, weights.seg_dice_weight])?;
    Ok(SegLoss { ce, dice, total })
}

/// Assemble the report for one batch from raw component values,
/// checking finiteness of every term.
pub fn total_loss(
    components: &LossComponents,
    weights: &LossWeights,
    stats: &SpanStats,
) -> Result<LossReport, LossError> {
    weights.validate()?;
    let named = [
        ("llm", components.llm),
        ("seg_ce", components.seg_ce),
        ("seg_dice", components.seg_dice),
        ("marker", components.marker),
        ("token", components.token),
        ("count", components.count),
        ("depth_recon", components.depth_recon),
    ];
    for (component, value) in named {
        if !value.is_finite() {
            return Err(LossError::NonFinite { component, value });
        }
    }
    let seg_total =
        weights.seg_ce_weight * components.seg_ce + weights.seg_dice_weight * components.seg_dice;
    let depth_composite = weights.lambda_m * components.marker
        + weights.lambda_t * components.token
        + weights.lambda_c * components.count;
    let total = components.llm
        + seg_total
        + weights.lambda_d * depth_composite
        + weights.lambda_r * components.depth_recon;
    if !total.is_finite() {
        return Err(LossError::NonFinite { component: "total", value: total });
    }
    Ok(LossReport {
        llm: components.llm,
        seg_ce: components.seg_ce,
        seg_dice: components.seg_dice,
        seg_total,
        marker: components.marker,
        token: components.token,
        count: components.count,
        depth_composite,
        depth_recon: components.depth_recon,
        total,
        valid_spans: stats.valid_spans,
        mean_interior_len: stats.mean_interior_len,
        offgrammar_interior: stats.offgrammar_interior,
    })
}
