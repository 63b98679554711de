//! Dataset assembly and the single-stage multi-task training loop:
//! teacher-forced forward, all objective components, gradient
//! accumulation, global-norm clipping, and AdamW under a warmup+cosine
//! schedule, all deterministic in the run seed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::codebook::{tokenize_depth, VqError, VqVaeParams};
use crate::grammar::{
    assemble_target, build_prompt, pad_prompt, parse_depth_span, DepthSpan, GrammarError, Role,
    TokenSequence, Vocabulary,
};
use crate::losses::{
    count_loss, depth_composite, llm_loss, marker_loss, seg_recon_loss, soft_depth_reconstruction,
    span_stats, token_loss, total_loss, LossComponents, LossError, LossReport, LossWeights,
    SpanStats,
};
use crate::model::{
    forward_on_tape, image_patch_rows, pixel_features_on_tape, predict_mask_on_tape, ModelError,
    ModelParams, ParamNodes,
};
use crate::optim::{clip_global_norm, AdamW, LrSchedule, OptimError};
use crate::rng::Rng;
use crate::scene::{DepthMap, SceneSample};
use crate::tape::{Tape, TapeError};

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    EmptyDataset,
    BadConfig { reason: &'static str },
    BadSample { reason: &'static str },
    NonFiniteLoss { step: usize, component: String },
    Model(ModelError),
    Loss(LossError),
    Grammar(GrammarError),
    Vq(VqError),
    Optim(OptimError),
    Tape(TapeError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "empty dataset"),
            TrainError::BadConfig { reason } => write!(f, "bad training config: {reason}"),
            TrainError::BadSample { reason } => write!(f, "bad sample: {reason}"),
            TrainError::NonFiniteLoss { step, component } => {
                write!(f, "non-finite {component} loss at step {step}")
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Loss(e) => write!(f, "{e}"),
            TrainError::Grammar(e) => write!(f, "{e}"),
            TrainError::Vq(e) => write!(f, "{e}"),
            TrainError::Optim(e) => write!(f, "{e}"),
            TrainError::Tape(e) => write!(f, "{e}"),
        }
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}
impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}
impl From<GrammarError> for TrainError {
    fn from(e: GrammarError) -> Self {
        TrainError::Grammar(e)
    }
}
impl From<VqError> for TrainError {
    fn from(e: VqError) -> Self {
        TrainError::Vq(e)
    }
}
impl From<OptimError> for TrainError {
    fn from(e: OptimError) -> Self {
        TrainError::Optim(e)
    }
}
impl From<TapeError> for TrainError {
    fn from(e: TapeError) -> Self {
        TrainError::Tape(e)
    }
}

/// Optimization settings. `batch` is the per-forward size; `accum`
/// micro-batches are averaged into one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub accum: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// When set, depth-code positions are left out of the next-token
    /// loss and are supervised through the token loss alone.
    pub exclude_depth_codes_from_llm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 8,
            accum: 2,
            lr: 3e-4,
            warmup_frac: 0.05,
            clip_norm: 1.0,
            seed: 0,
            weights: LossWeights::default(),
            exclude_depth_codes_from_llm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch == 0 || self.accum == 0 {
            return Err(TrainError::BadConfig { reason: "steps, batch, accum must be positive" });
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(TrainError::BadConfig { reason: "lr must be positive and finite" });
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(TrainError::BadConfig { reason: "clip norm must be positive" });
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// Which referring task a sample came from; evaluation filters on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Referring,
    Point,
}

/// One teacher-forcing-ready sample: the padded token sequence with
/// roles, the parsed depth span, and the supervision targets.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image: Vec<u8>,
    /// BOS + template + query, padded to the dataset prompt length,
    /// then the target; tail-padded to the dataset sequence length.
    pub ids: Vec<u32>,
    pub roles: Vec<Role>,
    pub span: Option<DepthSpan>,
    pub seg_pos: Option<usize>,
    pub gt_mask: Vec<bool>,
    pub depth: DepthMap,
    pub prompt_len: usize,
    pub query: String,
    pub answer_words: Vec<String>,
    pub kind: SampleKind,
}

impl PreparedSample {
    /// The prompt slice fed to generation at evaluation time.
    pub fn prompt(&self) -> TokenSequence {
        TokenSequence {
            ids: self.ids[..self.prompt_len].to_vec(),
            roles: self.roles[..self.prompt_len].to_vec(),
        }
    }

    pub fn supervise_mask(&self, exclude_depth_codes: bool) -> Vec<bool> {
        self.roles
            .iter()
            .map(|r| match r {
                Role::Prompt | Role::Pad => false,
                Role::DepthCode => !exclude_depth_codes,
                _ => true,
            })
            .collect()
    }
}

/// Fixed padded prompt width shared by training and evaluation, so
/// queries always start at the same offset. Bound: BOS + the question
/// and answer template words + the longest grammar query, a five-point
/// relative-depth question of 4 + 3*5 words.
pub const PROMPT_LEN: usize = 22;

/// Ablation switches applied at assembly time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareOptions {
    /// Keep the DSTART..DEND depth block in targets.
    pub include_depth: bool,
    /// Keep the SEG token (and with it the mask supervision).
    pub include_seg: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions { include_depth: true, include_seg: true }
    }
}

struct RawSample {
    image: Vec<u8>,
    prompt: TokenSequence,
    target: TokenSequence,
    gt_mask: Vec<bool>,
    depth: DepthMap,
    query: String,
    answer_words: Vec<String>,
    kind: SampleKind,
}

fn filtered_target(target: TokenSequence, opts: &PrepareOptions) -> TokenSequence {
    let mut ids = Vec::with_capacity(target.ids.len());
    let mut roles = Vec::with_capacity(target.roles.len());
    for (id, role) in target.ids.into_iter().zip(target.roles) {
        let keep = match role {
            Role::DepthMarker | Role::DepthCode => opts.include_depth,
            Role::Seg => opts.include_seg,
            _ => true,
        };
        if keep {
            ids.push(id);
            roles.push(role);
        }
    }
    TokenSequence { ids, roles }
}

fn words_of(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// The instance whose pixels sit in front at `(r, c)`, by minimum depth.
fn instance_under(scene: &SceneSample, r: usize, c: usize) -> Option<usize> {
    let w = scene.depth.width;
    let mut best: Option<(usize, f64)> = None;
    for (i, inst) in scene.instances.iter().enumerate() {
        if inst.mask[r * w + c] && best.is_none_or(|(_, z)| inst.z < z) {
            best = Some((i, inst.z));
        }
    }
    best.map(|(i, _)| i)
}

fn raw_referring(
    scene: &SceneSample,
    codes: &[usize],
    vocab: &Vocabulary,
    opts: &PrepareOptions,
) -> Result<RawSample, TrainError> {
    let answer: Vec<&str> = words_of(&scene.answer);
    let target = filtered_target(assemble_target(codes, &answer, vocab)?, opts);
    let prompt = build_prompt(&words_of(&scene.query), vocab)?;
    Ok(RawSample {
        image: scene.image.clone(),
        prompt,
        target,
        gt_mask: scene.instances[scene.target_instance].mask.clone(),
        depth: scene.depth.clone(),
        query: scene.query.clone(),
        answer_words: answer.iter().map(|w| String::from(*w)).collect(),
        kind: SampleKind::Referring,
    })
}

fn raw_point(
    scene: &SceneSample,
    codes: &[usize],
    vocab: &Vocabulary,
    opts: &PrepareOptions,
) -> Result<Option<RawSample>, TrainError> {
    let Some(task) = &scene.point_task else {
        return Ok(None);
    };
    let stride = crate::scene::point_stride(scene.depth.height);
    let query_words = crate::scene::point_query_words(task, stride);
    let answer_words = crate::scene::point_answer_words(task.answer);
    let winner = task
        .points
        .get((task.answer.to_ascii_lowercase() as u8 - b'a') as usize)
        .ok_or(TrainError::BadSample { reason: "point answer outside task" })?;
    let inst = instance_under(scene, winner.0, winner.1)
        .ok_or(TrainError::BadSample { reason: "nearest point lies on background" })?;

    let query_refs: Vec<&str> = query_words.iter().map(String::as_str).collect();
    let answer_refs: Vec<&str> = answer_words.iter().map(String::as_str).collect();
    let target = filtered_target(assemble_target(codes, &answer_refs, vocab)?, opts);
    let prompt = build_prompt(&query_refs, vocab)?;
    Ok(Some(RawSample {
        image: scene.image.clone(),
        prompt,
        target,
        gt_mask: scene.instances[inst].mask.clone(),
        depth: scene.depth.clone(),
        query: query_words.join(" "),
        answer_words,
        kind: SampleKind::Point,
    }))
}

/// Turn scenes into padded training samples: one referring sample per
/// scene plus one relative-depth sample when the scene carries a point
/// task. Prompts share one padded length, sequences another.
pub fn prepare_dataset(
    scenes: &[SceneSample],
    vqvae: &VqVaeParams,
    vocab: &Vocabulary,
    opts: &PrepareOptions,
) -> Result<Vec<PreparedSample>, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if vocab.code_count() != vqvae.codebook.k {
        return Err(TrainError::BadConfig { reason: "vocabulary and codebook disagree on K" });
    }
    let mut raws = Vec::with_capacity(scenes.len() * 2);
    for scene in scenes {
        let codes = tokenize_depth(&scene.depth, vqvae)?.codes;
        raws.push(raw_referring(scene, &codes, vocab, opts)?);
        if let Some(point) = raw_point(scene, &codes, vocab, opts)? {
            raws.push(point);
        }
    }
    let total_len = PROMPT_LEN + raws.iter().map(|r| r.target.len()).max().unwrap();

    let mut out = Vec::with_capacity(raws.len());
    for raw in raws {
        let padded = pad_prompt(&raw.prompt, PROMPT_LEN, vocab)?;
        let mut ids = padded.ids;
        let mut roles = padded.roles;
        ids.extend_from_slice(&raw.target.ids);
        roles.extend_from_slice(&raw.target.roles);
        while ids.len() < total_len {
            ids.push(vocab.pad());
            roles.push(Role::Pad);
        }
        let span = parse_depth_span(&ids, vocab);
        let seg_pos = roles.iter().position(|&r| r == Role::Seg);
        out.push(PreparedSample {
            image: raw.image,
            ids,
            roles,
            span,
            seg_pos,
            gt_mask: raw.gt_mask,
            depth: raw.depth,
            prompt_len: PROMPT_LEN,
            query: raw.query,
            answer_words: raw.answer_words,
            kind: raw.kind,
        });
    }
    Ok(out)
}

/// Final parameters plus the per-optimizer-step loss trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub reports: Vec<LossReport>,
}

fn merge_stats(micros: &[SpanStats]) -> SpanStats {
    let mut merged = SpanStats::default();
    let mut weighted_len = 0.0;
    for s in micros {
        merged.valid_spans += s.valid_spans;
        merged.offgrammar_interior += s.offgrammar_interior;
        weighted_len += s.mean_interior_len * s.valid_spans as f64;
    }
    if merged.valid_spans > 0 {
        merged.mean_interior_len = weighted_len / merged.valid_spans as f64;
    }
    merged
}

/// One micro-batch graph: returns the component values and the
/// accumulated per-group gradients of `total / accum_scale`.
#[allow(clippy::too_many_arguments)]
fn micro_step(
    params: &ModelParams,
    dataset: &[PreparedSample],
    batch: &[usize],
    vqvae: &VqVaeParams,
    vocab: &Vocabulary,
    config: &TrainConfig,
    accum_scale: f64,
    grad_accum: &mut [Vec<f64>],
) -> Result<(LossComponents, SpanStats), TrainError> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::load(&mut tape, params, true);

    let seq_len = dataset[batch[0]].ids.len();
    let mut logit_parts = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * seq_len);
    let mut supervise = Vec::with_capacity(batch.len() * seq_len);
    let mut spans = Vec::with_capacity(batch.len());
    let mut depths = Vec::with_capacity(batch.len());
    let mut seg_nodes = Vec::new();
    for &idx in batch {
        let sample = &dataset[idx];
        if sample.ids.len() != seq_len {
            return Err(TrainError::BadSample { reason: "ragged sequence lengths in batch" });
        }
        let patch_rows = image_patch_rows(
            &sample.image,
            params.image_height,
            params.image_width,
            params.config.image_patch,
        )?;
        let fwd = forward_on_tape(&mut tape, &nodes, params, &patch_rows, &sample.ids)?;
        logit_parts.push(fwd.logits);
        targets.extend_from_slice(&sample.ids);
        supervise.extend(sample.supervise_mask(config.exclude_depth_codes_from_llm));
        spans.push(sample.span);
        depths.push(sample.depth.clone());
        if let Some(seg_pos) = sample.seg_pos {
            let feat = pixel_features_on_tape(&mut tape, &nodes, params, &sample.image, fwd.visual)?;
            let mask = predict_mask_on_tape(&mut tape, &nodes, fwd.hidden, seg_pos, feat)?;
            let gt: Vec<f64> = sample.gt_mask.iter().map(|&b| f64::from(b)).collect();
            seg_nodes.push(seg_recon_loss(&mut tape, mask, &gt, &config.weights)?);
        }
    }

    let logits = tape.concat_rows(&logit_parts)?;
    let llm = llm_loss(&mut tape, logits, &targets, &supervise, seq_len)?;
    let marker = marker_loss(&mut tape, logits, &targets, &spans, seq_len)?;
    let token = token_loss(&mut tape, logits, &targets, &spans, seq_len)?;
    let count = count_loss(&spans, vqvae.n());
    let recon =
        soft_depth_reconstruction(&mut tape, logits, &spans, vocab, vqvae, &depths, seq_len)?;
    let composite = depth_composite(&mut tape, marker, token, count, &config.weights)?;

    let inv_b = 1.0 / batch.len() as f64;
    let (seg_ce, seg_dice, seg_total) = if seg_nodes.is_empty() {
        let zero = tape.constant(crate::tensor::Tensor::scalar(0.0));
        (zero, zero, zero)
    } else {
        let w = vec![inv_b; seg_nodes.len()];
        let ces: Vec<_> = seg_nodes.iter().map(|s| s.ce).collect();
        let dices: Vec<_> = seg_nodes.iter().map(|s| s.dice).collect();
        let totals: Vec<_> = seg_nodes.iter().map(|s| s.total).collect();
        (
            tape.weighted_sum(&ces, &w)?,
            tape.weighted_sum(&dices, &w)?,
            tape.weighted_sum(&totals, &w)?,
        )
    };

    let total = tape.weighted_sum(
        &[llm, seg_total, composite, recon],
        &[1.0, 1.0, config.weights.lambda_d, config.weights.lambda_r],
    )?;
    let scaled = tape.scale(total, accum_scale);

    let components = LossComponents {
        llm: tape.value(llm).item(),
        seg_ce: tape.value(seg_ce).item(),
        seg_dice: tape.value(seg_dice).item(),
        marker: tape.value(marker).item(),
        token: tape.value(token).item(),
        count,
        depth_recon: tape.value(recon).item(),
    };
    let stats = span_stats(&spans, &targets, seq_len, vocab);

    let grads = tape.backward(scaled)?;
    for (acc, part) in grad_accum.iter_mut().zip(nodes.collect_grads(&grads, params)) {
        for (a, g) in acc.iter_mut().zip(part) {
            *a += g;
        }
    }
    Ok((components, stats))
}

/// Run the single-stage multi-task loop. The depth branch stays frozen:
/// `vqvae` is only read.
pub fn train(
    params: ModelParams,
    dataset: &[PreparedSample],
    vqvae: &VqVaeParams,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if params.vocab_size != vocab.size() {
        return Err(TrainError::BadConfig { reason: "model and vocabulary sizes differ" });
    }
    if (params.image_height, params.image_width) != (vqvae.image_height, vqvae.image_width) {
        return Err(TrainError::BadConfig { reason: "model and vqvae image geometry differ" });
    }

    let mut params = params;
    let group_lens = params.group_lens();
    // AdamW constants 0.9/0.999/1e-8/0.01, decay applied uniformly.
    let mut opt = AdamW::new(&group_lens);
    let schedule = LrSchedule::new(config.lr, config.steps as u64, config.warmup_frac)?;
    let mut order_rng = Rng::from_seed(config.seed).child("batch-order");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order_rng.shuffle(&mut order);
    let mut cursor = 0usize;
    let accum_scale = 1.0 / config.accum as f64;

    let mut reports = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut grad_accum: Vec<Vec<f64>> =
            group_lens.iter().map(|&n| vec![0.0; n]).collect();
        let mut comp_sum = LossComponents {
            llm: 0.0,
            seg_ce: 0.0,
            seg_dice: 0.0,
            marker: 0.0,
            token: 0.0,
            count: 0.0,
            depth_recon: 0.0,
        };
        let mut micro_stats = Vec::with_capacity(config.accum);
        for _ in 0..config.accum {
            if cursor + config.batch > order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            let batch: Vec<usize> = if order.len() >= config.batch {
                let b = order[cursor..cursor + config.batch].to_vec();
                cursor += config.batch;
                b
            } else {
                // Tiny datasets cycle in shuffled order.
                (0..config.batch).map(|i| order[(cursor + i) % order.len()]).collect()
            };
            let (c, s) = micro_step(
                &params,
                dataset,
                &batch,
                vqvae,
                vocab,
                config,
                accum_scale,
                &mut grad_accum,
            )?;
            comp_sum.llm += c.llm * accum_scale;
            comp_sum.seg_ce += c.seg_ce * accum_scale;
            comp_sum.seg_dice += c.seg_dice * accum_scale;
            comp_sum.marker += c.marker * accum_scale;
            comp_sum.token += c.token * accum_scale;
            comp_sum.count += c.count * accum_scale;
            comp_sum.depth_recon += c.depth_recon * accum_scale;
            micro_stats.push(s);
        }
        let stats = merge_stats(&micro_stats);
        let report = total_loss(&comp_sum, &config.weights, &stats).map_err(|e| match e {
            LossError::NonFinite { component, .. } => {
                TrainError::NonFiniteLoss { step, component: String::from(component) }
            }
            other => TrainError::Loss(other),
        })?;
        reports.push(report);

        clip_global_norm(&mut grad_accum, config.clip_norm)?;
        let lr = schedule.at(step as u64)?;
        let mut groups = params.groups_mut();
        opt.step(&mut groups, &grad_accum, lr).map_err(|e| match e {
            OptimError::NonFiniteGradient { .. } => {
                TrainError::NonFiniteLoss { step, component: format!("gradient ({e})") }
            }
            other => TrainError::Optim(other),
        })?;
    }
    Ok(TrainOutcome { params, reports })
}

/// Random small vq geometry (K = 5, E = 3) over a square image, for
/// tests across the crate that need a frozen depth branch without
/// training one.
#[cfg(test)]
pub(crate) fn test_vqvae(seed: u64, image: usize) -> VqVaeParams {
    use crate::codebook::Codebook;
    let mut rng = Rng::from_seed(seed);
    let (k, e, hidden, patch) = (5usize, 3usize, 4usize, 4usize);
    let pp = patch * patch;
    let mut mat = |n: usize| -> Vec<f64> { (0..n).map(|_| 0.3 * rng.normal()).collect() };
    VqVaeParams {
        enc_w1: mat(pp * hidden),
        enc_b1: mat(hidden),
        enc_w2: mat(hidden * e),
        enc_b2: mat(e),
        dec_w1: mat(e * hidden),
        dec_b1: vec![1.0; hidden],
        dec_w2: mat(hidden * pp),
        dec_b2: vec![0.5; pp],
        hidden,
        codebook: Codebook { k, e, entries: mat(k * e) },
        image_height: image,
        image_width: image,
        patch_size: patch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::test_vqvae as random_vqvae;
    use crate::grammar::build_vocabulary;
    use crate::model::{init_model, ModelConfig};
    use crate::scene::{answer_grammar_words, generate_scene, SceneConfig};

    fn tiny_scene_config() -> SceneConfig {
        SceneConfig {
            height: 20,
            width: 20,
            object_count_range: (1, 1),
            seed: 5,
            ..SceneConfig::default()
        }
    }

    fn tiny_setup() -> (Vec<PreparedSample>, VqVaeParams, Vocabulary, ModelParams) {
        let scene_cfg = tiny_scene_config();
        let scenes: Vec<SceneSample> =
            (0..12).map(|i| generate_scene(&scene_cfg, i).unwrap()).collect();
        let vqvae = random_vqvae(3, 20);
        let words = answer_grammar_words();
        let vocab = build_vocabulary(vqvae.codebook.k, &words).unwrap();
        let dataset =
            prepare_dataset(&scenes, &vqvae, &vocab, &PrepareOptions::default()).unwrap();
        let config = ModelConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            feedforward: 24,
            image_patch: 4,
            max_len: 96,
            d_feat: 6,
            dropout: 0.0,
        };
        let params = init_model(&config, vocab.size(), 20, 20, 1).unwrap();
        (dataset, vqvae, vocab, params)
    }

    #[test]
    fn prepared_samples_carry_the_grammar_layout() {
        // Two-instance scenes at full 40x40 geometry so point tasks can
        // exist (they need at least two distinct depth sources).
        let scene_cfg = SceneConfig { object_count_range: (2, 2), ..SceneConfig::default() };
        let scenes: Vec<SceneSample> =
            (0..6).map(|i| generate_scene(&scene_cfg, i).unwrap()).collect();
        let vqvae = random_vqvae(3, 40);
        let vocab = build_vocabulary(vqvae.codebook.k, &answer_grammar_words()).unwrap();
        let dataset =
            prepare_dataset(&scenes, &vqvae, &vocab, &PrepareOptions::default()).unwrap();
        assert!(dataset.len() > 6);
        let prompt_len = dataset[0].prompt_len;
        assert_eq!(prompt_len, PROMPT_LEN);
        let seq_len = dataset[0].ids.len();
        let mut kinds = (0, 0);
        for s in &dataset {
            assert_eq!(s.ids.len(), seq_len);
            assert_eq!(s.roles.len(), seq_len);
            assert_eq!(s.prompt_len, prompt_len);
            // Target starts with SEG then DSTART, interior all codes.
            assert_eq!(s.ids[prompt_len], vocab.seg());
            assert_eq!(s.roles[prompt_len], Role::Seg);
            assert_eq!(s.seg_pos, Some(prompt_len));
            let span = s.span.expect("depth span");
            assert_eq!(span.s, prompt_len + 1);
            assert_eq!(span.l, vqvae.n());
            assert!(s.ids[span.s + 1..span.e].iter().all(|&id| vocab.is_code(id)));
            // Prompt positions are never supervised, EOS is.
            let mask = s.supervise_mask(false);
            assert!(mask[..prompt_len].iter().all(|&m| !m));
            let eos_pos = s.ids.iter().position(|&id| id == vocab.eos()).unwrap();
            assert!(mask[eos_pos]);
            assert!(s.roles[eos_pos + 1..].iter().all(|&r| r == Role::Pad));
            // The depth-code exclusion flag empties exactly the interior.
            let excl = s.supervise_mask(true);
            let dropped =
                mask.iter().zip(&excl).filter(|(a, b)| **a && !**b).count();
            assert_eq!(dropped, vqvae.n());
            match s.kind {
                SampleKind::Referring => kinds.0 += 1,
                SampleKind::Point => kinds.1 += 1,
            }
            assert!(!s.gt_mask.iter().all(|&b| !b), "empty ground-truth mask");
        }
        assert!(kinds.0 == 6 && kinds.1 > 0, "kinds {kinds:?}");
    }

    #[test]
    fn ablation_options_strip_tokens() {
        let scene_cfg = tiny_scene_config();
        let scenes: Vec<SceneSample> =
            (0..3).map(|i| generate_scene(&scene_cfg, i).unwrap()).collect();
        let vqvae = random_vqvae(3, 20);
        let words = answer_grammar_words();
        let vocab = build_vocabulary(vqvae.codebook.k, &words).unwrap();

        let no_depth = PrepareOptions { include_depth: false, include_seg: true };
        let ds = prepare_dataset(&scenes, &vqvae, &vocab, &no_depth).unwrap();
        for s in &ds {
            assert!(s.span.is_none());
            assert!(!s.ids.contains(&vocab.dstart()));
            assert_eq!(s.seg_pos, Some(s.prompt_len));
        }

        let no_seg = PrepareOptions { include_depth: true, include_seg: false };
        let ds = prepare_dataset(&scenes, &vqvae, &vocab, &no_seg).unwrap();
        for s in &ds {
            assert_eq!(s.seg_pos, None);
            assert_eq!(s.ids[s.prompt_len], vocab.dstart());
            assert!(s.span.is_some());
        }
    }

    #[test]
    fn training_descends_and_stays_deterministic() {
        let (dataset, vqvae, vocab, params) = tiny_setup();
        let config = TrainConfig {
            steps: 24,
            batch: 2,
            accum: 2,
            lr: 3e-3,
            seed: 7,
            ..TrainConfig::default()
        };
        let vq_before = vqvae.clone();
        let out = train(params.clone(), &dataset, &vqvae, &vocab, &config).unwrap();
        assert_eq!(out.reports.len(), 24);
        assert!(out.reports.iter().all(|r| r.total.is_finite()));
        let first: f64 = out.reports[..4].iter().map(|r| r.total).sum::<f64>() / 4.0;
        let last: f64 = out.reports[20..].iter().map(|r| r.total).sum::<f64>() / 4.0;
        assert!(last < first, "no descent: first {first}, last {last}");
        // The depth branch is read-only during training.
        assert_eq!(vqvae, vq_before);

        let again = train(params.clone(), &dataset, &vqvae, &vocab, &config).unwrap();
        assert_eq!(out.params, again.params);
        let other_seed = TrainConfig { seed: 8, ..config };
        let third = train(params, &dataset, &vqvae, &vocab, &other_seed).unwrap();
        assert_ne!(out.params, third.params);
    }

    #[test]
    fn nonfinite_loss_aborts_with_step_and_component() {
        let (dataset, vqvae, vocab, mut params) = tiny_setup();
        // An infinite output weight sends every row's log-sum-exp to NaN
        // while the rest of the graph stays well-formed.
        let col = vocab.word_id("red").unwrap() as usize;
        params.out_w[col] = f64::INFINITY;
        let config =
            TrainConfig { steps: 3, batch: 2, accum: 1, seed: 7, ..TrainConfig::default() };
        let err = train(params, &dataset, &vqvae, &vocab, &config).unwrap_err();
        assert_eq!(
            err,
            TrainError::NonFiniteLoss { step: 0, component: String::from("llm") }
        );
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { steps: 0, ..ok }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..ok }.validate().is_err());
        assert!(TrainConfig { clip_norm: 0.0, ..ok }.validate().is_err());
        let mut bad = ok;
        bad.weights.lambda_r = -1.0;
        assert!(bad.validate().is_err());
    }
}
