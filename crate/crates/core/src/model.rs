//! The desk-scale decoder: a patch image encoder, a causal transformer
//! over the unified vocabulary with a bidirectional visual prefix, and a
//! dot-product segmentation head driven by the SEG hidden state.
//!
//! Sequence layout per sample: `m` visual tokens, then the text tokens.
//! Visual positions attend among themselves, text positions attend to
//! every visual token and causally within the text region. Logits are
//! returned for text rows only; row `t` predicts the token at text
//! position `t + 1`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::codebook::{detokenize, DepthTokenGrid, VqVaeParams};
use crate::fmath;
use crate::grammar::{answer_words, parse_depth_span, DepthSpan, TokenSequence, Vocabulary};
use crate::rng::Rng;
use crate::scene::DepthMap;
use crate::tape::{Gradients, Tape, TapeError, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    BadConfig { reason: &'static str },
    Overlong { needed: usize, max: usize },
    BadImage { expected: usize, got: usize },
    BadGeometry { reason: &'static str },
    Tape(TapeError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::BadConfig { reason } => write!(f, "bad model config: {reason}"),
            ModelError::Overlong { needed, max } => {
                write!(f, "sequence needs {needed} positions, model allows {max}")
            }
            ModelError::BadImage { expected, got } => {
                write!(f, "image byte count {got} does not match geometry {expected}")
            }
            ModelError::BadGeometry { reason } => write!(f, "bad geometry: {reason}"),
            ModelError::Tape(e) => write!(f, "tape failure in model: {e}"),
        }
    }
}

impl From<TapeError> for ModelError {
    fn from(e: TapeError) -> Self {
        ModelError::Tape(e)
    }
}

/// Architecture knobs. Defaults are the published desk-scale shape.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub feedforward: usize,
    pub image_patch: usize,
    pub max_len: usize,
    pub d_feat: usize,
    /// Fixed at zero; kept as a field so configs state it explicitly.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            layers: 4,
            heads: 4,
            feedforward: 256,
            image_patch: 4,
            max_len: 256,
            d_feat: 32,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.feedforward == 0 {
            return Err(ModelError::BadConfig { reason: "zero-sized dimension" });
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::BadConfig { reason: "d_model not divisible by heads" });
        }
        if self.image_patch == 0 || self.max_len == 0 || self.d_feat == 0 {
            return Err(ModelError::BadConfig { reason: "zero-sized dimension" });
        }
        if self.dropout != 0.0 {
            return Err(ModelError::BadConfig { reason: "dropout is fixed at zero" });
        }
        Ok(())
    }
}

/// One pre-LN transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub ff_w1: Vec<f64>,
    pub ff_b1: Vec<f64>,
    pub ff_w2: Vec<f64>,
    pub ff_b2: Vec<f64>,
}

/// All trainable state. Group order is fixed: the optimizer, the
/// checkpoint container, and gradient collection all walk
/// [`ModelParams::group_lens`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub token_embed: Vec<f64>,
    pub pos_embed: Vec<f64>,
    pub patch_w: Vec<f64>,
    pub patch_b: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_ln_g: Vec<f64>,
    pub final_ln_b: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
    /// Pixel-feature map: rgb + normalized coordinates, and the visual
    /// embedding of the containing patch, both projected to d_feat.
    pub feat_w_pix: Vec<f64>,
    pub feat_w_phi: Vec<f64>,
    pub feat_b: Vec<f64>,
    /// SEG-hidden to query projection and the scalar mask bias.
    pub seg_query_w: Vec<f64>,
    pub seg_bias: Vec<f64>,
}

/// Columns of the per-pixel constant input: r, g, b, row, col.
const PIX_INPUT_COLS: usize = 5;
const LN_EPS: f64 = 1e-5;

/// Total parameter count as a pure function of the shape.
pub fn param_count(config: &ModelConfig, vocab_size: usize) -> usize {
    let d = config.d_model;
    let ff = config.feedforward;
    let v = vocab_size;
    let patch_dim = 3 * config.image_patch * config.image_patch;
    let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d);
    v * d
        + config.max_len * d
        + patch_dim * d
        + d
        + config.layers * block
        + 2 * d
        + d * v
        + v
        + PIX_INPUT_COLS * config.d_feat
        + d * config.d_feat
        + config.d_feat
        + d * config.d_feat
        + 1
}

impl ModelParams {
    pub fn visual_tokens(&self) -> usize {
        (self.image_height / self.config.image_patch) * (self.image_width / self.config.image_patch)
    }

    /// Flat parameter groups in fixed order.
    pub fn group_lens(&self) -> Vec<usize> {
        self.groups().iter().map(|g| g.len()).collect()
    }

    pub fn groups(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            &self.token_embed,
            &self.pos_embed,
            &self.patch_w,
            &self.patch_b,
        ];
        for b in &self.blocks {
            out.extend([
                &b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo,
                &b.ln2_g, &b.ln2_b, &b.ff_w1, &b.ff_b1, &b.ff_w2, &b.ff_b2,
            ]
            .map(|v: &Vec<f64>| v.as_slice()));
        }
        out.extend(
            [
                &self.final_ln_g,
                &self.final_ln_b,
                &self.out_w,
                &self.out_b,
                &self.feat_w_pix,
                &self.feat_w_phi,
                &self.feat_b,
                &self.seg_query_w,
                &self.seg_bias,
            ]
            .map(|v: &Vec<f64>| v.as_slice()),
        );
        out
    }

    pub fn groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.token_embed.as_mut_slice(),
            self.pos_embed.as_mut_slice(),
            self.patch_w.as_mut_slice(),
            self.patch_b.as_mut_slice(),
        ];
        for b in &mut self.blocks {
            out.push(b.ln1_g.as_mut_slice());
            out.push(b.ln1_b.as_mut_slice());
            out.push(b.wq.as_mut_slice());
            out.push(b.bq.as_mut_slice());
            out.push(b.wk.as_mut_slice());
            out.push(b.bk.as_mut_slice());
            out.push(b.wv.as_mut_slice());
            out.push(b.bv.as_mut_slice());
            out.push(b.wo.as_mut_slice());
            out.push(b.bo.as_mut_slice());
            out.push(b.ln2_g.as_mut_slice());
            out.push(b.ln2_b.as_mut_slice());
            out.push(b.ff_w1.as_mut_slice());
            out.push(b.ff_b1.as_mut_slice());
            out.push(b.ff_w2.as_mut_slice());
            out.push(b.ff_b2.as_mut_slice());
        }
        out.push(self.final_ln_g.as_mut_slice());
        out.push(self.final_ln_b.as_mut_slice());
        out.push(self.out_w.as_mut_slice());
        out.push(self.out_b.as_mut_slice());
        out.push(self.feat_w_pix.as_mut_slice());
        out.push(self.feat_w_phi.as_mut_slice());
        out.push(self.feat_b.as_mut_slice());
        out.push(self.seg_query_w.as_mut_slice());
        out.push(self.seg_bias.as_mut_slice());
        out
    }
}

/// Fresh parameters: normal(0, 0.02) weights, zero biases, identity
/// layer norms.
pub fn init_model(
    config: &ModelConfig,
    vocab_size: usize,
    image_height: usize,
    image_width: usize,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    config.validate()?;
    if vocab_size == 0 {
        return Err(ModelError::BadConfig { reason: "empty vocabulary" });
    }
    if !image_height.is_multiple_of(config.image_patch) || !image_width.is_multiple_of(config.image_patch) {
        return Err(ModelError::BadGeometry { reason: "image not divisible by patch size" });
    }
    let mut rng = Rng::from_seed(seed).child("model-init");
    let d = config.d_model;
    let ff = config.feedforward;
    let patch_dim = 3 * config.image_patch * config.image_patch;
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| 0.02 * rng.normal()).collect() };
    let blocks = (0..config.layers)
        .map(|_| BlockParams {
            ln1_g: vec![1.0; d],
            ln1_b: vec![0.0; d],
            wq: normal(d * d),
            bq: vec![0.0; d],
            wk: normal(d * d),
            bk: vec![0.0; d],
            wv: normal(d * d),
            bv: vec![0.0; d],
            wo: normal(d * d),
            bo: vec![0.0; d],
            ln2_g: vec![1.0; d],
            ln2_b: vec![0.0; d],
            ff_w1: normal(d * ff),
            ff_b1: vec![0.0; ff],
            ff_w2: normal(ff * d),
            ff_b2: vec![0.0; d],
        })
        .collect();
    Ok(ModelParams {
        config: *config,
        vocab_size,
        image_height,
        image_width,
        token_embed: normal(vocab_size * d),
        pos_embed: normal(config.max_len * d),
        patch_w: normal(patch_dim * d),
        patch_b: vec![0.0; d],
        blocks,
        final_ln_g: vec![1.0; d],
        final_ln_b: vec![0.0; d],
        out_w: normal(d * vocab_size),
        out_b: vec![0.0; vocab_size],
        feat_w_pix: normal(PIX_INPUT_COLS * config.d_feat),
        feat_w_phi: normal(d * config.d_feat),
        feat_b: vec![0.0; config.d_feat],
        seg_query_w: normal(d * config.d_feat),
        seg_bias: vec![0.0; 1],
    })
}

// ─── tape loading ───

#[derive(Debug, Clone)]
pub struct BlockNodes {
    pub ln1_g: TensorId,
    pub ln1_b: TensorId,
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln2_g: TensorId,
    pub ln2_b: TensorId,
    pub ff_w1: TensorId,
    pub ff_b1: TensorId,
    pub ff_w2: TensorId,
    pub ff_b2: TensorId,
}

/// Tape ids of every parameter group, in [`ModelParams::group_lens`]
/// order.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub token_embed: TensorId,
    pub pos_embed: TensorId,
    pub patch_w: TensorId,
    pub patch_b: TensorId,
    pub blocks: Vec<BlockNodes>,
    pub final_ln_g: TensorId,
    pub final_ln_b: TensorId,
    pub out_w: TensorId,
    pub out_b: TensorId,
    pub feat_w_pix: TensorId,
    pub feat_w_phi: TensorId,
    pub feat_b: TensorId,
    pub seg_query_w: TensorId,
    pub seg_bias: TensorId,
}

impl ParamNodes {
    /// Put every group on the tape, as gradient-carrying inputs when
    /// training or constants when frozen.
    pub fn load(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ParamNodes {
        let c = &params.config;
        let d = c.d_model;
        let v = params.vocab_size;
        let patch_dim = 3 * c.image_patch * c.image_patch;
        let mut put = |shape: &[usize], data: &Vec<f64>| -> TensorId {
            let t = Tensor::from_vec(shape, data.clone()).expect("parameter shape");
            if trainable {
                tape.input(t.with_grad())
            } else {
                tape.constant(t)
            }
        };
        let token_embed = put(&[v, d], &params.token_embed);
        let pos_embed = put(&[c.max_len, d], &params.pos_embed);
        let patch_w = put(&[patch_dim, d], &params.patch_w);
        let patch_b = put(&[d], &params.patch_b);
        let blocks = params
            .blocks
            .iter()
            .map(|b| BlockNodes {
                ln1_g: put(&[d], &b.ln1_g),
                ln1_b: put(&[d], &b.ln1_b),
                wq: put(&[d, d], &b.wq),
                bq: put(&[d], &b.bq),
                wk: put(&[d, d], &b.wk),
                bk: put(&[d], &b.bk),
                wv: put(&[d, d], &b.wv),
                bv: put(&[d], &b.bv),
                wo: put(&[d, d], &b.wo),
                bo: put(&[d], &b.bo),
                ln2_g: put(&[d], &b.ln2_g),
                ln2_b: put(&[d], &b.ln2_b),
                ff_w1: put(&[d, c.feedforward], &b.ff_w1),
                ff_b1: put(&[c.feedforward], &b.ff_b1),
                ff_w2: put(&[c.feedforward, d], &b.ff_w2),
                ff_b2: put(&[d], &b.ff_b2),
            })
            .collect();
        ParamNodes {
            token_embed,
            pos_embed,
            patch_w,
            patch_b,
            blocks,
            final_ln_g: put(&[d], &params.final_ln_g),
            final_ln_b: put(&[d], &params.final_ln_b),
            out_w: put(&[d, v], &params.out_w),
            out_b: put(&[v], &params.out_b),
            feat_w_pix: put(&[PIX_INPUT_COLS, c.d_feat], &params.feat_w_pix),
            feat_w_phi: put(&[d, c.d_feat], &params.feat_w_phi),
            feat_b: put(&[c.d_feat], &params.feat_b),
            seg_query_w: put(&[d, c.d_feat], &params.seg_query_w),
            seg_bias: put(&[1], &params.seg_bias),
        }
    }

    pub fn ids(&self) -> Vec<TensorId> {
        let mut out = vec![self.token_embed, self.pos_embed, self.patch_w, self.patch_b];
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g,
                b.ln2_b, b.ff_w1, b.ff_b1, b.ff_w2, b.ff_b2,
            ]);
        }
        out.extend([
            self.final_ln_g,
            self.final_ln_b,
            self.out_w,
            self.out_b,
            self.feat_w_pix,
            self.feat_w_phi,
            self.feat_b,
            self.seg_query_w,
            self.seg_bias,
        ]);
        out
    }

    /// Per-group gradients in group order; groups untouched by the loss
    /// come back as zeros.
    pub fn collect_grads(&self, grads: &Gradients, params: &ModelParams) -> Vec<Vec<f64>> {
        self.ids()
            .iter()
            .zip(params.group_lens())
            .map(|(&id, len)| grads.of_or_zeros(id, len))
            .collect()
    }
}

// ─── image plumbing ───

/// Patch-major rows of normalized rgb values, one row per visual token,
/// `3 * patch^2` columns each; same patch order as the depth tokenizer.
pub fn image_patch_rows(
    image: &[u8],
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Vec<f64>, ModelError> {
    if image.len() != height * width * 3 {
        return Err(ModelError::BadImage { expected: height * width * 3, got: image.len() });
    }
    if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(ModelError::BadGeometry { reason: "image not divisible by patch size" });
    }
    let (gh, gw) = (height / patch, width / patch);
    let mut rows = Vec::with_capacity(gh * gw * patch * patch * 3);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                for c in 0..patch {
                    let base = ((pr * patch + r) * width + pc * patch + c) * 3;
                    for ch in 0..3 {
                        rows.push(image[base + ch] as f64 / 255.0);
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Per-pixel constant inputs `[r, g, b, row, col]` with coordinates
/// normalized to pixel centers.
pub fn pixel_inputs(image: &[u8], height: usize, width: usize) -> Result<Vec<f64>, ModelError> {
    if image.len() != height * width * 3 {
        return Err(ModelError::BadImage { expected: height * width * 3, got: image.len() });
    }
    let mut out = Vec::with_capacity(height * width * PIX_INPUT_COLS);
    for r in 0..height {
        for c in 0..width {
            let base = (r * width + c) * 3;
            out.push(image[base] as f64 / 255.0);
            out.push(image[base + 1] as f64 / 255.0);
            out.push(image[base + 2] as f64 / 255.0);
            out.push((r as f64 + 0.5) / height as f64);
            out.push((c as f64 + 0.5) / width as f64);
        }
    }
    Ok(out)
}

// ─── forward ───

#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    /// Text-region logits, `[T, V]`.
    pub logits: TensorId,
    /// Final-layer-norm hidden states of the text region, `[T, d]`.
    pub hidden: TensorId,
    /// Patch embeddings before the decoder, `[m, d]`; feeds the
    /// per-pixel feature map.
    pub visual: TensorId,
}

fn attention_mask(m: usize, t: usize) -> Vec<bool> {
    let s = m + t;
    let mut mask = vec![false; s * s];
    for i in 0..s {
        for j in 0..s {
            mask[i * s + j] = if i < m { j < m } else { j < m || j <= i };
        }
    }
    mask
}

/// Full forward pass on an existing tape. `patch_rows` is the
/// [`image_patch_rows`] output for this sample.
pub fn forward_on_tape(
    tape: &mut Tape,
    nodes: &ParamNodes,
    params: &ModelParams,
    patch_rows: &[f64],
    token_ids: &[u32],
) -> Result<ForwardNodes, ModelError> {
    let c = &params.config;
    let d = c.d_model;
    let m = params.visual_tokens();
    let patch_dim = 3 * c.image_patch * c.image_patch;
    if patch_rows.len() != m * patch_dim {
        return Err(ModelError::BadImage { expected: m * patch_dim, got: patch_rows.len() });
    }
    if token_ids.is_empty() {
        return Err(ModelError::BadGeometry { reason: "empty token sequence" });
    }
    let t_len = token_ids.len();
    let s = m + t_len;
    if s > c.max_len {
        return Err(ModelError::Overlong { needed: s, max: c.max_len });
    }

    let patch_in = tape.constant(Tensor::from_vec(&[m, patch_dim], patch_rows.to_vec()).unwrap());
    let vis_proj = tape.matmul(patch_in, nodes.patch_w)?;
    let visual = tape.add_bias(vis_proj, nodes.patch_b)?;

    let ids: Vec<usize> = token_ids.iter().map(|&id| id as usize).collect();
    let text_emb = tape.embed(nodes.token_embed, &ids)?;
    let stacked = tape.concat_rows(&[visual, text_emb])?;
    let pos = tape.slice_rows(nodes.pos_embed, 0, s)?;
    let mut x = tape.add(stacked, pos)?;

    let mask = attention_mask(m, t_len);
    let dk = d / c.heads;
    let scale = 1.0 / fmath::sqrt(dk as f64);
    for b in &nodes.blocks {
        let h = tape.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
        let q = tape.matmul(h, b.wq)?;
        let q = tape.add_bias(q, b.bq)?;
        let k = tape.matmul(h, b.wk)?;
        let k = tape.add_bias(k, b.bk)?;
        let v = tape.matmul(h, b.wv)?;
        let v = tape.add_bias(v, b.bv)?;
        let mut heads = Vec::with_capacity(c.heads);
        for hd in 0..c.heads {
            let (lo, hi) = (hd * dk, (hd + 1) * dk);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores, Some(&mask))?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn = tape.matmul(ctx, b.wo)?;
        let attn = tape.add_bias(attn, b.bo)?;
        x = tape.add(x, attn)?;

        let h2 = tape.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS)?;
        let f1 = tape.matmul(h2, b.ff_w1)?;
        let f1 = tape.add_bias(f1, b.ff_b1)?;
        let f1 = tape.relu(f1);
        let f2 = tape.matmul(f1, b.ff_w2)?;
        let f2 = tape.add_bias(f2, b.ff_b2)?;
        x = tape.add(x, f2)?;
    }

    let normed = tape.layer_norm(x, nodes.final_ln_g, nodes.final_ln_b, LN_EPS)?;
    let hidden = tape.slice_rows(normed, m, s)?;
    let logits = tape.matmul(hidden, nodes.out_w)?;
    let logits = tape.add_bias(logits, nodes.out_b)?;
    Ok(ForwardNodes { logits, hidden, visual })
}

/// Per-pixel feature map `[H*W, d_feat]` from rgb, coordinates, and the
/// containing patch's visual embedding.
pub fn pixel_features_on_tape(
    tape: &mut Tape,
    nodes: &ParamNodes,
    params: &ModelParams,
    image: &[u8],
    visual: TensorId,
) -> Result<TensorId, ModelError> {
    let (h, w) = (params.image_height, params.image_width);
    let pix = pixel_inputs(image, h, w)?;
    let pix_node = tape.constant(Tensor::from_vec(&[h * w, PIX_INPUT_COLS], pix).unwrap());
    let gw = w / params.config.image_patch;
    let mut patch_of = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            patch_of.push((r / params.config.image_patch) * gw + c / params.config.image_patch);
        }
    }
    let phi = tape.embed(visual, &patch_of)?;
    let a = tape.matmul(pix_node, nodes.feat_w_pix)?;
    let b = tape.matmul(phi, nodes.feat_w_phi)?;
    let sum = tape.add(a, b)?;
    Ok(tape.add_bias(sum, nodes.feat_b)?)
}

/// Mask logits `[H*W, 1]`: project the SEG hidden state to a query and
/// dot it with every pixel feature, plus the scalar bias.
pub fn predict_mask_on_tape(
    tape: &mut Tape,
    nodes: &ParamNodes,
    hidden: TensorId,
    seg_row: usize,
    features: TensorId,
) -> Result<TensorId, ModelError> {
    let rows = tape.value(hidden).shape()[0];
    if seg_row >= rows {
        return Err(ModelError::BadGeometry { reason: "seg row outside the text region" });
    }
    let h_seg = tape.slice_rows(hidden, seg_row, seg_row + 1)?;
    let q = tape.matmul(h_seg, nodes.seg_query_w)?;
    let logits = tape.matmul_nt(features, q)?;
    Ok(tape.add_bias(logits, nodes.seg_bias)?)
}

/// Frozen forward: logits `[T, V]` and hidden `[T, d]` as plain tensors.
pub fn forward(
    params: &ModelParams,
    image: &[u8],
    token_ids: &[u32],
) -> Result<(Tensor, Tensor), ModelError> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::load(&mut tape, params, false);
    let rows = image_patch_rows(image, params.image_height, params.image_width, params.config.image_patch)?;
    let fwd = forward_on_tape(&mut tape, &nodes, params, &rows, token_ids)?;
    Ok((tape.value(fwd.logits).clone(), tape.value(fwd.hidden).clone()))
}

/// Frozen mask prediction for a sequence whose SEG position is known.
pub fn predict_mask(
    params: &ModelParams,
    image: &[u8],
    token_ids: &[u32],
    seg_text_pos: usize,
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::load(&mut tape, params, false);
    let rows = image_patch_rows(image, params.image_height, params.image_width, params.config.image_patch)?;
    let fwd = forward_on_tape(&mut tape, &nodes, params, &rows, token_ids)?;
    let feat = pixel_features_on_tape(&mut tape, &nodes, params, image, fwd.visual)?;
    let mask = predict_mask_on_tape(&mut tape, &nodes, fwd.hidden, seg_text_pos, feat)?;
    Ok(tape.value(mask).data().to_vec())
}

// ─── generation ───

/// One greedy decode. `ids` holds only the emitted tokens; outputs stay
/// `None` whenever the generation is malformed rather than erroring.
#[derive(Debug, Clone)]
pub struct Generation {
    pub ids: Vec<u32>,
    pub words: Vec<String>,
    pub mask_logits: Option<Vec<f64>>,
    pub depth: Option<DepthMap>,
    pub span: Option<DepthSpan>,
    pub seg_first: bool,
    pub span_valid: bool,
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Greedy decoding with the SEG/DSTART gating: emitting SEG triggers the
/// mask head at that position, and a parsed span that is exactly `n`
/// depth codes is detokenized to a depth map.
pub fn generate(
    params: &ModelParams,
    vqvae: &VqVaeParams,
    vocab: &Vocabulary,
    image: &[u8],
    prompt: &TokenSequence,
    max_new: usize,
) -> Result<Generation, ModelError> {
    let patch_rows =
        image_patch_rows(image, params.image_height, params.image_width, params.config.image_patch)?;
    let mut seq = prompt.ids.clone();
    let mut emitted: Vec<u32> = Vec::new();
    for _ in 0..max_new {
        let mut tape = Tape::new();
        let nodes = ParamNodes::load(&mut tape, params, false);
        let fwd = forward_on_tape(&mut tape, &nodes, params, &patch_rows, &seq)?;
        let logits = tape.value(fwd.logits);
        let (t, v) = logits.dims2().expect("logits rank");
        let next = argmax_row(&logits.data()[(t - 1) * v..t * v]) as u32;
        seq.push(next);
        emitted.push(next);
        if next == vocab.eos() {
            break;
        }
    }

    // The mask head fires at the first emitted SEG.
    let seg_offset = emitted.iter().position(|&id| id == vocab.seg());
    let mask_logits = match seg_offset {
        Some(off) => {
            let mut tape = Tape::new();
            let nodes = ParamNodes::load(&mut tape, params, false);
            let fwd = forward_on_tape(&mut tape, &nodes, params, &patch_rows, &seq)?;
            let feat = pixel_features_on_tape(&mut tape, &nodes, params, image, fwd.visual)?;
            let mask =
                predict_mask_on_tape(&mut tape, &nodes, fwd.hidden, prompt.len() + off, feat)?;
            Some(tape.value(mask).data().to_vec())
        }
        None => None,
    };

    let span = parse_depth_span(&emitted, vocab);
    let span_valid = span.is_some_and(|sp| {
        sp.l == vqvae.n() && emitted[sp.s + 1..sp.e].iter().all(|&id| vocab.is_code(id))
    });
    let depth = if span_valid {
        let sp = span.unwrap();
        let codes: Vec<usize> = emitted[sp.s + 1..sp.e]
            .iter()
            .map(|&id| vocab.code_index(id).unwrap())
            .collect();
        detokenize(&DepthTokenGrid { codes, grid: vqvae.grid() }, vqvae).ok()
    } else {
        None
    };

    Ok(Generation {
        words: answer_words(&emitted, vocab),
        seg_first: emitted.first() == Some(&vocab.seg()),
        ids: emitted,
        mask_logits,
        depth,
        span,
        span_valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{finite_diff_gradient, max_relative_error};
    use crate::grammar::build_vocabulary;
    use crate::losses::{seg_recon_loss, LossWeights};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            feedforward: 24,
            image_patch: 4,
            max_len: 48,
            d_feat: 6,
            dropout: 0.0,
        }
    }

    fn tiny_vocab() -> Vocabulary {
        build_vocabulary(5, &["question", "answer", "red", "disc"]).unwrap()
    }

    fn checker_image(h: usize, w: usize, seed: u64) -> Vec<u8> {
        let mut rng = Rng::from_seed(seed);
        (0..h * w * 3).map(|_| rng.range_inclusive(0, 255) as u8).collect()
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let good = tiny_config();
        assert!(good.validate().is_ok());
        let bad = ModelConfig { heads: 3, ..good };
        assert!(matches!(bad.validate(), Err(ModelError::BadConfig { .. })));
        let bad = ModelConfig { layers: 0, ..good };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { dropout: 0.1, ..good };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_count_matches_layout_and_default_constant() {
        let config = tiny_config();
        let params = init_model(&config, 13, 8, 8, 9).unwrap();
        let total: usize = params.group_lens().iter().sum();
        assert_eq!(total, param_count(&config, 13));

        // Regression pin for the published default shape at V = 171.
        assert_eq!(param_count(&ModelConfig::default(), 171), 621_548);
    }

    #[test]
    fn forward_shapes_and_overlong_input() {
        let config = tiny_config();
        let vocab = tiny_vocab();
        let params = init_model(&config, vocab.size(), 8, 8, 3).unwrap();
        let image = checker_image(8, 8, 1);
        let ids = [vocab.bos(), vocab.seg(), vocab.dstart(), vocab.code(1).unwrap(), vocab.dend()];
        let (logits, hidden) = forward(&params, &image, &ids).unwrap();
        assert_eq!(logits.shape(), &[5, vocab.size()]);
        assert_eq!(hidden.shape(), &[5, 16]);

        let long: Vec<u32> = (0..48).map(|_| vocab.bos()).collect();
        let err = forward(&params, &image, &long).unwrap_err();
        assert!(matches!(err, ModelError::Overlong { needed: 52, max: 48 }));
    }

    #[test]
    fn causality_holds_in_the_text_region() {
        let config = tiny_config();
        let vocab = tiny_vocab();
        let v = vocab.size();
        let params = init_model(&config, v, 8, 8, 5).unwrap();
        let image = checker_image(8, 8, 2);
        let ids = [vocab.bos(), 4, 5, 6, 3, vocab.eos()];
        let (base, _) = forward(&params, &image, &ids).unwrap();

        // Perturbing the token at position 3 leaves rows 0..3 bit-identical.
        let mut changed = ids;
        changed[3] = 7;
        let (after, _) = forward(&params, &image, &changed).unwrap();
        for row in 0..3 {
            for col in 0..v {
                let a = base.data()[row * v + col];
                let b = after.data()[row * v + col];
                assert_eq!(a.to_bits(), b.to_bits(), "row {row} col {col} moved");
            }
        }
        let tail_moved = (3..6).any(|row| {
            (0..v).any(|col| base.data()[row * v + col] != after.data()[row * v + col])
        });
        assert!(tail_moved);

        // A different image moves every text row.
        let other = checker_image(8, 8, 9);
        let (img_changed, _) = forward(&params, &other, &ids).unwrap();
        for row in 0..6 {
            let moved =
                (0..v).any(|col| base.data()[row * v + col] != img_changed.data()[row * v + col]);
            assert!(moved, "row {row} ignored the image");
        }
    }

    #[test]
    fn prefix_forward_matches_full_forward() {
        let config = tiny_config();
        let vocab = tiny_vocab();
        let v = vocab.size();
        let params = init_model(&config, v, 8, 8, 11).unwrap();
        let image = checker_image(8, 8, 4);
        let ids = [vocab.bos(), 5, 9, 4, 8, vocab.eos()];
        let (full, _) = forward(&params, &image, &ids).unwrap();
        for t in 1..ids.len() {
            let (prefix, _) = forward(&params, &image, &ids[..t]).unwrap();
            let last = &prefix.data()[(t - 1) * v..t * v];
            let same = &full.data()[(t - 1) * v..t * v];
            let max_diff = last
                .iter()
                .zip(same)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-10, "prefix {t} diverged by {max_diff}");
        }
    }

    #[test]
    fn seg_head_is_a_dot_product_with_bias() {
        let config = tiny_config();
        let vocab = tiny_vocab();
        let v = vocab.size();
        let mut params = init_model(&config, v, 8, 8, 6).unwrap();
        params.seg_query_w.iter_mut().for_each(|w| *w = 0.0);
        params.seg_bias[0] = 0.7;
        let image = checker_image(8, 8, 7);
        let ids = [vocab.bos(), vocab.seg(), vocab.eos()];
        let mask = predict_mask(&params, &image, &ids, 1).unwrap();
        assert_eq!(mask.len(), 64);
        assert!(mask.iter().all(|&l| (l - 0.7).abs() < 1e-15));
    }

    #[test]
    fn seg_gradient_through_projection_matches_finite_differences() {
        let config = tiny_config();
        let vocab = tiny_vocab();
        let v = vocab.size();
        let params = init_model(&config, v, 8, 8, 13).unwrap();
        let image = checker_image(8, 8, 8);
        let ids = [vocab.bos(), vocab.seg(), vocab.eos()];
        let gt: Vec<f64> = (0..64).map(|i| f64::from(i % 3 == 0)).collect();
        let w = LossWeights::default();

        let eval = |seg_w: &[f64]| -> Result<f64, ModelError> {
            let mut p = params.clone();
            p.seg_query_w.copy_from_slice(seg_w);
            let mut tape = Tape::new();
            let nodes = ParamNodes::load(&mut tape, &p, false);
            let rows = image_patch_rows(image.as_slice(), 8, 8, 4)?;
            let fwd = forward_on_tape(&mut tape, &nodes, &p, &rows, &ids)?;
            let feat = pixel_features_on_tape(&mut tape, &nodes, &p, &image, fwd.visual)?;
            let mask = predict_mask_on_tape(&mut tape, &nodes, fwd.hidden, 1, feat)?;
            let seg = seg_recon_loss(&mut tape, mask, &gt, &w).expect("seg loss");
            Ok(tape.value(seg.total).item())
        };

        let mut tape = Tape::new();
        let nodes = ParamNodes::load(&mut tape, &params, true);
        let rows = image_patch_rows(&image, 8, 8, 4).unwrap();
        let fwd = forward_on_tape(&mut tape, &nodes, &params, &rows, &ids).unwrap();
        let feat = pixel_features_on_tape(&mut tape, &nodes, &params, &image, fwd.visual).unwrap();
        let mask = predict_mask_on_tape(&mut tape, &nodes, fwd.hidden, 1, feat).unwrap();
        let seg = seg_recon_loss(&mut tape, mask, &gt, &w).unwrap();
        let grads = tape.backward(seg.total).unwrap();
        let analytic = grads.of_or_zeros(nodes.seg_query_w, params.seg_query_w.len());
        let numeric = finite_diff_gradient(eval, &params.seg_query_w, 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &numeric, 1e-8) < 1e-4);
    }

    /// A transformer rigged to emit a fixed schedule: token embeddings
    /// zero, block weights zero, one-hot positional rows, and an output
    /// matrix that maps position dims to the wanted next token.
    fn forced_model(vocab: &Vocabulary, schedule: &[u32], prompt_len: usize) -> ModelParams {
        let v = vocab.size();
        let config = ModelConfig {
            d_model: 32,
            layers: 1,
            heads: 1,
            feedforward: 8,
            image_patch: 4,
            max_len: 32,
            d_feat: 4,
            dropout: 0.0,
        };
        let mut params = init_model(&config, v, 8, 8, 0).unwrap();
        let m = params.visual_tokens();
        let d = config.d_model;
        for g in [
            &mut params.token_embed,
            &mut params.patch_w,
            &mut params.out_w,
            &mut params.pos_embed,
            &mut params.seg_query_w,
        ] {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        for b in &mut params.blocks {
            for g in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.ff_w1, &mut b.ff_w2] {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        for pos in 0..config.max_len {
            params.pos_embed[pos * d + pos % d] = 1.0;
        }
        // Text row i sits at global position m + i and predicts
        // schedule[i + 1 - prompt_len].
        for (step, &id) in schedule.iter().enumerate() {
            let text_row = prompt_len - 1 + step;
            params.out_w[(m + text_row) * v + id as usize] = 5.0;
        }
        params
    }

    #[test]
    fn generate_gates_all_three_heads() {
        let vocab = tiny_vocab();
        let vq = crate::codebook::test_params(17);
        let n = vq.n();
        let mut schedule = vec![vocab.seg(), vocab.dstart()];
        for c in 0..n {
            schedule.push(vocab.code(c).unwrap());
        }
        schedule.push(vocab.dend());
        schedule.push(vocab.word_id("red").unwrap());
        schedule.push(vocab.eos());
        let prompt = TokenSequence {
            ids: vec![vocab.bos(), vocab.word_id("question").unwrap(), vocab.word_id("answer").unwrap()],
            roles: vec![crate::grammar::Role::Prompt; 3],
        };
        let params = forced_model(&vocab, &schedule, prompt.len());
        let image = checker_image(8, 8, 3);

        let gen = generate(&params, &vq, &vocab, &image, &prompt, 32).unwrap();
        assert_eq!(gen.ids, schedule);
        assert!(gen.seg_first);
        assert!(gen.span_valid);
        assert!(gen.depth.is_some());
        assert!(gen.mask_logits.is_some());
        assert_eq!(gen.mask_logits.as_ref().unwrap().len(), 64);
        assert_eq!(gen.words, vec!["red"]);
        let depth = gen.depth.unwrap();
        assert_eq!((depth.height, depth.width), (8, 8));

        // max_new = 1 emits exactly one token.
        let gen = generate(&params, &vq, &vocab, &image, &prompt, 1).unwrap();
        assert_eq!(gen.ids.len(), 1);
        assert_eq!(gen.ids[0], vocab.seg());
        assert!(gen.mask_logits.is_some());
        assert!(gen.depth.is_none());
        assert!(!gen.span_valid);
    }

    #[test]
    fn generate_reports_malformed_outputs_without_raising() {
        let config = tiny_config();
        let vocab = tiny_vocab();
        let vq = crate::codebook::test_params(23);
        let params = init_model(&config, vocab.size(), 8, 8, 77).unwrap();
        let image = checker_image(8, 8, 6);
        let prompt = TokenSequence {
            ids: vec![vocab.bos()],
            roles: vec![crate::grammar::Role::Prompt],
        };
        let gen = generate(&params, &vq, &vocab, &image, &prompt, 8).unwrap();
        assert!(gen.ids.len() <= 8);
        if gen.depth.is_some() {
            assert!(gen.span_valid);
        }
    }

    #[test]
    fn image_patch_rows_are_patch_major_normalized() {
        let (h, w, p) = (8usize, 8usize, 4usize);
        let mut image = vec![0u8; h * w * 3];
        // Second patch of the top row gets a marker pixel at its origin.
        let (r, c) = (0usize, 4usize);
        image[(r * w + c) * 3] = 255;
        image[(r * w + c) * 3 + 1] = 102;
        let rows = image_patch_rows(&image, h, w, p).unwrap();
        assert_eq!(rows.len(), 4 * 48);
        assert_eq!(rows[48], 1.0);
        assert_eq!(rows[49], 102.0 / 255.0);
        assert_eq!(rows[0], 0.0);

        let err = image_patch_rows(&image[..10], h, w, p).unwrap_err();
        assert!(matches!(err, ModelError::BadImage { .. }));
    }
}
