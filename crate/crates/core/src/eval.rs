//! Evaluation harness: mask cIoU, relative-depth accuracy over 3/4/5
//! point tasks, sequence-health statistics, generated-depth RMSE, and
//! the ablation runner. Every aggregate rate is recomputable from the
//! per-sample records; the report is an aggregation, not a source of
//! truth.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::codebook::{VqError, VqVaeParams};
use crate::fmath;
use crate::grammar::{build_prompt, pad_prompt, GrammarError, Vocabulary};
use crate::losses::LossWeights;
use crate::model::{generate, init_model, Generation, ModelConfig, ModelError, ModelParams};
use crate::scene::{
    point_query_words, point_stride, DepthMap, RelativeDepthTask, SceneSample,
};
use crate::train::{
    prepare_dataset, train, PrepareOptions, TrainConfig, TrainError, PROMPT_LEN,
};

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    EmptyList,
    /// No pair had a nonempty union, so cIoU is undefined.
    NoMeasurablePairs,
    ShapeMismatch { expected: usize, got: usize },
    Model(ModelError),
    Train(TrainError),
    Grammar(GrammarError),
    Vq(VqError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyList => write!(f, "empty sample list"),
            EvalError::NoMeasurablePairs => write!(f, "no mask pair has a nonempty union"),
            EvalError::ShapeMismatch { expected, got } => {
                write!(f, "mask shapes differ: expected {expected}, got {got}")
            }
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::Train(e) => write!(f, "{e}"),
            EvalError::Grammar(e) => write!(f, "{e}"),
            EvalError::Vq(e) => write!(f, "{e}"),
        }
    }
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}
impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(e)
    }
}
impl From<GrammarError> for EvalError {
    fn from(e: GrammarError) -> Self {
        EvalError::Grammar(e)
    }
}
impl From<VqError> for EvalError {
    fn from(e: VqError) -> Self {
        EvalError::Vq(e)
    }
}

/// Intersection and union pixel counts of a shape-matched mask pair.
pub fn iou_counts(pred: &[bool], gt: &[bool]) -> Result<(usize, usize), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::ShapeMismatch { expected: gt.len(), got: pred.len() });
    }
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok((inter, union))
}

/// Cumulative IoU percent: 100 * sum(intersections) / sum(unions).
/// Pairs with an empty union contribute to neither sum.
pub fn ciou(pairs: &[(usize, usize)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let inter: usize = pairs.iter().map(|&(i, _)| i).sum();
    let union: usize = pairs.iter().map(|&(_, u)| u).sum();
    if union == 0 {
        return Err(EvalError::NoMeasurablePairs);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

/// Binary mask from logits: sigmoid(x) > 0.5, which is x > 0.
pub fn threshold_mask(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&x| x > 0.0).collect()
}

/// Global pixel RMSE over shape-matched (prediction, ground truth)
/// pairs. No pairs at all is reported as absent, not as zero.
pub fn depth_rmse(pairs: &[(&DepthMap, &DepthMap)]) -> Result<Option<f64>, EvalError> {
    let mut sq = 0.0;
    let mut px = 0usize;
    for (pred, gt) in pairs {
        if pred.values.len() != gt.values.len() {
            return Err(EvalError::ShapeMismatch {
                expected: gt.values.len(),
                got: pred.values.len(),
            });
        }
        for (&p, &g) in pred.values.iter().zip(&gt.values) {
            sq += (p - g) * (p - g);
        }
        px += gt.values.len();
    }
    Ok((px > 0).then(|| fmath::sqrt(sq / px as f64)))
}

/// First answer word that is a point label.
pub fn answer_label(words: &[String]) -> Option<char> {
    words.iter().find_map(|w| {
        let mut chars = w.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_lowercase() && c <= 'e' => Some(c),
            _ => None,
        }
    })
}

/// Relative-depth accuracy split by point count. Percentages are per
/// P in {3, 4, 5}; the average is the unweighted mean over the classes
/// that occur.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RelDepthAccuracy {
    pub per_p: [Option<f64>; 3],
    pub counts: [usize; 3],
    pub average: Option<f64>,
}

/// Aggregate (P, correct) outcomes into per-class percentages.
pub fn accumulate_rel_depth(items: &[(usize, bool)]) -> RelDepthAccuracy {
    let mut hits = [0usize; 3];
    let mut counts = [0usize; 3];
    for &(p, correct) in items {
        if (3..=5).contains(&p) {
            counts[p - 3] += 1;
            hits[p - 3] += usize::from(correct);
        }
    }
    let per_p = core::array::from_fn(|i| {
        (counts[i] > 0).then(|| 100.0 * hits[i] as f64 / counts[i] as f64)
    });
    let present: Vec<f64> = per_p.iter().flatten().copied().collect();
    let average = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    RelDepthAccuracy { per_p, counts, average }
}

/// Run a responder over every point task. A prediction is correct iff
/// it names the ground-truth label; None counts as incorrect.
pub fn relative_depth_accuracy<F>(scenes: &[SceneSample], mut respond: F) -> RelDepthAccuracy
where
    F: FnMut(&SceneSample, &RelativeDepthTask) -> Option<char>,
{
    let mut items = Vec::new();
    for scene in scenes {
        if let Some(task) = &scene.point_task {
            let correct = respond(scene, task)
                .is_some_and(|c| c.eq_ignore_ascii_case(&task.answer));
            items.push((task.p(), correct));
        }
    }
    accumulate_rel_depth(&items)
}

/// Everything measured about one generation, persisted as a JSON line
/// by the CLI so aggregates can be recomputed offline.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleRecord {
    pub scene: usize,
    pub kind: String,
    pub query: String,
    pub gt_answer: Vec<String>,
    pub gen_answer: Vec<String>,
    pub answer_match: bool,
    pub seg_first: bool,
    pub span_valid: bool,
    pub predicted_interior_len: Option<usize>,
    pub intersection: Option<usize>,
    pub union: Option<usize>,
    pub iou: Option<f64>,
    pub depth_sq_err: Option<f64>,
    pub depth_pixels: Option<usize>,
    pub point_p: Option<usize>,
    pub point_correct: Option<bool>,
}

/// Aggregated metrics. All rates are percentages in [0, 100].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub referring_samples: usize,
    pub point_samples: usize,
    pub ciou: Option<f64>,
    pub per_sample_iou: Vec<f64>,
    pub relative_depth: RelDepthAccuracy,
    pub answer_exact_match: f64,
    pub span_validity_rate: f64,
    pub seg_first_rate: f64,
    pub mean_predicted_interior_length: Option<f64>,
    pub depth_rmse: Option<f64>,
    pub depth_valid_fraction: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<(), EvalError> {
        let mut rates = alloc::vec![
            self.answer_exact_match,
            self.span_validity_rate,
            self.seg_first_rate,
            100.0 * self.depth_valid_fraction,
        ];
        rates.extend(self.ciou);
        rates.extend(self.relative_depth.per_p.iter().flatten());
        rates.extend(self.relative_depth.average);
        if rates.iter().all(|r| (0.0..=100.0).contains(r)) {
            Ok(())
        } else {
            Err(EvalError::EmptyList)
        }
    }
}

/// Rebuild the report from per-sample records.
pub fn aggregate(records: &[SampleRecord]) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let total = records.len();
    let pct = |n: usize| 100.0 * n as f64 / total as f64;

    let pairs: Vec<(usize, usize)> = records
        .iter()
        .filter_map(|r| r.intersection.zip(r.union))
        .collect();
    let ciou_value = match ciou(&pairs) {
        Ok(v) => Some(v),
        Err(EvalError::EmptyList | EvalError::NoMeasurablePairs) => None,
        Err(e) => return Err(e),
    };
    let per_sample_iou: Vec<f64> = records.iter().filter_map(|r| r.iou).collect();

    let rel_items: Vec<(usize, bool)> = records
        .iter()
        .filter_map(|r| r.point_p.zip(r.point_correct))
        .collect();

    let interiors: Vec<usize> =
        records.iter().filter_map(|r| r.predicted_interior_len).collect();
    let mean_interior = (!interiors.is_empty())
        .then(|| interiors.iter().sum::<usize>() as f64 / interiors.len() as f64);

    let mut sq = 0.0;
    let mut px = 0usize;
    let mut contributing = 0usize;
    for r in records {
        if let (Some(s), Some(p)) = (r.depth_sq_err, r.depth_pixels) {
            sq += s;
            px += p;
            contributing += 1;
        }
    }

    let report = EvalReport {
        samples: total,
        referring_samples: records.iter().filter(|r| r.kind == "referring").count(),
        point_samples: records.iter().filter(|r| r.kind == "point").count(),
        ciou: ciou_value,
        per_sample_iou,
        relative_depth: accumulate_rel_depth(&rel_items),
        answer_exact_match: pct(records.iter().filter(|r| r.answer_match).count()),
        span_validity_rate: pct(records.iter().filter(|r| r.span_valid).count()),
        seg_first_rate: pct(records.iter().filter(|r| r.seg_first).count()),
        mean_predicted_interior_length: mean_interior,
        depth_rmse: (px > 0).then(|| fmath::sqrt(sq / px as f64)),
        depth_valid_fraction: contributing as f64 / total as f64,
    };
    report.validate()?;
    Ok(report)
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub records: Vec<SampleRecord>,
}

fn record_generation(
    scene_index: usize,
    kind: &str,
    query: String,
    gt_answer: Vec<String>,
    gen: &Generation,
    gt_mask: Option<&[bool]>,
    gt_depth: &DepthMap,
) -> Result<SampleRecord, EvalError> {
    let answer_match = gen.words == gt_answer;
    let (mut inter, mut union, mut iou) = (None, None, None);
    if let (Some(logits), Some(gt)) = (&gen.mask_logits, gt_mask) {
        let pred = threshold_mask(logits);
        let (i, u) = iou_counts(&pred, gt)?;
        inter = Some(i);
        union = Some(u);
        if u > 0 {
            iou = Some(100.0 * i as f64 / u as f64);
        }
    }
    let (mut sq, mut px) = (None, None);
    if let Some(depth) = &gen.depth {
        if depth.values.len() != gt_depth.values.len() {
            return Err(EvalError::ShapeMismatch {
                expected: gt_depth.values.len(),
                got: depth.values.len(),
            });
        }
        let s: f64 = depth
            .values
            .iter()
            .zip(&gt_depth.values)
            .map(|(&p, &g)| (p - g) * (p - g))
            .sum();
        sq = Some(s);
        px = Some(gt_depth.values.len());
    }
    Ok(SampleRecord {
        scene: scene_index,
        kind: kind.to_string(),
        query,
        gt_answer,
        gen_answer: gen.words.clone(),
        answer_match,
        seg_first: gen.seg_first,
        span_valid: gen.span_valid,
        predicted_interior_len: gen.span.as_ref().map(|s| s.l),
        intersection: inter,
        union,
        iou,
        depth_sq_err: sq,
        depth_pixels: px,
        point_p: None,
        point_correct: None,
    })
}

fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

/// Greedy-generate both of one scene's tasks (referring, plus the point
/// task when present) and measure them. Pure in the frozen model, so
/// scenes can be fanned out to workers; aggregation stays ordered.
pub fn evaluate_scene(
    params: &ModelParams,
    vqvae: &VqVaeParams,
    vocab: &Vocabulary,
    scene: &SceneSample,
    scene_index: usize,
    max_new: usize,
) -> Result<Vec<SampleRecord>, EvalError> {
    let mut records = Vec::with_capacity(2);
    let query_words = split_words(&scene.query);
    let refs: Vec<&str> = query_words.iter().map(String::as_str).collect();
    let prompt = pad_prompt(&build_prompt(&refs, vocab)?, PROMPT_LEN, vocab)?;
    let gen = generate(params, vqvae, vocab, &scene.image, &prompt, max_new)?;
    records.push(record_generation(
        scene_index,
        "referring",
        scene.query.clone(),
        split_words(&scene.answer),
        &gen,
        Some(&scene.instances[scene.target_instance].mask),
        &scene.depth,
    )?);

    if let Some(task) = &scene.point_task {
        let words = point_query_words(task, point_stride(scene.depth.height));
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let prompt = pad_prompt(&build_prompt(&refs, vocab)?, PROMPT_LEN, vocab)?;
        let gen = generate(params, vqvae, vocab, &scene.image, &prompt, max_new)?;
        let gt_answer = crate::scene::point_answer_words(task.answer);
        let mut record =
            record_generation(scene_index, "point", words.join(" "), gt_answer, &gen, None, &scene.depth)?;
        record.point_p = Some(task.p());
        record.point_correct = Some(
            answer_label(&gen.words).is_some_and(|c| c.eq_ignore_ascii_case(&task.answer)),
        );
        records.push(record);
    }
    Ok(records)
}

/// Greedy-generate on every scene and aggregate the report.
pub fn evaluate(
    params: &ModelParams,
    vqvae: &VqVaeParams,
    vocab: &Vocabulary,
    scenes: &[SceneSample],
    max_new: usize,
) -> Result<EvalOutcome, EvalError> {
    if scenes.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let mut records = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        records.extend(evaluate_scene(params, vqvae, vocab, scene, i, max_new)?);
    }
    let report = aggregate(&records)?;
    Ok(EvalOutcome { report, records })
}

/// The four published ablations plus the full model. Each variant
/// derives its dataset filtering and weight overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AblationSpec {
    Full,
    NoDepth,
    NoSeg,
    NoDepthRecon,
    NoDepthGen,
}

impl AblationSpec {
    pub const ALL: [AblationSpec; 5] = [
        AblationSpec::Full,
        AblationSpec::NoDepth,
        AblationSpec::NoSeg,
        AblationSpec::NoDepthRecon,
        AblationSpec::NoDepthGen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSpec::Full => "full",
            AblationSpec::NoDepth => "no_depth",
            AblationSpec::NoSeg => "no_seg",
            AblationSpec::NoDepthRecon => "no_depth_recon",
            AblationSpec::NoDepthGen => "no_depth_gen",
        }
    }

    pub fn parse(name: &str) -> Option<AblationSpec> {
        AblationSpec::ALL.into_iter().find(|v| v.name() == name)
    }

    /// no_depth drops the DSTART..DEND block from targets; no_seg drops
    /// the SEG token (and with it all mask supervision).
    pub fn options(self) -> PrepareOptions {
        PrepareOptions {
            include_depth: self != AblationSpec::NoDepth,
            include_seg: self != AblationSpec::NoSeg,
        }
    }

    /// no_depth zeroes both depth weights; no_depth_recon zeroes only
    /// the reconstruction weight, no_depth_gen only the generation one.
    pub fn weights(self, base: LossWeights) -> LossWeights {
        let mut w = base;
        match self {
            AblationSpec::Full => {}
            AblationSpec::NoDepth => {
                w.lambda_d = 0.0;
                w.lambda_r = 0.0;
            }
            AblationSpec::NoSeg => {
                w.seg_ce_weight = 0.0;
                w.seg_dice_weight = 0.0;
            }
            AblationSpec::NoDepthRecon => w.lambda_r = 0.0,
            AblationSpec::NoDepthGen => w.lambda_d = 0.0,
        }
        w
    }
}

/// Shared budget for one ablation round: every variant trains from the
/// same initialization seed, scenes, and step budget.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub max_new: usize,
}

/// One variant's result. Training divergence is recorded, not raised,
/// so the other variants are unaffected.
pub struct VariantRun {
    pub spec: AblationSpec,
    pub outcome: Result<EvalOutcome, String>,
}

/// Train each variant from scratch on the shared scenes and evaluate on
/// the shared held-out scenes.
pub fn run_ablation(
    variants: &[AblationSpec],
    train_scenes: &[SceneSample],
    eval_scenes: &[SceneSample],
    vqvae: &VqVaeParams,
    vocab: &Vocabulary,
    config: &AblationConfig,
) -> Result<Vec<VariantRun>, EvalError> {
    let mut runs = Vec::with_capacity(variants.len());
    for &spec in variants {
        let outcome = run_variant(spec, train_scenes, eval_scenes, vqvae, vocab, config);
        runs.push(VariantRun { spec, outcome });
    }
    Ok(runs)
}

fn run_variant(
    spec: AblationSpec,
    train_scenes: &[SceneSample],
    eval_scenes: &[SceneSample],
    vqvae: &VqVaeParams,
    vocab: &Vocabulary,
    config: &AblationConfig,
) -> Result<EvalOutcome, String> {
    let fail = |stage: &str, e: &dyn fmt::Display| format!("{stage}: {e}");
    let dataset = prepare_dataset(train_scenes, vqvae, vocab, &spec.options())
        .map_err(|e| fail("prepare", &e))?;
    let train_config =
        TrainConfig { weights: spec.weights(config.train.weights), ..config.train };
    let init = init_model(
        &config.model,
        vocab.size(),
        vqvae.image_height,
        vqvae.image_width,
        config.init_seed,
    )
    .map_err(|e| fail("init", &e))?;
    let trained = train(init, &dataset, vqvae, vocab, &train_config)
        .map_err(|e| fail("train", &e))?;
    evaluate(&trained.params, vqvae, vocab, eval_scenes, config.max_new)
        .map_err(|e| fail("eval", &e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::build_vocabulary;
    use crate::rng::Rng;
    use crate::scene::{answer_grammar_words, generate_scene, point_label, SceneConfig};
    use crate::train::test_vqvae;

    #[test]
    fn ciou_closed_forms_and_permutation_invariance() {
        let gt = alloc::vec![true, true, false, false];
        assert_eq!(ciou(&[iou_counts(&gt, &gt).unwrap()]).unwrap(), 100.0);
        let disjoint = alloc::vec![false, false, true, true];
        assert_eq!(ciou(&[iou_counts(&disjoint, &gt).unwrap()]).unwrap(), 0.0);
        let pairs = [(10, 20), (0, 10)];
        let v = ciou(&pairs).unwrap();
        assert!((v - 100.0 * 10.0 / 30.0).abs() < 1e-12);
        let swapped = [(0, 10), (10, 20)];
        assert_eq!(ciou(&swapped).unwrap(), v);
        // Empty-union pairs drop out of both sums.
        assert_eq!(ciou(&[(10, 20), (0, 0)]).unwrap(), 50.0);
        assert_eq!(ciou(&[]), Err(EvalError::EmptyList));
        assert_eq!(ciou(&[(0, 0)]), Err(EvalError::NoMeasurablePairs));
        assert_eq!(
            iou_counts(&gt, &[true]),
            Err(EvalError::ShapeMismatch { expected: 1, got: 4 })
        );
    }

    #[test]
    fn threshold_sits_strictly_above_one_half() {
        assert_eq!(threshold_mask(&[-1.0, 0.0, 1e-12, 3.0]), [false, false, true, true]);
    }

    #[test]
    fn depth_rmse_closed_forms() {
        let gt = DepthMap { height: 2, width: 2, values: alloc::vec![1.0; 4] };
        let perfect = gt.clone();
        assert_eq!(depth_rmse(&[(&perfect, &gt)]).unwrap(), Some(0.0));
        let half = DepthMap { height: 2, width: 2, values: alloc::vec![0.5; 4] };
        let rmse = depth_rmse(&[(&half, &gt)]).unwrap().unwrap();
        assert!((rmse - 0.5).abs() < 1e-12);
        assert_eq!(depth_rmse(&[]).unwrap(), None);
        let ragged = DepthMap { height: 1, width: 2, values: alloc::vec![0.5; 2] };
        assert!(matches!(
            depth_rmse(&[(&ragged, &gt)]),
            Err(EvalError::ShapeMismatch { .. })
        ));
    }

    fn point_scenes(count: usize, seed: u64) -> Vec<SceneSample> {
        let cfg = SceneConfig { seed, ..SceneConfig::default() };
        (0..count as u64)
            .filter_map(|i| {
                let s = generate_scene(&cfg, i).ok()?;
                s.point_task.is_some().then_some(s)
            })
            .collect()
    }

    #[test]
    fn depth_map_oracle_scores_exactly_one_hundred() {
        let scenes = point_scenes(60, 11);
        assert!(scenes.len() >= 50);
        let acc = relative_depth_accuracy(&scenes, |scene, task| {
            let mut best = 0;
            for (i, &(r, c)) in task.points.iter().enumerate() {
                if scene.depth.at(r, c) < scene.depth.at(task.points[best].0, task.points[best].1)
                {
                    best = i;
                }
            }
            Some(point_label(best).to_ascii_lowercase())
        });
        for (p, acc) in acc.per_p.iter().enumerate() {
            if acc.is_some() {
                assert_eq!(*acc, Some(100.0), "P = {}", p + 3);
            }
        }
        assert_eq!(acc.average, Some(100.0));
        assert!(acc.counts.iter().sum::<usize>() >= 50);
    }

    #[test]
    fn random_responder_sits_at_chance_per_point_count() {
        let scenes = point_scenes(2400, 23);
        assert!(scenes.len() >= 2000);
        // Each guess draws from a stream named by the task's points, so
        // one task's draw never depends on which other tasks exist.
        let root = Rng::from_seed(3);
        let acc = relative_depth_accuracy(&scenes, |_, task| {
            let mut rng = root.child(&alloc::format!("{:?}", task.points));
            Some((b'a' + rng.below(task.p()) as u8) as char)
        });
        let mut chance_mean = 0.0;
        for (i, value) in acc.per_p.iter().enumerate() {
            let p = i + 3;
            assert!(acc.counts[i] >= 400, "want hundreds of P = {p} tasks");
            let chance = 100.0 / p as f64;
            chance_mean += chance / 3.0;
            let got = value.unwrap();
            assert!((got - chance).abs() < 3.0, "P = {p}: {got} vs chance {chance}");
        }
        assert!((acc.average.unwrap() - chance_mean).abs() < 3.0);
    }

    #[test]
    fn unparseable_answers_count_as_incorrect() {
        let scenes = point_scenes(10, 31);
        let acc = relative_depth_accuracy(&scenes, |_, _| None);
        assert_eq!(acc.average, Some(0.0));
        assert_eq!(answer_label(&[String::from("the"), String::from("b")]), Some('b'));
        assert_eq!(answer_label(&[String::from("nearest")]), None);
    }

    #[test]
    fn evaluate_produces_recomputable_reports_on_an_untrained_model() {
        let cfg = SceneConfig { object_count_range: (2, 2), ..SceneConfig::default() };
        let scenes: Vec<SceneSample> =
            (0..3).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        let vqvae = test_vqvae(3, 40);
        let vocab = build_vocabulary(vqvae.codebook.k, &answer_grammar_words()).unwrap();
        let model_cfg = ModelConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            feedforward: 24,
            image_patch: 4,
            max_len: 256,
            d_feat: 6,
            dropout: 0.0,
        };
        let params = init_model(&model_cfg, vocab.size(), 40, 40, 5).unwrap();
        let out = evaluate(&params, &vqvae, &vocab, &scenes, 20).unwrap();
        assert_eq!(out.report.referring_samples, 3);
        assert_eq!(out.report.samples, out.records.len());
        assert_eq!(aggregate(&out.records).unwrap(), out.report);
        out.report.validate().unwrap();
        // An untrained model answers essentially nothing correctly.
        assert!(out.report.answer_exact_match < 50.0);
    }

    #[test]
    fn ablation_specs_derive_documented_adjustments() {
        let base = LossWeights::default();
        for spec in AblationSpec::ALL {
            assert_eq!(AblationSpec::parse(spec.name()), Some(spec));
        }
        assert_eq!(AblationSpec::parse("no_such"), None);
        let w = AblationSpec::NoDepth.weights(base);
        assert!(w.lambda_d == 0.0 && w.lambda_r == 0.0);
        assert!(!AblationSpec::NoDepth.options().include_depth);
        let w = AblationSpec::NoDepthRecon.weights(base);
        assert!(w.lambda_r == 0.0 && w.lambda_d == base.lambda_d);
        let w = AblationSpec::NoDepthGen.weights(base);
        assert!(w.lambda_d == 0.0 && w.lambda_r == base.lambda_r);
        let opts = AblationSpec::NoSeg.options();
        assert!(!opts.include_seg && opts.include_depth);
        assert_eq!(AblationSpec::Full.weights(base), base);
    }

    #[test]
    fn ablation_round_trains_each_variant_on_the_shared_budget() {
        let cfg = SceneConfig {
            height: 20,
            width: 20,
            object_count_range: (1, 1),
            seed: 5,
            ..SceneConfig::default()
        };
        let train_scenes: Vec<SceneSample> =
            (0..6).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        let eval_scenes: Vec<SceneSample> =
            (100..103).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        let vqvae = test_vqvae(3, 20);
        let vocab = build_vocabulary(vqvae.codebook.k, &answer_grammar_words()).unwrap();
        let config = AblationConfig {
            model: ModelConfig {
                d_model: 16,
                layers: 1,
                heads: 2,
                feedforward: 24,
                image_patch: 4,
                max_len: 96,
                d_feat: 6,
                dropout: 0.0,
            },
            train: TrainConfig { steps: 2, batch: 2, accum: 1, ..TrainConfig::default() },
            init_seed: 9,
            max_new: 8,
        };
        let runs = run_ablation(
            &[AblationSpec::Full, AblationSpec::NoSeg],
            &train_scenes,
            &eval_scenes,
            &vqvae,
            &vocab,
            &config,
        )
        .unwrap();
        assert_eq!(runs.len(), 2);
        for run in &runs {
            let outcome = run.outcome.as_ref().expect("variant trained");
            assert_eq!(outcome.report.referring_samples, 3);
            outcome.report.validate().unwrap();
        }
    }
}
