use std::time::Instant;

use spatok_core::codebook::{round_trip_stats, train_vqvae, VqVaeConfig};
use spatok_core::eval::{aggregate, evaluate_scene, AblationSpec};
use spatok_core::grammar::build_vocabulary;
use spatok_core::model::{init_model, ModelConfig};
use spatok_core::scene::{answer_grammar_words, generate_scene, SceneConfig};
use spatok_core::train::{prepare_dataset, train, TrainConfig};

#[test]
fn probe_reference_pipeline() {
    let scene_cfg = SceneConfig::default();
    let t0 = Instant::now();
    let scenes: Vec<_> = (0..2000u64).map(|i| generate_scene(&scene_cfg, i).unwrap()).collect();
    let eval_scenes: Vec<_> =
        (10_000u64..10_060).map(|i| generate_scene(&scene_cfg, i).unwrap()).collect();
    eprintln!("scene gen: {:?}", t0.elapsed());

    let maps: Vec<_> = scenes.iter().map(|s| s.depth.clone()).collect();
    let mut vq_cfg = VqVaeConfig::default();
    vq_cfg.seed = 9;
    let t0 = Instant::now();
    let vq = train_vqvae(&maps, &vq_cfg).unwrap();
    let eval_maps: Vec<_> = eval_scenes.iter().map(|s| s.depth.clone()).collect();
    let stats = round_trip_stats(&vq.params, &eval_maps).unwrap();
    eprintln!(
        "vqvae: {:?}, holdout rmse {:.4}, codes used {}",
        t0.elapsed(),
        stats.rmse,
        stats.used_codes
    );

    let vocab = build_vocabulary(vq.params.codebook.k, &answer_grammar_words()).unwrap();

    let configs = [
        ("d48 lr1e-3", ModelConfig { d_model: 48, layers: 3, heads: 4, feedforward: 96, image_patch: 4, max_len: 256, d_feat: 32, dropout: 0.0 }),
        ("d64L4 lr1e-3", ModelConfig { d_model: 64, layers: 4, heads: 4, feedforward: 128, image_patch: 4, max_len: 256, d_feat: 32, dropout: 0.0 }),
    ];

    for (label, model_cfg) in configs {
        let spec = AblationSpec::Full;
        let dataset = prepare_dataset(&scenes, &vq.params, &vocab, &spec.options()).unwrap();
        let mut tcfg = TrainConfig::default();
        tcfg.steps = 3000;
        tcfg.batch = 4;
        tcfg.accum = 1;
        tcfg.lr = 1e-3;
        tcfg.seed = 0;
        tcfg.weights = spec.weights(tcfg.weights);
        let init = init_model(&model_cfg, vocab.size(), 40, 40, 1).unwrap();
        let t0 = Instant::now();
        let out = train(init, &dataset, &vq.params, &vocab, &tcfg).unwrap();
        let head: f64 =
            out.reports.iter().take(50).map(|r| r.total).sum::<f64>() / 50.0;
        let tail: f64 =
            out.reports.iter().rev().take(50).map(|r| r.total).sum::<f64>() / 50.0;
        eprintln!(
            "{label}: {} samples, train {:?}, loss {:.3} -> {:.3}",
            dataset.len(),
            t0.elapsed(),
            head,
            tail
        );
        let last = out.reports.last().unwrap();
        eprintln!(
            "  last report: llm {:.3} seg_ce {:.3} dice {:.3} marker {:.3} token {:.3} recon {:.4}",
            last.llm, last.seg_ce, last.seg_dice, last.marker, last.token, last.depth_recon
        );

        let t0 = Instant::now();
        let mut records = Vec::new();
        for (i, scene) in eval_scenes.iter().enumerate() {
            records
                .extend(evaluate_scene(&out.params, &vq.params, &vocab, scene, i, 112).unwrap());
        }
        let report = aggregate(&records).unwrap();
        let (mut ref_hits, mut ref_n, mut pt_hits, mut pt_n) = (0usize, 0usize, 0usize, 0usize);
        for r in &records {
            if r.kind == "referring" {
                ref_n += 1;
                ref_hits += usize::from(r.answer_match);
            } else {
                pt_n += 1;
                pt_hits += usize::from(r.answer_match);
            }
        }
        eprintln!(
            "  eval {:?}: span_valid {:.1}% seg_first {:.1}% exact {:.1}% (ref {ref_hits}/{ref_n}, pt {pt_hits}/{pt_n}) ciou {:?} rel {:?} avg {:?} rmse {:?}",
            t0.elapsed(),
            report.span_validity_rate,
            report.seg_first_rate,
            report.answer_exact_match,
            report.ciou,
            report.relative_depth.per_p,
            report.relative_depth.average,
            report.depth_rmse,
        );
        for r in records.iter().take(4) {
            eprintln!(
                "    [{}] q='{}' gt={:?} gen={:?} iou={:?}",
                r.kind, r.query, r.gt_answer, r.gen_answer, r.iou
            );
        }
    }
    panic!("show output");
}
