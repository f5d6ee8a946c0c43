//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 1 4 10`. The process
//! exits nonzero on any failure only when `ACCEPTANCE_STRICT=1`.

mod common;

use std::time::Instant;

use ovd_distill::alignment::{
    contrastive_caption_loss, distill_loss, grounding_score_a, grounding_score_s, score_matrix_s, BatchReduction, Component,
    DistillDenominator, Stage,
};
use ovd_distill::autograd::{Graph, Var};
use ovd_distill::bbox::BBox;
use ovd_distill::checkpoint::Checkpoint;
use ovd_distill::detector::{detection_loss, image_pseudo_loss};
use ovd_distill::eval::compute_ap50;
use ovd_distill::gradcheck::{check_inputs, check_params, STEP};
use ovd_distill::grammar::{make_masked_views, parse_caption, Grammar};
use ovd_distill::params::ParamStore;
use ovd_distill::pipeline::{median, Session, TrainConfig};
use ovd_distill::teacher::{divergence_loss, divergence_value, dmlm_loss, mlm_loss, prefilter_proposals, FilteredProposals, FusionConfig, Teacher};
use ovd_distill::tensor::Tensor;
use ovd_distill::world::{generate_corpus, ClassSplit, Corpus, World};
use rand::Rng;

const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-6;
const AP_TOL: f64 = 1e-9;
const ORACLE_CASES: u64 = 200;
const ROW_SUM_TOL: f64 = 1e-6;
const FORWARD_PASSES: u64 = 1000;
const SEEDS: [u64; 3] = [0, 1, 2];
const NOISE_RATE: f64 = 0.3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn blocks(sizes: &[usize]) -> FilteredProposals {
    let mut next = 0;
    let per_concept: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&k| {
            next += k;
            (next - k..next).collect()
        })
        .collect();
    let union_order = per_concept.iter().flatten().copied().collect();
    FilteredProposals { per_concept, union_order }
}

// ---- 1: gradients ----------------------------------------------------------

/// Finite differences of a whole training step against backprop, on a few
/// parameter entries per tensor.
fn step_gradcheck(session: &Session, stage: Stage, store: &ParamStore) -> Result<f64, String> {
    let det: Vec<usize> = (0..session.data.detection.len().min(2)).collect();
    let cap: Vec<usize> = (0..session.data.train_captions.len().min(2)).collect();
    let (g, total, _) = session.step_loss(store, stage, &det, &cap).map_err(|e| e.to_string())?;
    let grads = g.param_grads(&g.backward(total));
    let mut rng = common::rng(stage as u64 + 11);
    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for (id, analytic) in &grads {
        for _ in 0..2 {
            let e = rng.gen_range(0..analytic.len());
            let orig = store.value(*id).data()[e];
            let eval = |w: &ParamStore| session.step_loss(w, stage, &det, &cap).map(|(g, t, _)| g.scalar_value(t));
            work.value_mut(*id).data_mut()[e] = orig + STEP;
            let plus = eval(&work).map_err(|e| e.to_string())?;
            work.value_mut(*id).data_mut()[e] = orig - STEP;
            let minus = eval(&work).map_err(|e| e.to_string())?;
            work.value_mut(*id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[e];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-8 { 0.0 } else { (a - numeric).abs() / scale };
            if err > worst {
                worst = err;
            }
            if err >= GRAD_TOL {
                return Err(format!("{stage} step: {} [{e}] analytic {a} numeric {numeric}", store.name(*id)));
            }
        }
    }
    Ok(worst)
}

fn tiny_session() -> Session {
    let mut cfg = TrainConfig::default();
    cfg.corpus.detection_count = 4;
    cfg.corpus.caption_count = 6;
    cfg.corpus.eval_count = 2;
    cfg.heldout_fraction = 0.0;
    cfg.batch_size = 2;
    cfg.detector.n_proposals = 4;
    cfg.detector.embedding_dim = 8;
    cfg.detector.hidden_dim = 8;
    cfg.fusion = FusionConfig { layers: 2, heads: 2, model_dim: 8, feedforward_dim: 8, top_k: 2, ..Default::default() };
    cfg.detach_teacher_regions = false;
    let world = World::new(cfg.world.clone(), cfg.grammar().unwrap()).unwrap();
    let corpus = generate_corpus(&world, &cfg.corpus).unwrap();
    Session::new(cfg, corpus).unwrap()
}

fn criterion_gradients() -> Verdict {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut failures = Vec::new();
    let mut record = |name: &str, r: Result<ovd_distill::gradcheck::GradReport, String>| match r {
        Ok(rep) => {
            worst = worst.max(rep.max_rel_error);
            checked += rep.checked;
        }
        Err(e) => failures.push(format!("{name}: {e}")),
    };

    for seed in 0..5u64 {
        let mut rng = common::rng(1000 + seed);
        // Two captions of two concepts, four proposals each.
        let c1 = common::random_tensor(&mut rng, 2, 4, 1.0);
        let c2 = common::random_tensor(&mut rng, 2, 4, 1.0);
        let r1 = common::random_tensor(&mut rng, 4, 4, 1.0);
        let r2 = common::random_tensor(&mut rng, 4, 4, 1.0);
        let att1 = common::random_distribution_rows(&mut rng, 2, 4);
        let att2 = common::random_distribution_rows(&mut rng, 2, 4);
        let inputs = [c1.clone(), c2.clone(), r1.clone(), r2.clone()];

        record("grounding S", check_inputs(&[c1.clone(), r1.clone()], GRAD_TOL, |g, v| grounding_score_s(g, v[0], v[1]).unwrap()));
        record("grounding A", check_inputs(&[c1.clone(), r1.clone()], GRAD_TOL, |g, v| grounding_score_a(g, v[0], v[1], &att1).unwrap()));
        for reduction in [BatchReduction::Mean, BatchReduction::Sum] {
            record(
                "caption contrastive",
                check_inputs(&inputs, GRAD_TOL, |g, v| {
                    let m = score_matrix_s(g, &[v[0], v[1]], &[v[2], v[3]]).unwrap();
                    contrastive_caption_loss(g, m, reduction).unwrap()
                }),
            );
            for den in [DistillDenominator::SimilarityOnly, DistillDenominator::AttentionPositive] {
                record(
                    "distillation",
                    check_inputs(&inputs, GRAD_TOL, |g, v| {
                        let s = score_matrix_s(g, &[v[0], v[1]], &[v[2], v[3]]).unwrap();
                        let a1 = grounding_score_a(g, v[0], v[2], &att1).unwrap();
                        let a2 = grounding_score_a(g, v[1], v[3], &att2).unwrap();
                        let a = g.concat_rows(&[a1, a2]);
                        distill_loss(g, s, a, den, reduction).unwrap()
                    }),
                );
            }
        }

        // Image-level pseudo labels over a five-class head.
        let classes: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        let logits = common::random_tensor(&mut rng, 1, 5, 2.0);
        let concepts = vec![classes[seed as usize % 5].clone(), classes[(seed as usize + 2) % 5].clone()];
        record("image pseudo-label", check_inputs(&[logits], GRAD_TOL, |g, v| image_pseudo_loss(g, v[0], &concepts, &classes).unwrap()));

        let mask_logits = common::random_tensor(&mut rng, 2, 6, 2.0);
        record("mlm", check_inputs(&[mask_logits], GRAD_TOL, |g, v| mlm_loss(g, v[0], &[1, 4])));

        // Divergence with the hinge active and well away from its kink.
        let fp = blocks(&[2, 2]);
        let att = common::random_distribution_rows(&mut rng, 2, 4);
        let scaled_margin = 1e3 - divergence_value(&att, &fp, 1e3, 1.0);
        let alpha = scaled_margin + 1.0;
        record("divergence", check_inputs(&[att], GRAD_TOL, |g, v| divergence_loss(g, v[0], &fp, alpha, 1.0)));

        // Detection: anchors and proposals around two ground-truth boxes.
        let gt = [BBox::new(10.0, 10.0, 30.0, 28.0), BBox::new(36.0, 30.0, 56.0, 54.0)];
        let props = [
            BBox::new(11.0, 9.0, 31.0, 29.0),
            BBox::new(37.0, 31.0, 55.0, 52.0),
            BBox::new(0.0, 40.0, 10.0, 60.0),
            BBox::new(20.0, 20.0, 40.0, 40.0),
        ];
        let anchors = [props[0], props[2], BBox::new(34.0, 28.0, 58.0, 55.0)];
        let obj = common::random_tensor(&mut rng, 3, 1, 2.0);
        let cls = common::random_tensor(&mut rng, 4, 4, 2.0);
        let deltas = common::random_tensor(&mut rng, 4, 4, 0.3);
        record(
            "detection",
            check_inputs(&[obj, cls, deltas], GRAD_TOL, |g, v| {
                detection_loss(g, &anchors, v[0], &props, v[1], v[2], &gt, &[0, 2]).total(g)
            }),
        );
    }

    // Divergence plus MLM through the whole fusion transformer.
    let grammar = Grammar::default();
    let vocab = grammar.vocabulary(3, 8).unwrap();
    let cap = parse_caption("a red circle above a blue square", &vocab).unwrap();
    let views = make_masked_views(&cap, &vocab);
    let targets: Vec<usize> = views.iter().map(|v| v.target).collect();
    let teacher = Teacher::new(FusionConfig { layers: 2, heads: 2, model_dim: 8, feedforward_dim: 8, ..Default::default() }, vocab.len(), (64, 64)).unwrap();
    let mut store = ParamStore::new();
    teacher.init_params(&mut store, 5);
    let mut rng = common::rng(77);
    let regions = common::random_tensor(&mut rng, 4, 8, 1.0);
    let boxes: Vec<BBox> = (0..4).map(|_| common::random_box(&mut rng)).collect();
    let fp = blocks(&[2, 2]);
    let ids: Vec<_> = store.ids().collect();
    for alpha in [3.0, -3.0] {
        record(
            "dmlm",
            check_params(&store, &ids, GRAD_TOL, |g, s| {
                let r = g.constant(regions.clone());
                let out = teacher.forward(g, s, &vocab, &views, r, &boxes).unwrap();
                dmlm_loss(g, &out, &fp, &targets, Some(alpha), 1.0)
            }),
        );
    }

    // Complete training steps, every component at once.
    let session = tiny_session();
    let store = session.init_params();
    for stage in [Stage::Baseline, Stage::Stage1, Stage::Stage2] {
        match step_gradcheck(&session, stage, &store) {
            Ok(w) => worst = worst.max(w),
            Err(e) => failures.push(e),
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    verdict(
        pass,
        format!("max rel err {worst:.2e} over {checked} entries plus full steps; {secs:.1}s; {}", if failures.is_empty() { "ok".into() } else { failures.join("; ") }),
    )
}

// ---- 2: oracles -------------------------------------------------------------

fn scalar(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.scalar_value(v)
}

fn criterion_oracles() -> Verdict {
    let t0 = Instant::now();
    let mut worst = [0.0f64; 7];
    let names = ["grounding S", "grounding A", "contrastive", "distill", "divergence", "prefilter", "AP50"];
    for case in 0..ORACLE_CASES {
        let mut rng = common::rng(case);
        let nt = rng.gen_range(1..4);
        let nr = rng.gen_range(1..7);
        let d = rng.gen_range(1..6);
        let t = common::random_tensor(&mut rng, nt, d, 1.5);
        let r = common::random_tensor(&mut rng, nr, d, 1.5);
        let att = common::random_distribution_rows(&mut rng, nt, nr);
        let s = scalar(|g| {
            let (a, b) = (g.input(t.clone()), g.input(r.clone()));
            grounding_score_s(g, a, b).unwrap()
        });
        worst[0] = worst[0].max((s - common::grounding_s(&t, &r)).abs());
        let a = scalar(|g| {
            let (a, b) = (g.input(t.clone()), g.input(r.clone()));
            grounding_score_a(g, a, b, &att).unwrap()
        });
        worst[1] = worst[1].max((a - common::grounding_a(&t, &r, &att)).abs());

        let n = rng.gen_range(1..6);
        let m = common::random_tensor(&mut rng, n, n, 3.0);
        let pos = common::random_tensor(&mut rng, n, 1, 3.0);
        let mean = rng.gen_bool(0.5);
        let red = if mean { BatchReduction::Mean } else { BatchReduction::Sum };
        let c = scalar(|g| {
            let v = g.input(m.clone());
            contrastive_caption_loss(g, v, red).unwrap()
        });
        worst[2] = worst[2].max((c - common::contrastive(&m, mean)).abs());
        let attn_pos = rng.gen_bool(0.5);
        let den = if attn_pos { DistillDenominator::AttentionPositive } else { DistillDenominator::SimilarityOnly };
        let dl = scalar(|g| {
            let (sv, av) = (g.input(m.clone()), g.input(pos.clone()));
            distill_loss(g, sv, av, den, red).unwrap()
        });
        worst[3] = worst[3].max((dl - common::distill(&m, pos.data(), attn_pos, mean)).abs());

        let sizes: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(1..4)).collect();
        let fp = blocks(&sizes);
        let rows = common::random_distribution_rows(&mut rng, sizes.len(), fp.union_order.len());
        let alpha = rng.gen_range(-0.5..2.5);
        let dv = scalar(|g| {
            let v = g.input(rows.clone());
            divergence_loss(g, v, &fp, alpha, 1.0)
        });
        worst[4] = worst[4].max((dv - common::divergence(&rows, &fp.per_concept, alpha, 1.0)).abs());

        let nc = rng.gen_range(1..4);
        let np = rng.gen_range(1..10);
        let concepts = common::random_tensor(&mut rng, nc, 3, 1.0).map(|x| (x * 2.0).round() / 2.0);
        let proposals = common::random_tensor(&mut rng, np, 3, 1.0).map(|x| (x * 2.0).round() / 2.0);
        let k = rng.gen_range(1..6);
        let crow: Vec<&[f64]> = (0..concepts.rows()).map(|i| concepts.row_slice(i)).collect();
        let got = prefilter_proposals(&crow, &proposals, k).unwrap();
        if got.per_concept != common::prefilter(&concepts, &proposals, k) {
            worst[5] = f64::INFINITY;
        }

        let classes = ["circle", "star", "ring"];
        let split = ClassSplit { base: vec!["circle".into()], novel: vec!["star".into(), "ring".into()] };
        let (results, truth) = common::random_detection_instance(&mut rng, &classes);
        let rep = compute_ap50(&results, &truth, &split);
        for class in classes {
            let diff = match (common::ap50_for_class(&results, &truth, class), rep.per_class.get(class)) {
                (Some(w), Some(g)) => (w - g).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            worst[6] = worst[6].max(diff);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = worst[..6].iter().all(|&w| w < ORACLE_TOL) && worst[6] < AP_TOL && secs < 120.0;
    let detail = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(ok, format!("{ORACLE_CASES} cases each; max abs diff: {detail}; {secs:.1}s"))
}

// ---- 3: attention rows ------------------------------------------------------

fn criterion_attention_rows() -> Verdict {
    let grammar = Grammar::default();
    let cfg = FusionConfig::default();
    let vocab = grammar.vocabulary(7, cfg.model_dim).unwrap();
    let world = World::new(Default::default(), grammar.clone()).unwrap();
    let corpus = generate_corpus(&world, &ovd_distill::world::CorpusConfig { detection_count: 0, caption_count: 64, eval_count: 0, ..Default::default() }).unwrap();
    let teacher = Teacher::new(cfg.clone(), vocab.len(), (64, 64)).unwrap();
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for pass in 0..FORWARD_PASSES {
        let mut rng = common::rng(50_000 + pass);
        let mut store = ParamStore::new();
        teacher.init_params(&mut store, pass);
        let cap = parse_caption(&corpus.captions[pass as usize % corpus.captions.len()].caption_text, &vocab).unwrap();
        let views = make_masked_views(&cap, &vocab);
        let n = rng.gen_range(1..=8);
        let regions = common::random_tensor(&mut rng, n, cfg.model_dim, 2.0);
        let boxes: Vec<BBox> = (0..n).map(|_| common::random_box(&mut rng)).collect();
        let mut g = Graph::new();
        let r = g.constant(regions);
        let out = teacher.forward(&mut g, &store, &vocab, &views, r, &boxes).unwrap();
        let rec = out.record(&g);
        for i in 0..rec.scores.rows() {
            let row = rec.scores.row_slice(i);
            if row.iter().any(|&x| x < 0.0) {
                worst = f64::INFINITY;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            rows += 1;
        }
    }
    verdict(worst <= ROW_SUM_TOL, format!("{FORWARD_PASSES} passes, {rows} rows, max |sum - 1| = {worst:.1e}"))
}

// ---- 4: divergence analytics ------------------------------------------------

fn criterion_divergence_analytics() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for case in 0..50u64 {
        let mut rng = common::rng(9000 + case);
        let sizes: Vec<usize> = (0..rng.gen_range(2..5)).map(|_| rng.gen_range(1..4)).collect();
        let fp = blocks(&sizes);
        let row = common::random_distribution_rows(&mut rng, 1, fp.union_order.len());
        let same = Tensor::from_rows(&vec![row.row_slice(0).to_vec(); sizes.len()]);
        let alpha = rng.gen_range(0.0..2.0);
        let v = scalar(|g| {
            let a = g.input(same.clone());
            divergence_loss(g, a, &fp, alpha, 1.0)
        });
        if v != alpha || divergence_value(&same, &fp, alpha, 1.0) != alpha {
            ok = false;
            notes.push(format!("identical rows gave {v} for alpha {alpha}"));
        }
    }
    for n in 2..=6usize {
        let fp = blocks(&vec![1; n]);
        let mut eye = Tensor::zeros(n, n);
        for i in 0..n {
            eye.set(i, i, 1.0);
        }
        let v = scalar(|g| {
            let a = g.input(eye.clone());
            divergence_loss(g, a, &fp, 0.5, 1.0)
        });
        if v != 0.0 {
            ok = false;
            notes.push(format!("disjoint one-hot rows with {n} concepts gave {v}"));
        }
    }
    verdict(ok, if notes.is_empty() { "identical rows -> alpha exactly (50 cases); disjoint one-hot, K=1, alpha=0.5 -> 0 (2..6 concepts)".into() } else { notes.join("; ") })
}

// ---- 5: masking protocol ----------------------------------------------------

fn criterion_masking(corpora: &[(&str, &Corpus)]) -> Verdict {
    let cfg = TrainConfig::default();
    let vocab = cfg.grammar().unwrap().vocabulary(cfg.vocab_seed, cfg.fusion.model_dim).unwrap();
    let mut captions = 0;
    let mut views_total = 0;
    let mut bad = Vec::new();
    for (name, corpus) in corpora {
        for (i, s) in corpus.captions.iter().enumerate() {
            let cap = parse_caption(&s.caption_text, &vocab).unwrap();
            let views = make_masked_views(&cap, &vocab);
            captions += 1;
            views_total += views.len();
            let one_mask_each = views.iter().enumerate().all(|(k, v)| {
                let masks: Vec<usize> = (0..v.token_ids.len()).filter(|&p| v.token_ids[p] == vocab.mask_id()).collect();
                masks == [cap.concept_positions[k]]
            });
            if views.len() != cap.concept_positions.len() || !one_mask_each {
                bad.push(format!("{name}#{i}"));
            }
        }
    }
    verdict(bad.is_empty(), format!("{captions} captions, {views_total} views; violations: {}", if bad.is_empty() { "none".into() } else { bad.join(",") }))
}

// ---- 6-9: training trends ---------------------------------------------------

/// Everything the trend criteria need from one seed.
#[derive(Default, Clone)]
struct SeedResults {
    det: f64,
    det_cap_img: f64,
    stage1: f64,
    stage2: f64,
    stage2_vanilla: f64,
    dmlm_accuracy: f64,
    vanilla_accuracy: f64,
    dmlm_tv: f64,
    vanilla_tv: f64,
    /// The same teacher metrics after stage 2, for the log only.
    late: [f64; 4],
    noisy_on: f64,
    noisy_off: f64,
    noise_precision: f64,
    noise_recall: f64,
    chance_precision: f64,
    chance_recall: f64,
}

/// The default configuration; `ACCEPTANCE_EPOCHS` shortens or lengthens
/// every stage for exploratory runs.
fn acceptance_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    if let Some(e) = std::env::var("ACCEPTANCE_EPOCHS").ok().and_then(|v| v.parse().ok()) {
        cfg.baseline_epochs = e;
        cfg.stage1_epochs = e;
        cfg.stage2_epochs = e;
    }
    cfg
}

/// `ACCEPTANCE_SEEDS=0,1` overrides the seed list for exploratory runs.
fn seeds() -> Vec<u64> {
    std::env::var("ACCEPTANCE_SEEDS")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_else(|| SEEDS.to_vec())
}

fn novel(session: &Session, store: &ParamStore) -> f64 {
    session.evaluate(store).unwrap().report.ap50_novel
}

fn run_seed(seed: u64, clean: &Corpus, noisy: &Corpus, log: &mut dyn FnMut(String)) -> SeedResults {
    let mut out = SeedResults::default();
    let base = acceptance_config(seed);
    let t0 = Instant::now();

    let det_only = Session::new(TrainConfig { enabled: vec![Component::Det], ..base.clone() }, clean.clone()).unwrap();
    out.det = novel(&det_only, &det_only.run_baseline(None).unwrap().checkpoint.params);
    drop(det_only);

    let full = Session::new(base.clone(), clean.clone()).unwrap();
    out.det_cap_img = novel(&full, &full.run_baseline(None).unwrap().checkpoint.params);
    let s1 = full.run_stage1(None).unwrap().checkpoint;
    let e1 = full.evaluate(&s1.params).unwrap().report;
    out.stage1 = e1.ap50_novel;
    out.dmlm_accuracy = e1.mlm_accuracy;
    out.dmlm_tv = e1.attention_tv;
    let e2 = full.evaluate(&full.run_stage2(&s1, None).unwrap().checkpoint.params).unwrap().report;
    out.stage2 = e2.ap50_novel;
    drop(full);

    let vanilla = Session::new(TrainConfig { divergence: false, ..base.clone() }, clean.clone()).unwrap();
    let v1 = vanilla.run_stage1(None).unwrap().checkpoint;
    let ev = vanilla.evaluate(&v1.params).unwrap().report;
    out.vanilla_accuracy = ev.mlm_accuracy;
    out.vanilla_tv = ev.attention_tv;
    let ev2 = vanilla.evaluate(&vanilla.run_stage2(&v1, None).unwrap().checkpoint.params).unwrap().report;
    out.stage2_vanilla = ev2.ap50_novel;
    out.late = [e2.mlm_accuracy, ev2.mlm_accuracy, e2.attention_tv, ev2.attention_tv];
    drop(vanilla);

    let noisy_on = Session::new(base.clone(), noisy.clone()).unwrap();
    let n1 = noisy_on.run_stage1(None).unwrap().checkpoint;
    let s2 = noisy_on.run_stage2(&n1, None).unwrap().checkpoint;
    let en = noisy_on.evaluate(&s2.params).unwrap().report;
    out.noisy_on = en.ap50_novel;
    let nd = en.noise.unwrap_or_default();
    out.noise_precision = nd.precision;
    out.noise_recall = nd.recall;
    out.chance_precision = nd.chance_precision;
    out.chance_recall = nd.chance_recall;
    drop(noisy_on);
    let noisy_off = Session::new(TrainConfig { noise_removal: false, ..base }, noisy.clone()).unwrap();
    out.noisy_off = novel(&noisy_off, &noisy_off.run_stage2(&n1, None).unwrap().checkpoint.params);

    log(format!(
        "  seed {seed} ({:.0}s): det {:.3} det+cap+img {:.3} stage1 {:.3} stage2 {:.3} stage2-vanilla {:.3} | mlm acc {:.3}/{:.3} tv {:.3}/{:.3} (after stage 2: {:.3}/{:.3} {:.3}/{:.3}) | noisy on {:.3} off {:.3} p {:.3}/{:.3} r {:.3}/{:.3}",
        t0.elapsed().as_secs_f64(),
        out.det,
        out.det_cap_img,
        out.stage1,
        out.stage2,
        out.stage2_vanilla,
        out.dmlm_accuracy,
        out.vanilla_accuracy,
        out.dmlm_tv,
        out.vanilla_tv,
        out.late[0],
        out.late[1],
        out.late[2],
        out.late[3],
        out.noisy_on,
        out.noisy_off,
        out.noise_precision,
        out.chance_precision,
        out.noise_recall,
        out.chance_recall,
    ));
    out
}

fn med(rs: &[SeedResults], f: impl Fn(&SeedResults) -> f64) -> f64 {
    median(&rs.iter().map(f).collect::<Vec<_>>())
}

fn trend_verdicts(rs: &[SeedResults], secs: f64) -> [Verdict; 4] {
    let det = med(rs, |r| r.det);
    let dci = med(rs, |r| r.det_cap_img);
    let s1 = med(rs, |r| r.stage1);
    let s2 = med(rs, |r| r.stage2);
    let sv = med(rs, |r| r.stage2_vanilla);
    let c6 = verdict(
        det < dci && dci < s1 && s1 <= s2 && s2 > sv && secs < 3600.0,
        format!("median novel AP50: det {det:.3} < det+cap+img {dci:.3} < stage1 {s1:.3} <= stage2 {s2:.3}; stage2 {s2:.3} > w/o divmlm {sv:.3}; training {secs:.0}s"),
    );
    let da = med(rs, |r| r.dmlm_accuracy);
    let va = med(rs, |r| r.vanilla_accuracy);
    let c7 = verdict(da >= va, format!("median masked-concept accuracy: divergence teacher {da:.3} >= vanilla {va:.3}"));
    let tv_pairs: Vec<String> = rs.iter().map(|r| format!("{:.3}>{:.3}", r.dmlm_tv, r.vanilla_tv)).collect();
    let c8 = verdict(
        rs.iter().all(|r| r.dmlm_tv > r.vanilla_tv),
        format!("attention TV per seed (divergence > vanilla): {}", tv_pairs.join(", ")),
    );
    let on = med(rs, |r| r.noisy_on);
    let off = med(rs, |r| r.noisy_off);
    let p = med(rs, |r| r.noise_precision);
    let cp = med(rs, |r| r.chance_precision);
    let rc = med(rs, |r| r.noise_recall);
    let cr = med(rs, |r| r.chance_recall);
    let c9 = verdict(
        on >= off && p > cp && rc > cr,
        format!("noise rate {NOISE_RATE}: removal on {on:.3} >= off {off:.3}; flag precision {p:.3} > chance {cp:.3}; recall {rc:.3} > chance {cr:.3}"),
    );
    [c6, c7, c8, c9]
}

// ---- 10: determinism --------------------------------------------------------

fn criterion_determinism() -> Verdict {
    let mut cfg = TrainConfig::default();
    cfg.corpus.detection_count = 40;
    cfg.corpus.caption_count = 64;
    cfg.corpus.eval_count = 8;
    let world = World::new(cfg.world.clone(), cfg.grammar().unwrap()).unwrap();
    let corpus = generate_corpus(&world, &cfg.corpus).unwrap();
    let a = Session::new(cfg.clone(), corpus.clone()).unwrap();
    let b = Session::new(cfg.clone(), corpus).unwrap();
    let ra = a.train(Stage::Stage1, 3, None, None).unwrap();
    let rb = b.train(Stage::Stage1, 3, None, None).unwrap();
    let identical = ra.checkpoint.to_bytes() == rb.checkpoint.to_bytes()
        && ra.trace.iter().map(|x| x.to_bits()).eq(rb.trace.iter().map(|x| x.to_bits()));

    let part = a.train(Stage::Stage1, 1, None, None).unwrap();
    let restored = Checkpoint::from_bytes(&part.checkpoint.to_bytes()).unwrap();
    let resumed = a.train(Stage::Stage1, 3, Some(&restored), None).unwrap();
    let resume1 = resumed.checkpoint.to_bytes() == ra.checkpoint.to_bytes();

    let s2_full = a.train(Stage::Stage2, 2, Some(&ra.checkpoint), None).unwrap();
    let s2_half = a.train(Stage::Stage2, 1, Some(&ra.checkpoint), None).unwrap();
    let s2_restored = Checkpoint::from_bytes(&s2_half.checkpoint.to_bytes()).unwrap();
    let s2_rest = a.train(Stage::Stage2, 2, Some(&s2_restored), None).unwrap();
    let resume2 = s2_rest.checkpoint.to_bytes() == s2_full.checkpoint.to_bytes();
    verdict(
        identical && resume1 && resume2,
        format!("repeat stage-1 bit-identical: {identical}; stage-1 resume: {resume1}; stage-2 resume: {resume2}"),
    )
}

// ---- driver -----------------------------------------------------------------

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let report = |n: u32, name: &'static str, v: Verdict, results: &mut Vec<(u32, &str, Verdict)>| {
        println!("[{}] criterion {n:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };

    if want(1) {
        report(1, "gradient suite", criterion_gradients(), &mut results);
    }
    if want(2) {
        report(2, "oracle suite", criterion_oracles(), &mut results);
    }
    if want(3) {
        report(3, "attention normalization", criterion_attention_rows(), &mut results);
    }
    if want(4) {
        report(4, "divergence analytics", criterion_divergence_analytics(), &mut results);
    }

    let needs_corpus = [5, 6, 7, 8, 9].iter().any(|&n| want(n));
    if needs_corpus {
        let cfg = TrainConfig::default();
        let world = World::new(cfg.world.clone(), cfg.grammar().unwrap()).unwrap();
        let clean = generate_corpus(&world, &cfg.corpus).unwrap();
        let noisy_cfg = ovd_distill::world::CorpusConfig { noise_rate: NOISE_RATE, ..cfg.corpus.clone() };
        let noisy = generate_corpus(&world, &noisy_cfg).unwrap();
        if want(5) {
            report(5, "masking protocol", criterion_masking(&[("clean", &clean), ("noisy", &noisy)]), &mut results);
        }
        if [6, 7, 8, 9].iter().any(|&n| want(n)) {
            let t0 = Instant::now();
            let mut per_seed = Vec::new();
            for seed in seeds() {
                per_seed.push(run_seed(seed, &clean, &noisy, &mut |line| println!("{line}")));
            }
            let secs = t0.elapsed().as_secs_f64();
            let [c6, c7, c8, c9] = trend_verdicts(&per_seed, secs);
            for (n, name, v) in [(6, "ablation trend", c6), (7, "teacher accuracy", c7), (8, "attention diversity", c8), (9, "noise removal", c9)] {
                if want(n) {
                    report(n, name, v, &mut results);
                }
            }
        }
    }
    if want(10) {
        report(10, "determinism", criterion_determinism(), &mut results);
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed{}", results.len() - failed.len(), failed.len(), if failed.is_empty() { String::new() } else { format!(" ({failed:?})") });
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
