//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//! `ACCEPTANCE_ONLY=1,2,3` restricts the run; `ACCEPTANCE_STRICT=1` turns any
//! FAIL into a nonzero exit.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use acebert::assembly::Modalities;
use acebert::config::RunConfig;
use acebert::encoder::{InputSequence, Model};
use acebert::finetune::{
    adversarial_loss, batch_probabilities, discriminator_objective, domain_probe_accuracy, encoder_objective,
    hard_negative_fraction, partition_dataset, sample_batch, semantic_matching_loss, AdversarialMode, FinetuneData,
};
use acebert::pipeline::{self, Prepared};
use acebert::pretrain::{mlm_loss, mpm_loss, pretrain_losses, tip_loss, PretrainData};
use acebert::retrieval::{gauc, recall_at_k};
use acebert::serving::{mean_cosine, EmbeddingCache, HotQueryCache};
use acebert::synth::gen_catalog;
use acebert::tensor::{check_param_gradients, ParamId, ParamStore, Tape, Tensor, Var};
use acebert::vision::{detect_roi, pixel_patchify, unpatchify, FrontEnd, Image, VisionConfig};

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass, detail }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Per-parameter relative error at the better of two finite-difference steps,
/// so a ReLU kink straddled by the wide step or roundoff on a gradient that
/// is zero by symmetry (attention key bias) under the narrow one does not
/// mask a real mismatch, which shows at both.
fn stepped<F>(store: &ParamStore<f64>, ids: &[ParamId], per_param: usize, f: F) -> Vec<(String, f64)>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> acebert::Result<Var>,
{
    let wide = check_param_gradients(store, ids, &f, 1e-3, per_param, 1).unwrap();
    let narrow = check_param_gradients(store, ids, &f, 1e-5, per_param, 1).unwrap();
    wide.into_iter()
        .zip(narrow)
        .map(|(w, n)| (w.name, w.max_rel_err.min(n.max_rel_err)))
        .collect()
}

/// Desk encoder and heads in f64: pretraining losses, the encoder-phase
/// objective with its adversarial term, and the discriminator objective.
fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let data_cfg = acebert::synth::DataConfig {
        products: 24,
        categories: 4,
        clicks: acebert::synth::ClickConfig {
            queries: 20,
            events: 400,
            ..Default::default()
        },
        ..cfg.data.clone()
    };
    let corpus = acebert::synth::Corpus::generate(&data_cfg, 3).unwrap();
    let data = Prepared::from_corpus(&cfg, corpus).unwrap();
    let model = Model::new(cfg.encoder.clone(), 11).unwrap().cast::<f64>();
    let builder = pipeline::builder(&cfg, Modalities::default());

    let mut stream = PretrainData::new(&data.corpus, &data.bank, builder.clone(), 5).unwrap();
    let pre = stream.next_batch(2).unwrap();
    let mut ft = FinetuneData::new(&data.corpus, &data.bank, &data.hot, builder, &data.pairs, 1, 6).unwrap();
    let batch = ft.next_batch(2).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = model.config.retrieval_dim;
    let emb = |rng: &mut ChaCha8Rng| Tensor::<f64>::new([4, d], (0..4 * d).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    let (q, a) = (emb(&mut rng), emb(&mut rng));
    let mut pre_ids = model.encoder_params();
    pre_ids.extend(model.head_params());

    let mut results = vec![
        ("pretraining", stepped(&model.store, &pre_ids, 6, |t| pretrain_losses(&model, t, &pre, None).map(|r| r.0))),
        ("discriminator", stepped(&model.store, &model.discriminator_params(), 64, |t| discriminator_objective(&model, t, &q, &a))),
    ];
    for (what, mode) in [("reverse encoder phase", AdversarialMode::Reverse), ("confusion encoder phase", AdversarialMode::Confusion)] {
        let f = |t: &mut Tape<'_, f64>| encoder_objective(&model, t, &batch, 20.0, Some((1.0, mode)), None).map(|r| r.0);
        results.push((what, stepped(&model.store, &model.encoder_params(), 6, f)));
    }
    let groups: usize = results.iter().map(|r| r.1.len()).sum();
    let worst = results
        .iter()
        .flat_map(|(what, checks)| checks.iter().map(move |(n, e)| (format!("{what} {n}"), *e)))
        .fold((String::new(), 0.0f64), |w, c| if c.1 >= w.1 { c } else { w });
    let elapsed = start.elapsed();
    outcome(
        1,
        "gradient suite",
        worst.1 < 1e-3 && elapsed < Duration::from_secs(120),
        format!(
            "{groups} parameter checks, max rel err {:.2e} ({}), {:.1}s",
            worst.1,
            worst.0,
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_oracles() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if !close(got, want, 1e-6) {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    };
    let mut t: Tape<'static, f64> = Tape::new();

    let uniform = t.constant(Tensor::new([1, 256], vec![0.0; 256]).unwrap());
    let v = mlm_loss(&mut t, uniform, &[17]).unwrap();
    check("mlm uniform", t.scalar(v), 256f64.ln());
    let hand = t.constant(Tensor::new([1, 2], vec![2.0, 0.0]).unwrap());
    let v = mlm_loss(&mut t, hand, &[0]).unwrap();
    check("mlm [2,0]", t.scalar(v), -(2f64.exp() / (2f64.exp() + 1.0)).ln());

    let raw = Tensor::new([2, 4], vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -2.0, 0.0]).unwrap();
    let same = t.constant(raw.clone());
    let v = mpm_loss(&mut t, same, &raw).unwrap();
    check("mpm identical", t.scalar(v), 0.0);
    let peaked = Tensor::new([1, 4], vec![60.0, 0.0, 0.0, 0.0]).unwrap();
    let flat = t.constant(Tensor::new([1, 4], vec![0.0; 4]).unwrap());
    let v = mpm_loss(&mut t, flat, &peaked).unwrap();
    check("mpm one-hot vs uniform", t.scalar(v), 4f64.ln());

    let half = t.constant(Tensor::scalar(0.5));
    let v = tip_loss(&mut t, half, 1.0).unwrap();
    check("tip (0.5, 1)", t.scalar(v), 2f64.ln());

    let row = |x: f64, y: f64| {
        let n = (x * x + y * y).sqrt();
        vec![x / n, y / n]
    };
    let same: Vec<f64> = (0..4).flat_map(|_| row(0.6, 0.8)).collect();
    let q = t.constant(Tensor::new([4, 2], same.clone()).unwrap());
    let a = t.constant(Tensor::new([4, 2], same).unwrap());
    let v = semantic_matching_loss(&mut t, q, a, 20.0).unwrap();
    check("matching identical W=4", t.scalar(v), 2.0 * 4f64.ln());
    let q = t.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = t.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let p = batch_probabilities(&mut t, q, a, 1.0).unwrap();
    let e = 1f64.exp();
    check("probabilities row 0", t.value(p).data()[0], e / (e + 1.0));
    check("probabilities row 0 off", t.value(p).data()[1], 1.0 / (e + 1.0));
    let anti_q = t.constant(Tensor::new([2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap());
    let anti_a = t.constant(Tensor::new([2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap());
    let v = semantic_matching_loss(&mut t, anti_q, anti_a, 10.0).unwrap();
    check("matching antipodal", t.scalar(v), 2.0 * (1.0 + (-20f64).exp()).ln());

    let dq = t.constant(Tensor::new([4, 1], vec![0.5; 4]).unwrap());
    let da = t.constant(Tensor::new([4, 1], vec![0.5; 4]).unwrap());
    let v = adversarial_loss(&mut t, dq, da).unwrap();
    check("adversarial D=0.5", t.scalar(v), 2.0 * 2f64.ln());
    let dq = t.constant(Tensor::new([2, 1], vec![0.0; 2]).unwrap());
    let da = t.constant(Tensor::new([2, 1], vec![1.0; 2]).unwrap());
    let v = adversarial_loss(&mut t, dq, da).unwrap();
    check("adversarial inverted", t.scalar(v), -2.0 * 1e-7f64.ln());

    let total = 11;
    outcome(
        2,
        "loss oracles",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{total} closed forms within 1e-6")
        } else {
            failures.join("; ")
        },
    )
}

/// Area under the ROC curve by trapezoids over the threshold sweep.
fn roc_auc(group: &[(f64, bool)]) -> Option<f64> {
    let p = group.iter().filter(|g| g.1).count() as f64;
    let n = group.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return None;
    }
    let mut thresholds: Vec<f64> = group.iter().map(|g| g.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut x0, mut y0, mut area) = (0.0, 0.0, 0.0);
    for s in thresholds {
        let y = group.iter().filter(|g| g.1 && g.0 >= s).count() as f64 / p;
        let x = group.iter().filter(|g| !g.1 && g.0 >= s).count() as f64 / n;
        area += (x - x0) * (y + y0) / 2.0;
        x0 = x;
        y0 = y;
    }
    Some(area)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut recall_ok = true;
    for _ in 0..200 {
        let mut ranked: Vec<u32> = (0..100).collect();
        rand::seq::SliceRandom::shuffle(ranked.as_mut_slice(), &mut rng);
        let k = rng.random_range(1..=100);
        let targets: HashSet<u32> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0..120)).collect();
        let oracle = ranked[..k].iter().copied().collect::<HashSet<_>>().intersection(&targets).count() as f64
            / targets.len() as f64;
        recall_ok &= recall_at_k(&ranked[..k], &targets).unwrap() == oracle;
    }
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let groups: Vec<Vec<(f64, bool)>> = (0..rng.random_range(1..8))
            .map(|_| {
                (0..rng.random_range(2..30))
                    .map(|_| ((rng.random_range(0..10) as f64) / 10.0, rng.random_bool(0.3)))
                    .collect()
            })
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for g in &groups {
            if let Some(a) = roc_auc(g) {
                num += a * g.len() as f64;
                den += g.len() as f64;
            }
        }
        match gauc(&groups) {
            Ok(v) => worst = worst.max((v - num / den).abs()),
            Err(_) => worst = worst.max(if den == 0.0 { 0.0 } else { f64::INFINITY }),
        }
    }
    outcome(
        3,
        "metric oracles",
        recall_ok && worst < 1e-9,
        format!("recall exact on 200 cases: {recall_ok}; gauc max deviation {worst:.1e} over 50 sets"),
    )
}

fn vision_pipeline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Image::new(64, 64, 3, (0..64 * 64 * 3).map(|_| rng.random::<f32>()).collect()).unwrap();
    let set = pixel_patchify(&img, 64, 64, 16, 16).unwrap();
    let identity = unpatchify(&set).unwrap() == img;
    let paper = VisionConfig {
        pixel_target: 224,
        pixel_patch: 32,
        roi_grid: 4,
        ..VisionConfig::default()
    };
    let counts = paper.pixel_count() == 49 && paper.patch_count() == 16;
    let front = FrontEnd::new(paper).unwrap();
    let big = Image::filled(224, 224, [0.5, 0.5, 0.5]);
    let feats = front.process(&big).unwrap();
    let shapes = feats.pixel_vectors.rows() == 49 && feats.patch_features.rows() == 16;

    let v = VisionConfig::default();
    let catalog = gen_catalog(500, 8, 64, 9).unwrap();
    let good = catalog
        .iter()
        .filter(|p| detect_roi(&p.image, v.edge_percentile, v.roi_margin).iou(&p.truth_box) >= 0.5)
        .count();
    let rate = good as f64 / catalog.len() as f64;
    outcome(
        4,
        "vision pipeline",
        identity && counts && shapes && rate >= 0.9,
        format!("patchify identity {identity}; 224/32 -> 49 pixel + 16 RoI patches {}; RoI IoU>=0.5 on {:.1}%", counts && shapes, rate * 100.0),
    )
}

fn hard_negatives() -> Outcome {
    let cfg = RunConfig::default();
    let data = Prepared::generate(&cfg).unwrap();
    let cat = |pid: u32| data.corpus.products[pid as usize].category;
    let mut fractions = Vec::new();
    for p in [1usize, 4, 16] {
        let parts = partition_dataset(&data.pairs, cat, p, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 400;
        let total: f64 = (0..n)
            .map(|_| hard_negative_fraction(&sample_batch(&parts, cfg.finetune.batch_size, &mut rng).unwrap(), cat))
            .sum();
        fractions.push(total / n as f64);
    }
    outcome(
        8,
        "negative sampling",
        fractions[0] < fractions[1] && fractions[1] < fractions[2],
        format!(
            "same-category fraction P=1 {:.3}, P=4 {:.3}, P=16 {:.3}",
            fractions[0], fractions[1], fractions[2]
        ),
    )
}

const SETTINGS: [(&str, bool, bool, bool, bool); 5] = [
    ("text", false, false, false, false),
    ("+roi", true, false, false, false),
    ("+pixel", true, true, false, false),
    ("+hot", true, true, true, false),
    ("+adv", true, true, true, true),
];

struct SeedRun {
    recall100: [f64; 5],
    probe: [f64; 5],
    full_recall10: f64,
    random10: f64,
    freeze_ok: bool,
    full_model: Model,
    cfg: RunConfig,
    data: Prepared,
    pipeline_time: Duration,
}

fn setting_config(base: &RunConfig, s: (&str, bool, bool, bool, bool)) -> RunConfig {
    let mut c = base.clone();
    c.modalities = Modalities {
        use_roi: s.1,
        use_pixel: s.2,
        use_hot_query: s.3,
    };
    c.finetune.use_adversarial = s.4;
    c
}

fn seed_run(seed: u64) -> SeedRun {
    let t0 = Instant::now();
    let cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let data = Prepared::generate(&cfg).unwrap();
    let (base, _) = pipeline::run_pretrain(&cfg, &data, &mut std::io::sink()).unwrap();
    let shared = t0.elapsed();
    let mut recall100 = [0.0; 5];
    let mut probe = [0.0; 5];
    let mut full = None;
    let (mut full_recall10, mut random10, mut freeze_ok) = (0.0, 0.0, true);
    let mut full_time = Duration::ZERO;
    for (i, s) in SETTINGS.iter().enumerate() {
        let t = Instant::now();
        let c = setting_config(&cfg, *s);
        let mut model = base.clone();
        let report = pipeline::run_finetune(&c, &data, &mut model, &mut std::io::sink()).unwrap();
        let eval = pipeline::run_eval(&c, &data, &model).unwrap();
        let (q, a) = pipeline::domain_embeddings(&c, &data, &model).unwrap();
        recall100[i] = eval.recall(100).unwrap();
        probe[i] = domain_probe_accuracy(&q, &a, seed).unwrap();
        eprintln!(
            "  seed {seed} {:<7} R@10 {:.4} R@100 {:.4} GAUC {:.4} probe {:.3} ({:.0}s)",
            s.0,
            eval.recall(10).unwrap(),
            recall100[i],
            eval.gauc().unwrap(),
            probe[i],
            t.elapsed().as_secs_f64()
        );
        if s.4 {
            let phases = c.finetune.steps + c.finetune.steps / c.finetune.k;
            freeze_ok = report.freeze_checks == phases;
            full_recall10 = eval.recall(10).unwrap();
            random10 = eval.random_recall(10).unwrap();
            full_time = t.elapsed();
            full = Some(model);
        }
    }
    SeedRun {
        recall100,
        probe,
        full_recall10,
        random10,
        freeze_ok,
        full_model: full.expect("full setting ran"),
        cfg,
        data,
        pipeline_time: shared + full_time,
    }
}

fn serving(run: &SeedRun) -> Outcome {
    let mut cfg = run.cfg.clone();
    cfg.serving.clusters = 0;
    let data = &run.data;
    let teacher = &run.full_model;

    let cache = pipeline::export_embeddings(&cfg, data, teacher).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("products.aceb");
    cache.save(&path).unwrap();
    let back = EmbeddingCache::load(&path).unwrap();
    let bits = |c: &EmbeddingCache| c.vectors.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let roundtrip = back.ids == cache.ids && bits(&back) == bits(&cache);

    let (student, _) = pipeline::run_distill(&cfg, data, teacher).unwrap();
    let b = pipeline::builder(&cfg, cfg.modalities);
    let held: Vec<InputSequence> = data.corpus.queries.iter().map(|q| b.query(&q.tokens).unwrap()).collect();
    let cosine = mean_cosine(&student, teacher, &held).unwrap();

    let hot = pipeline::build_hot_cache(&cfg, data, teacher).unwrap();
    let hot_texts = pipeline::head_queries(data, cfg.serving.hot_queries);
    let server = pipeline::build_server(&cfg, &back, hot, student.clone()).unwrap();
    for t in &hot_texts {
        server.serve_query(t, 10).unwrap();
    }
    let hot_encodes = server.encode_count();

    let tail = pipeline::build_server(&cfg, &back, HotQueryCache::default(), student).unwrap();
    let index = pipeline::index_from_cache(&back).unwrap();
    let mut overlap = 0.0;
    let n = 100.min(data.corpus.queries.len());
    for q in &data.corpus.queries[..n] {
        let text = data.corpus.vocab.decode(&q.tokens);
        let want: HashSet<u32> = index
            .exact_topk(&teacher.embed(&b.query(&q.tokens).unwrap()).unwrap(), 10)
            .unwrap()
            .into_iter()
            .map(|r| r.0)
            .collect();
        let got = tail.serve_query(&text, 10).unwrap();
        overlap += got.iter().filter(|r| want.contains(&r.0)).count() as f64;
    }
    overlap /= n as f64;
    let tail_encodes = tail.encode_count();
    outcome(
        9,
        "serving",
        roundtrip && hot_encodes == 0 && cosine >= 0.95 && overlap >= 8.0,
        format!(
            "cache roundtrip bit-exact {roundtrip}; {} hot queries with {hot_encodes} encodes; student held-out cosine {cosine:.4}; top-10 overlap {overlap:.2}/10 over {n} queries ({tail_encodes} encodes)",
            hot_texts.len()
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<HashSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|s| s.contains(&id));
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        println!("{} [{}] {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
        outcomes.push(o.pass);
    };
    if wanted(1) {
        report(gradient_suite());
    }
    if wanted(2) {
        report(loss_oracles());
    }
    if wanted(3) {
        report(metric_oracles());
    }
    if wanted(4) {
        report(vision_pipeline());
    }
    if wanted(8) {
        report(hard_negatives());
    }
    if [5, 6, 7, 9].iter().any(|i| wanted(*i)) {
        let seeds: Vec<u64> = if wanted(6) || wanted(7) { vec![1, 2, 3] } else { vec![1] };
        let runs: Vec<SeedRun> = seeds.iter().map(|s| seed_run(*s)).collect();
        let first = &runs[0];
        if wanted(5) {
            let ratio = first.full_recall10 / first.random10;
            report(outcome(
                5,
                "end-to-end signal",
                ratio >= 10.0 && first.pipeline_time < Duration::from_secs(1800),
                format!(
                    "full model Recall@10 {:.4} vs random {:.4} ({ratio:.1}x); pipeline {:.0}s",
                    first.full_recall10,
                    first.random10,
                    first.pipeline_time.as_secs_f64()
                ),
            ));
        }
        if wanted(6) {
            let mean: Vec<f64> = (0..5)
                .map(|i| runs.iter().map(|r| r.recall100[i]).sum::<f64>() / runs.len() as f64)
                .collect();
            let ordered = mean.windows(2).all(|w| w[0] <= w[1]);
            let lift = mean[4] / mean[0] - 1.0;
            let text: Vec<String> = SETTINGS.iter().zip(&mean).map(|(s, m)| format!("{} {:.4}", s.0, m)).collect();
            report(outcome(
                6,
                "ablation ordering",
                ordered && lift >= 0.2,
                format!("mean Recall@100 over {} seeds: {}; full vs text +{:.0}%", runs.len(), text.join(", "), lift * 100.0),
            ));
        }
        if wanted(7) {
            let mean = |i: usize| runs.iter().map(|r| r.probe[i]).sum::<f64>() / runs.len() as f64;
            let (plain, adv) = (mean(3), mean(4));
            let freeze = runs.iter().all(|r| r.freeze_ok);
            report(outcome(
                7,
                "adversarial alignment",
                plain - adv >= 0.05 && freeze,
                format!(
                    "domain probe accuracy {:.3} without vs {:.3} with adversary ({:+.1} points); freeze contracts held {freeze}",
                    plain,
                    adv,
                    (adv - plain) * 100.0
                ),
            ));
        }
        if wanted(9) {
            report(serving(first));
        }
    }
    let passed = outcomes.iter().filter(|p| **p).count();
    println!("{passed}/{} criteria passed", outcomes.len());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if passed < outcomes.len() && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
