use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::{segment, InputSequence};
use crate::error::Error;
use crate::synth::vocab::SPECIALS;
use crate::tensor::{check_param_gradients, Adam, Tape, Tensor};
use crate::testutil::fixture;

fn ln_softmax(row: &[f64], i: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row[i] - m - z.ln()
}

fn eval<F>(f: F) -> f64
where
    F: FnOnce(&mut Tape<'static, f64>) -> crate::Result<crate::tensor::Var>,
{
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.scalar(v)
}

#[test]
fn mlm_loss_closed_forms() {
    let uniform = eval(|t| {
        let l = t.constant(Tensor::zeros([3, 256]));
        mlm_loss(t, l, &[0, 17, 255])
    });
    assert!((uniform - 256f64.ln()).abs() < 1e-6);

    let hand = eval(|t| {
        let l = t.constant(Tensor::new([1, 2], vec![2.0, 0.0]).unwrap());
        mlm_loss(t, l, &[0])
    });
    assert!((hand - (1.0 + (-2f64).exp()).ln()).abs() < 1e-6);
    assert!((hand - 0.1269).abs() < 1e-4);

    let confident = eval(|t| {
        let l = t.constant(Tensor::new([1, 3], vec![60.0, 0.0, 0.0]).unwrap());
        mlm_loss(t, l, &[0])
    });
    assert!(confident < 1e-12);

    let empty = eval(|t| {
        let l = t.constant(Tensor::zeros([0, 5]));
        mlm_loss(t, l, &[])
    });
    assert_eq!(empty, 0.0);
}

#[test]
fn mlm_rejects_targets_outside_vocab() {
    let mut t: Tape<'static, f64> = Tape::new();
    let l = t.constant(Tensor::zeros([1, 4]));
    assert!(matches!(mlm_loss(&mut t, l, &[4]), Err(Error::Index { .. })));
}

#[test]
fn mpm_loss_closed_forms() {
    let same = eval(|t| {
        let raw = Tensor::new([2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.5]).unwrap();
        let p = t.constant(raw.clone());
        mpm_loss(t, p, &raw)
    });
    assert!(same.abs() < 1e-12);

    let peaked = eval(|t| {
        let raw = Tensor::new([1, 4], vec![60.0, 0.0, 0.0, 0.0]).unwrap();
        let p = t.constant(Tensor::zeros([1, 4]));
        mpm_loss(t, p, &raw)
    });
    assert!((peaked - 4f64.ln()).abs() < 1e-6);
}

#[test]
fn mpm_matches_brute_force_kl_and_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let rows = rng.random_range(1..5);
        let d = rng.random_range(2..9);
        let raw: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pred: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut expected = 0.0;
        for r in 0..rows {
            let a = &raw[r * d..(r + 1) * d];
            let b = &pred[r * d..(r + 1) * d];
            for i in 0..d {
                let p = ln_softmax(a, i).exp();
                expected += p * (ln_softmax(a, i) - ln_softmax(b, i));
            }
        }
        expected /= rows as f64;
        let got = eval(|t| {
            let p = t.constant(Tensor::new([rows, d], pred.clone()).unwrap());
            mpm_loss(t, p, &Tensor::new([rows, d], raw.clone()).unwrap())
        });
        assert!(got >= 0.0);
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }
}

#[test]
fn mpm_ignores_constant_shift_of_raw_features() {
    let raw = vec![0.1, 1.5, -0.7, 0.2, 0.0, 0.9];
    let shifted: Vec<f64> = raw.iter().enumerate().map(|(i, v)| v + if i < 3 { 4.0 } else { -2.5 }).collect();
    let pred = vec![0.4, -0.2, 0.3, 1.0, 0.0, -1.0];
    let run = |r: &Vec<f64>| {
        eval(|t| {
            let p = t.constant(Tensor::new([2, 3], pred.clone()).unwrap());
            mpm_loss(t, p, &Tensor::new([2, 3], r.clone()).unwrap())
        })
    };
    assert!((run(&raw) - run(&shifted)).abs() < 1e-12);
}

#[test]
fn mpm_rejects_shape_mismatch() {
    let mut t: Tape<'static, f64> = Tape::new();
    let p = t.constant(Tensor::zeros([2, 3]));
    assert!(matches!(mpm_loss(&mut t, p, &Tensor::zeros([2, 4])), Err(Error::Shape { .. })));
}

#[test]
fn tip_loss_closed_forms() {
    let case = |s: f64, y: f32| {
        eval(|t| {
            let v = t.constant(Tensor::scalar(s));
            tip_loss(t, v, y)
        })
    };
    assert!((case(0.5, 1.0) - 2f64.ln()).abs() < 1e-6);
    assert!((case(0.9, 0.0) - 10f64.ln()).abs() < 1e-6);
    assert!(case(1.0 - 1e-12, 1.0) < 1e-6);
    let worst = case(0.0, 1.0);
    assert!((worst - (1.0 / PROB_CLAMP).ln()).abs() < 1e-6);
}

fn text_sequence(n_words: usize) -> InputSequence {
    let mut tokens = vec![1u32];
    tokens.extend((0..n_words).map(|i| SPECIALS.len() as u32 + (i as u32 % 40)));
    tokens.push(2);
    InputSequence::from_tokens(&tokens, &vec![segment::TEXT; tokens.len()])
}

#[test]
fn fifteen_percent_of_text_is_selected() {
    assert_eq!(mask_count(20), 3);
    assert_eq!(mask_count(3), 1);
    assert_eq!(mask_count(0), 0);
    let seq = text_sequence(20);
    let plan = plan_masks(&seq, 4, 5..80);
    assert_eq!(plan.text_positions.len(), 3);
    assert!(plan.text_positions.iter().all(|&p| p > 0 && p < seq.len() - 1));
    assert_eq!(plan, plan_masks(&seq, 4, 5..80));
}

#[test]
fn replacement_mix_is_eighty_ten_ten() {
    let seq = text_sequence(40);
    let mut counts = [0usize; 3];
    for seed in 0..2000 {
        for a in plan_masks(&seq, seed, 5..80).actions {
            match a {
                MaskAction::Mask => counts[0] += 1,
                MaskAction::Random(t) => {
                    assert!((5..80).contains(&t));
                    counts[1] += 1
                }
                MaskAction::Keep => counts[2] += 1,
            }
        }
    }
    let total: usize = counts.iter().sum();
    let frac = |c: usize| c as f64 / total as f64;
    assert!((frac(counts[0]) - 0.8).abs() < 0.02);
    assert!((frac(counts[1]) - 0.1).abs() < 0.02);
    assert!((frac(counts[2]) - 0.1).abs() < 0.02);
}

#[test]
fn masking_zeroes_patches_and_never_touches_pixels() {
    let fx = fixture(2);
    let p = &fx.corpus.products[3];
    let seq = fx.builder.product(&p.title, &[], Some(fx.bank.get(3))).unwrap();
    for seed in 0..50 {
        let plan = plan_masks(&seq, seed, 5..80);
        let m = apply_masks(&seq, &plan);
        let before = seq.image.as_ref().unwrap();
        let after = m.seq.image.as_ref().unwrap();
        assert_eq!(before.pixel_vectors, after.pixel_vectors);
        assert_eq!(plan.patch_rows.len(), mask_count(before.patch_positions.len()));
        for (k, &r) in plan.patch_rows.iter().enumerate() {
            assert!(after.patch_features.row(r).iter().all(|v| *v == 0.0));
            assert_eq!(m.mpm_targets.row(k), before.patch_features.row(r));
            assert_eq!(m.mpm_positions[k], before.patch_positions[r]);
        }
        for &pos in &m.mlm_positions {
            assert_eq!(seq.segment_ids[pos], segment::TEXT);
            assert!(seq.token_ids[pos] >= SPECIALS.len() as i32);
        }
    }
}

#[test]
fn tip_pairs_keep_one_to_three() {
    let pairs = sample_tip_pairs(100, 5).unwrap();
    assert_eq!(pairs.iter().filter(|p| p.label).count(), 100);
    assert_eq!(pairs.iter().filter(|p| !p.label).count(), 300);
    for p in &pairs {
        assert_eq!(p.label, p.title_of == p.image_of);
    }
    let mut total = 0usize;
    let mut pos = 0usize;
    for seed in 0..10 {
        for p in sample_tip_pairs(37, seed).unwrap() {
            total += 1;
            pos += p.label as usize;
        }
    }
    assert!((pos as f64 / total as f64 - 0.25).abs() <= 0.01);
    assert!(sample_tip_pairs(1, 0).is_err());
}

fn batch(fx: &crate::testutil::Fixture, n: usize, seed: u64) -> PretrainBatch {
    let mut data = PretrainData::new(&fx.corpus, &fx.bank, fx.builder.clone(), seed).unwrap();
    data.next_batch(n).unwrap()
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    let fx = fixture(4);
    let b = batch(&fx, 3, 9);
    let model = fx.model.cast::<f64>();
    let mut ids = model.head_params();
    ids.extend(model.encoder_params());
    let checks = check_param_gradients(
        &model.store,
        &ids,
        |tape| pretrain_losses(&model, tape, &b, None).map(|(total, _)| total),
        1e-3,
        12,
        1,
    )
    .unwrap();
    for c in &checks {
        assert!(c.max_rel_err < 1e-3, "{}: {}", c.name, c.max_rel_err);
    }
}

#[test]
fn initial_mlm_loss_is_near_uniform() {
    let fx = fixture(5);
    let b = batch(&fx, 8, 1);
    let mut tape = Tape::inference(&fx.model.store);
    let (_, [mlm, mpm, tip]) = pretrain_losses(&fx.model, &mut tape, &b, None).unwrap();
    let v = fx.model.config.vocab_size as f32;
    assert!((tape.scalar(mlm) / v.ln() - 1.0).abs() < 0.1);
    assert!(tape.scalar(mpm) >= 0.0 && tape.scalar(tip) >= 0.0);
}

#[test]
fn identical_steps_give_identical_updates() {
    let fx = fixture(6);
    let b = batch(&fx, 4, 2);
    let run = || {
        let mut m = fx.model.clone();
        let mut g = m.encoder_params();
        g.extend(m.head_params());
        let mut opt = Adam::new(g, &m.store);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = pretrain_step(&mut m, &mut opt, &b, 1e-3, 1.0, Some(&mut rng)).unwrap();
        (m.store, l)
    };
    let (a, la) = run();
    let (b2, lb) = run();
    assert_eq!(la, lb);
    assert!(la.mlm >= 0.0 && la.mpm >= 0.0 && la.tip >= 0.0);
    for id in a.ids() {
        assert_eq!(a.get(id), b2.get(id));
    }
}

#[test]
fn frozen_extractor_and_discriminator_are_untouched() {
    let mut fx = fixture(7);
    let before = fx.model.store.fingerprint(&fx.model.discriminator_params());
    let mut data = PretrainData::new(&fx.corpus, &fx.bank, fx.builder.clone(), 1).unwrap();
    let cfg = PretrainConfig {
        steps: 3,
        batch_size: 2,
        ..PretrainConfig::default()
    };
    let mut log = Vec::new();
    pretrain(&mut fx.model, &mut data, &cfg, 1, &mut log).unwrap();
    assert_eq!(before, fx.model.store.fingerprint(&fx.model.discriminator_params()));
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "step\tmlm\tmpm\ttip\tlr");
    assert_eq!(lines[1].split('\t').count(), 5);
}

#[test]
fn non_finite_loss_names_the_component() {
    let mut fx = fixture(8);
    let w = fx.model.ids.tip_head.weight;
    let shape = fx.model.store.get(w).shape().to_vec();
    fx.model.store.set(w, Tensor::filled(shape, f32::NAN)).unwrap();
    let b = batch(&fx, 2, 0);
    let mut opt = Adam::new(fx.model.encoder_params(), &fx.model.store);
    let err = pretrain_step(&mut fx.model, &mut opt, &b, 1e-3, 1.0, None).unwrap_err();
    assert!(err.to_string().contains("TIP"), "{err}");
}

#[test]
fn two_hundred_steps_reduce_every_component() {
    let mut fx = fixture(9);
    let mut data = PretrainData::new(&fx.corpus, &fx.bank, fx.builder.clone(), 3).unwrap();
    let cfg = PretrainConfig {
        steps: 200,
        batch_size: 8,
        ..PretrainConfig::default()
    };
    let hist = pretrain(&mut fx.model, &mut data, &cfg, 3, &mut std::io::sink()).unwrap();
    let avg = |r: std::ops::Range<usize>, f: fn(&PretrainLosses) -> f32| {
        hist[r.clone()].iter().map(f).sum::<f32>() / r.len() as f32
    };
    for (name, f) in [
        ("mlm", (|l: &PretrainLosses| l.mlm) as fn(&PretrainLosses) -> f32),
        ("mpm", |l| l.mpm),
        ("tip", |l| l.tip),
    ] {
        let (first, last) = (avg(0..20, f), avg(180..200, f));
        assert!(last < first, "{name}: {first} -> {last}");
    }
}
