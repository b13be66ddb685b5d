mod common;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use vdistill::distill::{
    cross_entropy, dual_step, embedding_distill_loss, evaluate_sample, head_ce_loss, kl_divergence, sample_gradients,
    DistillSample, LossGraphs,
};
use vdistill::init::{EmbeddingInit, HeadInit};
use vdistill::model::{softmax_rows, Model, ParamId, TrainableSet};
use vdistill::tokenizer::{ExtendedTokenizer, Tokenizer};
use vdistill::train::Adam;
use vdistill::Error;

use common::*;

/// Training samples whose extended split uses at least one added token.
fn samples_with_added(t: &Toy) -> Vec<DistillSample> {
    let v = t.base.vocab_size() as u32;
    t.texts
        .iter()
        .map(|x| DistillSample::new(&t.base, &t.ext, x, 128).unwrap())
        .filter(|s| s.ext_ids.iter().any(|&i| i >= v))
        .collect()
}

fn model_for(t: &Toy, embedding: EmbeddingInit, head: HeadInit) -> Model<f64> {
    extended_model::<f64>(&t.ext, 16, 1, embedding, head, 21)
}

/// KL computed from plain forward passes, softmax over the first `v` logits.
fn reference_kl(m: &Model<f64>, s: &DistillSample) -> f64 {
    let v = m.config.v_orig;
    let (t, u) = (m.forward(&s.orig_ids).unwrap(), m.forward(&s.ext_ids).unwrap());
    let probs = |row: ndarray::ArrayView1<f64>| {
        let x: Vec<f64> = row.iter().take(v).copied().collect();
        let max = x.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = x.iter().map(|a| (a - max).exp()).sum();
        x.iter().map(|a| (a - max).exp() / z).collect::<Vec<_>>()
    };
    let mut total = 0.0;
    for (o, e) in s.selection.pairs() {
        let (p, q) = (probs(t.row(o)), probs(u.row(e)));
        total += p.iter().zip(&q).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q.max(1e-12)).ln()).sum::<f64>();
    }
    total / s.selection.len() as f64
}

#[test]
fn no_added_tokens_means_zero_kl() {
    let t = toy(&[]);
    let ext = ExtendedTokenizer::with_added(t.base.clone(), Vec::<&str>::new()).unwrap();
    let m = extended_model::<f32>(&ext, 32, 2, EmbeddingInit::Mean, HeadInit::CopyFirst, 1);
    for text in t.texts.iter().take(20) {
        let kl = embedding_distill_loss(&m, &t.base, &ext, text).unwrap();
        assert!(kl.abs() <= 1e-6, "{kl}");
    }
}

#[test]
fn kl_matches_an_independent_computation() {
    let t = toy(&TOY_ADDED);
    let m = model_for(&t, EmbeddingInit::Random, HeadInit::Random);
    let mut checked = 0;
    for text in t.texts.iter().take(10) {
        let s = DistillSample::new(&t.base, &t.ext, text, 128).unwrap();
        if s.orig_ids == s.ext_ids {
            continue;
        }
        checked += 1;
        let got = embedding_distill_loss(&m, &t.base, &t.ext, text).unwrap();
        let want = reference_kl(&m, &s);
        assert!(rel_diff(got, want) < 1e-10, "{got} vs {want}");
        let report = evaluate_sample(&m, &s).unwrap();
        assert_eq!(report.n_columns, s.selection.len());
        assert_eq!(report.n_ext_tokens, s.ext_ids.len());
    }
    assert!(checked > 0);
}

#[test]
fn uniform_logits_give_log_vocab_ce() {
    let t = toy(&TOY_ADDED);
    let mut m = model_for(&t, EmbeddingInit::Mean, HeadInit::CopyFirst);
    m.head.original.fill(0.0);
    m.head.extension.fill(0.0);
    let ce = head_ce_loss(&m, &t.ext, &t.texts[0]).unwrap();
    let v = (m.config.v_orig + m.config.v_ext) as f64;
    assert!((ce - v.ln()).abs() < 1e-12, "{ce}");
    assert!(matches!(head_ce_loss(&m, &t.ext, "x"), Err(Error::SequenceTooShort(1))));
}

#[test]
fn first_subtoken_embedding_beats_random_rows() {
    let t = toy(&TOY_ADDED);
    let random = model_for(&t, EmbeddingInit::Random, HeadInit::Random);
    let mut copied = random.clone();
    for (i, tok) in t.ext.added().iter().enumerate() {
        let first = t.base.encode_bytes(tok)[0] as usize;
        let row = copied.embed.original.row(first).to_owned();
        copied.embed.extension.row_mut(i).assign(&row);
    }
    let loss = |m: &Model<f64>| {
        t.texts
            .iter()
            .take(10)
            .map(|x| embedding_distill_loss(m, &t.base, &t.ext, x).unwrap())
            .sum::<f64>()
    };
    let (r, c) = (loss(&random), loss(&copied));
    assert!(c < r, "copied {c} >= random {r}");
}

#[test]
fn dual_step_touches_only_the_extension_blocks() {
    let t = toy(&TOY_ADDED);
    let mut m = model_for(&t, EmbeddingInit::Mean, HeadInit::CopyFirst);
    let s = samples_with_added(&t).swap_remove(0);
    let hashes = |m: &Model<f64>| m.param_ids().into_iter().map(|p| (p, m.param_hash(p).unwrap())).collect::<Vec<_>>();
    let before = hashes(&m);
    let mut kl = Adam::new(TrainableSet::only([ParamId::EmbedExtension]), 1e-3);
    let mut ce = Adam::new(TrainableSet::only([ParamId::HeadExtension]), 1e-3);
    dual_step(&mut m, Some(&mut kl), &mut ce, &s).unwrap();
    let changed: Vec<ParamId> = before
        .iter()
        .zip(hashes(&m))
        .filter(|((_, a), (_, b))| a != b)
        .map(|((p, _), _)| *p)
        .collect();
    assert_eq!(changed, vec![ParamId::EmbedExtension, ParamId::HeadExtension]);
}

#[test]
fn kl_gradient_has_no_head_part_and_ce_graph_no_embedding_part() {
    let t = toy(&TOY_ADDED);
    let m = model_for(&t, EmbeddingInit::Mean, HeadInit::CopyFirst);
    let s = samples_with_added(&t).swap_remove(1);
    let g = sample_gradients(&m, &s, &LossGraphs::dual()).unwrap();
    let (kl, ce) = (g.kl.unwrap(), g.ce.unwrap());
    assert_eq!(kl.ids().collect::<Vec<_>>(), vec![ParamId::EmbedExtension]);
    assert_eq!(ce.ids().collect::<Vec<_>>(), vec![ParamId::HeadExtension]);
    let overlap = LossGraphs {
        kl: Some(TrainableSet::only([ParamId::EmbedExtension])),
        ce: Some(TrainableSet::only([ParamId::EmbedExtension, ParamId::HeadExtension])),
    };
    assert!(matches!(sample_gradients(&m, &s, &overlap), Err(Error::GraphsNotDisjoint(_))));
}

#[test]
fn identical_runs_are_bit_identical() {
    let t = toy(&TOY_ADDED);
    let run = || {
        let mut m = model_for(&t, EmbeddingInit::Random, HeadInit::Random);
        let mut kl = Adam::new(TrainableSet::only([ParamId::EmbedExtension]), 1e-3);
        let mut ce = Adam::new(TrainableSet::only([ParamId::HeadExtension]), 1e-3);
        for s in samples_with_added(&t).iter().take(4) {
            dual_step(&mut m, Some(&mut kl), &mut ce, s).unwrap();
        }
        m
    };
    assert_eq!(run(), run());
}

#[test]
fn ce_without_kl_trains_both_extension_blocks() {
    let t = toy(&TOY_ADDED);
    let mut m = model_for(&t, EmbeddingInit::Random, HeadInit::Random);
    let start = m.clone();
    let s = samples_with_added(&t).swap_remove(2);
    let mut ce = Adam::new(LossGraphs::ce_only().ce.unwrap(), 1e-3);
    dual_step(&mut m, None, &mut ce, &s).unwrap();
    assert_ne!(m.embed.extension, start.embed.extension);
    assert_ne!(m.head.extension, start.head.extension);
    assert_eq!(m.embed.original, start.embed.original);
}

fn distribution(raw: Vec<f64>) -> Array1<f64> {
    let a = Array2::from_shape_vec((1, raw.len()), raw).unwrap();
    softmax_rows(a.view()).row(0).to_owned()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_is_non_negative_and_zero_on_equal(raw in proptest::collection::vec(-8.0f64..8.0, 2..12), shift in proptest::collection::vec(-3.0f64..3.0, 12)) {
        let p = distribution(raw.clone());
        let q = distribution(raw.iter().zip(&shift).map(|(a, b)| a + b).collect());
        prop_assert!((p.sum() - 1.0).abs() < 1e-6 && (q.sum() - 1.0).abs() < 1e-6);
        prop_assert!(kl_divergence(p.view(), q.view()).unwrap() >= -1e-9);
        prop_assert!(kl_divergence(p.view(), p.view()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ce_is_mean_negative_log_probability(rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 1..8), picks in proptest::collection::vec(0u32..6, 8)) {
        let n = rows.len();
        let flat: Vec<f64> = rows.concat();
        let probs = softmax_rows(Array2::from_shape_vec((n, 6), flat).unwrap().view());
        let targets = &picks[..n];
        let want = targets.iter().enumerate().map(|(i, &t)| -probs[[i, t as usize]].ln()).sum::<f64>() / n as f64;
        let got = cross_entropy(targets, probs.view()).unwrap();
        prop_assert!((got - want).abs() < 1e-12);
    }
}
