//! Acceptance checks, one PASS/FAIL line each. Exits non-zero on any failure.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdistill::alignment::{map_token_sequences, select_training_positions, DivergentGroup};
use vdistill::corpus::generate_corpus;
use vdistill::distill::{
    dual_step, embedding_distill_loss, evaluate_sample, sample_gradients, truncate_logits, DistillSample, LossGraphs,
    MetricsTable, TRAIN_CE_CSV, TRAIN_KL_CSV,
};
use vdistill::init::{EmbeddingInit, HeadInit};
use vdistill::model::{BlockParam, Gradients, Model, ParamId, TrainableSet};
use vdistill::pipeline::{
    paths, sha256_file, stage_order, Pipeline, PipelineConfig, RunManifest, RunOptions, Slot, Stage, Variant,
    LOSS_CSVS, MANIFEST_FILE,
};
use vdistill::tokenizer::{expand_vocabulary, ExpansionConfig, ExtendedTokenizer, Tokenizer};
use vdistill::train::{accumulated_step, Adam};

use common::*;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Suite {
    failed: Vec<String>,
}

impl Suite {
    fn run(&mut self, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let out = match (out, limit) {
            (Ok(d), Some(l)) if took > l => Err(format!("{d}; over the {l:?} limit")),
            (o, _) => o,
        };
        let (tag, detail) = match &out {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {name} [{:.2}s] {detail}", took.as_secs_f64());
        if out.is_err() {
            self.failed.push(name.to_string());
        }
    }
}

fn golden_alignment() -> Check {
    let (base, ext) = (cell_connect_base(), cell_connect_ext());
    let (o, e) = (base.encode(CELL_CONNECT_TEXT), ext.encode(CELL_CONNECT_TEXT));
    let map = map_token_sequences(&o, &e, base.vocab_size());
    let mut similar = vec![(0, 0), (1, 1)];
    similar.extend((7..17).map(|i| (i, i - 3)));
    let divergent = vec![DivergentGroup {
        orig: 2..7,
        ext: 2..4,
    }];
    ensure(
        (o.len(), e.len()) == (17, 14) && map.similar == similar && map.divergent == divergent,
        map.to_string().replace('\n', " "),
    )
}

fn worked_case_structure() -> Check {
    let v_orig = 40;
    let orig: Vec<u32> = (0..17).collect();
    let mut ext = vec![0, v_orig as u32];
    ext.extend(3..11);
    ext.push(v_orig as u32 + 1);
    ext.extend(13..17);
    let sel = select_training_positions(&map_token_sequences(&orig, &ext, v_orig));
    let want: Vec<usize> = (0..17).filter(|c| *c != 2 && *c != 12).collect();
    let student = Array2::<f64>::from_shape_fn((ext.len(), v_orig + 2), |(i, j)| (i + j) as f64);
    let cut = truncate_logits(&student, &sel.ext_cols, v_orig);
    ensure(
        sel.len() == 15 && sel.orig_cols == want && cut.dim() == (15, v_orig),
        format!("{} pairs, truncated {:?}", sel.len(), cut.dim()),
    )
}

fn kl_identity() -> Check {
    let t = toy(&[]);
    let ext = ExtendedTokenizer::with_added(t.base.clone(), Vec::<&str>::new()).unwrap();
    let m = extended_model::<f32>(&ext, 64, 2, EmbeddingInit::Mean, HeadInit::CopyFirst, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let alphabet: Vec<char> = "abcdefxyz_ ()=+.,:0123\n\té".chars().collect();
    let mut texts = generate_corpus(25, 50);
    texts.extend((0..25).map(|_| {
        let n = rng.random_range(2..120);
        (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect::<String>()
    }));
    let worst = texts
        .iter()
        .map(|x| embedding_distill_loss(&m, &t.base, &ext, x).unwrap().abs())
        .fold(0.0, f64::max);
    ensure(texts.len() == 50 && worst <= 1e-6, format!("max |KL| {worst:.2e} over {} texts", texts.len()))
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn gradient_oracle() -> Check {
    let t = toy(&TOY_ADDED);
    let m = extended_model::<f64>(&t.ext, 16, 1, EmbeddingInit::Random, HeadInit::Random, 31);
    let v = t.base.vocab_size() as u32;
    let s = t
        .texts
        .iter()
        .map(|x| DistillSample::new(&t.base, &t.ext, x, 128).unwrap())
        .find(|s| s.ext_ids.iter().filter(|&&i| i >= v).count() >= 2)
        .unwrap();
    let g = sample_gradients(&m, &s, &LossGraphs::dual()).unwrap();
    let (kl, ce) = (g.kl.unwrap(), g.ce.unwrap());
    let used: Vec<usize> = (0..t.ext.n_added()).filter(|r| s.ext_ids.contains(&(v + *r as u32))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = [0.0f64; 2];
    for (k, (id, rows, grads, use_kl)) in [
        (ParamId::EmbedExtension, used.clone(), &kl, true),
        (ParamId::HeadExtension, (0..t.ext.n_added()).collect(), &ce, false),
    ]
    .into_iter()
    .enumerate()
    {
        let coords: Vec<(usize, usize)> = (0..100)
            .map(|_| (rows[rng.random_range(0..rows.len())], rng.random_range(0..16)))
            .collect();
        let fd = fd_gradient(&m, id, Some(&coords), 1e-5, |x| {
            let r = evaluate_sample(x, &s).unwrap();
            if use_kl {
                r.kl_loss
            } else {
                r.ce_loss
            }
        });
        let analytic = grads.get(id).unwrap();
        for &(r, c) in &coords {
            worst[k] = worst[k].max(relative_error(analytic[[r, c]], fd[[r, c]]));
        }
    }
    ensure(
        worst.iter().all(|w| *w < 1e-3),
        format!("max rel error dKL/dE_ext {:.1e}, dCE/dH_ext {:.1e}", worst[0], worst[1]),
    )
}

fn hashes(m: &Model<f64>) -> BTreeMap<ParamId, String> {
    m.param_ids().into_iter().map(|p| (p, m.param_hash(p).unwrap())).collect()
}

fn disjointness() -> Check {
    let t = toy(&TOY_ADDED);
    let mut m = extended_model::<f64>(&t.ext, 16, 1, EmbeddingInit::Mean, HeadInit::CopyFirst, 4);
    let v = t.base.vocab_size() as u32;
    let samples: Vec<DistillSample> = t
        .texts
        .iter()
        .map(|x| DistillSample::new(&t.base, &t.ext, x, 128).unwrap())
        .filter(|s| s.ext_ids.iter().any(|&i| i >= v))
        .collect();
    let mut kl_opt = Adam::new(TrainableSet::only([ParamId::EmbedExtension]), 1e-3);
    let mut ce_opt = Adam::new(TrainableSet::only([ParamId::HeadExtension]), 1e-3);
    let start = hashes(&m);
    for step in 0..20 {
        let s = &samples[step % samples.len()];
        let g = sample_gradients(&m, s, &LossGraphs::dual()).unwrap();
        let kl_ids: Vec<ParamId> = g.kl.as_ref().unwrap().ids().collect();
        let ce_ids: Vec<ParamId> = g.ce.as_ref().unwrap().ids().collect();
        if kl_ids != [ParamId::EmbedExtension] || ce_ids != [ParamId::HeadExtension] {
            return Err(format!("step {step}: KL {kl_ids:?}, CE {ce_ids:?}"));
        }
        let before = hashes(&m);
        dual_step(&mut m, Some(&mut kl_opt), &mut ce_opt, s).unwrap();
        let after = hashes(&m);
        let moved: Vec<ParamId> = before.keys().filter(|p| before[p] != after[p]).copied().collect();
        if moved.iter().any(|p| !matches!(p, ParamId::EmbedExtension | ParamId::HeadExtension)) {
            return Err(format!("step {step} moved {moved:?}"));
        }
    }
    let end = hashes(&m);
    let moved: Vec<ParamId> = start.keys().filter(|p| start[p] != end[p]).copied().collect();
    ensure(
        moved == [ParamId::EmbedExtension, ParamId::HeadExtension],
        format!("20 steps, changed {moved:?}, {} blocks untouched", start.len() - moved.len()),
    )
}

fn copy_first_logits() -> Check {
    let t = toy(&TOY_ADDED);
    let m = extended_model::<f32>(&t.ext, 32, 2, EmbeddingInit::Mean, HeadInit::CopyFirst, 6);
    let v = m.config.v_orig;
    let firsts: Vec<usize> = t.ext.added().iter().map(|a| t.base.encode_bytes(a)[0] as usize).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut compared = 0;
    for _ in 0..20 {
        let n = rng.random_range(1..=64);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..t.ext.vocab_size() as u32)).collect();
        let logits = m.forward(&ids).unwrap();
        for row in logits.rows() {
            for (i, &f) in firsts.iter().enumerate() {
                if !row[f].is_finite() || row[v + i].to_bits() != row[f].to_bits() {
                    return Err(format!("token {i}: {} vs {}", row[v + i], row[f]));
                }
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} logit pairs bit-equal over 20 contexts"))
}

fn mean_init() -> Check {
    let t = toy(&TOY_ADDED);
    let m = extended_model::<f32>(&t.ext, 32, 1, EmbeddingInit::Mean, HeadInit::CopyFirst, 3);
    for (i, tok) in t.ext.added().iter().enumerate() {
        let ids = t.base.encode_bytes(tok);
        for c in 0..m.config.d_model {
            let mut acc = 0f32;
            for &id in &ids {
                acc += m.embed.original[[id as usize, c]];
            }
            let want = acc / ids.len() as f32;
            if want.to_bits() != m.embed.extension[[i, c]].to_bits() {
                return Err(format!("row {i} col {c}"));
            }
        }
    }
    Ok(format!("{} rows bit-equal", t.ext.n_added()))
}

fn lora_zero_delta() -> Check {
    let t = toy(&TOY_ADDED);
    let m = extended_model::<f32>(&t.ext, 32, 2, EmbeddingInit::Mean, HeadInit::CopyFirst, 8);
    let mut adapted = m.clone();
    adapted.attach_lora(4, &BlockParam::LINEAR, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0f32;
    for _ in 0..20 {
        let n = rng.random_range(1..=64);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..t.ext.vocab_size() as u32)).collect();
        let (a, b) = (m.forward(&ids).unwrap(), adapted.forward(&ids).unwrap());
        worst = worst.max((&a - &b).mapv(f32::abs).fold(0f32, |x, &y| x.max(y)));
    }
    ensure(adapted.has_lora() && worst <= 1e-7, format!("max |diff| {worst:.2e} over 20 forwards"))
}

fn grad_accumulation() -> Check {
    let t = toy(&TOY_ADDED);
    let v = t.base.vocab_size() as u32;
    let samples: Vec<DistillSample> = t
        .texts
        .iter()
        .map(|x| DistillSample::new(&t.base, &t.ext, x, 24).unwrap())
        .filter(|s| s.ext_ids.iter().any(|&i| i >= v))
        .take(4)
        .collect();
    let refs: Vec<&DistillSample> = samples.iter().collect();
    let start = extended_model::<f64>(&t.ext, 8, 1, EmbeddingInit::Random, HeadInit::Random, 8);
    let sets = || {
        (
            Adam::new(TrainableSet::only([ParamId::EmbedExtension]), 1e-3),
            Adam::new(TrainableSet::only([ParamId::HeadExtension]), 1e-3),
        )
    };

    let mut acc = start.clone();
    let (mut kl, mut ce) = sets();
    accumulated_step(&mut acc, &refs, Some(&mut kl), Some(&mut ce)).unwrap();

    let mean = |m: &Model<f64>, use_kl: bool| {
        refs.iter()
            .map(|s| {
                let r = evaluate_sample(m, s).unwrap();
                if use_kl {
                    r.kl_loss
                } else {
                    r.ce_loss
                }
            })
            .sum::<f64>()
            / refs.len() as f64
    };
    let grad = |id, use_kl| -> Gradients<f64> {
        let g = fd_gradient(&start, id, None, 1e-5, |m| mean(m, use_kl)).mapv(|x| if x.abs() < 1e-8 { 0.0 } else { x });
        [(id, g)].into_iter().collect()
    };
    let mut oracle = start.clone();
    let (mut kl, mut ce) = sets();
    kl.step(&mut oracle, &grad(ParamId::EmbedExtension, true)).unwrap();
    ce.step(&mut oracle, &grad(ParamId::HeadExtension, false)).unwrap();
    let diff = max_param_rel_diff(&acc, &oracle);
    ensure(acc != start && diff <= 1e-6, format!("k={}, max rel diff {diff:.1e}", refs.len()))
}

fn expansion_filters() -> Check {
    let docs: Vec<String> = (0..40).map(|_| "x = 12 + 31 (standard) standard kernelize".to_string()).collect();
    let base = spelled_base(&[" standard"]);
    let cfg = ExpansionConfig {
        n_add: 50,
        fresh_vocab_size: Some(320),
    };
    let (ext, report) = expand_vocabulary(&base, &docs, &cfg).unwrap();
    let show = |v: &[Vec<u8>]| v.iter().map(|t| String::from_utf8_lossy(t).into_owned()).collect::<Vec<_>>();
    let numeric = show(&report.dropped_numeric);
    let substring = show(&report.dropped_substring);
    let duplicate = show(&report.dropped_duplicate);
    let added = show(ext.added());
    let planted_numeric = [" 12", " 31"];
    let numeric_ok = numeric == planted_numeric;
    let substring_ok = substring == ["standard"];
    let bytes = |t: &String| t.len() == 1;
    let duplicate_ok = duplicate.iter().filter(|t| !bytes(t)).eq([" standard"].iter())
        && report.candidates.iter().filter(|(t, _)| t.len() == 1).count() == duplicate.iter().filter(|t| bytes(t)).count();
    let leaked = added
        .iter()
        .any(|t| planted_numeric.contains(&t.as_str()) || t == "standard" || t == " standard");
    ensure(
        numeric_ok && substring_ok && duplicate_ok && !leaked && added.iter().any(|t| t == " kernelize"),
        format!("numeric {numeric:?}, substring {substring:?}, duplicate {duplicate:?}, kept {added:?}"),
    )
}

fn column(dir: &Path, slot: Slot, file: &str, name: &str) -> Vec<f64> {
    MetricsTable::read(dir.join(paths::merged_metrics(slot, file)))
        .unwrap()
        .column(name)
        .unwrap_or_else(|| panic!("no column {name} in {file}"))
}

fn toy_dynamics(dir: &Path, cfg: &PipelineConfig, p1_time: Duration) -> Check {
    let setup = format!(
        "layers {}, d {}, v_orig {}, added {}, epochs {}, lr {:.1e}, warmup {:.0}%",
        cfg.n_layers,
        cfg.d_model,
        cfg.base_vocab_size,
        cfg.n_add,
        cfg.p1.epochs,
        cfg.p1.learning_rate,
        cfg.p1.warmup_fraction * 100.0
    );
    let mut notes = vec![setup];
    let mut ok = p1_time < Duration::from_secs(600);
    for s in ["random_klce", "mean_klce"] {
        let kl = column(dir, Slot::P1, TRAIN_KL_CSV, s);
        let ratio = kl[kl.len() - 1] / kl[0];
        ok &= ratio <= 0.5;
        notes.push(format!("{s} KL {:.4}->{:.4} (x{ratio:.2})", kl[0], kl[kl.len() - 1]));
    }
    for s in ["random_ce", "mean_ce"] {
        let ce = column(dir, Slot::P1, TRAIN_CE_CSV, s);
        ok &= ce.windows(2).take(3).all(|w| w[1] < w[0]);
        let head: Vec<String> = ce.iter().take(4).map(|x| format!("{x:.3}")).collect();
        notes.push(format!("{s} CE {}", head.join(">")));
    }
    notes.push(format!("stages up to p1-report {:.0}s", p1_time.as_secs_f64()));
    ensure(ok, notes.join("; "))
}

fn ce_only_kl_direction(dir: &Path) -> String {
    ["random_ce", "mean_ce"]
        .iter()
        .map(|s| {
            let kl = column(dir, Slot::P1, TRAIN_KL_CSV, s);
            let (a, b) = (kl[0], kl[kl.len() - 1]);
            format!("{s} KL {a:.4}->{b:.4} ({})", if b > a { "increased" } else { "decreased" })
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// `epoch,first,intermediate,last` rows as (first, last) pairs.
fn similarity_rows(path: &Path) -> Vec<(f64, f64, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let mid = f[2].parse().unwrap_or(f64::NAN);
            (f[1].parse().unwrap(), mid, f[3].parse().unwrap())
        })
        .collect()
}

fn similarity_report(dir: &Path, d_model: usize) -> Check {
    let bound = 3.0 / (d_model as f64).sqrt();
    let mut notes = Vec::new();
    let mut ok = true;
    for v in Pipeline::variants(Slot::P1) {
        for file in ["similarity_embedding.csv", "similarity_head.csv"] {
            let path = dir.join(paths::variant_metrics(Slot::P1, v, file));
            if !path.exists() {
                return Err(format!("missing {}", path.display()));
            }
            let rows = similarity_rows(&path);
            ok &= rows.len() == 13;
            let Variant::Strategy(s) = v else { continue };
            if s.init.embedding == EmbeddingInit::Random {
                let (f, m, l) = rows[0];
                let worst = f.abs().max(l.abs()).max(if m.is_nan() { 0.0 } else { m.abs() });
                ok &= worst < bound;
                notes.push(format!("{v} {file} epoch-0 max |mean| {worst:.3}"));
            }
        }
    }
    notes.push(format!("bound {bound:.3}"));
    ensure(ok, notes.join("; "))
}

/// Exploratory: KL-trained embeddings drift towards the first subtoken, CE-trained towards the last.
fn similarity_direction(dir: &Path) -> (bool, String) {
    let drift = |name: &str| {
        let v = Variant::Strategy(name.parse().unwrap());
        let rows = similarity_rows(&dir.join(paths::variant_metrics(Slot::P1, v, "similarity_embedding.csv")));
        let (a, b) = (rows[0], rows[rows.len() - 1]);
        (b.0 - a.0, b.2 - a.2)
    };
    let (kf, kl) = drift("random_klce");
    let (cf, cl) = drift("random_ce");
    (
        kf > kl && cl > cf,
        format!("random_klce first {kf:+.4} last {kl:+.4}; random_ce first {cf:+.4} last {cl:+.4}"),
    )
}

fn end_to_end(dir: &Path, total: Duration) -> Check {
    let mut notes = Vec::new();
    let mut ok = total < Duration::from_secs(1800);
    notes.push(format!("full run {:.0}s", total.as_secs_f64()));

    let finals: std::collections::BTreeSet<String> = Variant::all()
        .into_iter()
        .map(|v| sha256_file(dir.join(paths::checkpoint(Slot::P3, v))).unwrap())
        .collect();
    ok &= finals.len() == 5;
    notes.push(format!("{} distinct final checkpoints", finals.len()));
    for slot in [Slot::P1, Slot::P2, Slot::P3] {
        for f in LOSS_CSVS {
            let t = MetricsTable::read(dir.join(paths::merged_metrics(slot, f))).unwrap();
            ok &= t.columns.len() == Pipeline::variants(slot).len();
        }
    }

    let manifest = RunManifest::load(dir.join(MANIFEST_FILE)).unwrap();
    let snapshot = || -> Vec<(String, String)> {
        manifest
            .files()
            .into_iter()
            .map(|f| {
                let h = sha256_file(dir.join(&f)).unwrap();
                (f, h)
            })
            .collect()
    };
    let before = snapshot();
    let mut p = Pipeline::open(dir, PipelineConfig::default()).unwrap();
    let rerun = [
        "corpus",
        "tokenizer",
        "teacher",
        "extend",
        "init-random",
        "init-mean",
        "p1-mean_klce",
        "p1-report",
        "p2-random_ce",
        "p2-report",
        "p3-baseline",
        "p3-report",
    ];
    let start = Instant::now();
    for name in rerun {
        p.run_stage(name.parse::<Stage>().unwrap(), true).unwrap();
    }
    let same = snapshot() == before;
    ok &= same;
    notes.push(format!(
        "{} of {} stages forced again in {:.0}s, {} files {}",
        rerun.len(),
        stage_order().len(),
        start.elapsed().as_secs_f64(),
        before.len(),
        if same { "byte-identical" } else { "CHANGED" }
    ));
    ensure(ok, notes.join("; "))
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    let second = Some(Duration::from_secs(1));
    suite.run("alignment-golden", second, golden_alignment);
    suite.run("worked-case-structure", second, worked_case_structure);
    suite.run("kl-identity", Some(Duration::from_secs(10)), kl_identity);
    suite.run("gradient-oracle", Some(Duration::from_secs(30)), gradient_oracle);
    suite.run("gradient-disjointness", Some(Duration::from_secs(30)), disjointness);
    suite.run("copy-first-head", None, copy_first_logits);
    suite.run("mean-init-exact", None, mean_init);
    suite.run("lora-zero-delta", None, lora_zero_delta);
    suite.run("gradient-accumulation", None, grad_accumulation);
    suite.run("expansion-filters", None, expansion_filters);

    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    let start = Instant::now();
    let staged = catch_unwind(AssertUnwindSafe(|| {
        let mut p = Pipeline::open(dir.path(), cfg.clone()).unwrap();
        p.run(&RunOptions {
            stop_after: Some(Stage::Report(Slot::P1)),
            ..RunOptions::default()
        })
        .unwrap();
        let p1_time = start.elapsed();
        p.run(&RunOptions::default()).unwrap();
        (p1_time, start.elapsed())
    }));
    match staged {
        Ok((p1_time, total)) => {
            let d = dir.path();
            suite.run("toy-dynamics", None, || toy_dynamics(d, &cfg, p1_time));
            println!("INFO ce-only-kl {}", ce_only_kl_direction(d));
            suite.run("similarity-report", None, || similarity_report(d, cfg.d_model));
            let (ok, detail) = similarity_direction(d);
            println!("{} similarity-direction (exploratory, non-blocking) {detail}", if ok { "PASS" } else { "FAIL" });
            suite.run("end-to-end-pipeline", None, || end_to_end(d, total));
        }
        Err(_) => {
            for name in ["toy-dynamics", "similarity-report", "end-to-end-pipeline"] {
                suite.run(name, None, || Err("pipeline run failed".into()));
            }
        }
    }

    if suite.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failed: {}", suite.failed.len(), suite.failed.join(", "));
        std::process::exit(1);
    }
}
