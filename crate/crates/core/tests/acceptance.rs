//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod support;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use modmt::corpus::{Split, Transform};
use modmt::eval::{bleu, token_accuracy, translate};
use modmt::registry::Registry;
use modmt::tokenizer::{learn_bpe, UNK_TEXT};
use modmt::trainer::*;
use modmt::transformer::TransformerConfig;
use modmt::{Direction, LanguageId};
use support::bpe_oracle::{brute_force_merges, TOY_CORPUS};
use support::world::{dir, lang, tiny_config, World};

type Outcome = Result<String, String>;

const SENTENCES: usize = 4000;
const LATENT_VOCAB: usize = 50;
const LENGTHS: (usize, usize) = (3, 8);
const BUDGET: usize = 400;
const TARGET_VOCAB: usize = 512;
const PROBE: usize = 200;
const MAX_OUT: usize = 40;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn optimizer() -> OptimizerState {
    OptimizerState::new(AdamConfig {
        peak_lr: 3e-3,
        warmup: 200,
        ..AdamConfig::default()
    })
    .unwrap()
}

fn stop(target_loss: f64) -> StopCriterion {
    StopCriterion {
        patience: 20,
        interval: 100,
        target_loss: Some(target_loss),
    }
}

fn desk_world(langs: &[(&str, Transform)]) -> World {
    World::new(langs, SENTENCES, LATENT_VOCAB, LENGTHS, 11)
}

fn desk_registry(w: &World, langs: &[&str], seed: u64) -> Registry {
    let mut r = Registry::new(seed);
    for l in langs {
        w.register(&mut r, l, &TransformerConfig::desk(0), TARGET_VOCAB);
    }
    r
}

/// Translates the probe slice of the test split and scores it.
fn score(r: &Registry, w: &World, d: &Direction) -> (f64, f64, Vec<String>) {
    let pairs: Vec<(String, String)> = w.pairs(d, Split::Test).into_iter().take(PROBE).collect();
    let (src, refs): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
    let hyps: Vec<String> = translate(r, &d.src, &d.tgt, &src, MAX_OUT)
        .unwrap()
        .into_iter()
        .map(|t| t.text)
        .collect();
    (bleu(&hyps, &refs, false).unwrap(), token_accuracy(&hyps, &refs).unwrap(), hyps)
}

fn gradient_integrity() -> Outcome {
    let mut worst = (0.0f64, 0.0f64);
    for (name, e) in support::gradient_suite::<f64>(20, 1e-5, 21) {
        ensure(e <= 1e-6, || format!("{name} (f64): relative error {e:e}"))?;
        worst.0 = worst.0.max(e);
    }
    for (name, e) in support::mixed_gradient_suite(20, 1e-5, 22) {
        ensure(e <= 1e-3, || format!("{name} (f32): relative error {e:e}"))?;
        worst.1 = worst.1.max(e);
    }
    Ok(format!("worst relative error f64 {:.2e}, f32 {:.2e}", worst.0, worst.1))
}

fn copy_convergence() -> Outcome {
    let w = desk_world(&[("ca", Transform::Identity), ("cb", Transform::Identity)]);
    let mut r = desk_registry(&w, &["ca", "cb"], 1);
    let sched = TrainingSchedule::all_pairs([lang("ca"), lang("cb")].iter());
    let mut data = TrainingData::new(BUDGET, 2);
    for d in sched.directions() {
        w.add_direction(&mut data, &r, d);
    }
    let mut opt = optimizer();
    let report = train_joint(&mut r, &sched, &mut data, &mut opt, &stop(0.005), 2000).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for d in sched.directions() {
        let (_, acc, _) = score(&r, &w, d);
        out.push(format!("{d} acc {acc:.4}"));
        ensure(acc >= 0.99, || format!("{d}: token accuracy {acc:.4} after {} steps", report.steps))?;
    }
    Ok(format!("{} steps; {}", report.steps, out.join(", ")))
}

const JOINT: [&str; 3] = ["id", "ci", "sm"];

fn joint_world() -> World {
    desk_world(&[
        ("id", Transform::Identity),
        ("ci", Transform::SubstitutionCipher { seed: 5 }),
        ("sm", Transform::SuffixMarking { marker: "ro".into() }),
        ("rv", Transform::TokenReversal),
    ])
}

struct JointRun {
    registry: Registry,
    report: TrainingReport,
}

fn joint_run(w: &World) -> Result<JointRun, String> {
    let mut r = desk_registry(w, &JOINT, 3);
    let langs: Vec<LanguageId> = r.languages().cloned().collect();
    let sched = TrainingSchedule::all_pairs(&langs);
    let mut data = TrainingData::new(BUDGET, 4);
    for d in sched.directions() {
        w.add_direction(&mut data, &r, d);
    }
    let mut opt = optimizer();
    let report = train_joint(&mut r, &sched, &mut data, &mut opt, &stop(0.02), 10_000).map_err(|e| e.to_string())?;
    Ok(JointRun { registry: r, report })
}

fn joint_training(run: &JointRun, w: &World) -> Outcome {
    let mut out = Vec::new();
    for a in JOINT {
        for b in JOINT {
            if a == b {
                continue;
            }
            let d = dir(a, b);
            let (bl, _, _) = score(&run.registry, w, &d);
            out.push(format!("{d} {bl:.1}"));
            ensure(bl >= 80.0, || format!("{d}: BLEU {bl:.2} after {} steps", run.report.steps))?;
        }
    }
    Ok(format!("{} steps; BLEU {}", run.report.steps, out.join(", ")))
}

fn determinism(first: &JointRun, w: &World) -> Outcome {
    let second = joint_run(w)?;
    ensure(first.report.loss_trace == second.report.loss_trace, || "loss traces differ".into())?;
    ensure(first.registry.fingerprint() == second.registry.fingerprint(), || "final digests differ".into())?;
    Ok(format!("{} steps, {} parameters identical", first.report.steps, first.registry.parameter_count()))
}

struct Added {
    registry: Registry,
}

fn incremental_addition(mut r: Registry, w: &World) -> Result<(Added, String), String> {
    let before = r.fingerprint();
    let probes: BTreeMap<Direction, Vec<String>> = r
        .history()
        .iter()
        .map(|d| (d.clone(), score(&r, w, d).2))
        .collect();
    ensure(probes.len() == 6, || format!("{} trained directions", probes.len()))?;

    w.register(&mut r, "rv", &TransformerConfig::desk(0), TARGET_VOCAB);
    let (new, anchor) = (lang("rv"), lang("id"));
    let mut data = TrainingData::new(BUDGET, 6);
    w.add_direction(&mut data, &r, &dir("rv", "id"));
    w.add_direction(&mut data, &r, &dir("id", "rv"));
    let mut opt = optimizer();
    let enc = add_language_encoder(&mut r, &new, &anchor, &mut data, &mut opt, &stop(0.02), 4000)
        .map_err(|e| e.to_string())?;
    let mut opt = optimizer();
    let dec = add_language_decoder(&mut r, &new, &anchor, &mut data, &mut opt, &stop(0.02), 4000)
        .map_err(|e| e.to_string())?;

    let after = r.fingerprint();
    let drift: Vec<&String> = before.keys().filter(|k| before[*k] != after[*k]).collect();
    ensure(drift.is_empty(), || format!("(a) {} digests changed, first {}", drift.len(), drift[0]))?;
    for (d, old) in &probes {
        ensure(&score(&r, w, d).2 == old, || format!("(b) {d} translations changed"))?;
    }
    let mut out = Vec::new();
    for d in [dir("rv", "id"), dir("id", "rv")] {
        let (bl, _, _) = score(&r, w, &d);
        out.push(format!("{d} {bl:.1}"));
        ensure(bl >= 80.0, || format!("(c) {d}: BLEU {bl:.2}"))?;
    }
    let detail = format!(
        "{} digests unchanged, 6x{PROBE} probes identical, enc/dec phases {}/{} steps, BLEU {}",
        before.len(),
        enc.training.steps,
        dec.training.steps,
        out.join(", ")
    );
    Ok((Added { registry: r }, detail))
}

fn zero_shot(added: &Added, w: &World) -> Outcome {
    let r = &added.registry;
    let mut out = Vec::new();
    for tgt in ["ci", "sm"] {
        let d = dir("rv", tgt);
        ensure(!r.history().contains(&d), || format!("{d} was trained"))?;
        let (bl, acc, hyps) = score(r, w, &d);
        let vocab = r.tokenizer(&d.tgt).unwrap().vocab_size();
        let chance = 1.0 / vocab as f64;
        out.push(format!("{d} acc {acc:.3} ({:.0}x chance) BLEU {bl:.1}", acc / chance));
        ensure(acc >= 5.0 * chance, || format!("{d}: accuracy {acc:.4} below 5x chance {chance:.4}"))?;
        ensure(hyps.iter().any(|h| !h.is_empty()), || format!("{d}: every output empty"))?;
        ensure(
            hyps.iter().any(|h| h.split_whitespace().any(|t| t != UNK_TEXT)),
            || format!("{d}: every output unknown"),
        )?;
    }
    Ok(out.join("; "))
}

fn schedule_fidelity() -> Outcome {
    let w = World::new(
        &[
            ("aa", Transform::Identity),
            ("bb", Transform::TokenReversal),
            ("cc", Transform::SubstitutionCipher { seed: 1 }),
            ("dd", Transform::SuffixMarking { marker: "x".into() }),
        ],
        200,
        20,
        (2, 5),
        4,
    );
    let names = ["aa", "bb", "cc", "dd"];
    // Untied, so an encoder owns every parameter it uses.
    let mut cfg = tiny_config(0.1);
    cfg.tied_embeddings = false;
    cfg.tie_output_projection = false;
    let mut r = Registry::new(8);
    for l in names {
        w.register(&mut r, l, &cfg, 64);
    }
    let full = TrainingSchedule::all_pairs(r.languages().cloned().collect::<Vec<_>>().iter());
    let mut data = TrainingData::new(100, 1);
    for d in full.directions() {
        w.add_direction(&mut data, &r, d);
    }
    let expected: Vec<Direction> = names
        .iter()
        .flat_map(|a| names.iter().filter(move |b| *b != a).map(move |b| dir(a, b)))
        .collect();
    let mut opt = OptimizerState::new(AdamConfig::default()).unwrap();
    let visits: Vec<Direction> = multilingual_training_step(&mut r.clone(), &full, &mut data.clone(), &mut opt)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(d, _)| d)
        .collect();
    ensure(visits == expected, || format!("visit order {visits:?}"))?;

    // Without aa's outgoing directions the aa encoder must not move.
    let mut partial = full.clone();
    for b in ["bb", "cc", "dd"] {
        partial.remove(&dir("aa", b));
    }
    let mut r2 = r.clone();
    let enc_before = r2.role_fingerprint(&lang("aa"), modmt::transformer::Role::Encoder).unwrap();
    let mut opt = OptimizerState::new(AdamConfig::default()).unwrap();
    let visits = multilingual_training_step(&mut r2, &partial, &mut data.clone(), &mut opt).map_err(|e| e.to_string())?;
    ensure(visits.len() == 9, || format!("{} visits", visits.len()))?;
    ensure(
        r2.role_fingerprint(&lang("aa"), modmt::transformer::Role::Encoder).unwrap() == enc_before,
        || "removed directions changed the aa encoder".into(),
    )?;
    ensure(!r2.history().iter().any(|d| d.src == lang("aa")), || "removed direction recorded".into())?;
    Ok("12 visits in nested order; removed directions skipped with no parameter change".into())
}

fn lr_schedule() -> Outcome {
    for (step, want) in [(1u64, 2.5e-7), (2000, 5e-4), (4000, 1e-3), (16000, 5e-4)] {
        let got = lr_at(step, 0.001, 4000).map_err(|e| e.to_string())?;
        let closed = 0.001 * f64::min(step as f64 / 4000.0, (4000.0 / step as f64).sqrt());
        ensure(got == want && got == closed, || format!("step {step}: {got:e}, expected {want:e}"))?;
    }
    Ok("exact at steps 1, 2000, 4000, 16000".into())
}

fn bpe_correctness() -> Outcome {
    let toy: Vec<String> = TOY_CORPUS.iter().map(|s| s.to_string()).collect();
    let model = learn_bpe("toy", &toy, 120).map_err(|e| e.to_string())?;
    let oracle = brute_force_merges(&TOY_CORPUS, 120);
    ensure(model.merges() == oracle.as_slice(), || "merge list differs from brute force".into())?;
    let w = joint_world();
    let mut checked = 0;
    for l in JOINT.iter().chain(["rv"].iter()) {
        let l = lang(l);
        let model = learn_bpe(l.as_str(), &w.sentences(&l, Split::Train), TARGET_VOCAB).map_err(|e| e.to_string())?;
        let mut held = w.sentences(&l, Split::Test);
        held.extend(w.sentences(&l, Split::Valid));
        held.truncate(1000);
        for s in &held {
            let back = model.decode(&model.encode(s)).map_err(|e| e.to_string())?;
            ensure(&back == s, || format!("{l}: `{s}` came back as `{back}`"))?;
        }
        checked += held.len();
    }
    Ok(format!("{} merges match; {checked} held-out sentences round-trip", oracle.len()))
}

fn tied_accounting() -> Outcome {
    let w = joint_world();
    let mut counts = Vec::new();
    for (tied, tie_out) in [(true, true), (true, false), (false, false)] {
        let mut cfg = TransformerConfig::desk(0);
        cfg.tied_embeddings = tied;
        cfg.tie_output_projection = tie_out;
        let mut r = Registry::new(1);
        w.register(&mut r, "id", &cfg, TARGET_VOCAB);
        let m = r.modules(&lang("id")).unwrap();
        counts.push((m.buffer_count(), m.params().element_count(), m.config().vocab_size, m.config().model_dim));
    }
    let (v, d) = (counts[0].2, counts[0].3);
    ensure(counts[2].1 - counts[0].1 == 2 * v * d, || format!("untied minus tied elements {}", counts[2].1 - counts[0].1))?;
    ensure(counts[1].1 - counts[0].1 == v * d, || "output projection accounting".into())?;
    ensure(counts[2].0 - counts[0].0 == 2, || format!("buffer difference {}", counts[2].0 - counts[0].0))?;
    Ok(format!("V={v} d={d}: tied saves exactly {} values and 2 buffers", 2 * v * d))
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Outcome, failed: &mut u32) {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => println!("PASS {id:>2} {name} ({secs:.1}s): {detail}"),
        Err(detail) => {
            *failed += 1;
            println!("FAIL {id:>2} {name} ({secs:.1}s): {detail}");
        }
    }
}

fn main() {
    let mut failed = 0;
    run(1, "gradient integrity", gradient_integrity, &mut failed);
    run(2, "copy convergence", copy_convergence, &mut failed);

    let w = joint_world();
    let t = Instant::now();
    let first = joint_run(&w);
    let train_secs = t.elapsed().as_secs_f64();
    match &first {
        Ok(run_) => run(3, "joint multilingual training", || joint_training(run_, &w).map(|s| format!("{s}; trained in {train_secs:.0}s")), &mut failed),
        Err(e) => run(3, "joint multilingual training", || Err(e.clone()), &mut failed),
    }
    let added = match &first {
        Ok(run_) => {
            let mut added = None;
            run(
                4,
                "incremental addition",
                || {
                    let (a, detail) = incremental_addition(run_.registry.clone(), &w)?;
                    added = Some(a);
                    Ok(detail)
                },
                &mut failed,
            );
            added
        }
        Err(e) => {
            run(4, "incremental addition", || Err(format!("no joint run: {e}")), &mut failed);
            None
        }
    };
    match &added {
        Some(a) => run(5, "zero-shot composition", || zero_shot(a, &w), &mut failed),
        None => run(5, "zero-shot composition", || Err("no added language".into()), &mut failed),
    }
    run(6, "schedule fidelity", schedule_fidelity, &mut failed);
    run(7, "learning-rate schedule", lr_schedule, &mut failed);
    run(8, "bpe correctness", bpe_correctness, &mut failed);
    match &first {
        Ok(run_) => run(9, "determinism", || determinism(run_, &w), &mut failed),
        Err(e) => run(9, "determinism", || Err(format!("no joint run: {e}")), &mut failed),
    }
    run(10, "tied-embedding accounting", tied_accounting, &mut failed);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
