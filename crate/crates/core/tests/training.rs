mod support;

use modmt::corpus::{Split, Transform};
use modmt::registry::{Checkpoint, Registry};
use modmt::trainer::*;
use modmt::transformer::Role;
use modmt::ErrorKind;
use support::world::{dir, lang, tiny_config, World};

fn copy_world() -> World {
    World::new(&[("aa", Transform::Identity), ("bb", Transform::TokenReversal)], 400, 20, (2, 6), 3)
}

fn trained(seed: u64) -> (World, Registry, OptimizerState) {
    let w = World::new(
        &[
            ("aa", Transform::Identity),
            ("bb", Transform::SubstitutionCipher { seed: 2 }),
            ("cc", Transform::TokenReversal),
        ],
        400,
        20,
        (2, 6),
        seed,
    );
    let mut r = Registry::new(seed);
    for l in ["aa", "bb", "cc"] {
        w.register(&mut r, l, &tiny_config(0.1), 64);
    }
    let sched = TrainingSchedule::new([dir("aa", "bb"), dir("bb", "aa")]).unwrap();
    let mut data = TrainingData::new(120, seed);
    for d in sched.directions() {
        w.add_direction(&mut data, &r, d);
    }
    let mut opt = OptimizerState::new(AdamConfig {
        warmup: 20,
        ..AdamConfig::default()
    })
    .unwrap();
    let stop = StopCriterion {
        interval: 10,
        ..StopCriterion::default()
    };
    train_joint(&mut r, &sched, &mut data, &mut opt, &stop, 20).unwrap();
    (w, r, opt)
}

#[test]
fn loss_strictly_decreases_when_overfitting_one_batch() {
    let w = copy_world();
    let mut r = Registry::new(1);
    w.register(&mut r, "aa", &tiny_config(0.0), 32);
    let d = dir("aa", "aa");
    let pairs: Vec<(String, String)> = w.pairs(&d, Split::Train).into_iter().take(16).collect();
    let enc = TrainingData::encode_pairs(&r, &d, &pairs).unwrap();
    let mut data = TrainingData::new(10_000, 1);
    data.add_direction(d.clone(), enc, Vec::new()).unwrap();
    let sched = TrainingSchedule::new([d]).unwrap();
    let mut opt = OptimizerState::new(AdamConfig {
        warmup: 10,
        ..AdamConfig::default()
    })
    .unwrap();
    let mut last = f32::INFINITY;
    for step in 0..50 {
        let loss = multilingual_training_step(&mut r, &sched, &mut data, &mut opt).unwrap()[0].1;
        assert!(loss < last, "step {step}: {loss} after {last}");
        last = loss;
    }
}

#[test]
fn adding_a_language_in_both_roles_keeps_every_other_parameter() {
    let (w, mut r, _) = trained(5);
    let before = r.fingerprint();
    let mut data = TrainingData::new(120, 9);
    w.add_direction(&mut data, &r, &dir("cc", "aa"));
    w.add_direction(&mut data, &r, &dir("aa", "cc"));
    let stop = StopCriterion {
        interval: 5,
        ..StopCriterion::default()
    };
    let mut opt = OptimizerState::new(AdamConfig::default()).unwrap();
    let enc = add_language_encoder(&mut r, &lang("cc"), &lang("aa"), &mut data, &mut opt, &stop, 10).unwrap();
    assert_eq!(enc.changed_preexisting, 0);
    let after_enc = r.fingerprint();
    let dec = add_language_decoder(&mut r, &lang("cc"), &lang("aa"), &mut data, &mut opt, &stop, 10).unwrap();
    assert_eq!(dec.frozen, (lang("aa"), Role::Encoder));
    let after = r.fingerprint();
    for (name, digest) in &before {
        if !name.starts_with("cc/") {
            assert_eq!(&after[name], digest, "{name}");
        }
    }
    // The decoder phase leaves the freshly trained encoder alone too.
    for name in r.role_fingerprint(&lang("cc"), Role::Encoder).unwrap().keys() {
        assert_eq!(after[name], after_enc[name], "{name}");
    }
    assert!(r.history().contains(&dir("cc", "aa")));
    assert!(r.history().contains(&dir("aa", "cc")));
    assert!(!r.history().contains(&dir("cc", "bb")));
}

#[test]
fn frozen_modules_stay_frozen_under_later_joint_training() {
    let (w, mut r, mut opt) = trained(6);
    r.freeze(&lang("aa"), Role::Decoder).unwrap();
    let frozen = r.role_fingerprint(&lang("aa"), Role::Decoder).unwrap();
    let sched = TrainingSchedule::all_pairs([lang("aa"), lang("bb")].iter());
    let mut data = TrainingData::new(120, 2);
    for d in sched.directions() {
        w.add_direction(&mut data, &r, d);
    }
    for _ in 0..5 {
        multilingual_training_step(&mut r, &sched, &mut data, &mut opt).unwrap();
    }
    assert_eq!(r.role_fingerprint(&lang("aa"), Role::Decoder).unwrap(), frozen);
}

#[test]
fn add_language_rejects_self_anchor_and_untrained_anchor() {
    let (w, mut r, mut opt) = trained(7);
    let mut data = TrainingData::new(120, 9);
    w.add_direction(&mut data, &r, &dir("cc", "aa"));
    let stop = StopCriterion::default();
    let e = add_language_encoder(&mut r, &lang("cc"), &lang("cc"), &mut data, &mut opt, &stop, 1).unwrap_err();
    assert_eq!(e.kind(), ErrorKind::Config);
    let e = add_language_encoder(&mut r, &lang("aa"), &lang("cc"), &mut data, &mut opt, &stop, 1).unwrap_err();
    assert_eq!(e.kind(), ErrorKind::Config);
    let e = add_language_encoder(&mut r, &lang("zz"), &lang("aa"), &mut data, &mut opt, &stop, 1).unwrap_err();
    assert!(matches!(e, modmt::Error::UnknownLanguage(_)));
}

#[test]
fn checkpoint_file_round_trip_preserves_translations() {
    let (w, r, opt) = trained(8);
    let dir_ = tempfile::tempdir().unwrap();
    let path = dir_.path().join("run.ckpt");
    let mut ck = Checkpoint::new(r.clone());
    ck.optimizer = Some(opt.clone());
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.registry.fingerprint(), r.fingerprint());
    assert_eq!(back.registry.history(), r.history());
    assert_eq!(back.optimizer.as_ref(), Some(&opt));
    let src: Vec<String> = w.sentences(&lang("aa"), Split::Test).into_iter().take(10).collect();
    let a = modmt::eval::translate(&r, &lang("aa"), &lang("bb"), &src, 20).unwrap();
    let b = modmt::eval::translate(&back.registry, &lang("aa"), &lang("bb"), &src, 20).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_shot_pairs_decode_through_the_same_path() {
    let (w, r, _) = trained(9);
    let src: Vec<String> = w.sentences(&lang("cc"), Split::Test).into_iter().take(5).collect();
    let out = modmt::eval::translate(&r, &lang("cc"), &lang("aa"), &src, 12).unwrap();
    assert_eq!(out.len(), 5);
    let same = modmt::eval::translate(&r, &lang("aa"), &lang("aa"), &src, 12).unwrap();
    assert_eq!(same.len(), 5);
}
