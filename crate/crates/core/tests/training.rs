//! End-to-end training behaviour on small synthetic datasets.

use std::path::PathBuf;
use std::sync::OnceLock;

use nirvis::datamodel::{subset, DatasetManifest, RecordFilter, Split};
use nirvis::embedder::{embed, load_checkpoint, save_checkpoint, BackboneConfig, Checkpoint, ClassifierRole, Phase};
use nirvis::heads::{mean_classifier_init, subspace_extract};
use nirvis::preprocess::{load_tensors, PreprocessConfig};
use nirvis::synthgen::{generate, SynthConfig};
use nirvis::trainer::{
    classification_accuracy, finetune, manifest_labels, pretrain, source_classifier, steps_per_epoch, ClassifierInit,
    Regime, TrainConfig,
};
use nirvis::Error;

struct Fixture {
    _dir: tempfile::TempDir,
    source: DatasetManifest,
    target: DatasetManifest,
    source_only: Checkpoint,
    joint: Checkpoint,
}

fn synth() -> SynthConfig {
    SynthConfig {
        n_source_ids: 6,
        n_target_ids: 3,
        source_samples_per_id: 6,
        samples_per_id_per_modality: 6,
        gallery_per_id: 1,
        probe_per_id: 1,
        image_size: 16,
        seed: 3,
        ..SynthConfig::default()
    }
}

fn backbone() -> BackboneConfig {
    BackboneConfig {
        embed_dim: 16,
        width: 4,
        depth: 0,
        blocks: 2,
        input_size: 16,
    }
}

fn pretrain_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_source: 8,
        seed: 5,
        ..TrainConfig::desk(Phase::Pretrain)
    }
}

fn finetune_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_target: 5,
        batch_source: 4,
        lr_decay_epochs: vec![2],
        seed: 9,
        ..TrainConfig::desk(Phase::Finetune)
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let (source, target) = generate(&synth(), dir.path()).unwrap();
        let source_only = pretrain(&pretrain_cfg(), &backbone(), &source, None).unwrap().checkpoint;
        let joint = pretrain(&pretrain_cfg(), &backbone(), &source, Some(&target)).unwrap().checkpoint;
        Fixture {
            _dir: dir,
            source,
            target,
            source_only,
            joint,
        }
    })
}

fn target_train(f: &Fixture) -> DatasetManifest {
    subset(&f.target, &RecordFilter::split(Split::Train)).unwrap()
}

#[test]
fn pretrain_is_deterministic() {
    let f = fixture();
    let a = pretrain(&pretrain_cfg(), &backbone(), &f.source, None).unwrap();
    let b = pretrain(&pretrain_cfg(), &backbone(), &f.source, None).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.checkpoint, f.source_only);
    assert!(a.trajectory.iter().all(|l| l.is_finite()));
}

#[test]
fn joint_pretrain_spans_both_identity_spaces() {
    let f = fixture();
    let joint = f.joint.classifier(ClassifierRole::Joint).unwrap();
    assert_eq!(joint.num_classes(), f.source.num_classes() + f.target.num_classes());
    let map = f.joint.joint_map.as_ref().unwrap();
    assert_eq!((map.num_source(), map.num_target()), (6, 3));
    assert!(f.source_only.classifier(ClassifierRole::Source).is_some());
    assert!(f.source_only.joint_map.is_none());
}

#[test]
fn lambda_zero_ignores_source_stream() {
    let f = fixture();
    let regime = Regime::new(ClassifierInit::Mean, 0.0);
    let with = finetune(&finetune_cfg(), &f.source_only, &f.target, Some(&f.source), &regime).unwrap();
    let without = finetune(&finetune_cfg(), &f.source_only, &f.target, None, &regime).unwrap();
    assert_eq!(with.trajectory, without.trajectory);
    assert_eq!(with.checkpoint.backbone, without.checkpoint.backbone);
}

#[test]
fn source_stream_matters_when_lambda_positive() {
    let f = fixture();
    let zero = finetune(&finetune_cfg(), &f.source_only, &f.target, Some(&f.source), &Regime::new(ClassifierInit::Mean, 0.0))
        .unwrap();
    let one = finetune(&finetune_cfg(), &f.source_only, &f.target, Some(&f.source), &Regime::new(ClassifierInit::Mean, 1.0))
        .unwrap();
    assert_ne!(zero.checkpoint.backbone, one.checkpoint.backbone);
    assert!(one.metrics.iter().all(|m| m.loss_source.is_some()));
    assert!(zero.metrics.iter().all(|m| m.loss_source.is_none()));
}

#[test]
fn mean_classifier_stays_equal_to_its_initialization() {
    let f = fixture();
    let part = target_train(f);
    let images = load_tensors(&part, &PreprocessConfig::with_crop_size(16)).unwrap();
    let e = embed(&f.source_only.backbone, &images, true).unwrap();
    let labels = manifest_labels(&part, &part.identity_index).unwrap();
    let expected = mean_classifier_init(e.vectors.view(), &labels, &part.identity_index).unwrap();
    for lambda in [0.0, 1.0] {
        let out = finetune(&finetune_cfg(), &f.source_only, &f.target, Some(&f.source), &Regime::new(ClassifierInit::Mean, lambda))
            .unwrap();
        let tuned = out.checkpoint.classifier(ClassifierRole::Target).unwrap();
        assert_eq!(tuned.matrix, expected.matrix, "lambda {lambda}");
        assert!(tuned.frozen);
        let source_before = f.source_only.classifier(ClassifierRole::Source).unwrap();
        assert_eq!(out.checkpoint.classifier(ClassifierRole::Source).unwrap().matrix, source_before.matrix);
    }
}

#[test]
fn subspace_classifiers_stay_frozen() {
    let f = fixture();
    let joint = f.joint.classifier(ClassifierRole::Joint).unwrap();
    let expected = subspace_extract(joint, f.joint.joint_map.as_ref().unwrap()).unwrap();
    let source_expected = source_classifier(&f.joint).unwrap().unwrap();
    for lambda in [0.0, 1.0] {
        let out = finetune(&finetune_cfg(), &f.joint, &f.target, Some(&f.source), &Regime::new(ClassifierInit::Subspace, lambda))
            .unwrap();
        let c = &out.checkpoint;
        assert_eq!(c.classifier(ClassifierRole::Target).unwrap().matrix, expected.matrix);
        assert_eq!(c.classifier(ClassifierRole::Joint).unwrap().matrix, joint.matrix);
        if lambda > 0.0 {
            assert_eq!(c.classifier(ClassifierRole::Source).unwrap().matrix, source_expected.matrix);
        }
    }
}

#[test]
fn naive_classifier_is_trained() {
    let f = fixture();
    let out = finetune(&finetune_cfg(), &f.source_only, &f.target, None, &Regime::new(ClassifierInit::Naive, 0.0)).unwrap();
    let c = out.checkpoint.classifier(ClassifierRole::Target).unwrap();
    assert!(!c.frozen);
    c.check_unit_columns().unwrap();
}

#[test]
fn rct_changes_the_trajectory() {
    let f = fixture();
    let plain = finetune(&finetune_cfg(), &f.source_only, &f.target, None, &Regime::new(ClassifierInit::Mean, 0.0)).unwrap();
    let rct = finetune(
        &finetune_cfg(),
        &f.source_only,
        &f.target,
        None,
        &Regime::new(ClassifierInit::Mean, 0.0).with_rct(10.0),
    )
    .unwrap();
    // The penalty is zero at the first step and positive afterwards.
    assert_eq!(plain.trajectory[0], rct.trajectory[0]);
    assert_ne!(plain.checkpoint.backbone, rct.checkpoint.backbone);
}

#[test]
fn epoch_is_one_pass_over_target_train() {
    let f = fixture();
    let n = target_train(f).records.len();
    let cfg = finetune_cfg();
    let out = finetune(&cfg, &f.source_only, &f.target, Some(&f.source), &Regime::new(ClassifierInit::Mean, 1.0)).unwrap();
    assert_eq!(n, 3 * 2 * 4);
    assert_eq!(out.trajectory.len(), cfg.epochs * steps_per_epoch(n, cfg.batch_target));
    assert_eq!(out.metrics.last().unwrap().step, out.trajectory.len());
    assert!(out.trajectory.iter().all(|l| l.is_finite()));
}

#[test]
fn regime_preconditions_fail_before_training() {
    let f = fixture();
    let cfg = finetune_cfg();
    let cases: Vec<(Regime, &Checkpoint, Option<&DatasetManifest>)> = vec![
        (Regime::new(ClassifierInit::Naive, 1.0), &f.source_only, Some(&f.source)),
        (Regime::new(ClassifierInit::Subspace, 0.0), &f.source_only, None),
        (Regime::new(ClassifierInit::Mean, 1.0), &f.source_only, None),
        (Regime::new(ClassifierInit::Mean, 0.0).with_rct(-1.0), &f.source_only, None),
    ];
    for (regime, ckpt, source) in cases {
        let err = finetune(&cfg, ckpt, &f.target, source, &regime).unwrap_err();
        assert!(matches!(err, Error::Regime(_)), "{regime}: {err}");
    }
    let err = finetune(&cfg, &f.source_only, &f.target, None, &Regime::new(ClassifierInit::Mean, -0.5)).unwrap_err();
    assert!(matches!(err, Error::NegativeLambda(_)));

    // A joint checkpoint trained on other target identities cannot serve subspace.
    let dir = tempfile::tempdir().unwrap();
    let other = generate(
        &SynthConfig {
            target_name: "other".into(),
            ..synth()
        },
        dir.path(),
    )
    .unwrap()
    .1;
    let err = finetune(&cfg, &f.joint, &other, None, &Regime::new(ClassifierInit::Subspace, 0.0)).unwrap_err();
    assert!(err.to_string().contains("not part of joint pre-training"), "{err}");
}

#[test]
fn finetuned_checkpoint_round_trips() {
    let f = fixture();
    let out = finetune(&finetune_cfg(), &f.joint, &f.target, Some(&f.source), &Regime::new(ClassifierInit::Subspace, 1.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path: PathBuf = dir.path().join("ckpt");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.phase, Phase::Finetune);
}

/// Source-only pre-training with the desk preset, given a 60-epoch budget,
/// fits the training split of the default synthetic source (40 identities).
#[test]
fn desk_pretrain_fits_source_identities() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let (source, _) = generate(&cfg, dir.path()).unwrap();
    let bb = BackboneConfig {
        input_size: cfg.image_size,
        ..BackboneConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 60,
        ..TrainConfig::desk(Phase::Pretrain)
    };
    let out = pretrain(&cfg, &bb, &source, None).unwrap();
    let part = subset(&source, &RecordFilter::split(Split::Train)).unwrap();
    let images = load_tensors(&part, &PreprocessConfig::with_crop_size(bb.input_size)).unwrap();
    let e = embed(&out.checkpoint.backbone, &images, true).unwrap();
    let classifier = out.checkpoint.classifier(ClassifierRole::Source).unwrap();
    let labels = manifest_labels(&part, &classifier.identity_map).unwrap();
    let accuracy = classification_accuracy(classifier, &e.vectors, &labels);
    eprintln!("desk pretrain train accuracy {accuracy:.4}");
    assert!(accuracy >= 0.95, "train accuracy {accuracy}");
}
