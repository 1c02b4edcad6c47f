//! Pre-training and fine-tuning loops.
//!
//! Every random stream (initialization, shuffles, augmentation draws, source
//! cycling) is seeded independently from the run seed, and all gradient
//! reductions happen in a fixed order, so a run is a pure function of its
//! config and inputs.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, Augmenter};
use crate::datamodel::{merge_identity_spaces, subset, DatasetManifest, IdentityIndex, RecordFilter, Split};
use crate::embedder::{embed, Backbone, BackboneConfig, Checkpoint, ClassifierRole, ParamStore, Phase};
use crate::error::{Error, Result};
use crate::heads::{
    arcface_loss, arcface_loss_weighted, joint_finetune_loss, mean_classifier_init, mean_classifier_init_stratified,
    rct_gradient, rct_penalty, source_block_extract, subspace_extract, ClassifierWeights, MarginConfig,
};
use crate::preprocess::{load_tensors, PreprocessConfig};
use crate::synthgen::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// `lr_init * factor^k`, `k` = number of decay epochs `<= epoch`.
    Step,
    /// Half-cosine from `lr_init` at epoch 1 towards zero.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub lr_init: f64,
    pub schedule: LrSchedule,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_target: usize,
    pub batch_source: usize,
    pub momentum: f64,
    /// Applied to backbone parameters only.
    pub weight_decay: f64,
    pub margin: MarginConfig,
    /// Red-channel replication on training batches.
    pub red_aug: bool,
    pub augment: AugmentConfig,
    /// Pre-training only: weight of source samples relative to target
    /// samples in the joint loss (1 = plain joint softmax).
    pub lambda: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Large-scale schedule: 24 cosine epochs at batch 512 for pre-training;
    /// 20 epochs from 1e-4 with 0.1 decays at 10/15/20 for fine-tuning.
    pub fn reference(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => TrainConfig {
                phase,
                epochs: 24,
                lr_init: 0.1,
                schedule: LrSchedule::Cosine,
                lr_decay_epochs: Vec::new(),
                lr_decay_factor: 0.1,
                batch_target: 64,
                batch_source: 512,
                momentum: 0.9,
                weight_decay: 5e-4,
                margin: MarginConfig::PRETRAIN,
                red_aug: true,
                augment: AugmentConfig::default(),
                lambda: 1.0,
                seed: 0,
            },
            Phase::Finetune => TrainConfig {
                phase,
                epochs: 20,
                lr_init: 1e-4,
                schedule: LrSchedule::Step,
                lr_decay_epochs: vec![10, 15, 20],
                lr_decay_factor: 0.1,
                batch_target: 64,
                batch_source: 512,
                momentum: 0.9,
                weight_decay: 5e-4,
                margin: MarginConfig::FINETUNE,
                red_aug: false,
                augment: AugmentConfig::default(),
                lambda: 1.0,
                seed: 0,
            },
        }
    }

    /// Small batches and a larger step size, sized for the synthetic datasets.
    pub fn desk(phase: Phase) -> Self {
        let base = TrainConfig::reference(phase);
        match phase {
            Phase::Pretrain => TrainConfig {
                epochs: 30,
                lr_init: 0.02,
                batch_target: 16,
                batch_source: 32,
                margin: MarginConfig {
                    margin: 0.5,
                    scale: 16.0,
                },
                ..base
            },
            Phase::Finetune => TrainConfig {
                lr_init: 0.02,
                batch_target: 16,
                batch_source: 16,
                margin: MarginConfig {
                    margin: 0.6,
                    scale: 16.0,
                },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_target == 0 || self.batch_source == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad(format!("lr_init must be positive, got {}", self.lr_init));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] <= w[1]) {
            return bad("lr_decay_epochs must be sorted ascending".into());
        }
        if self.lr_decay_epochs.last().is_some_and(|&e| e > self.epochs) {
            return bad(format!("lr_decay_epochs must not exceed epochs ({})", self.epochs));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.lr_decay_factor <= 0.0 {
            return bad("momentum must lie in [0, 1), weight_decay >= 0, lr_decay_factor > 0".into());
        }
        if self.lambda < 0.0 || self.lambda.is_nan() {
            return Err(Error::NegativeLambda(self.lambda));
        }
        self.margin.validate()?;
        self.augment.validate()
    }
}

/// Learning rate for a 1-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.schedule {
        LrSchedule::Step => {
            let k = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
            cfg.lr_init * cfg.lr_decay_factor.powi(k as i32)
        }
        LrSchedule::Cosine => {
            let progress = epoch.saturating_sub(1) as f64 / cfg.epochs as f64;
            cfg.lr_init * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierInit {
    /// Random classifier, trained end-to-end with the backbone.
    Naive,
    /// Frozen per-identity mean embeddings of the pre-trained backbone.
    Mean,
    /// Frozen target block of the joint pre-training classifier.
    Subspace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    /// L2 drift penalty towards the pre-trained backbone.
    Rct,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($variant:path => $word:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $word),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", $what, " `{}` (allowed: {})"),
                        other,
                        [$($word),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(ClassifierInit, "classifier", ClassifierInit::Naive => "naive", ClassifierInit::Mean => "mean", ClassifierInit::Subspace => "subspace");
keyword_enum!(Regularizer, "regularizer", Regularizer::None => "none", Regularizer::Rct => "rct");
keyword_enum!(LrSchedule, "schedule", LrSchedule::Step => "step", LrSchedule::Cosine => "cosine");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub classifier: ClassifierInit,
    pub regularizer: Regularizer,
    /// Weight of the source classification loss.
    pub lambda: f64,
    pub rct_weight: f64,
    /// Mean init from modality-balanced class means.
    pub stratified_mean: bool,
}

impl Regime {
    pub fn new(classifier: ClassifierInit, lambda: f64) -> Self {
        Regime {
            classifier,
            regularizer: Regularizer::None,
            lambda,
            rct_weight: 1.0,
            stratified_mean: false,
        }
    }

    pub fn with_rct(self, weight: f64) -> Self {
        Regime {
            regularizer: Regularizer::Rct,
            rct_weight: weight,
            ..self
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/lambda={}", self.classifier, self.regularizer, self.lambda)
    }
}

/// One line of the metrics log, averaged over an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: usize,
    pub loss_target: f64,
    pub loss_source: Option<f64>,
    pub lambda: f64,
    pub lr: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    /// Total loss of every optimizer step, in order.
    pub trajectory: Vec<f64>,
}

const INIT_TAG: u64 = 11;
const CLASSIFIER_TAG: u64 = 12;
const SHUFFLE_TAG: u64 = 13;
const AUGMENT_TAG: u64 = 14;
const SOURCE_STREAM_TAG: u64 = 15;
const SOURCE_AUGMENT_TAG: u64 = 16;

fn augmenter(cfg: &TrainConfig, tag: u64) -> Augmenter {
    let augment = AugmentConfig {
        rng_seed: derive_seed(cfg.seed, &[tag]),
        ..cfg.augment
    };
    Augmenter::new(augment, cfg.red_aug)
}

struct Labelled {
    images: Vec<Array3<f32>>,
    labels: Vec<usize>,
}

fn load_split(manifest: &DatasetManifest, split: Split, input_size: usize) -> Result<(DatasetManifest, Vec<Array3<f32>>)> {
    let part = subset(manifest, &RecordFilter::split(split))?;
    let images = load_tensors(&part, &PreprocessConfig::with_crop_size(input_size))?;
    Ok((part, images))
}

fn labels_for(part: &DatasetManifest, lookup: impl Fn(&str) -> Option<usize>) -> Result<Vec<usize>> {
    part.records
        .iter()
        .map(|r| {
            lookup(&r.identity).ok_or_else(|| Error::Regime(format!("identity `{}` has no classifier column", r.identity)))
        })
        .collect()
}

/// SGD with momentum over backbone and (optionally) one classifier.
struct Sgd {
    momentum: f32,
    weight_decay: f32,
    velocity: ParamStore,
    classifier_velocity: Option<Array2<f64>>,
}

impl Sgd {
    fn new(cfg: &TrainConfig, params: &ParamStore, classifier: Option<&ClassifierWeights>) -> Self {
        Sgd {
            momentum: cfg.momentum as f32,
            weight_decay: cfg.weight_decay as f32,
            velocity: params.zeros_like(),
            classifier_velocity: classifier.map(|c| Array2::zeros(c.matrix.raw_dim())),
        }
    }

    fn step_backbone(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        let (mu, wd, lr) = (self.momentum, self.weight_decay, lr as f32);
        for i in 0..params.len() {
            let v = self.velocity.tensor_mut(i);
            let g = grads.tensor(i);
            let p = params.tensor_mut(i);
            ndarray::Zip::from(v).and(&mut *p).and(g).for_each(|v, p, &g| {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            });
        }
    }

    fn step_classifier(&mut self, classifier: &mut ClassifierWeights, grad: &Array2<f64>, lr: f64) -> Result<()> {
        let v = self.classifier_velocity.as_mut().expect("classifier velocity");
        let mu = f64::from(self.momentum);
        ndarray::Zip::from(&mut *v).and(&mut classifier.matrix).and(grad).for_each(|v, w, &g| {
            *v = mu * *v + g;
            *w -= lr * *v;
        });
        classifier.renormalize()
    }
}

fn augment_batch(aug: &mut Augmenter, images: &[Array3<f32>], idx: &[usize]) -> Vec<Array3<f32>> {
    idx.iter().map(|&i| aug.apply(images[i].view())).collect()
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, step, loss })
    }
}

fn config_snapshot(cfg: &TrainConfig, backbone: &BackboneConfig, regime: Option<&Regime>) -> serde_json::Value {
    serde_json::json!({ "train": cfg, "backbone": backbone, "regime": regime })
}

/// Trains backbone and classifier from scratch on the source train split,
/// optionally pooled with the target train split under a joint identity
/// space (source labels first).
pub fn pretrain(
    cfg: &TrainConfig,
    backbone_cfg: &BackboneConfig,
    source: &DatasetManifest,
    target: Option<&DatasetManifest>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    backbone_cfg.validate()?;
    let (src_part, src_images) = load_split(source, Split::Train, backbone_cfg.input_size)?;

    let (role, ids, joint_map, data, is_source) = match target {
        Some(target) => {
            let (tgt_part, tgt_images) = load_split(target, Split::Train, backbone_cfg.input_size)?;
            let map = merge_identity_spaces(source, target);
            let mut labels = labels_for(&src_part, |id| map.source_label(id))?;
            labels.extend(labels_for(&tgt_part, |id| map.target_label(id))?);
            let mut is_source = vec![true; src_images.len()];
            is_source.resize(src_images.len() + tgt_images.len(), false);
            let mut images = src_images;
            images.extend(tgt_images);
            let ids = map.joint_index().clone();
            (ClassifierRole::Joint, ids, Some(map), Labelled { images, labels }, is_source)
        }
        None => {
            let ids = source.identity_index.clone();
            let labels = labels_for(&src_part, |id| ids.label(id))?;
            let n = src_images.len();
            (
                ClassifierRole::Source,
                ids,
                None,
                Labelled {
                    images: src_images,
                    labels,
                },
                vec![true; n],
            )
        }
    };
    let weights: Option<Vec<f64>> = (joint_map.is_some() && cfg.lambda != 1.0)
        .then(|| is_source.iter().map(|&s| if s { cfg.lambda } else { 1.0 }).collect());

    let mut backbone = Backbone::new(backbone_cfg.clone(), derive_seed(cfg.seed, &[INIT_TAG]))?;
    let mut classifier = ClassifierWeights::random(
        backbone_cfg.embed_dim,
        ids.iter(),
        derive_seed(cfg.seed, &[CLASSIFIER_TAG]),
    )?;
    let mut sgd = Sgd::new(cfg, backbone.params(), Some(&classifier));
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SHUFFLE_TAG]));
    let mut aug = augmenter(cfg, AUGMENT_TAG);

    let n = data.images.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut trajectory = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut acc_sum, mut steps) = (0.0, 0.0, 0);
        for batch in order.chunks(cfg.batch_source) {
            let images = augment_batch(&mut aug, &data.images, batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let batch_weights: Option<Vec<f64>> = weights.as_ref().map(|w| batch.iter().map(|&i| w[i]).collect());
            let pass = backbone.forward_train(&images)?;
            let out = arcface_loss_weighted(
                pass.embeddings.view(),
                &classifier,
                &labels,
                batch_weights.as_deref(),
                &cfg.margin,
            )?;
            step += 1;
            check_finite(out.loss, epoch, step)?;
            let grads = backbone.backward(&pass, &out.grad_embeddings);
            sgd.step_backbone(backbone.params_mut(), &grads, lr);
            sgd.step_classifier(&mut classifier, &out.grad_classifier, lr)?;
            trajectory.push(out.loss);
            loss_sum += out.loss;
            acc_sum += out.accuracy;
            steps += 1;
        }
        let record = MetricsRecord {
            phase: Phase::Pretrain,
            epoch,
            step,
            loss_target: loss_sum / steps as f64,
            loss_source: None,
            lambda: cfg.lambda,
            lr,
            train_accuracy: acc_sum / steps as f64,
        };
        log::debug!("pretrain epoch {epoch}: loss {:.4} acc {:.3}", record.loss_target, record.train_accuracy);
        metrics.push(record);
    }

    let mut checkpoint = Checkpoint::new(backbone, Phase::Pretrain);
    checkpoint.epoch = cfg.epochs;
    checkpoint.config = config_snapshot(cfg, backbone_cfg, None);
    checkpoint.joint_map = joint_map;
    checkpoint.classifiers.insert(role, classifier);
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        trajectory,
    })
}

/// Frozen source classifier available in `ckpt`, if any.
pub fn source_classifier(ckpt: &Checkpoint) -> Option<Result<ClassifierWeights>> {
    if let Some(c) = ckpt.classifier(ClassifierRole::Source) {
        let mut c = c.clone();
        c.frozen = true;
        return Some(Ok(c));
    }
    match (ckpt.classifier(ClassifierRole::Joint), &ckpt.joint_map) {
        (Some(joint), Some(map)) => Some(source_block_extract(joint, map)),
        _ => None,
    }
}

/// Infinite shuffled cycle over source samples, independent of target epochs.
struct SourceStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl SourceStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        SourceStream { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

struct SourceBranch {
    data: Labelled,
    classifier: ClassifierWeights,
    stream: SourceStream,
    aug: Augmenter,
}

/// Fine-tunes `ckpt` on the target train split. All regime preconditions are
/// checked before the first step.
pub fn finetune(
    cfg: &TrainConfig,
    ckpt: &Checkpoint,
    target: &DatasetManifest,
    source: Option<&DatasetManifest>,
    regime: &Regime,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ckpt.validate()?;
    if regime.lambda < 0.0 || !regime.lambda.is_finite() {
        return Err(Error::NegativeLambda(regime.lambda));
    }
    if regime.regularizer == Regularizer::Rct && !(regime.rct_weight >= 0.0 && regime.rct_weight.is_finite()) {
        return Err(Error::Regime(format!("rct_weight must be >= 0, got {}", regime.rct_weight)));
    }
    if regime.classifier == ClassifierInit::Naive && regime.lambda > 0.0 {
        return Err(Error::Regime(
            "naive fine-tuning trains on target data only; lambda must be 0".into(),
        ));
    }
    let input_size = ckpt.backbone.config().input_size;
    let (tgt_part, tgt_images) = load_split(target, Split::Train, input_size)?;
    let target_ids = tgt_part.identity_index.clone();

    let mut classifier = match regime.classifier {
        ClassifierInit::Naive => {
            ClassifierWeights::random(ckpt.backbone.embed_dim(), target_ids.iter(), derive_seed(cfg.seed, &[CLASSIFIER_TAG]))?
        }
        ClassifierInit::Subspace => {
            let (joint, map) = match (ckpt.classifier(ClassifierRole::Joint), &ckpt.joint_map) {
                (Some(j), Some(m)) => (j, m),
                _ => {
                    return Err(Error::Regime(
                        "subspace classifier requires a checkpoint pre-trained with target identities".into(),
                    ))
                }
            };
            let sub = subspace_extract(joint, map)?;
            if let Some(missing) = target_ids.iter().find(|id| sub.identity_map.label(id).is_none()) {
                return Err(Error::Regime(format!(
                    "target identity `{missing}` was not part of joint pre-training"
                )));
            }
            sub
        }
        ClassifierInit::Mean => {
            let e = embed(&ckpt.backbone, &tgt_images, true)?;
            let labels = labels_for(&tgt_part, |id| target_ids.label(id))?;
            if regime.stratified_mean {
                let groups: Vec<usize> = tgt_part.records.iter().map(|r| r.modality as usize).collect();
                mean_classifier_init_stratified(e.vectors.view(), &labels, &groups, &target_ids)?
            } else {
                mean_classifier_init(e.vectors.view(), &labels, &target_ids)?
            }
        }
    };
    let target_labels = labels_for(&tgt_part, |id| classifier.identity_map.label(id))?;

    let mut source_branch = if regime.lambda > 0.0 {
        let source = source.ok_or_else(|| Error::Regime("lambda > 0 requires a source manifest".into()))?;
        let src_classifier = source_classifier(ckpt)
            .ok_or_else(|| Error::Regime("lambda > 0 requires a source classifier in the checkpoint".into()))??;
        let (src_part, src_images) = load_split(source, Split::Train, input_size)?;
        let labels = labels_for(&src_part, |id| src_classifier.identity_map.label(id))?;
        Some(SourceBranch {
            stream: SourceStream::new(src_images.len(), derive_seed(cfg.seed, &[SOURCE_STREAM_TAG])),
            aug: augmenter(cfg, SOURCE_AUGMENT_TAG),
            data: Labelled {
                images: src_images,
                labels,
            },
            classifier: src_classifier,
        })
    } else {
        None
    };

    let mut backbone = ckpt.backbone.clone();
    let snapshot = backbone.params().clone();
    let mut sgd = Sgd::new(cfg, backbone.params(), (!classifier.frozen).then_some(&classifier));
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SHUFFLE_TAG]));
    let mut aug = augmenter(cfg, AUGMENT_TAG);

    let n = tgt_images.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut trajectory = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut shuffle);
        let (mut lt_sum, mut ls_sum, mut acc_sum, mut steps) = (0.0, 0.0, 0.0, 0);
        for batch in order.chunks(cfg.batch_target) {
            step += 1;
            let images = augment_batch(&mut aug, &tgt_images, batch);
            let labels: Vec<usize> = batch.iter().map(|&i| target_labels[i]).collect();
            let pass = backbone.forward_train(&images)?;
            let out = arcface_loss(pass.embeddings.view(), &classifier, &labels, &cfg.margin)?;
            check_finite(out.loss, epoch, step)?;
            let mut grads = backbone.backward(&pass, &out.grad_embeddings);

            let mut l_source = 0.0;
            if let Some(branch) = source_branch.as_mut() {
                let idx = branch.stream.next_batch(cfg.batch_source);
                let images = augment_batch(&mut branch.aug, &branch.data.images, &idx);
                let labels: Vec<usize> = idx.iter().map(|&i| branch.data.labels[i]).collect();
                let pass = backbone.forward_train(&images)?;
                let out_s = arcface_loss(pass.embeddings.view(), &branch.classifier, &labels, &cfg.margin)?;
                check_finite(out_s.loss, epoch, step)?;
                grads.add_scaled(regime.lambda as f32, &backbone.backward(&pass, &out_s.grad_embeddings));
                l_source = out_s.loss;
            }
            let mut breakdown = joint_finetune_loss(out.loss, l_source, regime.lambda)?;
            if regime.regularizer == Regularizer::Rct {
                let penalty = regime.rct_weight * rct_penalty(backbone.params(), &snapshot)?;
                grads.add_scaled(1.0, &rct_gradient(backbone.params(), &snapshot, regime.rct_weight)?);
                breakdown = breakdown.with_rct(penalty);
            }
            check_finite(breakdown.l_total, epoch, step)?;

            sgd.step_backbone(backbone.params_mut(), &grads, lr);
            if !classifier.frozen {
                sgd.step_classifier(&mut classifier, &out.grad_classifier, lr)?;
            }
            trajectory.push(breakdown.l_total);
            lt_sum += out.loss;
            ls_sum += l_source;
            acc_sum += out.accuracy;
            steps += 1;
        }
        let record = MetricsRecord {
            phase: Phase::Finetune,
            epoch,
            step,
            loss_target: lt_sum / steps as f64,
            loss_source: source_branch.is_some().then(|| ls_sum / steps as f64),
            lambda: regime.lambda,
            lr,
            train_accuracy: acc_sum / steps as f64,
        };
        log::debug!("finetune epoch {epoch}: target loss {:.4}", record.loss_target);
        metrics.push(record);
    }

    let mut checkpoint = Checkpoint::new(backbone, Phase::Finetune);
    checkpoint.epoch = cfg.epochs;
    checkpoint.config = config_snapshot(cfg, ckpt.backbone.config(), Some(regime));
    checkpoint.joint_map = ckpt.joint_map.clone();
    checkpoint.classifiers = ckpt.classifiers.clone();
    if let Some(branch) = source_branch {
        checkpoint.classifiers.insert(ClassifierRole::Source, branch.classifier);
    }
    checkpoint.classifiers.insert(ClassifierRole::Target, classifier);
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        trajectory,
    })
}

/// Steps per fine-tuning epoch: `⌈n_train / batch_target⌉`.
pub fn steps_per_epoch(n_train: usize, batch: usize) -> usize {
    n_train.div_ceil(batch)
}

/// Fraction of `embeddings` rows whose argmax-cosine column matches `labels`.
pub fn classification_accuracy(classifier: &ClassifierWeights, embeddings: &Array2<f64>, labels: &[usize]) -> f64 {
    let predicted = classifier.predict(embeddings.view());
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Labels of `part` under `ids`.
pub fn manifest_labels(part: &DatasetManifest, ids: &IdentityIndex) -> Result<Vec<usize>> {
    labels_for(part, |id| ids.label(id))
}
