//! Classification heads: additive angular margin (ArcFace) loss, frozen
//! classifier initialization from class-mean embeddings or from the target
//! block of a joint classifier, the parameter-drift (RCT) penalty and the
//! source-regularized fine-tuning objective.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{IdentityIndex, JointLabelMap};
use crate::embedder::ParamStore;
use crate::error::{Error, Result};

/// Norm deviation tolerated on inputs that are supposed to be unit vectors.
pub const UNIT_TOLERANCE: f64 = 1e-3;

/// Cosine classifier: column `c` is the unit-norm center of identity `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    /// `d x C`.
    pub matrix: Array2<f64>,
    pub identity_map: IdentityIndex,
    pub frozen: bool,
}

impl ClassifierWeights {
    pub fn from_parts<'a>(
        matrix: Array2<f64>,
        identities: impl IntoIterator<Item = &'a str>,
        frozen: bool,
    ) -> Result<Self> {
        let identity_map = IdentityIndex::from_identities(identities);
        if identity_map.len() != matrix.ncols() {
            return Err(Error::Dimension(format!(
                "{} distinct identities for {} classifier columns",
                identity_map.len(),
                matrix.ncols()
            )));
        }
        let weights = ClassifierWeights {
            matrix,
            identity_map,
            frozen,
        };
        weights.check_unit_columns()?;
        Ok(weights)
    }

    /// Random unit columns, unfrozen.
    pub fn random<'a>(dim: usize, identities: impl IntoIterator<Item = &'a str>, seed: u64) -> Result<Self> {
        let identity_map = IdentityIndex::from_identities(identities);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matrix = Array2::from_shape_simple_fn((dim, identity_map.len()), || StandardNormal.sample(&mut rng));
        normalize_columns(&mut matrix)?;
        Ok(ClassifierWeights {
            matrix,
            identity_map,
            frozen: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn check_unit_columns(&self) -> Result<()> {
        for (j, col) in self.matrix.axis_iter(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::NotUnitNorm {
                    what: format!("classifier column {j}"),
                    norm,
                });
            }
        }
        Ok(())
    }

    /// Re-projects every column onto the unit sphere after an update.
    pub fn renormalize(&mut self) -> Result<()> {
        normalize_columns(&mut self.matrix)
    }

    /// Argmax-cosine label for each embedding row.
    pub fn predict(&self, embeddings: ArrayView2<f64>) -> Vec<usize> {
        let cos = embeddings.dot(&self.matrix);
        cos.axis_iter(Axis(0))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect()
    }

    /// Columns `range`, bit-identical, as a new frozen classifier.
    pub fn extract<'a>(&self, range: std::ops::Range<usize>, identities: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        if range.end > self.num_classes() {
            return Err(Error::Dimension(format!(
                "column range {range:?} exceeds {} classes",
                self.num_classes()
            )));
        }
        ClassifierWeights::from_parts(self.matrix.slice(s![.., range]).to_owned(), identities, true)
    }
}

fn normalize_columns(matrix: &mut Array2<f64>) -> Result<()> {
    for (j, mut col) in matrix.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.dot(&col).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNormMean(j));
        }
        col.mapv_inplace(|v| v / norm);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    /// Additive angular margin in radians.
    pub margin: f64,
    pub scale: f64,
}

impl MarginConfig {
    pub const PRETRAIN: MarginConfig = MarginConfig {
        margin: 0.5,
        scale: 64.0,
    };
    pub const FINETUNE: MarginConfig = MarginConfig {
        margin: 0.6,
        scale: 64.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..PI).contains(&self.margin) {
            return Err(Error::Config(format!("margin must lie in [0, pi), got {}", self.margin)));
        }
        if self.scale <= 0.0 || !self.scale.is_finite() {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ArcFaceOutput {
    /// Mean (optionally weighted) cross-entropy.
    pub loss: f64,
    /// `B x C` logits after the margin.
    pub logits: Array2<f64>,
    /// `dloss/d(embedding)`, `B x d`.
    pub grad_embeddings: Array2<f64>,
    /// `dloss/d(classifier)`, `d x C`.
    pub grad_classifier: Array2<f64>,
    /// Fraction of rows whose argmax logit (without margin) is the label.
    pub accuracy: f64,
}

fn check_unit_rows(embeddings: ArrayView2<f64>) -> Result<()> {
    for (i, row) in embeddings.axis_iter(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotUnitNorm {
                what: format!("embedding row {i}"),
                norm,
            });
        }
    }
    Ok(())
}

/// ArcFace: the true-class logit is `s * cos(θ_y + m)`, others `s * cos θ_j`,
/// loss is the mean softmax cross-entropy.
pub fn arcface_loss(
    embeddings: ArrayView2<f64>,
    classifier: &ClassifierWeights,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<ArcFaceOutput> {
    arcface_loss_weighted(embeddings, classifier, labels, None, cfg)
}

/// As [`arcface_loss`] with per-sample weights: `loss = Σ w_i ℓ_i / B`.
pub fn arcface_loss_weighted(
    embeddings: ArrayView2<f64>,
    classifier: &ClassifierWeights,
    labels: &[usize],
    weights: Option<&[f64]>,
    cfg: &MarginConfig,
) -> Result<ArcFaceOutput> {
    cfg.validate()?;
    let (b, d) = embeddings.dim();
    let c = classifier.num_classes();
    if d != classifier.dim() {
        return Err(Error::Dimension(format!(
            "embedding dim {d} vs classifier dim {}",
            classifier.dim()
        )));
    }
    if labels.len() != b || weights.is_some_and(|w| w.len() != b) {
        return Err(Error::Dimension(format!("{b} embeddings but {} labels", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    check_unit_rows(embeddings)?;
    for (j, col) in classifier.matrix.axis_iter(Axis(1)).enumerate() {
        let norm = col.dot(&col).sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotUnitNorm {
                what: format!("classifier column {j}"),
                norm,
            });
        }
    }

    let (sin_m, cos_m) = cfg.margin.sin_cos();
    let threshold = (PI - cfg.margin).cos();
    let fallback = cfg.margin.sin() * cfg.margin;
    let scale = cfg.scale;
    let w = &classifier.matrix;

    let mut logits = Array2::<f64>::zeros((b, c));
    let mut grad_e = Array2::<f64>::zeros((b, d));
    let mut grad_w = Array2::<f64>::zeros((d, c));
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut cosines = vec![0.0; c];
    let mut coeff = vec![0.0; c];
    for i in 0..b {
        let e = embeddings.row(i);
        for (j, cos) in cosines.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..d {
                acc += e[k] * w[[k, j]];
            }
            *cos = acc;
        }
        let y = labels[i];
        let cos_y = cosines[y];
        let sin_y = (1.0 - cos_y * cos_y).max(0.0).sqrt();
        let (phi, dphi) = if cos_y > threshold {
            (cos_y * cos_m - sin_y * sin_m, cos_m + cos_y * sin_m / sin_y.max(1e-4))
        } else {
            (cos_y - fallback, 1.0)
        };
        let mut row = logits.row_mut(i);
        for j in 0..c {
            row[j] = if j == y { scale * phi } else { scale * cosines[j] };
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        let sample_loss = lse - row[y];
        let weight = weights.map_or(1.0, |w| w[i]);
        total += weight * sample_loss;

        let argmax = cosines
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
            .0;
        if argmax == y {
            correct += 1;
        }

        let factor = weight / b as f64;
        for j in 0..c {
            let p = (row[j] - lse).exp();
            let g = if j == y { (p - 1.0) * dphi } else { p };
            coeff[j] = g * scale * factor;
        }
        let mut ge = grad_e.row_mut(i);
        for k in 0..d {
            let mut acc = 0.0;
            for j in 0..c {
                acc += coeff[j] * w[[k, j]];
            }
            ge[k] = acc;
            for j in 0..c {
                grad_w[[k, j]] += coeff[j] * e[k];
            }
        }
    }
    let loss = total / b as f64;
    Ok(ArcFaceOutput {
        loss,
        logits,
        grad_embeddings: grad_e,
        grad_classifier: grad_w,
        accuracy: correct as f64 / b as f64,
    })
}

fn class_sums(embeddings: ArrayView2<f64>, labels: &[usize], n_classes: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    if labels.len() != embeddings.nrows() {
        return Err(Error::Dimension(format!(
            "{} embeddings but {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    let d = embeddings.ncols();
    let mut sums = Array2::<f64>::zeros((d, n_classes));
    let mut counts = vec![0usize; n_classes];
    for (row, &label) in embeddings.axis_iter(Axis(0)).zip(labels) {
        if label >= n_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: n_classes,
            });
        }
        counts[label] += 1;
        let mut col = sums.column_mut(label);
        col += &row;
    }
    let empty: Vec<usize> = counts.iter().enumerate().filter(|(_, &n)| n == 0).map(|(c, _)| c).collect();
    if !empty.is_empty() {
        return Err(Error::EmptyClasses(empty));
    }
    Ok((sums, counts))
}

/// Frozen classifier whose column `c` is the normalized sum of the unit
/// embeddings labelled `c`.
pub fn mean_classifier_init(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    identities: &IdentityIndex,
) -> Result<ClassifierWeights> {
    check_unit_rows(embeddings)?;
    let (mut sums, _) = class_sums(embeddings, labels, identities.len())?;
    for (c, mut col) in sums.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.dot(&col).sqrt();
        if norm <= 1e-12 {
            return Err(Error::ZeroNormMean(c));
        }
        col.mapv_inplace(|v| v / norm);
    }
    Ok(ClassifierWeights {
        matrix: sums,
        identity_map: identities.clone(),
        frozen: true,
    })
}

/// Modality-balanced variant: each class center is the normalized average of
/// the per-group normalized means, so every group present weighs equally.
pub fn mean_classifier_init_stratified(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    groups: &[usize],
    identities: &IdentityIndex,
) -> Result<ClassifierWeights> {
    check_unit_rows(embeddings)?;
    if groups.len() != labels.len() {
        return Err(Error::Dimension("group and label counts differ".into()));
    }
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    let c = identities.len();
    let d = embeddings.ncols();
    // validates labels and non-empty classes
    class_sums(embeddings, labels, c)?;
    let mut centers = Array2::<f64>::zeros((d, c));
    for g in 0..n_groups {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| groups[i] == g).collect();
        let mut sums = Array2::<f64>::zeros((d, c));
        for &i in &rows {
            let mut col = sums.column_mut(labels[i]);
            col += &embeddings.row(i);
        }
        for (mut col, sum) in centers.axis_iter_mut(Axis(1)).zip(sums.axis_iter(Axis(1))) {
            let norm = sum.dot(&sum).sqrt();
            if norm > 1e-12 {
                col.scaled_add(1.0 / norm, &sum);
            }
        }
    }
    for (j, mut col) in centers.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.dot(&col).sqrt();
        if norm <= 1e-12 {
            return Err(Error::ZeroNormMean(j));
        }
        col.mapv_inplace(|v| v / norm);
    }
    Ok(ClassifierWeights {
        matrix: centers,
        identity_map: identities.clone(),
        frozen: true,
    })
}

/// Target-identity block of a joint classifier, reindexed to
/// `0..C_tgt` in target order and frozen. Identities keep their original
/// (pre-collision-renaming) names.
pub fn subspace_extract(joint: &ClassifierWeights, map: &JointLabelMap) -> Result<ClassifierWeights> {
    if joint.num_classes() != map.len() {
        return Err(Error::Dimension(format!(
            "joint classifier has {} columns, joint label map {} identities",
            joint.num_classes(),
            map.len()
        )));
    }
    let originals = map.original_target_ids();
    joint.extract(map.num_source()..map.len(), originals.iter().map(String::as_str))
}

/// Source-identity block of a joint classifier, frozen.
pub fn source_block_extract(joint: &ClassifierWeights, map: &JointLabelMap) -> Result<ClassifierWeights> {
    if joint.num_classes() != map.len() {
        return Err(Error::Dimension(format!(
            "joint classifier has {} columns, joint label map {} identities",
            joint.num_classes(),
            map.len()
        )));
    }
    joint.extract(0..map.num_source(), map.source_ids.iter().map(String::as_str))
}

/// `Σ ‖θ − θ₀‖²` over all parameters.
pub fn rct_penalty(params: &ParamStore, snapshot: &ParamStore) -> Result<f64> {
    params.check_compatible(snapshot)?;
    let mut total = 0.0;
    for ((_, a), (_, b)) in params.iter().zip(snapshot.iter()) {
        for (x, y) in a.iter().zip(b.iter()) {
            let diff = f64::from(*x) - f64::from(*y);
            total += diff * diff;
        }
    }
    Ok(total)
}

/// Gradient of `weight * rct_penalty`: `2 * weight * (θ − θ₀)`.
pub fn rct_gradient(params: &ParamStore, snapshot: &ParamStore, weight: f64) -> Result<ParamStore> {
    params.check_compatible(snapshot)?;
    let mut grad = params.clone();
    grad.add_scaled(-1.0, snapshot);
    for (_, t) in grad.iter_mut() {
        t.mapv_inplace(|v| (2.0 * weight) as f32 * v);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_target: f64,
    pub l_source: f64,
    pub lambda: f64,
    /// Weighted drift penalty, when that regularizer is enabled.
    pub rct: Option<f64>,
    pub l_total: f64,
}

/// `l_target + lambda * l_source`.
pub fn joint_finetune_loss(l_target: f64, l_source: f64, lambda: f64) -> Result<LossBreakdown> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::NegativeLambda(lambda));
    }
    let l_total = if lambda == 0.0 {
        l_target
    } else {
        l_target + lambda * l_source
    };
    Ok(LossBreakdown {
        l_target,
        l_source,
        lambda,
        rct: None,
        l_total,
    })
}

impl LossBreakdown {
    pub fn with_rct(mut self, weighted_penalty: f64) -> Self {
        self.rct = Some(weighted_penalty);
        self.l_total += weighted_penalty;
        self
    }
}
