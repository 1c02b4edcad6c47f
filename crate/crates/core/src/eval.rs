//! Cosine scoring, verification (TAR@FAR) and identification (rank-n)
//! metrics, checkpoint evaluation and fold aggregation.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{subset, DatasetManifest, Modality, RecordFilter, Split};
use crate::embedder::{embed, Backbone, Checkpoint, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::heads::UNIT_TOLERANCE;
use crate::preprocess::{load_tensors, PreprocessConfig};

fn check_unit(m: ArrayView2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotUnitNorm {
                what: format!("{what} row {i}"),
                norm,
            });
        }
    }
    Ok(())
}

/// `S[g, p] = <gallery_g, probe_p>`, computed over gallery row blocks of
/// `block` rows. Each entry is a left-to-right sum, so the result does not
/// depend on the block size.
pub fn pairwise_cosine_blocked(gallery: ArrayView2<f64>, probe: ArrayView2<f64>, block: usize) -> Result<Array2<f64>> {
    if gallery.ncols() != probe.ncols() {
        return Err(Error::Dimension(format!(
            "gallery dim {} vs probe dim {}",
            gallery.ncols(),
            probe.ncols()
        )));
    }
    check_unit(gallery, "gallery")?;
    check_unit(probe, "probe")?;
    let (g, p) = (gallery.nrows(), probe.nrows());
    let block = block.max(1);
    let starts: Vec<usize> = (0..g).step_by(block).collect();
    let blocks: Vec<Array2<f64>> = starts
        .par_iter()
        .map(|&start| {
            let rows = block.min(g - start);
            Array2::from_shape_fn((rows, p), |(r, j)| {
                let gi = gallery.row(start + r);
                let pj = probe.row(j);
                let mut acc = 0.0;
                for k in 0..gi.len() {
                    acc += gi[k] * pj[k];
                }
                acc
            })
        })
        .collect();
    let mut scores = Array2::<f64>::zeros((g, p));
    for (start, b) in starts.iter().zip(blocks) {
        scores.slice_mut(ndarray::s![*start..*start + b.nrows(), ..]).assign(&b);
    }
    Ok(scores)
}

pub const DEFAULT_BLOCK: usize = 256;

pub fn pairwise_cosine(gallery: ArrayView2<f64>, probe: ArrayView2<f64>) -> Result<Array2<f64>> {
    pairwise_cosine_blocked(gallery, probe, DEFAULT_BLOCK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// Splits a `G x P` score matrix into same-identity and cross-identity
/// scores, in row-major order.
pub fn build_scoreset<S: AsRef<str>>(scores: &Array2<f64>, gallery_ids: &[S], probe_ids: &[S]) -> Result<ScoreSet> {
    if scores.dim() != (gallery_ids.len(), probe_ids.len()) {
        return Err(Error::Dimension(format!(
            "score matrix {:?} vs {} gallery / {} probe ids",
            scores.dim(),
            gallery_ids.len(),
            probe_ids.len()
        )));
    }
    let mut set = ScoreSet {
        genuine: Vec::new(),
        impostor: Vec::new(),
    };
    for ((g, p), &s) in scores.indexed_iter() {
        if gallery_ids[g].as_ref() == probe_ids[p].as_ref() {
            set.genuine.push(s);
        } else {
            set.impostor.push(s);
        }
    }
    if set.genuine.is_empty() {
        return Err(Error::NoGenuinePairs);
    }
    Ok(set)
}

fn check_far(far: f64) -> Result<()> {
    if far > 0.0 && far < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("FAR must lie in (0, 1), got {far}")))
    }
}

/// Smallest threshold among the impostor scores (and +inf) whose impostor
/// pass rate `#{imp > t} / n` is at most `far`.
pub fn threshold_at_far(impostor: &[f64], far: f64) -> Result<f64> {
    check_far(far)?;
    if impostor.is_empty() {
        return Err(Error::NoImpostorPairs);
    }
    let n = impostor.len();
    if (n as f64) < 1.0 / far {
        log::warn!("{n} impostor scores cannot resolve FAR {far}");
    }
    let mut sorted = impostor.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let v = sorted[i];
        let mut j = i;
        while j < n && sorted[j] == v {
            j += 1;
        }
        // j = number of scores <= v
        if ((n - j) as f64) / (n as f64) <= far {
            return Ok(v);
        }
        i = j;
    }
    Ok(f64::INFINITY)
}

/// True-accept rate at the threshold of [`threshold_at_far`].
pub fn tar_at_far(scores: &ScoreSet, far: f64) -> Result<f64> {
    if scores.genuine.is_empty() {
        return Err(Error::NoGenuinePairs);
    }
    let t = threshold_at_far(&scores.impostor, far)?;
    let accepted = scores.genuine.iter().filter(|&&g| g > t).count();
    Ok(accepted as f64 / scores.genuine.len() as f64)
}

/// Fraction of probes whose true identity is among the top `n` gallery
/// identities, each identity scored by its best gallery sample. A tie with
/// the n-th competitor counts as a miss.
pub fn rank_n<S: AsRef<str>>(scores: &Array2<f64>, gallery_ids: &[S], probe_ids: &[S], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("rank must be >= 1".into()));
    }
    if scores.dim() != (gallery_ids.len(), probe_ids.len()) {
        return Err(Error::Dimension(format!(
            "score matrix {:?} vs {} gallery / {} probe ids",
            scores.dim(),
            gallery_ids.len(),
            probe_ids.len()
        )));
    }
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let gallery_slots: Vec<usize> = gallery_ids
        .iter()
        .map(|id| {
            let next = slot.len();
            *slot.entry(id.as_ref()).or_insert(next)
        })
        .collect();
    let mut hits = 0usize;
    let mut best = vec![f64::NEG_INFINITY; slot.len()];
    for (p, id) in probe_ids.iter().enumerate() {
        let truth = *slot
            .get(id.as_ref())
            .ok_or_else(|| Error::ProbeNotInGallery(id.as_ref().to_string()))?;
        best.iter_mut().for_each(|b| *b = f64::NEG_INFINITY);
        for (g, &s) in scores.column(p).iter().enumerate() {
            let b = &mut best[gallery_slots[g]];
            if s > *b {
                *b = s;
            }
        }
        let true_score = best[truth];
        let at_least_as_good = best
            .iter()
            .enumerate()
            .filter(|&(k, &s)| k != truth && s >= true_score)
            .count();
        if at_least_as_good < n {
            hits += 1;
        }
    }
    Ok(hits as f64 / probe_ids.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TarPoint {
    pub far: f64,
    pub tar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub genuine: usize,
    pub impostor: usize,
    pub gallery: usize,
    pub probe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Sorted by FAR.
    pub tar_at: Vec<TarPoint>,
    /// Sorted by rank.
    pub rank_n: Vec<RankPoint>,
    pub counts: PairCounts,
    pub fold: Option<usize>,
    /// ROC samples on a fixed log-spaced FAR grid, omitting FARs below
    /// `1 / #impostor pairs`.
    pub roc: Vec<TarPoint>,
    pub config_hash: Option<String>,
}

impl VerificationReport {
    pub fn tar(&self, far: f64) -> Option<f64> {
        self.tar_at.iter().find(|p| p.far == far).map(|p| p.tar)
    }

    pub fn rank(&self, n: usize) -> Option<f64> {
        self.rank_n.iter().find(|p| p.n == n).map(|p| p.accuracy)
    }

    /// `(metric name, value)` pairs in report order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        self.tar_at
            .iter()
            .map(|p| (format!("tar@far={:e}", p.far), p.tar))
            .chain(self.rank_n.iter().map(|p| (format!("rank-{}", p.n), p.accuracy)))
            .collect()
    }
}

/// Which images form the gallery and the probe set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub gallery_modality: Modality,
    pub probe_modality: Modality,
    pub gallery_split: Split,
    pub probe_split: Split,
}

impl Protocol {
    /// VIS gallery against NIR probes.
    pub const HETEROGENEOUS: Protocol = Protocol {
        gallery_modality: Modality::Vis,
        probe_modality: Modality::Nir,
        gallery_split: Split::Gallery,
        probe_split: Split::Probe,
    };

    pub const VISIBLE: Protocol = Protocol {
        gallery_modality: Modality::Vis,
        probe_modality: Modality::Vis,
        gallery_split: Split::Gallery,
        probe_split: Split::Probe,
    };

    pub fn sets(&self, dataset: &DatasetManifest) -> Result<(DatasetManifest, DatasetManifest)> {
        let gallery = subset(dataset, &RecordFilter::new(Some(self.gallery_modality), Some(self.gallery_split)))?;
        let probe = subset(dataset, &RecordFilter::new(Some(self.probe_modality), Some(self.probe_split)))?;
        Ok((gallery, probe))
    }
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::HETEROGENEOUS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub fars: Vec<f64>,
    pub ranks: Vec<usize>,
    pub block_size: usize,
    pub protocol: Protocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fars: vec![1e-4, 1e-3, 1e-2, 1e-1],
            ranks: vec![1, 5],
            block_size: DEFAULT_BLOCK,
            protocol: Protocol::HETEROGENEOUS,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for &far in &self.fars {
            check_far(far)?;
        }
        if self.ranks.contains(&0) {
            return Err(Error::Config("ranks must be >= 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        Ok(())
    }
}

const ROC_GRID: [f64; 9] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 0.9];

/// Normalized embeddings of every record, with identities and modalities.
pub fn embed_manifest(backbone: &Backbone, manifest: &DatasetManifest) -> Result<EmbeddingMatrix> {
    let images = load_tensors(manifest, &PreprocessConfig::with_crop_size(backbone.config().input_size))?;
    let mut e = embed(backbone, &images, true)?;
    e.identities = manifest.records.iter().map(|r| r.identity.clone()).collect();
    e.modalities = manifest.records.iter().map(|r| r.modality).collect();
    Ok(e)
}

pub fn evaluate_embeddings(gallery: &EmbeddingMatrix, probe: &EmbeddingMatrix, cfg: &EvalConfig) -> Result<VerificationReport> {
    cfg.validate()?;
    let scores = pairwise_cosine_blocked(gallery.vectors.view(), probe.vectors.view(), cfg.block_size)?;
    let set = build_scoreset(&scores, &gallery.identities, &probe.identities)?;
    let mut fars = cfg.fars.clone();
    fars.sort_by(f64::total_cmp);
    fars.dedup();
    let tar_at = fars
        .iter()
        .map(|&far| tar_at_far(&set, far).map(|tar| TarPoint { far, tar }))
        .collect::<Result<Vec<_>>>()?;
    let mut ranks = cfg.ranks.clone();
    ranks.sort_unstable();
    ranks.dedup();
    let rank_n = ranks
        .iter()
        .map(|&n| rank_n(&scores, &gallery.identities, &probe.identities, n).map(|accuracy| RankPoint { n, accuracy }))
        .collect::<Result<Vec<_>>>()?;
    let resolvable = 1.0 / set.impostor.len() as f64;
    let roc = ROC_GRID
        .iter()
        .filter(|&&far| far >= resolvable)
        .map(|&far| tar_at_far(&set, far).map(|tar| TarPoint { far, tar }))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerificationReport {
        tar_at,
        rank_n,
        counts: PairCounts {
            genuine: set.genuine.len(),
            impostor: set.impostor.len(),
            gallery: gallery.len(),
            probe: probe.len(),
        },
        fold: None,
        roc,
        config_hash: None,
    })
}

/// Embeds both sets with the checkpoint backbone (no augmentation) and
/// computes every configured metric.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    gallery: &DatasetManifest,
    probe: &DatasetManifest,
    cfg: &EvalConfig,
) -> Result<VerificationReport> {
    let g = embed_manifest(&ckpt.backbone, gallery)?;
    let p = embed_manifest(&ckpt.backbone, probe)?;
    evaluate_embeddings(&g, &p, cfg)
}

/// Evaluates on `dataset` under `cfg.protocol`.
pub fn evaluate_on(ckpt: &Checkpoint, dataset: &DatasetManifest, cfg: &EvalConfig) -> Result<VerificationReport> {
    let (gallery, probe) = cfg.protocol.sets(dataset)?;
    evaluate_checkpoint(ckpt, &gallery, &probe, cfg)
}

pub const NO_FINETUNE: &str = "no fine-tune";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossMatrix {
    pub far: f64,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// `values[i][j]`: TAR of row checkpoint `i` on dataset `j`.
    pub values: Vec<Vec<f64>>,
}

impl CrossMatrix {
    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let i = self.rows.iter().position(|r| r == row)?;
        let j = self.columns.iter().position(|c| c == column)?;
        Some(self.values[i][j])
    }
}

/// TAR@`far` of every checkpoint on every dataset. When `baseline` is given
/// it becomes the first row, labelled [`NO_FINETUNE`].
pub fn cross_dataset_matrix(
    baseline: Option<&Checkpoint>,
    finetuned: &[(String, &Checkpoint)],
    datasets: &[(String, &DatasetManifest)],
    far: f64,
    cfg: &EvalConfig,
) -> Result<CrossMatrix> {
    let mut rows: Vec<(String, &Checkpoint)> = Vec::new();
    if let Some(b) = baseline {
        rows.push((NO_FINETUNE.to_string(), b));
    }
    rows.extend(finetuned.iter().map(|(n, c)| (n.clone(), *c)));
    if let Some((_, first)) = rows.first() {
        let d = first.backbone.embed_dim();
        if let Some((name, _)) = rows.iter().find(|(_, c)| c.backbone.embed_dim() != d) {
            return Err(Error::Dimension(format!("checkpoint `{name}` does not embed into {d} dimensions")));
        }
    }
    let cfg = EvalConfig {
        fars: vec![far],
        ..cfg.clone()
    };
    let values = rows
        .iter()
        .map(|(_, ckpt)| {
            datasets
                .iter()
                .map(|(_, ds)| evaluate_on(ckpt, ds, &cfg).map(|r| r.tar_at[0].tar))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossMatrix {
        far,
        rows: rows.into_iter().map(|(n, _)| n).collect(),
        columns: datasets.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Mean and population std of every metric across folds.
pub fn aggregate_folds(reports: &[VerificationReport]) -> Result<Vec<MetricSummary>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InconsistentMetrics("no reports to aggregate".into()))?
        .metrics();
    let keys: Vec<String> = first.iter().map(|(k, _)| k.clone()).collect();
    let mut columns = vec![Vec::with_capacity(reports.len()); keys.len()];
    for (i, r) in reports.iter().enumerate() {
        let m = r.metrics();
        if m.len() != keys.len() || m.iter().zip(&keys).any(|((k, _), key)| k != key) {
            return Err(Error::InconsistentMetrics(format!("report {i} has different metric keys")));
        }
        for (col, (_, v)) in columns.iter_mut().zip(m) {
            col.push(v);
        }
    }
    Ok(keys
        .into_iter()
        .zip(columns)
        .map(|(metric, values)| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            MetricSummary {
                metric,
                mean,
                std: var.sqrt(),
            }
        })
        .collect())
}
