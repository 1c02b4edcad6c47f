//! One function per subcommand. Each resolves its inputs from the config,
//! delegates to the toolkit, and writes its artifacts under the run directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use nirvis::datamodel::{load_manifest, DatasetManifest};
use nirvis::embedder::{load_checkpoint, save_checkpoint, Backbone, Checkpoint, Phase};
use nirvis::eval::{cross_dataset_matrix, embed_manifest, evaluate_on, CrossMatrix, VerificationReport};
use nirvis::synthgen::{generate, manifest_path};
use nirvis::trainer::{finetune, pretrain, TrainOutcome};
use serde::Serialize;

use crate::artifacts::{fmt_metric, write_csv, write_metrics, write_report, write_text, CONFIG_FILE, METRICS_FILE};
use crate::config::ExperimentConfig;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DATA_DIR: &str = "data";

/// A validated config bound to its run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
}

impl Run {
    /// Validates `cfg`, creates the run directory and records the resolved config.
    pub fn new(cfg: ExperimentConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let dir = cfg.run_dir();
        write_text(&dir.join(CONFIG_FILE), &format!("# config_hash: {hash}\n{}", cfg.to_toml()))?;
        Ok(Run { cfg, hash, dir })
    }

    fn required(&self, field: &str, path: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
        path.clone()
            .ok_or_else(|| anyhow!("{field} must be set for this command"))
    }

    fn manifest(&self, field: &str, path: &Option<PathBuf>) -> anyhow::Result<DatasetManifest> {
        let path = self.required(field, path)?;
        load_manifest(&path).with_context(|| format!("loading {field}"))
    }

    fn checkpoint(&self) -> anyhow::Result<Checkpoint> {
        let path = self.required("data.checkpoint", &self.cfg.data.checkpoint)?;
        load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))
    }

    fn report<T: Serialize>(&self, command: &str, result: &T) -> anyhow::Result<()> {
        write_report(&self.dir, command, &self.hash, self.cfg.seed, result)
    }

    fn save_training(&self, mut outcome: TrainOutcome) -> anyhow::Result<TrainingSummary> {
        outcome.checkpoint.config_hash = Some(self.hash.clone());
        let dir = self.dir.join(CHECKPOINT_DIR);
        save_checkpoint(&outcome.checkpoint, &dir)?;
        write_metrics(&self.dir.join(METRICS_FILE), &self.hash, &outcome.metrics)?;
        let last = outcome.metrics.last();
        Ok(TrainingSummary {
            checkpoint: dir,
            epochs: outcome.metrics.len(),
            steps: outcome.trajectory.len(),
            final_loss: last.map(|m| m.loss_target),
            final_train_accuracy: last.map(|m| m.train_accuracy),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
    pub source_images: usize,
    pub target_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub checkpoint: PathBuf,
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_train_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbedSummary {
    pub embeddings: PathBuf,
    pub rows: usize,
    pub dim: usize,
}

pub fn cmd_synth_gen(run: &Run) -> anyhow::Result<SynthSummary> {
    let data = run.dir.join(DATA_DIR);
    let (source, target) = generate(&run.cfg.synth, &data)?;
    let summary = SynthSummary {
        source_manifest: manifest_path(&data, &source.name),
        target_manifest: manifest_path(&data, &target.name),
        source_images: source.records.len(),
        target_images: target.records.len(),
    };
    run.report("synth-gen", &summary)?;
    Ok(summary)
}

pub fn cmd_pretrain(run: &Run) -> anyhow::Result<TrainingSummary> {
    let source = run.manifest("data.source", &run.cfg.data.source)?;
    let target = if run.cfg.pretrain.joint {
        Some(run.manifest("data.target", &run.cfg.data.target)?)
    } else {
        None
    };
    let outcome = pretrain(&run.cfg.pretrain_config()?, &run.cfg.backbone, &source, target.as_ref())?;
    let summary = run.save_training(outcome)?;
    run.report("pretrain", &summary)?;
    Ok(summary)
}

pub fn cmd_finetune(run: &Run) -> anyhow::Result<TrainingSummary> {
    let ckpt = run.checkpoint()?;
    let target = run.manifest("data.target", &run.cfg.data.target)?;
    let source = match &run.cfg.data.source {
        Some(_) => Some(run.manifest("data.source", &run.cfg.data.source)?),
        None => None,
    };
    let outcome = finetune(&run.cfg.finetune_config()?, &ckpt, &target, source.as_ref(), &run.cfg.regime()?)?;
    let summary = run.save_training(outcome)?;
    run.report("finetune", &summary)?;
    Ok(summary)
}

/// Embeds every record of `data.target`.
pub fn cmd_embed(run: &Run) -> anyhow::Result<EmbedSummary> {
    let ckpt = run.checkpoint()?;
    let dataset = run.manifest("data.target", &run.cfg.data.target)?;
    let e = embed_manifest(&ckpt.backbone, &dataset)?;
    let dim = e.dim();
    let mut header = vec!["path".to_string(), "identity".into(), "modality".into(), "split".into()];
    header.extend((0..dim).map(|k| format!("e{k}")));
    let rows: Vec<Vec<String>> = dataset
        .records
        .iter()
        .zip(e.vectors.rows())
        .map(|(record, row)| {
            let mut out = vec![
                record.path.clone(),
                record.identity.clone(),
                record.modality.to_string(),
                record.split.to_string(),
            ];
            out.extend(row.iter().map(|v| format!("{v:.9}")));
            out
        })
        .collect();
    let path = run.dir.join("embeddings.csv");
    write_csv(&path, &run.hash, &header, &rows)?;
    let summary = EmbedSummary {
        embeddings: path,
        rows: rows.len(),
        dim,
    };
    run.report("embed", &summary)?;
    Ok(summary)
}

/// Evaluates `data.checkpoint` (or a freshly initialized backbone) on
/// `data.target` under the eval protocol.
pub fn cmd_eval_verify(run: &Run) -> anyhow::Result<VerificationReport> {
    let ckpt = match &run.cfg.data.checkpoint {
        Some(_) => run.checkpoint()?,
        None => {
            log::warn!("data.checkpoint not set; evaluating a randomly initialized backbone");
            Checkpoint::new(Backbone::new(run.cfg.backbone.clone(), run.cfg.seed)?, Phase::Pretrain)
        }
    };
    let dataset = run.manifest("data.target", &run.cfg.data.target)?;
    let mut report = evaluate_on(&ckpt, &dataset, &run.cfg.eval_config()?)?;
    report.config_hash = Some(run.hash.clone());
    let rows: Vec<Vec<String>> = report.metrics().into_iter().map(|(k, v)| vec![k, fmt_metric(v)]).collect();
    write_csv(&run.dir.join("metrics.csv"), &run.hash, &["metric", "value"], &rows)?;
    let roc: Vec<Vec<String>> = report
        .roc
        .iter()
        .map(|p| vec![format!("{:e}", p.far), fmt_metric(p.tar)])
        .collect();
    write_csv(&run.dir.join("roc.csv"), &run.hash, &["far", "tar"], &roc)?;
    run.report("eval-verify", &report)?;
    Ok(report)
}

pub fn cmd_cross_eval(run: &Run) -> anyhow::Result<CrossMatrix> {
    let cross = &run.cfg.cross;
    if cross.checkpoints.is_empty() && cross.baseline.is_none() {
        return Err(anyhow!("cross.checkpoints (or cross.baseline) must list at least one checkpoint"));
    }
    if cross.datasets.is_empty() {
        return Err(anyhow!("cross.datasets must list at least one dataset"));
    }
    let baseline = cross.baseline.as_deref().map(load_checkpoint).transpose()?;
    let checkpoints = cross
        .checkpoints
        .iter()
        .map(|c| load_checkpoint(&c.path).map(|ck| (c.name.clone(), ck)))
        .collect::<Result<Vec<_>, _>>()?;
    let datasets = cross
        .datasets
        .iter()
        .map(|d| load_manifest(&d.path).map(|m| (d.name.clone(), m)))
        .collect::<Result<Vec<_>, _>>()?;
    let ck_refs: Vec<(String, &Checkpoint)> = checkpoints.iter().map(|(n, c)| (n.clone(), c)).collect();
    let ds_refs: Vec<(String, &DatasetManifest)> = datasets.iter().map(|(n, d)| (n.clone(), d)).collect();
    let matrix = cross_dataset_matrix(baseline.as_ref(), &ck_refs, &ds_refs, cross.far, &run.cfg.eval_config()?)?;
    write_matrix(&run.dir.join("cross_matrix.csv"), &run.hash, "fine-tuned on", &matrix)?;
    run.report("cross-eval", &matrix)?;
    Ok(matrix)
}

pub fn write_matrix(path: &Path, hash: &str, corner: &str, m: &CrossMatrix) -> anyhow::Result<()> {
    let mut header = vec![corner.to_string()];
    header.extend(m.columns.iter().cloned());
    let rows: Vec<Vec<String>> = m
        .rows
        .iter()
        .zip(&m.values)
        .map(|(name, values)| std::iter::once(name.clone()).chain(values.iter().map(|&v| fmt_metric(v))).collect())
        .collect();
    write_csv(path, hash, &header, &rows)
}
