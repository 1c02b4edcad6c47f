//! Experiment configuration: one TOML document, `--set` overrides, and a
//! content hash that names the output directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context as _};
use nirvis::augment::AugmentConfig;
use nirvis::datamodel::{Modality, Split};
use nirvis::embedder::{BackboneConfig, Phase};
use nirvis::eval::{EvalConfig, Protocol};
use nirvis::heads::MarginConfig;
use nirvis::synthgen::SynthConfig;
use nirvis::trainer::{ClassifierInit, LrSchedule, Regime, Regularizer, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seeds data generation and every training run.
    pub seed: u64,
    /// Not part of the config hash.
    pub out_dir: PathBuf,
    pub data: DataSection,
    /// `synth.seed` is overwritten by the top-level seed.
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    pub aug: AugSection,
    pub loss: LossSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub cross: CrossSection,
    pub reproduce: ReproduceSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugSection {
    pub red_replicate_prob: f64,
    pub hflip_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub pretrain_margin: f64,
    pub pretrain_scale: f64,
    pub finetune_margin: f64,
    pub finetune_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr_init: f64,
    pub schedule: String,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub red_aug: bool,
    /// Train on source and target train splits under a joint identity space.
    pub joint: bool,
    /// Weight of source samples in the joint loss.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr_init: f64,
    pub schedule: String,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_target: usize,
    pub batch_source: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub red_aug: bool,
    pub classifier: String,
    pub regularizer: String,
    pub lambda: f64,
    pub rct_weight: f64,
    pub stratified_mean: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub fars: Vec<f64>,
    pub ranks: Vec<usize>,
    pub block_size: usize,
    pub gallery_modality: String,
    pub probe_modality: String,
    pub gallery_split: String,
    pub probe_split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossSection {
    pub far: f64,
    /// Pre-trained checkpoint reported as the "no fine-tune" row.
    pub baseline: Option<PathBuf>,
    pub checkpoints: Vec<NamedPath>,
    /// Manifests evaluated under the eval protocol.
    pub datasets: Vec<NamedPath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproduceSection {
    pub seeds: Vec<u64>,
    pub far: f64,
    /// The held-out target differs from `synth` only in its name and NIR transform.
    pub second_target_name: String,
    pub second_nir_weights: [f64; 3],
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig {
            target_name: "target_a".into(),
            ..SynthConfig::default()
        };
        let backbone = BackboneConfig {
            input_size: synth.image_size,
            ..BackboneConfig::default()
        };
        ExperimentConfig {
            name: "default".into(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataSection::default(),
            synth,
            backbone,
            aug: AugSection::default(),
            loss: LossSection::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
            cross: CrossSection::default(),
            reproduce: ReproduceSection::default(),
        }
    }
}

impl Default for AugSection {
    fn default() -> Self {
        let a = AugmentConfig::default();
        AugSection {
            red_replicate_prob: a.red_replicate_prob,
            hflip_prob: a.hflip_prob,
        }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        let p = TrainConfig::desk(Phase::Pretrain).margin;
        let f = TrainConfig::desk(Phase::Finetune).margin;
        LossSection {
            pretrain_margin: p.margin,
            pretrain_scale: p.scale,
            finetune_margin: f.margin,
            finetune_scale: f.scale,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        let t = TrainConfig::desk(Phase::Pretrain);
        PretrainSection {
            epochs: t.epochs,
            lr_init: t.lr_init,
            schedule: t.schedule.to_string(),
            lr_decay_epochs: t.lr_decay_epochs,
            lr_decay_factor: t.lr_decay_factor,
            batch_size: t.batch_source,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            red_aug: t.red_aug,
            joint: false,
            lambda: t.lambda,
        }
    }
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let t = TrainConfig::desk(Phase::Finetune);
        FinetuneSection {
            epochs: t.epochs,
            lr_init: t.lr_init,
            schedule: t.schedule.to_string(),
            lr_decay_epochs: t.lr_decay_epochs,
            lr_decay_factor: t.lr_decay_factor,
            batch_target: t.batch_target,
            batch_source: t.batch_source,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            red_aug: t.red_aug,
            classifier: ClassifierInit::Mean.to_string(),
            regularizer: Regularizer::None.to_string(),
            lambda: 1.0,
            rct_weight: 1.0,
            stratified_mean: false,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            fars: e.fars,
            ranks: e.ranks,
            block_size: e.block_size,
            gallery_modality: e.protocol.gallery_modality.to_string(),
            probe_modality: e.protocol.probe_modality.to_string(),
            gallery_split: e.protocol.gallery_split.to_string(),
            probe_split: e.protocol.probe_split.to_string(),
        }
    }
}

impl Default for CrossSection {
    fn default() -> Self {
        CrossSection {
            far: 1e-2,
            baseline: None,
            checkpoints: Vec::new(),
            datasets: Vec::new(),
        }
    }
}

impl Default for ReproduceSection {
    fn default() -> Self {
        ReproduceSection {
            seeds: vec![0, 1, 2],
            far: 1e-2,
            second_target_name: "target_b".into(),
            second_nir_weights: [0.5, 0.35, 0.15],
        }
    }
}

/// Every violation found in a config, one per line.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem(s)):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// Applies `section.key=value` to a TOML document. The value is parsed as a
/// TOML literal and falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form section.key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(anyhow!("override `{assignment}` has an empty key segment"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut table = doc;
    for segment in parents {
        let entry = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{assignment}`: `{segment}` is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Command-line sources for a config, highest precedence last.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub file: Option<PathBuf>,
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Resolves defaults, then the file, then `--set`, then `--seed`/`--out`.
    pub fn resolve(overrides: &Overrides) -> anyhow::Result<Self> {
        let mut doc = match &overrides.file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => toml::Table::new(),
        };
        for assignment in &overrides.set {
            apply_override(&mut doc, assignment)?;
        }
        let mut cfg: ExperimentConfig = doc.try_into().context("config does not match the schema")?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out_dir = out.clone();
        }
        cfg.synth.seed = cfg.seed;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, without `out_dir`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("config is an object").remove("out_dir");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    /// `out_dir/<name>/<first 16 hex digits of the hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name).join(&self.hash()[..16])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Checks every field and referenced path, reporting all violations.
    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut errors = Vec::new();
        let mut check = |field: &str, r: Result<(), String>| {
            if let Err(e) = r {
                errors.push(format!("{field}: {e}"));
            }
        };
        check(
            "name",
            if self.name.is_empty() || self.name.contains(['/', '\\']) {
                Err(format!("must be a non-empty single path component, got `{}`", self.name))
            } else {
                Ok(())
            },
        );
        for (field, path) in [
            ("data.source", &self.data.source),
            ("data.target", &self.data.target),
            ("data.checkpoint", &self.data.checkpoint),
            ("cross.baseline", &self.cross.baseline),
        ] {
            if let Some(p) = path {
                check(field, exists(p));
            }
        }
        for (i, entry) in self.cross.checkpoints.iter().enumerate() {
            check(&format!("cross.checkpoints[{i}]"), exists(&entry.path));
        }
        for (i, entry) in self.cross.datasets.iter().enumerate() {
            check(&format!("cross.datasets[{i}]"), exists(&entry.path));
        }
        check("synth", self.synth.validate().map_err(|e| e.to_string()));
        check("backbone", self.backbone.validate().map_err(|e| e.to_string()));
        check("pretrain.schedule", parse::<LrSchedule>(&self.pretrain.schedule));
        check("finetune.schedule", parse::<LrSchedule>(&self.finetune.schedule));
        check("finetune.classifier", parse::<ClassifierInit>(&self.finetune.classifier));
        check("finetune.regularizer", parse::<Regularizer>(&self.finetune.regularizer));
        check("eval.gallery_modality", parse::<Modality>(&self.eval.gallery_modality));
        check("eval.probe_modality", parse::<Modality>(&self.eval.probe_modality));
        check("eval.gallery_split", parse::<Split>(&self.eval.gallery_split));
        check("eval.probe_split", parse::<Split>(&self.eval.probe_split));
        if let Ok(t) = self.pretrain_config() {
            check("pretrain", t.validate().map_err(|e| e.to_string()));
        }
        if let Ok(t) = self.finetune_config() {
            check("finetune", t.validate().map_err(|e| e.to_string()));
        }
        check(
            "finetune.rct_weight",
            if self.finetune.rct_weight >= 0.0 {
                Ok(())
            } else {
                Err(format!("must be >= 0, got {}", self.finetune.rct_weight))
            },
        );
        if let Ok(e) = self.eval_config() {
            check("eval", e.validate().map_err(|e| e.to_string()));
        }
        check("cross.far", far_in_range(self.cross.far));
        check("reproduce.far", far_in_range(self.reproduce.far));
        check(
            "reproduce.seeds",
            if self.reproduce.seeds.is_empty() {
                Err("at least one seed is required".into())
            } else {
                Ok(())
            },
        );
        check(
            "reproduce.second_target_name",
            if self.reproduce.second_target_name == self.synth.target_name {
                Err(format!("must differ from synth.target_name (`{}`)", self.synth.target_name))
            } else {
                Ok(())
            },
        );
        let second = self.second_target_synth();
        check("reproduce", second.validate().map_err(|e| e.to_string()));
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errors))
        }
    }

    fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            red_replicate_prob: self.aug.red_replicate_prob,
            hflip_prob: self.aug.hflip_prob,
            rng_seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> anyhow::Result<TrainConfig> {
        let p = &self.pretrain;
        Ok(TrainConfig {
            phase: Phase::Pretrain,
            epochs: p.epochs,
            lr_init: p.lr_init,
            schedule: p.schedule.parse()?,
            lr_decay_epochs: p.lr_decay_epochs.clone(),
            lr_decay_factor: p.lr_decay_factor,
            batch_target: p.batch_size,
            batch_source: p.batch_size,
            momentum: p.momentum,
            weight_decay: p.weight_decay,
            margin: MarginConfig {
                margin: self.loss.pretrain_margin,
                scale: self.loss.pretrain_scale,
            },
            red_aug: p.red_aug,
            augment: self.augment(),
            lambda: p.lambda,
            seed: self.seed,
        })
    }

    pub fn finetune_config(&self) -> anyhow::Result<TrainConfig> {
        let f = &self.finetune;
        Ok(TrainConfig {
            phase: Phase::Finetune,
            epochs: f.epochs,
            lr_init: f.lr_init,
            schedule: f.schedule.parse()?,
            lr_decay_epochs: f.lr_decay_epochs.clone(),
            lr_decay_factor: f.lr_decay_factor,
            batch_target: f.batch_target,
            batch_source: f.batch_source,
            momentum: f.momentum,
            weight_decay: f.weight_decay,
            margin: MarginConfig {
                margin: self.loss.finetune_margin,
                scale: self.loss.finetune_scale,
            },
            red_aug: f.red_aug,
            augment: self.augment(),
            lambda: f.lambda,
            seed: self.seed,
        })
    }

    pub fn regime(&self) -> anyhow::Result<Regime> {
        let f = &self.finetune;
        let mut regime = Regime::new(f.classifier.parse()?, f.lambda);
        if f.regularizer.parse::<Regularizer>()? == Regularizer::Rct {
            regime = regime.with_rct(f.rct_weight);
        }
        regime.stratified_mean = f.stratified_mean;
        Ok(regime)
    }

    pub fn eval_config(&self) -> anyhow::Result<EvalConfig> {
        let e = &self.eval;
        let modality = |s: &str| s.parse::<Modality>().map_err(|e| anyhow!(e));
        let split = |s: &str| s.parse::<Split>().map_err(|e| anyhow!(e));
        Ok(EvalConfig {
            fars: e.fars.clone(),
            ranks: e.ranks.clone(),
            block_size: e.block_size,
            protocol: Protocol {
                gallery_modality: modality(&e.gallery_modality)?,
                probe_modality: modality(&e.probe_modality)?,
                gallery_split: split(&e.gallery_split)?,
                probe_split: split(&e.probe_split)?,
            },
        })
    }

    pub fn second_target_synth(&self) -> SynthConfig {
        SynthConfig {
            target_name: self.reproduce.second_target_name.clone(),
            nir_weights: self.reproduce.second_nir_weights,
            ..self.synth.clone()
        }
    }
}

fn parse<T: FromStr>(value: &str) -> Result<(), String>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map(|_| ()).map_err(|e| e.to_string())
}

fn exists(path: &Path) -> Result<(), String> {
    if path.exists() {
        Ok(())
    } else {
        Err(format!("path {} does not exist", path.display()))
    }
}

fn far_in_range(far: f64) -> Result<(), String> {
    if far > 0.0 && far < 1.0 {
        Ok(())
    } else {
        Err(format!("must lie in (0, 1), got {far}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(set: &[&str]) -> anyhow::Result<ExperimentConfig> {
        ExperimentConfig::resolve(&Overrides {
            set: set.iter().map(|s| s.to_string()).collect(),
            ..Overrides::default()
        })
    }

    #[test]
    fn defaults_validate() {
        let cfg = resolve(&[]).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.backbone.input_size, cfg.synth.image_size);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = resolve(&[]).unwrap();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_take_typed_values() {
        let cfg = resolve(&[
            "finetune.lambda=0.5",
            "pretrain.red_aug=false",
            "eval.fars=[0.01, 0.1]",
            "finetune.classifier=subspace",
            "synth.nir_weights=[1.0, 0.0, 0.0]",
        ])
        .unwrap();
        assert_eq!(cfg.finetune.lambda, 0.5);
        assert!(!cfg.pretrain.red_aug);
        assert_eq!(cfg.eval.fars, vec![0.01, 0.1]);
        assert_eq!(cfg.finetune.classifier, "subspace");
        assert_eq!(cfg.synth.nir_weights, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "seed = 5\nname = \"file\"\n[finetune]\nlambda = 0.25\nepochs = 3\n").unwrap();
        let cfg = ExperimentConfig::resolve(&Overrides {
            file: Some(path),
            set: vec!["finetune.lambda=0.75".into()],
            seed: Some(9),
            out: Some("elsewhere".into()),
        })
        .unwrap();
        assert_eq!(cfg.name, "file");
        assert_eq!(cfg.finetune.epochs, 3);
        assert_eq!(cfg.finetune.lambda, 0.75);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.synth.seed, 9);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.pretrain, PretrainSection::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(resolve(&["finetune.lamda=1"]).is_err());
        assert!(resolve(&["finetune=3", "finetune.lambda=1"]).is_err());
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = resolve(&[]).unwrap();
        let b = ExperimentConfig {
            out_dir: "other".into(),
            ..a.clone()
        };
        let c = resolve(&["finetune.lambda=0"]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
        assert!(a.run_dir().ends_with(Path::new("default").join(&a.hash()[..16])));
    }

    #[test]
    fn invalid_classifier_names_field_and_allowed_values() {
        let err = resolve(&["finetune.classifier=median"]).unwrap().validate().unwrap_err();
        let text = err.to_string();
        assert!(text.contains("finetune.classifier"), "{text}");
        assert!(text.contains("median") && text.contains("naive, mean, subspace"), "{text}");
    }

    #[test]
    fn every_violation_is_listed() {
        let cfg = resolve(&[
            "finetune.classifier=median",
            "finetune.regularizer=l1",
            "eval.probe_modality=SWIR",
            "pretrain.epochs=0",
            "data.source=/definitely/not/here.csv",
            "reproduce.seeds=[]",
        ])
        .unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.0.len(), 6, "{err}");
        for field in [
            "finetune.classifier",
            "finetune.regularizer",
            "eval.probe_modality",
            "pretrain:",
            "data.source",
            "reproduce.seeds",
        ] {
            assert!(err.0.iter().any(|e| e.starts_with(field)), "missing {field} in {err}");
        }
    }

    #[test]
    fn regime_reflects_section() {
        let cfg = resolve(&["finetune.regularizer=rct", "finetune.rct_weight=2.5", "finetune.lambda=0"]).unwrap();
        let r = cfg.regime().unwrap();
        assert_eq!(r.regularizer, Regularizer::Rct);
        assert_eq!(r.rct_weight, 2.5);
        assert_eq!(r.lambda, 0.0);
    }

    #[test]
    fn malformed_override_is_an_error() {
        assert!(resolve(&["finetune.lambda"]).is_err());
        assert!(resolve(&["finetune..lambda=1"]).is_err());
    }
}
