//! Desk-scale analogues of the three result tables: pre-training variants,
//! fine-tuning regimes, and the cross-dataset grid, each repeated per seed
//! on freshly generated synthetic data, followed by the direction checks.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::Context as _;
use nirvis::datamodel::DatasetManifest;
use nirvis::embedder::{save_checkpoint, Checkpoint};
use nirvis::eval::{cross_dataset_matrix, evaluate_on, CrossMatrix, EvalConfig, Protocol};
use nirvis::synthgen::{generate, generate_target};
use nirvis::trainer::{finetune, pretrain, ClassifierInit, Regime, TrainConfig, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::artifacts::{fmt_metric, write_csv, write_json, write_metrics, write_report};
use crate::commands::Run;
use crate::config::ExperimentConfig;

pub const TABLE2_COLUMNS: [&str; 3] = ["base", "+red aug.", "+target"];
pub const TABLE3_ROWS: [&str; 7] = [
    "zero-shot",
    "naive",
    "rct",
    "mean λ=0",
    "mean λ=1",
    "subspace λ=0",
    "subspace λ=1",
];

pub const CHECK_RED_AUG: &str = "red augmentation raises zero-shot NIR-VIS TAR";
pub const CHECK_NAIVE: &str = "naive fine-tuning lowers source VIS-VIS TAR";
pub const CHECK_MEAN_TARGET: &str = "mean λ=1 raises target NIR-VIS TAR over zero-shot";
pub const CHECK_MEAN_SOURCE: &str = "mean λ=1 keeps source VIS-VIS TAR within 0.02";
pub const CHECK_CROSS: &str = "λ=1 matches or beats λ=0 on the unseen dataset";

/// Allowed drop of source TAR under (mean, λ=1) fine-tuning.
pub const SOURCE_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainColumns {
    /// NIR-VIS TAR on the first target, ordered as [`TABLE2_COLUMNS`].
    pub tar: [f64; 3],
    pub rank1: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub method: String,
    /// NIR-VIS on the first target.
    pub target_tar: f64,
    /// VIS-VIS on the source gallery/probe splits.
    pub source_tar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTables {
    pub seed: u64,
    pub table2: PretrainColumns,
    pub table3: Vec<RegimeRow>,
    pub table4: CrossMatrix,
    /// Weight checksum of every trained checkpoint, by label.
    pub checksums: BTreeMap<String, String>,
}

impl SeedTables {
    pub fn regime(&self, method: &str) -> Option<&RegimeRow> {
        self.table3.iter().find(|r| r.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Median over seeds of the quantity under test.
    pub value: f64,
    /// Median over seeds of what it is compared against.
    pub reference: f64,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: median {:.4} vs {:.4}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.reference
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablesReport {
    pub far: f64,
    pub first_target: String,
    pub second_target: String,
    pub seeds: Vec<SeedTables>,
    pub checks: Vec<Check>,
}

impl TablesReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of an empty set");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn row_label(dataset: &str, lambda: u8) -> String {
    format!("{dataset} λ={lambda}")
}

/// Mean TAR of the λ=`lambda` rows on the dataset each was not fine-tuned on.
pub fn unseen_tar(t: &SeedTables, first: &str, second: &str, lambda: u8) -> f64 {
    let a = t.table4.get(&row_label(first, lambda), second).expect("cross row present");
    let b = t.table4.get(&row_label(second, lambda), first).expect("cross row present");
    0.5 * (a + b)
}

/// Direction checks, each comparing medians over seeds.
pub fn direction_checks(seeds: &[SeedTables], first: &str, second: &str) -> Vec<Check> {
    let over = |f: &dyn Fn(&SeedTables) -> f64| median(&seeds.iter().map(f).collect::<Vec<_>>());
    let regime = |m: &'static str, target: bool| {
        over(&move |t: &SeedTables| {
            let r = t.regime(m).expect("regime row present");
            if target {
                r.target_tar
            } else {
                r.source_tar
            }
        })
    };
    let base = over(&|t| t.table2.tar[0]);
    let red = over(&|t| t.table2.tar[1]);
    let zero_src = regime("zero-shot", false);
    let zero_tgt = regime("zero-shot", true);
    let naive_src = regime("naive", false);
    let mean_tgt = regime("mean λ=1", true);
    let mean_src = regime("mean λ=1", false);
    let unseen0 = over(&|t| unseen_tar(t, first, second, 0));
    let unseen1 = over(&|t| unseen_tar(t, first, second, 1));
    let check = |name: &str, passed: bool, value: f64, reference: f64| Check {
        name: name.to_string(),
        passed,
        value,
        reference,
    };
    vec![
        check(CHECK_RED_AUG, red >= base, red, base),
        check(CHECK_NAIVE, naive_src < zero_src, naive_src, zero_src),
        check(CHECK_MEAN_TARGET, mean_tgt > zero_tgt, mean_tgt, zero_tgt),
        check(CHECK_MEAN_SOURCE, mean_src >= zero_src - SOURCE_TOLERANCE, mean_src, zero_src),
        check(CHECK_CROSS, unseen1 >= unseen0, unseen1, unseen0),
    ]
}

struct SeedRun<'a> {
    dir: &'a Path,
    hash: &'a str,
    checksums: BTreeMap<String, String>,
}

impl SeedRun<'_> {
    fn keep(&mut self, label: &str, mut outcome: TrainOutcome) -> anyhow::Result<Checkpoint> {
        outcome.checkpoint.config_hash = Some(self.hash.to_string());
        save_checkpoint(&outcome.checkpoint, self.dir.join("checkpoints").join(label))?;
        write_metrics(&self.dir.join("metrics").join(format!("{label}.jsonl")), self.hash, &outcome.metrics)?;
        self.checksums.insert(label.to_string(), outcome.checkpoint.meta().checksum);
        Ok(outcome.checkpoint)
    }
}

fn tar(ckpt: &Checkpoint, dataset: &DatasetManifest, cfg: &EvalConfig, protocol: Protocol) -> anyhow::Result<f64> {
    let cfg = EvalConfig {
        protocol,
        ..cfg.clone()
    };
    Ok(evaluate_on(ckpt, dataset, &cfg)?.tar_at[0].tar)
}

/// Every table for one seed. Data, checkpoints and metric logs go under `dir`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path, hash: &str) -> anyhow::Result<SeedTables> {
    let started = Instant::now();
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg.synth.seed = seed;
    let data = dir.join("data");
    let (source, first) = generate(&cfg.synth, &data)?;
    let second = generate_target(&cfg.second_target_synth(), &data)?;
    let eval = EvalConfig {
        fars: vec![cfg.reproduce.far],
        ranks: vec![1],
        block_size: cfg.eval.block_size,
        protocol: Protocol::HETEROGENEOUS,
    };
    let mut run = SeedRun {
        dir,
        hash,
        checksums: BTreeMap::new(),
    };

    let pre = cfg.pretrain_config()?;
    let without_red = TrainConfig {
        red_aug: false,
        ..pre.clone()
    };
    let with_red = TrainConfig { red_aug: true, ..pre };
    let base = run.keep("pretrain_base", pretrain(&without_red, &cfg.backbone, &source, None)?)?;
    let red = run.keep("pretrain_red", pretrain(&with_red, &cfg.backbone, &source, None)?)?;
    let joint = run.keep("pretrain_joint", pretrain(&with_red, &cfg.backbone, &source, Some(&first))?)?;
    log::info!("seed {seed}: pre-training done after {:.1}s", started.elapsed().as_secs_f64());

    let mut tar2 = [0.0; 3];
    let mut rank2 = [0.0; 3];
    for (k, ckpt) in [&base, &red, &joint].into_iter().enumerate() {
        let report = evaluate_on(ckpt, &first, &eval)?;
        tar2[k] = report.tar_at[0].tar;
        rank2[k] = report.rank_n[0].accuracy;
    }

    let ft = cfg.finetune_config()?;
    let regime = |classifier, lambda| Regime {
        stratified_mean: cfg.finetune.stratified_mean,
        ..Regime::new(classifier, lambda)
    };
    let regimes: [(&str, &Checkpoint, Regime); 6] = [
        ("naive", &red, regime(ClassifierInit::Naive, 0.0)),
        ("rct", &red, regime(ClassifierInit::Mean, 0.0).with_rct(cfg.finetune.rct_weight)),
        ("mean_l0", &red, regime(ClassifierInit::Mean, 0.0)),
        ("mean_l1", &red, regime(ClassifierInit::Mean, 1.0)),
        ("subspace_l0", &joint, regime(ClassifierInit::Subspace, 0.0)),
        ("subspace_l1", &joint, regime(ClassifierInit::Subspace, 1.0)),
    ];
    let mut table3 = vec![RegimeRow {
        method: TABLE3_ROWS[0].to_string(),
        target_tar: tar(&red, &first, &eval, Protocol::HETEROGENEOUS)?,
        source_tar: tar(&red, &source, &eval, Protocol::VISIBLE)?,
    }];
    let mut tuned = BTreeMap::new();
    for ((label, start, regime), method) in regimes.into_iter().zip(&TABLE3_ROWS[1..]) {
        let outcome = finetune(&ft, start, &first, Some(&source), &regime).with_context(|| format!("fine-tuning {label}"))?;
        let ckpt = run.keep(label, outcome)?;
        table3.push(RegimeRow {
            method: method.to_string(),
            target_tar: tar(&ckpt, &first, &eval, Protocol::HETEROGENEOUS)?,
            source_tar: tar(&ckpt, &source, &eval, Protocol::VISIBLE)?,
        });
        tuned.insert(label, ckpt);
    }
    for lambda in [0u8, 1] {
        let label = format!("second_mean_l{lambda}");
        let outcome = finetune(&ft, &red, &second, Some(&source), &regime(ClassifierInit::Mean, f64::from(lambda)))?;
        let ckpt = run.keep(&label, outcome)?;
        tuned.insert(if lambda == 0 { "second_l0" } else { "second_l1" }, ckpt);
    }
    let rows = vec![
        (row_label(&first.name, 0), &tuned["mean_l0"]),
        (row_label(&first.name, 1), &tuned["mean_l1"]),
        (row_label(&second.name, 0), &tuned["second_l0"]),
        (row_label(&second.name, 1), &tuned["second_l1"]),
    ];
    let datasets = vec![(first.name.clone(), &first), (second.name.clone(), &second)];
    let table4 = cross_dataset_matrix(Some(&red), &rows, &datasets, cfg.reproduce.far, &eval)?;
    log::info!("seed {seed}: all tables after {:.1}s", started.elapsed().as_secs_f64());

    Ok(SeedTables {
        seed,
        table2: PretrainColumns { tar: tar2, rank1: rank2 },
        table3,
        table4,
        checksums: run.checksums,
    })
}

pub fn cmd_reproduce_tables(run: &Run) -> anyhow::Result<TablesReport> {
    let cfg = &run.cfg;
    let mut seeds = Vec::new();
    for &seed in &cfg.reproduce.seeds {
        let dir = run.dir.join(format!("seed_{seed}"));
        let tables = run_seed(cfg, seed, &dir, &run.hash)?;
        write_json(&dir.join("tables.json"), &tables)?;
        seeds.push(tables);
    }
    let first = cfg.synth.target_name.clone();
    let second = cfg.reproduce.second_target_name.clone();
    let checks = direction_checks(&seeds, &first, &second);
    let report = TablesReport {
        far: cfg.reproduce.far,
        first_target: first,
        second_target: second,
        seeds,
        checks,
    };
    write_tables(&run.dir, &run.hash, &report)?;
    write_report(&run.dir, "reproduce-tables", &run.hash, cfg.seed, &report)?;
    Ok(report)
}

/// `table2.csv`, `table3.csv`, `table4.csv` and `checks.csv`, per seed plus
/// a `median` block.
pub fn write_tables(dir: &Path, hash: &str, report: &TablesReport) -> anyhow::Result<()> {
    let far = format!("{:e}", report.far);
    let seeds = &report.seeds;
    let med = |f: &dyn Fn(&SeedTables) -> f64| fmt_metric(median(&seeds.iter().map(f).collect::<Vec<_>>()));

    let mut header2 = vec!["seed".to_string(), "metric".into()];
    header2.extend(TABLE2_COLUMNS.iter().map(|c| c.to_string()));
    let tar_name = format!("TAR@FAR={far}");
    let mut rows2 = Vec::new();
    for t in seeds {
        for (name, values) in [(&tar_name, &t.table2.tar), (&"rank-1".to_string(), &t.table2.rank1)] {
            let mut row = vec![t.seed.to_string(), name.clone()];
            row.extend(values.iter().map(|&v| fmt_metric(v)));
            rows2.push(row);
        }
    }
    for (k, name) in [(0usize, &tar_name), (1, &"rank-1".to_string())] {
        let mut row = vec!["median".to_string(), name.clone()];
        row.extend((0..3).map(|c| {
            med(&|t: &SeedTables| if k == 0 { t.table2.tar[c] } else { t.table2.rank1[c] })
        }));
        rows2.push(row);
    }
    write_csv(&dir.join("table2.csv"), hash, &header2, &rows2)?;

    let header3 = [
        "seed".to_string(),
        "method".into(),
        format!("target NIR-VIS TAR@FAR={far}"),
        format!("source VIS-VIS TAR@FAR={far}"),
    ];
    let mut rows3 = Vec::new();
    for t in seeds {
        for r in &t.table3 {
            rows3.push(vec![t.seed.to_string(), r.method.clone(), fmt_metric(r.target_tar), fmt_metric(r.source_tar)]);
        }
    }
    for method in TABLE3_ROWS {
        rows3.push(vec![
            "median".into(),
            method.into(),
            med(&|t: &SeedTables| t.regime(method).expect("row").target_tar),
            med(&|t: &SeedTables| t.regime(method).expect("row").source_tar),
        ]);
    }
    write_csv(&dir.join("table3.csv"), hash, &header3, &rows3)?;

    let first = &seeds.first().context("no seeds")?.table4;
    let mut header4 = vec!["seed".to_string(), "fine-tuned on".into()];
    header4.extend(first.columns.iter().cloned());
    let mut rows4 = Vec::new();
    for t in seeds {
        for (name, values) in t.table4.rows.iter().zip(&t.table4.values) {
            let mut row = vec![t.seed.to_string(), name.clone()];
            row.extend(values.iter().map(|&v| fmt_metric(v)));
            rows4.push(row);
        }
    }
    for (i, name) in first.rows.iter().enumerate() {
        let mut row = vec!["median".to_string(), name.clone()];
        row.extend((0..first.columns.len()).map(|j| med(&|t: &SeedTables| t.table4.values[i][j])));
        rows4.push(row);
    }
    write_csv(&dir.join("table4.csv"), hash, &header4, &rows4)?;

    let rows: Vec<Vec<String>> = report
        .checks
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                if c.passed { "PASS" } else { "FAIL" }.into(),
                fmt_metric(c.value),
                fmt_metric(c.reference),
            ]
        })
        .collect();
    write_csv(&dir.join("checks.csv"), hash, &["check", "result", "value", "reference"], &rows)?;
    Ok(())
}
