//! Persisted outputs. Every file carries the config hash of the run that
//! wrote it: JSON reports as a field, CSVs as a leading comment line.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context as _;
use nirvis::trainer::MetricsRecord;
use serde::Serialize;

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const HASH_PREFIX: &str = "# config_hash: ";

#[derive(Debug, Serialize)]
pub struct Report<'a, T: Serialize> {
    pub command: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
    pub result: &'a T,
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_report<T: Serialize>(dir: &Path, command: &str, hash: &str, seed: u64, result: &T) -> anyhow::Result<()> {
    write_json(
        &dir.join(REPORT_FILE),
        &Report {
            command,
            config_hash: hash,
            seed,
            result,
        },
    )
}

/// CSV preceded by a `# config_hash:` line.
pub fn write_csv<S: AsRef<str>>(path: &Path, hash: &str, header: &[S], rows: &[Vec<String>]) -> anyhow::Result<()> {
    let mut buf = format!("{HASH_PREFIX}{hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header.iter().map(|h| h.as_ref()))?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
    }
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`]: (hash, header, rows).
pub fn read_csv(path: &Path) -> anyhow::Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let hash = first
        .strip_prefix(HASH_PREFIX)
        .with_context(|| format!("{}: missing config hash line", path.display()))?
        .to_string();
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()?;
    Ok((hash, header, rows))
}

/// One JSON object per epoch, each tagged with the config hash.
pub fn write_metrics(path: &Path, hash: &str, records: &[MetricsRecord]) -> anyhow::Result<()> {
    let mut text = String::new();
    for record in records {
        let mut value = serde_json::to_value(record)?;
        value
            .as_object_mut()
            .expect("metrics record is an object")
            .insert("config_hash".into(), hash.into());
        text.push_str(&value.to_string());
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn fmt_metric(x: f64) -> String {
    format!("{x:.6}")
}
