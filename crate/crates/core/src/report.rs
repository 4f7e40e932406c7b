//! CSV and JSONL report emitters.
//!
//! Every row carries `config_digest` and `code_version` columns. Floats
//! are written with Rust's shortest round-trip formatting so reruns are
//! byte-identical. Table-style files use fixed decimals: η² percentiles two
//! places, extremes three places with an explicit sign, ratios two places
//! with a trailing `×` (`∞` and `N/A` for the degenerate cases).

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::metrics::{ContrastResult, CrossBenchmarkRow, ShiftRateCell};
use crate::stats::{format_score, AnovaResult, ExtremeEntry, PercentileRow, RankMatrix};
use crate::CODE_VERSION;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

pub struct ReportWriter {
    dir: PathBuf,
    config_digest: String,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl ReportWriter {
    pub fn new(dir: &Path, config_digest: &str) -> Result<Self, ReportError> {
        fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
        Ok(Self { dir: dir.to_path_buf(), config_digest: config_digest.to_string() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf, ReportError> {
        let path = self.dir.join(name);
        let csv_err = |source| ReportError::Csv { path: path.clone(), source };
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        let mut full: Vec<&str> = header.to_vec();
        full.extend(["config_digest", "code_version"]);
        w.write_record(&full).map_err(csv_err)?;
        for row in rows {
            let mut r: Vec<&str> = row.iter().map(String::as_str).collect();
            r.extend([self.config_digest.as_str(), CODE_VERSION]);
            w.write_record(&r).map_err(csv_err)?;
        }
        w.flush().map_err(|source| ReportError::Io { path: path.clone(), source })?;
        Ok(path)
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, items: &[T]) -> Result<PathBuf, ReportError> {
        let path = self.dir.join(name);
        let mut out = String::new();
        for item in items {
            let mut v = serde_json::to_value(item).expect("serializable report row");
            if let Value::Object(map) = &mut v {
                map.insert("config_digest".into(), Value::String(self.config_digest.clone()));
                map.insert("code_version".into(), Value::String(CODE_VERSION.into()));
            }
            out.push_str(&v.to_string());
            out.push('\n');
        }
        fs::write(&path, out).map_err(|source| ReportError::Io { path: path.clone(), source })?;
        Ok(path)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf, ReportError> {
        let path = self.dir.join(name);
        let body = format!("{text}\nconfig_digest: {}\ncode_version: {CODE_VERSION}\n", self.config_digest);
        fs::write(&path, body).map_err(|source| ReportError::Io { path: path.clone(), source })?;
        Ok(path)
    }
}

pub fn anova_rows(results: &[AnovaResult]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let header = vec!["model", "category", "metric", "groups", "replicates_per_group", "unbalanced", "F", "eta_squared", "p", "q"];
    let rows = results
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.category.clone(),
                r.metric.to_string(),
                r.groups.to_string(),
                r.replicates_per_group.to_string(),
                r.unbalanced.to_string(),
                r.f.to_string(),
                r.eta_squared.to_string(),
                r.p.to_string(),
                opt(&r.q),
            ]
        })
        .collect();
    (header, rows)
}

/// Percentiles to two decimals and `significant/total`.
pub fn percentile_rows(rows: &[PercentileRow]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let header = vec!["metric", "p10", "p25", "p50", "p75", "p90", "bh_significant"];
    let body = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.metric.to_string()];
            v.extend(r.percentiles.iter().map(|p| format!("{p:.2}")));
            v.push(format!("{}/{}", r.significant, r.total));
            v
        })
        .collect();
    (header, body)
}

pub fn extreme_rows(entries: &[ExtremeEntry]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let header = vec!["model", "category", "metric", "max_entry", "min_entry", "ratio"];
    let rows = entries
        .iter()
        .map(|e| {
            vec![e.model.clone(), e.category.clone(), e.metric.to_string(), format_score(e.max_entry), format_score(e.min_entry), e.ratio.to_string()]
        })
        .collect();
    (header, rows)
}

/// One row per variant, one column per model.
pub fn rank_rows(m: &RankMatrix) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["variant".to_string()];
    header.extend(m.models.iter().cloned());
    let rows = m
        .variants
        .iter()
        .zip(m.ranks.iter().zip(&m.tied))
        .map(|(v, (ranks, tied))| {
            let mut row = vec![v.to_string()];
            row.extend(ranks.iter().zip(tied).map(|(r, t)| if *t { format!("{r}*") } else { r.to_string() }));
            row
        })
        .collect();
    (header, rows)
}

pub fn shift_rows(cells: &[ShiftRateCell]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let header = vec![
        "role", "demographics", "persona", "instantiation", "reveal", "model", "benchmark", "subcategory", "numerator", "denominator", "lambda",
    ];
    let rows = cells
        .iter()
        .map(|c| {
            vec![
                c.role.as_str().to_string(),
                opt(&c.demographics),
                opt(&c.persona),
                c.instantiation.as_str().to_string(),
                c.reveal.as_str().to_string(),
                c.model.clone(),
                c.benchmark.to_string(),
                c.subcategory.clone(),
                c.numerator.to_string(),
                c.denominator.to_string(),
                c.lambda.map_or_else(|| "undefined".to_string(), |l| l.to_string()),
            ]
        })
        .collect();
    (header, rows)
}

pub fn contrast_rows(results: &[ContrastResult]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let header = vec!["contrast", "model", "axis", "instantiation", "benchmark", "pooling", "n", "mean_delta", "t", "p", "direction"];
    let rows = results
        .iter()
        .map(|r| {
            vec![
                r.contrast.to_string(),
                r.stratum.model.clone(),
                r.stratum.axis.clone(),
                r.stratum.instantiation.map(|i| i.as_str().to_string()).unwrap_or_default(),
                r.stratum.benchmark.to_string(),
                serde_json::to_value(r.pooling).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                r.n.to_string(),
                r.mean_delta.to_string(),
                r.t.to_string(),
                r.p.to_string(),
                r.contrast.direction(r.mean_delta).to_string(),
            ]
        })
        .collect();
    (header, rows)
}

pub fn cross_rows(rows: &[CrossBenchmarkRow]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let header = vec!["contrast", "model", "axis", "instantiation", "per_benchmark", "consistent"];
    let body = rows
        .iter()
        .map(|r| {
            let per: Vec<String> = r.per_benchmark.iter().map(|(b, m, p)| format!("{b}:{m:+.4}:p={p:.4}")).collect();
            vec![
                r.contrast.to_string(),
                r.model.clone(),
                r.axis.clone(),
                r.instantiation.map(|i| i.as_str().to_string()).unwrap_or_default(),
                per.join(";"),
                r.consistent.to_string(),
            ]
        })
        .collect();
    (header, body)
}
