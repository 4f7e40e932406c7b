//! Instability analytics: one-way ANOVA effect size, Benjamini-Hochberg
//! adjustment, per-category extremes, model rank matrices and the
//! one-sample t-test used by the contrast analyses.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};
use thiserror::Error;

use crate::metrics::ScoreMetric;
use crate::prompt::PromptVariant;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("no values")]
    Empty,
    #[error("all observations are equal")]
    DegenerateZeroVariance,
    #[error("need at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("group {group} has {len} replicates, need at least two")]
    TooFewReplicates { group: usize, len: usize },
    #[error("p-value {value} at position {index} is outside [0, 1]")]
    OutOfRangeP { index: usize, value: f64 },
    #[error("model `{model}` has no score for variant `{variant}`")]
    MissingCell { model: String, variant: String },
    #[error("non-finite observation at position {0}")]
    NonFinite(usize),
    #[error("need at least two observations, got {0}")]
    InsufficientObservations(usize),
}

/// Raw one-way ANOVA quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneWay {
    pub ss_between: f64,
    pub ss_within: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub f: f64,
    pub eta_squared: f64,
    pub p: f64,
    pub unbalanced: bool,
}

pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<OneWay, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    let mut offset = 0;
    for (g, values) in groups.iter().enumerate() {
        if values.len() < 2 {
            return Err(StatsError::TooFewReplicates { group: g, len: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(offset + i));
        }
        offset += values.len();
    }
    let first = groups[0][0];
    if groups.iter().flatten().all(|&v| v == first) {
        return Err(StatsError::DegenerateZeroVariance);
    }

    let n_total: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n_total as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for values in groups {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        ss_between += values.len() as f64 * (mean - grand).powi(2);
        ss_within += values.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    }
    let df_between = groups.len() - 1;
    let df_within = n_total - groups.len();
    let (f, p) = if ss_within == 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = (ss_between / df_between as f64) / (ss_within / df_within as f64);
        let dist = FisherSnedecor::new(df_between as f64, df_within as f64).expect("positive degrees of freedom");
        (f, dist.sf(f).clamp(0.0, 1.0))
    };
    let unbalanced = groups.iter().any(|g| g.len() != groups[0].len());
    Ok(OneWay {
        ss_between,
        ss_within,
        df_between,
        df_within,
        f,
        eta_squared: (ss_between / (ss_between + ss_within)).clamp(0.0, 1.0),
        p,
        unbalanced,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub model: String,
    pub category: String,
    pub metric: ScoreMetric,
    pub groups: usize,
    /// Smallest group size; see `unbalanced`.
    pub replicates_per_group: usize,
    pub unbalanced: bool,
    #[serde(rename = "F")]
    pub f: f64,
    pub eta_squared: f64,
    pub p: f64,
    /// BH-adjusted p, filled by [`adjust_anova_q`].
    pub q: Option<f64>,
}

/// η² of `scores` grouped by prompt variant.
pub fn anova_eta_squared(model: &str, category: &str, metric: ScoreMetric, scores: &[Vec<f64>]) -> Result<AnovaResult, StatsError> {
    let one = one_way_anova(scores)?;
    if one.unbalanced {
        tracing::warn!(model, category, ?metric, "unbalanced replicate counts");
    }
    Ok(AnovaResult {
        model: model.into(),
        category: category.into(),
        metric,
        groups: scores.len(),
        replicates_per_group: scores.iter().map(Vec::len).min().unwrap_or(0),
        unbalanced: one.unbalanced,
        f: one.f,
        eta_squared: one.eta_squared,
        p: one.p,
        q: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BhEntry {
    pub q: f64,
    pub significant: bool,
}

/// Step-up adjusted p-values in input order.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some((index, &value)) = p_values.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::OutOfRangeP { index, value });
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut q = vec![0.0; m];
    let mut running = 1.0_f64;
    for (j, &i) in order.iter().enumerate().rev() {
        running = running.min(p_values[i] * m as f64 / (j + 1) as f64);
        q[i] = running;
    }
    Ok(q)
}

/// Significant iff `q <= alpha`.
pub fn benjamini_hochberg(p_values: &[f64], alpha: f64) -> Result<Vec<BhEntry>, StatsError> {
    Ok(bh_adjust(p_values)?.into_iter().map(|q| BhEntry { q, significant: q <= alpha }).collect())
}

/// Fills `q` on every result, adjusting separately within each metric.
pub fn adjust_anova_q(results: &mut [AnovaResult]) {
    let mut metrics: Vec<ScoreMetric> = results.iter().map(|r| r.metric).collect();
    metrics.sort();
    metrics.dedup();
    for metric in metrics {
        let idx: Vec<usize> = (0..results.len()).filter(|&i| results[i].metric == metric).collect();
        let p: Vec<f64> = idx.iter().map(|&i| results[i].p).collect();
        let q = bh_adjust(&p).expect("ANOVA p-values are in range");
        for (&i, q) in idx.iter().zip(q) {
            results[i].q = Some(q);
        }
    }
}

/// Linear interpolation between closest ranks on sorted data, `h = (n-1)p`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const PERCENTILE_POINTS: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 0.90];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub metric: ScoreMetric,
    /// η² at 10th, 25th, 50th, 75th, 90th percentile.
    pub percentiles: [f64; 5],
    pub significant: usize,
    pub total: usize,
}

/// Percentiles of η² for one metric and the count with `q < alpha`.
///
/// Uses the stored `q` when every result has one, otherwise adjusts the
/// p-values of this metric's results.
pub fn eta_percentile_table(results: &[AnovaResult], metric: ScoreMetric, alpha: f64) -> Result<PercentileRow, StatsError> {
    let rows: Vec<&AnovaResult> = results.iter().filter(|r| r.metric == metric).collect();
    if rows.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut eta: Vec<f64> = rows.iter().map(|r| r.eta_squared).collect();
    eta.sort_by(f64::total_cmp);
    let q: Vec<f64> = match rows.iter().map(|r| r.q).collect::<Option<Vec<f64>>>() {
        Some(q) => q,
        None => bh_adjust(&rows.iter().map(|r| r.p).collect::<Vec<_>>())?,
    };
    Ok(PercentileRow {
        metric,
        percentiles: PERCENTILE_POINTS.map(|p| percentile(&eta, p)),
        significant: q.iter().filter(|&&q| q < alpha).count(),
        total: rows.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum Ratio {
    Finite(f64),
    Infinity,
    NotApplicable,
}

impl Ratio {
    pub fn of(max_entry: f64, min_entry: f64) -> Ratio {
        match (max_entry == 0.0, min_entry == 0.0) {
            (true, true) => Ratio::NotApplicable,
            (false, true) => Ratio::Infinity,
            _ => Ratio::Finite(max_entry / min_entry),
        }
    }
}

/// `+5.00×`, `∞`, `N/A`.
impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Finite(r) => write!(f, "{r:+.2}×"),
            Ratio::Infinity => f.write_str("∞"),
            Ratio::NotApplicable => f.write_str("N/A"),
        }
    }
}

/// Signed score with three decimals, e.g. `+0.111`, `-0.005`.
pub fn format_score(v: f64) -> String {
    // keep "+0.000" rather than "-0.000" for values that round to zero
    let s = format!("{v:+.3}");
    if s == "-0.000" {
        "+0.000".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeEntry {
    pub model: String,
    pub category: String,
    pub metric: ScoreMetric,
    pub max_entry: f64,
    pub min_entry: f64,
    pub ratio: Ratio,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per category, the replicate-averaged variant scores with the largest
/// and smallest magnitude. Ties keep the first variant in input order.
/// Categories with no variants are skipped.
pub fn extreme_table(
    model: &str,
    metric: ScoreMetric,
    scores: &IndexMap<String, Vec<(PromptVariant, Vec<f64>)>>,
) -> Vec<ExtremeEntry> {
    scores
        .iter()
        .filter_map(|(category, variants)| {
            let means: Vec<f64> = variants.iter().filter(|(_, r)| !r.is_empty()).map(|(_, r)| mean(r)).collect();
            let first = *means.first()?;
            let (mut max_entry, mut min_entry) = (first, first);
            for &m in &means[1..] {
                if m.abs() > max_entry.abs() {
                    max_entry = m;
                }
                if m.abs() < min_entry.abs() {
                    min_entry = m;
                }
            }
            Some(ExtremeEntry {
                model: model.into(),
                category: category.clone(),
                metric,
                max_entry,
                min_entry,
                ratio: Ratio::of(max_entry, min_entry),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMatrix {
    pub category: String,
    pub metric: ScoreMetric,
    pub variants: Vec<PromptVariant>,
    /// Column order, sorted by name.
    pub models: Vec<String>,
    /// `ranks[v][m]` is the rank of `models[m]` under `variants[v]`, 1 = fairest.
    pub ranks: Vec<Vec<usize>>,
    /// `tied[v][m]` is set when the model's score equals another model's
    /// under that variant and the name decided the order.
    pub tied: Vec<Vec<bool>>,
}

/// Sort key where smaller is fairer: |score| for BBQ metrics, −score for
/// the awareness metrics.
pub fn fairness_key(metric: ScoreMetric, score: f64) -> f64 {
    match metric {
        ScoreMetric::BbqDis | ScoreMetric::BbqAmb => score.abs(),
        ScoreMetric::DiffAware | ScoreMetric::CtxtAware => -score,
    }
}

pub fn rank_matrix(
    category: &str,
    metric: ScoreMetric,
    variants: &[PromptVariant],
    scores: &IndexMap<String, IndexMap<PromptVariant, f64>>,
) -> Result<RankMatrix, StatsError> {
    let mut models: Vec<String> = scores.keys().cloned().collect();
    models.sort();
    let mut ranks = Vec::with_capacity(variants.len());
    let mut tied = Vec::with_capacity(variants.len());
    for variant in variants {
        let keys: Vec<f64> = models
            .iter()
            .map(|m| {
                scores[m]
                    .get(variant)
                    .map(|&s| fairness_key(metric, s))
                    .ok_or_else(|| StatsError::MissingCell { model: m.clone(), variant: variant.to_string() })
            })
            .collect::<Result<_, _>>()?;
        let mut order: Vec<usize> = (0..models.len()).collect();
        // models are already name-sorted, so a stable sort breaks ties by name
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
        let mut row = vec![0; models.len()];
        for (pos, &m) in order.iter().enumerate() {
            row[m] = pos + 1;
        }
        let tie_row = (0..models.len()).map(|m| (0..models.len()).any(|o| o != m && keys[o] == keys[m])).collect();
        ranks.push(row);
        tied.push(tie_row);
    }
    Ok(RankMatrix { category: category.into(), metric, variants: variants.to_vec(), models, ranks, tied })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub t: f64,
    pub p: f64,
}

/// Two-sided one-sample t-test of `mean == 0`, df = n − 1.
///
/// With zero spread the statistic is 0 (p = 1) for a zero mean and
/// ±∞ (p = 0) otherwise.
pub fn one_sample_t_test(observations: &[f64]) -> Result<TTest, StatsError> {
    let n = observations.len();
    if n < 2 {
        return Err(StatsError::InsufficientObservations(n));
    }
    if let Some(i) = observations.iter().position(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(i));
    }
    let mean = mean(observations);
    let var = observations.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let (t, p) = if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (sd / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
        (t, (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
    };
    Ok(TTest { n, mean, sd, t, p })
}
