//! The five stages behind the command line: ingest, instability,
//! conversations, analyze and report.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! corpus/<benchmark>.pool.jsonl       every loaded question
//! corpus/<benchmark>.sample.jsonl     the sampled questions
//! corpus/manifest.json
//! instability/<model>__<benchmark>.jsonl   one record per answered cell
//! store/                                   transcript store
//! reports/                                 CSV, JSONL and summary.txt
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, EndpointConfig, RunConfig};
use crate::conversation::{
    ask_with_retry, resume_conversation, AskError, Clock, ConversationError, ConversationKey, ConversationSpec, Instantiation,
    RunOptions, TranscriptRow,
};
use crate::corpus::{load_benchmark, read_corpus, sample_questions, write_corpus, Benchmark, CorpusError, QuestionInstance};
use crate::gateway::{CompletionBackend, GatewayError, HttpBackend, RequestContext, ScriptedBackend};
use crate::metrics::{
    contrast_demo_pair_iden, contrast_demo_vs_null_iden, contrast_inst_base, contrast_reveal_base, cross_benchmark,
    score_by_category, BenchmarkScore, ContrastResult, CrossBenchmarkRow, MetricsError, ScoreMetric, ShiftTable,
};
use crate::prompt::{render_question, PromptVariant};
use crate::report::{self, ReportError, ReportWriter};
use crate::stats::{adjust_anova_q, anova_eta_squared, eta_percentile_table, extreme_table, rank_matrix, AnovaResult, ExtremeEntry, PercentileRow, RankMatrix};
use crate::store::{write_json_atomic, JsonlLog, RunManifest, StageCounts, StoreError, TranscriptFilter, TranscriptStore};
use crate::util::{file_safe, sha256_hex};
use crate::CODE_VERSION;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Conversation(#[from] ConversationError),
    #[error("no sampled corpus for {0}; run ingest first")]
    MissingCorpus(Benchmark),
    #[error("store at {0} already has rows; pass --resume to continue it")]
    StoreNotEmpty(PathBuf),
}

impl PipelineError {
    /// Problems found before any work started.
    pub fn is_validation(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::MissingCorpus(_) | PipelineError::StoreNotEmpty(_))
    }
}

/// Per-invocation switches that are not part of the experiment itself.
#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    pub dry_run: bool,
    pub resume: bool,
    /// Set by a signal handler; stages stop starting new work once set.
    pub stop: Arc<AtomicBool>,
}

impl StageOptions {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

pub fn build_backends(cfg: &RunConfig) -> Result<Vec<Arc<dyn CompletionBackend>>, PipelineError> {
    cfg.endpoints
        .iter()
        .map(|e| -> Result<Arc<dyn CompletionBackend>, PipelineError> {
            Ok(match e {
                EndpointConfig::Http(ep) => Arc::new(HttpBackend::new(ep.clone())?),
                EndpointConfig::Scripted { name, policy } => Arc::new(ScriptedBackend::new(name.clone(), policy.clone())),
            })
        })
        .collect()
}

/// Scripted-only configs get a fixed clock so their outputs are
/// byte-reproducible.
pub fn clock_for(cfg: &RunConfig) -> Clock {
    if cfg.endpoints.iter().all(EndpointConfig::is_scripted) {
        Clock::epoch()
    } else {
        Clock::System
    }
}

fn reports_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("reports")
}

fn store_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("store")
}

fn pool_path(cfg: &RunConfig, b: Benchmark) -> PathBuf {
    cfg.corpus_dir().join(format!("{b}.pool.jsonl"))
}

pub fn sample_path(cfg: &RunConfig, b: Benchmark) -> PathBuf {
    cfg.corpus_dir().join(format!("{b}.sample.jsonl"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkIngest {
    pub pool: usize,
    pub sampled: usize,
    pub rejected: usize,
    pub per_subcategory: BTreeMap<String, usize>,
    pub sample_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub benchmarks: BTreeMap<Benchmark, BenchmarkIngest>,
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary, PipelineError> {
    cfg.validate()?;
    let mut pools: IndexMap<Benchmark, (Vec<QuestionInstance>, usize)> = IndexMap::new();
    for source in &cfg.corpus.sources {
        let report = load_benchmark(&source.path, source.benchmark, &cfg.corpus.adapter)?;
        for r in &report.rejected {
            tracing::warn!(source = %source.path.display(), "rejected record: {r}");
        }
        let entry = pools.entry(source.benchmark).or_default();
        entry.0.extend(report.instances);
        entry.1 += report.rejected.len();
    }
    std::fs::create_dir_all(cfg.corpus_dir()).map_err(CorpusError::Write)?;
    let mut summary = IngestSummary::default();
    for (benchmark, (pool, rejected)) in pools {
        let sample = sample_questions(&pool, &cfg.sample_plan(benchmark))?;
        write_corpus(&pool_path(cfg, benchmark), &pool)?;
        write_corpus(&sample_path(cfg, benchmark), &sample)?;
        let mut per_subcategory = BTreeMap::new();
        for q in &sample {
            *per_subcategory.entry(q.subcategory.clone()).or_insert(0) += 1;
        }
        let ids: Vec<String> = sample.iter().map(|q| format!("{}/{}", q.subcategory, q.id)).collect();
        summary.benchmarks.insert(
            benchmark,
            BenchmarkIngest { pool: pool.len(), sampled: sample.len(), rejected, per_subcategory, sample_digest: sha256_hex(ids.join("\n").as_bytes()) },
        );
    }
    write_json_atomic(&cfg.corpus_dir().join("manifest.json"), &summary)?;
    Ok(summary)
}

pub fn load_sample(cfg: &RunConfig, benchmark: Benchmark) -> Result<Vec<QuestionInstance>, PipelineError> {
    let path = sample_path(cfg, benchmark);
    if !path.exists() {
        return Err(PipelineError::MissingCorpus(benchmark));
    }
    Ok(read_corpus(&path)?)
}

/// One answered (or failed) single-shot cell of the instability grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityRecord {
    pub model: String,
    pub benchmark: Benchmark,
    pub subcategory: String,
    pub question_id: String,
    pub variant: PromptVariant,
    pub run_index: u32,
    pub answer_index: Option<usize>,
    pub attempts: u32,
    pub error: Option<String>,
}

impl InstabilityRecord {
    fn cell(&self) -> (String, String, PromptVariant, u32) {
        (self.subcategory.clone(), self.question_id.clone(), self.variant, self.run_index)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstabilityReport {
    pub scores: Vec<BenchmarkScore>,
    pub anova: Vec<AnovaResult>,
    pub anova_skipped: Vec<(String, String, ScoreMetric, String)>,
    pub percentiles: Vec<PercentileRow>,
    pub extremes: Vec<ExtremeEntry>,
    pub ranks: Vec<RankMatrix>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstabilitySummary {
    pub planned_requests: u64,
    pub skipped_existing: u64,
    pub answered: u64,
    pub failed: u64,
    pub interrupted: bool,
    pub report: Option<InstabilityReport>,
}

impl InstabilitySummary {
    pub fn parse_success_rate(&self) -> f64 {
        let done = self.answered + self.failed;
        if done == 0 {
            1.0
        } else {
            self.answered as f64 / done as f64
        }
    }
}

fn instability_log(cfg: &RunConfig, model: &str, benchmark: Benchmark) -> Result<JsonlLog, PipelineError> {
    Ok(JsonlLog::open(&cfg.output_dir.join("instability").join(format!("{}__{benchmark}.jsonl", file_safe(model))))?)
}

pub fn instability_cell_key(model: &str, q: &QuestionInstance, variant: PromptVariant, run: u32) -> String {
    format!("{model}|{}|{}|{}|{variant}|r{run}", q.benchmark, q.subcategory, q.id)
}

pub async fn cmd_instability(
    cfg: &RunConfig,
    backends: &[Arc<dyn CompletionBackend>],
    opts: &StageOptions,
) -> Result<InstabilitySummary, PipelineError> {
    cfg.validate()?;
    let variants = cfg.instability.selected_variants();
    let mut questions: IndexMap<Benchmark, Vec<Arc<QuestionInstance>>> = IndexMap::new();
    for &b in &cfg.instability.benchmarks {
        questions.insert(b, load_sample(cfg, b)?.into_iter().map(Arc::new).collect());
    }
    let mut summary = InstabilitySummary::default();
    for backend in backends {
        let model = backend.model().to_string();
        for (&benchmark, qs) in &questions {
            let log = instability_log(cfg, &model, benchmark)?;
            let done: HashSet<(String, String, PromptVariant, u32)> = log
                .read::<InstabilityRecord>()?
                .into_iter()
                .filter(|r| r.answer_index.is_some())
                .map(|r| r.cell())
                .collect();
            let mut pending = Vec::new();
            for &variant in &variants {
                for run in 0..cfg.instability.runs {
                    for q in qs {
                        summary.planned_requests += 1;
                        if done.contains(&(q.subcategory.clone(), q.id.clone(), variant, run)) {
                            summary.skipped_existing += 1;
                        } else {
                            pending.push((q.clone(), variant, run));
                        }
                    }
                }
            }
            if opts.dry_run || pending.is_empty() {
                continue;
            }
            let concurrency = cfg.conversations.concurrency;
            let records = stream::iter(pending)
                .take_while(|_| futures::future::ready(!opts.stopped()))
                .map(|(q, variant, run)| {
                    let backend = backend.clone();
                    let model = model.clone();
                    let system = cfg.instability.system_prompt.clone();
                    async move {
                        let context = RequestContext {
                            key: instability_cell_key(&model, &q, variant, run),
                            question: q.clone(),
                            variant,
                            round: 0,
                            agent_index: 0,
                            previous_answers: Vec::new(),
                            condition: None,
                            attempt: 1,
                        };
                        let user = render_question(&q, variant);
                        let result =
                            ask_with_retry(backend.as_ref(), &system, &user, context, cfg.conversations.retry_cap).await;
                        let (answer_index, attempts, error) = match result {
                            Ok(p) => (Some(p.answer_index), p.attempts, None),
                            Err(AskError::Exhausted { attempts, last }) => (None, attempts, Some(format!("{last:?}"))),
                            Err(e) => (None, 0, Some(e.to_string())),
                        };
                        InstabilityRecord {
                            model,
                            benchmark: q.benchmark,
                            subcategory: q.subcategory.clone(),
                            question_id: q.id.clone(),
                            variant,
                            run_index: run,
                            answer_index,
                            attempts,
                            error,
                        }
                    }
                })
                .buffered(concurrency)
                .chunks(256);
            futures::pin_mut!(records);
            while let Some(batch) = records.next().await {
                for r in &batch {
                    if r.answer_index.is_some() {
                        summary.answered += 1;
                    } else {
                        summary.failed += 1;
                    }
                }
                log.append(&batch)?;
            }
        }
    }
    summary.interrupted = opts.stopped();
    if !opts.dry_run {
        let report = build_instability_reports(cfg, backends.iter().map(|b| b.model().to_string()).collect())?;
        write_instability_reports(cfg, &report)?;
        summary.report = Some(report);
    }
    Ok(summary)
}

/// Scores, ANOVA, percentile, extreme and rank tables from the logged
/// instability records. Makes no model requests.
pub fn build_instability_reports(cfg: &RunConfig, models: Vec<String>) -> Result<InstabilityReport, PipelineError> {
    let variants = cfg.instability.selected_variants();
    let mut scores = Vec::new();
    for &benchmark in &cfg.instability.benchmarks {
        let sample = load_sample(cfg, benchmark)?;
        let by_key: HashMap<(&str, &str), &QuestionInstance> = sample.iter().map(|q| ((q.subcategory.as_str(), q.id.as_str()), q)).collect();
        for model in &models {
            let mut latest: IndexMap<(String, String, PromptVariant, u32), usize> = IndexMap::new();
            for r in instability_log(cfg, model, benchmark)?.read::<InstabilityRecord>()? {
                if let Some(a) = r.answer_index {
                    latest.insert(r.cell(), a);
                }
            }
            for &variant in &variants {
                for run in 0..cfg.instability.runs {
                    let answers: Vec<(&QuestionInstance, usize)> = sample
                        .iter()
                        .filter_map(|q| {
                            latest.get(&(q.subcategory.clone(), q.id.clone(), variant, run)).map(|&a| (by_key[&(q.subcategory.as_str(), q.id.as_str())], a))
                        })
                        .collect();
                    for ((category, metric), value) in score_by_category(&answers) {
                        scores.push(BenchmarkScore { metric, model: model.clone(), category, variant, run_index: run, value });
                    }
                }
            }
        }
    }
    Ok(analyze_scores(&scores, &variants, &models, cfg.alpha))
}

/// Instability analytics over a score table.
pub fn analyze_scores(scores: &[BenchmarkScore], variants: &[PromptVariant], models: &[String], alpha: f64) -> InstabilityReport {
    type Cell = (String, String, ScoreMetric);
    let mut grouped: IndexMap<Cell, IndexMap<PromptVariant, Vec<f64>>> = IndexMap::new();
    for s in scores {
        grouped.entry((s.model.clone(), s.category.clone(), s.metric)).or_default().entry(s.variant).or_default().push(s.value);
    }
    let mut report = InstabilityReport { scores: scores.to_vec(), ..InstabilityReport::default() };
    for ((model, category, metric), by_variant) in &grouped {
        let groups: Vec<Vec<f64>> = variants.iter().filter_map(|v| by_variant.get(v).cloned()).collect();
        match anova_eta_squared(model, category, *metric, &groups) {
            Ok(r) => report.anova.push(r),
            Err(e) => report.anova_skipped.push((model.clone(), category.clone(), *metric, e.to_string())),
        }
    }
    adjust_anova_q(&mut report.anova);
    let metrics: BTreeSet<ScoreMetric> = report.anova.iter().map(|r| r.metric).collect();
    for metric in metrics {
        if let Ok(row) = eta_percentile_table(&report.anova, metric, alpha) {
            report.percentiles.push(row);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for model in models {
        for metric in ScoreMetric::ALL {
            let per_category: IndexMap<String, Vec<(PromptVariant, Vec<f64>)>> = grouped
                .iter()
                .filter(|((m, _, me), _)| m == model && *me == metric)
                .map(|((_, c, _), by_variant)| (c.clone(), variants.iter().filter_map(|v| by_variant.get(v).map(|r| (*v, r.clone()))).collect()))
                .collect();
            report.extremes.extend(extreme_table(model, metric, &per_category));
        }
    }
    let categories: BTreeSet<(String, ScoreMetric)> = grouped.keys().map(|(_, c, m)| (c.clone(), *m)).collect();
    for (category, metric) in categories {
        let table: IndexMap<String, IndexMap<PromptVariant, f64>> = models
            .iter()
            .filter_map(|m| {
                grouped
                    .get(&(m.clone(), category.clone(), metric))
                    .map(|by_variant| (m.clone(), by_variant.iter().map(|(v, r)| (*v, mean(r))).collect()))
            })
            .collect();
        if let Ok(m) = rank_matrix(&category, metric, variants, &table) {
            report.ranks.push(m);
        }
    }
    report
}

pub fn write_instability_reports(cfg: &RunConfig, report: &InstabilityReport) -> Result<Vec<PathBuf>, PipelineError> {
    let w = ReportWriter::new(&reports_dir(cfg), &cfg.digest())?;
    let mut out = Vec::new();
    let score_rows: Vec<Vec<String>> = report
        .scores
        .iter()
        .map(|s| vec![s.model.clone(), s.category.clone(), s.metric.to_string(), s.variant.to_string(), s.run_index.to_string(), s.value.to_string()])
        .collect();
    out.push(w.write_csv("scores.csv", &["model", "category", "metric", "variant", "run_index", "value"], &score_rows)?);
    out.push(w.write_jsonl("scores.jsonl", &report.scores)?);
    let (h, rows) = report::anova_rows(&report.anova);
    out.push(w.write_csv("anova.csv", &h, &rows)?);
    out.push(w.write_jsonl("anova.jsonl", &report.anova)?);
    let (h, rows) = report::percentile_rows(&report.percentiles);
    out.push(w.write_csv("eta_percentiles.csv", &h, &rows)?);
    let (h, rows) = report::extreme_rows(&report.extremes);
    out.push(w.write_csv("extremes.csv", &h, &rows)?);
    out.push(w.write_jsonl("extremes.jsonl", &report.extremes)?);
    for m in &report.ranks {
        let (h, rows) = report::rank_rows(m);
        let h: Vec<&str> = h.iter().map(String::as_str).collect();
        out.push(w.write_csv(&format!("ranks__{}__{}.csv", file_safe(&m.category), m.metric), &h, &rows)?);
    }
    Ok(out)
}

/// Every conversation of the grid for one model, in a fixed order.
pub fn plan_conversations(cfg: &RunConfig, questions: &IndexMap<Benchmark, Vec<Arc<QuestionInstance>>>) -> Vec<ConversationSpec> {
    let c = &cfg.conversations;
    let profiles = c.identity_profiles();
    let mut out = Vec::new();
    for qs in questions.values() {
        for q in qs {
            for profile in &profiles {
                for &reveal in &c.reveals {
                    for run in 0..c.runs {
                        let mut spec = ConversationSpec::pair(profile.clone(), reveal, q.clone(), c.rounds, run, cfg.rng_seed);
                        spec.variant = c.variant;
                        out.push(spec);
                    }
                }
            }
        }
    }
    out
}

/// Sampled questions used by the conversation grid.
pub fn conversation_questions(cfg: &RunConfig) -> Result<IndexMap<Benchmark, Vec<Arc<QuestionInstance>>>, PipelineError> {
    let mut out = IndexMap::new();
    for &b in &cfg.conversations.benchmarks {
        let sample = load_sample(cfg, b)?;
        let mut taken: HashMap<String, usize> = HashMap::new();
        let picked = sample
            .into_iter()
            .filter(|q| {
                let n = taken.entry(q.subcategory.clone()).or_insert(0);
                *n += 1;
                cfg.conversations.questions_per_subcategory.is_none_or(|limit| *n <= limit)
            })
            .map(Arc::new)
            .collect();
        out.insert(b, picked);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConversationSummary {
    pub planned: u64,
    pub already_complete: u64,
    pub completed: u64,
    pub failed: u64,
    pub rows_written: u64,
    pub duplicate_rejections: u64,
    pub estimated_requests: u64,
    pub flagged: Vec<String>,
    pub interrupted: bool,
    pub store_digest: Option<String>,
}

fn condition_label(key: &ConversationKey) -> String {
    let p = &key.agents[0];
    format!(
        "{}|{}|{}|{}|{}|{}",
        key.model,
        key.benchmark,
        p.demographics.as_deref().unwrap_or("~"),
        p.persona.as_deref().unwrap_or("~"),
        p.instantiation.as_str(),
        key.reveal.as_str()
    )
}

pub async fn cmd_conversations(
    cfg: &RunConfig,
    backends: &[Arc<dyn CompletionBackend>],
    opts: &StageOptions,
) -> Result<ConversationSummary, PipelineError> {
    cfg.validate()?;
    let questions = conversation_questions(cfg)?;
    let specs = plan_conversations(cfg, &questions);
    let per_conversation = u64::from(cfg.conversations.rounds) * 2;
    let mut summary = ConversationSummary {
        planned: specs.len() as u64 * backends.len() as u64,
        estimated_requests: specs.len() as u64 * backends.len() as u64 * per_conversation,
        ..ConversationSummary::default()
    };
    if opts.dry_run {
        return Ok(summary);
    }
    let root = store_dir(cfg);
    let store = TranscriptStore::open(&root)?;
    if store.total_rows() > 0 && !opts.resume {
        return Err(PipelineError::StoreNotEmpty(root));
    }
    let started_at = RunManifest::read(&root)?.map_or_else(|| clock_for(cfg).now(), |m| m.started_at);
    let run_options = RunOptions { retry_cap: cfg.conversations.retry_cap, clock: clock_for(cfg) };
    let expected = per_conversation as usize;
    let mut per_condition: IndexMap<String, (u64, u64)> = IndexMap::new();

    for backend in backends {
        let model = backend.model().to_string();
        let mut todo = Vec::new();
        for spec in &specs {
            let key = spec.key(&model);
            let id = key.to_string();
            per_condition.entry(condition_label(&key)).or_default().0 += 1;
            if store.is_complete(&id, expected) {
                summary.already_complete += 1;
            } else {
                todo.push((spec, id, key));
            }
        }
        let partial: HashSet<String> = todo.iter().filter(|(_, id, _)| store.row_count(id) > 0).map(|(_, id, _)| id.clone()).collect();
        let mut existing = store.rows_of(&partial)?;
        let jobs = todo.into_iter().map(|(spec, id, key)| {
            let rows: Vec<TranscriptRow> = existing.remove(&id).unwrap_or_default();
            (spec, key, rows)
        });
        let outcomes = stream::iter(jobs)
            .take_while(|_| futures::future::ready(!opts.stopped()))
            .map(|(spec, key, rows)| {
                let backend = backend.clone();
                async move {
                    let outcome = resume_conversation(spec, backend.as_ref(), run_options, &rows).await;
                    (key, outcome)
                }
            })
            .buffered(cfg.conversations.concurrency);
        futures::pin_mut!(outcomes);
        while let Some((key, outcome)) = outcomes.next().await {
            let outcome = outcome?;
            let ack = store.append_rows(&outcome.new_rows)?;
            summary.rows_written += ack.written as u64;
            summary.duplicate_rejections += ack.rejected.len() as u64;
            match outcome.failure {
                Some(f) => {
                    store.record_failure(&f)?;
                    summary.failed += 1;
                    per_condition.entry(condition_label(&key)).or_default().1 += 1;
                }
                None => summary.completed += 1,
            }
        }
    }
    summary.interrupted = opts.stopped();
    let threshold = cfg.conversations.failure_threshold;
    let flagged: Vec<crate::store::FlaggedCondition> = per_condition
        .iter()
        .filter(|(_, (planned, failed))| *planned > 0 && *failed as f64 / *planned as f64 > threshold)
        .map(|(c, (planned, failed))| crate::store::FlaggedCondition { condition: c.clone(), planned: *planned, failed: *failed })
        .collect();
    summary.flagged = flagged.iter().map(|f| f.condition.clone()).collect();
    summary.store_digest = Some(store.digest()?);
    let mut counts = BTreeMap::new();
    counts.insert(
        "conversations".to_string(),
        StageCounts { planned: summary.planned, completed: summary.already_complete + summary.completed, failed: summary.failed },
    );
    RunManifest {
        run_id: format!("{}-{}", &cfg.digest()[..12], cfg.rng_seed),
        config_digest: cfg.digest(),
        code_version: CODE_VERSION.into(),
        started_at,
        finished_at: (!summary.interrupted).then(|| clock_for(cfg).now()),
        counts,
        flagged,
        store_digest: summary.store_digest.clone(),
    }
    .write(&root)?;
    Ok(summary)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub conversations_used: u64,
    pub conversations_excluded: u64,
    pub corrupt_rows: u64,
    pub cells: usize,
    pub contrasts: Vec<ContrastResult>,
    pub skipped: Vec<String>,
    pub cross_benchmark: Vec<CrossBenchmarkRow>,
}

impl AnalysisSummary {
    pub fn is_empty(&self) -> bool {
        self.conversations_used == 0
    }
}

/// Shift table over complete conversations in the store.
pub fn load_shift_table(cfg: &RunConfig) -> Result<(ShiftTable, u64, u64, u64), PipelineError> {
    let store = TranscriptStore::open(&store_dir(cfg))?;
    let expected = cfg.conversations.rounds as usize * 2;
    let mut table = ShiftTable::new();
    let (mut used, mut excluded, mut corrupt) = (0, 0, 0);
    for item in store.query_transcripts(&TranscriptFilter::default())? {
        match item {
            Ok(c) if c.rows.len() == expected && c.key.agents.len() == 2 => {
                table.add(&c.key, &crate::metrics::answer_matrix(&c.rows).map_err(|e| ConfigError::Invalid(e.to_string()))?);
                used += 1;
            }
            Ok(_) => excluded += 1,
            Err(StoreError::CorruptRow { path, line_no }) => {
                tracing::warn!(path = %path.display(), line_no, "corrupt transcript row");
                corrupt += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((table, used, excluded, corrupt))
}

/// All five contrast families for every model and benchmark in `table`.
pub fn run_contrasts(cfg: &RunConfig, table: &ShiftTable) -> (Vec<ContrastResult>, Vec<String>) {
    let pooling = cfg.analysis.pooling;
    let demographics: Vec<String> = table.demographics().into_iter().collect();
    let instantiations: Vec<Instantiation> = table.instantiations().into_iter().collect();
    let benchmarks: Vec<Benchmark> = table.benchmarks().into_iter().filter(|b| cfg.analysis.benchmarks.contains(b)).collect();
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    let mut push = |label: String, r: Result<ContrastResult, MetricsError>| match r {
        Ok(r) => results.push(r),
        Err(e) => skipped.push(format!("{label}: {e}")),
    };
    for model in table.models() {
        for &b in &benchmarks {
            for &i in &instantiations {
                for d in &demographics {
                    push(format!("DemoVsNull_iden {model} {b} {d} {}", i.as_str()), contrast_demo_vs_null_iden(table, d, i, &model, b, pooling));
                    push(format!("DemoVsNull_RC_base {model} {b} {d} {}", i.as_str()), contrast_reveal_base(table, d, None, i, &model, b, pooling));
                }
                for (d1, d2) in &cfg.analysis.axis_pairs {
                    push(format!("DemoPair_iden {model} {b} {d1}-{d2} {}", i.as_str()), contrast_demo_pair_iden(table, d1, d2, i, &model, b, pooling));
                    push(
                        format!("DemoPair_RC_base {model} {b} {d1}-{d2} {}", i.as_str()),
                        contrast_reveal_base(table, d1, Some(d2), i, &model, b, pooling),
                    );
                }
            }
            for d in &demographics {
                push(format!("Inst_RC_base {model} {b} {d}"), contrast_inst_base(table, d, &model, b, pooling));
            }
        }
    }
    (results, skipped)
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<AnalysisSummary, PipelineError> {
    cfg.validate()?;
    let (table, used, excluded, corrupt) = load_shift_table(cfg)?;
    let (contrasts, skipped) = run_contrasts(cfg, &table);
    let requested: Vec<Benchmark> = cfg.analysis.benchmarks.iter().copied().filter(|b| table.benchmarks().contains(b)).collect();
    let cross = cross_benchmark(&contrasts, &requested, cfg.alpha);
    let summary = AnalysisSummary {
        conversations_used: used,
        conversations_excluded: excluded,
        corrupt_rows: corrupt,
        cells: table.len(),
        contrasts,
        skipped,
        cross_benchmark: cross,
    };
    let w = ReportWriter::new(&reports_dir(cfg), &cfg.digest())?;
    let cells = table.cells();
    let (h, rows) = report::shift_rows(&cells);
    w.write_csv("shift_rates.csv", &h, &rows)?;
    w.write_jsonl("shift_rates.jsonl", &cells)?;
    let (h, rows) = report::contrast_rows(&summary.contrasts);
    w.write_csv("contrasts.csv", &h, &rows)?;
    w.write_jsonl("contrasts.jsonl", &summary.contrasts)?;
    let (h, rows) = report::cross_rows(&summary.cross_benchmark);
    w.write_csv("cross_benchmark.csv", &h, &rows)?;
    w.write_text("analysis.txt", &analysis_text(&summary, cfg.alpha))?;
    Ok(summary)
}

pub fn analysis_text(s: &AnalysisSummary, alpha: f64) -> String {
    if s.is_empty() {
        return "no data: the transcript store holds no complete conversations".into();
    }
    let mut out = format!(
        "conversations used: {}\nconversations excluded (incomplete or failed): {}\ncorrupt rows: {}\nshift-rate cells: {}\ncontrasts: {} ({} skipped)\n",
        s.conversations_used,
        s.conversations_excluded,
        s.corrupt_rows,
        s.cells,
        s.contrasts.len(),
        s.skipped.len()
    );
    let significant = s.contrasts.iter().filter(|c| c.p < alpha).count();
    out.push_str(&format!("significant at alpha {alpha}: {significant}\n"));
    let consistent: Vec<&CrossBenchmarkRow> = s.cross_benchmark.iter().filter(|r| r.consistent).collect();
    out.push_str(&format!("cross-benchmark consistent: {}\n", consistent.len()));
    for r in consistent {
        let mean = r.per_benchmark.first().map_or(0.0, |x| x.1);
        out.push_str(&format!(
            "  {} {} {} {} -> {}\n",
            r.contrast,
            r.model,
            r.axis,
            r.instantiation.map_or("", Instantiation::as_str),
            r.contrast.direction(mean)
        ));
    }
    out
}

/// Rebuilds every report from persisted data without model requests.
pub fn cmd_report(cfg: &RunConfig) -> Result<String, PipelineError> {
    cfg.validate()?;
    let mut text = String::new();
    let models: Vec<String> = cfg.endpoints.iter().map(|e| e.name().to_string()).collect();
    let have_instability = cfg.instability.benchmarks.iter().all(|&b| sample_path(cfg, b).exists());
    if have_instability {
        let report = build_instability_reports(cfg, models)?;
        write_instability_reports(cfg, &report)?;
        text.push_str(&instability_text(&report));
    }
    let analysis = cmd_analyze(cfg)?;
    text.push_str(&analysis_text(&analysis, cfg.alpha));
    ReportWriter::new(&reports_dir(cfg), &cfg.digest())?.write_text("summary.txt", &text)?;
    Ok(text)
}

pub fn instability_text(r: &InstabilityReport) -> String {
    let mut out = String::from("eta squared percentiles (p10 p25 p50 p75 p90, BH significant)\n");
    for row in &r.percentiles {
        let p: Vec<String> = row.percentiles.iter().map(|v| format!("{v:.2}")).collect();
        out.push_str(&format!("  {:<10} {}  {}/{}\n", row.metric.as_str(), p.join(" "), row.significant, row.total));
    }
    if !r.anova_skipped.is_empty() {
        out.push_str(&format!("anova cells skipped: {}\n", r.anova_skipped.len()));
    }
    out
}

pub fn output_paths(cfg: &RunConfig) -> Vec<(&'static str, PathBuf)> {
    vec![("corpus", cfg.corpus_dir()), ("store", store_dir(cfg)), ("reports", reports_dir(cfg))]
}

pub fn store_root(cfg: &RunConfig) -> PathBuf {
    store_dir(cfg)
}

pub fn reports_root(cfg: &RunConfig) -> PathBuf {
    reports_dir(cfg)
}
