//! Append-only transcript store.
//!
//! Layout under the store root:
//!
//! ```text
//! transcripts/<model>__<benchmark>.jsonl   one TranscriptRow per line
//! failures.jsonl                           ConversationFailure markers
//! manifest.json                            RunManifest
//! ```
//!
//! Every append writes whole lines in one call and syncs before returning.
//! A torn final line left by a crash is cut off when the store is opened.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{AgentProfile, ConversationFailure, ConversationKey, RevealCondition, TranscriptRow};
use crate::corpus::Benchmark;
use crate::prompt::PromptVariant;
use crate::util::{file_safe, sha256_hex};

pub const TRANSCRIPT_DIR: &str = "transcripts";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage full while writing {path}")]
    StorageFull { path: PathBuf },
    #[error("corrupt row at {path}:{line_no}")]
    CorruptRow { path: PathBuf, line_no: usize },
    #[error("row has an unparseable conversation id `{0}`")]
    BadConversationId(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| {
        // ENOSPC and EDQUOT
        if matches!(source.raw_os_error(), Some(28) | Some(122)) || source.kind() == io::ErrorKind::StorageFull {
            StoreError::StorageFull { path: path.to_path_buf() }
        } else {
            StoreError::Io { path: path.to_path_buf(), source }
        }
    }
}

/// Cuts a trailing partial line, returning the number of bytes removed.
pub fn repair_torn_tail(path: &Path) -> Result<u64, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(io_err(path)(e)),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(0);
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    file.set_len(keep as u64).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))?;
    let removed = (bytes.len() - keep) as u64;
    tracing::warn!(path = %path.display(), removed, "removed torn trailing line");
    Ok(removed)
}

/// Appends pre-serialized lines in one write and syncs.
pub fn append_lines(path: &Path, lines: &[String]) -> Result<(), StoreError> {
    if lines.is_empty() {
        return Ok(());
    }
    let mut buf = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    file.write_all(buf.as_bytes()).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))
}

/// Parsed lines of a JSONL file, each tagged with its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, Result<T, StoreError>)>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line).map_err(|_| StoreError::CorruptRow { path: path.to_path_buf(), line_no: i + 1 });
        out.push((i + 1, parsed));
    }
    Ok(out)
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_vec_pretty(value).expect("serializable");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&body).map_err(io_err(&tmp))?;
        f.write_all(b"\n").map_err(io_err(&tmp))?;
        f.sync_data().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub planned: u64,
    pub completed: u64,
    pub failed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedCondition {
    pub condition: String,
    pub planned: u64,
    pub failed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub code_version: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub counts: BTreeMap<String, StageCounts>,
    #[serde(default)]
    pub flagged: Vec<FlaggedCondition>,
    #[serde(default)]
    pub store_digest: Option<String>,
}

impl RunManifest {
    pub fn read(root: &Path) -> Result<Option<RunManifest>, StoreError> {
        let path = root.join(MANIFEST_FILE);
        match fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).map(Some).map_err(|_| StoreError::CorruptRow { path, line_no: 1 }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn write(&self, root: &Path) -> Result<(), StoreError> {
        write_json_atomic(&root.join(MANIFEST_FILE), self)
    }
}

/// Rows refused by [`TranscriptStore::append_rows`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuplicateKey {
    pub conversation_id: String,
    pub round: u32,
    pub agent_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AppendAck {
    pub written: usize,
    pub rejected: Vec<DuplicateKey>,
}

/// Predicate over conversation id fields; unset fields match anything.
#[derive(Debug, Clone, Default)]
pub struct TranscriptFilter {
    pub conversation_id: Option<String>,
    pub benchmark: Option<Benchmark>,
    pub model: Option<String>,
    pub iden_profile: Option<AgentProfile>,
    pub reveal: Option<RevealCondition>,
    pub variant: Option<PromptVariant>,
    pub run_index: Option<u32>,
}

impl TranscriptFilter {
    pub fn conversation(id: &str) -> Self {
        Self { conversation_id: Some(id.to_string()), ..Self::default() }
    }

    pub fn matches(&self, id: &str, key: &ConversationKey) -> bool {
        self.conversation_id.as_deref().is_none_or(|c| c == id)
            && self.benchmark.is_none_or(|b| b == key.benchmark)
            && self.model.as_deref().is_none_or(|m| m == key.model)
            && self.iden_profile.as_ref().is_none_or(|p| key.agents.first() == Some(p))
            && self.reveal.is_none_or(|r| r == key.reveal)
            && self.variant.is_none_or(|v| v == key.variant)
            && self.run_index.is_none_or(|r| r == key.run_index)
    }
}

/// Rows of one conversation, ordered by (round, agent).
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationRows {
    pub conversation_id: String,
    pub key: ConversationKey,
    pub rows: Vec<TranscriptRow>,
}

#[derive(Default)]
struct Index {
    keys: HashSet<(String, u32, usize)>,
    per_conversation: HashMap<String, usize>,
    failed: HashSet<String>,
}

pub struct TranscriptStore {
    root: PathBuf,
    index: Mutex<Index>,
}

impl TranscriptStore {
    /// Opens or creates a store, repairing torn tails and indexing keys.
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        let dir = root.join(TRANSCRIPT_DIR);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut index = Index::default();
        for shard in shard_paths(&dir)? {
            repair_torn_tail(&shard)?;
            for (line_no, row) in read_jsonl::<TranscriptRow>(&shard)? {
                match row {
                    Ok(r) => {
                        *index.per_conversation.entry(r.conversation_id.clone()).or_default() += 1;
                        index.keys.insert((r.conversation_id, r.round, r.agent_index));
                    }
                    Err(_) => tracing::warn!(path = %shard.display(), line_no, "skipping corrupt row"),
                }
            }
        }
        let failures = root.join(FAILURES_FILE);
        repair_torn_tail(&failures)?;
        for (_, f) in read_jsonl::<ConversationFailure>(&failures)? {
            if let Ok(f) = f {
                index.failed.insert(f.conversation_id);
            }
        }
        Ok(Self { root: root.to_path_buf(), index: Mutex::new(index) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn shard_path(&self, model: &str, benchmark: Benchmark) -> PathBuf {
        self.root.join(TRANSCRIPT_DIR).join(format!("{}__{}.jsonl", file_safe(model), benchmark))
    }

    /// Appends rows not already present; duplicates are reported, not written.
    pub fn append_rows(&self, rows: &[TranscriptRow]) -> Result<AppendAck, StoreError> {
        let mut index = self.index.lock().expect("store index lock");
        let mut ack = AppendAck::default();
        let mut by_shard: IndexMap<PathBuf, Vec<String>> = IndexMap::new();
        let mut accepted = Vec::new();
        let mut batch = HashSet::new();
        for row in rows {
            let k = (row.conversation_id.clone(), row.round, row.agent_index);
            if index.keys.contains(&k) || !batch.insert(k.clone()) {
                ack.rejected.push(DuplicateKey { conversation_id: k.0, round: k.1, agent_index: k.2 });
                continue;
            }
            let key: ConversationKey =
                row.conversation_id.parse().map_err(|_| StoreError::BadConversationId(row.conversation_id.clone()))?;
            let line = serde_json::to_string(row).expect("serializable row");
            by_shard.entry(self.shard_path(&key.model, key.benchmark)).or_default().push(line);
            accepted.push(k);
        }
        for (path, lines) in &by_shard {
            append_lines(path, lines)?;
        }
        for k in accepted {
            *index.per_conversation.entry(k.0.clone()).or_default() += 1;
            index.keys.insert(k);
            ack.written += 1;
        }
        Ok(ack)
    }

    pub fn record_failure(&self, failure: &ConversationFailure) -> Result<(), StoreError> {
        let line = serde_json::to_string(failure).expect("serializable failure");
        append_lines(&self.root.join(FAILURES_FILE), &[line])?;
        self.index.lock().expect("store index lock").failed.insert(failure.conversation_id.clone());
        Ok(())
    }

    pub fn row_count(&self, conversation_id: &str) -> usize {
        self.index.lock().expect("store index lock").per_conversation.get(conversation_id).copied().unwrap_or(0)
    }

    pub fn total_rows(&self) -> usize {
        self.index.lock().expect("store index lock").keys.len()
    }

    pub fn has_failure_marker(&self, conversation_id: &str) -> bool {
        self.index.lock().expect("store index lock").failed.contains(conversation_id)
    }

    /// All `rounds * agents` rows are present. A failure marker from an
    /// earlier attempt does not count against a conversation that a later
    /// resume completed.
    pub fn is_complete(&self, conversation_id: &str, expected_rows: usize) -> bool {
        self.row_count(conversation_id) >= expected_rows
    }

    /// Rows of the given conversations, for resuming them.
    pub fn rows_of(&self, ids: &HashSet<String>) -> Result<HashMap<String, Vec<TranscriptRow>>, StoreError> {
        let mut out: HashMap<String, Vec<TranscriptRow>> = HashMap::new();
        if ids.is_empty() {
            return Ok(out);
        }
        for shard in shard_paths(&self.root.join(TRANSCRIPT_DIR))? {
            for (_, row) in read_jsonl::<TranscriptRow>(&shard)? {
                if let Ok(r) = row {
                    if ids.contains(&r.conversation_id) {
                        out.entry(r.conversation_id.clone()).or_default().push(r);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Matching conversations shard by shard. A corrupt line is reported
    /// in place and the remaining rows are still returned.
    pub fn query_transcripts(&self, filter: &TranscriptFilter) -> Result<impl Iterator<Item = Result<ConversationRows, StoreError>>, StoreError> {
        let shards = shard_paths(&self.root.join(TRANSCRIPT_DIR))?;
        let filter = filter.clone();
        Ok(shards.into_iter().flat_map(move |shard| query_shard(&shard, &filter)))
    }

    /// Hash over all rows with timestamps removed, independent of line order.
    pub fn digest(&self) -> Result<String, StoreError> {
        let mut lines = Vec::new();
        for shard in shard_paths(&self.root.join(TRANSCRIPT_DIR))? {
            for (line_no, row) in read_jsonl::<serde_json::Value>(&shard)? {
                let mut v = row.map_err(|_| StoreError::CorruptRow { path: shard.clone(), line_no })?;
                if let Some(obj) = v.as_object_mut() {
                    obj.remove("timestamp");
                }
                lines.push(v.to_string());
            }
        }
        lines.sort();
        Ok(sha256_hex(lines.join("\n").as_bytes()))
    }
}

fn shard_paths(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(io_err(dir)(e)),
    };
    for entry in entries {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "jsonl") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn query_shard(shard: &Path, filter: &TranscriptFilter) -> Vec<Result<ConversationRows, StoreError>> {
    let lines = match read_jsonl::<TranscriptRow>(shard) {
        Ok(l) => l,
        Err(e) => return vec![Err(e)],
    };
    let mut out = Vec::new();
    let mut grouped: IndexMap<String, ConversationRows> = IndexMap::new();
    let mut keys: HashMap<String, Option<ConversationKey>> = HashMap::new();
    for (_, row) in lines {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.push(Err(e));
                continue;
            }
        };
        let key = keys.entry(row.conversation_id.clone()).or_insert_with(|| row.conversation_id.parse().ok());
        let Some(key) = key.as_ref() else { continue };
        if !filter.matches(&row.conversation_id, key) {
            continue;
        }
        grouped
            .entry(row.conversation_id.clone())
            .or_insert_with(|| ConversationRows { conversation_id: row.conversation_id.clone(), key: key.clone(), rows: Vec::new() })
            .rows
            .push(row);
    }
    for (_, mut c) in grouped {
        c.rows.sort_by_key(|r| (r.round, r.agent_index));
        out.push(Ok(c));
    }
    out
}

/// Simple append-only JSONL log for other record types.
pub struct JsonlLog {
    path: PathBuf,
}

impl JsonlLog {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        repair_torn_tail(path)?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn append<T: Serialize>(&self, records: &[T]) -> Result<(), StoreError> {
        let lines: Vec<String> = records.iter().map(|r| serde_json::to_string(r).expect("serializable")).collect();
        append_lines(&self.path, &lines)
    }

    /// Every record that parses; corrupt lines are skipped with a warning.
    pub fn read<T: DeserializeOwned>(&self) -> Result<Vec<T>, StoreError> {
        Ok(read_jsonl(&self.path)?
            .into_iter()
            .filter_map(|(line_no, r)| {
                r.map_err(|_| tracing::warn!(path = %self.path.display(), line_no, "skipping corrupt record")).ok()
            })
            .collect())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Size of `path` in bytes, 0 when missing.
pub fn file_len(path: &Path) -> u64 {
    File::open(path).and_then(|mut f| f.seek(SeekFrom::End(0))).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversation::{Instantiation, RevealCondition};
    use crate::prompt::ParsedResponse;

    fn key(reveal: RevealCondition, run: u32) -> ConversationKey {
        ConversationKey {
            benchmark: Benchmark::Bbq,
            subcategory: "Age".into(),
            question_id: "q1".into(),
            model: "org/m".into(),
            agents: vec![AgentProfile::identity(Some("Older"), None, Instantiation::Human), AgentProfile::baseline()],
            reveal,
            variant: PromptVariant::CONVERSATION_DEFAULT,
            run_index: run,
        }
    }

    fn rows(key: &ConversationKey) -> Vec<TranscriptRow> {
        let id = key.to_string();
        let mut out = Vec::new();
        for round in (0..3).rev() {
            for agent in 0..2 {
                out.push(TranscriptRow {
                    conversation_id: id.clone(),
                    round,
                    agent_index: agent,
                    parsed: ParsedResponse { answer_index: agent, rationale: "because".into(), raw: "{}".into(), attempts: 1 },
                    timestamp: DateTime::<Utc>::UNIX_EPOCH,
                });
            }
        }
        out
    }

    #[test]
    fn idempotent_append_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = TranscriptStore::open(dir.path()).unwrap();
        let k = key(RevealCondition::Anonymous, 0);
        let r = rows(&k);
        assert_eq!(store.append_rows(&r).unwrap().written, 6);
        let shard = store.shard_path(&k.model, k.benchmark);
        let before = fs::read(&shard).unwrap();
        let again = store.append_rows(&r).unwrap();
        assert_eq!((again.written, again.rejected.len()), (0, 6));
        assert_eq!(fs::read(&shard).unwrap(), before);

        let text = String::from_utf8(before).unwrap();
        for (line, row) in text.lines().zip(&r) {
            assert_eq!(line, serde_json::to_string(row).unwrap());
        }
        let reopened = TranscriptStore::open(dir.path()).unwrap();
        assert_eq!(reopened.append_rows(&r).unwrap().rejected.len(), 6);
    }

    #[test]
    fn query_groups_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let store = TranscriptStore::open(dir.path()).unwrap();
        for (reveal, run) in [(RevealCondition::Anonymous, 0), (RevealCondition::Revealed, 0), (RevealCondition::Anonymous, 1)] {
            store.append_rows(&rows(&key(reveal, run))).unwrap();
        }
        let one = key(RevealCondition::Revealed, 0).to_string();
        let got: Vec<ConversationRows> = store.query_transcripts(&TranscriptFilter::conversation(&one)).unwrap().map(Result::unwrap).collect();
        assert_eq!(got.len(), 1);
        let order: Vec<(u32, usize)> = got[0].rows.iter().map(|r| (r.round, r.agent_index)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]);

        let anon = TranscriptFilter { reveal: Some(RevealCondition::Anonymous), ..TranscriptFilter::default() };
        let got: Vec<ConversationRows> = store.query_transcripts(&anon).unwrap().map(Result::unwrap).collect();
        assert_eq!(got.len(), 2);
        assert!(got.iter().all(|c| c.key.reveal == RevealCondition::Anonymous));
    }

    #[test]
    fn corrupt_line_is_reported_and_others_stream() {
        let dir = tempfile::tempdir().unwrap();
        let store = TranscriptStore::open(dir.path()).unwrap();
        let k = key(RevealCondition::Anonymous, 0);
        store.append_rows(&rows(&k)).unwrap();
        let shard = store.shard_path(&k.model, k.benchmark);
        append_lines(&shard, &["{not json".to_string()]).unwrap();
        store.append_rows(&rows(&key(RevealCondition::Revealed, 0))).unwrap();
        let items: Vec<Result<ConversationRows, StoreError>> = store.query_transcripts(&TranscriptFilter::default()).unwrap().collect();
        let corrupt: Vec<usize> = items
            .iter()
            .filter_map(|i| match i {
                Err(StoreError::CorruptRow { line_no, .. }) => Some(*line_no),
                _ => None,
            })
            .collect();
        assert_eq!(corrupt, vec![7]);
        assert_eq!(items.iter().filter(|i| i.is_ok()).count(), 2);
    }

    #[test]
    fn torn_tail_is_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let k = key(RevealCondition::Anonymous, 0);
        {
            let store = TranscriptStore::open(dir.path()).unwrap();
            store.append_rows(&rows(&k)[..2]).unwrap();
            let shard = store.shard_path(&k.model, k.benchmark);
            let mut f = OpenOptions::new().append(true).open(&shard).unwrap();
            f.write_all(b"{\"conversation_id\": \"tor").unwrap();
        }
        let store = TranscriptStore::open(dir.path()).unwrap();
        assert_eq!(store.total_rows(), 2);
        let ack = store.append_rows(&rows(&k)).unwrap();
        assert_eq!((ack.written, ack.rejected.len()), (4, 2));
        assert_eq!(store.query_transcripts(&TranscriptFilter::default()).unwrap().filter(|r| r.is_err()).count(), 0);
    }

    #[test]
    fn digest_ignores_timestamps_and_order() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let k = key(RevealCondition::Anonymous, 0);
        let r = rows(&k);
        let sa = TranscriptStore::open(a.path()).unwrap();
        sa.append_rows(&r).unwrap();
        let sb = TranscriptStore::open(b.path()).unwrap();
        let mut shuffled: Vec<TranscriptRow> = r.iter().rev().cloned().collect();
        shuffled[0].timestamp = Utc::now();
        sb.append_rows(&shuffled).unwrap();
        assert_eq!(sa.digest().unwrap(), sb.digest().unwrap());
    }

    #[test]
    fn manifest_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut counts = BTreeMap::new();
        counts.insert("conversations".to_string(), StageCounts { planned: 10, completed: 9, failed: 1 });
        let m = RunManifest {
            run_id: "r".into(),
            config_digest: "abc".into(),
            code_version: "v".into(),
            started_at: DateTime::<Utc>::UNIX_EPOCH,
            finished_at: None,
            counts,
            flagged: vec![],
            store_digest: None,
        };
        m.write(dir.path()).unwrap();
        let back = RunManifest::read(dir.path()).unwrap().unwrap();
        assert_eq!(back, m);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        back.write(dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap(), text);
    }
}
