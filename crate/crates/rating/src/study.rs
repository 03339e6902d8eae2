use std::collections::HashMap;
use std::path::Path;
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::aggregate::{aggregate, AggregateReport};
use crate::error::{ApiError, Result};
use crate::log::{LogEntry, RatingLog};

/// The five questions every sample is rated on, in display order.
pub const CRITERIA: [&str; 5] = [
    "How well-formed and grammatically correct is the answer?",
    "How well-formed and grammatically correct is the rationale?",
    "How relevant is the answer to the image-question pair?",
    "How well does the rationale explain the answer with respect to the image-question pair?",
    "Irrespective of the image-question pair, how well does the rationale explain the answer ?",
];

pub const MIN_SCORE: i64 = 1;
pub const MAX_SCORE: i64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Generated,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolItem {
    pub sample_id: String,
    pub question: String,
    pub answer: String,
    pub rationale: String,
}

/// Candidate items by source. Sample ids are shown to raters, so they must
/// not encode the source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskPool {
    pub generated: Vec<PoolItem>,
    pub ground_truth: Vec<PoolItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub playlist_len: usize,
    /// Fraction of each playlist drawn from ground truth.
    pub ground_truth_ratio: f64,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            playlist_len: 50,
            ground_truth_ratio: 16.0 / 50.0,
            seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn ground_truth_count(&self) -> usize {
        (self.ground_truth_ratio * self.playlist_len as f64).round() as usize
    }
}

/// What a rater sees. The source is deliberately absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingTask {
    pub task_id: String,
    pub sample_id: String,
    pub question: String,
    pub answer: String,
    pub rationale: String,
    pub criteria: Vec<String>,
    /// 1-based position in the playlist.
    pub position: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub session_id: String,
    pub task_id: String,
    pub scores: [u8; 5],
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

/// Submitted body; scores are validated before becoming a record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub session_id: String,
    pub task_id: String,
    pub scores: Vec<i64>,
    #[serde(default)]
    pub timestamp_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingAck {
    pub session_id: String,
    pub task_id: String,
    /// 0-based position of the record in the log's rating sequence.
    pub sequence: u64,
    pub accepted_at_ms: u64,
}

#[derive(Clone, Debug)]
struct Slot {
    item: PoolItem,
    source: Source,
}

#[derive(Debug)]
struct Session {
    playlist: Vec<Slot>,
    rated: HashMap<String, RatingAck>,
}

#[derive(Debug, Default)]
struct State {
    sessions: HashMap<String, Session>,
    records: Vec<(RatingRecord, Source)>,
    created: u64,
}

/// Sessions, playlists and ratings. Writers take the state lock and append
/// to the log before publishing; readers only need a read lock.
#[derive(Debug)]
pub struct Study {
    pool: TaskPool,
    config: StudyConfig,
    state: RwLock<State>,
    log: Option<Mutex<RatingLog>>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn task_id(position: usize) -> String {
    format!("t{position:03}")
}

impl Study {
    /// Builds a study and, when `log_path` is given, replays that log.
    pub fn open(pool: TaskPool, config: StudyConfig, log_path: Option<&Path>) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.ground_truth_ratio) {
            return Err(ApiError::Config(format!(
                "ground-truth ratio {} outside [0, 1]",
                config.ground_truth_ratio
            )));
        }
        if config.playlist_len == 0 {
            return Err(ApiError::Config("playlist length must be positive".into()));
        }
        let n_gt = config.ground_truth_count();
        let n_gen = config.playlist_len - n_gt;
        if pool.ground_truth.len() < n_gt || pool.generated.len() < n_gen {
            return Err(ApiError::Config(format!(
                "playlists need {n_gt} ground-truth and {n_gen} generated items; pool has {} and {}",
                pool.ground_truth.len(),
                pool.generated.len()
            )));
        }
        let mut study = Self {
            pool,
            config,
            state: RwLock::new(State::default()),
            log: None,
        };
        if let Some(path) = log_path {
            let (log, entries) = RatingLog::open(path)?;
            study.replay(entries)?;
            study.log = Some(Mutex::new(log));
        }
        Ok(study)
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    fn replay(&mut self, entries: Vec<LogEntry>) -> Result<()> {
        let state = self.state.get_mut().expect("state lock poisoned");
        for entry in entries {
            match entry {
                LogEntry::Session { session_id, .. } => {
                    let playlist = build_playlist(&self.pool, &self.config, &session_id);
                    state.created += 1;
                    state.sessions.insert(
                        session_id,
                        Session {
                            playlist,
                            rated: HashMap::new(),
                        },
                    );
                }
                LogEntry::Rating { record, source, ack, .. } => {
                    let session = state
                        .sessions
                        .get_mut(&record.session_id)
                        .ok_or_else(|| ApiError::Log(format!("rating for unknown session {}", record.session_id)))?;
                    session.rated.insert(record.task_id.clone(), ack);
                    state.records.push((record, source));
                }
            }
        }
        Ok(())
    }

    fn append(&self, entry: &LogEntry) -> Result<()> {
        match &self.log {
            Some(log) => log.lock().map_err(|_| ApiError::Log("log lock poisoned".into()))?.append(entry),
            None => Ok(()),
        }
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, State> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn create_session(&self) -> Result<String> {
        let mut state = self.write();
        let mut counter = state.created;
        let id = loop {
            let id = format!("s{:016x}", splitmix(self.config.seed ^ splitmix(counter)));
            if !state.sessions.contains_key(&id) {
                break id;
            }
            counter += 1;
        };
        self.append(&LogEntry::Session {
            session_id: id.clone(),
            created_at_ms: now_ms(),
        })?;
        let playlist = build_playlist(&self.pool, &self.config, &id);
        state.created = counter + 1;
        state.sessions.insert(
            id.clone(),
            Session {
                playlist,
                rated: HashMap::new(),
            },
        );
        Ok(id)
    }

    /// The first unrated task of the session's playlist, or `None` when
    /// every task has been rated.
    pub fn next_task(&self, session_id: &str) -> Result<Option<RatingTask>> {
        let state = self.read();
        let session = state
            .sessions
            .get(session_id)
            .ok_or_else(|| ApiError::UnknownSession(session_id.to_owned()))?;
        let total = session.playlist.len();
        Ok(session
            .playlist
            .iter()
            .enumerate()
            .find(|(i, _)| !session.rated.contains_key(&task_id(*i + 1)))
            .map(|(i, slot)| RatingTask {
                task_id: task_id(i + 1),
                sample_id: slot.item.sample_id.clone(),
                question: slot.item.question.clone(),
                answer: slot.item.answer.clone(),
                rationale: slot.item.rationale.clone(),
                criteria: CRITERIA.iter().map(|c| (*c).to_owned()).collect(),
                position: i + 1,
                total,
            }))
    }

    /// Validates and stores a rating. A repeat of an already rated
    /// (session, task) returns the first acknowledgment unchanged.
    pub fn submit(&self, submission: RatingSubmission) -> Result<RatingAck> {
        let scores = validate_scores(&submission.scores)?;
        let mut state = self.write();
        let session = state
            .sessions
            .get(&submission.session_id)
            .ok_or_else(|| ApiError::UnknownSession(submission.session_id.clone()))?;
        if let Some(ack) = session.rated.get(&submission.task_id) {
            return Ok(ack.clone());
        }
        let position = submission
            .task_id
            .strip_prefix('t')
            .and_then(|p| p.parse::<usize>().ok())
            .filter(|&p| p >= 1 && p <= session.playlist.len() && task_id(p) == submission.task_id)
            .ok_or_else(|| ApiError::UnknownTask {
                session: submission.session_id.clone(),
                task: submission.task_id.clone(),
            })?;
        let slot = session.playlist[position - 1].clone();
        let accepted_at_ms = now_ms();
        let record = RatingRecord {
            session_id: submission.session_id,
            task_id: submission.task_id,
            scores,
            timestamp_ms: submission.timestamp_ms.unwrap_or(accepted_at_ms),
        };
        let ack = RatingAck {
            session_id: record.session_id.clone(),
            task_id: record.task_id.clone(),
            sequence: state.records.len() as u64,
            accepted_at_ms,
        };
        self.append(&LogEntry::Rating {
            record: record.clone(),
            source: slot.source,
            sample_id: slot.item.sample_id,
            ack: ack.clone(),
        })?;
        let session = state.sessions.get_mut(&record.session_id).expect("checked above");
        session.rated.insert(record.task_id.clone(), ack.clone());
        state.records.push((record, slot.source));
        Ok(ack)
    }

    pub fn aggregate(&self) -> Result<AggregateReport> {
        let state = self.read();
        aggregate(state.records.iter().map(|(r, s)| (*s, &r.scores)))
    }

    /// Stored records with their hidden sources, in submission order.
    pub fn records(&self) -> Vec<(RatingRecord, Source)> {
        self.read().records.clone()
    }

    pub fn session_count(&self) -> usize {
        self.read().sessions.len()
    }
}

/// Exactly five integer scores in 1..=5; errors name every offending criterion.
pub fn validate_scores(scores: &[i64]) -> Result<[u8; 5]> {
    if scores.len() != CRITERIA.len() {
        return Err(ApiError::Validation {
            message: format!("expected {} scores, got {}", CRITERIA.len(), scores.len()),
            detail: json!({ "expected": CRITERIA.len(), "got": scores.len() }),
        });
    }
    let bad: Vec<_> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| !(MIN_SCORE..=MAX_SCORE).contains(&s))
        .map(|(i, &s)| json!({ "criterion": i + 1, "text": CRITERIA[i], "score": s }))
        .collect();
    if let Some(first) = bad.first() {
        return Err(ApiError::Validation {
            message: format!(
                "score {} for criterion {} is outside {MIN_SCORE}..={MAX_SCORE}",
                first["score"], first["criterion"]
            ),
            detail: json!({ "invalid": bad }),
        });
    }
    let mut out = [0u8; 5];
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = s as u8;
    }
    Ok(out)
}

/// Seeded draw of ground-truth and generated items, shuffled together.
fn build_playlist(pool: &TaskPool, config: &StudyConfig, session_id: &str) -> Vec<Slot> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed) ^ fnv1a(session_id.as_bytes()));
    let n_gt = config.ground_truth_count();
    let mut slots: Vec<Slot> = Vec::with_capacity(config.playlist_len);
    for (items, n, source) in [
        (&pool.ground_truth, n_gt, Source::GroundTruth),
        (&pool.generated, config.playlist_len - n_gt, Source::Generated),
    ] {
        slots.extend(items.choose_multiple(&mut rng, n).map(|item| Slot {
            item: item.clone(),
            source,
        }));
    }
    slots.shuffle(&mut rng);
    slots
}
