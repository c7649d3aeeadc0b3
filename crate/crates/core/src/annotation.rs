//! Hands unlabeled triplets to annotators, logs their judgments and writes
//! the aggregated label back to the manifest once three people have voted.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clip::{frame_file_name, frame_paths, parse_frame_index};
use crate::dataset::{
    aggregate_judgments, quantize_h, read_manifest, resolve_clip, write_manifest, Choice, Judgment, Source, Triplet,
    JUDGMENTS_PER_TRIPLET,
};
use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Playback {
    pub fps: u32,
    pub frames: usize,
}

/// Clips loop at 2 fps over 12 frames.
pub const PLAYBACK: Playback = Playback { fps: 2, frames: 12 };

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown annotator session `{0}`")]
    Unauthorized(String),
    #[error("unknown triplet `{0}`")]
    UnknownTriplet(String),
    #[error("annotator `{annotator}` already judged `{triplet}`")]
    Duplicate { annotator: String, triplet: String },
    #[error("triplet `{triplet}` is not assigned to `{annotator}`")]
    NotAssigned { annotator: String, triplet: String },
    #[error(transparent)]
    Core(#[from] Error),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

/// Judgments gathered so far for every queued triplet.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueueState {
    judgments: BTreeMap<String, Vec<Judgment>>,
}

impl QueueState {
    pub fn new(ids: impl IntoIterator<Item = String>) -> Self {
        Self { judgments: ids.into_iter().map(|id| (id, Vec::new())).collect() }
    }

    /// Rebuilds the state by replaying a judgment log.
    pub fn replay(ids: impl IntoIterator<Item = String>, log: impl IntoIterator<Item = Judgment>) -> ServiceResult<Self> {
        let mut state = Self::new(ids);
        for j in log {
            state.apply(j)?;
        }
        Ok(state)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.judgments.contains_key(id)
    }

    pub fn count(&self, id: &str) -> usize {
        self.judgments.get(id).map_or(0, Vec::len)
    }

    pub fn is_finalized(&self, id: &str) -> bool {
        self.count(id) == JUDGMENTS_PER_TRIPLET
    }

    pub fn judged_by(&self, id: &str, annotator: &str) -> bool {
        self.judgments.get(id).is_some_and(|js| js.iter().any(|j| j.annotator_id == annotator))
    }

    pub fn judgments(&self, id: &str) -> &[Judgment] {
        self.judgments.get(id).map_or(&[], Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    /// Adds a judgment; returns the aggregated `h` when it is the third.
    pub fn apply(&mut self, j: Judgment) -> ServiceResult<Option<f64>> {
        let js = self
            .judgments
            .get_mut(&j.triplet_id)
            .ok_or_else(|| ServiceError::UnknownTriplet(j.triplet_id.clone()))?;
        if js.iter().any(|o| o.annotator_id == j.annotator_id) {
            return Err(ServiceError::Duplicate { annotator: j.annotator_id, triplet: j.triplet_id });
        }
        if js.len() == JUDGMENTS_PER_TRIPLET {
            return Err(Error::Invalid(format!("triplet `{}` already has {JUDGMENTS_PER_TRIPLET} judgments", j.triplet_id)).into());
        }
        js.push(j);
        if js.len() == JUDGMENTS_PER_TRIPLET {
            Ok(Some(aggregate_judgments(js)?))
        } else {
            Ok(None)
        }
    }
}

pub fn read_judgment_log(path: &Path) -> Result<Vec<Judgment>, Error> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::Io { path: path.to_path_buf(), source: e }),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let j = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(j);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Session {
    pub annotator_id: String,
    pub in_flight: Option<String>,
    pub served: usize,
    pub completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFrames {
    pub clip: String,
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletDescriptor {
    pub id: String,
    pub a: ClipFrames,
    pub b: ClipFrames,
    #[serde(rename = "ref")]
    pub reference: ClipFrames,
    pub playback: Playback,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NextTriplet {
    Triplet(TripletDescriptor),
    NoneRemaining,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgmentAck {
    pub finalized: bool,
    pub h: Option<f64>,
}

pub struct AnnotationService {
    manifest_path: PathBuf,
    triplets: Vec<Triplet>,
    log: File,
    queue: QueueState,
    sessions: HashMap<String, Session>,
    allowed: Option<HashSet<String>>,
    cursor: usize,
}

impl AnnotationService {
    /// Loads the manifest, replays the judgment log and finalizes any
    /// triplet whose third judgment was logged but not yet written back.
    pub fn open(manifest: impl AsRef<Path>, log: impl AsRef<Path>, allowed: Option<Vec<String>>) -> ServiceResult<Self> {
        let manifest_path = manifest.as_ref().to_path_buf();
        let log_path = log.as_ref();
        let mut triplets = read_manifest(&manifest_path)?;
        let history = read_judgment_log(log_path)?;
        let logged: HashSet<&str> = history.iter().map(|j| j.triplet_id.as_str()).collect();
        let ids = triplets
            .iter()
            .filter(|t| t.source == Source::Unlabeled || logged.contains(t.id.as_str()))
            .map(|t| t.id.clone());
        let queue = QueueState::replay(ids.collect::<Vec<_>>(), history)?;

        let mut dirty = false;
        for t in triplets.iter_mut() {
            if queue.is_finalized(&t.id) && t.source == Source::Unlabeled {
                t.h = Some(quantize_h(aggregate_judgments(queue.judgments(&t.id))?));
                t.source = Source::Human;
                dirty = true;
            }
        }
        if dirty {
            write_manifest(&manifest_path, &triplets)?;
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(Error::io(log_path))?;
        Ok(Self {
            manifest_path,
            triplets,
            log,
            queue,
            sessions: HashMap::new(),
            allowed: allowed.map(|a| a.into_iter().collect()),
            cursor: 0,
        })
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn queue(&self) -> &QueueState {
        &self.queue
    }

    pub fn session(&self, annotator: &str) -> Option<&Session> {
        self.sessions.get(annotator)
    }

    /// Directory clip paths are resolved against.
    pub fn clip_root(&self) -> PathBuf {
        resolve_clip(&self.manifest_path, "")
    }

    /// File behind a `/clips/{clip}/frame_NNN.png` URL. Only clips named in
    /// the manifest resolve, so crafted paths cannot escape them.
    pub fn frame_file(&self, url_path: &str) -> Option<PathBuf> {
        let (clip, file) = url_path.trim_start_matches('/').rsplit_once('/')?;
        parse_frame_index(file)?;
        let named = self
            .triplets
            .iter()
            .flat_map(|t| [&t.a, &t.b, &t.reference])
            .find(|c| c.trim_matches('/') == clip)?;
        Some(resolve_clip(&self.manifest_path, named).join(file))
    }

    fn authorize(&self, annotator: &str) -> ServiceResult<()> {
        let ok = !annotator.is_empty() && self.allowed.as_ref().is_none_or(|a| a.contains(annotator));
        if ok {
            Ok(())
        } else {
            Err(ServiceError::Unauthorized(annotator.to_string()))
        }
    }

    fn in_flight_count(&self, id: &str) -> usize {
        self.sessions.values().filter(|s| s.in_flight.as_deref() == Some(id)).count()
    }

    fn clip_frames(&self, clip: &str) -> ServiceResult<ClipFrames> {
        let available = frame_paths(&resolve_clip(&self.manifest_path, clip))?.len();
        let frames = (0..available.min(PLAYBACK.frames))
            .map(|n| format!("/clips/{}/{}", clip.trim_matches('/'), frame_file_name(n)))
            .collect();
        Ok(ClipFrames { clip: clip.to_string(), frames })
    }

    fn describe(&self, index: usize) -> ServiceResult<TripletDescriptor> {
        let t = &self.triplets[index];
        Ok(TripletDescriptor {
            id: t.id.clone(),
            a: self.clip_frames(&t.a)?,
            b: self.clip_frames(&t.b)?,
            reference: self.clip_frames(&t.reference)?,
            playback: PLAYBACK,
        })
    }

    /// Assigns the least-judged triplet this annotator has not seen, cycling
    /// through ties in manifest order. Asking again before answering returns
    /// the same triplet.
    pub fn next_triplet(&mut self, annotator: &str) -> ServiceResult<NextTriplet> {
        self.authorize(annotator)?;
        let session = self
            .sessions
            .entry(annotator.to_string())
            .or_insert_with(|| Session { annotator_id: annotator.to_string(), ..Default::default() });
        if let Some(id) = session.in_flight.clone() {
            let index = self.triplets.iter().position(|t| t.id == id).expect("in-flight ids come from the manifest");
            return Ok(NextTriplet::Triplet(self.describe(index)?));
        }

        let n = self.triplets.len();
        let mut best: Option<(usize, usize)> = None;
        for offset in 0..n {
            let i = (self.cursor + offset) % n;
            let id = &self.triplets[i].id;
            if !self.queue.contains(id) || self.queue.is_finalized(id) || self.queue.judged_by(id, annotator) {
                continue;
            }
            let load = self.queue.count(id) + self.in_flight_count(id);
            if load >= JUDGMENTS_PER_TRIPLET {
                continue;
            }
            if best.is_none_or(|(_, l)| load < l) {
                best = Some((i, load));
            }
        }
        let Some((index, _)) = best else {
            return Ok(NextTriplet::NoneRemaining);
        };
        self.cursor = (index + 1) % n;
        let descriptor = self.describe(index)?;
        let session = self.sessions.get_mut(annotator).unwrap();
        session.in_flight = Some(descriptor.id.clone());
        session.served += 1;
        Ok(NextTriplet::Triplet(descriptor))
    }

    /// Logs a judgment on the annotator's current triplet. The third
    /// judgment finalizes `h` and rewrites the manifest.
    pub fn record_judgment(&mut self, annotator: &str, triplet_id: &str, choice: Choice) -> ServiceResult<JudgmentAck> {
        self.authorize(annotator)?;
        let session = self
            .sessions
            .get(annotator)
            .ok_or_else(|| ServiceError::Unauthorized(annotator.to_string()))?;
        let Some(index) = self.triplets.iter().position(|t| t.id == triplet_id) else {
            return Err(ServiceError::UnknownTriplet(triplet_id.to_string()));
        };
        if self.queue.judged_by(triplet_id, annotator) {
            return Err(ServiceError::Duplicate { annotator: annotator.to_string(), triplet: triplet_id.to_string() });
        }
        if session.in_flight.as_deref() != Some(triplet_id) {
            return Err(ServiceError::NotAssigned { annotator: annotator.to_string(), triplet: triplet_id.to_string() });
        }

        let judgment = Judgment {
            triplet_id: triplet_id.to_string(),
            annotator_id: annotator.to_string(),
            choice,
            timestamp: Utc::now(),
        };
        let line = serde_json::to_string(&judgment).map_err(Error::from)?;
        let mut check = self.queue.clone();
        let h = check.apply(judgment)?;
        writeln!(self.log, "{line}")
            .and_then(|_| self.log.sync_data())
            .map_err(|e| Error::Io { path: PathBuf::from("judgment log"), source: e })?;
        self.queue = check;

        let session = self.sessions.get_mut(annotator).unwrap();
        session.in_flight = None;
        session.completed += 1;

        if let Some(h) = h {
            let mut updated = self.triplets.clone();
            updated[index].h = Some(quantize_h(h));
            updated[index].source = Source::Human;
            write_manifest(&self.manifest_path, &updated)?;
            self.triplets = updated;
            for s in self.sessions.values_mut() {
                if s.in_flight.as_deref() == Some(triplet_id) {
                    s.in_flight = None;
                }
            }
            return Ok(JudgmentAck { finalized: true, h: Some(quantize_h(h)) });
        }
        Ok(JudgmentAck { finalized: false, h: None })
    }
}
