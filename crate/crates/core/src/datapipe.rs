//! Clip manifest curation: quality filtering, format checks and the
//! reference/training window split.
//!
//! Manifests are JSON Lines, one [`ClipManifestRecord`] per line. Scores are
//! precomputed upstream; nothing here decodes media.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TARGET_HEIGHT_PX: u32 = 480;
pub const TARGET_FPS: f64 = 24.0;
pub const TARGET_SAMPLE_RATE_HZ: u32 = 16_000;
pub const REFERENCE_WINDOW_S: f64 = 4.0;
pub const TRAINING_WINDOW_S: f64 = 5.0;
pub const MIN_SPLIT_DURATION_S: f64 = REFERENCE_WINDOW_S + TRAINING_WINDOW_S;
pub const REFERENCE_FRAME_POLICY: &str = "random-face-frame-cropped";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifestRecord {
    pub clip_id: String,
    pub duration_s: f64,
    pub fps: f64,
    pub height_px: u32,
    pub sample_rate_hz: u32,
    pub sync_offset_frames: i64,
    pub sync_confidence: f64,
    pub aesthetic_score: f64,
    pub speaker_count: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordError {
    #[error("line {line}: unparseable record: {message}")]
    Parse { line: usize, message: String },
    #[error("clip {clip_id:?}: {message}")]
    Invalid { clip_id: String, message: String },
}

impl ClipManifestRecord {
    /// Checks the record-level invariants (positive duration and fps, finite
    /// scores, aesthetic score in `[0, 1]`).
    pub fn validate(&self) -> Result<(), RecordError> {
        let invalid = |message: &str| {
            Err(RecordError::Invalid {
                clip_id: self.clip_id.clone(),
                message: message.to_string(),
            })
        };
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return invalid("duration_s must be finite and positive");
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return invalid("fps must be finite and positive");
        }
        if !self.sync_confidence.is_finite() {
            return invalid("sync_confidence must be finite");
        }
        if !(0.0..=1.0).contains(&self.aesthetic_score) {
            return invalid("aesthetic_score must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Filter predicates in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    SpeakerCount,
    SyncOffset,
    SyncConfidence,
    AestheticScore,
    Duration,
}

impl Predicate {
    pub const ORDER: [Predicate; 5] = [
        Predicate::SpeakerCount,
        Predicate::SyncOffset,
        Predicate::SyncConfidence,
        Predicate::AestheticScore,
        Predicate::Duration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Predicate::SpeakerCount => "speaker_count",
            Predicate::SyncOffset => "sync_offset",
            Predicate::SyncConfidence => "sync_confidence",
            Predicate::AestheticScore => "aesthetic_score",
            Predicate::Duration => "duration",
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Predicate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Predicate::ORDER
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown predicate {s:?}"))
    }
}

/// Keep iff `speaker_count == speakers`, `|offset| <= max_abs_offset`,
/// `confidence > min_confidence`, `aesthetic >= min_aesthetic` and
/// `duration >= min_duration_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterThresholds {
    pub speakers: u32,
    pub max_abs_offset: i64,
    pub min_confidence: f64,
    pub min_aesthetic: f64,
    pub min_duration_s: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            speakers: 1,
            max_abs_offset: 3,
            min_confidence: 1.5,
            min_aesthetic: 0.3,
            min_duration_s: 10.0,
        }
    }
}

impl FilterThresholds {
    pub fn passes(&self, p: Predicate, r: &ClipManifestRecord) -> bool {
        match p {
            Predicate::SpeakerCount => r.speaker_count == self.speakers,
            Predicate::SyncOffset => r.sync_offset_frames.unsigned_abs() <= self.max_abs_offset.unsigned_abs(),
            Predicate::SyncConfidence => r.sync_confidence > self.min_confidence,
            Predicate::AestheticScore => r.aesthetic_score >= self.min_aesthetic,
            Predicate::Duration => r.duration_s >= self.min_duration_s,
        }
    }

    /// First failing predicate, or `None` when the record is kept.
    pub fn first_failure(&self, r: &ClipManifestRecord) -> Option<Predicate> {
        Predicate::ORDER.into_iter().find(|&p| !self.passes(p, r))
    }
}

/// Per-record result, in input order.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordOutcome {
    Kept(ClipManifestRecord),
    Rejected {
        record: ClipManifestRecord,
        reason: Predicate,
    },
    Error(RecordError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub clip_id: String,
    pub reason: Predicate,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterReport {
    pub outcomes: Vec<RecordOutcome>,
}

impl FilterReport {
    pub fn kept(&self) -> impl Iterator<Item = &ClipManifestRecord> {
        self.outcomes.iter().filter_map(|o| match o {
            RecordOutcome::Kept(r) => Some(r),
            _ => None,
        })
    }

    pub fn rejected(&self) -> impl Iterator<Item = Rejection> + '_ {
        self.outcomes.iter().filter_map(|o| match o {
            RecordOutcome::Rejected { record, reason } => Some(Rejection {
                clip_id: record.clip_id.clone(),
                reason: *reason,
            }),
            _ => None,
        })
    }

    pub fn errors(&self) -> impl Iterator<Item = &RecordError> {
        self.outcomes.iter().filter_map(|o| match o {
            RecordOutcome::Error(e) => Some(e),
            _ => None,
        })
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }
}

fn classify(r: ClipManifestRecord, th: &FilterThresholds) -> RecordOutcome {
    if let Err(e) = r.validate() {
        return RecordOutcome::Error(e);
    }
    match th.first_failure(&r) {
        None => RecordOutcome::Kept(r),
        Some(reason) => RecordOutcome::Rejected { record: r, reason },
    }
}

pub fn filter_manifest<I>(records: I, th: &FilterThresholds) -> FilterReport
where
    I: IntoIterator<Item = Result<ClipManifestRecord, RecordError>>,
{
    FilterReport {
        outcomes: records
            .into_iter()
            .map(|r| match r {
                Ok(r) => classify(r, th),
                Err(e) => RecordOutcome::Error(e),
            })
            .collect(),
    }
}

/// Parses JSON Lines; blank lines are skipped, line numbers are 1-based.
pub fn parse_manifest(text: &str) -> Vec<Result<ClipManifestRecord, RecordError>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RecordError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn to_jsonl<'a>(records: impl IntoIterator<Item = &'a ClipManifestRecord>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Half-open time interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Window) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSplit {
    pub clip_id: String,
    pub reference_audio_window: Window,
    pub training_window: Window,
    pub reference_frame_policy: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("clip {clip_id:?} lasts {duration_s} s, need at least {MIN_SPLIT_DURATION_S} s")]
pub struct SplitError {
    pub clip_id: String,
    pub duration_s: f64,
}

/// Reference audio from the first 4 s, training target from the last 5 s.
pub fn split_clip(r: &ClipManifestRecord) -> Result<ClipSplit, SplitError> {
    if r.duration_s.is_nan() || r.duration_s < MIN_SPLIT_DURATION_S {
        return Err(SplitError {
            clip_id: r.clip_id.clone(),
            duration_s: r.duration_s,
        });
    }
    Ok(ClipSplit {
        clip_id: r.clip_id.clone(),
        reference_audio_window: Window {
            start: 0.0,
            end: REFERENCE_WINDOW_S,
        },
        training_window: Window {
            start: r.duration_s - TRAINING_WINDOW_S,
            end: r.duration_s,
        },
        reference_frame_policy: REFERENCE_FRAME_POLICY.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "field")]
pub enum FormatIssue {
    Height { found: u32 },
    Fps { found: f64 },
    SampleRate { found: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub clip_id: String,
    pub issues: Vec<FormatIssue>,
}

impl ConformanceReport {
    pub fn is_conformant(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Flags any departure from 480p, 24 fps, 16 kHz.
pub fn standardize_check(r: &ClipManifestRecord) -> ConformanceReport {
    let mut issues = Vec::new();
    if r.height_px != TARGET_HEIGHT_PX {
        issues.push(FormatIssue::Height { found: r.height_px });
    }
    if r.fps != TARGET_FPS {
        issues.push(FormatIssue::Fps { found: r.fps });
    }
    if r.sample_rate_hz != TARGET_SAMPLE_RATE_HZ {
        issues.push(FormatIssue::SampleRate {
            found: r.sample_rate_hz,
        });
    }
    ConformanceReport {
        clip_id: r.clip_id.clone(),
        issues,
    }
}
