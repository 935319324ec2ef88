//! Manifest flags. Every fallback the pipeline takes is recorded with one.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// Loudness gain pushed samples past full scale; they were hard-clipped.
    Clipped,
    /// A chunk boundary was forced inside continuous speech.
    ForcedCut,
    /// Fewer than the minimum seconds of clean reference speech; the overlap
    /// was cut instead of separated.
    NoReferenceFallback,
    /// The separation or embedding backend failed; original geometry kept.
    SeparationFailed,
    /// Three or more speakers share the overlap window.
    MultiSpeakerUnresolved,
    /// Candidate similarities tied exactly.
    AssignmentTie,
    /// Overlap shorter than the configured minimum; left as-is.
    OverlapSkipped,
    /// Segment lost all of its time to overlap cuts.
    RemovedByCut,
    MusicFlagged,
    TaggingFailed,
    /// A flagged segment longer than the extraction window spans several windows.
    SplitExtraction,
    VocalExtractionFailed,
    DenoiseFailed,
    /// One or more ASR backends failed; voting ran on the survivors.
    DegradedEnsemble,
    /// The primary ASR failed and another model took its place.
    PrimaryPromoted,
    AsrFailed,
    /// No primary timestamps were available; word times are uniform.
    InterpolatedAll,
    /// Transcript discarded for excessive n-gram repetition.
    RepetitionDiscarded,
    CaptionFailed,
    DiarizationFailed,
    /// A duplex region was dropped because an overlap inside it was not separated.
    RegionDroppedUnresolved,
}
