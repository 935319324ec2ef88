//! Evaluation metrics: transcription, diarization, separation and throughput.

pub mod diarization;
pub mod rtf;
pub mod rttm;
pub mod signal;
pub mod wer;

pub use diarization::{
    der, der_short, der_turn, jer, score, DerBreakdown, DiarizationError, DiarizationScore, DEFAULT_COLLAR_S,
};
pub use rtf::{rtf_report, RtfReport, StageRtf};
pub use rttm::{parse_rttm, write_rttm, RttmError, RttmSegment};
pub use signal::{si_sdr, synth_overlap_mixture, MixtureSpec, OverlapMixture, SignalError};
pub use wer::{wer, WerBreakdown};
