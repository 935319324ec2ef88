//! RTTM speaker-segment interchange.
//!
//! `SPEAKER <rec> <chan> <onset> <dur> <ortho> <stype> <speaker> ...`; extra
//! trailing columns are ignored, as are non-SPEAKER lines and `;` comments.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeline::TimeInterval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttmSegment {
    pub recording_id: String,
    pub speaker_id: String,
    pub interval: TimeInterval,
}

impl RttmSegment {
    pub fn new(recording_id: impl Into<String>, speaker_id: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        Self { recording_id: recording_id.into(), speaker_id: speaker_id.into(), interval: TimeInterval::new(start_s, end_s) }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("rttm line {line}: {message}")]
pub struct RttmError {
    pub line: usize,
    pub message: String,
}

pub fn parse_rttm(text: &str) -> Result<Vec<RttmSegment>, RttmError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with(';') || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols[0] != "SPEAKER" {
            continue;
        }
        let err = |message: String| RttmError { line: idx + 1, message };
        if cols.len() < 8 {
            return Err(err(format!("expected at least 8 columns, found {}", cols.len())));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("bad {what}: {s:?}")));
        let onset = num(cols[3], "onset")?;
        let dur = num(cols[4], "duration")?;
        if dur < 0.0 {
            return Err(err(format!("negative duration {dur}")));
        }
        out.push(RttmSegment::new(cols[1], cols[7], onset, onset + dur));
    }
    Ok(out)
}

pub fn write_rttm(segments: &[RttmSegment]) -> String {
    let mut s = String::new();
    for seg in segments {
        let _ = writeln!(
            s,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            seg.recording_id,
            seg.interval.start_s,
            seg.interval.duration(),
            seg.speaker_id
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_tolerates_extra_columns_and_comments() {
        let text = "; comment\nSPEAKER rec1 1 0.50 2.25 <NA> <NA> spk_a <NA> <NA> extra\nLEXEME x\nSPEAKER rec1 1 3 1 <NA> <NA> spk_b\n";
        let segs = parse_rttm(text).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].speaker_id, "spk_a");
        assert_eq!(segs[0].interval, TimeInterval::new(0.5, 2.75));
        assert_eq!(segs[1].interval, TimeInterval::new(3.0, 4.0));
    }

    #[test]
    fn parse_errors_carry_line() {
        let e = parse_rttm("\nSPEAKER r 1 x 1 <NA> <NA> a").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(parse_rttm("SPEAKER r 1 0 1").is_err());
    }

    #[test]
    fn write_parse_round_trip() {
        let segs = vec![RttmSegment::new("r", "a", 0.125, 1.5), RttmSegment::new("r", "b", 2.0, 2.5)];
        assert_eq!(parse_rttm(&write_rttm(&segs)).unwrap(), segs);
    }
}
