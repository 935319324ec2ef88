//! Background-music gating and windowed vocal extraction planning.
//!
//! Vocal extraction works far better with long context, so flagged
//! segments are not extracted one by one: they are packed into windows of
//! up to `window_s` seconds of surrounding chunk audio, and only the
//! segments' own sample ranges are taken from the extracted vocals.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::overlap::TimedAudio;
use crate::timeline::TimeInterval;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BgmPolicy {
    /// Segments with probability strictly above this are flagged.
    pub threshold: f64,
    pub window_s: f64,
    /// Preferred context before a window's first segment.
    pub lead_s: f64,
}

impl Default for BgmPolicy {
    fn default() -> Self {
        Self { threshold: 0.3, window_s: 120.0, lead_s: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicTag {
    pub segment_id: String,
    pub music_prob: f64,
}

pub fn flag_music(tags: &[MusicTag], threshold: f64) -> BTreeSet<String> {
    tags.iter().filter(|t| t.music_prob > threshold).map(|t| t.segment_id.clone()).collect()
}

/// The part of one flagged segment handled by a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMember {
    pub segment_id: String,
    /// Equal to the segment's interval unless the segment was split.
    pub interval: TimeInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionWindow {
    pub interval: TimeInterval,
    pub members: Vec<WindowMember>,
    /// Set when a member is only part of a segment longer than the window.
    pub split: bool,
}

/// Pack flagged segments into windows, greedily from the left.
///
/// A window opened for segment `s` starts `lead_s` before it when the
/// segment still fits, is clipped to the chunk and then shifted back to
/// keep its full length where the chunk allows. Every later segment fully
/// inside the window joins it. Segments longer than `window_s` are covered
/// by abutting windows starting at the segment start.
pub fn plan_windows(flagged: &[(String, TimeInterval)], chunk: TimeInterval, policy: &BgmPolicy) -> Vec<ExtractionWindow> {
    let mut order: Vec<&(String, TimeInterval)> = flagged.iter().collect();
    order.sort_by(|a, b| crate::timeline::cmp_f64(a.1.start_s, b.1.start_s).then(crate::timeline::cmp_f64(a.1.end_s, b.1.end_s)));
    let w = policy.window_s;
    let mut windows: Vec<ExtractionWindow> = Vec::new();
    for (id, iv) in order {
        if let Some(last) = windows.last_mut() {
            if !last.split && last.interval.contains(iv) {
                last.members.push(WindowMember { segment_id: id.clone(), interval: *iv });
                continue;
            }
        }
        if iv.duration() > w {
            let mut t = iv.start_s;
            while t < iv.end_s {
                let end = (t + w).min(iv.end_s);
                let piece = TimeInterval::new(t, end);
                windows.push(ExtractionWindow {
                    interval: piece,
                    members: vec![WindowMember { segment_id: id.clone(), interval: piece }],
                    split: true,
                });
                t = end;
            }
            continue;
        }
        let mut start = (iv.start_s - policy.lead_s).max(iv.end_s - w).max(chunk.start_s);
        let end = (start + w).min(chunk.end_s);
        start = (end - w).max(chunk.start_s).min(start);
        windows.push(ExtractionWindow {
            interval: TimeInterval::new(start, end),
            members: vec![WindowMember { segment_id: id.clone(), interval: *iv }],
            split: false,
        });
    }
    windows
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpliceError {
    #[error("vocal track has {got} samples, window needs {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("sample rates differ: {0} vs {1}")]
    RateMismatch(u32, u32),
}

/// Replace the members' sample ranges of `original` with `vocal`, which
/// covers `window.interval`. One sample of length slack is tolerated.
pub fn splice_extracted(original: TimedAudio<'_>, window: &ExtractionWindow, vocal: &AudioBuffer) -> Result<AudioBuffer, SpliceError> {
    if vocal.sample_rate_hz != original.audio.sample_rate_hz {
        return Err(SpliceError::RateMismatch(vocal.sample_rate_hz, original.audio.sample_rate_hz));
    }
    let w0 = original.index(window.interval.start_s);
    let want = original.index(window.interval.end_s) - w0;
    let got = vocal.samples.len();
    if got.abs_diff(want) > 1 {
        return Err(SpliceError::LengthMismatch { got, want });
    }
    let mut out = original.audio.clone();
    for m in &window.members {
        for g in original.index(m.interval.start_s)..original.index(m.interval.end_s) {
            if let Some(&v) = vocal.samples.get(g - w0) {
                out.samples[g] = v;
            }
        }
    }
    Ok(out)
}
