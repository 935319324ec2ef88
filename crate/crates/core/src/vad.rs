//! Silence-aware chunking of long recordings.
//!
//! Speech regions come from hysteresis thresholding of per-frame VAD
//! probabilities; chunks are then packed greedily from those regions and
//! cut only inside silence gaps, except when a single region alone exceeds
//! the chunk limit.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::timeline::TimeInterval;

/// Per-frame speech probabilities at a fixed hop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VadFrameSeries {
    pub hop_s: f64,
    pub probs: Vec<f64>,
}

impl VadFrameSeries {
    pub fn duration_s(&self) -> f64 {
        self.probs.len() as f64 * self.hop_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VadParams {
    pub on_thresh: f64,
    pub off_thresh: f64,
    pub min_silence_s: f64,
    pub min_speech_s: f64,
}

impl Default for VadParams {
    fn default() -> Self {
        Self { on_thresh: 0.5, off_thresh: 0.35, min_silence_s: 0.3, min_speech_s: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Chunk {
    pub chunk_id: String,
    pub interval: TimeInterval,
    /// The chunk ends at a cut placed inside speech because one region alone
    /// exceeded the limit.
    pub forced_cut: bool,
}

pub const DEFAULT_MAX_CHUNK_S: f64 = 300.0;

pub fn chunk_id(index: usize) -> String {
    format!("c{index:04}")
}

/// Hysteresis segmentation of a VAD series into speech regions.
///
/// Speech starts at the first frame with `prob >= on_thresh` and ends at the
/// start of a run of frames with `prob < off_thresh` lasting at least
/// `min_silence_s`. Shorter dips are absorbed. Trailing sub-threshold frames
/// at the end of the series are not speech. Regions shorter than
/// `min_speech_s` are dropped.
pub fn detect_regions(vad: &VadFrameSeries, params: &VadParams) -> Vec<TimeInterval> {
    assert!(params.on_thresh >= params.off_thresh, "on_thresh must be >= off_thresh");
    let hop = vad.hop_s;
    let min_silence_frames = (params.min_silence_s / hop - 1e-9).ceil().max(1.0) as usize;

    let mut regions = Vec::new();
    let mut speech_start: Option<usize> = None;
    let mut silence_start: Option<usize> = None;

    let close = |start: usize, end: usize, regions: &mut Vec<TimeInterval>| {
        let iv = TimeInterval::new(start as f64 * hop, end as f64 * hop);
        if iv.duration() >= params.min_speech_s && !iv.is_empty() {
            regions.push(iv);
        }
    };

    for (i, &p) in vad.probs.iter().enumerate() {
        match speech_start {
            None => {
                if p >= params.on_thresh {
                    speech_start = Some(i);
                    silence_start = None;
                }
            }
            Some(start) => {
                if p < params.off_thresh {
                    let s = *silence_start.get_or_insert(i);
                    if i + 1 - s >= min_silence_frames {
                        close(start, s, &mut regions);
                        speech_start = None;
                        silence_start = None;
                    }
                } else {
                    silence_start = None;
                }
            }
        }
    }
    if let Some(start) = speech_start {
        close(start, silence_start.unwrap_or(vad.probs.len()), &mut regions);
    }
    regions
}

/// Greedy packing of sorted disjoint speech regions into chunks shorter than
/// `max_chunk_s`.
///
/// Chunks tile the span from the first region start to the last region end.
/// A cut between two regions goes to the middle of the silence gap, pulled
/// earlier when needed so the closing chunk stays under the limit. A region
/// that cannot fit even in an otherwise empty chunk is cut at exactly
/// `max_chunk_s` and the chunk is marked `forced_cut`.
pub fn chunk_regions(regions: &[TimeInterval], max_chunk_s: f64) -> Vec<Chunk> {
    assert!(max_chunk_s > 0.0);
    let mut chunks = Vec::new();
    let Some(first) = regions.first() else {
        return chunks;
    };
    let push = |chunks: &mut Vec<Chunk>, start: f64, end: f64, forced: bool| {
        chunks.push(Chunk { chunk_id: chunk_id(chunks.len()), interval: TimeInterval::new(start, end), forced_cut: forced });
    };

    let mut chunk_start = first.start_s;
    // End of the last region included in the open chunk, if any.
    let mut last_end: Option<f64> = None;
    let mut i = 0;
    while i < regions.len() {
        let region = regions[i];
        if region.end_s - chunk_start < max_chunk_s {
            last_end = Some(region.end_s);
            i += 1;
            continue;
        }
        match last_end {
            Some(prev_end) => {
                let gap = (region.start_s - prev_end).max(0.0);
                let room = chunk_start + max_chunk_s - prev_end;
                let cut = prev_end + (0.5 * gap).min(0.5 * room);
                push(&mut chunks, chunk_start, cut, false);
                chunk_start = cut;
                last_end = None;
            }
            None => {
                let cut = chunk_start + max_chunk_s;
                push(&mut chunks, chunk_start, cut, true);
                chunk_start = cut;
                // The remainder of this region opens the next chunk.
            }
        }
    }
    if let Some(end) = last_end {
        push(&mut chunks, chunk_start, end, false);
    }
    chunks
}
