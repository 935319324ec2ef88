//! Overlapping-speech resolution within one chunk.
//!
//! Only the overlapped interval (plus a short splice margin) is separated
//! into two candidates. Each candidate is attributed to a speaker by cosine
//! similarity between its embedding and the speakers' reference
//! embeddings, where a reference is built from that speaker's speech that
//! nobody else talks over. The original segments are then stitched with the
//! separated audio in place of the mixture.

use std::collections::{BTreeMap, BTreeSet};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::flags::Flag;
use crate::protocol::DispatchError;
use crate::timeline::{find_overlaps, merge_intervals, subtract, OverlapKind, OverlapRelation, SpeakerSegment, TimeInterval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionMode {
    /// Remove the overlap from both segments.
    Case1Cut,
    /// Give the overlap audio to the segment that starts first.
    Case2AssignFirst,
    /// Give the overlap audio to the segment that starts second.
    Case3AssignSecond,
    /// Separate the overlap and give each speaker their own candidate.
    Case4Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    /// Decide on the first candidate's two similarities alone.
    FirstCandidate,
    /// Choose the bijection with the larger summed similarity.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlapPolicy {
    pub mode: ResolutionMode,
    pub min_overlap_s: f64,
    pub crossfade_s: f64,
    pub min_ref_s: f64,
    /// Reference audio is truncated to this many seconds.
    pub max_ref_s: f64,
    pub assignment: AssignmentMode,
}

impl Default for OverlapPolicy {
    fn default() -> Self {
        Self {
            mode: ResolutionMode::Case4Separate,
            min_overlap_s: 0.0,
            crossfade_s: 0.010,
            min_ref_s: 2.0,
            max_ref_s: 30.0,
            assignment: AssignmentMode::FirstCandidate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssignError {
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, AssignError> {
    if a.len() != b.len() {
        return Err(AssignError::DimensionMismatch(a.len(), b.len()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(AssignError::ZeroNorm);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Speaker index (0 = first reference, 1 = second) receiving candidate 1.
    /// Candidate 2 receives the other speaker.
    pub cand1_speaker: usize,
    /// cos(cand1, ref1)
    pub s1: f64,
    /// cos(cand1, ref2)
    pub s2: f64,
    pub tie: bool,
}

impl Assignment {
    /// Candidate index (0 or 1) assigned to speaker `speaker`.
    pub fn candidate_for(&self, speaker: usize) -> usize {
        usize::from(self.cand1_speaker != speaker)
    }
}

/// Attribute two candidates to two reference speakers.
///
/// First-candidate mode compares `s1 = cos(c1, r1)` with `s2 = cos(c1, r2)`; an exact
/// tie defers to joint mode, and an exact joint tie gives candidate 1 to
/// speaker 1 with `tie` set.
pub fn assign_candidates(c1: &[f64], c2: &[f64], r1: &[f64], r2: &[f64], mode: AssignmentMode) -> Result<Assignment, AssignError> {
    let s1 = cosine(c1, r1)?;
    let s2 = cosine(c1, r2)?;
    let joint = || -> Result<(usize, bool), AssignError> {
        let keep = s1 + cosine(c2, r2)?;
        let swap = s2 + cosine(c2, r1)?;
        Ok(if keep > swap {
            (0, false)
        } else if swap > keep {
            (1, false)
        } else {
            (0, true)
        })
    };
    let (cand1_speaker, tie) = match mode {
        AssignmentMode::FirstCandidate if s1 > s2 => (0, false),
        AssignmentMode::FirstCandidate if s1 < s2 => (1, false),
        _ => joint()?,
    };
    Ok(Assignment { cand1_speaker, s1, s2, tie })
}

/// Separation and embedding services. Audio passed in starts at source
/// time `start_s`.
pub trait OverlapBackends {
    fn separate(&self, mixture: &AudioBuffer, start_s: f64) -> Result<[AudioBuffer; 2], DispatchError>;
    fn embed(&self, audio: &AudioBuffer, start_s: f64) -> Result<Vec<f64>, DispatchError>;
}

/// Audio of a chunk together with the source time of its first sample.
#[derive(Debug, Clone, Copy)]
pub struct TimedAudio<'a> {
    pub audio: &'a AudioBuffer,
    pub origin_s: f64,
}

impl TimedAudio<'_> {
    pub fn index(&self, t_s: f64) -> usize {
        self.audio.index_at(t_s - self.origin_s)
    }

    pub fn slice(&self, iv: TimeInterval) -> AudioBuffer {
        let (a, b) = (self.index(iv.start_s), self.index(iv.end_s));
        AudioBuffer::mono(self.audio.samples[a..b.max(a)].to_vec(), self.audio.sample_rate_hz)
    }

    pub fn extent(&self) -> TimeInterval {
        TimeInterval::new(self.origin_s, self.origin_s + self.audio.duration_s())
    }
}

/// Clean stretches of `speaker`: their segments minus any time another
/// speaker is active, chronologically.
pub fn reference_intervals(segments: &[SpeakerSegment], speaker: &str) -> Vec<TimeInterval> {
    let own: Vec<TimeInterval> =
        merge_intervals(&segments.iter().filter(|s| s.speaker_id == speaker).map(|s| s.interval).collect::<Vec<_>>());
    let others: Vec<TimeInterval> = segments.iter().filter(|s| s.speaker_id != speaker).map(|s| s.interval).collect();
    own.iter().flat_map(|iv| subtract(iv, &others)).collect()
}

/// Concatenated clean audio of `speaker`, capped at `max_ref_s`; `None`
/// when less than `min_ref_s` is available.
pub fn collect_reference(
    segments: &[SpeakerSegment],
    speaker: &str,
    audio: TimedAudio<'_>,
    min_ref_s: f64,
    max_ref_s: f64,
) -> Option<AudioBuffer> {
    let stretches = reference_intervals(segments, speaker);
    let total: f64 = stretches.iter().map(TimeInterval::duration).sum();
    if total < min_ref_s {
        return None;
    }
    let sr = audio.audio.sample_rate_hz;
    let cap = (max_ref_s * sr as f64).round() as usize;
    let mut out = Vec::new();
    for iv in stretches {
        out.extend_from_slice(&audio.slice(iv).samples);
        if out.len() >= cap {
            out.truncate(cap);
            break;
        }
    }
    Some(AudioBuffer::mono(out, sr))
}

/// A change to one segment's audio.
#[derive(Debug, Clone, PartialEq)]
pub enum SegmentEdit {
    /// Silence and drop this span.
    Remove(TimeInterval),
    /// Replace `overlap` with `audio`, which covers `window ⊇ overlap`;
    /// the margins outside the overlap are crossfaded.
    Splice { overlap: TimeInterval, window: TimeInterval, audio: AudioBuffer },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSegment {
    pub segment: SpeakerSegment,
    pub edits: Vec<SegmentEdit>,
    pub flags: BTreeSet<Flag>,
}

impl ResolvedSegment {
    /// Parts of the segment that survive removals.
    pub fn kept(&self) -> Vec<TimeInterval> {
        let holes: Vec<TimeInterval> = self
            .edits
            .iter()
            .filter_map(|e| match e {
                SegmentEdit::Remove(iv) => Some(*iv),
                SegmentEdit::Splice { .. } => None,
            })
            .collect();
        subtract(&self.segment.interval, &holes)
    }

    /// Hull of the kept parts, if any survive.
    pub fn span(&self) -> Option<TimeInterval> {
        let kept = self.kept();
        Some(TimeInterval::new(kept.first()?.start_s, kept.last()?.end_s))
    }
}

/// What happened to one overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OverlapRecord {
    pub overlap: TimeInterval,
    pub kind: OverlapKind,
    pub speakers: [String; 2],
    pub applied: Option<ResolutionMode>,
    /// cos(cand1, ref of first speaker), cos(cand1, ref of second speaker).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarities: Option<[f64; 2]>,
    /// Speaker receiving candidate 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cand1_speaker: Option<String>,
    pub flags: BTreeSet<Flag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkResolution {
    pub segments: Vec<ResolvedSegment>,
    pub overlaps: Vec<OverlapRecord>,
}

struct Resolver<'a, B: OverlapBackends + ?Sized> {
    segments: &'a [SpeakerSegment],
    audio: TimedAudio<'a>,
    policy: &'a OverlapPolicy,
    backends: &'a B,
    references: BTreeMap<String, Result<Option<Vec<f64>>, DispatchError>>,
}

impl<B: OverlapBackends + ?Sized> Resolver<'_, B> {
    fn reference(&mut self, speaker: &str) -> Result<Option<Vec<f64>>, DispatchError> {
        if !self.references.contains_key(speaker) {
            let r = match collect_reference(self.segments, speaker, self.audio, self.policy.min_ref_s, self.policy.max_ref_s) {
                // References are concatenations; their start time is that of
                // the first stretch.
                Some(buf) => {
                    let start = reference_intervals(self.segments, speaker)[0].start_s;
                    self.backends.embed(&buf, start).map(Some)
                }
                None => Ok(None),
            };
            self.references.insert(speaker.to_string(), r);
        }
        self.references[speaker].clone()
    }

    /// Separate and assign; `Ok(None)` means no usable references.
    fn separate(&mut self, rel: &OverlapRelation) -> Result<Option<([SegmentEdit; 2], Assignment)>, DispatchError> {
        let (a, b) = (&self.segments[rel.seg_a], &self.segments[rel.seg_b]);
        let r1 = self.reference(&a.speaker_id)?;
        let r2 = self.reference(&b.speaker_id)?;
        let (Some(r1), Some(r2)) = (r1, r2) else {
            return Ok(None);
        };
        let ov = rel.overlap;
        let extent = self.audio.extent();
        let pad = self.policy.crossfade_s;
        let window = TimeInterval::new((ov.start_s - pad).max(extent.start_s), (ov.end_s + pad).min(extent.end_s));
        let mixture = self.audio.slice(window);
        let window_start = self.audio.origin_s + self.audio.index(window.start_s) as f64 / self.audio.audio.sample_rate_hz as f64;
        let cands = self.backends.separate(&mixture, window_start)?;
        let cands = cands.map(|c| fit_length(c, mixture.samples.len()));

        // Embed on the overlap portion only.
        let lo = self.audio.index(ov.start_s) - self.audio.index(window.start_s);
        let hi = self.audio.index(ov.end_s) - self.audio.index(window.start_s);
        let core = |c: &AudioBuffer| AudioBuffer::mono(c.samples[lo..hi].to_vec(), c.sample_rate_hz);
        let ov_start = self.audio.origin_s + self.audio.index(ov.start_s) as f64 / self.audio.audio.sample_rate_hz as f64;
        let e1 = self.backends.embed(&core(&cands[0]), ov_start)?;
        let e2 = self.backends.embed(&core(&cands[1]), ov_start)?;
        let assignment = assign_candidates(&e1, &e2, &r1, &r2, self.policy.assignment)
            .map_err(|e| DispatchError::Backend(crate::protocol::ErrorBody::new("bad_embedding", e.to_string())))?;
        let [c0, c1] = cands;
        let mut by_speaker = [Some(c0), Some(c1)];
        let for_a = by_speaker[assignment.candidate_for(0)].take().expect("bijection");
        let for_b = by_speaker[assignment.candidate_for(1)].take().expect("bijection");
        Ok(Some((
            [
                SegmentEdit::Splice { overlap: ov, window, audio: for_a },
                SegmentEdit::Splice { overlap: ov, window, audio: for_b },
            ],
            assignment,
        )))
    }
}

fn fit_length(mut buf: AudioBuffer, n: usize) -> AudioBuffer {
    buf.samples.resize(n, 0.0);
    buf
}

fn cut_edits(rel: &OverlapRelation, mode: ResolutionMode) -> [Vec<SegmentEdit>; 2] {
    let remove = || vec![SegmentEdit::Remove(rel.overlap)];
    match mode {
        ResolutionMode::Case1Cut => [remove(), remove()],
        ResolutionMode::Case2AssignFirst => [Vec::new(), remove()],
        ResolutionMode::Case3AssignSecond => [remove(), Vec::new()],
        ResolutionMode::Case4Separate => unreachable!("separation is not a cut"),
    }
}

/// Resolve every overlap among `segments` (one chunk) over `audio`.
///
/// Backend failures never abort: the overlap keeps its original geometry
/// and both segments are flagged.
pub fn resolve_chunk<B: OverlapBackends + ?Sized>(
    segments: &[SpeakerSegment],
    audio: TimedAudio<'_>,
    policy: &OverlapPolicy,
    backends: &B,
) -> ChunkResolution {
    let relations = find_overlaps(segments);
    let mut out: Vec<ResolvedSegment> =
        segments.iter().map(|s| ResolvedSegment { segment: s.clone(), edits: Vec::new(), flags: BTreeSet::new() }).collect();
    let mut resolver = Resolver { segments, audio, policy, backends, references: BTreeMap::new() };
    let mut records = Vec::new();

    for rel in &relations {
        let (a, b) = (&segments[rel.seg_a], &segments[rel.seg_b]);
        let mut flags = BTreeSet::new();
        let mut applied = None;
        let mut similarities = None;
        let mut cand1_speaker = None;
        let third = segments
            .iter()
            .any(|s| s.speaker_id != a.speaker_id && s.speaker_id != b.speaker_id && s.interval.intersect(&rel.overlap).is_some());

        if third {
            flags.insert(Flag::MultiSpeakerUnresolved);
        } else if rel.overlap.duration() < policy.min_overlap_s {
            flags.insert(Flag::OverlapSkipped);
        } else if policy.mode != ResolutionMode::Case4Separate {
            let [ea, eb] = cut_edits(rel, policy.mode);
            out[rel.seg_a].edits.extend(ea);
            out[rel.seg_b].edits.extend(eb);
            applied = Some(policy.mode);
        } else {
            match resolver.separate(rel) {
                Ok(Some(([ea, eb], asg))) => {
                    out[rel.seg_a].edits.push(ea);
                    out[rel.seg_b].edits.push(eb);
                    applied = Some(ResolutionMode::Case4Separate);
                    similarities = Some([asg.s1, asg.s2]);
                    cand1_speaker = Some(if asg.cand1_speaker == 0 { a.speaker_id.clone() } else { b.speaker_id.clone() });
                    if asg.tie {
                        flags.insert(Flag::AssignmentTie);
                    }
                }
                Ok(None) => {
                    let [ea, eb] = cut_edits(rel, ResolutionMode::Case1Cut);
                    out[rel.seg_a].edits.extend(ea);
                    out[rel.seg_b].edits.extend(eb);
                    applied = Some(ResolutionMode::Case1Cut);
                    flags.insert(Flag::NoReferenceFallback);
                }
                Err(e) => {
                    log::warn!("overlap at {:.3}-{:.3} s unresolved: {e}", rel.overlap.start_s, rel.overlap.end_s);
                    flags.insert(Flag::SeparationFailed);
                }
            }
        }
        for idx in [rel.seg_a, rel.seg_b] {
            out[idx].flags.extend(flags.iter().copied());
        }
        records.push(OverlapRecord {
            overlap: rel.overlap,
            kind: rel.kind,
            speakers: [a.speaker_id.clone(), b.speaker_id.clone()],
            applied,
            similarities,
            cand1_speaker,
            flags,
        });
    }
    for seg in &mut out {
        if seg.kept().is_empty() {
            seg.flags.insert(Flag::RemovedByCut);
        }
    }
    ChunkResolution { segments: out, overlaps: records }
}

/// Resolve a single relation; returns the two resolved segments
/// (first-starting speaker first).
pub fn resolve_overlap<B: OverlapBackends + ?Sized>(
    relation: &OverlapRelation,
    segments: &[SpeakerSegment],
    audio: TimedAudio<'_>,
    policy: &OverlapPolicy,
    backends: &B,
) -> [ResolvedSegment; 2] {
    let pair = [segments[relation.seg_a].clone(), segments[relation.seg_b].clone()];
    // Other segments still provide reference speech.
    let mut all: Vec<SpeakerSegment> = pair.to_vec();
    all.extend(
        segments
            .iter()
            .enumerate()
            .filter(|(i, s)| *i != relation.seg_a && *i != relation.seg_b && s.interval.intersect(&relation.overlap).is_none())
            .map(|(_, s)| s.clone()),
    );
    let mut res = resolve_chunk(&all, audio, policy, backends);
    let b = res.segments.swap_remove(1);
    let a = res.segments.swap_remove(0);
    [a, b]
}

/// Audio of a resolved segment over its original interval, with removed
/// spans silenced and splices applied.
pub fn render_segment(seg: &ResolvedSegment, audio: TimedAudio<'_>) -> AudioBuffer {
    let iv = seg.segment.interval;
    let base = audio.index(iv.start_s);
    let mut out = audio.slice(iv);
    let n = out.samples.len();
    let local = |t: f64| audio.index(t).saturating_sub(base).min(n);

    for edit in &seg.edits {
        if let SegmentEdit::Splice { overlap, window, audio: cand } = edit {
            let w0 = audio.index(window.start_s);
            let (wa, oa, ob, wb) = (audio.index(window.start_s), audio.index(overlap.start_s), audio.index(overlap.end_s), audio.index(window.end_s));
            let ramp_in = (oa - wa) as f64 + 1.0;
            let ramp_out = (wb - ob) as f64 + 1.0;
            for g in wa.max(base)..wb.min(base + n) {
                let c = cand.samples.get(g - w0).copied().unwrap_or(0.0);
                let w = if g < oa {
                    (g - wa + 1) as f64 / ramp_in
                } else if g < ob {
                    1.0
                } else {
                    (wb - g) as f64 / ramp_out
                };
                let slot = &mut out.samples[g - base];
                *slot = (1.0 - w) * *slot + w * c;
            }
        }
    }
    for edit in &seg.edits {
        if let SegmentEdit::Remove(r) = edit {
            out.samples[local(r.start_s)..local(r.end_s)].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    out
}
