//! Selection of two-speaker conversational regions with short turns, and
//! their rendering as one-speaker-per-channel stereo samples.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::audio::{seconds_to_samples, AudioBuffer};
use crate::ensemble::WordToken;
use crate::timeline::{TimeInterval, Turn};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DuplexPolicy {
    pub max_turn_s: f64,
    pub min_turns: usize,
    /// A silence longer than this between turns ends a run.
    pub max_gap_s: f64,
    /// Same-speaker segments closer than this form one turn.
    pub merge_gap_s: f64,
}

impl Default for DuplexPolicy {
    fn default() -> Self {
        Self { max_turn_s: 10.0, min_turns: 3, max_gap_s: 10.0, merge_gap_s: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidRegion {
    /// Half-open range into the turn list.
    pub first_turn: usize,
    pub end_turn: usize,
    pub interval: TimeInterval,
    pub left_speaker_id: String,
    pub right_speaker_id: String,
}

impl ValidRegion {
    pub fn turns<'a>(&self, turns: &'a [Turn]) -> &'a [Turn] {
        &turns[self.first_turn..self.end_turn]
    }
}

fn finish(turns: &[Turn], start: usize, end: usize, policy: &DuplexPolicy, out: &mut Vec<ValidRegion>) {
    let run = &turns[start..end];
    let mut speech: BTreeMap<&str, f64> = BTreeMap::new();
    for t in run {
        *speech.entry(t.speaker_id.as_str()).or_default() += t.duration();
    }
    if run.len() < policy.min_turns || speech.len() != 2 {
        return;
    }
    // More speech wins the left channel; ties go to the smaller id.
    let mut ranked: Vec<(&str, f64)> = speech.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    out.push(ValidRegion {
        first_turn: start,
        end_turn: end,
        interval: TimeInterval::new(run[0].interval.start_s, run.iter().map(|t| t.interval.end_s).fold(f64::MIN, f64::max)),
        left_speaker_id: ranked[0].0.to_string(),
        right_speaker_id: ranked[1].0.to_string(),
    });
}

/// Maximal runs of consecutive short turns between exactly two speakers.
///
/// A run ends before a turn longer than `max_turn_s` (which is excluded),
/// before a silence longer than `max_gap_s`, and before the first turn of
/// a third speaker (which starts the next run). Runs shorter than
/// `min_turns` or with a single speaker are dropped.
pub fn select_regions(turns: &[Turn], policy: &DuplexPolicy) -> Vec<ValidRegion> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut speakers: BTreeSet<&str> = BTreeSet::new();
    for (i, t) in turns.iter().enumerate() {
        if t.duration() > policy.max_turn_s {
            finish(turns, start, i, policy, &mut out);
            start = i + 1;
            speakers.clear();
            continue;
        }
        let gap_break = i > start && t.interval.start_s - turns[i - 1].interval.end_s > policy.max_gap_s;
        let third = speakers.len() == 2 && !speakers.contains(t.speaker_id.as_str());
        if gap_break || third {
            finish(turns, start, i, policy, &mut out);
            start = i;
            speakers.clear();
        }
        speakers.insert(&t.speaker_id);
    }
    finish(turns, start, turns.len(), policy, &mut out);
    out
}

/// One speaker segment's final audio, covering `interval`, with its words
/// on the absolute timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSource {
    pub speaker_id: String,
    pub interval: TimeInterval,
    pub audio: AudioBuffer,
    pub words: Vec<WordToken>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub interval: TimeInterval,
    pub left_speaker_id: String,
    pub right_speaker_id: String,
    pub left: AudioBuffer,
    pub right: AudioBuffer,
    pub left_words: Vec<WordToken>,
    pub right_words: Vec<WordToken>,
}

impl StereoSample {
    /// Interleaved two-channel buffer, left first.
    pub fn to_stereo(&self) -> AudioBuffer {
        let samples = self.left.samples.iter().zip(&self.right.samples).flat_map(|(&l, &r)| [l, r]).collect();
        AudioBuffer::interleaved(samples, self.left.sample_rate_hz, 2).expect("even sample count")
    }

    pub fn swapped(&self) -> Self {
        Self {
            interval: self.interval,
            left_speaker_id: self.right_speaker_id.clone(),
            right_speaker_id: self.left_speaker_id.clone(),
            left: self.right.clone(),
            right: self.left.clone(),
            left_words: self.right_words.clone(),
            right_words: self.left_words.clone(),
        }
    }
}

/// Place each source on its speaker's channel at its timeline position,
/// silence elsewhere. Sources of other speakers are ignored; words outside
/// the region are dropped.
pub fn build_stereo(region: &ValidRegion, sources: &[StereoSource], sample_rate_hz: u32) -> StereoSample {
    let iv = region.interval;
    let n = seconds_to_samples(iv.duration(), sample_rate_hz);
    let base = seconds_to_samples(iv.start_s, sample_rate_hz);
    let mut channels = [vec![0.0; n], vec![0.0; n]];
    let mut words: [Vec<WordToken>; 2] = [Vec::new(), Vec::new()];
    for src in sources {
        let ch = if src.speaker_id == region.left_speaker_id {
            0
        } else if src.speaker_id == region.right_speaker_id {
            1
        } else {
            continue;
        };
        let Some(part) = src.interval.intersect(&iv) else { continue };
        let from = seconds_to_samples(src.interval.start_s, sample_rate_hz);
        let a = seconds_to_samples(part.start_s, sample_rate_hz);
        let b = seconds_to_samples(part.end_s, sample_rate_hz);
        for g in a..b {
            if let (Some(slot), Some(&v)) = (channels[ch].get_mut(g - base), src.audio.samples.get(g - from)) {
                *slot += v;
            }
        }
        words[ch].extend(src.words.iter().filter(|w| w.interval.is_none_or(|w| iv.contains(&w))).cloned());
    }
    for w in &mut words {
        w.sort_by(|a, b| {
            let key = |t: &WordToken| t.interval.map_or(f64::NEG_INFINITY, |i| i.start_s);
            key(a).total_cmp(&key(b))
        });
    }
    let [left, right] = channels;
    let [left_words, right_words] = words;
    StereoSample {
        interval: iv,
        left_speaker_id: region.left_speaker_id.clone(),
        right_speaker_id: region.right_speaker_id.clone(),
        left: AudioBuffer::mono(left, sample_rate_hz),
        right: AudioBuffer::mono(right, sample_rate_hz),
        left_words,
        right_words,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turns(spec: &[(&str, f64)]) -> Vec<Turn> {
        let mut t = 0.0;
        spec.iter()
            .map(|&(s, d)| {
                let turn = Turn { speaker_id: s.into(), interval: TimeInterval::new(t, t + d), segment_refs: vec![], word_refs: vec![] };
                t += d + 0.5;
                turn
            })
            .collect()
    }

    fn lens(r: &[ValidRegion]) -> Vec<(usize, usize)> {
        r.iter().map(|r| (r.first_turn, r.end_turn)).collect()
    }

    #[test]
    fn examples() {
        let p = DuplexPolicy::default();
        assert_eq!(lens(&select_regions(&turns(&[("a", 4.0), ("b", 6.0), ("a", 3.0)]), &p)), vec![(0, 3)]);
        let t = turns(&[("a", 4.0), ("b", 12.0), ("a", 3.0), ("b", 5.0), ("a", 2.0)]);
        assert_eq!(lens(&select_regions(&t, &p)), vec![(2, 5)]);
        assert!(select_regions(&turns(&[("a", 11.0), ("b", 11.0), ("a", 11.0)]), &p).is_empty());
        // A third speaker starts a new run.
        let t = turns(&[("a", 1.0), ("b", 1.0), ("a", 1.0), ("c", 1.0), ("a", 1.0), ("c", 1.0)]);
        assert_eq!(lens(&select_regions(&t, &p)), vec![(0, 3), (3, 6)]);
        // One speaker alone is never a region.
        assert!(select_regions(&turns(&[("a", 1.0), ("a", 1.0), ("a", 1.0)]), &p).is_empty());
    }

    #[test]
    fn left_channel_choice() {
        let p = DuplexPolicy::default();
        let r = &select_regions(&turns(&[("a", 1.0), ("b", 6.0), ("a", 3.0)]), &p)[0];
        assert_eq!((r.left_speaker_id.as_str(), r.right_speaker_id.as_str()), ("b", "a"));
        let r = &select_regions(&turns(&[("b", 2.0), ("a", 1.0), ("a", 1.0)]), &p)[0];
        assert_eq!(r.left_speaker_id, "a");
    }

    #[test]
    fn stereo_placement() {
        let sr = 100;
        let src = |s: &str, a: f64, b: f64, v: f64| StereoSource {
            speaker_id: s.into(),
            interval: TimeInterval::new(a, b),
            audio: AudioBuffer::mono(vec![v; ((b - a) * 100.0).round() as usize], sr),
            words: vec![],
        };
        let sources = vec![src("a", 1.0, 2.0, 0.5), src("b", 2.0, 3.0, -0.5), src("a", 3.0, 4.0, 0.25)];
        let region = ValidRegion {
            first_turn: 0,
            end_turn: 3,
            interval: TimeInterval::new(1.0, 4.0),
            left_speaker_id: "a".into(),
            right_speaker_id: "b".into(),
        };
        let st = build_stereo(&region, &sources, sr);
        assert_eq!(st.left.samples.len(), 300);
        assert!(st.left.samples.iter().zip(&st.right.samples).all(|(l, r)| l * r == 0.0));
        assert_eq!(st.left.samples[50], 0.5);
        assert_eq!(st.right.samples[150], -0.5);
        let swapped_region = ValidRegion { left_speaker_id: "b".into(), right_speaker_id: "a".into(), ..region };
        assert_eq!(build_stereo(&swapped_region, &sources, sr), st.swapped());
        assert_eq!(st.to_stereo().samples.len(), 600);
    }
}
