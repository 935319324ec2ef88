//! Interval and segment algebra.
//!
//! Times are real-valued seconds. Quantization to sample indices happens only
//! at audio-buffer boundaries (see [`crate::audio`]).

use std::cmp::Ordering;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

/// A half-open span of time `[start_s, end_s)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TimeInterval {
    pub start_s: f64,
    pub end_s: f64,
}

impl TimeInterval {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        debug_assert!(start_s <= end_s, "inverted interval [{start_s}, {end_s}]");
        Self { start_s, end_s }
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn is_empty(&self) -> bool {
        self.end_s <= self.start_s
    }

    pub fn contains(&self, other: &TimeInterval) -> bool {
        self.start_s <= other.start_s && other.end_s <= self.end_s
    }

    pub fn contains_time(&self, t: f64) -> bool {
        self.start_s <= t && t < self.end_s
    }

    /// Intersection with positive measure. Touching endpoints yield `None`.
    pub fn intersect(&self, other: &TimeInterval) -> Option<TimeInterval> {
        intersect(self, other)
    }

    pub fn shift(&self, by_s: f64) -> TimeInterval {
        TimeInterval::new(self.start_s + by_s, self.end_s + by_s)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }
}

/// Overlap of two intervals, or `None` when they are disjoint or only touch.
pub fn intersect(a: &TimeInterval, b: &TimeInterval) -> Option<TimeInterval> {
    let start = a.start_s.max(b.start_s);
    let end = a.end_s.min(b.end_s);
    (end > start).then(|| TimeInterval::new(start, end))
}

/// Measure of the union of `intervals`.
pub fn union_duration(intervals: &[TimeInterval]) -> f64 {
    merge_intervals(intervals).iter().map(TimeInterval::duration).sum()
}

/// Sorted, disjoint cover of the input. Intervals that touch are fused.
pub fn merge_intervals(intervals: &[TimeInterval]) -> Vec<TimeInterval> {
    let mut sorted: Vec<TimeInterval> = intervals.iter().copied().filter(|i| !i.is_empty()).collect();
    sorted.sort_by(|a, b| cmp_f64(a.start_s, b.start_s));
    let mut out: Vec<TimeInterval> = Vec::with_capacity(sorted.len());
    for iv in sorted {
        match out.last_mut() {
            Some(last) if iv.start_s <= last.end_s => last.end_s = last.end_s.max(iv.end_s),
            _ => out.push(iv),
        }
    }
    out
}

/// `base` minus the union of `holes`, as sorted disjoint pieces.
pub fn subtract(base: &TimeInterval, holes: &[TimeInterval]) -> Vec<TimeInterval> {
    let mut pieces = Vec::new();
    let mut cursor = base.start_s;
    for hole in merge_intervals(holes) {
        if hole.end_s <= cursor {
            continue;
        }
        if hole.start_s >= base.end_s {
            break;
        }
        if hole.start_s > cursor {
            pieces.push(TimeInterval::new(cursor, hole.start_s));
        }
        cursor = cursor.max(hole.end_s);
    }
    if cursor < base.end_s {
        pieces.push(TimeInterval::new(cursor, base.end_s));
    }
    pieces
}

/// Intersection of two sorted disjoint interval sets.
pub fn intersect_sets(a: &[TimeInterval], b: &[TimeInterval]) -> Vec<TimeInterval> {
    let a = merge_intervals(a);
    let b = merge_intervals(b);
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        if let Some(x) = intersect(&a[i], &b[j]) {
            out.push(x);
        }
        if a[i].end_s < b[j].end_s {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

pub(crate) fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// A diarized stretch of speech attributed to one speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SpeakerSegment {
    pub speaker_id: String,
    pub interval: TimeInterval,
    pub chunk_id: String,
}

impl SpeakerSegment {
    pub fn new(speaker_id: impl Into<String>, start_s: f64, end_s: f64, chunk_id: impl Into<String>) -> Self {
        Self {
            speaker_id: speaker_id.into(),
            interval: TimeInterval::new(start_s, end_s),
            chunk_id: chunk_id.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum OverlapKind {
    /// One interval nests inside the other (backchannel geometry).
    Containment,
    Partial,
}

/// Two distinct-speaker segments that share speech time.
///
/// `seg_a` / `seg_b` index into the segment list the relation was computed
/// from; `seg_a` is the segment that starts first (ties: the longer one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapRelation {
    pub seg_a: usize,
    pub seg_b: usize,
    pub kind: OverlapKind,
    pub overlap: TimeInterval,
}

/// Classify the overlap between two segments, if any.
///
/// Returns `None` for same-speaker pairs, different chunks, and intervals that
/// are disjoint or merely touch.
pub fn classify_pair(a: &SpeakerSegment, b: &SpeakerSegment) -> Option<(OverlapKind, TimeInterval)> {
    if a.speaker_id == b.speaker_id || a.chunk_id != b.chunk_id {
        return None;
    }
    let overlap = intersect(&a.interval, &b.interval)?;
    let kind = if a.interval.contains(&b.interval) || b.interval.contains(&a.interval) {
        OverlapKind::Containment
    } else {
        OverlapKind::Partial
    };
    Some((kind, overlap))
}

fn first_of(segments: &[SpeakerSegment], i: usize, j: usize) -> (usize, usize) {
    let (a, b) = (&segments[i].interval, &segments[j].interval);
    let a_first = match cmp_f64(a.start_s, b.start_s) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => match cmp_f64(b.end_s, a.end_s) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => i < j,
        },
    };
    if a_first {
        (i, j)
    } else {
        (j, i)
    }
}

/// All intersecting distinct-speaker pairs, each reported once, sorted by
/// overlap start.
pub fn find_overlaps(segments: &[SpeakerSegment]) -> Vec<OverlapRelation> {
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&x, &y| {
        cmp_f64(segments[x].interval.start_s, segments[y].interval.start_s).then(x.cmp(&y))
    });

    let mut out = Vec::new();
    // Sweep: candidates for `order[k]` are only the earlier-starting segments
    // whose end lies beyond its start.
    let mut active: Vec<usize> = Vec::new();
    for &cur in &order {
        let start = segments[cur].interval.start_s;
        active.retain(|&p| segments[p].interval.end_s > start);
        for &prev in &active {
            if let Some((kind, overlap)) = classify_pair(&segments[prev], &segments[cur]) {
                let (seg_a, seg_b) = first_of(segments, prev, cur);
                out.push(OverlapRelation { seg_a, seg_b, kind, overlap });
            }
        }
        active.push(cur);
    }
    out.sort_by(|x, y| {
        cmp_f64(x.overlap.start_s, y.overlap.start_s)
            .then(cmp_f64(x.overlap.end_s, y.overlap.end_s))
            .then(x.seg_a.cmp(&y.seg_a))
            .then(x.seg_b.cmp(&y.seg_b))
    });
    out
}

/// One speaker's uninterrupted hold of the floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker_id: String,
    pub interval: TimeInterval,
    /// Indices of the segments merged into this turn.
    pub segment_refs: Vec<usize>,
    /// `(segment index, word index)` pairs in time order.
    pub word_refs: Vec<(usize, usize)>,
}

impl Turn {
    pub fn duration(&self) -> f64 {
        self.interval.duration()
    }
}

/// Build turns from segments: sort by start and fuse consecutive segments of
/// the same speaker whose gap is at most `merge_gap_s`.
///
/// `word_counts[i]` is the number of transcript words of segment `i`
/// (pass an empty slice when transcripts are absent).
pub fn build_turns(segments: &[SpeakerSegment], word_counts: &[usize], merge_gap_s: f64) -> Vec<Turn> {
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&x, &y| {
        cmp_f64(segments[x].interval.start_s, segments[y].interval.start_s)
            .then(cmp_f64(segments[x].interval.end_s, segments[y].interval.end_s))
            .then(x.cmp(&y))
    });
    let words_of = |i: usize| -> Vec<(usize, usize)> {
        let n = word_counts.get(i).copied().unwrap_or(0);
        (0..n).map(|w| (i, w)).collect()
    };

    let mut turns: Vec<Turn> = Vec::new();
    for i in order {
        let seg = &segments[i];
        if let Some(last) = turns.last_mut() {
            if last.speaker_id == seg.speaker_id && seg.interval.start_s - last.interval.end_s <= merge_gap_s {
                last.interval.end_s = last.interval.end_s.max(seg.interval.end_s);
                last.segment_refs.push(i);
                last.word_refs.extend(words_of(i));
                continue;
            }
        }
        turns.push(Turn {
            speaker_id: seg.speaker_id.clone(),
            interval: seg.interval,
            segment_refs: vec![i],
            word_refs: words_of(i),
        });
    }
    turns
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(a: f64, b: f64) -> TimeInterval {
        TimeInterval::new(a, b)
    }

    fn seg(spk: &str, a: f64, b: f64) -> SpeakerSegment {
        SpeakerSegment::new(spk, a, b, "c0")
    }

    #[test]
    fn intersect_examples() {
        assert_eq!(intersect(&iv(0.0, 2.0), &iv(1.0, 3.0)), Some(iv(1.0, 2.0)));
        assert_eq!(intersect(&iv(0.0, 1.0), &iv(2.0, 3.0)), None);
        assert_eq!(intersect(&iv(0.0, 5.0), &iv(1.0, 2.0)), Some(iv(1.0, 2.0)));
        assert_eq!(intersect(&iv(0.0, 3.0), &iv(3.0, 6.0)), None);
    }

    #[test]
    fn classify_examples() {
        let (k, o) = classify_pair(&seg("a", 0.0, 10.0), &seg("b", 4.0, 6.0)).unwrap();
        assert_eq!(k, OverlapKind::Containment);
        assert_eq!(o, iv(4.0, 6.0));
        let (k, o) = classify_pair(&seg("a", 0.0, 5.0), &seg("b", 3.0, 8.0)).unwrap();
        assert_eq!(k, OverlapKind::Partial);
        assert_eq!(o, iv(3.0, 5.0));
        assert!(classify_pair(&seg("a", 0.0, 3.0), &seg("b", 3.0, 6.0)).is_none());
        assert!(classify_pair(&seg("a", 0.0, 5.0), &seg("a", 3.0, 8.0)).is_none());
    }

    #[test]
    fn find_overlaps_small() {
        assert!(find_overlaps(&[]).is_empty());
        assert!(find_overlaps(&[seg("a", 0.0, 1.0), seg("b", 2.0, 3.0)]).is_empty());
        // a overlaps b, b overlaps c, a and c disjoint
        let s = vec![seg("c", 4.0, 7.0), seg("a", 0.0, 3.0), seg("b", 2.0, 5.0)];
        let rel = find_overlaps(&s);
        assert_eq!(rel.len(), 2);
        assert_eq!((rel[0].seg_a, rel[0].seg_b), (1, 2));
        assert_eq!(rel[0].overlap, iv(2.0, 3.0));
        assert_eq!((rel[1].seg_a, rel[1].seg_b), (2, 0));
        assert_eq!(rel[1].overlap, iv(4.0, 5.0));
    }

    #[test]
    fn union_examples() {
        assert_eq!(union_duration(&[iv(0.0, 1.0), iv(2.0, 3.0)]), 2.0);
        assert_eq!(union_duration(&[iv(0.0, 2.0), iv(1.0, 3.0)]), 3.0);
        assert_eq!(union_duration(&[]), 0.0);
    }

    #[test]
    fn subtract_pieces() {
        assert_eq!(subtract(&iv(0.0, 10.0), &[iv(4.0, 6.0)]), vec![iv(0.0, 4.0), iv(6.0, 10.0)]);
        assert_eq!(subtract(&iv(4.0, 6.0), &[iv(0.0, 10.0)]), vec![]);
        assert_eq!(subtract(&iv(0.0, 5.0), &[iv(3.0, 5.0)]), vec![iv(0.0, 3.0)]);
    }

    #[test]
    fn turns_merge_same_speaker() {
        let s = vec![seg("a", 0.0, 2.0), seg("a", 2.2, 3.0), seg("b", 3.1, 4.0), seg("a", 9.0, 10.0)];
        let t = build_turns(&s, &[2, 1, 0, 1], 1.0);
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].interval, iv(0.0, 3.0));
        assert_eq!(t[0].word_refs, vec![(0, 0), (0, 1), (1, 0)]);
        assert_eq!(t[2].segment_refs, vec![3]);
    }

    fn arb_segments(max: usize) -> impl Strategy<Value = Vec<SpeakerSegment>> {
        prop::collection::vec((0u8..4, 0u32..10_000, 1u32..2_000), 0..max).prop_map(|v| {
            v.into_iter()
                .map(|(s, a, d)| seg(&format!("s{s}"), a as f64 / 100.0, (a + d) as f64 / 100.0))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn classify_symmetric(a in (0u8..3, 0u32..100, 1u32..50), b in (0u8..3, 0u32..100, 1u32..50)) {
            let x = seg(&format!("s{}", a.0), a.1 as f64, (a.1 + a.2) as f64);
            let y = seg(&format!("s{}", b.0), b.1 as f64, (b.1 + b.2) as f64);
            prop_assert_eq!(classify_pair(&x, &y), classify_pair(&y, &x));
        }

        #[test]
        fn find_overlaps_matches_all_pairs(segments in arb_segments(200)) {
            let fast = find_overlaps(&segments);
            let mut brute = Vec::new();
            for i in 0..segments.len() {
                for j in (i + 1)..segments.len() {
                    if let Some((k, o)) = classify_pair(&segments[i], &segments[j]) {
                        brute.push((i.min(j), i.max(j), k, o));
                    }
                }
            }
            let mut got: Vec<_> = fast
                .iter()
                .map(|r| (r.seg_a.min(r.seg_b), r.seg_a.max(r.seg_b), r.kind, r.overlap))
                .collect();
            got.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
            prop_assert_eq!(got, brute);
            for w in fast.windows(2) {
                prop_assert!(w[0].overlap.start_s <= w[1].overlap.start_s);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn union_matches_rasterization(raw in prop::collection::vec((0.0f64..60.0, 1.0f64..8.0), 50)) {
            let ivs: Vec<TimeInterval> = raw.iter().map(|&(a, d)| iv(a, a + d)).collect();
            let mut grid = vec![false; 70_000];
            for i in &ivs {
                for (k, cell) in grid.iter_mut().enumerate() {
                    let t = (k as f64 + 0.5) / 1000.0;
                    if i.start_s <= t && t < i.end_s {
                        *cell = true;
                    }
                }
            }
            let raster = grid.iter().filter(|&&c| c).count() as f64 / 1000.0;
            prop_assert!((union_duration(&ivs) - raster).abs() <= 0.002);
        }
    }

    proptest! {

        #[test]
        fn union_monotone_and_order_free(raw in prop::collection::vec((0u32..1000, 1u32..100), 1..40)) {
            let ivs: Vec<TimeInterval> = raw.iter().map(|&(a, d)| iv(a as f64, (a + d) as f64)).collect();
            let full = union_duration(&ivs);
            let fewer = union_duration(&ivs[1..]);
            prop_assert!(fewer <= full + 1e-9);
            let mut rev = ivs.clone();
            rev.reverse();
            prop_assert!((union_duration(&rev) - full).abs() < 1e-9);
            prop_assert!(full <= ivs.iter().map(|i| i.duration()).sum::<f64>() + 1e-9);
        }
    }
}
