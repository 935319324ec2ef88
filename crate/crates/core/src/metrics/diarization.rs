//! Diarization error rate and Jaccard error rate.
//!
//! Scoring integrates over elementary time intervals between all segment
//! boundaries, so results are exact up to floating-point rounding. Time
//! within `collar_s` of any reference boundary is excluded. Overlapped
//! reference speech counts once per active speaker.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::rttm::RttmSegment;
use crate::timeline::{cmp_f64, intersect_sets, merge_intervals, subtract, TimeInterval};

pub const DEFAULT_COLLAR_S: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiarizationError {
    #[error("reference has no segments")]
    EmptyReference,
    #[error("no reference speech remains after collar masking")]
    EmptyScoringRegion,
    #[error("segments span several recordings: {0:?}")]
    MixedRecordings(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerBreakdown {
    pub missed_s: f64,
    pub false_alarm_s: f64,
    pub confusion_s: f64,
    pub total_ref_speech_s: f64,
    pub der: f64,
}

/// DER components plus the speaker mapping and JER computed with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiarizationScore {
    pub breakdown: DerBreakdown,
    pub jer: f64,
    /// Reference speaker → hypothesis speaker.
    pub mapping: BTreeMap<String, String>,
}

type SpeakerSets = BTreeMap<String, Vec<TimeInterval>>;

fn by_speaker(segments: &[RttmSegment]) -> SpeakerSets {
    let mut map: SpeakerSets = BTreeMap::new();
    for s in segments {
        map.entry(s.speaker_id.clone()).or_default().push(s.interval);
    }
    map.values_mut().for_each(|v| *v = merge_intervals(v));
    map
}

fn check_recordings(reference: &[RttmSegment], hypothesis: &[RttmSegment]) -> Result<(), DiarizationError> {
    let mut ids: Vec<String> = reference.iter().chain(hypothesis).map(|s| s.recording_id.clone()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() > 1 {
        return Err(DiarizationError::MixedRecordings(ids));
    }
    Ok(())
}

fn extent(reference: &[RttmSegment], hypothesis: &[RttmSegment]) -> TimeInterval {
    let lo = reference.iter().chain(hypothesis).map(|s| s.interval.start_s).fold(f64::INFINITY, f64::min);
    let hi = reference.iter().chain(hypothesis).map(|s| s.interval.end_s).fold(f64::NEG_INFINITY, f64::max);
    TimeInterval::new(lo - 1.0, hi + 1.0)
}

/// Reference-boundary collars, merged.
pub fn collar_mask(reference: &[RttmSegment], collar_s: f64) -> Vec<TimeInterval> {
    if collar_s <= 0.0 {
        return Vec::new();
    }
    let bounds: Vec<TimeInterval> = reference
        .iter()
        .flat_map(|s| [s.interval.start_s, s.interval.end_s])
        .map(|b| TimeInterval::new(b - collar_s, b + collar_s))
        .collect();
    merge_intervals(&bounds)
}

/// Maximum-weight one-to-one assignment of rows to columns.
///
/// Exhaustive over permutations when the padded size is at most 4,
/// Hungarian algorithm otherwise. Returns `assignment[row] = Some(col)`.
pub fn optimal_mapping(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return vec![None; rows];
    }
    let w = |r: usize, c: usize| -> f64 {
        if r < rows && c < cols {
            weights[r][c]
        } else {
            0.0
        }
    };
    let perm = if n <= 4 { best_permutation(n, &w) } else { hungarian_max(n, &w) };
    (0..rows).map(|r| (perm[r] < cols && w(r, perm[r]) > 0.0).then_some(perm[r])).collect()
}

fn best_permutation(n: usize, w: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    fn rec(row: usize, n: usize, used: &mut [bool], cur: &mut Vec<usize>, w: &dyn Fn(usize, usize) -> f64, best: &mut (f64, Vec<usize>), acc: f64) {
        if row == n {
            if acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for c in 0..n {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                rec(row + 1, n, used, cur, w, best, acc + w(row, c));
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    rec(0, n, &mut vec![false; n], &mut Vec::with_capacity(n), w, &mut best, 0.0);
    best.1
}

/// Kuhn-Munkres on an `n × n` profit matrix (O(n³), potentials form).
fn hungarian_max(n: usize, w: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    let max = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| w(r, c)).fold(0.0, f64::max);
    let cost = |r: usize, c: usize| max - w(r, c);
    // 1-indexed arrays; p[col] = row matched to col.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Number of intervals in `set` (sorted, disjoint) active at time `t`.
fn active(set: &[TimeInterval], t: f64) -> bool {
    let idx = set.partition_point(|iv| iv.end_s <= t);
    idx < set.len() && set[idx].start_s <= t
}

/// Score within `region` (merged intervals) after removing reference collars.
fn score_within(
    reference: &[RttmSegment],
    hypothesis: &[RttmSegment],
    region: &[TimeInterval],
    collar_s: f64,
) -> Result<DiarizationScore, DiarizationError> {
    let collars = collar_mask(reference, collar_s);
    let scored: Vec<TimeInterval> = region.iter().flat_map(|r| subtract(r, &collars)).collect();

    let restrict = |sets: SpeakerSets| -> Vec<(String, Vec<TimeInterval>)> {
        sets.into_iter().map(|(k, v)| (k, intersect_sets(&v, &scored))).collect()
    };
    let refs = restrict(by_speaker(reference));
    let hyps = restrict(by_speaker(hypothesis));

    let mut bounds: Vec<f64> = refs
        .iter()
        .chain(&hyps)
        .flat_map(|(_, v)| v.iter().flat_map(|iv| [iv.start_s, iv.end_s]))
        .collect();
    bounds.sort_by(|a, b| cmp_f64(*a, *b));
    bounds.dedup();

    let (mut missed, mut fa, mut both) = (0.0, 0.0, 0.0);
    for w in bounds.windows(2) {
        let dt = w[1] - w[0];
        if dt <= 0.0 {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let nr = refs.iter().filter(|(_, v)| active(v, mid)).count() as f64;
        let nh = hyps.iter().filter(|(_, v)| active(v, mid)).count() as f64;
        missed += (nr - nh).max(0.0) * dt;
        fa += (nh - nr).max(0.0) * dt;
        both += nr.min(nh) * dt;
    }

    let ref_len: Vec<f64> = refs.iter().map(|(_, v)| v.iter().map(TimeInterval::duration).sum()).collect();
    let hyp_len: Vec<f64> = hyps.iter().map(|(_, v)| v.iter().map(TimeInterval::duration).sum()).collect();
    let total: f64 = ref_len.iter().sum();
    if total <= 0.0 {
        return Err(DiarizationError::EmptyScoringRegion);
    }

    let overlap: Vec<Vec<f64>> = refs
        .iter()
        .map(|(_, r)| hyps.iter().map(|(_, h)| intersect_sets(r, h).iter().map(TimeInterval::duration).sum()).collect())
        .collect();
    let assignment = optimal_mapping(&overlap);
    let matched: f64 = assignment.iter().enumerate().filter_map(|(r, c)| c.map(|c| overlap[r][c])).sum();
    let confusion = (both - matched).max(0.0);

    let mut jer_sum = 0.0;
    let mut jer_n = 0usize;
    for (r, c) in assignment.iter().enumerate() {
        if ref_len[r] <= 0.0 {
            continue;
        }
        let (inter, h) = c.map_or((0.0, 0.0), |c| (overlap[r][c], hyp_len[c]));
        let union = ref_len[r] + h - inter;
        jer_sum += 1.0 - inter / union;
        jer_n += 1;
    }

    let mapping = assignment
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| (refs[r].0.clone(), hyps[c].0.clone())))
        .collect();
    Ok(DiarizationScore {
        breakdown: DerBreakdown {
            missed_s: missed,
            false_alarm_s: fa,
            confusion_s: confusion,
            total_ref_speech_s: total,
            der: (missed + fa + confusion) / total,
        },
        jer: if jer_n == 0 { 0.0 } else { jer_sum / jer_n as f64 },
        mapping,
    })
}

/// DER and JER over the whole recording.
pub fn score(reference: &[RttmSegment], hypothesis: &[RttmSegment], collar_s: f64) -> Result<DiarizationScore, DiarizationError> {
    if reference.is_empty() {
        return Err(DiarizationError::EmptyReference);
    }
    check_recordings(reference, hypothesis)?;
    score_within(reference, hypothesis, &[extent(reference, hypothesis)], collar_s)
}

pub fn der(reference: &[RttmSegment], hypothesis: &[RttmSegment], collar_s: f64) -> Result<DerBreakdown, DiarizationError> {
    score(reference, hypothesis, collar_s).map(|s| s.breakdown)
}

/// Mean per-reference-speaker Jaccard distance under the DER mapping.
pub fn jer(reference: &[RttmSegment], hypothesis: &[RttmSegment], collar_s: f64) -> Result<f64, DiarizationError> {
    score(reference, hypothesis, collar_s).map(|s| s.jer)
}

/// Union of reference segments no longer than `max_dur_s`.
pub fn short_segment_region(reference: &[RttmSegment], max_dur_s: f64) -> Vec<TimeInterval> {
    let short: Vec<TimeInterval> =
        reference.iter().map(|s| s.interval).filter(|iv| iv.duration() <= max_dur_s).collect();
    merge_intervals(&short)
}

/// Speaker change points: consecutive reference segments (by start) with
/// different speakers, gap at most `max_gap_s`, where the later segment
/// outlasts the earlier. The point is the middle of the gap (or of the
/// overlap, for a negative gap).
pub fn change_points(reference: &[RttmSegment], max_gap_s: f64) -> Vec<f64> {
    let mut sorted: Vec<&RttmSegment> = reference.iter().collect();
    sorted.sort_by(|a, b| cmp_f64(a.interval.start_s, b.interval.start_s).then(cmp_f64(a.interval.end_s, b.interval.end_s)));
    sorted
        .windows(2)
        .filter(|w| {
            let (a, b) = (&w[0], &w[1]);
            a.speaker_id != b.speaker_id && b.interval.start_s - a.interval.end_s <= max_gap_s && b.interval.end_s > a.interval.end_s
        })
        .map(|w| 0.5 * (w[0].interval.end_s + w[1].interval.start_s))
        .collect()
}

pub fn turn_region(reference: &[RttmSegment], window_s: f64, max_gap_s: f64) -> Vec<TimeInterval> {
    let windows: Vec<TimeInterval> =
        change_points(reference, max_gap_s).into_iter().map(|c| TimeInterval::new(c - window_s, c + window_s)).collect();
    merge_intervals(&windows)
}

/// Scoring restricted to an explicit region. `Ok(None)` when the region
/// holds no scorable reference speech.
pub fn score_region(
    reference: &[RttmSegment],
    hypothesis: &[RttmSegment],
    region: &[TimeInterval],
    collar_s: f64,
) -> Result<Option<DiarizationScore>, DiarizationError> {
    if reference.is_empty() {
        return Err(DiarizationError::EmptyReference);
    }
    check_recordings(reference, hypothesis)?;
    if region.is_empty() {
        return Ok(None);
    }
    match score_within(reference, hypothesis, region, collar_s) {
        Ok(s) => Ok(Some(s)),
        Err(DiarizationError::EmptyScoringRegion) => Ok(None),
        Err(e) => Err(e),
    }
}

/// DER restricted to reference segments of at most `max_dur_s` seconds.
pub fn der_short(
    reference: &[RttmSegment],
    hypothesis: &[RttmSegment],
    max_dur_s: f64,
    collar_s: f64,
) -> Result<Option<DerBreakdown>, DiarizationError> {
    let region = short_segment_region(reference, max_dur_s);
    Ok(score_region(reference, hypothesis, &region, collar_s)?.map(|s| s.breakdown))
}

/// DER restricted to `±window_s` around speaker change points.
pub fn der_turn(
    reference: &[RttmSegment],
    hypothesis: &[RttmSegment],
    window_s: f64,
    max_gap_s: f64,
    collar_s: f64,
) -> Result<Option<DerBreakdown>, DiarizationError> {
    let region = turn_region(reference, window_s, max_gap_s);
    Ok(score_region(reference, hypothesis, &region, collar_s)?.map(|s| s.breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(spk: &str, a: f64, b: f64) -> RttmSegment {
        RttmSegment::new("rec", spk, a, b)
    }

    #[test]
    fn perfect_and_empty() {
        let r = vec![seg("A", 0.0, 5.0), seg("B", 5.5, 9.0), seg("A", 9.5, 12.0)];
        let s = score(&r, &r, 0.25).unwrap();
        assert_eq!(s.breakdown.der, 0.0);
        assert_eq!(s.jer, 0.0);
        let miss = score(&r, &[], 0.25).unwrap();
        assert!((miss.breakdown.der - 1.0).abs() < 1e-12);
        assert!((miss.jer - 1.0).abs() < 1e-12);
        assert!(matches!(der(&[], &r, 0.25), Err(DiarizationError::EmptyReference)));
    }

    #[test]
    fn relabeling_is_free() {
        let r = vec![seg("A", 0.0, 5.0), seg("B", 5.5, 9.0)];
        let h = vec![seg("x", 0.0, 5.0), seg("y", 5.5, 9.0)];
        assert_eq!(der(&r, &h, 0.0).unwrap().der, 0.0);
    }

    #[test]
    fn missing_one_speaker_jer_half() {
        // Two equal-duration speakers; hypothesis covers only A.
        let r = vec![seg("A", 0.0, 4.0), seg("B", 5.0, 9.0)];
        let h = vec![seg("h1", 0.0, 4.0)];
        assert!((jer(&r, &h, 0.25).unwrap() - 0.5).abs() < 1e-12);
        let disjoint = vec![seg("h1", 20.0, 30.0)];
        assert!((jer(&r, &disjoint, 0.25).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_counted() {
        let r = vec![seg("A", 0.0, 10.0), seg("B", 10.0, 20.0)];
        let h = vec![seg("x", 0.0, 20.0)];
        let b = der(&r, &h, 0.0).unwrap();
        assert!((b.confusion_s - 10.0).abs() < 1e-12);
        assert_eq!(b.missed_s, 0.0);
        assert!((b.der - 0.5).abs() < 1e-12);
    }

    #[test]
    fn collar_masks_boundaries() {
        let r = vec![seg("A", 0.0, 10.0)];
        let h = vec![seg("x", 0.2, 9.8)];
        assert_eq!(der(&r, &h, 0.25).unwrap().der, 0.0);
        assert!(der(&r, &h, 0.0).unwrap().der > 0.0);
    }

    #[test]
    fn restricted_variants() {
        let long = vec![seg("A", 0.0, 10.0), seg("B", 10.5, 20.0)];
        assert_eq!(der_short(&long, &long, 0.5, 0.0).unwrap(), None);

        let r = vec![seg("A", 0.0, 10.0), seg("B", 3.0, 3.4), seg("A", 12.0, 20.0)];
        // Perfect on the short segment, garbage elsewhere.
        let h = vec![seg("b", 3.0, 3.4), seg("junk", 12.0, 14.0)];
        let s = der_short(&r, &h, 0.5, 0.0).unwrap().unwrap();
        // Within [3.0, 3.4] A is active in the reference but absent in the
        // hypothesis: 0.4 s missed of 0.8 s total.
        assert!((s.total_ref_speech_s - 0.8).abs() < 1e-12);
        assert!((s.der - 0.5).abs() < 1e-12);
        // With a 0.25 s collar the whole 0.4 s segment is masked.
        assert_eq!(der_short(&r, &h, 0.5, 0.25).unwrap(), None);
        let empty = der_short(&r, &[], 1.0, 0.0).unwrap().unwrap();
        assert!((empty.der - 1.0).abs() < 1e-12);

        let single = vec![seg("A", 0.0, 3.0), seg("A", 3.2, 6.0)];
        assert_eq!(der_turn(&single, &single, 0.5, 0.5, 0.25).unwrap(), None);
        let alt = vec![seg("A", 0.0, 3.0), seg("B", 3.2, 6.0), seg("A", 6.1, 9.0)];
        assert_eq!(change_points(&alt, 0.5), vec![3.1, 6.05]);
        assert_eq!(der_turn(&alt, &alt, 0.5, 0.5, 0.0).unwrap().unwrap().der, 0.0);
    }

    #[test]
    fn mixed_recordings_rejected() {
        let r = vec![seg("A", 0.0, 1.0)];
        let h = vec![RttmSegment::new("other", "A", 0.0, 1.0)];
        assert!(matches!(der(&r, &h, 0.0), Err(DiarizationError::MixedRecordings(_))));
    }

    proptest! {
        #[test]
        fn hungarian_matches_exhaustive(n in 1usize..6, m in 1usize..6, vals in prop::collection::vec(0u32..100, 36)) {
            let w: Vec<Vec<f64>> = (0..n).map(|r| (0..m).map(|c| vals[r * 6 + c] as f64).collect()).collect();
            let size = n.max(m);
            let f = |r: usize, c: usize| if r < n && c < m { w[r][c] } else { 0.0 };
            let a = hungarian_max(size, &f);
            let b = best_permutation(size, &f);
            let total = |p: &[usize]| (0..size).map(|r| f(r, p[r])).sum::<f64>();
            prop_assert_eq!(total(&a), total(&b));
        }
    }
}
