//! Three-way ASR combination: word transition network alignment, voting
//! with a primary fallback, timestamp reconciliation and a looped-output
//! filter.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::flags::Flag;
use crate::protocol::WireWord;
use crate::timeline::TimeInterval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordToken {
    pub surface: String,
    pub normalized: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<TimeInterval>,
    pub model_id: String,
}

impl WordToken {
    pub fn new(surface: &str, interval: Option<TimeInterval>, model_id: &str) -> Self {
        Self { surface: surface.to_string(), normalized: normalize_word(surface), interval, model_id: model_id.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub model_id: String,
    pub is_primary: bool,
    pub words: Vec<WordToken>,
}

impl Hypothesis {
    pub fn from_text(model_id: &str, is_primary: bool, text: &str) -> Self {
        let words = text.split_whitespace().map(|w| WordToken::new(w, None, model_id)).collect();
        Self { model_id: model_id.to_string(), is_primary, words }
    }

    /// Words that normalize to nothing (bare punctuation) are dropped.
    pub fn from_wire(model_id: &str, is_primary: bool, words: &[WireWord]) -> Self {
        let words = words
            .iter()
            .map(|w| {
                let interval = match (w.start_s, w.end_s) {
                    (Some(a), Some(b)) if b >= a => Some(TimeInterval::new(a, b)),
                    _ => None,
                };
                WordToken::new(&w.surface, interval, model_id)
            })
            .filter(|w| !w.normalized.is_empty())
            .collect();
        Self { model_id: model_id.to_string(), is_primary, words }
    }

    pub fn normalized(&self) -> Vec<&str> {
        self.words.iter().map(|w| w.normalized.as_str()).collect()
    }
}

/// Lowercase and strip leading/trailing punctuation; inner apostrophes stay.
pub fn normalize_word(surface: &str) -> String {
    surface.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Slots of aligned words; `slots[i][m]` is the entry of `models[m]`, with
/// `None` standing for the empty word.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WordTransitionNetwork {
    pub models: Vec<String>,
    pub slots: Vec<Vec<Option<WordToken>>>,
}

impl WordTransitionNetwork {
    pub fn seed(hyp: &Hypothesis) -> Self {
        Self { models: vec![hyp.model_id.clone()], slots: hyp.words.iter().map(|w| vec![Some(w.clone())]).collect() }
    }

    fn slot_has(slot: &[Option<WordToken>], word: &str) -> bool {
        slot.iter().flatten().any(|t| t.normalized == word)
    }

    /// Words of one model, in order.
    pub fn column(&self, model: usize) -> Vec<&WordToken> {
        self.slots.iter().filter_map(|s| s[model].as_ref()).collect()
    }
}

/// Minimum-edit alignment of `hyp` against the network. A word matches a
/// slot when any entry of the slot has the same normalized form. Ties in
/// the backtrace prefer the diagonal, then deletion, then insertion.
pub fn align_hypothesis(wtn: &WordTransitionNetwork, hyp: &Hypothesis) -> WordTransitionNetwork {
    let (m, n) = (wtn.slots.len(), hyp.words.len());
    let sub = |i: usize, j: usize| usize::from(!WordTransitionNetwork::slot_has(&wtn.slots[i], &hyp.words[j].normalized));
    let mut d = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=n {
        d[0][j] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            d[i][j] = (d[i - 1][j - 1] + sub(i - 1, j - 1)).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let width = wtn.models.len();
    let mut slots = Vec::with_capacity(m.max(n));
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + sub(i - 1, j - 1) {
            let mut slot = wtn.slots[i - 1].clone();
            slot.push(Some(hyp.words[j - 1].clone()));
            slots.push(slot);
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            let mut slot = wtn.slots[i - 1].clone();
            slot.push(None);
            slots.push(slot);
            i -= 1;
        } else {
            let mut slot = vec![None; width];
            slot.push(Some(hyp.words[j - 1].clone()));
            slots.push(slot);
            j -= 1;
        }
    }
    slots.reverse();
    let mut models = wtn.models.clone();
    models.push(hyp.model_id.clone());
    WordTransitionNetwork { models, slots }
}

/// Per slot, a candidate (a word or the empty word) backed by at least
/// `min_agreement` models wins; otherwise the primary's entry is kept.
/// Among several winners the primary's candidate is preferred, then the one
/// backed by the smallest model id. A winning word takes the primary's
/// surface form when the primary supports it, else that of its smallest-id
/// supporter.
pub fn vote(wtn: &WordTransitionNetwork, primary: usize, min_agreement: usize) -> Vec<WordToken> {
    let mut out = Vec::new();
    for slot in &wtn.slots {
        let mut support: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
        for (m, e) in slot.iter().enumerate() {
            support.entry(e.as_ref().map(|t| t.normalized.as_str())).or_default().push(m);
        }
        let primary_key = slot[primary].as_ref().map(|t| t.normalized.as_str());
        let winner = support
            .iter()
            .filter(|(_, who)| who.len() >= min_agreement)
            .min_by_key(|(key, who)| {
                (**key != primary_key, who.iter().map(|&m| wtn.models[m].as_str()).min().unwrap_or_default())
            })
            .map(|(key, who)| (*key, who.clone()));
        let chosen = match winner {
            Some((None, _)) => None,
            Some((Some(_), mut who)) => {
                who.sort_by_key(|&m| (m != primary, wtn.models[m].as_str()));
                slot[who[0]].clone()
            }
            None => slot[primary].clone(),
        };
        out.extend(chosen);
    }
    out
}

fn char_weight(t: &WordToken) -> f64 {
    t.normalized.chars().count().max(1) as f64
}

/// Give every word an interval. Words carrying an interval from
/// `primary_model` keep it; runs of other words share the gap between the
/// surrounding anchors (or `span` ends) in proportion to their length.
/// Returns `true` when there was no anchor at all and everything was spread
/// over `span`.
pub fn reconcile_timestamps(voted: &[WordToken], primary_model: &str, span: TimeInterval) -> (Vec<WordToken>, bool) {
    let is_anchor = |t: &WordToken| t.model_id == primary_model && t.interval.is_some();
    let mut out: Vec<WordToken> = voted.to_vec();
    let no_anchor = !out.is_empty() && !out.iter().any(is_anchor);
    let mut cursor = span.start_s;
    let mut i = 0;
    while i < out.len() {
        if is_anchor(&out[i]) {
            let iv = out[i].interval.expect("anchor");
            let start = iv.start_s.max(cursor);
            let iv = TimeInterval::new(start, iv.end_s.max(start));
            out[i].interval = Some(iv);
            cursor = iv.end_s;
            i += 1;
            continue;
        }
        let run_end = (i..out.len()).find(|&k| is_anchor(&out[k])).unwrap_or(out.len());
        let limit = if run_end < out.len() { out[run_end].interval.expect("anchor").start_s } else { span.end_s };
        let limit = limit.max(cursor);
        let total: f64 = out[i..run_end].iter().map(char_weight).sum();
        let mut acc = 0.0;
        for k in i..run_end {
            let a = cursor + (limit - cursor) * acc / total;
            acc += char_weight(&out[k]);
            let b = if k + 1 == run_end { limit } else { cursor + (limit - cursor) * acc / total };
            out[k].interval = Some(TimeInterval::new(a, b));
        }
        cursor = limit;
        i = run_end;
    }
    (out, no_anchor)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RepetitionReport {
    pub n: usize,
    pub max_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offending_ngram: Option<Vec<String>>,
    pub discarded: bool,
}

/// Count overlapping n-grams of normalized tokens; discard when any occurs
/// `count_threshold` or more times. The reported n-gram is the most
/// frequent, earliest on ties.
pub fn repetition_filter<S: AsRef<str>>(tokens: &[S], n: usize, count_threshold: usize) -> RepetitionReport {
    assert!(n >= 1, "n-gram order must be positive");
    let norm: Vec<String> = tokens.iter().map(|t| normalize_word(t.as_ref())).filter(|t| !t.is_empty()).collect();
    let mut counts: HashMap<&[String], (usize, usize)> = HashMap::new();
    for (pos, gram) in norm.windows(n).enumerate() {
        counts.entry(gram).or_insert((0, pos)).0 += 1;
    }
    let best = counts.iter().max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)));
    let max_count = best.map_or(0, |(_, c)| c.0);
    let discarded = max_count >= count_threshold && max_count > 0;
    RepetitionReport {
        n,
        max_count,
        offending_ngram: if discarded { best.map(|(g, _)| g.to_vec()) } else { None },
        discarded,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsemblePolicy {
    pub min_agreement: usize,
    pub ngram_n: usize,
    pub ngram_count: usize,
}

impl Default for EnsemblePolicy {
    fn default() -> Self {
        Self { min_agreement: 2, ngram_n: 15, ngram_count: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    /// Empty when the transcript was discarded or every model failed.
    pub words: Vec<WordToken>,
    pub repetition: Option<RepetitionReport>,
    pub primary_model: Option<String>,
    pub flags: BTreeSet<Flag>,
}

/// Combine per-model results. `results` are keyed by model id; `primary`
/// names the preferred model. Failed models are dropped; if the primary
/// failed, the smallest surviving id takes its place.
pub fn combine<E: std::fmt::Display>(
    results: BTreeMap<String, Result<Vec<WireWord>, E>>,
    primary: &str,
    span: TimeInterval,
    policy: &EnsemblePolicy,
) -> EnsembleOutput {
    let mut flags = BTreeSet::new();
    let mut ok: BTreeMap<String, Vec<WireWord>> = BTreeMap::new();
    for (model, r) in results {
        match r {
            Ok(words) => {
                ok.insert(model, words);
            }
            Err(e) => {
                log::warn!("asr model {model} failed: {e}");
                flags.insert(Flag::DegradedEnsemble);
            }
        }
    }
    let primary = if ok.contains_key(primary) {
        primary.to_string()
    } else if let Some(first) = ok.keys().next() {
        flags.insert(Flag::PrimaryPromoted);
        first.clone()
    } else {
        flags.insert(Flag::AsrFailed);
        return EnsembleOutput { words: Vec::new(), repetition: None, primary_model: None, flags };
    };
    let hyps: Vec<Hypothesis> = ok.iter().map(|(m, w)| Hypothesis::from_wire(m, *m == primary, w)).collect();
    let (words, interpolated) = ensemble_hypotheses(&hyps, span, policy.min_agreement);
    if interpolated {
        flags.insert(Flag::InterpolatedAll);
    }
    let report = repetition_filter(&words.iter().map(|w| w.surface.as_str()).collect::<Vec<_>>(), policy.ngram_n, policy.ngram_count);
    let words = if report.discarded {
        flags.insert(Flag::RepetitionDiscarded);
        Vec::new()
    } else {
        words
    };
    EnsembleOutput { words, repetition: Some(report), primary_model: Some(primary), flags }
}

/// Seed from the primary, align the rest in model-id order, vote and
/// reconcile timestamps.
pub fn ensemble_hypotheses(hyps: &[Hypothesis], span: TimeInterval, min_agreement: usize) -> (Vec<WordToken>, bool) {
    let primary = hyps.iter().find(|h| h.is_primary).expect("exactly one primary hypothesis");
    let mut others: Vec<&Hypothesis> = hyps.iter().filter(|h| !h.is_primary).collect();
    others.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    let wtn = others.iter().fold(WordTransitionNetwork::seed(primary), |w, h| align_hypothesis(&w, h));
    let voted = vote(&wtn, 0, min_agreement);
    reconcile_timestamps(&voted, &primary.model_id, span)
}
