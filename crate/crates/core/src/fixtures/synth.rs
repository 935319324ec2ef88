//! Deterministic synthetic conversations.
//!
//! Each voice is a harmonic tone (fundamental plus two harmonics) at a
//! distinct fundamental, shaped per word by a smooth envelope that never
//! reaches zero inside an utterance. All event times are whole
//! milliseconds so they survive RTTM's three-decimal format and land on
//! sample boundaries at 16 kHz.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, Fixture, FixtureMeta, FixtureSpeaker, MusicSpan, Transcript, TranscriptWord};
use crate::audio::{dequantize_i16, quantize_i16, AudioBuffer};
use crate::metrics::rttm::RttmSegment;
use crate::metrics::signal::{synth_overlap_mixture, MixtureSpec};
use crate::timeline::TimeInterval;

pub const SAMPLE_RATE_HZ: u32 = 16_000;

/// Fundamentals chosen so no harmonic of one voice lies within 10 Hz of a
/// harmonic of another.
pub const VOICE_F0_HZ: [f64; 3] = [100.0, 155.0, 237.0];
pub const SPEAKER_IDS: [&str; 3] = ["spk_a", "spk_b", "spk_c"];

const HARMONIC_AMPS: [f64; 3] = [1.0, 0.5, 0.25];
const MUSIC_HZ: [f64; 3] = [523.25, 659.25, 783.99];
const NOISE_AMP: f64 = 0.002;
const TARGET_RMS: f64 = 0.1;

pub const VOCAB: &[&str] = &[
    "the", "a", "we", "you", "they", "it", "that", "this", "so", "well", "just", "really", "think", "know", "going",
    "right", "time", "people", "work", "thing", "good", "because", "about", "would", "could", "there", "what", "when",
    "make", "sense", "actually", "kind", "mean", "see", "data", "model", "voice", "music", "week", "story", "today",
    "question", "answer", "maybe", "never", "always", "talk", "listen", "first", "last", "idea", "point", "start",
    "finish", "show", "place", "early", "later", "house", "city",
];
const BACKCHANNELS: &[&str] = &["yeah", "mhm", "right", "okay", "sure", "wow"];

fn ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversationSpec {
    pub stem: String,
    pub duration_s: f64,
    /// 2 or 3.
    pub speaker_count: usize,
    pub seed: u64,
    pub music: Vec<MusicSpan>,
    /// Probability that the next turn starts before the current one ends.
    pub overlap_prob: f64,
    /// Probability of a backchannel inside a turn of at least 2.5 s.
    pub backchannel_prob: f64,
    /// Probability that a turn runs long (up to about 14 s).
    pub long_turn_prob: f64,
}

impl ConversationSpec {
    pub fn new(stem: impl Into<String>, duration_s: f64, speaker_count: usize, seed: u64) -> Self {
        Self {
            stem: stem.into(),
            duration_s,
            speaker_count,
            seed,
            music: Vec::new(),
            overlap_prob: 0.2,
            backchannel_prob: 0.3,
            long_turn_prob: 0.1,
        }
    }

    pub fn short(stem: impl Into<String>, seed: u64) -> Self {
        Self::new(stem, 20.0, 2, seed)
    }
}

/// The fixture corpus used by the determinism and end-to-end tests.
pub fn default_corpus() -> Vec<ConversationSpec> {
    let mut podcast = ConversationSpec::new("podcast_120s", 120.0, 2, 11);
    podcast.music = vec![
        MusicSpan { start_s: 40.0, end_s: 52.0, prob: 0.82 },
        MusicSpan { start_s: 90.0, end_s: 96.0, prob: 0.18 },
    ];
    let mut panel = ConversationSpec::new("panel_60s", 60.0, 3, 23);
    panel.overlap_prob = 0.3;
    let interview = ConversationSpec::new("interview_45s", 45.0, 2, 37);
    let mut brief = ConversationSpec::new("brief_10s", 10.0, 2, 41);
    brief.backchannel_prob = 0.0;
    vec![podcast, panel, interview, brief]
}

/// Synthesize and write every spec into `dir`; returns the stems.
pub fn write_corpus(dir: &std::path::Path, specs: &[ConversationSpec]) -> Result<Vec<String>, super::FixtureError> {
    specs
        .iter()
        .map(|spec| {
            synth_conversation(spec).write(dir)?;
            Ok(spec.stem.clone())
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Utterance {
    speaker: usize,
    words: Vec<(String, TimeInterval)>,
}

impl Utterance {
    fn interval(&self) -> TimeInterval {
        TimeInterval::new(self.words[0].1.start_s, self.words.last().expect("non-empty").1.end_s)
    }
}

fn words_from(rng: &mut ChaCha8Rng, start_s: f64, count: usize, pool: &[&str]) -> Vec<(String, TimeInterval)> {
    let mut t = start_s;
    (0..count)
        .map(|_| {
            let d = ms(rng.random_range(0.25..0.5));
            let w = pool[rng.random_range(0..pool.len())].to_string();
            let iv = TimeInterval::new(t, ms(t + d));
            t = iv.end_s;
            (w, iv)
        })
        .collect()
}

fn plan_conversation(spec: &ConversationSpec) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &["plan", &spec.stem]));
    let mut out = Vec::new();
    let mut t = 0.5;
    let mut speaker = 0usize;
    loop {
        let count = if rng.random::<f64>() < spec.long_turn_prob { rng.random_range(24..34) } else { rng.random_range(2..14) };
        let words = words_from(&mut rng, t, count, VOCAB);
        let turn = Utterance { speaker, words };
        let iv = turn.interval();
        if iv.end_s > spec.duration_s - 0.5 {
            break;
        }
        let listener = (speaker + 1 + rng.random_range(0..spec.speaker_count - 1)) % spec.speaker_count;
        if iv.duration() >= 2.5 && rng.random::<f64>() < spec.backchannel_prob {
            let at = ms(rng.random_range(iv.start_s + 0.8..iv.end_s - 1.5));
            let bc = words_from(&mut rng, at, 1, BACKCHANNELS);
            out.push(Utterance { speaker: listener, words: bc });
        }
        out.push(turn);
        speaker = listener;
        t = if rng.random::<f64>() < spec.overlap_prob && iv.duration() > 1.5 {
            ms(iv.end_s - rng.random_range(0.3..0.8))
        } else {
            ms(iv.end_s + rng.random_range(0.15..1.2))
        };
    }
    out.sort_by(|a, b| a.interval().start_s.total_cmp(&b.interval().start_s));
    out
}

fn envelope(u: f64) -> f64 {
    // u in [0, 1] across one word; minimum 0.35 at word edges.
    0.35 + 0.65 * (PI * u).sin()
}

/// Add one voiced utterance to `track` at amplitude `amp`.
fn render_voice(track: &mut [f64], f0: f64, words: &[(String, TimeInterval)], amp: f64) {
    let sr = SAMPLE_RATE_HZ as f64;
    let start = words[0].1.start_s;
    let end = words.last().expect("non-empty").1.end_s;
    let fade = 0.01;
    for (_, iv) in words {
        let a = (iv.start_s * sr).round() as usize;
        let b = ((iv.end_s * sr).round() as usize).min(track.len());
        for (i, slot) in track.iter_mut().enumerate().take(b).skip(a) {
            let t = i as f64 / sr;
            let u = (t - iv.start_s) / iv.duration();
            let edge = ((t - start) / fade).min((end - t) / fade).clamp(0.0, 1.0);
            let tone: f64 = HARMONIC_AMPS
                .iter()
                .enumerate()
                .map(|(h, ha)| ha * (2.0 * PI * f0 * (h + 1) as f64 * t).sin())
                .sum();
            *slot += amp * edge * envelope(u) * tone;
        }
    }
}

fn render_music(track: &mut [f64], span: &MusicSpan) {
    let sr = SAMPLE_RATE_HZ as f64;
    let a = (span.start_s * sr).round() as usize;
    let b = ((span.end_s * sr).round() as usize).min(track.len());
    for (i, slot) in track.iter_mut().enumerate().take(b).skip(a) {
        let t = i as f64 / sr;
        let edge = ((t - span.start_s) / 0.05).min((span.end_s - t) / 0.05).clamp(0.0, 1.0);
        *slot += 0.12 * edge * MUSIC_HZ.iter().map(|f| (2.0 * PI * f * t).sin()).sum::<f64>();
    }
}

fn noise_floor(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-NOISE_AMP..NOISE_AMP)).collect()
}

/// Scale all layers by one gain so the mixture sits near −20 dBFS without
/// clipping, snap each layer to the 16-bit grid, and sum.
fn assemble(speech: Vec<Vec<f64>>, extra: Vec<Vec<f64>>) -> (Vec<AudioBuffer>, AudioBuffer) {
    let n = speech.first().map_or(0, Vec::len);
    let raw: Vec<f64> = (0..n).map(|i| speech.iter().chain(&extra).map(|l| l[i]).sum()).collect();
    let rms = (raw.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt();
    let peak = raw.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gain = (TARGET_RMS / rms).min(0.95 / peak);
    let snap = |layer: &Vec<f64>| -> Vec<f64> { layer.iter().map(|x| dequantize_i16(quantize_i16(gain * x))).collect() };
    let speech: Vec<Vec<f64>> = speech.iter().map(snap).collect();
    let extra: Vec<Vec<f64>> = extra.iter().map(snap).collect();
    let mix: Vec<f64> = (0..n).map(|i| speech.iter().chain(&extra).map(|l| l[i]).sum()).collect();
    debug_assert!(mix.iter().all(|x| x.abs() < 1.0));
    (speech.into_iter().map(|s| AudioBuffer::mono(s, SAMPLE_RATE_HZ)).collect(), AudioBuffer::mono(mix, SAMPLE_RATE_HZ))
}

fn build_fixture(
    stem: &str,
    duration_s: f64,
    speaker_count: usize,
    utterances: &[Utterance],
    amps: &[f64],
    music: &[MusicSpan],
    seed: u64,
) -> Fixture {
    let n = (duration_s * SAMPLE_RATE_HZ as f64).round() as usize;
    let mut speech = vec![vec![0.0; n]; speaker_count];
    for (u, &amp) in utterances.iter().zip(amps) {
        render_voice(&mut speech[u.speaker], VOICE_F0_HZ[u.speaker], &u.words, amp);
    }
    let mut music_track = vec![0.0; n];
    for span in music {
        render_music(&mut music_track, span);
    }
    let noise = noise_floor(n, derive_seed(seed, &["noise", stem]));
    let (tracks, mixture) = assemble(speech, vec![music_track, noise]);

    let speakers: Vec<FixtureSpeaker> = (0..speaker_count)
        .map(|s| FixtureSpeaker { speaker_id: SPEAKER_IDS[s].to_string(), f0_hz: VOICE_F0_HZ[s] })
        .collect();
    let rttm = utterances
        .iter()
        .map(|u| {
            let iv = u.interval();
            RttmSegment::new(stem, SPEAKER_IDS[u.speaker], iv.start_s, iv.end_s)
        })
        .collect();
    let mut words: Vec<TranscriptWord> = utterances
        .iter()
        .flat_map(|u| {
            u.words.iter().map(|(w, iv)| TranscriptWord {
                speaker_id: SPEAKER_IDS[u.speaker].to_string(),
                word: w.clone(),
                start_s: iv.start_s,
                end_s: iv.end_s,
            })
        })
        .collect();
    words.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then_with(|| a.speaker_id.cmp(&b.speaker_id)));
    Fixture {
        meta: FixtureMeta {
            stem: stem.to_string(),
            sample_rate_hz: SAMPLE_RATE_HZ,
            duration_s,
            speakers,
            music: music.to_vec(),
        },
        mixture,
        tracks: SPEAKER_IDS.iter().take(speaker_count).map(|s| s.to_string()).zip(tracks).collect::<BTreeMap<_, _>>(),
        rttm,
        transcript: Transcript { words },
    }
}

pub fn synth_conversation(spec: &ConversationSpec) -> Fixture {
    assert!((2..=3).contains(&spec.speaker_count), "2 or 3 speakers");
    let plan = plan_conversation(spec);
    let amps = vec![0.3; plan.len()];
    build_fixture(&spec.stem, spec.duration_s, spec.speaker_count, &plan, &amps, &spec.music, spec.seed)
}

/// A two-speaker overlap with known geometry, preceded by one clean
/// reference utterance per speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapPairSpec {
    pub stem: String,
    /// Voice index of the speaker who starts first.
    pub first: usize,
    pub second: usize,
    pub mixture: MixtureSpec,
    pub seed: u64,
}

/// Where each speaker of the overlapping pair is active.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapPairTruth {
    pub first_id: String,
    pub second_id: String,
    /// `[t_start, t2]` on the fixture timeline.
    pub first_span: TimeInterval,
    /// `[t1, t_end]` on the fixture timeline.
    pub second_span: TimeInterval,
}

const PAIR_FIRST_S: f64 = 4.0;
const PAIR_SECOND_S: f64 = 3.5;
const PAIR_ORIGIN_S: f64 = 7.5;

/// The 27-case grid: SIR {0, 5, 10} dB × overlap ratio {0.2, 0.5, 1.0} ×
/// three voice pairs.
pub fn overlap_grid() -> Vec<OverlapPairSpec> {
    let mut out = Vec::new();
    for (p, (a, b)) in [(0usize, 1usize), (2, 0), (1, 2)].into_iter().enumerate() {
        for sir in [0.0, 5.0, 10.0] {
            for ratio in [0.2, 0.5, 1.0] {
                out.push(OverlapPairSpec {
                    stem: format!("pair{p}_sir{sir:02.0}_rho{:03.0}", ratio * 100.0),
                    first: a,
                    second: b,
                    mixture: MixtureSpec { sir_db: sir, overlap_ratio: ratio },
                    seed: 1000 + out.len() as u64,
                });
            }
        }
    }
    out
}

pub fn overlap_pair_fixture(spec: &OverlapPairSpec) -> (Fixture, OverlapPairTruth) {
    let sr = SAMPLE_RATE_HZ as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &["pair", &spec.stem]));
    let word_count = |rng: &mut ChaCha8Rng, dur: f64| -> Vec<(String, TimeInterval)> {
        // Evenly divide `dur` into words of about 0.4 s.
        let k = (dur / 0.4).round().max(1.0) as usize;
        (0..k)
            .map(|i| {
                let w = VOCAB[rng.random_range(0..VOCAB.len())].to_string();
                (w, TimeInterval::new(ms(dur * i as f64 / k as f64), ms(dur * (i + 1) as f64 / k as f64)))
            })
            .collect()
    };

    // The pair is synthesized in isolation, mixed at the requested SIR and
    // ratio, then placed at PAIR_ORIGIN_S.
    let first_words = word_count(&mut rng, PAIR_FIRST_S);
    let second_words = word_count(&mut rng, PAIR_SECOND_S);
    let solo = |voice: usize, words: &[(String, TimeInterval)], dur: f64| {
        let mut buf = vec![0.0; (dur * sr).round() as usize];
        render_voice(&mut buf, VOICE_F0_HZ[voice], words, 0.3);
        AudioBuffer::mono(buf, SAMPLE_RATE_HZ)
    };
    let mixed = synth_overlap_mixture(
        &solo(spec.first, &first_words, PAIR_FIRST_S),
        &solo(spec.second, &second_words, PAIR_SECOND_S),
        spec.mixture,
    )
    .expect("valid pair spec");
    let origin = PAIR_ORIGIN_S;
    let first_span = TimeInterval::new(origin + mixed.t_start_s, origin + mixed.t2_s);
    let second_span = TimeInterval::new(origin + mixed.t1_s, origin + mixed.t_end_s);
    let duration_s = ms(second_span.end_s.max(first_span.end_s) + 0.5);
    let n = (duration_s * sr).round() as usize;

    // Voices are laid out on speaker slots 0 and 1 of the fixture.
    let mut speech = vec![vec![0.0; n]; 2];
    let ref_first = words_from(&mut rng, 0.5, 8, VOCAB);
    let ref_first = rebase(ref_first, 0.5, 3.0);
    let ref_second = rebase(words_from(&mut rng, 4.0, 8, VOCAB), 4.0, 3.0);
    render_voice(&mut speech[0], VOICE_F0_HZ[spec.first], &ref_first, 0.3);
    render_voice(&mut speech[1], VOICE_F0_HZ[spec.second], &ref_second, 0.3);
    let at = (origin * sr).round() as usize;
    for (dst, src) in speech[0][at..].iter_mut().zip(&mixed.source1.samples) {
        *dst += src;
    }
    for (dst, src) in speech[1][at..].iter_mut().zip(&mixed.source2.samples) {
        *dst += src;
    }
    let noise = noise_floor(n, derive_seed(spec.seed, &["noise", &spec.stem]));
    let (tracks, mixture) = assemble(speech, vec![noise]);

    let ids = [SPEAKER_IDS[spec.first].to_string(), SPEAKER_IDS[spec.second].to_string()];
    let shift = |words: &[(String, TimeInterval)], by: f64| -> Vec<(String, TimeInterval)> {
        words.iter().map(|(w, iv)| (w.clone(), TimeInterval::new(ms(iv.start_s + by), ms(iv.end_s + by)))).collect()
    };
    let utterances = [
        (0usize, ref_first),
        (1, ref_second),
        (0, shift(&first_words, origin)),
        (1, shift(&second_words, second_span.start_s)),
    ];
    let rttm = utterances
        .iter()
        .map(|(s, w)| RttmSegment::new(&spec.stem, &ids[*s], w[0].1.start_s, w.last().expect("words").1.end_s))
        .collect();
    let mut words: Vec<TranscriptWord> = utterances
        .iter()
        .flat_map(|(s, ws)| {
            ws.iter().map(|(w, iv)| TranscriptWord {
                speaker_id: ids[*s].clone(),
                word: w.clone(),
                start_s: iv.start_s,
                end_s: iv.end_s,
            })
        })
        .collect();
    words.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then_with(|| a.speaker_id.cmp(&b.speaker_id)));

    let fixture = Fixture {
        meta: FixtureMeta {
            stem: spec.stem.clone(),
            sample_rate_hz: SAMPLE_RATE_HZ,
            duration_s,
            speakers: vec![
                FixtureSpeaker { speaker_id: ids[0].clone(), f0_hz: VOICE_F0_HZ[spec.first] },
                FixtureSpeaker { speaker_id: ids[1].clone(), f0_hz: VOICE_F0_HZ[spec.second] },
            ],
            music: Vec::new(),
        },
        mixture,
        tracks: ids.iter().cloned().zip(tracks).collect(),
        rttm,
        transcript: Transcript { words },
    };
    let truth = OverlapPairTruth { first_id: ids[0].clone(), second_id: ids[1].clone(), first_span, second_span };
    (fixture, truth)
}

/// Stretch word intervals to exactly cover `[start_s, start_s + dur_s]`.
fn rebase(words: Vec<(String, TimeInterval)>, start_s: f64, dur_s: f64) -> Vec<(String, TimeInterval)> {
    let k = words.len() as f64;
    words
        .into_iter()
        .enumerate()
        .map(|(i, (w, _))| {
            let a = ms(start_s + dur_s * i as f64 / k);
            let b = ms(start_s + dur_s * (i + 1) as f64 / k);
            (w, TimeInterval::new(a, b))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::measure_dbfs;
    use crate::timeline::find_overlaps;
    use crate::timeline::SpeakerSegment;

    #[test]
    fn conversation_is_deterministic_and_consistent() {
        let spec = ConversationSpec::new("c", 60.0, 2, 5);
        let a = synth_conversation(&spec);
        assert_eq!(a, synth_conversation(&spec));
        let sum: Vec<f64> = (0..a.mixture.samples.len())
            .map(|i| a.tracks.values().map(|t| t.samples[i]).sum::<f64>())
            .collect();
        // Mixture minus speech is only the noise floor here.
        assert!(a.mixture.samples.iter().zip(&sum).all(|(m, s)| (m - s).abs() <= NOISE_AMP * 1.01));
        assert_eq!(a.mixture, a.mixture.quantized());
        let db = measure_dbfs(&a.mixture).unwrap().dbfs;
        assert!((db + 20.0).abs() < 0.5, "{db}");
        assert!(a.rttm.len() > 5);
        for w in &a.transcript.words {
            assert_eq!(w.start_s, ms(w.start_s));
        }
    }

    #[test]
    fn corpus_has_overlaps_and_backchannels() {
        let fx = synth_conversation(&default_corpus()[0]);
        let segs: Vec<SpeakerSegment> = fx
            .rttm
            .iter()
            .map(|r| SpeakerSegment::new(r.speaker_id.clone(), r.interval.start_s, r.interval.end_s, "c0"))
            .collect();
        let ov = find_overlaps(&segs);
        assert!(ov.iter().any(|o| o.kind == crate::timeline::OverlapKind::Containment));
        assert!(ov.iter().any(|o| o.kind == crate::timeline::OverlapKind::Partial));
    }

    #[test]
    fn overlap_grid_geometry() {
        let grid = overlap_grid();
        assert_eq!(grid.len(), 27);
        for spec in &grid {
            let (fx, truth) = overlap_pair_fixture(spec);
            let ov = truth.first_span.intersect(&truth.second_span).unwrap();
            let want = spec.mixture.overlap_ratio * PAIR_SECOND_S;
            assert!((ov.duration() - want).abs() < 1e-9, "{}", spec.stem);
            assert_eq!(fx.rttm.len(), 4);
            assert_eq!(fx.rttm[2].interval, truth.first_span);
            assert_eq!(fx.rttm[3].interval, truth.second_span);
        }
    }
}
