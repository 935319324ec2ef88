use serde::{Deserialize, Serialize};

/// Edit-operation counts of a minimum-edit alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub wer: f64,
    /// The reference was empty; `wer` is then the raw insertion count.
    pub empty_reference: bool,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Word error rate with unit costs over already-normalized tokens.
///
/// Ties in the backtrace prefer match/substitution, then deletion, then
/// insertion.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> WerBreakdown {
    let n = reference.len();
    let m = hypothesis.len();
    let cols = m + 1;
    let mut dist = vec![0usize; (n + 1) * cols];
    for i in 0..=n {
        dist[i * cols] = i;
    }
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = dist[(i - 1) * cols + j - 1] + usize::from(!same);
            let del = dist[(i - 1) * cols + j] + 1;
            let ins = dist[i * cols + j - 1] + 1;
            dist[i * cols + j] = diag.min(del).min(ins);
        }
    }

    let (mut s, mut d, mut ins) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * cols + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if here == dist[(i - 1) * cols + j - 1] + usize::from(!same) {
                s += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == dist[(i - 1) * cols + j] + 1 {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }

    let (wer, empty_reference) = if n == 0 { (ins as f64, m > 0) } else { ((s + d + ins) as f64 / n as f64, false) };
    WerBreakdown { substitutions: s, deletions: d, insertions: ins, ref_len: n, wer, empty_reference }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn examples() {
        assert_eq!(wer(&toks("a b c"), &toks("a b c")).wer, 0.0);
        let b = wer(&toks("a b c"), &toks("a x c d"));
        assert_eq!((b.substitutions, b.deletions, b.insertions), (1, 0, 1));
        assert!((b.wer - 2.0 / 3.0).abs() < 1e-12);
        let gone = wer(&toks("a b c d e"), &toks(""));
        assert_eq!(gone.wer, 1.0);
        assert_eq!(gone.deletions, 5);
    }

    #[test]
    fn empty_reference() {
        let b = wer(&toks(""), &toks("x y"));
        assert!(b.empty_reference);
        assert_eq!(b.wer, 2.0);
        let z = wer::<&str>(&[], &[]);
        assert_eq!(z.wer, 0.0);
        assert!(!z.empty_reference);
    }
}
