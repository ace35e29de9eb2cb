use crate::error::{Error, Result};
use crate::training::batch::is_reserved;

/// Edit operations turning a reference into a hypothesis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub sub: usize,
    /// Reference tokens missing from the hypothesis.
    pub del: usize,
    /// Hypothesis tokens absent from the reference.
    pub ins: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.sub + self.del + self.ins
    }
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
    }
}

/// Unit-cost Levenshtein alignment. Among minimal alignments the backtrace
/// prefers substitution, then insertion, then deletion.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (hyp.len(), reference.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            let ins = d[(i - 1) * w + j] + 1;
            let del = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = hyp[i - 1] == reference[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                c.sub += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.ins += 1;
            i -= 1;
        } else {
            c.del += 1;
            j -= 1;
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScore {
    pub hypothesis: Vec<u32>,
    pub reference: Vec<u32>,
    pub edits: EditCounts,
}

impl UtteranceScore {
    /// May exceed 100 when the hypothesis has many insertions.
    pub fn cer(&self) -> f64 {
        if self.reference.is_empty() {
            return if self.edits.total() == 0 { 0.0 } else { f64::INFINITY };
        }
        100.0 * self.edits.total() as f64 / self.reference.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceScore>,
    pub edits: EditCounts,
    pub reference_tokens: usize,
}

impl EvalReport {
    /// `100 · Σ edits / Σ reference length`.
    pub fn cer(&self) -> f64 {
        if self.reference_tokens == 0 {
            return 0.0;
        }
        100.0 * self.edits.total() as f64 / self.reference_tokens as f64
    }

    /// Fraction of aligned positions where hypothesis and reference agree,
    /// over the longer of the two per utterance.
    pub fn token_accuracy(&self) -> f64 {
        let (mut hit, mut all) = (0usize, 0usize);
        for u in &self.utterances {
            hit += u.hypothesis.iter().zip(&u.reference).filter(|(a, b)| a == b).count();
            all += u.hypothesis.len().max(u.reference.len());
        }
        if all == 0 {
            1.0
        } else {
            hit as f64 / all as f64
        }
    }

    /// Fraction of utterances decoded exactly.
    pub fn exact_match(&self) -> f64 {
        let n = self.utterances.iter().filter(|u| u.hypothesis == u.reference).count();
        n as f64 / self.utterances.len().max(1) as f64
    }
}

fn strip(seq: &[u32]) -> Vec<u32> {
    seq.iter().copied().filter(|&t| !is_reserved(t)).collect()
}

/// Scores hypotheses against references after dropping pad, sos and eos.
pub fn score_cer(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> Result<EvalReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut report = EvalReport {
        utterances: Vec::with_capacity(hyps.len()),
        edits: EditCounts::default(),
        reference_tokens: 0,
    };
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (strip(h), strip(r));
        let edits = edit_distance(&h, &r);
        report.edits += edits;
        report.reference_tokens += r.len();
        report.utterances.push(UtteranceScore {
            hypothesis: h,
            reference: r,
            edits,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::batch::{EOS, SOS};

    fn ed(h: &str, r: &str) -> (usize, usize, usize) {
        let c = edit_distance(h.as_bytes(), r.as_bytes());
        (c.sub, c.del, c.ins)
    }

    #[test]
    fn basic_cases() {
        assert_eq!(ed("abc", "abc"), (0, 0, 0));
        assert_eq!(ed("axc", "abc"), (1, 0, 0));
        assert_eq!(ed("", "abcde"), (0, 5, 0));
        assert_eq!(ed("abcx", "abc"), (0, 0, 1));
        assert_eq!(ed("ac", "abc"), (0, 1, 0));
        assert_eq!(ed("", ""), (0, 0, 0));
    }

    #[test]
    fn tie_break_prefers_substitution() {
        // "ab" vs "ba": two substitutions beat one insertion plus one deletion.
        assert_eq!(ed("ab", "ba"), (2, 0, 0));
        // Length change forces one insertion; the rest is substitution.
        assert_eq!(ed("xyz", "ab"), (2, 0, 1));
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let r = score_cer(&[vec![]], &[vec![3, 4, 5, 6, 7]]).unwrap();
        assert_eq!(r.utterances[0].edits, EditCounts { sub: 0, del: 5, ins: 0 });
        assert_eq!(r.utterances[0].cer(), 100.0);
    }

    #[test]
    fn hand_computed_aggregate() {
        // (a b c d | a b c d): 0 edits; (a x c | a b c): 1 sub;
        // (a b c d e f | a b): 4 ins. Reference tokens 4 + 3 + 2 = 9.
        let hyps = vec![vec![3, 4, 5, 6], vec![3, 9, 5], vec![3, 4, 5, 6, 7, 8]];
        let refs = vec![vec![SOS, 3, 4, 5, 6, EOS], vec![3, 4, 5], vec![3, 4]];
        let r = score_cer(&hyps, &refs).unwrap();
        assert_eq!(r.edits, EditCounts { sub: 1, del: 0, ins: 4 });
        assert_eq!(r.reference_tokens, 9);
        assert!((r.cer() - 500.0 / 9.0).abs() < 1e-12);
        assert_eq!(r.utterances[2].cer(), 200.0);
    }

    #[test]
    fn identical_is_zero_and_mismatch_errors() {
        let s = vec![vec![3, 4], vec![5]];
        assert_eq!(score_cer(&s, &s).unwrap().cer(), 0.0);
        assert!(score_cer(&s, &s[..1]).is_err());
    }
}
