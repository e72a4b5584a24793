//! CTC loss over the blank-interleaved target and Viterbi alignment extraction
//! for seeding transducer Viterbi training.

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::numeric::{logaddexp, Matrix};
use crate::topology::{AlignmentPath, LabelSeq};

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("target of length {labels} is unreachable in {frames} frames")]
    Unreachable { frames: usize, labels: usize },
    #[error("label {label} out of range for vocabulary of size {vocab}")]
    LabelOutOfRange { label: u32, vocab: usize },
    #[error("alignment file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `T × (V+1)` log-probabilities; blank is column `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcLogits(pub Matrix);

impl CtcLogits {
    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn vocab(&self) -> usize {
        self.0.cols() - 1
    }

    pub fn blank(&self) -> usize {
        self.vocab()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentSource {
    CtcViterbi,
}

/// Per-frame CTC state path (labels may repeat across frames).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameAlignment {
    pub frames: Vec<Option<u32>>,
    pub source: AlignmentSource,
}

/// Minimum number of frames CTC needs to emit `target` (repeats need a blank between them).
pub fn min_frames(target: &LabelSeq) -> usize {
    let l = target.labels();
    l.len() + l.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC collapsing: merge repeats, then drop blanks.
pub fn ctc_collapse(frames: &[Option<u32>]) -> LabelSeq {
    let mut out = Vec::new();
    let mut prev = None;
    for &y in frames {
        if let Some(l) = y {
            if prev != Some(l) {
                out.push(l);
            }
        }
        prev = y;
    }
    LabelSeq(out)
}

fn expanded(target: &LabelSeq, blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target.labels() {
        ext.push(l as usize);
        ext.push(blank);
    }
    ext
}

fn check_labels(logits: &CtcLogits, target: &LabelSeq) -> Result<(), CtcError> {
    let vocab = logits.vocab();
    match target.labels().iter().find(|&&l| l as usize >= vocab) {
        Some(&label) => Err(CtcError::LabelOutOfRange { label, vocab }),
        None => Ok(()),
    }
}

/// Whether state `u` of the expanded target may be entered from `u - 2`.
#[inline]
fn can_skip(ext: &[usize], u: usize, blank: usize) -> bool {
    u >= 2 && ext[u] != blank && ext[u] != ext[u - 2]
}

/// CTC log-probability of `target` and its gradient w.r.t. every logit entry.
///
/// Unreachable targets give `-inf` and an all-zero gradient.
pub fn ctc_fullsum(logits: &CtcLogits, target: &LabelSeq) -> Result<(f64, Matrix), CtcError> {
    check_labels(logits, target)?;
    let frames = logits.frames();
    let width = logits.vocab() + 1;
    let mut grad = Matrix::zeros(frames, width);
    if frames == 0 || min_frames(target) > frames {
        return Ok((if frames == 0 && target.is_empty() { 0.0 } else { f64::NEG_INFINITY }, grad));
    }
    let blank = logits.blank();
    let ext = expanded(target, blank);
    let u_len = ext.len();
    let neg = f64::NEG_INFINITY;
    let lp = &logits.0;

    let mut alpha = vec![neg; frames * u_len];
    alpha[0] = lp.get(0, ext[0]);
    if u_len > 1 {
        alpha[1] = lp.get(0, ext[1]);
    }
    for t in 1..frames {
        for u in 0..u_len {
            let mut q = alpha[(t - 1) * u_len + u];
            if u >= 1 {
                q = logaddexp(q, alpha[(t - 1) * u_len + u - 1]);
            }
            if can_skip(&ext, u, blank) {
                q = logaddexp(q, alpha[(t - 1) * u_len + u - 2]);
            }
            alpha[t * u_len + u] = if q == neg { neg } else { q + lp.get(t, ext[u]) };
        }
    }
    let last = (frames - 1) * u_len;
    let log_prob = if u_len > 1 {
        logaddexp(alpha[last + u_len - 1], alpha[last + u_len - 2])
    } else {
        alpha[last]
    };
    if log_prob == neg {
        return Ok((log_prob, grad));
    }

    // beta excludes the emission at t
    let mut beta = vec![neg; frames * u_len];
    beta[last + u_len - 1] = 0.0;
    if u_len > 1 {
        beta[last + u_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for u in 0..u_len {
            let next = (t + 1) * u_len;
            let mut q = beta[next + u] + lp.get(t + 1, ext[u]);
            if u + 1 < u_len {
                q = logaddexp(q, beta[next + u + 1] + lp.get(t + 1, ext[u + 1]));
            }
            if u + 2 < u_len && can_skip(&ext, u + 2, blank) {
                q = logaddexp(q, beta[next + u + 2] + lp.get(t + 1, ext[u + 2]));
            }
            beta[t * u_len + u] = q;
        }
    }
    for t in 0..frames {
        for u in 0..u_len {
            let post = alpha[t * u_len + u] + beta[t * u_len + u] - log_prob;
            if post > neg {
                let v = ext[u];
                grad.set(t, v, grad.get(t, v) + post.exp());
            }
        }
    }
    Ok((log_prob, grad))
}

/// Most probable legal CTC state path for `target`.
pub fn ctc_viterbi_align(logits: &CtcLogits, target: &LabelSeq) -> Result<FrameAlignment, CtcError> {
    check_labels(logits, target)?;
    let frames = logits.frames();
    let unreachable = CtcError::Unreachable { frames, labels: target.len() };
    if frames == 0 || min_frames(target) > frames {
        return Err(unreachable);
    }
    let blank = logits.blank();
    let ext = expanded(target, blank);
    let u_len = ext.len();
    let neg = f64::NEG_INFINITY;
    let lp = &logits.0;
    let mut score = vec![neg; frames * u_len];
    let mut back = vec![0usize; frames * u_len];
    score[0] = lp.get(0, ext[0]);
    if u_len > 1 {
        score[1] = lp.get(0, ext[1]);
    }
    for t in 1..frames {
        for u in 0..u_len {
            let prev = (t - 1) * u_len;
            let mut best = score[prev + u];
            let mut arg = u;
            if u >= 1 && score[prev + u - 1] > best {
                best = score[prev + u - 1];
                arg = u - 1;
            }
            if can_skip(&ext, u, blank) && score[prev + u - 2] > best {
                best = score[prev + u - 2];
                arg = u - 2;
            }
            if best > neg {
                score[t * u_len + u] = best + lp.get(t, ext[u]);
                back[t * u_len + u] = arg;
            }
        }
    }
    let last = (frames - 1) * u_len;
    let mut u = u_len - 1;
    if u_len > 1 && score[last + u_len - 2] > score[last + u_len - 1] {
        u = u_len - 2;
    }
    if score[last + u] == neg {
        return Err(unreachable);
    }
    let mut out = vec![None; frames];
    for t in (0..frames).rev() {
        out[t] = if ext[u] == blank { None } else { Some(ext[u] as u32) };
        if t > 0 {
            u = back[t * u_len + u];
        }
    }
    Ok(FrameAlignment { frames: out, source: AlignmentSource::CtcViterbi })
}

/// Places each label segment's emission on its last frame; every other frame becomes blank.
pub fn to_transducer_alignment(fa: &FrameAlignment) -> AlignmentPath {
    let f = &fa.frames;
    let out = f
        .iter()
        .enumerate()
        .map(|(t, &y)| match y {
            Some(l) if f.get(t + 1).copied().flatten() != Some(l) => Some(l),
            _ => None,
        })
        .collect();
    AlignmentPath(out)
}

/// Writes one line per utterance: `<id> <T> <frame ids...>` with blank as `_`.
pub fn write_alignments<W: Write>(mut w: W, records: &[(String, FrameAlignment)]) -> Result<(), CtcError> {
    for (id, fa) in records {
        write!(w, "{id} {}", fa.frames.len())?;
        for y in &fa.frames {
            match y {
                Some(l) => write!(w, " {l}")?,
                None => w.write_all(b" _")?,
            }
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_alignments<R: BufRead>(r: R) -> Result<Vec<(String, FrameAlignment)>, CtcError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| CtcError::Parse { line: i + 1, msg };
        let mut fields = line.split_ascii_whitespace();
        let id = fields.next().ok_or_else(|| parse_err("missing utterance id".into()))?;
        let count: usize = fields
            .next()
            .ok_or_else(|| parse_err("missing frame count".into()))?
            .parse()
            .map_err(|e| parse_err(format!("bad frame count: {e}")))?;
        let frames = fields
            .map(|tok| match tok {
                "_" => Ok(None),
                _ => tok.parse::<u32>().map(Some).map_err(|e| parse_err(format!("bad frame id {tok:?}: {e}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if frames.len() != count {
            return Err(parse_err(format!("expected {count} frames, found {}", frames.len())));
        }
        out.push((id.to_string(), FrameAlignment { frames, source: AlignmentSource::CtcViterbi }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::log_softmax_inplace;
    use crate::oracle;
    use crate::topology::collapse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> CtcLogits {
        let rows: Vec<Vec<f64>> = (0..frames)
            .map(|_| {
                let mut r: Vec<f64> = (0..=vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
                log_softmax_inplace(&mut r);
                r
            })
            .collect();
        CtcLogits(Matrix::from_rows(&rows))
    }

    #[test]
    fn forced_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random_logits(&mut rng, 3, 3);
        let target = LabelSeq(vec![0, 1, 2]);
        let (lp, _) = ctc_fullsum(&logits, &target).unwrap();
        let expected = logits.0.get(0, 0) + logits.0.get(1, 1) + logits.0.get(2, 2);
        assert!((lp - expected).abs() < 1e-12);
        let fa = ctc_viterbi_align(&logits, &target).unwrap();
        assert_eq!(fa.frames, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn repeat_needs_separator() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = random_logits(&mut rng, 2, 3);
        let target = LabelSeq(vec![1, 1]);
        let (lp, grad) = ctc_fullsum(&logits, &target).unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
        assert!(matches!(ctc_viterbi_align(&logits, &target), Err(CtcError::Unreachable { .. })));
        assert_eq!(min_frames(&target), 3);
    }

    #[test]
    fn seeded_t4_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random_logits(&mut rng, 4, 3);
        let target = LabelSeq(vec![0, 2]);
        let (lp, _) = ctc_fullsum(&logits, &target).unwrap();
        let oracle_sum = oracle::ctc_path_sum(&logits, &target).unwrap();
        assert!((lp - oracle_sum).abs() < 1e-9);
        let (best, best_path) = oracle::ctc_best_path(&logits, &target).unwrap();
        let fa = ctc_viterbi_align(&logits, &target).unwrap();
        assert_eq!(fa.frames, best_path);
        assert!(best.is_finite());
    }

    #[test]
    fn concentrated_logits_give_that_path() {
        let want = [Some(1), Some(1), None, Some(0), None];
        let rows: Vec<Vec<f64>> = want
            .iter()
            .map(|y| {
                let mut r = vec![-30.0; 4];
                r[y.map_or(3, |l| l as usize)] = 0.0;
                log_softmax_inplace(&mut r);
                r
            })
            .collect();
        let logits = CtcLogits(Matrix::from_rows(&rows));
        let fa = ctc_viterbi_align(&logits, &LabelSeq(vec![1, 0])).unwrap();
        assert_eq!(fa.frames, want);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut logits = random_logits(&mut rng, 6, 3);
        let target = LabelSeq(vec![1, 1, 2]);
        let (_, grad) = ctc_fullsum(&logits, &target).unwrap();
        let step = 1e-5;
        for i in 0..logits.0.as_slice().len() {
            let orig = logits.0.as_slice()[i];
            logits.0.as_mut_slice()[i] = orig + step;
            let up = ctc_fullsum(&logits, &target).unwrap().0;
            logits.0.as_mut_slice()[i] = orig - step;
            let down = ctc_fullsum(&logits, &target).unwrap().0;
            logits.0.as_mut_slice()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let an = grad.as_slice()[i];
            let err = (fd - an).abs();
            assert!(err <= 1e-4 * fd.abs().max(an.abs()) || err <= 1e-8, "{i}: {fd} vs {an}");
        }
    }

    #[test]
    fn transducer_alignment_examples() {
        let fa = |f: Vec<Option<u32>>| FrameAlignment { frames: f, source: AlignmentSource::CtcViterbi };
        assert_eq!(
            to_transducer_alignment(&fa(vec![Some(0), Some(0), None, Some(1)])),
            AlignmentPath(vec![None, Some(0), None, Some(1)])
        );
        assert_eq!(to_transducer_alignment(&fa(vec![None; 3])), AlignmentPath(vec![None; 3]));
        assert_eq!(
            to_transducer_alignment(&fa(vec![Some(0), None, Some(0)])),
            AlignmentPath(vec![Some(0), None, Some(0)])
        );
        let mixed = fa(vec![Some(2), Some(2), Some(1), Some(1), None, Some(1)]);
        let ta = to_transducer_alignment(&mixed);
        assert_eq!(collapse(&ta), ctc_collapse(&mixed.frames));
        assert_eq!(ta.label_count(), 3);
    }

    #[test]
    fn alignment_file_roundtrip() {
        let recs = vec![
            ("utt-1".to_string(), FrameAlignment { frames: vec![Some(3), None, Some(10)], source: AlignmentSource::CtcViterbi }),
            ("utt-2".to_string(), FrameAlignment { frames: vec![], source: AlignmentSource::CtcViterbi }),
        ];
        let mut buf = Vec::new();
        write_alignments(&mut buf, &recs).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "utt-1 3 3 _ 10\nutt-2 0\n");
        let back = read_alignments(&buf[..]).unwrap();
        assert_eq!(back, recs);
        let mut again = Vec::new();
        write_alignments(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn malformed_alignment_line() {
        let err = read_alignments(&b"u 3 1 _\n"[..]).unwrap_err();
        assert!(matches!(err, CtcError::Parse { line: 1, .. }));
    }
}
