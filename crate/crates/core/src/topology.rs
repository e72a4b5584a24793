//! Strictly monotonic transducer label topology.
//!
//! Every frame emits exactly one symbol: blank (advance time only) or the
//! next target label (advance time and label position). A lattice cell
//! `(t, s)` holds the output distribution at frame `t` after `s` labels
//! have been emitted; its label history is `a_{s-k+1..=s}`.

use std::fmt;

use thiserror::Error;

use crate::numeric::logaddexp;

/// Upper bound on the number of paths `enumerate_paths` will materialize.
pub const ENUMERATION_GUARD: u128 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid arguments: {0}")]
    InvalidArguments(String),
    #[error("target of length {labels} cannot be aligned to {frames} frames")]
    Infeasible { frames: usize, labels: usize },
    #[error("lattice shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch { got: (usize, usize, usize), expected: (usize, usize, usize) },
    #[error("label {label} out of range for vocabulary of size {vocab}")]
    LabelOutOfRange { label: u32, vocab: usize },
    #[error("enumeration of {count} paths exceeds the guard of {ENUMERATION_GUARD}")]
    GuardExceeded { count: u128 },
}

/// Output label sequence (never contains blank).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSeq(pub Vec<u32>);

impl LabelSeq {
    pub fn new(labels: Vec<u32>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.0
    }

    /// Checks every label is a valid non-blank id for vocabulary size `vocab`.
    pub fn validate(&self, vocab: usize) -> Result<(), TopologyError> {
        match self.0.iter().find(|&&l| l as usize >= vocab) {
            Some(&label) => Err(TopologyError::LabelOutOfRange { label, vocab }),
            None => Ok(()),
        }
    }
}

impl From<Vec<u32>> for LabelSeq {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

impl fmt::Display for LabelSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Blank-augmented frame-level alignment; `None` is blank.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct AlignmentPath(pub Vec<Option<u32>>);

impl AlignmentPath {
    pub fn frames(&self) -> &[Option<u32>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of labels emitted before each frame, i.e. the lattice row `s(t)`.
    pub fn positions(&self) -> Vec<usize> {
        let mut s = 0;
        self.0
            .iter()
            .map(|y| {
                let here = s;
                if y.is_some() {
                    s += 1;
                }
                here
            })
            .collect()
    }

    pub fn label_count(&self) -> usize {
        self.0.iter().filter(|y| y.is_some()).count()
    }
}

impl fmt::Display for AlignmentPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, y) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match y {
                Some(l) => write!(f, "{l}")?,
                None => f.write_str("_")?,
            }
        }
        Ok(())
    }
}

/// Removes all blanks, preserving order.
pub fn collapse(path: &AlignmentPath) -> LabelSeq {
    LabelSeq(path.0.iter().flatten().copied().collect())
}

/// Number of monotonic alignments of `labels` labels to `frames` frames: `C(frames, labels)`.
pub fn count_paths(frames: usize, labels: usize) -> Result<u128, TopologyError> {
    if labels > frames {
        return Err(TopologyError::InvalidArguments(format!(
            "S = {labels} exceeds T = {frames}"
        )));
    }
    let k = labels.min(frames - labels) as u128;
    let n = frames as u128;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc
            .checked_mul(n - i)
            .ok_or_else(|| TopologyError::InvalidArguments("path count overflows u128".into()))?
            / (i + 1);
    }
    Ok(acc)
}

/// Every monotonic alignment of `target` to `frames` frames, in lexicographic
/// order with label emissions sorting before blanks.
pub fn enumerate_paths(frames: usize, target: &LabelSeq) -> Result<Vec<AlignmentPath>, TopologyError> {
    let count = count_paths(frames, target.len())?;
    if count > ENUMERATION_GUARD {
        return Err(TopologyError::GuardExceeded { count });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut buf = Vec::with_capacity(frames);
    fn rec(
        t: usize,
        s: usize,
        frames: usize,
        target: &[u32],
        buf: &mut Vec<Option<u32>>,
        out: &mut Vec<AlignmentPath>,
    ) {
        if t == frames {
            if s == target.len() {
                out.push(AlignmentPath(buf.clone()));
            }
            return;
        }
        let remaining = frames - t;
        let needed = target.len() - s;
        if needed > 0 {
            buf.push(Some(target[s]));
            rec(t + 1, s + 1, frames, target, buf, out);
            buf.pop();
        }
        if remaining > needed {
            buf.push(None);
            rec(t + 1, s, frames, target, buf, out);
            buf.pop();
        }
    }
    rec(0, 0, frames, target.labels(), &mut buf, &mut out);
    Ok(out)
}

/// Dense `T × (S+1) × (V+1)` table of log-probabilities; blank is index `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLogLattice {
    frames: usize,
    target_len: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl JointLogLattice {
    pub fn new(frames: usize, target_len: usize, vocab: usize, values: Vec<f64>) -> Result<Self, TopologyError> {
        let expected = frames * (target_len + 1) * (vocab + 1);
        if values.len() != expected {
            return Err(TopologyError::InvalidArguments(format!(
                "lattice needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { frames, target_len, vocab, values })
    }

    /// Builds a lattice by evaluating `f(t, s)` for every cell; `f` returns the `V+1` log-probs.
    pub fn from_fn(
        frames: usize,
        target_len: usize,
        vocab: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Self {
        let mut values = Vec::with_capacity(frames * (target_len + 1) * (vocab + 1));
        for t in 0..frames {
            for s in 0..=target_len {
                let row = f(t, s);
                assert_eq!(row.len(), vocab + 1, "lattice row width mismatch");
                values.extend_from_slice(&row);
            }
        }
        Self { frames, target_len, vocab, values }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.target_len, self.vocab)
    }

    #[inline]
    pub fn index(&self, t: usize, s: usize, v: usize) -> usize {
        (t * (self.target_len + 1) + s) * (self.vocab + 1) + v
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize, v: usize) -> f64 {
        self.values[self.index(t, s, v)]
    }

    pub fn cell(&self, t: usize, s: usize) -> &[f64] {
        let i = self.index(t, s, 0);
        &self.values[i..i + self.vocab + 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Largest |logsumexp(cell)| over all cells.
    pub fn max_normalization_error(&self) -> f64 {
        self.values
            .chunks_exact(self.vocab + 1)
            .map(|c| crate::numeric::logsumexp(c).abs())
            .fold(0.0, f64::max)
    }

    fn check_target(&self, target: &LabelSeq) -> Result<(), TopologyError> {
        if target.len() != self.target_len {
            return Err(TopologyError::ShapeMismatch {
                got: self.shape(),
                expected: (self.frames, target.len(), self.vocab),
            });
        }
        target.validate(self.vocab)
    }
}

/// Log-probability of one alignment path under a lattice.
pub fn path_log_prob(lattice: &JointLogLattice, path: &AlignmentPath) -> f64 {
    let blank = lattice.blank();
    let mut s = 0;
    let mut acc = 0.0;
    for (t, y) in path.frames().iter().enumerate() {
        match y {
            Some(l) => {
                acc += lattice.get(t, s, *l as usize);
                s += 1;
            }
            None => acc += lattice.get(t, s, blank),
        }
    }
    acc
}

/// Log-probability and path-posterior occupancy (= gradient of the log-probability
/// w.r.t. every lattice entry).
#[derive(Debug, Clone, PartialEq)]
pub struct FullSumResult {
    pub log_prob: f64,
    /// Same layout as the lattice; empty when the target is infeasible.
    pub occupancy: Vec<f64>,
}

impl FullSumResult {
    pub fn is_feasible(&self) -> bool {
        self.log_prob > f64::NEG_INFINITY
    }
}

/// Full-sum over all monotonic alignments by forward–backward.
pub fn fullsum(lattice: &JointLogLattice, target: &LabelSeq) -> Result<FullSumResult, TopologyError> {
    lattice.check_target(target)?;
    let frames = lattice.frames();
    let n = target.len();
    if n > frames {
        return Ok(FullSumResult { log_prob: f64::NEG_INFINITY, occupancy: Vec::new() });
    }
    let blank = lattice.blank();
    let a = target.labels();
    let width = n + 1;
    let neg = f64::NEG_INFINITY;

    // alpha[t][s]: log-prob of reaching s labels after t frames.
    let mut alpha = vec![neg; (frames + 1) * width];
    alpha[0] = 0.0;
    for t in 0..frames {
        let lo = (n + t + 1).saturating_sub(frames);
        let hi = (t + 1).min(n);
        for s in lo..=hi {
            let mut q = neg;
            if s <= t {
                q = alpha[t * width + s] + lattice.get(t, s, blank);
            }
            if s > 0 {
                q = logaddexp(q, alpha[t * width + s - 1] + lattice.get(t, s - 1, a[s - 1] as usize));
            }
            alpha[(t + 1) * width + s] = q;
        }
    }
    let log_prob = alpha[frames * width + n];

    let mut beta = vec![neg; (frames + 1) * width];
    beta[frames * width + n] = 0.0;
    for t in (0..frames).rev() {
        let lo = (n + t).saturating_sub(frames);
        let hi = t.min(n);
        for s in lo..=hi {
            let mut q = lattice.get(t, s, blank) + beta[(t + 1) * width + s];
            if s < n {
                q = logaddexp(q, lattice.get(t, s, a[s] as usize) + beta[(t + 1) * width + s + 1]);
            }
            beta[t * width + s] = q;
        }
    }

    let mut occupancy = vec![0.0; lattice.values().len()];
    if log_prob == neg {
        return Ok(FullSumResult { log_prob, occupancy });
    }
    for t in 0..frames {
        for s in 0..=n.min(t) {
            let fwd = alpha[t * width + s];
            if fwd == neg {
                continue;
            }
            let blank_post = fwd + lattice.get(t, s, blank) + beta[(t + 1) * width + s] - log_prob;
            occupancy[lattice.index(t, s, blank)] = blank_post.exp();
            if s < n {
                let v = a[s] as usize;
                let label_post = fwd + lattice.get(t, s, v) + beta[(t + 1) * width + s + 1] - log_prob;
                occupancy[lattice.index(t, s, v)] += label_post.exp();
            }
        }
    }
    Ok(FullSumResult { log_prob, occupancy })
}

/// Best single alignment (max-product version of `fullsum`).
pub fn viterbi_score(
    lattice: &JointLogLattice,
    target: &LabelSeq,
) -> Result<(f64, AlignmentPath), TopologyError> {
    lattice.check_target(target)?;
    let frames = lattice.frames();
    let n = target.len();
    if n > frames {
        return Err(TopologyError::Infeasible { frames, labels: n });
    }
    let blank = lattice.blank();
    let a = target.labels();
    let width = n + 1;
    let neg = f64::NEG_INFINITY;
    let mut score = vec![neg; (frames + 1) * width];
    // true when the best predecessor emitted a label
    let mut came_by_label = vec![false; (frames + 1) * width];
    score[0] = 0.0;
    for t in 0..frames {
        let lo = (n + t + 1).saturating_sub(frames);
        let hi = (t + 1).min(n);
        for s in lo..=hi {
            let stay = if s <= t { score[t * width + s] + lattice.get(t, s, blank) } else { neg };
            let emit = if s > 0 {
                score[t * width + s - 1] + lattice.get(t, s - 1, a[s - 1] as usize)
            } else {
                neg
            };
            let idx = (t + 1) * width + s;
            if emit > stay {
                score[idx] = emit;
                came_by_label[idx] = true;
            } else {
                score[idx] = stay;
            }
        }
    }
    let best = score[frames * width + n];
    let mut path = vec![None; frames];
    let mut s = n;
    for t in (0..frames).rev() {
        if came_by_label[(t + 1) * width + s] {
            path[t] = Some(a[s - 1]);
            s -= 1;
        }
    }
    Ok((best, AlignmentPath(path)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{log_softmax_inplace, logsumexp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lattice(rng: &mut ChaCha8Rng, frames: usize, target_len: usize, vocab: usize) -> JointLogLattice {
        JointLogLattice::from_fn(frames, target_len, vocab, |_, _| {
            let mut row: Vec<f64> = (0..=vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
            log_softmax_inplace(&mut row);
            row
        })
    }

    fn brute_force(lattice: &JointLogLattice, target: &LabelSeq) -> f64 {
        let scores: Vec<f64> = enumerate_paths(lattice.frames(), target)
            .unwrap()
            .iter()
            .map(|p| path_log_prob(lattice, p))
            .collect();
        logsumexp(&scores)
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&AlignmentPath(vec![None, None, None])), LabelSeq(vec![]));
        assert_eq!(collapse(&AlignmentPath(vec![Some(0), Some(1), Some(2)])), LabelSeq(vec![0, 1, 2]));
        assert_eq!(collapse(&AlignmentPath(vec![Some(0), None, Some(1), None])), LabelSeq(vec![0, 1]));
    }

    #[test]
    fn count_paths_examples() {
        assert_eq!(count_paths(3, 1).unwrap(), 3);
        assert_eq!(count_paths(7, 0).unwrap(), 1);
        assert_eq!(count_paths(5, 2).unwrap(), 10);
        assert!(matches!(count_paths(2, 3), Err(TopologyError::InvalidArguments(_))));
    }

    #[test]
    fn enumerate_small_cases() {
        let paths = enumerate_paths(2, &LabelSeq(vec![4])).unwrap();
        assert_eq!(paths, vec![AlignmentPath(vec![Some(4), None]), AlignmentPath(vec![None, Some(4)])]);
        assert_eq!(enumerate_paths(2, &LabelSeq(vec![])).unwrap(), vec![AlignmentPath(vec![None, None])]);
        let four = enumerate_paths(4, &LabelSeq(vec![1, 2])).unwrap();
        assert_eq!(four.len() as u128, count_paths(4, 2).unwrap());
        assert_eq!(four.len(), 6);
        for p in &four {
            assert_eq!(collapse(p), LabelSeq(vec![1, 2]));
        }
    }

    #[test]
    fn enumeration_guard() {
        let target = LabelSeq(vec![0; 20]);
        assert!(matches!(enumerate_paths(40, &target), Err(TopologyError::GuardExceeded { .. })));
    }

    #[test]
    fn single_forced_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lat = random_lattice(&mut rng, 2, 2, 3);
        let target = LabelSeq(vec![2, 0]);
        let res = fullsum(&lat, &target).unwrap();
        let expected = lat.get(0, 0, 2) + lat.get(1, 1, 0);
        assert!((res.log_prob - expected).abs() < 1e-12);
        let (v, path) = viterbi_score(&lat, &target).unwrap();
        assert_eq!(path, AlignmentPath(vec![Some(2), Some(0)]));
        assert!((v - res.log_prob).abs() < 1e-12);
    }

    #[test]
    fn all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lat = random_lattice(&mut rng, 3, 0, 2);
        let res = fullsum(&lat, &LabelSeq(vec![])).unwrap();
        let expected: f64 = (0..3).map(|t| lat.get(t, 0, 2)).sum();
        assert!((res.log_prob - expected).abs() < 1e-12);
    }

    #[test]
    fn seeded_t4_s2_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let lat = random_lattice(&mut rng, 4, 2, 3);
        let target = LabelSeq(vec![1, 0]);
        let res = fullsum(&lat, &target).unwrap();
        assert!((res.log_prob - brute_force(&lat, &target)).abs() < 1e-9);

        let (best, path) = viterbi_score(&lat, &target).unwrap();
        let oracle = enumerate_paths(4, &target)
            .unwrap()
            .into_iter()
            .map(|p| (path_log_prob(&lat, &p), p))
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .unwrap();
        assert_eq!(path, oracle.1);
        assert!((best - oracle.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_lattice_viterbi_finds_the_path() {
        let target = LabelSeq(vec![0, 1]);
        let want = AlignmentPath(vec![None, Some(0), None, Some(1)]);
        let s_of_t = want.positions();
        let lat = JointLogLattice::from_fn(4, 2, 2, |t, s| {
            let mut row = vec![f64::NEG_INFINITY; 3];
            if s == s_of_t[t] {
                let v = want.frames()[t].map_or(2, |l| l as usize);
                row[v] = 0.0;
            } else {
                row[2] = 0.0;
            }
            row
        });
        let (score, path) = viterbi_score(&lat, &target).unwrap();
        assert_eq!(path, want);
        assert_eq!(score, 0.0);
        let fs = fullsum(&lat, &target).unwrap();
        assert_eq!(fs.log_prob, 0.0);
    }

    #[test]
    fn infeasible_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = random_lattice(&mut rng, 2, 3, 4);
        let target = LabelSeq(vec![0, 1, 2]);
        let res = fullsum(&lat, &target).unwrap();
        assert_eq!(res.log_prob, f64::NEG_INFINITY);
        assert!(res.occupancy.is_empty());
        assert!(matches!(viterbi_score(&lat, &target), Err(TopologyError::Infeasible { .. })));
    }

    #[test]
    fn occupancy_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut lat = random_lattice(&mut rng, 5, 3, 3);
        let target = LabelSeq(vec![2, 2, 0]);
        let res = fullsum(&lat, &target).unwrap();
        let step = 1e-5;
        for i in 0..lat.values().len() {
            let orig = lat.values()[i];
            lat.values_mut()[i] = orig + step;
            let up = fullsum(&lat, &target).unwrap().log_prob;
            lat.values_mut()[i] = orig - step;
            let down = fullsum(&lat, &target).unwrap().log_prob;
            lat.values_mut()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let an = res.occupancy[i];
            let err = (fd - an).abs();
            assert!(err <= 1e-4 * fd.abs().max(an.abs()) || err <= 1e-8, "entry {i}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lat = random_lattice(&mut rng, 3, 1, 2);
        assert!(matches!(
            fullsum(&lat, &LabelSeq(vec![2])),
            Err(TopologyError::LabelOutOfRange { .. })
        ));
    }
}
