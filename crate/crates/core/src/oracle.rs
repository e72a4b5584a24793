//! Brute-force reference computations used to check the dynamic programs and
//! analytic gradients. Nothing here shares code with the recursions it checks.

use crate::ctc::{ctc_collapse, CtcLogits};
use crate::model::{Gradients, Model};
use crate::numeric::logsumexp;
use crate::topology::{enumerate_paths, path_log_prob, JointLogLattice, LabelSeq, TopologyError};

/// Largest `(V+1)^T` the CTC enumerator will walk.
pub const CTC_ENUMERATION_GUARD: u64 = 1_000_000;

/// Log-sum over explicitly enumerated transducer alignments.
pub fn transducer_path_sum(lattice: &JointLogLattice, target: &LabelSeq) -> Result<f64, TopologyError> {
    if target.len() > lattice.frames() {
        return Ok(f64::NEG_INFINITY);
    }
    let scores: Vec<f64> = enumerate_paths(lattice.frames(), target)?
        .iter()
        .map(|p| path_log_prob(lattice, p))
        .collect();
    Ok(logsumexp(&scores))
}

fn for_each_ctc_sequence(
    logits: &CtcLogits,
    target: &LabelSeq,
    mut visit: impl FnMut(&[Option<u32>], f64),
) -> Option<()> {
    let frames = logits.frames();
    let width = logits.vocab() + 1;
    let total = (width as u64).checked_pow(frames as u32)?;
    if total > CTC_ENUMERATION_GUARD {
        return None;
    }
    let blank = logits.blank();
    let mut digits = vec![0usize; frames];
    let mut seq = vec![None; frames];
    for _ in 0..total {
        let mut score = 0.0;
        for (t, &d) in digits.iter().enumerate() {
            seq[t] = if d == blank { None } else { Some(d as u32) };
            score += logits.0.get(t, d);
        }
        if ctc_collapse(&seq) == *target {
            visit(&seq, score);
        }
        for d in digits.iter_mut() {
            *d += 1;
            if *d < width {
                break;
            }
            *d = 0;
        }
    }
    Some(())
}

/// Log-sum over every frame sequence whose CTC collapse equals `target`.
/// `None` when the enumeration guard is exceeded.
pub fn ctc_path_sum(logits: &CtcLogits, target: &LabelSeq) -> Option<f64> {
    let mut scores = Vec::new();
    for_each_ctc_sequence(logits, target, |_, s| scores.push(s))?;
    Some(logsumexp(&scores))
}

/// Highest-scoring legal CTC frame sequence.
pub fn ctc_best_path(logits: &CtcLogits, target: &LabelSeq) -> Option<(f64, Vec<Option<u32>>)> {
    let mut best: Option<(f64, Vec<Option<u32>>)> = None;
    for_each_ctc_sequence(logits, target, |seq, s| {
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, seq.to_vec()));
        }
    })?;
    best
}

/// Agreement test used by every gradient check: relative error within `rel`,
/// or absolute error within `abs_floor`.
pub fn grads_agree(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= abs_floor || err <= rel * analytic.abs().max(numeric.abs())
}

/// Summary of a finite-difference sweep.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest relative error among entries whose absolute error exceeds the floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn record(&mut self, analytic: f64, numeric: f64, rel: f64, abs_floor: f64) {
        self.checked += 1;
        let err = (analytic - numeric).abs();
        self.max_abs_error = self.max_abs_error.max(err);
        if err > abs_floor {
            let scale = analytic.abs().max(numeric.abs());
            let r = if scale > 0.0 { err / scale } else { f64::INFINITY };
            self.max_rel_error = self.max_rel_error.max(r);
        }
        if !grads_agree(analytic, numeric, rel, abs_floor) {
            self.failures += 1;
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
    }
}

/// Central finite difference of `f` at each coordinate of `x`, compared against `analytic`.
pub fn check_gradient(
    x: &mut [f64],
    analytic: &[f64],
    step: f64,
    rel: f64,
    abs_floor: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len());
    let mut report = GradCheckReport::default();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(x);
        x[i] = orig - step;
        let down = f(x);
        x[i] = orig;
        report.record(analytic[i], (up - down) / (2.0 * step), rel, abs_floor);
    }
    report
}

/// Finite-difference sweep over every scalar parameter of `model`.
/// `loss` is evaluated on perturbed copies and must be deterministic.
pub fn check_model_gradient(
    model: &Model,
    analytic: &Gradients,
    step: f64,
    rel: f64,
    abs_floor: f64,
    mut loss: impl FnMut(&Model) -> f64,
) -> GradCheckReport {
    let mut probe = model.clone();
    let mut report = GradCheckReport::default();
    for idx in 0..model.params().len() {
        let mut x = probe.params().value(idx).to_vec();
        let r = check_gradient(&mut x, analytic.get(idx), step, rel, abs_floor, |vals| {
            probe.params_mut().value_mut(idx).copy_from_slice(vals);
            loss(&probe)
        });
        probe.params_mut().value_mut(idx).copy_from_slice(model.params().value(idx));
        report.merge(&r);
    }
    report
}
