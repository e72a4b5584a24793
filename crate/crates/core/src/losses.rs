//! Stage-1 Viterbi training losses (smoothed frame CE, boost loss, focal
//! encoder auxiliary losses, chunking) and the stage-2 full-sum loss.

use log::warn;
use thiserror::Error;

use crate::model::{AuxHead, ForwardCache, Gradients, Mode, Model, ModelError};
use crate::numeric::Matrix;
use crate::topology::{collapse, fullsum, AlignmentPath, LabelSeq, TopologyError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("alignment has {alignment} frames but the lattice rows number {rows}")]
    LengthMismatch { alignment: usize, rows: usize },
    #[error("invalid chunking: {0}")]
    Chunking(String),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub label_smooth: f64,
    /// Scale of the final-layer encoder CE.
    pub enc_scale: f64,
    pub boost_scale: f64,
    pub focal_gamma: f64,
    pub middle_scale: f64,
    /// Full-sum stabilizer weight used in stage 3.
    pub fs_aux_scale: f64,
    pub clip_norm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            label_smooth: 0.2,
            enc_scale: 1.0,
            boost_scale: 5.0,
            focal_gamma: 1.0,
            middle_scale: 0.3,
            fs_aux_scale: 0.05,
            clip_norm: 20.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..1.0).contains(&self.label_smooth) {
            return Err(LossError::Weights(format!("label_smooth {} not in [0, 1)", self.label_smooth)));
        }
        if self.clip_norm <= 0.0 {
            return Err(LossError::Weights("clip_norm must be positive".into()));
        }
        let scales = [self.enc_scale, self.boost_scale, self.focal_gamma, self.middle_scale, self.fs_aux_scale];
        if scales.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(LossError::Weights("scales must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn check_rows(logp: &Matrix, alignment: &AlignmentPath) -> Result<(), LossError> {
    if logp.rows() != alignment.len() {
        return Err(LossError::LengthMismatch { alignment: alignment.len(), rows: logp.rows() });
    }
    Ok(())
}

fn target_index(y: Option<u32>, blank: usize) -> usize {
    y.map_or(blank, |l| l as usize)
}

/// Label-smoothed frame CE along a fixed alignment.
///
/// `logp` row `t` is the output distribution at `(t, s(t))`. The smoothing
/// distribution is uniform over all `V+1` outputs. Returns the summed loss and
/// its gradient w.r.t. `logp`.
pub fn viterbi_ce_loss(logp: &Matrix, alignment: &AlignmentPath, smoothing: f64) -> Result<(f64, Matrix), LossError> {
    check_rows(logp, alignment)?;
    let width = logp.cols();
    let blank = width - 1;
    let uniform = smoothing / width as f64;
    let mut grad = Matrix::zeros(logp.rows(), width);
    let mut loss = 0.0;
    for (t, &y) in alignment.frames().iter().enumerate() {
        let row = logp.row(t);
        let target = target_index(y, blank);
        loss += (1.0 - smoothing) * -row[target];
        if uniform > 0.0 {
            loss += uniform * row.iter().map(|v| -v).sum::<f64>();
        }
        let g = grad.row_mut(t);
        g.fill(-uniform);
        g[target] -= 1.0 - smoothing;
    }
    Ok((loss, grad))
}

/// Un-smoothed CE on the label frames only, scaled by `scale`.
pub fn boost_loss(logp: &Matrix, alignment: &AlignmentPath, scale: f64) -> Result<(f64, Matrix), LossError> {
    check_rows(logp, alignment)?;
    let mut grad = Matrix::zeros(logp.rows(), logp.cols());
    let mut loss = 0.0;
    for (t, y) in alignment.frames().iter().enumerate() {
        if let Some(l) = y {
            loss -= scale * logp.get(t, *l as usize);
            grad.set(t, *l as usize, -scale);
        }
    }
    Ok((loss, grad))
}

/// Focal-weighted frame CE `Σ_t (1 - p_t)^γ · (-log p_t)` times `scale`.
pub fn focal_ce_loss(logp: &Matrix, alignment: &AlignmentPath, gamma: f64, scale: f64) -> Result<(f64, Matrix), LossError> {
    check_rows(logp, alignment)?;
    let blank = logp.cols() - 1;
    let mut grad = Matrix::zeros(logp.rows(), logp.cols());
    let mut loss = 0.0;
    for (t, &y) in alignment.frames().iter().enumerate() {
        let target = target_index(y, blank);
        let lp = logp.get(t, target);
        let p = lp.exp();
        let q = 1.0 - p;
        loss += scale * q.powf(gamma) * -lp;
        // d/dlogp of -(1-p)^γ log p = γ p (1-p)^(γ-1) log p - (1-p)^γ
        let d = if gamma == 0.0 {
            -1.0
        } else if q <= 0.0 {
            0.0
        } else {
            gamma * p * q.powf(gamma - 1.0) * lp - q.powf(gamma)
        };
        grad.set(t, target, scale * d);
    }
    Ok((loss, grad))
}

/// Auxiliary encoder CE on one head of a cached forward pass. Writes the
/// gradient into the cache and returns the loss.
pub fn encoder_aux_loss(
    model: &Model,
    cache: &mut ForwardCache,
    alignment: &AlignmentPath,
    head: AuxHead,
    gamma: f64,
    scale: f64,
) -> Result<f64, LossError> {
    let h = model.forward_aux(cache, head)?;
    let tr = cache.aux_mut(h);
    let (loss, grad) = focal_ce_loss(tr.logp(), alignment, gamma, scale)?;
    *tr.grad_mut() = grad;
    Ok(loss)
}

/// A training window over the (subsampled) frame axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub alignment: AlignmentPath,
    /// Up to `k` labels of the full alignment emitted before `start`.
    pub seed_history: Vec<u32>,
}

/// Splits `alignment` into windows of `window_len` frames with 50% overlap.
/// The last window may be shorter; windows stop once one reaches the end.
pub fn chunk_utterance(alignment: &AlignmentPath, window_len: usize, context_k: usize) -> Result<Vec<Chunk>, LossError> {
    if window_len < 2 {
        return Err(LossError::Chunking(format!("window length {window_len} is below 2")));
    }
    if window_len < 2 * context_k {
        return Err(LossError::Chunking(format!(
            "window length {window_len} is below twice the label context {context_k}"
        )));
    }
    let frames = alignment.len();
    let stride = window_len / 2;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window_len).min(frames);
        let prefix = collapse(&AlignmentPath(alignment.frames()[..start].to_vec()));
        let seed = prefix.labels()[prefix.len().saturating_sub(context_k)..].to_vec();
        out.push(Chunk { start, end, alignment: AlignmentPath(alignment.frames()[start..end].to_vec()), seed_history: seed });
        if end >= frames {
            break;
        }
        start += stride;
    }
    Ok(out)
}

/// Per-component stage-1 losses (already weighted).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stage1Breakdown {
    pub viterbi: f64,
    pub enc_final: f64,
    pub enc_middle: f64,
    pub boost: f64,
}

impl Stage1Breakdown {
    pub fn total(&self) -> f64 {
        self.viterbi + self.enc_final + self.enc_middle + self.boost
    }

    fn add(&mut self, o: &Stage1Breakdown) {
        self.viterbi += o.viterbi;
        self.enc_final += o.enc_final;
        self.enc_middle += o.enc_middle;
        self.boost += o.boost;
    }

    fn scale(&mut self, f: f64) {
        self.viterbi *= f;
        self.enc_final *= f;
        self.enc_middle *= f;
        self.boost *= f;
    }
}

/// Stage-1 loss for one segment whose alignment starts after `seed_history`.
/// Accumulates parameter gradients into `grads` when given.
pub fn stage1_segment(
    model: &Model,
    features: &Matrix,
    alignment: &AlignmentPath,
    seed_history: &[u32],
    weights: &LossWeights,
    mode: Mode,
    grads: Option<&mut Gradients>,
) -> Result<Stage1Breakdown, LossError> {
    let mut cache = ForwardCache::new();
    model.forward_encoder(&mut cache, features, mode)?;
    let frames = cache.encoder_output().expect("just computed").frames();
    if frames != alignment.len() {
        return Err(LossError::LengthMismatch { alignment: alignment.len(), rows: frames });
    }
    let mut history = seed_history.to_vec();
    let offset = history.len();
    history.extend(collapse(alignment).labels());
    let target = LabelSeq(history);
    let cells: Vec<(usize, usize)> = alignment.positions().into_iter().enumerate().map(|(t, s)| (t, s + offset)).collect();
    let jh = model.forward_cells(&mut cache, &target, cells)?;

    let rows = {
        let tr = cache.joint(jh);
        let width = model.config().vocab + 1;
        Matrix::from_vec(alignment.len(), width, (0..alignment.len()).flat_map(|c| tr.logp(c).to_vec()).collect())
    };
    let (viterbi, g_ce) = viterbi_ce_loss(&rows, alignment, weights.label_smooth)?;
    let (boost, g_boost) = boost_loss(&rows, alignment, weights.boost_scale)?;
    {
        let g = cache.joint_mut(jh).grad_mut();
        for ((dst, a), b) in g.iter_mut().zip(g_ce.as_slice()).zip(g_boost.as_slice()) {
            *dst = a + b;
        }
    }
    let mut out = Stage1Breakdown { viterbi, boost, ..Default::default() };
    if weights.enc_scale > 0.0 {
        out.enc_final = encoder_aux_loss(model, &mut cache, alignment, AuxHead::Final, weights.focal_gamma, weights.enc_scale)?;
    }
    if weights.middle_scale > 0.0 {
        out.enc_middle =
            encoder_aux_loss(model, &mut cache, alignment, AuxHead::Middle, weights.focal_gamma, weights.middle_scale)?;
    }
    if let Some(grads) = grads {
        model.backward_and_accumulate(&cache, grads)?;
    }
    Ok(out)
}

/// One stage-1 training utterance: subsampled-rate alignment plus features.
pub struct Stage1Example<'a> {
    pub features: &'a Matrix,
    pub alignment: Option<&'a AlignmentPath>,
}

/// Optional chunked training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chunking {
    pub window_len: usize,
}

#[derive(Debug, Clone)]
pub struct Stage1Batch {
    /// Mean over utterances.
    pub loss: Stage1Breakdown,
    pub grads: Gradients,
    pub grad_norm: f64,
    pub used: usize,
    pub skipped: usize,
}

fn slice_rows(m: &Matrix, start: usize, end: usize) -> Matrix {
    let end = end.min(m.rows());
    Matrix::from_vec(end - start, m.cols(), m.as_slice()[start * m.cols()..end * m.cols()].to_vec())
}

/// `L_viterbi + L_enc + α·L_boost` averaged over the batch, with globally
/// norm-clipped gradients. Utterances without an alignment are skipped.
pub fn stage1_total(
    model: &Model,
    batch: &[Stage1Example<'_>],
    weights: &LossWeights,
    chunking: Option<Chunking>,
    dropout_seed: Option<u64>,
) -> Result<Stage1Batch, LossError> {
    weights.validate()?;
    let mut grads = model.params().zero_grads();
    let mut total = Stage1Breakdown::default();
    let mut used = 0;
    let mut skipped = 0;
    let sub = model.config().subsample;
    for (i, ex) in batch.iter().enumerate() {
        let Some(alignment) = ex.alignment else {
            skipped += 1;
            continue;
        };
        let mode = |j: usize| match dropout_seed {
            Some(seed) => Mode::Train { dropout_seed: seed.wrapping_add(((i as u64) << 16) + j as u64) },
            None => Mode::Eval,
        };
        match chunking {
            None => {
                let b = stage1_segment(model, ex.features, alignment, &[], weights, mode(0), Some(&mut grads))?;
                total.add(&b);
            }
            Some(c) => {
                for (j, chunk) in chunk_utterance(alignment, c.window_len, model.config().context_k)?.iter().enumerate() {
                    let feats = slice_rows(ex.features, chunk.start * sub, chunk.end * sub);
                    let b = stage1_segment(model, &feats, &chunk.alignment, &chunk.seed_history, weights, mode(j), Some(&mut grads))?;
                    total.add(&b);
                }
            }
        }
        used += 1;
    }
    if skipped > 0 {
        warn!("stage-1 batch skipped {skipped} utterances without alignment");
    }
    if used > 0 {
        let inv = 1.0 / used as f64;
        grads.scale(inv);
        total.scale(inv);
    }
    let grad_norm = grads.clip_global_norm(weights.clip_norm);
    Ok(Stage1Batch { loss: total, grads, grad_norm, used, skipped })
}

/// Full-sum loss of one utterance; `None` when the target cannot be aligned.
pub fn fs_utterance(
    model: &Model,
    features: &Matrix,
    target: &LabelSeq,
    mode: Mode,
    grads: Option<&mut Gradients>,
) -> Result<Option<f64>, LossError> {
    let mut cache = ForwardCache::new();
    model.forward_encoder(&mut cache, features, mode)?;
    let jh = model.forward_lattice(&mut cache, target)?;
    let lattice = cache.joint(jh).lattice().expect("full lattice");
    let res = fullsum(&lattice, target)?;
    if !res.is_feasible() {
        return Ok(None);
    }
    if let Some(grads) = grads {
        for (g, o) in cache.joint_mut(jh).grad_mut().iter_mut().zip(&res.occupancy) {
            *g = -o;
        }
        model.backward_and_accumulate(&cache, grads)?;
    }
    Ok(Some(-res.log_prob))
}

/// Summed full-sum statistics; merge micro-batches before calling [`FsAccumulator::mean`].
#[derive(Debug, Clone)]
pub struct FsAccumulator {
    pub loss_sum: f64,
    pub count: usize,
    pub skipped: usize,
    pub grads: Gradients,
}

impl FsAccumulator {
    pub fn new(model: &Model) -> Self {
        Self { loss_sum: 0.0, count: 0, skipped: 0, grads: model.params().zero_grads() }
    }

    pub fn merge(&mut self, other: &FsAccumulator) {
        self.loss_sum += other.loss_sum;
        self.count += other.count;
        self.skipped += other.skipped;
        self.grads.add_assign(&other.grads);
    }

    /// Mean loss and mean gradient over all accumulated utterances.
    pub fn mean(&self) -> (f64, Gradients) {
        let mut g = self.grads.clone();
        if self.count == 0 {
            return (0.0, g);
        }
        let inv = 1.0 / self.count as f64;
        g.scale(inv);
        (self.loss_sum * inv, g)
    }
}

/// `-log P(a|X)` over a micro-batch of `(features, target)` pairs. Infeasible
/// utterances are skipped and counted.
pub fn stage2_fs_loss(
    model: &Model,
    batch: &[(&Matrix, &LabelSeq)],
    dropout_seed: Option<u64>,
) -> Result<FsAccumulator, LossError> {
    let mut acc = FsAccumulator::new(model);
    for (i, (features, target)) in batch.iter().enumerate() {
        let mode = dropout_seed.map_or(Mode::Eval, |s| Mode::Train { dropout_seed: s.wrapping_add(i as u64) });
        match fs_utterance(model, features, target, mode, Some(&mut acc.grads))? {
            Some(loss) => {
                acc.loss_sum += loss;
                acc.count += 1;
            }
            None => acc.skipped += 1,
        }
    }
    if acc.skipped > 0 {
        warn!("full-sum batch skipped {} infeasible utterances", acc.skipped);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests;
