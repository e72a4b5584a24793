//! Finite-difference gradient sweeps and brute-force oracle comparisons on
//! seeded toy instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PipelineError;
use crate::ctc::{ctc_fullsum, CtcLogits};
use crate::decoder::{beam_decode, exhaustive_decode, DecodeConfig, WMapping};
use crate::lm::NgramModel;
use crate::losses::{stage1_total, stage2_fs_loss, LossWeights, Stage1Example};
use crate::mbr::{mbr_loss, stage3_total, MbrScales, NBestEntry, NBestList};
use crate::model::{Model, ModelConfig};
use crate::numeric::{log_softmax_inplace, Matrix};
use crate::oracle::{check_model_gradient, ctc_path_sum, transducer_path_sum, GradCheckReport};
use crate::topology::{fullsum, AlignmentPath, JointLogLattice, LabelSeq};

pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_FLOOR: f64 = 1e-8;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradcheckSummary {
    pub params: usize,
    pub losses: Vec<(&'static str, GradCheckReport)>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.losses.iter().all(|(_, r)| r.passed())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.losses.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max)
    }
}

fn toy_model(seed: u64) -> Result<Model, PipelineError> {
    let cfg = ModelConfig {
        vocab: 3,
        context_k: 1,
        feat_dim: 3,
        enc_layers: 2,
        enc_dim: 5,
        enc_window: 1,
        pred_dim: 4,
        joint_dim: 6,
        subsample: 1,
        dropout: 0.1,
        aux_middle_layer: 0,
    };
    Ok(Model::new(cfg, seed)?)
}

fn random_features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> Matrix {
    Matrix::from_vec(frames, dim, (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_alignment(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> AlignmentPath {
    AlignmentPath((0..frames).map(|_| rng.random_bool(0.5).then(|| rng.random_range(0..vocab as u32))).collect())
}

/// Central-difference sweep of the stage-1, stage-2 and stage-3 losses over
/// every parameter of a seeded toy model (dropout active, fixed seed).
pub fn run_gradcheck(seed: u64) -> Result<GradcheckSummary, PipelineError> {
    let model = toy_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let feats: Vec<Matrix> = [5, 4, 6].iter().map(|&t| random_features(&mut rng, t, 3)).collect();
    let dropout_seed = Some(seed.wrapping_add(17));
    let mut losses = Vec::new();

    // clipping is disabled so the analytic gradient is the true one
    let weights = LossWeights { clip_norm: 1e12, ..LossWeights::default() };
    let aligns: Vec<AlignmentPath> = feats.iter().map(|f| random_alignment(&mut rng, f.rows(), 3)).collect();
    let batch: Vec<Stage1Example> =
        feats.iter().zip(&aligns).map(|(f, a)| Stage1Example { features: f, alignment: Some(a) }).collect();
    let s1 = stage1_total(&model, &batch, &weights, None, dropout_seed)?;
    let r1 = check_model_gradient(&model, &s1.grads, FD_STEP, GRAD_REL_TOL, GRAD_ABS_FLOOR, |m| {
        stage1_total(m, &batch, &weights, None, dropout_seed).map_or(f64::NAN, |b| b.loss.total())
    });
    losses.push(("stage1", r1));

    let fs_model = model.without_aux_heads();
    let targets = [LabelSeq(vec![0, 2]), LabelSeq(vec![1]), LabelSeq(vec![2, 2, 1])];
    let pairs: Vec<(&Matrix, &LabelSeq)> = feats.iter().zip(&targets).collect();
    let (_, g2) = stage2_fs_loss(&fs_model, &pairs, dropout_seed)?.mean();
    let r2 = check_model_gradient(&fs_model, &g2, FD_STEP, GRAD_REL_TOL, GRAD_ABS_FLOOR, |m| {
        stage2_fs_loss(m, &pairs, dropout_seed).map_or(f64::NAN, |a| a.mean().0)
    });
    losses.push(("stage2", r2));

    let mut list = NBestList {
        id: "toy".into(),
        entries: [vec![0, 2], vec![0], vec![1, 2, 2], vec![2]]
            .into_iter()
            .map(|l| NBestEntry { labels: LabelSeq(l), model_logprob: 0.0, lm_logprob: rng.random_range(-4.0..-0.5), risk: 0.0 })
            .collect(),
        reference: 0,
    };
    list.compute_risks(&WMapping::Identity);
    let scales = MbrScales::new(0.6, 0.05);
    let lists = [(&feats[2], &list)];
    let s3 = stage3_total(&fs_model, &lists, &scales, None, dropout_seed)?;
    let r3 = check_model_gradient(&fs_model, &s3.grads, FD_STEP, GRAD_REL_TOL, GRAD_ABS_FLOOR, |m| {
        stage3_total(m, &lists, &scales, None, dropout_seed).map_or(f64::NAN, |b| b.loss)
    });
    losses.push(("stage3", r3));

    Ok(GradcheckSummary { params: model.params().num_scalars(), losses })
}

#[derive(Debug, Clone, Default)]
pub struct OracleSummary {
    pub fullsum_instances: usize,
    pub fullsum_max_err: f64,
    pub ctc_instances: usize,
    pub ctc_max_err: f64,
    pub mbr_lists: usize,
    pub mbr_grad_sum_max: f64,
    pub mbr_shift_max: f64,
    pub mbr_bound_violations: usize,
    pub decoder_instances: usize,
    pub decoder_mismatches: usize,
}

impl OracleSummary {
    pub fn fullsum_ok(&self) -> bool {
        self.fullsum_max_err <= 1e-9
    }

    pub fn ctc_ok(&self) -> bool {
        self.ctc_max_err <= 1e-9
    }

    pub fn mbr_ok(&self) -> bool {
        self.mbr_grad_sum_max <= 1e-12 && self.mbr_shift_max <= 1e-10 && self.mbr_bound_violations == 0
    }

    pub fn decoder_ok(&self) -> bool {
        self.decoder_mismatches == 0
    }

    pub fn passed(&self) -> bool {
        self.fullsum_ok() && self.ctc_ok() && self.mbr_ok() && self.decoder_ok()
    }
}

/// Error between log-domain values, treating matching infinities as equal.
fn log_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

fn random_logprobs(rng: &mut ChaCha8Rng, width: usize, spread: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..width).map(|_| rng.random_range(-spread..spread)).collect();
    log_softmax_inplace(&mut row);
    row
}

fn random_target(rng: &mut ChaCha8Rng, max_len: usize, vocab: usize) -> LabelSeq {
    let len = rng.random_range(0..=max_len);
    LabelSeq((0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
}

/// Forward–backward full-sum against path enumeration (T ≤ 6, S ≤ 4, V ≤ 5).
pub fn fullsum_oracle(seed: u64, instances: usize) -> Result<(usize, f64), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..instances {
        let frames = rng.random_range(1..=6);
        let vocab = rng.random_range(1..=5);
        let target = random_target(&mut rng, 4, vocab);
        let lattice = JointLogLattice::from_fn(frames, target.len(), vocab, |_, _| random_logprobs(&mut rng, vocab + 1, 3.0));
        let fast = fullsum(&lattice, &target)?.log_prob;
        let slow = transducer_path_sum(&lattice, &target)?;
        max_err = max_err.max(log_err(fast, slow));
    }
    Ok((instances, max_err))
}

/// CTC forward against its path enumerator under the same size limits.
pub fn ctc_oracle(seed: u64, instances: usize) -> Result<(usize, f64), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..instances {
        let frames = rng.random_range(1..=6);
        let vocab = rng.random_range(1..=5);
        let target = random_target(&mut rng, 4, vocab);
        let rows: Vec<Vec<f64>> = (0..frames).map(|_| random_logprobs(&mut rng, vocab + 1, 2.0)).collect();
        let logits = CtcLogits(Matrix::from_rows(&rows));
        let (fast, _) = ctc_fullsum(&logits, &target)?;
        let slow = ctc_path_sum(&logits, &target).unwrap_or(f64::NEG_INFINITY);
        max_err = max_err.max(log_err(fast, slow));
    }
    Ok((instances, max_err))
}

/// Gradient-sum, shift-invariance and risk-bound checks on random N-best lists.
/// Returns `(max |Σ grad|, max shift deviation, bound violations)`.
pub fn mbr_algebra_oracle(seed: u64, lists: usize) -> Result<(f64, f64, usize), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum_max, mut shift_max, mut violations) = (0.0f64, 0.0f64, 0);
    for _ in 0..lists {
        let n = rng.random_range(1..=8);
        let entries: Vec<NBestEntry> = (0..n)
            .map(|i| NBestEntry {
                labels: LabelSeq(vec![i as u32]),
                model_logprob: rng.random_range(-30.0..0.0),
                lm_logprob: rng.random_range(-20.0..0.0),
                risk: rng.random_range(0..6) as f64,
            })
            .collect();
        let list = NBestList { id: "r".into(), entries, reference: 0 };
        let scales = MbrScales::new(rng.random_range(0.1..1.5), 0.05);
        let (loss, grad) = mbr_loss(&list, &scales)?;
        sum_max = sum_max.max(grad.iter().sum::<f64>().abs());
        let lo = list.entries.iter().map(|e| e.risk).fold(f64::INFINITY, f64::min);
        let hi = list.entries.iter().map(|e| e.risk).fold(f64::NEG_INFINITY, f64::max);
        if loss < lo - 1e-12 || loss > hi + 1e-12 {
            violations += 1;
        }
        let c = rng.random_range(-50.0..50.0);
        let mut shifted = list.clone();
        shifted.entries.iter_mut().for_each(|e| e.model_logprob += c);
        shift_max = shift_max.max((mbr_loss(&shifted, &scales)?.0 - loss).abs());
    }
    Ok((sum_max, shift_max, violations))
}

fn peaky_model(seed: u64, vocab: usize) -> Result<Model, PipelineError> {
    let cfg = ModelConfig {
        vocab,
        context_k: 1,
        feat_dim: 2,
        enc_layers: 1,
        enc_dim: 4,
        enc_window: 1,
        pred_dim: 3,
        joint_dim: 4,
        subsample: 1,
        dropout: 0.0,
        aux_middle_layer: 0,
    };
    let mut model = Model::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in model.params_mut().params_mut() {
        for v in &mut p.value {
            *v = rng.random_range(-1.5..1.5);
        }
    }
    Ok(model)
}

/// Full-width beam search against exhaustive MAP decoding (T ≤ 3, V ≤ 3)
/// at every combination of λ1 ∈ {0, 0.5} and λ2 ∈ {0, 0.2}.
/// Returns the number of instances whose 1-best differs.
pub fn decoder_oracle(seed: u64, instances: usize) -> Result<usize, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for i in 0..instances {
        let vocab = rng.random_range(1..=3);
        let frames = rng.random_range(1..=3);
        let model = peaky_model(seed.wrapping_add(i as u64), vocab)?;
        let corpus: Vec<Vec<String>> = (0..30)
            .map(|_| (0..rng.random_range(0..4)).map(|_| rng.random_range(0..vocab).to_string()).collect())
            .collect();
        let lm = NgramModel::train(&corpus, 2, 0.4, &[])?;
        let feats = random_features(&mut rng, frames, 2);
        let mut differs = false;
        for (lambda1, lambda2) in [(0.0, 0.0), (0.0, 0.2), (0.5, 0.0), (0.5, 0.2)] {
            let cfg = DecodeConfig { lambda1, lambda2, beam_size: 1000, n_best: 1, ..DecodeConfig::default() };
            let beam = beam_decode(&model, Some(&lm), &feats, &cfg)?;
            let exact = exhaustive_decode(&model, Some(&lm), &feats, &cfg)?;
            differs |= beam[0].labels != exact.labels;
        }
        mismatches += usize::from(differs);
    }
    Ok(mismatches)
}

/// All four oracle protocols at their acceptance sizes.
pub fn run_oracle_check(seed: u64) -> Result<OracleSummary, PipelineError> {
    let (fullsum_instances, fullsum_max_err) = fullsum_oracle(seed, 200)?;
    let (ctc_instances, ctc_max_err) = ctc_oracle(seed.wrapping_add(1), 200)?;
    let (mbr_grad_sum_max, mbr_shift_max, mbr_bound_violations) = mbr_algebra_oracle(seed.wrapping_add(2), 1000)?;
    let decoder_mismatches = decoder_oracle(seed.wrapping_add(3), 100)?;
    Ok(OracleSummary {
        fullsum_instances,
        fullsum_max_err,
        ctc_instances,
        ctc_max_err,
        mbr_lists: 1000,
        mbr_grad_sum_max,
        mbr_shift_max,
        mbr_bound_violations,
        decoder_instances: 100,
        decoder_mismatches,
    })
}
