use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;
use crate::numeric::log_softmax_inplace;
use crate::oracle::check_model_gradient;

fn tiny_model(seed: u64) -> Model {
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
    Model::new(cfg, seed).unwrap()
}

fn feats(rng: &mut ChaCha8Rng, frames: usize) -> Matrix {
    Matrix::from_vec(frames, 3, (0..frames * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_rows(rng: &mut ChaCha8Rng, frames: usize, width: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| {
            let mut r: Vec<f64> = (0..width).map(|_| rng.random_range(-2.0..2.0)).collect();
            log_softmax_inplace(&mut r);
            r
        })
        .collect();
    Matrix::from_rows(&rows)
}

fn path(v: &[i32]) -> AlignmentPath {
    AlignmentPath(v.iter().map(|&x| if x < 0 { None } else { Some(x as u32) }).collect())
}

#[test]
fn ce_perfect_predictions_without_smoothing() {
    let align = path(&[0, -1, 2]);
    let mut rows = Matrix::zeros(3, 4);
    for (t, y) in [0usize, 3, 2].iter().enumerate() {
        for v in 0..4 {
            rows.set(t, v, if v == *y { 0.0 } else { f64::NEG_INFINITY });
        }
    }
    let (loss, _) = viterbi_ce_loss(&rows, &align, 0.0).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn ce_uniform_predictions() {
    let align = path(&[1, -1, -1, 0]);
    let rows = Matrix::from_vec(4, 4, vec![(0.25f64).ln(); 16]);
    let (loss, _) = viterbi_ce_loss(&rows, &align, 0.2).unwrap();
    assert!((loss - 4.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn ce_seeded_matches_direct_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = random_rows(&mut rng, 3, 4);
    let align = path(&[2, -1, 0]);
    let (loss, grad) = viterbi_ce_loss(&rows, &align, 0.2).unwrap();
    let mut expected = 0.0;
    for (t, y) in [2usize, 3, 0].iter().enumerate() {
        let mut frame = 0.8 * -rows.get(t, *y);
        for v in 0..4 {
            frame += 0.2 / 4.0 * -rows.get(t, v);
        }
        expected += frame;
    }
    assert!((loss - expected).abs() < 1e-10);
    assert!((grad.get(1, 3) - (-0.8 - 0.05)).abs() < 1e-15);
    assert!((grad.get(1, 0) + 0.05).abs() < 1e-15);
}

#[test]
fn ce_length_mismatch() {
    let rows = Matrix::zeros(2, 4);
    assert!(matches!(viterbi_ce_loss(&rows, &path(&[0, 1, 2]), 0.2), Err(LossError::LengthMismatch { .. })));
}

#[test]
fn boost_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows = random_rows(&mut rng, 4, 4);
    let (zero, g0) = boost_loss(&rows, &path(&[-1, -1, -1, -1]), 5.0).unwrap();
    assert_eq!(zero, 0.0);
    assert!(g0.as_slice().iter().all(|&g| g == 0.0));

    let full = path(&[0, 1, 2, 0]);
    let (b, _) = boost_loss(&rows, &full, 5.0).unwrap();
    let (ce, _) = viterbi_ce_loss(&rows, &full, 0.0).unwrap();
    assert!((b - 5.0 * ce).abs() < 1e-12);

    let mixed = path(&[-1, 2, -1, 1]);
    let (b, g) = boost_loss(&rows, &mixed, 5.0).unwrap();
    let expected = 5.0 * (-rows.get(1, 2) - rows.get(3, 1));
    assert!((b - expected).abs() < 1e-12);
    for t in [0, 2] {
        assert!(g.row(t).iter().all(|&x| x == 0.0), "blank frame {t} must get no gradient");
    }
}

#[test]
fn focal_cases() {
    let one = Matrix::from_vec(1, 2, vec![0.0, f64::NEG_INFINITY]);
    let (l, g) = focal_ce_loss(&one, &path(&[0]), 1.0, 1.0).unwrap();
    assert_eq!(l, 0.0);
    assert_eq!(g.get(0, 0), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = random_rows(&mut rng, 3, 4);
    let align = path(&[1, -1, 2]);
    let (focal0, _) = focal_ce_loss(&rows, &align, 0.0, 1.0).unwrap();
    let (ce, _) = viterbi_ce_loss(&rows, &align, 0.0).unwrap();
    assert!((focal0 - ce).abs() < 1e-12);

    let half = Matrix::from_vec(1, 2, vec![0.5f64.ln(), 0.5f64.ln()]);
    let (l, _) = focal_ce_loss(&half, &path(&[0]), 1.0, 1.0).unwrap();
    assert!((l - 0.5 * 2f64.ln()).abs() < 1e-15);
}

#[test]
fn focal_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows = random_rows(&mut rng, 3, 4);
    let align = path(&[1, -1, 2]);
    for gamma in [0.0, 0.5, 1.0, 2.0] {
        let (_, g) = focal_ce_loss(&rows, &align, gamma, 0.7).unwrap();
        for i in 0..rows.as_slice().len() {
            let mut up = rows.clone();
            up.as_mut_slice()[i] += 1e-6;
            let mut dn = rows.clone();
            dn.as_mut_slice()[i] -= 1e-6;
            let fd = (focal_ce_loss(&up, &align, gamma, 0.7).unwrap().0 - focal_ce_loss(&dn, &align, gamma, 0.7).unwrap().0) / 2e-6;
            assert!((fd - g.as_slice()[i]).abs() < 1e-6, "gamma {gamma} entry {i}");
        }
    }
}

#[test]
fn chunk_examples() {
    let align = path(&[0, -1, 1, -1, 2, 0, -1, 1, -1, 2]);
    let chunks = chunk_utterance(&align, 4, 1).unwrap();
    let spans: Vec<(usize, usize)> = chunks.iter().map(|c| (c.start, c.end)).collect();
    assert_eq!(spans, vec![(0, 4), (2, 6), (4, 8), (6, 10)]);
    assert_eq!(chunks[0].seed_history, Vec::<u32>::new());
    assert_eq!(chunks[1].seed_history, vec![0]);
    assert_eq!(chunks[2].seed_history, vec![1]);
    assert_eq!(chunks[3].seed_history, vec![0]);

    let single = chunk_utterance(&align, 16, 1).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].alignment, align);

    let odd = chunk_utterance(&path(&[0; 11]), 4, 1).unwrap();
    assert_eq!(odd.last().map(|c| (c.start, c.end)), Some((8, 11)));

    let k2 = chunk_utterance(&align, 6, 2).unwrap();
    assert_eq!(k2[1].seed_history, vec![0, 1]);
    assert!(chunk_utterance(&align, 1, 0).is_err());
    assert!(chunk_utterance(&align, 3, 2).is_err());
}

fn stage1_fixture(rng: &mut ChaCha8Rng) -> (Vec<Matrix>, Vec<AlignmentPath>) {
    let f = vec![feats(rng, 5), feats(rng, 4)];
    let a = vec![path(&[-1, 2, -1, 0, 1]), path(&[1, -1, -1, 2])];
    (f, a)
}

#[test]
fn stage1_without_aux_equals_viterbi_ce() {
    let model = tiny_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (f, a) = stage1_fixture(&mut rng);
    let w = LossWeights { enc_scale: 0.0, middle_scale: 0.0, boost_scale: 0.0, ..LossWeights::default() };
    let batch = [Stage1Example { features: &f[0], alignment: Some(&a[0]) }];
    let res = stage1_total(&model, &batch, &w, None, None).unwrap();
    let enc = model.encode(&f[0], Mode::Eval).unwrap();
    let target = collapse(&a[0]);
    let lat = model.joint_lattice(&enc, &target).unwrap();
    let rows: Vec<Vec<f64>> = a[0].positions().iter().enumerate().map(|(t, &s)| lat.cell(t, s).to_vec()).collect();
    let (ce, _) = viterbi_ce_loss(&Matrix::from_rows(&rows), &a[0], 0.2).unwrap();
    assert!((res.loss.total() - ce).abs() < 1e-12);
}

#[test]
fn stage1_components_are_additive() {
    let model = tiny_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (f, a) = stage1_fixture(&mut rng);
    let batch: Vec<Stage1Example> = f.iter().zip(&a).map(|(f, a)| Stage1Example { features: f, alignment: Some(a) }).collect();
    let w = LossWeights { clip_norm: 1e9, ..LossWeights::default() };
    let fused = stage1_total(&model, &batch, &w, None, None).unwrap();
    let only = |wt: LossWeights| stage1_total(&model, &batch, &wt, None, None).unwrap();
    let zero = LossWeights { enc_scale: 0.0, middle_scale: 0.0, boost_scale: 0.0, clip_norm: 1e9, ..LossWeights::default() };
    let parts = [
        only(zero.clone()).loss.total(),
        only(LossWeights { enc_scale: 1.0, label_smooth: 0.2, ..zero.clone() }).loss.enc_final,
        only(LossWeights { middle_scale: 0.3, ..zero.clone() }).loss.enc_middle,
        only(LossWeights { boost_scale: 5.0, ..zero.clone() }).loss.boost,
    ];
    assert!((parts.iter().sum::<f64>() - fused.loss.total()).abs() < 1e-10);
}

#[test]
fn stage1_gradient_matches_finite_differences() {
    let model = tiny_model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (f, a) = stage1_fixture(&mut rng);
    let w = LossWeights { clip_norm: 1e12, ..LossWeights::default() };
    let batch: Vec<Stage1Example> = f.iter().zip(&a).map(|(f, a)| Stage1Example { features: f, alignment: Some(a) }).collect();
    let res = stage1_total(&model, &batch, &w, None, Some(3)).unwrap();
    let report = check_model_gradient(&model, &res.grads, 1e-5, 1e-4, 1e-8, |m| {
        stage1_total(m, &batch, &w, None, Some(3)).unwrap().loss.total()
    });
    assert!(report.passed(), "{report:?}");
}

#[test]
fn chunked_stage1_gradient_matches_finite_differences() {
    let model = tiny_model(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let f = feats(&mut rng, 8);
    let a = path(&[0, -1, 1, -1, 2, -1, 0, 1]);
    let w = LossWeights { clip_norm: 1e12, ..LossWeights::default() };
    let batch = [Stage1Example { features: &f, alignment: Some(&a) }];
    let c = Some(Chunking { window_len: 4 });
    let res = stage1_total(&model, &batch, &w, c, None).unwrap();
    let report = check_model_gradient(&model, &res.grads, 1e-5, 1e-4, 1e-8, |m| {
        stage1_total(m, &batch, &w, c, None).unwrap().loss.total()
    });
    assert!(report.passed(), "{report:?}");
}

#[test]
fn stage1_skips_missing_alignments_and_clips() {
    let model = tiny_model(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (f, a) = stage1_fixture(&mut rng);
    let batch = [
        Stage1Example { features: &f[0], alignment: Some(&a[0]) },
        Stage1Example { features: &f[1], alignment: None },
    ];
    let unclipped = stage1_total(&model, &batch, &LossWeights { clip_norm: 1e12, ..LossWeights::default() }, None, None).unwrap();
    assert_eq!(unclipped.skipped, 1);
    assert_eq!(unclipped.used, 1);
    let norm = unclipped.grad_norm;
    assert!(norm > 0.0);

    let loose = stage1_total(&model, &batch, &LossWeights { clip_norm: norm * 2.0, ..LossWeights::default() }, None, None).unwrap();
    assert_eq!(loose.grads, unclipped.grads);

    let cap = norm / 2.0;
    let tight = stage1_total(&model, &batch, &LossWeights { clip_norm: cap, ..LossWeights::default() }, None, None).unwrap();
    let (u, c) = (unclipped.grads.flatten(), tight.grads.flatten());
    let dot: f64 = u.iter().zip(&c).map(|(a, b)| a * b).sum();
    let cos = dot / (norm * tight.grads.global_norm());
    assert!((cos - 1.0).abs() < 1e-12);
    assert!((tight.grads.global_norm() - cap).abs() < 1e-12 * cap);
}

#[test]
fn fs_single_path_equals_diagonal() {
    let model = tiny_model(15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let f = feats(&mut rng, 3);
    let target = LabelSeq(vec![2, 0, 1]);
    let loss = fs_utterance(&model, &f, &target, Mode::Eval, None).unwrap().unwrap();
    let lat = model.joint_lattice(&model.encode(&f, Mode::Eval).unwrap(), &target).unwrap();
    let diag = lat.get(0, 0, 2) + lat.get(1, 1, 0) + lat.get(2, 2, 1);
    assert!((loss + diag).abs() < 1e-12);
    assert_eq!(fs_utterance(&model, &f, &LabelSeq(vec![0, 1, 2, 0]), Mode::Eval, None).unwrap(), None);
}

#[test]
fn fs_micro_batches_accumulate_linearly() {
    let model = tiny_model(17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let f = [feats(&mut rng, 5), feats(&mut rng, 6), feats(&mut rng, 2)];
    let t = [LabelSeq(vec![0, 2]), LabelSeq(vec![1, 1, 2]), LabelSeq(vec![0, 1, 2])];
    let items: Vec<(&Matrix, &LabelSeq)> = f.iter().zip(&t).collect();
    let combined = stage2_fs_loss(&model, &items, None).unwrap();
    assert_eq!(combined.skipped, 1);
    let mut acc = stage2_fs_loss(&model, &items[..1], None).unwrap();
    acc.merge(&stage2_fs_loss(&model, &items[1..], None).unwrap());
    let (l1, g1) = combined.mean();
    let (l2, g2) = acc.mean();
    assert!((l1 - l2).abs() < 1e-10);
    for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn fs_gradient_matches_finite_differences() {
    let model = tiny_model(19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let f = feats(&mut rng, 4);
    let target = LabelSeq(vec![2, 1]);
    let items = [(&f, &target)];
    let (_, grads) = stage2_fs_loss(&model, &items, Some(4)).unwrap().mean();
    let report = check_model_gradient(&model, &grads, 1e-5, 1e-4, 1e-8, |m| stage2_fs_loss(m, &items, Some(4)).unwrap().mean().0);
    assert!(report.passed(), "{report:?}");
}
