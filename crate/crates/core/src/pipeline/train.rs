//! Stage drivers: data generation, CTC training and alignment, the three
//! transducer stages and static N-best building.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate, tune_scales};
use super::{io_err, require, Config, PipelineError, SelectBy};
use crate::ctc::{ctc_fullsum, ctc_viterbi_align, read_alignments, to_transducer_alignment, write_alignments, CtcError};
use crate::dataio::{feasibility_filter, generate, lm_corpus, mask_augment, read_split, write_split, Utterance};
use crate::decoder::{DecodeConfig, WMapping};
use crate::lm::NgramModel;
use crate::losses::{fs_utterance, stage1_segment, stage1_total, stage2_fs_loss, Stage1Example};
use crate::mbr::{build_static_nbest, stage3_list, stage3_total, MbrScales, NBestConfig, NBestList, NBestStore};
use crate::model::checkpoint::{Checkpoint, CheckpointKind};
use crate::model::ctc_net::CtcNet;
use crate::model::encoder::subsampled_len;
use crate::model::{Mode, Model};
use crate::numeric::Matrix;
use crate::optim::{OptimizerState, ScheduleKind, ScheduleSpec};
use crate::topology::AlignmentPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ctc,
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub fn number(self) -> u32 {
        match self {
            Stage::Ctc => 0,
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
            Stage::Stage3 => 3,
        }
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ctc" | "0" => Ok(Stage::Ctc),
            "stage1" | "1" => Ok(Stage::Stage1),
            "stage2" | "2" => Ok(Stage::Stage2),
            "stage3" | "3" => Ok(Stage::Stage3),
            _ => Err(PipelineError::Config(format!("unknown stage `{s}`; valid stages: ctc, stage1, stage2, stage3"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Ctc => f.write_str("ctc"),
            other => write!(f, "stage{}", other.number()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub initial_dev_loss: f64,
    pub metrics: Vec<EpochMetrics>,
    /// 0 when the initial model was kept.
    pub best_epoch: usize,
    /// Stage 3 only: mean expected risk on the training store, starting with the initial model.
    pub risk_trace: Vec<f64>,
    pub scales: Option<MbrScales>,
}

/// Shuffles utterance indices with `seed` and packs them greedily into
/// batches of at most `batch_frames` frames. An utterance longer than the
/// budget forms its own batch.
pub fn frame_batches(lengths: &[usize], batch_frames: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut frames = 0;
    for i in order {
        if !current.is_empty() && frames + lengths[i] > batch_frames {
            batches.push(std::mem::take(&mut current));
            frames = 0;
        }
        current.push(i);
        frames += lengths[i];
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// splitmix64 finalizer, used to derive independent seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn epoch_plan(cfg: &Config, stage: Stage, lengths: &[usize], epochs: usize) -> Vec<Vec<Vec<usize>>> {
    let base = mix(cfg.train_seed, u64::from(stage.number()));
    (0..epochs).map(|e| frame_batches(lengths, cfg.batch_frames, mix(base, e as u64))).collect()
}

fn schedule(kind: ScheduleKind, peak: f64, cfg: &Config, plan: &[Vec<Vec<usize>>]) -> Result<ScheduleSpec, PipelineError> {
    let total_steps = plan.iter().map(Vec::len).sum::<usize>() as u64;
    let s = ScheduleSpec { kind, lr_peak: peak, lr_final: cfg.lr_final, constant_lr: cfg.constant_lr, total_steps };
    s.validate()?;
    Ok(s)
}

fn load_split(cfg: &Config, name: &str) -> Result<Vec<Utterance>, PipelineError> {
    let dir = cfg.paths().split(name);
    require("dataset split", &dir.join("manifest.txt"))?;
    Ok(read_split(&dir)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    require("checkpoint", path)?;
    Checkpoint::load(path).map_err(|source| PipelineError::Checkpoint { path: path.to_path_buf(), source })
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    ck.save(path).map_err(|source| PipelineError::Checkpoint { path: path.to_path_buf(), source })
}

/// Loads a transducer checkpoint, optionally insisting on the stage that wrote it.
pub fn load_model(path: &Path, stage: Option<u32>) -> Result<Model, PipelineError> {
    let ck = load_checkpoint(path)?;
    if ck.kind != CheckpointKind::Transducer {
        return Err(PipelineError::Order(format!("{} is a CTC checkpoint, not a transducer", path.display())));
    }
    if let Some(want) = stage {
        if ck.stage != want {
            return Err(PipelineError::Order(format!(
                "{} was written by stage {}, expected stage {want}",
                path.display(),
                ck.stage
            )));
        }
    }
    Ok(Model::from_checkpoint(&ck)?)
}

fn load_lm(path: &Path) -> Result<NgramModel, PipelineError> {
    require("language model", path)?;
    Ok(NgramModel::load(path)?)
}

fn load_store(path: &Path, n: usize) -> Result<NBestStore, PipelineError> {
    require("N-best store", path)?;
    let mut store = NBestStore::load(path, &WMapping::Identity)?;
    store.lists = store.lists.iter().map(|l| l.truncated(n)).collect();
    Ok(store)
}

struct MetricsLog {
    file: File,
    path: PathBuf,
}

impl MetricsLog {
    /// Opens `path` for appending.
    fn open(path: PathBuf) -> Result<Self, PipelineError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        Ok(Self { file, path })
    }

    fn line(&mut self, fields: &[String]) -> Result<(), PipelineError> {
        writeln!(self.file, "{}", fields.join("\t")).map_err(io_err(&self.path))
    }

    fn epoch(&mut self, m: &EpochMetrics) -> Result<(), PipelineError> {
        self.line(&[m.epoch.to_string(), m.train_loss.to_string(), m.dev_loss.to_string(), m.lr.to_string()])
    }
}

/// Keeps the best-scoring parameters seen so far; ties keep the earlier one.
struct Selector<P> {
    score: f64,
    epoch: usize,
    params: P,
}

impl<P: Clone> Selector<P> {
    fn new(score: f64, params: &P) -> Self {
        Self { score, epoch: 0, params: params.clone() }
    }

    fn offer(&mut self, epoch: usize, score: f64, params: &P) {
        if score < self.score || (self.score.is_nan() && !score.is_nan()) {
            self.score = score;
            self.epoch = epoch;
            self.params = params.clone();
        }
    }
}

/// Selection score of a transducer checkpoint: dev loss, or greedy dev WER
/// without LM when `select_by = wer`.
fn selection_score(cfg: &Config, model: &Model, dev: &[Utterance], dev_loss: f64) -> Result<f64, PipelineError> {
    match cfg.select_by {
        SelectBy::DevLoss => Ok(dev_loss),
        SelectBy::Wer => {
            let dc = DecodeConfig { lambda1: 0.0, lambda2: 0.0, n_best: 1, ..cfg.decode_config() };
            Ok(evaluate(model, None, dev, &dc)?.wer)
        }
    }
}

/// Trains the requested stage and writes its checkpoint and metrics log.
pub fn run_stage(cfg: &Config, stage: Stage) -> Result<StageReport, PipelineError> {
    info!("running {stage}");
    match stage {
        Stage::Ctc => train_ctc(cfg),
        Stage::Stage1 => train_stage1(cfg),
        Stage::Stage2 => train_stage2(cfg),
        Stage::Stage3 => train_stage3(cfg),
    }
}

/// Generates the synthetic corpus and trains the recognition and
/// generation LMs on the training transcripts.
pub fn gen_data(cfg: &Config) -> Result<[usize; 3], PipelineError> {
    let splits = generate(&cfg.synthetic_spec())?;
    let paths = cfg.paths();
    let mut counts = [0; 3];
    let mut train_corpus = Vec::new();
    for (k, (name, utts)) in [("train", splits.train), ("dev", splits.dev), ("test", splits.test)].into_iter().enumerate() {
        let (kept, removed) = feasibility_filter(utts, cfg.subsample);
        if removed > 0 {
            warn!("{name}: dropped {removed} utterances too short for subsampling {}", cfg.subsample);
        }
        write_split(&paths.split(name), &kept, cfg.feat_dim)?;
        counts[k] = kept.len();
        if name == "train" {
            train_corpus = lm_corpus(&kept);
        }
    }
    let vocab: Vec<String> = (0..cfg.vocab).map(|v| v.to_string()).collect();
    NgramModel::train(&train_corpus, cfg.lm_order, cfg.lm_discount, &vocab)?.save(&paths.lm())?;
    NgramModel::train(&train_corpus, cfg.lm_gen_order, cfg.lm_discount, &vocab)?.save(&paths.lm_gen())?;
    Ok(counts)
}

fn ctc_dev_loss(net: &CtcNet, dev: &[Utterance]) -> Result<f64, PipelineError> {
    let (mut sum, mut n) = (0.0, 0);
    for u in dev {
        let (lp, _) = ctc_fullsum(&net.logits(&u.features)?, &u.reference)?;
        if lp.is_finite() {
            sum += -lp;
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

fn train_ctc(cfg: &Config) -> Result<StageReport, PipelineError> {
    let paths = cfg.paths();
    let train = load_split(cfg, "train")?;
    let dev = load_split(cfg, "dev")?;
    let mut net = CtcNet::new(cfg.ctc_model_config(), mix(cfg.model_seed, 0xc7c))?;
    let lengths: Vec<usize> = train.iter().map(|u| u.features.rows()).collect();
    let plan = epoch_plan(cfg, Stage::Ctc, &lengths, cfg.ctc_epochs);
    let sched = schedule(ScheduleKind::OclrStage1, cfg.ctc_lr_peak, cfg, &plan)?;
    let mut opt = OptimizerState::new(net.params(), cfg.adam());
    let mut log = MetricsLog::open(paths.metrics("ctc"))?;
    let initial = ctc_dev_loss(&net, &dev)?;
    let mut best = Selector::new(initial, net.params());
    let mut metrics = Vec::new();
    for (e, batches) in plan.iter().enumerate() {
        let (mut loss_sum, mut count, mut lr) = (0.0, 0, 0.0);
        for batch in batches {
            let mut grads = net.params().zero_grads();
            let mut used = 0;
            for &i in batch {
                if let Some(l) = net.loss_and_grad(&train[i].features, &train[i].reference, &mut grads)? {
                    loss_sum += l;
                    used += 1;
                }
            }
            if used == 0 {
                continue;
            }
            grads.scale(1.0 / used as f64);
            grads.clip_global_norm(cfg.clip_norm);
            lr = sched.lr_at(opt.step);
            opt.step_update(net.params_mut(), &grads, lr)?;
            count += used;
        }
        let dev_loss = ctc_dev_loss(&net, &dev)?;
        let m = EpochMetrics { epoch: e + 1, train_loss: loss_sum / count.max(1) as f64, dev_loss, lr };
        info!("ctc epoch {}: train {:.4} dev {:.4} lr {:.3e}", m.epoch, m.train_loss, m.dev_loss, m.lr);
        log.epoch(&m)?;
        metrics.push(m);
        best.offer(e + 1, dev_loss, net.params());
    }
    *net.params_mut() = best.params;
    let path = paths.ctc_checkpoint();
    save_checkpoint(&net.to_checkpoint(0), &path)?;
    Ok(StageReport {
        stage: Stage::Ctc,
        checkpoint: path,
        initial_dev_loss: initial,
        metrics,
        best_epoch: best.epoch,
        risk_trace: Vec::new(),
        scales: None,
    })
}

/// CTC Viterbi alignments of the train and dev references. Returns the
/// number of aligned utterances per split; unreachable ones are skipped.
pub fn align(cfg: &Config) -> Result<[usize; 2], PipelineError> {
    let paths = cfg.paths();
    let ck = load_checkpoint(&paths.ctc_checkpoint())?;
    if ck.kind != CheckpointKind::Ctc {
        return Err(PipelineError::Order(format!("{} is not a CTC checkpoint", paths.ctc_checkpoint().display())));
    }
    let net = CtcNet::from_checkpoint(&ck)?;
    let mut counts = [0; 2];
    for (k, name) in ["train", "dev"].into_iter().enumerate() {
        let utts = load_split(cfg, name)?;
        let mut records = Vec::with_capacity(utts.len());
        for u in &utts {
            match ctc_viterbi_align(&net.logits(&u.features)?, &u.reference) {
                Ok(fa) => records.push((u.id.clone(), fa)),
                Err(CtcError::Unreachable { .. }) => warn!("{}: reference unreachable, no alignment", u.id),
                Err(e) => return Err(e.into()),
            }
        }
        let path = paths.alignments(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        write_alignments(&mut w, &records)?;
        w.flush().map_err(io_err(&path))?;
        counts[k] = records.len();
    }
    Ok(counts)
}

/// Transducer alignment per utterance, `None` where missing or of the wrong length.
fn load_alignments(path: &Path, utts: &[Utterance], subsample: usize) -> Result<Vec<Option<AlignmentPath>>, PipelineError> {
    require("alignment file", path)?;
    let file = File::open(path).map_err(io_err(path))?;
    let map: HashMap<String, AlignmentPath> = read_alignments(BufReader::new(file))?
        .into_iter()
        .map(|(id, fa)| (id, to_transducer_alignment(&fa)))
        .collect();
    let mut missing = 0;
    let out = utts
        .iter()
        .map(|u| {
            let a = map.get(&u.id).filter(|a| a.len() == subsampled_len(u.features.rows(), subsample)).cloned();
            missing += usize::from(a.is_none());
            a
        })
        .collect();
    if missing > 0 {
        warn!("{}: {missing} utterances without a usable alignment", path.display());
    }
    Ok(out)
}

fn masked(cfg: &Config, features: &Matrix, seed: u64) -> Matrix {
    let spec = cfg.mask_spec();
    if spec.time_masks == 0 && spec.feat_masks == 0 {
        features.clone()
    } else {
        mask_augment(features, &spec, seed)
    }
}

fn stage1_dev_loss(cfg: &Config, model: &Model, dev: &[Utterance], aligns: &[Option<AlignmentPath>]) -> Result<f64, PipelineError> {
    let weights = cfg.loss_weights();
    let (mut sum, mut n) = (0.0, 0);
    for (u, a) in dev.iter().zip(aligns) {
        if let Some(a) = a {
            sum += stage1_segment(model, &u.features, a, &[], &weights, Mode::Eval, None)?.total();
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

fn train_stage1(cfg: &Config) -> Result<StageReport, PipelineError> {
    let paths = cfg.paths();
    let train = load_split(cfg, "train")?;
    let dev = load_split(cfg, "dev")?;
    let train_al = load_alignments(&paths.alignments("train"), &train, cfg.subsample)?;
    let dev_al = load_alignments(&paths.alignments("dev"), &dev, cfg.subsample)?;
    let mut model = Model::new(cfg.model_config(1), cfg.model_seed)?;
    let weights = cfg.loss_weights();
    let lengths: Vec<usize> = train.iter().map(|u| u.features.rows()).collect();
    let plan = epoch_plan(cfg, Stage::Stage1, &lengths, cfg.stage1_epochs);
    let sched = schedule(ScheduleKind::OclrStage1, cfg.lr_peak_stage1, cfg, &plan)?;
    let mut opt = OptimizerState::new(model.params(), cfg.adam());
    let mut log = MetricsLog::open(paths.metrics("stage1"))?;
    let initial = stage1_dev_loss(cfg, &model, &dev, &dev_al)?;
    let mut best = Selector::new(selection_score(cfg, &model, &dev, initial)?, model.params());
    let mut metrics = Vec::new();
    let seed_base = mix(cfg.train_seed, 0x51);
    for (e, batches) in plan.iter().enumerate() {
        let (mut loss_sum, mut count, mut lr) = (0.0, 0, 0.0);
        for batch in batches {
            let step_seed = mix(seed_base, opt.step);
            let feats: Vec<Matrix> =
                batch.iter().map(|&i| masked(cfg, &train[i].features, mix(step_seed, i as u64))).collect();
            let examples: Vec<Stage1Example> = batch
                .iter()
                .zip(&feats)
                .map(|(&i, f)| Stage1Example { features: f, alignment: train_al[i].as_ref() })
                .collect();
            let out = stage1_total(&model, &examples, &weights, cfg.chunking(), Some(step_seed))?;
            if out.used == 0 {
                continue;
            }
            lr = sched.lr_at(opt.step);
            opt.step_update(model.params_mut(), &out.grads, lr)?;
            loss_sum += out.loss.total() * out.used as f64;
            count += out.used;
        }
        let dev_loss = stage1_dev_loss(cfg, &model, &dev, &dev_al)?;
        let m = EpochMetrics { epoch: e + 1, train_loss: loss_sum / count.max(1) as f64, dev_loss, lr };
        info!("stage1 epoch {}: train {:.4} dev {:.4} lr {:.3e}", m.epoch, m.train_loss, m.dev_loss, m.lr);
        log.epoch(&m)?;
        metrics.push(m);
        best.offer(e + 1, selection_score(cfg, &model, &dev, dev_loss)?, model.params());
    }
    *model.params_mut() = best.params;
    let path = paths.checkpoint(1);
    save_checkpoint(&model.to_checkpoint(1), &path)?;
    Ok(StageReport {
        stage: Stage::Stage1,
        checkpoint: path,
        initial_dev_loss: initial,
        metrics,
        best_epoch: best.epoch,
        risk_trace: Vec::new(),
        scales: None,
    })
}

fn fs_dev_loss(model: &Model, dev: &[Utterance]) -> Result<f64, PipelineError> {
    let (mut sum, mut n) = (0.0, 0);
    for u in dev {
        if let Some(l) = fs_utterance(model, &u.features, &u.reference, Mode::Eval, None)? {
            sum += l;
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

fn train_stage2(cfg: &Config) -> Result<StageReport, PipelineError> {
    let paths = cfg.paths();
    let train = load_split(cfg, "train")?;
    let dev = load_split(cfg, "dev")?;
    let mut model = load_model(&paths.checkpoint(1), Some(1))?.without_aux_heads();
    model.set_dropout(cfg.dropout_stage2)?;
    model.freeze_normalization();
    let lengths: Vec<usize> = train.iter().map(|u| u.features.rows()).collect();
    let plan = epoch_plan(cfg, Stage::Stage2, &lengths, cfg.stage2_epochs);
    let sched = schedule(ScheduleKind::OclrStage2, cfg.lr_peak_stage2, cfg, &plan)?;
    let mut opt = OptimizerState::new(model.params(), cfg.adam());
    let mut log = MetricsLog::open(paths.metrics("stage2"))?;
    let initial = fs_dev_loss(&model, &dev)?;
    let mut best = Selector::new(selection_score(cfg, &model, &dev, initial)?, model.params());
    let mut metrics = Vec::new();
    let seed_base = mix(cfg.train_seed, 0x52);
    for (e, batches) in plan.iter().enumerate() {
        let (mut loss_sum, mut count, mut lr) = (0.0, 0, 0.0);
        for batch in batches {
            let step_seed = mix(seed_base, opt.step);
            let feats: Vec<Matrix> =
                batch.iter().map(|&i| masked(cfg, &train[i].features, mix(step_seed, i as u64))).collect();
            let pairs: Vec<(&Matrix, _)> = batch.iter().zip(&feats).map(|(&i, f)| (f, &train[i].reference)).collect();
            let acc = stage2_fs_loss(&model, &pairs, Some(step_seed))?;
            if acc.count == 0 {
                continue;
            }
            let (loss, mut grads) = acc.mean();
            grads.clip_global_norm(cfg.clip_norm);
            lr = sched.lr_at(opt.step);
            opt.step_update(model.params_mut(), &grads, lr)?;
            loss_sum += loss * acc.count as f64;
            count += acc.count;
        }
        let dev_loss = fs_dev_loss(&model, &dev)?;
        let m = EpochMetrics { epoch: e + 1, train_loss: loss_sum / count.max(1) as f64, dev_loss, lr };
        info!("stage2 epoch {}: train {:.4} dev {:.4} lr {:.3e}", m.epoch, m.train_loss, m.dev_loss, m.lr);
        log.epoch(&m)?;
        metrics.push(m);
        best.offer(e + 1, selection_score(cfg, &model, &dev, dev_loss)?, model.params());
    }
    *model.params_mut() = best.params;
    let path = paths.checkpoint(2);
    save_checkpoint(&model.to_checkpoint(2), &path)?;
    Ok(StageReport {
        stage: Stage::Stage2,
        checkpoint: path,
        initial_dev_loss: initial,
        metrics,
        best_epoch: best.epoch,
        risk_trace: Vec::new(),
        scales: None,
    })
}

/// MBR scales for stage 3: λ1 from the config, else the store's generation
/// scale, else the smallest positive point of the λ1 grid; β defaults to 1/λ1.
pub fn mbr_scales(cfg: &Config, store: &NBestStore) -> Result<MbrScales, PipelineError> {
    let lambda1 = if cfg.mbr_lambda1 > 0.0 {
        cfg.mbr_lambda1
    } else if store.lambda1 > 0.0 {
        store.lambda1
    } else {
        let fallback = cfg.tune_lambda1.0.iter().copied().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min);
        let fallback = if fallback.is_finite() { fallback } else { 1.0 };
        warn!("N-best store was generated with λ1 = 0; using λ1 = {fallback} in the MBR posterior");
        fallback
    };
    let beta = if cfg.mbr_beta > 0.0 { cfg.mbr_beta } else { 1.0 / lambda1 };
    let scales = MbrScales { lambda1, beta, fs_aux_scale: cfg.fs_aux_scale };
    scales.validate()?;
    Ok(scales)
}

fn pair_lists<'a>(store: &'a NBestStore, utts: &'a [Utterance], split: &str) -> Result<Vec<(&'a Matrix, &'a NBestList)>, PipelineError> {
    let by_id: HashMap<&str, &Utterance> = utts.iter().map(|u| (u.id.as_str(), u)).collect();
    store
        .lists
        .iter()
        .map(|l| match by_id.get(l.id.as_str()) {
            Some(u) => Ok((&u.features, l)),
            None => Err(PipelineError::Config(format!("N-best list {} has no utterance in the {split} split", l.id))),
        })
        .collect()
}

/// Mean stage-3 loss and mean expected risk in evaluation mode.
fn store_eval(model: &Model, pairs: &[(&Matrix, &NBestList)], scales: &MbrScales) -> Result<(f64, f64), PipelineError> {
    let (mut loss, mut risk, mut n) = (0.0, 0.0, 0);
    for (f, l) in pairs {
        if let Some((r, fs)) = stage3_list(model, f, l, scales, Mode::Eval, None)? {
            loss += r + scales.fs_aux_scale * fs;
            risk += r;
            n += 1;
        }
    }
    let inv = 1.0 / n.max(1) as f64;
    Ok((loss * inv, risk * inv))
}

fn train_stage3(cfg: &Config) -> Result<StageReport, PipelineError> {
    let paths = cfg.paths();
    let mut model = load_model(&paths.checkpoint(2), Some(2))?;
    model.set_dropout(cfg.dropout_stage3)?;
    let store = load_store(&paths.nbest("train"), cfg.nbest_n)?;
    let dev_store = load_store(&paths.nbest("dev"), cfg.nbest_n)?;
    require("frozen LM", &paths.lm_gen())?;
    let train = load_split(cfg, "train")?;
    let dev = load_split(cfg, "dev")?;
    let pairs = pair_lists(&store, &train, "train")?;
    let dev_pairs = pair_lists(&dev_store, &dev, "dev")?;
    let scales = mbr_scales(cfg, &store)?;
    info!("stage3 scales: λ1 {} β {} fs {}", scales.lambda1, scales.beta, scales.fs_aux_scale);

    let lengths: Vec<usize> = pairs.iter().map(|(f, _)| f.rows()).collect();
    let plan = epoch_plan(cfg, Stage::Stage3, &lengths, cfg.stage3_epochs);
    let sched = schedule(ScheduleKind::Constant, cfg.lr_peak_stage2, cfg, &plan)?;
    let mut opt = OptimizerState::new(model.params(), cfg.adam());
    let mut log = MetricsLog::open(paths.metrics("stage3"))?;
    let mut risk_log = MetricsLog::open(paths.risk_log())?;

    let (initial, initial_risk) = store_eval(&model, &dev_pairs, &scales)
        .and_then(|(dev_loss, _)| Ok((dev_loss, store_eval(&model, &pairs, &scales)?.1)))?;
    risk_log.line(&["0".into(), initial_risk.to_string()])?;
    let mut risk_trace = vec![initial_risk];
    let mut best = Selector::new(initial, model.params());
    let mut metrics = Vec::new();
    let seed_base = mix(cfg.train_seed, 0x53);
    for (e, batches) in plan.iter().enumerate() {
        let (mut loss_sum, mut count, mut lr) = (0.0, 0, 0.0);
        for batch in batches {
            let items: Vec<(&Matrix, &NBestList)> = batch.iter().map(|&i| pairs[i]).collect();
            let out = stage3_total(&model, &items, &scales, Some(cfg.clip_norm), Some(mix(seed_base, opt.step)))?;
            if out.used == 0 {
                continue;
            }
            lr = sched.lr_at(opt.step);
            opt.step_update(model.params_mut(), &out.grads, lr)?;
            loss_sum += out.loss * out.used as f64;
            count += out.used;
        }
        let (dev_loss, _) = store_eval(&model, &dev_pairs, &scales)?;
        let (_, risk) = store_eval(&model, &pairs, &scales)?;
        let m = EpochMetrics { epoch: e + 1, train_loss: loss_sum / count.max(1) as f64, dev_loss, lr };
        info!("stage3 epoch {}: train {:.4} dev {:.4} risk {:.6}", m.epoch, m.train_loss, m.dev_loss, risk);
        log.epoch(&m)?;
        risk_log.line(&[(e + 1).to_string(), risk.to_string()])?;
        risk_trace.push(risk);
        metrics.push(m);
        best.offer(e + 1, dev_loss, model.params());
    }
    *model.params_mut() = best.params;
    let path = paths.checkpoint(3);
    save_checkpoint(&model.to_checkpoint(3), &path)?;
    Ok(StageReport {
        stage: Stage::Stage3,
        checkpoint: path,
        initial_dev_loss: initial,
        metrics,
        best_epoch: best.epoch,
        risk_trace,
        scales: Some(scales),
    })
}

/// Static N-best stores for stage 3 from the stage-2 model and the
/// generation LM: a seeded subset of train plus the whole dev split.
/// Returns the shallow-fusion scale used.
pub fn build_nbest(cfg: &Config) -> Result<f64, PipelineError> {
    let paths = cfg.paths();
    let model = load_model(&paths.checkpoint(2), Some(2))?;
    let lm = load_lm(&paths.lm_gen())?;
    let train = load_split(cfg, "train")?;
    let dev = load_split(cfg, "dev")?;
    let lambda1 = if cfg.nbest_lambda1 >= 0.0 {
        cfg.nbest_lambda1
    } else {
        let t = tune_scales(&model, Some(&lm), &dev, &cfg.tune_lambda1.0, &[0.0], &cfg.decode_config())?;
        info!("generation λ1 tuned on dev: {} (WER {:.2})", t.lambda1, t.report.wer);
        t.lambda1
    };
    let ncfg = cfg.nbest_config(lambda1);
    fs::create_dir_all(&paths.work).map_err(io_err(&paths.work))?;
    build_static_nbest(&train, &model, &lm, &ncfg)?.save(&paths.nbest("train"))?;
    build_static_nbest(&dev, &model, &lm, &NBestConfig { subset_fraction: 1.0, ..ncfg })?.save(&paths.nbest("dev"))?;
    Ok(lambda1)
}
