//! Minimum-Bayes-risk training over static N-best lists: edit distance,
//! LM-aware sequence posteriors, the stage-3 loss, and the N-best store.
//!
//! Store format:
//!
//! ```text
//! #nbest v1 N=<n> lambda1=<val> seed=<s>
//! utt <id> <count>
//! hyp <lm_logprob> <S> <labels...>
//! ref <lm_logprob> <S> <labels...>
//! ```
//!
//! `lm_logprob` is written with 17 significant digits.

use std::io::{BufRead, Write};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::Utterance;
use crate::decoder::{apply_w_mapping, beam_decode, DecodeConfig, DecodeError, WMapping};
use crate::lm::NgramModel;
use crate::model::{ForwardCache, Gradients, Mode, Model, ModelError};
use crate::numeric::{logsumexp, Matrix};
use crate::topology::{fullsum, LabelSeq, TopologyError};

#[derive(Debug, Error)]
pub enum MbrError {
    #[error("empty N-best list")]
    EmptyList,
    #[error("N-best list {0} has no reference entry")]
    MissingReference(String),
    #[error("invalid MBR scales: {0}")]
    Scales(String),
    #[error("N-best store line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditStats {
    pub distance: usize,
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl EditStats {
    pub fn add(&mut self, o: &EditStats) {
        self.distance += o.distance;
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
    }
}

/// Edit distance from `reference` to `hyp` with its decomposition. Backtrace
/// ties prefer substitution, then deletion, then insertion.
pub fn levenshtein<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditStats {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut stats = EditStats { distance: d[n][m], ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                stats.sub += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            stats.del += 1;
            i -= 1;
        } else {
            stats.ins += 1;
            j -= 1;
        }
    }
    stats
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbrScales {
    pub lambda1: f64,
    /// Posterior sharpening scale.
    pub beta: f64,
    /// Weight of the reference full-sum stabilizer.
    pub fs_aux_scale: f64,
}

impl MbrScales {
    /// `β = 1/λ1`.
    pub fn new(lambda1: f64, fs_aux_scale: f64) -> Self {
        Self { lambda1, beta: 1.0 / lambda1, fs_aux_scale }
    }

    pub fn validate(&self) -> Result<(), MbrError> {
        if !(self.lambda1 > 0.0 && self.lambda1.is_finite()) {
            return Err(MbrError::Scales(format!("lambda1 must be positive, got {}", self.lambda1)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(MbrError::Scales(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.fs_aux_scale >= 0.0) {
            return Err(MbrError::Scales("fs_aux_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NBestEntry {
    pub labels: LabelSeq,
    /// Full-sum log-probability under the current model (recomputed in training).
    pub model_logprob: f64,
    pub lm_logprob: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    pub id: String,
    pub entries: Vec<NBestEntry>,
    pub reference: usize,
}

impl NBestList {
    /// At most `n` entries in stored order, keeping the reference (replacing
    /// the last kept hypothesis when it ranks below `n`).
    pub fn truncated(&self, n: usize) -> NBestList {
        let n = n.max(1);
        if self.reference < n {
            let mut entries = self.entries.clone();
            entries.truncate(n);
            return NBestList { id: self.id.clone(), entries, reference: self.reference };
        }
        let mut entries: Vec<NBestEntry> = self.entries[..n - 1].to_vec();
        entries.push(self.entries[self.reference].clone());
        NBestList { id: self.id.clone(), reference: entries.len() - 1, entries }
    }

    /// Sets each entry's risk to its edit distance from the reference after
    /// `mapping`. Entries that cannot be mapped get the reference length plus
    /// their own length.
    pub fn compute_risks(&mut self, mapping: &WMapping) {
        let reference = self.entries[self.reference].labels.clone();
        let ref_words = apply_w_mapping(reference.labels(), mapping).ok();
        for e in &mut self.entries {
            let words = apply_w_mapping(e.labels.labels(), mapping).ok();
            e.risk = match (&ref_words, words) {
                (Some(r), Some(h)) => levenshtein(r, &h).distance as f64,
                _ => levenshtein(reference.labels(), e.labels.labels()).distance as f64,
            };
        }
    }
}

/// `p_i ∝ exp(β(m_i + λ1 l_i))`.
pub fn seq_posteriors(entries: &[NBestEntry], scales: &MbrScales) -> Vec<f64> {
    let scores: Vec<f64> =
        entries.iter().map(|e| scales.beta * (e.model_logprob + scales.lambda1 * e.lm_logprob)).collect();
    let z = logsumexp(&scores);
    scores.iter().map(|s| (s - z).exp()).collect()
}

/// Expected risk and its gradient w.r.t. each `model_logprob`.
pub fn mbr_loss(list: &NBestList, scales: &MbrScales) -> Result<(f64, Vec<f64>), MbrError> {
    if list.entries.is_empty() {
        return Err(MbrError::EmptyList);
    }
    let p = seq_posteriors(&list.entries, scales);
    let loss: f64 = p.iter().zip(&list.entries).map(|(p, e)| p * e.risk).sum();
    let grad = p.iter().zip(&list.entries).map(|(p, e)| scales.beta * p * (e.risk - loss)).collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct Stage3Batch {
    /// Mean of `L_MBR + α·L_FS(ref)`.
    pub loss: f64,
    pub expected_risk: f64,
    pub fs_loss: f64,
    pub grads: Gradients,
    pub grad_norm: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Stage-3 loss for one list, accumulating gradients when asked. `None`
/// when the reference is not reachable.
pub fn stage3_list(
    model: &Model,
    features: &Matrix,
    list: &NBestList,
    scales: &MbrScales,
    mode: Mode,
    grads: Option<&mut Gradients>,
) -> Result<Option<(f64, f64)>, MbrError> {
    if list.entries.is_empty() {
        return Err(MbrError::EmptyList);
    }
    let mut cache = ForwardCache::new();
    model.forward_encoder(&mut cache, features, mode)?;
    let frames = cache.encoder_output().expect("just computed").frames();
    let mut kept = Vec::new();
    let mut occupancies = Vec::new();
    let mut handles = Vec::new();
    let mut ref_pos = None;
    for (i, e) in list.entries.iter().enumerate() {
        if e.labels.len() > frames {
            continue;
        }
        let h = model.forward_lattice(&mut cache, &e.labels)?;
        let lattice = cache.joint(h).lattice().expect("full lattice");
        let res = fullsum(&lattice, &e.labels)?;
        if !res.is_feasible() {
            continue;
        }
        if i == list.reference {
            ref_pos = Some(kept.len());
        }
        kept.push(NBestEntry { model_logprob: res.log_prob, ..e.clone() });
        occupancies.push(res.occupancy);
        handles.push(h);
    }
    let Some(ref_pos) = ref_pos else { return Ok(None) };
    let view = NBestList { id: list.id.clone(), entries: kept, reference: ref_pos };
    let (risk, d_m) = mbr_loss(&view, scales)?;
    let fs = -view.entries[ref_pos].model_logprob;
    if let Some(grads) = grads {
        for (i, h) in handles.iter().enumerate() {
            let mut coef = d_m[i];
            if i == ref_pos {
                coef -= scales.fs_aux_scale;
            }
            for (g, o) in cache.joint_mut(*h).grad_mut().iter_mut().zip(&occupancies[i]) {
                *g = coef * o;
            }
        }
        model.backward_and_accumulate(&cache, grads)?;
    }
    Ok(Some((risk, fs)))
}

/// `L_MBR + α·L_FS(ref)` averaged over lists, with optional global-norm clipping.
pub fn stage3_total(
    model: &Model,
    batch: &[(&Matrix, &NBestList)],
    scales: &MbrScales,
    clip_norm: Option<f64>,
    dropout_seed: Option<u64>,
) -> Result<Stage3Batch, MbrError> {
    scales.validate()?;
    let mut grads = model.params().zero_grads();
    let (mut risk_sum, mut fs_sum) = (0.0, 0.0);
    let (mut used, mut skipped) = (0, 0);
    for (i, (features, list)) in batch.iter().enumerate() {
        let mode = dropout_seed.map_or(Mode::Eval, |s| Mode::Train { dropout_seed: s.wrapping_add(i as u64) });
        match stage3_list(model, features, list, scales, mode, Some(&mut grads))? {
            Some((r, f)) => {
                risk_sum += r;
                fs_sum += f;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("stage-3 batch skipped {skipped} lists with unreachable references");
    }
    let inv = if used > 0 { 1.0 / used as f64 } else { 0.0 };
    grads.scale(inv);
    let grad_norm = match clip_norm {
        Some(c) => grads.clip_global_norm(c),
        None => grads.global_norm(),
    };
    let (expected_risk, fs_loss) = (risk_sum * inv, fs_sum * inv);
    Ok(Stage3Batch {
        loss: expected_risk + scales.fs_aux_scale * fs_loss,
        expected_risk,
        fs_loss,
        grads,
        grad_norm,
        used,
        skipped,
    })
}

/// Static N-best lists as persisted on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestStore {
    pub n: usize,
    pub lambda1: f64,
    pub seed: u64,
    pub lists: Vec<NBestList>,
}

impl NBestStore {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), MbrError> {
        writeln!(w, "#nbest v1 N={} lambda1={} seed={}", self.n, self.lambda1, self.seed)?;
        for list in &self.lists {
            writeln!(w, "utt {} {}", list.id, list.entries.len())?;
            for (i, e) in list.entries.iter().enumerate() {
                let tag = if i == list.reference { "ref" } else { "hyp" };
                write!(w, "{tag} {:.16e} {}", e.lm_logprob, e.labels.len())?;
                for l in e.labels.labels() {
                    write!(w, " {l}")?;
                }
                writeln!(w)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a store; risks are computed against each list's reference under `mapping`.
    pub fn read<R: BufRead>(r: R, mapping: &WMapping) -> Result<Self, MbrError> {
        let err = |line: usize, msg: &str| MbrError::Parse { line, msg: msg.into() };
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty store"))?;
        let header = header?;
        let rest = header.strip_prefix("#nbest v1 ").ok_or_else(|| err(1, "expected `#nbest v1` header"))?;
        let (mut n, mut lambda1, mut seed) = (None, None, None);
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("N", v)) => n = v.parse().ok(),
                Some(("lambda1", v)) => lambda1 = v.parse().ok(),
                Some(("seed", v)) => seed = v.parse().ok(),
                _ => return Err(err(1, &format!("unexpected header field `{kv}`"))),
            }
        }
        let (Some(n), Some(lambda1), Some(seed)) = (n, lambda1, seed) else {
            return Err(err(1, "header needs N, lambda1 and seed"));
        };
        let mut lists = Vec::new();
        while let Some((i, line)) = lines.next() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 3 || f[0] != "utt" {
                return Err(err(i + 1, "expected `utt <id> <count>`"));
            }
            let count: usize = f[2].parse().map_err(|_| err(i + 1, "bad count"))?;
            let mut entries = Vec::with_capacity(count);
            let mut reference = None;
            for _ in 0..count {
                let (j, line) = lines.next().ok_or_else(|| err(i + 1, "truncated list"))?;
                let line = line?;
                let f: Vec<&str> = line.split(' ').collect();
                if f.len() < 3 || (f[0] != "hyp" && f[0] != "ref") {
                    return Err(err(j + 1, "expected `hyp|ref <lm_logprob> <S> <labels...>`"));
                }
                let lm_logprob: f64 = f[1].parse().map_err(|_| err(j + 1, "bad lm log-probability"))?;
                let s: usize = f[2].parse().map_err(|_| err(j + 1, "bad length"))?;
                let labels = f[3..]
                    .iter()
                    .map(|t| t.parse::<u32>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| err(j + 1, "bad label"))?;
                if labels.len() != s {
                    return Err(err(j + 1, "label count does not match length field"));
                }
                if f[0] == "ref" {
                    if reference.is_some() {
                        return Err(err(j + 1, "second reference in list"));
                    }
                    reference = Some(entries.len());
                }
                entries.push(NBestEntry { labels: LabelSeq(labels), model_logprob: 0.0, lm_logprob, risk: 0.0 });
            }
            let reference = reference.ok_or_else(|| MbrError::MissingReference(f[1].to_string()))?;
            let mut list = NBestList { id: f[1].to_string(), entries, reference };
            list.compute_risks(mapping);
            lists.push(list);
        }
        Ok(Self { n, lambda1, seed, lists })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), MbrError> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &std::path::Path, mapping: &WMapping) -> Result<Self, MbrError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?), mapping)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NBestConfig {
    pub n: usize,
    pub subset_fraction: f64,
    pub seed: u64,
    pub lambda1: f64,
    pub beam_size: usize,
    pub max_frames: usize,
    pub max_labels: usize,
    pub w_mapping: WMapping,
}

impl Default for NBestConfig {
    fn default() -> Self {
        Self {
            n: 4,
            subset_fraction: 0.25,
            seed: 1,
            lambda1: 0.5,
            beam_size: 8,
            max_frames: usize::MAX,
            max_labels: usize::MAX,
            w_mapping: WMapping::Identity,
        }
    }
}

/// Indices of the seeded random subset (in corpus order) among the
/// utterances passing the length filters.
pub fn select_subset(utts: &[Utterance], cfg: &NBestConfig) -> Vec<usize> {
    let mut eligible: Vec<usize> = (0..utts.len())
        .filter(|&i| utts[i].features.rows() <= cfg.max_frames && utts[i].reference.len() <= cfg.max_labels)
        .collect();
    let take = ((eligible.len() as f64) * cfg.subset_fraction.clamp(0.0, 1.0)).round() as usize;
    eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    eligible.truncate(take);
    eligible.sort_unstable();
    eligible
}

/// Decodes a seeded subset with shallow fusion and stores up to `2N` unique
/// hypotheses per utterance plus the reference.
pub fn build_static_nbest(
    utts: &[Utterance],
    model: &Model,
    lm: &NgramModel,
    cfg: &NBestConfig,
) -> Result<NBestStore, MbrError> {
    let decode = DecodeConfig {
        lambda1: cfg.lambda1,
        lambda2: 0.0,
        beam_size: cfg.beam_size.max(2 * cfg.n),
        n_best: 2 * cfg.n,
        w_mapping: cfg.w_mapping.clone(),
    };
    let mut lists = Vec::new();
    for i in select_subset(utts, cfg) {
        let u = &utts[i];
        let hyps = match beam_decode(model, Some(lm), &u.features, &decode) {
            Ok(h) => h,
            Err(e) => {
                warn!("N-best generation skipped {}: {e}", u.id);
                continue;
            }
        };
        let mut entries: Vec<NBestEntry> = Vec::new();
        for h in hyps {
            if entries.iter().all(|e| e.labels != h.labels) {
                entries.push(NBestEntry { labels: h.labels, model_logprob: 0.0, lm_logprob: h.lm, risk: 0.0 });
            }
        }
        let reference = match entries.iter().position(|e| e.labels == u.reference) {
            Some(r) => r,
            None => {
                let lm_logprob = match apply_w_mapping(u.reference.labels(), &cfg.w_mapping) {
                    Ok(words) => lm.score(&words),
                    Err(e) => {
                        warn!("N-best generation skipped {}: {e}", u.id);
                        continue;
                    }
                };
                entries.push(NBestEntry { labels: u.reference.clone(), model_logprob: 0.0, lm_logprob, risk: 0.0 });
                entries.len() - 1
            }
        };
        let mut list = NBestList { id: u.id.clone(), entries, reference };
        list.compute_risks(&cfg.w_mapping);
        lists.push(list);
    }
    Ok(NBestStore { n: cfg.n, lambda1: cfg.lambda1, seed: cfg.seed, lists })
}
