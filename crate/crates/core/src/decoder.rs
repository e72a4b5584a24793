//! Frame-synchronous beam search with shallow fusion and internal-LM
//! correction, the exhaustive-search reference decoder, and label-to-word
//! mapping.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::Write;

use thiserror::Error;

use crate::lm::NgramModel;
use crate::model::{Mode, Model, ModelError};
use crate::numeric::{logaddexp, logsumexp, Matrix};
use crate::topology::LabelSeq;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("exhaustive search over {count} alignments exceeds the guard")]
    GuardExceeded { count: f64 },
    #[error("label {0} is not covered by the lexicon")]
    Unmapped(u32),
    #[error("label sequence ends inside a lexicon entry")]
    IncompleteWord,
    #[error("invalid decode config: {0}")]
    Config(String),
}

/// Maps lexicon entries (label sequences) to words.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    entries: Vec<(Vec<u32>, String)>,
}

impl Lexicon {
    pub fn new(entries: Vec<(Vec<u32>, String)>) -> Self {
        Self { entries }
    }

    fn lookup(&self, labels: &[u32]) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == labels).map(|(_, w)| w.as_str())
    }

    fn is_prefix(&self, labels: &[u32]) -> bool {
        self.entries.iter().any(|(k, _)| k.starts_with(labels))
    }

    /// Parses lines of `word label label ...`.
    pub fn parse(text: &str) -> Result<Self, DecodeError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let labels = parts
                .map(|t| t.parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| DecodeError::Config(format!("lexicon line {}: bad label", i + 1)))?;
            if labels.is_empty() {
                return Err(DecodeError::Config(format!("lexicon line {}: entry has no labels", i + 1)));
            }
            entries.push((labels, word.to_string()));
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum WMapping {
    #[default]
    Identity,
    Lexicon(Lexicon),
}

/// Labels to words: identity (each label id is a word) or shortest-match
/// lexicon segmentation.
pub fn apply_w_mapping(labels: &[u32], mapping: &WMapping) -> Result<Vec<String>, DecodeError> {
    match mapping {
        WMapping::Identity => Ok(labels.iter().map(u32::to_string).collect()),
        WMapping::Lexicon(lex) => {
            let mut out = Vec::new();
            let mut pending = Vec::new();
            for &l in labels {
                pending.push(l);
                if let Some(w) = lex.lookup(&pending) {
                    out.push(w.to_string());
                    pending.clear();
                } else if !lex.is_prefix(&pending) {
                    return Err(DecodeError::Unmapped(l));
                }
            }
            if !pending.is_empty() {
                return Err(DecodeError::IncompleteWord);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beam_size: usize,
    pub n_best: usize,
    pub w_mapping: WMapping,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { lambda1: 0.0, lambda2: 0.0, beam_size: 8, n_best: 1, w_mapping: WMapping::Identity }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 || self.n_best == 0 {
            return Err(DecodeError::Config("beam_size and n_best must be at least 1".into()));
        }
        Ok(())
    }

    fn combine(&self, transducer: f64, lm: f64, ilm: f64) -> f64 {
        transducer + self.lambda1 * lm - self.lambda2 * ilm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub labels: LabelSeq,
    pub transducer: f64,
    pub lm: f64,
    pub ilm: f64,
    pub combined: f64,
}

/// Per-frame output distributions and the internal LM, as seen by the search.
pub trait TransducerScorer {
    fn frames(&self) -> usize;
    fn vocab(&self) -> usize;
    /// `V+1` log-probabilities at frame `t` given the labels emitted so far.
    fn frame_logprobs(&self, t: usize, history: &[u32]) -> Vec<f64>;
    /// `V` internal-LM log-probabilities given the labels emitted so far.
    fn ilm_logprobs(&self, history: &[u32]) -> Vec<f64>;
}

/// Scores one utterance with a frozen model, caching per-history terms.
pub struct ModelScorer<'a> {
    model: &'a Model,
    frame_proj: Matrix,
    bias: RefCell<HashMap<Vec<u32>, Vec<f64>>>,
    ilm: RefCell<HashMap<Vec<u32>, Vec<f64>>>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, features: &Matrix) -> Result<Self, ModelError> {
        let enc = model.encode(features, Mode::Eval)?;
        Ok(Self { model, frame_proj: model.frame_projections(&enc.h), bias: RefCell::default(), ilm: RefCell::default() })
    }

    fn key(&self, history: &[u32]) -> Vec<u32> {
        let k = self.model.config().context_k;
        let tail = &history[history.len().saturating_sub(k)..];
        // left-pad marker keeps short histories distinct from full ones
        let mut key = vec![u32::MAX; k - tail.len()];
        key.extend_from_slice(tail);
        key
    }
}

impl TransducerScorer for ModelScorer<'_> {
    fn frames(&self) -> usize {
        self.frame_proj.rows()
    }

    fn vocab(&self) -> usize {
        self.model.config().vocab
    }

    fn frame_logprobs(&self, t: usize, history: &[u32]) -> Vec<f64> {
        let key = self.key(history);
        let mut cache = self.bias.borrow_mut();
        let bias = cache.entry(key).or_insert_with(|| self.model.history_bias(history));
        self.model.output_logprobs(self.frame_proj.row(t), bias)
    }

    fn ilm_logprobs(&self, history: &[u32]) -> Vec<f64> {
        let key = self.key(history);
        self.ilm.borrow_mut().entry(key).or_insert_with(|| self.model.ilm_label_logprobs(history)).clone()
    }
}

/// Incremental LM state of one hypothesis.
#[derive(Debug, Clone)]
struct LmState {
    history: Vec<u32>,
    pending: Vec<u32>,
}

struct LmView<'a> {
    lm: Option<&'a NgramModel>,
    mapping: &'a WMapping,
    label_ids: Vec<u32>,
}

impl<'a> LmView<'a> {
    fn new(lm: Option<&'a NgramModel>, mapping: &'a WMapping, vocab: usize) -> Self {
        let label_ids = match lm {
            Some(lm) => (0..vocab as u32).map(|l| lm.word_id(&l.to_string())).collect(),
            None => Vec::new(),
        };
        Self { lm, mapping, label_ids }
    }

    fn start(&self) -> LmState {
        LmState { history: self.lm.map(|lm| vec![lm.bos()]).unwrap_or_default(), pending: Vec::new() }
    }

    fn trim(&self, history: &mut Vec<u32>) {
        if let Some(lm) = self.lm {
            let keep = lm.order().saturating_sub(1).max(1);
            if history.len() > keep {
                history.drain(..history.len() - keep);
            }
        }
    }

    fn word(&self, st: &mut LmState, id: u32) -> f64 {
        let Some(lm) = self.lm else { return 0.0 };
        let inc = lm.cond_logprob(&st.history, id);
        st.history.push(id);
        self.trim(&mut st.history);
        inc
    }

    /// LM increment for emitting `label`; `None` if the label cannot extend a lexicon word.
    fn extend(&self, st: &mut LmState, label: u32) -> Option<f64> {
        match self.mapping {
            WMapping::Identity => {
                let id = self.label_ids.get(label as usize).copied().unwrap_or(0);
                Some(self.word(st, id))
            }
            WMapping::Lexicon(lex) => {
                st.pending.push(label);
                if let Some(w) = lex.lookup(&st.pending) {
                    st.pending.clear();
                    let id = self.lm.map_or(0, |lm| lm.word_id(w));
                    Some(self.word(st, id))
                } else if lex.is_prefix(&st.pending) {
                    Some(0.0)
                } else {
                    None
                }
            }
        }
    }

    /// End-of-sentence increment; `None` if a lexicon word is unfinished.
    fn finish(&self, st: &LmState) -> Option<f64> {
        if !st.pending.is_empty() {
            return None;
        }
        Some(self.lm.map_or(0.0, |lm| lm.cond_logprob(&st.history, lm.eos())))
    }
}

#[derive(Debug, Clone)]
struct Partial {
    labels: Vec<u32>,
    transducer: f64,
    lm: f64,
    ilm: f64,
    state: LmState,
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.combined.total_cmp(&a.combined).then_with(|| a.labels.0.cmp(&b.labels.0))
}

/// Beam search over any scorer; see [`beam_decode`].
pub fn beam_search(
    scorer: &dyn TransducerScorer,
    lm: Option<&NgramModel>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    let vocab = scorer.vocab();
    let view = LmView::new(lm, &cfg.w_mapping, vocab);
    let mut beam = vec![Partial { labels: Vec::new(), transducer: 0.0, lm: 0.0, ilm: 0.0, state: view.start() }];
    for t in 0..scorer.frames() {
        let mut next: Vec<Partial> = Vec::new();
        let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut push = |p: Partial, next: &mut Vec<Partial>| match index.get(&p.labels) {
            Some(&i) => next[i].transducer = logaddexp(next[i].transducer, p.transducer),
            None => {
                index.insert(p.labels.clone(), next.len());
                next.push(p);
            }
        };
        for hyp in &beam {
            let logp = scorer.frame_logprobs(t, &hyp.labels);
            push(Partial { transducer: hyp.transducer + logp[vocab], ..hyp.clone() }, &mut next);
            let ilm = scorer.ilm_logprobs(&hyp.labels);
            for v in 0..vocab as u32 {
                let mut state = hyp.state.clone();
                let Some(lm_inc) = view.extend(&mut state, v) else { continue };
                let mut labels = hyp.labels.clone();
                labels.push(v);
                push(
                    Partial {
                        labels,
                        transducer: hyp.transducer + logp[v as usize],
                        lm: hyp.lm + lm_inc,
                        ilm: hyp.ilm + ilm[v as usize],
                        state,
                    },
                    &mut next,
                );
            }
        }
        let key = |p: &Partial| cfg.combine(p.transducer, p.lm, p.ilm);
        next.sort_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| a.labels.cmp(&b.labels)));
        next.truncate(cfg.beam_size);
        beam = next;
    }
    let mut out: Vec<Hypothesis> = beam
        .into_iter()
        .filter_map(|p| {
            let lm = p.lm + view.finish(&p.state)?;
            Some(Hypothesis {
                labels: LabelSeq(p.labels),
                transducer: p.transducer,
                lm,
                ilm: p.ilm,
                combined: cfg.combine(p.transducer, lm, p.ilm),
            })
        })
        .collect();
    out.sort_by(rank);
    out.truncate(cfg.n_best);
    Ok(out)
}

fn empty_hypothesis(lm: Option<&NgramModel>, cfg: &DecodeConfig) -> Hypothesis {
    let lm_score = lm.map_or(0.0, |lm| lm.score_ids(&[]));
    Hypothesis { labels: LabelSeq::default(), transducer: 0.0, lm: lm_score, ilm: 0.0, combined: cfg.combine(0.0, lm_score, 0.0) }
}

/// Ranked hypotheses (at most `n_best`) for one utterance.
pub fn beam_decode(
    model: &Model,
    lm: Option<&NgramModel>,
    features: &Matrix,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    if features.rows() == 0 {
        return Ok(vec![empty_hypothesis(lm, cfg)]);
    }
    let scorer = ModelScorer::new(model, features)?;
    beam_search(&scorer, lm, cfg)
}

/// Largest `(V+1)^T` walked by [`exhaustive_search`].
pub const EXHAUSTIVE_GUARD: f64 = 1e6;

/// Reference decoder: enumerates every frame-level output sequence,
/// aggregates path probabilities per label sequence and scores each one.
/// Returns all label sequences, ranked.
pub fn exhaustive_search(
    scorer: &dyn TransducerScorer,
    lm: Option<&NgramModel>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    let frames = scorer.frames();
    let width = scorer.vocab() + 1;
    let count = (width as f64).powi(frames as i32);
    if count > EXHAUSTIVE_GUARD {
        return Err(DecodeError::GuardExceeded { count });
    }
    let blank = width - 1;
    let mut paths: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
    let mut digits = vec![0usize; frames];
    for _ in 0..count as usize {
        let mut labels = Vec::new();
        let mut score = 0.0;
        for (t, &d) in digits.iter().enumerate() {
            score += scorer.frame_logprobs(t, &labels)[d];
            if d != blank {
                labels.push(d as u32);
            }
        }
        paths.entry(labels).or_default().push(score);
        for d in digits.iter_mut() {
            *d += 1;
            if *d < width {
                break;
            }
            *d = 0;
        }
    }
    let mut out = Vec::new();
    for (labels, scores) in paths {
        let lm_score = match apply_w_mapping(&labels, &cfg.w_mapping) {
            Ok(words) => lm.map_or(0.0, |lm| lm.score(&words)),
            Err(_) => continue,
        };
        let mut ilm = 0.0;
        for s in 0..labels.len() {
            ilm += scorer.ilm_logprobs(&labels[..s])[labels[s] as usize];
        }
        let transducer = logsumexp(&scores);
        out.push(Hypothesis {
            combined: cfg.combine(transducer, lm_score, ilm),
            labels: LabelSeq(labels),
            transducer,
            lm: lm_score,
            ilm,
        });
    }
    out.sort_by(rank);
    Ok(out)
}

/// Exact MAP decision for small inputs.
pub fn exhaustive_decode(
    model: &Model,
    lm: Option<&NgramModel>,
    features: &Matrix,
    cfg: &DecodeConfig,
) -> Result<Hypothesis, DecodeError> {
    if features.rows() == 0 {
        return Ok(empty_hypothesis(lm, cfg));
    }
    let scorer = ModelScorer::new(model, features)?;
    let all = exhaustive_search(&scorer, lm, cfg)?;
    Ok(all.into_iter().next().unwrap_or_else(|| empty_hypothesis(lm, cfg)))
}

/// Writes `utt <id> <rank> <combined> <transducer> <lm> <ilm> | <labels...>`
/// lines, ranks starting at 1.
pub fn write_hypotheses<W: Write>(mut w: W, id: &str, hyps: &[Hypothesis]) -> std::io::Result<()> {
    for (rank, h) in hyps.iter().enumerate() {
        write!(w, "utt {id} {} {} {} {} {} |", rank + 1, h.combined, h.transducer, h.lm, h.ilm)?;
        for l in h.labels.labels() {
            write!(w, " {l}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ModelConfig;
    use crate::numeric::log_softmax_inplace;

    /// History-independent per-frame table with a uniform internal LM.
    struct Table {
        rows: Vec<Vec<f64>>,
    }

    impl TransducerScorer for Table {
        fn frames(&self) -> usize {
            self.rows.len()
        }
        fn vocab(&self) -> usize {
            self.rows[0].len() - 1
        }
        fn frame_logprobs(&self, t: usize, _: &[u32]) -> Vec<f64> {
            self.rows[t].clone()
        }
        fn ilm_logprobs(&self, _: &[u32]) -> Vec<f64> {
            vec![-(self.vocab() as f64).ln(); self.vocab()]
        }
    }

    fn table() -> Table {
        Table { rows: vec![vec![0.5f64.ln(), 0.2f64.ln(), 0.3f64.ln()], vec![0.4f64.ln(), 0.1f64.ln(), 0.5f64.ln()]] }
    }

    #[test]
    fn hand_computed_ranking() {
        let cfg = DecodeConfig { beam_size: 100, n_best: 7, ..DecodeConfig::default() };
        let hyps = beam_search(&table(), None, &cfg).unwrap();
        let expected: [(&[u32], f64); 7] = [
            (&[0], 0.37),
            (&[0, 0], 0.20),
            (&[], 0.15),
            (&[1], 0.13),
            (&[1, 0], 0.08),
            (&[0, 1], 0.05),
            (&[1, 1], 0.02),
        ];
        for (h, (labels, p)) in hyps.iter().zip(expected) {
            assert_eq!(h.labels.labels(), labels);
            assert!((h.transducer - p.ln()).abs() < 1e-12);
        }
        let ilm = DecodeConfig { lambda2: 0.2, ..cfg };
        let hyps = beam_search(&table(), None, &ilm).unwrap();
        // each label earns 0.2·ln 2
        assert_eq!(hyps[0].labels.labels(), &[0]);
        assert_eq!(hyps[1].labels.labels(), &[0, 0]);
        assert!((hyps[1].combined - (0.2f64.ln() + 0.4 * 2f64.ln())).abs() < 1e-12);
        assert!((hyps[1].transducer - 0.2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_frame_is_best_single_output() {
        let t = Table { rows: vec![vec![0.1f64.ln(), 0.6f64.ln(), 0.3f64.ln()]] };
        let cfg = DecodeConfig::default();
        let best = &exhaustive_search(&t, None, &cfg).unwrap()[0];
        assert_eq!(best.labels.labels(), &[1]);
    }

    #[test]
    fn blank_dominant_model_outputs_nothing() {
        let t = Table { rows: vec![vec![-40.0, -40.0, 0.0]; 4] };
        let hyps = beam_search(&t, None, &DecodeConfig::default()).unwrap();
        assert!(hyps[0].labels.is_empty());
    }

    fn small_model(seed: u64, vocab: usize) -> Model {
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
        let mut m = Model::new(cfg, seed).unwrap();
        // larger weights make the distributions peaky enough to matter
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for p in m.params_mut().params_mut() {
            for v in &mut p.value {
                *v = rng.random_range(-1.5..1.5);
            }
        }
        m
    }

    fn small_lm(seed: u64, vocab: usize) -> NgramModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus: Vec<Vec<String>> = (0..30)
            .map(|_| (0..rng.random_range(0..4)).map(|_| rng.random_range(0..vocab).to_string()).collect())
            .collect();
        NgramModel::train(&corpus, 2, 0.4, &[]).unwrap()
    }

    #[test]
    fn full_beam_matches_exhaustive() {
        for seed in 0..20u64 {
            let vocab = 1 + (seed % 3) as usize;
            let model = small_model(seed, vocab);
            let lm = small_lm(seed, vocab);
            let frames = 1 + (seed % 3) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let feats = Matrix::from_vec(frames, 2, (0..frames * 2).map(|_| rng.random_range(-1.0..1.0)).collect());
            for (l1, l2) in [(0.0, 0.0), (0.5, 0.2)] {
                let cfg = DecodeConfig { lambda1: l1, lambda2: l2, beam_size: 1000, n_best: 1, ..DecodeConfig::default() };
                let beam = beam_decode(&model, Some(&lm), &feats, &cfg).unwrap();
                let exact = exhaustive_decode(&model, Some(&lm), &feats, &cfg).unwrap();
                assert_eq!(beam[0].labels, exact.labels, "seed {seed}");
                assert!((beam[0].combined - exact.combined).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lm_is_ignored_at_zero_scales() {
        let model = small_model(3, 3);
        let feats = Matrix::from_vec(4, 2, vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.5, 0.0, 0.7]);
        let cfg = DecodeConfig { n_best: 4, ..DecodeConfig::default() };
        let a = beam_decode(&model, Some(&small_lm(1, 3)), &feats, &cfg).unwrap();
        let b = beam_decode(&model, Some(&small_lm(2, 3)), &feats, &cfg).unwrap();
        let strip = |h: &[Hypothesis]| h.iter().map(|h| (h.labels.clone(), h.combined.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn ilm_changes_only_combined_scores() {
        let model = small_model(4, 3);
        let feats = Matrix::from_vec(3, 2, vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.5]);
        let lm = small_lm(4, 3);
        let base = DecodeConfig { lambda1: 0.5, beam_size: 1000, n_best: 100, ..DecodeConfig::default() };
        let with = DecodeConfig { lambda2: 0.3, ..base.clone() };
        let a = beam_decode(&model, Some(&lm), &feats, &base).unwrap();
        let b = beam_decode(&model, Some(&lm), &feats, &with).unwrap();
        for h in &a {
            let other = b.iter().find(|o| o.labels == h.labels).unwrap();
            assert_eq!(other.transducer.to_bits(), h.transducer.to_bits());
            assert_eq!(other.lm.to_bits(), h.lm.to_bits());
        }
    }

    #[test]
    fn wider_beam_never_hurts_on_seeded_cases() {
        for seed in 0..10 {
            let model = small_model(seed, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats = Matrix::from_vec(5, 2, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect());
            let mut last = f64::NEG_INFINITY;
            for beam in [1, 2, 4, 8, 1000] {
                let cfg = DecodeConfig { beam_size: beam, ..DecodeConfig::default() };
                let best = beam_decode(&model, None, &feats, &cfg).unwrap()[0].combined;
                assert!(best >= last - 1e-12, "seed {seed} beam {beam}");
                last = best;
            }
        }
    }

    #[test]
    fn empty_input_gives_empty_hypothesis() {
        let model = small_model(1, 2);
        let hyps = beam_decode(&model, None, &Matrix::zeros(0, 2), &DecodeConfig::default()).unwrap();
        assert!(hyps[0].labels.is_empty());
    }

    #[test]
    fn mapping_cases() {
        assert_eq!(apply_w_mapping(&[3, 1], &WMapping::Identity).unwrap(), vec!["3", "1"]);
        assert!(apply_w_mapping(&[], &WMapping::Identity).unwrap().is_empty());
        let lex = WMapping::Lexicon(Lexicon::parse("ab 0 1\nc 2\n").unwrap());
        assert_eq!(apply_w_mapping(&[0, 1], &lex).unwrap(), vec!["ab"]);
        assert_eq!(apply_w_mapping(&[2, 0, 1], &lex).unwrap(), vec!["c", "ab"]);
        assert!(matches!(apply_w_mapping(&[1], &lex), Err(DecodeError::Unmapped(1))));
        assert!(matches!(apply_w_mapping(&[0], &lex), Err(DecodeError::IncompleteWord)));
        assert!(apply_w_mapping(&[], &lex).unwrap().is_empty());
    }

    #[test]
    fn lexicon_search_matches_exhaustive() {
        let lex = WMapping::Lexicon(Lexicon::parse("ab 0 1\nc 2\n").unwrap());
        let corpus = vec![vec!["ab".to_string(), "c".to_string()], vec!["c".to_string()]];
        let lm = NgramModel::train(&corpus, 2, 0.3, &[]).unwrap();
        let model = small_model(9, 3);
        let feats = Matrix::from_vec(3, 2, vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.5]);
        let cfg = DecodeConfig { lambda1: 0.7, lambda2: 0.1, beam_size: 1000, n_best: 1, w_mapping: lex };
        let beam = beam_decode(&model, Some(&lm), &feats, &cfg).unwrap();
        let exact = exhaustive_decode(&model, Some(&lm), &feats, &cfg).unwrap();
        assert_eq!(beam[0].labels, exact.labels);
        assert!((beam[0].combined - exact.combined).abs() < 1e-10);
    }

    #[test]
    fn output_line_format() {
        let h = Hypothesis { labels: LabelSeq(vec![2, 0]), transducer: -1.5, lm: -2.0, ilm: -0.25, combined: -2.5 };
        let mut buf = Vec::new();
        write_hypotheses(&mut buf, "u7", &[h]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "utt u7 1 -2.5 -1.5 -2 -0.25 | 2 0\n");
    }

    #[test]
    fn scorer_matches_lattice() {
        let model = small_model(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = Matrix::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let scorer = ModelScorer::new(&model, &feats).unwrap();
        let target = LabelSeq(vec![2, 1]);
        let lat = model.joint_lattice(&model.encode(&feats, Mode::Eval).unwrap(), &target).unwrap();
        for t in 0..3 {
            for s in 0..=2 {
                assert_eq!(scorer.frame_logprobs(t, &target.labels()[..s]), lat.cell(t, s));
            }
        }
        let mut ilm = scorer.ilm_logprobs(&[1]);
        let total = ilm.clone();
        log_softmax_inplace(&mut ilm);
        for (a, b) in ilm.iter().zip(&total) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
