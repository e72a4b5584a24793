//! Recognition, error-rate reporting and decode-scale grid search.

use std::io::Write;

use log::warn;

use super::PipelineError;
use crate::dataio::Utterance;
use crate::decoder::{apply_w_mapping, beam_decode, DecodeConfig, Hypothesis};
use crate::lm::NgramModel;
use crate::mbr::{levenshtein, EditStats};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct UttResult {
    pub id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub stats: EditStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub utterances: Vec<UttResult>,
    pub totals: EditStats,
    pub ref_tokens: usize,
    /// Percentages of the reference token count.
    pub wer: f64,
    pub sub: f64,
    pub del: f64,
    pub ins: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl EvalReport {
    pub fn from_utterances(utterances: Vec<UttResult>, lambda1: f64, lambda2: f64) -> Self {
        let mut totals = EditStats::default();
        let mut ref_tokens = 0;
        for u in &utterances {
            totals.add(&u.stats);
            ref_tokens += u.reference.len();
        }
        let pct = |n: usize| 100.0 * n as f64 / ref_tokens.max(1) as f64;
        Self {
            wer: pct(totals.sub + totals.del + totals.ins),
            sub: pct(totals.sub),
            del: pct(totals.del),
            ins: pct(totals.ins),
            utterances,
            totals,
            ref_tokens,
            lambda1,
            lambda2,
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "wer={:.2} sub={:.2} del={:.2} ins={:.2} errors={} ref_tokens={} lambda1={} lambda2={}",
            self.wer,
            self.sub,
            self.del,
            self.ins,
            self.totals.distance,
            self.ref_tokens,
            self.lambda1,
            self.lambda2
        )
    }

    /// Summary line followed by one tab-separated line per utterance.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.summary_line())?;
        for u in &self.utterances {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                u.id,
                u.stats.sub,
                u.stats.del,
                u.stats.ins,
                u.reference.join(" "),
                u.hypothesis.join(" ")
            )?;
        }
        Ok(())
    }
}

/// Ranked hypotheses per utterance. A failing utterance yields an empty list.
pub fn decode_split(
    model: &Model,
    lm: Option<&NgramModel>,
    utts: &[Utterance],
    cfg: &DecodeConfig,
) -> Result<Vec<(String, Vec<Hypothesis>)>, PipelineError> {
    cfg.validate()?;
    Ok(utts
        .iter()
        .map(|u| {
            let hyps = beam_decode(model, lm, &u.features, cfg).unwrap_or_else(|e| {
                warn!("decoding {} failed: {e}", u.id);
                Vec::new()
            });
            (u.id.clone(), hyps)
        })
        .collect())
}

/// Decodes every utterance and scores the 1-best after W mapping.
pub fn evaluate(
    model: &Model,
    lm: Option<&NgramModel>,
    utts: &[Utterance],
    cfg: &DecodeConfig,
) -> Result<EvalReport, PipelineError> {
    let single = DecodeConfig { n_best: 1, ..cfg.clone() };
    let decoded = decode_split(model, lm, utts, &single)?;
    let mut results = Vec::with_capacity(utts.len());
    for (u, (_, hyps)) in utts.iter().zip(decoded) {
        let reference = apply_w_mapping(u.reference.labels(), &cfg.w_mapping)?;
        let hypothesis = match hyps.first() {
            Some(h) => apply_w_mapping(h.labels.labels(), &cfg.w_mapping).unwrap_or_else(|e| {
                warn!("hypothesis of {} cannot be mapped to words: {e}", u.id);
                Vec::new()
            }),
            None => Vec::new(),
        };
        let stats = levenshtein(&reference, &hypothesis);
        results.push(UttResult { id: u.id.clone(), reference, hypothesis, stats });
    }
    Ok(EvalReport::from_utterances(results, cfg.lambda1, cfg.lambda2))
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub lambda1: f64,
    pub lambda2: f64,
    pub report: EvalReport,
    /// `(λ1, λ2, WER)` for every grid point, in evaluation order.
    pub table: Vec<(f64, f64, f64)>,
}

/// Exhaustive grid search for the WER-minimizing scales. Ties go to the
/// smaller λ1, then the smaller λ2.
pub fn tune_scales(
    model: &Model,
    lm: Option<&NgramModel>,
    utts: &[Utterance],
    grid1: &[f64],
    grid2: &[f64],
    base: &DecodeConfig,
) -> Result<TuneResult, PipelineError> {
    if grid1.is_empty() || grid2.is_empty() {
        return Err(PipelineError::Config("scale grid must not be empty".into()));
    }
    let mut best: Option<EvalReport> = None;
    let mut table = Vec::new();
    for &lambda1 in grid1 {
        for &lambda2 in grid2 {
            let cfg = DecodeConfig { lambda1, lambda2, ..base.clone() };
            let report = evaluate(model, lm, utts, &cfg)?;
            table.push((lambda1, lambda2, report.wer));
            let better = match &best {
                None => true,
                Some(b) => {
                    let key = |r: &EvalReport| (r.totals.sub + r.totals.del + r.totals.ins, r.lambda1, r.lambda2);
                    let (e, l1, l2) = key(&report);
                    let (be, bl1, bl2) = key(b);
                    e < be || (e == be && (l1 < bl1 || (l1 == bl1 && l2 < bl2)))
                }
            };
            if better {
                best = Some(report);
            }
        }
    }
    let report = best.expect("grid is non-empty");
    Ok(TuneResult { lambda1: report.lambda1, lambda2: report.lambda2, report, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::LabelSeq;

    fn utt(id: &str, r: &[u32], h: &[u32]) -> UttResult {
        let words = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>();
        let (reference, hypothesis) = (words(r), words(h));
        let stats = levenshtein(&reference, &hypothesis);
        UttResult { id: id.into(), reference, hypothesis, stats }
    }

    #[test]
    fn perfect_and_empty_hypotheses() {
        let perfect = EvalReport::from_utterances(vec![utt("a", &[1, 2], &[1, 2]), utt("b", &[3], &[3])], 0.0, 0.0);
        assert_eq!(perfect.wer, 0.0);
        let empty = EvalReport::from_utterances(vec![utt("a", &[1, 2], &[]), utt("b", &[3], &[])], 0.0, 0.0);
        assert_eq!(empty.wer, 100.0);
        assert_eq!(empty.del, 100.0);
        assert_eq!(empty.sub + empty.ins, 0.0);
    }

    #[test]
    fn totals_are_sums_of_utterances() {
        let r = EvalReport::from_utterances(
            vec![utt("a", &[1, 2, 3], &[1, 4]), utt("b", &[3], &[3, 3, 0]), utt("c", &[0, 1], &[1, 0])],
            0.3,
            0.1,
        );
        let sum = |f: fn(&EditStats) -> usize| r.utterances.iter().map(|u| f(&u.stats)).sum::<usize>();
        assert_eq!(r.totals.sub, sum(|s| s.sub));
        assert_eq!(r.totals.del, sum(|s| s.del));
        assert_eq!(r.totals.ins, sum(|s| s.ins));
        assert_eq!(r.ref_tokens, 6);
        assert!((r.wer - (r.sub + r.del + r.ins)).abs() < 1e-12);
        assert!((r.wer - 100.0 * r.totals.distance as f64 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn report_lines() {
        let r = EvalReport::from_utterances(vec![utt("a", &[1, 2], &[1])], 0.5, 0.0);
        let mut buf = Vec::new();
        r.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("wer=50.00 sub=0.00 del=50.00 ins=0.00 errors=1 ref_tokens=2"));
        assert!(text.ends_with("a\t0\t1\t0\t1 2\t1\n"));
    }

    fn fixture() -> (Model, Vec<Utterance>) {
        let model = Model::new(crate::model::ModelConfig { vocab: 3, feat_dim: 2, dropout: 0.0, ..Default::default() }, 4).unwrap();
        let utts = (0..4)
            .map(|i| Utterance {
                id: format!("u{i}"),
                features: crate::numeric::Matrix::from_vec(3, 2, (0..6).map(|j| ((i * 6 + j) as f64 * 0.37).sin()).collect()),
                reference: LabelSeq(vec![i % 3, (i + 1) % 3]),
            })
            .collect();
        (model, utts)
    }

    #[test]
    fn tuning_is_consistent_with_evaluate() {
        let (model, utts) = fixture();
        let single = tune_scales(&model, None, &utts, &[0.4], &[0.0], &DecodeConfig::default()).unwrap();
        assert_eq!(single.lambda1, 0.4);
        // without an LM every λ1 decodes the same, so the tie rule picks the smallest
        let t = tune_scales(&model, None, &utts, &[0.5, 0.0, 0.2], &[0.0], &DecodeConfig::default()).unwrap();
        assert_eq!(t.lambda1, 0.0);
        let again = evaluate(&model, None, &utts, &DecodeConfig { lambda1: t.lambda1, ..DecodeConfig::default() }).unwrap();
        assert_eq!(again.wer, t.report.wer);
        assert_eq!(t.table.len(), 3);
    }
}
