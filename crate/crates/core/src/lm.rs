//! Count-based n-gram LM with absolute discounting and backoff, plus the
//! ARPA text format.
//!
//! Probabilities are held as base-10 logs (the ARPA convention); scoring
//! functions return natural logs.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use thiserror::Error;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

const BOS_ID: u32 = 0;
const EOS_ID: u32 = 1;
const UNK_ID: u32 = 2;

/// Log10 probability assigned to `<s>`, which is never predicted.
const BOS_LOGPROB: f64 = -99.0;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("n-gram order must be at least 1")]
    Order,
    #[error("discount {0} not in [0, 1)")]
    Discount(f64),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("ARPA line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    logp: f64,
    backoff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    words: Vec<String>,
    index: HashMap<String, u32>,
    /// `tables[m-1]` maps an m-gram (context then word) to its entry.
    tables: Vec<BTreeMap<Vec<u32>, Entry>>,
}

fn ln10(x: f64) -> f64 {
    x * std::f64::consts::LN_10
}

impl NgramModel {
    /// Trains an order-`order` model on `corpus`. `extra_vocab` adds word types
    /// that should be predictable even if unseen.
    pub fn train(corpus: &[Vec<String>], order: usize, discount: f64, extra_vocab: &[String]) -> Result<Self, LmError> {
        if order < 1 {
            return Err(LmError::Order);
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(LmError::Discount(discount));
        }
        if corpus.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let mut words: Vec<String> = vec![BOS.into(), EOS.into(), UNK.into()];
        let mut index: HashMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        for w in extra_vocab.iter().chain(corpus.iter().flatten()) {
            if !index.contains_key(w) {
                index.insert(w.clone(), words.len() as u32);
                words.push(w.clone());
            }
        }

        // counts[m-1]: m-gram -> count, over sentences padded with <s> ... </s>
        let mut counts: Vec<BTreeMap<Vec<u32>, u64>> = vec![BTreeMap::new(); order];
        for sent in corpus {
            let mut ids = vec![BOS_ID];
            ids.extend(sent.iter().map(|w| index[w]));
            ids.push(EOS_ID);
            for end in 1..ids.len() {
                for m in 1..=order.min(end + 1) {
                    *counts[m - 1].entry(ids[end + 1 - m..=end].to_vec()).or_default() += 1;
                }
            }
        }

        let predictable: Vec<u32> = (0..words.len() as u32).filter(|&w| w != BOS_ID).collect();
        let mut model = Self { order, words, index, tables: vec![BTreeMap::new(); order] };

        // Unigrams: discounted counts plus the freed mass spread uniformly.
        let total: u64 = counts[0].values().sum();
        let types = counts[0].len() as f64;
        let floor = discount * types / total as f64 / predictable.len() as f64;
        model.tables[0].insert(vec![BOS_ID], Entry { logp: BOS_LOGPROB, backoff: None });
        for &w in &predictable {
            let c = counts[0].get(&vec![w]).copied().unwrap_or(0) as f64;
            let p = (c - discount).max(0.0) / total as f64 + floor;
            model.tables[0].insert(vec![w], Entry { logp: p.log10(), backoff: None });
        }

        for m in 2..=order {
            let mut by_context: BTreeMap<Vec<u32>, Vec<(u32, u64)>> = BTreeMap::new();
            for (gram, &c) in &counts[m - 1] {
                by_context.entry(gram[..m - 1].to_vec()).or_default().push((gram[m - 1], c));
            }
            for (ctx, seen) in by_context {
                let c_ctx: u64 = seen.iter().map(|(_, c)| c).sum();
                let lower_seen: f64 = seen.iter().map(|&(w, _)| model.cond_prob10(&ctx[1..], w)).map(|l| 10f64.powf(l)).sum();
                let leftover_lower = 1.0 - lower_seen;
                // When every predictable word was seen there is nowhere to back off to.
                let d = if leftover_lower > 1e-12 && seen.len() < predictable.len() { discount } else { 0.0 };
                for &(w, c) in &seen {
                    let p = (c as f64 - d) / c_ctx as f64;
                    let mut key = ctx.clone();
                    key.push(w);
                    model.tables[m - 1].insert(key, Entry { logp: p.log10(), backoff: None });
                }
                let alpha = if d > 0.0 { d * seen.len() as f64 / c_ctx as f64 / leftover_lower } else { 0.0 };
                model.tables[m - 2].get_mut(&ctx).expect("context was counted as a lower-order gram").backoff =
                    Some(alpha.log10());
            }
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Vocabulary in id order, including `<s>`, `</s>` and `<unk>`.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Id of `word`, or of `<unk>` when out of vocabulary.
    pub fn word_id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn bos(&self) -> u32 {
        BOS_ID
    }

    pub fn eos(&self) -> u32 {
        EOS_ID
    }

    fn cond_prob10(&self, history: &[u32], w: u32) -> f64 {
        let keep = history.len().min(self.order - 1);
        let ctx = &history[history.len() - keep..];
        let mut key = ctx.to_vec();
        key.push(w);
        if let Some(e) = self.tables[ctx.len()].get(&key) {
            return e.logp;
        }
        if ctx.is_empty() {
            // only reachable for ids outside the vocabulary
            return self.tables[0][&vec![UNK_ID]].logp;
        }
        let backoff = self.tables[ctx.len() - 1].get(ctx).and_then(|e| e.backoff).unwrap_or(0.0);
        backoff + self.cond_prob10(&ctx[1..], w)
    }

    /// Natural-log `P(w | history)`; `history` is the id sequence so far,
    /// starting with `<s>`.
    pub fn cond_logprob(&self, history: &[u32], w: u32) -> f64 {
        ln10(self.cond_prob10(history, w))
    }

    /// Natural-log probability of a whole sentence, including `</s>`.
    pub fn score<S: AsRef<str>>(&self, sentence: &[S]) -> f64 {
        let ids: Vec<u32> = sentence.iter().map(|w| self.word_id(w.as_ref())).collect();
        self.score_ids(&ids)
    }

    pub fn score_ids(&self, ids: &[u32]) -> f64 {
        let mut history = vec![BOS_ID];
        let mut total = 0.0;
        for &w in ids.iter().chain(std::iter::once(&EOS_ID)) {
            total += self.cond_logprob(&history, w);
            history.push(w);
        }
        total
    }

    /// Contexts with explicit entries, for normalization checks.
    pub fn contexts(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new()];
        for table in &self.tables[..self.order - 1] {
            out.extend(table.iter().filter(|(_, e)| e.backoff.is_some()).map(|(k, _)| k.clone()));
        }
        out
    }

    /// `Σ_w P(w | context)` over every predictable word.
    pub fn context_mass(&self, context: &[u32]) -> f64 {
        (0..self.words.len() as u32).filter(|&w| w != BOS_ID).map(|w| 10f64.powf(self.cond_prob10(context, w))).sum()
    }

    pub fn write_arpa<W: Write>(&self, mut w: W) -> Result<(), LmError> {
        writeln!(w, "\\data\\")?;
        for (m, table) in self.tables.iter().enumerate() {
            writeln!(w, "ngram {}={}", m + 1, table.len())?;
        }
        for (m, table) in self.tables.iter().enumerate() {
            writeln!(w)?;
            writeln!(w, "\\{}-grams:", m + 1)?;
            // unigrams in id order so the vocabulary order survives a round trip
            let rows: Vec<(&Vec<u32>, &Entry)> = if m == 0 {
                let mut r: Vec<_> = table.iter().collect();
                r.sort_by_key(|(k, _)| k[0]);
                r
            } else {
                table.iter().collect()
            };
            for (key, e) in rows {
                let toks: Vec<&str> = key.iter().map(|&id| self.words[id as usize].as_str()).collect();
                write!(w, "{}\t{}", e.logp, toks.join(" "))?;
                if let Some(b) = e.backoff {
                    write!(w, "\t{b}")?;
                }
                writeln!(w)?;
            }
        }
        writeln!(w)?;
        writeln!(w, "\\end\\")?;
        w.flush()?;
        Ok(())
    }

    pub fn read_arpa<R: BufRead>(r: R) -> Result<Self, LmError> {
        let err = |line: usize, msg: &str| LmError::Parse { line, msg: msg.into() };
        let mut declared: Vec<usize> = Vec::new();
        let mut tables: Vec<BTreeMap<Vec<u32>, Entry>> = Vec::new();
        let mut words: Vec<String> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        let mut section: Option<usize> = None;
        let mut in_data = false;
        let mut ended = false;
        for (i, line) in r.lines().enumerate() {
            let n = i + 1;
            let line = line?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if ended {
                return Err(err(n, "content after \\end\\"));
            }
            if line == "\\data\\" {
                in_data = true;
                continue;
            }
            if line == "\\end\\" {
                ended = true;
                continue;
            }
            if let Some(rest) = line.strip_prefix('\\').and_then(|l| l.strip_suffix("-grams:")) {
                let m: usize = rest.parse().map_err(|_| err(n, "bad section header"))?;
                if m != tables.len() + 1 || m > declared.len() {
                    return Err(err(n, "unexpected section order"));
                }
                tables.push(BTreeMap::new());
                section = Some(m);
                in_data = false;
                continue;
            }
            if in_data {
                let spec = line.strip_prefix("ngram ").ok_or_else(|| err(n, "expected `ngram m=count`"))?;
                let (m, c) = spec.split_once('=').ok_or_else(|| err(n, "expected `ngram m=count`"))?;
                let m: usize = m.trim().parse().map_err(|_| err(n, "bad order"))?;
                if m != declared.len() + 1 {
                    return Err(err(n, "orders must be declared in sequence"));
                }
                declared.push(c.trim().parse().map_err(|_| err(n, "bad count"))?);
                continue;
            }
            let m = section.ok_or_else(|| err(n, "entry outside a section"))?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(err(n, "expected `logprob<TAB>tokens[<TAB>backoff]`"));
            }
            let logp: f64 = fields[0].parse().map_err(|_| err(n, "bad log-probability"))?;
            let backoff = match fields.get(2) {
                Some(b) => Some(b.parse().map_err(|_| err(n, "bad backoff"))?),
                None => None,
            };
            let toks: Vec<&str> = fields[1].split(' ').collect();
            if toks.len() != m {
                return Err(err(n, "token count does not match section order"));
            }
            let mut key = Vec::with_capacity(m);
            for t in toks {
                let id = if m == 1 {
                    if index.contains_key(t) {
                        return Err(err(n, "duplicate unigram"));
                    }
                    index.insert(t.to_string(), words.len() as u32);
                    words.push(t.to_string());
                    words.len() as u32 - 1
                } else {
                    *index.get(t).ok_or_else(|| err(n, "token missing from unigrams"))?
                };
                key.push(id);
            }
            tables[m - 1].insert(key, Entry { logp, backoff });
        }
        if !ended || declared.is_empty() || tables.len() != declared.len() {
            return Err(err(0, "truncated ARPA file"));
        }
        for (m, (t, &d)) in tables.iter().zip(&declared).enumerate() {
            if t.len() != d {
                return Err(err(0, &format!("{}-gram count {} does not match header {}", m + 1, t.len(), d)));
            }
        }
        if words.first().map(String::as_str) != Some(BOS)
            || words.get(1).map(String::as_str) != Some(EOS)
            || words.get(2).map(String::as_str) != Some(UNK)
        {
            return Err(err(0, "vocabulary must start with <s> </s> <unk>"));
        }
        Ok(Self { order: tables.len(), words, index, tables })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), LmError> {
        self.write_arpa(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, LmError> {
        Self::read_arpa(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
