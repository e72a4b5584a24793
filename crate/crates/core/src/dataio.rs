//! Synthetic corpus generation, masking augmentation, length filtering and
//! on-disk dataset files.
//!
//! A split directory holds `manifest.txt` (`#manifest v1 feat_dim=<d>` then
//! `<id> <T> <S>` lines), `transcripts.txt` (`<id> <labels...>`) and
//! `feats/<id>.f32` blobs of `T·feat_dim` little-endian 32-bit floats.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::encoder::subsampled_len;
use crate::numeric::Matrix;
use crate::topology::LabelSeq;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Matrix,
    pub reference: LabelSeq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub vocab: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub min_frames_per_label: usize,
    pub max_frames_per_label: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
    /// Spread of the log-weights of each grammar row; larger is peakier.
    pub grammar_sharpness: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            vocab: 10,
            train: 2000,
            dev: 200,
            test: 200,
            min_labels: 3,
            max_labels: 8,
            min_frames_per_label: 1,
            max_frames_per_label: 3,
            feat_dim: 8,
            noise_sigma: 0.6,
            grammar_sharpness: 2.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Spec(m.into()));
        if self.vocab < 2 {
            return bad("vocab must be at least 2");
        }
        if self.min_labels > self.max_labels {
            return bad("min_labels exceeds max_labels");
        }
        if self.min_frames_per_label < 1 || self.min_frames_per_label > self.max_frames_per_label {
            return bad("frames-per-label range must satisfy 1 <= min <= max");
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be at least 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }
}

/// Label grammar and acoustic prototypes shared by all splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    /// Row `a` holds `P(next | a)`; the diagonal is zero.
    pub transitions: Vec<Vec<f64>>,
    pub prototypes: Vec<Vec<f64>>,
}

impl Grammar {
    pub fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let k = spec.vocab;
        let transitions = (0..k)
            .map(|a| {
                let mut row: Vec<f64> = (0..k)
                    .map(|b| {
                        let w = (spec.grammar_sharpness * normal.sample(&mut rng)).exp();
                        if a == b {
                            0.0
                        } else {
                            w
                        }
                    })
                    .collect();
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= z);
                row
            })
            .collect();
        let prototypes = (0..k).map(|_| (0..spec.feat_dim).map(|_| normal.sample(&mut rng)).collect()).collect();
        Self { transitions, prototypes }
    }

    fn sample_next<R: Rng>(&self, prev: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let row = &self.transitions[prev];
        let mut acc = 0.0;
        for (b, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return b;
            }
        }
        row.iter().rposition(|&p| p > 0.0).expect("row has mass")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub grammar: Grammar,
}

fn utterance_seed(seed: u64, split: u64, index: u64) -> u64 {
    // splitmix-style mixing so neighboring indices get unrelated streams
    let mut z = seed ^ (split << 56) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn generate_one(spec: &SyntheticSpec, grammar: &Grammar, id: String, seed: u64) -> (Utterance, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let len = rng.random_range(spec.min_labels..=spec.max_labels);
    let mut labels = Vec::with_capacity(len);
    for i in 0..len {
        let l = if i == 0 { rng.random_range(0..spec.vocab) } else { grammar.sample_next(labels[i - 1], &mut rng) };
        labels.push(l);
    }
    let mut durations = Vec::with_capacity(len);
    let mut data = Vec::new();
    for &l in &labels {
        let d = rng.random_range(spec.min_frames_per_label..=spec.max_frames_per_label);
        durations.push(d);
        for _ in 0..d {
            for &c in &grammar.prototypes[l] {
                let x = c + spec.noise_sigma * normal.sample(&mut rng);
                // stored as f32 on disk, so keep exactly representable values
                data.push(x as f32 as f64);
            }
        }
    }
    let frames = data.len() / spec.feat_dim;
    let utt = Utterance {
        id,
        features: Matrix::from_vec(frames, spec.feat_dim, data),
        reference: LabelSeq(labels.into_iter().map(|l| l as u32).collect()),
    };
    (utt, durations)
}

/// Generates the three splits deterministically from `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<Splits, DataError> {
    Ok(generate_with_durations(spec)?.0)
}

/// Same as [`generate`], also returning the frames-per-label of every
/// generated label (all splits, in order).
pub fn generate_with_durations(spec: &SyntheticSpec) -> Result<(Splits, Vec<usize>), DataError> {
    spec.validate()?;
    let grammar = Grammar::new(spec);
    let mut durations = Vec::new();
    let mut split = |name: &str, tag: u64, n: usize| -> Vec<Utterance> {
        (0..n)
            .map(|i| {
                let (u, d) = generate_one(spec, &grammar, format!("{name}-{i:05}"), utterance_seed(spec.seed, tag, i as u64));
                durations.extend(d);
                u
            })
            .collect()
    };
    let train = split("train", 1, spec.train);
    let dev = split("dev", 2, spec.dev);
    let test = split("test", 3, spec.test);
    Ok((Splits { train, dev, test, grammar }, durations))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MaskSpec {
    pub time_masks: usize,
    pub time_width: usize,
    pub feat_masks: usize,
    pub feat_width: usize,
}

/// Zeroes `time_masks` spans of `time_width` frames and `feat_masks` bands of
/// `feat_width` channels at seeded positions. Widths are clamped to the input.
pub fn mask_augment(features: &Matrix, mask: &MaskSpec, seed: u64) -> Matrix {
    let mut out = features.clone();
    let (rows, cols) = (features.rows(), features.cols());
    if rows == 0 || cols == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tw = mask.time_width.min(rows);
    for _ in 0..mask.time_masks {
        let start = rng.random_range(0..=rows - tw);
        for t in start..start + tw {
            out.row_mut(t).fill(0.0);
        }
    }
    let fw = mask.feat_width.min(cols);
    for _ in 0..mask.feat_masks {
        let start = rng.random_range(0..=cols - fw);
        for t in 0..rows {
            out.row_mut(t)[start..start + fw].fill(0.0);
        }
    }
    out
}

/// Removes utterances with more than `max_frames` frames or `max_labels`
/// labels; returns the survivors and the number removed.
pub fn length_filter(utts: Vec<Utterance>, max_frames: usize, max_labels: usize) -> (Vec<Utterance>, usize) {
    let before = utts.len();
    let kept: Vec<Utterance> =
        utts.into_iter().filter(|u| u.features.rows() <= max_frames && u.reference.len() <= max_labels).collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// Removes utterances whose reference is longer than the subsampled frame count.
pub fn feasibility_filter(utts: Vec<Utterance>, subsample: usize) -> (Vec<Utterance>, usize) {
    let before = utts.len();
    let kept: Vec<Utterance> = utts
        .into_iter()
        .filter(|u| u.features.rows() >= subsample && u.reference.len() <= subsampled_len(u.features.rows(), subsample))
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

pub const MANIFEST_HEADER: &str = "#manifest v1";

/// Writes one split into `dir`.
pub fn write_split(dir: &Path, utts: &[Utterance], feat_dim: usize) -> Result<(), DataError> {
    let feats_dir = dir.join("feats");
    fs::create_dir_all(&feats_dir).map_err(io_err(&feats_dir))?;
    let manifest = dir.join("manifest.txt");
    let transcripts = dir.join("transcripts.txt");
    let mut m = BufWriter::new(fs::File::create(&manifest).map_err(io_err(&manifest))?);
    let mut tr = BufWriter::new(fs::File::create(&transcripts).map_err(io_err(&transcripts))?);
    writeln!(m, "{MANIFEST_HEADER} feat_dim={feat_dim}").map_err(io_err(&manifest))?;
    for u in utts {
        writeln!(m, "{} {} {}", u.id, u.features.rows(), u.reference.len()).map_err(io_err(&manifest))?;
        writeln!(tr, "{}", format!("{} {}", u.id, u.reference).trim_end()).map_err(io_err(&transcripts))?;
        let blob = feats_dir.join(format!("{}.f32", u.id));
        let bytes: Vec<u8> = u.features.as_slice().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        fs::write(&blob, bytes).map_err(io_err(&blob))?;
    }
    m.flush().map_err(io_err(&manifest))?;
    tr.flush().map_err(io_err(&transcripts))?;
    Ok(())
}

/// Reads a split written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<Vec<Utterance>, DataError> {
    let manifest = dir.join("manifest.txt");
    let transcripts = dir.join("transcripts.txt");
    let perr = |path: &Path, line: usize, msg: &str| DataError::Parse { path: path.to_path_buf(), line, msg: msg.into() };

    let file = fs::File::open(&manifest).map_err(io_err(&manifest))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().transpose().map_err(io_err(&manifest))?.ok_or_else(|| perr(&manifest, 1, "empty manifest"))?;
    let feat_dim: usize = header
        .strip_prefix(MANIFEST_HEADER)
        .and_then(|r| r.trim().strip_prefix("feat_dim="))
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| perr(&manifest, 1, "expected `#manifest v1 feat_dim=<d>`"))?;
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(&manifest))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| s.parse::<usize>().map_err(|_| perr(&manifest, i + 2, "bad number"));
        if f.len() != 3 {
            return Err(perr(&manifest, i + 2, "expected `<id> <T> <S>`"));
        }
        entries.push((f[0].to_string(), parse(f[1])?, parse(f[2])?));
    }

    let text = fs::read_to_string(&transcripts).map_err(io_err(&transcripts))?;
    let mut refs = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(id) = parts.next() else { continue };
        let labels = parts
            .map(|t| t.parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| perr(&transcripts, i + 1, "bad label"))?;
        refs.insert(id.to_string(), LabelSeq(labels));
    }

    let mut out = Vec::with_capacity(entries.len());
    for (id, frames, labels) in entries {
        let reference = refs.remove(&id).ok_or_else(|| perr(&transcripts, 0, &format!("no transcript for {id}")))?;
        if reference.len() != labels {
            return Err(perr(&manifest, 0, &format!("{id}: manifest says {labels} labels, transcript has {}", reference.len())));
        }
        let blob = dir.join("feats").join(format!("{id}.f32"));
        let bytes = fs::read(&blob).map_err(io_err(&blob))?;
        if bytes.len() != frames * feat_dim * 4 {
            return Err(perr(&blob, 0, &format!("expected {} bytes, found {}", frames * feat_dim * 4, bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        out.push(Utterance { id, features: Matrix::from_vec(frames, feat_dim, data), reference });
    }
    Ok(out)
}

/// Token sequences (label ids as strings) for LM training.
pub fn lm_corpus(utts: &[Utterance]) -> Vec<Vec<String>> {
    utts.iter().map(|u| u.reference.labels().iter().map(u32::to_string).collect()).collect()
}
