//! Versioned key-value configuration.
//!
//! ```text
//! #transducer-config v1
//! # comment
//! key = value
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::PipelineError;
use crate::dataio::{MaskSpec, SyntheticSpec};
use crate::decoder::{DecodeConfig, WMapping};
use crate::losses::{Chunking, LossWeights};
use crate::mbr::NBestConfig;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

pub const CONFIG_HEADER: &str = "#transducer-config v1";

/// Comma-separated list of scale values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<f64>);

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let vals = s
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if vals.is_empty() {
            return Err("empty grid".into());
        }
        Ok(Grid(vals))
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(f64::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Criterion for picking the emitted checkpoint of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectBy {
    DevLoss,
    Wer,
}

impl FromStr for SelectBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dev_loss" => Ok(Self::DevLoss),
            "wer" => Ok(Self::Wer),
            _ => Err("expected `dev_loss` or `wer`".into()),
        }
    }
}

impl fmt::Display for SelectBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DevLoss => "dev_loss",
            Self::Wer => "wer",
        })
    }
}

macro_rules! config {
    ($( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr ;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $key: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $( $key: $default, )* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($key), )*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
                match key {
                    $( stringify!($key) => {
                        self.$key = value.parse().map_err(|e| PipelineError::Config(format!(
                            "bad value `{value}` for `{key}`: {e}"
                        )))?;
                    } )*
                    _ => return Err(PipelineError::Config(format!(
                        "unknown key `{key}`; valid keys: {}", Self::KEYS.join(", ")
                    ))),
                }
                Ok(())
            }

            /// Config file text with every key.
            pub fn to_text(&self) -> String {
                let mut out = String::from(CONFIG_HEADER);
                out.push('\n');
                $( out.push_str(&format!("{} = {}\n", stringify!($key), self.$key)); )*
                out
            }
        }
    };
}

config! {
    data_dir: String = "data".into();
    work_dir: String = "work".into();

    data_seed: u64 = 1;
    vocab: usize = 10;
    train_utts: usize = 2000;
    dev_utts: usize = 200;
    test_utts: usize = 200;
    min_labels: usize = 3;
    max_labels: usize = 8;
    min_frames_per_label: usize = 1;
    max_frames_per_label: usize = 3;
    feat_dim: usize = 8;
    noise_sigma: f64 = 0.6;
    grammar_sharpness: f64 = 2.0;

    model_seed: u64 = 7;
    context_k: usize = 1;
    enc_layers: usize = 2;
    enc_dim: usize = 32;
    enc_window: usize = 1;
    pred_dim: usize = 16;
    joint_dim: usize = 32;
    subsample: usize = 1;
    aux_middle_layer: usize = 0;
    dropout_stage1: f64 = 0.1;
    dropout_stage2: f64 = 0.1;
    dropout_stage3: f64 = 0.1;

    ctc_epochs: usize = 20;
    ctc_enc_dim: usize = 32;
    ctc_lr_peak: f64 = 1e-2;

    train_seed: u64 = 11;
    stage1_epochs: usize = 20;
    stage2_epochs: usize = 10;
    stage3_epochs: usize = 2;
    lr_peak_stage1: f64 = 1e-2;
    lr_peak_stage2: f64 = 3e-3;
    lr_final: f64 = 1e-6;
    constant_lr: f64 = 1e-5;
    batch_frames: usize = 2000;
    l2: f64 = 5e-6;

    label_smooth: f64 = 0.2;
    enc_scale: f64 = 1.0;
    boost_scale: f64 = 5.0;
    focal_gamma: f64 = 1.0;
    middle_scale: f64 = 0.3;
    fs_aux_scale: f64 = 0.05;
    clip_norm: f64 = 20.0;
    /// Chunked stage-1 training window in encoder frames; 0 disables chunking.
    chunk_window: usize = 0;

    mask_time_count: usize = 0;
    mask_time_width: usize = 2;
    mask_feat_count: usize = 0;
    mask_feat_width: usize = 2;

    lm_order: usize = 3;
    lm_gen_order: usize = 2;
    lm_discount: f64 = 0.5;

    beam_size: usize = 8;
    lambda1: f64 = 0.0;
    lambda2: f64 = 0.0;
    n_best: usize = 1;

    nbest_n: usize = 4;
    nbest_subset: f64 = 0.25;
    nbest_seed: u64 = 5;
    /// Shallow-fusion scale for N-best generation; negative tunes it on dev.
    nbest_lambda1: f64 = -1.0;
    nbest_beam: usize = 8;
    nbest_max_frames: usize = 1000;
    nbest_max_labels: usize = 100;
    /// LM scale inside the MBR posterior; 0 uses the generation scale.
    mbr_lambda1: f64 = 0.0;
    /// Posterior sharpening; 0 means `1/λ1`.
    mbr_beta: f64 = 0.0;

    tune_lambda1: Grid = Grid(vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0]);
    tune_lambda2: Grid = Grid(vec![0.0]);
    select_by: SelectBy = SelectBy::DevLoss;
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, first)) if first.trim() == CONFIG_HEADER => {}
            Some((_, first)) => {
                return Err(PipelineError::Config(format!(
                    "first line must be `{CONFIG_HEADER}`, found `{}`",
                    first.trim()
                )))
            }
            None => return Err(PipelineError::Config("empty config".into())),
        }
        let mut cfg = Config::default();
        for (i, line) in lines {
            let line = line.trim();
            if line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), PipelineError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override `{o}` is not `key=value`")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.synthetic_spec().validate()?;
        for stage in 1..=3 {
            self.model_config(stage).validate()?;
        }
        self.loss_weights().validate()?;
        if self.batch_frames == 0 {
            return Err(PipelineError::Config("batch_frames must be at least 1".into()));
        }
        if !(0.05..=0.1).contains(&self.fs_aux_scale) {
            log::warn!("fs_aux_scale {} is outside the usual 0.05-0.1 range", self.fs_aux_scale);
        }
        if !(0.0..=1.0).contains(&self.nbest_subset) || self.nbest_n == 0 {
            return Err(PipelineError::Config("nbest_subset must be in [0, 1] and nbest_n at least 1".into()));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.data_seed,
            vocab: self.vocab,
            train: self.train_utts,
            dev: self.dev_utts,
            test: self.test_utts,
            min_labels: self.min_labels,
            max_labels: self.max_labels,
            min_frames_per_label: self.min_frames_per_label,
            max_frames_per_label: self.max_frames_per_label,
            feat_dim: self.feat_dim,
            noise_sigma: self.noise_sigma,
            grammar_sharpness: self.grammar_sharpness,
        }
    }

    pub fn model_config(&self, stage: u32) -> ModelConfig {
        let dropout = match stage {
            1 => self.dropout_stage1,
            2 => self.dropout_stage2,
            _ => self.dropout_stage3,
        };
        ModelConfig {
            vocab: self.vocab,
            context_k: self.context_k,
            feat_dim: self.feat_dim,
            enc_layers: self.enc_layers,
            enc_dim: self.enc_dim,
            enc_window: self.enc_window,
            pred_dim: self.pred_dim,
            joint_dim: self.joint_dim,
            subsample: self.subsample,
            dropout,
            aux_middle_layer: self.aux_middle_layer,
        }
    }

    pub fn ctc_model_config(&self) -> ModelConfig {
        ModelConfig { enc_dim: self.ctc_enc_dim, enc_layers: 1, aux_middle_layer: 0, dropout: 0.0, ..self.model_config(1) }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            label_smooth: self.label_smooth,
            enc_scale: self.enc_scale,
            boost_scale: self.boost_scale,
            focal_gamma: self.focal_gamma,
            middle_scale: self.middle_scale,
            fs_aux_scale: self.fs_aux_scale,
            clip_norm: self.clip_norm,
        }
    }

    pub fn chunking(&self) -> Option<Chunking> {
        (self.chunk_window > 0).then_some(Chunking { window_len: self.chunk_window })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { l2: self.l2, ..AdamConfig::default() }
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            time_masks: self.mask_time_count,
            time_width: self.mask_time_width,
            feat_masks: self.mask_feat_count,
            feat_width: self.mask_feat_width,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            beam_size: self.beam_size,
            n_best: self.n_best,
            w_mapping: WMapping::Identity,
        }
    }

    pub fn nbest_config(&self, lambda1: f64) -> NBestConfig {
        NBestConfig {
            n: self.nbest_n,
            subset_fraction: self.nbest_subset,
            seed: self.nbest_seed,
            lambda1,
            beam_size: self.nbest_beam,
            max_frames: self.nbest_max_frames,
            max_labels: self.nbest_max_labels,
            w_mapping: WMapping::Identity,
        }
    }

    pub fn paths(&self) -> Paths {
        Paths { data: PathBuf::from(&self.data_dir), work: PathBuf::from(&self.work_dir) }
    }
}

/// Artifact locations derived from the data and work directories.
#[derive(Debug, Clone)]
pub struct Paths {
    pub data: PathBuf,
    pub work: PathBuf,
}

impl Paths {
    pub fn split(&self, name: &str) -> PathBuf {
        self.data.join(name)
    }

    pub fn lm(&self) -> PathBuf {
        self.data.join("lm.arpa")
    }

    pub fn lm_gen(&self) -> PathBuf {
        self.data.join("lm_gen.arpa")
    }

    pub fn ctc_checkpoint(&self) -> PathBuf {
        self.work.join("ctc.ckpt")
    }

    pub fn alignments(&self, split: &str) -> PathBuf {
        self.work.join(format!("alignments_{split}.txt"))
    }

    pub fn checkpoint(&self, stage: u32) -> PathBuf {
        self.work.join(format!("stage{stage}.ckpt"))
    }

    pub fn metrics(&self, stage: &str) -> PathBuf {
        self.work.join(format!("metrics_{stage}.tsv"))
    }

    pub fn nbest(&self, split: &str) -> PathBuf {
        self.work.join(format!("nbest_{split}.txt"))
    }

    pub fn risk_log(&self) -> PathBuf {
        self.work.join("stage3_risk.tsv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = Config::default();
        cfg.lambda1 = 0.35;
        cfg.tune_lambda1 = Grid(vec![0.0, 0.25]);
        let back = Config::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = Config::parse(&format!("{CONFIG_HEADER}\nbogus = 1\n")).unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("lr_peak_stage1") && err.contains("beam_size"));
    }

    #[test]
    fn header_and_values_are_checked() {
        assert!(Config::parse("beam_size = 3\n").is_err());
        let err = Config::parse(&format!("{CONFIG_HEADER}\nbeam_size = many\n")).unwrap_err().to_string();
        assert!(err.contains("beam_size"));
        let cfg = Config::parse(&format!("{CONFIG_HEADER}\n# note\n\nbeam_size = 3\n")).unwrap();
        assert_eq!(cfg.beam_size, 3);
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = Config::default();
        cfg.apply_overrides(&["lambda1=0.5", "lambda1 = 0.7", "select_by=wer"]).unwrap();
        assert_eq!(cfg.lambda1, 0.7);
        assert_eq!(cfg.select_by, SelectBy::Wer);
        assert!(cfg.apply_overrides(&["lambda1"]).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = Config::load(Path::new("/nonexistent/x.cfg")).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/x.cfg"));
    }
}
