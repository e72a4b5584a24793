//! Tiny monotonic transducer: windowed-affine encoder, context-k feed-forward
//! prediction network and additive joint network, with exact reverse-mode
//! gradients for every forward path the losses use.

pub mod checkpoint;
pub mod ctc_net;
pub mod encoder;
pub mod params;

use thiserror::Error;

use crate::numeric::{affine, affine_backward, log_softmax_inplace, Matrix};
use crate::topology::{JointLogLattice, LabelSeq, TopologyError};

pub use params::{Gradients, Param, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty feature input")]
    EmptyInput,
    #[error("{frames} input frames is fewer than the subsampling factor {subsample}")]
    TooFewFrames { frames: usize, subsample: usize },
    #[error("feature dimension {got} does not match configured {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("backward called without a cached encoder forward pass")]
    MissingForward,
    #[error("auxiliary head `{0}` is not present in the parameter store")]
    MissingHead(&'static str),
    #[error("parameter {name}: expected dims {expected:?}, found {found:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("parameter {0} missing from store")]
    MissingParam(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Label vocabulary size `V`; blank is index `V`.
    pub vocab: usize,
    /// Label context size `k` of the prediction network.
    pub context_k: usize,
    pub feat_dim: usize,
    pub enc_layers: usize,
    pub enc_dim: usize,
    /// Frames on each side of the center frame seen by an encoder layer.
    pub enc_window: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    pub subsample: usize,
    pub dropout: f64,
    /// Encoder layer whose output feeds the middle auxiliary head.
    pub aux_middle_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 10,
            context_k: 1,
            feat_dim: 8,
            enc_layers: 2,
            enc_dim: 32,
            enc_window: 1,
            pred_dim: 16,
            joint_dim: 32,
            subsample: 1,
            dropout: 0.1,
            aux_middle_layer: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab", self.vocab),
            ("context_k", self.context_k),
            ("feat_dim", self.feat_dim),
            ("enc_layers", self.enc_layers),
            ("enc_dim", self.enc_dim),
            ("pred_dim", self.pred_dim),
            ("joint_dim", self.joint_dim),
            ("subsample", self.subsample),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.aux_middle_layer >= self.enc_layers {
            return Err(ModelError::InvalidConfig(format!(
                "aux_middle_layer {} must be below enc_layers {}",
                self.aux_middle_layer, self.enc_layers
            )));
        }
        Ok(())
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    /// Expected `(name, dims)` of every tensor, in store order.
    pub fn param_shapes(&self, with_aux: bool) -> Vec<(String, Vec<usize>)> {
        let out = self.vocab + 1;
        let mut shapes = Vec::new();
        let mut d_in = self.feat_dim;
        for l in 0..self.enc_layers {
            shapes.push((format!("enc.{l}.weight"), vec![self.enc_dim, (2 * self.enc_window + 1) * d_in]));
            shapes.push((format!("enc.{l}.bias"), vec![self.enc_dim]));
            d_in = self.enc_dim;
        }
        shapes.push(("pred.embedding".into(), vec![self.vocab + 1, self.pred_dim]));
        shapes.push(("pred.hidden.weight".into(), vec![self.pred_dim, self.context_k * self.pred_dim]));
        shapes.push(("pred.hidden.bias".into(), vec![self.pred_dim]));
        shapes.push(("pred.out.weight".into(), vec![self.enc_dim, self.pred_dim]));
        shapes.push(("joint.hidden.weight".into(), vec![self.joint_dim, self.enc_dim]));
        shapes.push(("joint.hidden.bias".into(), vec![self.joint_dim]));
        shapes.push(("joint.out.weight".into(), vec![out, self.joint_dim]));
        shapes.push(("joint.out.bias".into(), vec![out]));
        if with_aux {
            for head in ["final", "middle"] {
                shapes.push((format!("aux.{head}.weight"), vec![out, self.enc_dim]));
                shapes.push((format!("aux.{head}.bias"), vec![out]));
            }
        }
        shapes
    }
}

/// Which auxiliary encoder softmax head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxHead {
    Final,
    Middle,
}

impl AuxHead {
    fn name(self) -> &'static str {
        match self {
            AuxHead::Final => "final",
            AuxHead::Middle => "middle",
        }
    }
}

/// Dropout behavior of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub h: Matrix,
    pub middle: Matrix,
}

impl EncoderOutput {
    pub fn frames(&self) -> usize {
        self.h.rows()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: usize,
    pred_w: usize,
    pred_b: usize,
    pred_out: usize,
    joint_w1: usize,
    joint_b1: usize,
    joint_w2: usize,
    joint_b2: usize,
    aux_final: Option<(usize, usize)>,
    aux_middle: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    enc: Vec<(usize, usize)>,
    layout: Layout,
}

/// Prediction network activations for one label history.
#[derive(Debug, Clone)]
struct PredStep {
    tokens: Vec<usize>,
    embedded: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
    /// `W1 g + b1`, the history half of the joint pre-activation.
    bias: Vec<f64>,
}

/// Cached joint-network forward over a set of `(t, s)` cells for one target.
#[derive(Debug, Clone)]
pub struct JointTrace {
    target: LabelSeq,
    cells: Vec<(usize, usize)>,
    steps: Vec<PredStep>,
    hidden: Vec<f64>,
    logp: Vec<f64>,
    grad: Vec<f64>,
    full_lattice: Option<usize>,
    width: usize,
}

impl JointTrace {
    pub fn target(&self) -> &LabelSeq {
        &self.target
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn logp(&self, cell: usize) -> &[f64] {
        &self.logp[cell * self.width..(cell + 1) * self.width]
    }

    /// Upstream gradient w.r.t. the cell log-probabilities, to be filled by a loss.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    /// The full lattice when this trace covers every `(t, s)` cell.
    pub fn lattice(&self) -> Option<JointLogLattice> {
        let frames = self.full_lattice?;
        Some(JointLogLattice::new(frames, self.target.len(), self.width - 1, self.logp.clone()).expect("lattice shape"))
    }
}

/// Cached auxiliary head forward.
#[derive(Debug, Clone)]
pub struct AuxTrace {
    head: AuxHead,
    logp: Matrix,
    grad: Matrix,
}

impl AuxTrace {
    pub fn head(&self) -> AuxHead {
        self.head
    }

    pub fn logp(&self) -> &Matrix {
        &self.logp
    }

    pub fn grad_mut(&mut self) -> &mut Matrix {
        &mut self.grad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointHandle(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuxHandle(usize);

struct EncoderState {
    layers: Vec<encoder::LayerTrace>,
    output: EncoderOutput,
    frame_proj: Matrix,
}

/// Everything a backward pass needs: the encoder activations plus every joint
/// and auxiliary-head evaluation made on top of them.
#[derive(Default)]
pub struct ForwardCache {
    encoder: Option<EncoderState>,
    joints: Vec<JointTrace>,
    aux: Vec<AuxTrace>,
}

impl ForwardCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn encoder_output(&self) -> Option<&EncoderOutput> {
        self.encoder.as_ref().map(|e| &e.output)
    }

    pub fn joint(&self, h: JointHandle) -> &JointTrace {
        &self.joints[h.0]
    }

    pub fn joint_mut(&mut self, h: JointHandle) -> &mut JointTrace {
        &mut self.joints[h.0]
    }

    pub fn aux(&self, h: AuxHandle) -> &AuxTrace {
        &self.aux[h.0]
    }

    pub fn aux_mut(&mut self, h: AuxHandle) -> &mut AuxTrace {
        &mut self.aux[h.0]
    }
}

fn log_softmax_backward(logp: &[f64], dlogp: &[f64], out: &mut [f64]) {
    let total: f64 = dlogp.iter().sum();
    for ((o, lp), g) in out.iter_mut().zip(logp).zip(dlogp) {
        *o = g - lp.exp() * total;
    }
}

impl Model {
    /// Glorot-initialized model with auxiliary heads.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        use rand::SeedableRng;
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, dims) in config.param_shapes(true) {
            params.add(name, &dims);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        params.init_uniform(&mut rng);
        Self::from_params(config, params)
    }

    /// Wraps an existing store, checking every tensor shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let with_aux = params.get("aux.final.weight").is_some();
        let expected = config.param_shapes(with_aux);
        for (name, dims) in &expected {
            let p = params.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if &p.dims != dims {
                return Err(ModelError::ParamShape { name: name.clone(), expected: dims.clone(), found: p.dims.clone() });
            }
        }
        let idx = |n: &str| params.index_of(n).expect("checked above");
        let enc = (0..config.enc_layers)
            .map(|l| (idx(&format!("enc.{l}.weight")), idx(&format!("enc.{l}.bias"))))
            .collect();
        let aux = |h: &str| {
            Some((params.index_of(&format!("aux.{h}.weight"))?, params.index_of(&format!("aux.{h}.bias"))?))
        };
        let layout = Layout {
            emb: idx("pred.embedding"),
            pred_w: idx("pred.hidden.weight"),
            pred_b: idx("pred.hidden.bias"),
            pred_out: idx("pred.out.weight"),
            joint_w1: idx("joint.hidden.weight"),
            joint_b1: idx("joint.hidden.bias"),
            joint_w2: idx("joint.out.weight"),
            joint_b2: idx("joint.out.bias"),
            aux_final: aux("final"),
            aux_middle: aux("middle"),
        };
        Ok(Self { config, params, enc, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<(), ModelError> {
        let mut cfg = self.config.clone();
        cfg.dropout = p;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn has_aux_heads(&self) -> bool {
        self.layout.aux_final.is_some() && self.layout.aux_middle.is_some()
    }

    /// Drops the training-only auxiliary heads.
    pub fn without_aux_heads(&self) -> Model {
        let mut store = ParamStore::new();
        for p in self.params.params().iter().filter(|p| !p.name.starts_with("aux.")) {
            store.push(p.clone());
        }
        Model::from_params(self.config.clone(), store).expect("subset of a valid store")
    }

    pub fn to_checkpoint(&self, stage: u32) -> checkpoint::Checkpoint {
        checkpoint::Checkpoint {
            kind: checkpoint::CheckpointKind::Transducer,
            stage,
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &checkpoint::Checkpoint) -> Result<Self, ModelError> {
        if ck.kind != checkpoint::CheckpointKind::Transducer {
            return Err(ModelError::InvalidConfig("checkpoint is not a transducer model".into()));
        }
        Self::from_params(ck.config.clone(), ck.params.clone())
    }

    /// Stage hook for normalization-statistics freezing. The toy model has no
    /// normalization layers, so there is nothing to freeze.
    pub fn freeze_normalization(&mut self) {}

    fn check_features(&self, features: &Matrix) -> Result<(), ModelError> {
        if features.rows() == 0 {
            return Err(ModelError::EmptyInput);
        }
        if features.cols() != self.config.feat_dim {
            return Err(ModelError::FeatureDim { got: features.cols(), expected: self.config.feat_dim });
        }
        if features.rows() < self.config.subsample {
            return Err(ModelError::TooFewFrames { frames: features.rows(), subsample: self.config.subsample });
        }
        Ok(())
    }

    fn run_encoder(&self, features: &Matrix, mode: Mode) -> Result<Vec<encoder::LayerTrace>, ModelError> {
        self.check_features(features)?;
        let mut rng = match mode {
            Mode::Train { dropout_seed } => Some(encoder::dropout_rng(dropout_seed)),
            Mode::Eval => None,
        };
        let mut layers = Vec::with_capacity(self.config.enc_layers);
        let mut input = features.clone();
        for (l, &(w, b)) in self.enc.iter().enumerate() {
            let stride = if l == 0 { self.config.subsample } else { 1 };
            let dropout = rng.as_mut().map(|r| (self.config.dropout, r));
            let tr = encoder::layer_forward(
                self.params.value(w),
                self.params.value(b),
                input,
                self.config.enc_window,
                stride,
                dropout,
            );
            input = tr.output.clone();
            layers.push(tr);
        }
        Ok(layers)
    }

    fn output_of(&self, layers: &[encoder::LayerTrace]) -> EncoderOutput {
        EncoderOutput {
            h: layers.last().expect("at least one layer").output.clone(),
            middle: layers[self.config.aux_middle_layer].output.clone(),
        }
    }

    /// Encoder forward pass without caching.
    pub fn encode(&self, features: &Matrix, mode: Mode) -> Result<EncoderOutput, ModelError> {
        let layers = self.run_encoder(features, mode)?;
        Ok(self.output_of(&layers))
    }

    /// `W1 h_t` for every frame.
    pub fn frame_projections(&self, h: &Matrix) -> Matrix {
        let j = self.config.joint_dim;
        let mut out = Matrix::zeros(h.rows(), j);
        let w1 = self.params.value(self.layout.joint_w1);
        for t in 0..h.rows() {
            affine(w1, None, h.row(t), out.row_mut(t));
        }
        out
    }

    /// Pads a label history on the left with the begin-of-sequence token.
    fn history_tokens(&self, history: &[u32]) -> Vec<usize> {
        let k = self.config.context_k;
        let bos = self.config.vocab;
        let tail = &history[history.len().saturating_sub(k)..];
        let mut tokens = vec![bos; k - tail.len()];
        tokens.extend(tail.iter().map(|&l| l as usize));
        tokens
    }

    fn pred_step(&self, tokens: Vec<usize>) -> PredStep {
        let p = self.config.pred_dim;
        let emb = self.params.value(self.layout.emb);
        let mut embedded = Vec::with_capacity(tokens.len() * p);
        for &tok in &tokens {
            embedded.extend_from_slice(&emb[tok * p..(tok + 1) * p]);
        }
        let mut hidden = vec![0.0; p];
        affine(self.params.value(self.layout.pred_w), Some(self.params.value(self.layout.pred_b)), &embedded, &mut hidden);
        for v in &mut hidden {
            *v = v.tanh();
        }
        let mut output = vec![0.0; self.config.enc_dim];
        affine(self.params.value(self.layout.pred_out), None, &hidden, &mut output);
        let mut bias = vec![0.0; self.config.joint_dim];
        affine(self.params.value(self.layout.joint_w1), Some(self.params.value(self.layout.joint_b1)), &output, &mut bias);
        PredStep { tokens, embedded, hidden, output, bias }
    }

    /// History half of the joint pre-activation, `W1 g(history) + b1`.
    pub fn history_bias(&self, history: &[u32]) -> Vec<f64> {
        self.pred_step(self.history_tokens(history)).bias
    }

    /// Output log-distribution (`V+1` entries) for a frame projection and history bias.
    pub fn output_logprobs(&self, frame_proj: &[f64], history_bias: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = frame_proj.iter().zip(history_bias).map(|(a, b)| (a + b).tanh()).collect();
        let mut out = vec![0.0; self.config.vocab + 1];
        affine(self.params.value(self.layout.joint_w2), Some(self.params.value(self.layout.joint_b2)), &hidden, &mut out);
        log_softmax_inplace(&mut out);
        out
    }

    /// Zero-encoder internal LM: joint output with `h_t = 0`, blank removed, renormalized.
    pub fn ilm_label_logprobs(&self, history: &[u32]) -> Vec<f64> {
        let bias = self.history_bias(history);
        let zeros = vec![0.0; self.config.joint_dim];
        let mut out = self.output_logprobs(&zeros, &bias);
        out.truncate(self.config.vocab);
        log_softmax_inplace(&mut out);
        out
    }

    fn target_steps(&self, target: &LabelSeq) -> Vec<PredStep> {
        let a = target.labels();
        (0..=a.len()).map(|s| self.pred_step(self.history_tokens(&a[..s]))).collect()
    }

    fn joint_forward(&self, frame_proj: &Matrix, target: &LabelSeq, cells: Vec<(usize, usize)>, full: Option<usize>) -> JointTrace {
        let steps = self.target_steps(target);
        let jd = self.config.joint_dim;
        let width = self.config.vocab + 1;
        let mut hidden = vec![0.0; cells.len() * jd];
        let mut logp = vec![0.0; cells.len() * width];
        let w2 = self.params.value(self.layout.joint_w2);
        let b2 = self.params.value(self.layout.joint_b2);
        for (i, &(t, s)) in cells.iter().enumerate() {
            let z = &mut hidden[i * jd..(i + 1) * jd];
            for ((zv, a), b) in z.iter_mut().zip(frame_proj.row(t)).zip(&steps[s].bias) {
                *zv = (a + b).tanh();
            }
            let out = &mut logp[i * width..(i + 1) * width];
            affine(w2, Some(b2), z, out);
            log_softmax_inplace(out);
        }
        let grad = vec![0.0; logp.len()];
        JointTrace { target: target.clone(), cells, steps, hidden, logp, grad, full_lattice: full, width }
    }

    /// Dense joint lattice for `target` (no caching).
    pub fn joint_lattice(&self, enc: &EncoderOutput, target: &LabelSeq) -> Result<JointLogLattice, ModelError> {
        target.validate(self.config.vocab)?;
        let proj = self.frame_projections(&enc.h);
        let frames = enc.frames();
        let cells = all_cells(frames, target.len());
        Ok(self.joint_forward(&proj, target, cells, Some(frames)).lattice().expect("full lattice"))
    }

    /// Runs and caches the encoder.
    pub fn forward_encoder(&self, cache: &mut ForwardCache, features: &Matrix, mode: Mode) -> Result<(), ModelError> {
        let layers = self.run_encoder(features, mode)?;
        let output = self.output_of(&layers);
        let frame_proj = self.frame_projections(&output.h);
        cache.encoder = Some(EncoderState { layers, output, frame_proj });
        cache.joints.clear();
        cache.aux.clear();
        Ok(())
    }

    /// Caches the joint network on the listed `(t, s)` cells.
    pub fn forward_cells(
        &self,
        cache: &mut ForwardCache,
        target: &LabelSeq,
        cells: Vec<(usize, usize)>,
    ) -> Result<JointHandle, ModelError> {
        target.validate(self.config.vocab)?;
        let enc = cache.encoder.as_ref().ok_or(ModelError::MissingForward)?;
        let frames = enc.output.frames();
        if let Some(&(t, s)) = cells.iter().find(|&&(t, s)| t >= frames || s > target.len()) {
            return Err(ModelError::InvalidConfig(format!("cell ({t}, {s}) outside {frames} x {}", target.len() + 1)));
        }
        let trace = self.joint_forward(&enc.frame_proj, target, cells, None);
        cache.joints.push(trace);
        Ok(JointHandle(cache.joints.len() - 1))
    }

    /// Caches the joint network on every cell of the lattice for `target`.
    pub fn forward_lattice(&self, cache: &mut ForwardCache, target: &LabelSeq) -> Result<JointHandle, ModelError> {
        target.validate(self.config.vocab)?;
        let enc = cache.encoder.as_ref().ok_or(ModelError::MissingForward)?;
        let frames = enc.output.frames();
        let trace = self.joint_forward(&enc.frame_proj, target, all_cells(frames, target.len()), Some(frames));
        cache.joints.push(trace);
        Ok(JointHandle(cache.joints.len() - 1))
    }

    fn aux_indices(&self, head: AuxHead) -> Result<(usize, usize), ModelError> {
        match head {
            AuxHead::Final => self.layout.aux_final,
            AuxHead::Middle => self.layout.aux_middle,
        }
        .ok_or(ModelError::MissingHead(head.name()))
    }

    /// Caches an auxiliary softmax head on the encoder output.
    pub fn forward_aux(&self, cache: &mut ForwardCache, head: AuxHead) -> Result<AuxHandle, ModelError> {
        let (w, b) = self.aux_indices(head)?;
        let enc = cache.encoder.as_ref().ok_or(ModelError::MissingForward)?;
        let src = match head {
            AuxHead::Final => &enc.output.h,
            AuxHead::Middle => &enc.output.middle,
        };
        let width = self.config.vocab + 1;
        let mut logp = Matrix::zeros(src.rows(), width);
        for t in 0..src.rows() {
            let row = logp.row_mut(t);
            affine(self.params.value(w), Some(self.params.value(b)), src.row(t), row);
            log_softmax_inplace(row);
        }
        let grad = Matrix::zeros(src.rows(), width);
        cache.aux.push(AuxTrace { head, logp, grad });
        Ok(AuxHandle(cache.aux.len() - 1))
    }

    /// Backpropagates every upstream gradient stored in `cache` and adds the
    /// parameter gradients into `grads`.
    pub fn backward_and_accumulate(&self, cache: &ForwardCache, grads: &mut Gradients) -> Result<(), ModelError> {
        let enc = cache.encoder.as_ref().ok_or(ModelError::MissingForward)?;
        let frames = enc.output.frames();
        let e = self.config.enc_dim;
        let jd = self.config.joint_dim;
        let p = self.config.pred_dim;
        let width = self.config.vocab + 1;
        let mut d_h = Matrix::zeros(frames, e);
        let mut d_mid = Matrix::zeros(frames, e);
        let mut d_frame = Matrix::zeros(frames, jd);

        let w1 = self.params.value(self.layout.joint_w1);
        let w2 = self.params.value(self.layout.joint_w2);
        let mut d_logits = vec![0.0; width];
        let mut d_pre = vec![0.0; jd];
        for trace in &cache.joints {
            let mut d_bias = vec![vec![0.0; jd]; trace.steps.len()];
            for (i, &(t, s)) in trace.cells.iter().enumerate() {
                let g = &trace.grad[i * width..(i + 1) * width];
                if g.iter().all(|&x| x == 0.0) {
                    continue;
                }
                log_softmax_backward(&trace.logp[i * width..(i + 1) * width], g, &mut d_logits);
                let z = &trace.hidden[i * jd..(i + 1) * jd];
                d_pre.fill(0.0);
                {
                    let (dw2, db2) = two_mut(grads, self.layout.joint_w2, self.layout.joint_b2);
                    affine_backward(w2, z, &d_logits, dw2, Some(db2), Some(&mut d_pre));
                }
                for (j, dp) in d_pre.iter_mut().enumerate() {
                    *dp *= 1.0 - z[j] * z[j];
                }
                for (a, b) in d_frame.row_mut(t).iter_mut().zip(&d_pre) {
                    *a += b;
                }
                for (a, b) in d_bias[s].iter_mut().zip(&d_pre) {
                    *a += b;
                }
            }
            for (step, db) in trace.steps.iter().zip(&d_bias) {
                if db.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let mut d_out = vec![0.0; e];
                {
                    let (dw1, db1) = two_mut(grads, self.layout.joint_w1, self.layout.joint_b1);
                    affine_backward(w1, &step.output, db, dw1, Some(db1), Some(&mut d_out));
                }
                self.pred_backward(step, &d_out, grads, p);
            }
        }
        {
            let dw1 = grads.get_mut(self.layout.joint_w1);
            for t in 0..frames {
                affine_backward(w1, enc.output.h.row(t), d_frame.row(t), dw1, None, Some(d_h.row_mut(t)));
            }
        }

        for aux in &cache.aux {
            let (w, b) = self.aux_indices(aux.head)?;
            let src = match aux.head {
                AuxHead::Final => &enc.output.h,
                AuxHead::Middle => &enc.output.middle,
            };
            for t in 0..frames {
                let g = aux.grad.row(t);
                if g.iter().all(|&x| x == 0.0) {
                    continue;
                }
                log_softmax_backward(aux.logp.row(t), g, &mut d_logits);
                let dst = match aux.head {
                    AuxHead::Final => d_h.row_mut(t),
                    AuxHead::Middle => d_mid.row_mut(t),
                };
                let (dw, db) = two_mut(grads, w, b);
                affine_backward(self.params.value(w), src.row(t), &d_logits, dw, Some(db), Some(dst));
            }
        }

        let mut d_out = d_h;
        for l in (0..self.enc.len()).rev() {
            if l == self.config.aux_middle_layer {
                for (a, b) in d_out.as_mut_slice().iter_mut().zip(d_mid.as_slice()) {
                    *a += b;
                }
            }
            let (w, b) = self.enc[l];
            let (dw, db) = two_mut(grads, w, b);
            let d_in = encoder::layer_backward(&enc.layers[l], self.params.value(w), &d_out, dw, db, l > 0);
            if let Some(d_in) = d_in {
                d_out = d_in;
            }
        }
        Ok(())
    }

    fn pred_backward(&self, step: &PredStep, d_output: &[f64], grads: &mut Gradients, p: usize) {
        let mut d_hidden = vec![0.0; p];
        affine_backward(
            self.params.value(self.layout.pred_out),
            &step.hidden,
            d_output,
            grads.get_mut(self.layout.pred_out),
            None,
            Some(&mut d_hidden),
        );
        for (d, h) in d_hidden.iter_mut().zip(&step.hidden) {
            *d *= 1.0 - h * h;
        }
        let mut d_emb = vec![0.0; step.embedded.len()];
        {
            let (dw, db) = two_mut(grads, self.layout.pred_w, self.layout.pred_b);
            affine_backward(self.params.value(self.layout.pred_w), &step.embedded, &d_hidden, dw, Some(db), Some(&mut d_emb));
        }
        let demb = grads.get_mut(self.layout.emb);
        for (j, &tok) in step.tokens.iter().enumerate() {
            for (d, g) in demb[tok * p..(tok + 1) * p].iter_mut().zip(&d_emb[j * p..(j + 1) * p]) {
                *d += g;
            }
        }
    }
}

/// Every `(t, s)` cell of a `frames × (labels+1)` lattice, frame-major.
pub fn all_cells(frames: usize, labels: usize) -> Vec<(usize, usize)> {
    (0..frames).flat_map(|t| (0..=labels).map(move |s| (t, s))).collect()
}

/// Disjoint mutable borrows of two gradient tensors (`a != b`).
fn two_mut(grads: &mut Gradients, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b);
    let tensors = grads.tensors_mut();
    if a < b {
        let (lo, hi) = tensors.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = tensors.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}
