//! Single windowed-affine layer CTC model used only to produce alignments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::encoder::{layer_backward, layer_forward};
use super::{Gradients, ModelConfig, ModelError, ParamStore};
use crate::ctc::{ctc_fullsum, CtcError, CtcLogits};
use crate::numeric::{affine, affine_backward, log_softmax_inplace, Matrix};
use crate::topology::LabelSeq;

#[derive(Debug, Clone)]
pub struct CtcNet {
    config: ModelConfig,
    params: ParamStore,
}

impl CtcNet {
    /// Uses `vocab`, `feat_dim`, `enc_dim`, `enc_window` and `subsample` from `config`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let config = ModelConfig { enc_layers: 1, aux_middle_layer: 0, dropout: 0.0, ..config };
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, dims) in Self::shapes(&config) {
            params.add(name, &dims);
        }
        params.init_uniform(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { config, params })
    }

    fn shapes(c: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("enc.0.weight", vec![c.enc_dim, (2 * c.enc_window + 1) * c.feat_dim]),
            ("enc.0.bias", vec![c.enc_dim]),
            ("ctc.out.weight", vec![c.vocab + 1, c.enc_dim]),
            ("ctc.out.bias", vec![c.vocab + 1]),
        ]
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

    pub fn to_checkpoint(&self, stage: u32) -> Checkpoint {
        Checkpoint { kind: CheckpointKind::Ctc, stage, config: self.config.clone(), params: self.params.clone() }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        if ck.kind != CheckpointKind::Ctc {
            return Err(ModelError::InvalidConfig("checkpoint is not a CTC model".into()));
        }
        for (name, dims) in Self::shapes(&ck.config) {
            let p = ck.params.get(name).ok_or_else(|| ModelError::MissingParam(name.into()))?;
            if p.dims != dims {
                return Err(ModelError::ParamShape { name: name.into(), expected: dims, found: p.dims.clone() });
            }
        }
        Ok(Self { config: ck.config.clone(), params: ck.params.clone() })
    }

    fn check(&self, features: &Matrix) -> Result<(), ModelError> {
        if features.rows() == 0 {
            return Err(ModelError::EmptyInput);
        }
        if features.cols() != self.config.feat_dim {
            return Err(ModelError::FeatureDim { got: features.cols(), expected: self.config.feat_dim });
        }
        Ok(())
    }

    fn forward(&self, features: &Matrix) -> Result<(super::encoder::LayerTrace, Matrix), ModelError> {
        self.check(features)?;
        let tr = layer_forward(
            self.params.value(0),
            self.params.value(1),
            features.clone(),
            self.config.enc_window,
            self.config.subsample,
            None,
        );
        let width = self.config.vocab + 1;
        let mut logp = Matrix::zeros(tr.output.rows(), width);
        for t in 0..tr.output.rows() {
            let row = logp.row_mut(t);
            affine(self.params.value(2), Some(self.params.value(3)), tr.output.row(t), row);
            log_softmax_inplace(row);
        }
        Ok((tr, logp))
    }

    /// Per-frame log-distributions at the subsampled rate.
    pub fn logits(&self, features: &Matrix) -> Result<CtcLogits, ModelError> {
        Ok(CtcLogits(self.forward(features)?.1))
    }

    /// Negative CTC log-likelihood and its parameter gradient added into `grads`.
    /// Unreachable targets contribute nothing and return `None`.
    pub fn loss_and_grad(
        &self,
        features: &Matrix,
        target: &LabelSeq,
        grads: &mut Gradients,
    ) -> Result<Option<f64>, CtcNetError> {
        let (tr, logp) = self.forward(features)?;
        let logits = CtcLogits(logp);
        let (lp, occ) = ctc_fullsum(&logits, target)?;
        if !lp.is_finite() {
            return Ok(None);
        }
        let width = self.config.vocab + 1;
        let mut d_h = Matrix::zeros(tr.output.rows(), self.config.enc_dim);
        let mut d_logits = vec![0.0; width];
        for t in 0..tr.output.rows() {
            // d(-log p)/d logits = softmax - occupancy (each occupancy row sums to 1)
            for (v, d) in d_logits.iter_mut().enumerate() {
                *d = logits.0.get(t, v).exp() - occ.get(t, v);
            }
            let tensors = grads.tensors_mut();
            let (lo, hi) = tensors.split_at_mut(3);
            affine_backward(self.params.value(2), tr.output.row(t), &d_logits, &mut lo[2], Some(&mut hi[0]), Some(d_h.row_mut(t)));
        }
        let tensors = grads.tensors_mut();
        let (lo, hi) = tensors.split_at_mut(1);
        layer_backward(&tr, self.params.value(0), &d_h, &mut lo[0], &mut hi[0], false);
        Ok(Some(-lp))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CtcNetError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::check_gradient;

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = ModelConfig { vocab: 3, feat_dim: 2, enc_dim: 4, enc_window: 1, subsample: 2, ..ModelConfig::default() };
        let net = CtcNet::new(cfg, 3).unwrap();
        let feats = Matrix::from_vec(9, 2, (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.2).collect());
        let target = LabelSeq(vec![1, 0]);
        let mut grads = net.params().zero_grads();
        net.loss_and_grad(&feats, &target, &mut grads).unwrap().unwrap();
        for idx in 0..net.params().len() {
            let mut probe = net.clone();
            let mut x = probe.params().value(idx).to_vec();
            let report = check_gradient(&mut x, grads.get(idx), 1e-5, 1e-4, 1e-8, |vals| {
                probe.params_mut().value_mut(idx).copy_from_slice(vals);
                let mut g = probe.params().zero_grads();
                probe.loss_and_grad(&feats, &target, &mut g).unwrap().unwrap()
            });
            assert!(report.passed(), "tensor {idx}: {report:?}");
        }
    }
}
