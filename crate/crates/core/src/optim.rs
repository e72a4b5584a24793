//! Learning-rate schedules and the Adam optimizer with decoupled L2 decay.

use log::warn;
use thiserror::Error;

use crate::model::{Gradients, ParamStore};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {name} at element {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("gradient/parameter shape mismatch for {0}")]
    Shape(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    OclrStage1,
    OclrStage2,
    Constant,
}

impl std::str::FromStr for ScheduleKind {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oclr_stage1" => Ok(Self::OclrStage1),
            "oclr_stage2" => Ok(Self::OclrStage2),
            "constant" => Ok(Self::Constant),
            other => Err(OptimError::Schedule(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::OclrStage1 => "oclr_stage1",
            Self::OclrStage2 => "oclr_stage2",
            Self::Constant => "constant",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub constant_lr: f64,
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, lr_peak: f64, total_steps: u64) -> Self {
        Self { kind, lr_peak, lr_final: 1e-6, constant_lr: 1e-5, total_steps }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        for (name, v) in [("lr_peak", self.lr_peak), ("lr_final", self.lr_final), ("constant_lr", self.constant_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(OptimError::Schedule(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// End steps of the three phases: 45%, 90% and 100% of `total_steps`.
    pub fn boundaries(&self) -> (f64, f64, f64) {
        let n = self.total_steps;
        ((45 * n) as f64 / 100.0, (90 * n) as f64 / 100.0, n as f64)
    }

    /// Learning rate at `step`; steps past the end are clamped.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.kind == ScheduleKind::Constant {
            return self.constant_lr;
        }
        let step = if step > self.total_steps {
            warn!("lr_at: step {step} past total {}; clamping", self.total_steps);
            self.total_steps
        } else {
            step
        };
        let x = step as f64;
        let (b1, b2, b3) = self.boundaries();
        let peak = self.lr_peak;
        let (p1, p2, p3) = match self.kind {
            ScheduleKind::OclrStage1 => ((peak / 10.0, peak), (peak, peak / 10.0), (peak / 10.0, self.lr_final)),
            ScheduleKind::OclrStage2 => ((peak, peak), (peak, peak / 5.0), (peak / 5.0, self.lr_final)),
            ScheduleKind::Constant => unreachable!(),
        };
        if x <= b1 {
            lerp(p1, 0.0, b1, x)
        } else if x <= b2 {
            lerp(p2, b1, b2, x)
        } else {
            lerp(p3, b2, b3, x)
        }
    }
}

/// Linear interpolation written so both endpoints are reproduced exactly.
fn lerp((start, end): (f64, f64), x0: f64, x1: f64, x: f64) -> f64 {
    if x1 <= x0 || start == end {
        return end;
    }
    let f = (x - x0) / (x1 - x0);
    start * (1.0 - f) + end * f
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled L2 coefficient.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, l2: 5e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        Self { config, m: zeros.clone(), v: zeros, step: 0 }
    }

    /// One bias-corrected Adam step followed by decoupled decay `lr·l2·p`.
    /// Parameters are left untouched if any gradient is non-finite.
    pub fn step_update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), OptimError> {
        for (idx, p) in params.params().iter().enumerate() {
            let g = grads.get(idx);
            if g.len() != p.numel() || self.m[idx].len() != p.numel() {
                return Err(OptimError::Shape(p.name.clone()));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient { name: p.name.clone(), index: i });
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (idx, p) in params.params_mut().iter_mut().enumerate() {
            let g = grads.get(idx);
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..p.value.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + c.eps) + lr * c.l2 * p.value[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s1(n: u64) -> ScheduleSpec {
        ScheduleSpec::new(ScheduleKind::OclrStage1, 8e-4, n)
    }

    #[test]
    fn stage1_anchors() {
        let s = s1(1000);
        assert_eq!(s.lr_at(0), 8e-4 / 10.0);
        assert_eq!(s.lr_at(450), 8e-4);
        assert_eq!(s.lr_at(900), 8e-4 / 10.0);
        assert_eq!(s.lr_at(1000), 1e-6);
        assert!((s.lr_at(225) - 4.4e-4).abs() < 1e-18);
    }

    #[test]
    fn stage2_and_constant_anchors() {
        let s = ScheduleSpec::new(ScheduleKind::OclrStage2, 8e-4, 200);
        for step in 0..=90 {
            assert_eq!(s.lr_at(step), 8e-4);
        }
        assert_eq!(s.lr_at(180), 8e-4 / 5.0);
        assert_eq!(s.lr_at(200), 1e-6);
        let c = ScheduleSpec::new(ScheduleKind::Constant, 8e-4, 10);
        assert!((0..=10).all(|t| c.lr_at(t) == 1e-5));
    }

    #[test]
    fn out_of_range_step_is_clamped() {
        let s = s1(100);
        assert_eq!(s.lr_at(1000), s.lr_at(100));
    }

    #[test]
    fn phases_are_linear() {
        let s = s1(1000);
        for (a, b) in [(0u64, 450u64), (450, 900), (900, 1000)] {
            let mid = s.lr_at((a + b) / 2);
            assert!((mid - 0.5 * (s.lr_at(a) + s.lr_at(b))).abs() < 1e-15);
        }
    }

    fn one_param(v: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", &[1]);
        store.value_mut(0)[0] = v;
        store
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = one_param(0.7);
        let g = p.zero_grads();
        let mut st = OptimizerState::new(&p, AdamConfig { l2: 0.0, ..AdamConfig::default() });
        st.step_update(&mut p, &g, 1e-3).unwrap();
        assert_eq!(p.value(0)[0], 0.7);
    }

    #[test]
    fn single_step_by_hand() {
        let mut p = one_param(1.0);
        let mut g = p.zero_grads();
        g.get_mut(0)[0] = 0.5;
        let cfg = AdamConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, l2: 0.1 };
        let mut st = OptimizerState::new(&p, cfg);
        st.m[0][0] = 0.2;
        st.v[0][0] = 0.04;
        st.step = 1;
        st.step_update(&mut p, &g, 0.01).unwrap();
        // step 2: m = 0.18 + 0.05 = 0.23, v = 0.0396 + 0.0025 = 0.0421
        let m_hat = 0.23 / (1.0 - 0.81);
        let v_hat: f64 = 0.0421 / (1.0 - 0.9801);
        let expected = 1.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8) - 0.01 * 0.1 * 1.0;
        assert!((p.value(0)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn updates_are_deterministic() {
        let mut a = one_param(0.3);
        let mut g = a.zero_grads();
        g.get_mut(0)[0] = -1.25;
        let mut b = a.clone();
        let mut sa = OptimizerState::new(&a, AdamConfig::default());
        let mut sb = sa.clone();
        for _ in 0..5 {
            sa.step_update(&mut a, &g, 1e-3).unwrap();
            sb.step_update(&mut b, &g, 1e-3).unwrap();
        }
        assert_eq!(a.value(0)[0].to_bits(), b.value(0)[0].to_bits());
        assert_eq!(sa, sb);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one_param(0.3);
        let mut g = p.zero_grads();
        g.get_mut(0)[0] = f64::NAN;
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        let err = st.step_update(&mut p, &g, 1e-3).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p.value(0)[0], 0.3);
        assert_eq!(st.step, 0);
    }
}
