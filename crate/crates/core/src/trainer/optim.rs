//! AdamW with decoupled weight decay and a reduce-on-plateau learning-rate
//! scheduler. Both are pure state machines: the same gradient (or validation
//! metric) sequence always produces the same parameters and learning rate.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::real::{r, Real};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Per-parameter moments plus the shared step count and current lr.
#[derive(Debug, Clone)]
pub struct OptimState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
    pub lr: f64,
    pub hp: AdamWParams,
}

impl<F: Real> OptimState<F> {
    pub fn new(shapes: &[Vec<usize>], hp: AdamWParams) -> Result<Self> {
        hp.validate()?;
        let m = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect::<Vec<_>>();
        let v = m.clone();
        Ok(OptimState { m, v, t: 0, lr: hp.lr, hp })
    }

    /// One AdamW update over all parameters. A `None` gradient leaves the
    /// corresponding parameter and its moments untouched (frozen or unused
    /// this step); decay is decoupled from the adaptive step.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Option<Tensor<F>>]) -> Result<()> {
        let mut refs: Vec<&mut Tensor<F>> = params.iter_mut().collect();
        self.step_refs(&mut refs, grads)
    }

    /// Same update through borrowed parameter slots (for tensors that live
    /// inside a larger structure).
    pub fn step_refs(&mut self, params: &mut [&mut Tensor<F>], grads: &[Option<Tensor<F>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} params, {} grads, state built for {}", params.len(), grads.len(), self.m.len()),
            ));
        }
        self.t += 1;
        let b1 = r::<F>(self.hp.beta1);
        let b2 = r::<F>(self.hp.beta2);
        let one = F::one();
        let eps = r::<F>(self.hp.eps);
        let lr = r::<F>(self.lr);
        let wd = r::<F>(self.hp.weight_decay);
        let bc1 = r::<F>(1.0 - self.hp.beta1.powi(self.t as i32));
        let bc2 = r::<F>(1.0 - self.hp.beta2.powi(self.t as i32));
        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            if g.shape != params[i].shape {
                return Err(Error::shape(
                    "adamw_step",
                    format!("param {i}: grad shape {:?} vs param {:?}", g.shape, params[i].shape),
                ));
            }
            let (m, v, p) = (&mut self.m[i], &mut self.v[i], &mut params[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = b1 * m.data[j] + (one - b1) * gj;
                v.data[j] = b2 * v.data[j] + (one - b2) * gj * gj;
                let m_hat = m.data[j] / bc1;
                let v_hat = v.data[j] / bc2;
                p.data[j] = p.data[j] - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * p.data[j];
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauParams {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Relative improvement threshold: improved iff metric < best*(1-threshold).
    pub threshold: f64,
}

impl Default for PlateauParams {
    fn default() -> Self {
        PlateauParams { factor: 0.5, patience: 3, min_lr: 1e-6, threshold: 1e-4 }
    }
}

impl PlateauParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!("plateau factor must be in (0,1), got {}", self.factor)));
        }
        if self.min_lr < 0.0 || self.threshold < 0.0 {
            return Err(Error::Config("min_lr and threshold must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerState {
    pub best: f64,
    pub epochs_since_improvement: usize,
    pub hp: PlateauParams,
}

impl SchedulerState {
    pub fn new(hp: PlateauParams) -> Result<Self> {
        hp.validate()?;
        Ok(SchedulerState { best: f64::INFINITY, epochs_since_improvement: 0, hp })
    }

    /// Feed one validation metric (min mode); returns the possibly reduced lr.
    pub fn plateau_step(&mut self, lr: f64, val_metric: f64) -> Result<f64> {
        if !val_metric.is_finite() {
            return Err(Error::NonFinite { op: "plateau_step".to_string() });
        }
        if val_metric < self.best * (1.0 - self.hp.threshold) {
            self.best = val_metric;
            self.epochs_since_improvement = 0;
            return Ok(lr);
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement > self.hp.patience {
            self.epochs_since_improvement = 0;
            return Ok((lr * self.hp.factor).max(self.hp.min_lr));
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_decay_when_gradient_is_zero() {
        let hp = AdamWParams::default();
        let mut state = OptimState::<f64>::new(&[vec![3]], hp).unwrap();
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5])];
        let grads = vec![Some(Tensor::zeros(vec![3]))];
        state.step(&mut params, &grads).unwrap();
        for (got, init) in params[0].data.iter().zip([1.0, -2.0, 0.5]) {
            assert!((got - init * (1.0 - 1e-4 * 0.01)).abs() < 1e-15, "{got} vs {init}");
        }
    }

    #[test]
    fn first_step_is_bias_corrected_sign_step() {
        // With constant g on step 1: m_hat = g, v_hat = g^2, so the adaptive
        // part is lr*g/(|g| + eps) ~ lr*sign(g).
        let hp = AdamWParams { weight_decay: 0.0, ..Default::default() };
        let mut state = OptimState::<f64>::new(&[vec![2]], hp).unwrap();
        let mut params = vec![Tensor::new(vec![2], vec![0.3, -0.4])];
        let grads = vec![Some(Tensor::new(vec![2], vec![2.0, -0.5]))];
        state.step(&mut params, &grads).unwrap();
        let lr = 1e-4;
        let expect0 = 0.3 - lr * (2.0 / (2.0 + 1e-8));
        let expect1 = -0.4 - lr * (-0.5 / (0.5 + 1e-8));
        assert!((params[0].data[0] - expect0).abs() < 1e-12);
        assert!((params[0].data[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn two_steps_match_hand_trace() {
        // theta=1, g=1, wd=0, lr=1e-4, betas (0.9, 0.999), eps 1e-8.
        let hp = AdamWParams { weight_decay: 0.0, ..Default::default() };
        let mut state = OptimState::<f64>::new(&[vec![1]], hp).unwrap();
        let mut params = vec![Tensor::new(vec![1], vec![1.0])];
        let grads = vec![Some(Tensor::new(vec![1], vec![1.0]))];

        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 1e-4f64, 1e-8f64);
        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2u32 {
            m = b1 * m + (1.0 - b1) * 1.0;
            v = b2 * v + (1.0 - b2) * 1.0;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        state.step(&mut params, &grads).unwrap();
        state.step(&mut params, &grads).unwrap();
        assert!((params[0].data[0] - theta).abs() < 1e-12, "{} vs {theta}", params[0].data[0]);
    }

    #[test]
    fn none_gradient_freezes_parameter_and_moments() {
        let hp = AdamWParams::default();
        let mut state = OptimState::<f64>::new(&[vec![1], vec![1]], hp).unwrap();
        let mut params = vec![Tensor::new(vec![1], vec![1.0]), Tensor::new(vec![1], vec![1.0])];
        let grads = vec![Some(Tensor::new(vec![1], vec![0.7])), None];
        state.step(&mut params, &grads).unwrap();
        assert_ne!(params[0].data[0], 1.0);
        assert_eq!(params[1].data[0], 1.0);
        assert_eq!(state.m[1].data[0], 0.0);
    }

    #[test]
    fn plateau_halves_after_patience_and_floors_at_min_lr() {
        let mut s = SchedulerState::new(PlateauParams::default()).unwrap();
        let mut lr = 1e-4;

        // Strictly improving: untouched.
        for k in 0..6 {
            lr = s.plateau_step(lr, 1.0 / (k + 1) as f64).unwrap();
        }
        assert_eq!(lr, 1e-4);

        // Flat for patience+1 epochs: exactly one halving.
        for _ in 0..4 {
            lr = s.plateau_step(lr, 1.0).unwrap();
        }
        assert_eq!(lr, 5e-5);
        assert_eq!(s.epochs_since_improvement, 0);

        // Tiny (sub-threshold) improvements still count as plateau.
        let mut s2 = SchedulerState::new(PlateauParams::default()).unwrap();
        let mut lr2 = 1e-4;
        lr2 = s2.plateau_step(lr2, 1.0).unwrap();
        for k in 0..4 {
            lr2 = s2.plateau_step(lr2, 1.0 - 1e-6 * (k + 1) as f64).unwrap();
        }
        assert_eq!(lr2, 5e-5);

        // Floor.
        let mut s3 = SchedulerState::new(PlateauParams::default()).unwrap();
        let mut lr3 = 1.5e-6;
        lr3 = s3.plateau_step(lr3, 1.0).unwrap();
        for _ in 0..8 {
            lr3 = s3.plateau_step(lr3, 1.0).unwrap();
        }
        assert_eq!(lr3, 1e-6);
    }

    #[test]
    fn scheduler_trace_is_pure_in_metric_sequence() {
        let metrics = [0.9, 0.8, 0.8, 0.8, 0.8, 0.8, 0.5, 0.5, 0.5, 0.5, 0.5];
        let run = || {
            let mut s = SchedulerState::new(PlateauParams::default()).unwrap();
            let mut lr = 1e-4;
            let mut trace = Vec::new();
            for &m in &metrics {
                lr = s.plateau_step(lr, m).unwrap();
                trace.push(lr);
            }
            trace
        };
        assert_eq!(run(), run());
    }
}
