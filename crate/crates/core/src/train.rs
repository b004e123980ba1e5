//! Multi-task loss, AdamW and the polynomial learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    MeanSquaredError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLossSpec {
    pub weights: Vec<f64>,
    pub kinds: Vec<LossKind>,
}

impl TaskLossSpec {
    pub fn new(weights: Vec<f64>, kinds: Vec<LossKind>) -> Result<Self> {
        if weights.len() != kinds.len() {
            return Err(Error::contract("one loss kind per task weight"));
        }
        if let Some(w) = weights.iter().find(|&&w| w.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::contract(format!("task weights must be positive, got {w}")));
        }
        Ok(TaskLossSpec { weights, kinds })
    }

    /// Semantic segmentation, human parts, saliency.
    pub fn pascal_context() -> Self {
        TaskLossSpec {
            weights: vec![1.0, 2.0, 30.0],
            kinds: vec![LossKind::CrossEntropy; 3],
        }
    }

    /// Semantic segmentation, depth.
    pub fn nyud() -> Self {
        TaskLossSpec {
            weights: vec![1.0, 1.0],
            kinds: vec![LossKind::CrossEntropy, LossKind::MeanSquaredError],
        }
    }
}

/// `Σ α_i · L_i`.
pub fn mtl_loss<T: Scalar>(losses: &[T], weights: &[T]) -> Result<T> {
    if losses.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} task losses but {} weights",
            losses.len(),
            weights.len()
        )));
    }
    Ok(losses.iter().zip(weights).fold(T::zero(), |acc, (&l, &w)| acc + w * l))
}

/// Differentiable `Σ α_i · L_i` over scalar graph nodes.
pub fn mtl_loss_var<T: Scalar>(g: &mut Graph<T>, losses: &[Var], weights: &[T]) -> Result<Var> {
    g.weighted_sum(losses, weights)
}

/// Supplies per-task loss weights at each step.
pub trait WeightPolicy<T> {
    fn weights(&mut self, step: usize, last_losses: &[T]) -> Vec<T>;
}

/// Returns the configured weights unchanged.
#[derive(Clone, Debug)]
pub struct StaticWeights<T>(pub Vec<T>);

impl<T: Scalar> WeightPolicy<T> for StaticWeights<T> {
    fn weights(&mut self, _step: usize, _last_losses: &[T]) -> Vec<T> {
        self.0.clone()
    }
}

/// `lr₀ · (1 − t/T)^p`, clamped to zero past `T`.
pub fn poly_lr(step: usize, total: usize, lr0: f64, power: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total as f64).powf(power)
}

/// Ordered, named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a graph parameter.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams(self.values.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Gradients of the last backward pass, zeros where none was reached.
    pub fn grads(&self, g: &Graph<T>, bound: &BoundParams) -> Vec<Tensor<T>> {
        bound
            .0
            .iter()
            .zip(&self.values)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub power: f64,
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            power: 0.9,
            total_steps: 1,
        }
    }
}

/// AdamW moments for every parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        poly_lr(self.step, self.config.total_steps, self.config.lr, self.config.power)
    }

    /// One decoupled-weight-decay Adam update. Rejects the step, leaving
    /// everything untouched, if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::contract("parameter, gradient and moment counts differ"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim("optimizer_step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        let c = &self.config;
        let lr = T::lit(self.current_lr());
        let t = (self.step + 1) as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (eps, wd) = (T::lit(c.eps), T::lit(c.weight_decay));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mtl_loss_examples() {
        assert_eq!(mtl_loss(&[0.5, 0.25], &[1.0, 1.0]).unwrap(), 0.75);
        let p = TaskLossSpec::pascal_context();
        assert_eq!(mtl_loss(&[1.0, 1.0, 1.0], &p.weights).unwrap(), 33.0);
        let n = TaskLossSpec::nyud();
        assert_eq!(mtl_loss(&[0.3, 1.7], &n.weights).unwrap(), 0.3 + 1.7);
        assert!(mtl_loss(&[1.0], &[1.0, 2.0]).is_err());
        assert!(TaskLossSpec::new(vec![1.0, 0.0], vec![LossKind::CrossEntropy; 2]).is_err());
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 0.1, 0.9), 0.1);
        assert_eq!(poly_lr(100, 100, 0.1, 0.9), 0.0);
        assert_eq!(poly_lr(150, 100, 0.1, 0.9), 0.0);
        // 0.00005 · 0.5^0.9
        assert!((poly_lr(50, 100, 0.00005, 0.9) - 2.679433656340733e-5).abs() < 1e-12);
    }

    fn cfg(lr: f64, wd: f64, total: usize) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            total_steps: total,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = vec![Tensor::<f64>::from_rows(&[&[1.0, -2.0]]).unwrap()];
        let before = p.clone();
        let mut s = OptimizerState::new(cfg(0.1, 0.0, 10), &p);
        s.step(&mut p, &[Tensor::zeros(&[1, 2])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut s = OptimizerState::new(cfg(0.01, 0.0, 10), &p);
        s.step(&mut p, &[Tensor::scalar(3.7)]).unwrap();
        assert!((p[0].item() - (1.0 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn quadratic_descends() {
        // Scalar simulation of f(θ) = θ², gradient 2θ.
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut s = OptimizerState::new(cfg(0.1, 0.0, 100), &p);
        let mut last = 1.0f64;
        for _ in 0..10 {
            let g = Tensor::scalar(2.0 * p[0].item());
            s.step(&mut p, &[g]).unwrap();
            assert!(p[0].item().abs() < last);
            last = p[0].item().abs();
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut s = OptimizerState::new(cfg(0.1, 0.0, 10), &p);
        let before = s.clone();
        assert!(s.step(&mut p, &[Tensor::scalar(f64::NAN)]).is_err());
        assert_eq!(s, before);
        assert_eq!(p[0].item(), 1.0);
    }
}
