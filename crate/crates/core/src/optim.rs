use crate::tensor::{Result, Tensor, TensorError};
use crate::Scalar;

/// Adam optimizer state, one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub learning_rate: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step_count: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(learning_rate: S) -> Self {
        Self {
            learning_rate,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter and clears their gradients.
    /// Fails without touching anything if some parameter has no gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(TensorError::MissingGrad(i));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "parameter list changed between steps");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = p.take_grad().expect("checked above");
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (S::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (S::one() - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers, for checkpointing.
    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, step_count: u64, first: Vec<Vec<S>>, second: Vec<Vec<S>>) {
        self.step_count = step_count;
        self.first = first;
        self.second = second;
    }
}
