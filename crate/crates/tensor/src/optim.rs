use crate::{ParamSet, Result, TensorError};

/// Adam with bias correction and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(3e-4)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.max_grad_norm = Some(max_norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if !params.grads_populated() {
            return Err(TensorError::MissingGradients);
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(TensorError::OptimizerMismatch);
        }
        let clip = match self.max_grad_norm {
            Some(max) => {
                let norm = params.grad_norm();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((tensor, m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let (data, grad) = tensor.data_and_grad_mut();
            let grad = grad.ok_or(TensorError::NoGrad)?;
            if m.len() != data.len() {
                return Err(TensorError::OptimizerMismatch);
            }
            for i in 0..data.len() {
                let g = grad[i] * clip;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            grad.fill(0.0);
        }
        params.mark_grads(false);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut opt = Adam::new(0.1);
        for _ in 0..5 {
            p.accumulate_grad(id, &[0.0; 3], 1.0).unwrap();
            opt.step(&mut p).unwrap();
        }
        assert_eq!(p.get(id).data(), &[0.5, -1.0, 2.0]);
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn missing_gradients_is_an_error() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::zeros(&[2]));
        assert!(matches!(
            Adam::default().step(&mut p),
            Err(TensorError::MissingGradients)
        ));
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::scalar(1.0));
        let mut opt = Adam::new(0.01);
        let mut prev = 1.0;
        for _ in 0..200 {
            p.accumulate_grad(id, &[0.7], 1.0).unwrap();
            opt.step(&mut p).unwrap();
            let now = p.get(id).data()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut opt = Adam::new(0.05);
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            let w = p.get(id).data().to_vec();
            loss = w.iter().map(|x| x * x).sum();
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            p.accumulate_grad(id, &g, 1.0).unwrap();
            opt.step(&mut p).unwrap();
        }
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn step_zeroes_gradients() {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::zeros(&[2]));
        p.accumulate_grad(id, &[1.0, 1.0], 1.0).unwrap();
        Adam::default().step(&mut p).unwrap();
        assert_eq!(p.get(id).grad().unwrap(), &[0.0, 0.0]);
        assert!(!p.grads_populated());
    }
}
