use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction. Weight decay is classic L2: `grad += weight_decay * param`
/// before the moment updates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(1e-4, 0.0005)
    }
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update over `params`, which must be passed in the same order on every call.
    ///
    /// Every parameter needs a populated gradient. Nothing is modified on error.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::invalid("parameter list changed between Adam steps"));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(format!("#{i} {:?}", p.shape())));
            }
        }

        let t = self.t + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let mut updated: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let grad = p.grad().expect("checked above");
            let mut m = self.m[i].clone();
            let mut v = self.v[i].clone();
            let mut values = p.values().to_vec();
            for j in 0..values.len() {
                let g = grad[j] + self.weight_decay * values[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                values[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                if !values[j].is_finite() {
                    return Err(Error::NonFinite(format!("adam update of parameter #{i}")));
                }
            }
            updated.push((values, m, v));
        }
        for (i, (p, (values, m, v))) in params.iter_mut().zip(updated).enumerate() {
            p.values_mut().copy_from_slice(&values);
            self.m[i] = m;
            self.v[i] = v;
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64], g: &[f64]) -> Tensor {
        let mut t = Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        t.set_grad(g.to_vec()).unwrap();
        t
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut p = param(&[0.5, -1.0, 3.0], &[0.0, 0.0, 0.0]);
        let mut adam = Adam::new(0.1, 0.0);
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.values(), &[0.5, -1.0, 3.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_bias_correction_cancels() {
        let mut p = param(&[1.0], &[1.0]);
        let mut adam = Adam::new(0.1, 0.0);
        adam.step(&mut [&mut p]).unwrap();
        let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.values()[0] - want).abs() < 1e-15);
        assert!((p.values()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn moments_start_at_zero() {
        let adam = Adam::default();
        assert_eq!(adam.steps(), 0);
        assert!(adam.first_moments().is_empty());
        assert_eq!(adam.lr, 1e-4);
        assert_eq!(adam.weight_decay, 0.0005);
    }

    #[test]
    fn missing_grad_is_rejected_without_side_effects() {
        let mut a = param(&[1.0], &[1.0]);
        let mut b = Tensor::new(vec![1], vec![2.0]).unwrap();
        let mut adam = Adam::new(0.1, 0.0);
        assert!(matches!(adam.step(&mut [&mut a, &mut b]), Err(Error::MissingGrad(_))));
        assert_eq!(a.values(), &[1.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn three_steps_on_a_quadratic_match_scalar_reference() {
        // f(p) = 0.5 * a * (p - c)^2 with L2 decay, against a plain scalar Adam.
        let (a, c, lr, wd) = (3.0, 0.25, 0.05, 0.01);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut reference = 2.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=3 {
            let g = a * (reference - c) + wd * reference;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            reference -= lr * mh / (vh.sqrt() + eps);
            trace.push(reference);
        }

        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        let mut adam = Adam::new(lr, wd);
        for want in trace {
            let g = a * (p.values()[0] - c);
            p.set_grad(vec![g]).unwrap();
            adam.step(&mut [&mut p]).unwrap();
            assert!((p.values()[0] - want).abs() < 1e-10);
        }
        assert_eq!(adam.steps(), 3);
    }
}
