use crate::numerics::{ParamStore, Scalar, Tensor};

/// Adam with a constant learning rate and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.99, eps: 1e-8, grad_clip: None, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn with_grad_clip(mut self, clip: Option<f64>) -> Self {
        self.grad_clip = clip;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(params: &ParamStore<S>) -> f64 {
        params.iter().flat_map(|p| p.grad.data()).map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn update(&mut self, params: &mut ParamStore<S>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        let clip = match self.grad_clip {
            Some(c) => {
                let n = Self::grad_norm(params);
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let c1 = S::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = S::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps, clip) = (S::of(self.learning_rate), S::of(self.eps), S::of(clip));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i] * clip;
                md[i] = b1 * md[i] + (S::one() - b1) * g;
                vd[i] = b2 * vd[i] + (S::one() - b2) * g * g;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
