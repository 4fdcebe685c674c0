use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// SGD with heavy-ball momentum: `v <- mu * v + g; w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar = f32> {
    pub momentum: f64,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &[Tensor<T>], momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    /// Applies one update and zeroes the gradients.
    pub fn step(&mut self, params: &[Tensor<T>], lr: f64) -> Result<()> {
        check_buffers(params, &self.velocity)?;
        let grads = take_grads(params)?;
        let mu = T::of(self.momentum);
        let lr = T::of(lr);
        for ((p, v), g) in params.iter().zip(&mut self.velocity).zip(grads) {
            let mut w = p.data_mut();
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &[Tensor<T>], lr: f64) -> Result<()> {
        check_buffers(params, &self.m)?;
        let grads = take_grads(params)?;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let (c1, c2, lr) = (T::of(c1), T::of(c2), T::of(lr));
        for (((p, m), v), g) in params.iter().zip(&mut self.m).zip(&mut self.v).zip(grads) {
            let mut w = p.data_mut();
            for (((w, m), v), g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn check_buffers<T: Scalar>(params: &[Tensor<T>], buffers: &[Vec<T>]) -> Result<()> {
    if params.len() != buffers.len()
        || params
            .iter()
            .zip(buffers)
            .any(|(p, b)| p.numel() != b.len())
    {
        return Err(Error::State(
            "optimizer buffers do not match the parameter list".into(),
        ));
    }
    Ok(())
}

/// Collects and clears every gradient; fails if any parameter has none.
fn take_grads<T: Scalar>(params: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let g = p.grad().ok_or_else(|| {
            Error::State(format!("parameter {i} {:?} has no gradient", p.shape()))
        })?;
        out.push(g);
    }
    params.iter().for_each(Tensor::zero_grad);
    Ok(out)
}
