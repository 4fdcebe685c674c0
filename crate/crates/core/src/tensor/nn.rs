use super::{Backward, Scalar, Tensor};
use crate::error::{Error, Result};

struct Linear<T: Scalar> {
    input: Tensor<T>,
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
}

impl<T: Scalar> Backward<T> for Linear<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        let mut p = vec![&self.input, &self.weight];
        p.extend(self.bias.as_ref());
        p
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (b, d) = (self.input.shape()[0], self.input.shape()[1]);
        let e = self.weight.shape()[1];
        let dx = self.input.requires_grad().then(|| {
            let mut dx = vec![T::zero(); b * d];
            let w = self.weight.data();
            T::gemm(
                b,
                e,
                d,
                T::one(),
                g,
                (e, 1),
                &w,
                (1, e),
                T::zero(),
                &mut dx,
                (d, 1),
            );
            dx
        });
        let dw = self.weight.requires_grad().then(|| {
            let mut dw = vec![T::zero(); d * e];
            let x = self.input.data();
            T::gemm(
                d,
                b,
                e,
                T::one(),
                &x,
                (1, d),
                g,
                (e, 1),
                T::zero(),
                &mut dw,
                (e, 1),
            );
            dw
        });
        let mut grads = vec![dx, dw];
        if let Some(bias) = &self.bias {
            grads.push(bias.requires_grad().then(|| {
                let mut db = vec![T::zero(); e];
                for row in g.chunks(e) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                db
            }));
        }
        grads
    }
}

/// `input [B,D] x weight [D,E] (+ bias [E])`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if input.rank() != 2 || weight.rank() != 2 {
        return Err(Error::dim(
            "linear",
            "rank",
            format!("input {:?}, weight {:?}", input.shape(), weight.shape()),
        ));
    }
    let (b, d) = (input.shape()[0], input.shape()[1]);
    let (wd, e) = (weight.shape()[0], weight.shape()[1]);
    if wd != d {
        return Err(Error::dim(
            "linear",
            1,
            format!("input width {d} vs weight rows {wd}"),
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [e] {
            return Err(Error::dim(
                "linear",
                0,
                format!("bias {:?}, expected [{e}]", bias.shape()),
            ));
        }
    }
    let mut out = vec![T::zero(); b * e];
    T::gemm(
        b,
        d,
        e,
        T::one(),
        &input.data(),
        (d, 1),
        &weight.data(),
        (e, 1),
        T::zero(),
        &mut out,
        (e, 1),
    );
    if let Some(bias) = bias {
        let bd = bias.data();
        for row in out.chunks_mut(e) {
            row.iter_mut().zip(bd.iter()).for_each(|(o, &v)| *o += v);
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![b, e],
        Linear {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

struct BatchNormOp<T: Scalar> {
    input: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mode: NormMode,
}

impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        vec![&self.input, &self.gamma, &self.beta]
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (b, d) = (self.input.shape()[0], self.input.shape()[1]);
        let gamma = self.gamma.data();
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        for (row, xr) in g.chunks(d).zip(self.xhat.chunks(d)) {
            for j in 0..d {
                dgamma[j] += row[j] * xr[j];
                dbeta[j] += row[j];
            }
        }
        let dx = self.input.requires_grad().then(|| {
            let mut dx = vec![T::zero(); b * d];
            match self.mode {
                NormMode::Eval => {
                    for (i, v) in dx.iter_mut().enumerate() {
                        let j = i % d;
                        *v = g[i] * gamma[j] * self.inv_std[j];
                    }
                }
                NormMode::Train => {
                    // dx = gamma * inv_std / B * (B*g - sum(g) - xhat * sum(g*xhat))
                    let n = T::of(b as f64);
                    for i in 0..b * d {
                        let j = i % d;
                        dx[i] = gamma[j] * self.inv_std[j] / n
                            * (n * g[i] - dbeta[j] - self.xhat[i] * dgamma[j]);
                    }
                }
            }
            dx
        });
        vec![
            dx,
            self.gamma.requires_grad().then_some(dgamma),
            self.beta.requires_grad().then_some(dbeta),
        ]
    }
}

/// Normalizes each feature of `input [B,D]` by the given mean and variance,
/// then applies `gamma * xhat + beta`.
///
/// In [`NormMode::Train`] the statistics are the biased batch moments and
/// gradients flow through them; in [`NormMode::Eval`] `stats` are constants.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: Option<(&[T], &[T])>,
    mode: NormMode,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if input.rank() != 2 {
        return Err(Error::dim(
            "batch_norm",
            "rank",
            format!("input {:?}", input.shape()),
        ));
    }
    let (b, d) = (input.shape()[0], input.shape()[1]);
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim(
            "batch_norm",
            1,
            format!(
                "features {d}, gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let x = input.data();
    let (mean, var) = match mode {
        NormMode::Train => {
            if b < 2 {
                return Err(Error::DegenerateBatch(b));
            }
            let n = T::of(b as f64);
            let mut mean = vec![T::zero(); d];
            for row in x.chunks(d) {
                mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![T::zero(); d];
            for row in x.chunks(d) {
                for j in 0..d {
                    let c = row[j] - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        }
        NormMode::Eval => {
            let (m, v) =
                stats.ok_or_else(|| Error::arg("eval-mode batch norm needs running statistics"))?;
            (m.to_vec(), v.to_vec())
        }
    };
    let eps = T::of(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![T::zero(); b * d];
    let mut out = vec![T::zero(); b * d];
    for i in 0..b * d {
        let j = i % d;
        xhat[i] = (x[i] - mean[j]) * inv_std[j];
        out[i] = gd[j] * xhat[i] + bd[j];
    }
    drop((x, gd, bd));
    let y = Tensor::from_op(
        out,
        vec![b, d],
        BatchNormOp {
            input: input.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std,
            mode,
        },
    );
    Ok((y, mean, var))
}

/// Batch normalization over `[B, D]` with learned affine and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Tensor::param(vec![T::one(); features], &[features]).expect("shape"),
            beta: Tensor::param(vec![T::zero(); features], &[features]).expect("shape"),
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Train mode also folds the batch moments into the running statistics
    /// (variance with Bessel's correction).
    pub fn forward(&mut self, input: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        match mode {
            NormMode::Train => {
                let (y, mean, var) =
                    batch_norm(input, &self.gamma, &self.beta, None, mode, self.eps)?;
                let b = T::of(input.shape()[0] as f64);
                let m = T::of(self.momentum);
                let one = T::one();
                for j in 0..mean.len() {
                    let unbiased = var[j] * b / (b - one);
                    self.running_mean[j] = (one - m) * self.running_mean[j] + m * mean[j];
                    self.running_var[j] = (one - m) * self.running_var[j] + m * unbiased;
                }
                Ok(y)
            }
            NormMode::Eval => {
                let stats = Some((self.running_mean.as_slice(), self.running_var.as_slice()));
                batch_norm(input, &self.gamma, &self.beta, stats, mode, self.eps).map(|r| r.0)
            }
        }
    }

    pub fn parameters(&self) -> [&Tensor<T>; 2] {
        [&self.gamma, &self.beta]
    }
}
