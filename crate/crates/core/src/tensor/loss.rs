use super::{check_same_shape, Backward, Scalar, Tensor};
use crate::error::{Error, Result};

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

struct L1<T: Scalar> {
    pred: Tensor<T>,
    target: Tensor<T>,
    /// Number of elements averaged into each output value.
    group: usize,
}

impl<T: Scalar> Backward<T> for L1<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        vec![&self.pred, &self.target]
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (p, t) = (self.pred.data(), self.target.data());
        let inv = T::one() / T::of(self.group as f64);
        let dp: Vec<T> = p
            .iter()
            .zip(t.iter())
            .enumerate()
            .map(|(i, (&a, &b))| g[i / self.group] * inv * sign(a - b))
            .collect();
        let dt = self
            .target
            .requires_grad()
            .then(|| dp.iter().map(|&v| -v).collect());
        vec![self.pred.requires_grad().then_some(dp), dt]
    }
}

fn l1_grouped<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    group: usize,
    shape: Vec<usize>,
) -> Tensor<T> {
    let data = {
        let (p, t) = (pred.data(), target.data());
        let inv = T::one() / T::of(group as f64);
        p.chunks(group)
            .zip(t.chunks(group))
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<T>() * inv)
            .collect()
    };
    Tensor::from_op(
        data,
        shape,
        L1 {
            pred: pred.clone(),
            target: target.clone(),
            group,
        },
    )
}

/// Mean absolute difference. The subgradient at exact ties is 0.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("l1_loss", pred, target)?;
    if pred.numel() == 0 {
        return Err(Error::arg("l1_loss of empty tensors"));
    }
    Ok(l1_grouped(pred, target, pred.numel(), Vec::new()))
}

/// Mean absolute difference per leading-axis sample: `[B, ...] -> [B]`.
pub fn l1_per_sample<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("l1_per_sample", pred, target)?;
    if pred.rank() == 0 || pred.numel() == 0 {
        return Err(Error::arg("l1_per_sample needs a non-empty batch axis"));
    }
    let b = pred.shape()[0];
    Ok(l1_grouped(pred, target, pred.numel() / b, vec![b]))
}

struct Mse<T: Scalar> {
    pred: Tensor<T>,
    target: Tensor<T>,
}

impl<T: Scalar> Backward<T> for Mse<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        vec![&self.pred, &self.target]
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (p, t) = (self.pred.data(), self.target.data());
        let k = g[0] * T::of(2.0 / p.len() as f64);
        let dp: Vec<T> = p.iter().zip(t.iter()).map(|(&a, &b)| k * (a - b)).collect();
        let dt = self
            .target
            .requires_grad()
            .then(|| dp.iter().map(|&v| -v).collect());
        vec![self.pred.requires_grad().then_some(dp), dt]
    }
}

pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("mse_loss", pred, target)?;
    if pred.numel() == 0 {
        return Err(Error::arg("mse_loss of empty tensors"));
    }
    let v = {
        let (p, t) = (pred.data(), target.data());
        p.iter()
            .zip(t.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / T::of(p.len() as f64)
    };
    Ok(Tensor::from_op(
        vec![v],
        Vec::new(),
        Mse {
            pred: pred.clone(),
            target: target.clone(),
        },
    ))
}

struct CrossEntropy<T: Scalar> {
    logits: Tensor<T>,
    labels: Vec<usize>,
    weights: Vec<T>,
    probs: Vec<T>,
}

impl<T: Scalar> Backward<T> for CrossEntropy<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        vec![&self.logits]
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (b, k) = (self.logits.shape()[0], self.logits.shape()[1]);
        let scale = g[0] / T::of(b as f64);
        let mut d = self.probs.clone();
        for (i, &y) in self.labels.iter().enumerate() {
            d[i * k + y] -= T::one();
            let w = self.weights[y] * scale;
            d[i * k..(i + 1) * k].iter_mut().for_each(|v| *v *= w);
        }
        vec![Some(d)]
    }
}

/// Class-weighted softmax cross-entropy averaged over the batch:
/// `mean_i w[y_i] * -log softmax(logits_i)[y_i]`.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    weights: &[T],
) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::dim(
            "cross_entropy",
            "rank",
            format!("logits {:?}", logits.shape()),
        ));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::dim(
            "cross_entropy",
            0,
            format!("{} labels for batch {b}", labels.len()),
        ));
    }
    if weights.len() != k {
        return Err(Error::dim(
            "cross_entropy",
            1,
            format!("{} weights for {k} classes", weights.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::arg(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    if b == 0 {
        return Err(Error::arg("cross_entropy of an empty batch"));
    }
    let x = logits.data();
    let mut probs = vec![T::zero(); b * k];
    let mut total = T::zero();
    for i in 0..b {
        let row = &x[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        for j in 0..k {
            probs[i * k + j] = (row[j] - m).exp() / z;
        }
        let log_p = row[labels[i]] - m - z.ln();
        total -= weights[labels[i]] * log_p;
    }
    drop(x);
    Ok(Tensor::from_op(
        vec![total / T::of(b as f64)],
        Vec::new(),
        CrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
            weights: weights.to_vec(),
            probs,
        },
    ))
}

/// Per-label weights applied to negative and positive targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelWeights {
    pub negative: Vec<f64>,
    pub positive: Vec<f64>,
}

struct Bce<T: Scalar> {
    logits: Tensor<T>,
    targets: Vec<T>,
    neg: Vec<T>,
    pos: Vec<T>,
}

impl<T: Scalar> Backward<T> for Bce<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        vec![&self.logits]
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let l = self.pos.len();
        let x = self.logits.data();
        let scale = g[0] / T::of(x.len() as f64);
        let d = x
            .iter()
            .zip(&self.targets)
            .enumerate()
            .map(|(i, (&z, &y))| {
                let s = T::one() / (T::one() + (-z).exp());
                let j = i % l;
                scale * (self.pos[j] * y * (s - T::one()) + self.neg[j] * (T::one() - y) * s)
            })
            .collect();
        vec![Some(d)]
    }
}

fn softplus<T: Scalar>(z: T) -> T {
    // log(1 + e^z) without overflow
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Weighted binary cross-entropy on logits `[B, L]` against 0/1 targets,
/// averaged over every (sample, label) pair.
pub fn bce_with_logits<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[T],
    weights: &LabelWeights,
) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::dim(
            "bce_with_logits",
            "rank",
            format!("logits {:?}", logits.shape()),
        ));
    }
    let l = logits.shape()[1];
    if targets.len() != logits.numel() {
        return Err(Error::dim(
            "bce_with_logits",
            0,
            format!("{} targets for logits {:?}", targets.len(), logits.shape()),
        ));
    }
    if weights.positive.len() != l || weights.negative.len() != l {
        return Err(Error::dim(
            "bce_with_logits",
            1,
            format!(
                "weights for {} labels, logits have {l}",
                weights.positive.len()
            ),
        ));
    }
    if logits.numel() == 0 {
        return Err(Error::arg("bce_with_logits of an empty batch"));
    }
    let pos: Vec<T> = weights.positive.iter().map(|&w| T::of(w)).collect();
    let neg: Vec<T> = weights.negative.iter().map(|&w| T::of(w)).collect();
    let total: T = logits
        .data()
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (&z, &y))| {
            let j = i % l;
            // -log sigmoid(z) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z)
            pos[j] * y * softplus(-z) + neg[j] * (T::one() - y) * softplus(z)
        })
        .sum();
    Ok(Tensor::from_op(
        vec![total / T::of(logits.numel() as f64)],
        Vec::new(),
        Bce {
            logits: logits.clone(),
            targets: targets.to_vec(),
            neg,
            pos,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check::{random_tensor, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(v.to_vec(), &[v.len()]).unwrap()
    }

    #[test]
    fn l1_values() {
        assert_eq!(
            l1_loss(&t(&[0.0, 4.0]), &t(&[1.0, 2.0])).unwrap().item(),
            1.5
        );
        let a = t(&[0.3, -2.0, 5.0]);
        assert_eq!(l1_loss(&a, &a).unwrap().item(), 0.0);
        assert!(matches!(
            l1_loss(&a, &t(&[1.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn l1_is_nonnegative_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let ab = l1_loss(&t(&a), &t(&b)).unwrap().item();
            let ba = l1_loss(&t(&b), &t(&a)).unwrap().item();
            assert!(ab >= 0.0);
            assert_eq!(ab, ba);
        }
    }

    #[test]
    fn l1_tie_has_zero_subgradient() {
        let p = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        l1_loss(&p, &t(&[1.0, 0.0])).unwrap().backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![0.0, 0.5]);
    }

    #[test]
    fn per_sample_l1_averages_each_row() {
        let p = Tensor::<f64>::new(vec![0.0, 0.0, 1.0, 3.0], &[2, 2]).unwrap();
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(l1_per_sample(&p, &z).unwrap().to_vec(), vec![0.0, 2.0]);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let check = GradCheck {
            skip_kinks: true,
            ..GradCheck::default()
        };
        for _ in 0..10 {
            let p = random_tensor(&[3, 4], &mut rng);
            let q = random_tensor(&[3, 4], &mut rng);
            let r = check
                .run(&[p.clone(), q.clone()], || l1_loss(&p, &q))
                .unwrap();
            assert!(r.max_rel_error < 1e-3, "{r:?}");
            let r = check
                .run(&[p.clone(), q.clone()], || {
                    let w = Tensor::new(vec![1.0, 2.0, 3.0], &[3])?;
                    Ok(crate::tensor::sum(&crate::tensor::mul(
                        &l1_per_sample(&p, &q)?,
                        &w,
                    )?))
                })
                .unwrap();
            assert!(r.max_rel_error < 1e-3, "{r:?}");
            let r = check
                .run(&[p.clone(), q.clone()], || mse_loss(&p, &q))
                .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");

            let labels = [0usize, 3, 1];
            let weights = [0.5, 1.0, 1.5, 1.0];
            let r = check
                .run(std::slice::from_ref(&p), || {
                    weighted_cross_entropy(&p, &labels, &weights)
                })
                .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");

            let targets: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
            let lw = LabelWeights {
                negative: vec![0.6, 1.0, 0.8, 1.2],
                positive: vec![1.4, 1.0, 1.2, 0.8],
            };
            let r = check
                .run(std::slice::from_ref(&p), || bce_with_logits(&p, &targets, &lw))
                .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn cross_entropy_hand_value() {
        let logits = Tensor::<f64>::new(vec![0.0, 0.0], &[1, 2]).unwrap();
        let ce = weighted_cross_entropy(&logits, &[1], &[1.0, 1.0])
            .unwrap()
            .item();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_match_plain_losses() {
        let logits = Tensor::<f64>::new(vec![0.3, -1.2, 2.0, 0.1, 0.0, -0.4], &[2, 3]).unwrap();
        let a = weighted_cross_entropy(&logits, &[2, 0], &[1.0; 3])
            .unwrap()
            .item();
        let manual: f64 = [(0usize, 2usize), (1, 0)]
            .iter()
            .map(|&(i, y)| {
                let row = &logits.data()[i * 3..i * 3 + 3];
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .sum::<f64>()
            / 2.0;
        assert!((a - manual).abs() < 1e-12);

        let z = Tensor::<f64>::new(vec![0.0], &[1, 1]).unwrap();
        let w = LabelWeights {
            negative: vec![1.0],
            positive: vec![1.0],
        };
        assert!((bce_with_logits(&z, &[1.0], &w).unwrap().item() - 2f64.ln()).abs() < 1e-12);
    }
}
