//! Elementwise, reduction, and shape operations.

use super::{check_same_shape, Backward, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary<T: Scalar> {
    kind: BinaryKind,
    a: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Scalar> Backward<T> for Binary<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        vec![&self.a, &self.b]
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (ga, gb) = (self.a.requires_grad(), self.b.requires_grad());
        match self.kind {
            BinaryKind::Add => vec![ga.then(|| g.to_vec()), gb.then(|| g.to_vec())],
            BinaryKind::Sub => vec![
                ga.then(|| g.to_vec()),
                gb.then(|| g.iter().map(|&v| -v).collect()),
            ],
            BinaryKind::Mul => {
                let (a, b) = (self.a.data(), self.b.data());
                vec![
                    ga.then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect()),
                    gb.then(|| g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect()),
                ]
            }
            BinaryKind::Div => {
                let (a, b) = (self.a.data(), self.b.data());
                vec![
                    ga.then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g / b).collect()),
                    gb.then(|| {
                        g.iter()
                            .zip(a.iter().zip(b.iter()))
                            .map(|(&g, (&a, &b))| -g * a / (b * b))
                            .collect()
                    }),
                ]
            }
        }
    }
}

fn binary<T: Scalar>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let name = match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    };
    check_same_shape(name, a, b)?;
    let data: Vec<T> = {
        let (x, y) = (a.data(), b.data());
        let f = |(&x, &y): (&T, &T)| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        x.iter().zip(y.iter()).map(f).collect()
    };
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        Binary {
            kind,
            a: a.clone(),
            b: b.clone(),
        },
    ))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinaryKind::Add, a, b)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinaryKind::Sub, a, b)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinaryKind::Mul, a, b)
}

pub fn div<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinaryKind::Div, a, b)
}

#[derive(Clone, Copy)]
enum UnaryKind<T> {
    Scale(T),
    Exp,
    Tanh,
    LeakyRelu(T),
}

struct Unary<T: Scalar> {
    kind: UnaryKind<T>,
    x: Tensor<T>,
}

impl<T: Scalar> Backward<T> for Unary<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        vec![&self.x]
    }

    fn backward(&self, out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let dx = match self.kind {
            UnaryKind::Scale(c) => g.iter().map(|&g| g * c).collect(),
            UnaryKind::Exp => g.iter().zip(out).map(|(&g, &y)| g * y).collect(),
            UnaryKind::Tanh => g
                .iter()
                .zip(out)
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect(),
            UnaryKind::LeakyRelu(slope) => {
                let x = self.x.data();
                g.iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| if x > T::zero() { g } else { g * slope })
                    .collect()
            }
        };
        vec![Some(dx)]
    }
}

fn unary<T: Scalar>(kind: UnaryKind<T>, x: &Tensor<T>) -> Tensor<T> {
    let data = {
        let d = x.data();
        match kind {
            UnaryKind::Scale(c) => d.iter().map(|&v| v * c).collect(),
            UnaryKind::Exp => d.iter().map(|v| v.exp()).collect(),
            UnaryKind::Tanh => d.iter().map(|v| v.tanh()).collect(),
            UnaryKind::LeakyRelu(s) => d
                .iter()
                .map(|&v| if v > T::zero() { v } else { v * s })
                .collect(),
        }
    };
    Tensor::from_op(data, x.shape().to_vec(), Unary { kind, x: x.clone() })
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    unary(UnaryKind::Scale(T::of(c)), x)
}

pub fn exp<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary(UnaryKind::Exp, x)
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary(UnaryKind::Tanh, x)
}

/// `max(x, slope * x)` elementwise. The derivative at exactly 0 is taken as `slope`.
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&slope) {
        return Err(Error::arg(format!(
            "leaky_relu slope {slope} outside [0, 1)"
        )));
    }
    Ok(unary(UnaryKind::LeakyRelu(T::of(slope)), x))
}

struct Reduce<T: Scalar> {
    x: Tensor<T>,
    factor: T,
}

impl<T: Scalar> Backward<T> for Reduce<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        vec![&self.x]
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0] * self.factor; self.x.numel()])]
    }
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.data().iter().copied().sum();
    Tensor::from_op(
        vec![s],
        Vec::new(),
        Reduce {
            x: x.clone(),
            factor: T::one(),
        },
    )
}

pub fn mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.numel();
    if n == 0 {
        return Err(Error::arg("mean of an empty tensor"));
    }
    let s: T = x.data().iter().copied().sum();
    let inv = T::one() / T::of(n as f64);
    Ok(Tensor::from_op(
        vec![s * inv],
        Vec::new(),
        Reduce {
            x: x.clone(),
            factor: inv,
        },
    ))
}

struct Reshape<T: Scalar> {
    x: Tensor<T>,
}

impl<T: Scalar> Backward<T> for Reshape<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        vec![&self.x]
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != x.numel() {
        return Err(Error::dim(
            "reshape",
            "*",
            format!("cannot view {:?} as {shape:?}", x.shape()),
        ));
    }
    Ok(Tensor::from_op(
        x.to_vec(),
        shape.to_vec(),
        Reshape { x: x.clone() },
    ))
}

/// Maps every output flat index to the input flat index it reads.
fn broadcast_index(from: &[usize], to: &[usize]) -> Vec<usize> {
    let rank = to.len();
    let mut in_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        in_strides[d] = if from[d] == 1 { 0 } else { acc };
        acc *= from[d];
    }
    let n: usize = to.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        out.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

struct Broadcast<T: Scalar> {
    x: Tensor<T>,
    map: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Broadcast<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        vec![&self.x]
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); self.x.numel()];
        for (&src, &gv) in self.map.iter().zip(g) {
            dx[src] += gv;
        }
        vec![Some(dx)]
    }
}

/// Repeats size-1 axes of `x` to reach `shape` (ranks must match).
pub fn broadcast_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if x.rank() != shape.len() {
        return Err(Error::dim(
            "broadcast_to",
            "rank",
            format!("{:?} -> {shape:?}", x.shape()),
        ));
    }
    for (d, (&f, &t)) in x.shape().iter().zip(shape).enumerate() {
        if f != t && f != 1 {
            return Err(Error::dim(
                "broadcast_to",
                d,
                format!("{f} cannot broadcast to {t}"),
            ));
        }
    }
    let map = broadcast_index(x.shape(), shape);
    let data = {
        let d = x.data();
        map.iter().map(|&i| d[i]).collect()
    };
    Ok(Tensor::from_op(
        data,
        shape.to_vec(),
        Broadcast { x: x.clone(), map },
    ))
}

struct Concat<T: Scalar> {
    parts: Vec<Tensor<T>>,
    axis: usize,
}

impl<T: Scalar> Concat<T> {
    fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
        (
            shape[..axis].iter().product(),
            shape[axis + 1..].iter().product(),
        )
    }
}

impl<T: Scalar> Backward<T> for Concat<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        self.parts.iter().collect()
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (outer, inner) = Self::outer_inner(self.parts[0].shape(), self.axis);
        let total: usize = self.parts.iter().map(|p| p.shape()[self.axis]).sum();
        let mut offset = 0;
        self.parts
            .iter()
            .map(|p| {
                let len = p.shape()[self.axis];
                let out = p.requires_grad().then(|| {
                    let mut dx = Vec::with_capacity(p.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dx.extend_from_slice(&g[start..start + len * inner]);
                    }
                    dx
                });
                offset += len;
                out
            })
            .collect()
    }
}

/// Joins tensors along `axis`; all other axes must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::dim(
            "concat",
            axis,
            format!("rank is {}", first.rank()),
        ));
    }
    for p in &parts[1..] {
        if p.rank() != first.rank() {
            return Err(Error::dim(
                "concat",
                "rank",
                format!("{:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        for d in 0..first.rank() {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(Error::dim(
                    "concat",
                    d,
                    format!("{:?} vs {:?}", first.shape(), p.shape()),
                ));
            }
        }
    }
    let (outer, inner) = Concat::<T>::outer_inner(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_op(
        data,
        shape,
        Concat {
            parts: parts.iter().map(|&p| p.clone()).collect(),
            axis,
        },
    ))
}

struct IndexSelect<T: Scalar> {
    x: Tensor<T>,
    indices: Vec<usize>,
}

impl<T: Scalar> Backward<T> for IndexSelect<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        vec![&self.x]
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let row = self.x.numel() / self.x.shape()[0];
        let mut dx = vec![T::zero(); self.x.numel()];
        for (k, &i) in self.indices.iter().enumerate() {
            for (d, s) in dx[i * row..(i + 1) * row]
                .iter_mut()
                .zip(&g[k * row..(k + 1) * row])
            {
                *d += *s;
            }
        }
        vec![Some(dx)]
    }
}

/// Gathers slices along axis 0. Indices may repeat.
pub fn index_select<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(Error::dim("index_select", 0, "scalar input"));
    }
    let n = x.shape()[0];
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::dim(
            "index_select",
            0,
            format!("index {bad} out of range for size {n}"),
        ));
    }
    let row = x.numel().checked_div(n).unwrap_or(0);
    let mut data = Vec::with_capacity(indices.len() * row);
    {
        let d = x.data();
        for &i in indices {
            data.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    Ok(Tensor::from_op(
        data,
        shape,
        IndexSelect {
            x: x.clone(),
            indices: indices.to_vec(),
        },
    ))
}

/// Elementwise maximum of equally shaped tensors, as an untracked constant.
pub(crate) fn elementwise_max<T: Scalar>(values: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = values
        .first()
        .ok_or_else(|| Error::arg("max of zero tensors"))?;
    let mut out = first.to_vec();
    for v in &values[1..] {
        check_same_shape("elementwise_max", first, v)?;
        for (o, &x) in out.iter_mut().zip(v.data().iter()) {
            if x > *o {
                *o = x;
            }
        }
    }
    Ok(Tensor::constant(out, first.shape().to_vec()))
}

/// Per-position softmax across a list of equally shaped maps:
/// `w_i = exp(c_i) / sum_j exp(c_j)`.
///
/// The per-position maximum is subtracted first; softmax is invariant to that
/// shift so it is treated as a constant in the backward pass.
pub fn softmax_weights<T: Scalar>(values: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    if values.is_empty() {
        return Err(Error::arg("softmax_weights needs at least one map"));
    }
    let refs: Vec<&Tensor<T>> = values.iter().collect();
    let max = elementwise_max(&refs)?;
    let exps = values
        .iter()
        .map(|v| Ok(exp(&sub(v, &max)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut total = exps[0].clone();
    for e in &exps[1..] {
        total = add(&total, e)?;
    }
    exps.iter().map(|e| div(e, &total)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn leaky_relu_values() {
        let y = leaky_relu(&t(&[-2.0, 3.0, 0.0], &[3]), 0.2).unwrap();
        let v = y.to_vec();
        assert!((v[0] + 0.4).abs() < 1e-15);
        assert_eq!(v[1], 3.0);
        assert_eq!(v[2], 0.0);
        assert!(leaky_relu(&t(&[1.0], &[1]), 1.0).is_err());
    }

    #[test]
    fn softmax_two_maps() {
        let c1 = t(&[3f64.ln(), 0.0], &[1, 2]);
        let c2 = t(&[0.0, 0.0], &[1, 2]);
        let w = softmax_weights(&[c1, c2]).unwrap();
        let (a, b) = (w[0].to_vec(), w[1].to_vec());
        assert!((a[0] - 0.75).abs() < 1e-12 && (b[0] - 0.25).abs() < 1e-12);
        assert!((a[1] - 0.5).abs() < 1e-12 && (b[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_single_map_is_one() {
        let w = softmax_weights(&[t(&[5.0, -100.0, 0.3], &[3])]).unwrap();
        assert_eq!(w[0].to_vec(), vec![1.0, 1.0, 1.0]);
        assert!(softmax_weights::<f64>(&[]).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let w = softmax_weights(&[t(&[1000.0], &[1]), t(&[999.0], &[1])]).unwrap();
        let s = w[0].item() + w[1].item();
        assert!((s - 1.0).abs() < 1e-12 && w[0].item().is_finite());
    }

    #[test]
    fn concat_and_select_roundtrip_values() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = index_select(&c, &[1, 1, 0]).unwrap();
        assert_eq!(
            s.to_vec(),
            vec![3.0, 4.0, 6.0, 3.0, 4.0, 6.0, 1.0, 2.0, 5.0]
        );
        assert!(concat(&[&a, &t(&[1.0; 3], &[3, 1])], 1).is_err());
    }

    #[test]
    fn broadcast_repeats_unit_axes() {
        let x = t(&[1.0, 2.0], &[2, 1]);
        let y = broadcast_to(&x, &[2, 3]).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(broadcast_to(&x, &[3, 3]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let a = random_tensor(&[2, 3], &mut rng);
            let b = random_tensor(&[2, 3], &mut rng);
            // keep the divisor away from zero
            let bpos =
                Tensor::param(b.data().iter().map(|v| v.abs() + 0.5).collect(), &[2, 3]).unwrap();
            let col = random_tensor(&[2, 1], &mut rng);
            let report = check_gradients(&[a.clone(), bpos.clone(), col.clone()], 1e-5, || {
                let p = mul(&a, &bpos)?;
                let q = div(&sub(&p, &a)?, &bpos)?;
                let r = add(&tanh(&q), &exp(&scale(&a, 0.3)))?;
                let bc = broadcast_to(&col, &[2, 3])?;
                let cat = concat(&[&mul(&r, &bc)?, &a], 1)?;
                let sel = index_select(&cat, &[1, 0, 1])?;
                let v = reshape(&sel, &[18])?;
                mean(&leaky_relu(&v, 0.2)?)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-3, "{report:?}");
        }
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let maps: Vec<_> = (0..3).map(|_| random_tensor(&[2, 2], &mut rng)).collect();
            let probe = random_tensor(&[2, 2], &mut rng);
            let report = check_gradients(&maps, 1e-5, || {
                let w = softmax_weights(&maps)?;
                let mut acc = mul(&w[0], &probe)?;
                for (i, wi) in w.iter().enumerate().skip(1) {
                    acc = add(&acc, &scale(&mul(wi, &probe)?, i as f64 + 1.0))?;
                }
                Ok(sum(&acc))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-3, "{report:?}");
        }
    }
}
