//! 2-D convolution and transposed convolution over `[B, C, H, W]` tensors.
//!
//! Both lower to im2col plus one matrix product per image. The transposed
//! convolution is the adjoint of the forward one and shares the same
//! column layout.

use super::{Backward, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds one image into a `[C*kh*kw, out_h*out_w]` matrix.
fn im2col<T: Scalar>(img: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, img: &mut [T]) {
    let p = g.cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (stride >= 1 && kernel >= 1 && kernel <= padded).then(|| (padded - kernel) / stride + 1)
}

pub fn conv_transpose_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    ((input - 1) * stride + kernel)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0)
}

fn expect_rank<T: Scalar>(op: &'static str, what: &str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(
            op,
            "rank",
            format!("{what} must have rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn check_bias<T: Scalar>(
    op: &'static str,
    bias: Option<&Tensor<T>>,
    channels: usize,
) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::dim(
                op,
                0,
                format!("bias shape {:?}, expected [{channels}]", b.shape()),
            ));
        }
    }
    Ok(())
}

fn add_bias<T: Scalar>(
    out: &mut [T],
    bias: Option<&Tensor<T>>,
    batch: usize,
    channels: usize,
    plane: usize,
) {
    if let Some(b) = bias {
        let b = b.data();
        for chunk in out.chunks_mut(channels * plane).take(batch) {
            for (c, bv) in b.iter().enumerate() {
                chunk[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += *bv);
            }
        }
    }
}

fn bias_grad<T: Scalar>(g: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for chunk in g.chunks(channels * plane).take(batch) {
        for (c, d) in db.iter_mut().enumerate() {
            *d += chunk[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
        }
    }
    db
}

struct Conv2d<T: Scalar> {
    input: Tensor<T>,
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    geom: Geometry,
    batch: usize,
    out_channels: usize,
    /// im2col of every image, saved from the forward pass.
    cols: Vec<T>,
}

impl<T: Scalar> Backward<T> for Conv2d<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        let mut p = vec![&self.input, &self.weight];
        p.extend(self.bias.as_ref());
        p
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let geom = &self.geom;
        let (k, r, p) = (self.out_channels, geom.rows(), geom.cols());
        let w = self.weight.data();

        let dweight = self.weight.requires_grad().then(|| {
            let mut dw = vec![T::zero(); k * r];
            for b in 0..self.batch {
                let gb = &g[b * k * p..(b + 1) * k * p];
                let cb = &self.cols[b * r * p..(b + 1) * r * p];
                T::gemm(
                    k,
                    p,
                    r,
                    T::one(),
                    gb,
                    (p, 1),
                    cb,
                    (1, p),
                    T::one(),
                    &mut dw,
                    (r, 1),
                );
            }
            dw
        });

        let dinput = self.input.requires_grad().then(|| {
            let mut dx = vec![T::zero(); self.batch * geom.image_len()];
            let mut dcols = vec![T::zero(); r * p];
            for b in 0..self.batch {
                let gb = &g[b * k * p..(b + 1) * k * p];
                T::gemm(
                    r,
                    k,
                    p,
                    T::one(),
                    &w,
                    (1, r),
                    gb,
                    (p, 1),
                    T::zero(),
                    &mut dcols,
                    (p, 1),
                );
                col2im(
                    &dcols,
                    geom,
                    &mut dx[b * geom.image_len()..(b + 1) * geom.image_len()],
                );
            }
            dx
        });

        let mut grads = vec![dinput, dweight];
        if let Some(bias) = &self.bias {
            grads.push(bias.requires_grad().then(|| bias_grad(g, self.batch, k, p)));
        }
        grads
    }
}

/// Cross-correlation of `input [B,C,H,W]` with `weight [K,C,kh,kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    expect_rank(OP, "input", input, 4)?;
    expect_rank(OP, "weight", weight, 4)?;
    let &[batch, channels, height, width] = input.shape() else {
        unreachable!()
    };
    let &[k, wc, kh, kw] = weight.shape() else {
        unreachable!()
    };
    if wc != channels {
        return Err(Error::dim(
            OP,
            1,
            format!("input has {channels} channels, weight expects {wc}"),
        ));
    }
    if stride == 0 {
        return Err(Error::arg("conv2d stride must be at least 1"));
    }
    let out_h = conv_output_size(height, kh, stride, padding).ok_or_else(|| {
        Error::dim(
            OP,
            2,
            format!(
                "kernel height {kh} exceeds padded height {}",
                height + 2 * padding
            ),
        )
    })?;
    let out_w = conv_output_size(width, kw, stride, padding).ok_or_else(|| {
        Error::dim(
            OP,
            3,
            format!(
                "kernel width {kw} exceeds padded width {}",
                width + 2 * padding
            ),
        )
    })?;
    check_bias(OP, bias, k)?;

    let geom = Geometry {
        channels,
        height,
        width,
        kh,
        kw,
        stride,
        pad: padding,
        out_h,
        out_w,
    };
    let (r, p) = (geom.rows(), geom.cols());
    let mut cols = vec![T::zero(); batch * r * p];
    let mut out = vec![T::zero(); batch * k * p];
    {
        let x = input.data();
        let w = weight.data();
        for b in 0..batch {
            let cb = &mut cols[b * r * p..(b + 1) * r * p];
            im2col(
                &x[b * geom.image_len()..(b + 1) * geom.image_len()],
                &geom,
                cb,
            );
            T::gemm(
                k,
                r,
                p,
                T::one(),
                &w,
                (r, 1),
                cb,
                (p, 1),
                T::zero(),
                &mut out[b * k * p..(b + 1) * k * p],
                (p, 1),
            );
        }
    }
    add_bias(&mut out, bias, batch, k, p);
    Ok(Tensor::from_op(
        out,
        vec![batch, k, out_h, out_w],
        Conv2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            geom,
            batch,
            out_channels: k,
            cols,
        },
    ))
}

struct ConvTranspose2d<T: Scalar> {
    input: Tensor<T>,
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    /// Geometry of the output image seen as the input of the adjoint convolution.
    geom: Geometry,
    batch: usize,
    in_channels: usize,
}

impl<T: Scalar> Backward<T> for ConvTranspose2d<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        let mut p = vec![&self.input, &self.weight];
        p.extend(self.bias.as_ref());
        p
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let geom = &self.geom;
        let (cin, r, p) = (self.in_channels, geom.rows(), geom.cols());
        let out_len = geom.image_len();
        let needs_x = self.input.requires_grad();
        let needs_w = self.weight.requires_grad();
        let mut dx = needs_x.then(|| vec![T::zero(); self.batch * cin * p]);
        let mut dw = needs_w.then(|| vec![T::zero(); cin * r]);
        if needs_x || needs_w {
            let x = self.input.data();
            let w = self.weight.data();
            let mut gcols = vec![T::zero(); r * p];
            for b in 0..self.batch {
                im2col(&g[b * out_len..(b + 1) * out_len], geom, &mut gcols);
                if let Some(dx) = dx.as_mut() {
                    T::gemm(
                        cin,
                        r,
                        p,
                        T::one(),
                        &w,
                        (r, 1),
                        &gcols,
                        (p, 1),
                        T::zero(),
                        &mut dx[b * cin * p..(b + 1) * cin * p],
                        (p, 1),
                    );
                }
                if let Some(dw) = dw.as_mut() {
                    let xb = &x[b * cin * p..(b + 1) * cin * p];
                    T::gemm(
                        cin,
                        p,
                        r,
                        T::one(),
                        xb,
                        (p, 1),
                        &gcols,
                        (1, p),
                        T::one(),
                        dw,
                        (r, 1),
                    );
                }
            }
        }
        let mut grads = vec![dx, dw];
        if let Some(bias) = &self.bias {
            grads.push(
                bias.requires_grad()
                    .then(|| bias_grad(g, self.batch, geom.channels, geom.height * geom.width)),
            );
        }
        grads
    }
}

/// Transposed convolution of `input [B,Cin,H,W]` with `weight [Cin,Cout,kh,kw]`.
///
/// Output spatial size is `(H-1)*stride - 2*padding + kh`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose2d";
    expect_rank(OP, "input", input, 4)?;
    expect_rank(OP, "weight", weight, 4)?;
    let &[batch, cin, height, width] = input.shape() else {
        unreachable!()
    };
    let &[wc, cout, kh, kw] = weight.shape() else {
        unreachable!()
    };
    if wc != cin {
        return Err(Error::dim(
            OP,
            1,
            format!("input has {cin} channels, weight expects {wc}"),
        ));
    }
    if stride == 0 {
        return Err(Error::arg("conv_transpose2d stride must be at least 1"));
    }
    let out_h = conv_transpose_output_size(height, kh, stride, padding)
        .ok_or_else(|| Error::dim(OP, 2, "padding consumes the whole output height"))?;
    let out_w = conv_transpose_output_size(width, kw, stride, padding)
        .ok_or_else(|| Error::dim(OP, 3, "padding consumes the whole output width"))?;
    check_bias(OP, bias, cout)?;

    let geom = Geometry {
        channels: cout,
        height: out_h,
        width: out_w,
        kh,
        kw,
        stride,
        pad: padding,
        out_h: height,
        out_w: width,
    };
    let (r, p) = (geom.rows(), geom.cols());
    let out_len = geom.image_len();
    let mut out = vec![T::zero(); batch * out_len];
    {
        let x = input.data();
        let w = weight.data();
        let mut cols = vec![T::zero(); r * p];
        for b in 0..batch {
            let xb = &x[b * cin * p..(b + 1) * cin * p];
            T::gemm(
                r,
                cin,
                p,
                T::one(),
                &w,
                (1, r),
                xb,
                (p, 1),
                T::zero(),
                &mut cols,
                (p, 1),
            );
            col2im(&cols, &geom, &mut out[b * out_len..(b + 1) * out_len]);
        }
    }
    add_bias(&mut out, bias, batch, cout, out_h * out_w);
    Ok(Tensor::from_op(
        out,
        vec![batch, cout, out_h, out_w],
        ConvTranspose2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            geom,
            batch,
            in_channels: cin,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check::{check_gradients, random_tensor};
    use crate::tensor::{mul, sum};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_kernel_doubles() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::new(vec![2.0], &[1, 1, 1, 1]).unwrap();
        let b = Tensor::new(vec![0.0], &[1]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec(), vec![2.0; 9]);
    }

    #[test]
    fn hand_convolution() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let w = Tensor::new(vec![1.0; 4], &[1, 1, 2, 2]).unwrap();
        let b = Tensor::new(vec![0.0], &[1]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.to_vec(), vec![10.0]);
    }

    #[test]
    fn output_size_formula() {
        let x = Tensor::<f32>::zeros(&[2, 3, 9, 7]);
        let w = Tensor::<f32>::zeros(&[4, 3, 3, 2]);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 4]);
    }

    #[test]
    fn mismatches_name_the_axis() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        match conv2d(&x, &w, None, 1, 0) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "1"),
            other => panic!("{other:?}"),
        }
        let big = Tensor::<f32>::zeros(&[2, 3, 7, 3]);
        match conv2d(&x, &big, None, 1, 1) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching geometry
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&[2, 3, 8, 8], &mut rng);
        let w = random_tensor(&[5, 3, 4, 4], &mut rng);
        let cx = conv2d(&x, &w, None, 2, 1).unwrap();
        let y = random_tensor(cx.shape(), &mut rng);
        let ty = conv_transpose2d(&y, &w, None, 2, 1).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs = sum(&mul(&cx, &y).unwrap()).item();
        let rhs = sum(&mul(&x, &ty).unwrap()).item();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, pad) in [(1, 0), (2, 1), (1, 1)] {
            let x = random_tensor(&[2, 2, 4, 4], &mut rng);
            let w = random_tensor(&[3, 2, 3, 3], &mut rng);
            let b = random_tensor(&[3], &mut rng);
            let report = check_gradients(&[x.clone(), w.clone(), b.clone()], 1e-5, || {
                let y = conv2d(&x, &w, Some(&b), stride, pad)?;
                let probe = Tensor::new(
                    (0..y.numel()).map(|i| (i as f64 * 0.37).sin()).collect(),
                    y.shape(),
                )?;
                Ok(sum(&mul(&y, &probe)?))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (k, stride, pad) in [(4, 2, 1), (2, 1, 0), (3, 2, 0)] {
            let x = random_tensor(&[2, 3, 3, 3], &mut rng);
            let w = random_tensor(&[3, 2, k, k], &mut rng);
            let b = random_tensor(&[2], &mut rng);
            let report = check_gradients(&[x.clone(), w.clone(), b.clone()], 1e-5, || {
                let y = conv_transpose2d(&x, &w, Some(&b), stride, pad)?;
                let probe = Tensor::new(
                    (0..y.numel()).map(|i| (i as f64 * 0.61).cos()).collect(),
                    y.shape(),
                )?;
                Ok(sum(&mul(&y, &probe)?))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
