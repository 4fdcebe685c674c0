//! Differentiable bilinear sampling driven by a per-pixel offset field.
//!
//! Coordinates are normalized so that -1 and +1 address the centers of the
//! first and last pixel along each axis. Target pixel `(x, y)` reads the source
//! at `(x, y) + (dx, dy) * (size - 1) / 2` in pixel units, clamped to the
//! border.

use super::{Backward, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: T,
    wy: T,
    /// Derivative of the clamped pixel coordinate w.r.t. the raw offset.
    dpx: T,
    dpy: T,
}

fn tap<T: Scalar>(coord_x: T, coord_y: T, w: usize, h: usize) -> Tap<T> {
    let axis = |c: T, n: usize, half: T| -> (usize, usize, T, T) {
        let hi = T::of((n - 1) as f64);
        let (c, slope) = if c < T::zero() {
            (T::zero(), T::zero())
        } else if c > hi {
            (hi, T::zero())
        } else {
            (c, half)
        };
        let i0 = c.floor().to_usize().unwrap_or(0).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - T::of(i0 as f64), slope)
    };
    let half_w = T::of((w - 1) as f64 * 0.5);
    let half_h = T::of((h - 1) as f64 * 0.5);
    let (x0, x1, wx, dpx) = axis(coord_x, w, half_w);
    let (y0, y1, wy, dpy) = axis(coord_y, h, half_h);
    Tap {
        x0,
        x1,
        y0,
        y1,
        wx,
        wy,
        dpx,
        dpy,
    }
}

struct GridSample<T: Scalar> {
    source: Tensor<T>,
    flow: Tensor<T>,
    taps: Vec<Tap<T>>,
}

impl<T: Scalar> Backward<T> for GridSample<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        vec![&self.source, &self.flow]
    }

    fn backward(&self, _out: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let &[batch, channels, h, w] = self.source.shape() else {
            unreachable!()
        };
        let plane = h * w;
        let src = self.source.data();
        let one = T::one();
        let mut dsrc = self
            .source
            .requires_grad()
            .then(|| vec![T::zero(); src.len()]);
        let mut dflow = self
            .flow
            .requires_grad()
            .then(|| vec![T::zero(); batch * 2 * plane]);
        for b in 0..batch {
            for pix in 0..plane {
                let t = self.taps[b * plane + pix];
                let (mut gx, mut gy) = (T::zero(), T::zero());
                for c in 0..channels {
                    let base = (b * channels + c) * plane;
                    let go = g[base + pix];
                    if let Some(ds) = dsrc.as_mut() {
                        ds[base + t.y0 * w + t.x0] += go * (one - t.wx) * (one - t.wy);
                        ds[base + t.y0 * w + t.x1] += go * t.wx * (one - t.wy);
                        ds[base + t.y1 * w + t.x0] += go * (one - t.wx) * t.wy;
                        ds[base + t.y1 * w + t.x1] += go * t.wx * t.wy;
                    }
                    if dflow.is_some() {
                        let v00 = src[base + t.y0 * w + t.x0];
                        let v01 = src[base + t.y0 * w + t.x1];
                        let v10 = src[base + t.y1 * w + t.x0];
                        let v11 = src[base + t.y1 * w + t.x1];
                        gx += go * ((one - t.wy) * (v01 - v00) + t.wy * (v11 - v10));
                        gy += go * ((one - t.wx) * (v10 - v00) + t.wx * (v11 - v01));
                    }
                }
                if let Some(df) = dflow.as_mut() {
                    df[(b * 2) * plane + pix] = gx * t.dpx;
                    df[(b * 2 + 1) * plane + pix] = gy * t.dpy;
                }
            }
        }
        vec![dsrc, dflow]
    }
}

/// Warps `source [B,C,H,W]` by `flow [B,2,H,W]` (channel 0 = dx, 1 = dy).
pub fn grid_sample<T: Scalar>(source: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "grid_sample";
    if source.rank() != 4 {
        return Err(Error::dim(
            OP,
            "rank",
            format!("source shape {:?}", source.shape()),
        ));
    }
    let &[batch, channels, h, w] = source.shape() else {
        unreachable!()
    };
    if flow.rank() != 4 {
        return Err(Error::dim(
            OP,
            "rank",
            format!("flow shape {:?}", flow.shape()),
        ));
    }
    for (axis, (&got, want)) in flow.shape().iter().zip([batch, 2, h, w]).enumerate() {
        if got != want {
            return Err(Error::dim(
                OP,
                axis,
                format!(
                    "flow shape {:?} does not fit source {:?}",
                    flow.shape(),
                    source.shape()
                ),
            ));
        }
    }
    if h == 0 || w == 0 {
        return Err(Error::dim(OP, 2, "empty image"));
    }
    let plane = h * w;
    let half_w = T::of((w - 1) as f64 * 0.5);
    let half_h = T::of((h - 1) as f64 * 0.5);
    let one = T::one();
    let mut taps = Vec::with_capacity(batch * plane);
    let mut out = vec![T::zero(); batch * channels * plane];
    {
        let fl = flow.data();
        let src = source.data();
        for b in 0..batch {
            for y in 0..h {
                for x in 0..w {
                    let pix = y * w + x;
                    let dx = fl[(b * 2) * plane + pix];
                    let dy = fl[(b * 2 + 1) * plane + pix];
                    let t = tap(
                        T::of(x as f64) + dx * half_w,
                        T::of(y as f64) + dy * half_h,
                        w,
                        h,
                    );
                    for c in 0..channels {
                        let base = (b * channels + c) * plane;
                        out[base + pix] = src[base + t.y0 * w + t.x0] * (one - t.wx) * (one - t.wy)
                            + src[base + t.y0 * w + t.x1] * t.wx * (one - t.wy)
                            + src[base + t.y1 * w + t.x0] * (one - t.wx) * t.wy
                            + src[base + t.y1 * w + t.x1] * t.wx * t.wy;
                    }
                    taps.push(t);
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        source.shape().to_vec(),
        GridSample {
            source: source.clone(),
            flow: flow.clone(),
            taps,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check::{random_tensor, GradCheck};
    use crate::tensor::{mul, sum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square() -> Tensor<f64> {
        Tensor::new(vec![0.0, 1.0, 2.0, 3.0], &[1, 1, 2, 2]).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = Tensor::<f32>::new(
            (0..2 * 3 * 5 * 7).map(|_| rng.gen()).collect(),
            &[2, 3, 5, 7],
        )
        .unwrap();
        let out = grid_sample(&src, &Tensor::zeros(&[2, 2, 5, 7])).unwrap();
        assert_eq!(out.to_vec(), src.to_vec());
    }

    #[test]
    fn sampling_the_center_averages_four_pixels() {
        // on a 2x2 image one normalized unit is half a pixel
        let mut flow = Vec::new();
        flow.extend([1.0, -1.0, 1.0, -1.0]); // dx for pixels (0,0) (1,0) (0,1) (1,1)
        flow.extend([1.0, 1.0, -1.0, -1.0]); // dy
        let out = grid_sample(&square(), &Tensor::new(flow, &[1, 2, 2, 2]).unwrap()).unwrap();
        assert_eq!(out.to_vec(), vec![1.5; 4]);
    }

    #[test]
    fn one_pixel_shift_clamps_at_border() {
        let mut flow = vec![2.0; 4];
        flow.extend([0.0; 4]);
        let out = grid_sample(&square(), &Tensor::new(flow, &[1, 2, 2, 2]).unwrap()).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn rejects_mismatched_flow() {
        let err = grid_sample(&square(), &Tensor::zeros(&[1, 2, 3, 2])).unwrap_err();
        assert!(matches!(err, Error::Dimension { ref axis, .. } if axis == "2"));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let src = random_tensor(&[2, 2, 5, 6], &mut rng);
            let flow = random_tensor(&[2, 2, 5, 6], &mut rng);
            // keep sampling coordinates inside the image so the border clamp is inactive
            flow.data_mut().iter_mut().for_each(|v| *v *= 0.3);
            let probe = random_tensor(&[2, 2, 5, 6], &mut rng).detach();
            let check = GradCheck {
                skip_kinks: true,
                ..GradCheck::default()
            };
            let report = check
                .run(&[src.clone(), flow.clone()], || {
                    Ok(sum(&mul(&grid_sample(&src, &flow)?, &probe)?))
                })
                .unwrap();
            assert!(report.max_rel_error < 1e-3, "{report:?}");
            assert!(report.checked > report.skipped);
        }
    }
}
