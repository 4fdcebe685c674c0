//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it shares no
//! code with the backward rules it validates.

use rand::Rng;

use super::{no_grad, Tensor};
use crate::error::Result;

/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because the one-sided differences disagree,
    /// i.e. the point sits on a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// (parameter index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    /// When set, only this many elements per tensor are checked, chosen at random.
    pub sample: Option<(usize, u64)>,
    pub skip_kinks: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            sample: None,
            skip_kinks: false,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every element of `params` with step `h`.
pub fn check_gradients(
    params: &[Tensor<f64>],
    h: f64,
    f: impl Fn() -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    GradCheck {
        step: h,
        ..GradCheck::default()
    }
    .run(params, f)
}

impl GradCheck {
    pub fn run(
        &self,
        params: &[Tensor<f64>],
        f: impl Fn() -> Result<Tensor<f64>>,
    ) -> Result<GradCheckReport> {
        let targets = self.targets(params);
        self.run_on(params, &targets, f)
    }

    /// Checks an explicit list of (parameter index, element index) pairs.
    pub fn run_on(
        &self,
        params: &[Tensor<f64>],
        targets: &[(usize, usize)],
        f: impl Fn() -> Result<Tensor<f64>>,
    ) -> Result<GradCheckReport> {
        params.iter().for_each(Tensor::zero_grad);
        f()?.backward()?;
        let analytic: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        params.iter().for_each(Tensor::zero_grad);

        let eval = |pi: usize, ei: usize, delta: f64| -> Result<f64> {
            let orig = params[pi].data()[ei];
            params[pi].data_mut()[ei] = orig + delta;
            let v = no_grad(&f).map(|t| t.item());
            params[pi].data_mut()[ei] = orig;
            v
        };

        let h = self.step;
        let mut report = GradCheckReport {
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for &(pi, ei) in targets {
            let f0 = eval(pi, ei, 0.0)?;
            let fp = eval(pi, ei, h)?;
            let fm = eval(pi, ei, -h)?;
            let numeric = (fp - fm) / (2.0 * h);
            if self.skip_kinks {
                let forward = (fp - f0) / h;
                let backward = (f0 - fm) / h;
                if (forward - backward).abs() > 1e-2 * (numeric.abs() + 1e-3) {
                    report.skipped += 1;
                    continue;
                }
            }
            let a = analytic[pi][ei];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ei, a, numeric));
            }
        }
        Ok(report)
    }

    fn targets(&self, params: &[Tensor<f64>]) -> Vec<(usize, usize)> {
        use rand::SeedableRng;
        let mut out = Vec::new();
        let mut rng = self
            .sample
            .map(|(_, seed)| rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        for (pi, p) in params.iter().enumerate() {
            let n = p.numel();
            match (&mut rng, self.sample) {
                (Some(rng), Some((k, _))) if k < n => {
                    out.extend(
                        rand::seq::index::sample(rng, n, k)
                            .into_iter()
                            .map(|e| (pi, e)),
                    );
                }
                _ => out.extend((0..n).map(|e| (pi, e))),
            }
        }
        out
    }
}

/// Gradient-tracking tensor with entries uniform in [-1, 1].
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::param(data, shape).expect("shape matches data")
}
