//! Self-checks runnable from a release build: finite-difference gradients of
//! every differentiable op and of the full model, plus exact oracles for the
//! mechanisms the training pipeline depends on.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::curriculum::{select_window, window_bounds, FINAL_STAGE};
use crate::error::Result;
use crate::model::{load_model, save_model, FabNet, ModelConfig};
use crate::probe::auc;
use crate::rng;
use crate::tensor::grad_check::{random_tensor, GradCheck, GradCheckReport};
use crate::tensor::*;

/// Relative tolerance for every gradient comparison.
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Random instances per op.
pub const INSTANCES: usize = 10;
/// Sampled parameters in the end-to-end check.
pub const END_TO_END_PARAMS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn to_table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{mark}  {:<width$}  {}", c.name, c.detail);
        }
        let _ = writeln!(
            s,
            "{} checks, {} failed, {:.1} s",
            self.checks.len(),
            self.failures(),
            self.seconds
        );
        s
    }
}

type Builder = fn(
    &mut ChaCha8Rng,
) -> Result<(
    Vec<Tensor<f64>>,
    Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>,
)>;

/// Contracts an op output with a fixed random tensor so every output element
/// carries a distinct weight.
fn probe_sum(out: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let w = random_tensor(out.shape(), rng).detach();
    Ok(sum(&mul(out, &w)?))
}

macro_rules! op {
    ($rng:ident, [$($shape:expr),*], |$p:ident| $body:expr) => {{
        let params: Vec<Tensor<f64>> = vec![$(random_tensor(&$shape, $rng)),*];
        // the probe weights must be identical on every evaluation
        let probe_seed: u64 = $rng.gen();
        let f: Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>> = Box::new(move |$p: &[Tensor<f64>]| {
            let out: Tensor<f64> = $body?;
            probe_sum(&out, &mut rng::stream(probe_seed, 0))
        });
        Ok((params, f))
    }};
}

fn positive(t: &Tensor<f64>) {
    t.data_mut().iter_mut().for_each(|v| *v = 0.5 + v.abs());
}

fn op_builders() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |r| op!(r, [[3, 4], [3, 4]], |p| add(&p[0], &p[1]))),
        ("add_broadcast", |r| {
            op!(r, [[2, 3, 4], [1, 3, 1]], |p| add(
                &p[0],
                &broadcast_to(&p[1], &[2, 3, 4])?
            ))
        }),
        ("sub", |r| op!(r, [[3, 4], [3, 4]], |p| sub(&p[0], &p[1]))),
        ("mul", |r| op!(r, [[2, 5], [2, 5]], |p| mul(&p[0], &p[1]))),
        ("div", |r| {
            let (params, f) = op!(r, [[2, 5], [2, 5]], |p| div(&p[0], &p[1]))?;
            positive(&params[1]);
            Ok((params, f))
        }),
        ("scale", |r| {
            op!(r, [[6]], |p| Ok::<_, crate::Error>(scale(&p[0], -1.7)))
        }),
        ("exp", |r| {
            op!(r, [[2, 3]], |p| Ok::<_, crate::Error>(exp(&p[0])))
        }),
        ("tanh", |r| {
            op!(r, [[2, 3]], |p| Ok::<_, crate::Error>(tanh(&p[0])))
        }),
        ("leaky_relu", |r| {
            op!(r, [[4, 4]], |p| leaky_relu(&p[0], 0.2))
        }),
        ("sum", |r| {
            op!(r, [[3, 3]], |p| Ok::<_, crate::Error>(sum(&p[0])))
        }),
        ("mean", |r| op!(r, [[3, 3]], |p| mean(&p[0]))),
        ("reshape", |r| op!(r, [[2, 6]], |p| reshape(&p[0], &[3, 4]))),
        ("broadcast_to", |r| {
            op!(r, [[2, 1, 3]], |p| broadcast_to(&p[0], &[2, 4, 3]))
        }),
        ("concat", |r| {
            op!(r, [[2, 3, 2], [2, 1, 2]], |p| concat(&[&p[0], &p[1]], 1))
        }),
        ("index_select", |r| {
            op!(r, [[4, 3]], |p| index_select(&p[0], &[3, 0, 3]))
        }),
        ("softmax_weights", |r| {
            op!(r, [[2, 1, 3, 3], [2, 1, 3, 3], [2, 1, 3, 3]], |p| {
                let w = softmax_weights(p)?;
                concat(&w.iter().collect::<Vec<_>>(), 1)
            })
        }),
        ("linear", |r| {
            op!(r, [[4, 5], [5, 3], [3]], |p| linear(
                &p[0],
                &p[1],
                Some(&p[2])
            ))
        }),
        ("batch_norm", |r| {
            op!(r, [[6, 3], [3], [3]], |p| batch_norm(
                &p[0],
                &p[1],
                &p[2],
                None,
                NormMode::Train,
                1e-5
            )
            .map(|o| o.0))
        }),
        ("conv2d", |r| {
            op!(r, [[2, 2, 6, 6], [3, 2, 4, 4], [3]], |p| conv2d(
                &p[0],
                &p[1],
                Some(&p[2]),
                2,
                1
            ))
        }),
        ("conv2d_valid", |r| {
            op!(r, [[1, 2, 4, 4], [3, 2, 4, 4]], |p| conv2d(
                &p[0], &p[1], None, 1, 0
            ))
        }),
        ("conv_transpose2d", |r| {
            op!(r, [[2, 3, 3, 3], [3, 2, 4, 4], [2]], |p| conv_transpose2d(
                &p[0],
                &p[1],
                Some(&p[2]),
                2,
                1
            ))
        }),
        ("grid_sample", |r| {
            let (params, f) = op!(r, [[2, 2, 5, 6], [2, 2, 5, 6]], |p| grid_sample(
                &p[0], &p[1]
            ))?;
            // keep sampling points inside the image so the border clamp stays inactive
            params[1].data_mut().iter_mut().for_each(|v| *v *= 0.3);
            Ok((params, f))
        }),
        ("l1_loss", |r| {
            op!(r, [[2, 3, 3], [2, 3, 3]], |p| l1_loss(&p[0], &p[1]))
        }),
        ("l1_per_sample", |r| {
            op!(r, [[3, 2, 2], [3, 2, 2]], |p| l1_per_sample(&p[0], &p[1]))
        }),
        ("mse_loss", |r| {
            op!(r, [[2, 4], [2, 4]], |p| mse_loss(&p[0], &p[1]))
        }),
        ("weighted_cross_entropy", |r| {
            op!(r, [[5, 4]], |p| weighted_cross_entropy(
                &p[0],
                &[0, 3, 1, 3, 2],
                &[0.5, 1.0, 2.0, 1.5]
            ))
        }),
        ("bce_with_logits", |r| {
            let weights = LabelWeights {
                negative: vec![1.0, 0.7, 1.3],
                positive: vec![2.0, 1.0, 0.4],
            };
            op!(r, [[4, 3]], |p| bce_with_logits(
                &p[0],
                &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0],
                &weights
            ))
        }),
    ]
}

fn merge(total: &mut GradCheckReport, r: GradCheckReport) {
    total.checked += r.checked;
    total.skipped += r.skipped;
    if r.max_rel_error >= total.max_rel_error {
        total.max_rel_error = r.max_rel_error;
        total.worst = r.worst;
    }
}

fn empty_report() -> GradCheckReport {
    GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
    }
}

/// Finite-difference check of every op on [`INSTANCES`] random instances.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let check = GradCheck {
        skip_kinks: true,
        ..GradCheck::default()
    };
    let mut out = Vec::new();
    for (i, (name, build)) in op_builders().into_iter().enumerate() {
        let mut r = rng::stream(seed, i as u64);
        let mut total = empty_report();
        for _ in 0..INSTANCES {
            let (params, f) = build(&mut r)?;
            merge(&mut total, check.run(&params, || f(&params))?);
        }
        let passed = total.max_rel_error < GRAD_TOLERANCE && total.checked > total.skipped;
        let detail = format!(
            "max rel err {:.2e} over {} coords ({} kinks skipped)",
            total.max_rel_error, total.checked, total.skipped
        );
        out.push(CheckOutcome::new(&format!("grad {name}"), passed, detail));
    }
    Ok(out)
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        embedding_dim: 6,
        encoder_channels: vec![4, 5],
        decoder_channels: vec![5, 4],
        multi_source: false,
        n_sources: 1,
        seed: 3,
    }
}

fn frames<T: Scalar>(b: usize, size: usize, r: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let data = (0..b * 3 * size * size)
        .map(|_| T::of(r.gen_range(0.0..1.0)))
        .collect();
    Tensor::new(data, &[b, 3, size, size])
}

/// Full-model check on a two-frame 16x16 pass: draws parameters at random
/// until `n_params` non-kink coordinates have been compared.
pub fn end_to_end_check(seed: u64, n_params: usize) -> Result<CheckOutcome> {
    let mut r = rng::stream(seed, 1000);
    let m = FabNet::<f64>::new(ModelConfig {
        seed,
        ..toy_config()
    })?;
    let source = frames::<f64>(2, 16, &mut r)?;
    let target = frames::<f64>(2, 16, &mut r)?;
    let params = m.parameters();
    let check = GradCheck {
        step: 1e-6,
        sample: None,
        skip_kinks: true,
    };
    let mut total = empty_report();
    let mut attempts = 0;
    while total.checked < n_params && attempts < 20 * n_params {
        attempts += 1;
        let pi = r.gen_range(0..params.len());
        let target_coord = [(pi, r.gen_range(0..params[pi].numel()))];
        let rep = check.run_on(&params, &target_coord, || {
            Ok(m.reconstruct_single(&source, &target)?.loss)
        })?;
        merge(&mut total, rep);
    }
    let passed = total.checked >= n_params && total.max_rel_error < GRAD_TOLERANCE;
    Ok(CheckOutcome::new(
        "grad end-to-end model",
        passed,
        format!(
            "max rel err {:.2e} over {} sampled parameters ({} kinks skipped)",
            total.max_rel_error, total.checked, total.skipped
        ),
    ))
}

fn identity_warp(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng::stream(seed, 2000);
    let src = frames::<f64>(2, 9, &mut r)?;
    let warped = grid_sample(&src, &Tensor::zeros(&[2, 2, 9, 9]))?;
    let exact = warped.to_vec() == src.to_vec();
    Ok(CheckOutcome::new(
        "grid_sample identity warp",
        exact,
        "zero flow returns the source exactly".into(),
    ))
}

fn single_equals_multi(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng::stream(seed, 2001);
    let single = FabNet::<f32>::new(toy_config())?;
    let multi = FabNet::<f32>::new(ModelConfig {
        multi_source: true,
        ..toy_config()
    })?;
    // share weights; the multi model's confidence head is unused for n = 1
    let shared: Vec<_> = single
        .named_parameters()
        .into_iter()
        .map(|(n, p)| (n, p.shape().to_vec(), p.to_vec()))
        .collect();
    for ((name, p), (sname, _, values)) in multi.named_parameters().iter().zip(&shared) {
        if name == sname {
            p.data_mut().copy_from_slice(values);
        }
    }
    let s = frames::<f32>(3, 16, &mut r)?;
    let t = frames::<f32>(3, 16, &mut r)?;
    let a = single.reconstruct_single(&s, &t)?.loss.item();
    let b = multi
        .reconstruct_multi(std::slice::from_ref(&s), &t)?
        .loss
        .item();
    Ok(CheckOutcome::new(
        "multi-source n=1 equals single-source",
        a.to_bits() == b.to_bits(),
        format!("{a} vs {b}"),
    ))
}

fn softmax_sums(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng::stream(seed, 2002);
    let mut worst: f64 = 0.0;
    for n in 1..=4 {
        let maps: Vec<Tensor<f32>> = (0..n)
            .map(|_| {
                let data = (0..2 * 8 * 8)
                    .map(|_| r.gen_range(-30.0f32..30.0))
                    .collect();
                Tensor::new(data, &[2, 1, 8, 8])
            })
            .collect::<Result<_>>()?;
        let w = softmax_weights(&maps)?;
        for i in 0..128 {
            let s: f64 = w.iter().map(|t| t.data()[i] as f64).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok(CheckOutcome::new(
        "softmax fusion weights sum to 1",
        worst <= 1e-6,
        format!("max deviation {worst:.1e}"),
    ))
}

fn checkpoint_round_trip(seed: u64) -> Result<CheckOutcome> {
    let m = FabNet::<f32>::new(ModelConfig {
        multi_source: true,
        n_sources: 2,
        seed,
        ..toy_config()
    })?;
    let path =
        std::env::temp_dir().join(format!("fabnet-verify-{}-{seed}.ckpt", std::process::id()));
    save_model(&m, &path)?;
    let back = load_model::<f32>(&path, Some(m.config()));
    let _ = std::fs::remove_file(&path);
    let back = back?;
    let bits = |m: &FabNet<f32>| -> Vec<u32> {
        m.parameters()
            .iter()
            .flat_map(|p| p.to_vec())
            .map(f32::to_bits)
            .collect()
    };
    Ok(CheckOutcome::new(
        "checkpoint round trip",
        bits(&m) == bits(&back),
        format!("{} parameters", m.parameter_count()),
    ))
}

fn curriculum_oracle(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng::stream(seed, 2003);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.gen_range(2..=64);
        // coarse values so that ties occur
        let losses: Vec<f64> = (0..n).map(|_| r.gen_range(0..8) as f64 / 4.0).collect();
        let stage = r.gen_range(0..=FINAL_STAGE);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            losses[a]
                .partial_cmp(&losses[b])
                .expect("finite")
                .then(a.cmp(&b))
        });
        let (lo, hi) = window_bounds(n, stage);
        let mut want = order[lo..hi].to_vec();
        let mut got = select_window(&losses, stage)?;
        want.sort_unstable();
        got.sort_unstable();
        mismatches += usize::from(want != got);
    }
    Ok(CheckOutcome::new(
        "curriculum window vs sort-and-slice",
        mismatches == 0,
        format!("{mismatches} mismatches in 1000 batches"),
    ))
}

fn auc_oracle(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng::stream(seed, 2004);
    let mut mismatches = 0;
    for _ in 0..300 {
        let n = r.gen_range(2..=100);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..10) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).expect("finite") {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        mismatches += usize::from(auc(&scores, &labels)? != wins / pairs);
    }
    Ok(CheckOutcome::new(
        "auc vs pair counting",
        mismatches == 0,
        format!("{mismatches} mismatches in 300 inputs"),
    ))
}

/// Exact mechanism and metric oracles.
pub fn oracle_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        identity_warp(seed)?,
        single_equals_multi(seed)?,
        softmax_sums(seed)?,
        checkpoint_round_trip(seed)?,
        curriculum_oracle(seed)?,
        auc_oracle(seed)?,
    ])
}

/// Gradient suite, end-to-end check and oracles.
pub fn run_all(seed: u64) -> Result<VerifyReport> {
    let start = Instant::now();
    let mut checks = gradient_suite(seed)?;
    checks.push(end_to_end_check(seed, END_TO_END_PARAMS)?);
    checks.extend(oracle_suite(seed)?);
    Ok(VerifyReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let report = run_all(0).unwrap();
        assert!(report.all_passed(), "{}", report.to_table());
        assert!(report.checks.len() > 30);
    }

    #[test]
    fn table_marks_failures() {
        let report = VerifyReport {
            checks: vec![
                CheckOutcome::new("a", true, "fine".into()),
                CheckOutcome::new("bb", false, "broken".into()),
            ],
            seconds: 0.5,
        };
        let table = report.to_table();
        assert!(table.contains("PASS  a "));
        assert!(table.contains("FAIL  bb  broken"));
        assert!(table.ends_with("2 checks, 1 failed, 0.5 s\n"));
    }
}
