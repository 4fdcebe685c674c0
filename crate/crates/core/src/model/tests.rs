use rand::Rng;

use super::*;
use crate::tensor::grad_check::GradCheck;
use crate::tensor::{grid_sample, l1_loss, sum};

fn tiny(multi: bool, n_sources: usize) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        embedding_dim: 6,
        encoder_channels: vec![4, 5],
        decoder_channels: vec![5, 4],
        multi_source: multi,
        n_sources,
        seed: 7,
    }
}

fn random_frames<T: Scalar>(b: usize, size: usize, seed: u64) -> Tensor<T> {
    let mut rng = rng::stream(seed, 99);
    let data = (0..b * 3 * size * size)
        .map(|_| T::of(rng.gen_range(0.0..1.0)))
        .collect();
    Tensor::new(data, &[b, 3, size, size]).unwrap()
}

#[test]
fn default_dimensions() {
    let m = FabNet::<f32>::new(ModelConfig::default()).unwrap();
    let frames = random_frames::<f32>(1, 64, 1);
    let e = m.encode(&frames).unwrap();
    assert_eq!(e.shape(), &[1, 256]);
    // the decoder consumes the 512-long concatenation
    let dec0 = m
        .named_parameters()
        .into_iter()
        .find(|(n, _)| n == "decoder.0.weight")
        .unwrap()
        .1;
    assert_eq!(dec0.shape()[0], 512);
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad_size = ModelConfig {
        image_size: 48,
        ..Default::default()
    };
    assert!(bad_size.validate().is_err());
    let bad_layers = ModelConfig {
        encoder_channels: vec![8, 8],
        ..Default::default()
    };
    assert!(bad_layers.validate().is_err());
    let bad_sources = ModelConfig {
        n_sources: 3,
        ..Default::default()
    };
    assert!(bad_sources.validate().is_err());
}

#[test]
fn encode_is_deterministic_and_discriminates() {
    let m = FabNet::<f64>::new(tiny(false, 1)).unwrap();
    let a = random_frames::<f64>(1, 16, 1);
    let b = random_frames::<f64>(1, 16, 2);
    let ea = m.encode(&a).unwrap().to_vec();
    assert_eq!(ea, m.encode(&a).unwrap().to_vec());
    let eb = m.encode(&b).unwrap().to_vec();
    let diff: f64 = ea.iter().zip(&eb).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6);
}

#[test]
fn encode_rejects_wrong_size() {
    let m = FabNet::<f32>::new(tiny(false, 1)).unwrap();
    let err = m.encode(&random_frames::<f32>(1, 32, 1)).unwrap_err();
    assert!(
        matches!(err, Error::Dimension { ref axis, .. } if axis == "height"),
        "{err}"
    );
}

#[test]
fn decode_shapes_and_flow_range() {
    let m = FabNet::<f32>::new(tiny(true, 2)).unwrap();
    let mut rng = rng::stream(3, 0);
    let emb = |rng: &mut rand_chacha::ChaCha8Rng| {
        // large inputs push the tanh toward saturation
        let d = (0..2 * 6).map(|_| rng.gen_range(-50.0f32..50.0)).collect();
        Tensor::new(d, &[2, 6]).unwrap()
    };
    let out = m.decode(&emb(&mut rng), &emb(&mut rng)).unwrap();
    assert_eq!(out.flow.shape(), &[2, 2, 16, 16]);
    assert_eq!(out.confidence.as_ref().unwrap().shape(), &[2, 1, 16, 16]);
    assert!(out.flow.data().iter().all(|v| v.abs() <= 2.0));

    let single = FabNet::<f32>::new(tiny(false, 1)).unwrap();
    assert!(single
        .decode(&emb(&mut rng), &emb(&mut rng))
        .unwrap()
        .confidence
        .is_none());
    let short = Tensor::<f32>::zeros(&[2, 5]);
    assert!(single.decode(&short, &emb(&mut rng)).is_err());
}

#[test]
fn identical_frames_with_zero_flow_cost_nothing() {
    let frame = random_frames::<f64>(2, 16, 4);
    let flow = Tensor::zeros(&[2, 2, 16, 16]);
    let warped = grid_sample(&frame, &flow).unwrap();
    assert_eq!(l1_loss(&warped, &frame).unwrap().item(), 0.0);
}

#[test]
fn loss_is_nonnegative_and_reaches_every_parameter() {
    let m = FabNet::<f64>::new(tiny(true, 2)).unwrap();
    let s1 = random_frames::<f64>(3, 16, 5);
    let s2 = random_frames::<f64>(3, 16, 6);
    let t = random_frames::<f64>(3, 16, 7);
    let r = m.reconstruct_multi(&[s1, s2], &t).unwrap();
    assert!(r.loss.item() >= 0.0);
    assert!(r.per_sample.data().iter().all(|&v| v >= 0.0));
    r.loss.backward().unwrap();
    for (name, p) in m.named_parameters() {
        let g = p.grad().unwrap_or_default();
        assert!(
            g.iter().any(|&v| v != 0.0),
            "{name} has identically zero gradient"
        );
    }
}

#[test]
fn multi_with_one_source_equals_single() {
    let m = FabNet::<f32>::new(tiny(true, 1)).unwrap();
    let s = random_frames::<f32>(2, 16, 8);
    let t = random_frames::<f32>(2, 16, 9);
    let single = m.reconstruct_single(&s, &t).unwrap();
    let multi = m.reconstruct_multi(std::slice::from_ref(&s), &t).unwrap();
    assert_eq!(single.loss.item().to_bits(), multi.loss.item().to_bits());
    assert_eq!(single.output.to_vec(), multi.output.to_vec());
}

#[test]
fn identical_sources_fuse_to_either_warp() {
    let m = FabNet::<f64>::new(tiny(true, 2)).unwrap();
    let s = random_frames::<f64>(2, 16, 10);
    let t = random_frames::<f64>(2, 16, 11);
    let r = m.reconstruct_multi(&[s.clone(), s], &t).unwrap();
    assert_eq!(r.confidences[0].to_vec(), r.confidences[1].to_vec());
    for (a, b) in r.output.data().iter().zip(r.warped[0].data().iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn fusion_example_weights_three_to_one() {
    let w0 = Tensor::<f64>::new(vec![0.0], &[1, 1, 1, 1]).unwrap();
    let w1 = Tensor::<f64>::new(vec![1.0], &[1, 1, 1, 1]).unwrap();
    let c0 = Tensor::new(vec![3f64.ln()], &[1, 1, 1, 1]).unwrap();
    let c1 = Tensor::new(vec![0.0], &[1, 1, 1, 1]).unwrap();
    let fused = fuse(&[w0, w1], &[c0, c1]).unwrap();
    assert!((fused.item() - 0.25).abs() < 1e-12);
    // 0.75 on the frame whose value is 1
    let w0 = Tensor::<f64>::new(vec![1.0], &[1, 1, 1, 1]).unwrap();
    let w1 = Tensor::<f64>::new(vec![0.0], &[1, 1, 1, 1]).unwrap();
    let c0 = Tensor::new(vec![3f64.ln()], &[1, 1, 1, 1]).unwrap();
    let c1 = Tensor::new(vec![0.0], &[1, 1, 1, 1]).unwrap();
    assert!((fuse(&[w0, w1], &[c0, c1]).unwrap().item() - 0.75).abs() < 1e-12);
}

#[test]
fn fusion_is_convex() {
    let mut rng = rng::stream(12, 0);
    for _ in 0..50 {
        let n = rng.gen_range(2..5);
        let shape = [2, 3, 4, 4];
        let numel = 2 * 3 * 16;
        let warped: Vec<Tensor<f64>> = (0..n)
            .map(|_| {
                Tensor::new(
                    (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    &shape,
                )
                .unwrap()
            })
            .collect();
        let conf: Vec<Tensor<f64>> = (0..n)
            .map(|_| {
                Tensor::new(
                    (0..32).map(|_| rng.gen_range(-20.0..20.0)).collect(),
                    &[2, 1, 4, 4],
                )
                .unwrap()
            })
            .collect();
        let fused = fuse(&warped, &conf).unwrap();
        for (i, &v) in fused.data().iter().enumerate() {
            let vals: Vec<f64> = warped.iter().map(|w| w.data()[i]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}

#[test]
fn empty_source_list_is_rejected() {
    let m = FabNet::<f32>::new(tiny(true, 2)).unwrap();
    let t = random_frames::<f32>(1, 16, 1);
    assert!(matches!(
        m.reconstruct_multi(&[], &t),
        Err(Error::Argument(_))
    ));
    let single = FabNet::<f32>::new(tiny(false, 1)).unwrap();
    assert!(single
        .reconstruct_multi(&[t.clone(), t.clone()], &t)
        .is_err());
}

/// Closed-form parameter count: one encoder serves every frame.
fn expected_count(c: &ModelConfig) -> usize {
    let k = KERNEL * KERNEL;
    let mut n = 0;
    let mut cin = 3;
    for &co in &c.encoder_channels {
        n += co * cin * k + co;
        cin = co;
    }
    n += c.embedding_dim * cin * k + c.embedding_dim;
    let mut cin = 2 * c.embedding_dim;
    for &co in &c.decoder_channels {
        n += cin * co * k + co;
        cin = co;
    }
    n += cin * 2 * k + 2;
    if c.multi_source {
        n += cin * k;
    }
    n
}

#[test]
fn parameter_count_audit() {
    for cfg in [ModelConfig::default(), ModelConfig::multi(3), tiny(true, 2)] {
        let m = FabNet::<f32>::new(cfg.clone()).unwrap();
        assert_eq!(m.parameter_count(), expected_count(&cfg));
    }
    // more sources never add encoder weights
    let one = FabNet::<f32>::new(ModelConfig::multi(1)).unwrap();
    let three = FabNet::<f32>::new(ModelConfig::multi(3)).unwrap();
    assert_eq!(one.parameter_count(), three.parameter_count());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let m = FabNet::<f64>::new(tiny(true, 2)).unwrap();
    let s1 = random_frames::<f64>(2, 16, 20);
    let s2 = random_frames::<f64>(2, 16, 21);
    let t = random_frames::<f64>(2, 16, 22);
    let params = m.parameters();
    let mut rng = rng::stream(23, 0);
    // cover encoder, decoder and the confidence head explicitly
    let conf_idx = params.len() - 1;
    let mut targets: Vec<(usize, usize)> = (0..40)
        .map(|_| {
            let pi = rng.gen_range(0..params.len());
            (pi, rng.gen_range(0..params[pi].numel()))
        })
        .collect();
    targets.push((0, 0));
    targets.push((conf_idx, 3));
    let check = GradCheck {
        step: 1e-6,
        sample: None,
        skip_kinks: true,
    };
    let report = check
        .run_on(&params, &targets, || {
            let r = m.reconstruct_multi(&[s1.clone(), s2.clone()], &t)?;
            Ok(sum(&r.per_sample))
        })
        .unwrap();
    assert!(report.checked >= 20, "{report:?}");
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = FabNet::<f32>::new(tiny(true, 2)).unwrap();
    save_model(&m, &path).unwrap();
    let back: FabNet<f32> = load_model(&path, Some(m.config())).unwrap();
    for ((na, a), (nb, b)) in m.named_parameters().iter().zip(back.named_parameters()) {
        assert_eq!(na, &nb);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(&b));
    }
}

#[test]
fn checkpoint_errors_are_descriptive() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = FabNet::<f32>::new(tiny(false, 1)).unwrap();
    save_model(&m, &path).unwrap();

    let other = tiny(true, 2);
    let err = load_model::<f32>(&path, Some(&other)).err().unwrap();
    assert!(err.to_string().contains("config mismatch"), "{err}");

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    let err = load_model::<f32>(&path, None).err().unwrap();
    assert!(err.to_string().contains("magic"), "{err}");

    save_model(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = load_model::<f32>(&path, None).err().unwrap();
    assert!(err.to_string().contains("truncated"), "{err}");
}
