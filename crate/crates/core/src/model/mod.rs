//! The embedding network: a shared encoder maps each frame to a vector, and a
//! decoder turns the concatenated `[target; source]` pair into a flow field
//! (and, for multi-source models, a confidence map) that warps the source
//! toward the target.

mod checkpoint;

pub use checkpoint::{
    load_model, model_from_parts, save_model, CheckpointReader, CheckpointWriter, StoredTensor,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{
    add, broadcast_to, concat, conv2d, conv_transpose2d, grid_sample, index_select, l1_per_sample,
    leaky_relu, mean, mul, reshape, scale, softmax_weights, tanh, Scalar, Tensor,
};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Flow head output is `FLOW_SCALE * tanh(.)` in normalized coordinates.
pub const FLOW_SCALE: f64 = 2.0;
const KERNEL: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub embedding_dim: usize,
    /// Output channels of each stride-2 encoder layer.
    pub encoder_channels: Vec<usize>,
    /// Output channels of the 4x4 seed layer and each stride-2 decoder
    /// layer except the final full-resolution heads.
    pub decoder_channels: Vec<usize>,
    pub multi_source: bool,
    pub n_sources: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            embedding_dim: 256,
            encoder_channels: vec![32, 64, 128, 256],
            decoder_channels: vec![256, 128, 64, 32],
            multi_source: false,
            n_sources: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Multi-source variant with `n` source frames.
    pub fn multi(n_sources: usize) -> Self {
        ModelConfig {
            multi_source: true,
            n_sources,
            ..Default::default()
        }
    }

    /// Number of stride-2 levels between 4x4 and full resolution.
    pub fn levels(&self) -> Option<usize> {
        let s = self.image_size;
        (s >= 8 && s.is_multiple_of(4) && (s / 4).is_power_of_two())
            .then(|| (s / 4).trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels().ok_or_else(|| {
            Error::arg(format!(
                "image size {} is not 4 times a power of 2 (>= 8)",
                self.image_size
            ))
        })?;
        if self.encoder_channels.len() != levels {
            return Err(Error::arg(format!(
                "{} encoder layers given, image size {} needs {levels}",
                self.encoder_channels.len(),
                self.image_size
            )));
        }
        if self.decoder_channels.len() != levels {
            return Err(Error::arg(format!(
                "{} decoder layers given, image size {} needs {levels}",
                self.decoder_channels.len(),
                self.image_size
            )));
        }
        if self.embedding_dim == 0
            || self.encoder_channels.contains(&0)
            || self.decoder_channels.contains(&0)
        {
            return Err(Error::arg("channel counts must be positive"));
        }
        if self.n_sources == 0 {
            return Err(Error::arg("n_sources must be at least 1"));
        }
        if self.n_sources > 1 && !self.multi_source {
            return Err(Error::arg(
                "more than one source requires a multi-source model",
            ));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Conv<T: Scalar> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    stride: usize,
    padding: usize,
    transposed: bool,
}

impl<T: Scalar> Conv<T> {
    /// PyTorch-style default init: weights and bias uniform in `±1/sqrt(fan_in)`.
    fn new(
        cin: usize,
        cout: usize,
        stride: usize,
        padding: usize,
        transposed: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = if transposed {
            [cin, cout, KERNEL, KERNEL]
        } else {
            [cout, cin, KERNEL, KERNEL]
        };
        // For a transposed conv each output sees cin * k^2 / stride^2 taps.
        let fan_in = (cin * KERNEL * KERNEL / (stride * stride)).max(1);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::of(rng.gen_range(-bound..bound)))
                .collect()
        };
        let weight =
            Tensor::param(draw(shape.iter().product()), &shape).expect("shape matches data");
        let bias = Tensor::param(draw(cout), &[cout]).expect("shape matches data");
        Conv {
            weight,
            bias: Some(bias),
            stride,
            padding,
            transposed,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.transposed {
            conv_transpose2d(
                x,
                &self.weight,
                self.bias.as_ref(),
                self.stride,
                self.padding,
            )
        } else {
            conv2d(
                x,
                &self.weight,
                self.bias.as_ref(),
                self.stride,
                self.padding,
            )
        }
    }
}

/// Output of the decoder for a batch of pairs.
#[derive(Debug, Clone)]
pub struct Decoded<T: Scalar> {
    /// `[B, 2, H, W]` offsets in normalized coordinates, within ±2.
    pub flow: Tensor<T>,
    /// `[B, 1, H, W]` confidence logits; multi-source models only.
    pub confidence: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Reconstruction<T: Scalar> {
    /// Generated (fused) frames `[B, 3, H, W]`.
    pub output: Tensor<T>,
    /// Mean absolute error of each sample, `[B]`.
    pub per_sample: Tensor<T>,
    /// Mean of `per_sample`.
    pub loss: Tensor<T>,
    /// Warped source frames, one `[B, 3, H, W]` tensor per source.
    pub warped: Vec<Tensor<T>>,
    pub flows: Vec<Tensor<T>>,
    /// One `[B, 1, H, W]` logit map per source; empty for single-source models.
    pub confidences: Vec<Tensor<T>>,
}

pub struct FabNet<T: Scalar = f32> {
    config: ModelConfig,
    encoder: Vec<Conv<T>>,
    embed: Conv<T>,
    decoder: Vec<Conv<T>>,
    flow_head: Conv<T>,
    confidence_head: Option<Conv<T>>,
}

impl<T: Scalar> FabNet<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, 0);
        let mut encoder = Vec::new();
        let mut cin = 3;
        for &c in &config.encoder_channels {
            encoder.push(Conv::new(cin, c, 2, 1, false, &mut rng));
            cin = c;
        }
        // A full-extent 4x4 kernel collapses the final 4x4 map to 1x1.
        let embed = Conv::new(cin, config.embedding_dim, 1, 0, false, &mut rng);

        let dec = &config.decoder_channels;
        let mut decoder = vec![Conv::new(
            2 * config.embedding_dim,
            dec[0],
            1,
            0,
            true,
            &mut rng,
        )];
        for w in dec.windows(2) {
            decoder.push(Conv::new(w[0], w[1], 2, 1, true, &mut rng));
        }
        let last = *dec.last().expect("validated non-empty");
        let flow_head = Conv::new(last, 2, 2, 1, true, &mut rng);
        // No bias: softmax over sources ignores any offset shared by all maps.
        let confidence_head = config.multi_source.then(|| Conv {
            bias: None,
            ..Conv::new(last, 1, 2, 1, true, &mut rng)
        });
        Ok(FabNet {
            config,
            encoder,
            embed,
            decoder,
            flow_head,
            confidence_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn layers(&self) -> Vec<(String, &Conv<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}"), l));
        }
        out.push(("encoder.embed".to_string(), &self.embed));
        for (i, l) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{i}"), l));
        }
        out.push(("decoder.flow".to_string(), &self.flow_head));
        if let Some(c) = &self.confidence_head {
            out.push(("decoder.confidence".to_string(), c));
        }
        out
    }

    /// Every trainable tensor with a stable name, in checkpoint order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, l) in self.layers() {
            out.push((format!("{name}.weight"), l.weight.clone()));
            if let Some(b) = &l.bias {
                out.push((format!("{name}.bias"), b.clone()));
            }
        }
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    /// Parameters of the encoder only (the part probes reuse).
    pub fn encoder_parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("encoder."))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Sum of all encoder weights as f64, for cheap "was it modified" checks.
    pub fn encoder_checksum(&self) -> f64 {
        self.encoder_parameters()
            .iter()
            .flat_map(|p| p.to_vec())
            .enumerate()
            .map(|(i, v)| v.as_f64() * (1.0 + (i % 7) as f64))
            .sum()
    }

    /// Replaces parameter values by name order. Shapes must match.
    pub fn load_parameters(&mut self, values: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        let params = self.named_parameters();
        if params.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} parameters, checkpoint has {}",
                params.len(),
                values.len()
            )));
        }
        for ((name, p), (vname, shape, _)) in params.iter().zip(values) {
            if name != vname || p.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model has {name} {:?}, checkpoint has {vname} {shape:?}",
                    p.shape()
                )));
            }
        }
        for ((_, p), (_, _, data)) in params.iter().zip(values) {
            p.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    fn check_frames(&self, op: &'static str, frames: &Tensor<T>) -> Result<()> {
        let s = self.config.image_size;
        if frames.rank() != 4 {
            return Err(Error::dim(
                op,
                "rank",
                format!("expected [B, 3, {s}, {s}], got {:?}", frames.shape()),
            ));
        }
        for (axis, (&got, want)) in frames.shape().iter().zip([0, 3, s, s]).enumerate().skip(1) {
            if got != want {
                let name = ["batch", "channel", "height", "width"][axis];
                return Err(Error::dim(op, name, format!("expected {want}, got {got}")));
            }
        }
        Ok(())
    }

    /// Embeds a batch of frames `[B, 3, H, W]` with values in [0, 1] into `[B, D]`.
    pub fn encode(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_frames("encode", frames)?;
        let mut x = frames.clone();
        for layer in &self.encoder {
            x = leaky_relu(&layer.forward(&x)?, LEAKY_SLOPE)?;
        }
        let x = self.embed.forward(&x)?;
        let b = frames.shape()[0];
        reshape(&x, &[b, self.config.embedding_dim])
    }

    /// Decodes `[target; source]` embedding pairs, both `[B, D]`.
    pub fn decode(&self, target_emb: &Tensor<T>, source_emb: &Tensor<T>) -> Result<Decoded<T>> {
        let d = self.config.embedding_dim;
        for (name, e) in [("target", target_emb), ("source", source_emb)] {
            if e.rank() != 2 || e.shape()[1] != d {
                return Err(Error::dim(
                    "decode",
                    "embedding",
                    format!("{name} embedding {:?}, expected [B, {d}]", e.shape()),
                ));
            }
        }
        if target_emb.shape()[0] != source_emb.shape()[0] {
            return Err(Error::dim(
                "decode",
                "batch",
                format!(
                    "{} targets vs {} sources",
                    target_emb.shape()[0],
                    source_emb.shape()[0]
                ),
            ));
        }
        let b = target_emb.shape()[0];
        let joint = concat(&[target_emb, source_emb], 1)?;
        let mut x = reshape(&joint, &[b, 2 * d, 1, 1])?;
        for layer in &self.decoder {
            x = leaky_relu(&layer.forward(&x)?, LEAKY_SLOPE)?;
        }
        let flow = scale(&tanh(&self.flow_head.forward(&x)?), FLOW_SCALE);
        let confidence = self
            .confidence_head
            .as_ref()
            .map(|h| h.forward(&x))
            .transpose()?;
        Ok(Decoded { flow, confidence })
    }

    /// Single-source reconstruction: warp `source` toward `target`, both `[B, 3, H, W]`.
    pub fn reconstruct_single(
        &self,
        source: &Tensor<T>,
        target: &Tensor<T>,
    ) -> Result<Reconstruction<T>> {
        self.reconstruct(std::slice::from_ref(source), target)
    }

    /// Multi-source reconstruction. Every source gets its own decode pass and
    /// the warps are fused with per-pixel softmax weights of the confidences.
    /// Single-source models accept exactly one source.
    pub fn reconstruct_multi(
        &self,
        sources: &[Tensor<T>],
        target: &Tensor<T>,
    ) -> Result<Reconstruction<T>> {
        self.reconstruct(sources, target)
    }

    fn reconstruct(&self, sources: &[Tensor<T>], target: &Tensor<T>) -> Result<Reconstruction<T>> {
        let n = sources.len();
        if n == 0 {
            return Err(Error::arg("reconstruction needs at least one source frame"));
        }
        if n > 1 && !self.config.multi_source {
            return Err(Error::arg(format!("single-source model given {n} sources")));
        }
        self.check_frames("reconstruct", target)?;
        for s in sources {
            self.check_frames("reconstruct", s)?;
            if s.shape()[0] != target.shape()[0] {
                return Err(Error::dim(
                    "reconstruct",
                    "batch",
                    format!("{:?} vs {:?}", s.shape(), target.shape()),
                ));
            }
        }
        let b = target.shape()[0];

        // One encoder pass over [target, s_1, ..., s_n].
        let mut frames: Vec<&Tensor<T>> = vec![target];
        frames.extend(sources);
        let all = concat(&frames, 0)?;
        let emb = self.encode(&all)?;

        // One decoder pass over all n*B pairs; targets repeat per source.
        let tgt_idx: Vec<usize> = (0..n).flat_map(|_| 0..b).collect();
        let src_idx: Vec<usize> = (b..(n + 1) * b).collect();
        let t_emb = index_select(&emb, &tgt_idx)?;
        let s_emb = index_select(&emb, &src_idx)?;
        let decoded = self.decode(&t_emb, &s_emb)?;
        let src_all = if n == 1 {
            sources[0].clone()
        } else {
            concat(&sources.iter().collect::<Vec<_>>(), 0)?
        };
        let warped_all = grid_sample(&src_all, &decoded.flow)?;

        let split = |t: &Tensor<T>| -> Result<Vec<Tensor<T>>> {
            if n == 1 {
                return Ok(vec![t.clone()]);
            }
            (0..n)
                .map(|i| index_select(t, &(i * b..(i + 1) * b).collect::<Vec<_>>()))
                .collect()
        };
        let warped = split(&warped_all)?;
        let flows = split(&decoded.flow)?;
        let confidences = match &decoded.confidence {
            Some(c) => split(c)?,
            None => Vec::new(),
        };
        let output = fuse(&warped, &confidences)?;
        let per_sample = l1_per_sample(&output, target)?;
        let loss = mean(&per_sample)?;
        Ok(Reconstruction {
            output,
            per_sample,
            loss,
            warped,
            flows,
            confidences,
        })
    }
}

/// Confidence-weighted fusion of warped frames `[B, C, H, W]` with logit maps
/// `[B, 1, H, W]`. With one frame (or no confidences) the frame is returned
/// unchanged, so the softmax weight of a lone source is exactly 1.
pub fn fuse<T: Scalar>(warped: &[Tensor<T>], confidences: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = warped
        .first()
        .ok_or_else(|| Error::arg("fusion of zero frames"))?;
    if warped.len() == 1 {
        return Ok(first.clone());
    }
    if confidences.len() != warped.len() {
        return Err(Error::arg(format!(
            "{} warped frames but {} confidence maps",
            warped.len(),
            confidences.len()
        )));
    }
    let weights = softmax_weights(confidences)?;
    let mut total: Option<Tensor<T>> = None;
    for (w, x) in weights.iter().zip(warped) {
        let term = mul(&broadcast_to(w, x.shape())?, x)?;
        total = Some(match total {
            Some(t) => add(&t, &term)?,
            None => term,
        });
    }
    Ok(total.expect("at least two frames"))
}

#[cfg(test)]
mod tests;
