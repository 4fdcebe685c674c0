//! Linear probes on frozen embeddings: batch norm followed by a bias-free
//! linear layer, trained with Adam per task.

mod metrics;

pub use metrics::{auc, class_weights, landmark_error, macro_auc, pose_mae, MacroAuc, PoseMae};

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::faces::{
    Frame, FrameLabel, EXPRESSION_NAMES, LANDMARK_NAMES, N_LANDMARKS, PITCH_LIMIT, ROLL_LIMIT,
    YAW_LIMIT,
};
use crate::model::FabNet;
use crate::rng;
use crate::tensor::{
    bce_with_logits, linear, mse_loss, no_grad, weighted_cross_entropy, BatchNorm, LabelWeights,
    NormMode, Tensor,
};
use crate::train::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Multiclass,
    Multilabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// 5 landmarks, scored by inter-ocular-normalized error.
    Landmarks,
    /// Yaw, pitch and roll, scored by MAE in degrees.
    Pose,
    /// 4 independent expression flags, scored by macro AUC.
    Expression,
    /// The 16 flag combinations as one class each, scored by one-vs-rest macro AUC.
    ExpressionClass,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::Landmarks,
        Task::Pose,
        Task::Expression,
        Task::ExpressionClass,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Landmarks => "landmarks",
            Task::Pose => "pose",
            Task::Expression => "expression",
            Task::ExpressionClass => "expression-class",
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Task::Landmarks | Task::Pose => TaskKind::Regression,
            Task::Expression => TaskKind::Multilabel,
            Task::ExpressionClass => TaskKind::Multiclass,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Task::Landmarks => 2 * N_LANDMARKS,
            Task::Pose => 3,
            Task::Expression => EXPRESSION_NAMES.len(),
            Task::ExpressionClass => 1 << EXPRESSION_NAMES.len(),
        }
    }

    /// Regression targets scaled to [-1, 1].
    fn regression_target(&self, label: &FrameLabel, image_size: usize) -> Vec<f64> {
        match self {
            Task::Landmarks => {
                let half = (image_size - 1) as f64 / 2.0;
                label
                    .landmarks
                    .iter()
                    .flat_map(|p| [p[0] / half - 1.0, p[1] / half - 1.0])
                    .collect()
            }
            Task::Pose => vec![
                label.pose.yaw / YAW_LIMIT,
                label.pose.pitch / PITCH_LIMIT,
                label.pose.roll / ROLL_LIMIT,
            ],
            _ => unreachable!("classification task"),
        }
    }

    fn denormalize(&self, out: &[f64], image_size: usize) -> Vec<f64> {
        match self {
            Task::Landmarks => {
                let half = (image_size - 1) as f64 / 2.0;
                out.iter().map(|v| (v + 1.0) * half).collect()
            }
            Task::Pose => vec![
                out[0] * YAW_LIMIT,
                out[1] * PITCH_LIMIT,
                out[2] * ROLL_LIMIT,
            ],
            _ => out.to_vec(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::arg(format!(
                    "unknown task '{s}' (expected landmarks, pose, expression, expression-class)"
                ))
            })
    }
}

/// Frozen embeddings of a set of frames with their labels.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub dim: usize,
    /// Row-major `[n, dim]`.
    pub features: Vec<f32>,
    pub labels: Vec<FrameLabel>,
    pub image_size: usize,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(data, &[idx.len(), self.dim]).expect("rows have dim values")
    }
}

/// Encodes frames with a frozen model. No graph is recorded, so the encoder
/// cannot receive gradients.
pub fn embed_frames(model: &FabNet<f32>, frames: &[&Frame]) -> Result<ProbeSet> {
    const CHUNK: usize = 64;
    let size = model.config().image_size;
    let dim = model.config().embedding_dim;
    let mut features = Vec::with_capacity(frames.len() * dim);
    for chunk in frames.chunks(CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * size * size);
        for f in chunk {
            if f.image.size != size {
                return Err(Error::dim(
                    "embed_frames",
                    "height",
                    format!("frame is {}, model expects {size}", f.image.size),
                ));
            }
            data.extend(f.image.to_chw::<f32>());
        }
        let x = Tensor::new(data, &[chunk.len(), 3, size, size])?;
        let e = no_grad(|| model.encode(&x))?;
        features.extend_from_slice(&e.data());
    }
    Ok(ProbeSet {
        dim,
        features,
        labels: frames.iter().map(|f| f.label).collect(),
        image_size: size,
    })
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without probe-validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            patience: 10,
            seed: 0,
        }
    }
}

/// Batch norm plus a bias-free linear map.
#[derive(Debug, Clone)]
pub struct ProbeHead {
    pub task: Task,
    pub input_dim: usize,
    pub output_dim: usize,
    pub bn: BatchNorm<f32>,
    /// `[input_dim, output_dim]`.
    pub weight: Tensor<f32>,
    image_size: usize,
}

enum Targets {
    Regression(Vec<f32>),
    Classes(Vec<usize>, Vec<f32>),
    Labels(Vec<f32>, LabelWeights),
}

impl ProbeHead {
    pub fn new(task: Task, input_dim: usize, image_size: usize, seed: u64) -> Self {
        let output_dim = task.output_dim();
        let mut rng = rng::stream(seed, 0);
        let bound = 1.0 / (input_dim as f64).sqrt();
        let w = (0..input_dim * output_dim)
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect();
        ProbeHead {
            task,
            input_dim,
            output_dim,
            bn: BatchNorm::new(input_dim),
            weight: Tensor::param(w, &[input_dim, output_dim]).expect("shape matches data"),
            image_size,
        }
    }

    pub fn parameters(&self) -> Vec<Tensor<f32>> {
        vec![
            self.bn.gamma.clone(),
            self.bn.beta.clone(),
            self.weight.clone(),
        ]
    }

    fn forward(&mut self, x: &Tensor<f32>, mode: NormMode) -> Result<Tensor<f32>> {
        let h = self.bn.forward(x, mode)?;
        linear(&h, &self.weight, None)
    }

    /// Raw outputs for every sample: denormalized regression values
    /// (landmark pixels or degrees) or logits.
    pub fn predict(&self, set: &ProbeSet) -> Result<Vec<Vec<f64>>> {
        self.check_input(set)?;
        let mut head = self.clone();
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut out = Vec::with_capacity(set.len());
        for chunk in idx.chunks(256) {
            let y = no_grad(|| head.forward(&set.batch(chunk), NormMode::Eval))?;
            let y = y.data();
            for row in y.chunks(self.output_dim) {
                let v: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                out.push(self.task.denormalize(&v, set.image_size));
            }
        }
        Ok(out)
    }

    fn check_input(&self, set: &ProbeSet) -> Result<()> {
        if set.dim != self.input_dim {
            return Err(Error::arg(format!(
                "probe expects {}-d features, got {}",
                self.input_dim, set.dim
            )));
        }
        if set.image_size != self.image_size {
            return Err(Error::arg(format!(
                "probe trained on {} px frames, got {}",
                self.image_size, set.image_size
            )));
        }
        Ok(())
    }

    fn targets(&self, set: &ProbeSet, weights_from: &ProbeSet) -> Result<Targets> {
        Ok(match self.task.kind() {
            TaskKind::Regression => Targets::Regression(
                set.labels
                    .iter()
                    .flat_map(|l| self.task.regression_target(l, set.image_size))
                    .map(|v| v as f32)
                    .collect(),
            ),
            TaskKind::Multiclass => {
                let mut counts = vec![0usize; self.output_dim];
                for l in &weights_from.labels {
                    counts[l.expression.class_id()] += 1;
                }
                // classes absent from the training data never occur as labels there
                counts.iter_mut().for_each(|c| *c = (*c).max(1));
                let w = class_weights(&counts)?
                    .into_iter()
                    .map(|v| v as f32)
                    .collect();
                Targets::Classes(
                    set.labels.iter().map(|l| l.expression.class_id()).collect(),
                    w,
                )
            }
            TaskKind::Multilabel => {
                let mut negative = Vec::new();
                let mut positive = Vec::new();
                for j in 0..self.output_dim {
                    let pos = weights_from
                        .labels
                        .iter()
                        .filter(|l| l.expression.flags()[j])
                        .count();
                    let neg = weights_from.len() - pos;
                    let w = class_weights(&[neg.max(1), pos.max(1)])?;
                    negative.push(w[0]);
                    positive.push(w[1]);
                }
                let t = set
                    .labels
                    .iter()
                    .flat_map(|l| l.expression.flags().map(|f| f as u8 as f32))
                    .collect();
                Targets::Labels(t, LabelWeights { negative, positive })
            }
        })
    }

    fn loss(
        &mut self,
        set: &ProbeSet,
        targets: &Targets,
        idx: &[usize],
        mode: NormMode,
    ) -> Result<Tensor<f32>> {
        let y = self.forward(&set.batch(idx), mode)?;
        let k = self.output_dim;
        let gather = |v: &[f32]| -> Vec<f32> {
            idx.iter()
                .flat_map(|&i| v[i * k..(i + 1) * k].iter().copied())
                .collect()
        };
        match targets {
            Targets::Regression(t) => mse_loss(&y, &Tensor::new(gather(t), &[idx.len(), k])?),
            Targets::Classes(c, w) => {
                let labels: Vec<usize> = idx.iter().map(|&i| c[i]).collect();
                weighted_cross_entropy(&y, &labels, w)
            }
            Targets::Labels(t, w) => bce_with_logits(&y, &gather(t), w),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub head: ProbeHead,
    pub epochs_run: usize,
    pub best_val_loss: Option<f64>,
}

/// Trains a probe on frozen features. With a validation set, training stops
/// after `patience` epochs without improvement and the best head is kept.
pub fn fit_probe(
    train: &ProbeSet,
    val: Option<&ProbeSet>,
    task: Task,
    config: &ProbeConfig,
) -> Result<ProbeFit> {
    if train.len() < 2 {
        return Err(Error::arg("probe training needs at least 2 samples"));
    }
    if config.batch_size < 2 {
        return Err(Error::arg("probe batch size must be at least 2"));
    }
    if let Some(v) = val {
        if v.dim != train.dim || v.image_size != train.image_size {
            return Err(Error::arg(
                "probe validation features do not match training features",
            ));
        }
    }
    let mut head = ProbeHead::new(task, train.dim, train.image_size, config.seed);
    let train_targets = head.targets(train, train)?;
    let val_targets = val.map(|v| head.targets(v, train)).transpose()?;
    let params = head.parameters();
    let mut opt = Adam::new(&params);

    let mut best: Option<(f64, ProbeHead)> = None;
    let mut stale = 0;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng::stream(config.seed, 1 + epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            // batch norm needs two samples; a lone remainder is skipped this epoch
            if chunk.len() < 2 {
                continue;
            }
            let loss = head.loss(train, &train_targets, chunk, NormMode::Train)?;
            loss.backward()?;
            opt.step(&params, config.lr)?;
        }
        let (Some(v), Some(vt)) = (val, &val_targets) else {
            continue;
        };
        let idx: Vec<usize> = (0..v.len()).collect();
        let vl = no_grad(|| head.loss(v, vt, &idx, NormMode::Eval))?.item() as f64;
        if best.as_ref().is_none_or(|(b, _)| vl < *b) {
            best = Some((vl, snapshot(&head)));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(match best {
        Some((loss, head)) => ProbeFit {
            head,
            epochs_run,
            best_val_loss: Some(loss),
        },
        None => ProbeFit {
            head,
            epochs_run,
            best_val_loss: None,
        },
    })
}

/// Deep copy detached from the live parameters.
fn snapshot(head: &ProbeHead) -> ProbeHead {
    let copy = |t: &Tensor<f32>| Tensor::param(t.to_vec(), t.shape()).expect("same shape");
    let mut h = head.clone();
    h.bn.gamma = copy(&head.bn.gamma);
    h.bn.beta = copy(&head.bn.beta);
    h.weight = copy(&head.weight);
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    pub n_samples: usize,
    /// Name and value of the headline number: landmark error (%), pose MAE
    /// (degrees) or macro AUC.
    pub primary: (String, f64),
    /// Per-landmark, per-angle or per-class breakdown. `None` marks classes
    /// whose AUC is undefined on this split.
    pub details: Vec<(String, Option<f64>)>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,metric,value\n");
        let _ = writeln!(s, "{},n_samples,{}", self.task, self.n_samples);
        let _ = writeln!(s, "{},{},{}", self.task, self.primary.0, self.primary.1);
        for (name, v) in &self.details {
            let v = v
                .map(|v| v.to_string())
                .unwrap_or_else(|| "undefined".into());
            let _ = writeln!(s, "{},{name},{v}", self.task);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("task {} ({} test samples)\n", self.task, self.n_samples);
        let _ = writeln!(s, "  {:<24} {:.4}", self.primary.0, self.primary.1);
        for (name, v) in &self.details {
            match v {
                Some(v) => {
                    let _ = writeln!(s, "  {name:<24} {v:.4}");
                }
                None => {
                    let _ = writeln!(s, "  {name:<24} undefined");
                }
            }
        }
        for w in &self.warnings {
            let _ = writeln!(s, "  warning: {w}");
        }
        s
    }
}

/// Scores a fitted head on held-out features.
pub fn evaluate_probe(head: &ProbeHead, test: &ProbeSet) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::arg("evaluation split is empty"));
    }
    let preds = head.predict(test)?;
    report_from_outputs(head.task, &preds, &test.labels)
}

/// Computes the task metrics from raw outputs (see [`ProbeHead::predict`]).
pub fn report_from_outputs(
    task: Task,
    outputs: &[Vec<f64>],
    labels: &[FrameLabel],
) -> Result<MetricsReport> {
    if outputs.len() != labels.len() || labels.is_empty() {
        return Err(Error::arg(format!(
            "{} outputs for {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    let n = labels.len();
    let mut warnings = Vec::new();
    let (primary, details) = match task {
        Task::Landmarks => {
            let mut total = 0.0;
            let mut per_point = [0.0; N_LANDMARKS];
            for (o, l) in outputs.iter().zip(labels) {
                let pred: [[f64; 2]; N_LANDMARKS] =
                    std::array::from_fn(|k| [o[2 * k], o[2 * k + 1]]);
                total += landmark_error(&pred, l)?;
                let iod = (l.landmarks[0][0] - l.landmarks[1][0])
                    .hypot(l.landmarks[0][1] - l.landmarks[1][1]);
                for k in 0..N_LANDMARKS {
                    per_point[k] += (pred[k][0] - l.landmarks[k][0])
                        .hypot(pred[k][1] - l.landmarks[k][1])
                        / iod
                        * 100.0;
                }
            }
            (
                ("landmark_error_pct".to_string(), total / n as f64),
                LANDMARK_NAMES
                    .iter()
                    .zip(per_point)
                    .map(|(name, v)| (format!("{name}_pct"), Some(v / n as f64)))
                    .collect(),
            )
        }
        Task::Pose => {
            let pred: Vec<[f64; 3]> = outputs.iter().map(|o| [o[0], o[1], o[2]]).collect();
            let gt: Vec<[f64; 3]> = labels.iter().map(|l| l.pose.as_array()).collect();
            let m = pose_mae(&pred, &gt)?;
            (
                ("pose_mae_deg".to_string(), m.overall),
                ["yaw", "pitch", "roll"]
                    .iter()
                    .zip(m.per_angle)
                    .map(|(name, v)| (format!("{name}_mae_deg"), Some(v)))
                    .collect(),
            )
        }
        Task::Expression | Task::ExpressionClass => {
            let k = task.output_dim();
            let scores: Vec<Vec<f64>> = (0..k)
                .map(|c| outputs.iter().map(|o| o[c]).collect())
                .collect();
            let truth: Vec<Vec<bool>> = (0..k)
                .map(|c| {
                    labels
                        .iter()
                        .map(|l| match task {
                            Task::Expression => l.expression.flags()[c],
                            _ => l.expression.class_id() == c,
                        })
                        .collect()
                })
                .collect();
            let m = macro_auc(&scores, &truth)?;
            let name = |c: usize| match task {
                Task::Expression => format!("{}_auc", EXPRESSION_NAMES[c]),
                _ => format!("class{c:02}_auc"),
            };
            for &c in &m.skipped {
                warnings.push(format!(
                    "{} skipped: only one label value in this split",
                    name(c)
                ));
            }
            (
                ("macro_auc".to_string(), m.mean),
                m.per_class
                    .iter()
                    .enumerate()
                    .map(|(c, v)| (name(c), *v))
                    .collect(),
            )
        }
    };
    Ok(MetricsReport {
        task,
        n_samples: n,
        primary,
        details,
        warnings,
    })
}
