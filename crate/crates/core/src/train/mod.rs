//! Training loop: batches of (sources, target) frames from the same track,
//! optional loss-ranked curriculum, plateau-driven LR decay, CSV logging and
//! resumable checkpoints.

mod optim;
mod state;

pub use optim::{Adam, Sgd};
pub use state::{load_training_checkpoint, save_training_checkpoint, TrainState};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::curriculum::{
    plateau_detected, select_window, CurriculumEvent, DEFAULT_PATIENCE, DEFAULT_REL_EPS,
};
use crate::error::{Error, Result};
use crate::faces::{Dataset, FaceTrack, Split};
use crate::model::FabNet;
use crate::rng;
use crate::tensor::{index_select, mean, no_grad, Tensor};

const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const VAL_STREAM: u64 = 0x0076_616c_0000;
const VAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::arg(format!(
                "unknown optimizer '{s}' (expected sgd or adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub lr_decay_factor: f64,
    pub max_steps: u64,
    pub val_every: u64,
    pub seed: u64,
    pub n_sources: usize,
    pub use_curriculum: bool,
    pub optimizer: OptimizerKind,
    /// Size of the fixed validation pair set.
    pub val_pairs: usize,
    pub plateau_patience: usize,
    pub plateau_rel_eps: f64,
    /// Training stops once this many LR decays have happened.
    pub max_lr_decays: u32,
    /// Steps between checkpoints; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Defaults: SGD, lr 0.001, momentum 0.9, batch 32 with curriculum, else 8.
    pub fn new(use_curriculum: bool) -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            batch_size: if use_curriculum { 32 } else { 8 },
            lr_decay_factor: 10.0,
            max_steps: 20_000,
            val_every: 200,
            seed: 0,
            n_sources: 1,
            use_curriculum,
            optimizer: OptimizerKind::Sgd,
            val_pairs: 256,
            plateau_patience: DEFAULT_PATIENCE,
            plateau_rel_eps: DEFAULT_REL_EPS,
            max_lr_decays: 2,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::arg(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0, 1)");
        }
        if self.batch_size < 2 {
            return fail("batch size must be at least 2");
        }
        if self.lr_decay_factor <= 1.0 {
            return fail("lr decay factor must exceed 1");
        }
        if self.val_every == 0 {
            return fail("val_every must be positive");
        }
        if self.n_sources == 0 {
            return fail("n_sources must be at least 1");
        }
        if self.val_pairs == 0 {
            return fail("val_pairs must be positive");
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(false)
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd<f32>),
    Adam(Adam<f32>),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Tensor<f32>], momentum: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(params, momentum)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(params)),
        }
    }

    pub fn step(&mut self, params: &[Tensor<f32>], lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params, lr),
            Optimizer::Adam(o) => o.step(params, lr),
        }
    }
}

/// Picks `n_sources + 1` distinct frames uniformly; the last index is the target.
pub fn sample_training_pair(
    track: &FaceTrack,
    n_sources: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, usize)> {
    let need = n_sources + 1;
    if n_sources == 0 || track.frames.len() < need {
        return Err(Error::arg(format!(
            "track {} has {} frames, {need} needed",
            track.track_id,
            track.frames.len()
        )));
    }
    let mut idx = rand::seq::index::sample(rng, track.frames.len(), need).into_vec();
    let target = idx.pop().expect("need >= 2");
    Ok((idx, target))
}

/// One training example: track index, source frame indices, target frame index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSpec {
    pub track: usize,
    pub sources: Vec<usize>,
    pub target: usize,
}

fn sample_pairs(
    tracks: &[&FaceTrack],
    n: usize,
    n_sources: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PairSpec>> {
    (0..n)
        .map(|_| {
            let t = rng.gen_range(0..tracks.len());
            let (sources, target) = sample_training_pair(tracks[t], n_sources, rng)?;
            Ok(PairSpec {
                track: t,
                sources,
                target,
            })
        })
        .collect()
}

/// Stacks the frames of `pairs` into one source tensor per source slot and a target tensor.
fn pair_tensors(
    tracks: &[&FaceTrack],
    pairs: &[PairSpec],
    size: usize,
) -> Result<(Vec<Tensor<f32>>, Tensor<f32>)> {
    let n_sources = pairs[0].sources.len();
    let shape = [pairs.len(), 3, size, size];
    let stack = |pick: &dyn Fn(&PairSpec) -> usize| -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in pairs {
            data.extend(tracks[p.track].frames[pick(p)].image.to_chw::<f32>());
        }
        Tensor::new(data, &shape)
    };
    let sources = (0..n_sources)
        .map(|k| stack(&|p| p.sources[k]))
        .collect::<Result<_>>()?;
    Ok((sources, stack(&|p| p.target)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    /// Mean unwindowed batch loss since the previous row; absent at step 0.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub lr: f64,
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    /// `advance`, `terminate`, `lr_decay` or `stop`.
    pub name: String,
    pub step: u64,
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub steps_run: u64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub rows: Vec<LogRow>,
    pub events: Vec<Event>,
    pub final_lr: f64,
}

/// Renders the training log: header, one row per evaluation, then event rows.
pub fn render_log(rows: &[LogRow], events: &[Event]) -> String {
    let mut s = String::from("step,train_loss,val_loss,lr,stage\n");
    for r in rows {
        let train = r.train_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{train},{},{},{}", r.step, r.val_loss, r.lr, r.stage);
    }
    for e in events {
        let _ = writeln!(s, "{},{},{}", e.name, e.step, e.stage);
    }
    s
}

pub struct Trainer<'d> {
    pub model: FabNet<f32>,
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    pub state: TrainState,
    train_tracks: Vec<&'d FaceTrack>,
    val_tracks: Vec<&'d FaceTrack>,
    val_pairs: Vec<PairSpec>,
    out_dir: Option<PathBuf>,
}

impl<'d> Trainer<'d> {
    pub fn new(model: FabNet<f32>, dataset: &'d Dataset, config: TrainConfig) -> Result<Self> {
        let params = model.parameters();
        let optimizer = Optimizer::new(config.optimizer, &params, config.momentum);
        let state = TrainState::fresh(&config);
        Self::assemble(model, dataset, config, optimizer, state)
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::save`].
    /// `max_steps` may be raised to continue a finished run.
    pub fn resume(path: &Path, dataset: &'d Dataset, max_steps: Option<u64>) -> Result<Self> {
        let (model, mut config, optimizer, state) = load_training_checkpoint(path)?;
        if let Some(m) = max_steps {
            config.max_steps = m;
        }
        Self::assemble(model, dataset, config, optimizer, state)
    }

    fn assemble(
        model: FabNet<f32>,
        dataset: &'d Dataset,
        config: TrainConfig,
        optimizer: Optimizer,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        let mc = model.config();
        if config.n_sources != mc.n_sources {
            return Err(Error::arg(format!(
                "training with {} sources but the model is configured for {}",
                config.n_sources, mc.n_sources
            )));
        }
        if dataset.manifest.image_size != mc.image_size {
            return Err(Error::arg(format!(
                "dataset images are {} px, model expects {}",
                dataset.manifest.image_size, mc.image_size
            )));
        }
        let need = config.n_sources + 1;
        let usable = |split| -> Vec<&'d FaceTrack> {
            dataset
                .tracks_in(split)
                .filter(|t| t.frames.len() >= need)
                .collect()
        };
        let train_tracks = usable(Split::Train);
        let val_tracks = usable(Split::Val);
        if train_tracks.is_empty() || val_tracks.is_empty() {
            return Err(Error::arg(format!(
                "train and val splits need tracks with at least {need} frames"
            )));
        }
        let mut vrng = rng::stream(config.seed, VAL_STREAM);
        let val_pairs = sample_pairs(&val_tracks, config.val_pairs, config.n_sources, &mut vrng)?;
        Ok(Trainer {
            model,
            config,
            optimizer,
            state,
            train_tracks,
            val_tracks,
            val_pairs,
            out_dir: None,
        })
    }

    /// Directory for the log, periodic checkpoints and divergence dumps.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn stage(&self) -> usize {
        self.state.curriculum.as_ref().map_or(0, |c| c.stage)
    }

    /// Mean reconstruction L1 over the fixed validation pairs.
    pub fn validation_loss(&self) -> Result<f64> {
        let size = self.model.config().image_size;
        let mut total = 0.0;
        for chunk in self.val_pairs.chunks(VAL_CHUNK) {
            let (sources, target) = pair_tensors(&self.val_tracks, chunk, size)?;
            let r = no_grad(|| self.model.reconstruct_multi(&sources, &target))?;
            total += r.per_sample.data().iter().map(|&v| v as f64).sum::<f64>();
        }
        Ok(total / self.val_pairs.len() as f64)
    }

    /// The batch for `step`; depends only on the seed and the step number.
    pub fn batch_for_step(&self, step: u64) -> Result<Vec<PairSpec>> {
        let mut brng = rng::stream(rng::derive_seed(self.config.seed, TRAIN_STREAM), step);
        sample_pairs(
            &self.train_tracks,
            self.config.batch_size,
            self.config.n_sources,
            &mut brng,
        )
    }

    /// One optimizer step; returns the unwindowed mean batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.state.step + 1;
        let pairs = self.batch_for_step(step)?;
        let size = self.model.config().image_size;
        let (sources, target) = pair_tensors(&self.train_tracks, &pairs, size)?;
        let rec = self.model.reconstruct_multi(&sources, &target)?;
        let per: Vec<f64> = rec.per_sample.data().iter().map(|&v| v as f64).collect();
        if per.iter().any(|v| !v.is_finite()) {
            let path = self.divergence_dump(step)?;
            return Err(Error::Diverged {
                step,
                checkpoint: path.display().to_string(),
            });
        }
        let loss = match &self.state.curriculum {
            Some(c) => {
                let window = select_window(&per, c.stage)?;
                mean(&index_select(&rec.per_sample, &window)?)?
            }
            None => rec.loss,
        };
        loss.backward()?;
        let params = self.model.parameters();
        self.optimizer.step(&params, self.state.lr)?;
        self.state.step = step;
        let batch_mean = per.iter().sum::<f64>() / per.len() as f64;
        self.state.loss_sum += batch_mean;
        self.state.loss_count += 1;
        Ok(batch_mean)
    }

    fn divergence_dump(&self, step: u64) -> Result<PathBuf> {
        let dir = self.out_dir.clone().unwrap_or_else(std::env::temp_dir);
        let path = dir.join(format!("diverged_step{step}.ckpt"));
        self.save(&path)?;
        Ok(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_training_checkpoint(
            path,
            &self.model,
            &self.config,
            &self.optimizer,
            &self.state,
        )
    }

    fn event(&mut self, name: &str) {
        let stage = self.stage();
        self.state.events.push(Event {
            name: name.to_string(),
            step: self.state.step,
            stage,
        });
    }

    fn decay_lr(&mut self) {
        self.state.lr /= self.config.lr_decay_factor;
        self.state.lr_decays += 1;
        self.event("lr_decay");
        if self.state.lr_decays >= self.config.max_lr_decays {
            self.state.finished = true;
            self.event("stop");
        }
    }

    /// Evaluates, logs and applies the plateau rules.
    fn evaluate(&mut self) -> Result<()> {
        let val = self.validation_loss()?;
        let train_loss =
            (self.state.loss_count > 0).then(|| self.state.loss_sum / self.state.loss_count as f64);
        self.state.loss_sum = 0.0;
        self.state.loss_count = 0;
        self.state.rows.push(LogRow {
            step: self.state.step,
            train_loss,
            val_loss: val,
            lr: self.state.lr,
            stage: self.stage(),
        });
        if self.state.step == 0 {
            return Ok(());
        }
        let active = self.state.curriculum.as_ref().is_some_and(|c| c.active);
        if active {
            let ev = self
                .state
                .curriculum
                .as_mut()
                .expect("active")
                .advance(val)?;
            match ev {
                CurriculumEvent::Advanced(_) => self.event("advance"),
                CurriculumEvent::Terminated => {
                    self.event("terminate");
                    // the first LR decay coincides with the last window plateau
                    self.decay_lr();
                }
                CurriculumEvent::None => {}
            }
        } else {
            self.state.lr_history.push(val);
            if plateau_detected(
                &self.state.lr_history,
                self.config.plateau_patience,
                self.config.plateau_rel_eps,
            ) {
                self.state.lr_history.clear();
                self.decay_lr();
            }
        }
        Ok(())
    }

    fn write_outputs(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let log = dir.join("train_log.csv");
        fs::write(&log, render_log(&self.state.rows, &self.state.events))
            .map_err(|e| Error::io(&log, e))
    }

    /// Trains until `max_steps` or the stopping rule fires.
    pub fn run(&mut self) -> Result<TrainingReport> {
        if self.state.rows.is_empty() {
            self.evaluate()?;
            self.write_outputs()?;
        }
        while !self.state.finished && self.state.step < self.config.max_steps {
            self.train_step()?;
            let step = self.state.step;
            if step.is_multiple_of(self.config.val_every) || step == self.config.max_steps {
                self.evaluate()?;
                self.write_outputs()?;
            }
            if self.config.checkpoint_every > 0 && step.is_multiple_of(self.config.checkpoint_every) {
                if let Some(dir) = &self.out_dir {
                    self.save(&dir.join("checkpoint.ckpt"))?;
                }
            }
        }
        if self.state.rows.last().map(|r| r.step) != Some(self.state.step) {
            self.evaluate()?;
        }
        self.write_outputs()?;
        if let Some(dir) = &self.out_dir {
            self.save(&dir.join("final.ckpt"))?;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> TrainingReport {
        let rows = &self.state.rows;
        TrainingReport {
            steps_run: self.state.step,
            initial_val_loss: rows.first().map_or(f64::NAN, |r| r.val_loss),
            final_val_loss: rows.last().map_or(f64::NAN, |r| r.val_loss),
            rows: rows.clone(),
            events: self.state.events.clone(),
            final_lr: self.state.lr,
        }
    }
}

/// Trains `model` on `dataset` and returns the report together with the
/// trained model.
pub fn train(
    model: FabNet<f32>,
    dataset: &Dataset,
    config: TrainConfig,
) -> Result<(FabNet<f32>, TrainingReport)> {
    let mut t = Trainer::new(model, dataset, config)?;
    let report = t.run()?;
    Ok((t.model, report))
}
