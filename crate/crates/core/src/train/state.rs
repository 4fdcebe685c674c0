//! Mutable trainer state and its checkpoint sections.

use std::fs;
use std::path::Path;

use super::{Adam, Sgd};
use super::{Event, LogRow, Optimizer, OptimizerKind, TrainConfig};
use crate::curriculum::CurriculumState;
use crate::error::{Error, Result};
use crate::model::{model_from_parts, CheckpointReader, CheckpointWriter, FabNet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub lr: f64,
    pub lr_decays: u32,
    pub finished: bool,
    pub curriculum: Option<CurriculumState>,
    /// Validation losses since the last LR decay (used once the curriculum is inactive).
    pub lr_history: Vec<f64>,
    pub loss_sum: f64,
    pub loss_count: u64,
    pub rows: Vec<LogRow>,
    pub events: Vec<Event>,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            lr: config.lr,
            lr_decays: 0,
            finished: false,
            curriculum: config
                .use_curriculum
                .then(|| CurriculumState::new(config.plateau_patience, config.plateau_rel_eps)),
            lr_history: Vec::new(),
            loss_sum: 0.0,
            loss_count: 0,
            rows: Vec::new(),
            events: Vec::new(),
        }
    }
}

fn write_config(w: &mut CheckpointWriter, c: &TrainConfig) {
    w.f64(c.lr);
    w.f64(c.momentum);
    w.u64(c.batch_size as u64);
    w.f64(c.lr_decay_factor);
    w.u64(c.max_steps);
    w.u64(c.val_every);
    w.u64(c.seed);
    w.u64(c.n_sources as u64);
    w.u8(c.use_curriculum as u8);
    w.str(c.optimizer.name());
    w.u64(c.val_pairs as u64);
    w.u64(c.plateau_patience as u64);
    w.f64(c.plateau_rel_eps);
    w.u32(c.max_lr_decays);
    w.u64(c.checkpoint_every);
}

fn read_config(r: &mut CheckpointReader) -> Result<TrainConfig> {
    Ok(TrainConfig {
        lr: r.f64()?,
        momentum: r.f64()?,
        batch_size: r.u64()? as usize,
        lr_decay_factor: r.f64()?,
        max_steps: r.u64()?,
        val_every: r.u64()?,
        seed: r.u64()?,
        n_sources: r.u64()? as usize,
        use_curriculum: r.u8()? != 0,
        optimizer: r
            .str()?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("{e}")))?,
        val_pairs: r.u64()? as usize,
        plateau_patience: r.u64()? as usize,
        plateau_rel_eps: r.f64()?,
        max_lr_decays: r.u32()?,
        checkpoint_every: r.u64()?,
    })
}

fn write_buffers(w: &mut CheckpointWriter, name: &str, bufs: &[Vec<f32>]) {
    w.u32(bufs.len() as u32);
    for (i, b) in bufs.iter().enumerate() {
        w.tensor(&format!("{name}.{i}"), &[b.len()], b);
    }
}

fn read_buffers(r: &mut CheckpointReader) -> Result<Vec<Vec<f32>>> {
    let n = r.u32()? as usize;
    (0..n).map(|_| r.tensor().map(|t| t.2)).collect()
}

fn write_optimizer(w: &mut CheckpointWriter, o: &Optimizer) {
    match o {
        Optimizer::Sgd(s) => {
            w.str("sgd");
            w.f64(s.momentum);
            write_buffers(w, "velocity", &s.velocity);
        }
        Optimizer::Adam(a) => {
            w.str("adam");
            w.f64s(&[a.beta1, a.beta2, a.eps]);
            w.u64(a.step_count);
            write_buffers(w, "m", &a.m);
            write_buffers(w, "v", &a.v);
        }
    }
}

fn read_optimizer(r: &mut CheckpointReader, n_params: usize) -> Result<Optimizer> {
    let kind: OptimizerKind = r
        .str()?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("{e}")))?;
    let opt = match kind {
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd {
            momentum: r.f64()?,
            velocity: read_buffers(r)?,
        }),
        OptimizerKind::Adam => {
            let b = r.f64s()?;
            if b.len() != 3 {
                return Err(Error::Checkpoint("bad adam hyperparameters".into()));
            }
            Optimizer::Adam(Adam {
                beta1: b[0],
                beta2: b[1],
                eps: b[2],
                step_count: r.u64()?,
                m: read_buffers(r)?,
                v: read_buffers(r)?,
            })
        }
    };
    let counts = match &opt {
        Optimizer::Sgd(s) => vec![s.velocity.len()],
        Optimizer::Adam(a) => vec![a.m.len(), a.v.len()],
    };
    if counts.iter().any(|&c| c != n_params) {
        return Err(Error::Checkpoint(format!(
            "optimizer state covers {counts:?} tensors, model has {n_params}"
        )));
    }
    Ok(opt)
}

fn opt_f64(w: &mut CheckpointWriter, v: Option<f64>) {
    w.u8(v.is_some() as u8);
    w.f64(v.unwrap_or(0.0));
}

fn read_opt_f64(r: &mut CheckpointReader) -> Result<Option<f64>> {
    let some = r.u8()? != 0;
    let v = r.f64()?;
    Ok(some.then_some(v))
}

fn write_state(w: &mut CheckpointWriter, s: &TrainState) {
    w.u64(s.step);
    w.f64(s.lr);
    w.u32(s.lr_decays);
    w.u8(s.finished as u8);
    match &s.curriculum {
        Some(c) => {
            w.u8(1);
            w.u64(c.stage as u64);
            w.u8(c.active as u8);
            w.f64s(&c.val_history);
            w.u64(c.plateau_patience as u64);
            w.f64(c.plateau_rel_eps);
        }
        None => w.u8(0),
    }
    w.f64s(&s.lr_history);
    w.f64(s.loss_sum);
    w.u64(s.loss_count);
    w.u32(s.rows.len() as u32);
    for r in &s.rows {
        w.u64(r.step);
        opt_f64(w, r.train_loss);
        w.f64(r.val_loss);
        w.f64(r.lr);
        w.u64(r.stage as u64);
    }
    w.u32(s.events.len() as u32);
    for e in &s.events {
        w.str(&e.name);
        w.u64(e.step);
        w.u64(e.stage as u64);
    }
}

fn read_state(r: &mut CheckpointReader) -> Result<TrainState> {
    let step = r.u64()?;
    let lr = r.f64()?;
    let lr_decays = r.u32()?;
    let finished = r.u8()? != 0;
    let curriculum = if r.u8()? != 0 {
        Some(CurriculumState {
            stage: r.u64()? as usize,
            active: r.u8()? != 0,
            val_history: r.f64s()?,
            plateau_patience: r.u64()? as usize,
            plateau_rel_eps: r.f64()?,
        })
    } else {
        None
    };
    let lr_history = r.f64s()?;
    let loss_sum = r.f64()?;
    let loss_count = r.u64()?;
    let n_rows = r.u32()? as usize;
    let mut rows = Vec::new();
    for _ in 0..n_rows {
        rows.push(LogRow {
            step: r.u64()?,
            train_loss: read_opt_f64(r)?,
            val_loss: r.f64()?,
            lr: r.f64()?,
            stage: r.u64()? as usize,
        });
    }
    let n_events = r.u32()? as usize;
    let mut events = Vec::new();
    for _ in 0..n_events {
        events.push(Event {
            name: r.str()?,
            step: r.u64()?,
            stage: r.u64()? as usize,
        });
    }
    Ok(TrainState {
        step,
        lr,
        lr_decays,
        finished,
        curriculum,
        lr_history,
        loss_sum,
        loss_count,
        rows,
        events,
    })
}

/// Writes model, training config, optimizer buffers and trainer state.
pub fn save_training_checkpoint(
    path: &Path,
    model: &FabNet<f32>,
    config: &TrainConfig,
    optimizer: &Optimizer,
    state: &TrainState,
) -> Result<()> {
    let mut w = CheckpointWriter::new(model);
    w.section(b"TCFG", |w| write_config(w, config));
    w.section(b"OPTM", |w| write_optimizer(w, optimizer));
    w.section(b"TRST", |w| write_state(w, state));
    w.finish(path)
}

pub fn load_training_checkpoint(
    path: &Path,
) -> Result<(FabNet<f32>, TrainConfig, Optimizer, TrainState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = CheckpointReader::new(&bytes);
    let (mc, params) = r.model()?;
    let model = model_from_parts::<f32>(mc, &params, None)?;
    if r.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} holds only model weights; no training state to resume",
            path.display()
        )));
    }
    let config = read_config(&mut r.section(b"TCFG")?)?;
    let optimizer = read_optimizer(&mut r.section(b"OPTM")?, params.len())?;
    let state = read_state(&mut r.section(b"TRST")?)?;
    Ok((model, config, optimizer, state))
}
