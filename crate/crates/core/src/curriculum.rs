//! Loss-ranked curriculum: each batch is sorted by per-sample loss and only a
//! percentile window is back-propagated. The window starts at the easiest
//! half and slides toward harder samples by a decile each time validation
//! loss plateaus, then freezes at the 40-90th percentile.

use crate::error::{Error, Result};

pub const FINAL_STAGE: usize = 4;
pub const DEFAULT_PATIENCE: usize = 5;
pub const DEFAULT_REL_EPS: f64 = 1e-3;

/// Sorted-rank interval `[lo, hi)` of the stage window in a batch of `n`:
/// `[floor(k n / 10), floor((k + 5) n / 10))`.
pub fn window_bounds(n: usize, stage: usize) -> (usize, usize) {
    (stage * n / 10, (stage + 5) * n / 10)
}

/// Original indices of the samples whose ascending-loss rank falls in the
/// stage window, in rank order. Ties keep original index order.
pub fn select_window(sample_losses: &[f64], stage: usize) -> Result<Vec<usize>> {
    let n = sample_losses.len();
    if n < 2 {
        return Err(Error::arg(format!(
            "curriculum window needs at least 2 samples, got {n}"
        )));
    }
    if stage > FINAL_STAGE {
        return Err(Error::arg(format!(
            "curriculum stage {stage} outside 0..={FINAL_STAGE}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // sort_by is stable, so equal losses stay in index order
    order.sort_by(|&a, &b| sample_losses[a].total_cmp(&sample_losses[b]));
    let (lo, hi) = window_bounds(n, stage);
    Ok(order[lo..hi].to_vec())
}

/// True when the most recent `patience` evaluations, counted from the one
/// that holds the baseline, show no relative improvement above `rel_eps`.
///
/// The baseline is the best value up to and including the evaluation
/// `patience - 1` steps back; the `patience - 1` evaluations after it must
/// all stay above `baseline * (1 - rel_eps)`.
pub fn plateau_detected(val_history: &[f64], patience: usize, rel_eps: f64) -> bool {
    let n = val_history.len();
    if patience == 0 || n < patience.max(2) {
        return false;
    }
    let split = n - patience + 1;
    let baseline = val_history[..split]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    val_history[split..]
        .iter()
        .all(|&v| baseline - v <= rel_eps * baseline.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurriculumEvent {
    None,
    /// The window moved to this stage.
    Advanced(usize),
    /// The last stage plateaued; the window stays at the final stage.
    Terminated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub stage: usize,
    pub active: bool,
    pub val_history: Vec<f64>,
    pub plateau_patience: usize,
    pub plateau_rel_eps: f64,
}

impl Default for CurriculumState {
    fn default() -> Self {
        CurriculumState {
            stage: 0,
            active: true,
            val_history: Vec::new(),
            plateau_patience: DEFAULT_PATIENCE,
            plateau_rel_eps: DEFAULT_REL_EPS,
        }
    }
}

impl CurriculumState {
    pub fn new(patience: usize, rel_eps: f64) -> Self {
        CurriculumState {
            plateau_patience: patience,
            plateau_rel_eps: rel_eps,
            ..Default::default()
        }
    }

    /// Records a validation loss and moves the window on a plateau.
    pub fn advance(&mut self, new_val_loss: f64) -> Result<CurriculumEvent> {
        if !self.active {
            return Err(Error::State("curriculum already terminated".into()));
        }
        self.val_history.push(new_val_loss);
        if !plateau_detected(
            &self.val_history,
            self.plateau_patience,
            self.plateau_rel_eps,
        ) {
            return Ok(CurriculumEvent::None);
        }
        if self.stage < FINAL_STAGE {
            self.stage += 1;
            self.val_history.clear();
            Ok(CurriculumEvent::Advanced(self.stage))
        } else {
            self.active = false;
            Ok(CurriculumEvent::Terminated)
        }
    }
}
