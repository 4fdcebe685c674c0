use rand::Rng;

use super::{
    render_face, Expression, FaceTrack, Frame, IdentityParams, Pose, PITCH_LIMIT, ROLL_LIMIT,
    YAW_LIMIT,
};
use crate::error::{Error, Result};
use crate::rng;

/// Random-walk parameters for pose and expression over a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionConfig {
    /// Largest per-frame change in yaw, pitch and roll (degrees).
    pub max_step: [f64; 3],
    /// Start poses are drawn uniformly within these bounds.
    pub start_range: [f64; 3],
    /// Per-frame probability that each expression flag toggles.
    pub flip_prob: f64,
    pub size: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            max_step: [8.0, 5.0, 5.0],
            start_range: [30.0, 15.0, 15.0],
            flip_prob: 0.2,
            size: 64,
        }
    }
}

/// Renders a track of `n_frames` frames. Pose takes bounded uniform steps,
/// reflecting off the pose limits; expression flags toggle independently.
pub fn gen_track(
    identity: &IdentityParams,
    n_frames: usize,
    motion_seed: u64,
    motion: &MotionConfig,
) -> Result<FaceTrack> {
    if n_frames < 2 {
        return Err(Error::arg(format!(
            "a track needs at least 2 frames, got {n_frames}"
        )));
    }
    let limits = [YAW_LIMIT, PITCH_LIMIT, ROLL_LIMIT];
    let mut rng = rng::stream(motion_seed, 0);
    let mut angles = [0.0f64; 3];
    for k in 0..3 {
        let r = motion.start_range[k].min(limits[k]);
        angles[k] = rng.gen_range(-r..=r);
    }
    let mut flags = [false; 4];
    for f in &mut flags {
        *f = rng.gen_bool(0.5);
    }

    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        if i > 0 {
            for k in 0..3 {
                let step = motion.max_step[k];
                let mut a = angles[k] + rng.gen_range(-step..=step);
                // reflect; a single reflection suffices while step < limit
                if a > limits[k] {
                    a = 2.0 * limits[k] - a;
                } else if a < -limits[k] {
                    a = -2.0 * limits[k] - a;
                }
                angles[k] = a.clamp(-limits[k], limits[k]);
            }
            for f in &mut flags {
                if rng.gen_bool(motion.flip_prob) {
                    *f = !*f;
                }
            }
        }
        let pose = Pose::new(angles[0], angles[1], angles[2]);
        let (image, label) =
            render_face(identity, pose, Expression::from_flags(flags), motion.size)?;
        frames.push(Frame { image, label });
    }
    Ok(FaceTrack {
        track_id: format!("seed{motion_seed}"),
        identity_id: String::new(),
        identity: Some(*identity),
        frames,
    })
}
