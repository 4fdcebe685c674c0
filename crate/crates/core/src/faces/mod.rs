//! Procedurally rendered face tracks with exact pose, landmark and expression
//! labels, plus the on-disk dataset format.

mod dataset;
mod render;
mod track;

pub use dataset::{gen_dataset, load_dataset, split_sizes, Dataset, DatasetSpec, Manifest, Split};
pub use render::{render_face, Image};
pub use track::{gen_track, MotionConfig};

use rand::Rng;

use crate::error::{Error, Result};

pub const YAW_LIMIT: f64 = 45.0;
pub const PITCH_LIMIT: f64 = 30.0;
pub const ROLL_LIMIT: f64 = 30.0;

pub const N_LANDMARKS: usize = 5;
pub const LANDMARK_NAMES: [&str; N_LANDMARKS] =
    ["left_eye", "right_eye", "nose", "mouth_left", "mouth_right"];
pub const EXPRESSION_NAMES: [&str; 4] = ["mouth_open", "smile", "eyes_closed", "brows_raised"];

/// Appearance that stays fixed across every frame of one person.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityParams {
    /// Head height over head width, in [0.7, 1.3].
    pub head_aspect: f64,
    pub skin_tone: [f64; 3],
    /// Half the distance between the eyes as a fraction of the head half-width.
    pub eye_spacing: f64,
    pub feature_scale: f64,
}

impl IdentityParams {
    pub const ASPECT_RANGE: (f64, f64) = (0.7, 1.3);
    pub const EYE_SPACING_RANGE: (f64, f64) = (0.32, 0.5);
    pub const FEATURE_SCALE_RANGE: (f64, f64) = (0.8, 1.2);

    pub fn sample(rng: &mut impl Rng) -> Self {
        let range = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
        let base = rng.gen_range(0.45..0.95);
        IdentityParams {
            head_aspect: range(rng, Self::ASPECT_RANGE),
            skin_tone: [
                base,
                base * rng.gen_range(0.7..0.85),
                base * rng.gen_range(0.55..0.75),
            ],
            eye_spacing: range(rng, Self::EYE_SPACING_RANGE),
            feature_scale: range(rng, Self::FEATURE_SCALE_RANGE),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        if !within(self.head_aspect, Self::ASPECT_RANGE)
            || !within(self.eye_spacing, Self::EYE_SPACING_RANGE)
            || !within(self.feature_scale, Self::FEATURE_SCALE_RANGE)
            || self.skin_tone.iter().any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(Error::arg(format!(
                "identity parameters out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Head orientation in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Pose {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Pose { yaw, pitch, roll }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64, lim: f64| v.is_finite() && v.abs() <= lim;
        if !(ok(self.yaw, YAW_LIMIT) && ok(self.pitch, PITCH_LIMIT) && ok(self.roll, ROLL_LIMIT)) {
            return Err(Error::arg(format!(
                "pose {self:?} outside yaw ±{YAW_LIMIT}, pitch ±{PITCH_LIMIT}, roll ±{ROLL_LIMIT}"
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Expression {
    pub mouth_open: bool,
    pub smile: bool,
    pub eyes_closed: bool,
    pub brows_raised: bool,
}

impl Expression {
    pub fn flags(&self) -> [bool; 4] {
        [
            self.mouth_open,
            self.smile,
            self.eyes_closed,
            self.brows_raised,
        ]
    }

    pub fn from_flags(f: [bool; 4]) -> Self {
        Expression {
            mouth_open: f[0],
            smile: f[1],
            eyes_closed: f[2],
            brows_raised: f[3],
        }
    }

    /// The four flags read as a 4-bit class id.
    pub fn class_id(&self) -> usize {
        self.flags()
            .iter()
            .enumerate()
            .map(|(i, &f)| (f as usize) << i)
            .sum()
    }
}

/// Ground truth for one rendered frame. Landmarks are pixel coordinates with
/// pixel centers at integer positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLabel {
    pub pose: Pose,
    /// Left eye, right eye, nose, left and right mouth corners.
    pub landmarks: [[f64; 2]; N_LANDMARKS],
    pub expression: Expression,
}

impl FrameLabel {
    pub fn check_invariants(&self, size: usize) -> Result<()> {
        self.pose.validate()?;
        let hi = (size - 1) as f64;
        for (name, p) in LANDMARK_NAMES.iter().zip(&self.landmarks) {
            if !(0.0..=hi).contains(&p[0]) || !(0.0..=hi).contains(&p[1]) {
                return Err(Error::DegenerateLabel(format!(
                    "{name} at {p:?} lies outside the image"
                )));
            }
        }
        if self.pose.roll == 0.0
            && self.pose.yaw.abs() < YAW_LIMIT
            && self.landmarks[0][0] >= self.landmarks[1][0]
        {
            return Err(Error::DegenerateLabel(
                "left eye is not left of the right eye".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub label: FrameLabel,
}

/// Ordered frames of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTrack {
    pub track_id: String,
    pub identity_id: String,
    /// Known for generated data; absent when loading directories that carry
    /// no identity file.
    pub identity: Option<IdentityParams>,
    pub frames: Vec<Frame>,
}
