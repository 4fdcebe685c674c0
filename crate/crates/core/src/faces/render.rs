//! 2-D parametric face renderer.
//!
//! The head is a shaded ellipse centered in the image. Facial features sit at
//! fixed positions in a head-local frame; yaw and pitch slide them by
//! `depth * sin(angle)` and foreshorten by `cos(angle)`, then roll rotates the
//! whole face about the image center. Landmarks are the exact analytic
//! feature centers.

use super::{Expression, FrameLabel, IdentityParams, Pose};
use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({0}x{0})", self.size)
    }
}

impl Image {
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.size + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Planar `[3, H, W]` values in [0, 1].
    pub fn to_chw<T: crate::Scalar>(&self) -> Vec<T> {
        let plane = self.size * self.size;
        let mut out = vec![T::zero(); 3 * plane];
        let inv = 1.0 / 255.0;
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = T::of(px[c] as f64 * inv);
            }
        }
        out
    }
}

const BACKGROUND: [f64; 3] = [0.16, 0.18, 0.22];
const EYE: [f64; 3] = [0.06, 0.05, 0.08];
const BROW: [f64; 3] = [0.22, 0.13, 0.08];
const LIPS: [f64; 3] = [0.62, 0.16, 0.2];
const MOUTH_INNER: [f64; 3] = [0.12, 0.02, 0.04];

/// Depth of each feature in head half-widths; larger depth moves further with yaw.
const EYE_DEPTH: f64 = 0.55;
const NOSE_DEPTH: f64 = 0.85;
const MOUTH_DEPTH: f64 = 0.6;
const BROW_DEPTH: f64 = 0.5;

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    /// Anti-aliased coverage of the point (one-pixel soft edge).
    fn coverage(&self, u: f64, v: f64) -> f64 {
        let du = u - self.cx;
        let dv = v - self.cy;
        let q = ((du / self.rx).powi(2) + (dv / self.ry).powi(2)).sqrt();
        if q < 1e-9 {
            return 1.0;
        }
        let gu = du / (self.rx * self.rx);
        let gv = dv / (self.ry * self.ry);
        let grad = (gu * gu + gv * gv).sqrt() / q;
        let dist = (q - 1.0) / grad;
        (0.5 - dist).clamp(0.0, 1.0)
    }
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    for c in 0..3 {
        dst[c] += (src[c] - dst[c]) * alpha;
    }
}

/// Feature layout in the head-local (pre-roll) frame, pixels relative to the
/// image center.
struct Layout {
    head: Ellipse,
    highlight: (f64, f64, f64),
    hairline: f64,
    eyes: [Ellipse; 2],
    brows: [Ellipse; 2],
    nose: Ellipse,
    mouth: Ellipse,
    mouth_inner: Option<Ellipse>,
    /// Lip dots at the mouth corners; a smile lifts them.
    corners: [Ellipse; 2],
    /// Local landmark coordinates.
    landmarks: [[f64; 2]; 5],
}

fn layout(id: &IdentityParams, pose: &Pose, expr: &Expression, size: usize) -> Layout {
    let s = size as f64;
    let hw = 0.27 * s;
    let hh = hw * id.head_aspect;
    let fs = id.feature_scale;
    let (sy, cy) = pose.yaw.to_radians().sin_cos();
    let (sp, cp) = pose.pitch.to_radians().sin_cos();
    // Head-local (u, v) -> yawed/pitched position.
    let place = |u: f64, v: f64, depth: f64| -> [f64; 2] {
        [u * cy + depth * hw * sy, v * cp + depth * hh * sp]
    };

    let eye_u = id.eye_spacing * hw;
    let eye_v = -0.22 * hh;
    let eyes_c = [
        place(-eye_u, eye_v, EYE_DEPTH),
        place(eye_u, eye_v, EYE_DEPTH),
    ];
    let eye_rx = 0.16 * hw * fs * cy.max(0.5);
    let eye_ry_open = 0.13 * hh * fs;
    let eye_ry = if expr.eyes_closed {
        (0.15 * eye_ry_open).max(1.0)
    } else {
        eye_ry_open
    };
    let eyes = eyes_c.map(|c| Ellipse {
        cx: c[0],
        cy: c[1],
        rx: eye_rx,
        ry: eye_ry,
    });

    let brow_v = eye_v - if expr.brows_raised { 0.42 } else { 0.23 } * hh;
    let brows = [-eye_u, eye_u].map(|u| {
        let c = place(u, brow_v, BROW_DEPTH);
        Ellipse {
            cx: c[0],
            cy: c[1],
            rx: 0.17 * hw * fs * cy.max(0.5),
            ry: 0.07 * hh,
        }
    });

    let nose_c = place(0.0, 0.12 * hh, NOSE_DEPTH);
    let nose = Ellipse {
        cx: nose_c[0],
        cy: nose_c[1],
        rx: 0.07 * hw * fs,
        ry: 0.1 * hh * fs,
    };

    let corner_u = (0.34 + if expr.smile { 0.16 } else { 0.0 }) * hw * fs;
    let corner_v = (0.45 - if expr.smile { 0.16 } else { 0.0 }) * hh;
    let corners = [
        place(-corner_u, corner_v, MOUTH_DEPTH),
        place(corner_u, corner_v, MOUTH_DEPTH),
    ];
    let mouth_center = place(0.0, 0.45 * hh, MOUTH_DEPTH);
    let half_w = 0.5 * (corners[1][0] - corners[0][0]);
    let mouth_ry = if expr.mouth_open { 0.15 } else { 0.045 } * hh * fs;
    let mouth = Ellipse {
        cx: mouth_center[0],
        cy: mouth_center[1],
        rx: half_w,
        ry: mouth_ry,
    };
    let mouth_inner = expr.mouth_open.then(|| Ellipse {
        cx: mouth_center[0],
        cy: mouth_center[1],
        rx: 0.75 * half_w,
        ry: 0.65 * mouth_ry,
    });

    Layout {
        head: Ellipse {
            cx: 0.0,
            cy: 0.0,
            rx: hw,
            ry: hh,
        },
        highlight: (0.45 * hw * sy, 0.45 * hh * sp, 0.55 * hw),
        hairline: -0.8 * hh + 0.3 * hh * sp,
        eyes,
        brows,
        nose,
        mouth,
        mouth_inner,
        corners: corners.map(|c| Ellipse {
            cx: c[0],
            cy: c[1],
            rx: 0.07 * hw * fs,
            ry: 0.07 * hw * fs,
        }),
        landmarks: [eyes_c[0], eyes_c[1], nose_c, corners[0], corners[1]],
    }
}

/// Renders one frame and its exact label.
pub fn render_face(
    identity: &IdentityParams,
    pose: Pose,
    expression: Expression,
    size: usize,
) -> Result<(Image, FrameLabel)> {
    if size < 32 || !size.is_multiple_of(16) {
        return Err(Error::arg(format!(
            "image size {size} must be at least 32 and a multiple of 16"
        )));
    }
    pose.validate()?;
    identity.validate()?;

    let lay = layout(identity, &pose, &expression, size);
    let center = (size as f64 - 1.0) * 0.5;
    let (sr, cr) = pose.roll.to_radians().sin_cos();
    let skin = identity.skin_tone;
    let hair = skin.map(|c| c * 0.3);
    let nose_col = skin.map(|c| c * 0.72);

    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            // inverse roll into the head-local frame
            let px = x as f64 - center;
            let py = y as f64 - center;
            let u = cr * px + sr * py;
            let v = -sr * px + cr * py;

            let mut col = BACKGROUND;
            let head = lay.head.coverage(u, v);
            if head > 0.0 {
                let (hx, hy, hr) = lay.highlight;
                let shade =
                    0.72 + 0.38 * (-((u - hx).powi(2) + (v - hy).powi(2)) / (2.0 * hr * hr)).exp();
                let mut face = skin.map(|c| (c * shade).min(1.0));
                let hair_alpha = (lay.hairline - v + 0.5).clamp(0.0, 1.0);
                blend(&mut face, hair, hair_alpha);
                for brow in &lay.brows {
                    blend(&mut face, BROW, brow.coverage(u, v));
                }
                for eye in &lay.eyes {
                    blend(&mut face, EYE, eye.coverage(u, v));
                }
                blend(&mut face, nose_col, lay.nose.coverage(u, v));
                blend(&mut face, LIPS, lay.mouth.coverage(u, v));
                for corner in &lay.corners {
                    blend(&mut face, LIPS, corner.coverage(u, v));
                }
                if let Some(inner) = &lay.mouth_inner {
                    blend(&mut face, MOUTH_INNER, inner.coverage(u, v));
                }
                blend(&mut col, face, head);
            }
            pixels.extend(col.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }

    let landmarks = lay
        .landmarks
        .map(|[u, v]| [center + cr * u - sr * v, center + sr * u + cr * v]);
    let label = FrameLabel {
        pose,
        landmarks,
        expression,
    };
    Ok((Image { size, pixels }, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity() -> IdentityParams {
        IdentityParams {
            head_aspect: 1.1,
            skin_tone: [0.85, 0.65, 0.5],
            eye_spacing: 0.4,
            feature_scale: 1.0,
        }
    }

    fn neutral() -> Expression {
        Expression::default()
    }

    #[test]
    fn frontal_landmarks_are_mirror_symmetric() {
        let (_, label) = render_face(&identity(), Pose::default(), neutral(), 64).unwrap();
        let c = 31.5;
        let lm = label.landmarks;
        for (l, r) in [(0, 1), (3, 4)] {
            assert!((lm[l][0] + lm[r][0] - 2.0 * c).abs() < 1e-9);
            assert!((lm[l][1] - lm[r][1]).abs() < 1e-9);
        }
        assert!((lm[2][0] - c).abs() < 1e-9);
    }

    #[test]
    fn roll_rotates_landmarks_about_center() {
        let id = identity();
        let (_, flat) = render_face(&id, Pose::new(10.0, -5.0, 0.0), neutral(), 64).unwrap();
        let (_, rolled) = render_face(&id, Pose::new(10.0, -5.0, 30.0), neutral(), 64).unwrap();
        let c = 31.5;
        let (s, co) = 30f64.to_radians().sin_cos();
        for (a, b) in flat.landmarks.iter().zip(&rolled.landmarks) {
            let ex = c + co * (a[0] - c) - s * (a[1] - c);
            let ey = c + s * (a[0] - c) + co * (a[1] - c);
            assert!((ex - b[0]).hypot(ey - b[1]) < 0.5);
        }
    }

    #[test]
    fn open_mouth_changes_only_the_mouth() {
        let id = identity();
        let (closed, lab) = render_face(&id, Pose::default(), neutral(), 64).unwrap();
        let open_expr = Expression {
            mouth_open: true,
            ..neutral()
        };
        let (open, _) = render_face(&id, Pose::default(), open_expr, 64).unwrap();
        assert_ne!(closed, open);
        // eye region: a box around both eyes
        let [l, r] = [lab.landmarks[0], lab.landmarks[1]];
        let (x0, x1) = ((l[0] - 6.0) as usize, (r[0] + 6.0) as usize);
        let (y0, y1) = ((l[1] - 6.0) as usize, (l[1] + 6.0) as usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                assert_eq!(closed.get(x, y), open.get(x, y), "pixel {x},{y}");
            }
        }
    }

    #[test]
    fn eye_landmarks_land_on_eye_pixels() {
        let id = identity();
        for closed in [false, true] {
            let expr = Expression {
                eyes_closed: closed,
                ..neutral()
            };
            let (img, lab) = render_face(&id, Pose::new(-20.0, 12.0, 17.0), expr, 64).unwrap();
            for p in &lab.landmarks[..2] {
                let eye: [u8; 3] = EYE.map(|c| (c * 255.0).round() as u8);
                // some pixel within 1 px of the landmark carries the eye colour
                let hit = (-1i32..=1)
                    .flat_map(|dy| (-1i32..=1).map(move |dx| (dx, dy)))
                    .any(|(dx, dy)| {
                        let x = p[0].round() as i32 + dx;
                        let y = p[1].round() as i32 + dy;
                        (x as f64 - p[0]).hypot(y as f64 - p[1]) <= 1.0
                            && img.get(x as usize, y as usize) == eye
                    });
                assert!(hit, "closed={closed} at {p:?}");
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let id = identity();
        assert!(render_face(&id, Pose::new(50.0, 0.0, 0.0), neutral(), 64).is_err());
        assert!(render_face(&id, Pose::default(), neutral(), 40).is_err());
        assert!(render_face(&id, Pose::default(), neutral(), 16).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let id = identity();
        let a = render_face(&id, Pose::new(3.0, 4.0, 5.0), neutral(), 32).unwrap();
        let b = render_face(&id, Pose::new(3.0, 4.0, 5.0), neutral(), 32).unwrap();
        assert_eq!(a, b);
    }
}
