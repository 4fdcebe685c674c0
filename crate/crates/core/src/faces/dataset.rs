//! On-disk dataset: a manifest with split assignments, per-track PPM frames
//! and a labels CSV.
//!
//! ```text
//! <root>/manifest.txt
//! <root>/identities.csv
//! <root>/<identity>/<track>/frame_<k>.ppm
//! <root>/<identity>/<track>/labels.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{
    gen_track, Expression, FaceTrack, Frame, FrameLabel, IdentityParams, Image, MotionConfig, Pose,
    N_LANDMARKS,
};
use crate::error::{Error, Result};
use crate::rng;

pub const FORMAT_NAME: &str = "fabnet-faces";
pub const FORMAT_VERSION: u32 = 1;

const LABELS_HEADER: &str =
    "frame,yaw,pitch,roll,lx0,ly0,lx1,ly1,lx2,ly2,lx3,ly3,lx4,ly4,mouth_open,smile,eyes_closed,brows_raised";
const IDENTITIES_HEADER: &str =
    "identity,head_aspect,skin_r,skin_g,skin_b,eye_spacing,feature_scale";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::arg(format!("unknown split '{s}'"))),
        }
    }
}

/// Identity counts per split: val and test are floored, train takes the
/// remainder.
pub fn split_sizes(n_identities: usize) -> Result<[usize; 3]> {
    if n_identities < 10 {
        return Err(Error::arg(format!(
            "need at least 10 identities, got {n_identities}"
        )));
    }
    let val = n_identities * 15 / 100;
    let test = n_identities / 10;
    Ok([n_identities - val - test, val, test])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_identities: usize,
    pub tracks_per_identity: usize,
    pub frames_per_track: usize,
    pub size: usize,
    pub seed: u64,
    pub motion: MotionConfig,
}

impl DatasetSpec {
    pub fn new(
        n_identities: usize,
        tracks_per_identity: usize,
        frames_per_track: usize,
        size: usize,
        seed: u64,
    ) -> Self {
        DatasetSpec {
            n_identities,
            tracks_per_identity,
            frames_per_track,
            size,
            seed,
            motion: MotionConfig {
                size,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub n_identities: usize,
    pub tracks_per_identity: usize,
    pub frames_per_track: usize,
    pub image_size: usize,
    pub seed: u64,
    /// `(identity_id, split)` in identity order.
    pub splits: Vec<(String, Split)>,
}

impl Manifest {
    pub fn frame_count(&self) -> usize {
        self.n_identities * self.tracks_per_identity * self.frames_per_track
    }

    pub fn identities_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.splits
            .iter()
            .filter(move |(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
    }

    pub fn split_of(&self, identity: &str) -> Option<Split> {
        self.splits
            .iter()
            .find(|(id, _)| id == identity)
            .map(|(_, s)| *s)
    }

    fn render(&self) -> String {
        let mut s = format!("{FORMAT_NAME} {}\n", self.version);
        let _ = writeln!(s, "identities {}", self.n_identities);
        let _ = writeln!(s, "tracks_per_identity {}", self.tracks_per_identity);
        let _ = writeln!(s, "frames_per_track {}", self.frames_per_track);
        let _ = writeln!(s, "image_size {}", self.image_size);
        let _ = writeln!(s, "seed {}", self.seed);
        for (id, split) in &self.splits {
            let _ = writeln!(s, "{id},{}", split.as_str());
        }
        s
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, head) = lines
            .next()
            .ok_or_else(|| err(1, "empty manifest".into()))?;
        let version = match head.split_once(' ') {
            Some((FORMAT_NAME, v)) => v
                .trim()
                .parse::<u32>()
                .map_err(|e| err(1, format!("bad version: {e}")))?,
            _ => return Err(err(1, format!("expected '{FORMAT_NAME} <version>'"))),
        };
        if version != FORMAT_VERSION {
            return Err(err(1, format!("unsupported version {version}")));
        }
        let mut counts = [0u64; 5];
        for (k, key) in [
            "identities",
            "tracks_per_identity",
            "frames_per_track",
            "image_size",
            "seed",
        ]
        .iter()
        .enumerate()
        {
            let (n, line) = lines
                .next()
                .ok_or_else(|| err(k + 2, format!("missing '{key}' line")))?;
            counts[k] = match line.split_once(' ') {
                Some((name, v)) if name == *key => v
                    .trim()
                    .parse()
                    .map_err(|e| err(n, format!("bad {key}: {e}")))?,
                _ => return Err(err(n, format!("expected '{key} <value>'"))),
            };
        }
        let mut splits = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (id, split) = line
                .split_once(',')
                .ok_or_else(|| err(n, "expected 'identity,split'".into()))?;
            let split = split.parse().map_err(|e: Error| err(n, e.to_string()))?;
            splits.push((id.to_string(), split));
        }
        let m = Manifest {
            version,
            n_identities: counts[0] as usize,
            tracks_per_identity: counts[1] as usize,
            frames_per_track: counts[2] as usize,
            image_size: counts[3] as usize,
            seed: counts[4],
            splits,
        };
        if m.splits.len() != m.n_identities {
            return Err(err(
                text.lines().count(),
                format!(
                    "{} identities declared but {} split rows",
                    m.n_identities,
                    m.splits.len()
                ),
            ));
        }
        Ok(m)
    }
}

/// A fully loaded dataset. Tracks are ordered by identity, then track.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub tracks: Vec<FaceTrack>,
}

impl Dataset {
    /// Renders a dataset in memory.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let sizes = split_sizes(spec.n_identities)?;
        if spec.tracks_per_identity == 0 {
            return Err(Error::arg("tracks_per_identity must be positive"));
        }
        let ids: Vec<String> = (0..spec.n_identities).map(identity_name).collect();
        let mut order: Vec<usize> = (0..spec.n_identities).collect();
        order.shuffle(&mut rng::stream(spec.seed, u64::MAX));
        let mut splits = vec![Split::Train; spec.n_identities];
        for (rank, &i) in order.iter().enumerate() {
            splits[i] = if rank < sizes[0] {
                Split::Train
            } else if rank < sizes[0] + sizes[1] {
                Split::Val
            } else {
                Split::Test
            };
        }

        let motion = MotionConfig {
            size: spec.size,
            ..spec.motion
        };
        let per_identity: Vec<Vec<FaceTrack>> = (0..spec.n_identities)
            .into_par_iter()
            .map(|i| {
                let identity =
                    IdentityParams::sample(&mut rng::stream(spec.seed, 1 << 32 | i as u64));
                (0..spec.tracks_per_identity)
                    .map(|t| {
                        let seed = rng::derive_seed(spec.seed, (i as u64) << 16 | t as u64);
                        let mut track = gen_track(&identity, spec.frames_per_track, seed, &motion)?;
                        track.identity_id = ids[i].clone();
                        track.track_id = track_name(t);
                        Ok(track)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;

        Ok(Dataset {
            manifest: Manifest {
                version: FORMAT_VERSION,
                n_identities: spec.n_identities,
                tracks_per_identity: spec.tracks_per_identity,
                frames_per_track: spec.frames_per_track,
                image_size: spec.size,
                seed: spec.seed,
                splits: ids.into_iter().zip(splits).collect(),
            },
            tracks: per_identity.into_iter().flatten().collect(),
        })
    }

    pub fn tracks_in(&self, split: Split) -> impl Iterator<Item = &FaceTrack> {
        self.tracks
            .iter()
            .filter(move |t| self.manifest.split_of(&t.identity_id) == Some(split))
    }

    pub fn frame_count(&self) -> usize {
        self.tracks.iter().map(|t| t.frames.len()).sum()
    }

    /// Writes the dataset under `root`, creating directories as needed.
    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        write_file(
            &root.join("manifest.txt"),
            self.manifest.render().as_bytes(),
        )?;

        let mut ids = String::from(IDENTITIES_HEADER);
        ids.push('\n');
        let mut seen = std::collections::HashSet::new();
        for t in &self.tracks {
            if let Some(p) = t.identity.filter(|_| seen.insert(t.identity_id.clone())) {
                let _ = writeln!(
                    ids,
                    "{},{},{},{},{},{},{}",
                    t.identity_id,
                    p.head_aspect,
                    p.skin_tone[0],
                    p.skin_tone[1],
                    p.skin_tone[2],
                    p.eye_spacing,
                    p.feature_scale
                );
            }
        }
        write_file(&root.join("identities.csv"), ids.as_bytes())?;

        for t in &self.tracks {
            let dir = root.join(&t.identity_id).join(&t.track_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut csv = String::from(LABELS_HEADER);
            csv.push('\n');
            for (k, f) in t.frames.iter().enumerate() {
                write_ppm(&dir.join(format!("frame_{k}.ppm")), &f.image)?;
                csv.push_str(&label_row(k, &f.label));
                csv.push('\n');
            }
            write_file(&dir.join("labels.csv"), csv.as_bytes())?;
        }
        Ok(())
    }
}

fn identity_name(i: usize) -> String {
    format!("id{i:04}")
}

fn track_name(t: usize) -> String {
    format!("track{t:02}")
}

/// Renders the dataset described by `spec` and writes it to `out_dir`.
pub fn gen_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(spec)?;
    ds.write(out_dir)?;
    Ok(ds)
}

/// Loads a dataset directory. Tracks are discovered from the identity
/// directories named in the manifest.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.txt");
    let manifest = Manifest::parse(&manifest_path, &read_string(&manifest_path)?)?;
    let identities = load_identities(&root.join("identities.csv"))?;

    let mut tracks = Vec::new();
    for (id, _) in &manifest.splits {
        let id_dir = root.join(id);
        let mut track_dirs: Vec<PathBuf> = fs::read_dir(&id_dir)
            .map_err(|e| Error::io(&id_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        track_dirs.sort();
        for dir in track_dirs {
            let labels = parse_labels(&dir.join("labels.csv"))?;
            let frames = labels
                .into_iter()
                .enumerate()
                .map(|(k, label)| {
                    let image = read_ppm(&dir.join(format!("frame_{k}.ppm")))?;
                    Ok(Frame { image, label })
                })
                .collect::<Result<Vec<_>>>()?;
            tracks.push(FaceTrack {
                track_id: dir
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                identity_id: id.clone(),
                identity: identities.iter().find(|(n, _)| n == id).map(|(_, p)| *p),
                frames,
            });
        }
    }
    Ok(Dataset { manifest, tracks })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn label_row(k: usize, l: &FrameLabel) -> String {
    let mut row = format!("{k},{},{},{}", l.pose.yaw, l.pose.pitch, l.pose.roll);
    for p in &l.landmarks {
        let _ = write!(row, ",{},{}", p[0], p[1]);
    }
    for f in l.expression.flags() {
        let _ = write!(row, ",{}", f as u8);
    }
    row
}

fn parse_labels(path: &Path) -> Result<Vec<FrameLabel>> {
    let text = read_string(path)?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(LABELS_HEADER) {
        return Err(err(1, "unexpected header".into()));
    }
    let n_cols = 4 + 2 * N_LANDMARKS + 4;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != n_cols {
            return Err(err(
                n,
                format!("expected {n_cols} columns, found {}", cols.len()),
            ));
        }
        let frame: usize = cols[0].parse().map_err(|e| err(n, format!("frame: {e}")))?;
        if frame != out.len() {
            return Err(err(
                n,
                format!("frame {frame} out of order, expected {}", out.len()),
            ));
        }
        let num = |c: usize| -> Result<f64> {
            cols[c]
                .parse::<f64>()
                .map_err(|e| err(n, format!("column {c} '{}': {e}", cols[c])))
        };
        let pose = Pose::new(num(1)?, num(2)?, num(3)?);
        let mut landmarks = [[0.0; 2]; N_LANDMARKS];
        for (j, lm) in landmarks.iter_mut().enumerate() {
            *lm = [num(4 + 2 * j)?, num(5 + 2 * j)?];
        }
        let mut flags = [false; 4];
        for (j, f) in flags.iter_mut().enumerate() {
            let c = 4 + 2 * N_LANDMARKS + j;
            *f = match cols[c] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(err(
                        n,
                        format!("column {c}: flag must be 0 or 1, got '{other}'"),
                    ))
                }
            };
        }
        out.push(FrameLabel {
            pose,
            landmarks,
            expression: Expression::from_flags(flags),
        });
    }
    Ok(out)
}

fn load_identities(path: &Path) -> Result<Vec<(String, IdentityParams)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = read_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(err(format!("expected 7 columns, found {}", cols.len())));
        }
        let v: Vec<f64> = cols[1..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| err(format!("'{c}': {e}"))))
            .collect::<Result<_>>()?;
        out.push((
            cols[0].to_string(),
            IdentityParams {
                head_aspect: v[0],
                skin_tone: [v[1], v[2], v[3]],
                eye_spacing: v[4],
                feature_scale: v[5],
            },
        ));
    }
    Ok(out)
}

fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write!(w, "P6\n{0} {0}\n255\n", img.size)
        .and_then(|_| w.write_all(&img.pixels))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn read_ppm(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: msg.to_string(),
    };
    // header: magic, width, height, maxval separated by whitespace
    let mut fields = Vec::new();
    let mut tok = String::new();
    while fields.len() < 4 {
        let mut byte = [0u8];
        r.read_exact(&mut byte).map_err(|e| Error::io(path, e))?;
        let c = byte[0] as char;
        if c == '#' {
            let mut skip = String::new();
            r.read_line(&mut skip).map_err(|e| Error::io(path, e))?;
        } else if c.is_ascii_whitespace() {
            if !tok.is_empty() {
                fields.push(std::mem::take(&mut tok));
            }
        } else {
            tok.push(c);
        }
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected 8-bit binary PPM (P6, maxval 255)"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if w != h {
        return Err(bad("images must be square"));
    }
    let mut pixels = vec![0u8; w * h * 3];
    r.read_exact(&mut pixels).map_err(|e| Error::io(path, e))?;
    Ok(Image { size: w, pixels })
}
