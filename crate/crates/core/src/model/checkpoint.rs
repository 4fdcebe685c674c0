//! Binary checkpoint format.
//!
//! ```text
//! magic "FABNETCK" | version u32 | model config | n_params u32
//! per parameter: name_len u32, name bytes, rank u32, dims u32 x rank, f32 data
//! trailing sections: tag [u8; 4], byte length u64, payload
//! ```
//!
//! Integers and floats are little-endian. Readers parse the whole file before
//! building anything, so a corrupt file never yields partial state.

use std::fs;
use std::path::Path;

use super::{FabNet, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FABNETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A parameter as stored: name, shape and values.
pub type StoredTensor = (String, Vec<usize>, Vec<f32>);

#[derive(Default)]
pub struct CheckpointWriter {
    buf: Vec<u8>,
}

impl CheckpointWriter {
    /// Starts a file with the header and model section.
    pub fn new<T: Scalar>(model: &FabNet<T>) -> Self {
        let mut w = CheckpointWriter::default();
        w.buf.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.config(model.config());
        let params = model.named_parameters();
        w.u32(params.len() as u32);
        for (name, p) in &params {
            let data: Vec<f32> = p.data().iter().map(|v| v.as_f64() as f32).collect();
            w.tensor(name, p.shape(), &data);
        }
        w
    }

    fn config(&mut self, c: &ModelConfig) {
        self.u32(c.image_size as u32);
        self.u32(c.embedding_dim as u32);
        for list in [&c.encoder_channels, &c.decoder_channels] {
            self.u32(list.len() as u32);
            for &v in list.iter() {
                self.u32(v as u32);
            }
        }
        self.u8(c.multi_source as u8);
        self.u32(c.n_sources as u32);
        self.u64(c.seed);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.str(name);
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
        for &v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Appends a tagged section built by `fill`.
    pub fn section(&mut self, tag: &[u8; 4], fill: impl FnOnce(&mut CheckpointWriter)) {
        let mut inner = CheckpointWriter::default();
        fill(&mut inner);
        self.buf.extend_from_slice(tag);
        self.u64(inner.buf.len() as u64);
        self.buf.extend_from_slice(&inner.buf);
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn finish(self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &self.buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

pub struct CheckpointReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> CheckpointReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        CheckpointReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 8 {
            return Err(Error::Checkpoint(format!("implausible array length {n}")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    pub fn tensor(&mut self) -> Result<StoredTensor> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "{name}: implausible rank {rank}"
            )));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, shape, data))
    }

    /// Reads the next section, checking its tag.
    pub fn section(&mut self, tag: &[u8; 4]) -> Result<CheckpointReader<'a>> {
        let got = self.take(4)?;
        if got != tag {
            return Err(Error::Checkpoint(format!(
                "expected section {}, found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(got)
            )));
        }
        let len = self.u64()? as usize;
        Ok(CheckpointReader::new(self.take(len)?))
    }

    fn config(&mut self) -> Result<ModelConfig> {
        let image_size = self.u32()? as usize;
        let embedding_dim = self.u32()? as usize;
        let mut lists = [Vec::new(), Vec::new()];
        for list in &mut lists {
            let n = self.u32()? as usize;
            if n > 32 {
                return Err(Error::Checkpoint(format!("implausible layer count {n}")));
            }
            for _ in 0..n {
                list.push(self.u32()? as usize);
            }
        }
        let [encoder_channels, decoder_channels] = lists;
        Ok(ModelConfig {
            image_size,
            embedding_dim,
            encoder_channels,
            decoder_channels,
            multi_source: self.u8()? != 0,
            n_sources: self.u32()? as usize,
            seed: self.u64()?,
        })
    }

    /// Parses header and model section: config plus stored parameters.
    pub fn model(&mut self) -> Result<(ModelConfig, Vec<StoredTensor>)> {
        let magic = self.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(
                "bad magic bytes; not a checkpoint file".into(),
            ));
        }
        let version = self.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config = self.config()?;
        let n = self.u32()? as usize;
        let params = (0..n).map(|_| self.tensor()).collect::<Result<Vec<_>>>()?;
        Ok((config, params))
    }
}

/// Builds a model from parsed checkpoint contents. `expected` (if given)
/// must equal the stored config.
pub fn model_from_parts<T: Scalar>(
    config: ModelConfig,
    params: &[StoredTensor],
    expected: Option<&ModelConfig>,
) -> Result<FabNet<T>> {
    if let Some(want) = expected {
        if *want != config {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint has {config:?}, expected {want:?}"
            )));
        }
    }
    let mut model = FabNet::new(config)
        .map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;
    let values: Vec<(String, Vec<usize>, Vec<T>)> = params
        .iter()
        .map(|(n, s, d)| {
            (
                n.clone(),
                s.clone(),
                d.iter().map(|&v| T::of(v as f64)).collect(),
            )
        })
        .collect();
    model.load_parameters(&values)?;
    Ok(model)
}

pub fn save_model<T: Scalar>(model: &FabNet<T>, path: &Path) -> Result<()> {
    CheckpointWriter::new(model).finish(path)
}

/// Loads the model section of a checkpoint, ignoring any trailing sections.
pub fn load_model<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<FabNet<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, params) = CheckpointReader::new(&bytes).model()?;
    model_from_parts(config, &params, expected)
}
