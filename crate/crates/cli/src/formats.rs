//! Binary feature (`DMHF`) and checkpoint (`DMHC`) files.
//!
//! Both formats are little-endian and versioned. A feature file is
//! `"DMHF" | u16 version | u32 L | u32 T | u32 D | L·T·D f32` in
//! `[layer][time][dim]` order. A checkpoint is
//! `"DMHC" | u16 version | u32 count | tensors… | u64 n | n bytes of JSON`,
//! each tensor being `u16 name_len | name | u8 rank | u32 dims… | f32 data`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use dmha_core::{Checkpoint, CheckpointMeta, Tensor};
use thiserror::Error;

pub const FEATURE_MAGIC: &[u8; 4] = b"DMHF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMHC";
pub const FEATURE_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: u16 = 1;

/// Upper bound on any single allocation driven by a header field.
const MAX_ELEMENTS: usize = 1 << 31;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u16 },
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("trailing bytes after {0}")]
    TrailingBytes(&'static str),
    #[error("invalid file: {0}")]
    Invalid(String),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] dmha_core::Error),
}

impl FormatError {
    pub fn kind(&self) -> &'static str {
        match self {
            FormatError::Io(_) => "io",
            FormatError::BadMagic { .. } => "bad_magic",
            FormatError::UnsupportedVersion { .. } => "unsupported_version",
            FormatError::Truncated(_) => "truncated",
            FormatError::TrailingBytes(_) => "trailing_bytes",
            FormatError::Invalid(_) => "invalid_file",
            FormatError::Json(_) => "metadata",
            FormatError::Core(e) => e.kind(),
        }
    }
}

type Result<T> = std::result::Result<T, FormatError>;

/// Reader that reports short reads as truncation of `what`.
struct LeReader<R> {
    inner: R,
    what: &'static str,
}

impl<R: Read> LeReader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => FormatError::Truncated(self.what),
            _ => FormatError::Io(e),
        })?;
        Ok(buf)
    }

    fn vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got != n {
            return Err(FormatError::Truncated(self.what));
        }
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.vec(n.checked_mul(4).ok_or(FormatError::Invalid("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.bytes::<4>()?;
        if &found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(&found).into_owned(),
            });
        }
        Ok(())
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(FormatError::TrailingBytes(self.what)),
        }
    }
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> io::Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| FormatError::Invalid(format!("dims {dims:?} too large")))
}

/// Contents of a feature file. `frames` may be zero (an empty text stream).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureArray {
    pub layers: usize,
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureArray {
    pub fn new(layers: usize, frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if layers == 0 || dim == 0 {
            return Err(FormatError::Invalid("layers and dim must be positive".into()));
        }
        if element_count(&[layers, frames, dim])? != data.len() {
            return Err(FormatError::Invalid(format!(
                "{} values for [{layers} x {frames} x {dim}]",
                data.len()
            )));
        }
        Ok(Self { layers, frames, dim, data })
    }

    /// Rank-3 tensors map to `[L × T × D]`, rank-2 to a single layer.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.dims() {
            [l, f, d] => Self::new(l, f, d, t.data().to_vec()),
            [f, d] => Self::new(1, f, d, t.data().to_vec()),
            ref dims => Err(FormatError::Invalid(format!("cannot store rank-{} tensor", dims.len()))),
        }
    }

    /// Empty text stream of width `dim`.
    pub fn empty_text(dim: usize) -> Result<Self> {
        Self::new(1, 0, dim, Vec::new())
    }

    pub fn into_acoustic(self) -> Result<Tensor<f32>> {
        if self.frames == 0 {
            return Err(FormatError::Invalid("acoustic features need at least one frame".into()));
        }
        Ok(Tensor::new(vec![self.layers, self.frames, self.dim], self.data)?)
    }

    /// `None` for an empty stream.
    pub fn into_text(self) -> Result<Option<Tensor<f32>>> {
        if self.layers != 1 {
            return Err(FormatError::Invalid(format!("text features must have one layer, found {}", self.layers)));
        }
        if self.frames == 0 {
            return Ok(None);
        }
        Ok(Some(Tensor::new(vec![self.frames, self.dim], self.data)?))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        for n in [self.layers, self.frames, self.dim] {
            let n = u32::try_from(n).map_err(|_| FormatError::Invalid("dimension exceeds u32".into()))?;
            w.write_all(&n.to_le_bytes())?;
        }
        write_f32s(w, &self.data)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = LeReader { inner: r, what: "feature file" };
        r.magic(FEATURE_MAGIC)?;
        let version = r.u16()?;
        if version != FEATURE_VERSION {
            return Err(FormatError::UnsupportedVersion { format: "feature", version });
        }
        let (layers, frames, dim) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let n = element_count(&[layers, frames, dim])?;
        let data = r.f32s(n)?;
        r.expect_end()?;
        Self::new(layers, frames, dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let count = u32::try_from(ckpt.tensors.len()).map_err(|_| FormatError::Invalid("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in &ckpt.tensors {
        let len = u16::try_from(name.len()).map_err(|_| FormatError::Invalid(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| FormatError::Invalid("rank exceeds u8".into()))?;
        w.write_all(&[rank])?;
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| FormatError::Invalid("dimension exceeds u32".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        write_f32s(w, t.data())?;
    }
    let meta = serde_json::to_vec(&ckpt.meta)?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = LeReader { inner: r, what: "checkpoint" };
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion { format: "checkpoint", version });
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.vec(len)?).map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(element_count(&dims)?)?;
        tensors.push((name, Tensor::new(dims, data)?));
    }
    let meta_len = usize::try_from(r.u64()?).map_err(|_| FormatError::Invalid("metadata too large".into()))?;
    if meta_len > MAX_ELEMENTS {
        return Err(FormatError::Invalid("metadata too large".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&r.vec(meta_len)?)?;
    r.expect_end()?;
    Ok(Checkpoint { tensors, meta })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
