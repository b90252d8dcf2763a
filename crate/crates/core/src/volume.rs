//! Labeled volumes and the `MWVOL1` container.
//!
//! ```text
//! "MWVOL1" | version u32 | dims u64 x3 | spacing f64 x3 | flags u32
//! | f32 x (D*H*W*channels) | [u16 x (D*H*W) if has-labels]
//! ```
//!
//! All little-endian. Flag bit 0 marks labels; bit 1 marks a displacement
//! field, which carries 3 channels instead of 1.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use morphwin_tensor::Tensor;
use thiserror::Error;

pub const VOLUME_MAGIC: &[u8; 6] = b"MWVOL1";
pub const VOLUME_VERSION: u32 = 1;
pub const FLAG_LABELS: u32 = 1;
pub const FLAG_FIELD: u32 = 2;
const MAX_VOXELS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not an MWVOL1 file (bad magic)")]
    BadMagic,
    #[error("unsupported MWVOL1 version {0}")]
    Version(u32),
    #[error("unknown flag bits {0:#x}")]
    Flags(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("dimensions {0:?} overflow the voxel limit")]
    DimensionOverflow([u64; 3]),
    #[error("payload longer than the header declares")]
    TrailingData,
    #[error("invalid volume: {0}")]
    Invalid(String),
}

/// Integer segmentation map over `[D, H, W]`; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], data: Vec<u16>) -> Result<Self, VolumeError> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(VolumeError::Invalid(format!("{} labels for dims {dims:?}", data.len())));
        }
        Ok(LabelMap { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        LabelMap { dims, data: vec![0; dims.iter().product()] }
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> u16 {
        self.data[self.index(z, y, x)]
    }

    /// Sorted nonzero labels present.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen = [false; 1 << 16];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (1..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }

    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}

/// Intensity volume `[D, H, W, 1]` in `[0, 1]`, labels and voxel spacing (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub intensity: Tensor<f32>,
    pub labels: LabelMap,
    pub spacing: [f64; 3],
}

impl LabeledVolume {
    pub fn dims(&self) -> [usize; 3] {
        self.labels.dims
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        let d = self.labels.dims;
        if self.intensity.shape() != [d[0], d[1], d[2], 1] {
            return Err(VolumeError::Invalid(format!(
                "intensity {:?} does not match labels {d:?}",
                self.intensity.shape()
            )));
        }
        if let Some(v) = self.intensity.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VolumeError::Invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Raw contents of an `MWVOL1` file.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub is_field: bool,
    pub data: Vec<f32>,
    pub labels: Option<Vec<u16>>,
}

impl VolumeFile {
    pub fn channels(&self) -> usize {
        if self.is_field {
            3
        } else {
            1
        }
    }

    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.data.len() != self.voxels() * self.channels() {
            return Err(VolumeError::Invalid(format!(
                "{} values for dims {:?} x {} channels",
                self.data.len(),
                self.dims,
                self.channels()
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.voxels() {
                return Err(VolumeError::Invalid(format!("{} labels for dims {:?}", l.len(), self.dims)));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), VolumeError> {
        self.validate()?;
        w.write_all(VOLUME_MAGIC)?;
        w.write_all(&VOLUME_VERSION.to_le_bytes())?;
        for d in self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for s in self.spacing {
            w.write_all(&s.to_le_bytes())?;
        }
        let mut flags = 0;
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if self.is_field {
            flags |= FLAG_FIELD;
        }
        w.write_all(&flags.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        if let Some(labels) = &self.labels {
            let mut buf = Vec::with_capacity(labels.len() * 2);
            for l in labels {
                buf.extend_from_slice(&l.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, VolumeError> {
        let mut magic = [0u8; 6];
        fill(r, &mut magic, "magic")?;
        if &magic != VOLUME_MAGIC {
            return Err(VolumeError::BadMagic);
        }
        let version = u32::from_le_bytes(array(r, "version")?);
        if version != VOLUME_VERSION {
            return Err(VolumeError::Version(version));
        }
        let mut raw_dims = [0u64; 3];
        for d in &mut raw_dims {
            *d = u64::from_le_bytes(array(r, "dims")?);
        }
        let voxels = raw_dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d).filter(|&v| v <= MAX_VOXELS))
            .ok_or(VolumeError::DimensionOverflow(raw_dims))?;
        let mut spacing = [0f64; 3];
        for s in &mut spacing {
            *s = f64::from_le_bytes(array(r, "spacing")?);
        }
        let flags = u32::from_le_bytes(array(r, "flags")?);
        if flags & !(FLAG_LABELS | FLAG_FIELD) != 0 {
            return Err(VolumeError::Flags(flags));
        }
        let is_field = flags & FLAG_FIELD != 0;
        let channels = if is_field { 3 } else { 1 };
        let mut raw = vec![0u8; voxels as usize * channels * 4];
        fill(r, &mut raw, "intensity payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let labels = if flags & FLAG_LABELS != 0 {
            let mut raw = vec![0u8; voxels as usize * 2];
            fill(r, &mut raw, "label payload")?;
            Some(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
        } else {
            None
        };
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(VolumeError::TrailingData);
        }
        Ok(VolumeFile {
            dims: raw_dims.map(|d| d as usize),
            spacing,
            is_field,
            data,
            labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VolumeError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VolumeError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn from_volume(v: &LabeledVolume) -> Self {
        VolumeFile {
            dims: v.dims(),
            spacing: v.spacing,
            is_field: false,
            data: v.intensity.data().to_vec(),
            labels: Some(v.labels.data.clone()),
        }
    }

    /// Wraps a `[D, H, W, 3]` displacement field.
    pub fn from_field(field: &Tensor<f32>, spacing: [f64; 3]) -> Result<Self, VolumeError> {
        let s = field.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(VolumeError::Invalid(format!("field shape {s:?} is not [D, H, W, 3]")));
        }
        Ok(VolumeFile {
            dims: [s[0], s[1], s[2]],
            spacing,
            is_field: true,
            data: field.data().to_vec(),
            labels: None,
        })
    }

    pub fn into_volume(self) -> Result<LabeledVolume, VolumeError> {
        if self.is_field {
            return Err(VolumeError::Invalid("file holds a displacement field, not an image".into()));
        }
        let [d, h, w] = self.dims;
        let labels = LabelMap::new(self.dims, self.labels.unwrap_or_else(|| vec![0; d * h * w]))?;
        let intensity = Tensor::new(&[d, h, w, 1], self.data).map_err(|e| VolumeError::Invalid(e.to_string()))?;
        Ok(LabeledVolume { intensity, labels, spacing: self.spacing })
    }

    pub fn into_field(self) -> Result<Tensor<f32>, VolumeError> {
        if !self.is_field {
            return Err(VolumeError::Invalid("file holds an image, not a displacement field".into()));
        }
        let [d, h, w] = self.dims;
        Tensor::new(&[d, h, w, 3], self.data).map_err(|e| VolumeError::Invalid(e.to_string()))
    }
}

pub fn save_volume(path: impl AsRef<Path>, v: &LabeledVolume) -> Result<(), VolumeError> {
    VolumeFile::from_volume(v).save(path)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<LabeledVolume, VolumeError> {
    VolumeFile::load(path)?.into_volume()
}

pub fn save_field(path: impl AsRef<Path>, field: &Tensor<f32>, spacing: [f64; 3]) -> Result<(), VolumeError> {
    VolumeFile::from_field(field, spacing)?.save(path)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<Tensor<f32>, VolumeError> {
    VolumeFile::load(path)?.into_field()
}

fn fill(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), VolumeError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => VolumeError::Truncated(what),
        _ => VolumeError::Io(e),
    })
}

fn array<const N: usize>(r: &mut impl Read, what: &'static str) -> Result<[u8; N], VolumeError> {
    let mut b = [0u8; N];
    fill(r, &mut b, what)?;
    Ok(b)
}
