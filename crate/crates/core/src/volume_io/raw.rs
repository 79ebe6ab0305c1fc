//! The `HRSTVOL` container: a fixed 52-byte little-endian header followed by the payload.
//!
//! ```text
//! offset  size  field
//!      0     8  magic "HRSTVOL\0"
//!      8     4  u32 version (1)
//!     12     4  u32 dtype (0 = f32, 1 = i32)
//!     16     4  u32 channels
//!     20    12  u32 D, H, W
//!     32    12  f32 spacing (d, h, w) in mm
//!     44     8  u64 payload length in bytes
//!     52     -  payload, [channel, depth, height, width] order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LabelVolume, VolumeTensor};
use crate::error::{HrstError, Result};

pub const MAGIC: [u8; 8] = *b"HRSTVOL\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 52;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    I32 = 1,
}

impl DType {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::I32),
            other => Err(HrstError::format(
                "dtype",
                format!("unknown dtype code {other}"),
            )),
        }
    }

    pub fn size(self) -> usize {
        4
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawVolumeHeader {
    pub version: u32,
    pub dtype: DType,
    pub channels: u32,
    pub dims: [u32; 3],
    pub spacing: [f32; 3],
    pub payload_len: u64,
}

impl RawVolumeHeader {
    pub fn new(dtype: DType, channels: usize, dims: [usize; 3], spacing: [f32; 3]) -> Self {
        let count = channels as u64 * dims.iter().map(|&d| d as u64).product::<u64>();
        Self {
            version: VERSION,
            dtype,
            channels: channels as u32,
            dims: dims.map(|d| d as u32),
            spacing,
            payload_len: count * dtype.size() as u64,
        }
    }

    pub fn element_count(&self) -> u64 {
        self.channels as u64 * self.dims.iter().map(|&d| d as u64).product::<u64>()
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[..8].copy_from_slice(&MAGIC);
        buf[8..12].copy_from_slice(&self.version.to_le_bytes());
        buf[12..16].copy_from_slice(&(self.dtype as u32).to_le_bytes());
        buf[16..20].copy_from_slice(&self.channels.to_le_bytes());
        for (i, d) in self.dims.iter().enumerate() {
            buf[20 + 4 * i..24 + 4 * i].copy_from_slice(&d.to_le_bytes());
        }
        for (i, s) in self.spacing.iter().enumerate() {
            buf[32 + 4 * i..36 + 4 * i].copy_from_slice(&s.to_le_bytes());
        }
        buf[44..52].copy_from_slice(&self.payload_len.to_le_bytes());
        buf
    }

    pub fn parse(buf: &[u8; HEADER_LEN]) -> Result<Self> {
        if buf[..8] != MAGIC {
            return Err(HrstError::format("magic", "not an HRSTVOL container"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(HrstError::format(
                "version",
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let dtype = DType::from_code(u32_at(12))?;
        let channels = u32_at(16);
        let dims = [u32_at(20), u32_at(24), u32_at(28)];
        let spacing = [f32_at(32), f32_at(36), f32_at(40)];
        let payload_len = u64::from_le_bytes(buf[44..52].try_into().unwrap());
        if channels == 0 || dims.contains(&0) {
            return Err(HrstError::Dimension(format!(
                "header declares channels {channels}, dims {dims:?}; all must be >= 1"
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(HrstError::format(
                "spacing",
                format!("spacing must be positive, got {spacing:?}"),
            ));
        }
        let header = Self {
            version,
            dtype,
            channels,
            dims,
            spacing,
            payload_len,
        };
        let expected = header.element_count() * dtype.size() as u64;
        if payload_len != expected {
            return Err(HrstError::format(
                "payload_length",
                format!("header declares {payload_len} bytes, dims imply {expected}"),
            ));
        }
        Ok(header)
    }

    pub fn dims_usize(&self) -> [usize; 3] {
        self.dims.map(|d| d as usize)
    }
}

/// A parsed container whose payload has not yet been interpreted.
#[derive(Debug, Clone)]
pub struct RawBlob {
    pub header: RawVolumeHeader,
    pub payload: Vec<u8>,
}

impl RawBlob {
    pub fn from_f32(channels: usize, dims: [usize; 3], spacing: [f32; 3], data: &[f32]) -> Self {
        let header = RawVolumeHeader::new(DType::F32, channels, dims, spacing);
        let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { header, payload }
    }

    pub fn from_i32(channels: usize, dims: [usize; 3], spacing: [f32; 3], data: &[i32]) -> Self {
        let header = RawVolumeHeader::new(DType::I32, channels, dims, spacing);
        let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { header, payload }
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        if self.header.dtype != DType::F32 {
            return Err(HrstError::format("dtype", "expected float32 payload"));
        }
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn to_i32(&self) -> Result<Vec<i32>> {
        if self.header.dtype != DType::I32 {
            return Err(HrstError::format("dtype", "expected int32 payload"));
        }
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn write_raw<W: Write>(mut w: W, blob: &RawBlob) -> std::io::Result<()> {
    w.write_all(&blob.header.to_bytes())?;
    w.write_all(&blob.payload)?;
    Ok(())
}

/// Reads exactly one container from `r`. A short payload is reported as a length mismatch.
pub fn read_raw<R: Read>(mut r: R) -> Result<RawBlob> {
    let mut head = [0u8; HEADER_LEN];
    read_exact_or(&mut r, &mut head, "header")?;
    let header = RawVolumeHeader::parse(&head)?;
    let mut payload = vec![0u8; header.payload_len as usize];
    read_exact_or(&mut r, &mut payload, "payload_length")?;
    Ok(RawBlob { header, payload })
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], field: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => HrstError::format(
            field,
            format!("unexpected end of data reading {} bytes", buf.len()),
        ),
        _ => HrstError::format(field, e.to_string()),
    })
}

fn write_blob_file(path: &Path, blob: &RawBlob) -> Result<()> {
    let file = File::create(path).map_err(|e| HrstError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_raw(&mut w, blob).map_err(|e| HrstError::io(path, e))?;
    w.flush().map_err(|e| HrstError::io(path, e))
}

fn read_blob_file(path: &Path) -> Result<RawBlob> {
    let file = File::open(path).map_err(|e| HrstError::io(path, e))?;
    let mut r = BufReader::new(file);
    let blob = read_raw(&mut r)?;
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(blob),
        Ok(_) => Err(HrstError::format(
            "payload_length",
            "trailing bytes after declared payload",
        )),
        Err(e) => Err(HrstError::io(path, e)),
    }
}

pub fn write_volume(vol: &VolumeTensor, path: impl AsRef<Path>) -> Result<()> {
    if let Some(pos) = vol.data().iter().position(|v| !v.is_finite()) {
        return Err(HrstError::InvalidValue(format!(
            "refusing to write non-finite value at flat index {pos}"
        )));
    }
    let blob = RawBlob::from_f32(vol.channels(), vol.dims(), vol.spacing(), vol.data());
    write_blob_file(path.as_ref(), &blob)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeTensor> {
    let blob = read_blob_file(path.as_ref())?;
    let h = blob.header;
    VolumeTensor::with_spacing(
        h.channels as usize,
        h.dims_usize(),
        h.spacing,
        blob.to_f32()?,
    )
}

pub fn write_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<i32> = labels.data().iter().map(|&v| v as i32).collect();
    let blob = RawBlob::from_i32(1, labels.dims(), labels.spacing(), &data);
    write_blob_file(path.as_ref(), &blob)
}

/// Reads an int32 label container. With `num_classes = None` the class count is `max + 1`.
pub fn read_labels(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabelVolume> {
    let blob = read_blob_file(path.as_ref())?;
    let h = blob.header;
    if h.channels != 1 {
        return Err(HrstError::format(
            "channels",
            format!("label volumes have one channel, found {}", h.channels),
        ));
    }
    let raw = blob.to_i32()?;
    if let Some(neg) = raw.iter().find(|&&v| v < 0) {
        return Err(HrstError::InvalidValue(format!("negative label {neg}")));
    }
    let data: Vec<u32> = raw.into_iter().map(|v| v as u32).collect();
    let classes = num_classes.unwrap_or_else(|| data.iter().max().map_or(1, |&m| m as usize + 1));
    LabelVolume::new(h.dims_usize(), classes, data)?.with_spacing(h.spacing)
}
