//! Volumes, labels, the raw on-disk container, synthetic data and preprocessing.

mod inference;
mod preprocess;
mod raw;
mod synthetic;

pub use inference::{sliding_window_infer, tile_starts, VolumeModel};
pub use preprocess::{normalize, random_crop};
pub use raw::{
    read_labels, read_raw, read_volume, write_labels, write_raw, write_volume, DType, RawBlob,
    RawVolumeHeader, HEADER_LEN, MAGIC, VERSION,
};
pub use synthetic::{generate_synthetic, Blob, SyntheticSample, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{HrstError, Result};

/// Dense multi-channel volume, stored channel-first: `[channel, depth, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeTensor {
    channels: usize,
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl VolumeTensor {
    pub fn new(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Self::with_spacing(channels, dims, [1.0; 3], data)
    }

    pub fn with_spacing(
        channels: usize,
        dims: [usize; 3],
        spacing: [f32; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if channels == 0 {
            return Err(HrstError::Dimension("channel count must be >= 1".into()));
        }
        let expected = channels * dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(HrstError::Shape(format!(
                "volume data has {} values, expected {expected} for {channels}x{dims:?}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(HrstError::InvalidValue(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self {
            channels,
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(channels: usize, dims: [usize; 3]) -> Result<Self> {
        let n = channels * dims.iter().product::<usize>();
        Self::new(channels, dims, vec![0.0; n])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn set_spacing(&mut self, spacing: [f32; 3]) -> Result<()> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        let [_, h, w] = self.dims;
        ((c * self.dims[0] + z) * h + y) * w + x
    }

    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, z, y, x)]
    }
}

/// Integer segmentation target `[depth, height, width]` with values in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    num_classes: usize,
    spacing: [f32; 3],
    data: Vec<u32>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], num_classes: usize, data: Vec<u32>) -> Result<Self> {
        check_dims(dims)?;
        if num_classes == 0 {
            return Err(HrstError::Config("num_classes must be >= 1".into()));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(HrstError::Shape(format!(
                "label data has {} values, expected {} for {dims:?}",
                data.len(),
                dims.iter().product::<usize>()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(HrstError::InvalidValue(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            dims,
            num_classes,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u32 {
        let [_, h, w] = self.dims;
        self.data[(z * h + y) * w + x]
    }

    /// Count of voxels carrying `class`.
    pub fn count(&self, class: u32) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

/// Argmax over channels of a logits volume. Ties resolve to the lowest class id.
pub fn argmax_labels(logits: &VolumeTensor) -> Result<LabelVolume> {
    let n = logits.voxels();
    let l = logits.channels();
    let data = logits.data();
    let mut out = Vec::with_capacity(n);
    for v in 0..n {
        let mut best = 0usize;
        let mut best_val = data[v];
        for c in 1..l {
            let x = data[c * n + v];
            if x > best_val {
                best = c;
                best_val = x;
            }
        }
        out.push(best as u32);
    }
    LabelVolume::new(logits.dims(), l.max(1), out)?.with_spacing(logits.spacing())
}

/// Named triple of per-axis extents `(d, h, w)`, used for crop and tile sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims3(pub [usize; 3]);

impl Dims3 {
    pub fn cube(n: usize) -> Self {
        Dims3([n; 3])
    }
}

impl std::str::FromStr for Dims3 {
    type Err = String;

    /// Accepts `"32"` (cube) or `"32x32x16"` / `"32,32,16"`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(['x', ',']).map(str::trim).collect();
        let parse = |p: &str| {
            p.parse::<usize>()
                .map_err(|e| format!("bad extent `{p}`: {e}"))
        };
        match parts.as_slice() {
            [n] => Ok(Dims3::cube(parse(n)?)),
            [a, b, c] => Ok(Dims3([parse(a)?, parse(b)?, parse(c)?])),
            _ => Err(format!("expected N or DxHxW, got `{s}`")),
        }
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(HrstError::Dimension(format!(
            "all extents must be >= 1, got {dims:?}"
        )));
    }
    Ok(())
}

fn check_spacing(spacing: [f32; 3]) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(HrstError::Dimension(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_and_zero_dims() {
        assert!(VolumeTensor::new(1, [1, 1, 1], vec![f32::NAN]).is_err());
        assert!(matches!(
            VolumeTensor::new(1, [0, 4, 4], vec![]),
            Err(HrstError::Dimension(_))
        ));
    }

    #[test]
    fn label_range_enforced() {
        assert!(LabelVolume::new([1, 1, 2], 2, vec![0, 2]).is_err());
        assert!(LabelVolume::new([1, 1, 2], 3, vec![0, 2]).is_ok());
    }

    #[test]
    fn argmax_ties_pick_lowest_class() {
        let v = VolumeTensor::new(3, [1, 1, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
        let l = argmax_labels(&v).unwrap();
        assert_eq!(l.data(), &[0, 1]);
    }

    #[test]
    fn dims_parse() {
        assert_eq!("8".parse::<Dims3>().unwrap(), Dims3([8, 8, 8]));
        assert_eq!("8x4x2".parse::<Dims3>().unwrap(), Dims3([8, 4, 2]));
        assert!("8x4".parse::<Dims3>().is_err());
    }
}
