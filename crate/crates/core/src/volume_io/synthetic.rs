use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelVolume, VolumeTensor};
use crate::error::{HrstError, Result};

/// Recipe for a synthetic volume: solid spheres of each foreground class on a noisy background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub channels: usize,
    pub num_classes: usize,
    /// Spheres placed for every foreground class.
    pub blobs_per_class: usize,
    /// Inclusive radius range in voxels.
    pub radius: [f32; 2],
    pub noise_std: f32,
    pub background: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [32, 32, 32],
            channels: 1,
            num_classes: 2,
            blobs_per_class: 1,
            radius: [4.0, 7.0],
            noise_std: 0.1,
            background: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub class: u32,
    pub center: [usize; 3],
    pub radius: f32,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: VolumeTensor,
    pub labels: LabelVolume,
    pub blobs: Vec<Blob>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(HrstError::Config(
                "synthetic num_classes must be >= 2".into(),
            ));
        }
        if self.channels == 0 || self.dims.contains(&0) {
            return Err(HrstError::Config(format!(
                "synthetic channels/dims must be >= 1, got {} / {:?}",
                self.channels, self.dims
            )));
        }
        let [lo, hi] = self.radius;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(HrstError::Config(format!(
                "bad radius range {:?}",
                self.radius
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(HrstError::Config("noise_std must be >= 0".into()));
        }
        if self.blobs_per_class > 0 {
            let reach = hi.ceil() as usize;
            if let Some(d) = self.dims.iter().find(|&&d| 2 * reach + 1 > d) {
                return Err(HrstError::Config(format!(
                    "sphere radius {hi} does not fit inside extent {d}"
                )));
            }
        }
        Ok(())
    }

    /// Additive intensity for `class` in image channel `channel`.
    pub fn class_offset(&self, class: u32, channel: usize) -> f32 {
        class as f32 * (1.0 + 0.5 * channel as f32)
    }
}

/// Deterministic in `spec.seed`. Later classes overwrite earlier ones where spheres overlap.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = spec.dims;
    let n = d * h * w;

    let mut blobs = Vec::new();
    for class in 1..spec.num_classes as u32 {
        for _ in 0..spec.blobs_per_class {
            let [lo, hi] = spec.radius;
            let radius = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
            let reach = radius.ceil() as usize;
            let mut center = [0usize; 3];
            for (axis, c) in center.iter_mut().enumerate() {
                *c = rng.random_range(reach..=spec.dims[axis] - 1 - reach);
            }
            blobs.push(Blob {
                class,
                center,
                radius,
            });
        }
    }

    let mut labels = vec![0u32; n];
    for blob in &blobs {
        let r2 = blob.radius * blob.radius;
        let reach = blob.radius.ceil() as usize;
        let [cz, cy, cx] = blob.center;
        for z in cz - reach..=cz + reach {
            for y in cy - reach..=cy + reach {
                for x in cx - reach..=cx + reach {
                    let dz = z as f32 - cz as f32;
                    let dy = y as f32 - cy as f32;
                    let dx = x as f32 - cx as f32;
                    if dz * dz + dy * dy + dx * dx <= r2 {
                        labels[(z * h + y) * w + x] = blob.class;
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0f32, spec.noise_std)
        .map_err(|e| HrstError::Config(format!("noise distribution: {e}")))?;
    let mut image = Vec::with_capacity(spec.channels * n);
    for k in 0..spec.channels {
        for &label in &labels {
            let mut v = spec.background + spec.class_offset(label, k);
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            image.push(v);
        }
    }

    Ok(SyntheticSample {
        image: VolumeTensor::new(spec.channels, spec.dims, image)?,
        labels: LabelVolume::new(spec.dims, spec.num_classes, labels)?,
        blobs,
    })
}
