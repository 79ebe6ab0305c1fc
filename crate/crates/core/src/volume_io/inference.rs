use super::VolumeTensor;
use crate::error::{HrstError, Result};

/// Anything that maps an image tile to a logits tile of the same spatial extent.
pub trait VolumeModel {
    fn num_classes(&self) -> usize;

    /// Rejects tile sizes the model cannot process.
    fn check_roi(&self, _roi: [usize; 3]) -> Result<()> {
        Ok(())
    }

    fn predict(&self, tile: &VolumeTensor) -> Result<VolumeTensor>;
}

/// Tile origins along one axis: stride `floor(roi * (1 - overlap))` (at least 1), with the
/// last tile flush against the far edge.
pub fn tile_starts(len: usize, roi: usize, overlap: f64) -> Result<Vec<usize>> {
    if roi == 0 || roi > len {
        return Err(HrstError::Config(format!(
            "roi extent {roi} must be in 1..={len} (volume extent)"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(HrstError::Config(format!(
            "overlap {overlap} must be in [0, 1)"
        )));
    }
    let step = ((roi as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts = Vec::new();
    let mut pos = 0;
    loop {
        if pos + roi >= len {
            starts.push(len - roi);
            break;
        }
        starts.push(pos);
        pos += step;
    }
    starts.dedup();
    Ok(starts)
}

fn extract_tile(vol: &VolumeTensor, origin: [usize; 3], roi: [usize; 3]) -> Result<VolumeTensor> {
    let [rd, rh, rw] = roi;
    let mut data = Vec::with_capacity(vol.channels() * rd * rh * rw);
    for c in 0..vol.channels() {
        for z in 0..rd {
            for y in 0..rh {
                let start = vol.index(c, origin[0] + z, origin[1] + y, origin[2]);
                data.extend_from_slice(&vol.data()[start..start + rw]);
            }
        }
    }
    VolumeTensor::with_spacing(vol.channels(), roi, vol.spacing(), data)
}

/// Tiled inference: overlapping tile logits are averaged with uniform weights.
pub fn sliding_window_infer<M: VolumeModel + ?Sized>(
    model: &M,
    vol: &VolumeTensor,
    roi: [usize; 3],
    overlap: f64,
) -> Result<VolumeTensor> {
    model.check_roi(roi)?;
    let dims = vol.dims();
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| tile_starts(dims[a], roi[a], overlap))
        .collect::<Result<_>>()?;
    let classes = model.num_classes();
    let n = vol.voxels();
    let mut acc = vec![0.0f64; classes * n];
    let mut hits = vec![0u32; n];
    let [_, h, w] = dims;

    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let tile = extract_tile(vol, [z0, y0, x0], roi)?;
                let out = model.predict(&tile)?;
                if out.dims() != roi || out.channels() != classes {
                    return Err(HrstError::Shape(format!(
                        "model returned {}x{:?} for a {classes}x{roi:?} tile",
                        out.channels(),
                        out.dims()
                    )));
                }
                let tn = roi.iter().product::<usize>();
                for z in 0..roi[0] {
                    for y in 0..roi[1] {
                        for x in 0..roi[2] {
                            let t = (z * roi[1] + y) * roi[2] + x;
                            let v = ((z0 + z) * h + y0 + y) * w + x0 + x;
                            hits[v] += 1;
                            for c in 0..classes {
                                acc[c * n + v] += out.data()[c * tn + t] as f64;
                            }
                        }
                    }
                }
            }
        }
    }

    let data = (0..classes * n)
        .map(|i| (acc[i] / hits[i % n] as f64) as f32)
        .collect();
    VolumeTensor::with_spacing(classes, dims, vol.spacing(), data)
}
