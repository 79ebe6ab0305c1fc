use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabelVolume, VolumeTensor};
use crate::error::{HrstError, Result};

/// Per-channel z-score over the nonzero voxels. Zero voxels stay zero; channels that are
/// all zero or have a constant nonzero set pass through unchanged.
pub fn normalize(vol: &VolumeTensor) -> VolumeTensor {
    let n = vol.voxels();
    let mut out = vol.data().to_vec();
    for c in 0..vol.channels() {
        let chan = &mut out[c * n..(c + 1) * n];
        let (count, sum) = chan
            .iter()
            .filter(|&&v| v != 0.0)
            .fold((0usize, 0.0f64), |(k, s), &v| (k + 1, s + v as f64));
        if count == 0 {
            continue;
        }
        let mean = sum / count as f64;
        let var = chan
            .iter()
            .filter(|&&v| v != 0.0)
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        let std = var.sqrt();
        if std <= f64::EPSILON * mean.abs().max(1.0) {
            continue;
        }
        for v in chan.iter_mut().filter(|v| **v != 0.0) {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
    VolumeTensor::with_spacing(vol.channels(), vol.dims(), vol.spacing(), out)
        .expect("normalization preserves finiteness and shape")
}

/// Seeded offset, uniform over every valid placement of a `size` block inside `dims`.
pub fn crop_offset(dims: [usize; 3], size: [usize; 3], seed: u64) -> Result<[usize; 3]> {
    for axis in 0..3 {
        if size[axis] == 0 || size[axis] > dims[axis] {
            return Err(HrstError::Crop(format!(
                "crop {size:?} does not fit inside volume {dims:?}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offset = [0usize; 3];
    for axis in 0..3 {
        offset[axis] = rng.random_range(0..=dims[axis] - size[axis]);
    }
    Ok(offset)
}

/// Copies the `size` block at `offset` out of the image and label volumes.
pub fn crop_at(
    vol: &VolumeTensor,
    labels: &LabelVolume,
    offset: [usize; 3],
    size: [usize; 3],
) -> Result<(VolumeTensor, LabelVolume)> {
    if vol.dims() != labels.dims() {
        return Err(HrstError::Shape(format!(
            "image dims {:?} and label dims {:?} differ",
            vol.dims(),
            labels.dims()
        )));
    }
    let dims = vol.dims();
    for axis in 0..3 {
        if offset[axis] + size[axis] > dims[axis] {
            return Err(HrstError::Crop(format!(
                "crop {size:?} at {offset:?} exceeds volume {dims:?}"
            )));
        }
    }
    let [sd, sh, sw] = size;
    let mut img = Vec::with_capacity(vol.channels() * sd * sh * sw);
    for c in 0..vol.channels() {
        for z in 0..sd {
            for y in 0..sh {
                let start = vol.index(c, offset[0] + z, offset[1] + y, offset[2]);
                img.extend_from_slice(&vol.data()[start..start + sw]);
            }
        }
    }
    let mut lab = Vec::with_capacity(sd * sh * sw);
    let [_, h, w] = dims;
    for z in 0..sd {
        for y in 0..sh {
            let start = ((offset[0] + z) * h + offset[1] + y) * w + offset[2];
            lab.extend_from_slice(&labels.data()[start..start + sw]);
        }
    }
    Ok((
        VolumeTensor::with_spacing(vol.channels(), size, vol.spacing(), img)?,
        LabelVolume::new(size, labels.num_classes(), lab)?.with_spacing(labels.spacing())?,
    ))
}

/// Aligned random crop of image and labels. No implicit padding: `size` must fit.
pub fn random_crop(
    vol: &VolumeTensor,
    labels: &LabelVolume,
    size: [usize; 3],
    seed: u64,
) -> Result<(VolumeTensor, LabelVolume)> {
    let offset = crop_offset(vol.dims(), size, seed)?;
    crop_at(vol, labels, offset, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zscore_of_two_values() {
        let v = VolumeTensor::new(1, [1, 1, 3], vec![2.0, 0.0, 4.0]).unwrap();
        let n = normalize(&v);
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_channel_untouched() {
        let v = VolumeTensor::new(2, [1, 1, 2], vec![0.0, 0.0, 3.0, 5.0]).unwrap();
        let n = normalize(&v);
        assert_eq!(n.channel(0), &[0.0, 0.0]);
        assert_eq!(n.channel(1), &[-1.0, 1.0]);
    }

    #[test]
    fn crop_identity_and_errors() {
        let v = VolumeTensor::new(1, [2, 2, 2], (1..=8).map(|i| i as f32).collect()).unwrap();
        let l = LabelVolume::new([2, 2, 2], 2, vec![0, 1, 0, 1, 1, 0, 1, 0]).unwrap();
        let (cv, cl) = random_crop(&v, &l, [2, 2, 2], 99).unwrap();
        assert_eq!(cv, v);
        assert_eq!(cl, l);
        assert!(matches!(
            random_crop(&v, &l, [3, 2, 2], 0),
            Err(HrstError::Crop(_))
        ));
    }

    #[test]
    fn crop_offset_reproducible() {
        let a = crop_offset([8, 8, 8], [4, 4, 4], 1234).unwrap();
        let b = crop_offset([8, 8, 8], [4, 4, 4], 1234).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&o| o <= 4));
        assert!(crop_offset([128; 3], [129; 3], 0).is_err());
    }

    #[test]
    fn crop_offsets_cover_all_positions() {
        let mut seen = [false; 3];
        for seed in 0..200 {
            let o = crop_offset([4, 1, 1], [2, 1, 1], seed).unwrap();
            seen[o[0]] = true;
        }
        assert_eq!(seen, [true; 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn normalize_idempotent_and_keeps_zero_mask(
            vals in proptest::collection::vec(prop_oneof![Just(0.0f32), -50.0f32..50.0], 2..60),
        ) {
            let n = vals.len();
            let v = VolumeTensor::new(1, [1, 1, n], vals.clone()).unwrap();
            let once = normalize(&v);
            let twice = normalize(&once);
            for i in 0..n {
                prop_assert_eq!(vals[i] == 0.0, once.data()[i] == 0.0);
                prop_assert!((once.data()[i] - twice.data()[i]).abs() < 1e-5 * once.data()[i].abs().max(1.0));
            }
        }

        #[test]
        fn crop_equals_direct_slice(
            d in 1usize..7, h in 1usize..7, w in 1usize..7, seed in any::<u64>(),
            fz in 0.0f64..1.0, fy in 0.0f64..1.0, fx in 0.0f64..1.0,
        ) {
            let size = [
                1 + ((d - 1) as f64 * fz) as usize,
                1 + ((h - 1) as f64 * fy) as usize,
                1 + ((w - 1) as f64 * fx) as usize,
            ];
            let n = 2 * d * h * w;
            let v = VolumeTensor::new(2, [d, h, w], (0..n).map(|i| i as f32).collect()).unwrap();
            let l = LabelVolume::new([d, h, w], 1000, (0..(d*h*w) as u32).map(|i| i % 1000).collect()).unwrap();
            let off = crop_offset([d, h, w], size, seed).unwrap();
            let (cv, cl) = random_crop(&v, &l, size, seed).unwrap();
            for c in 0..2 {
                for z in 0..size[0] {
                    for y in 0..size[1] {
                        for x in 0..size[2] {
                            prop_assert_eq!(cv.get(c, z, y, x), v.get(c, off[0] + z, off[1] + y, off[2] + x));
                            prop_assert_eq!(cl.get(z, y, x), l.get(off[0] + z, off[1] + y, off[2] + x));
                        }
                    }
                }
            }
        }
    }
}
