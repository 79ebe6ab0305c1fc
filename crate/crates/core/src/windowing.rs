//! Token-grid mechanics: patch embedding, window partition/reverse, cyclic shift, patch merging
//! and patch expanding.
//!
//! Grids are token-major: token `(z, y, x)` occupies row `(z * h + y) * w + x`, channels are
//! contiguous within a row. All rearrangements are expressed as row-gather maps so the network
//! and the standalone functions here share one implementation.

use std::sync::Arc;

use crate::error::{HrstError, Result};
use crate::tape::{Mat, Tape, PAD};
use crate::volume_io::VolumeTensor;

/// Spatial grid of embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    dims: [usize; 3],
    channels: usize,
    data: Vec<f32>,
}

impl TokenGrid {
    pub fn new(dims: [usize; 3], channels: usize, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) || channels == 0 {
            return Err(HrstError::Dimension(format!(
                "token grid needs positive dims and channels, got {dims:?} x {channels}"
            )));
        }
        if data.len() != dims.iter().product::<usize>() * channels {
            return Err(HrstError::Shape(format!(
                "token grid data length {} does not match {dims:?} x {channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(HrstError::InvalidValue(
                "token grid contains non-finite values".into(),
            ));
        }
        Ok(Self {
            dims,
            channels,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], channels: usize) -> Result<Self> {
        Self::new(
            dims,
            channels,
            vec![0.0; dims.iter().product::<usize>() * channels],
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Token count `S = d * h * w`.
    pub fn tokens(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token(&self, z: usize, y: usize, x: usize) -> &[f32] {
        let i = token_index(self.dims, z, y, x);
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub(crate) fn to_mat(&self) -> Mat {
        Mat::from_f32(self.tokens(), self.channels, &self.data)
    }

    pub(crate) fn from_mat(dims: [usize; 3], m: &Mat) -> Result<Self> {
        Self::new(dims, m.cols, m.to_f32())
    }
}

pub(crate) fn token_index(dims: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

fn ceil_to(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub patch: usize,
    pub embed_dim: usize,
    pub in_channels: usize,
}

/// Patch-embedding weights: `weight` is `[embed_dim, in_channels * patch³]` (a conv kernel
/// flattened channel-major, then depth, height, width), `bias` is `[embed_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Rows are the non-overlapping `patch³` blocks of `vol`, flattened in kernel order.
/// Trailing voxels that do not fill a whole patch are dropped.
pub(crate) fn patchify(vol: &VolumeTensor, patch: usize) -> Result<([usize; 3], Mat)> {
    let d = vol.dims();
    let out = [d[0] / patch, d[1] / patch, d[2] / patch];
    if patch == 0 || out.contains(&0) {
        return Err(HrstError::Dimension(format!(
            "input {d:?} is smaller than one {patch}³ patch"
        )));
    }
    let k = vol.channels();
    let width = k * patch * patch * patch;
    let mut data = Vec::with_capacity(out.iter().product::<usize>() * width);
    for z in 0..out[0] {
        for y in 0..out[1] {
            for x in 0..out[2] {
                for c in 0..k {
                    for pz in 0..patch {
                        for py in 0..patch {
                            let start = vol.index(c, z * patch + pz, y * patch + py, x * patch);
                            data.extend(vol.data()[start..start + patch].iter().map(|&v| v as f64));
                        }
                    }
                }
            }
        }
    }
    Ok((out, Mat::new(out.iter().product(), width, data)))
}

/// Conv with kernel = stride = patch: each token is an affine map of exactly one patch.
pub fn patch_embed(
    vol: &VolumeTensor,
    cfg: &PatchEmbedConfig,
    params: &EmbedParams,
) -> Result<TokenGrid> {
    if vol.channels() != cfg.in_channels {
        return Err(HrstError::Shape(format!(
            "volume has {} channels, embedding expects {}",
            vol.channels(),
            cfg.in_channels
        )));
    }
    let width = cfg.in_channels * cfg.patch.pow(3);
    if params.weight.len() != cfg.embed_dim * width || params.bias.len() != cfg.embed_dim {
        return Err(HrstError::Shape(
            "embedding parameter sizes do not match config".into(),
        ));
    }
    let (dims, patches) = patchify(vol, cfg.patch)?;
    let mut t = Tape::new();
    let x = t.constant(patches);
    let w = t.constant(Mat::from_f32(cfg.embed_dim, width, &params.weight));
    let b = t.constant(Mat::from_f32(1, cfg.embed_dim, &params.bias));
    let y = t.linear(x, w, Some(b));
    TokenGrid::from_mat(dims, t.value(y))
}

/// Tokens grouped per window: `[num_windows, window³, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    data: Vec<f32>,
    window: usize,
    channels: usize,
    grid_dims: [usize; 3],
}

impl WindowSet {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Dims of the unpadded source grid.
    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    pub fn padded_dims(&self) -> [usize; 3] {
        self.grid_dims.map(|d| ceil_to(d, self.window))
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.pow(3)
    }

    pub fn num_windows(&self) -> usize {
        self.padded_dims().iter().map(|d| d / self.window).product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn window_tokens(&self, win: usize) -> &[f32] {
        let n = self.tokens_per_window() * self.channels;
        &self.data[win * n..(win + 1) * n]
    }

    pub(crate) fn to_mat(&self) -> Mat {
        Mat::from_f32(self.data.len() / self.channels, self.channels, &self.data)
    }

    pub(crate) fn from_mat(m: &Mat, window: usize, grid_dims: [usize; 3]) -> Self {
        Self {
            data: m.to_f32(),
            window,
            channels: m.cols,
            grid_dims,
        }
    }

    pub fn new(
        data: Vec<f32>,
        window: usize,
        channels: usize,
        grid_dims: [usize; 3],
    ) -> Result<Self> {
        let ws = Self {
            data,
            window,
            channels,
            grid_dims,
        };
        if window == 0 || channels == 0 {
            return Err(HrstError::Config(
                "window size and channels must be >= 1".into(),
            ));
        }
        if ws.data.len() != ws.num_windows() * ws.tokens_per_window() * channels {
            return Err(HrstError::Shape(format!(
                "window set holds {} values, metadata implies {}",
                ws.data.len(),
                ws.num_windows() * ws.tokens_per_window() * channels
            )));
        }
        Ok(ws)
    }
}

/// Row map from window order to grid rows; out-of-grid (padding) slots are `PAD`.
pub fn partition_map(dims: [usize; 3], w: usize) -> Vec<u32> {
    let padded = dims.map(|d| ceil_to(d, w));
    let nw = padded.map(|d| d / w);
    let mut map = Vec::with_capacity(padded.iter().product());
    for wz in 0..nw[0] {
        for wy in 0..nw[1] {
            for wx in 0..nw[2] {
                for a in 0..w {
                    for b in 0..w {
                        for c in 0..w {
                            let (z, y, x) = (wz * w + a, wy * w + b, wx * w + c);
                            map.push(if z < dims[0] && y < dims[1] && x < dims[2] {
                                token_index(dims, z, y, x) as u32
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
    }
    map
}

/// Row map from grid order back into window order (inverse of [`partition_map`]).
pub fn reverse_map(dims: [usize; 3], w: usize) -> Vec<u32> {
    let padded = dims.map(|d| ceil_to(d, w));
    let nw = [padded[1] / w, padded[2] / w];
    let t = w * w * w;
    let mut map = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let win = ((z / w) * nw[0] + y / w) * nw[1] + x / w;
                let inner = ((z % w) * w + y % w) * w + x % w;
                map.push((win * t + inner) as u32);
            }
        }
    }
    map
}

/// Row map realising a torus roll: `out[p] = in[(p - shift) mod dims]`.
pub fn shift_map(dims: [usize; 3], shift: [i64; 3]) -> Vec<u32> {
    let mut map = Vec::with_capacity(dims.iter().product());
    let src = |p: usize, axis: usize| -> usize {
        let d = dims[axis] as i64;
        (p as i64 - shift[axis]).rem_euclid(d) as usize
    };
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                map.push(token_index(dims, src(z, 0), src(y, 1), src(x, 2)) as u32);
            }
        }
    }
    map
}

pub fn merged_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|d| d.div_ceil(2))
}

/// Groups of 8 rows (children in lexicographic `(dz, dy, dx)` order) per merged token.
/// Odd extents are zero-padded.
pub fn merge_map(dims: [usize; 3]) -> Vec<u32> {
    let out = merged_dims(dims);
    let mut map = Vec::with_capacity(out.iter().product::<usize>() * 8);
    for z in 0..out[0] {
        for y in 0..out[1] {
            for x in 0..out[2] {
                for a in 0..2 {
                    for b in 0..2 {
                        for c in 0..2 {
                            let (zz, yy, xx) = (2 * z + a, 2 * y + b, 2 * x + c);
                            map.push(if zz < dims[0] && yy < dims[1] && xx < dims[2] {
                                token_index(dims, zz, yy, xx) as u32
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
    }
    map
}

/// After an expand projection reshaped to `[8 * S, C/2]`, places child `(a, b, c)` of token
/// `(z, y, x)` at `(2z + a, 2y + b, 2x + c)`.
pub fn expand_map(dims: [usize; 3]) -> Vec<u32> {
    let out = dims.map(|d| 2 * d);
    let mut map = Vec::with_capacity(out.iter().product());
    for z in 0..out[0] {
        for y in 0..out[1] {
            for x in 0..out[2] {
                let parent = token_index(dims, z / 2, y / 2, x / 2);
                let child = ((z % 2) * 2 + y % 2) * 2 + x % 2;
                map.push((parent * 8 + child) as u32);
            }
        }
    }
    map
}

/// Groups of 27 rows: the `3³` zero-padded neighbourhood of each token, offsets in
/// lexicographic `(dz, dy, dx)` order from `-1` to `+1`.
pub fn neighborhood_map(dims: [usize; 3]) -> Vec<u32> {
    let mut map = Vec::with_capacity(dims.iter().product::<usize>() * 27);
    for z in 0..dims[0] as i64 {
        for y in 0..dims[1] as i64 {
            for x in 0..dims[2] as i64 {
                for dz in -1..=1i64 {
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            let (zz, yy, xx) = (z + dz, y + dy, x + dx);
                            let inside = (0..dims[0] as i64).contains(&zz)
                                && (0..dims[1] as i64).contains(&yy)
                                && (0..dims[2] as i64).contains(&xx);
                            map.push(if inside {
                                token_index(dims, zz as usize, yy as usize, xx as usize) as u32
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
    }
    map
}

pub fn window_partition(grid: &TokenGrid, w: usize) -> Result<WindowSet> {
    if w == 0 {
        return Err(HrstError::Config("window size must be >= 1".into()));
    }
    let mut t = Tape::new();
    let x = t.constant(grid.to_mat());
    let y = t.gather_rows(x, Arc::new(partition_map(grid.dims, w)), 1);
    Ok(WindowSet::from_mat(t.value(y), w, grid.dims))
}

pub fn window_reverse(ws: &WindowSet) -> Result<TokenGrid> {
    let expected = ws.num_windows() * ws.tokens_per_window() * ws.channels;
    if ws.window == 0 || ws.grid_dims.contains(&0) || ws.data.len() != expected {
        return Err(HrstError::Shape(format!(
            "window set metadata (window {}, grid {:?}, {} channels) does not match {} values",
            ws.window,
            ws.grid_dims,
            ws.channels,
            ws.data.len()
        )));
    }
    let mut t = Tape::new();
    let x = t.constant(ws.to_mat());
    let y = t.gather_rows(x, Arc::new(reverse_map(ws.grid_dims, ws.window)), 1);
    TokenGrid::from_mat(ws.grid_dims, t.value(y))
}

/// Torus roll by `shift` per axis (positive moves tokens toward higher indices).
pub fn cyclic_shift(grid: &TokenGrid, shift: [i64; 3]) -> TokenGrid {
    let map = shift_map(grid.dims, shift);
    let c = grid.channels;
    let mut data = Vec::with_capacity(grid.data.len());
    for &m in &map {
        let m = m as usize;
        data.extend_from_slice(&grid.data[m * c..(m + 1) * c]);
    }
    TokenGrid {
        dims: grid.dims,
        channels: c,
        data,
    }
}

/// Halves every extent and doubles channels: `weight` is `[2C, 8C]`.
pub fn patch_merge(grid: &TokenGrid, weight: &[f32]) -> Result<TokenGrid> {
    let c = grid.channels;
    if weight.len() != 16 * c * c {
        return Err(HrstError::Shape(format!(
            "merge weight has {} values, expected [{}, {}]",
            weight.len(),
            2 * c,
            8 * c
        )));
    }
    let mut t = Tape::new();
    let x = t.constant(grid.to_mat());
    let w = t.constant(Mat::from_f32(2 * c, 8 * c, weight));
    let y = merge_on_tape(&mut t, x, grid.dims, w);
    TokenGrid::from_mat(merged_dims(grid.dims), t.value(y))
}

/// Doubles every extent and halves channels: `weight` is `[4C, C]`.
pub fn patch_expand(grid: &TokenGrid, weight: &[f32]) -> Result<TokenGrid> {
    let c = grid.channels;
    if !c.is_multiple_of(2) {
        return Err(HrstError::Config(format!(
            "patch expanding needs an even channel count, got {c}"
        )));
    }
    if weight.len() != 4 * c * c {
        return Err(HrstError::Shape(format!(
            "expand weight has {} values, expected [{}, {c}]",
            weight.len(),
            4 * c
        )));
    }
    let mut t = Tape::new();
    let x = t.constant(grid.to_mat());
    let w = t.constant(Mat::from_f32(4 * c, c, weight));
    let y = expand_on_tape(&mut t, x, grid.dims, w);
    TokenGrid::from_mat(grid.dims.map(|d| 2 * d), t.value(y))
}

pub(crate) fn merge_on_tape(
    t: &mut Tape,
    x: crate::tape::Var,
    dims: [usize; 3],
    w: crate::tape::Var,
) -> crate::tape::Var {
    let g = t.gather_rows(x, Arc::new(merge_map(dims)), 8);
    t.linear(g, w, None)
}

pub(crate) fn expand_on_tape(
    t: &mut Tape,
    x: crate::tape::Var,
    dims: [usize; 3],
    w: crate::tape::Var,
) -> crate::tape::Var {
    let c = t.value(x).cols;
    let y = t.linear(x, w, None);
    let r = t.reshape(y, c / 2);
    t.gather_rows(r, Arc::new(expand_map(dims)), 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_grid(dims: [usize; 3], c: usize) -> TokenGrid {
        let n = dims.iter().product::<usize>() * c;
        TokenGrid::new(dims, c, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn embed_grid_sizes() {
        let vol = VolumeTensor::zeros(1, [6, 8, 9]).unwrap();
        let (dims, m) = patchify(&vol, 4).unwrap();
        assert_eq!(dims, [1, 2, 2]);
        assert_eq!(m.cols, 64);
        assert!(patchify(&VolumeTensor::zeros(1, [3, 8, 8]).unwrap(), 4).is_err());
        // S for a 128³ input at P = 4.
        assert_eq!((128 / 4usize).pow(3), 32768);
    }

    #[test]
    fn identity_embedding_p1() {
        let vol = VolumeTensor::new(2, [1, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let cfg = PatchEmbedConfig {
            patch: 1,
            embed_dim: 2,
            in_channels: 2,
        };
        let p = EmbedParams {
            weight: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
        };
        let g = patch_embed(&vol, &cfg, &p).unwrap();
        for (i, (z, y, x)) in [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)]
            .into_iter()
            .enumerate()
        {
            assert_eq!(g.token(z, y, x), &[i as f32, 4.0 + i as f32]);
        }
    }

    #[test]
    fn embed_locality() {
        let n = 8 * 8 * 8;
        let base: Vec<f32> = (0..n).map(|i| ((i * 37) % 11) as f32 * 0.1).collect();
        let cfg = PatchEmbedConfig {
            patch: 4,
            embed_dim: 3,
            in_channels: 1,
        };
        let p = EmbedParams {
            weight: (0..3 * 64).map(|i| ((i * 13) % 7) as f32 * 0.01).collect(),
            bias: vec![0.1, 0.2, 0.3],
        };
        let g0 = patch_embed(
            &VolumeTensor::new(1, [8; 3], base.clone()).unwrap(),
            &cfg,
            &p,
        )
        .unwrap();
        let mut pert = base;
        pert[(5 * 8 + 6) * 8 + 1] += 3.0; // voxel (5, 6, 1) lives in patch (1, 1, 0)
        let g1 = patch_embed(&VolumeTensor::new(1, [8; 3], pert).unwrap(), &cfg, &p).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let same = g0.token(z, y, x) == g1.token(z, y, x);
                    assert_eq!(same, (z, y, x) != (1, 1, 0));
                }
            }
        }
    }

    #[test]
    fn partition_counts() {
        let g = ramp_grid([4, 4, 4], 1);
        let ws = window_partition(&g, 4).unwrap();
        assert_eq!((ws.num_windows(), ws.tokens_per_window()), (1, 64));
        let ws = window_partition(&g, 2).unwrap();
        assert_eq!((ws.num_windows(), ws.tokens_per_window()), (8, 8));
        // window 1 = coordinates (0, 0, 1): tokens x in {2, 3}
        assert_eq!(ws.window_tokens(1)[0], token_index([4; 3], 0, 0, 2) as f32);
        assert!(window_partition(&g, 0).is_err());
    }

    #[test]
    fn padded_partition_round_trip() {
        let g = ramp_grid([3, 3, 3], 2);
        let ws = window_partition(&g, 2).unwrap();
        assert_eq!(ws.padded_dims(), [4, 4, 4]);
        assert_eq!(ws.num_windows(), 8);
        let pads = ws.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(pads, (64 - 27) * 2 + 1); // padding plus the genuine zero at token 0
        assert_eq!(window_reverse(&ws).unwrap(), g);
    }

    #[test]
    fn single_token_round_trip() {
        let g = ramp_grid([1, 1, 1], 3);
        assert_eq!(
            window_reverse(&window_partition(&g, 3).unwrap()).unwrap(),
            g
        );
    }

    #[test]
    fn reverse_rejects_bad_metadata() {
        let ws = WindowSet {
            data: vec![0.0; 7],
            window: 2,
            channels: 1,
            grid_dims: [2, 2, 2],
        };
        assert!(matches!(window_reverse(&ws), Err(HrstError::Shape(_))));
    }

    #[test]
    fn roll_by_one() {
        let g = TokenGrid::new([1, 1, 4], 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cyclic_shift(&g, [0, 0, 1]).data(), &[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(cyclic_shift(&g, [0, 0, 0]), g);
        assert_eq!(cyclic_shift(&g, [1, 1, 4]), g);
    }

    #[test]
    fn merge_shapes_and_values() {
        let g = ramp_grid([8, 8, 8], 3);
        let m = patch_merge(&g, &vec![0.01; 6 * 24]).unwrap();
        assert_eq!((m.dims(), m.channels()), ([4, 4, 4], 6));

        let g = ramp_grid([2, 2, 2], 2);
        let zero = patch_merge(&g, &[0.0; 64]).unwrap();
        assert_eq!((zero.dims(), zero.data()), ([1, 1, 1], &[0.0f32; 4][..]));

        // Select child 0 (the (0,0,0) corner) into output channels 0..2.
        let mut w = vec![0.0f32; 4 * 16];
        w[0] = 1.0;
        w[16 + 1] = 1.0;
        let corner = patch_merge(&g, &w).unwrap();
        assert_eq!(corner.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn merge_pads_odd_extents() {
        let g = ramp_grid([3, 2, 1], 1);
        let m = patch_merge(&g, &[1.0; 2 * 8]).unwrap();
        assert_eq!(m.dims(), [2, 1, 1]);
        // second output token sums tokens at z = 2 only: indices 4, 5
        assert_eq!(m.token(1, 0, 0), &[9.0, 9.0]);
    }

    #[test]
    fn expand_identity_block_rearrangement() {
        let g = TokenGrid::new([1, 1, 1], 8, (1..=8).map(|i| i as f32).collect()).unwrap();
        // [32, 8]: rows 0..8 pick input channels, rows 8..32 zero.
        let mut w = vec![0.0f32; 32 * 8];
        for i in 0..8 {
            w[i * 8 + i] = 1.0;
        }
        let e = patch_expand(&g, &w).unwrap();
        assert_eq!((e.dims(), e.channels()), ([2, 2, 2], 4));
        assert_eq!(e.token(0, 0, 0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.token(0, 0, 1), &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(e.token(1, 1, 1), &[0.0; 4]);
        assert!(patch_expand(&TokenGrid::zeros([1, 1, 1], 3).unwrap(), &[0.0; 36]).is_err());
    }

    #[test]
    fn expand_then_merge_restores_shape() {
        let g = ramp_grid([4, 4, 4], 4);
        let e = patch_expand(&g, &vec![0.1; 64]).unwrap();
        assert_eq!((e.dims(), e.channels()), ([8, 8, 8], 2));
        let m = patch_merge(&e, &vec![0.1; 64]).unwrap();
        assert_eq!((m.dims(), m.channels()), (g.dims(), g.channels()));
    }

    #[test]
    fn neighborhood_center_is_self() {
        let dims = [2, 3, 2];
        let map = neighborhood_map(dims);
        for i in 0..12 {
            assert_eq!(map[i * 27 + 13], i as u32);
        }
        assert_eq!(map[0], PAD);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn partition_reverse_bijection(d in 1usize..10, h in 1usize..10, w in 1usize..10, win in 1usize..5, c in 1usize..3) {
            let g = ramp_grid([d, h, w], c);
            let ws = window_partition(&g, win).unwrap();
            let mut seen: Vec<f32> = ws.data().iter().copied().filter(|&v| v != 0.0).collect();
            seen.sort_by(f32::total_cmp);
            let mut all: Vec<f32> = g.data().iter().copied().filter(|&v| v != 0.0).collect();
            all.sort_by(f32::total_cmp);
            prop_assert_eq!(seen, all);
            prop_assert_eq!(window_reverse(&ws).unwrap(), g);
        }

        #[test]
        fn shift_inverse(d in 1usize..10, h in 1usize..10, w in 1usize..10, s in proptest::array::uniform3(-20i64..20)) {
            let g = ramp_grid([d, h, w], 2);
            let back = cyclic_shift(&cyclic_shift(&g, s), s.map(|v| -v));
            prop_assert_eq!(back, g);
        }
    }
}
