//! Windowed multi-head self-attention with relative position bias and shifted-window masking,
//! and the pre-norm two-layer Swin block built from it.

use std::path::Path;
use std::sync::Arc;

use crate::error::{HrstError, Result};
use crate::tape::{AttnLayout, Mat, Tape, Var, PAD};
use crate::volume_io::{write_raw, RawBlob};
use crate::windowing::{partition_map, reverse_map, shift_map, TokenGrid, WindowSet};

/// Additive logit used for blocked token pairs.
pub const MASK_VALUE: f32 = -1e4;

/// Region id given to padding tokens so they never act as keys for real tokens.
const PAD_REGION: u8 = u8::MAX;

/// Row `i * w³ + j` holds the bias-table row for the 3D offset from token `j` to token `i`.
pub fn relative_position_index(w: usize) -> Vec<u32> {
    let span = 2 * w - 1;
    let coords: Vec<[usize; 3]> = (0..w)
        .flat_map(|a| (0..w).flat_map(move |b| (0..w).map(move |c| [a, b, c])))
        .collect();
    let mut out = Vec::with_capacity(coords.len() * coords.len());
    for ci in &coords {
        for cj in &coords {
            let off: Vec<usize> = (0..3).map(|k| ci[k] + w - 1 - cj[k]).collect();
            out.push(((off[0] * span + off[1]) * span + off[2]) as u32);
        }
    }
    out
}

/// Number of rows in a relative position bias table for window size `w`.
pub fn bias_table_rows(w: usize) -> usize {
    (2 * w - 1).pow(3)
}

/// W-MSA weights for one layer. Projections are `[C, C]` row-major (`out`, `in`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub window: usize,
    pub channels: usize,
    pub q_weight: Vec<f32>,
    pub q_bias: Vec<f32>,
    pub k_weight: Vec<f32>,
    pub k_bias: Vec<f32>,
    pub v_weight: Vec<f32>,
    pub v_bias: Vec<f32>,
    pub o_weight: Vec<f32>,
    pub o_bias: Vec<f32>,
    /// `[(2w - 1)³, heads]`.
    pub bias_table: Vec<f32>,
}

impl AttentionParams {
    pub fn zeros(channels: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(HrstError::Config(format!(
                "{channels} channels are not divisible by {heads} heads"
            )));
        }
        let cc = channels * channels;
        Ok(Self {
            heads,
            window,
            channels,
            q_weight: vec![0.0; cc],
            q_bias: vec![0.0; channels],
            k_weight: vec![0.0; cc],
            k_bias: vec![0.0; channels],
            v_weight: vec![0.0; cc],
            v_bias: vec![0.0; channels],
            o_weight: vec![0.0; cc],
            o_bias: vec![0.0; channels],
            bias_table: vec![0.0; bias_table_rows(window) * heads],
        })
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels;
        let ok = self.heads > 0
            && c.is_multiple_of(self.heads)
            && [
                &self.q_weight,
                &self.k_weight,
                &self.v_weight,
                &self.o_weight,
            ]
            .iter()
            .all(|w| w.len() == c * c)
            && [&self.q_bias, &self.k_bias, &self.v_bias, &self.o_bias]
                .iter()
                .all(|b| b.len() == c)
            && self.bias_table.len() == bias_table_rows(self.window) * self.heads;
        if ok {
            Ok(())
        } else {
            Err(HrstError::Shape(format!(
                "attention parameters inconsistent with C = {c}, heads = {}, window = {}",
                self.heads, self.window
            )))
        }
    }

    pub(crate) fn load(&self, t: &mut Tape) -> AttnVars {
        let c = self.channels;
        let w = |t: &mut Tape, d: &[f32]| t.constant(Mat::from_f32(c, c, d));
        let b = |t: &mut Tape, d: &[f32]| t.constant(Mat::from_f32(1, c, d));
        AttnVars {
            q: (w(t, &self.q_weight), b(t, &self.q_bias)),
            k: (w(t, &self.k_weight), b(t, &self.k_bias)),
            v: (w(t, &self.v_weight), b(t, &self.v_bias)),
            o: (w(t, &self.o_weight), b(t, &self.o_bias)),
            table: t.constant(Mat::from_f32(
                bias_table_rows(self.window),
                self.heads,
                &self.bias_table,
            )),
            heads: self.heads,
        }
    }
}

/// One Swin layer: LN, (S)W-MSA, LN, MLP with hidden width `ratio * C`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1_gamma: Vec<f32>,
    pub norm1_beta: Vec<f32>,
    pub attn: AttentionParams,
    pub norm2_gamma: Vec<f32>,
    pub norm2_beta: Vec<f32>,
    pub mlp: MlpParams,
}

/// `fc1` is `[hidden, C]`, `fc2` is `[C, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub hidden: usize,
    pub fc1_weight: Vec<f32>,
    pub fc1_bias: Vec<f32>,
    pub fc2_weight: Vec<f32>,
    pub fc2_bias: Vec<f32>,
}

impl MlpParams {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            hidden,
            fc1_weight: vec![0.0; hidden * channels],
            fc1_bias: vec![0.0; hidden],
            fc2_weight: vec![0.0; hidden * channels],
            fc2_bias: vec![0.0; channels],
        }
    }

    fn load(&self, t: &mut Tape, channels: usize) -> Result<MlpVars> {
        let h = self.hidden;
        if self.fc1_weight.len() != h * channels
            || self.fc1_bias.len() != h
            || self.fc2_weight.len() != h * channels
            || self.fc2_bias.len() != channels
        {
            return Err(HrstError::Shape(format!(
                "mlp parameters inconsistent with C = {channels}, hidden = {h}"
            )));
        }
        Ok(MlpVars {
            fc1: (
                t.constant(Mat::from_f32(h, channels, &self.fc1_weight)),
                t.constant(Mat::from_f32(1, h, &self.fc1_bias)),
            ),
            fc2: (
                t.constant(Mat::from_f32(channels, h, &self.fc2_weight)),
                t.constant(Mat::from_f32(1, channels, &self.fc2_bias)),
            ),
        })
    }
}

impl BlockParams {
    /// Zero projections, unit LN gains, MLP ratio 4.
    pub fn identity_init(channels: usize, heads: usize, window: usize) -> Result<Self> {
        Ok(Self {
            norm1_gamma: vec![1.0; channels],
            norm1_beta: vec![0.0; channels],
            attn: AttentionParams::zeros(channels, heads, window)?,
            norm2_gamma: vec![1.0; channels],
            norm2_beta: vec![0.0; channels],
            mlp: MlpParams::zeros(channels, 4 * channels),
        })
    }

    fn load(&self, t: &mut Tape) -> Result<LayerVars> {
        let c = self.attn.channels;
        self.attn.validate()?;
        if [
            &self.norm1_gamma,
            &self.norm1_beta,
            &self.norm2_gamma,
            &self.norm2_beta,
        ]
        .iter()
        .any(|v| v.len() != c)
        {
            return Err(HrstError::Shape(format!(
                "layer norm widths must equal C = {c}"
            )));
        }
        let row = |t: &mut Tape, d: &[f32]| t.constant(Mat::from_f32(1, c, d));
        Ok(LayerVars {
            norm1: (row(t, &self.norm1_gamma), row(t, &self.norm1_beta)),
            attn: self.attn.load(t),
            norm2: (row(t, &self.norm2_gamma), row(t, &self.norm2_beta)),
            mlp: self.mlp.load(t, c)?,
        })
    }
}

pub(crate) struct AttnVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
    pub table: Var,
    pub heads: usize,
}

pub(crate) struct MlpVars {
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

pub(crate) struct LayerVars {
    pub norm1: (Var, Var),
    pub attn: AttnVars,
    pub norm2: (Var, Var),
    pub mlp: MlpVars,
}

/// Additive masks for every window of a (possibly shifted) partition: `[windows, w³, w³]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub windows: usize,
    pub tokens: usize,
    pub data: Vec<f32>,
}

impl AttnMask {
    pub fn window(&self, win: usize) -> &[f32] {
        let n = self.tokens * self.tokens;
        &self.data[win * n..(win + 1) * n]
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    fn to_tape(&self) -> Option<Arc<Vec<f64>>> {
        (!self.is_all_zero()).then(|| Arc::new(self.data.iter().map(|&v| v as f64).collect()))
    }
}

/// Region label of every slot of the shifted, padded partition, in window order.
///
/// After rolling by `-shift`, position `p` on an axis holds a token that wrapped around the
/// boundary iff `p >= d - shift`. Tokens share a region iff they agree on wrap status on every
/// axis; padding slots get their own region.
pub fn shifted_region_ids(dims: [usize; 3], w: usize, shift: [usize; 3]) -> Vec<u8> {
    let map = partition_map(dims, w);
    map.iter()
        .map(|&m| {
            if m == PAD {
                return PAD_REGION;
            }
            let m = m as usize;
            let pos = [
                m / (dims[1] * dims[2]),
                (m / dims[2]) % dims[1],
                m % dims[2],
            ];
            (0..3).fold(0u8, |acc, a| {
                let wrapped = shift[a] > 0 && pos[a] >= dims[a] - shift[a].min(dims[a]);
                acc | ((wrapped as u8) << a)
            })
        })
        .collect()
}

/// Masks for a partition of `dims` into windows of `w` after a cyclic shift of `-shift`.
/// Cross-region pairs (including any real/padding pair) get [`MASK_VALUE`].
pub fn compute_attn_mask(dims: [usize; 3], w: usize, shift: [usize; 3]) -> AttnMask {
    let regions = shifted_region_ids(dims, w, shift);
    let t = w * w * w;
    let windows = regions.len() / t;
    let mut data = vec![0.0f32; windows * t * t];
    for win in 0..windows {
        let r = &regions[win * t..(win + 1) * t];
        for i in 0..t {
            for j in 0..t {
                if r[i] != r[j] {
                    data[(win * t + i) * t + j] = MASK_VALUE;
                }
            }
        }
    }
    AttnMask {
        windows,
        tokens: t,
        data,
    }
}

fn layout_for(windows: usize, w: usize, heads: usize, mask: Option<&AttnMask>) -> Arc<AttnLayout> {
    Arc::new(AttnLayout {
        windows,
        tokens: w * w * w,
        heads,
        bias_index: Arc::new(relative_position_index(w)),
        mask: mask.and_then(AttnMask::to_tape),
    })
}

pub(crate) fn attention_on_tape(
    t: &mut Tape,
    x: Var,
    vars: &AttnVars,
    layout: Arc<AttnLayout>,
) -> Var {
    let q = t.linear(x, vars.q.0, Some(vars.q.1));
    let k = t.linear(x, vars.k.0, Some(vars.k.1));
    let v = t.linear(x, vars.v.0, Some(vars.v.1));
    let a = t.window_attention(q, k, v, vars.table, layout);
    t.linear(a, vars.o.0, Some(vars.o.1))
}

fn check_windows(ws: &WindowSet, p: &AttentionParams, mask: Option<&AttnMask>) -> Result<()> {
    p.validate()?;
    if ws.channels() != p.channels {
        return Err(HrstError::Shape(format!(
            "window set has {} channels, attention expects {}",
            ws.channels(),
            p.channels
        )));
    }
    if ws.window() != p.window {
        return Err(HrstError::Shape(format!(
            "window set uses window {}, attention parameters window {}",
            ws.window(),
            p.window
        )));
    }
    if let Some(m) = mask {
        if m.windows != ws.num_windows() || m.tokens != ws.tokens_per_window() {
            return Err(HrstError::Shape(format!(
                "mask covers {} windows of {} tokens, window set has {} of {}",
                m.windows,
                m.tokens,
                ws.num_windows(),
                ws.tokens_per_window()
            )));
        }
    }
    Ok(())
}

/// Per window and head: `softmax(q kᵀ / sqrt(d) + bias + mask) v`, heads concatenated, then the
/// output projection.
pub fn window_attention(
    ws: &WindowSet,
    p: &AttentionParams,
    mask: Option<&AttnMask>,
) -> Result<WindowSet> {
    Ok(window_attention_with_weights(ws, p, mask)?.0)
}

/// Same as [`window_attention`], also returning probabilities `[windows, heads, w³, w³]`.
pub fn window_attention_with_weights(
    ws: &WindowSet,
    p: &AttentionParams,
    mask: Option<&AttnMask>,
) -> Result<(WindowSet, Vec<f32>)> {
    check_windows(ws, p, mask)?;
    let mut t = Tape::new();
    let x = t.constant(ws.to_mat());
    let vars = p.load(&mut t);
    let layout = layout_for(ws.num_windows(), p.window, p.heads, mask);
    let q = t.linear(x, vars.q.0, Some(vars.q.1));
    let k = t.linear(x, vars.k.0, Some(vars.k.1));
    let v = t.linear(x, vars.v.0, Some(vars.v.1));
    let a = t.window_attention(q, k, v, vars.table, layout);
    let out = t.linear(a, vars.o.0, Some(vars.o.1));
    let probs = t
        .attention_probs(a)
        .expect("attention node records probabilities")
        .iter()
        .map(|&v| v as f32)
        .collect();
    Ok((
        WindowSet::from_mat(t.value(out), ws.window(), ws.grid_dims()),
        probs,
    ))
}

/// Writes one window's attention probabilities as an `HRSTVOL` container with
/// `channels = heads` and dims `[1, w³, w³]`.
pub fn write_attention_weights(
    probs: &[f32],
    heads: usize,
    window: usize,
    win: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let t = window.pow(3);
    let n = heads * t * t;
    let slice = probs
        .get(win * n..(win + 1) * n)
        .ok_or_else(|| HrstError::Shape(format!("window {win} out of range")))?;
    let blob = RawBlob::from_f32(heads, [1, t, t], [1.0; 3], slice);
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| HrstError::io(path, e))?;
    write_raw(std::io::BufWriter::new(file), &blob).map_err(|e| HrstError::io(path, e))
}

/// Per-token layer normalization over channels (eps 1e-5) followed by `gamma`, `beta`.
pub fn layer_norm(grid: &TokenGrid, gamma: &[f32], beta: &[f32]) -> Result<TokenGrid> {
    let c = grid.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(HrstError::Shape(format!(
            "layer norm expects {c} gains and shifts"
        )));
    }
    let mut t = Tape::new();
    let x = t.constant(grid.to_mat());
    let g = t.constant(Mat::from_f32(1, c, gamma));
    let b = t.constant(Mat::from_f32(1, c, beta));
    let y = t.layer_norm(x, g, b);
    TokenGrid::from_mat(grid.dims(), t.value(y))
}

pub(crate) fn mlp_on_tape(t: &mut Tape, x: Var, vars: &MlpVars) -> Var {
    let h = t.linear(x, vars.fc1.0, Some(vars.fc1.1));
    let h = t.gelu(h);
    t.linear(h, vars.fc2.0, Some(vars.fc2.1))
}

/// Token-wise `fc2(gelu(fc1(x)))`.
pub fn mlp(grid: &TokenGrid, params: &MlpParams) -> Result<TokenGrid> {
    let mut t = Tape::new();
    let x = t.constant(grid.to_mat());
    let vars = params.load(&mut t, grid.channels())?;
    let y = mlp_on_tape(&mut t, x, &vars);
    TokenGrid::from_mat(grid.dims(), t.value(y))
}

/// Shift actually applied on each axis: zero where the grid fits inside one window.
pub fn effective_shift(dims: [usize; 3], w: usize, shift: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| if dims[a] <= w { 0 } else { shift[a] % w })
}

/// One pre-norm Swin layer on a token-major grid:
/// `x + attn(LN(x))`, then `y + MLP(LN(y))`. With a nonzero shift the attention is computed on
/// the grid rolled by `-shift` under the region mask, then rolled back.
pub(crate) fn swin_layer_on_tape(
    t: &mut Tape,
    x: Var,
    dims: [usize; 3],
    w: usize,
    shift: [usize; 3],
    vars: &LayerVars,
) -> Var {
    let shift = effective_shift(dims, w, shift);
    let part = partition_map(dims, w);
    let rev = reverse_map(dims, w);
    let (fwd_map, back_map) = if shift == [0; 3] {
        (part, rev)
    } else {
        let neg = shift_map(dims, shift.map(|s| -(s as i64)));
        let pos = shift_map(dims, shift.map(|s| s as i64));
        let fwd = part
            .iter()
            .map(|&m| if m == PAD { PAD } else { neg[m as usize] })
            .collect();
        let back = pos.iter().map(|&q| rev[q as usize]).collect();
        (fwd, back)
    };
    let windows = fwd_map.len() / (w * w * w);
    let mask = compute_attn_mask(dims, w, shift);
    let layout = layout_for(windows, w, vars.attn.heads, Some(&mask));

    let h = t.layer_norm(x, vars.norm1.0, vars.norm1.1);
    let win = t.gather_rows(h, Arc::new(fwd_map), 1);
    let a = attention_on_tape(t, win, &vars.attn, layout);
    let a = t.gather_rows(a, Arc::new(back_map), 1);
    let x = t.add(x, a);
    let h = t.layer_norm(x, vars.norm2.0, vars.norm2.1);
    let m = mlp_on_tape(t, h, &vars.mlp);
    t.add(x, m)
}

/// W-MSA layer followed by an SW-MSA layer shifted by `shift`; output shape equals input shape.
pub fn swin_block_pair(
    grid: &TokenGrid,
    params: &[BlockParams; 2],
    w: usize,
    shift: [usize; 3],
) -> Result<TokenGrid> {
    if w == 0 {
        return Err(HrstError::Config("window size must be >= 1".into()));
    }
    for p in params {
        if p.attn.channels != grid.channels() || p.attn.window != w {
            return Err(HrstError::Shape(format!(
                "block expects C = {}, window {}; grid has C = {}, window {w}",
                p.attn.channels,
                p.attn.window,
                grid.channels()
            )));
        }
    }
    let mut t = Tape::new();
    let x = t.constant(grid.to_mat());
    let l0 = params[0].load(&mut t)?;
    let l1 = params[1].load(&mut t)?;
    let y = swin_layer_on_tape(&mut t, x, grid.dims(), w, [0; 3], &l0);
    let y = swin_layer_on_tape(&mut t, y, grid.dims(), w, shift, &l1);
    TokenGrid::from_mat(grid.dims(), t.value(y))
}
