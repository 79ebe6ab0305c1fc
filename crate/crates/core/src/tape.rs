//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every network computation is recorded as a sequence of nodes on a [`Tape`]. Tokens are rows,
//! channels are columns. Spatial rearrangements (shift, window partition, patch gather, padding)
//! are all expressed as row gathers through precomputed index maps, so the only arithmetic
//! kernels are linear maps, normalizations, pointwise activations, windowed attention and the
//! segmentation loss.

use std::sync::Arc;

/// Marks a gathered row that reads as zeros (padding).
pub const PAD: u32 = u32::MAX;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Self::new(rows, cols, data.iter().map(|&v| v as f64).collect())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Layout shared by all windows in one attention call.
#[derive(Debug, Clone)]
pub struct AttnLayout {
    pub windows: usize,
    pub tokens: usize,
    pub heads: usize,
    /// `[tokens * tokens]` indices into the bias table rows.
    pub bias_index: Arc<Vec<u32>>,
    /// Optional additive mask `[windows * tokens * tokens]`.
    pub mask: Option<Arc<Vec<f64>>>,
}

/// Deliberate backward-rule corruption, used to prove the gradient checker detects bugs.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    LayerNormGamma,
    AttentionBiasTable,
}

/// Scalar parts of the segmentation loss recorded at forward time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
}

enum Op {
    Leaf,
    GatherRows {
        src: Var,
        map: Arc<Vec<u32>>,
        group: usize,
    },
    Reshape {
        src: Var,
    },
    ConcatCols {
        srcs: Vec<Var>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    InstanceNorm {
        x: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        table: Var,
        layout: Arc<AttnLayout>,
        probs: Vec<f64>,
    },
    SegLoss {
        grad: Vec<f64>,
        logits: Var,
        terms: LossTerms,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.data.iter().all(|v| !v.is_nan()),
            "NaN produced on tape"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Sign bits of every leaky-ReLU input, packed 64 per word.
    pub(crate) fn kink_pattern(&self) -> Vec<u64> {
        let mut words = Vec::new();
        let mut bit = 0usize;
        for n in &self.nodes {
            if let Op::LeakyRelu { x, .. } = n.op {
                for &v in &self.nodes[x.0].value.data {
                    if bit.is_multiple_of(64) {
                        words.push(0);
                    }
                    if v > 0.0 {
                        *words.last_mut().expect("word pushed") |= 1 << (bit % 64);
                    }
                    bit += 1;
                }
            }
        }
        words
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Leaf whose gradient is wanted (a parameter or a probed input).
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `out[i] = concat(src[map[i*group + j]] for j in 0..group)`; `PAD` entries read zeros.
    pub fn gather_rows(&mut self, src: Var, map: Arc<Vec<u32>>, group: usize) -> Var {
        let s = &self.nodes[src.0].value;
        assert!(
            group >= 1 && map.len().is_multiple_of(group),
            "gather map/group mismatch"
        );
        let c = s.cols;
        let rows = map.len() / group;
        let mut data = vec![0.0; rows * group * c];
        for (slot, &m) in map.iter().enumerate() {
            if m != PAD {
                data[slot * c..(slot + 1) * c].copy_from_slice(s.row(m as usize));
            }
        }
        let rg = self.rg(src);
        self.push(
            Mat::new(rows, group * c, data),
            Op::GatherRows { src, map, group },
            rg,
        )
    }

    /// Reinterprets the row-major buffer with `cols` columns.
    pub fn reshape(&mut self, src: Var, cols: usize) -> Var {
        let s = &self.nodes[src.0].value;
        assert_eq!(s.data.len() % cols, 0, "reshape to {cols} columns");
        let value = Mat::new(s.data.len() / cols, cols, s.data.clone());
        let rg = self.rg(src);
        self.push(value, Op::Reshape { src }, rg)
    }

    pub fn concat_cols(&mut self, srcs: &[Var]) -> Var {
        let rows = self.value(srcs[0]).rows;
        let cols: usize = srcs.iter().map(|&s| self.value(s).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &s in srcs {
                let m = self.value(s);
                assert_eq!(m.rows, rows, "concat row mismatch");
                data.extend_from_slice(m.row(r));
            }
        }
        let rg = srcs.iter().any(|&s| self.rg(s));
        self.push(
            Mat::new(rows, cols, data),
            Op::ConcatCols {
                srcs: srcs.to_vec(),
            },
            rg,
        )
    }

    /// `y = x wᵀ + b` with `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xm, wm) = (self.value(x), self.value(w));
        assert_eq!(xm.cols, wm.cols, "linear input width mismatch");
        let (n, out) = (xm.rows, wm.rows);
        let mut data = vec![0.0; n * out];
        for r in 0..n {
            let xr = xm.row(r);
            let yr = &mut data[r * out..(r + 1) * out];
            for (o, y) in yr.iter_mut().enumerate() {
                *y = dot(xr, wm.row(o));
            }
        }
        if let Some(b) = b {
            let bm = &self.value(b).data;
            assert_eq!(bm.len(), out, "bias length mismatch");
            for row in data.chunks_exact_mut(out) {
                for (y, bb) in row.iter_mut().zip(bm) {
                    *y += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Mat::new(n, out, data), Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!((am.rows, am.cols), (bm.rows, bm.cols), "add shape mismatch");
        let data = am.data.iter().zip(&bm.data).map(|(x, y)| x + y).collect();
        let value = Mat::new(am.rows, am.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add { a, b }, rg)
    }

    /// Per-row normalization over columns, then `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (n, c) = (xm.rows, xm.cols);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        assert_eq!(g.len(), c, "layer norm gamma width");
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut data = vec![0.0; n * c];
        for r in 0..n {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                data[r * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Mat::new(n, c, data),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Per-column normalization over all rows (tokens), no affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let (n, c) = (xm.rows, xm.cols);
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; c];
        for j in 0..c {
            let mean = (0..n).map(|r| xm.data[r * c + j]).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|r| (xm.data[r * c + j] - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[j] = rs;
            for r in 0..n {
                xhat[r * c + j] = (xm.data[r * c + j] - mean) * rs;
            }
        }
        let rg = self.rg(x);
        self.push(
            Mat::new(n, c, xhat.clone()),
            Op::InstanceNorm { x, xhat, rstd },
            rg,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let data = xm.data.iter().map(|&v| gelu(v)).collect();
        let value = Mat::new(xm.rows, xm.cols, data);
        let rg = self.rg(x);
        self.push(value, Op::Gelu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xm = self.value(x);
        let data = xm
            .data
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let value = Mat::new(xm.rows, xm.cols, data);
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    /// Multi-head attention inside each window. `q`, `k`, `v` are `[windows * tokens, C]` in
    /// window-major order; `table` is `[bias_rows, heads]`.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        table: Var,
        layout: Arc<AttnLayout>,
    ) -> Var {
        let (probs, out) = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            self.value(table),
            &layout,
        );
        let rg = [q, k, v, table].iter().any(|&x| self.rg(x));
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                table,
                layout,
                probs,
            },
            rg,
        )
    }

    /// Attention probabilities `[windows, heads, tokens, tokens]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Soft Dice (softmax probabilities, per-class mean, background included) plus mean
    /// cross-entropy. `logits` is `[voxels, classes]`.
    pub fn seg_loss(&mut self, logits: Var, labels: &[u32], dice_eps: f64) -> Var {
        let lm = self.value(logits);
        let (terms, grad) = seg_loss_forward(lm, labels, dice_eps);
        let rg = self.rg(logits);
        self.push(
            Mat::new(1, 1, vec![terms.total]),
            Op::SegLoss {
                grad,
                logits,
                terms,
            },
            rg,
        )
    }

    pub fn loss_terms(&self, v: Var) -> Option<LossTerms> {
        match &self.nodes[v.0].op {
            Op::SegLoss { terms, .. } => Some(*terms),
            _ => None,
        }
    }

    /// Back-propagates `seed * d(root)` and returns per-node gradients (None where unused).
    pub fn backward(&self, root: Var, seed: f64) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(vec![seed; rv.data.len()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::GatherRows { src, map, group } => {
                if !self.rg(*src) {
                    return;
                }
                let c = node.value.cols / group;
                let dst = acc(grads, *src, self.value(*src).data.len());
                for (slot, &m) in map.iter().enumerate() {
                    if m != PAD {
                        let m = m as usize;
                        axpy(
                            1.0,
                            &g[slot * c..(slot + 1) * c],
                            &mut dst[m * c..(m + 1) * c],
                        );
                    }
                }
            }
            Op::Reshape { src } => {
                if self.rg(*src) {
                    let dst = acc(grads, *src, g.len());
                    axpy(1.0, g, dst);
                }
            }
            Op::ConcatCols { srcs } => {
                let rows = node.value.rows;
                let total = node.value.cols;
                let mut off = 0;
                for &s in srcs {
                    let c = self.value(s).cols;
                    if self.rg(s) {
                        let dst = acc(grads, s, rows * c);
                        for r in 0..rows {
                            axpy(
                                1.0,
                                &g[r * total + off..r * total + off + c],
                                &mut dst[r * c..(r + 1) * c],
                            );
                        }
                    }
                    off += c;
                }
            }
            Op::Linear { x, w, b } => {
                let (xm, wm) = (self.value(*x), self.value(*w));
                let (n, out, inp) = (xm.rows, wm.rows, wm.cols);
                if self.rg(*x) {
                    let dx = acc(grads, *x, n * inp);
                    for r in 0..n {
                        let gr = &g[r * out..(r + 1) * out];
                        let dxr = &mut dx[r * inp..(r + 1) * inp];
                        for (o, &go) in gr.iter().enumerate() {
                            if go != 0.0 {
                                axpy(go, wm.row(o), dxr);
                            }
                        }
                    }
                }
                if self.rg(*w) {
                    let dw = acc(grads, *w, out * inp);
                    for r in 0..n {
                        let xr = xm.row(r);
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go != 0.0 {
                                axpy(go, xr, &mut dw[o * inp..(o + 1) * inp]);
                            }
                        }
                    }
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let db = acc(grads, b, out);
                    for row in g.chunks_exact(out) {
                        axpy(1.0, row, db);
                    }
                }
            }
            Op::Add { a, b } => {
                for s in [*a, *b] {
                    if self.rg(s) {
                        axpy(1.0, g, acc(grads, s, g.len()));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, c) = (node.value.rows, node.value.cols);
                let gm = &self.value(*gamma).data;
                if self.rg(*gamma) {
                    let scale = if self.fault == Some(Fault::LayerNormGamma) {
                        1.5
                    } else {
                        1.0
                    };
                    let dg = acc(grads, *gamma, c);
                    for r in 0..n {
                        for j in 0..c {
                            dg[j] += scale * g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let db = acc(grads, *beta, c);
                    for row in g.chunks_exact(c) {
                        axpy(1.0, row, db);
                    }
                }
                if self.rg(*x) {
                    let dx = acc(grads, *x, n * c);
                    for r in 0..n {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            let dh = g[r * c + j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * c + j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            let dh = g[r * c + j] * gm[j];
                            dx[r * c + j] += rstd[r] * (dh - mean_dh - xhat[r * c + j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::InstanceNorm { x, xhat, rstd } => {
                if !self.rg(*x) {
                    return;
                }
                let (n, c) = (node.value.rows, node.value.cols);
                let dx = acc(grads, *x, n * c);
                for j in 0..c {
                    let mut mean_g = 0.0;
                    let mut mean_gh = 0.0;
                    for r in 0..n {
                        mean_g += g[r * c + j];
                        mean_gh += g[r * c + j] * xhat[r * c + j];
                    }
                    mean_g /= n as f64;
                    mean_gh /= n as f64;
                    for r in 0..n {
                        dx[r * c + j] +=
                            rstd[j] * (g[r * c + j] - mean_g - xhat[r * c + j] * mean_gh);
                    }
                }
            }
            Op::Gelu { x } => {
                if self.rg(*x) {
                    let xm = &self.value(*x).data;
                    let dx = acc(grads, *x, xm.len());
                    for i in 0..xm.len() {
                        dx[i] += g[i] * gelu_grad(xm[i]);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.rg(*x) {
                    let xm = &self.value(*x).data;
                    let dx = acc(grads, *x, xm.len());
                    for i in 0..xm.len() {
                        dx[i] += if xm[i] >= 0.0 { g[i] } else { slope * g[i] };
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                table,
                layout,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *table, layout, probs, grads),
            Op::SegLoss { grad, logits, .. } => {
                if self.rg(*logits) {
                    axpy(g[0], grad, acc(grads, *logits, grad.len()));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        table: Var,
        layout: &AttnLayout,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let c = qm.cols;
        let t = layout.tokens;
        let heads = layout.heads;
        let hd = c / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let n = qm.rows;
        let table_len = self.value(table).data.len();

        let mut dq = vec![0.0; n * c];
        let mut dk = vec![0.0; n * c];
        let mut dv = vec![0.0; n * c];
        let mut dtable = vec![0.0; table_len];
        let mut dp = vec![0.0; t];

        for win in 0..layout.windows {
            let base = win * t;
            for h in 0..heads {
                let hs = h * hd;
                let p_off = (win * heads + h) * t * t;
                for i in 0..t {
                    let gi = &g[(base + i) * c + hs..(base + i) * c + hs + hd];
                    let prow = &probs[p_off + i * t..p_off + (i + 1) * t];
                    let mut sum = 0.0;
                    for j in 0..t {
                        let vj = &vm.data[(base + j) * c + hs..(base + j) * c + hs + hd];
                        dp[j] = dot(gi, vj);
                        sum += prow[j] * dp[j];
                        axpy(
                            prow[j],
                            gi,
                            &mut dv[(base + j) * c + hs..(base + j) * c + hs + hd],
                        );
                    }
                    for j in 0..t {
                        let ds = prow[j] * (dp[j] - sum);
                        if ds == 0.0 {
                            continue;
                        }
                        dtable[layout.bias_index[i * t + j] as usize * heads + h] += ds;
                        let kj = &km.data[(base + j) * c + hs..(base + j) * c + hs + hd];
                        axpy(
                            ds * scale,
                            kj,
                            &mut dq[(base + i) * c + hs..(base + i) * c + hs + hd],
                        );
                        let qi = &qm.data[(base + i) * c + hs..(base + i) * c + hs + hd];
                        axpy(
                            ds * scale,
                            qi,
                            &mut dk[(base + j) * c + hs..(base + j) * c + hs + hd],
                        );
                    }
                }
            }
        }
        if self.fault == Some(Fault::AttentionBiasTable) {
            dtable.iter_mut().for_each(|x| *x *= 1.5);
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv), (table, dtable)] {
            if self.rg(var) {
                let len = d.len();
                axpy(1.0, &d, acc(grads, var, len));
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn attention_forward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    table: &Mat,
    layout: &AttnLayout,
) -> (Vec<f64>, Mat) {
    let c = q.cols;
    let t = layout.tokens;
    let heads = layout.heads;
    assert!(
        c.is_multiple_of(heads),
        "channels {c} not divisible by {heads} heads"
    );
    assert_eq!(q.rows, layout.windows * t, "attention row count");
    assert_eq!(table.cols, heads, "bias table head count");
    let hd = c / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; layout.windows * heads * t * t];
    let mut out = vec![0.0; q.rows * c];

    for win in 0..layout.windows {
        let base = win * t;
        for h in 0..heads {
            let hs = h * hd;
            let p_off = (win * heads + h) * t * t;
            for i in 0..t {
                let qi = &q.data[(base + i) * c + hs..(base + i) * c + hs + hd];
                let row = &mut probs[p_off + i * t..p_off + (i + 1) * t];
                for j in 0..t {
                    let kj = &k.data[(base + j) * c + hs..(base + j) * c + hs + hd];
                    let mut s = dot(qi, kj) * scale
                        + table.data[layout.bias_index[i * t + j] as usize * heads + h];
                    if let Some(mask) = &layout.mask {
                        s += mask[(win * t + i) * t + j];
                    }
                    row[j] = s;
                }
                softmax_in_place(row);
                let oi = &mut out[(base + i) * c + hs..(base + i) * c + hs + hd];
                for j in 0..t {
                    let vj = &v.data[(base + j) * c + hs..(base + j) * c + hs + hd];
                    axpy(row[j], vj, oi);
                }
            }
        }
    }
    (probs, Mat::new(q.rows, c, out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Returns the loss terms and the gradient of `dice + ce` with respect to the logits.
pub(crate) fn seg_loss_forward(logits: &Mat, labels: &[u32], eps: f64) -> (LossTerms, Vec<f64>) {
    let (n, l) = (logits.rows, logits.cols);
    assert_eq!(labels.len(), n, "label count mismatch");
    let mut p = logits.data.clone();
    for row in p.chunks_exact_mut(l) {
        softmax_in_place(row);
    }

    let mut inter = vec![0.0; l];
    let mut psum = vec![0.0; l];
    let mut gsum = vec![0.0; l];
    let mut ce = 0.0;
    for r in 0..n {
        let y = labels[r] as usize;
        for c in 0..l {
            psum[c] += p[r * l + c];
        }
        inter[y] += p[r * l + y];
        gsum[y] += 1.0;
        ce -= log_softmax_at(logits.row(r), y);
    }
    ce /= n as f64;
    let dice_c: Vec<f64> = (0..l)
        .map(|c| (2.0 * inter[c] + eps) / (psum[c] + gsum[c] + eps))
        .collect();
    let dice = 1.0 - dice_c.iter().sum::<f64>() / l as f64;

    // d dice / d p[r, c] = -(1/L) * (2 g (P+G+e) - (2I+e)) / (P+G+e)^2
    let mut grad = vec![0.0; n * l];
    let mut dp = vec![0.0; l];
    for r in 0..n {
        let y = labels[r] as usize;
        let prow = &p[r * l..(r + 1) * l];
        for c in 0..l {
            let denom = psum[c] + gsum[c] + eps;
            let g = if c == y { 1.0 } else { 0.0 };
            dp[c] = -(2.0 * g * denom - (2.0 * inter[c] + eps)) / (denom * denom) / l as f64;
        }
        let s: f64 = (0..l).map(|c| prow[c] * dp[c]).sum();
        for c in 0..l {
            let onehot = if c == y { 1.0 } else { 0.0 };
            grad[r * l + c] = prow[c] * (dp[c] - s) + (prow[c] - onehot) / n as f64;
        }
    }
    (
        LossTerms {
            total: dice + ce,
            dice,
            ce,
        },
        grad,
    )
}

fn log_softmax_at(row: &[f64], y: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[y] - lse
}
