//! HRSTNet assembly: parallel multi-resolution Swin streams with repeated fusion.

mod config;
mod exec;
mod graph;
mod params;
mod trace;

use std::collections::HashSet;

pub use config::ModelConfig;
pub use params::{Init, ModelParams, ParamFamily, ParamSpec, ParamTensor};
pub use trace::{
    param_count, param_layout, shape_trace, BlockTrace, Shape4, ShapeTrace, StreamTrace,
};

pub(crate) use exec::mat_to_volume;

use exec::{residual_on_tape, TapeBackend};
use graph::Feat;

use crate::error::{HrstError, Result};
use crate::tape::{Fault, LossTerms, Mat, Tape, Var};
use crate::volume_io::{LabelVolume, VolumeModel, VolumeTensor};
use crate::windowing::TokenGrid;

pub const DICE_EPS: f64 = 1e-5;

/// A configured network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hrstnet {
    cfg: ModelConfig,
    params: ModelParams,
}

/// Loss value and per-parameter gradients (aligned with [`ModelParams::tensors`]).
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub terms: LossTerms,
    pub grads: Vec<Vec<f64>>,
}

impl Hrstnet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let layout = param_layout(&cfg)?;
        let params = ModelParams::init(&layout, seed);
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ModelParams) -> Result<Self> {
        params.check_layout(&param_layout(&cfg)?)?;
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, vol: &VolumeTensor) -> Result<()> {
        self.cfg.check_input_dims(vol.dims())?;
        if vol.channels() != self.cfg.in_channels {
            return Err(HrstError::Shape(format!(
                "input has {} channels, model expects {}",
                vol.channels(),
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    fn build<'a>(
        &'a self,
        vol: &'a VolumeTensor,
        trainable: bool,
        fault: Option<Fault>,
    ) -> Result<(TapeBackend<'a>, Feat<Var>)> {
        self.check_input(vol)?;
        let mut b = TapeBackend::new(
            Tape::with_fault(fault),
            &self.cfg,
            &self.params,
            Some(vol),
            trainable,
        );
        let out = graph::network(&mut b, &self.cfg)?;
        if out.dims != vol.dims() {
            return Err(HrstError::Topology(format!(
                "network produced {:?} for a {:?} input",
                out.dims,
                vol.dims()
            )));
        }
        Ok((b, out))
    }

    /// Logits `[classes, D, H, W]`.
    pub fn forward(&self, vol: &VolumeTensor) -> Result<VolumeTensor> {
        let (b, out) = self.build(vol, false, None)?;
        mat_to_volume(out.dims, b.tape.value(out.h), vol.spacing())
    }

    fn check_labels(&self, vol: &VolumeTensor, labels: &LabelVolume) -> Result<()> {
        if labels.dims() != vol.dims() {
            return Err(HrstError::Shape(format!(
                "labels {:?} do not match image {:?}",
                labels.dims(),
                vol.dims()
            )));
        }
        if let Some(&bad) = labels
            .data()
            .iter()
            .find(|&&l| l as usize >= self.cfg.num_classes)
        {
            return Err(HrstError::InvalidValue(format!(
                "label {bad} outside 0..{}",
                self.cfg.num_classes
            )));
        }
        Ok(())
    }

    /// Soft Dice + cross-entropy of the prediction for one volume, without gradients.
    pub fn loss(&self, vol: &VolumeTensor, labels: &LabelVolume) -> Result<LossTerms> {
        self.check_labels(vol, labels)?;
        let (mut b, out) = self.build(vol, false, None)?;
        let l = b.tape.seg_loss(out.h, labels.data(), DICE_EPS);
        Ok(b.tape.loss_terms(l).expect("loss node"))
    }

    /// Loss plus the sign pattern of every leaky-ReLU input.
    pub(crate) fn loss_with_kinks(
        &self,
        vol: &VolumeTensor,
        labels: &LabelVolume,
    ) -> Result<(LossTerms, Vec<u64>)> {
        self.check_labels(vol, labels)?;
        let (mut b, out) = self.build(vol, false, None)?;
        let l = b.tape.seg_loss(out.h, labels.data(), DICE_EPS);
        let terms = b.tape.loss_terms(l).expect("loss node");
        Ok((terms, b.tape.kink_pattern()))
    }

    pub fn loss_and_grad(&self, vol: &VolumeTensor, labels: &LabelVolume) -> Result<LossGrad> {
        self.loss_and_grad_with(vol, labels, None)
    }

    #[doc(hidden)]
    pub fn loss_and_grad_with(
        &self,
        vol: &VolumeTensor,
        labels: &LabelVolume,
        fault: Option<Fault>,
    ) -> Result<LossGrad> {
        self.check_labels(vol, labels)?;
        let (mut b, out) = self.build(vol, true, fault)?;
        let l = b.tape.seg_loss(out.h, labels.data(), DICE_EPS);
        let terms = b.tape.loss_terms(l).expect("loss node");
        let g = b.tape.backward(l, 1.0);
        let grads = self
            .params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, p)| match b.loaded().get(&i).and_then(|&v| g.get(v)) {
                Some(d) => d.to_vec(),
                None => vec![0.0; p.numel()],
            })
            .collect();
        Ok(LossGrad { terms, grads })
    }

    /// Names of parameters the forward pass reads; equals the full layout for a valid network.
    pub fn used_parameters(&self, vol: &VolumeTensor) -> Result<HashSet<String>> {
        let (b, _) = self.build(vol, false, None)?;
        Ok(b.loaded()
            .keys()
            .map(|&i| self.params.tensors()[i].name.clone())
            .collect())
    }
}

impl VolumeModel for Hrstnet {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn check_roi(&self, roi: [usize; 3]) -> Result<()> {
        self.cfg.check_input_dims(roi)
    }

    fn predict(&self, tile: &VolumeTensor) -> Result<VolumeTensor> {
        self.forward(tile)
    }
}

fn grids_to_feats(b: &mut TapeBackend<'_>, grids: &[TokenGrid]) -> Vec<Feat<Var>> {
    grids.iter().map(|g| b.feat(g.dims(), g.to_mat())).collect()
}

fn feats_to_grids(b: &TapeBackend<'_>, feats: &[Feat<Var>]) -> Result<Vec<TokenGrid>> {
    feats
        .iter()
        .map(|f| TokenGrid::from_mat(f.dims, b.tape.value(f.h)))
        .collect()
}

/// Stage `n` on explicit streams: returns the Swin outputs and the merged maps.
pub fn run_stage(
    cfg: &ModelConfig,
    params: &ModelParams,
    n: usize,
    streams: &[TokenGrid],
) -> Result<(Vec<TokenGrid>, Vec<TokenGrid>)> {
    cfg.validate()?;
    if streams.is_empty() {
        return Err(HrstError::Topology(format!("stage {n} got no streams")));
    }
    let mut b = TapeBackend::new(Tape::new(), cfg, params, None, false);
    let feats = grids_to_feats(&mut b, streams);
    let (swin, merged) = graph::stage(&mut b, cfg, n, &feats)?;
    Ok((feats_to_grids(&b, &swin)?, feats_to_grids(&b, &merged)?))
}

/// Fusion after stage `n` on explicit Swin outputs and merged maps.
pub fn mrff(
    cfg: &ModelConfig,
    params: &ModelParams,
    n: usize,
    swin: &[TokenGrid],
    merged: &[TokenGrid],
) -> Result<Vec<TokenGrid>> {
    cfg.validate()?;
    let mut b = TapeBackend::new(Tape::new(), cfg, params, None, false);
    let s = grids_to_feats(&mut b, swin);
    let m = grids_to_feats(&mut b, merged);
    let fused = graph::mrff(&mut b, cfg, n, &s, &m)?;
    feats_to_grids(&b, &fused)
}

/// Head on the final fused streams; returns logits at voxel resolution.
pub fn segmentation_head(
    cfg: &ModelConfig,
    params: &ModelParams,
    fused: &[TokenGrid],
) -> Result<VolumeTensor> {
    cfg.validate()?;
    if fused.is_empty() {
        return Err(HrstError::Topology("head got no streams".into()));
    }
    let mut b = TapeBackend::new(Tape::new(), cfg, params, None, false);
    let f = grids_to_feats(&mut b, fused);
    let out = graph::head(&mut b, cfg, &f)?;
    mat_to_volume(out.dims, b.tape.value(out.h), [1.0; 3])
}

/// Weights of a residual block: `conv1` is `[out, 27·in]`, `conv2` is `[out, 27·out]` (kernel
/// taps in (dz, dy, dx) order, channel fastest), and `skip` is a `[out, in]` projection plus bias,
/// required exactly when `in != out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv1: Vec<f32>,
    pub conv2: Vec<f32>,
    pub skip: Option<(Vec<f32>, Vec<f32>)>,
}

pub fn residual_block(grid: &TokenGrid, p: &ResidualParams) -> Result<TokenGrid> {
    let (ci, co) = (p.in_channels, p.out_channels);
    let skip_ok = match &p.skip {
        Some((w, b)) => ci != co && w.len() == co * ci && b.len() == co,
        None => ci == co,
    };
    if grid.channels() != ci
        || p.conv1.len() != co * 27 * ci
        || p.conv2.len() != co * 27 * co
        || !skip_ok
    {
        return Err(HrstError::Shape(format!(
            "residual block {ci} -> {co} does not fit its weights or a {}-channel grid",
            grid.channels()
        )));
    }
    let mut t = Tape::new();
    let x = t.constant(grid.to_mat());
    let c1 = t.constant(Mat::from_f32(co, 27 * ci, &p.conv1));
    let c2 = t.constant(Mat::from_f32(co, 27 * co, &p.conv2));
    let skip = p.skip.as_ref().map(|(w, b)| {
        (
            t.constant(Mat::from_f32(co, ci, w)),
            t.constant(Mat::from_f32(1, co, b)),
        )
    });
    let y = residual_on_tape(&mut t, x, grid.dims(), c1, c2, skip);
    TokenGrid::from_mat(grid.dims(), t.value(y))
}
