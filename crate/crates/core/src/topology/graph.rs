//! The network wiring, written once against a block-level backend. The tape executor and the
//! shape tracer both implement [`Backend`], so traces always describe the network that runs.

use super::config::ModelConfig;
use crate::error::{HrstError, Result};

/// A feature map: backend handle plus token-grid extent and channel count.
#[derive(Debug, Clone)]
pub(crate) struct Feat<H: Clone> {
    pub h: H,
    pub dims: [usize; 3],
    pub ch: usize,
}

pub(crate) trait Backend {
    type H: Clone;

    fn embed(&mut self) -> Result<Feat<Self::H>>;
    fn swin_pair(&mut self, prefix: &str, x: &Feat<Self::H>, heads: usize)
        -> Result<Feat<Self::H>>;
    fn merge(&mut self, name: &str, x: &Feat<Self::H>) -> Result<Feat<Self::H>>;
    fn expand(&mut self, name: &str, x: &Feat<Self::H>) -> Result<Feat<Self::H>>;
    fn concat(&mut self, name: &str, xs: &[Feat<Self::H>]) -> Result<Feat<Self::H>>;
    fn residual(&mut self, prefix: &str, x: &Feat<Self::H>, out: usize) -> Result<Feat<Self::H>>;
    fn output(&mut self, name: &str, x: &Feat<Self::H>, classes: usize) -> Result<Feat<Self::H>>;
}

pub(crate) fn level_dims(base: [usize; 3], level: usize) -> [usize; 3] {
    let mut d = base;
    for _ in 0..level {
        d = d.map(|v| v.div_ceil(2));
    }
    d
}

fn check_streams<H: Clone>(
    cfg: &ModelConfig,
    what: &str,
    feats: &[Feat<H>],
    first_level: usize,
    base: [usize; 3],
) -> Result<()> {
    for (i, f) in feats.iter().enumerate() {
        let level = first_level + i;
        let dims = level_dims(base, level);
        let ch = cfg.stream_channels(level);
        if f.dims != dims || f.ch != ch {
            return Err(HrstError::Topology(format!(
                "{what} {i}: expected {ch} channels at {dims:?} (stream {level}), got {} at {:?}",
                f.ch, f.dims
            )));
        }
    }
    Ok(())
}

/// Stage `n` (1-based): one Swin block pair per stream, then patch merging. Stages before the
/// last merge every stream; the last stage merges all but its deepest one.
pub(crate) fn stage<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    n: usize,
    streams: &[Feat<B::H>],
) -> Result<(Vec<Feat<B::H>>, Vec<Feat<B::H>>)> {
    let k = cfg.variant;
    if n == 0 || n > k {
        return Err(HrstError::Topology(format!("stage {n} outside 1..={k}")));
    }
    if streams.len() != n {
        return Err(HrstError::Topology(format!(
            "stage {n} takes {n} streams, got {}",
            streams.len()
        )));
    }
    check_streams(cfg, "stream", streams, 0, streams[0].dims)?;
    let mut swin = Vec::with_capacity(n);
    for (r, s) in streams.iter().enumerate() {
        swin.push(b.swin_pair(&format!("stage{n}.s{r}"), s, cfg.stream_heads(r))?);
    }
    let merges = if n < k { n } else { n - 1 };
    let mut merged = Vec::with_capacity(merges);
    for (r, s) in swin.iter().take(merges).enumerate() {
        merged.push(b.merge(&format!("stage{n}.merge{r}"), s)?);
    }
    Ok((swin, merged))
}

/// Multi-resolution feature fusion after stage `n`: every source stream is carried to every
/// target resolution (a chain of merges downwards, of expands upwards), and each target
/// concatenates its own stream with the others in ascending source order, followed by a
/// residual block back to the target width.
pub(crate) fn mrff<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    n: usize,
    swin: &[Feat<B::H>],
    merged: &[Feat<B::H>],
) -> Result<Vec<Feat<B::H>>> {
    if n < 2 || swin.len() != n || merged.len() < n - 1 {
        return Err(HrstError::Topology(format!(
            "fusion after stage {n} needs {n} streams and {} merged maps, got {} and {}",
            n - 1,
            swin.len(),
            merged.len()
        )));
    }
    let base = swin[0].dims;
    check_streams(cfg, "stream", swin, 0, base)?;
    check_streams(cfg, "merged map", &merged[..n - 1], 1, base)?;

    // reps[r][t]: source r carried to the resolution of stream t
    let mut reps: Vec<Vec<Option<Feat<B::H>>>> = vec![vec![None; n]; n];
    for r in 0..n {
        reps[r][r] = Some(swin[r].clone());
        for t in r + 1..n {
            let f = if t == r + 1 {
                merged[r].clone()
            } else {
                let prev = reps[r][t - 1].as_ref().expect("filled in order");
                b.merge(&format!("mrff{n}.s{r}.down{t}"), prev)?
            };
            reps[r][t] = Some(f);
        }
        for t in (0..r).rev() {
            let prev = reps[r][t + 1].as_ref().expect("filled in order");
            let f = b.expand(&format!("mrff{n}.s{r}.up{t}"), prev)?;
            reps[r][t] = Some(f);
        }
    }

    let mut fused = Vec::with_capacity(n);
    for t in 0..n {
        let mut parts = vec![reps[t][t].clone().expect("own stream")];
        parts.extend(
            (0..n)
                .filter(|&r| r != t)
                .map(|r| reps[r][t].clone().expect("filled")),
        );
        for p in &parts {
            if p.dims != swin[t].dims || p.ch != swin[t].ch {
                return Err(HrstError::Topology(format!(
                    "fusion after stage {n}: map at {:?} x {} cannot join stream {t} at {:?} x {}",
                    p.dims, p.ch, swin[t].dims, swin[t].ch
                )));
            }
        }
        let cat = b.concat(&format!("mrff{n}.cat{t}"), &parts)?;
        fused.push(b.residual(&format!("mrff{n}.fuse{t}"), &cat, swin[t].ch)?);
    }
    Ok(fused)
}

/// Brings every fused stream to the highest stream resolution, fuses them, and expands back
/// to voxel resolution before the 1³ classifier.
pub(crate) fn head<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    fused: &[Feat<B::H>],
) -> Result<Feat<B::H>> {
    if fused.len() != cfg.variant {
        return Err(HrstError::Topology(format!(
            "head takes {} streams, got {}",
            cfg.variant,
            fused.len()
        )));
    }
    check_streams(cfg, "fused stream", fused, 0, fused[0].dims)?;
    let mut parts = vec![fused[0].clone()];
    for (r, f) in fused.iter().enumerate().skip(1) {
        let mut x = f.clone();
        for t in (0..r).rev() {
            x = b.expand(&format!("head.up{r}.to{t}"), &x)?;
        }
        parts.push(x);
    }
    let cat = b.concat("head.cat", &parts)?;
    let mut x = b.residual("head.fuse", &cat, cfg.embed_dim)?;
    for i in 0..cfg.head_expansions() {
        x = b.expand(&format!("head.expand{i}"), &x)?;
    }
    b.output("head.out", &x, cfg.num_classes)
}

/// Full network: embedding, `variant` stages with fusion after each one from the second on,
/// and the segmentation head.
pub(crate) fn network<B: Backend>(b: &mut B, cfg: &ModelConfig) -> Result<Feat<B::H>> {
    let k = cfg.variant;
    let mut streams = vec![b.embed()?];
    for n in 1..=k {
        let (swin, merged) = stage(b, cfg, n, &streams)?;
        if n == 1 {
            streams = vec![swin[0].clone(), merged[0].clone()];
            continue;
        }
        let fused = mrff(b, cfg, n, &swin, &merged)?;
        if n == k {
            return head(b, cfg, &fused);
        }
        streams = fused;
        streams.push(merged[n - 1].clone());
    }
    Err(HrstError::Topology(format!("variant {k} has no stages")))
}
