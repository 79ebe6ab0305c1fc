use std::fmt::{self, Write as _};

use serde::Serialize;

use super::config::ModelConfig;
use super::graph::{self, Backend, Feat};
use super::params::{
    embed_specs, expand_spec, merge_spec, output_specs, residual_specs, swin_layer_specs, ParamSpec,
};
use crate::error::Result;

/// `[C, D, H, W]` of a feature map.
pub type Shape4 = [usize; 4];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockTrace {
    pub name: String,
    pub kind: &'static str,
    pub inputs: Vec<Shape4>,
    pub output: Shape4,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StreamTrace {
    pub level: usize,
    pub dims: [usize; 3],
    pub channels: usize,
    pub heads: usize,
}

/// Shape-only walk of the network for a given input extent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeTrace {
    pub variant: usize,
    pub input: [usize; 4],
    pub output: Shape4,
    pub min_multiple: usize,
    pub window_exact_multiple: usize,
    pub window: usize,
    pub streams: Vec<StreamTrace>,
    pub blocks: Vec<BlockTrace>,
    pub total_params: usize,
    pub violations: Vec<String>,
}

impl ShapeTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serialises")
    }
}

fn fmt_shape(s: &Shape4) -> String {
    format!("{}x{}x{}x{}", s[0], s[1], s[2], s[3])
}

impl fmt::Display for ShapeTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "HRSTNet-{}  input {}  output {}",
            self.variant,
            fmt_shape(&self.input),
            fmt_shape(&self.output)
        )?;
        writeln!(
            f,
            "extent multiple {} (window-exact {}, window {})",
            self.min_multiple, self.window_exact_multiple, self.window
        )?;
        for s in &self.streams {
            writeln!(
                f,
                "stream {}: {}x{}x{} x {} ch, {} heads",
                s.level, s.dims[0], s.dims[1], s.dims[2], s.channels, s.heads
            )?;
        }
        let mut table = String::new();
        for b in &self.blocks {
            let ins: Vec<String> = b.inputs.iter().map(fmt_shape).collect();
            let _ = writeln!(
                table,
                "{:<22} {:<9} {:>32} -> {:<16} {:>10}",
                b.name,
                b.kind,
                ins.join(" + "),
                fmt_shape(&b.output),
                b.params
            );
        }
        f.write_str(&table)?;
        writeln!(f, "total parameters {}", self.total_params)?;
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        Ok(())
    }
}

pub(crate) struct Tracer<'a> {
    cfg: &'a ModelConfig,
    input: [usize; 3],
    pub blocks: Vec<BlockTrace>,
    pub specs: Vec<ParamSpec>,
}

impl<'a> Tracer<'a> {
    pub fn new(cfg: &'a ModelConfig, input: [usize; 3]) -> Self {
        Self {
            cfg,
            input,
            blocks: Vec::new(),
            specs: Vec::new(),
        }
    }

    fn record(
        &mut self,
        name: &str,
        kind: &'static str,
        inputs: &[&Feat<()>],
        out: Feat<()>,
        specs: Vec<ParamSpec>,
    ) -> Feat<()> {
        let shape = |f: &Feat<()>| [f.ch, f.dims[0], f.dims[1], f.dims[2]];
        self.blocks.push(BlockTrace {
            name: name.to_string(),
            kind,
            inputs: inputs.iter().map(|f| shape(f)).collect(),
            output: shape(&out),
            params: specs.iter().map(ParamSpec::numel).sum(),
        });
        self.specs.extend(specs);
        out
    }
}

impl Backend for Tracer<'_> {
    type H = ();

    fn embed(&mut self) -> Result<Feat<()>> {
        let c = self.cfg;
        let src = Feat {
            h: (),
            dims: self.input,
            ch: c.in_channels,
        };
        let out = Feat {
            h: (),
            dims: self.input.map(|d| d / c.patch),
            ch: c.embed_dim,
        };
        let specs = embed_specs(c.embed_dim, c.in_channels, c.patch);
        Ok(self.record("embed", "embed", &[&src], out, specs))
    }

    fn swin_pair(&mut self, prefix: &str, x: &Feat<()>, heads: usize) -> Result<Feat<()>> {
        let c = self.cfg;
        let mut specs = swin_layer_specs(
            &format!("{prefix}.blk0"),
            x.ch,
            heads,
            c.window,
            c.mlp_ratio,
        );
        specs.extend(swin_layer_specs(
            &format!("{prefix}.blk1"),
            x.ch,
            heads,
            c.window,
            c.mlp_ratio,
        ));
        Ok(self.record(prefix, "swin", &[x], x.clone(), specs))
    }

    fn merge(&mut self, name: &str, x: &Feat<()>) -> Result<Feat<()>> {
        let out = Feat {
            h: (),
            dims: x.dims.map(|d| d.div_ceil(2)),
            ch: 2 * x.ch,
        };
        Ok(self.record(name, "merge", &[x], out, vec![merge_spec(name, x.ch)]))
    }

    fn expand(&mut self, name: &str, x: &Feat<()>) -> Result<Feat<()>> {
        let out = Feat {
            h: (),
            dims: x.dims.map(|d| 2 * d),
            ch: x.ch / 2,
        };
        Ok(self.record(name, "expand", &[x], out, vec![expand_spec(name, x.ch)]))
    }

    fn concat(&mut self, name: &str, xs: &[Feat<()>]) -> Result<Feat<()>> {
        let out = Feat {
            h: (),
            dims: xs[0].dims,
            ch: xs.iter().map(|f| f.ch).sum(),
        };
        let ins: Vec<&Feat<()>> = xs.iter().collect();
        Ok(self.record(name, "concat", &ins, out, Vec::new()))
    }

    fn residual(&mut self, prefix: &str, x: &Feat<()>, out: usize) -> Result<Feat<()>> {
        let o = Feat {
            h: (),
            dims: x.dims,
            ch: out,
        };
        Ok(self.record(
            prefix,
            "residual",
            &[x],
            o,
            residual_specs(prefix, x.ch, out),
        ))
    }

    fn output(&mut self, name: &str, x: &Feat<()>, classes: usize) -> Result<Feat<()>> {
        let o = Feat {
            h: (),
            dims: x.dims,
            ch: classes,
        };
        Ok(self.record(name, "output", &[x], o, output_specs(name, classes, x.ch)))
    }
}

/// Traces the network on `input` (spatial extent). Extents that are not multiples of
/// [`ModelConfig::min_multiple`] are reported as violations and traced as if padded up.
pub fn shape_trace(cfg: &ModelConfig, input: [usize; 3]) -> Result<ShapeTrace> {
    cfg.validate()?;
    let m = cfg.min_multiple();
    let mut violations = Vec::new();
    let axes = ["D", "H", "W"];
    let mut traced = input;
    for a in 0..3 {
        if input[a] == 0 || !input[a].is_multiple_of(m) {
            traced[a] = input[a].div_ceil(m).max(1) * m;
            violations.push(format!(
                "{} = {} is not a multiple of {m}; traced as {}",
                axes[a], input[a], traced[a]
            ));
        }
    }
    let mut tr = Tracer::new(cfg, traced);
    let out = graph::network(&mut tr, cfg)?;
    let base = traced.map(|d| d / cfg.patch);
    let streams = (0..cfg.variant)
        .map(|r| StreamTrace {
            level: r,
            dims: graph::level_dims(base, r),
            channels: cfg.stream_channels(r),
            heads: cfg.stream_heads(r),
        })
        .collect();
    Ok(ShapeTrace {
        variant: cfg.variant,
        input: [cfg.in_channels, input[0], input[1], input[2]],
        output: [out.ch, out.dims[0], out.dims[1], out.dims[2]],
        min_multiple: m,
        window_exact_multiple: cfg.window_exact_multiple(),
        window: cfg.window,
        streams,
        total_params: tr.specs.iter().map(ParamSpec::numel).sum(),
        blocks: tr.blocks,
        violations,
    })
}

/// Every parameter of the network, in creation order.
pub fn param_layout(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let m = cfg.min_multiple();
    let mut tr = Tracer::new(cfg, [m; 3]);
    graph::network(&mut tr, cfg)?;
    Ok(tr.specs)
}

pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_layout(cfg)?.iter().map(ParamSpec::numel).sum())
}
