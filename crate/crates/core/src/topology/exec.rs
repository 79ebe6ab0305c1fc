use std::collections::HashMap;
use std::sync::Arc;

use super::config::ModelConfig;
use super::graph::{Backend, Feat};
use super::params::{
    embed_specs, expand_spec, merge_spec, output_specs, residual_specs, swin_layer_specs,
    ModelParams, ParamSpec,
};
use crate::attention::{swin_layer_on_tape, AttnVars, LayerVars, MlpVars};
use crate::error::{HrstError, Result};
use crate::tape::{Mat, Tape, Var};
use crate::volume_io::VolumeTensor;
use crate::windowing::{expand_on_tape, merge_on_tape, neighborhood_map, patchify};

pub(crate) const LEAKY_SLOPE: f64 = 0.01;

/// Runs network blocks on a [`Tape`], loading parameters by name on first use.
pub(crate) struct TapeBackend<'a> {
    pub tape: Tape,
    cfg: &'a ModelConfig,
    params: &'a ModelParams,
    input: Option<&'a VolumeTensor>,
    trainable: bool,
    loaded: HashMap<usize, Var>,
}

impl<'a> TapeBackend<'a> {
    pub fn new(
        tape: Tape,
        cfg: &'a ModelConfig,
        params: &'a ModelParams,
        input: Option<&'a VolumeTensor>,
        trainable: bool,
    ) -> Self {
        Self {
            tape,
            cfg,
            params,
            input,
            trainable,
            loaded: HashMap::new(),
        }
    }

    /// Parameter position to tape variable, for every parameter the forward pass touched.
    pub fn loaded(&self) -> &HashMap<usize, Var> {
        &self.loaded
    }

    pub fn param(&mut self, spec: &ParamSpec) -> Result<Var> {
        let i = self
            .params
            .position(&spec.name)
            .ok_or_else(|| HrstError::Shape(format!("missing parameter {}", spec.name)))?;
        if let Some(&v) = self.loaded.get(&i) {
            return Ok(v);
        }
        let p = &self.params.tensors()[i];
        if p.shape != spec.shape {
            return Err(HrstError::Shape(format!(
                "parameter {} has shape {:?}, network expects {:?}",
                spec.name, p.shape, spec.shape
            )));
        }
        let (r, c) = p.matrix_dims();
        let m = Mat::from_f32(r, c, &p.data);
        let v = if self.trainable {
            self.tape.leaf(m)
        } else {
            self.tape.constant(m)
        };
        self.loaded.insert(i, v);
        Ok(v)
    }

    fn params_of(&mut self, specs: &[ParamSpec]) -> Result<Vec<Var>> {
        specs.iter().map(|s| self.param(s)).collect()
    }

    fn layer_vars(&mut self, prefix: &str, c: usize, heads: usize) -> Result<LayerVars> {
        let specs = swin_layer_specs(prefix, c, heads, self.cfg.window, self.cfg.mlp_ratio);
        let v = self.params_of(&specs)?;
        Ok(LayerVars {
            norm1: (v[0], v[1]),
            attn: AttnVars {
                q: (v[2], v[3]),
                k: (v[4], v[5]),
                v: (v[6], v[7]),
                o: (v[8], v[9]),
                table: v[10],
                heads,
            },
            norm2: (v[11], v[12]),
            mlp: MlpVars {
                fc1: (v[13], v[14]),
                fc2: (v[15], v[16]),
            },
        })
    }

    pub fn feat(&mut self, dims: [usize; 3], m: Mat) -> Feat<Var> {
        let ch = m.cols;
        Feat {
            h: self.tape.constant(m),
            dims,
            ch,
        }
    }
}

/// `conv3³ → instance norm → leaky ReLU`, twice, plus a skip path.
pub(crate) fn residual_on_tape(
    t: &mut Tape,
    x: Var,
    dims: [usize; 3],
    conv1: Var,
    conv2: Var,
    skip: Option<(Var, Var)>,
) -> Var {
    let nb = Arc::new(neighborhood_map(dims));
    let h = t.gather_rows(x, nb.clone(), 27);
    let h = t.linear(h, conv1, None);
    let h = t.instance_norm(h);
    let h = t.leaky_relu(h, LEAKY_SLOPE);
    let h = t.gather_rows(h, nb, 27);
    let h = t.linear(h, conv2, None);
    let h = t.instance_norm(h);
    let h = t.leaky_relu(h, LEAKY_SLOPE);
    let s = match skip {
        Some((w, b)) => t.linear(x, w, Some(b)),
        None => x,
    };
    t.add(h, s)
}

impl Backend for TapeBackend<'_> {
    type H = Var;

    fn embed(&mut self) -> Result<Feat<Var>> {
        let vol = self
            .input
            .ok_or_else(|| HrstError::Topology("no input volume bound".into()))?;
        if vol.channels() != self.cfg.in_channels {
            return Err(HrstError::Shape(format!(
                "input has {} channels, model expects {}",
                vol.channels(),
                self.cfg.in_channels
            )));
        }
        let (dims, patches) = patchify(vol, self.cfg.patch)?;
        let x = self.tape.constant(patches);
        let specs = embed_specs(self.cfg.embed_dim, self.cfg.in_channels, self.cfg.patch);
        let v = self.params_of(&specs)?;
        let h = self.tape.linear(x, v[0], Some(v[1]));
        Ok(Feat {
            h,
            dims,
            ch: self.cfg.embed_dim,
        })
    }

    fn swin_pair(&mut self, prefix: &str, x: &Feat<Var>, heads: usize) -> Result<Feat<Var>> {
        let l0 = self.layer_vars(&format!("{prefix}.blk0"), x.ch, heads)?;
        let l1 = self.layer_vars(&format!("{prefix}.blk1"), x.ch, heads)?;
        let w = self.cfg.window;
        let h = swin_layer_on_tape(&mut self.tape, x.h, x.dims, w, [0; 3], &l0);
        let h = swin_layer_on_tape(&mut self.tape, h, x.dims, w, self.cfg.shift(), &l1);
        Ok(Feat { h, ..x.clone() })
    }

    fn merge(&mut self, name: &str, x: &Feat<Var>) -> Result<Feat<Var>> {
        let w = self.param(&merge_spec(name, x.ch))?;
        let h = merge_on_tape(&mut self.tape, x.h, x.dims, w);
        Ok(Feat {
            h,
            dims: x.dims.map(|d| d.div_ceil(2)),
            ch: 2 * x.ch,
        })
    }

    fn expand(&mut self, name: &str, x: &Feat<Var>) -> Result<Feat<Var>> {
        if !x.ch.is_multiple_of(2) {
            return Err(HrstError::Shape(format!("cannot expand {} channels", x.ch)));
        }
        let w = self.param(&expand_spec(name, x.ch))?;
        let h = expand_on_tape(&mut self.tape, x.h, x.dims, w);
        Ok(Feat {
            h,
            dims: x.dims.map(|d| 2 * d),
            ch: x.ch / 2,
        })
    }

    fn concat(&mut self, _name: &str, xs: &[Feat<Var>]) -> Result<Feat<Var>> {
        let vars: Vec<Var> = xs.iter().map(|f| f.h).collect();
        Ok(Feat {
            h: self.tape.concat_cols(&vars),
            dims: xs[0].dims,
            ch: xs.iter().map(|f| f.ch).sum(),
        })
    }

    fn residual(&mut self, prefix: &str, x: &Feat<Var>, out: usize) -> Result<Feat<Var>> {
        let v = self.params_of(&residual_specs(prefix, x.ch, out))?;
        let skip = (v.len() == 4).then(|| (v[2], v[3]));
        let h = residual_on_tape(&mut self.tape, x.h, x.dims, v[0], v[1], skip);
        Ok(Feat {
            h,
            dims: x.dims,
            ch: out,
        })
    }

    fn output(&mut self, name: &str, x: &Feat<Var>, classes: usize) -> Result<Feat<Var>> {
        let v = self.params_of(&output_specs(name, classes, x.ch))?;
        let h = self.tape.linear(x.h, v[0], Some(v[1]));
        Ok(Feat {
            h,
            dims: x.dims,
            ch: classes,
        })
    }
}

/// Token-major `[tokens, C]` to channel-first volume data.
pub(crate) fn mat_to_volume(dims: [usize; 3], m: &Mat, spacing: [f32; 3]) -> Result<VolumeTensor> {
    let n = m.rows;
    let mut data = vec![0.0f32; n * m.cols];
    for t in 0..n {
        for (c, &v) in m.row(t).iter().enumerate() {
            data[c * n + t] = v as f32;
        }
    }
    VolumeTensor::with_spacing(m.cols, dims, spacing, data)
}
