use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::bias_table_rows;
use crate::error::{HrstError, Result};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Normal(0, 0.02) truncated at two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: &[usize], init: Init) -> Self {
        Self {
            name,
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn family(&self) -> ParamFamily {
        ParamFamily::of(&self.name)
    }
}

/// Coarse grouping of parameters, used for stratified gradient checks and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamFamily {
    Embed,
    Qkv,
    BiasTable,
    LayerNorm,
    Mlp,
    Merge,
    Expand,
    Residual,
    Head,
}

impl ParamFamily {
    pub const ALL: [ParamFamily; 9] = [
        Self::Embed,
        Self::Qkv,
        Self::BiasTable,
        Self::LayerNorm,
        Self::Mlp,
        Self::Merge,
        Self::Expand,
        Self::Residual,
        Self::Head,
    ];

    pub fn of(name: &str) -> Self {
        if name.starts_with("embed.") {
            Self::Embed
        } else if name.starts_with("head.out.") {
            Self::Head
        } else if name.contains(".attn.rel_bias") {
            Self::BiasTable
        } else if name.contains(".attn.") {
            Self::Qkv
        } else if name.contains(".norm") {
            Self::LayerNorm
        } else if name.contains(".mlp.") {
            Self::Mlp
        } else if name.contains(".merge") || name.contains(".down") {
            Self::Merge
        } else if name.contains(".up") || name.contains(".expand") {
            Self::Expand
        } else {
            Self::Residual
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Embed => "embed",
            Self::Qkv => "qkv",
            Self::BiasTable => "bias_table",
            Self::LayerNorm => "layer_norm",
            Self::Mlp => "mlp",
            Self::Merge => "merge",
            Self::Expand => "expand",
            Self::Residual => "residual",
            Self::Head => "head",
        }
    }
}

impl fmt::Display for ParamFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub(crate) fn embed_specs(c: usize, in_ch: usize, patch: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            "embed.weight".into(),
            &[c, in_ch * patch.pow(3)],
            Init::TruncNormal,
        ),
        ParamSpec::new("embed.bias".into(), &[c], Init::Zeros),
    ]
}

fn affine(prefix: &str, out: usize, inp: usize, out_specs: &mut Vec<ParamSpec>) {
    out_specs.push(ParamSpec::new(
        format!("{prefix}.weight"),
        &[out, inp],
        Init::TruncNormal,
    ));
    out_specs.push(ParamSpec::new(
        format!("{prefix}.bias"),
        &[out],
        Init::Zeros,
    ));
}

fn norm(prefix: &str, c: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec::new(format!("{prefix}.gamma"), &[c], Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.beta"), &[c], Init::Zeros));
}

/// One Swin layer, in the order the executor loads them.
pub(crate) fn swin_layer_specs(
    prefix: &str,
    c: usize,
    heads: usize,
    window: usize,
    mlp_ratio: usize,
) -> Vec<ParamSpec> {
    let mut s = Vec::with_capacity(16);
    norm(&format!("{prefix}.norm1"), c, &mut s);
    for p in ["q", "k", "v", "o"] {
        affine(&format!("{prefix}.attn.{p}"), c, c, &mut s);
    }
    s.push(ParamSpec::new(
        format!("{prefix}.attn.rel_bias"),
        &[bias_table_rows(window), heads],
        Init::Zeros,
    ));
    norm(&format!("{prefix}.norm2"), c, &mut s);
    affine(&format!("{prefix}.mlp.fc1"), mlp_ratio * c, c, &mut s);
    affine(&format!("{prefix}.mlp.fc2"), c, mlp_ratio * c, &mut s);
    s
}

pub(crate) fn merge_spec(name: &str, c: usize) -> ParamSpec {
    ParamSpec::new(format!("{name}.weight"), &[2 * c, 8 * c], Init::TruncNormal)
}

pub(crate) fn expand_spec(name: &str, c: usize) -> ParamSpec {
    ParamSpec::new(format!("{name}.weight"), &[4 * c, c], Init::TruncNormal)
}

/// Two 3³ convs (no bias, each followed by instance norm) plus a 1³ projection skip when the
/// channel count changes.
pub(crate) fn residual_specs(prefix: &str, cin: usize, cout: usize) -> Vec<ParamSpec> {
    let mut s = vec![
        ParamSpec::new(
            format!("{prefix}.conv1.weight"),
            &[cout, 27 * cin],
            Init::TruncNormal,
        ),
        ParamSpec::new(
            format!("{prefix}.conv2.weight"),
            &[cout, 27 * cout],
            Init::TruncNormal,
        ),
    ];
    if cin != cout {
        affine(&format!("{prefix}.skip"), cout, cin, &mut s);
    }
    s
}

pub(crate) fn output_specs(prefix: &str, classes: usize, c: usize) -> Vec<ParamSpec> {
    let mut s = Vec::with_capacity(2);
    affine(prefix, classes, c, &mut s);
    s
}

/// A named tensor in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns when viewed as a matrix: vectors become a single row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
            [] => (1, 1),
        }
    }
}

/// All parameters of a network, ordered as in its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn from_tensors(tensors: Vec<ParamTensor>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tensors.len());
        for (i, t) in tensors.iter().enumerate() {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(HrstError::Shape(format!(
                    "parameter {} has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            if index.insert(t.name.clone(), i).is_some() {
                return Err(HrstError::Shape(format!("duplicate parameter {}", t.name)));
            }
        }
        Ok(Self { tensors, index })
    }

    /// Seeded initialisation following each spec's [`Init`].
    pub fn init(layout: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let tensors = layout
            .iter()
            .map(|s| {
                let n = s.numel();
                let data = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::TruncNormal => (0..n)
                        .map(|_| loop {
                            let v: f64 = normal.sample(&mut rng);
                            if v.abs() <= 2.0 * INIT_STD {
                                break v as f32;
                            }
                        })
                        .collect(),
                };
                ParamTensor {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data,
                }
            })
            .collect();
        Self::from_tensors(tensors).expect("layout names are unique")
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(ParamTensor::numel).sum()
    }

    /// Checks names, order and shapes against a layout.
    pub fn check_layout(&self, layout: &[ParamSpec]) -> Result<()> {
        if layout.len() != self.tensors.len() {
            return Err(HrstError::Shape(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (s, t) in layout.iter().zip(&self.tensors) {
            if s.name != t.name || s.shape != t.shape {
                return Err(HrstError::Shape(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    s.name, s.shape, t.name, t.shape
                )));
            }
        }
        Ok(())
    }
}
