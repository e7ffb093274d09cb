use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PpnPooling};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ppn,
    Detector,
}

pub const BACKBONE_PREFIX: &str = "backbone.";

/// Normalization statistics stored with the weights but never optimized.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    KaimingNormal,
    XavierNormal,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitScheme,
    pub fan_in: usize,
    pub fan_out: usize,
}

fn conv(specs: &mut Vec<ParamSpec>, name: &str, out: usize, inp: usize, k: usize, init: InitScheme) {
    specs.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![out, inp, k, k],
        init,
        fan_in: inp * k * k,
        fan_out: out * k * k,
    });
    specs.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![out],
        init: InitScheme::Constant(0.0),
        fan_in: inp * k * k,
        fan_out: out * k * k,
    });
}

/// Backbone convolution: a bias-free conv followed by batch-norm scale,
/// shift and running statistics, or a plain conv with bias when
/// normalization is off.
fn conv_norm(specs: &mut Vec<ParamSpec>, name: &str, out: usize, inp: usize, k: usize, normalized: bool) {
    if !normalized {
        conv(specs, name, out, inp, k, InitScheme::KaimingNormal);
        return;
    }
    specs.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![out, inp, k, k],
        init: InitScheme::KaimingNormal,
        fan_in: inp * k * k,
        fan_out: out * k * k,
    });
    for (suffix, v) in [
        ("norm.weight", 1.0),
        ("norm.bias", 0.0),
        ("norm.running_mean", 0.0),
        ("norm.running_var", 1.0),
    ] {
        specs.push(ParamSpec {
            name: format!("{name}.{suffix}"),
            shape: vec![out],
            init: InitScheme::Constant(v),
            fan_in: out,
            fan_out: out,
        });
    }
}

/// Every parameter of a model, in a fixed order. Backbone convolutions use
/// Kaiming normal initialization, head layers Xavier normal, biases zero,
/// normalization scales one.
pub fn param_specs(cfg: &ModelConfig, kind: ModelKind) -> Vec<ParamSpec> {
    use InitScheme::*;
    let b = &cfg.backbone;
    let n = b.batch_norm;
    let mut s = Vec::new();
    conv_norm(&mut s, "backbone.stem", b.stem_width, 3, 3, n);
    let mut prev = b.stem_width;
    for (i, (&w, &blocks)) in b.stage_widths.iter().zip(&b.stage_blocks).enumerate() {
        conv_norm(&mut s, &format!("backbone.stage{i}.down"), w, prev, 3, n);
        for j in 0..blocks {
            conv_norm(&mut s, &format!("backbone.stage{i}.block{j}.conv1"), w, w, 3, n);
            conv_norm(&mut s, &format!("backbone.stage{i}.block{j}.conv2"), w, w, 3, n);
        }
        if blocks > 0 {
            conv_norm(&mut s, &format!("backbone.stage{i}.agg"), w, w * (blocks + 1), 1, n);
        }
        prev = w;
    }
    let widths = &b.stage_widths;
    for i in (0..widths.len() - 1).rev() {
        conv_norm(
            &mut s,
            &format!("backbone.decoder.up{i}.proj"),
            widths[i],
            widths[i + 1],
            1,
            n,
        );
        conv_norm(
            &mut s,
            &format!("backbone.decoder.up{i}.fuse"),
            widths[i],
            widths[i],
            3,
            n,
        );
    }
    if b.output_stride == 1 {
        conv_norm(&mut s, "backbone.decoder.up_stem.proj", b.stem_width, widths[0], 1, n);
        conv_norm(
            &mut s,
            "backbone.decoder.up_stem.fuse",
            b.stem_width,
            b.stem_width,
            3,
            n,
        );
    }
    let out = decoder_width(cfg);
    let hw = cfg.heads.head_width;
    match kind {
        ModelKind::Ppn => {
            let inp = match cfg.heads.ppn_pooling {
                PpnPooling::ChannelVector => out,
                PpnPooling::Scalar => 1,
            };
            s.push(ParamSpec {
                name: "ppn_head.linear.weight".into(),
                shape: vec![1, inp],
                init: XavierNormal,
                fan_in: inp,
                fan_out: 1,
            });
            s.push(ParamSpec {
                name: "ppn_head.linear.bias".into(),
                shape: vec![1],
                init: Constant(0.0),
                fan_in: inp,
                fan_out: 1,
            });
        }
        ModelKind::Detector => {
            conv(&mut s, "loc_head.conv1", hw, out, 3, XavierNormal);
            conv(&mut s, "loc_head.conv2", 1, hw, 1, XavierNormal);
            s.last_mut().unwrap().init = Constant(cfg.heads.heatmap_bias_init);
            conv(&mut s, "cls_head.conv1", hw, *widths.last().unwrap(), 3, XavierNormal);
            conv(&mut s, "cls_head.conv2", 1, hw, 1, XavierNormal);
        }
    }
    s
}

/// Channel count of the finest decoder map.
pub fn decoder_width(cfg: &ModelConfig) -> usize {
    if cfg.backbone.output_stride == 1 {
        cfg.backbone.stem_width
    } else {
        cfg.backbone.stage_widths[0]
    }
}

fn init_tensor(spec: &ParamSpec, seed: u64, dtype: DType) -> Result<Tensor> {
    let n: usize = spec.shape.iter().product();
    let data: Vec<f64> = match spec.init {
        InitScheme::Constant(v) => vec![v; n],
        scheme => {
            let std = match scheme {
                InitScheme::KaimingNormal => (2.0 / spec.fan_in as f64).sqrt(),
                _ => (2.0 / (spec.fan_in + spec.fan_out) as f64).sqrt(),
            };
            let mut rng = herdcount_core::seed::rng(herdcount_core::seed::derive_seed(seed, &spec.name));
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        }
    };
    Ok(Tensor::from_vec(data, spec.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Named trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    /// Fresh parameters; each tensor is drawn from its own stream derived
    /// from `seed` and the parameter name.
    pub fn init(specs: &[ParamSpec], seed: u64, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for spec in specs {
            vars.insert(spec.name.clone(), Var::from_tensor(&init_tensor(spec, seed, dtype)?)?);
        }
        Ok(ParamStore { vars, dtype })
    }

    /// Builds a store from stored tensors, requiring an exact match in names
    /// and shapes.
    pub fn from_tensors(specs: &[ParamSpec], tensors: &BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        let mut vars = BTreeMap::new();
        for spec in specs {
            match tensors.get(&spec.name) {
                None => missing.push(spec.name.clone()),
                Some(t) if t.dims() != spec.shape.as_slice() => mismatched.push(spec.name.clone()),
                Some(t) => {
                    vars.insert(spec.name.clone(), Var::from_tensor(&t.to_dtype(dtype)?)?);
                }
            }
        }
        let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        mismatched.extend(tensors.keys().filter(|k| !known.contains(k.as_str())).cloned());
        if !missing.is_empty() || !mismatched.is_empty() {
            return Err(Error::Load { missing, mismatched });
        }
        Ok(ParamStore { vars, dtype })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not part of this model"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Trainable elements; running statistics are not counted.
    pub fn element_count(&self) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        self.get(name).set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Detached copies of every parameter.
    pub fn to_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}
