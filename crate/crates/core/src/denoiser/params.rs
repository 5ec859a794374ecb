use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::DenoiserConfig;
use crate::error::{shape_mismatch, Error, Result};
use crate::tensorfile::NamedTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Normal with standard deviation `1/√fan_in`.
    FanIn(usize),
    Embedding,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Parameter {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered, uniquely named parameter tensors. Gradients and optimizer
/// moments use the same type with the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    params: Vec<Parameter>,
}

pub(crate) fn conv(name: &str, cout: usize, cin: usize, k: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{name}.weight"), vec![cout, cin, k], Init::FanIn(cin * k)));
    out.push((format!("{name}.bias"), vec![cout], Init::Zeros));
}

fn dense(name: &str, m: usize, n: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{name}.weight"), vec![m, n], Init::FanIn(n)));
    out.push((format!("{name}.bias"), vec![m], Init::Zeros));
}

fn norm(name: &str, c: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{name}.weight"), vec![c], Init::Ones));
    out.push((format!("{name}.bias"), vec![c], Init::Zeros));
}

fn resblock(prefix: &str, cfg: &DenoiserConfig, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let h = cfg.hidden_width;
    conv(&format!("{prefix}.conv"), h, h, 3, out);
    norm(&format!("{prefix}.norm"), h, out);
    dense(&format!("{prefix}.film"), 2 * h, cfg.cond_mlp_width, out);
}

/// Every parameter of the network in a fixed order.
pub(crate) fn layout(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let (h, e) = (cfg.hidden_width, cfg.timestep_embed_dim);
    let kd = cfg.tracks * cfg.latent_channels;
    for i in 0..cfg.tracks {
        dense(&format!("temb.{i}"), e, e, &mut out);
    }
    out.push((
        "prompt.embedding".into(),
        vec![cfg.prompt_vocab_size, cfg.prompt_embed_dim],
        Init::Embedding,
    ));
    dense("cond", cfg.cond_mlp_width, cfg.tracks * e + cfg.prompt_embed_dim, &mut out);
    conv("stem", h, kd, 3, &mut out);
    for j in 0..cfg.depth {
        resblock(&format!("down.{j}"), cfg, &mut out);
        conv(&format!("down.{j}.downsample"), h, h, 3, &mut out);
    }
    resblock("mid", cfg, &mut out);
    norm("mid.attn.norm", h, &mut out);
    for p in ["q", "k", "v", "proj"] {
        conv(&format!("mid.attn.{p}"), h, h, 1, &mut out);
    }
    for j in (0..cfg.depth).rev() {
        conv(&format!("up.{j}.upsample"), h, h, 3, &mut out);
        conv(&format!("up.{j}.merge"), h, 2 * h, 3, &mut out);
        norm(&format!("up.{j}.norm"), h, &mut out);
        dense(&format!("up.{j}.film"), 2 * h, cfg.cond_mlp_width, &mut out);
    }
    out.push(("out.weight".into(), vec![kd, h, 3], Init::Zeros));
    out.push(("out.bias".into(), vec![kd], Init::Zeros));
    out.push(("skip.weight".into(), vec![cfg.latent_channels, e], Init::Zeros));
    out.push(("skip.bias".into(), vec![cfg.latent_channels], Init::Zeros));
    out
}

impl ParameterSet {
    pub(crate) fn from_layout<R: Rng + ?Sized>(layout: Vec<(String, Vec<usize>, Init)>, rng: &mut R) -> Self {
        let params = layout
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::FanIn(fan_in) => sample_normal(rng, n, 1.0 / (fan_in as f64).sqrt()),
                    Init::Embedding => sample_normal(rng, n, 0.02),
                };
                Parameter { name, shape, data }
            })
            .collect();
        Self { params }
    }

    pub fn from_parameters(params: Vec<Parameter>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for p in &params {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate parameter {}", p.name)));
            }
            let n: usize = p.shape.iter().product();
            if n != p.data.len() {
                return Err(shape_mismatch(n, p.data.len()));
            }
        }
        Ok(Self { params })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.data.len()],
                })
                .collect(),
        }
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::InvalidInput("parameter layouts differ".into()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Flat view in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.params.iter().flat_map(|p| p.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.params.iter_mut().flat_map(|p| p.data.iter_mut())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor::from_f64(format!("{prefix}{}", p.name), p.shape.clone(), &p.data))
            .collect()
    }

    /// Fills every parameter from `tensors` named `prefix + name`.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor], prefix: &str) -> Result<()> {
        for p in &mut self.params {
            let want = format!("{prefix}{}", p.name);
            let t = tensors
                .iter()
                .find(|t| t.name == want)
                .ok_or_else(|| Error::Format(format!("missing tensor {want}")))?;
            if t.dims != p.shape {
                return Err(shape_mismatch(format!("{:?}", p.shape), format!("{:?}", t.dims)));
            }
            p.data = t.to_f64();
        }
        Ok(())
    }
}

fn sample_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}
