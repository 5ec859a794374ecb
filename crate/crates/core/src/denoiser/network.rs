use std::collections::HashMap;

use super::{DenoiserConfig, ParameterSet};
use crate::autograd::{Tape, Var};
use crate::diffusion::{TimestepVector, TrackLatents};
use crate::error::{shape_mismatch, Error, Result};
use crate::prompt::PromptTokens;

/// Sinusoidal features of a timestep: `[sin(t·f_0), …, sin(t·f_{E/2−1}), cos(t·f_0), …]`
/// with `f_i = 10000^(−i/(E/2))`.
pub fn sinusoid(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    freqs.iter().map(|f| (t * f).sin()).chain(freqs.iter().map(|f| (t * f).cos())).collect()
}

/// One recorded forward evaluation, kept alive so the same graph can be
/// differentiated.
pub struct ForwardPass {
    tape: Tape,
    leaves: Vec<Var>,
    output: Var,
    prediction: TrackLatents,
}

struct Graph<'a> {
    tape: Tape,
    vars: HashMap<&'a str, Var>,
    groups: usize,
}

impl<'a> Graph<'a> {
    fn p(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Var {
        let (w, b) = (self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")));
        self.tape.conv1d(x, w, b, stride, pad)
    }

    fn dense(&mut self, x: Var, name: &str) -> Var {
        let (w, b) = (self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")));
        self.tape.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, name: &str) -> Var {
        let (g, b) = (self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")));
        self.tape.group_norm(x, g, b, self.groups)
    }

    /// conv → norm → scale/shift → SiLU, added back onto the input.
    fn resblock(&mut self, x: Var, prefix: &str, cond: Var) -> Var {
        let h = self.conv(x, &format!("{prefix}.conv"), 1, 1);
        let h = self.norm(h, &format!("{prefix}.norm"));
        let ss = self.dense(cond, &format!("{prefix}.film"));
        let h = self.tape.film(h, ss);
        let h = self.tape.silu(h);
        self.tape.add(x, h)
    }

    fn attention(&mut self, x: Var, hidden: usize) -> Var {
        let h = self.norm(x, "mid.attn.norm");
        let q = self.conv(h, "mid.attn.q", 1, 0);
        let k = self.conv(h, "mid.attn.k", 1, 0);
        let v = self.conv(h, "mid.attn.v", 1, 0);
        let qt = self.tape.transpose(q);
        let scores = self.tape.matmul(qt, k);
        let scores = self.tape.scale(scores, 1.0 / (hidden as f64).sqrt());
        // Row i holds query frame i's weights over key frames.
        let weights = self.tape.softmax_rows(scores);
        let wt = self.tape.transpose(weights);
        let mixed = self.tape.matmul(v, wt);
        let out = self.conv(mixed, "mid.attn.proj", 1, 0);
        self.tape.add(x, out)
    }
}

/// Builds the conditioning vector on the tape: per-track timestep
/// projections concatenated, then the pooled prompt embedding.
fn timestep_segment(g: &mut Graph<'_>, cfg: &DenoiserConfig, tvec: &TimestepVector) -> Vec<Var> {
    tvec.steps()
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let s = g.tape.leaf(sinusoid(t as f64, cfg.timestep_embed_dim), &[cfg.timestep_embed_dim]);
            g.dense(s, &format!("temb.{i}"))
        })
        .collect()
}

fn check_inputs(cfg: &DenoiserConfig, z: &TrackLatents, tvec: &TimestepVector, prompt: &PromptTokens) -> Result<()> {
    z.check_shape(cfg.latent_shape())?;
    if tvec.len() != cfg.tracks {
        return Err(shape_mismatch(cfg.tracks, tvec.len()));
    }
    prompt.validate(cfg.prompt_vocab_size)?;
    if !z.is_finite() {
        return Err(Error::NonFinite("denoiser input".into()));
    }
    Ok(())
}

fn new_graph<'a>(cfg: &DenoiserConfig, params: &'a ParameterSet) -> (Graph<'a>, Vec<Var>) {
    let mut tape = Tape::new();
    let mut vars = HashMap::with_capacity(params.len());
    let mut leaves = Vec::with_capacity(params.len());
    for p in params.iter() {
        let v = tape.leaf(p.data.clone(), &p.shape);
        vars.insert(p.name.as_str(), v);
        leaves.push(v);
    }
    (
        Graph {
            tape,
            vars,
            groups: cfg.groups(),
        },
        leaves,
    )
}

/// Projected timestep embeddings, `K·E` values.
pub fn embed_timesteps(cfg: &DenoiserConfig, params: &ParameterSet, tvec: &TimestepVector) -> Result<Vec<f64>> {
    if tvec.len() != cfg.tracks {
        return Err(shape_mismatch(cfg.tracks, tvec.len()));
    }
    let (mut g, _) = new_graph(cfg, params);
    let parts = timestep_segment(&mut g, cfg, tvec);
    let all = g.tape.concat(&parts);
    Ok(g.tape.value(all).to_vec())
}

pub fn forward_pass(
    cfg: &DenoiserConfig,
    params: &ParameterSet,
    z: &TrackLatents,
    tvec: &TimestepVector,
    prompt: &PromptTokens,
) -> Result<ForwardPass> {
    check_inputs(cfg, z, tvec, prompt)?;
    let (mut g, leaves) = new_graph(cfg, params);
    let h = cfg.hidden_width;

    let mut cond_parts = timestep_segment(&mut g, cfg, tvec);
    let gains: Vec<Var> = cond_parts
        .iter()
        .map(|&temb| {
            let (w, b) = (g.p("skip.weight"), g.p("skip.bias"));
            g.tape.linear(temb, w, b)
        })
        .collect();
    let ids: Vec<usize> = prompt.ids().into_iter().map(|id| id as usize).collect();
    let table = g.p("prompt.embedding");
    cond_parts.push(g.tape.embed_mean(table, &ids));
    let cond_in = g.tape.concat(&cond_parts);
    let cond = g.dense(cond_in, "cond");
    let cond = g.tape.silu(cond);

    let (channels, frames, data) = z.channel_view();
    let input = g.tape.leaf(data.to_vec(), &[channels, frames]);
    let mut x = g.conv(input, "stem", 1, 1);
    let mut skips = Vec::with_capacity(cfg.depth);
    for j in 0..cfg.depth {
        x = g.resblock(x, &format!("down.{j}"), cond);
        skips.push(x);
        x = g.conv(x, &format!("down.{j}.downsample"), 2, 1);
    }
    x = g.resblock(x, "mid", cond);
    x = g.attention(x, h);
    for j in (0..cfg.depth).rev() {
        let up = g.tape.upsample2(x);
        let up = g.conv(up, &format!("up.{j}.upsample"), 1, 1);
        let cat = g.tape.concat(&[up, skips[j]]);
        let m = g.conv(cat, &format!("up.{j}.merge"), 1, 1);
        let m = g.norm(m, &format!("up.{j}.norm"));
        let ss = g.dense(cond, &format!("up.{j}.film"));
        let m = g.tape.film(m, ss);
        let m = g.tape.silu(m);
        x = g.tape.add(up, m);
    }
    let body = g.conv(x, "out", 1, 1);
    // Each track's own input, scaled per channel by a gain read from that
    // track's timestep embedding; the stem alone squeezes K·D channels into H.
    let gain = g.tape.concat(&gains);
    let direct = g.tape.scale_channels(input, gain);
    let output = g.tape.add(body, direct);

    let values = g.tape.value(output);
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("denoiser output".into()));
    }
    let prediction = TrackLatents::from_vec(cfg.latent_shape(), values.to_vec())?;
    Ok(ForwardPass {
        tape: g.tape,
        leaves,
        output,
        prediction,
    })
}

impl ForwardPass {
    pub fn prediction(&self) -> &TrackLatents {
        &self.prediction
    }

    pub fn into_prediction(self) -> TrackLatents {
        self.prediction
    }

    /// Gradients of a scalar loss given `∂loss/∂prediction`, laid out like `params`.
    pub fn backward(&self, params: &ParameterSet, loss_grad: &TrackLatents) -> Result<ParameterSet> {
        loss_grad.check_shape(self.prediction.shape())?;
        let grads = self.tape.backward(self.output, loss_grad.data())?;
        let mut out = params.zeros_like();
        for (p, &leaf) in out.iter_mut().zip(&self.leaves) {
            if let Some(g) = &grads[leaf.index()] {
                p.data.copy_from_slice(g);
            }
        }
        Ok(out)
    }
}
