use serde::{Deserialize, Serialize};

use super::plan::{ParamRole, PhantomModel};
use super::spec::{BlockKind, UNetSpec};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

const RESNET_EPS: f64 = 1e-5;
const TRANSFORMER_NORM_EPS: f64 = 1e-6;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitOptions {
    /// Zero the final output convolution so an untrained model predicts 0.
    pub zero_output: bool,
    /// Refuse to allocate models larger than this many parameters.
    pub max_params: usize,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            zero_output: true,
            max_params: 64_000_000,
        }
    }
}

/// A materialized U-Net: a validated spec plus its parameters.
#[derive(Debug, Clone)]
pub struct UNet {
    spec: UNetSpec,
    params: ParamStore,
}

/// Cross-attention probabilities recorded during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTap {
    /// `[N * heads, H * W, L]`.
    pub probs: Var,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Noise prediction, same shape as the input latents.
    pub noise: Var,
    /// Mid-block output.
    pub mid: Var,
    /// Output of the last up block, before the output head.
    pub last_up: Var,
    /// One entry per cross-attention layer, keyed by its parameter prefix.
    pub cross_attention: Vec<(String, AttentionTap)>,
}

/// Initializes a model with default options.
pub fn materialize(spec: &UNetSpec, seed: u64) -> Result<UNet> {
    materialize_with(spec, seed, InitOptions::default())
}

/// Fan-in scaled normal weights, unit norm scales, zero biases. Every tensor
/// draws from a stream keyed by its name, so tensors shared between layouts
/// initialize identically.
pub fn materialize_with(spec: &UNetSpec, seed: u64, opts: InitOptions) -> Result<UNet> {
    let phantom = PhantomModel::new(spec)?;
    if phantom.total() > opts.max_params {
        return Err(Error::Resource(format!(
            "model has {} parameters, above the materialization limit of {}; use phantom counting instead",
            phantom.total(),
            opts.max_params
        )));
    }
    let mut params = ParamStore::new();
    for e in phantom.entries() {
        let t = match e.role {
            ParamRole::Weight if opts.zero_output && e.name == "conv_out.weight" => Tensor::zeros(&e.shape),
            ParamRole::Weight => {
                let std = 1.0 / (e.fan_in() as f64).sqrt();
                Tensor::randn(&e.shape, std, &mut rng::stream(seed, &e.name, 0))
            }
            ParamRole::NormScale => Tensor::full(&e.shape, 1.0),
            ParamRole::Bias | ParamRole::NormShift => Tensor::zeros(&e.shape),
        };
        params.insert(e.name.clone(), t);
    }
    Ok(UNet { spec: spec.clone(), params })
}

/// Sinusoidal timestep features `[N, dim]` (cosine half first).
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; timesteps.len() * dim];
    for (i, &t) in timesteps.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[i * dim + j] = arg.cos();
            out[i * dim + half + j] = arg.sin();
        }
    }
    Tensor::from_parts(vec![timesteps.len(), dim], out)
}

struct Ctx<'a> {
    model: &'a UNet,
    temb: Var,
    context: Var,
    taps: Vec<(String, AttentionTap)>,
}

impl UNet {
    /// Wraps existing parameters, checking they match the spec's census.
    pub fn from_parts(spec: UNetSpec, params: ParamStore) -> Result<Self> {
        let phantom = PhantomModel::new(&spec)?;
        if phantom.entries().len() != params.len() {
            return Err(Error::Validation(format!(
                "spec expects {} tensors, got {}",
                phantom.entries().len(),
                params.len()
            )));
        }
        for e in phantom.entries() {
            match params.get(&e.name) {
                Some(t) if t.shape() == e.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Validation(format!(
                        "parameter `{}` has shape {:?}, spec expects {:?}",
                        e.name,
                        t.shape(),
                        e.shape
                    )))
                }
                None => return Err(Error::Validation(format!("missing parameter `{}`", e.name))),
            }
        }
        Ok(UNet { spec, params })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Freezes (or unfreezes) all parameters for graph construction.
    pub fn set_trainable(&mut self, on: bool) {
        self.params.set_trainable(on);
    }

    /// Records a forward pass. `x` is `[N, 4, H, W]`, `context` `[N, L, D]`.
    pub fn forward(&self, g: &mut Graph, x: Var, timesteps: &[usize], context: Var) -> Result<ForwardOutput> {
        let spec = &self.spec;
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != spec.in_channels {
            return Err(Error::Dimension(format!(
                "expected input [N, {}, H, W], got {xs:?}",
                spec.in_channels
            )));
        }
        let (n, h, w) = (xs[0], xs[2], xs[3]);
        let f = 1 << spec.depth();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Dimension(format!("input size {h}x{w} must be a multiple of {f}")));
        }
        if timesteps.len() != n {
            return Err(Error::Dimension(format!("{n} samples but {} timesteps", timesteps.len())));
        }
        let cs = g.shape(context).to_vec();
        if cs.len() != 3 || cs[0] != n || cs[2] != spec.context_dim {
            return Err(Error::Dimension(format!(
                "expected context [{n}, L, {}], got {cs:?}",
                spec.context_dim
            )));
        }

        let c0 = spec.channel_schedule[0];
        let tfeat = g.input(timestep_embedding(timesteps, c0));
        let t1 = self.lin(g, tfeat, "time_embedding.linear_1", true)?;
        let t1 = g.silu(t1);
        let temb = self.lin(g, t1, "time_embedding.linear_2", true)?;
        let temb = g.silu(temb);
        let mut cx = Ctx {
            model: self,
            temb,
            context,
            taps: Vec::new(),
        };

        let mut hcur = self.conv(g, x, "conv_in", 1, 1)?;
        let mut skips = vec![hcur];
        for (i, blk) in spec.down_blocks.iter().enumerate() {
            for k in 0..blk.rt_pairs {
                hcur = cx.resnet(g, hcur, &format!("down_blocks.{i}.resnets.{k}"))?;
                if blk.kind.has_attention() {
                    hcur = cx.transformer(g, hcur, &format!("down_blocks.{i}.attentions.{k}"))?;
                }
                skips.push(hcur);
            }
            if blk.has_downsample {
                hcur = self.conv(g, hcur, &format!("down_blocks.{i}.downsamplers.0.conv"), 2, 1)?;
                skips.push(hcur);
            }
        }

        hcur = cx.resnet(g, hcur, "mid_block.resnets.0")?;
        hcur = cx.transformer(g, hcur, "mid_block.attentions.0")?;
        hcur = cx.resnet(g, hcur, "mid_block.resnets.1")?;
        let mid = hcur;

        for (j, blk) in spec.up_blocks.iter().enumerate() {
            for k in 0..blk.rt_pairs {
                let skip = skips.pop().expect("validated skip plan");
                hcur = g.concat_channels(&[hcur, skip]);
                hcur = cx.resnet(g, hcur, &format!("up_blocks.{j}.resnets.{k}"))?;
                if blk.kind == BlockKind::CrossAttnUp {
                    hcur = cx.transformer(g, hcur, &format!("up_blocks.{j}.attentions.{k}"))?;
                }
            }
            if blk.has_upsample {
                hcur = g.upsample2x(hcur);
                hcur = self.conv(g, hcur, &format!("up_blocks.{j}.upsamplers.0.conv"), 1, 1)?;
            }
        }
        let last_up = hcur;

        let out = self.group_norm(g, hcur, "conv_norm_out", RESNET_EPS)?;
        let out = g.silu(out);
        let noise = self.conv(g, out, "conv_out", 1, 1)?;
        Ok(ForwardOutput {
            noise,
            mid,
            last_up,
            cross_attention: cx.taps,
        })
    }

    /// Gradient-free noise prediction.
    pub fn predict(&self, x: &Tensor, timesteps: &[usize], context: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let cv = g.input(context.clone());
        let out = self.forward(&mut g, xv, timesteps, cv)?;
        Ok(g.value(out.noise).clone())
    }

    fn p(&self, g: &mut Graph, name: String) -> Result<Var> {
        g.param(&self.params, &name)
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(g, format!("{name}.weight"))?;
        let b = self.p(g, format!("{name}.bias"))?;
        Ok(g.conv2d(x, w, Some(b), stride, pad))
    }

    fn lin(&self, g: &mut Graph, x: Var, name: &str, bias: bool) -> Result<Var> {
        let w = self.p(g, format!("{name}.weight"))?;
        let b = if bias { Some(self.p(g, format!("{name}.bias"))?) } else { None };
        Ok(g.linear(x, w, b))
    }

    fn group_norm(&self, g: &mut Graph, x: Var, name: &str, eps: f64) -> Result<Var> {
        let s = self.p(g, format!("{name}.weight"))?;
        let b = self.p(g, format!("{name}.bias"))?;
        Ok(g.group_norm(x, s, b, self.spec.norm_groups, eps))
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let s = self.p(g, format!("{name}.weight"))?;
        let b = self.p(g, format!("{name}.bias"))?;
        Ok(g.layer_norm(x, s, b, LAYER_NORM_EPS))
    }

    /// Multi-head attention of `q_in [N, S, C]` over `kv_in [N, L, D]`.
    /// Returns the projected output and the probabilities `[N*heads, S, L]`.
    fn attention(&self, g: &mut Graph, q_in: Var, kv_in: Var, p: &str) -> Result<(Var, Var)> {
        let heads = self.spec.num_heads;
        let q = self.lin(g, q_in, &format!("{p}.to_q"), false)?;
        let k = self.lin(g, kv_in, &format!("{p}.to_k"), false)?;
        let v = self.lin(g, kv_in, &format!("{p}.to_v"), false)?;
        let (n, s, c) = {
            let sh = g.shape(q);
            (sh[0], sh[1], sh[2])
        };
        let l = g.shape(k)[1];
        let d = c / heads;
        let split = |g: &mut Graph, t: Var, len: usize| {
            let t = g.reshape(t, &[n, len, heads, d]);
            let t = g.permute(t, [0, 2, 1, 3]);
            g.reshape(t, &[n * heads, len, d])
        };
        let q = split(g, q, s);
        let k = split(g, k, l);
        let v = split(g, v, l);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let probs = g.softmax_last(scores);
        let o = g.bmm(probs, v, false);
        let o = g.reshape(o, &[n, heads, s, d]);
        let o = g.permute(o, [0, 2, 1, 3]);
        let o = g.reshape(o, &[n, s, c]);
        let o = self.lin(g, o, &format!("{p}.to_out.0"), true)?;
        Ok((o, probs))
    }
}

impl Ctx<'_> {
    fn resnet(&mut self, g: &mut Graph, x: Var, p: &str) -> Result<Var> {
        let m = self.model;
        let h = m.group_norm(g, x, &format!("{p}.norm1"), RESNET_EPS)?;
        let h = g.silu(h);
        let h = m.conv(g, h, &format!("{p}.conv1"), 1, 1)?;
        let t = m.lin(g, self.temb, &format!("{p}.time_emb_proj"), true)?;
        let h = g.add_channel(h, t);
        let h = m.group_norm(g, h, &format!("{p}.norm2"), RESNET_EPS)?;
        let h = g.silu(h);
        let h = m.conv(g, h, &format!("{p}.conv2"), 1, 1)?;
        let shortcut = if m.params.contains(&format!("{p}.conv_shortcut.weight")) {
            m.conv(g, x, &format!("{p}.conv_shortcut"), 1, 0)?
        } else {
            x
        };
        Ok(g.add(shortcut, h))
    }

    fn transformer(&mut self, g: &mut Graph, x: Var, p: &str) -> Result<Var> {
        let m = self.model;
        let sh = g.shape(x).to_vec();
        let (n, c, hh, ww) = (sh[0], sh[1], sh[2], sh[3]);
        let h = m.group_norm(g, x, &format!("{p}.norm"), TRANSFORMER_NORM_EPS)?;
        let h = m.conv(g, h, &format!("{p}.proj_in"), 1, 0)?;
        let h = g.permute(h, [0, 2, 3, 1]);
        let mut tok = g.reshape(h, &[n, hh * ww, c]);

        let t = format!("{p}.transformer_blocks.0");
        let a = m.layer_norm(g, tok, &format!("{t}.norm1"))?;
        let (a, _) = m.attention(g, a, a, &format!("{t}.attn1"))?;
        tok = g.add(tok, a);
        let a = m.layer_norm(g, tok, &format!("{t}.norm2"))?;
        let (a, probs) = m.attention(g, a, self.context, &format!("{t}.attn2"))?;
        self.taps.push((
            format!("{t}.attn2"),
            AttentionTap {
                probs,
                heads: m.spec.num_heads,
                height: hh,
                width: ww,
            },
        ));
        tok = g.add(tok, a);
        let a = m.layer_norm(g, tok, &format!("{t}.norm3"))?;
        let proj = m.lin(g, a, &format!("{t}.ff.net.0.proj"), true)?;
        let hidden = g.narrow_last(proj, 0, 4 * c);
        let gate = g.narrow_last(proj, 4 * c, 4 * c);
        let gate = g.gelu(gate);
        let ff = g.mul(hidden, gate);
        let ff = m.lin(g, ff, &format!("{t}.ff.net.2"), true)?;
        tok = g.add(tok, ff);

        let h = g.reshape(tok, &[n, hh, ww, c]);
        let h = g.permute(h, [0, 3, 1, 2]);
        let h = m.conv(g, h, &format!("{p}.proj_out"), 1, 0)?;
        Ok(g.add(h, x))
    }
}

/// Spatial attention heatmap for one cross-attention layer and sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: String,
    pub sample: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `height * width` values in `[0, 1]`.
    pub values: Vec<f64>,
}

/// Cross-attention weights averaged over heads and tokens, min-max
/// normalized per map. Each token's weights are first renormalized over
/// spatial positions: the softmax runs over tokens, so a plain token average
/// would be the constant 1/L. A constant map is returned as all zeros.
pub fn export_attention_maps(
    model: &UNet,
    x: &Tensor,
    timesteps: &[usize],
    context: &Tensor,
) -> Result<Vec<AttentionMap>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let cv = g.input(context.clone());
    let out = model.forward(&mut g, xv, timesteps, cv)?;
    let n = x.dim(0);
    let mut maps = Vec::new();
    for (layer, tap) in &out.cross_attention {
        let probs = g.value(tap.probs);
        let (s, l) = (probs.dim(1), probs.dim(2));
        for sample in 0..n {
            let mut vals = vec![0.0; s];
            for head in 0..tap.heads {
                let block = &probs.data()[(sample * tap.heads + head) * s * l..][..s * l];
                for tok in 0..l {
                    let col: f64 = (0..s).map(|pos| block[pos * l + tok]).sum();
                    for (pos, v) in vals.iter_mut().enumerate() {
                        *v += block[pos * l + tok] / col;
                    }
                }
            }
            for v in &mut vals {
                *v /= (tap.heads * l) as f64;
            }
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            for v in &mut vals {
                *v = if range > 1e-12 * hi.abs().max(1.0) { (*v - lo) / range } else { 0.0 };
            }
            maps.push(AttentionMap {
                layer: layer.clone(),
                sample,
                height: tap.height,
                width: tap.width,
                values: vals,
            });
        }
    }
    Ok(maps)
}
