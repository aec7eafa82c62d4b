//! Shape-only layer plan shared by parameter census, MAC accounting and the
//! materialized forward pass (which uses the same names).

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::spec::UNetSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    /// Top-level block the parameter belongs to, e.g. `down_blocks.1`.
    pub block: String,
}

impl ParamEntry {
    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn fan_in(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Conv { cin: usize, cout: usize, k: usize, stride: usize },
    Linear { inp: usize, out: usize, bias: bool },
    GroupNorm { channels: usize },
    LayerNorm { channels: usize },
    /// Score and aggregation products of one attention layer.
    Attention { q_len: usize, kv_len: usize, channels: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub block: String,
    pub kind: LayerKind,
    /// Output positions per sample (H·W for convs, tokens for linears).
    pub positions: usize,
}

impl Layer {
    pub fn params(&self) -> Vec<ParamEntry> {
        let entry = |suffix: &str, shape: Vec<usize>, role| ParamEntry {
            name: format!("{}.{suffix}", self.name),
            shape,
            role,
            block: self.block.clone(),
        };
        match self.kind {
            LayerKind::Conv { cin, cout, k, .. } => vec![
                entry("weight", vec![cout, cin, k, k], ParamRole::Weight),
                entry("bias", vec![cout], ParamRole::Bias),
            ],
            LayerKind::Linear { inp, out, bias } => {
                let mut v = vec![entry("weight", vec![out, inp], ParamRole::Weight)];
                if bias {
                    v.push(entry("bias", vec![out], ParamRole::Bias));
                }
                v
            }
            LayerKind::GroupNorm { channels } | LayerKind::LayerNorm { channels } => vec![
                entry("weight", vec![channels], ParamRole::NormScale),
                entry("bias", vec![channels], ParamRole::NormShift),
            ],
            LayerKind::Attention { .. } => Vec::new(),
        }
    }

    pub fn macs(&self, convention: MacConvention) -> u64 {
        let p = self.positions as u64;
        match self.kind {
            LayerKind::Conv { cin, cout, k, .. } => (k * k * cin * cout) as u64 * p,
            LayerKind::Linear { inp, out, .. } => (inp * out) as u64 * p,
            LayerKind::GroupNorm { .. } | LayerKind::LayerNorm { .. } => 0,
            LayerKind::Attention { q_len, kv_len, channels } => match convention {
                MacConvention::WeightLayers => 0,
                MacConvention::WithAttentionProducts => 2 * (q_len * kv_len * channels) as u64,
            },
        }
    }
}

/// Whether attention score/aggregation products count towards MACs.
/// `WeightLayers` counts only layers that own weights, the convention of the
/// common module-hook profilers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacConvention {
    #[default]
    WeightLayers,
    WithAttentionProducts,
}

/// Builds the ordered layer list for a spec at latent size `h`×`w` with a
/// context of `context_len` tokens.
pub fn layer_plan(spec: &UNetSpec, h: usize, w: usize, context_len: usize) -> Result<Vec<Layer>> {
    spec.validate()?;
    let depth = spec.depth();
    if h == 0 || w == 0 || h % (1 << depth) != 0 || w % (1 << depth) != 0 {
        return Err(Error::Dimension(format!(
            "latent size {h}x{w} must be a positive multiple of {}",
            1 << depth
        )));
    }
    let mut b = PlanBuilder {
        spec,
        layers: Vec::new(),
        block: String::new(),
        context_len,
    };
    let c0 = spec.channel_schedule[0];
    let temb = spec.time_embed_dim();
    let (mut h, mut w) = (h, w);

    b.block = "conv_in".into();
    b.conv("conv_in", spec.in_channels, c0, 3, 1, h * w);
    b.block = "time_embedding".into();
    b.linear("time_embedding.linear_1", c0, temb, 1);
    b.linear("time_embedding.linear_2", temb, temb, 1);

    for (i, blk) in spec.down_blocks.iter().enumerate() {
        let p = format!("down_blocks.{i}");
        b.block = p.clone();
        let mut cin = blk.in_channels;
        for k in 0..blk.rt_pairs {
            b.resnet(&format!("{p}.resnets.{k}"), cin, blk.out_channels, h * w);
            if blk.kind.has_attention() {
                b.transformer(&format!("{p}.attentions.{k}"), blk.out_channels, h * w);
            }
            cin = blk.out_channels;
        }
        if blk.has_downsample {
            h /= 2;
            w /= 2;
            b.conv(&format!("{p}.downsamplers.0.conv"), cin, cin, 3, 2, h * w);
        }
    }

    b.block = "mid_block".into();
    let mc = spec.mid_block.out_channels;
    b.resnet("mid_block.resnets.0", mc, mc, h * w);
    b.transformer("mid_block.attentions.0", mc, h * w);
    b.resnet("mid_block.resnets.1", mc, mc, h * w);

    let inputs = spec.up_resnet_inputs();
    for (j, blk) in spec.up_blocks.iter().enumerate() {
        let p = format!("up_blocks.{j}");
        b.block = p.clone();
        for k in 0..blk.rt_pairs {
            b.resnet(&format!("{p}.resnets.{k}"), inputs[j][k], blk.out_channels, h * w);
            if blk.kind.has_attention() {
                b.transformer(&format!("{p}.attentions.{k}"), blk.out_channels, h * w);
            }
        }
        if blk.has_upsample {
            h *= 2;
            w *= 2;
            b.conv(&format!("{p}.upsamplers.0.conv"), blk.out_channels, blk.out_channels, 3, 1, h * w);
        }
    }

    b.block = "conv_norm_out".into();
    b.push("conv_norm_out", LayerKind::GroupNorm { channels: c0 }, h * w);
    b.block = "conv_out".into();
    b.conv("conv_out", c0, spec.out_channels, 3, 1, h * w);
    Ok(b.layers)
}

struct PlanBuilder<'a> {
    spec: &'a UNetSpec,
    layers: Vec<Layer>,
    block: String,
    context_len: usize,
}

impl PlanBuilder<'_> {
    fn push(&mut self, name: &str, kind: LayerKind, positions: usize) {
        self.layers.push(Layer {
            name: name.to_string(),
            block: self.block.clone(),
            kind,
            positions,
        });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, positions: usize) {
        self.push(name, LayerKind::Conv { cin, cout, k, stride }, positions);
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, positions: usize) {
        self.push(name, LayerKind::Linear { inp, out, bias: true }, positions);
    }

    fn linear_nobias(&mut self, name: &str, inp: usize, out: usize, positions: usize) {
        self.push(name, LayerKind::Linear { inp, out, bias: false }, positions);
    }

    fn resnet(&mut self, p: &str, cin: usize, cout: usize, hw: usize) {
        let temb = self.spec.time_embed_dim();
        self.push(&format!("{p}.norm1"), LayerKind::GroupNorm { channels: cin }, hw);
        self.conv(&format!("{p}.conv1"), cin, cout, 3, 1, hw);
        self.linear(&format!("{p}.time_emb_proj"), temb, cout, 1);
        self.push(&format!("{p}.norm2"), LayerKind::GroupNorm { channels: cout }, hw);
        self.conv(&format!("{p}.conv2"), cout, cout, 3, 1, hw);
        if cin != cout {
            self.conv(&format!("{p}.conv_shortcut"), cin, cout, 1, 1, hw);
        }
    }

    fn attention(&mut self, p: &str, c: usize, kv_dim: usize, q_len: usize, kv_len: usize) {
        self.linear_nobias(&format!("{p}.to_q"), c, c, q_len);
        self.linear_nobias(&format!("{p}.to_k"), kv_dim, c, kv_len);
        self.linear_nobias(&format!("{p}.to_v"), kv_dim, c, kv_len);
        self.push(&format!("{p}.scores"), LayerKind::Attention { q_len, kv_len, channels: c }, q_len);
        self.linear(&format!("{p}.to_out.0"), c, c, q_len);
    }

    fn transformer(&mut self, p: &str, c: usize, hw: usize) {
        let ctx = self.spec.context_dim;
        let l = self.context_len;
        self.push(&format!("{p}.norm"), LayerKind::GroupNorm { channels: c }, hw);
        self.conv(&format!("{p}.proj_in"), c, c, 1, 1, hw);
        let t = format!("{p}.transformer_blocks.0");
        self.push(&format!("{t}.norm1"), LayerKind::LayerNorm { channels: c }, hw);
        self.attention(&format!("{t}.attn1"), c, c, hw, hw);
        self.push(&format!("{t}.norm2"), LayerKind::LayerNorm { channels: c }, hw);
        self.attention(&format!("{t}.attn2"), c, ctx, hw, l);
        self.push(&format!("{t}.norm3"), LayerKind::LayerNorm { channels: c }, hw);
        self.linear(&format!("{t}.ff.net.0.proj"), c, 8 * c, hw);
        self.linear(&format!("{t}.ff.net.2"), 4 * c, c, hw);
        self.conv(&format!("{p}.proj_out"), c, c, 1, 1, hw);
    }
}

/// Shape-only model: parameter names and shapes, no values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhantomModel {
    entries: Vec<ParamEntry>,
}

impl PhantomModel {
    pub fn new(spec: &UNetSpec) -> Result<Self> {
        // Parameter shapes do not depend on resolution; any valid size works.
        let side = 1 << spec.depth();
        let plan = layer_plan(spec, side, side, 1)?;
        Ok(PhantomModel {
            entries: plan.iter().flat_map(Layer::params).collect(),
        })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(ParamEntry::count).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn shapes(&self) -> IndexMap<String, Vec<usize>> {
        self.entries.iter().map(|e| (e.name.clone(), e.shape.clone())).collect()
    }

    pub fn per_block(&self) -> IndexMap<String, usize> {
        let mut m = IndexMap::new();
        for e in &self.entries {
            *m.entry(e.block.clone()).or_insert(0) += e.count();
        }
        m
    }

    /// `name,shape,count` rows with `x`-joined shapes.
    pub fn census_csv(&self) -> String {
        let mut s = String::from("name,shape,count\n");
        for e in &self.entries {
            let shape: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("{},{},{}\n", e.name, shape.join("x"), e.count()));
        }
        s
    }
}
