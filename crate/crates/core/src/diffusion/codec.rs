use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

/// Latent channel count produced by every codec.
pub const LATENT_CHANNELS: usize = 4;

/// Pixel ↔ latent mapping. Images are `[N, 3, H, W]`; latents are
/// `[N, 4, H / factor, W / factor]`.
pub trait LatentCodec: Send + Sync {
    fn name(&self) -> &str;
    fn factor(&self) -> usize;

    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;

    fn latent_channels(&self) -> usize {
        LATENT_CHANNELS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    #[default]
    Pool,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub factor: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            kind: CodecKind::Pool,
            factor: 8,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn build(&self) -> Result<Box<dyn LatentCodec>> {
        if self.factor == 0 {
            return Err(Error::Config("codec factor must be positive".into()));
        }
        Ok(match self.kind {
            CodecKind::Pool => Box::new(PoolCodec::new(self.factor)),
            CodecKind::Conv => Box::new(ConvCodec::new(self.factor, self.seed)?),
        })
    }
}

fn check_image(images: &Tensor, factor: usize) -> Result<(usize, usize, usize)> {
    if images.ndim() != 4 || images.dim(1) != 3 {
        return Err(Error::Dimension(format!(
            "images must be [N, 3, H, W], got {:?}",
            images.shape()
        )));
    }
    let (h, w) = (images.dim(2), images.dim(3));
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "image size {h}x{w} is not divisible by the codec factor {factor}"
        )));
    }
    Ok((images.dim(0), h, w))
}

fn check_latent(latents: &Tensor) -> Result<()> {
    if latents.ndim() != 4 || latents.dim(1) != LATENT_CHANNELS {
        return Err(Error::Dimension(format!(
            "latents must be [N, {LATENT_CHANNELS}, h, w], got {:?}",
            latents.shape()
        )));
    }
    Ok(())
}

/// Deterministic stub: per-channel average pooling rescaled from `[0, 1]`
/// to `[-1, 1]`, with the fourth latent channel set to the mean of the
/// three colour channels. Decoding is nearest-neighbour upsampling of the
/// first three channels, mapped back to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct PoolCodec {
    factor: usize,
}

impl PoolCodec {
    pub fn new(factor: usize) -> Self {
        PoolCodec { factor }
    }
}

impl LatentCodec for PoolCodec {
    fn name(&self) -> &str {
        "pool"
    }

    fn factor(&self) -> usize {
        self.factor
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let f = self.factor;
        let (n, h, w) = check_image(images, f)?;
        let (ho, wo) = (h / f, w / f);
        let inv = 2.0 / (f * f) as f64;
        let mut out = vec![0.0; n * LATENT_CHANNELS * ho * wo];
        for s in 0..n {
            for c in 0..3 {
                let src = &images.data()[(s * 3 + c) * h * w..(s * 3 + c + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for dy in 0..f {
                            for dx in 0..f {
                                acc += src[(oy * f + dy) * w + ox * f + dx];
                            }
                        }
                        out[((s * LATENT_CHANNELS + c) * ho + oy) * wo + ox] = acc * inv - 1.0;
                    }
                }
            }
            for p in 0..ho * wo {
                let base = s * LATENT_CHANNELS * ho * wo;
                let m = (out[base + p] + out[base + ho * wo + p] + out[base + 2 * ho * wo + p]) / 3.0;
                out[base + 3 * ho * wo + p] = m;
            }
        }
        Tensor::new(vec![n, LATENT_CHANNELS, ho, wo], out)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        check_latent(latents)?;
        let f = self.factor;
        let (n, h, w) = (latents.dim(0), latents.dim(2), latents.dim(3));
        let (ho, wo) = (h * f, w * f);
        let mut out = vec![0.0; n * 3 * ho * wo];
        for s in 0..n {
            for c in 0..3 {
                let src = &latents.data()[(s * LATENT_CHANNELS + c) * h * w..];
                let dst = &mut out[(s * 3 + c) * ho * wo..(s * 3 + c + 1) * ho * wo];
                for y in 0..ho {
                    for x in 0..wo {
                        dst[y * wo + x] = 0.5 * (src[(y / f) * w + x / f] + 1.0);
                    }
                }
            }
        }
        Tensor::new(vec![n, 3, ho, wo], out)
    }
}

/// Small convolutional autoencoder with fixed-seed initialisation.
/// `factor` must be a power of two. Untrained unless [`ConvCodec::fit`] is
/// called.
#[derive(Debug, Clone)]
pub struct ConvCodec {
    factor: usize,
    params: ParamStore,
}

const CODEC_HIDDEN: usize = 16;

impl ConvCodec {
    pub fn new(factor: usize, seed: u64) -> Result<Self> {
        if !factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "conv codec factor must be a power of two, got {factor}"
            )));
        }
        let mut r = rng::stream(seed, "conv-codec", 0);
        let mut params = ParamStore::new();
        let mut conv = |name: &str, co: usize, ci: usize, k: usize| {
            let std = (1.0 / (ci * k * k) as f64).sqrt();
            params.insert(format!("{name}.weight"), Tensor::randn(&[co, ci, k, k], std, &mut r));
            params.insert(format!("{name}.bias"), Tensor::zeros(&[co]));
        };
        conv("encoder.conv_in", CODEC_HIDDEN, 3, 3);
        conv("encoder.conv_out", LATENT_CHANNELS, CODEC_HIDDEN, 1);
        conv("decoder.conv_in", CODEC_HIDDEN, LATENT_CHANNELS, 3);
        conv("decoder.conv_out", 3, CODEC_HIDDEN, 3);
        Ok(ConvCodec { factor, params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn conv(&self, g: &mut Graph, x: crate::autograd::Var, name: &str, pad: usize) -> Result<crate::autograd::Var> {
        let w = g.param(&self.params, &format!("{name}.weight"))?;
        let b = g.param(&self.params, &format!("{name}.bias"))?;
        Ok(g.conv2d(x, w, Some(b), 1, pad))
    }

    fn encode_graph(&self, g: &mut Graph, x: crate::autograd::Var) -> Result<crate::autograd::Var> {
        let h = self.conv(g, x, "encoder.conv_in", 1)?;
        let h = g.silu(h);
        let h = g.avg_pool(h, self.factor);
        self.conv(g, h, "encoder.conv_out", 0)
    }

    fn decode_graph(&self, g: &mut Graph, z: crate::autograd::Var) -> Result<crate::autograd::Var> {
        let mut h = z;
        let mut f = self.factor;
        while f > 1 {
            h = g.upsample2x(h);
            f /= 2;
        }
        let h = self.conv(g, h, "decoder.conv_in", 1)?;
        let h = g.silu(h);
        self.conv(g, h, "decoder.conv_out", 1)
    }

    /// Trains encoder and decoder on reconstruction MSE; returns the final
    /// loss.
    pub fn fit(&mut self, images: &Tensor, steps: usize, lr: f64) -> Result<f64> {
        check_image(images, self.factor)?;
        let mut opt = AdamW::new(AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut last = f64::NAN;
        for _ in 0..steps {
            let mut g = Graph::new();
            let x = g.input(images.clone());
            let z = self.encode_graph(&mut g, x)?;
            let y = self.decode_graph(&mut g, z)?;
            let diff = g.value(y).sub(images)?;
            let n = diff.len() as f64;
            last = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
            let grad = diff.scale(2.0 / n);
            let l = g.loss(y, last, grad);
            let grads = g.backward(l).into_param_grads();
            drop(g);
            opt.step(&mut self.params, &grads);
        }
        Ok(last)
    }
}

impl LatentCodec for ConvCodec {
    fn name(&self) -> &str {
        "conv"
    }

    fn factor(&self) -> usize {
        self.factor
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        check_image(images, self.factor)?;
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let z = self.encode_graph(&mut g, x)?;
        Ok(g.value(z).clone())
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        check_latent(latents)?;
        let mut g = Graph::new();
        let z = g.input(latents.clone());
        let y = self.decode_graph(&mut g, z)?;
        Ok(g.value(y).clone())
    }
}
