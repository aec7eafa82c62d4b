use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Maps images `[N, 3, H, W]` in `[0, 1]` to features `[N, D]`.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn feature_dim(&self) -> usize;
    fn extract(&self, images: &Tensor) -> Result<Tensor>;
}

/// Extractor that also exposes its intermediate feature maps.
pub trait LayeredExtractor: FeatureExtractor {
    /// Per-layer activations `[N, C_l, H_l, W_l]`.
    fn layers(&self, images: &Tensor) -> Result<Vec<Tensor>>;
}

/// Fixed-seed random ReLU convolution stack. Each layer is a 3x3 conv
/// followed by 2x average pooling (except the last); features are the
/// spatial means of every layer, concatenated.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    name: String,
    weights: Vec<(Tensor, Tensor)>,
}

pub const DEFAULT_EXTRACTOR_WIDTHS: [usize; 3] = [8, 16, 16];

impl RandomConvExtractor {
    pub fn new(seed: u64) -> Self {
        Self::with_widths(seed, &DEFAULT_EXTRACTOR_WIDTHS)
    }

    pub fn with_widths(seed: u64, widths: &[usize]) -> Self {
        let mut weights = Vec::new();
        let mut cin = 3;
        for (i, &c) in widths.iter().enumerate() {
            let mut r = rng::stream(seed, "extractor", i as u64);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let w = Tensor::randn(&[c, cin, 3, 3], std, &mut r);
            let b = Tensor::randn(&[c], 0.1, &mut r);
            weights.push((w, b));
            cin = c;
        }
        let tag: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
        RandomConvExtractor {
            name: format!("random-conv-{}-seed{seed}", tag.join("-")),
            weights,
        }
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn feature_dim(&self) -> usize {
        self.weights.iter().map(|(w, _)| w.dim(0)).sum()
    }

    fn extract(&self, images: &Tensor) -> Result<Tensor> {
        let layers = self.layers(images)?;
        let n = images.dim(0);
        let d = self.feature_dim();
        let mut out = vec![0.0; n * d];
        let mut off = 0;
        for l in &layers {
            let (c, s) = (l.dim(1), l.dim(2) * l.dim(3));
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * s;
                    out[i * d + off + ch] = l.data()[base..base + s].iter().sum::<f64>() / s as f64;
                }
            }
            off += c;
        }
        Tensor::new(vec![n, d], out)
    }
}

impl LayeredExtractor for RandomConvExtractor {
    fn layers(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        if images.ndim() != 4 || images.dim(1) != 3 {
            return Err(Error::Dimension(format!("images must be [N, 3, H, W], got {:?}", images.shape())));
        }
        let pools = self.weights.len() - 1;
        if images.dim(2) % (1 << pools) != 0 || images.dim(3) % (1 << pools) != 0 {
            return Err(Error::Dimension(format!(
                "image size {}x{} must be divisible by {}",
                images.dim(2),
                images.dim(3),
                1 << pools
            )));
        }
        let mut g = Graph::new();
        let mut h = g.input(images.map(|v| 2.0 * v - 1.0));
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().enumerate() {
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            h = g.conv2d(h, wv, Some(bv), 1, 1);
            h = g.relu(h);
            out.push(g.value(h).clone());
            if i < pools {
                h = g.avg_pool(h, 2);
            }
        }
        Ok(out)
    }
}

/// Fixed random projection of extractor features into a text-embedding
/// space, used for the CLIP-style score.
#[derive(Debug, Clone)]
pub struct EmbeddingProjection {
    /// `[D_out, D_in]`.
    matrix: Tensor,
}

impl EmbeddingProjection {
    pub fn new(d_in: usize, d_out: usize, seed: u64) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        EmbeddingProjection {
            matrix: Tensor::randn(&[d_out, d_in], std, &mut rng::stream(seed, "clip:projection", 0)),
        }
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        let (d_out, d_in) = (self.matrix.dim(0), self.matrix.dim(1));
        if features.ndim() != 2 || features.dim(1) != d_in {
            return Err(Error::Dimension(format!("expected [N, {d_in}] features, got {:?}", features.shape())));
        }
        let n = features.dim(0);
        let mut out = vec![0.0; n * d_out];
        crate::autograd::gemm(n, d_in, d_out, features.data(), false, self.matrix.data(), true, &mut out, 0.0);
        Tensor::new(vec![n, d_out], out)
    }
}

/// `Σ_l w_l · mean_positions ||n(a_l) - n(b_l)||²` per image pair, where
/// `n` normalizes each position's channel vector to unit length.
pub fn lpips_distances(a: &Tensor, b: &Tensor, extractor: &dyn LayeredExtractor, layer_weights: &[f64]) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let la = extractor.layers(a)?;
    let lb = extractor.layers(b)?;
    if layer_weights.len() != la.len() {
        return Err(Error::Config(format!(
            "{} layer weights for a {}-layer extractor",
            layer_weights.len(),
            la.len()
        )));
    }
    let n = a.dim(0);
    let mut out = vec![0.0; n];
    for ((fa, fb), &w) in la.iter().zip(&lb).zip(layer_weights) {
        let (c, s) = (fa.dim(1), fa.dim(2) * fa.dim(3));
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in 0..s {
                let at = |t: &Tensor, ch: usize| t.data()[(i * c + ch) * s + p];
                let na = (0..c).map(|ch| at(fa, ch).powi(2)).sum::<f64>().sqrt() + 1e-10;
                let nb = (0..c).map(|ch| at(fb, ch).powi(2)).sum::<f64>().sqrt() + 1e-10;
                acc += (0..c).map(|ch| (at(fa, ch) / na - at(fb, ch) / nb).powi(2)).sum::<f64>();
            }
            *o += w * acc / s as f64;
        }
    }
    Ok(out)
}

/// Mean of [`lpips_distances`] over the batch.
pub fn lpips_distance(a: &Tensor, b: &Tensor, extractor: &dyn LayeredExtractor, layer_weights: &[f64]) -> Result<f64> {
    let d = lpips_distances(a, b, extractor, layer_weights)?;
    Ok(d.iter().sum::<f64>() / d.len().max(1) as f64)
}
