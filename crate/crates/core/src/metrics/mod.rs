//! FID, KID, CLIP-style score and an LPIPS-family distance over a pluggable
//! feature extractor. The default extractor is a fixed-seed random network,
//! so values are only comparable within one configuration.

mod extractor;
mod stats;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use extractor::{
    lpips_distance, lpips_distances, EmbeddingProjection, FeatureExtractor, LayeredExtractor, RandomConvExtractor,
    DEFAULT_EXTRACTOR_WIDTHS,
};
pub use stats::{clip_score, fid, kid, mmd2_unbiased, poly_kernel, FeatureStats, KidConfig};

use crate::binio::{self, ByteReader, ByteWriter, ContainerKind};
use crate::dataset;
use crate::diffusion::ConditioningTable;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STAND_IN_NOTE: &str =
    "features come from a fixed-seed random network; values are comparable only within the same configuration";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub extractor_seed: u64,
    pub kid: KidConfig,
    pub clip_weight: f64,
    /// Seed and width of the class-prompt embeddings used as text side.
    pub conditioning_seed: u64,
    pub embed_dim: usize,
    /// One weight per extractor layer.
    pub lpips_layer_weights: Vec<f64>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            extractor_seed: 0,
            kid: KidConfig::default(),
            clip_weight: 100.0,
            conditioning_seed: 0,
            embed_dim: 64,
            lpips_layer_weights: vec![1.0; DEFAULT_EXTRACTOR_WIDTHS.len()],
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub kid_mean: f64,
    pub kid_std: f64,
    /// Absent when generated images carry no class labels.
    pub clip_score: Option<f64>,
    pub lpips: f64,
    pub extractor: String,
    pub real_count: usize,
    pub gen_count: usize,
    pub lpips_pairs: usize,
    pub kid_subsets: usize,
    pub kid_subset_size: usize,
    pub extractor_seed: u64,
    pub kid_seed: u64,
    pub note: String,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// JSON schema of [`MetricReport`].
pub const METRIC_REPORT_SCHEMA: &str = include_str!("metric_report.schema.json");

/// Feature cache keyed by extractor name and content hash, stored in the
/// shared float container.
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FeatureCache { dir: dir.into() }
    }

    fn key(extractor: &str, images: &Tensor) -> String {
        let mut h = Sha256::new();
        for d in images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in images.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        let hex: String = digest.iter().take(16).map(|b| format!("{b:02x}")).collect();
        format!("{extractor}-{hex}")
    }

    pub fn path_for(&self, extractor: &str, images: &Tensor) -> PathBuf {
        self.dir.join(format!("{}.feat", Self::key(extractor, images)))
    }

    /// Cached features are stored as `f32`; fresh results are rounded the
    /// same way so hits and misses agree.
    pub fn features(&self, extractor: &dyn FeatureExtractor, images: &Tensor) -> Result<Tensor> {
        let path = self.path_for(extractor.name(), images);
        let key = Self::key(extractor.name(), images);
        if path.exists() {
            let bytes = binio::read_file(&path)?;
            let mut r = ByteReader::open(&bytes, ContainerKind::FeatureCache)?;
            let stored = r.str("cache key")?;
            if stored != key {
                return Err(r.error(format!("cache key mismatch: {stored} vs {key}")));
            }
            let n = r.u64("rows")? as usize;
            let d = r.u64("dim")? as usize;
            let data = r.f32s(n * d, "features")?;
            r.finish()?;
            return Tensor::new(vec![n, d], data);
        }
        let mut f = extractor.extract(images)?;
        binio::to_f32_precision(f.data_mut());
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut w = ByteWriter::new(ContainerKind::FeatureCache);
        w.str(&key);
        w.u64(f.dim(0) as u64);
        w.u64(f.dim(1) as u64);
        w.f32s(f.data());
        w.write_file(&path)?;
        Ok(f)
    }
}

/// Images of an evaluation directory with their class label (the name of
/// the sub-folder they sit in, if any).
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Tensor,
    pub labels: Vec<Option<String>>,
    pub files: Vec<PathBuf>,
}

/// Loads every PNG under `dir` (one level of class folders allowed),
/// skipping unreadable files and files whose size differs from the first
/// image, with a warning each.
pub fn load_image_dir(dir: &Path) -> Result<ImageSet> {
    if !dir.is_dir() {
        return Err(Error::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut candidates: Vec<(PathBuf, Option<String>)> = Vec::new();
    for p in dataset::class_files(dir)? {
        candidates.push((p, None));
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sd in subdirs {
        let label = sd.file_name().unwrap().to_string_lossy().into_owned();
        for p in dataset::class_files(&sd)? {
            candidates.push((p, Some(label.clone())));
        }
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut files = Vec::new();
    for (p, label) in candidates {
        match dataset::load_png(&p) {
            Ok(t) => {
                if let Some(first) = images.first() {
                    let first: &Tensor = first;
                    if first.shape() != t.shape() {
                        log::warn!("skipping {}: size {:?} differs from {:?}", p.display(), t.shape(), first.shape());
                        continue;
                    }
                }
                images.push(t);
                labels.push(label);
                files.push(p);
            }
            Err(e) => log::warn!("skipping unreadable image {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Usage(format!("no readable images in {}", dir.display())));
    }
    Ok(ImageSet {
        images: Tensor::stack(&images)?,
        labels,
        files,
    })
}

/// All four metrics for in-memory image sets. `gen_labels` supplies the
/// class prompt per generated image for the CLIP-style score.
pub fn compute_report(real: &Tensor, gen: &Tensor, gen_labels: &[Option<String>], cfg: &MetricsConfig) -> Result<MetricReport> {
    let (n, m) = (real.dim(0), gen.dim(0));
    if n < 2 || m < 2 {
        return Err(Error::Usage(format!(
            "need at least 2 real and 2 generated images, got {n} and {m}"
        )));
    }
    let ext = RandomConvExtractor::new(cfg.extractor_seed);
    let (fr, fg) = match &cfg.cache_dir {
        Some(dir) => {
            let cache = FeatureCache::new(dir);
            (cache.features(&ext, real)?, cache.features(&ext, gen)?)
        }
        None => (ext.extract(real)?, ext.extract(gen)?),
    };
    let fid_value = fid(&FeatureStats::from_features(&fr)?, &FeatureStats::from_features(&fg)?)?;
    let subset_size = cfg.kid.subset_size.unwrap_or(n.min(m).min(100));
    let (kid_mean, kid_std) = kid(&fr, &fg, &cfg.kid)?;

    let clip = if gen_labels.len() == m && gen_labels.iter().all(Option::is_some) {
        let names: BTreeSet<String> = gen_labels.iter().flatten().cloned().collect();
        let vocab: Vec<String> = names.into_iter().collect();
        let table = ConditioningTable::new(&vocab, cfg.embed_dim, cfg.conditioning_seed)?;
        let mut text = Vec::with_capacity(m * cfg.embed_dim);
        for l in gen_labels.iter().flatten() {
            text.extend(table.pooled(table.index_of(l)?));
        }
        let text = Tensor::new(vec![m, cfg.embed_dim], text)?;
        let proj = EmbeddingProjection::new(ext.feature_dim(), cfg.embed_dim, cfg.extractor_seed);
        Some(clip_score(&proj.apply(&fg)?, &text, cfg.clip_weight)?)
    } else {
        None
    };

    let pairs = n.min(m);
    let shape_eq = real.shape()[1..] == gen.shape()[1..];
    let lpips = if shape_eq {
        let ra = real.select_rows(&(0..pairs).collect::<Vec<_>>());
        let gb = gen.select_rows(&(0..pairs).collect::<Vec<_>>());
        lpips_distance(&ra, &gb, &ext, &cfg.lpips_layer_weights)?
    } else {
        return Err(Error::Usage(format!(
            "real images {:?} and generated images {:?} differ in size",
            &real.shape()[1..],
            &gen.shape()[1..]
        )));
    };

    Ok(MetricReport {
        fid: fid_value,
        kid_mean,
        kid_std,
        clip_score: clip,
        lpips,
        extractor: ext.name().to_string(),
        real_count: n,
        gen_count: m,
        lpips_pairs: pairs,
        kid_subsets: cfg.kid.subsets,
        kid_subset_size: subset_size,
        extractor_seed: cfg.extractor_seed,
        kid_seed: cfg.kid.seed,
        note: STAND_IN_NOTE.to_string(),
    })
}

/// Loads both directories and computes a [`MetricReport`]. LPIPS compares
/// images matched by sorted file order.
pub fn evaluate_run(real_dir: &Path, gen_dir: &Path, cfg: &MetricsConfig) -> Result<MetricReport> {
    let real = load_image_dir(real_dir)?;
    let gen = load_image_dir(gen_dir)?;
    compute_report(&real.images, &gen.images, &gen.labels, cfg)
}
