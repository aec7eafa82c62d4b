//! Parameter and MAC accounting from the shape-only layer plan, and
//! wall-clock latency measurement.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::unet::{layer_plan, MacConvention, PhantomModel, Scale, UNetSpec};

/// Context length used for MAC accounting at full scale (the text-encoder
/// sequence length of the reference pipeline family).
pub const FULL_SCALE_CONTEXT_LEN: usize = 77;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub per_block: IndexMap<String, usize>,
}

pub fn count_params(spec: &UNetSpec) -> Result<ParamCount> {
    let p = PhantomModel::new(spec)?;
    Ok(ParamCount {
        total: p.total(),
        per_block: p.per_block(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacCount {
    pub total: u64,
    pub per_block: IndexMap<String, u64>,
    pub input_shape: [usize; 4],
    pub context_len: usize,
    pub convention: MacConvention,
}

impl MacCount {
    pub fn gmacs(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

pub fn default_context_len(spec: &UNetSpec) -> usize {
    match spec.scale {
        Scale::Full => FULL_SCALE_CONTEXT_LEN,
        Scale::Toy => crate::diffusion::TOKEN_POSITIONS,
    }
}

/// Multiply-accumulates of one forward pass on `input_shape = [N, C, H, W]`.
pub fn count_macs(spec: &UNetSpec, input_shape: [usize; 4], context_len: usize, convention: MacConvention) -> Result<MacCount> {
    let [n, c, h, w] = input_shape;
    if c != spec.in_channels || n == 0 {
        return Err(Error::Dimension(format!(
            "input shape {input_shape:?} incompatible with {} input channels",
            spec.in_channels
        )));
    }
    let plan = layer_plan(spec, h, w, context_len)?;
    let mut per_block: IndexMap<String, u64> = IndexMap::new();
    for l in &plan {
        *per_block.entry(l.block.clone()).or_insert(0) += l.macs(convention) * n as u64;
    }
    Ok(MacCount {
        total: per_block.values().sum(),
        per_block,
        input_shape,
        context_len,
        convention,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    pub std_s: f64,
    pub warmup_count: usize,
    pub measure_count: usize,
    pub samples_s: Vec<f64>,
    pub device: String,
}

pub fn device_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "cpu {}-{} ({threads} hardware threads), f64 single-threaded kernels",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

/// Exclusive benchmark lock; removed on drop.
pub struct BenchLock {
    path: PathBuf,
}

impl BenchLock {
    pub fn acquire(path: &Path) -> Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(BenchLock { path: path.to_path_buf() })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Resource(format!(
                "another benchmark holds {}; remove it if no benchmark is running",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for BenchLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn default_lock_path() -> PathBuf {
    std::env::temp_dir().join("kdc-bench.lock")
}

/// Times `run` `warmup + repeats` times under the lock and reports the
/// mean and population standard deviation of the measured runs.
pub fn bench_inference(
    mut run: impl FnMut() -> Result<()>,
    warmup: usize,
    repeats: usize,
    lock_path: &Path,
) -> Result<LatencyStats> {
    if repeats < 3 || warmup < 1 {
        return Err(Error::Usage(format!(
            "benchmarks need at least 1 warmup and 3 measured runs, got {warmup} and {repeats}"
        )));
    }
    let _lock = BenchLock::acquire(lock_path)?;
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        run()?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    let (mean, std) = mean_std(&samples);
    Ok(LatencyStats {
        mean_s: mean,
        std_s: std,
        warmup_count: warmup,
        measure_count: repeats,
        samples_s: samples,
        device: device_descriptor(),
    })
}

/// Mean and population standard deviation; exactly 0 for identical values.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    if v.iter().all(|&x| x == v[0]) {
        return (v[0], 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub arch: String,
    pub scale: Scale,
    pub total_params: usize,
    pub per_block_params: IndexMap<String, usize>,
    pub total_gmacs: f64,
    pub per_block_gmacs: IndexMap<String, f64>,
    pub input_shape: [usize; 4],
    pub context_len: usize,
    pub mac_convention: MacConvention,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency: Option<LatencyStats>,
    pub device: String,
}

pub fn profile_spec(arch: &str, spec: &UNetSpec, input_shape: [usize; 4], convention: MacConvention) -> Result<ProfileReport> {
    let params = count_params(spec)?;
    let context_len = default_context_len(spec);
    let macs = count_macs(spec, input_shape, context_len, convention)?;
    Ok(ProfileReport {
        arch: arch.to_string(),
        scale: spec.scale,
        total_params: params.total,
        per_block_params: params.per_block,
        total_gmacs: macs.gmacs(),
        per_block_gmacs: macs.per_block.iter().map(|(k, v)| (k.clone(), *v as f64 / 1e9)).collect(),
        input_shape,
        context_len,
        mac_convention: convention,
        latency: None,
        device: device_descriptor(),
    })
}
