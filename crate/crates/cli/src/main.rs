use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use kdc_core::config::ExperimentConfig;
use kdc_core::dataset::{save_png, DatasetManifest};
use kdc_core::diffusion::{make_scheduler, CodecConfig, ConditioningTable, SchedulerConfig};
use kdc_core::metrics::{evaluate_run, KidConfig, MetricsConfig};
use kdc_core::pipeline::Pipeline;
use kdc_core::profiler::{bench_inference, default_lock_path, profile_spec};
use kdc_core::replay::ReplayBuffer;
use kdc_core::trainer::{run_experiment, Checkpoint, Generator, RunOptions, TrainMode};
use kdc_core::unet::{materialize, original_spec, search_drop_positions, student_spec, MacConvention, Scale};

/// Student parameter count reported for the full-scale pruned model.
const PUBLISHED_STUDENT_PARAMS: usize = 482_346_884;

/// Compressed latent diffusion: pruning, distillation, replay and evaluation.
#[derive(Parser)]
#[command(name = "kdc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a folder-per-class image tree and write a manifest.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        prompt_template: Option<String>,
    },
    /// Class-sequential training of the student.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Full)]
        mode: ModeArg,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many classes, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after_class: Option<usize>,
    },
    /// Parameter and MAC counts, optionally with measured latency.
    Profile {
        #[arg(long, value_enum)]
        arch: ArchArg,
        #[arg(long, value_enum, default_value_t = ScaleArg::Full)]
        scale: ScaleArg,
        /// Latent spatial size `HxW`; defaults to 64x64 (full) or 8x8 (toy).
        #[arg(long, value_parser = parse_hw)]
        input: Option<(usize, usize)>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, value_enum, default_value_t = MacsArg::WeightLayers)]
        macs: MacsArg,
        /// Time end-to-end generation (toy scale only).
        #[arg(long)]
        latency: bool,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long)]
        lock: Option<PathBuf>,
        /// Print the parameter count of every pair-drop combination instead.
        #[arg(long)]
        search_drop: bool,
    },
    /// FID, KID, CLIP-style score and LPIPS-style distance between two folders.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        extractor_seed: u64,
        #[arg(long, default_value_t = 10)]
        kid_subsets: usize,
        #[arg(long)]
        kid_subset_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        kid_seed: u64,
    },
    /// Sample one image from a training checkpoint.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a replay buffer file.
    BufferInspect {
        #[arg(long)]
        buffer: PathBuf,
        /// Class names by index, comma separated.
        #[arg(long, value_delimiter = ',')]
        class_names: Option<Vec<String>>,
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    #[value(name = "no_kd")]
    NoKd,
    #[value(name = "no_replay")]
    NoReplay,
    Neither,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => TrainMode::Full,
            ModeArg::NoKd => TrainMode::NoKd,
            ModeArg::NoReplay => TrainMode::NoReplay,
            ModeArg::Neither => TrainMode::Neither,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Original,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Full,
    Toy,
}

#[derive(Clone, Copy, ValueEnum)]
enum MacsArg {
    WeightLayers,
    WithAttentionProducts,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    Ok((h, w))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ingest(root: &Path, out: &Path, template: Option<String>) -> Result<()> {
    let mut manifest = DatasetManifest::scan(root)?;
    if let Some(t) = template {
        if !t.contains("{class}") {
            return Err(kdc_core::Error::Usage(format!("prompt template `{t}` lacks a {{class}} placeholder")).into());
        }
        manifest.prompt_template = t;
    }
    write_text(out, &manifest.to_json()?)?;
    for c in &manifest.classes {
        println!("{}\t{}\t{}x{}", c.name, c.count, c.resolution[0], c.resolution[1]);
    }
    Ok(())
}

fn train(config: &Path, mode: TrainMode, resume: Option<PathBuf>, stop_after_class: Option<usize>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let root = std::env::var_os("KDC_RUN_DIR").map(PathBuf::from);
    let run_dir = cfg.run_dir(root.as_deref());
    info!("run directory {}", run_dir.display());
    let out = run_experiment(cfg, mode, &run_dir, &RunOptions { resume, stop_after_class })?;
    println!(
        "{}",
        serde_json::json!({
            "run_dir": out.run_dir,
            "mode": out.mode.as_str(),
            "classes_done": out.classes_done,
            "optimizer_steps": out.optimizer_steps,
            "buffer_len": out.buffer.len(),
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn profile(
    arch: ArchArg,
    scale: ScaleArg,
    input: Option<(usize, usize)>,
    batch: usize,
    macs: MacsArg,
    latency: bool,
    steps: usize,
    warmup: usize,
    repeats: usize,
    lock: Option<PathBuf>,
    search_drop: bool,
) -> Result<()> {
    let scale = match scale {
        ScaleArg::Full => Scale::Full,
        ScaleArg::Toy => Scale::Toy,
    };
    let orig = original_spec(scale);
    if search_drop {
        let results = search_drop_positions(&orig)?;
        let target = (scale == Scale::Full).then_some(PUBLISHED_STUDENT_PARAMS);
        let matching: Vec<_> = results.iter().filter(|r| Some(r.total_params) == target).collect();
        println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({
                "target_params": target,
                "results": results,
                "matching": matching,
            }))?
        );
        return Ok(());
    }
    let (name, spec) = match arch {
        ArchArg::Original => ("original", orig),
        ArchArg::Student => ("student", student_spec(&orig)?),
    };
    let (h, w) = input.unwrap_or(match scale {
        Scale::Full => (64, 64),
        Scale::Toy => (8, 8),
    });
    let convention = match macs {
        MacsArg::WeightLayers => MacConvention::WeightLayers,
        MacsArg::WithAttentionProducts => MacConvention::WithAttentionProducts,
    };
    let mut report = profile_spec(name, &spec, [batch, spec.in_channels, h, w], convention)?;
    if latency {
        if scale == Scale::Full {
            bail!(kdc_core::Error::Usage("latency is measured at toy scale only".into()));
        }
        let model = materialize(&spec, 0)?;
        let scheduler = make_scheduler(&SchedulerConfig::default())?;
        let codec = CodecConfig::default().build()?;
        let table = ConditioningTable::new(&["probe".to_string()], spec.context_dim, 0)?;
        let pipe = Pipeline {
            model: &model,
            scheduler: &scheduler,
            table: &table,
            codec: codec.as_ref(),
            latent_shape: [spec.in_channels, h, w],
        };
        let lock = lock.unwrap_or_else(default_lock_path);
        report.latency = Some(bench_inference(|| pipe.generate("probe", steps, 0).map(|_| ()), warmup, repeats, &lock)?);
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn generate(ckpt: &Path, prompt: &str, seed: u64, steps: usize, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let gen = Generator::from_checkpoint(&ck)?;
    let img = gen.generate(prompt, steps, seed)?;
    let img = img.map(|v| v.clamp(0.0, 1.0)).reshape(&img.shape()[1..])?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_png(out, &img)?;
    println!("{}", out.display());
    Ok(())
}

fn buffer_inspect(path: &Path, names: Option<Vec<String>>, csv: bool) -> Result<()> {
    let buf = ReplayBuffer::load(path)?;
    if csv {
        print!("{}", buf.histogram_csv(names.as_deref()));
        return Ok(());
    }
    let hist: serde_json::Map<String, serde_json::Value> = buf
        .histogram()
        .into_iter()
        .map(|(k, v)| {
            let key = names.as_ref().and_then(|n| n.get(k).cloned()).unwrap_or_else(|| k.to_string());
            (key, v.into())
        })
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "capacity": buf.capacity(),
            "len": buf.len(),
            "policy": buf.policy(),
            "classes": buf.classes(),
            "histogram": hist,
        }))?
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { root, out, prompt_template } => ingest(&root, &out, prompt_template),
        Command::Train {
            config,
            mode,
            resume,
            stop_after_class,
        } => train(&config, mode.into(), resume, stop_after_class),
        Command::Profile {
            arch,
            scale,
            input,
            batch,
            macs,
            latency,
            steps,
            warmup,
            repeats,
            lock,
            search_drop,
        } => profile(arch, scale, input, batch, macs, latency, steps, warmup, repeats, lock, search_drop),
        Command::Eval {
            real,
            gen,
            out,
            extractor_seed,
            kid_subsets,
            kid_subset_size,
            kid_seed,
        } => {
            let cfg = MetricsConfig {
                extractor_seed,
                kid: KidConfig {
                    subsets: kid_subsets,
                    subset_size: kid_subset_size,
                    seed: kid_seed,
                },
                ..MetricsConfig::default()
            };
            let report = evaluate_run(&real, &gen, &cfg)?;
            let json = report.to_json()?;
            write_text(&out, &json)?;
            print!("{json}");
            Ok(())
        }
        Command::Generate {
            ckpt,
            prompt,
            seed,
            steps,
            out,
        } => generate(&ckpt, &prompt, seed, steps, &out),
        Command::BufferInspect { buffer, class_names, csv } => buffer_inspect(&buffer, class_names, csv),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<kdc_core::Error>() {
        Some(e) if e.is_usage() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
