//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line to stderr
//! (bypassing output capture) and the test fails if any criterion fails.
//!
//! Criteria 9 and 10 train toy models end to end and dominate the runtime
//! (roughly 25 minutes on one CPU core in the test profile). Set
//! `KDC_ACCEPTANCE=1,2,5` to run a subset; all criteria run by default.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use kdc_core::config::ExperimentConfig;
use kdc_core::diffusion::{make_scheduler, ConditioningTable, LatentBatch, PoolCodec, SchedulerConfig};
use kdc_core::distill::{distill_step, feature_loss, hard_loss, soft_loss, total_loss, DistillConfig, DistillHead, Objective, StepInputs};
use kdc_core::metrics::{fid, kid, mmd2_unbiased, poly_kernel, FeatureStats, KidConfig};
use kdc_core::pipeline::Pipeline;
use kdc_core::profiler::{bench_inference, count_macs, count_params, FULL_SCALE_CONTEXT_LEN};
use kdc_core::replay::{ReplayBuffer, ReplayPolicy, ReplaySample};
use kdc_core::rng;
use kdc_core::trainer::{build_student, denoising_mse, pretrain_teacher, run_experiment, save_model, RunOptions, TrainEnv, TrainMode};
use kdc_core::unet::{materialize, materialize_with, original_spec, student_spec, InitOptions, MacConvention, Scale};
use kdc_core::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(n: usize, title: &str, o: &Outcome, secs: f64) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n:>2} [{verdict}] {title}: {} ({secs:.1}s)",
        o.detail
    );
}

fn rel_err(a: f64, b: f64) -> f64 {
    let d = a.abs().max(b.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - b).abs() / d
    }
}

// ---------------------------------------------------------------- 1 and 2

fn params_reproduced() -> Outcome {
    let o = original_spec(Scale::Full);
    let s = student_spec(&o).unwrap();
    let (po, ps) = (count_params(&o).unwrap().total, count_params(&s).unwrap().total);
    outcome(
        po == 859_520_964 && ps == 482_346_884,
        format!("original {po} (want 859520964), student {ps} (want 482346884)"),
    )
}

fn macs_reproduced() -> Outcome {
    let o = original_spec(Scale::Full);
    let s = student_spec(&o).unwrap();
    let shape = [1, 4, 64, 64];
    let go = count_macs(&o, shape, FULL_SCALE_CONTEXT_LEN, MacConvention::WeightLayers).unwrap().gmacs();
    let gs = count_macs(&s, shape, FULL_SCALE_CONTEXT_LEN, MacConvention::WeightLayers).unwrap().gmacs();
    let (eo, es) = (go / 339.01 - 1.0, gs / 228.85 - 1.0);
    outcome(
        eo.abs() <= 0.02 && es.abs() <= 0.02,
        format!("original {go:.2} GMac ({:+.2}%), student {gs:.2} GMac ({:+.2}%), tolerance 2%", eo * 100.0, es * 100.0),
    )
}

// ---------------------------------------------------------------- 3

fn oracle_softmax(row: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| (v / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn oracle_soft(te: &[Vec<f64>], st: &[Vec<f64>], t: f64) -> f64 {
    let mut acc = 0.0;
    for (a, b) in te.iter().zip(st) {
        let (qt, qs) = (oracle_softmax(a, t), oracle_softmax(b, t));
        for j in 0..qt.len() {
            acc += qt[j] * (qt[j].ln() - qs[j].ln());
        }
    }
    t * t * acc / te.len() as f64
}

fn oracle_hard(labels: &[usize], st: &[Vec<f64>], te: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for i in 0..labels.len() {
        acc -= oracle_softmax(&st[i], 1.0)[labels[i]].ln();
        acc -= oracle_softmax(&te[i], 1.0)[labels[i]].ln();
    }
    acc / labels.len() as f64
}

fn oracle_feature(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            acc += (p - q) * (p - q);
        }
    }
    acc / a.len() as f64
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn loss_oracles() -> Outcome {
    let mut r = rng::stream(2024, "acceptance:losses", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(1..6);
        let k = r.random_range(2..8);
        let d = r.random_range(1..12);
        let t = r.random_range(0.5..4.0);
        let mut rows = |w: usize, s: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..w).map(|_| r.random_range(-s..s)).collect()).collect()
        };
        let (te, st, ft, fs) = (rows(k, 3.0), rows(k, 3.0), rows(d, 2.0), rows(d, 2.0));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let mut onehot = vec![vec![0.0; k]; n];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i][l] = 1.0;
        }
        let cfg = DistillConfig {
            alpha: r.random_range(0.0..1.0),
            beta: r.random_range(0.0..2.0),
            gamma: r.random_range(0.0..2.0),
            temperature: t,
        };
        let mse = r.random_range(0.0..1.0);
        let ls = soft_loss(&to_tensor(&te), &to_tensor(&st), t).unwrap();
        let lh = hard_loss(&to_tensor(&onehot), &to_tensor(&st), &to_tensor(&te)).unwrap();
        let lf = feature_loss(&to_tensor(&ft), &to_tensor(&fs)).unwrap();
        let lt = total_loss(ls, lh, lf, mse, &cfg).unwrap();
        let (os, oh, of) = (oracle_soft(&te, &st, t), oracle_hard(&labels, &st, &te), oracle_feature(&ft, &fs));
        let ot = cfg.alpha * os + (1.0 - cfg.alpha) * oh + cfg.beta * of + cfg.gamma * mse;
        for (a, b) in [(ls, os), (lh, oh), (lf, of), (lt, ot)] {
            // The soft loss is a sum of non-negative KL terms; compare with
            // an absolute floor for near-identical rows.
            worst = worst.max(if b.abs() < 1e-12 { (a - b).abs() } else { rel_err(a, b) });
        }
    }
    let row = |v: &[f64]| Tensor::new(vec![1, v.len()], v.to_vec()).unwrap();
    let hand = [
        (soft_loss(&row(&[0.0, 0.0]), &row(&[0.0, 3f64.ln()]), 1.0).unwrap(), 0.14384),
        (hard_loss(&row(&[1.0, 0.0]), &row(&[0.0, 0.0]), &row(&[4f64.ln(), 0.0])).unwrap(), 0.91629),
        (feature_loss(&row(&[1.0, -1.0, 2.0]), &row(&[0.0, 0.0, 0.0])).unwrap(), 6.0),
        (
            total_loss(2.0, 4.0, 6.0, 8.0, &DistillConfig { alpha: 0.5, beta: 1.0, gamma: 1.0, temperature: 1.0 }).unwrap(),
            17.0,
        ),
    ];
    let hand_ok = hand.iter().all(|(a, b)| (a - b).abs() <= 1e-5);
    outcome(
        worst <= 1e-6 && hand_ok,
        format!("max relative error over 100 instances {worst:.2e} (limit 1e-6), hand cases {hand:?}"),
    )
}

// ---------------------------------------------------------------- 4 and 5

struct ToyStep {
    teacher: kdc_core::unet::UNet,
    student: kdc_core::unet::UNet,
    head: DistillHead,
    batch: LatentBatch,
    eps: Tensor,
    context: Tensor,
}

fn toy_step(seed: u64) -> ToyStep {
    let opts = InitOptions {
        zero_output: false,
        ..Default::default()
    };
    let teacher = materialize_with(&original_spec(Scale::Toy), seed, opts).unwrap();
    let student = build_student(&teacher, Default::default(), seed).unwrap();
    let vocab = vec!["circle".to_string(), "square".to_string()];
    let table = ConditioningTable::new(&vocab, original_spec(Scale::Toy).context_dim, seed).unwrap();
    let mut r = rng::stream(seed, "acceptance:batch", 0);
    let data = Tensor::randn(&[2, 4, 8, 8], 0.5, &mut r);
    let eps = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut r);
    let batch = LatentBatch::new(data, vec![0, 1], vec![120, 640]).unwrap();
    let context = table.context(&batch.cond_id).unwrap();
    let head = DistillHead::new(vocab.len(), &teacher, &student, seed).unwrap();
    ToyStep {
        teacher,
        student,
        head,
        batch,
        eps,
        context,
    }
}

fn gradient_check() -> Outcome {
    let mut s = toy_step(5);
    let sched = make_scheduler(&SchedulerConfig::default()).unwrap();
    let cfg = DistillConfig::default();
    let total = |student: &kdc_core::unet::UNet, s: &ToyStep| {
        let inputs = StepInputs {
            batch: &s.batch,
            eps: &s.eps,
            scheduler: &sched,
            context: &s.context,
        };
        distill_step(Some(&s.teacher), student, &s.head, &inputs, &cfg, Objective::Distill, false).unwrap()
    };
    let analytic = total(&s.student, &s).grads;
    let names: Vec<String> = s.student.params().names().map(str::to_string).collect();
    let mut r = rng::stream(5, "acceptance:gradcheck", 0);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    let h = 1e-5;
    while checked < 200 {
        let name = &names[r.random_range(0..names.len())];
        let len = s.student.params().get(name).unwrap().len();
        let i = r.random_range(0..len);
        let a = analytic.get(name).map_or(0.0, |g| g.data()[i]);
        let orig = s.student.params().get(name).unwrap().data()[i];
        let mut eval = |v: f64| {
            s.student.params_mut().get_mut(name).unwrap().data_mut()[i] = v;
            let student = s.student.clone();
            total(&student, &s).losses.total
        };
        let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
        eval(orig);
        // Central differences cannot resolve gradients below the round-off
        // of the loss value; such entries carry no information.
        if a.abs().max(fd.abs()) < 1e-7 {
            skipped += 1;
            continue;
        }
        worst = worst.max(rel_err(a, fd));
        checked += 1;
    }
    outcome(
        worst <= 1e-4,
        format!("max relative error {worst:.2e} over {checked} parameters (limit 1e-4; {skipped} sub-1e-7 entries resampled)"),
    )
}

fn identical_null() -> Outcome {
    let s = toy_step(9);
    let clone = s.teacher.clone();
    let head = DistillHead::new(2, &s.teacher, &clone, 9).unwrap();
    let sched = make_scheduler(&SchedulerConfig::default()).unwrap();
    let inputs = StepInputs {
        batch: &s.batch,
        eps: &s.eps,
        scheduler: &sched,
        context: &s.context,
    };
    let step = distill_step(Some(&s.teacher), &clone, &head, &inputs, &DistillConfig::default(), Objective::Distill, false).unwrap();
    let (ls, lf) = (step.losses.l_soft.unwrap(), step.losses.l_feature.unwrap());
    outcome(ls <= 1e-6 && lf <= 1e-6, format!("l_soft {ls:.3e}, l_feature {lf:.3e} (limit 1e-6)"))
}

// ---------------------------------------------------------------- 6 and 7

fn stats(mean: &[f64], cov_diag: &[f64]) -> FeatureStats {
    let d = mean.len();
    FeatureStats::new(
        nalgebra::DVector::from_column_slice(mean),
        nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(cov_diag)),
        2,
    )
    .unwrap_or_else(|e| panic!("{d}-d stats: {e}"))
}

fn fid_suite() -> Outcome {
    let mut r = rng::stream(6, "acceptance:fid", 0);
    let feats = Tensor::randn(&[200, 6], 1.0, &mut r);
    let st = FeatureStats::from_features(&feats).unwrap();
    let self_d = fid(&st, &st).unwrap();
    let one_d = fid(&stats(&[0.0], &[1.0]), &stats(&[1.0], &[1.0])).unwrap();
    let shift = fid(&stats(&[0.0, 0.0], &[1.0, 1.0]), &stats(&[3.0, 4.0], &[1.0, 1.0])).unwrap();
    // Two independent N=5000 samples of N(0, I_4) against N(mu, 2 I_4):
    // analytic FID = |mu|² + 4 (sqrt2 - 1)².
    let n = 5000;
    let mu = [1.0, -1.0, 0.5, 2.0];
    let a = Tensor::randn(&[n, 4], 1.0, &mut r);
    let b = Tensor::randn(&[n, 4], 2f64.sqrt(), &mut r);
    let b = Tensor::new(
        vec![n, 4],
        b.data().iter().enumerate().map(|(i, v)| v + mu[i % 4]).collect(),
    )
    .unwrap();
    let sampled = fid(&FeatureStats::from_features(&a).unwrap(), &FeatureStats::from_features(&b).unwrap()).unwrap();
    let analytic = mu.iter().map(|m| m * m).sum::<f64>() + 4.0 * (2f64.sqrt() - 1.0).powi(2);
    let conv = rel_err(sampled, analytic);
    outcome(
        self_d.abs() <= 1e-8 && one_d == 1.0 && (shift - 25.0).abs() <= 1e-9 && conv <= 0.05,
        format!("self {self_d:.1e}, 1-D {one_d}, mean shift {shift}, sampled {sampled:.4} vs analytic {analytic:.4} ({:.2}%)", conv * 100.0),
    )
}

fn kid_suite() -> Outcome {
    let mut r = rng::stream(7, "acceptance:kid", 0);
    let d = 5;
    let x = Tensor::randn(&[8, d], 1.0, &mut r);
    let y = Tensor::randn(&[8, d], 1.3, &mut r);
    let xr: Vec<&[f64]> = x.data().chunks(d).collect();
    let yr: Vec<&[f64]> = y.data().chunks(d).collect();
    let k = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        (dot / d as f64 + 1.0).powi(3)
    };
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..8 {
        for j in 0..8 {
            if i != j {
                kxx += k(xr[i], xr[j]);
                kyy += k(yr[i], yr[j]);
            }
            kxy += k(xr[i], yr[j]);
        }
    }
    let brute = kxx / 56.0 + kyy / 56.0 - 2.0 * kxy / 64.0;
    let lib = mmd2_unbiased(&xr, &yr);
    let kernel_ok = (poly_kernel(xr[0], yr[1]) - k(xr[0], yr[1])).abs() <= 1e-12;
    let agree = (lib - brute).abs();

    // Same-distribution null: the unbiased estimator averages to zero.
    let vals: Vec<f64> = (0..200)
        .map(|i| {
            let mut r = rng::stream(7, "acceptance:kid-null", i);
            let a = Tensor::randn(&[20, d], 1.0, &mut r);
            let b = Tensor::randn(&[20, d], 1.0, &mut r);
            let cfg = KidConfig {
                subsets: 1,
                subset_size: Some(20),
                seed: i,
            };
            kid(&a, &b, &cfg).unwrap().0
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / 200.0;
    let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0).sqrt() / 200f64.sqrt();
    outcome(
        agree <= 1e-10 && kernel_ok && mean.abs() <= 3.0 * se,
        format!("oracle gap {agree:.1e} (limit 1e-10), null mean {mean:.2e} vs 3 SE {:.2e}", 3.0 * se),
    )
}

// ---------------------------------------------------------------- 8

fn replay_invariants() -> Outcome {
    let mut r = rng::stream(8, "acceptance:replay", 0);
    let mut violations = 0;
    for seq in 0..1000u64 {
        let cap = r.random_range(0..24);
        let policy = ReplayPolicy::BalancedReservoir;
        let mut buf = ReplayBuffer::new(cap, policy);
        let classes = r.random_range(1..6);
        let mut offered = Vec::new();
        for c in 0..classes {
            let n = r.random_range(1..20);
            offered.push(n);
            let data: Vec<ReplaySample> = (0..n)
                .map(|_| ReplaySample::new(Tensor::full(&[1, 1, 1], c as f64), c, c).unwrap())
                .collect();
            buf.ingest_class(&data, seq * 16 + c as u64).unwrap();
            if buf.len() > cap {
                violations += 1;
            }
            // Balance binds among classes that offered at least their quota.
            let quotas = ReplayBuffer::quotas(cap, c + 1);
            let h = buf.histogram();
            let held: Vec<usize> = (0..=c).filter(|&i| offered[i] >= quotas[i]).map(|i| h[&i]).collect();
            if let (Some(mx), Some(mn)) = (held.iter().max(), held.iter().min()) {
                if mx - mn > 1 {
                    violations += 1;
                }
            }
        }
    }

    let mut buf = ReplayBuffer::new(6, ReplayPolicy::BalancedReservoir);
    let mut r = rng::stream(8, "acceptance:replay-rt", 0);
    for c in 0..3 {
        let data: Vec<ReplaySample> = (0..5)
            .map(|_| ReplaySample::new(Tensor::randn(&[4, 2, 2], 1.0, &mut r), c, c).unwrap())
            .collect();
        buf.ingest_class(&data, c as u64).unwrap();
    }
    let bytes = buf.to_bytes().into_bytes();
    let again = ReplayBuffer::from_bytes(&bytes).unwrap();
    let bitwise = again.to_bytes().into_bytes() == bytes && again == buf;

    // Default codec: 512² RGB images against 64² 4-channel latents, both
    // stored as f32 by the same serializer.
    let codec = kdc_core::diffusion::CodecConfig::default();
    let (side, lat) = (512usize, 512 / codec.factor);
    let sample_bytes = |shape: &[usize]| {
        let size = |shape: &[usize]| {
            let mut b = ReplayBuffer::new(2, ReplayPolicy::BalancedReservoir);
            b.ingest_class(&vec![ReplaySample::new(Tensor::zeros(shape), 0, 0).unwrap(); 2], 0).unwrap();
            b.to_bytes().into_bytes().len()
        };
        // Two slots of one f32 each carry 8 payload bytes.
        size(shape) - (size(&[1, 1, 1]) - 8)
    };
    let latent = sample_bytes(&[4, lat, lat]);
    let pixel = sample_bytes(&[3, side, side]);
    let ratio = latent as f64 / pixel as f64;
    outcome(
        violations == 0 && bitwise && ratio <= 1.0 / 48.0,
        format!(
            "{violations} capacity/balance violations over 1000 sequences, bitwise round trip {bitwise}, latent/pixel payload {latent}/{pixel} = 1/{:.2}",
            1.0 / ratio
        ),
    )
}

// ---------------------------------------------------------------- 9 to 12

/// Replicate seeds. Desk hyperparameters were chosen on seeds 1 to 3, so
/// the acceptance runs use fresh ones.
const REPLICATES: [u64; 3] = [4, 5, 6];

/// Shared desk-experiment data and teacher.
struct Desk {
    root: PathBuf,
    teacher: PathBuf,
}

const DESK_CONFIG: &str = r#"
schema_version = 1
[train]
class_order = ["circle", "square"]
epochs_per_class = 6
batch_size = 8
learning_rate = 1e-3
buffer_capacity = CAPACITY
seed = SEED
[train.distill]
alpha = 1.0
beta = 3e-4
gamma = 1.0
temperature = 1.0
[teacher]
checkpoint = "TEACHER"
[scheduler]
clip_sample = 1.0
[codec]
factor = 2
[eval]
ENABLED
samples_per_class = 64
seed = SEED
[paths]
data_root = "DATA"
"#;

fn desk_config(desk: &Desk, data: &str, seed: u64, eval: bool) -> ExperimentConfig {
    // Replay holds half of a 256-image class in the continual run and the
    // whole 64-image class in the distillation run.
    let capacity = if eval { 128 } else { 64 };
    let text = DESK_CONFIG
        .replace("CAPACITY", &capacity.to_string())
        .replace("SEED", &seed.to_string())
        .replace("TEACHER", desk.teacher.to_str().unwrap())
        .replace("DATA", desk.root.join(data).to_str().unwrap())
        .replace("ENABLED", if eval { "enabled = true" } else { "enabled = false" });
    ExperimentConfig::from_toml_str(&text).unwrap()
}

fn desk_setup(root: &Path) -> Desk {
    use kdc_core::dataset::write_synthetic_dataset;
    let classes = ["circle", "square"];
    write_synthetic_dataset(&root.join("train"), &classes, 256, 16, 7).unwrap();
    write_synthetic_dataset(&root.join("subset"), &classes, 64, 16, 8).unwrap();
    write_synthetic_dataset(&root.join("held_out"), &classes, 64, 16, 9).unwrap();
    let desk = Desk {
        root: root.to_path_buf(),
        teacher: root.join("teacher.ckpt"),
    };
    // The teacher learns both classes from the full training set.
    let mut cfg = desk_config(&desk, "train", 0, false);
    cfg.teacher.checkpoint = None;
    cfg.teacher.pretrain_steps = 1000;
    let env = TrainEnv::new(cfg, &root.join("teacher_env")).unwrap();
    let samples: Vec<ReplaySample> = env.classes.iter().flat_map(|c| c.samples.iter().cloned()).collect();
    let teacher = pretrain_teacher(&env, &env.cfg.model.original_spec(), &samples).unwrap();
    save_model(&desk.teacher, &teacher).unwrap();
    desk
}

fn class1_fid_after_class2(run_dir: &Path) -> f64 {
    let text = std::fs::read_to_string(run_dir.join("metrics/class_2/circle.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["fid"].as_f64().unwrap()
}

fn continual_replay(desk: &Desk) -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in REPLICATES {
        let cfg = desk_config(desk, "train", seed, true);
        let mut fids = [0.0; 2];
        for (k, mode) in [TrainMode::Full, TrainMode::NoReplay].into_iter().enumerate() {
            let dir = desk.root.join(format!("c9_{}_{seed}", mode.as_str()));
            run_experiment(cfg.clone(), mode, &dir, &RunOptions::default()).unwrap();
            fids[k] = class1_fid_after_class2(&dir);
        }
        wins += usize::from(fids[0] < fids[1]);
        rows.push(format!("seed {seed}: replay {:.3} vs no_replay {:.3}", fids[0], fids[1]));
    }
    outcome(wins == 3, format!("class-1 FID after class 2, {wins}/3 replicates better with replay; {}", rows.join("; ")))
}

fn distillation_helps(desk: &Desk) -> Outcome {
    let held_cfg = desk_config(desk, "held_out", 0, false);
    let held_env = TrainEnv::new(held_cfg, &desk.root.join("held_env")).unwrap();
    let held: Vec<ReplaySample> = held_env.classes.iter().flat_map(|c| c.samples.iter().cloned()).collect();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in REPLICATES {
        let cfg = desk_config(desk, "subset", seed, false);
        let mut mse = [0.0; 2];
        let mut steps = [0; 2];
        for (k, mode) in [TrainMode::Full, TrainMode::NoKd].into_iter().enumerate() {
            let dir = desk.root.join(format!("c10_{}_{seed}", mode.as_str()));
            let out = run_experiment(cfg.clone(), mode, &dir, &RunOptions::default()).unwrap();
            mse[k] = denoising_mse(&held_env, &out.student, &held, 1234, 16).unwrap();
            steps[k] = out.optimizer_steps;
        }
        wins += usize::from(mse[0] < mse[1] && steps[0] == steps[1]);
        rows.push(format!("seed {seed}: kd {:.5} vs no_kd {:.5} at {} steps", mse[0], mse[1], steps[0]));
    }
    outcome(wins == 3, format!("held-out MSE, {wins}/3 replicates better with distillation; {}", rows.join("; ")))
}

fn determinism(root: &Path) -> Outcome {
    use kdc_core::dataset::write_synthetic_dataset;
    let data = root.join("det_data");
    write_synthetic_dataset(&data, &["circle", "square"], 12, 16, 3).unwrap();
    let text = format!(
        r#"
schema_version = 1
[train]
class_order = ["circle", "square"]
epochs_per_class = 2
batch_size = 4
grad_accum = 2
learning_rate = 1e-3
buffer_capacity = 6
seed = 11
[teacher]
pretrain_steps = 4
batch_size = 4
[codec]
factor = 2
[eval]
samples_per_class = 2
sampling_steps = 2
saved_samples = 1
[paths]
data_root = "{}"
"#,
        data.display()
    );
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    let run = |name: &str, opts: RunOptions| {
        let dir = root.join(name);
        run_experiment(cfg.clone(), TrainMode::Full, &dir, &opts).unwrap();
        dir
    };
    let a = run("det_a", RunOptions::default());
    let b = run("det_b", RunOptions::default());
    let c = run(
        "det_c",
        RunOptions {
            stop_after_class: Some(1),
            ..Default::default()
        },
    );
    let c = run(
        "det_c",
        RunOptions {
            resume: Some(kdc_core::trainer::checkpoint_path(&c, 1)),
            ..Default::default()
        },
    );
    let log = |d: &Path| std::fs::read(d.join(kdc_core::trainer::LOSS_LOG)).unwrap();
    let last = |d: &Path| std::fs::read(kdc_core::trainer::checkpoint_path(d, 2)).unwrap();
    let same = log(&a) == log(&b);
    let resumed = log(&a) == log(&c);
    let ckpt = last(&a) == last(&c);
    let lines = log(&a).iter().filter(|&&b| b == b'\n').count();
    outcome(
        same && resumed && ckpt && lines > 0,
        format!("repeat run identical {same}, resumed log identical {resumed}, final checkpoint identical {ckpt} ({lines} steps)"),
    )
}

fn latency_direction(root: &Path) -> Outcome {
    let teacher = materialize(&original_spec(Scale::Toy), 12).unwrap();
    let student = build_student(&teacher, Default::default(), 12).unwrap();
    let sched = make_scheduler(&SchedulerConfig::default()).unwrap();
    let table = ConditioningTable::new(&["circle".to_string()], teacher.spec().context_dim, 0).unwrap();
    let codec = PoolCodec::new(8);
    let time = |model: &kdc_core::unet::UNet| {
        let p = Pipeline {
            model,
            scheduler: &sched,
            table: &table,
            codec: &codec,
            latent_shape: [4, 16, 16],
        };
        bench_inference(|| p.generate("circle", 10, 0).map(|_| ()), 2, 10, &root.join("bench.lock")).unwrap()
    };
    let (o, s) = (time(&teacher), time(&student));
    outcome(
        s.mean_s < o.mean_s,
        format!(
            "10-run means: student {:.4}s ± {:.4}, original {:.4}s ± {:.4} on {}",
            s.mean_s, s.std_s, o.mean_s, o.std_s, s.device
        ),
    )
}

fn selected() -> Option<Vec<usize>> {
    let v = std::env::var("KDC_ACCEPTANCE").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let only = selected();
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut failed = Vec::new();
    let mut check = |n: usize, title: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let t0 = Instant::now();
        let o = f();
        report(n, title, &o, t0.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(n);
        }
    };
    check(1, "parameter counts", &mut params_reproduced);
    check(2, "MAC counts", &mut macs_reproduced);
    check(3, "loss oracles", &mut loss_oracles);
    check(4, "gradient check", &mut gradient_check);
    check(5, "identical-network null", &mut identical_null);
    check(6, "FID analytic suite", &mut fid_suite);
    check(7, "KID suite", &mut kid_suite);
    check(8, "replay invariants", &mut replay_invariants);
    if wanted(9) || wanted(10) {
        let t0 = Instant::now();
        let desk = desk_setup(dir.path());
        let _ = writeln!(std::io::stderr(), "desk teacher pretrained in {:.1}s", t0.elapsed().as_secs_f64());
        check(9, "continual replay", &mut || continual_replay(&desk));
        check(10, "distillation vs no_kd", &mut || distillation_helps(&desk));
    }
    check(11, "determinism and resume", &mut || determinism(dir.path()));
    check(12, "latency direction", &mut || latency_direction(dir.path()));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
