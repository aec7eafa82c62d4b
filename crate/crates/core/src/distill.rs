//! Distillation objective: softened-logit KL, hard-label cross-entropy,
//! feature alignment and denoising MSE, plus one combined training step.
//!
//! A noise-predicting U-Net has no categories, so logits are the spatial
//! mean of the noise prediction per latent channel. Hard labels are class
//! ids read through a fixed linear map of those pooled logits whenever the
//! class count differs from the channel count.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diffusion::{LatentBatch, Scheduler};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;
use crate::unet::UNet;

/// Lower and upper probability clamps used inside logarithms.
const PROB_FLOOR: f64 = 1e-300;
const PROB_CEIL: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.5,
            beta: 0.5,
            gamma: 1.0,
            temperature: 2.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.temperature];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("distillation weights must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("beta and gamma must be non-negative".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<(usize, usize)> {
    if a.ndim() != 2 || a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: expected equal [N, K] shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !a.all_finite() || !b.all_finite() {
        return Err(Error::Validation(format!("{what}: non-finite input")));
    }
    Ok((a.dim(0), a.dim(1)))
}

/// Row-wise softmax of `logits / t`.
pub fn softmax_rows(logits: &Tensor, t: f64) -> Tensor {
    let k = *logits.shape().last().unwrap();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - mx) / t).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

fn log_softmax_row(row: &[f64], t: f64) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| ((v - mx) / t).exp()).sum::<f64>().ln();
    row.iter().map(|v| (v - mx) / t - lse).collect()
}

/// `T² · mean_i KL(q_T || q_S)` with `q = softmax(logits / T)`, and its
/// gradient with respect to the student logits.
pub fn soft_loss_grad(teacher: &Tensor, student: &Tensor, t: f64) -> Result<(f64, Tensor)> {
    let (n, k) = check_pair(teacher, student, "soft loss")?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Validation(format!("temperature must be positive, got {t}")));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; n * k];
    for i in 0..n {
        let lt = log_softmax_row(teacher.row(i), t);
        let ls = log_softmax_row(student.row(i), t);
        for j in 0..k {
            let qt = lt[j].exp();
            total += qt * (lt[j] - ls[j]);
            grad[i * k + j] = t * (ls[j].exp() - qt) / n as f64;
        }
    }
    let value = (t * t * total / n as f64).max(0.0);
    Ok((value, Tensor::new(vec![n, k], grad)?))
}

pub fn soft_loss(teacher: &Tensor, student: &Tensor, t: f64) -> Result<f64> {
    soft_loss_grad(teacher, student, t).map(|r| r.0)
}

fn check_one_hot(labels: &Tensor) -> Result<()> {
    let k = labels.dim(1);
    for (i, row) in labels.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Validation(format!("label row {i} is not one-hot")));
        }
    }
    Ok(())
}

/// `mean_i (-y·log q_S - y·log q_T)` at unit temperature. The teacher term
/// enters the value only; the gradient is with respect to the student
/// logits.
pub fn hard_loss_grad(labels: &Tensor, student: &Tensor, teacher: &Tensor) -> Result<(f64, Tensor)> {
    let (n, k) = check_pair(student, teacher, "hard loss")?;
    check_pair(labels, student, "hard loss labels")?;
    check_one_hot(labels)?;
    let qs = softmax_rows(student, 1.0);
    let qt = softmax_rows(teacher, 1.0);
    let mut total = 0.0;
    let mut grad = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            let y = labels.data()[i * k + j];
            let ps = qs.data()[i * k + j];
            let pt = qt.data()[i * k + j];
            if y != 0.0 {
                total -= y * ps.clamp(PROB_FLOOR, PROB_CEIL).ln();
                total -= y * pt.clamp(PROB_FLOOR, PROB_CEIL).ln();
            }
            grad[i * k + j] = (ps - y) / n as f64;
        }
    }
    Ok((total / n as f64, Tensor::new(vec![n, k], grad)?))
}

pub fn hard_loss(labels: &Tensor, student: &Tensor, teacher: &Tensor) -> Result<f64> {
    hard_loss_grad(labels, student, teacher).map(|r| r.0)
}

/// `mean_i ||phi_t_i - phi_s_i||²` and its gradient with respect to `phi_s`.
pub fn feature_loss_grad(phi_t: &Tensor, phi_s: &Tensor) -> Result<(f64, Tensor)> {
    let (n, _) = check_pair(phi_t, phi_s, "feature loss")?;
    let diff = phi_s.sub(phi_t)?;
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n as f64;
    Ok((value, diff.scale(2.0 / n as f64)))
}

pub fn feature_loss(phi_t: &Tensor, phi_s: &Tensor) -> Result<f64> {
    feature_loss_grad(phi_t, phi_s).map(|r| r.0)
}

/// Elementwise mean squared error and its gradient with respect to `pred`.
pub fn mse_loss_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "mse: shapes {:?} and {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let diff = pred.sub(target)?;
    let n = diff.len() as f64;
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff.scale(2.0 / n)))
}

pub fn total_loss(l_soft: f64, l_hard: f64, l_feature: f64, l_mse: f64, cfg: &DistillConfig) -> Result<f64> {
    if ![l_soft, l_hard, l_feature, l_mse].iter().all(|v| v.is_finite()) {
        return Err(Error::Validation("loss component is not finite".into()));
    }
    Ok(cfg.alpha * l_soft + (1.0 - cfg.alpha) * l_hard + cfg.beta * l_feature + cfg.gamma * l_mse)
}

/// Which terms drive the student update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Distill,
    /// Denoising MSE only; the teacher is not consulted.
    MseOnly,
}

/// Loss values for one step. Distillation terms are `None` under
/// [`Objective::MseOnly`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_soft: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_hard: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_feature: Option<f64>,
    pub l_mse: f64,
    pub total: f64,
}

/// One JSON-lines record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub class: String,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Fixed pieces around the student: the class readout for hard labels and
/// an optional trainable projection of student features.
#[derive(Debug, Clone)]
pub struct DistillHead {
    num_classes: usize,
    /// `[num_classes, K]`, `None` when it would be the identity.
    readout: Option<Tensor>,
    /// Trainable `feature_proj.weight` `[D_teacher, D_student]`, when widths differ.
    projection: ParamStore,
}

pub const LOGIT_CHANNELS: usize = 4;

impl DistillHead {
    pub fn new(num_classes: usize, teacher: &UNet, student: &UNet, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let k = student.spec().out_channels;
        if teacher.spec().out_channels != k {
            return Err(Error::Dimension("teacher and student predict different channel counts".into()));
        }
        let readout = (num_classes != k).then(|| {
            let std = 1.0 / (k as f64).sqrt();
            Tensor::randn(&[num_classes, k], std, &mut rng::stream(seed, "distill:readout", 0))
        });
        let (dt, ds) = (feature_dim(teacher), feature_dim(student));
        let mut projection = ParamStore::new();
        if dt != ds {
            let std = 1.0 / (ds as f64).sqrt();
            projection.insert(
                "feature_proj.weight",
                Tensor::randn(&[dt, ds], std, &mut rng::stream(seed, "distill:proj", 0)),
            );
        }
        Ok(DistillHead {
            num_classes,
            readout,
            projection,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn projection(&self) -> &ParamStore {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut ParamStore {
        &mut self.projection
    }

    pub fn one_hot(&self, cond_ids: &[usize]) -> Result<Tensor> {
        let c = self.num_classes;
        let mut out = vec![0.0; cond_ids.len() * c];
        for (i, &id) in cond_ids.iter().enumerate() {
            if id >= c {
                return Err(Error::Validation(format!("class id {id} outside {c} classes")));
            }
            out[i * c + id] = 1.0;
        }
        Tensor::new(vec![cond_ids.len(), c], out)
    }

    fn class_logits(&self, g: &mut Graph, pooled: Var) -> Var {
        match &self.readout {
            Some(r) => {
                let r = g.input(r.clone());
                g.linear(pooled, r, None)
            }
            None => pooled,
        }
    }

    fn class_logits_value(&self, pooled: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let p = g.input(pooled.clone());
        let v = self.class_logits(&mut g, p);
        g.value(v).clone()
    }
}

fn feature_dim(m: &UNet) -> usize {
    let s = m.spec();
    s.mid_block.out_channels + s.up_blocks.last().map_or(0, |b| b.out_channels)
}

/// Pooled tap features `[N, D_mid + D_up]`.
fn tap_features(g: &mut Graph, mid: Var, last_up: Var) -> Var {
    let a = g.mean_spatial(mid);
    let b = g.mean_spatial(last_up);
    g.concat_channels(&[a, b])
}

#[derive(Debug, Clone)]
pub struct DistillStep {
    pub losses: LossBreakdown,
    /// Gradients for student parameters and any projection weights.
    pub grads: IndexMap<String, Tensor>,
}

/// Teacher outputs needed by the distillation terms.
struct TeacherView {
    logits: Tensor,
    features: Tensor,
}

fn teacher_view(teacher: &UNet, x_t: &Tensor, timesteps: &[usize], context: &Tensor) -> Result<TeacherView> {
    let mut g = Graph::new();
    let x = g.input(x_t.clone());
    let c = g.input(context.clone());
    let out = teacher.forward(&mut g, x, timesteps, c)?;
    let logits = g.mean_spatial(out.noise);
    let feats = tap_features(&mut g, out.mid, out.last_up);
    Ok(TeacherView {
        logits: g.value(logits).clone(),
        features: g.value(feats).clone(),
    })
}

/// Inputs shared by teacher and student for one step.
pub struct StepInputs<'a> {
    pub batch: &'a LatentBatch,
    pub eps: &'a Tensor,
    pub scheduler: &'a Scheduler,
    /// Cross-attention context `[N, L, D]` for the batch's cond ids.
    pub context: &'a Tensor,
}

/// Runs teacher and student on the same noised input and returns the loss
/// breakdown plus gradients for the student (and projection) only.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    teacher: Option<&UNet>,
    student: &UNet,
    head: &DistillHead,
    inputs: &StepInputs<'_>,
    cfg: &DistillConfig,
    objective: Objective,
    f32_activations: bool,
) -> Result<DistillStep> {
    cfg.validate()?;
    let batch = inputs.batch;
    batch.check_timesteps(inputs.scheduler)?;
    let x_t = inputs.scheduler.add_noise_tensor(&batch.data, inputs.eps, &batch.timestep)?;

    let mut g = Graph::new().with_f32_activations(f32_activations);
    let x = g.input(x_t.clone());
    let ctx = g.input(inputs.context.clone());
    let out = student.forward(&mut g, x, &batch.timestep, ctx)?;
    let (l_mse, mse_grad) = mse_loss_grad(g.value(out.noise), inputs.eps)?;
    let mut terms = vec![g.loss(out.noise, cfg.gamma * l_mse, mse_grad.scale(cfg.gamma))];

    let losses = match objective {
        Objective::MseOnly => LossBreakdown {
            l_soft: None,
            l_hard: None,
            l_feature: None,
            l_mse,
            total: total_loss(0.0, 0.0, 0.0, l_mse, &DistillConfig { alpha: 1.0, beta: 0.0, ..*cfg })?,
        },
        Objective::Distill => {
            let teacher = teacher.ok_or_else(|| Error::Usage("distillation needs a teacher model".into()))?;
            let tv = teacher_view(teacher, &x_t, &batch.timestep, inputs.context)?;

            let pooled = g.mean_spatial(out.noise);
            let (l_soft, soft_grad) = soft_loss_grad(&tv.logits, g.value(pooled), cfg.temperature)?;
            terms.push(g.loss(pooled, cfg.alpha * l_soft, soft_grad.scale(cfg.alpha)));

            let labels = head.one_hot(&batch.cond_id)?;
            let s_cls = head.class_logits(&mut g, pooled);
            let t_cls = head.class_logits_value(&tv.logits);
            let (l_hard, hard_grad) = hard_loss_grad(&labels, g.value(s_cls), &t_cls)?;
            let w_hard = 1.0 - cfg.alpha;
            terms.push(g.loss(s_cls, w_hard * l_hard, hard_grad.scale(w_hard)));

            let mut feats = tap_features(&mut g, out.mid, out.last_up);
            if head.projection.contains("feature_proj.weight") {
                let w = g.param(&head.projection, "feature_proj.weight")?;
                feats = g.linear(feats, w, None);
            }
            let (l_feature, feat_grad) = feature_loss_grad(&tv.features, g.value(feats))?;
            terms.push(g.loss(feats, cfg.beta * l_feature, feat_grad.scale(cfg.beta)));

            LossBreakdown {
                l_soft: Some(l_soft),
                l_hard: Some(l_hard),
                l_feature: Some(l_feature),
                l_mse,
                total: total_loss(l_soft, l_hard, l_feature, l_mse, cfg)?,
            }
        }
    };
    let mut root = terms[0];
    for &t in &terms[1..] {
        root = g.add(root, t);
    }
    let grads = g.backward(root).into_param_grads();
    Ok(DistillStep { losses, grads })
}
