//! Label-smoothed task loss plus temperature-scaled distillation from the
//! frozen previous model, evaluated on the same augmented view.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{log_softmax_rows, softmax_rows, Tensor};
use crate::zoo::ModelHandle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(p_student || p_teacher)`, current model first.
    StudentToTeacher,
    /// `KL(p_teacher || p_student)`, the conventional distillation direction.
    TeacherToStudent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Kl,
    /// Cross-entropy from the teacher's softened distribution to the
    /// student's, minus the teacher entropy so identical outputs cost zero.
    Ce,
    Mse,
}

impl FromStr for KlDirection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student_to_teacher" => Ok(Self::StudentToTeacher),
            "teacher_to_student" => Ok(Self::TeacherToStudent),
            other => Err(Error::config("kd.kl_direction", format!("unknown direction `{other}`"))),
        }
    }
}

impl FromStr for Distance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(Self::Kl),
            "ce" => Ok(Self::Ce),
            "mse" => Ok(Self::Mse),
            other => Err(Error::config("kd.distance", format!("unknown distance `{other}`"))),
        }
    }
}

impl KlDirection {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::StudentToTeacher => "student_to_teacher",
            Self::TeacherToStudent => "teacher_to_student",
        }
    }
}

impl Distance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Kl => "kl",
            Self::Ce => "ce",
            Self::Mse => "mse",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdConfig {
    pub psi: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kl_direction: KlDirection,
    pub distance: Distance,
    /// Multiply the KL term by `tau^2`.
    pub tau_squared: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            psi: 0.1,
            tau: 1.0,
            alpha: 1.0,
            beta: 1.0,
            kl_direction: KlDirection::StudentToTeacher,
            distance: Distance::Kl,
            tau_squared: true,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.psi) {
            return Err(Error::config("kd.psi", format!("{} is outside [0, 1)", self.psi)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("kd.tau", "must be positive"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("kd.alpha", "must be non-negative"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("kd.beta", "must be non-negative"));
        }
        Ok(())
    }

    pub fn kd_loss(&self) -> KdLoss {
        KdLoss {
            tau: self.tau,
            direction: self.kl_direction,
            distance: self.distance,
            tau_squared: self.tau_squared,
        }
    }
}

/// `y (1 - psi) + psi / C` per row.
pub fn smooth_labels(labels: &[usize], psi: f64, num_classes: usize) -> Result<Tensor> {
    if !(0.0..1.0).contains(&psi) {
        return Err(Error::config("kd.psi", format!("{psi} is outside [0, 1)")));
    }
    let mut out = Tensor::full(&[labels.len(), num_classes], psi / num_classes as f64);
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Contract(format!("label {l} >= {num_classes} classes")));
        }
        out.data_mut()[i * num_classes + l] += 1.0 - psi;
    }
    Ok(out)
}

/// Batch-mean cross-entropy between `softmax(logits)` and soft targets.
pub fn task_loss(logits: &Tensor, soft_targets: &Tensor) -> Result<f64> {
    Ok(task_loss_grad(logits, soft_targets)?.0)
}

/// Task loss and its gradient with respect to the logits.
pub fn task_loss_grad(logits: &Tensor, soft_targets: &Tensor) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if soft_targets.shape() != logits.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            soft_targets.shape()
        )));
    }
    for row in soft_targets.data().chunks(k) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!("soft target row sums to {s}, not 1")));
        }
    }
    if n == 0 {
        return Ok((0.0, logits.clone()));
    }
    let logp = log_softmax_rows(logits.data(), k, 1.0);
    let loss = -logp
        .iter()
        .zip(soft_targets.data())
        .map(|(lp, q)| if *q == 0.0 { 0.0 } else { q * lp })
        .sum::<f64>()
        / n as f64;
    let grad: Vec<f64> = logp
        .iter()
        .zip(soft_targets.data())
        .map(|(lp, q)| (lp.exp() - q) / n as f64)
        .collect();
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}

/// A distillation distance between temperature-softened output distributions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdLoss {
    pub tau: f64,
    pub direction: KlDirection,
    pub distance: Distance,
    pub tau_squared: bool,
}

impl KdLoss {
    /// Multiplier applied to the raw divergence.
    pub fn scale(&self) -> f64 {
        if self.distance == Distance::Kl && self.tau_squared {
            self.tau * self.tau
        } else {
            1.0
        }
    }

    /// Batch-mean loss and its gradient with respect to the student logits.
    pub fn value_and_grad(&self, student: &Tensor, teacher: &Tensor) -> Result<(f64, Tensor)> {
        let (n, k) = student.dims2()?;
        if teacher.shape() != student.shape() {
            return Err(Error::Shape(format!(
                "student {:?} vs teacher {:?}",
                student.shape(),
                teacher.shape()
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("kd.tau", "must be positive"));
        }
        if n == 0 {
            return Ok((0.0, student.clone()));
        }
        let tau = self.tau;
        let scale = self.scale() / n as f64;
        let ps = softmax_rows(student.data(), k, tau);
        let pt = softmax_rows(teacher.data(), k, tau);
        let lps = log_softmax_rows(student.data(), k, tau);
        let lpt = log_softmax_rows(teacher.data(), k, tau);
        let mut total = 0.0;
        let mut grad = vec![0.0; n * k];
        for i in 0..n {
            let r = i * k..(i + 1) * k;
            let (ps, pt, lps, lpt, g) = (&ps[r.clone()], &pt[r.clone()], &lps[r.clone()], &lpt[r.clone()], &mut grad[r]);
            match (self.distance, self.direction) {
                (Distance::Kl, KlDirection::StudentToTeacher) => {
                    let kl: f64 = (0..k).map(|j| ps[j] * (lps[j] - lpt[j])).sum();
                    total += kl;
                    for j in 0..k {
                        g[j] = scale / tau * ps[j] * (lps[j] - lpt[j] - kl);
                    }
                }
                (Distance::Kl, KlDirection::TeacherToStudent) | (Distance::Ce, _) => {
                    let d: f64 = (0..k).map(|j| pt[j] * (lpt[j] - lps[j])).sum();
                    total += d;
                    for j in 0..k {
                        g[j] = scale / tau * (ps[j] - pt[j]);
                    }
                }
                (Distance::Mse, _) => {
                    let d: f64 = (0..k).map(|j| (ps[j] - pt[j]).powi(2)).sum::<f64>() / k as f64;
                    total += d;
                    let dp: Vec<f64> = (0..k).map(|j| 2.0 * (ps[j] - pt[j]) / k as f64).collect();
                    let dot: f64 = (0..k).map(|j| dp[j] * ps[j]).sum();
                    for j in 0..k {
                        g[j] = scale / tau * ps[j] * (dp[j] - dot);
                    }
                }
            }
        }
        Ok((total * scale, Tensor::from_vec(student.shape(), grad)?))
    }
}

/// Distillation loss with the KL term scaled by `tau^2`.
pub fn kd_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    tau: f64,
    direction: KlDirection,
    distance: Distance,
) -> Result<f64> {
    let loss = KdLoss {
        tau,
        direction,
        distance,
        tau_squared: true,
    };
    Ok(loss.value_and_grad(student_logits, teacher_logits)?.0)
}

/// Weighted loss components of one objective evaluation, keyed by name:
/// `task`, `kd`, `qdi_kd`, `buffer`, and `kd_scale` (the multiplier applied to
/// the distillation divergence) whenever a distillation term is active.
pub type Breakdown = BTreeMap<&'static str, f64>;

pub struct ObjectiveOutput {
    pub total: f64,
    pub breakdown: Breakdown,
    pub param_grads: Vec<f64>,
}

/// Evaluates the full objective on one step's batches, backpropagates into
/// the student and commits its train-mode statistic update.
///
/// The teacher must be in eval mode; it is only read through
/// [`ModelHandle::predict`], so no gradient or state change reaches it.
/// `synthetic` holds inverted prior-task inputs (used only for the
/// distillation term); `buffer` holds replayed labelled samples.
pub fn total_objective(
    student: &mut ModelHandle,
    teacher: Option<&ModelHandle>,
    task: &LabeledBatch,
    synthetic: Option<&Tensor>,
    buffer: Option<&LabeledBatch>,
    cfg: &KdConfig,
) -> Result<ObjectiveOutput> {
    cfg.validate()?;
    if let Some(t) = teacher {
        if t.mode() != Mode::Eval {
            return Err(Error::Contract("teacher must be frozen in eval mode".into()));
        }
    }
    let k = student.output_dim();
    let kd_on = teacher.is_some() && cfg.alpha > 0.0;
    let synth = synthetic.filter(|_| teacher.is_some() && cfg.beta > 0.0);

    let mut parts: Vec<&Tensor> = vec![&task.inputs];
    if let Some(s) = synth {
        parts.push(s);
    }
    if let Some(b) = buffer {
        parts.push(&b.inputs);
    }
    let inputs = Tensor::concat_batch(&parts)?;
    let (logits, trace) = student.forward_traced(&inputs)?;

    let n_task = task.len();
    let n_synth = synth.map_or(0, |s| s.batch());
    let mut grad = Tensor::zeros(logits.shape());
    let mut breakdown = Breakdown::new();
    let kd = cfg.kd_loss();

    let task_logits = logits.slice_batch(0, n_task);
    let soft = smooth_labels(&task.labels, cfg.psi, k)?;
    let (l_task, g_task) = task_loss_grad(&task_logits, &soft)?;
    grad.data_mut()[..n_task * k].copy_from_slice(g_task.data());
    breakdown.insert("task", l_task);
    let mut total = l_task;

    if kd_on {
        let teacher_logits = teacher.unwrap().predict(&task.inputs)?;
        let (l, g) = kd.value_and_grad(&task_logits, &teacher_logits)?;
        add_scaled(&mut grad.data_mut()[..n_task * k], g.data(), cfg.alpha);
        breakdown.insert("kd", cfg.alpha * l);
        total += cfg.alpha * l;
    }
    if let Some(s) = synth {
        let range = n_task * k..(n_task + n_synth) * k;
        let s_logits = logits.slice_batch(n_task, n_task + n_synth);
        let teacher_logits = teacher.unwrap().predict(s)?;
        let (l, g) = kd.value_and_grad(&s_logits, &teacher_logits)?;
        add_scaled(&mut grad.data_mut()[range], g.data(), cfg.beta);
        breakdown.insert("qdi_kd", cfg.beta * l);
        total += cfg.beta * l;
    }
    if kd_on || synth.is_some() {
        breakdown.insert("kd_scale", kd.scale());
    }
    if let Some(b) = buffer {
        let start = n_task + n_synth;
        let b_logits = logits.slice_batch(start, start + b.len());
        let soft = smooth_labels(&b.labels, cfg.psi, k)?;
        let (l, g) = task_loss_grad(&b_logits, &soft)?;
        add_scaled(&mut grad.data_mut()[start * k..], g.data(), 1.0);
        breakdown.insert("buffer", l);
        total += l;
    }

    let mut param_grads = vec![0.0; student.param_count()];
    student.backward(&trace, Some(&grad), &[], Some(&mut param_grads))?;
    student.commit(&trace);
    Ok(ObjectiveOutput {
        total,
        breakdown,
        param_grads,
    })
}

fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
}
