//! Model inversion: synthesizes prior-task inputs by optimizing pixels
//! against the frozen previous model. Starting from the current batch (quick
//! inversion) instead of noise needs far fewer steps.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetDescriptor, LabeledBatch, TaskStream};
use crate::distill::{smooth_labels, task_loss_grad};
use crate::error::{Error, Result};
use crate::nn::{channel_moments, Mode, Trace};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::util::derive_seed;
use crate::zoo::{FeatureStats, ModelHandle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Gaussian,
    CurrentBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSource {
    /// Normalization running statistics; falls back to `Approximate` for
    /// teachers without them.
    Running,
    /// Moments of the current batch, computed once before optimization.
    Approximate,
}

impl FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "current_batch" => Ok(Self::CurrentBatch),
            other => Err(Error::config("inversion.init", format!("unknown init mode `{other}`"))),
        }
    }
}

impl FromStr for StatsSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "running" => Ok(Self::Running),
            "approximate" => Ok(Self::Approximate),
            other => Err(Error::config("inversion.stats_source", format!("unknown stats source `{other}`"))),
        }
    }
}

impl InitMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::CurrentBatch => "current_batch",
        }
    }
}

impl StatsSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Running => "running",
            Self::Approximate => "approximate",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionConfig {
    pub k: usize,
    pub lr: f64,
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub alpha_feature: f64,
    pub init_mode: InitMode,
    pub stats_source: StatsSource,
    /// Synthetic batch size when there is no current batch to copy it from.
    pub batch_size: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            k: 500,
            lr: 0.005,
            alpha_tv: 0.001,
            alpha_l2: 0.0,
            alpha_feature: 0.1,
            init_mode: InitMode::CurrentBatch,
            stats_source: StatsSource::Running,
            batch_size: 32,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("inversion.alpha_tv", self.alpha_tv),
            ("inversion.alpha_l2", self.alpha_l2),
            ("inversion.alpha_feature", self.alpha_feature),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a non-negative number"));
            }
        }
        if self.k > 0 && !(self.lr > 0.0) {
            return Err(Error::config("inversion.lr", "must be positive when steps > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("inversion.batch_size", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    pub inputs: Tensor,
    pub targets: Vec<usize>,
    pub steps_used: usize,
    /// Total inversion loss at the start of each step.
    pub loss_trace: Vec<f64>,
}

impl SyntheticBatch {
    pub fn as_labeled(&self) -> LabeledBatch {
        LabeledBatch {
            inputs: self.inputs.clone(),
            labels: self.targets.clone(),
            view_seed: 0,
        }
    }
}

/// Mean squared difference of horizontal neighbours plus the same for
/// vertical neighbours.
pub fn tv_loss(images: &Tensor) -> Result<f64> {
    Ok(tv_loss_grad(images)?.0)
}

pub fn tv_loss_grad(images: &Tensor) -> Result<(f64, Tensor)> {
    let (n, c, h, w) = images.dims4()?;
    let x = images.data();
    let mut grad = vec![0.0; x.len()];
    let mut loss = 0.0;
    let planes = n * c;
    let ph = planes * h * w.saturating_sub(1);
    let pv = planes * h.saturating_sub(1) * w;
    for p in 0..planes {
        let base = p * h * w;
        if ph > 0 {
            let s = 2.0 / ph as f64;
            for y in 0..h {
                for xx in 0..w - 1 {
                    let (a, b) = (base + y * w + xx, base + y * w + xx + 1);
                    let d = x[b] - x[a];
                    loss += d * d / ph as f64;
                    grad[b] += s * d;
                    grad[a] -= s * d;
                }
            }
        }
        if pv > 0 {
            let s = 2.0 / pv as f64;
            for y in 0..h - 1 {
                for xx in 0..w {
                    let (a, b) = (base + y * w + xx, base + (y + 1) * w + xx);
                    let d = x[b] - x[a];
                    loss += d * d / pv as f64;
                    grad[b] += s * d;
                    grad[a] -= s * d;
                }
            }
        }
    }
    Ok((loss, Tensor::from_vec(images.shape(), grad)?))
}

/// Mean squared pixel value.
pub fn l2_loss(images: &Tensor) -> f64 {
    l2_loss_grad(images).0
}

pub fn l2_loss_grad(images: &Tensor) -> (f64, Tensor) {
    let n = images.len().max(1) as f64;
    let loss = images.data().iter().map(|v| v * v).sum::<f64>() / n;
    let mut g = images.clone();
    g.data_mut().iter_mut().for_each(|v| *v *= 2.0 / n);
    (loss, g)
}

/// Squared distance of one feature map's batch moments to targets, averaged
/// over channels for the mean and the variance separately, plus the gradient
/// with respect to the feature map.
pub fn moment_loss_grad(fmap: &Tensor, target_mean: &[f64], target_var: &[f64]) -> Result<(f64, Tensor)> {
    let (n, c, h, w) = fmap.dims4()?;
    if target_mean.len() != c || target_var.len() != c {
        return Err(Error::Contract(format!(
            "target statistics for {} channels, feature map has {c}",
            target_mean.len()
        )));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let (mu, var) = channel_moments(fmap.data(), n, c, hw);
    let mut loss = 0.0;
    let mut dmu = vec![0.0; c];
    let mut dvar = vec![0.0; c];
    for ch in 0..c {
        let em = mu[ch] - target_mean[ch];
        let ev = var[ch] - target_var[ch];
        loss += (em * em + ev * ev) / c as f64;
        dmu[ch] = 2.0 * em / c as f64;
        dvar[ch] = 2.0 * ev / c as f64;
    }
    let mut g = vec![0.0; fmap.len()];
    let x = fmap.data();
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            for s in 0..hw {
                g[off + s] = (dmu[ch] + dvar[ch] * 2.0 * (x[off + s] - mu[ch])) / m;
            }
        }
    }
    Ok((loss, Tensor::from_vec(fmap.shape(), g)?))
}

/// Sum over target layers of the moment loss, with per-tap gradients.
fn feature_terms(trace: &Trace, target: &FeatureStats) -> Result<(f64, Vec<Option<Tensor>>)> {
    let taps = trace.taps();
    if target.means.len() != target.layer_ids.len() || target.variances.len() != target.layer_ids.len() {
        return Err(Error::Contract("feature statistics are ragged".into()));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; taps.len()];
    let mut loss = 0.0;
    for (j, &id) in target.layer_ids.iter().enumerate() {
        let fmap = taps
            .get(id)
            .and_then(|t| t.as_ref())
            .ok_or_else(|| Error::Contract(format!("teacher has no instrumented layer {id}")))?;
        let (l, g) = moment_loss_grad(fmap, &target.means[j], &target.variances[j])?;
        loss += l;
        grads[id] = Some(g);
    }
    Ok((loss, grads))
}

/// Feature-statistic matching loss of `images` under the teacher.
pub fn feature_stat_loss(teacher: &ModelHandle, images: &Tensor, target: &FeatureStats) -> Result<f64> {
    let (_, trace) = teacher.network().forward(images, Mode::Eval)?;
    Ok(feature_terms(&trace, target)?.0)
}

/// Draws `batch_size` labels from the classes of tasks `1..t`, spreading them
/// over the prior tasks as evenly as possible.
pub fn sample_prior_targets(stream: &TaskStream, t: usize, batch_size: usize, seed: u64) -> Result<Vec<usize>> {
    if t < 2 {
        return Err(Error::Contract(format!("task {t} has no prior tasks")));
    }
    if t > stream.num_tasks() + 1 {
        return Err(Error::Contract(format!("task {t} beyond the stream")));
    }
    let prior = t - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![batch_size / prior; prior];
    let mut order: Vec<usize> = (0..prior).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(batch_size % prior) {
        counts[i] += 1;
    }
    let mut targets = Vec::with_capacity(batch_size);
    for (i, &cnt) in counts.iter().enumerate() {
        let classes = &stream.tasks[i].class_ids;
        for _ in 0..cnt {
            targets.push(classes[rng.random_range(0..classes.len())]);
        }
    }
    targets.shuffle(&mut rng);
    Ok(targets)
}

/// Total inversion objective at `x` and its input gradient.
fn objective(
    teacher: &ModelHandle,
    x: &Tensor,
    soft_targets: &Tensor,
    stats: Option<&FeatureStats>,
    cfg: &InversionConfig,
) -> Result<(f64, Tensor)> {
    let (logits, trace) = teacher.network().forward(x, Mode::Eval)?;
    let (mut loss, g_logits) = task_loss_grad(&logits, soft_targets)?;
    let mut tap_grads = Vec::new();
    if let (Some(stats), true) = (stats, cfg.alpha_feature > 0.0) {
        let (l, mut g) = feature_terms(&trace, stats)?;
        loss += cfg.alpha_feature * l;
        g.iter_mut().flatten().for_each(|t| t.scale(cfg.alpha_feature));
        tap_grads = g;
    }
    let mut grad = teacher.backward(&trace, Some(&g_logits), &tap_grads, None)?;
    if grad.shape() != x.shape() {
        return Err(Error::Internal("no gradient path to the inputs".into()));
    }
    if cfg.alpha_tv > 0.0 {
        let (l, mut g) = tv_loss_grad(x)?;
        loss += cfg.alpha_tv * l;
        g.scale(cfg.alpha_tv);
        grad.add_assign(&g)?;
    }
    if cfg.alpha_l2 > 0.0 {
        let (l, mut g) = l2_loss_grad(x);
        loss += cfg.alpha_l2 * l;
        g.scale(cfg.alpha_l2);
        grad.add_assign(&g)?;
    }
    Ok((loss, grad))
}

fn clamp_to_range(x: &mut Tensor, desc: &DatasetDescriptor) {
    let c = desc.channels;
    let plane = desc.height * desc.width;
    let ranges: Vec<(f64, f64)> = (0..c).map(|ch| desc.pixel_range(ch)).collect();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let (lo, hi) = ranges[(i / plane) % c];
        *v = v.clamp(lo, hi);
    }
}

/// Optimizes a batch of inputs so the frozen teacher classifies them as
/// prior-task targets while matching its feature statistics. Only the inputs
/// are updated; the teacher is read-only.
pub fn synthesize(
    teacher: &ModelHandle,
    current_batch: Option<&Tensor>,
    stream: &TaskStream,
    t: usize,
    cfg: &InversionConfig,
    seed: u64,
) -> Result<SyntheticBatch> {
    cfg.validate()?;
    if teacher.mode() != Mode::Eval {
        return Err(Error::Contract("inversion teacher must be in eval mode".into()));
    }
    let [c, h, w] = teacher.spec().input_shape;
    if let Some(b) = current_batch {
        if b.shape()[1..] != [c, h, w] {
            return Err(Error::Shape(format!("current batch {:?} vs teacher input {:?}", b.shape(), [c, h, w])));
        }
    }
    let mut x = match (cfg.init_mode, current_batch) {
        (InitMode::CurrentBatch, Some(b)) => b.clone(),
        (InitMode::CurrentBatch, None) => {
            return Err(Error::config("inversion.init", "current_batch init needs a current batch"))
        }
        (InitMode::Gaussian, _) => {
            let n = current_batch.map_or(cfg.batch_size, |b| b.batch());
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
            let data = (0..n * c * h * w).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::from_vec(&[n, c, h, w], data)?
        }
    };
    let n = x.batch();
    let targets = sample_prior_targets(stream, t, n, derive_seed(seed, &[2]))?;
    if cfg.k == 0 {
        return Ok(SyntheticBatch {
            inputs: x,
            targets,
            steps_used: 0,
            loss_trace: Vec::new(),
        });
    }
    let soft = smooth_labels(&targets, 0.0, teacher.output_dim())?;
    let stats = if cfg.alpha_feature > 0.0 {
        let use_running = cfg.stats_source == StatsSource::Running && teacher.spec().has_running_stats;
        Some(if use_running {
            teacher.collect_running_stats()?
        } else {
            let b = current_batch.ok_or_else(|| {
                Error::config("inversion.stats_source", "approximate statistics need a current batch")
            })?;
            teacher.approximate_feature_stats(b)?
        })
    } else {
        None
    };
    let mut adam = Adam::new(cfg.lr, x.len());
    let mut trace = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let (loss, grad) = objective(teacher, &x, &soft, stats.as_ref(), cfg)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::Internal("inversion diverged".into()));
        }
        trace.push(loss);
        adam.step(x.data_mut(), grad.data());
        clamp_to_range(&mut x, &stream.descriptor);
    }
    Ok(SyntheticBatch {
        inputs: x,
        targets,
        steps_used: cfg.k,
        loss_trace: trace,
    })
}

/// Writes the batch as a PNG grid (up to 8 columns), 1 px gutters.
pub fn write_image_grid(inputs: &Tensor, desc: &DatasetDescriptor, path: &Path) -> Result<()> {
    let (n, c, h, w) = inputs.dims4()?;
    let cols = n.clamp(1, 8);
    let rows = n.div_ceil(cols).max(1);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut img = image::RgbImage::new(gw as u32, gh as u32);
    for i in 0..n {
        let (ox, oy) = ((i % cols) * (w + 1) + 1, (i / cols) * (h + 1) + 1);
        let s = inputs.sample(i);
        for y in 0..h {
            for xx in 0..w {
                let mut px = [0u8; 3];
                for (k, p) in px.iter_mut().enumerate() {
                    let ch = k.min(c - 1);
                    let v = desc.denormalize(ch, s[(ch * h + y) * w + xx]);
                    *p = (v * 255.0).round() as u8;
                }
                img.put_pixel((ox + xx) as u32, (oy + y) as u32, image::Rgb(px));
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, LoadOptions};
    use crate::zoo::{instantiate, ArchitectureSpec};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn stream(t: usize, cpt: usize) -> TaskStream {
        let ds = load_dataset(
            "blobs",
            &LoadOptions {
                train_per_class: Some(10),
                test_per_class: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        TaskStream::build(&ds, t, cpt, 0, 0.1).unwrap()
    }

    #[test]
    fn tv_examples() {
        let c = Tensor::full(&[1, 1, 2, 3], 0.7);
        assert_eq!(tv_loss(&c).unwrap(), 0.0);
        let d = 0.3;
        let g = Tensor::from_vec(&[1, 1, 2, 3], vec![0.0, d, 2.0 * d, 0.0, d, 2.0 * d]).unwrap();
        assert!((tv_loss(&g).unwrap() - d * d).abs() < 1e-15);
        let x = rand_tensor(&[2, 3, 4, 4], 1);
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 3.0);
        assert!((tv_loss(&x).unwrap() - tv_loss(&shifted).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_loss(&Tensor::zeros(&[1, 1, 2, 2])), 0.0);
        assert_eq!(l2_loss(&Tensor::full(&[1, 1, 2, 2], 1.0)), 1.0);
        let x = rand_tensor(&[1, 2, 3, 3], 2);
        let mut y = x.clone();
        y.scale(3.0);
        assert!((l2_loss(&y) - 9.0 * l2_loss(&x)).abs() < 1e-12);
    }

    #[test]
    fn moment_loss_hand_example() {
        // Two channels with mean 1 and variance 1 each; targets mean 0, var 1.
        let f = Tensor::from_vec(&[2, 2, 1, 1], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let (l, _) = moment_loss_grad(&f, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
    }

    fn fd_check(f: impl Fn(&Tensor) -> (f64, Tensor), x: &Tensor) {
        let (_, g) = f(x);
        let eps = 1e-3;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let fd = (f(&p).0 - f(&m).0) / (2.0 * eps);
            let a = g.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "entry {i}: analytic {a} fd {fd}");
        }
    }

    #[test]
    fn prior_gradients_match_finite_differences() {
        let x = rand_tensor(&[2, 3, 4, 4], 3);
        fd_check(|x| tv_loss_grad(x).unwrap(), &x);
        fd_check(l2_loss_grad, &x);
        let tm = [0.1, -0.2, 0.3];
        let tv = [0.5, 0.2, 0.9];
        fd_check(|x| moment_loss_grad(x, &tm, &tv).unwrap(), &x);
    }

    #[test]
    fn feature_loss_through_teacher_matches_finite_differences() {
        let spec = ArchitectureSpec::preset("mid_cnn", [3, 4, 4]).unwrap();
        let mut teacher = instantiate(&spec, 4, 5).unwrap();
        teacher.set_mode(Mode::Eval);
        let target = teacher.approximate_feature_stats(&rand_tensor(&[3, 3, 4, 4], 9)).unwrap();
        let x = rand_tensor(&[2, 3, 4, 4], 4);
        let cfg = InversionConfig {
            alpha_tv: 0.0,
            ..Default::default()
        };
        let soft = smooth_labels(&[0, 1], 0.0, 4).unwrap();
        fd_check(|x| objective(&teacher, x, &soft, Some(&target), &cfg).unwrap(), &x);
    }

    #[test]
    fn matched_statistics_cost_nothing_and_batch_order_is_irrelevant() {
        let spec = ArchitectureSpec::preset("mid_cnn", [3, 4, 4]).unwrap();
        let mut teacher = instantiate(&spec, 4, 5).unwrap();
        teacher.set_mode(Mode::Eval);
        let x = rand_tensor(&[4, 3, 4, 4], 6);
        let target = teacher.approximate_feature_stats(&x).unwrap();
        assert!(feature_stat_loss(&teacher, &x, &target).unwrap() < 1e-20);
        let other = teacher.collect_running_stats().unwrap();
        let a = feature_stat_loss(&teacher, &x, &other).unwrap();
        let b = feature_stat_loss(&teacher, &x.select(&[3, 1, 0, 2]), &other).unwrap();
        assert!((a - b).abs() < 1e-12);
        let mut bad = other.clone();
        bad.layer_ids[0] = 99;
        assert!(matches!(feature_stat_loss(&teacher, &x, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn prior_targets_are_even_and_prior_only() {
        let s = stream(3, 2);
        let y = sample_prior_targets(&s, 3, 8, 42).unwrap();
        let from = |task: usize| y.iter().filter(|l| s.tasks[task].class_ids.contains(l)).count();
        assert_eq!((from(0), from(1)), (4, 4));
        let y = sample_prior_targets(&s, 2, 5, 1).unwrap();
        assert!(y.iter().all(|l| s.tasks[0].class_ids.contains(l)));
        assert!(matches!(sample_prior_targets(&s, 1, 5, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn prior_task_histogram_is_uniform() {
        let s = stream(4, 2);
        let mut hist = [0usize; 3];
        for i in 0..10_000u64 {
            let l = sample_prior_targets(&s, 4, 1, i).unwrap()[0];
            hist[l / 2] += 1;
        }
        let (n, p) = (10_000.0f64, 1.0f64 / 3.0);
        let sigma = (n * p * (1.0 - p)).sqrt();
        for h in hist {
            assert!((h as f64 - n * p).abs() <= 3.0 * sigma, "{hist:?}");
        }
    }

    #[test]
    fn zero_steps_return_initialization() {
        let s = stream(2, 2);
        let spec = ArchitectureSpec::preset("small_cnn", [3, 16, 16]).unwrap();
        let mut teacher = instantiate(&spec, 4, 1).unwrap();
        teacher.set_mode(Mode::Eval);
        let batch = rand_tensor(&[5, 3, 16, 16], 8);
        let cfg = InversionConfig {
            k: 0,
            ..Default::default()
        };
        let out = synthesize(&teacher, Some(&batch), &s, 2, &cfg, 3).unwrap();
        assert_eq!(out.inputs.data(), batch.data());
        assert_eq!(out.steps_used, 0);
        let g = InversionConfig {
            init_mode: InitMode::Gaussian,
            ..cfg
        };
        let a = synthesize(&teacher, None, &s, 2, &g, 3).unwrap();
        let b = synthesize(&teacher, None, &s, 2, &g, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.inputs.batch(), 32);
        let missing = synthesize(&teacher, None, &s, 2, &InversionConfig { k: 0, ..Default::default() }, 3);
        assert!(missing.unwrap_err().is_config());
    }

    #[test]
    fn synthesis_leaves_teacher_untouched() {
        let s = stream(2, 2);
        let spec = ArchitectureSpec::preset("mid_cnn", [3, 16, 16]).unwrap();
        let mut teacher = instantiate(&spec, 4, 1).unwrap();
        teacher.set_mode(Mode::Eval);
        let before = teacher.state_digest();
        let batch = rand_tensor(&[4, 3, 16, 16], 8);
        let cfg = InversionConfig {
            k: 5,
            ..Default::default()
        };
        let out = synthesize(&teacher, Some(&batch), &s, 2, &cfg, 3).unwrap();
        assert_eq!(teacher.state_digest(), before);
        assert_eq!(out.loss_trace.len(), 5);
        teacher.set_mode(Mode::Train);
        assert!(matches!(synthesize(&teacher, Some(&batch), &s, 2, &cfg, 3), Err(Error::Contract(_))));
    }
}
