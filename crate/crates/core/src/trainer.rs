//! The continual loop: one architecture per task, trained against the frozen
//! previous model, evaluated on every task seen so far.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Insertion};
use crate::data::{augment, load_dataset, Dataset, LoadOptions, SplitKind, TaskStream};
use crate::distill::total_objective;
use crate::error::{Error, Result};
use crate::inversion::{synthesize, write_image_grid, SyntheticBatch};
use crate::metrics::{evaluate, validation_accuracy, AccuracyMatrix, EvalMode};
use crate::nn::Mode;
use crate::optim::Sgd;
use crate::replay::ReplayBuffer;
use crate::tensor::Tensor;
use crate::util::{derive_seed, hex, write_atomic};
use crate::zoo::{instantiate, live_models, reset_peak_models, ArchitectureSpec, ModelHandle};

// Seed-derivation tags.
const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_VIEW: u64 = 3;
const TAG_REPLAY: u64 = 4;
const TAG_RESERVOIR: u64 = 5;
const TAG_SYNTH: u64 = 6;

/// Where a run writes and what it reads besides the config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub dump_synth: Option<PathBuf>,
    /// Return after this many completed tasks (the run stays resumable).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Batch-mean of each objective component.
    pub components: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub architecture: String,
    pub warm_started: bool,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub synth_steps: usize,
    pub synth_loss_traces: Vec<Vec<f64>>,
    pub wall_seconds: f64,
}

/// Everything a run produces except the model weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_name: String,
    pub config_hash: String,
    pub method: String,
    pub seed: u64,
    pub completed_tasks: usize,
    pub num_tasks: usize,
    pub matrices: BTreeMap<EvalMode, AccuracyMatrix>,
    pub tasks: Vec<TaskLog>,
    /// Most model handles alive at once during the run.
    pub peak_live_models: usize,
}

impl RunRecord {
    pub fn matrix(&self, mode: EvalMode) -> Result<&AccuracyMatrix> {
        self.matrices
            .get(&mode)
            .ok_or_else(|| Error::Contract(format!("run has no {} matrix", mode.as_str())))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}

/// Holds the single previous model. Only task `t - 1`'s model can be read
/// while training task `t`.
pub struct TeacherSlot {
    task: usize,
    model: Option<ModelHandle>,
}

impl TeacherSlot {
    pub fn empty() -> Self {
        TeacherSlot { task: 0, model: None }
    }

    /// Stores the finalized model of `task`, frozen, dropping the older one.
    pub fn store(&mut self, task: usize, mut model: ModelHandle) {
        model.set_mode(Mode::Eval);
        self.model = None;
        self.task = task;
        self.model = Some(model);
    }

    pub fn task(&self) -> usize {
        self.task
    }

    /// The teacher for `current_task`; `None` for the first task.
    pub fn for_task(&self, current_task: usize) -> Result<Option<&ModelHandle>> {
        if current_task <= 1 {
            return Ok(None);
        }
        match &self.model {
            Some(m) if self.task + 1 == current_task => Ok(Some(m)),
            _ => Err(Error::Contract(format!(
                "task {current_task} may only read the model of task {}, slot holds task {}",
                current_task - 1,
                self.task
            ))),
        }
    }
}

/// Shared inputs of a run.
pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub ds: &'a Dataset,
    pub stream: &'a TaskStream,
    pub schedule: &'a [ArchitectureSpec],
    pub seed: u64,
    /// Directory for the synthesis cache, if any.
    pub synth_cache: Option<PathBuf>,
    pub dump_synth: Option<PathBuf>,
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn checkpoint_path(out: &Path, seed: u64, task: usize) -> PathBuf {
    seed_dir(out, seed).join("checkpoints").join(format!("task-{task}.ckpt"))
}

/// Trains the model for task `t` and returns its best-validation state.
pub fn train_task(
    ctx: &RunContext,
    t: usize,
    teacher: Option<&ModelHandle>,
    mut buffer: Option<&mut ReplayBuffer>,
) -> Result<(ModelHandle, TaskLog)> {
    let cfg = ctx.cfg;
    if ctx.schedule.len() != ctx.stream.num_tasks() {
        return Err(Error::config(
            "schedule",
            format!("{} architectures for {} tasks", ctx.schedule.len(), ctx.stream.num_tasks()),
        ));
    }
    let started = Instant::now();
    let spec = &ctx.schedule[t - 1];
    let task = ctx.stream.task(t)?;
    let seed = ctx.seed;
    let k = ctx.stream.total_classes;

    let warm = cfg.warm_start && t > 1 && ctx.schedule[t - 2] == *spec && teacher.is_some();
    let mut student = match (warm, teacher) {
        (true, Some(prev)) => {
            let mut m = prev.clone();
            m.set_mode(Mode::Train);
            m
        }
        _ => instantiate(spec, k, derive_seed(seed, &[TAG_INIT, t as u64]))?,
    };
    student.set_mode(Mode::Train);

    let kd = cfg.effective_kd();
    let distill_from = teacher.filter(|_| cfg.method.uses_teacher());

    let synth = match distill_from {
        Some(tch) if cfg.method.uses_inversion() => synthesize_pool(ctx, t, tch)?,
        _ => Vec::new(),
    };

    let mut opt = Sgd::new(cfg.optimizer.lr, cfg.optimizer.momentum, student.param_count());
    let head = student.network().head_range();
    let mut reservoir = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_RESERVOIR, t as u64]));
    let mut best: Option<(f64, usize, Vec<f64>, Vec<f64>)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs_per_task);

    for epoch in 0..cfg.epochs_per_task {
        let mut order = task.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SHUFFLE, t as u64, epoch as u64])));
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let tags = [t as u64, epoch as u64, step as u64];
            let raw = ctx.stream.gather(ctx.ds, SplitKind::Train, idx)?;
            // One view per step, fed to both student and teacher.
            let view = augment(&raw, cfg.stream.augment, derive_seed(seed, &[&[TAG_VIEW][..], &tags].concat()))?;
            let synthetic = (!synth.is_empty()).then(|| &synth[step % synth.len()].inputs);
            let replay = match buffer.as_deref() {
                Some(b) if !b.is_empty() => {
                    let s = b.sample_batch(cfg.replay.batch_size, derive_seed(seed, &[&[TAG_REPLAY][..], &tags].concat()))?;
                    let vs = derive_seed(seed, &[&[TAG_REPLAY, TAG_VIEW][..], &tags].concat());
                    Some(augment(&s, cfg.stream.augment, vs)?)
                }
                _ => None,
            };
            let out = total_objective(&mut student, distill_from, &view, synthetic, replay.as_ref(), &kd)?;
            if !out.total.is_finite() {
                return Err(Error::Internal(format!("training diverged at task {t} epoch {epoch}")));
            }
            let mut grads = out.param_grads;
            if epoch < cfg.head_warmup_epochs {
                for (i, g) in grads.iter_mut().enumerate() {
                    if !head.contains(&i) {
                        *g = 0.0;
                    }
                }
            }
            opt.step(student.params_mut(), &grads);
            if let (Some(b), Insertion::PerBatch) = (buffer.as_deref_mut(), cfg.replay.insertion) {
                b.insert_batch(&raw, &mut reservoir)?;
            }
            loss_sum += out.total;
            for (name, v) in out.breakdown {
                *sums.entry(name.to_string()).or_default() += v;
            }
            steps += 1;
        }
        let val = validation_accuracy(&student, ctx.stream, ctx.ds, t)?;
        let n = steps.max(1) as f64;
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / n,
            val_accuracy: val,
            components: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
        });
        if best.as_ref().is_none_or(|b| val > b.0) {
            best = Some((val, epoch, student.params().to_vec(), student.running_stats().to_vec()));
        }
    }
    if let (Some(b), Insertion::TaskEnd) = (buffer.as_deref_mut(), cfg.replay.insertion) {
        for idx in task.train.chunks(256) {
            b.insert_batch(&ctx.stream.gather(ctx.ds, SplitKind::Train, idx)?, &mut reservoir)?;
        }
    }
    let (best_val, best_epoch) = match best {
        Some((v, e, p, r)) => {
            student.load_state(&p, &r)?;
            (v, e)
        }
        None => (validation_accuracy(&student, ctx.stream, ctx.ds, t)?, 0),
    };
    student.set_mode(Mode::Eval);
    let log = TaskLog {
        task: t,
        architecture: spec.name.clone(),
        warm_started: warm,
        epochs,
        best_epoch,
        best_val_accuracy: best_val,
        synth_steps: synth.iter().map(|s| s.steps_used).sum(),
        synth_loss_traces: synth.iter().map(|s| s.loss_trace.clone()).collect(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((student, log))
}

/// Synthetic batches for task `t`, read from the cache when present.
fn synthesize_pool(ctx: &RunContext, t: usize, teacher: &ModelHandle) -> Result<Vec<SyntheticBatch>> {
    let cfg = ctx.cfg;
    let key = {
        let mut h = Sha256::new();
        h.update(cfg.hash().as_bytes());
        h.update(ctx.seed.to_le_bytes());
        h.update((t as u64).to_le_bytes());
        h.update(teacher.state_digest().as_bytes());
        hex(&h.finalize())
    };
    let cache_file = ctx.synth_cache.as_ref().map(|d| d.join(format!("task-{t}.bin")));
    if let Some(p) = &cache_file {
        if p.is_file() {
            if let Ok(pool) = read_synth_cache(p, &key) {
                return Ok(pool);
            }
        }
    }
    let task = ctx.stream.task(t)?;
    let mut pool = Vec::with_capacity(cfg.inversion_batches);
    for b in 0..cfg.inversion_batches {
        let s = derive_seed(ctx.seed, &[TAG_SYNTH, t as u64, b as u64]);
        let mut idx = task.train.clone();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        idx.truncate(cfg.batch_size);
        let current = ctx.stream.gather(ctx.ds, SplitKind::Train, &idx)?;
        pool.push(synthesize(teacher, Some(&current.inputs), ctx.stream, t, &cfg.inversion, s)?);
    }
    if let Some(p) = &cache_file {
        write_synth_cache(p, &key, &pool)?;
    }
    if let Some(dir) = &ctx.dump_synth {
        for (b, s) in pool.iter().enumerate() {
            let path = dir.join(format!("seed-{}", ctx.seed)).join(format!("task-{t}-batch-{b}.png"));
            write_image_grid(&s.inputs, &ctx.stream.descriptor, &path)?;
        }
    }
    Ok(pool)
}

#[derive(Serialize, Deserialize)]
struct SynthHeader {
    key: String,
    batches: Vec<SynthEntry>,
}

#[derive(Serialize, Deserialize)]
struct SynthEntry {
    shape: Vec<usize>,
    targets: Vec<usize>,
    steps_used: usize,
    loss_trace: Vec<f64>,
}

fn write_synth_cache(path: &Path, key: &str, pool: &[SyntheticBatch]) -> Result<()> {
    let header = SynthHeader {
        key: key.to_string(),
        batches: pool
            .iter()
            .map(|s| SynthEntry {
                shape: s.inputs.shape().to_vec(),
                targets: s.targets.clone(),
                steps_used: s.steps_used,
                loss_trace: s.loss_trace.clone(),
            })
            .collect(),
    };
    let head = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
    let mut buf = (head.len() as u64).to_le_bytes().to_vec();
    buf.extend_from_slice(&head);
    for s in pool {
        for v in s.inputs.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

fn read_synth_cache(path: &Path, key: &str) -> Result<Vec<SyntheticBatch>> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| Error::format(path, m);
    let hlen = u64::from_le_bytes(bytes.get(..8).ok_or_else(|| bad("truncated"))?.try_into().unwrap()) as usize;
    let header: SynthHeader =
        serde_json::from_slice(bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated"))?).map_err(|e| Error::format(path, e))?;
    if header.key != key {
        return Err(bad("stale cache key"));
    }
    let mut values = bytes[8 + hlen..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    header
        .batches
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad("truncated payload"));
            }
            Ok(SyntheticBatch {
                inputs: Tensor::from_vec(&e.shape, data)?,
                targets: e.targets,
                steps_used: e.steps_used,
                loss_trace: e.loss_trace,
            })
        })
        .collect()
}

/// Loads the dataset and builds the stream the config describes for `seed`.
pub fn prepare_stream(cfg: &ExperimentConfig, seed: u64, data_dir: Option<PathBuf>) -> Result<(Dataset, TaskStream)> {
    let opts = LoadOptions {
        data_dir,
        train_per_class: cfg.stream.train_per_class,
        test_per_class: cfg.stream.test_per_class,
    };
    let ds = load_dataset(&cfg.stream.dataset, &opts)?;
    let stream = TaskStream::build(&ds, cfg.stream.num_tasks, cfg.stream.classes_per_task, seed, cfg.stream.val_fraction)?;
    Ok((ds, stream))
}

/// Runs (or resumes) every task of the stream for one seed, writing the run
/// directory as it goes.
pub fn continual_run(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let out = &opts.out_dir;
    let dir = seed_dir(out, seed);
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    let cfg_path = out.join("config.toml");
    let canonical = cfg.to_toml();
    if cfg_path.is_file() {
        let existing = ExperimentConfig::parse(&std::fs::read_to_string(&cfg_path)?)?;
        if existing.hash() != cfg.hash() {
            return Err(Error::config("--out", format!("{} holds a run of a different config", out.display())));
        }
    } else {
        write_atomic(&cfg_path, canonical.as_bytes())?;
    }

    let (ds, stream) = prepare_stream(cfg, seed, opts.data_dir.clone())?;
    let stream_path = dir.join("stream.toml");
    if stream_path.is_file() {
        if TaskStream::read(&stream_path)? != stream {
            return Err(Error::Contract("stored task stream differs from the rebuilt one".into()));
        }
    } else {
        stream.write(&stream_path)?;
    }
    let schedule = cfg.resolve_schedule(ds.descriptor.shape())?;
    let num_tasks = stream.num_tasks();

    reset_peak_models();
    let state_path = dir.join("state.json");
    let buffer_path = dir.join("buffer.bin");
    let mut teacher = TeacherSlot::empty();
    let mut buffer = cfg
        .method
        .uses_buffer()
        .then(|| ReplayBuffer::new(cfg.replay.capacity, ds.descriptor.shape()));
    let mut record = RunRecord {
        config_name: cfg.name.clone(),
        config_hash: cfg.hash(),
        method: cfg.method.as_str().to_string(),
        seed,
        completed_tasks: 0,
        num_tasks,
        matrices: cfg.eval_modes.iter().map(|&m| (m, AccuracyMatrix::new(num_tasks, m))).collect(),
        tasks: Vec::new(),
        peak_live_models: 0,
    };
    if state_path.is_file() {
        let saved = RunRecord::read(&state_path)?;
        if saved.config_hash != record.config_hash || saved.seed != seed {
            return Err(Error::Contract("run state belongs to another config or seed".into()));
        }
        if saved.completed_tasks > 0 {
            teacher.store(
                saved.completed_tasks,
                ModelHandle::load_checkpoint(&checkpoint_path(out, seed, saved.completed_tasks))?,
            );
            if buffer.is_some() {
                buffer = Some(ReplayBuffer::load(&buffer_path)?);
            }
        }
        record = saved;
    }

    let ctx = RunContext {
        cfg,
        ds: &ds,
        stream: &stream,
        schedule: &schedule,
        seed,
        synth_cache: Some(dir.join("synth")),
        dump_synth: opts.dump_synth.clone(),
    };
    for t in record.completed_tasks + 1..=num_tasks {
        if opts.stop_after.is_some_and(|s| record.completed_tasks >= s) {
            break;
        }
        let (model, log) = train_task(&ctx, t, teacher.for_task(t)?, buffer.as_mut())?;
        for (mode, m) in record.matrices.iter_mut() {
            m.set_row(t, evaluate(&model, &stream, &ds, t, *mode)?)?;
        }
        model.save_checkpoint(&checkpoint_path(out, seed, t))?;
        if let Some(b) = &buffer {
            b.save(&buffer_path)?;
        }
        teacher.store(t, model);
        record.tasks.push(log);
        record.completed_tasks = t;
        record.peak_live_models = record.peak_live_models.max(live_models().1);
        record.write(&state_path)?;
    }

    if record.completed_tasks == num_tasks {
        for (mode, m) in &record.matrices {
            write_atomic(&dir.join(format!("acc_{}.csv", mode.as_str())), m.to_csv().as_bytes())?;
        }
        record.write(&dir.join("run.json"))?;
    }
    Ok(record)
}
