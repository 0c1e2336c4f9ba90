#![allow(dead_code)]

use std::path::Path;

use hcl_core::config::ExperimentConfig;
use hcl_core::trainer::{continual_run, RunOptions, RunRecord};

/// A two-task blobs stream small enough to train in a couple of seconds.
/// Lines in `extra` replace defaults with the same key.
pub fn tiny(method: &str, extra: &str) -> ExperimentConfig {
    let defaults = format!(
        r#"name = "{method}"
method = "{method}"
seeds = [0]
epochs_per_task = 2
stream.dataset = "blobs"
stream.num_tasks = 2
stream.classes_per_task = 2
stream.train_per_class = 40
stream.test_per_class = 20
schedule = ["linear_conv", "small_cnn"]
inversion.steps = 3
inversion.num_batches = 1
replay.capacity = 30"#
    );
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: Vec<&str> = defaults.lines().filter(|l| !overridden.contains(&key(l))).collect();
    text.extend(extra.lines());
    ExperimentConfig::parse(&text.join("\n")).expect("tiny config parses")
}

pub fn run(cfg: &ExperimentConfig, seed: u64, out: &Path) -> RunRecord {
    let opts = RunOptions {
        out_dir: out.to_path_buf(),
        ..Default::default()
    };
    continual_run(cfg, seed, &opts).expect("run succeeds")
}

pub fn config_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Teacher trained on task 1 of a two-task blobs stream, plus a task-2 batch
/// to start inversion from.
pub fn toy_teacher(
    out: &Path,
) -> (
    hcl_core::zoo::ModelHandle,
    hcl_core::data::TaskStream,
    hcl_core::Tensor,
) {
    use hcl_core::data::SplitKind;
    use hcl_core::trainer::{checkpoint_path, prepare_stream};
    use hcl_core::zoo::ModelHandle;

    let cfg = tiny(
        "finetune",
        "epochs_per_task = 5\nstream.train_per_class = 100\noptimizer.lr = 0.01\noptimizer.momentum = 0.9",
    );
    let opts = RunOptions {
        out_dir: out.to_path_buf(),
        stop_after: Some(1),
        ..Default::default()
    };
    continual_run(&cfg, 0, &opts).expect("teacher trains");
    let teacher = ModelHandle::load_checkpoint(&checkpoint_path(out, 0, 1)).unwrap();
    let (ds, stream) = prepare_stream(&cfg, 0, None).unwrap();
    let idx: Vec<usize> = stream.tasks[1].train.iter().copied().take(32).collect();
    let batch = stream.gather(&ds, SplitKind::Train, &idx).unwrap().inputs;
    (teacher, stream, batch)
}
