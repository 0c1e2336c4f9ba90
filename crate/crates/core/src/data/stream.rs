use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_dataset, Dataset, DatasetDescriptor, LoadOptions, SplitKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::derive_seed;

/// One task: its global class ids and sample indices into the dataset splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based.
    pub task_index: usize,
    pub class_ids: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl TaskSpec {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }
    pub fn n_val(&self) -> usize {
        self.val.len()
    }
    pub fn n_test(&self) -> usize {
        self.test.len()
    }
}

/// Ordered partition of classes into tasks.
///
/// Global class ids run over `0..total_classes`; `class_map[g]` is the
/// dataset label behind global id `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub dataset_id: String,
    pub seed: u64,
    pub total_classes: usize,
    pub class_map: Vec<usize>,
    pub descriptor: DatasetDescriptor,
    pub tasks: Vec<TaskSpec>,
}

/// Inputs with global labels and the seed of their augmentation view.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub view_seed: u64,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loads the dataset and partitions it into `num_tasks` tasks of
/// `classes_per_task` classes each.
pub fn build_split_stream(
    dataset_id: &str,
    num_tasks: usize,
    classes_per_task: usize,
    seed: u64,
    opts: &LoadOptions,
) -> Result<(Dataset, TaskStream)> {
    let ds = load_dataset(dataset_id, opts)?;
    let stream = TaskStream::build(&ds, num_tasks, classes_per_task, seed, 0.1)?;
    Ok((ds, stream))
}

impl TaskStream {
    pub fn build(
        ds: &Dataset,
        num_tasks: usize,
        classes_per_task: usize,
        seed: u64,
        val_fraction: f64,
    ) -> Result<Self> {
        let available = ds.descriptor.num_classes;
        if num_tasks == 0 || classes_per_task == 0 {
            return Err(Error::config("stream.num_tasks", "tasks and classes per task must be positive"));
        }
        if num_tasks * classes_per_task > available {
            return Err(Error::config(
                "stream.classes_per_task",
                format!(
                    "{num_tasks} tasks x {classes_per_task} classes exceeds the {available} classes of `{}`",
                    ds.descriptor.id
                ),
            ));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config("stream.val_fraction", "must lie in [0, 1)"));
        }
        let total = num_tasks * classes_per_task;
        let mut order: Vec<usize> = (0..available).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC1A55])));
        let class_map = order[..total].to_vec();
        let mut global_of = vec![usize::MAX; available];
        for (g, &orig) in class_map.iter().enumerate() {
            global_of[orig] = g;
        }
        let mut tasks = Vec::with_capacity(num_tasks);
        for t in 0..num_tasks {
            let class_ids: Vec<usize> = (t * classes_per_task..(t + 1) * classes_per_task).collect();
            let owns = |label: usize| {
                let g = global_of[label];
                g != usize::MAX && g / classes_per_task == t
            };
            let mut pool: Vec<usize> = (0..ds.train.len()).filter(|&i| owns(ds.train.labels[i])).collect();
            pool.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5B117, t as u64])));
            let n_val = if val_fraction > 0.0 {
                ((pool.len() as f64 * val_fraction).round() as usize).max(1)
            } else {
                0
            };
            let val = pool[..n_val].to_vec();
            let mut train = pool[n_val..].to_vec();
            train.sort_unstable();
            let test: Vec<usize> = (0..ds.test.len()).filter(|&i| owns(ds.test.labels[i])).collect();
            tasks.push(TaskSpec {
                task_index: t + 1,
                class_ids,
                train,
                val,
                test,
            });
        }
        let stream = TaskStream {
            dataset_id: ds.descriptor.id.clone(),
            seed,
            total_classes: total,
            class_map,
            descriptor: ds.descriptor.clone(),
            tasks,
        };
        stream.validate(ds)?;
        Ok(stream)
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Task `t` (1-based).
    pub fn task(&self, t: usize) -> Result<&TaskSpec> {
        t.checked_sub(1)
            .and_then(|i| self.tasks.get(i))
            .ok_or_else(|| Error::Contract(format!("task {t} outside 1..={}", self.tasks.len())))
    }

    /// Global class id of a dataset label, if the label is part of the stream.
    pub fn global_label(&self, dataset_label: usize) -> Option<usize> {
        self.class_map.iter().position(|&c| c == dataset_label)
    }

    /// Checks partition, split disjointness and label membership against `ds`.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let bad = |m: String| Error::Contract(format!("stream/dataset mismatch: {m}"));
        if ds.descriptor.id != self.dataset_id {
            return Err(bad(format!("dataset `{}` vs `{}`", ds.descriptor.id, self.dataset_id)));
        }
        let mut classes = BTreeSet::new();
        for task in &self.tasks {
            for &c in &task.class_ids {
                if !classes.insert(c) {
                    return Err(bad(format!("class {c} appears in two tasks")));
                }
            }
            let mut seen = BTreeSet::new();
            for &i in task.train.iter().chain(&task.val) {
                if !seen.insert(i) {
                    return Err(bad(format!("train sample {i} appears twice")));
                }
                let label = *ds.train.labels.get(i).ok_or_else(|| bad(format!("train index {i}")))?;
                if !self.global_label(label).is_some_and(|g| task.class_ids.contains(&g)) {
                    return Err(bad(format!("sample {i} not in task {}", task.task_index)));
                }
            }
            for &i in &task.test {
                let label = *ds.test.labels.get(i).ok_or_else(|| bad(format!("test index {i}")))?;
                if !self.global_label(label).is_some_and(|g| task.class_ids.contains(&g)) {
                    return Err(bad(format!("test sample {i} not in task {}", task.task_index)));
                }
            }
        }
        if classes.len() != self.total_classes || classes.iter().next_back() != Some(&(self.total_classes - 1)) {
            return Err(bad("classes do not cover 0..total_classes".into()));
        }
        Ok(())
    }

    /// Gathers samples by dataset index with global labels.
    pub fn gather(&self, ds: &Dataset, kind: SplitKind, indices: &[usize]) -> Result<LabeledBatch> {
        let split = ds.split(kind);
        let len = ds.descriptor.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let label = *split
                .labels
                .get(i)
                .ok_or_else(|| Error::Contract(format!("sample index {i} out of range")))?;
            labels.push(
                self.global_label(label)
                    .ok_or_else(|| Error::Contract(format!("label {label} not in stream")))?,
            );
            data.extend_from_slice(&split.images[i * len..(i + 1) * len]);
        }
        let [c, h, w] = ds.descriptor.shape();
        Ok(LabeledBatch {
            inputs: Tensor::from_vec(&[indices.len(), c, h, w], data)?,
            labels,
            view_seed: 0,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))?;
        crate::util::write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::format(path, e))
    }
}
