//! Accuracy matrix bookkeeping, average accuracy and average forgetting.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitKind, TaskStream};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};
use crate::util::sig6;
use crate::zoo::ModelHandle;

const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    TaskIl,
    ClassIl,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::TaskIl => "task_il",
            EvalMode::ClassIl => "class_il",
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_il" => Ok(EvalMode::TaskIl),
            "class_il" => Ok(EvalMode::ClassIl),
            other => Err(Error::config("eval_modes", format!("unknown evaluation mode `{other}`"))),
        }
    }
}

/// Lower-triangular `a[i][j]`: accuracy (percent) on task `j` after task `i`,
/// both 1-based. Each row is written exactly once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub mode: EvalMode,
    pub num_tasks: usize,
    rows: Vec<Option<Vec<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize, mode: EvalMode) -> Self {
        AccuracyMatrix {
            mode,
            num_tasks,
            rows: vec![None; num_tasks],
        }
    }

    /// Writes row `i` (values for tasks `1..=i`).
    pub fn set_row(&mut self, i: usize, values: Vec<f64>) -> Result<()> {
        if i == 0 || i > self.num_tasks {
            return Err(Error::Contract(format!("row {i} outside 1..={}", self.num_tasks)));
        }
        if values.len() != i {
            return Err(Error::Contract(format!("row {i} needs {i} values, got {}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::Contract(format!("accuracy {v} outside [0, 100]")));
        }
        if self.rows[i - 1].is_some() {
            return Err(Error::Contract(format!("row {i} already written")));
        }
        self.rows[i - 1] = Some(values);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if j == 0 || j > i {
            return None;
        }
        self.rows.get(i.checked_sub(1)?)?.as_ref().map(|r| r[j - 1])
    }

    pub fn row(&self, i: usize) -> Option<&[f64]> {
        self.rows.get(i.checked_sub(1)?)?.as_deref()
    }

    /// Number of leading rows written.
    pub fn rows_written(&self) -> usize {
        self.rows.iter().take_while(|r| r.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.rows_written() == self.num_tasks
    }

    /// `A_T`: mean of the final row.
    pub fn average_accuracy(&self) -> Result<f64> {
        let last = self
            .row(self.num_tasks)
            .ok_or_else(|| Error::Contract("final row not written".into()))?;
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// `F_T`: mean over tasks of the largest drop from any later-or-equal row
    /// to the final row, normalized by `T - 1`.
    pub fn average_forgetting(&self) -> Result<f64> {
        let t_max = self.num_tasks;
        if t_max < 2 {
            return Err(Error::UndefinedMetric("forgetting needs at least two tasks".into()));
        }
        if !self.is_complete() {
            return Err(Error::Contract("matrix is incomplete".into()));
        }
        let mut sum = 0.0;
        for t in 1..=t_max {
            let last = self.get(t_max, t).unwrap();
            sum += (t..=t_max)
                .map(|i| self.get(i, t).unwrap() - last)
                .fold(f64::NEG_INFINITY, f64::max);
        }
        Ok(sum / (t_max - 1) as f64)
    }

    /// `row,col,value` lines for every written entry, six significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,value\n");
        for i in 1..=self.num_tasks {
            if let Some(r) = self.row(i) {
                for (j, v) in r.iter().enumerate() {
                    let _ = writeln!(s, "{i},{},{}", j + 1, sig6(*v));
                }
            }
        }
        s
    }
}

/// Percent of rows whose prediction equals the label. Task-IL restricts the
/// argmax to `classes`; class-IL uses every logit. Ties go to the lowest index.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize], classes: &[usize], mode: EvalMode) -> Result<f64> {
    let (n, k) = logits.dims2()?;
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} logit rows for {} labels", labels.len())));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let pred = match mode {
                EvalMode::ClassIl => argmax(row),
                EvalMode::TaskIl => {
                    let masked: Vec<f64> = classes.iter().map(|&c| row[c]).collect();
                    classes[argmax(&masked)]
                }
            };
            pred == y
        })
        .count();
    Ok(100.0 * correct as f64 / n as f64)
}

fn accuracy_on(model: &ModelHandle, stream: &TaskStream, ds: &Dataset, kind: SplitKind, indices: &[usize], classes: &[usize], mode: EvalMode) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0.0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let b = stream.gather(ds, kind, chunk)?;
        let logits = model.predict(&b.inputs)?;
        correct += accuracy_from_logits(&logits, &b.labels, classes, mode)? * chunk.len() as f64 / 100.0;
    }
    Ok(100.0 * correct / indices.len() as f64)
}

/// Test accuracies of `model` on tasks `1..=upto_t`.
pub fn evaluate(model: &ModelHandle, stream: &TaskStream, ds: &Dataset, upto_t: usize, mode: EvalMode) -> Result<Vec<f64>> {
    (1..=upto_t)
        .map(|t| {
            let task = stream.task(t)?;
            accuracy_on(model, stream, ds, SplitKind::Test, &task.test, &task.class_ids, mode)
        })
        .collect()
}

/// Mean task-IL validation accuracy over tasks `1..=upto_t`.
pub fn validation_accuracy(model: &ModelHandle, stream: &TaskStream, ds: &Dataset, upto_t: usize) -> Result<f64> {
    let mut sum = 0.0;
    for t in 1..=upto_t {
        let task = stream.task(t)?;
        sum += accuracy_on(model, stream, ds, SplitKind::Train, &task.val, &task.class_ids, EvalMode::TaskIl)?;
    }
    Ok(sum / upto_t as f64)
}
