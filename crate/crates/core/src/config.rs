//! Experiment configuration: flat TOML with dotted keys, strict about
//! unknown keys, with a canonical serialization used for hashing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use toml::Value;

use crate::data::{known_datasets, AugmentPolicy};
use crate::distill::KdConfig;
use crate::error::{Error, Result};
use crate::inversion::{InitMode, InversionConfig};
use crate::metrics::EvalMode;
use crate::util::hex;
use crate::zoo::{registry, ArchitectureSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Finetune,
    Kd,
    KdQdi,
    KdBuffer,
    Er,
    Di,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Finetune,
        Method::Kd,
        Method::KdQdi,
        Method::KdBuffer,
        Method::Er,
        Method::Di,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Kd => "kd",
            Method::KdQdi => "kd_qdi",
            Method::KdBuffer => "kd_buffer",
            Method::Er => "er",
            Method::Di => "di",
        }
    }

    /// Distills from the previous model on task inputs.
    pub fn uses_teacher(&self) -> bool {
        matches!(self, Method::Kd | Method::KdQdi | Method::KdBuffer | Method::Di)
    }

    pub fn uses_inversion(&self) -> bool {
        matches!(self, Method::KdQdi | Method::Di)
    }

    pub fn uses_buffer(&self) -> bool {
        matches!(self, Method::KdBuffer | Method::Er)
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Insertion {
    PerBatch,
    TaskEnd,
}

impl Insertion {
    pub fn as_str(&self) -> &'static str {
        match self {
            Insertion::PerBatch => "per_batch",
            Insertion::TaskEnd => "task_end",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub dataset: String,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub val_fraction: f64,
    pub augment: AugmentPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub insertion: Insertion,
    pub batch_size: usize,
}

/// A user-defined architecture; its input shape comes from the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct CustomArchitecture {
    pub builder: String,
    pub width: usize,
    pub depth: usize,
    pub has_running_stats: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Grouping key for reports.
    pub name: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub eval_modes: Vec<EvalMode>,
    /// Initialize from the previous model when consecutive specs are equal.
    pub warm_start: bool,
    pub stream: StreamConfig,
    /// Architecture names, one per task; presets or `architectures.<name>`.
    pub schedule: Vec<String>,
    pub architectures: BTreeMap<String, CustomArchitecture>,
    pub kd: KdConfig,
    pub inversion: InversionConfig,
    /// Synthetic batches generated per task.
    pub inversion_batches: usize,
    pub optimizer: OptimizerConfig,
    pub replay: ReplayConfig,
    /// Epochs at the start of each task that update only the output layer.
    pub head_warmup_epochs: usize,
}

impl ExperimentConfig {
    /// Defaults for a method on a dataset.
    pub fn defaults(method: Method, dataset: &str) -> Self {
        let inversion = InversionConfig {
            k: if method == Method::Di { 2000 } else { 500 },
            init_mode: if method == Method::Di { InitMode::Gaussian } else { InitMode::CurrentBatch },
            ..Default::default()
        };
        ExperimentConfig {
            name: method.as_str().to_string(),
            method,
            seeds: vec![0, 1, 2],
            epochs_per_task: 20,
            batch_size: 32,
            eval_modes: vec![EvalMode::TaskIl, EvalMode::ClassIl],
            warm_start: true,
            stream: StreamConfig {
                dataset: dataset.to_string(),
                num_tasks: 5,
                classes_per_task: 2,
                train_per_class: None,
                test_per_class: None,
                val_fraction: 0.1,
                augment: AugmentPolicy::CropFlip,
            },
            schedule: Vec::new(),
            architectures: BTreeMap::new(),
            kd: KdConfig::default(),
            inversion,
            inversion_batches: 4,
            optimizer: OptimizerConfig { lr: 0.03, momentum: 0.0 },
            replay: ReplayConfig {
                capacity: 200,
                insertion: Insertion::PerBatch,
                batch_size: 32,
            },
            head_warmup_epochs: 0,
        }
    }

    /// The architecture of every task, resolved against the dataset shape.
    pub fn resolve_schedule(&self, input_shape: [usize; 3]) -> Result<Vec<ArchitectureSpec>> {
        self.schedule
            .iter()
            .map(|name| match self.architectures.get(name) {
                Some(a) => Ok(ArchitectureSpec {
                    name: name.clone(),
                    builder_id: a.builder.clone(),
                    width: a.width,
                    depth: a.depth,
                    has_running_stats: a.has_running_stats,
                    input_shape,
                }),
                None => ArchitectureSpec::preset(name, input_shape),
            })
            .collect()
    }

    /// Distillation settings with method gating applied: baselines train on
    /// hard labels and never distill.
    pub fn effective_kd(&self) -> KdConfig {
        let mut kd = self.kd.clone();
        if !self.method.uses_teacher() {
            kd.alpha = 0.0;
            kd.beta = 0.0;
            kd.psi = 0.0;
        }
        if !self.method.uses_inversion() {
            kd.beta = 0.0;
        }
        kd
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<syntax>", e.to_string()))?;
        let mut f = Fields::default();
        flatten("", table, &mut f.map);

        let method: Method = f.string("method")?.as_deref().unwrap_or("finetune").parse()?;
        let dataset = f
            .string("stream.dataset")?
            .ok_or_else(|| Error::config("stream.dataset", "required"))?;
        if !known_datasets().contains(&dataset.as_str()) {
            return Err(Error::config("stream.dataset", format!("unknown dataset `{dataset}`")));
        }
        let mut c = Self::defaults(method, &dataset);
        f.set_string("name", &mut c.name)?;
        if let Some(v) = f.take("seeds") {
            c.seeds = as_array("seeds", v)?.into_iter().map(|x| as_uint("seeds", x)).collect::<Result<_>>()?;
        }
        f.set_usize("epochs_per_task", &mut c.epochs_per_task)?;
        f.set_usize("batch_size", &mut c.batch_size)?;
        if let Some(v) = f.take("eval_modes") {
            c.eval_modes = as_array("eval_modes", v)?
                .into_iter()
                .map(|x| as_str("eval_modes", x)?.parse())
                .collect::<Result<_>>()?;
        }
        f.set_bool("warm_start", &mut c.warm_start)?;

        let s = &mut c.stream;
        f.set_usize("stream.num_tasks", &mut s.num_tasks)?;
        f.set_usize("stream.classes_per_task", &mut s.classes_per_task)?;
        s.train_per_class = f.usize("stream.train_per_class")?;
        s.test_per_class = f.usize("stream.test_per_class")?;
        f.set_f64("stream.val_fraction", &mut s.val_fraction)?;
        if let Some(a) = f.string("stream.augment")? {
            s.augment = a.parse()?;
        }

        if let Some(v) = f.take("schedule") {
            c.schedule = as_array("schedule", v)?
                .into_iter()
                .map(|x| as_str("schedule", x))
                .collect::<Result<_>>()?;
        }
        let arch_names: Vec<String> = f
            .map
            .keys()
            .filter_map(|k| k.strip_prefix("architectures."))
            .filter_map(|k| k.split_once('.').map(|(n, _)| n.to_string()))
            .collect();
        for name in arch_names {
            if c.architectures.contains_key(&name) {
                continue;
            }
            let key = |f: &str| format!("architectures.{name}.{f}");
            let builder = f
                .string(&key("builder"))?
                .ok_or_else(|| Error::config(key("builder"), "required"))?;
            let mut a = CustomArchitecture {
                builder,
                width: 16,
                depth: 2,
                has_running_stats: false,
            };
            f.set_usize(&key("width"), &mut a.width)?;
            f.set_usize(&key("depth"), &mut a.depth)?;
            f.set_bool(&key("has_running_stats"), &mut a.has_running_stats)?;
            c.architectures.insert(name, a);
        }

        let kd = &mut c.kd;
        f.set_f64("kd.psi", &mut kd.psi)?;
        f.set_f64("kd.tau", &mut kd.tau)?;
        f.set_f64("kd.alpha", &mut kd.alpha)?;
        f.set_f64("kd.beta", &mut kd.beta)?;
        if let Some(d) = f.string("kd.kl_direction")? {
            kd.kl_direction = d.parse()?;
        }
        if let Some(d) = f.string("kd.distance")? {
            kd.distance = d.parse()?;
        }
        f.set_bool("kd.tau_squared", &mut kd.tau_squared)?;

        let inv = &mut c.inversion;
        f.set_usize("inversion.steps", &mut inv.k)?;
        f.set_f64("inversion.lr", &mut inv.lr)?;
        f.set_f64("inversion.alpha_tv", &mut inv.alpha_tv)?;
        f.set_f64("inversion.alpha_l2", &mut inv.alpha_l2)?;
        f.set_f64("inversion.alpha_feature", &mut inv.alpha_feature)?;
        if let Some(m) = f.string("inversion.init")? {
            inv.init_mode = m.parse()?;
        }
        if let Some(m) = f.string("inversion.stats_source")? {
            inv.stats_source = m.parse()?;
        }
        f.set_usize("inversion.num_batches", &mut c.inversion_batches)?;

        f.set_f64("optimizer.lr", &mut c.optimizer.lr)?;
        f.set_f64("optimizer.momentum", &mut c.optimizer.momentum)?;

        c.replay.batch_size = c.batch_size;
        f.set_usize("replay.capacity", &mut c.replay.capacity)?;
        f.set_usize("replay.batch_size", &mut c.replay.batch_size)?;
        if let Some(m) = f.string("replay.insertion")? {
            c.replay.insertion = match m.as_str() {
                "per_batch" => Insertion::PerBatch,
                "task_end" => Insertion::TaskEnd,
                other => return Err(Error::config("replay.insertion", format!("unknown policy `{other}`"))),
            };
        }
        f.set_usize("ablation.head_warmup_epochs", &mut c.head_warmup_epochs)?;

        if let Some(key) = f.map.keys().next() {
            return Err(Error::config(key.clone(), "unknown key"));
        }
        if c.schedule.is_empty() {
            c.schedule = vec!["small_cnn".into(); c.stream.num_tasks];
        }
        c.inversion.batch_size = c.batch_size;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.kd.validate()?;
        self.inversion.validate()?;
        if self.name.is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed required"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.eval_modes.is_empty() {
            return Err(Error::config("eval_modes", "at least one mode required"));
        }
        if self.schedule.len() != self.stream.num_tasks {
            return Err(Error::config(
                "schedule",
                format!("{} entries for {} tasks", self.schedule.len(), self.stream.num_tasks),
            ));
        }
        for name in &self.schedule {
            if !self.architectures.contains_key(name) && !ArchitectureSpec::preset_names().contains(&name.as_str()) {
                return Err(Error::config("schedule", format!("unknown architecture `{name}`")));
            }
        }
        for (name, a) in &self.architectures {
            if !registry().iter().any(|(id, _)| *id == a.builder) {
                return Err(Error::config(format!("architectures.{name}.builder"), format!("unknown builder `{}`", a.builder)));
            }
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if self.method.uses_inversion() {
            if !(self.kd.beta > 0.0) {
                return Err(Error::config("kd.beta", format!("method `{}` needs a positive weight", self.method.as_str())));
            }
            if self.inversion_batches == 0 {
                return Err(Error::config("inversion.num_batches", "must be positive"));
            }
        }
        if self.method.uses_buffer() && (self.replay.capacity == 0 || self.replay.batch_size == 0) {
            return Err(Error::config("replay.capacity", "buffered methods need a non-empty buffer"));
        }
        Ok(())
    }

    /// Canonical flat serialization: every field, fixed key order.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: Value| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let s = |x: &str| Value::String(x.to_string());
        let i = |x: usize| Value::Integer(x as i64);
        let fl = Value::Float;
        put("name", s(&self.name));
        put("method", s(self.method.as_str()));
        put("seeds", Value::Array(self.seeds.iter().map(|&x| Value::Integer(x as i64)).collect()));
        put("epochs_per_task", i(self.epochs_per_task));
        put("batch_size", i(self.batch_size));
        put("eval_modes", Value::Array(self.eval_modes.iter().map(|m| s(m.as_str())).collect()));
        put("warm_start", Value::Boolean(self.warm_start));
        put("schedule", Value::Array(self.schedule.iter().map(|n| s(n)).collect()));
        put("stream.dataset", s(&self.stream.dataset));
        put("stream.num_tasks", i(self.stream.num_tasks));
        put("stream.classes_per_task", i(self.stream.classes_per_task));
        if let Some(n) = self.stream.train_per_class {
            put("stream.train_per_class", i(n));
        }
        if let Some(n) = self.stream.test_per_class {
            put("stream.test_per_class", i(n));
        }
        put("stream.val_fraction", fl(self.stream.val_fraction));
        put("stream.augment", s(self.stream.augment.as_str()));
        for (name, a) in &self.architectures {
            put(&format!("architectures.{name}.builder"), s(&a.builder));
            put(&format!("architectures.{name}.width"), i(a.width));
            put(&format!("architectures.{name}.depth"), i(a.depth));
            put(&format!("architectures.{name}.has_running_stats"), Value::Boolean(a.has_running_stats));
        }
        put("kd.psi", fl(self.kd.psi));
        put("kd.tau", fl(self.kd.tau));
        put("kd.alpha", fl(self.kd.alpha));
        put("kd.beta", fl(self.kd.beta));
        put("kd.kl_direction", s(self.kd.kl_direction.as_str()));
        put("kd.distance", s(self.kd.distance.as_str()));
        put("kd.tau_squared", Value::Boolean(self.kd.tau_squared));
        put("inversion.steps", i(self.inversion.k));
        put("inversion.lr", fl(self.inversion.lr));
        put("inversion.alpha_tv", fl(self.inversion.alpha_tv));
        put("inversion.alpha_l2", fl(self.inversion.alpha_l2));
        put("inversion.alpha_feature", fl(self.inversion.alpha_feature));
        put("inversion.init", s(self.inversion.init_mode.as_str()));
        put("inversion.stats_source", s(self.inversion.stats_source.as_str()));
        put("inversion.num_batches", i(self.inversion_batches));
        put("optimizer.lr", fl(self.optimizer.lr));
        put("optimizer.momentum", fl(self.optimizer.momentum));
        put("replay.capacity", i(self.replay.capacity));
        put("replay.insertion", s(self.replay.insertion.as_str()));
        put("replay.batch_size", i(self.replay.batch_size));
        put("ablation.head_warmup_epochs", i(self.head_warmup_epochs));
        out
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other);
            }
        }
    }
}

fn as_array(key: &str, v: Value) -> Result<Vec<Value>> {
    match v {
        Value::Array(a) => Ok(a),
        _ => Err(Error::config(key, "expected an array")),
    }
}

fn as_str(key: &str, v: Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s),
        _ => Err(Error::config(key, "expected a string")),
    }
}

fn as_uint(key: &str, v: Value) -> Result<u64> {
    match v {
        Value::Integer(i) if i >= 0 => Ok(i as u64),
        _ => Err(Error::config(key, "expected a non-negative integer")),
    }
}

#[derive(Default)]
struct Fields {
    map: BTreeMap<String, Value>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key)
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        self.take(key).map(|v| as_str(key, v)).transpose()
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take(key).map(|v| as_uint(key, v).map(|x| x as usize)).transpose()
    }

    fn set_string(&mut self, key: &str, dst: &mut String) -> Result<()> {
        if let Some(v) = self.string(key)? {
            *dst = v;
        }
        Ok(())
    }

    fn set_usize(&mut self, key: &str, dst: &mut usize) -> Result<()> {
        if let Some(v) = self.usize(key)? {
            *dst = v;
        }
        Ok(())
    }

    fn set_f64(&mut self, key: &str, dst: &mut f64) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(Value::Float(f)) => {
                *dst = f;
                Ok(())
            }
            Some(Value::Integer(i)) => {
                *dst = i as f64;
                Ok(())
            }
            Some(_) => Err(Error::config(key, "expected a number")),
        }
    }

    fn set_bool(&mut self, key: &str, dst: &mut bool) -> Result<()> {
        match self.take(key) {
            None => Ok(()),
            Some(Value::Boolean(b)) => {
                *dst = b;
                Ok(())
            }
            Some(_) => Err(Error::config(key, "expected true or false")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{Distance, KlDirection};
    use crate::inversion::StatsSource;

    fn err_key(text: &str) -> String {
        match ExperimentConfig::parse(text).unwrap_err() {
            Error::Config { key, .. } => key,
            e => panic!("not a config error: {e}"),
        }
    }

    #[test]
    fn minimal_config_is_fully_defaulted() {
        let c = ExperimentConfig::parse("method = \"finetune\"\nstream.dataset = \"blobs\"\n").unwrap();
        assert_eq!(c.method, Method::Finetune);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.optimizer.lr, 0.03);
        assert_eq!(c.kd.psi, 0.1);
        assert_eq!(c.replay.capacity, 200);
        assert_eq!(c.schedule.len(), 5);
        assert_eq!(c.name, "finetune");
    }

    #[test]
    fn invariant_and_key_errors_cite_the_key() {
        let base = "stream.dataset = \"blobs\"\n";
        assert_eq!(err_key(&format!("{base}kd.psi = 1.5\n")), "kd.psi");
        assert_eq!(err_key(&format!("{base}kd.temperature = 2.0\n")), "kd.temperature");
        assert_eq!(err_key(&format!("{base}[kd]\nbogus = 1\n")), "kd.bogus");
        assert_eq!(err_key("method = \"kd\"\n"), "stream.dataset");
        assert_eq!(err_key(&format!("{base}schedule = [\"small_cnn\"]\n")), "schedule");
        assert_eq!(err_key(&format!("{base}method = \"kd_qdi\"\nkd.beta = 0.0\n")), "kd.beta");
        assert_eq!(err_key(&format!("{base}kd.distance = \"cosine\"\n")), "kd.distance");
        assert_eq!(err_key(&format!("{base}batch_size = \"big\"\n")), "batch_size");
    }

    #[test]
    fn round_trip_and_hash_stability() {
        let text = r#"
            name = "hetero"
            method = "kd_qdi"
            stream.dataset = "blobs"
            stream.num_tasks = 2
            stream.train_per_class = 40
            schedule = ["small_cnn", "tiny"]
            architectures.tiny.builder = "resnet"
            architectures.tiny.width = 8
            architectures.tiny.has_running_stats = true
            kd.alpha = 3
            inversion.steps = 20
        "#;
        let a = ExperimentConfig::parse(text).unwrap();
        assert_eq!(a.kd.alpha, 3.0);
        let b = ExperimentConfig::parse(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let reordered = r#"
            [inversion]
            steps = 20
            [kd]
            alpha = 3.0
            [architectures.tiny]
            has_running_stats = true
            width = 8
            builder = "resnet"
            [stream]
            train_per_class = 40
            num_tasks = 2
            dataset = "blobs"
        "#;
        let head = "schedule = [\"small_cnn\", \"tiny\"]\nmethod = \"kd_qdi\"\nname = \"hetero\"\n";
        let c = ExperimentConfig::parse(&format!("{head}{reordered}")).unwrap();
        assert_eq!(c.hash(), a.hash());
        let spec = a.resolve_schedule([3, 16, 16]).unwrap();
        assert_eq!(spec[1].builder_id, "resnet");
    }

    #[test]
    fn method_gating() {
        let c = ExperimentConfig::parse("method = \"er\"\nstream.dataset = \"blobs\"\n").unwrap();
        let kd = c.effective_kd();
        assert_eq!((kd.alpha, kd.beta, kd.psi), (0.0, 0.0, 0.0));
        let c = ExperimentConfig::parse("method = \"kd\"\nstream.dataset = \"blobs\"\n").unwrap();
        assert_eq!(c.effective_kd().beta, 0.0);
        assert_eq!(c.effective_kd().alpha, 1.0);
        let di = ExperimentConfig::parse("method = \"di\"\nstream.dataset = \"blobs\"\n").unwrap();
        let qdi = ExperimentConfig::parse("method = \"kd_qdi\"\nstream.dataset = \"blobs\"\n").unwrap();
        assert_eq!(di.inversion.k, 4 * qdi.inversion.k);
        assert_eq!(di.inversion.init_mode, InitMode::Gaussian);
    }

    #[test]
    fn distance_and_direction_parse() {
        let c = ExperimentConfig::parse(
            "stream.dataset = \"blobs\"\nkd.distance = \"mse\"\nkd.kl_direction = \"teacher_to_student\"\n",
        )
        .unwrap();
        assert_eq!(c.kd.distance, Distance::Mse);
        assert_eq!(c.kd.kl_direction, KlDirection::TeacherToStudent);
        assert_eq!(c.inversion.stats_source, StatsSource::Running);
    }
}
