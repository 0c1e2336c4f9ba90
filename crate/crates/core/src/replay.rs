//! Fixed-capacity reservoir of past (input, label) pairs.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HCLBUF\0\0";

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    shape: [usize; 3],
    inputs: Vec<f64>,
    labels: Vec<usize>,
    seen: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    capacity: usize,
    shape: [usize; 3],
    labels: Vec<usize>,
    seen: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, shape: [usize; 3]) -> Self {
        ReplayBuffer {
            capacity,
            shape,
            inputs: Vec::new(),
            labels: Vec::new(),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Reservoir insertion: once full, the sample replaces a random slot with
    /// probability `capacity / seen`.
    pub fn insert<R: Rng>(&mut self, sample: &[f64], label: usize, rng: &mut R) -> Result<()> {
        let draw = rng.random_range(0..self.seen + 1);
        self.insert_with_draw(sample, label, draw)
    }

    /// Insertion with the reservoir's random draw supplied by the caller:
    /// `draw` is uniform in `0..=seen` before this insertion.
    pub fn insert_with_draw(&mut self, sample: &[f64], label: usize, draw: u64) -> Result<()> {
        if sample.len() != self.sample_len() {
            return Err(Error::Shape(format!(
                "sample of {} values, buffer stores {:?}",
                sample.len(),
                self.shape
            )));
        }
        self.seen += 1;
        if self.capacity == 0 {
            return Ok(());
        }
        let len = self.sample_len();
        if self.labels.len() < self.capacity {
            self.inputs.extend_from_slice(sample);
            self.labels.push(label);
        } else if (draw as usize) < self.capacity {
            let j = draw as usize;
            self.inputs[j * len..(j + 1) * len].copy_from_slice(sample);
            self.labels[j] = label;
        }
        Ok(())
    }

    pub fn insert_batch<R: Rng>(&mut self, batch: &LabeledBatch, rng: &mut R) -> Result<()> {
        for (i, &l) in batch.labels.iter().enumerate() {
            self.insert(batch.inputs.sample(i), l, rng)?;
        }
        Ok(())
    }

    /// Uniform draw of `n` entries: without replacement when `n <= len`,
    /// with replacement otherwise.
    pub fn sample_batch(&self, n: usize, seed: u64) -> Result<LabeledBatch> {
        if self.is_empty() {
            return Err(Error::EmptySource("replay buffer is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = if n <= self.len() {
            index::sample(&mut rng, self.len(), n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..self.len())).collect()
        };
        let len = self.sample_len();
        let mut data = Vec::with_capacity(n * len);
        for &j in &picks {
            data.extend_from_slice(&self.inputs[j * len..(j + 1) * len]);
        }
        let [c, h, w] = self.shape;
        Ok(LabeledBatch {
            inputs: Tensor::from_vec(&[n, c, h, w], data)?,
            labels: picks.iter().map(|&j| self.labels[j]).collect(),
            view_seed: seed,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            capacity: self.capacity,
            shape: self.shape,
            labels: self.labels.clone(),
            seen: self.seen,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.inputs.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.inputs {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a replay buffer file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e))?;
        let values = &bytes[16 + hlen..];
        let expected = h.labels.len() * h.shape.iter().product::<usize>();
        if values.len() != expected * 8 || h.labels.len() > h.capacity {
            return Err(bad("payload size does not match header"));
        }
        let inputs = values
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ReplayBuffer {
            capacity: h.capacity,
            shape: h.shape,
            inputs,
            labels: h.labels,
            seen: h.seen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}
