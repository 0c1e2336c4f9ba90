//! CIFAR-10 binary-format loader (`data_batch_{1..5}.bin`, `test_batch.bin`).

use std::fs;
use std::path::{Path, PathBuf};

use super::{file_exists, normalize_in_place, take_per_class, Dataset, DatasetDescriptor, LoadOptions};
use crate::error::{Error, Result};

const RECORD: usize = 1 + 3 * 32 * 32;
const MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
const STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

fn locate(root: &Path) -> Option<PathBuf> {
    ["cifar-10-batches-bin", "cifar10", "."]
        .iter()
        .map(|d| root.join(d))
        .find(|d| file_exists(&d.join("test_batch.bin")))
}

fn read_records(path: &Path, images: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::format(path, "length is not a multiple of the record size"));
    }
    for rec in bytes.chunks_exact(RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::format(path, format!("label {label} out of range")));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

pub(super) fn descriptor() -> DatasetDescriptor {
    DatasetDescriptor {
        id: "cifar10".into(),
        channels: 3,
        height: 32,
        width: 32,
        num_classes: 10,
        mean: MEAN.to_vec(),
        std: STD.to_vec(),
    }
}

pub(super) fn load(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let dir = locate(root).ok_or_else(|| {
        Error::config(
            "stream.dataset",
            format!("cifar10 binaries not found under {}", root.display()),
        )
    })?;
    let desc = descriptor();
    let (mut tr_img, mut tr_lab) = (Vec::new(), Vec::new());
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if file_exists(&p) {
            read_records(&p, &mut tr_img, &mut tr_lab)?;
        }
    }
    if tr_lab.is_empty() {
        return Err(Error::config("stream.dataset", "no cifar10 training batches found"));
    }
    let (mut te_img, mut te_lab) = (Vec::new(), Vec::new());
    read_records(&dir.join("test_batch.bin"), &mut te_img, &mut te_lab)?;
    let len = desc.sample_len();
    let mut train = take_per_class(tr_img, tr_lab, len, 10, opts.train_per_class);
    let mut test = take_per_class(te_img, te_lab, len, 10, opts.test_per_class);
    normalize_in_place(&mut train.images, &desc);
    normalize_in_place(&mut test.images, &desc);
    Ok(Dataset {
        descriptor: desc,
        train,
        test,
    })
}
