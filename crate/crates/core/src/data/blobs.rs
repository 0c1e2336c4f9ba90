//! Synthetic Gaussian-blob images. A shared bank of colored blobs acts as a
//! vocabulary of parts; each class is a fixed combination of parts, so
//! classes share features the way natural image classes do. Samples jitter
//! position and amplitude and add pixel noise. Generation is independent of
//! any stream seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{normalize_in_place, Dataset, DatasetDescriptor, Split};
use crate::util::derive_seed;

pub const BLOBS_SHAPE: [usize; 3] = [3, 16, 16];
const CLASSES: usize = 10;
const TRAIN_PER_CLASS: usize = 500;
const TEST_PER_CLASS: usize = 200;
const BLOBS_PER_CLASS: usize = 3;
const BANK_SIZE: usize = 12;
const NOISE: f64 = 0.15;
const SHIFT: f64 = 4.0;
const GENERATOR_SEED: u64 = 0xB10B_5EED;

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    color: [f64; 3],
}

fn prototypes() -> Vec<Vec<Blob>> {
    let mut rng = ChaCha8Rng::seed_from_u64(GENERATOR_SEED);
    let size = BLOBS_SHAPE[1] as f64;
    let bank: Vec<Blob> = (0..BANK_SIZE)
        .map(|_| Blob {
            cy: rng.random_range(3.0..size - 3.0),
            cx: rng.random_range(3.0..size - 3.0),
            sigma: rng.random_range(1.5..3.0),
            color: [
                rng.random_range(-0.45..0.45),
                rng.random_range(-0.45..0.45),
                rng.random_range(-0.45..0.45),
            ],
        })
        .collect();
    let mut sets: Vec<Vec<usize>> = Vec::with_capacity(CLASSES);
    while sets.len() < CLASSES {
        let mut s = rand::seq::index::sample(&mut rng, BANK_SIZE, BLOBS_PER_CLASS).into_vec();
        s.sort_unstable();
        if !sets.contains(&s) {
            sets.push(s);
        }
    }
    sets.iter()
        .map(|s| {
            s.iter()
                .map(|&i| {
                    let b = &bank[i];
                    Blob {
                        cy: b.cy,
                        cx: b.cx,
                        sigma: b.sigma,
                        color: b.color,
                    }
                })
                .collect()
        })
        .collect()
}

fn render(blobs: &[Blob], rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let [c, h, w] = BLOBS_SHAPE;
    let noise = Normal::new(0.0, NOISE).unwrap();
    let dy = rng.random_range(-SHIFT..SHIFT);
    let dx = rng.random_range(-SHIFT..SHIFT);
    let amp = rng.random_range(0.7..1.3);
    let background: f64 = rng.random_range(0.4..0.6);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut v = background;
                for b in blobs {
                    let d2 = (y as f64 - b.cy - dy).powi(2) + (x as f64 - b.cx - dx).powi(2);
                    v += amp * b.color[ch] * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                v += noise.sample(rng);
                out[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
}

fn make_split(protos: &[Vec<Blob>], per_class: usize, split_tag: u64) -> (Vec<f64>, Vec<usize>) {
    let len: usize = BLOBS_SHAPE.iter().product();
    let n = per_class * CLASSES;
    let mut images = vec![0.0; n * len];
    let mut labels = Vec::with_capacity(n);
    // Interleave classes so per-class truncation keeps a balanced prefix.
    for i in 0..n {
        let class = i % CLASSES;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(GENERATOR_SEED, &[split_tag, i as u64]));
        render(&protos[class], &mut rng, &mut images[i * len..(i + 1) * len]);
        labels.push(class);
    }
    (images, labels)
}

pub(super) fn generate(train_per_class: Option<usize>, test_per_class: Option<usize>) -> Dataset {
    let protos = prototypes();
    let train_n = train_per_class.unwrap_or(TRAIN_PER_CLASS).min(TRAIN_PER_CLASS);
    let test_n = test_per_class.unwrap_or(TEST_PER_CLASS).min(TEST_PER_CLASS);
    // Normalization constants come from the full training split so they do not
    // depend on the requested subset size.
    let (full_train, _) = make_split(&protos, TRAIN_PER_CLASS, 1);
    let [c, h, w] = BLOBS_SHAPE;
    let plane = h * w;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (i, v) in full_train.iter().enumerate() {
        let ch = (i / plane) % c;
        sum[ch] += v;
        sq[ch] += v * v;
    }
    let count = (full_train.len() / c) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / count - m * m).sqrt())
        .collect();
    let descriptor = DatasetDescriptor {
        id: "blobs".into(),
        channels: c,
        height: h,
        width: w,
        num_classes: CLASSES,
        mean,
        std,
    };
    let (train_images, train_labels) = make_split(&protos, train_n, 1);
    let (test_images, test_labels) = make_split(&protos, test_n, 2);
    let mut train = Split {
        images: train_images,
        labels: train_labels,
    };
    let mut test = Split {
        images: test_images,
        labels: test_labels,
    };
    normalize_in_place(&mut train.images, &descriptor);
    normalize_in_place(&mut test.images, &descriptor);
    Dataset {
        descriptor,
        train,
        test,
    }
}
