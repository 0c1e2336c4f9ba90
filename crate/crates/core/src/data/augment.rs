use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledBatch;
use crate::error::{Error, Result};
use crate::par;
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    None,
    /// Zero-padded random crop plus random horizontal flip. The padding is
    /// `max(1, height / 8)`, i.e. 4 pixels on 32×32 inputs.
    CropFlip,
}

impl FromStr for AugmentPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentPolicy::None),
            "crop_flip" => Ok(AugmentPolicy::CropFlip),
            other => Err(Error::config(
                "stream.augment",
                format!("unknown augmentation policy `{other}`"),
            )),
        }
    }
}

impl AugmentPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentPolicy::None => "none",
            AugmentPolicy::CropFlip => "crop_flip",
        }
    }
}

/// Applies `policy` to every sample. The realization depends only on
/// `(batch, policy, view_seed)`, so student and teacher can be fed the same
/// view by passing the same seed.
pub fn augment(batch: &LabeledBatch, policy: AugmentPolicy, view_seed: u64) -> Result<LabeledBatch> {
    let mut out = batch.clone();
    out.view_seed = view_seed;
    if policy == AugmentPolicy::None {
        return Ok(out);
    }
    let (_, c, h, w) = batch.inputs.dims4()?;
    let pad = (h / 8).max(1);
    let len = c * h * w;
    let src = batch.inputs.data();
    par::for_each_chunk_mut(out.inputs.data_mut(), len, |i, dst| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(view_seed, &[i as u64]));
        let oy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let ox = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        let s = &src[i * len..(i + 1) * len];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + oy;
                for x in 0..w {
                    let xc = if flip { w - 1 - x } else { x };
                    let sx = xc as isize + ox;
                    dst[(ch * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        s[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    });
    Ok(out)
}
