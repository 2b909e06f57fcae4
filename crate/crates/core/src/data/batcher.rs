use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use super::synth::SynthSpec;
use crate::error::{Error, Result};

pub const TOY_CAP: usize = 4_000;

/// Packs utterances into batches bounded by a sample-point budget. Cost of a
/// batch is its padded size: `count × longest utterance`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicBatcher {
    pub cap: usize,
}

impl Default for DynamicBatcher {
    fn default() -> Self {
        Self { cap: TOY_CAP }
    }
}

impl DynamicBatcher {
    pub fn new(cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::Config("batch cap must be at least 1".into()));
        }
        Ok(Self { cap })
    }

    /// Expands weights, shuffles with `epoch_seed` and packs greedily. Returns
    /// batches of manifest entry indices.
    pub fn pack_batches(&self, manifest: &Manifest, spec: &SynthSpec, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
        if self.cap == 0 {
            return Err(Error::Config("batch cap must be at least 1".into()));
        }
        let mut order: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .flat_map(|(i, e)| std::iter::repeat_n(i, e.weight as usize))
            .collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let points: Vec<usize> = order
            .iter()
            .map(|&i| sample_points(spec, &manifest.entries[i].transcript))
            .collect();
        Ok(pack_lengths(&points, self.cap)
            .into_iter()
            .map(|b| b.into_iter().map(|k| order[k]).collect())
            .collect())
    }
}

/// Sample points of a synthesized utterance: frames × feature dimension.
pub fn sample_points(spec: &SynthSpec, transcript: &str) -> usize {
    transcript.chars().count() * spec.frames_per_char * spec.d_feat
}

/// Padded cost of a batch with the given member lengths.
pub fn padded_cost(lengths: impl IntoIterator<Item = usize>) -> usize {
    let (n, max) = lengths.into_iter().fold((0, 0), |(n, m), l| (n + 1, m.max(l)));
    n * max
}

/// Greedy in-order packing; returns batches of positions into `lengths`. An
/// item larger than `cap` is emitted alone.
pub fn pack_lengths(lengths: &[usize], cap: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_max = 0;
    for (i, &len) in lengths.iter().enumerate() {
        if len > cap {
            log::warn!("utterance of {len} sample points exceeds batch cap {cap}; emitting it alone");
            if !cur.is_empty() {
                batches.push(std::mem::take(&mut cur));
                cur_max = 0;
            }
            batches.push(vec![i]);
            continue;
        }
        let max = cur_max.max(len);
        if !cur.is_empty() && (cur.len() + 1) * max > cap {
            batches.push(std::mem::take(&mut cur));
            cur_max = len;
        } else {
            cur_max = max;
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}
