use serde::{Deserialize, Serialize};

use super::{Dataset, HeldOut};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Point,
    Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub rate: f64,
    #[serde(default = "default_block_min")]
    pub block_min_len: usize,
    #[serde(default = "default_block_max")]
    pub block_max_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_block_min() -> usize {
    4
}

fn default_block_max() -> usize {
    12
}

impl MaskSpec {
    pub fn point(rate: f64, seed: u64) -> Self {
        Self {
            kind: MaskKind::Point,
            rate,
            block_min_len: default_block_min(),
            block_max_len: default_block_max(),
            seed,
        }
    }

    pub fn block(rate: f64, min_len: usize, max_len: usize, seed: u64) -> Self {
        Self {
            kind: MaskKind::Block,
            rate,
            block_min_len: min_len,
            block_max_len: max_len,
            seed,
        }
    }

    pub fn validate(&self, n_steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::MaskSpec(format!("rate {} outside [0, 1]", self.rate)));
        }
        if self.kind == MaskKind::Block
            && (self.block_min_len == 0 || self.block_min_len > self.block_max_len || self.block_max_len > n_steps)
        {
            return Err(Error::MaskSpec(format!(
                "block lengths must satisfy 1 <= {} <= {} <= {n_steps}",
                self.block_min_len, self.block_max_len
            )));
        }
        Ok(())
    }
}

/// Spans drawn per (window, sensor) before giving up on reaching the rate.
const MAX_BLOCK_DRAWS: usize = 100_000;

/// Moves observed entries to the evaluation mask. Their values are zeroed
/// in the returned dataset and kept only in the returned [`HeldOut`].
pub fn simulate_missing(ds: &Dataset, spec: &MaskSpec) -> Result<(Dataset, HeldOut)> {
    spec.validate(ds.n_steps())?;
    let mut out = ds.clone();
    let mut held = HeldOut::default();
    let mut rng = RngStream::new(spec.seed);
    let d = ds.n_steps();
    for (wi, w) in out.windows.iter_mut().enumerate() {
        for s in 0..w.n_sensors() {
            let mut moved = vec![false; d];
            match spec.kind {
                MaskKind::Point => {
                    for (t, m) in moved.iter_mut().enumerate() {
                        if w.observed_mask.at(s, t) > 0.5 && rng.uniform() < spec.rate {
                            *m = true;
                        }
                    }
                }
                MaskKind::Block => {
                    let observed = (0..d).filter(|&t| w.observed_mask.at(s, t) > 0.5).count();
                    let target = spec.rate * observed as f64;
                    let mut count = 0usize;
                    let mut draws = 0;
                    while observed > 0 && (count as f64) < target && count < observed && draws < MAX_BLOCK_DRAWS {
                        draws += 1;
                        let len = rng.int_inclusive(spec.block_min_len, spec.block_max_len);
                        let start = rng.int_inclusive(0, d - 1);
                        if start + len > d {
                            continue;
                        }
                        for t in start..start + len {
                            if w.observed_mask.at(s, t) > 0.5 && !moved[t] {
                                moved[t] = true;
                                count += 1;
                            }
                        }
                    }
                }
            }
            for (t, _) in moved.iter().enumerate().filter(|(_, &m)| m) {
                held.insert(wi, s, t, w.values.at(s, t));
                w.observed_mask.set(&[s, t], 0.0);
                w.eval_mask.set(&[s, t], 1.0);
                w.values.set(&[s, t], 0.0);
            }
        }
    }
    Ok((out, held))
}

/// Moves the listed `(window, sensor, step)` entries to the evaluation
/// mask, e.g. from a saved mask file. Every entry must be observed.
pub fn apply_mask_entries(ds: &Dataset, entries: &[(usize, usize, usize)]) -> Result<(Dataset, HeldOut)> {
    let mut out = ds.clone();
    let mut held = HeldOut::default();
    for &(wi, s, t) in entries {
        let w = out
            .windows
            .get_mut(wi)
            .ok_or_else(|| Error::Dataset(format!("mask entry window {wi} out of range")))?;
        if s >= w.n_sensors() || t >= w.n_steps() {
            return Err(Error::Dataset(format!("mask entry ({wi}, {s}, {t}) out of range")));
        }
        if w.observed_mask.at(s, t) < 0.5 {
            return Err(Error::Dataset(format!("mask entry ({wi}, {s}, {t}) is not observed")));
        }
        held.insert(wi, s, t, w.values.at(s, t));
        w.observed_mask.set(&[s, t], 0.0);
        w.eval_mask.set(&[s, t], 1.0);
        w.values.set(&[s, t], 0.0);
    }
    Ok((out, held))
}
