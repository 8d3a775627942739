//! Windows, masks, and dataset plumbing.
//!
//! Every entry of a window is in exactly one state: observed
//! (`observed_mask = 1`), simulated-missing (`eval_mask = 1`, truth kept in
//! a [`HeldOut`] store), or originally missing (both masks 0, no truth).

mod csv_io;
mod interp;
mod mask;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use csv_io::{
    load_csv, read_csv, read_mask_file, tail_window, write_dataset_csv, write_mask_file, CsvSchema, SourceTable,
};
pub use interp::{linear_interpolate, merged_input};
pub use mask::{apply_mask_entries, simulate_missing, MaskKind, MaskSpec};
pub use synth::{synth_generate, write_synth, SynthConfig, SYNTH_CSV, SYNTH_GRAPH};

use crate::error::{Error, Result};
use crate::numerics::Array;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesWindow {
    /// `N × D`, normalized; zero wherever `observed_mask` is zero.
    pub values: Array,
    pub observed_mask: Array,
    pub eval_mask: Array,
    pub graph_id: String,
}

impl TimeSeriesWindow {
    pub fn new(values: Array, observed_mask: Array, graph_id: impl Into<String>) -> Result<Self> {
        if values.ndim() != 2 || values.shape() != observed_mask.shape() {
            return Err(Error::mismatch("window", values.shape(), observed_mask.shape()));
        }
        let eval_mask = Array::zeros(values.shape());
        let w = Self {
            values,
            observed_mask,
            eval_mask,
            graph_id: graph_id.into(),
        };
        w.check()?;
        Ok(w)
    }

    pub fn n_sensors(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn observed_count(&self) -> usize {
        self.observed_mask.data().iter().filter(|&&m| m > 0.5).count()
    }

    pub fn missing_count(&self) -> usize {
        self.values.len() - self.observed_count()
    }

    pub fn eval_count(&self) -> usize {
        self.eval_mask.data().iter().filter(|&&m| m > 0.5).count()
    }

    /// Conditioning input `M ⊙ X`.
    pub fn observed_values(&self) -> Array {
        self.values
            .mul(&self.observed_mask)
            .expect("window masks share the value shape")
    }

    /// `1 − M`.
    pub fn missing_mask(&self) -> Array {
        self.observed_mask.map(|m| 1.0 - m)
    }

    /// Mask partition: binary masks that never overlap.
    pub fn check(&self) -> Result<()> {
        for (i, (&o, &e)) in self.observed_mask.data().iter().zip(self.eval_mask.data()).enumerate() {
            let binary = |v: f64| v == 0.0 || v == 1.0;
            if !binary(o) || !binary(e) || o + e > 1.0 {
                return Err(Error::Dataset(format!(
                    "entry {i}: observed={o}, eval={e} violates the mask partition"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.min + v * (self.max - self.min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub windows: Vec<TimeSeriesWindow>,
    pub sensor_names: Vec<String>,
    pub normalization: Vec<MinMax>,
    /// Raw CSV text, when loaded from a file, for byte-exact pass-through.
    pub source: Option<SourceTable>,
}

impl Dataset {
    pub fn n_sensors(&self) -> usize {
        self.sensor_names.len()
    }

    pub fn n_steps(&self) -> usize {
        self.windows.first().map_or(0, |w| w.n_steps())
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn denormalize(&self, sensor: usize, v: f64) -> f64 {
        self.normalization[sensor].denormalize(v)
    }

    pub fn eval_count(&self) -> usize {
        self.windows.iter().map(|w| w.eval_count()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.n_sensors(), self.n_steps());
        for (i, w) in self.windows.iter().enumerate() {
            if w.n_sensors() != n || w.n_steps() != d {
                return Err(Error::Dataset(format!(
                    "window {i} is {}x{}, expected {n}x{d}",
                    w.n_sensors(),
                    w.n_steps()
                )));
            }
            w.check()?;
        }
        if self.normalization.len() != n {
            return Err(Error::Dataset("one normalization pair per sensor required".into()));
        }
        Ok(())
    }

    /// Overwrites the stored value of every evaluation entry. A test hook
    /// for leakage checks; correct code never reads those values.
    pub fn poison_eval_values(&mut self, sentinel: f64) {
        for w in &mut self.windows {
            for k in 0..w.values.len() {
                if w.eval_mask.data()[k] > 0.5 {
                    w.values.data_mut()[k] = sentinel;
                }
            }
        }
    }

    fn with_windows(&self, windows: Vec<TimeSeriesWindow>) -> Dataset {
        Dataset {
            windows,
            sensor_names: self.sensor_names.clone(),
            normalization: self.normalization.clone(),
            source: None,
        }
    }
}

/// Ground truth of simulated-missing entries, keyed by
/// `(window, sensor, step)` within the dataset it was split from.
///
/// Training code never receives this type.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeldOut {
    entries: BTreeMap<(usize, usize, usize), f64>,
}

impl HeldOut {
    pub fn insert(&mut self, window: usize, sensor: usize, step: usize, value: f64) {
        self.entries.insert((window, sensor, step), value);
    }

    pub fn get(&self, window: usize, sensor: usize, step: usize) -> Option<f64> {
        self.entries.get(&(window, sensor, step)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize, usize), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    /// Replaces every held-out value with `sentinel`.
    pub fn poison(&mut self, sentinel: f64) {
        for v in self.entries.values_mut() {
            *v = sentinel;
        }
    }
}

/// Default split fractions: train, validation, test.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Contiguous temporal split. Validation and test get
/// `max(1, floor(frac · count))` windows; train gets the remainder.
pub fn split(ds: &Dataset, fractions: (f64, f64, f64)) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fe) = fractions;
    if [ft, fv, fe].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    let n = ds.len();
    // The epsilon absorbs products such as 0.7 · 10 = 7.000000000000001.
    let part = |f: f64| ((f * n as f64 + 1e-9).floor() as usize).max(1);
    let (nv, ne) = (part(fv), part(fe));
    if nv + ne >= n {
        return Err(Error::Split(format!(
            "{n} windows cannot fill train/valid/test with at least one window each"
        )));
    }
    let nt = n - nv - ne;
    let w = &ds.windows;
    Ok((
        ds.with_windows(w[..nt].to_vec()),
        ds.with_windows(w[nt..nt + nv].to_vec()),
        ds.with_windows(w[nt + nv..].to_vec()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_windows: usize) -> Dataset {
        let windows = (0..n_windows)
            .map(|i| TimeSeriesWindow::new(Array::full(&[2, 4], i as f64 * 0.1), Array::ones(&[2, 4]), "g").unwrap())
            .collect();
        Dataset {
            windows,
            sensor_names: vec!["a".into(), "b".into()],
            normalization: vec![MinMax { min: 0.0, max: 1.0 }; 2],
            source: None,
        }
    }

    #[test]
    fn split_ten() {
        let (a, b, c) = split(&toy(10), SPLIT_FRACTIONS).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
        // Temporal order is preserved.
        assert_eq!(a.windows[6], toy(10).windows[6]);
        assert_eq!(b.windows[0], toy(10).windows[7]);
    }

    #[test]
    fn split_three_and_two() {
        let (a, b, c) = split(&toy(3), SPLIT_FRACTIONS).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1, 1, 1));
        assert!(matches!(split(&toy(2), SPLIT_FRACTIONS), Err(Error::Split(_))));
    }

    #[test]
    fn split_sizes_by_enumeration() {
        for n in 3..60 {
            let (a, b, c) = split(&toy(n), SPLIT_FRACTIONS).unwrap();
            let nv = ((n as f64 * 0.1 + 1e-9).floor() as usize).max(1);
            let ne = ((n as f64 * 0.2 + 1e-9).floor() as usize).max(1);
            assert_eq!((b.len(), c.len()), (nv, ne));
            assert_eq!(a.len() + b.len() + c.len(), n);
        }
    }

    #[test]
    fn overlapping_masks_rejected() {
        let mut w = toy(1).windows.remove(0);
        w.eval_mask.set(&[0, 0], 1.0);
        assert!(w.check().is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let mm = MinMax { min: -3.5, max: 12.25 };
        for k in 0..100 {
            let x = -10.0 + k as f64 * 0.37;
            assert!((mm.denormalize(mm.normalize(x)) - x).abs() < 1e-12);
        }
    }
}
