//! MAE, sample-based CRPS with a brute-force oracle, and report assembly.
//! Scores are computed in denormalized units.

use serde::{Deserialize, Serialize};

use crate::data::{linear_interpolate, Dataset, HeldOut};
use crate::diffusion::{impute_dataset, Imputer, SampleOptions};
use crate::error::{Error, Result};
use crate::numerics::{Array, RngStream};

/// Mean of `|pred − truth|` over entries where `mask` is 1.
pub fn mae(pred: &Array, truth: &Array, mask: &Array) -> Result<f64> {
    if pred.shape() != truth.shape() || pred.shape() != mask.shape() {
        return Err(Error::mismatch("mae", pred.shape(), truth.shape()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, t), m) in pred.data().iter().zip(truth.data()).zip(mask.data()) {
        if *m == 1.0 {
            sum += (p - t).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Metric("mae over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// Energy-form CRPS `E|X − y| − ½E|X − X′|` of an empirical sample set, via
/// the sorted-order identity in `O(S log S)`.
pub fn crps_samples(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("crps of an empty sample set".into()));
    }
    let s = samples.len() as f64;
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let spread: f64 = x.iter().enumerate().map(|(i, v)| v * (2.0 * i as f64 - s + 1.0)).sum();
    let err: f64 = x.iter().map(|v| (v - y).abs()).sum::<f64>() / s;
    Ok(err - spread / (s * s))
}

/// The same estimator as a literal double sum.
pub fn crps_brute(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("crps of an empty sample set".into()));
    }
    let s = samples.len() as f64;
    let err: f64 = samples.iter().map(|v| (v - y).abs()).sum::<f64>() / s;
    let mut pair = 0.0;
    for a in samples {
        for b in samples {
            pair += (a - b).abs();
        }
    }
    Ok(err - pair / (2.0 * s * s))
}

/// Linear-interpolated quantile of an ascending, nonempty slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointEstimate {
    #[default]
    Mean,
    Median,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorScore {
    pub sensor: String,
    pub mae: f64,
    pub crps: f64,
    pub n_eval_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub interp_mae: f64,
    /// CRPS of the single-sample interpolation predictor, equal to its MAE.
    pub interp_crps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub crps_mean: f64,
    pub per_sensor: Vec<SensorScore>,
    pub n_eval_points: usize,
    pub n_samples: usize,
    pub point: PointEstimate,
    pub units: String,
    pub baseline: Option<Baseline>,
    pub config: serde_json::Value,
}

/// One scored evaluation entry, in denormalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryScore {
    pub window: usize,
    pub sensor: usize,
    pub step: usize,
    pub truth: f64,
    pub mean: f64,
    pub p05: f64,
    pub p95: f64,
    pub crps: f64,
}

pub fn entries_csv(rows: &[EntryScore]) -> String {
    let mut out = String::from("window,sensor,step,truth,mean,p05,p95,crps\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.window, r.sensor, r.step, r.truth, r.mean, r.p05, r.p95, r.crps
        ));
    }
    out
}

/// Scores per-window sample tensors `[S, N, D]` (normalized) against the
/// held-out truth of every eval entry.
pub fn score_samples(
    ds: &Dataset,
    held: &HeldOut,
    samples: &[Array],
    point: PointEstimate,
) -> Result<(EvalReport, Vec<EntryScore>)> {
    if samples.len() != ds.len() {
        return Err(Error::Metric(format!(
            "{} sample tensors for {} windows",
            samples.len(),
            ds.len()
        )));
    }
    let n_sensors = ds.n_sensors();
    let mut rows = Vec::new();
    let mut n_samples = 0;
    for (wi, (w, s)) in ds.windows.iter().zip(samples).enumerate() {
        let (sn, n, d) = (s.shape()[0], w.n_sensors(), w.n_steps());
        if s.shape() != [sn, n, d] {
            return Err(Error::mismatch("score_samples", s.shape(), &[sn, n, d]));
        }
        n_samples = sn;
        for sensor in 0..n {
            for step in 0..d {
                if w.eval_mask.at(sensor, step) != 1.0 {
                    continue;
                }
                let truth = held
                    .get(wi, sensor, step)
                    .ok_or_else(|| Error::Metric(format!("no held-out truth for ({wi}, {sensor}, {step})")))?;
                let mut xs: Vec<f64> = (0..sn)
                    .map(|k| ds.denormalize(sensor, s.data()[(k * n + sensor) * d + step]))
                    .collect();
                let y = ds.denormalize(sensor, truth);
                let crps = crps_samples(&xs, y)?;
                xs.sort_by(f64::total_cmp);
                let mean = match point {
                    PointEstimate::Mean => xs.iter().sum::<f64>() / sn as f64,
                    PointEstimate::Median => quantile(&xs, 0.5),
                };
                rows.push(EntryScore {
                    window: wi,
                    sensor,
                    step,
                    truth: y,
                    mean,
                    p05: quantile(&xs, 0.05),
                    p95: quantile(&xs, 0.95),
                    crps,
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Metric("no evaluation entries".into()));
    }
    let total = rows.len() as f64;
    let mae = rows.iter().map(|r| (r.mean - r.truth).abs()).sum::<f64>() / total;
    let crps_mean = rows.iter().map(|r| r.crps).sum::<f64>() / total;
    let per_sensor = (0..n_sensors)
        .filter_map(|s| {
            let mine: Vec<&EntryScore> = rows.iter().filter(|r| r.sensor == s).collect();
            (!mine.is_empty()).then(|| {
                let k = mine.len() as f64;
                SensorScore {
                    sensor: ds.sensor_names[s].clone(),
                    mae: mine.iter().map(|r| (r.mean - r.truth).abs()).sum::<f64>() / k,
                    crps: mine.iter().map(|r| r.crps).sum::<f64>() / k,
                    n_eval_points: mine.len(),
                }
            })
        })
        .collect();
    let report = EvalReport {
        mae,
        crps_mean,
        per_sensor,
        n_eval_points: rows.len(),
        n_samples,
        point,
        units: "denormalized".into(),
        baseline: None,
        config: serde_json::Value::Null,
    };
    Ok((report, rows))
}

/// Linear interpolation as a single-sample predictor. Its CRPS equals its
/// MAE.
pub fn interpolation_baseline(ds: &Dataset, held: &HeldOut) -> Result<Baseline> {
    let samples = ds
        .windows
        .iter()
        .map(|w| {
            let f = linear_interpolate(w);
            f.reshape(&[&[1], f.shape()].concat())
        })
        .collect::<Result<Vec<_>>>()?;
    let (r, _) = score_samples(ds, held, &samples, PointEstimate::Mean)?;
    Ok(Baseline {
        interp_mae: r.mae,
        interp_crps: r.crps_mean,
    })
}

/// Samples every test window and scores the result, with the
/// interpolation baseline attached.
pub fn evaluate(
    imp: &Imputer<'_>,
    ds_test: &Dataset,
    held: &HeldOut,
    opts: &SampleOptions,
    point: PointEstimate,
    rng: &RngStream,
) -> Result<(EvalReport, Vec<EntryScore>)> {
    if ds_test.eval_count() == 0 {
        return Err(Error::Metric("test split has no evaluation entries".into()));
    }
    let (samples, _) = impute_dataset(ds_test, imp, opts, rng)?;
    let (mut report, rows) = score_samples(ds_test, held, &samples, point)?;
    report.baseline = Some(interpolation_baseline(ds_test, held)?);
    Ok((report, rows))
}
