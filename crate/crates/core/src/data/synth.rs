//! Synthetic sensor network with known ground truth everywhere.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_dataset_csv, Dataset, MinMax, TimeSeriesWindow};
use crate::error::{Error, Result};
use crate::graph::{build_laplacian, Graph};
use crate::numerics::{Array, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_sensors: usize,
    pub n_steps: usize,
    pub n_windows: usize,
    /// Ring neighbours per node (split evenly left/right, rounded up).
    pub graph_degree: usize,
    /// Random chords added on top of the ring; `None` means `n_sensors / 4`.
    pub n_chords: Option<usize>,
    pub noise_sd: f64,
    /// Periods (in steps) of the two sinusoid components.
    pub periods: [f64; 2],
    /// 1 or 2 sinusoid components per sensor.
    pub components: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sensors: 8,
            n_steps: 32,
            n_windows: 500,
            graph_degree: 2,
            n_chords: None,
            noise_sd: 0.1,
            periods: [6.0, 15.0],
            components: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sensors < 2 {
            return Err(Error::Generator(format!(
                "n_sensors must be >= 2, got {}",
                self.n_sensors
            )));
        }
        if self.n_steps < 4 {
            return Err(Error::Generator(format!("n_steps must be >= 4, got {}", self.n_steps)));
        }
        if self.n_windows == 0 {
            return Err(Error::Generator("n_windows must be positive".into()));
        }
        if self.graph_degree == 0 || self.graph_degree >= self.n_sensors {
            return Err(Error::Generator(format!(
                "graph_degree must be in 1..{}, got {}",
                self.n_sensors, self.graph_degree
            )));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Generator("noise_sd must be nonnegative".into()));
        }
        if !(1..=2).contains(&self.components) || self.periods.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Generator(
                "components must be 1 or 2 with positive periods".into(),
            ));
        }
        Ok(())
    }
}

fn ring_with_chords(cfg: &SynthConfig, rng: &mut RngStream) -> Array {
    let n = cfg.n_sensors;
    let mut a = Array::zeros(&[n, n]);
    let reach = cfg.graph_degree.div_ceil(2);
    for i in 0..n {
        for k in 1..=reach {
            let j = (i + k) % n;
            if j != i {
                a.set(&[i, j], 1.0);
                a.set(&[j, i], 1.0);
            }
        }
    }
    let chords = cfg.n_chords.unwrap_or(n / 4);
    let mut added = 0;
    let mut tries = 0;
    while added < chords && tries < 100 * (chords + 1) {
        tries += 1;
        let i = rng.int_inclusive(0, n - 1);
        let j = rng.int_inclusive(0, n - 1);
        if i != j && a.at(i, j) == 0.0 {
            a.set(&[i, j], 1.0);
            a.set(&[j, i], 1.0);
            added += 1;
        }
    }
    a
}

/// Phase per node: circular mean of raw phases over the closed neighbourhood.
fn smoothed_phases(adjacency: &Array, rng: &mut RngStream) -> Vec<f64> {
    let n = adjacency.shape()[0];
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform() * TAU).collect();
    (0..n)
        .map(|i| {
            let (mut s, mut c) = (raw[i].sin(), raw[i].cos());
            for j in 0..n {
                if adjacency.at(i, j) > 0.0 {
                    s += raw[j].sin();
                    c += raw[j].cos();
                }
            }
            s.atan2(c)
        })
        .collect()
}

/// Two-sinusoid signals on a ring-plus-chords graph, min-max normalized,
/// fully observed.
pub fn synth_generate(cfg: &SynthConfig, rng: &mut RngStream) -> Result<(Dataset, Graph)> {
    cfg.validate()?;
    let (n, d) = (cfg.n_sensors, cfg.n_steps);
    let total = d * cfg.n_windows;
    let adjacency = ring_with_chords(cfg, rng);
    let graph = build_laplacian(&adjacency)?;
    let phases: Vec<Vec<f64>> = (0..cfg.components).map(|_| smoothed_phases(&adjacency, rng)).collect();
    let amps: Vec<Vec<f64>> = (0..cfg.components)
        .map(|c| {
            let scale = if c == 0 { 1.0 } else { 0.5 };
            (0..n).map(|_| scale * (0.6 + 0.8 * rng.uniform())).collect()
        })
        .collect();
    let mut series = vec![vec![0.0; total]; n];
    for (s, row) in series.iter_mut().enumerate() {
        for (tau, v) in row.iter_mut().enumerate() {
            let mut x = 0.0;
            for c in 0..cfg.components {
                x += amps[c][s] * (TAU * tau as f64 / cfg.periods[c] + phases[c][s]).sin();
            }
            *v = x;
        }
    }
    if cfg.noise_sd > 0.0 {
        for row in series.iter_mut() {
            for v in row.iter_mut() {
                *v += cfg.noise_sd * rng.normal();
            }
        }
    }
    let mut normalization = Vec::with_capacity(n);
    for (s, row) in series.iter_mut().enumerate() {
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !(hi > lo) {
            return Err(Error::Normalization {
                sensor: format!("s{s}"),
            });
        }
        let mm = MinMax { min: lo, max: hi };
        for v in row.iter_mut() {
            *v = mm.normalize(*v);
        }
        normalization.push(mm);
    }
    let windows = (0..cfg.n_windows)
        .map(|w| {
            let values = Array::from_fn(&[n, d], |k| series[k / d][w * d + k % d]);
            TimeSeriesWindow::new(values, Array::ones(&[n, d]), "synth")
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        windows,
        sensor_names: (0..n).map(|s| format!("s{s}")).collect(),
        normalization,
        source: None,
    };
    Ok((ds, graph))
}

pub const SYNTH_CSV: &str = "data.csv";
pub const SYNTH_GRAPH: &str = "graph.json";

/// Writes `data.csv` and `graph.json` (`{"n_nodes", "edges", "config"}`)
/// into `dir`.
pub fn write_synth(dir: &Path, ds: &Dataset, graph: &Graph, cfg: &SynthConfig, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_dataset_csv(&dir.join(SYNTH_CSV), ds)?;
    let sidecar = serde_json::json!({
        "n_nodes": graph.n_nodes(),
        "edges": graph.edges(),
        "config": cfg,
        "seed": seed,
    });
    let p = dir.join(SYNTH_GRAPH);
    std::fs::write(&p, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&p, e))
}
