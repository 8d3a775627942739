use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{forward_diffuse_marginal, reverse_update, NoiseSchedule};
use crate::data::{merged_input, Dataset, TimeSeriesWindow};
use crate::error::{Error, Result};
use crate::model::{decode_vars, encode, noise_vars, ArchConfig, LatentGaussian, NoiseInputs};
use crate::numerics::{gauss_sample, Array, Bindings, ParamSet, RngStream, Tape};

/// Everything the sampler reads; shared read-only across workers.
#[derive(Clone, Copy)]
pub struct Imputer<'a> {
    pub arch: &'a ArchConfig,
    pub params: &'a ParamSet,
    pub laplacian: &'a Array,
    pub schedule: &'a NoiseSchedule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub n_samples: usize,
    /// Samples per network batch. Fixed independently of `workers` so the
    /// output does not depend on the worker count.
    pub sample_batch: usize,
    pub workers: usize,
    pub trace: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            n_samples: 100,
            sample_batch: 25,
            workers: 1,
            trace: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct TraceStat {
    t: usize,
    sum_abs: f64,
    sum: f64,
    sum_sq: f64,
    count: usize,
}

/// Per reverse step statistics of the sampler state, pooled over every
/// sample and window that contributed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepTrace {
    stats: Vec<TraceStat>,
}

impl StepTrace {
    fn record(&mut self, t: usize, x: &Array) {
        let d = x.data();
        self.stats.push(TraceStat {
            t,
            sum_abs: d.iter().map(|v| v.abs()).sum(),
            sum: d.iter().sum(),
            sum_sq: d.iter().map(|v| v * v).sum(),
            count: d.len(),
        });
    }

    fn merge(&mut self, other: &StepTrace) -> Result<()> {
        if self.stats.is_empty() {
            self.stats = other.stats.clone();
            return Ok(());
        }
        if self.stats.len() != other.stats.len() {
            return Err(Error::Contract("step traces of different length".into()));
        }
        for (a, b) in self.stats.iter_mut().zip(&other.stats) {
            if a.t != b.t {
                return Err(Error::Contract("step traces visit different steps".into()));
            }
            a.sum_abs += b.sum_abs;
            a.sum += b.sum;
            a.sum_sq += b.sum_sq;
            a.count += b.count;
        }
        Ok(())
    }

    /// Visited step indices in order.
    pub fn steps(&self) -> Vec<usize> {
        self.stats.iter().map(|s| s.t).collect()
    }

    /// `(t, mean |x|, std x)` per visited step.
    pub fn rows(&self) -> Vec<(usize, f64, f64)> {
        self.stats
            .iter()
            .map(|s| {
                let n = s.count as f64;
                let mean = s.sum / n;
                let var = (s.sum_sq / n - mean * mean).max(0.0);
                (s.t, s.sum_abs / n, var.sqrt())
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mean_abs,std\n");
        for (t, m, s) in self.rows() {
            out.push_str(&format!("{t},{m},{s}\n"));
        }
        out
    }
}

fn stack(parts: &[Array]) -> Result<Array> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("stack of zero arrays".into()))?;
    let mut data = Vec::with_capacity(first.len() * parts.len());
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::mismatch("stack", first.shape(), p.shape()));
        }
        data.extend_from_slice(p.data());
    }
    Array::new(&[&[parts.len()], first.shape()].concat(), data)
}

fn tile(a: &Array, b: usize) -> Array {
    Array::from_fn(&[&[b], a.shape()].concat(), |k| a.data()[k % a.len()])
}

fn window_latent(w: &TimeSeriesWindow, imp: &Imputer<'_>) -> Result<LatentGaussian> {
    encode(&merged_input(w), imp.laplacian, imp.params, imp.arch)
}

/// One batch of samples. Sample `s` draws all of its noise from
/// `base.split(s)`, in a fixed order, so batching does not change results.
fn sample_chunk(
    w: &TimeSeriesWindow,
    imp: &Imputer<'_>,
    lat: &LatentGaussian,
    base: &RngStream,
    samples: Range<usize>,
    mut trace: Option<&mut StepTrace>,
) -> Result<Array> {
    let (n, d) = (w.n_sensors(), w.n_steps());
    let e = imp.arch.latent_dim;
    let bt = samples.len();
    let mut streams: Vec<RngStream> = samples.map(|s| base.split(s as u64)).collect();
    let mut draw = |shape: &[usize]| -> Result<Array> {
        let parts = streams
            .iter_mut()
            .map(|r| gauss_sample(r, shape))
            .collect::<Result<Vec<_>>>()?;
        stack(&parts)
    };

    let eps_lat = draw(&[n, e])?;
    let mask = tile(&w.observed_mask, bt);
    let missing = mask.map(|m| 1.0 - m);
    let x_co = tile(&w.observed_values(), bt);
    let mean = tile(&lat.mean, bt);
    let sd = tile(&lat.log_var.map(|v| (0.5 * v).exp()), bt);
    let z = mean.add(&sd.mul(&eps_lat)?)?;

    let tape = Tape::new();
    let b = Bindings::new(&tape, imp.params);
    let mark = tape.len();
    let x_bar = decode_vars(&b, imp.arch, tape.constant(z))?.value().mul(&missing)?;
    tape.truncate(mark);

    let s = imp.schedule;
    let big_t = s.steps();
    let mut x = forward_diffuse_marginal(&x_bar, big_t, &draw(&[n, d])?, s)?;
    for t in (1..=big_t).rev() {
        let inp = NoiseInputs {
            x_t: tape.constant(x.clone()),
            x_co: tape.constant(x_co.clone()),
            x_bar: tape.constant(x_bar.clone()),
            mask: &mask,
        };
        let eps_hat = (*noise_vars(&b, imp.arch, inp, &vec![t; bt], big_t)?.value()).clone();
        tape.truncate(mark);
        let noise = if t > 1 { draw(&[n, d])? } else { Array::zeros(x.shape()) };
        x = reverse_update(&x, &eps_hat, t, s, &noise)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.record(t, &x);
        }
    }
    if !x.all_finite() {
        return Err(Error::NonFinite {
            location: "sampler state".into(),
        });
    }
    let m = mask.data();
    let obs = x_co.data();
    for (k, v) in x.data_mut().iter_mut().enumerate() {
        if m[k] == 1.0 {
            *v = obs[k];
        }
    }
    Ok(x)
}

fn chunks(n_samples: usize, batch: usize) -> Vec<Range<usize>> {
    let batch = batch.max(1);
    (0..n_samples)
        .step_by(batch)
        .map(|s| s..(s + batch).min(n_samples))
        .collect()
}

fn concat_samples(parts: Vec<Array>) -> Result<Array> {
    let first = parts.first().ok_or_else(|| Error::Contract("no samples".into()))?;
    let inner = first.shape()[1..].to_vec();
    let total: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(total * inner.iter().product::<usize>());
    for p in &parts {
        data.extend_from_slice(p.data());
    }
    Array::new(&[&[total], inner.as_slice()].concat(), data)
}

/// Draws `opts.n_samples` imputations of one window, `[S, N, D]`. Observed
/// entries equal the observations exactly.
pub fn sample_imputation(
    w: &TimeSeriesWindow,
    imp: &Imputer<'_>,
    opts: &SampleOptions,
    rng: &RngStream,
    mut trace: Option<&mut StepTrace>,
) -> Result<Array> {
    if opts.n_samples == 0 {
        return Err(Error::Contract("n_samples must be at least 1".into()));
    }
    let lat = window_latent(w, imp)?;
    let mut parts = Vec::new();
    for range in chunks(opts.n_samples, opts.sample_batch) {
        let mut local = StepTrace::default();
        parts.push(sample_chunk(w, imp, &lat, rng, range, Some(&mut local))?);
        if let Some(tr) = trace.as_deref_mut() {
            tr.merge(&local)?;
        }
    }
    concat_samples(parts)
}

/// Samples every window of `ds`; window `i` uses `rng.split(i)`. Work is
/// spread over `opts.workers` threads whose count never affects the output.
pub fn impute_dataset(
    ds: &Dataset,
    imp: &Imputer<'_>,
    opts: &SampleOptions,
    rng: &RngStream,
) -> Result<(Vec<Array>, Option<StepTrace>)> {
    if opts.n_samples == 0 {
        return Err(Error::Contract("n_samples must be at least 1".into()));
    }
    let latents = ds
        .windows
        .iter()
        .map(|w| window_latent(w, imp))
        .collect::<Result<Vec<_>>>()?;
    let ranges = chunks(opts.n_samples, opts.sample_batch);
    let jobs: Vec<(usize, usize)> = (0..ds.len())
        .flat_map(|w| (0..ranges.len()).map(move |c| (w, c)))
        .collect();
    let results: Mutex<Vec<Option<Result<(Array, StepTrace)>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run = || loop {
        let j = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(wi, ci)) = jobs.get(j) else { break };
        let mut tr = StepTrace::default();
        let out = sample_chunk(
            &ds.windows[wi],
            imp,
            &latents[wi],
            &rng.split(wi as u64),
            ranges[ci].clone(),
            Some(&mut tr),
        )
        .map(|a| (a, tr));
        let failed = out.is_err();
        results.lock().unwrap()[j] = Some(out);
        if failed {
            next.store(jobs.len(), Ordering::Relaxed);
        }
    };
    std::thread::scope(|scope| {
        for _ in 1..opts.workers.max(1) {
            scope.spawn(run);
        }
        run();
    });
    let results = results.into_inner().unwrap();
    let mut trace = StepTrace::default();
    let mut per_window: Vec<Vec<Array>> = vec![Vec::new(); ds.len()];
    for (r, &(wi, _)) in results.into_iter().zip(&jobs) {
        let (a, tr) = match r {
            Some(r) => r?,
            None => continue,
        };
        trace.merge(&tr)?;
        per_window[wi].push(a);
    }
    let samples = per_window.into_iter().map(concat_samples).collect::<Result<Vec<_>>>()?;
    Ok((samples, opts.trace.then_some(trace)))
}

/// Observed values and reconstruction the reverse step is conditioned on.
pub struct Conditioning<'a> {
    pub x_co: &'a Array,
    pub x_bar: &'a Array,
    pub mask: &'a Array,
}

/// One ancestral step for a single window `[N, D]`.
pub fn reverse_step(
    x_t: &Array,
    cond: &Conditioning<'_>,
    t: usize,
    imp: &Imputer<'_>,
    rng: &mut RngStream,
) -> Result<Array> {
    let eps_hat = crate::model::noise_predict(
        x_t,
        cond.x_co,
        cond.x_bar,
        cond.mask,
        &[t],
        imp.schedule.steps(),
        imp.params,
        imp.arch,
    )?;
    let z = if t > 1 {
        gauss_sample(rng, x_t.shape())?
    } else {
        Array::zeros(x_t.shape())
    };
    reverse_update(x_t, &eps_hat, t, imp.schedule, &z)
}
