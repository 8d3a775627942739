//! Objectives, the optimizer, and the alternating training loop.

mod adam;
mod loss;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use loss::{diffusion_term, kl_diag_gauss, kl_var, loss_diffusion, loss_vae, vae_terms, Batch, VaeTerms};

use crate::data::{Dataset, HeldOut};
use crate::diffusion::{impute_dataset, Imputer, NoiseSchedule, SampleOptions, ScheduleConfig};
use crate::error::{Error, Result};
use crate::evalmetrics::{score_samples, PointEstimate};
use crate::model::{check_params, init_params, ArchConfig, DECODER_PREFIX, DENOISER_PREFIX, ENCODER_PREFIX};
use crate::numerics::{gauss_sample, grad_backprop, Array, Gradients, ParamSet, RngStream};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_VALID: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier on the KL term; 1 gives the plain objective.
    pub kl_weight: f64,
    /// One step on the summed objective instead of two separate steps.
    pub joint_step: bool,
    pub seed: u64,
    /// Samples per validation window for model selection.
    pub valid_samples: usize,
    /// Validate every this many epochs (and after the last one).
    pub valid_every: usize,
    pub sample_batch: usize,
    pub workers: usize,
    /// Record wall-clock seconds per epoch in the log. Off makes logs
    /// byte-reproducible.
    pub record_timing: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-4,
            kl_weight: 1.0,
            joint_step: false,
            seed: 0,
            valid_samples: 10,
            valid_every: 1,
            sample_batch: 25,
            workers: 1,
            record_timing: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.valid_samples == 0 || self.valid_every == 0 || self.sample_batch == 0 {
            return Err(Error::Config(
                "batch_size, valid_samples, valid_every and sample_batch must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub kl: f64,
    pub valid_mae: Option<f64>,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLosses {
    pub l1: f64,
    pub l2: f64,
    pub kl: f64,
}

/// Frozen random draws for one batch.
#[derive(Clone, Debug)]
pub struct BatchNoise {
    pub eps_lat: Array,
    pub t: Vec<usize>,
    pub eps: Array,
}

impl BatchNoise {
    pub fn draw(shape: [usize; 3], latent_dim: usize, s: &NoiseSchedule, rng: &mut RngStream) -> Result<Self> {
        let [bt, n, d] = shape;
        let eps_lat = gauss_sample(rng, &[bt, n, latent_dim])?;
        let t = (0..bt).map(|_| rng.int_inclusive(1, s.steps())).collect();
        let eps = gauss_sample(rng, &[bt, n, d])?;
        Ok(Self { eps_lat, t, eps })
    }
}

fn finite_grads(g: &Gradients) -> Result<()> {
    match g.iter().find(|(_, a)| !a.all_finite()) {
        Some((p, _)) => Err(Error::NonFinite {
            location: format!("gradient of `{p}`"),
        }),
        None => Ok(()),
    }
}

/// Parameters plus the two optimizers: one for the encoder and decoder,
/// one for the noise predictor.
pub struct Trainer<'a> {
    pub arch: &'a ArchConfig,
    pub schedule: &'a NoiseSchedule,
    pub laplacian: &'a Array,
    pub cfg: &'a TrainConfig,
    pub params: ParamSet,
    vae_opt: Adam,
    eps_opt: Adam,
}

impl<'a> Trainer<'a> {
    pub fn new(
        arch: &'a ArchConfig,
        schedule: &'a NoiseSchedule,
        laplacian: &'a Array,
        cfg: &'a TrainConfig,
        params: ParamSet,
    ) -> Result<Self> {
        check_params(&params, arch)?;
        Ok(Self {
            arch,
            schedule,
            laplacian,
            cfg,
            params,
            vae_opt: Adam::new(cfg.learning_rate, cfg.adam.clone()),
            eps_opt: Adam::new(cfg.learning_rate, cfg.adam.clone()),
        })
    }

    /// Gradient step on the VGAE objective; returns its terms and the
    /// reconstruction (as a constant for the denoiser step).
    pub fn vae_step(&mut self, batch: &Batch, noise: &BatchNoise) -> Result<(BatchLosses, Array)> {
        let (arch, lap, klw) = (self.arch, self.laplacian, self.cfg.kl_weight);
        let mut stash = None;
        let (l1, g) = grad_backprop(&self.params, |_, b| {
            let terms = vae_terms(b, arch, lap, batch, &noise.eps_lat, klw)?;
            stash = Some((terms.kl.value().item()?, (*terms.x_bar.value()).clone()));
            Ok(terms.l1)
        })?;
        finite_grads(&g)?;
        self.vae_opt
            .step(&mut self.params, &g, &[ENCODER_PREFIX, DECODER_PREFIX])?;
        let (kl, x_bar) = stash.expect("loss closure ran");
        Ok((BatchLosses { l1, l2: 0.0, kl }, x_bar))
    }

    /// Gradient step on the denoising objective with `x_bar` held fixed.
    pub fn denoiser_step(&mut self, batch: &Batch, x_bar: &Array, noise: &BatchNoise) -> Result<f64> {
        let (arch, s) = (self.arch, self.schedule);
        let (l2, g) = grad_backprop(&self.params, |tape, b| {
            diffusion_term(b, arch, batch, tape.constant(x_bar.clone()), &noise.t, &noise.eps, s)
        })?;
        finite_grads(&g)?;
        self.eps_opt.step(&mut self.params, &g, &[DENOISER_PREFIX])?;
        Ok(l2)
    }

    /// One step on `L₁ + L₂` through every parameter; the reconstruction
    /// stays on the tape.
    pub fn joint_step(&mut self, batch: &Batch, noise: &BatchNoise) -> Result<BatchLosses> {
        let (arch, lap, klw, s) = (self.arch, self.laplacian, self.cfg.kl_weight, self.schedule);
        let mut stash = None;
        let (_, g) = grad_backprop(&self.params, |_, b| {
            let terms = vae_terms(b, arch, lap, batch, &noise.eps_lat, klw)?;
            let l2 = diffusion_term(b, arch, batch, terms.x_bar, &noise.t, &noise.eps, s)?;
            stash = Some((terms.l1.value().item()?, l2.value().item()?, terms.kl.value().item()?));
            terms.l1.add(l2)
        })?;
        finite_grads(&g)?;
        let mut grads_vae = Gradients::new();
        let mut grads_eps = Gradients::new();
        for (k, v) in g {
            if k.starts_with(DENOISER_PREFIX) {
                grads_eps.insert(k, v);
            } else {
                grads_vae.insert(k, v);
            }
        }
        self.vae_opt
            .step(&mut self.params, &grads_vae, &[ENCODER_PREFIX, DECODER_PREFIX])?;
        self.eps_opt.step(&mut self.params, &grads_eps, &[DENOISER_PREFIX])?;
        let (l1, l2, kl) = stash.expect("loss closure ran");
        Ok(BatchLosses { l1, l2, kl })
    }

    pub fn step(&mut self, batch: &Batch, noise: &BatchNoise) -> Result<BatchLosses> {
        if self.cfg.joint_step {
            return self.joint_step(batch, noise);
        }
        let (mut out, x_bar) = self.vae_step(batch, noise)?;
        out.l2 = self.denoiser_step(batch, &x_bar, noise)?;
        Ok(out)
    }

    pub fn imputer(&self) -> Imputer<'_> {
        Imputer {
            arch: self.arch,
            params: &self.params,
            laplacian: self.laplacian,
            schedule: self.schedule,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MAE (the final
    /// epoch when nothing was validated).
    pub params: ParamSet,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_valid_mae: Option<f64>,
}

/// Validation MAE of the sampler in denormalized units; `None` when the
/// split has no evaluation entries.
pub fn validation_mae(
    imp: &Imputer<'_>,
    ds: &Dataset,
    held: &HeldOut,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<Option<f64>> {
    if ds.eval_count() == 0 {
        return Ok(None);
    }
    let opts = SampleOptions {
        n_samples: cfg.valid_samples,
        sample_batch: cfg.sample_batch,
        workers: cfg.workers,
        trace: false,
    };
    let (samples, _) = impute_dataset(ds, imp, &opts, rng)?;
    let (report, _) = score_samples(ds, held, &samples, PointEstimate::Mean)?;
    Ok(Some(report.mae))
}

/// The training loop. `on_epoch` sees each log record as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn train(
    ds_train: &Dataset,
    ds_valid: &Dataset,
    held_valid: &HeldOut,
    laplacian: &Array,
    arch: &ArchConfig,
    schedule: &ScheduleConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if ds_train.is_empty() || ds_valid.is_empty() {
        return Err(Error::Split(
            "training needs nonempty train and validation splits".into(),
        ));
    }
    if ds_train.n_sensors() != arch.n_sensors || ds_train.n_steps() != arch.n_steps {
        return Err(Error::ManifestMismatch {
            field: "n_sensors/n_steps".into(),
            found: format!("{}x{}", ds_train.n_sensors(), ds_train.n_steps()),
            expected: format!("{}x{}", arch.n_sensors, arch.n_steps),
        });
    }
    let sched = schedule.build()?;
    let root = RngStream::new(cfg.seed);
    let init = init_params(arch, &mut root.split(STREAM_INIT))?;
    let mut trainer = Trainer::new(arch, &sched, laplacian, cfg, init)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let valid_rng = root.split(STREAM_VALID);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..ds_train.len()).collect();
        order.shuffle(root.split(STREAM_SHUFFLE).split(epoch as u64).inner_mut());
        let (mut l1, mut l2, mut kl, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let windows: Vec<_> = chunk.iter().map(|&i| &ds_train.windows[i]).collect();
            let Some(batch) = Batch::new(&windows)? else {
                continue;
            };
            let mut rng = root.split(STREAM_NOISE).split(epoch as u64).split(bi as u64);
            let noise = BatchNoise::draw(batch.shape(), arch.latent_dim, &sched, &mut rng)?;
            let out = trainer.step(&batch, &noise).map_err(|e| Error::Diverged {
                epoch,
                batch: bi,
                source: Box::new(e),
            })?;
            l1 += out.l1;
            l2 += out.l2;
            kl += out.kl;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let validate = (epoch + 1) % cfg.valid_every == 0 || epoch + 1 == cfg.epochs;
        let valid_mae = if validate {
            validation_mae(&trainer.imputer(), ds_valid, held_valid, cfg, &valid_rng)?
        } else {
            None
        };
        if let Some(v) = valid_mae {
            if best.as_ref().is_none_or(|(_, b, _)| v < *b) {
                best = Some((epoch, v, trainer.params.clone()));
            }
        }
        let rec = EpochLog {
            epoch,
            l1: l1 / nb,
            l2: l2 / nb,
            kl: kl / nb,
            valid_mae,
            seconds: cfg.record_timing.then(|| started.elapsed().as_secs_f64()),
        };
        on_epoch(&rec)?;
        log.push(rec);
    }
    Ok(match best {
        Some((e, v, p)) => TrainOutcome {
            params: p,
            log,
            best_epoch: Some(e),
            best_valid_mae: Some(v),
        },
        None => TrainOutcome {
            params: trainer.params,
            log,
            best_epoch: None,
            best_valid_mae: None,
        },
    })
}

pub fn log_line(rec: &EpochLog) -> Result<String> {
    Ok(serde_json::to_string(rec)?)
}

/// Everything recorded next to the tensors in a checkpoint manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: String,
    pub arch: ArchConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub best_epoch: Option<usize>,
    pub best_valid_mae: Option<f64>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    params.write_container(dir, serde_json::to_value(meta)?)
}

/// Loads a checkpoint. With `expect`, every architecture field must match;
/// the first differing one is named in the error.
pub fn load_checkpoint(dir: &Path, expect: Option<&ArchConfig>) -> Result<(ParamSet, CheckpointMeta)> {
    let (params, meta) = ParamSet::read_container(dir)?;
    let meta: CheckpointMeta =
        serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
    if let Some(want) = expect {
        let (a, b) = (serde_json::to_value(&meta.arch)?, serde_json::to_value(want)?);
        if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
            for (k, v) in b {
                if a.get(k) != Some(v) {
                    return Err(Error::ManifestMismatch {
                        field: format!("arch.{k}"),
                        found: a.get(k).map_or("missing".into(), |x| x.to_string()),
                        expected: v.to_string(),
                    });
                }
            }
        }
    }
    check_params(&params, &meta.arch)?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests;
