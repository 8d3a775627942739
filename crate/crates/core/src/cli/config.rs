use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{MaskKind, MaskSpec, SynthConfig};
use crate::diffusion::{SampleOptions, ScheduleConfig};
use crate::error::{Error, Result};
use crate::evalmetrics::PointEstimate;
use crate::graph::LaplacianKind;
use crate::model::ArchConfig;
use crate::numerics::RngStream;
use crate::train::TrainConfig;

/// Keys of the seeds derived from the master seed.
pub const SEED_SYNTH: u64 = 1;
pub const SEED_MASK_TRAIN: u64 = 2;
pub const SEED_MASK_VALID: u64 = 3;
pub const SEED_MASK_TEST: u64 = 4;
pub const SEED_TRAIN: u64 = 5;
pub const SEED_SAMPLE: u64 = 6;
pub const SEED_LATENT: u64 = 7;

/// A seed for one purpose, derived from the master seed. Kept below 2^63
/// so the config echo can store it as a TOML integer.
pub fn sub_seed(master: u64, key: u64) -> u64 {
    RngStream::new(master).split(key).inner_mut().next_u64() >> 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub csv: Option<PathBuf>,
    /// Adjacency as JSON (`{"edges": [[i, j], ...]}`) or a dense CSV matrix.
    /// Without one the encoder propagates with the identity.
    pub graph: Option<PathBuf>,
    pub laplacian: LaplacianKind,
    pub window_len: usize,
    /// Saved evaluation mask (`window,sensor,step`, window indices into the
    /// whole file). Replaces simulation when set.
    pub mask_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv: None,
            graph: None,
            laplacian: LaplacianKind::default(),
            window_len: 32,
            mask_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub kind: MaskKind,
    pub rate: f64,
    pub block_min_len: usize,
    pub block_max_len: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            kind: MaskKind::Point,
            rate: 0.25,
            block_min_len: 4,
            block_max_len: 12,
        }
    }
}

impl MaskConfig {
    pub fn spec(&self, seed: u64) -> MaskSpec {
        MaskSpec {
            kind: self.kind,
            rate: self.rate,
            block_min_len: self.block_min_len,
            block_max_len: self.block_max_len,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub sample_batch: usize,
    pub workers: usize,
    pub point: PointEstimate,
    /// Record per-step sampler statistics.
    pub trace: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            sample_batch: 25,
            workers: 1,
            point: PointEstimate::Mean,
            trace: false,
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> SampleOptions {
        SampleOptions {
            n_samples: self.n_samples,
            sample_batch: self.sample_batch,
            workers: self.workers,
            trace: self.trace,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    /// Simulated point-missing rates applied to the test split.
    pub rates: Vec<f64>,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self { rates: vec![0.0, 0.5] }
    }
}

/// Everything a command reads. `arch.n_sensors` and `arch.n_steps` are
/// taken from the data; `train.seed` is derived from `seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub mask: MaskConfig,
    pub arch: ArchConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub latent: LatentConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub n_samples: Option<usize>,
    pub trace: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = Some(p.clone());
        }
        if let Some(w) = o.workers {
            self.eval.workers = w;
            self.train.workers = w;
        }
        if let Some(p) = &o.checkpoint {
            self.checkpoint = Some(p.clone());
        }
        if let Some(n) = o.n_samples {
            self.eval.n_samples = n;
        }
        if o.trace {
            self.eval.trace = true;
        }
        self.train.seed = sub_seed(self.seed, SEED_TRAIN);
    }

    /// Checks every section that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if self.data.window_len == 0 {
            return Err(Error::Config("data.window_len must be positive".into()));
        }
        self.mask.spec(0).validate(self.data.window_len)?;
        self.schedule.build()?;
        self.train.validate()?;
        if self.eval.n_samples == 0 || self.eval.sample_batch == 0 {
            return Err(Error::Config(
                "eval.n_samples and eval.sample_batch must be positive".into(),
            ));
        }
        if self.eval.workers == 0 || self.train.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if let Some(r) = self.latent.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("latent rate {r} outside [0, 1]")));
        }
        self.resolved_arch(self.arch.n_sensors).validate()
    }

    /// The architecture for data with `n_sensors` sensors.
    pub fn resolved_arch(&self, n_sensors: usize) -> ArchConfig {
        ArchConfig {
            n_sensors,
            n_steps: self.data.window_len,
            ..self.arch.clone()
        }
    }

    /// `out`, or `runs/<unix seconds>-seed<seed>`.
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
            PathBuf::from("runs").join(format!("{secs}-seed{}", self.seed))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[train]\nepoch = 3").is_err());
        assert!(RunConfig::from_toml("[arch]\nlatent = 3").is_err());
        let c = RunConfig::from_toml("seed = 4\n[train]\nepochs = 3\n[mask]\nrate = 0.5").unwrap();
        assert_eq!((c.seed, c.train.epochs, c.mask.rate), (4, 3, 0.5));
    }

    #[test]
    fn overrides_win_and_seed_derives() {
        let mut c = RunConfig::from_toml("seed = 4\n[eval]\nn_samples = 7").unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            workers: Some(3),
            n_samples: Some(11),
            trace: true,
            ..Default::default()
        });
        assert_eq!(
            (c.seed, c.eval.n_samples, c.eval.workers, c.train.workers),
            (9, 11, 3, 3)
        );
        assert!(c.eval.trace);
        assert_eq!(c.train.seed, sub_seed(9, SEED_TRAIN));
        assert_ne!(sub_seed(9, SEED_TRAIN), sub_seed(9, SEED_SAMPLE));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.mask.rate = 1.5;
        assert!(matches!(c.validate(), Err(Error::MaskSpec(_))));
        let mut c = RunConfig::default();
        c.arch.decoder_heads = 5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.schedule.beta_max = 2.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.eval.n_samples = 0;
        assert!(c.validate().is_err());
    }
}
