//! The three networks: GCN variational encoder, transformer+CNN decoder, and
//! the conditional noise predictor. Parameters live in one [`ParamSet`]
//! under the prefixes `enc.`, `dec.` and `eps.`.

mod decoder;
mod encoder;
mod layers;
mod noise;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use decoder::{decode, decode_vars};
pub use encoder::{encode, encode_vars, gcn_layer, reparameterize, reparameterize_var, Activation};
pub use noise::{noise_predict, noise_vars, step_embedding, NoiseInputs};

use crate::error::{Error, Result};
use crate::numerics::{Array, ParamSet, RngStream};

pub const ENCODER_PREFIX: &str = "enc.";
pub const DECODER_PREFIX: &str = "dec.";
pub const DENOISER_PREFIX: &str = "eps.";

/// Output activation of the two encoder heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// Sigmoid on both the mean and the log-variance.
    #[default]
    Faithful,
    /// No output activation.
    LinearHeads,
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "faithful" => Ok(Self::Faithful),
            "linear-heads" => Ok(Self::LinearHeads),
            other => Err(Error::Config(format!("unknown head mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub n_sensors: usize,
    pub n_steps: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub head_mode: HeadMode,
    pub decoder_heads: usize,
    pub decoder_ff_mult: usize,
    pub decoder_conv_channels: usize,
    pub positional_encoding: bool,
    pub noise_channels: usize,
    pub noise_blocks: usize,
    pub noise_heads: usize,
    pub step_embed_dim: usize,
    /// Sinusoidal time-position features appended to the denoiser input.
    pub time_embed_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            n_sensors: 8,
            n_steps: 32,
            latent_dim: 16,
            hidden_dim: 64,
            head_mode: HeadMode::Faithful,
            decoder_heads: 8,
            decoder_ff_mult: 4,
            decoder_conv_channels: 2,
            positional_encoding: false,
            noise_channels: 64,
            noise_blocks: 4,
            noise_heads: 8,
            step_embed_dim: 128,
            time_embed_dim: 16,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_sensors", self.n_sensors),
            ("n_steps", self.n_steps),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("decoder_heads", self.decoder_heads),
            ("decoder_ff_mult", self.decoder_ff_mult),
            ("decoder_conv_channels", self.decoder_conv_channels),
            ("noise_channels", self.noise_channels),
            ("noise_blocks", self.noise_blocks),
            ("noise_heads", self.noise_heads),
            ("step_embed_dim", self.step_embed_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.latent_dim.is_multiple_of(self.decoder_heads) {
            return Err(Error::Config(format!(
                "decoder_heads {} does not divide latent_dim {}",
                self.decoder_heads, self.latent_dim
            )));
        }
        if !self.noise_channels.is_multiple_of(self.noise_heads) {
            return Err(Error::Config(format!(
                "noise_heads {} does not divide noise_channels {}",
                self.noise_heads, self.noise_channels
            )));
        }
        if !self.step_embed_dim.is_multiple_of(2) || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("embedding widths must be even".into()));
        }
        Ok(())
    }
}

/// Mean and log-variance of the diagonal latent Gaussian, `N × E` each
/// (or `B × N × E` for a batch).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mean: Array,
    pub log_var: Array,
}

impl LatentGaussian {
    pub fn variance(&self) -> Array {
        self.log_var.map(f64::exp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform on `±1/√fan_in`.
    Uniform(usize),
    Zeros,
    Ones,
}

pub(crate) fn param_specs(a: &ArchConfig) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |p: &str, s: &[usize], i: Init| v.push((p.to_string(), s.to_vec(), i));
    let (d, f, e) = (a.n_steps, a.hidden_dim, a.latent_dim);
    push("enc.w1", &[d, f], Uniform(d));
    push("enc.w2_u", &[f, e], Uniform(f));
    push("enc.w2_sigma", &[f, e], Uniform(f));

    let ff = a.decoder_ff_mult * e;
    let cc = a.decoder_conv_channels;
    push("dec.ln1.g", &[e], Ones);
    push("dec.ln1.b", &[e], Zeros);
    for w in ["wq", "wk", "wv", "wo"] {
        push(&format!("dec.attn.{w}"), &[e, e], Uniform(e));
    }
    push("dec.attn.bo", &[e], Zeros);
    push("dec.ln2.g", &[e], Ones);
    push("dec.ln2.b", &[e], Zeros);
    push("dec.ff.w1", &[e, ff], Uniform(e));
    push("dec.ff.b1", &[ff], Zeros);
    push("dec.ff.w2", &[ff, e], Uniform(ff));
    push("dec.ff.b2", &[e], Zeros);
    push("dec.conv1.w", &[cc, 1, 3], Uniform(3));
    push("dec.conv1.b", &[cc], Zeros);
    push("dec.conv2.w", &[cc, cc, 3], Uniform(3 * cc));
    push("dec.conv2.b", &[cc], Zeros);
    push("dec.out.w", &[cc * e, d], Zeros);
    push("dec.out.b", &[d], Zeros);

    let c = a.noise_channels;
    let se = a.step_embed_dim;
    let cin = 4 + a.time_embed_dim;
    push("eps.in.w", &[cin, c], Uniform(cin));
    push("eps.in.b", &[c], Zeros);
    push("eps.step1.w", &[se, se], Uniform(se));
    push("eps.step1.b", &[se], Zeros);
    push("eps.step2.w", &[se, se], Uniform(se));
    push("eps.step2.b", &[se], Zeros);
    for k in 0..a.noise_blocks {
        let p = format!("eps.block{k}");
        push(&format!("{p}.step.w"), &[se, c], Uniform(se));
        push(&format!("{p}.step.b"), &[c], Zeros);
        for axis in ["time", "sensor"] {
            push(&format!("{p}.{axis}_ln.g"), &[c], Ones);
            push(&format!("{p}.{axis}_ln.b"), &[c], Zeros);
            for w in ["wq", "wk", "wv", "wo"] {
                push(&format!("{p}.{axis}_attn.{w}"), &[c, c], Uniform(c));
            }
            push(&format!("{p}.{axis}_attn.bo"), &[c], Zeros);
        }
        push(&format!("{p}.mid.w"), &[c, 2 * c], Uniform(c));
        push(&format!("{p}.mid.b"), &[2 * c], Zeros);
        push(&format!("{p}.out.w"), &[c, 2 * c], Uniform(c));
        push(&format!("{p}.out.b"), &[2 * c], Zeros);
    }
    push("eps.skip.w", &[c, c], Uniform(c));
    push("eps.skip.b", &[c], Zeros);
    push("eps.final.w", &[c, 1], Zeros);
    push("eps.final.b", &[1], Zeros);
    v
}

/// Fresh parameters: uniform `±1/√fan_in` weights, zero biases, unit
/// layer-norm gains, zero final projections.
pub fn init_params(arch: &ArchConfig, rng: &mut RngStream) -> Result<ParamSet> {
    arch.validate()?;
    let mut ps = ParamSet::new();
    for (path, shape, init) in param_specs(arch) {
        let value = match init {
            Init::Uniform(fan_in) => {
                let r = 1.0 / (fan_in as f64).sqrt();
                Array::from_fn(&shape, |_| (2.0 * rng.uniform() - 1.0) * r)
            }
            Init::Zeros => Array::zeros(&shape),
            Init::Ones => Array::ones(&shape),
        };
        ps.insert(path, value, true)?;
    }
    Ok(ps)
}

/// Replaces every zero-initialized weight with small random values so
/// gradient checks exercise all paths. Test and gradcheck use only.
pub fn randomize_zero_params(params: &mut ParamSet, arch: &ArchConfig, rng: &mut RngStream) -> Result<()> {
    for (path, _, init) in param_specs(arch) {
        if !matches!(init, Init::Uniform(_)) {
            for v in params.get_mut(&path)?.data_mut() {
                *v += 0.3 * (2.0 * rng.uniform() - 1.0);
            }
        }
    }
    Ok(())
}

/// Checks that every parameter the architecture needs is present with the
/// expected shape.
pub fn check_params(params: &ParamSet, arch: &ArchConfig) -> Result<()> {
    let specs = param_specs(arch);
    for (path, shape, _) in &specs {
        let found = params.get(path)?;
        if found.shape() != shape.as_slice() {
            return Err(Error::ManifestMismatch {
                field: path.clone(),
                found: format!("{:?}", found.shape()),
                expected: format!("{shape:?}"),
            });
        }
    }
    if params.len() != specs.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            specs.len(),
            params.len()
        )));
    }
    Ok(())
}

/// Fixed sinusoidal features: `len` rows of `dim` columns (sines then
/// cosines), with geometric frequencies.
pub(crate) fn sinusoid_table(positions: &[f64], dim: usize) -> Array {
    let half = dim / 2;
    let mut out = Array::zeros(&[positions.len(), dim]);
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = if half > 1 {
                10_000f64.powf(-(i as f64) / (half - 1) as f64)
            } else {
                1.0
            };
            out.set(&[r, i], (p * freq).sin());
            out.set(&[r, half + i], (p * freq).cos());
        }
    }
    out
}

/// Time-position features with periods between 2 steps and `4·len` steps.
pub(crate) fn time_table(len: usize, dim: usize) -> Array {
    let half = dim / 2;
    let mut out = Array::zeros(&[len, dim]);
    let (lo, hi) = (2.0f64, 4.0 * len as f64);
    for t in 0..len {
        for i in 0..half {
            let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
            let period = lo * (hi / lo).powf(frac);
            let ang = 2.0 * PI * t as f64 / period;
            out.set(&[t, i], ang.sin());
            out.set(&[t, half + i], ang.cos());
        }
    }
    out
}
