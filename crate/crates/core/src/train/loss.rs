use crate::data::{merged_input, TimeSeriesWindow};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{decode_vars, encode_vars, noise_vars, reparameterize_var, ArchConfig, LatentGaussian, NoiseInputs};
use crate::numerics::{eval_loss, gauss_sample, Array, Bindings, ParamSet, RngStream, Tape, Var};

/// `KL(N(mean, diag(exp(log_var))) ‖ N(0, I))`, summed over all entries.
///
/// The closed form `½ Σ (exp(log_var) + mean² − 1 − log_var)` is used. The
/// printed objective this model comes from writes the term as
/// `−½(tr(Σ) + uᵀu log det(Σ))`, which is not a KL divergence.
pub fn kl_diag_gauss(lat: &LatentGaussian) -> Result<f64> {
    let terms = lat
        .log_var
        .zip_map(&lat.mean, "kl_diag_gauss", |lv, m| lv.exp() + m * m - 1.0 - lv)?;
    Ok(0.5 * terms.sum())
}

pub fn kl_var<'t>(mean: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    Ok(log_var
        .exp()
        .add(mean.square()?)?
        .sub(log_var)?
        .add_scalar(-1.0)
        .sum()?
        .scale(0.5))
}

/// Windows stacked to `[B, N, D]` with per-window loss weights baked in.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x_in: Array,
    pub x_co: Array,
    pub mask: Array,
    /// `M / (observed count · B)`.
    pub recon_w: Array,
    /// `(1 − M) / (missing count · B)`, zero for windows with no missing
    /// entries.
    pub miss_w: Array,
}

impl Batch {
    /// Drops windows with no observed entries (with a warning); `None` if
    /// nothing is left.
    pub fn new(windows: &[&TimeSeriesWindow]) -> Result<Option<Batch>> {
        let kept: Vec<&TimeSeriesWindow> = windows
            .iter()
            .copied()
            .filter(|w| {
                let keep = w.observed_count() > 0;
                if !keep {
                    log::warn!("skipping a window with no observed entries");
                }
                keep
            })
            .collect();
        let Some(first) = kept.first() else {
            return Ok(None);
        };
        let (n, d) = (first.n_sensors(), first.n_steps());
        let bt = kept.len();
        let mut x_in = Vec::with_capacity(bt * n * d);
        let mut x_co = Vec::with_capacity(bt * n * d);
        let mut mask = Vec::with_capacity(bt * n * d);
        let mut recon_w = Vec::with_capacity(bt * n * d);
        let mut miss_w = Vec::with_capacity(bt * n * d);
        for w in &kept {
            if w.n_sensors() != n || w.n_steps() != d {
                return Err(Error::mismatch("batch", &[n, d], w.values.shape()));
            }
            x_in.extend_from_slice(merged_input(w).data());
            x_co.extend_from_slice(w.observed_values().data());
            mask.extend_from_slice(w.observed_mask.data());
            let obs = (w.observed_count() * bt) as f64;
            let miss = w.missing_count();
            for &m in w.observed_mask.data() {
                recon_w.push(m / obs);
                miss_w.push(if miss == 0 { 0.0 } else { (1.0 - m) / (miss * bt) as f64 });
            }
        }
        let shape = [bt, n, d];
        Ok(Some(Batch {
            x_in: Array::new(&shape, x_in)?,
            x_co: Array::new(&shape, x_co)?,
            mask: Array::new(&shape, mask)?,
            recon_w: Array::new(&shape, recon_w)?,
            miss_w: Array::new(&shape, miss_w)?,
        }))
    }

    pub fn len(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.mask.shape();
        [s[0], s[1], s[2]]
    }
}

/// Tape nodes of the VGAE objective for one batch.
#[derive(Clone, Copy)]
pub struct VaeTerms<'t> {
    pub l1: Var<'t>,
    pub recon: Var<'t>,
    /// KL averaged over windows and latent entries, before `kl_weight`.
    pub kl: Var<'t>,
    pub x_bar: Var<'t>,
}

/// Masked reconstruction error of the observed entries plus the weighted
/// KL term, with the latent noise `eps_lat [B, N, E]` frozen.
pub fn vae_terms<'t>(
    b: &Bindings<'t>,
    arch: &ArchConfig,
    lap: &Array,
    batch: &Batch,
    eps_lat: &Array,
    kl_weight: f64,
) -> Result<VaeTerms<'t>> {
    let tape = b.get("enc.w1")?.tape();
    let [bt, n, _] = batch.shape();
    let (mean, log_var) = encode_vars(
        b,
        tape.constant(lap.clone()),
        tape.constant(batch.x_in.clone()),
        arch.head_mode,
    )?;
    let z = reparameterize_var(mean, log_var, eps_lat)?;
    let x_bar = decode_vars(b, arch, z)?;
    let recon = x_bar
        .sub(tape.constant(batch.x_co.clone()))?
        .square()?
        .mul_const(&batch.recon_w)?
        .sum()?;
    let kl = kl_var(mean, log_var)?.scale(1.0 / (n * arch.latent_dim * bt) as f64);
    let l1 = recon.add(kl.scale(kl_weight))?;
    Ok(VaeTerms { l1, recon, kl, x_bar })
}

/// Noise-prediction error over the non-observed entries, with step indices
/// `t` (one per window) and noise `eps [B, N, D]` frozen.
pub fn diffusion_term<'t>(
    b: &Bindings<'t>,
    arch: &ArchConfig,
    batch: &Batch,
    x_bar: Var<'t>,
    t: &[usize],
    eps: &Array,
    s: &NoiseSchedule,
) -> Result<Var<'t>> {
    let tape = x_bar.tape();
    let [bt, n, d] = batch.shape();
    if t.len() != bt {
        return Err(Error::Contract(format!("{} step indices for batch of {bt}", t.len())));
    }
    let per = n * d;
    let m = batch.mask.data();
    let signal = Array::from_fn(&[bt, n, d], |k| s.alpha_bar(t[k / per]).sqrt() * (1.0 - m[k]));
    let noise = Array::from_fn(&[bt, n, d], |k| (1.0 - s.alpha_bar(t[k / per])).sqrt() * eps.data()[k]);
    let missing = batch.mask.map(|v| 1.0 - v);
    let x_t = x_bar.mul_const(&signal)?.add(tape.constant(noise))?;
    let inp = NoiseInputs {
        x_t,
        x_co: tape.constant(batch.x_co.clone()),
        x_bar: x_bar.mul_const(&missing)?,
        mask: &batch.mask,
    };
    let eps_hat = noise_vars(b, arch, inp, t, s.steps())?;
    eps_hat
        .sub(tape.constant(eps.clone()))?
        .square()?
        .mul_const(&batch.miss_w)?
        .sum()
}

/// VGAE objective of one window with one fresh latent draw. Returns the
/// loss and the reconstruction `[N, D]`, or `None` for a window with no
/// observed entries.
pub fn loss_vae(
    w: &TimeSeriesWindow,
    lap: &Array,
    params: &ParamSet,
    arch: &ArchConfig,
    kl_weight: f64,
    rng: &mut RngStream,
) -> Result<Option<(f64, Array)>> {
    let Some(batch) = Batch::new(&[w])? else {
        return Ok(None);
    };
    let eps = gauss_sample(rng, &[1, w.n_sensors(), arch.latent_dim])?;
    let tape = Tape::new();
    let b = Bindings::new(&tape, params);
    let terms = vae_terms(&b, arch, lap, &batch, &eps, kl_weight)?;
    let x_bar = (*terms.x_bar.value()).clone();
    Ok(Some((terms.l1.value().item()?, x_bar.reshape(w.values.shape())?)))
}

/// Denoising objective of one window at a uniformly drawn step. Zero for a
/// window with no missing entries.
pub fn loss_diffusion(
    w: &TimeSeriesWindow,
    x_bar_0: &Array,
    params: &ParamSet,
    arch: &ArchConfig,
    s: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<f64> {
    let t = rng.int_inclusive(1, s.steps());
    let eps = gauss_sample(rng, &[1, w.n_sensors(), w.n_steps()])?;
    let Some(batch) = Batch::new(&[w])? else {
        return Ok(0.0);
    };
    let x_bar = x_bar_0.reshape(&[1, w.n_sensors(), w.n_steps()])?;
    eval_loss(params, |tape, b| {
        diffusion_term(b, arch, &batch, tape.constant(x_bar.clone()), &[t], &eps, s)
    })
}
