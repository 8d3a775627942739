use crate::data::TimeSeriesWindow;
use crate::diffusion::{build_schedule, ScheduleKind};
use crate::error::Result;
use crate::graph::build_laplacian;
use crate::model::{
    decode_vars, encode_vars, init_params, noise_vars, randomize_zero_params, reparameterize_var, ArchConfig, HeadMode,
    NoiseInputs, DECODER_PREFIX, DENOISER_PREFIX, ENCODER_PREFIX,
};
use crate::numerics::{
    gauss_sample, grad_backprop, grad_fd, max_rel_error, Array, Bindings, Gradients, ParamSet, RngStream, Tape, Var,
};
use crate::train::{diffusion_term, vae_terms, Batch};

pub const GRADCHECK_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

/// Instance size: sensors, steps, latent width, diffusion steps.
pub const SIZE: (usize, usize, usize, usize) = (4, 8, 4, 5);

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub component: String,
    pub n_params: usize,
    /// `Err` carries the message of a numeric failure.
    pub max_rel_error: std::result::Result<f64, String>,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        matches!(self.max_rel_error, Ok(e) if e < GRADCHECK_TOL)
    }
}

pub fn gradcheck_arch(head_mode: HeadMode) -> ArchConfig {
    let (n, d, e, _) = SIZE;
    ArchConfig {
        n_sensors: n,
        n_steps: d,
        latent_dim: e,
        hidden_dim: 6,
        head_mode,
        decoder_heads: 2,
        decoder_ff_mult: 2,
        decoder_conv_channels: 2,
        noise_channels: 4,
        noise_blocks: 2,
        noise_heads: 2,
        step_embed_dim: 8,
        time_embed_dim: 4,
        ..ArchConfig::default()
    }
}

fn compare<F>(ps: &ParamSet, corrupt: bool, f: F) -> std::result::Result<f64, String>
where
    F: for<'t> Fn(&'t Tape, &Bindings<'t>) -> Result<Var<'t>> + Copy,
{
    let run = || -> Result<f64> {
        let (_, mut analytic) = grad_backprop(ps, f)?;
        if corrupt {
            corrupt_grads(&mut analytic);
        }
        let numeric = grad_fd(ps, FD_STEP, f)?;
        Ok(max_rel_error(&analytic, &numeric))
    };
    run().map_err(|e| e.to_string())
}

/// Negative control: perturbs the first entry of every gradient by 1%.
fn corrupt_grads(g: &mut Gradients) {
    for a in g.values_mut() {
        if let Some(v) = a.data_mut().first_mut() {
            *v += 0.01 * v.abs().max(1.0);
        }
    }
}

fn ring_laplacian(n: usize) -> Result<Array> {
    let adj = Array::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        if (i + 1) % n == j || (j + 1) % n == i {
            1.0
        } else {
            0.0
        }
    });
    Ok(build_laplacian(&adj)?.laplacian)
}

fn windows(rng: &mut RngStream, count: usize) -> Result<Vec<TimeSeriesWindow>> {
    let (n, d, _, _) = SIZE;
    (0..count)
        .map(|_| {
            let m = Array::from_fn(&[n, d], |_| if rng.uniform() < 0.75 { 1.0 } else { 0.0 });
            let v = Array::from_fn(&[n, d], |_| rng.uniform()).mul(&m)?;
            TimeSeriesWindow::new(v, m, "gradcheck")
        })
        .collect()
}

fn random_params(arch: &ArchConfig, rng: &mut RngStream) -> Result<ParamSet> {
    let mut ps = init_params(arch, rng)?;
    randomize_zero_params(&mut ps, arch, rng)?;
    Ok(ps)
}

/// Analytic against central-difference gradients for every network and
/// both objectives on a small random instance.
pub fn gradcheck(seed: u64, corrupt: bool) -> Result<Vec<GradRow>> {
    let (n, d, e, steps) = SIZE;
    let bt = 2;
    let mut rng = RngStream::new(seed);
    let lap = ring_laplacian(n)?;
    let ws = windows(&mut rng, bt)?;
    let refs: Vec<&TimeSeriesWindow> = ws.iter().collect();
    let batch = Batch::new(&refs)?.expect("windows have observations");
    let mut rows = Vec::new();
    let mut row = |name: &str, ps: &ParamSet, err| {
        rows.push(GradRow {
            component: name.to_string(),
            n_params: ps.scalar_count(),
            max_rel_error: err,
        })
    };

    for mode in [HeadMode::Faithful, HeadMode::LinearHeads] {
        let arch = gradcheck_arch(mode);
        let enc = random_params(&arch, &mut rng)?.subset(ENCODER_PREFIX);
        let (rm, rv) = (
            gauss_sample(&mut rng, &[bt, n, e])?,
            gauss_sample(&mut rng, &[bt, n, e])?,
        );
        let err = compare(&enc, corrupt, |t, b| {
            let (m, lv) = encode_vars(b, t.constant(lap.clone()), t.constant(batch.x_in.clone()), mode)?;
            m.mul_const(&rm)?.sum()?.add(lv.mul_const(&rv)?.sum()?)
        });
        let name = match mode {
            HeadMode::Faithful => "encoder (faithful heads)",
            HeadMode::LinearHeads => "encoder (linear heads)",
        };
        row(name, &enc, err);
    }

    let arch = gradcheck_arch(HeadMode::LinearHeads);
    let all = random_params(&arch, &mut rng)?;

    let dec = all.subset(DECODER_PREFIX);
    let z = gauss_sample(&mut rng, &[bt, n, e])?;
    let r = gauss_sample(&mut rng, &[bt, n, d])?;
    let err = compare(&dec, corrupt, |t, b| {
        decode_vars(b, &arch, t.constant(z.clone()))?.mul_const(&r)?.sum()
    });
    row("decoder", &dec, err);

    let theta = all.subset(DENOISER_PREFIX);
    let (xt, xb) = (
        gauss_sample(&mut rng, &[bt, n, d])?,
        gauss_sample(&mut rng, &[bt, n, d])?,
    );
    let ts: Vec<usize> = (0..bt).map(|_| rng.int_inclusive(1, steps)).collect();
    let err = compare(&theta, corrupt, |t, b| {
        let inp = NoiseInputs {
            x_t: t.constant(xt.clone()),
            x_co: t.constant(batch.x_co.clone()),
            x_bar: t.constant(xb.clone()),
            mask: &batch.mask,
        };
        noise_vars(b, &arch, inp, &ts, steps)?.mul_const(&r)?.sum()
    });
    row("noise predictor", &theta, err);

    let mut vae = all.subset(ENCODER_PREFIX);
    vae.merge(dec.clone())?;
    let eps_lat = gauss_sample(&mut rng, &[bt, n, e])?;
    let err = compare(&vae, corrupt, |_, b| {
        Ok(vae_terms(b, &arch, &lap, &batch, &eps_lat, 1.0)?.l1)
    });
    row("vae objective", &vae, err);

    let arch_f = gradcheck_arch(HeadMode::Faithful);
    let err = compare(&vae, corrupt, |t, b| {
        let (m, lv) = encode_vars(
            b,
            t.constant(lap.clone()),
            t.constant(batch.x_in.clone()),
            HeadMode::Faithful,
        )?;
        let zv = reparameterize_var(m, lv, &eps_lat)?;
        decode_vars(b, &arch_f, zv)?.mul_const(&r)?.sum()
    });
    row("encoder + decoder (faithful heads)", &vae, err);

    let sched = build_schedule(steps, 1e-3, 0.3, ScheduleKind::Quadratic)?;
    let eps = gauss_sample(&mut rng, &[bt, n, d])?;
    let err = compare(&theta, corrupt, |t, b| {
        diffusion_term(b, &arch, &batch, t.constant(xb.clone()), &ts, &eps, &sched)
    });
    row("denoising objective", &theta, err);

    Ok(rows)
}

pub fn format_table(rows: &[GradRow]) -> String {
    let mut out = format!("{:<36} {:>8} {:>14}  status\n", "component", "params", "max rel err");
    for r in rows {
        let err = match &r.max_rel_error {
            Ok(e) => format!("{e:.3e}"),
            Err(m) => format!("error: {m}"),
        };
        let status = if r.passed() { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "{:<36} {:>8} {:>14}  {status}\n",
            r.component, r.n_params, err
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_instance_passes_and_corruption_fails() {
        let rows = gradcheck(3, false).unwrap();
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().all(|r| r.passed()), "{}", format_table(&rows));
        let bad = gradcheck(3, true).unwrap();
        assert!(bad.iter().all(|r| !r.passed()), "{}", format_table(&bad));
    }
}
