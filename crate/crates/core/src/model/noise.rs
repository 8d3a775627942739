use std::rc::Rc;

use super::layers::{attention, batched, dense, layer_norm};
use super::{sinusoid_table, time_table, ArchConfig};
use crate::error::{Error, Result};
use crate::numerics::{Array, Bindings, ParamSet, Tape, Var};

/// Denoiser inputs, each `[B, N, D]`. `mask` is the observed mask.
#[derive(Clone, Copy)]
pub struct NoiseInputs<'a, 't> {
    pub x_t: Var<'t>,
    pub x_co: Var<'t>,
    pub x_bar: Var<'t>,
    pub mask: &'a Array,
}

/// Sinusoidal embedding of diffusion step indices, `[B, dim]`.
pub fn step_embedding(t: &[usize], dim: usize) -> Array {
    let pos: Vec<f64> = t.iter().map(|&s| s as f64).collect();
    sinusoid_table(&pos, dim)
}

/// Noise predictor on the tape. `t` holds one step index in `1..=n_diffusion`
/// per batch element.
pub fn noise_vars<'t>(
    b: &Bindings<'t>,
    arch: &ArchConfig,
    inp: NoiseInputs<'_, 't>,
    t: &[usize],
    n_diffusion: usize,
) -> Result<Var<'t>> {
    let s = inp.x_t.shape();
    if s.len() != 3 {
        return Err(Error::Contract(format!("noise input must be [B, N, D], found {s:?}")));
    }
    let (bt, n, d) = (s[0], s[1], s[2]);
    for v in [inp.x_co, inp.x_bar] {
        if v.shape() != s {
            return Err(Error::mismatch("noise_predict", &s, &v.shape()));
        }
    }
    if inp.mask.shape() != s.as_slice() {
        return Err(Error::mismatch("noise_predict mask", &s, inp.mask.shape()));
    }
    if t.len() != bt {
        return Err(Error::Contract(format!("{} step indices for batch of {bt}", t.len())));
    }
    if let Some(bad) = t.iter().find(|&&k| k == 0 || k > n_diffusion) {
        return Err(Error::Contract(format!("step {bad} outside 1..={n_diffusion}")));
    }
    let tape = inp.x_t.tape();
    let c = arch.noise_channels;
    let tokens = bt * n * d;
    let missing = inp.mask.map(|m| 1.0 - m);
    let chan = |v: Var<'t>| v.reshape(&[bt, n, d, 1]);
    let mut parts = vec![
        chan(inp.x_t.mul_const(&missing)?)?,
        chan(inp.x_co)?,
        chan(inp.x_bar)?,
        chan(tape.constant(inp.mask.clone()))?,
    ];
    if arch.time_embed_dim > 0 {
        let p = arch.time_embed_dim;
        let tab = time_table(d, p);
        let tiled = Array::from_fn(&[bt, n, d, p], |k| tab.data()[k % (d * p)]);
        parts.push(tape.constant(tiled));
    }
    let mut h = dense(b, "eps.in", Var::concat_last(&parts)?)?.relu();

    let emb = tape.constant(step_embedding(t, arch.step_embed_dim));
    let emb = dense(b, "eps.step1", emb)?.relu();
    let emb = dense(b, "eps.step2", emb)?.relu();
    let owner = Rc::new((0..tokens).map(|r| r / (n * d)).collect::<Vec<_>>());

    let mut skip: Option<Var<'t>> = None;
    let heads = arch.noise_heads;
    for k in 0..arch.noise_blocks {
        let p = format!("eps.block{k}");
        let eb = dense(b, &format!("{p}.step"), emb)?.gather_rows(owner.clone())?;
        let y = h.add(eb.reshape(&[bt, n, d, c])?)?;

        let yt = y.reshape(&[bt * n, d, c])?;
        let yt = yt.add(attention(
            b,
            &format!("{p}.time_attn"),
            layer_norm(b, &format!("{p}.time_ln"), yt)?,
            heads,
        )?)?;

        let ys = yt
            .reshape(&[bt, n, d, c])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bt * d, n, c])?;
        let ys = ys.add(attention(
            b,
            &format!("{p}.sensor_attn"),
            layer_norm(b, &format!("{p}.sensor_ln"), ys)?,
            heads,
        )?)?;
        let y = ys.reshape(&[bt, d, n, c])?.permute(&[0, 2, 1, 3])?;

        let z = dense(b, &format!("{p}.mid"), y)?;
        let gated = z.slice_last(0, c)?.sigmoid().mul(z.slice_last(c, c)?.tanh())?;
        let o = dense(b, &format!("{p}.out"), gated)?;
        h = h.add(o.slice_last(0, c)?)?.scale(std::f64::consts::FRAC_1_SQRT_2);
        let sk = o.slice_last(c, c)?;
        skip = Some(match skip {
            Some(acc) => acc.add(sk)?,
            None => sk,
        });
    }
    let skip = skip
        .expect("at least one block")
        .scale(1.0 / (arch.noise_blocks as f64).sqrt());
    let out = dense(b, "eps.final", dense(b, "eps.skip", skip)?.relu())?;
    out.reshape(&[bt, n, d])
}

/// Predicted noise for one window `[N, D]` (or a batch `[B, N, D]` with a
/// step index per element).
#[allow(clippy::too_many_arguments)]
pub fn noise_predict(
    x_t: &Array,
    x_co: &Array,
    x_bar: &Array,
    mask: &Array,
    t: &[usize],
    n_diffusion: usize,
    params: &ParamSet,
    arch: &ArchConfig,
) -> Result<Array> {
    let tape = Tape::new();
    let b = Bindings::new(&tape, params);
    let lift = |a: &Array| batched(tape.constant(a.clone()));
    let (xt, lifted) = lift(x_t)?;
    let (xc, _) = lift(x_co)?;
    let (xb, _) = lift(x_bar)?;
    let m = if lifted {
        mask.reshape(&[&[1], mask.shape()].concat())?
    } else {
        mask.clone()
    };
    let inp = NoiseInputs {
        x_t: xt,
        x_co: xc,
        x_bar: xb,
        mask: &m,
    };
    let out = (*noise_vars(&b, arch, inp, t, n_diffusion)?.value()).clone();
    if lifted {
        out.reshape(&out.shape()[1..])
    } else {
        Ok(out)
    }
}
