use super::layers::{attention, batched, dense, layer_norm, param};
use super::{sinusoid_table, ArchConfig};
use crate::error::{Error, Result};
use crate::numerics::{Array, Bindings, ParamSet, Tape, Var};

/// Decoder on the tape: `z [B, N, E]` → `[B, N, D]`.
///
/// One pre-norm transformer block attends across sensors, then two
/// same-padded convolutions run along each sensor's latent vector, and a
/// linear map takes the flattened channels to `D` steps.
pub fn decode_vars<'t>(b: &Bindings<'t>, arch: &ArchConfig, z: Var<'t>) -> Result<Var<'t>> {
    let s = z.shape();
    if s.len() != 3 || s[2] != arch.latent_dim {
        return Err(Error::mismatch("decode", &s, &[0, 0, arch.latent_dim]));
    }
    let (bt, n, e) = (s[0], s[1], s[2]);
    let mut x = z;
    if arch.positional_encoding {
        let pos: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let pe = sinusoid_table(&pos, e);
        let tiled = Array::from_fn(&[bt, n, e], |k| pe.data()[k % (n * e)]);
        x = x.add(x.tape().constant(tiled))?;
    }
    let a = attention(b, "dec.attn", layer_norm(b, "dec.ln1", x)?, arch.decoder_heads)?;
    let x = x.add(a)?;
    let f = layer_norm(b, "dec.ln2", x)?
        .linear(param(b, "dec.ff", "w1")?)?
        .add_bias(param(b, "dec.ff", "b1")?)?;
    let f = f
        .relu()
        .linear(param(b, "dec.ff", "w2")?)?
        .add_bias(param(b, "dec.ff", "b2")?)?;
    let x = x.add(f)?;
    let cc = arch.decoder_conv_channels;
    let c = x
        .reshape(&[bt * n, 1, e])?
        .conv1d(param(b, "dec.conv1", "w")?, param(b, "dec.conv1", "b")?)?
        .relu()
        .conv1d(param(b, "dec.conv2", "w")?, param(b, "dec.conv2", "b")?)?;
    dense(b, "dec.out", c.reshape(&[bt, n, cc * e])?)
}

/// Decodes a latent sample `[N, E]` (or a batch `[B, N, E]`) to `[N, D]`.
pub fn decode(z: &Array, params: &ParamSet, arch: &ArchConfig) -> Result<Array> {
    let tape = Tape::new();
    let b = Bindings::new(&tape, params);
    let (x, lifted) = batched(tape.constant(z.clone()))?;
    let out = (*decode_vars(&b, arch, x)?.value()).clone();
    if lifted {
        out.reshape(&out.shape()[1..])
    } else {
        Ok(out)
    }
}
