use super::layers::{batched, graph_conv};
use super::{ArchConfig, HeadMode, LatentGaussian};
use crate::error::{Error, Result};
use crate::numerics::{Array, Bindings, ParamSet, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

/// One graph convolution `act(L · H · W)` on plain arrays.
pub fn gcn_layer(lap: &Array, h: &Array, w: &Array, act: Activation) -> Result<Array> {
    let out = lap.matmul(&h.matmul(w)?)?;
    Ok(match act {
        Activation::Relu => out.map(|v| v.max(0.0)),
        Activation::Sigmoid => out.map(crate::numerics::sigmoid),
        Activation::None => out,
    })
}

/// Encoder on the tape. `x [B, N, D]` → `(mean, log_var)`, each `[B, N, E]`.
/// The hidden layer is computed once and feeds both heads.
pub fn encode_vars<'t>(b: &Bindings<'t>, lap: Var<'t>, x: Var<'t>, mode: HeadMode) -> Result<(Var<'t>, Var<'t>)> {
    let hidden = graph_conv(lap, x, b.get("enc.w1")?)?.relu();
    let mean = graph_conv(lap, hidden, b.get("enc.w2_u")?)?;
    let log_var = graph_conv(lap, hidden, b.get("enc.w2_sigma")?)?;
    Ok(match mode {
        HeadMode::Faithful => (mean.sigmoid(), log_var.sigmoid()),
        HeadMode::LinearHeads => (mean, log_var),
    })
}

/// Encodes a mask-merged input `[N, D]` (or a batch `[B, N, D]`).
pub fn encode(x_in: &Array, lap: &Array, params: &ParamSet, arch: &ArchConfig) -> Result<LatentGaussian> {
    let tape = Tape::new();
    let b = Bindings::new(&tape, params);
    let (x, lifted) = batched(tape.constant(x_in.clone()))?;
    let (m, lv) = encode_vars(&b, tape.constant(lap.clone()), x, arch.head_mode)?;
    let unlift = |v: Var<'_>| -> Result<Array> {
        let a = (*v.value()).clone();
        if lifted {
            a.reshape(&a.shape()[1..])
        } else {
            Ok(a)
        }
    };
    Ok(LatentGaussian {
        mean: unlift(m)?,
        log_var: unlift(lv)?,
    })
}

/// `mean + exp(½·log_var) ⊙ eps`.
pub fn reparameterize(lat: &LatentGaussian, eps: &Array) -> Result<Array> {
    if lat.mean.shape() != eps.shape() || lat.log_var.shape() != eps.shape() {
        return Err(Error::mismatch("reparameterize", lat.mean.shape(), eps.shape()));
    }
    let sd = lat.log_var.map(|v| (0.5 * v).exp());
    lat.mean.add(&sd.mul(eps)?)
}

pub fn reparameterize_var<'t>(mean: Var<'t>, log_var: Var<'t>, eps: &Array) -> Result<Var<'t>> {
    log_var.scale(0.5).exp().mul_const(eps)?.add(mean)
}
