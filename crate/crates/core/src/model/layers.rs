use crate::error::Result;
use crate::numerics::{Bindings, Var};

pub(crate) fn param<'t>(b: &Bindings<'t>, prefix: &str, name: &str) -> Result<Var<'t>> {
    b.get(&format!("{prefix}.{name}"))
}

/// `L · H · W` for `H [B, N, F]`, `W [F, E]`, `L [N, N]` → `[B, N, E]`.
pub(crate) fn graph_conv<'t>(lap: Var<'t>, h: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let hw = h.linear(w)?;
    let s = hw.shape();
    let (bt, n, e) = (s[0], s[1], s[2]);
    let flat = hw.permute(&[1, 0, 2])?.reshape(&[n, bt * e])?;
    lap.matmul(flat)?.reshape(&[n, bt, e])?.permute(&[1, 0, 2])
}

pub(crate) fn dense<'t>(b: &Bindings<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.linear(param(b, prefix, "w")?)?.add_bias(param(b, prefix, "b")?)
}

pub(crate) fn layer_norm<'t>(b: &Bindings<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.layer_norm(1e-5)
        .scale_last(param(b, prefix, "g")?)?
        .add_bias(param(b, prefix, "b")?)
}

/// Multi-head self-attention over axis 1 of `x [B, S, C]`.
pub(crate) fn attention<'t>(b: &Bindings<'t>, prefix: &str, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (bt, len, c) = (s[0], s[1], s[2]);
    let dh = c / heads;
    let split = |v: Var<'t>| -> Result<Var<'t>> {
        if heads == 1 {
            return Ok(v);
        }
        v.reshape(&[bt, len, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bt * heads, len, dh])
    };
    let q = split(x.linear(param(b, prefix, "wq")?)?)?;
    let k = split(x.linear(param(b, prefix, "wk")?)?)?;
    let v = split(x.linear(param(b, prefix, "wv")?)?)?;
    let att = q.bmm_nt(k)?.scale(1.0 / (dh as f64).sqrt()).softmax();
    let mut o = att.bmm(v)?;
    if heads > 1 {
        o = o
            .reshape(&[bt, heads, len, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bt, len, c])?;
    }
    o.linear(param(b, prefix, "wo")?)?.add_bias(param(b, prefix, "bo")?)
}

/// Lifts a 2-D `[N, X]` input to `[1, N, X]`; returns whether it did.
pub(crate) fn batched<'t>(x: Var<'t>) -> Result<(Var<'t>, bool)> {
    let s = x.shape();
    if s.len() == 2 {
        Ok((x.reshape(&[1, s[0], s[1]])?, true))
    } else {
        Ok((x, false))
    }
}
