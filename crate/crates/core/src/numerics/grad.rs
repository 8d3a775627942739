//! Gradient entry points over a [`ParamSet`]: analytic reverse mode and a
//! central-difference oracle used to check it.

use std::collections::BTreeMap;

use super::{Array, Gradients, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Parameters of a [`ParamSet`] bound as leaves on one tape.
pub struct Bindings<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bindings<'t> {
    pub fn new(tape: &'t Tape, params: &ParamSet) -> Self {
        let vars = params
            .iter()
            .map(|(path, p)| (path.clone(), tape.named_leaf(path, p.value.clone(), p.trainable)))
            .collect();
        Self { vars }
    }

    pub fn get(&self, path: &str) -> Result<Var<'t>> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }
}

/// Evaluates `loss_fn` once without differentiating.
pub fn eval_loss<F>(params: &ParamSet, loss_fn: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &Bindings<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let b = Bindings::new(&tape, params);
    let loss = loss_fn(&tape, &b)?;
    let v = loss.value();
    let x = v.item()?;
    if !x.is_finite() {
        return Err(Error::NonFinite {
            location: "loss".into(),
        });
    }
    Ok(x)
}

/// Reverse-mode gradient of a scalar loss. Non-trainable entries receive
/// no gradient; trainable entries the loss does not touch get zeros.
pub fn grad_backprop<F>(params: &ParamSet, loss_fn: F) -> Result<(f64, Gradients)>
where
    F: for<'t> FnOnce(&'t Tape, &Bindings<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let b = Bindings::new(&tape, params);
    let loss = loss_fn(&tape, &b)?;
    let value = loss.value().item()?;
    let mut tg = tape.backward(loss)?;
    let mut out = Gradients::new();
    for (path, v) in b.iter() {
        let p = params.param(path).expect("bound from params");
        if !p.trainable {
            continue;
        }
        let g = tg.take(v.id()).unwrap_or_else(|| Array::zeros(p.value.shape()));
        out.insert(path.clone(), g);
    }
    Ok((value, out))
}

/// Central differences `(f(p+h) − f(p−h)) / 2h` for every trainable scalar.
///
/// `loss_fn` must be deterministic: freeze any random draws outside it.
/// Results are unreliable at kinks of non-smooth functions.
pub fn grad_fd<F>(params: &ParamSet, step: f64, loss_fn: F) -> Result<Gradients>
where
    F: for<'t> Fn(&'t Tape, &Bindings<'t>) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut work = params.clone();
    let mut out = Gradients::new();
    let paths: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(k, _)| k.clone())
        .collect();
    for path in paths {
        let n = work.get(&path)?.len();
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = work.get(&path)?.data()[i];
            work.get_mut(&path)?.data_mut()[i] = orig + step;
            let fp = eval_loss(&work, &loss_fn);
            work.get_mut(&path)?.data_mut()[i] = orig - step;
            let fm = eval_loss(&work, &loss_fn);
            work.get_mut(&path)?.data_mut()[i] = orig;
            let (fp, fm) = match (fp, fm) {
                (Ok(a), Ok(b)) => (a, b),
                _ => {
                    return Err(Error::NonFinite {
                        location: format!("finite-difference probe of `{path}`[{i}]"),
                    })
                }
            };
            g.push((fp - fm) / (2.0 * step));
        }
        out.insert(path.clone(), Array::new(params.get(&path)?.shape(), g)?);
    }
    Ok(out)
}

/// Magnitudes below this are treated as equal to it when forming the
/// relative error, so near-zero gradients compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `max |a − b| / max(|a|, |b|, REL_ERR_FLOOR)` over every shared entry.
/// A path present in only one map counts as an infinite error.
pub fn max_rel_error(a: &Gradients, b: &Gradients) -> f64 {
    let mut worst: f64 = 0.0;
    for (path, ga) in a {
        let Some(gb) = b.get(path) else {
            return f64::INFINITY;
        };
        if ga.shape() != gb.shape() {
            return f64::INFINITY;
        }
        for (x, y) in ga.data().iter().zip(gb.data()) {
            let denom = x.abs().max(y.abs()).max(REL_ERR_FLOOR);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    if b.keys().any(|k| !a.contains_key(k)) {
        return f64::INFINITY;
    }
    worst
}
