use super::TimeSeriesWindow;
use crate::numerics::Array;

/// Fill value for a sensor with no observation in the window.
pub const ALL_MISSING_FILL: f64 = 0.5;

/// Per-sensor linear interpolation over time of every unobserved entry.
/// Edge gaps take the nearest observed value; observed entries pass
/// through unchanged.
pub fn linear_interpolate(w: &TimeSeriesWindow) -> Array {
    let (n, d) = (w.n_sensors(), w.n_steps());
    let mut out = w.observed_values();
    for s in 0..n {
        let obs: Vec<usize> = (0..d).filter(|&t| w.observed_mask.at(s, t) > 0.5).collect();
        let row = &mut out.data_mut()[s * d..(s + 1) * d];
        if obs.is_empty() {
            row.fill(ALL_MISSING_FILL);
            continue;
        }
        let (first, last) = (obs[0], *obs.last().unwrap());
        for t in 0..first {
            row[t] = row[first];
        }
        for t in last + 1..d {
            row[t] = row[last];
        }
        for pair in obs.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (va, vb) = (row[a], row[b]);
            for t in a + 1..b {
                let f = (t - a) as f64 / (b - a) as f64;
                row[t] = va + f * (vb - va);
            }
        }
    }
    out
}

/// Encoder input `M ⊙ X + (1 − M) ⊙ X̃` with `X̃` the interpolation.
pub fn merged_input(w: &TimeSeriesWindow) -> Array {
    // Observed entries already pass through the interpolation untouched.
    linear_interpolate(w)
}
