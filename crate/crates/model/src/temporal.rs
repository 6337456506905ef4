//! Parameter-free sinusoidal encoding of inter-event times.

use evstream_core::Scalar;

use crate::tensor::Tensor;
use crate::ModelError;

/// Ten years of minutes, the longest encoded period.
pub const MAX_PERIOD_MINUTES: f64 = 10.0 * 525_960.0;

/// Periods, in `log1p(minutes)` space, of the `d / 2` bands: geometric from
/// one minute to ten years.
pub fn periods(d: usize) -> Vec<f64> {
    let bands = d / 2;
    let lo = 1f64.ln_1p();
    let hi = MAX_PERIOD_MINUTES.ln_1p();
    (0..bands)
        .map(|k| {
            if bands == 1 {
                hi
            } else {
                lo * (hi / lo).powf(k as f64 / (bands - 1) as f64)
            }
        })
        .collect()
}

/// Encodes each delta as `[sin(2π·x/P_k) ..., cos(2π·x/P_k) ...]` with
/// `x = log1p(delta)`.
pub fn temporal_encode<T: Scalar>(deltas: &[f64], d: usize) -> Result<Tensor<T>, ModelError> {
    let p = periods(d);
    let half = d / 2;
    let mut out = Tensor::zeros(deltas.len(), d);
    for (i, &delta) in deltas.iter().enumerate() {
        if !(delta >= 0.0) {
            return Err(ModelError::NegativeDelta(delta));
        }
        let x = delta.ln_1p();
        let row = out.row_mut(i);
        for (k, pk) in p.iter().enumerate() {
            let phase = std::f64::consts::TAU * x / pk;
            row[k] = T::of(phase.sin());
            row[half + k] = T::of(phase.cos());
        }
    }
    Ok(out)
}
