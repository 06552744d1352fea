//! Noise schedules and the flow-matching interpolation path.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward-process schedule `x_t = α_t x_0 + σ_t ε`.
pub trait NoiseSchedule {
    fn alpha(&self, t: f64) -> f64;
    fn sigma(&self, t: f64) -> f64;

    /// Derivatives of `α_t`, `σ_t`; the regression target is
    /// `α'_t x_0 + σ'_t ε`.
    fn alpha_dot(&self, t: f64) -> f64;
    fn sigma_dot(&self, t: f64) -> f64;
}

/// The linear path `α_t = 1 - t`, `σ_t = t`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlowMatching;

impl NoiseSchedule for FlowMatching {
    fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }
    fn sigma(&self, t: f64) -> f64 {
        t
    }
    fn alpha_dot(&self, _t: f64) -> f64 {
        -1.0
    }
    fn sigma_dot(&self, _t: f64) -> f64 {
        1.0
    }
}

/// Returns `(x_t, target_v)` with `x_t = (1-t) x0 + t ε` and
/// `target_v = ε - x0`.
pub fn flow_interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t must lie in [0, 1], got {t}")));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "flow_interpolate: x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let s = FlowMatching;
    let (a, b) = (s.alpha(t), s.sigma(t));
    let x_t = x0.scale(a).add(&eps.scale(b))?;
    let target = eps.sub(x0)?;
    Ok((x_t, target))
}
