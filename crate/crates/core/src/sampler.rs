//! Guided Euler integration of the learned velocity field from noise (`t = 1`)
//! to data (`t = 0`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::PerturbSpec;
use crate::dit::{forward_routed, Cond, DitWeights, Perturbation};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Pixel range kept when a sample is exported as an image.
pub const EXPORT_CLAMP: f64 = 3.0;

/// What the perturbation term extrapolates away from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PertAnchor {
    /// `v_cond + w_cfg (v_cond - v_uncond) + w_pert (v_cond - v_pert)`.
    #[default]
    Cond,
    /// Apply CFG first, then extrapolate the CFG velocity away from `v_pert`.
    Cfg,
}

impl fmt::Display for PertAnchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PertAnchor::Cond => "cond",
            PertAnchor::Cfg => "cfg",
        })
    }
}

impl FromStr for PertAnchor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cond" => Ok(PertAnchor::Cond),
            "cfg" => Ok(PertAnchor::Cfg),
            _ => Err(Error::InvalidArgument(format!("unknown perturbation anchor `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub w_cfg: f64,
    pub w_pert: f64,
    pub cond: Cond,
    pub steps: usize,
    pub seed: u64,
    pub pert_anchor: PertAnchor,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w_cfg: 0.0,
            w_pert: 3.0,
            cond: None,
            steps: 20,
            seed: 0,
            pert_anchor: PertAnchor::Cond,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_cfg", self.w_cfg), ("w_pert", self.w_pert)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Same config with guidance switched off.
    pub fn unguided(&self) -> Self {
        Self {
            w_cfg: 0.0,
            w_pert: 0.0,
            ..self.clone()
        }
    }
}

/// `v + w (v - v')`, shared by both guidance rules.
fn extrapolate(v: &Tensor, away: &Tensor, w: f64) -> Result<Tensor> {
    if v.shape() != away.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", v.shape(), away.shape())));
    }
    let data = v
        .data()
        .iter()
        .zip(away.data())
        .map(|(&a, &b)| a + w * (a - b))
        .collect();
    Tensor::new(v.shape(), data)
}

/// Classifier-free guidance: `(1 + w) v_cond - w v_uncond`.
pub fn cfg_combine(v_cond: &Tensor, v_uncond: &Tensor, w: f64) -> Result<Tensor> {
    extrapolate(v_cond, v_uncond, w)
}

/// Attention-perturbation guidance: `(1 + w) v_orig - w v_pert`.
pub fn apg_combine(v_orig: &Tensor, v_pert: &Tensor, w: f64) -> Result<Tensor> {
    extrapolate(v_orig, v_pert, w)
}

/// Guided velocity at `(x_t, t)`. Only the branches a non-zero weight needs
/// are evaluated.
pub fn combined_velocity(
    weights: &DitWeights,
    x_t: &Tensor,
    t: f64,
    g: &GuidanceConfig,
    route: Perturbation<'_>,
) -> Result<Tensor> {
    let none = PerturbSpec::none();
    let plain = Perturbation::Heads(&none);
    let v_cond = forward_routed(weights, x_t, t, g.cond, plain)?;
    let use_pert = g.w_pert != 0.0 && route.is_active();
    if g.w_cfg == 0.0 && !use_pert {
        return Ok(v_cond);
    }
    let uncond = || forward_routed(weights, x_t, t, None, plain);
    if !use_pert {
        return cfg_combine(&v_cond, &uncond()?, g.w_cfg);
    }
    let v_pert = forward_routed(weights, x_t, t, g.cond, route)?;
    if g.w_cfg == 0.0 {
        return apg_combine(&v_cond, &v_pert, g.w_pert);
    }
    let v_uncond = uncond()?;
    match g.pert_anchor {
        PertAnchor::Cond => {
            let data = v_cond
                .data()
                .iter()
                .zip(v_uncond.data())
                .zip(v_pert.data())
                .map(|((&c, &u), &p)| c + g.w_cfg * (c - u) + g.w_pert * (c - p))
                .collect();
            Tensor::new(v_cond.shape(), data)
        }
        PertAnchor::Cfg => {
            let v_cfg = cfg_combine(&v_cond, &v_uncond, g.w_cfg)?;
            apg_combine(&v_cfg, &v_pert, g.w_pert)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryStep {
    pub step: usize,
    /// Time at which the velocity was evaluated.
    pub t: f64,
    /// Statistics of the state after the update.
    pub mean: f64,
    pub std: f64,
    /// L2 distance to the unguided trajectory at the same step, when known.
    pub l2_to_unguided: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// Final state at `t = 0`, unclamped.
    pub image: Tensor,
    pub trajectory: Vec<TrajectoryStep>,
    /// State after every step, in order.
    pub states: Vec<Tensor>,
}

impl Sample {
    /// Final image clamped to the export range.
    pub fn export_image(&self) -> Tensor {
        self.image.map(|v| v.clamp(-EXPORT_CLAMP, EXPORT_CLAMP))
    }

    /// Fills `l2_to_unguided` from a reference run with the same seed.
    pub fn with_reference(mut self, reference: &Sample) -> Result<Self> {
        if reference.states.len() != self.states.len() {
            return Err(Error::InvalidArgument(format!(
                "reference has {} steps, sample has {}",
                reference.states.len(),
                self.states.len()
            )));
        }
        for (rec, (a, b)) in self
            .trajectory
            .iter_mut()
            .zip(self.states.iter().zip(&reference.states))
        {
            rec.l2_to_unguided = Some(l2_distance(a, b));
        }
        Ok(self)
    }
}

pub fn l2_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Standard-normal starting image for `seed`.
pub fn initial_noise(weights: &DitWeights, seed: u64) -> Tensor {
    let n = weights.config.image_size;
    Tensor::new(&[n, n], Rng::new(seed).normals(n * n)).expect("square image")
}

pub fn sample(weights: &DitWeights, g: &GuidanceConfig, spec: &PerturbSpec) -> Result<Sample> {
    sample_routed(weights, g, Perturbation::Heads(spec))
}

/// Euler integration on the grid `t = 1, 1 - dt, ..., dt` with `dt = 1/steps`.
pub fn sample_routed(weights: &DitWeights, g: &GuidanceConfig, route: Perturbation<'_>) -> Result<Sample> {
    g.validate()?;
    let mut x = initial_noise(weights, g.seed);
    let dt = 1.0 / g.steps as f64;
    let mut trajectory = Vec::with_capacity(g.steps);
    let mut states = Vec::with_capacity(g.steps);
    for step in 0..g.steps {
        let t = 1.0 - step as f64 / g.steps as f64;
        let v = combined_velocity(weights, &x, t, g, route)?;
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi -= dt * vi;
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteSample { step });
        }
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
        trajectory.push(TrajectoryStep {
            step,
            t,
            mean,
            std: var.sqrt(),
            l2_to_unguided: None,
        });
        states.push(x.clone());
    }
    Ok(Sample {
        image: x,
        trajectory,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{HeadId, PerturbMethod};
    use crate::dit::{DitConfig, LayerPerturbation};

    fn model() -> DitWeights {
        DitWeights::init_dense_output(&DitConfig::default(), 3).unwrap()
    }

    fn t1(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn combine_arithmetic() {
        assert_eq!(cfg_combine(&t1(2.0), &t1(1.0), 1.0).unwrap().data(), &[3.0]);
        assert_eq!(cfg_combine(&t1(2.0), &t1(1.0), 0.0).unwrap().data(), &[2.0]);
        assert_eq!(cfg_combine(&t1(0.3), &t1(0.3), 7.5).unwrap().data(), &[0.3]);
        let g = apg_combine(&t1(1.0), &t1(0.8), 5.0).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-12);
        assert_eq!(apg_combine(&t1(0.7), &t1(0.7), 5.0).unwrap().data(), &[0.7]);
        assert!(cfg_combine(&t1(0.0), &Tensor::zeros(&[2]), 1.0).is_err());
    }

    #[test]
    fn combined_velocity_reduces_to_each_rule() {
        let w = model();
        let x = initial_noise(&w, 5);
        let spec = PerturbSpec::with_method([HeadId::new(1, 2), HeadId::new(3, 0)], PerturbMethod::Pag).unwrap();
        let none = PerturbSpec::none();
        let fwd = |c: Cond, s: &PerturbSpec| crate::dit::dit_forward(&w, &x, 0.7, c, s).unwrap();
        let v_cond = fwd(Some(2), &none);
        let v_uncond = fwd(None, &none);
        let v_pert = fwd(Some(2), &spec);

        let mut g = GuidanceConfig {
            w_cfg: 2.0,
            w_pert: 0.0,
            cond: Some(2),
            ..Default::default()
        };
        let got = combined_velocity(&w, &x, 0.7, &g, Perturbation::Heads(&spec)).unwrap();
        assert!(got.bit_eq(&cfg_combine(&v_cond, &v_uncond, 2.0).unwrap()));

        g.w_cfg = 0.0;
        g.w_pert = 3.0;
        let got = combined_velocity(&w, &x, 0.7, &g, Perturbation::Heads(&spec)).unwrap();
        assert!(got.bit_eq(&apg_combine(&v_cond, &v_pert, 3.0).unwrap()));

        g.w_pert = 0.0;
        let got = combined_velocity(&w, &x, 0.7, &g, Perturbation::Heads(&spec)).unwrap();
        assert!(got.bit_eq(&v_cond));

        g.w_cfg = 1.5;
        g.w_pert = 2.5;
        let got = combined_velocity(&w, &x, 0.7, &g, Perturbation::Heads(&spec)).unwrap();
        for i in 0..got.len() {
            let (c, u, p) = (v_cond.data()[i], v_uncond.data()[i], v_pert.data()[i]);
            let expect = (1.0 + 1.5 + 2.5) * c - 1.5 * u - 2.5 * p;
            assert!((got.data()[i] - expect).abs() < 1e-12);
        }
        g.pert_anchor = PertAnchor::Cfg;
        let got = combined_velocity(&w, &x, 0.7, &g, Perturbation::Heads(&spec)).unwrap();
        let v_cfg = cfg_combine(&v_cond, &v_uncond, 1.5).unwrap();
        assert!(got.bit_eq(&apg_combine(&v_cfg, &v_pert, 2.5).unwrap()));
    }

    #[test]
    fn single_step_is_one_euler_update() {
        let w = model();
        let g = GuidanceConfig {
            steps: 1,
            cond: Some(1),
            seed: 9,
            ..Default::default()
        };
        let spec = PerturbSpec::with_method([HeadId::new(0, 0)], PerturbMethod::Pag).unwrap();
        let s = sample(&w, &g, &spec).unwrap();
        let x1 = initial_noise(&w, 9);
        let v = combined_velocity(&w, &x1, 1.0, &g, Perturbation::Heads(&spec)).unwrap();
        assert!(s.image.bit_eq(&x1.sub(&v).unwrap()));
        assert_eq!(s.trajectory.len(), 1);
        assert_eq!(s.trajectory[0].t, 1.0);
    }

    #[test]
    fn time_grid_ends_at_dt() {
        let w = model();
        let g = GuidanceConfig {
            steps: 4,
            w_pert: 0.0,
            ..Default::default()
        };
        let s = sample(&w, &g, &PerturbSpec::none()).unwrap();
        let ts: Vec<f64> = s.trajectory.iter().map(|r| r.t).collect();
        assert_eq!(ts, vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn inactive_spec_ignores_perturbation_weight() {
        let w = model();
        let g = GuidanceConfig {
            w_pert: 4.0,
            steps: 5,
            cond: Some(0),
            ..Default::default()
        };
        let a = sample(&w, &g, &PerturbSpec::none()).unwrap();
        let b = sample(&w, &g.unguided(), &PerturbSpec::none()).unwrap();
        assert!(a.image.bit_eq(&b.image));
    }

    #[test]
    fn soft_pag_endpoints_lift_to_samples() {
        let w = model();
        let heads = [HeadId::new(0, 1), HeadId::new(2, 3)];
        let g = GuidanceConfig {
            steps: 4,
            cond: Some(3),
            ..Default::default()
        };
        let run = |spec: PerturbSpec| sample(&w, &g, &spec).unwrap().image;
        let soft0 = run(PerturbSpec::new(heads, PerturbMethod::SoftPag, 0.0, 1.0).unwrap());
        let soft1 = run(PerturbSpec::new(heads, PerturbMethod::SoftPag, 1.0, 1.0).unwrap());
        let pag = run(PerturbSpec::with_method(heads, PerturbMethod::Pag).unwrap());
        let base = run(PerturbSpec::none());
        assert!(soft0.bit_eq(&base));
        assert!(soft1.bit_eq(&pag));
        assert!(!pag.bit_eq(&base));
    }

    #[test]
    fn full_layer_heads_match_layer_route() {
        let w = model();
        let g = GuidanceConfig {
            steps: 3,
            cond: Some(1),
            seed: 4,
            ..Default::default()
        };
        let heads = (0..4).map(|h| HeadId::new(2, h));
        let spec = PerturbSpec::with_method(heads, PerturbMethod::Pag).unwrap();
        let layer = LayerPerturbation {
            layers: vec![2],
            method: PerturbMethod::Pag,
            u: 1.0,
            tau: 1.0,
        };
        let a = sample(&w, &g, &spec).unwrap();
        let b = sample_routed(&w, &g, Perturbation::Layers(&layer)).unwrap();
        assert!(a.image.bit_eq(&b.image));
    }

    #[test]
    fn reference_distance_and_export() {
        let w = model();
        let g = GuidanceConfig {
            steps: 3,
            cond: Some(0),
            ..Default::default()
        };
        let spec = PerturbSpec::with_method([HeadId::new(1, 1)], PerturbMethod::Pag).unwrap();
        let base = sample(&w, &g.unguided(), &spec).unwrap();
        let guided = sample(&w, &g, &spec).unwrap().with_reference(&base).unwrap();
        let last = guided.trajectory.last().unwrap().l2_to_unguided.unwrap();
        assert_eq!(last, l2_distance(&guided.image, &base.image));
        assert!(guided
            .export_image()
            .data()
            .iter()
            .all(|v| (-EXPORT_CLAMP..=EXPORT_CLAMP).contains(v)));
    }

    #[test]
    fn rejects_bad_config() {
        let w = model();
        let mut g = GuidanceConfig::default();
        g.steps = 0;
        assert!(sample(&w, &g, &PerturbSpec::none()).is_err());
        g.steps = 2;
        g.w_cfg = -1.0;
        assert!(sample(&w, &g, &PerturbSpec::none()).is_err());
    }

    #[test]
    fn non_finite_state_reports_step() {
        let mut w = model();
        w.out_b.data_mut()[0] = f64::INFINITY;
        let g = GuidanceConfig {
            steps: 4,
            w_pert: 0.0,
            w_cfg: 3.0,
            cond: Some(0),
            ..Default::default()
        };
        match sample(&w, &g, &PerturbSpec::none()) {
            Err(Error::NonFiniteSample { step }) => assert!(step < 4),
            other => panic!("expected non-finite sample, got {other:?}"),
        }
    }
}
