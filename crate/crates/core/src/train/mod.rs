//! Flow-matching training: loss, gradients, Adam and a finite-difference
//! gradient verifier.

mod adam;
mod backward;
mod flow;
mod gradcheck;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use backward::{layernorm_backward, linear_backward};
pub use flow::{flow_interpolate, FlowMatching, NoiseSchedule};
pub use gradcheck::{finite_diff_check, GradCheckReport, Probe, FD_STEP};

use crate::attention::PerturbSpec;
use crate::dit::{dit_forward, forward_impl, Cond, DitWeights, ForwardCache, Perturbation};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e3;

/// Examples whose gradients share one accumulator in `loss_and_grad`.
pub const GRAD_CHUNK: usize = 8;

/// Step interval at which the loss is reported.
pub const LOG_EVERY: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub cfg_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            steps: 3000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            cfg_dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return Err(Error::InvalidArgument("cfg_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One fully drawn training example.
#[derive(Clone, Debug)]
pub struct FmItem {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub cond: Cond,
}

/// Draws `t ~ U[0,1)`, `ε ~ N(0, I)` and the condition dropout for each
/// example, in example order, from `rng`.
pub fn draw_items(batch: &[(Tensor, Cond)], cfg_dropout: f64, rng: &mut Rng) -> Vec<FmItem> {
    batch
        .iter()
        .map(|(x0, cond)| {
            let t = rng.uniform();
            let eps = Tensor::new(x0.shape(), rng.normals(x0.len())).expect("same shape as x0");
            let drop = rng.uniform() < cfg_dropout;
            FmItem {
                x0: x0.clone(),
                eps,
                t,
                cond: if drop { None } else { *cond },
            }
        })
        .collect()
}

/// Mean squared velocity error on fixed draws.
pub fn items_loss(weights: &DitWeights, items: &[FmItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let none = PerturbSpec::none();
    let sums = items
        .par_iter()
        .map(|it| {
            let (x_t, target) = flow_interpolate(&it.x0, &it.eps, it.t)?;
            let pred = dit_forward(weights, &x_t, it.t, it.cond, &none)?;
            Ok(squared_error(&pred, &target))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / (items.len() * items[0].x0.len()) as f64)
}

fn squared_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Flow-matching loss on `batch`, drawing times, noise and condition dropout
/// from `rng`.
pub fn fm_loss(
    weights: &DitWeights,
    batch: &[(Tensor, Cond)],
    cfg_dropout: f64,
    rng: &mut Rng,
) -> Result<f64> {
    items_loss(weights, &draw_items(batch, cfg_dropout, rng))
}

/// Loss and its exact gradient on fixed draws.
pub fn loss_and_grad(weights: &DitWeights, items: &[FmItem]) -> Result<(f64, DitWeights)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let denom = (items.len() * items[0].x0.len()) as f64;
    let per_chunk = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let none = PerturbSpec::none();
            let mut sq = 0.0;
            let mut g = DitWeights::zeros(&weights.config);
            for it in chunk {
                let (x_t, target) = flow_interpolate(&it.x0, &it.eps, it.t)?;
                let mut cache = ForwardCache::default();
                let pred = forward_impl(
                    weights,
                    &x_t,
                    it.t,
                    it.cond,
                    Perturbation::Heads(&none),
                    Some(&mut cache),
                )?;
                let diff = pred.sub(&target)?;
                sq += diff.data().iter().map(|v| v * v).sum::<f64>();
                backward::dit_backward(weights, &cache, &diff.scale(2.0 / denom), &mut g)?;
            }
            Ok((sq, g))
        })
        .collect::<Result<Vec<_>>>()?;

    // chunk boundaries and the reduction order do not depend on the thread count
    let mut chunks = per_chunk.into_iter();
    let (mut total, mut grads) = chunks.next().expect("non-empty batch");
    for (sq, g) in chunks {
        total += sq;
        add_into(&mut grads, &g);
    }
    Ok((total / denom, grads))
}

fn add_into(acc: &mut DitWeights, g: &DitWeights) {
    let src = g.params();
    let mut i = 0;
    acc.visit_mut(|_, t| {
        t.add_assign(src[i].1);
        i += 1;
    });
}

/// First parameter holding a NaN/Inf, if any.
pub fn first_non_finite(grads: &DitWeights) -> Option<String> {
    grads
        .params()
        .into_iter()
        .find(|(_, t)| !t.is_finite())
        .map(|(n, _)| n)
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    /// Loss of the first step, measured before any update.
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean loss over the last [`LOG_EVERY`] steps.
    pub fn final_window(&self) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let n = self.losses.len().min(LOG_EVERY);
        let tail = &self.losses[self.losses.len() - n..];
        Some(tail.iter().sum::<f64>() / n as f64)
    }

    pub fn ratio(&self) -> Option<f64> {
        Some(self.final_window()? / self.initial()?)
    }

    /// `(step, loss)` pairs at the reporting interval, plus the last step.
    pub fn logged(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<_> = self
            .losses
            .iter()
            .enumerate()
            .filter(|(s, _)| s % LOG_EVERY == 0)
            .map(|(s, &l)| (s, l))
            .collect();
        if let Some(last) = self.losses.len().checked_sub(1) {
            if last % LOG_EVERY != 0 {
                out.push((last, self.losses[last]));
            }
        }
        out
    }
}

/// Trains `weights` in place on `dataset`.
///
/// Batches are drawn with replacement from a stream seeded by
/// `Rng::new(cfg.seed).fork()`, so a model initialized with `cfg.seed` does
/// not share draws with its training stream.
pub fn train(
    weights: &mut DitWeights,
    dataset: &[(Tensor, Cond)],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(usize, f64),
) -> Result<LossCurve> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let mut rng = Rng::new(cfg.seed).fork();
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let batch: Vec<(Tensor, Cond)> = (0..cfg.batch)
            .map(|_| dataset[rng.below(dataset.len())].clone())
            .collect();
        let items = draw_items(&batch, cfg.cfg_dropout, &mut rng);
        let (loss, grads) = loss_and_grad(weights, &items)?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(param) = first_non_finite(&grads) {
            return Err(Error::NonFiniteGradient { param });
        }
        adam.step(weights, &grads);
        curve.losses.push(loss);
        if step % LOG_EVERY == 0 || step + 1 == cfg.steps {
            log::info!("step {step:>5}  loss {loss:.6}");
            on_log(step, loss);
        }
    }
    Ok(curve)
}
