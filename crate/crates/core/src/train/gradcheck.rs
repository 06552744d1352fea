use std::collections::BTreeMap;

use super::{items_loss, loss_and_grad, FmItem};
use crate::dit::{param_group, DitWeights};
use crate::error::Result;
use crate::rng::Rng;

/// Central-difference step applied to a probed parameter.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so exactly-zero gradients on
/// both sides compare as equal rather than 0/0.
const REL_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    /// Distinct parameter groups touched by the probes.
    pub fn groups(&self) -> Vec<&'static str> {
        let mut g: Vec<_> = self.probes.iter().map(|p| param_group(&p.param)).collect();
        g.sort_unstable();
        g.dedup();
        g
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against central differences at
/// `probe_count` random scalar parameters. Probes cycle through the parameter
/// groups so every group is covered once `probe_count` reaches the group
/// count.
pub fn finite_diff_check(
    weights: &DitWeights,
    items: &[FmItem],
    probe_count: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(weights, items)?;
    let grad_params = grads.params();

    let mut by_group: BTreeMap<&'static str, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, (name, t)) in weights.params().iter().enumerate() {
        by_group.entry(param_group(name)).or_default().push((i, t.len()));
    }
    let groups: Vec<_> = by_group.values().collect();

    let mut probes = Vec::with_capacity(probe_count);
    for p in 0..probe_count {
        let members = groups[p % groups.len()];
        let total: usize = members.iter().map(|(_, n)| n).sum();
        let mut pick = rng.below(total);
        let &(param_idx, _) = members
            .iter()
            .find(|(_, n)| {
                if pick < *n {
                    true
                } else {
                    pick -= n;
                    false
                }
            })
            .expect("pick falls inside the group");
        let index = pick;

        let shifted = |delta: f64| -> Result<f64> {
            let mut w = weights.clone();
            let mut i = 0;
            w.visit_mut(|_, t| {
                if i == param_idx {
                    t.data_mut()[index] += delta;
                }
                i += 1;
            });
            items_loss(&w, items)
        };
        let numeric = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
        let (name, g) = &grad_params[param_idx];
        let analytic = g.data()[index];
        probes.push(Probe {
            param: name.clone(),
            index,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes,
        max_rel_error,
    })
}
