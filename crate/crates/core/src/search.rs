//! HeadHunter: greedy, objective-aware selection of attention heads to
//! perturb, plus the brute-force single-head ranking it is checked against.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{HeadId, PerturbMethod, PerturbSpec};
use crate::dit::{Cond, DitWeights};
use crate::error::{Error, Result};
use crate::objectives::{Objective, ObjectiveId};
use crate::sampler::{sample, GuidanceConfig, Sample};

/// One prompt-seed pair: the class condition and the sampling seed.
pub type Pair = (Cond, u64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub k: usize,
    pub rounds: usize,
    pub pairs: Vec<Pair>,
    /// Guidance used for every candidate sample; `cond` and `seed` are
    /// overridden per pair.
    pub guidance: GuidanceConfig,
    pub method: PerturbMethod,
    pub u: f64,
    pub tau: f64,
    pub objective: ObjectiveId,
}

impl SearchConfig {
    pub fn new(k: usize, rounds: usize, pairs: Vec<Pair>, objective: ObjectiveId) -> Self {
        Self {
            k,
            rounds,
            pairs,
            guidance: GuidanceConfig::default(),
            method: PerturbMethod::Pag,
            u: 1.0,
            tau: 1.0,
            objective,
        }
    }

    /// `k * rounds` may exceed the head pool; the search then stops once the
    /// pool is exhausted.
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.rounds == 0 {
            return Err(Error::InvalidArgument("k and rounds must be at least 1".into()));
        }
        if self.pairs.is_empty() {
            return Err(Error::InvalidArgument("at least one (cond, seed) pair is required".into()));
        }
        if self.method == PerturbMethod::None {
            return Err(Error::InvalidArgument("search needs a perturbation method".into()));
        }
        self.guidance.validate()?;
        self.spec(&[]).map(|_| ())
    }

    /// Perturbation spec for a head set under this config's method.
    pub fn spec(&self, heads: &[HeadId]) -> Result<PerturbSpec> {
        PerturbSpec::new(heads.iter().copied(), self.method, self.u, self.tau)
    }

    /// Guidance for pair `i`.
    pub fn pair_guidance(&self, i: usize) -> GuidanceConfig {
        let (cond, seed) = self.pairs[i];
        GuidanceConfig {
            cond,
            seed,
            ..self.guidance.clone()
        }
    }
}

/// Scores a head set. `heads` lists the already selected heads followed by
/// the candidate.
pub trait Evaluator: Sync {
    fn evaluate(&self, heads: &[HeadId]) -> Result<f64>;
}

impl<F> Evaluator for F
where
    F: Fn(&[HeadId]) -> Result<f64> + Sync,
{
    fn evaluate(&self, heads: &[HeadId]) -> Result<f64> {
        self(heads)
    }
}

/// Samples every pair of the config with the head set perturbed and averages
/// the objective over the exported images.
pub struct GuidedEvaluator<'a> {
    pub weights: &'a DitWeights,
    pub cfg: &'a SearchConfig,
    pub objective: &'a dyn Objective,
}

impl<'a> GuidedEvaluator<'a> {
    pub fn new(weights: &'a DitWeights, cfg: &'a SearchConfig) -> Self {
        Self {
            weights,
            cfg,
            objective: &cfg.objective,
        }
    }

    pub fn samples(&self, heads: &[HeadId]) -> Result<Vec<Sample>> {
        let spec = self.cfg.spec(heads)?;
        (0..self.cfg.pairs.len())
            .map(|i| sample(self.weights, &self.cfg.pair_guidance(i), &spec))
            .collect()
    }

    pub fn pair_scores(&self, heads: &[HeadId]) -> Result<Vec<f64>> {
        self.samples(heads)?
            .iter()
            .zip(&self.cfg.pairs)
            .map(|(s, &(cond, _))| self.objective.score(&s.export_image(), cond))
            .collect()
    }
}

impl Evaluator for GuidedEvaluator<'_> {
    fn evaluate(&self, heads: &[HeadId]) -> Result<f64> {
        let scores = self.pair_scores(heads)?;
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub head: HeadId,
    pub score: f64,
    /// 1-based position in the round's ranking.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    /// 1-based round number.
    pub round: usize,
    /// Selected heads before this round, in selection order.
    pub prefix: Vec<HeadId>,
    /// Every candidate of the round, best first.
    pub entries: Vec<LedgerEntry>,
    /// Heads appended to the selection this round.
    pub winners: Vec<HeadId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub selected: Vec<HeadId>,
    /// Candidates not yet selected, in ascending order.
    pub pool: Vec<HeadId>,
    pub ledger: Vec<RoundLedger>,
}

impl SearchState {
    pub fn new(pool: impl IntoIterator<Item = HeadId>) -> Self {
        let mut pool: Vec<_> = pool.into_iter().collect();
        pool.sort();
        pool.dedup();
        Self {
            selected: Vec::new(),
            pool,
            ledger: Vec::new(),
        }
    }

    pub fn completed_rounds(&self) -> usize {
        self.ledger.len()
    }

    /// Selection after `round` rounds (`0` gives the empty set).
    pub fn selection_after(&self, round: usize) -> &[HeadId] {
        let n: usize = self.ledger.iter().take(round).map(|r| r.winners.len()).sum();
        &self.selected[..n]
    }
}

/// Descending by score, ties broken by ascending head id.
pub fn rank_order(a: &(HeadId, f64), b: &(HeadId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn score_or_fail<E: Evaluator + ?Sized>(eval: &E, heads: &[HeadId]) -> f64 {
    match eval.evaluate(heads) {
        Ok(s) if !s.is_nan() => s,
        Ok(_) => {
            log::warn!("candidate {:?} scored NaN; marked failed", heads.last());
            f64::NEG_INFINITY
        }
        Err(e) => {
            log::warn!("candidate {:?} failed: {e}", heads.last());
            f64::NEG_INFINITY
        }
    }
}

/// Score of `selected ∪ {cand}`. Evaluation failures give `-inf`.
pub fn evaluate_candidate<E: Evaluator + ?Sized>(eval: &E, state: &SearchState, cand: HeadId) -> Result<f64> {
    if state.pool.binary_search(&cand).is_err() {
        return Err(Error::InvalidArgument(format!("head {cand} is not in the candidate pool")));
    }
    let mut heads = state.selected.clone();
    heads.push(cand);
    Ok(score_or_fail(eval, &heads))
}

fn score_all<E: Evaluator + ?Sized>(eval: &E, prefix: &[HeadId], cands: &[HeadId]) -> Vec<(HeadId, f64)> {
    let scores: Vec<f64> = cands
        .par_iter()
        .map(|&c| {
            let mut heads = prefix.to_vec();
            heads.push(c);
            score_or_fail(eval, &heads)
        })
        .collect();
    let mut ranked: Vec<_> = cands.iter().copied().zip(scores).collect();
    ranked.sort_by(rank_order);
    ranked
}

/// Scores every pool candidate and moves the top `k` into the selection.
/// With fewer than `k` candidates left, all of them are taken.
pub fn run_round<E: Evaluator + ?Sized>(eval: &E, state: &mut SearchState, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if state.pool.is_empty() {
        return Err(Error::InvalidArgument("candidate pool is exhausted".into()));
    }
    let ranked = score_all(eval, &state.selected, &state.pool);
    let take = k.min(ranked.len());
    let winners: Vec<HeadId> = ranked[..take].iter().map(|(h, _)| *h).collect();
    let entries = ranked
        .iter()
        .enumerate()
        .map(|(i, &(head, score))| LedgerEntry {
            head,
            score,
            rank: i + 1,
        })
        .collect();
    state.ledger.push(RoundLedger {
        round: state.ledger.len() + 1,
        prefix: state.selected.clone(),
        entries,
        winners: winners.clone(),
    });
    state.pool.retain(|h| !winners.contains(h));
    state.selected.extend(winners);
    Ok(())
}

/// Up to `rounds` rounds of [`run_round`], stopping early once the pool is
/// empty.
pub fn headhunter<E: Evaluator + ?Sized>(
    eval: &E,
    pool: impl IntoIterator<Item = HeadId>,
    k: usize,
    rounds: usize,
) -> Result<SearchState> {
    if k == 0 || rounds == 0 {
        return Err(Error::InvalidArgument("k and rounds must be at least 1".into()));
    }
    let mut state = SearchState::new(pool);
    for r in 0..rounds {
        if state.pool.is_empty() {
            break;
        }
        run_round(eval, &mut state, k)?;
        log::info!(
            "round {}: selected {}",
            r + 1,
            state.ledger[r]
                .winners
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        );
    }
    Ok(state)
}

/// Runs the full search on a model with the config's sampler and objective.
pub fn headhunt(weights: &DitWeights, cfg: &SearchConfig) -> Result<SearchState> {
    cfg.validate()?;
    let eval = GuidedEvaluator::new(weights, cfg);
    headhunter(&eval, weights.config.all_heads(), cfg.k, cfg.rounds)
}

/// Every head scored on its own, best first.
pub fn exhaustive_single_head<E: Evaluator + ?Sized>(eval: &E, heads: &[HeadId]) -> Vec<(HeadId, f64)> {
    score_all(eval, &[], heads)
}

/// Objective after each round: index 0 is the unperturbed baseline, index `r`
/// uses the selection after round `r`.
pub fn round_curve<E: Evaluator + ?Sized>(eval: &E, state: &SearchState) -> Result<Vec<f64>> {
    (0..=state.completed_rounds())
        .map(|r| eval.evaluate(state.selection_after(r)))
        .collect()
}
