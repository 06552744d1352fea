//! CSV renderings of run artifacts. LF line endings, `.` decimals and Rust's
//! shortest round-trip float formatting.

use std::fmt::Write;

use crate::dit::format_cond;
use crate::search::{Pair, RoundLedger};
use crate::sampler::TrajectoryStep;
use crate::sweep::SweepResult;
use crate::train::LossCurve;

pub fn loss_csv(curve: &LossCurve) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in curve.losses.iter().enumerate() {
        writeln!(s, "{step},{loss}").unwrap();
    }
    s
}

pub fn trajectory_csv(steps: &[TrajectoryStep]) -> String {
    let mut s = String::from("step,t,mean,std,l2_to_unguided\n");
    for r in steps {
        let l2 = r.l2_to_unguided.map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{},{l2}", r.step, r.t, r.mean, r.std).unwrap();
    }
    s
}

/// Rows of one round, without the header.
pub fn ledger_rows(round: &RoundLedger) -> String {
    let mut s = String::new();
    for e in &round.entries {
        writeln!(s, "{},{},{},{},{}", round.round, e.head.layer, e.head.head, e.score, e.rank).unwrap();
    }
    s
}

pub const LEDGER_HEADER: &str = "round,layer,head,score,rank\n";

pub fn ledger_csv(rounds: &[RoundLedger]) -> String {
    let mut s = String::from(LEDGER_HEADER);
    for r in rounds {
        s.push_str(&ledger_rows(r));
    }
    s
}

/// `round,score` with round 0 the unperturbed baseline.
pub fn curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("round,score\n");
    for (r, v) in curve.iter().enumerate() {
        writeln!(s, "{r},{v}").unwrap();
    }
    s
}

pub fn sweep_rows_csv(result: &SweepResult) -> String {
    let mut s = String::from("w,u,pair,cond,seed,score\n");
    for r in &result.rows {
        writeln!(s, "{},{},{},{},{},{}", r.w, r.u, r.pair, format_cond(r.cond), r.seed, r.score).unwrap();
    }
    s
}

/// Mean score per cell: one row per `w`, one column per `u`.
pub fn sweep_matrix_csv(result: &SweepResult) -> String {
    let mut s = String::from("w");
    for u in &result.u_grid {
        write!(s, ",u={u}").unwrap();
    }
    s.push('\n');
    for (w, row) in result.w_grid.iter().zip(&result.matrix) {
        write!(s, "{w}").unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn manifest_csv(rows: &[(usize, usize, u64)]) -> String {
    let mut s = String::from("index,class,seed\n");
    for (i, c, seed) in rows {
        writeln!(s, "{i},{c},{seed}").unwrap();
    }
    s
}

/// Parses `cond,seed` lines (optional header, `#` comments) into pairs.
pub fn parse_pairs(text: &str) -> crate::Result<Vec<Pair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("cond")) {
            continue;
        }
        let bad = || crate::Error::InvalidArgument(format!("pairs line {}: expected `cond,seed`, got `{line}`", n + 1));
        let (c, seed) = line.split_once(',').ok_or_else(bad)?;
        let cond = crate::dit::parse_cond(c)?;
        let seed = seed.trim().parse().map_err(|_| bad())?;
        out.push((cond, seed));
    }
    Ok(out)
}
