//! Two-state burst model of bidirectional service failure: tail bounds,
//! the consecutive-failure tolerance and interaction-bound coordinate,
//! budget composition and Monte-Carlo validation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    /// Upper bound on the first-opportunity failure probability.
    pub mu1: f64,
    /// Upper bound on failure persistence.
    pub p11: f64,
    /// Window length in opportunities.
    pub h_t: usize,
    /// Per-window violation budget.
    pub delta_t: f64,
}

impl ChainParams {
    pub fn new(mu1: f64, p11: f64, h_t: usize, delta_t: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&mu1) && (0.0..=1.0).contains(&p11) && h_t >= 1 && delta_t > 0.0 && delta_t < 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "invalid chain parameters mu1={mu1} p11={p11} h_t={h_t} delta_t={delta_t}"
            )));
        }
        Ok(ChainParams { mu1, p11, h_t, delta_t })
    }
}

pub fn run_tail_bound(p: &ChainParams, l: usize) -> f64 {
    assert!(l >= 1, "run length starts at 1");
    p.mu1 * p.p11.powi(l as i32 - 1)
}

/// Consecutive-failure tolerance, or none when the budget is unreachable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tolerance {
    Finite(usize),
    NoFiniteCertificate,
}

fn within_budget(p: &ChainParams, l: usize) -> bool {
    p.h_t as f64 * run_tail_bound(p, l) <= p.delta_t
}

pub fn failure_tolerance(p: &ChainParams) -> Tolerance {
    let lead = p.h_t as f64 * p.mu1;
    if lead <= p.delta_t {
        return Tolerance::Finite(1);
    }
    if p.p11 >= 1.0 {
        return Tolerance::NoFiniteCertificate;
    }
    if p.p11 <= 0.0 {
        return Tolerance::Finite(2);
    }
    let guess = (1.0 + (p.delta_t / lead).ln() / p.p11.ln()).ceil().max(1.0) as usize;
    // the closed form can be off by one under rounding; settle by direct checks
    let mut l = guess.max(1);
    while l > 1 && within_budget(p, l - 1) {
        l -= 1;
    }
    while !within_budget(p, l) {
        l += 1;
    }
    Tolerance::Finite(l)
}

pub fn interaction_bound(l_f: usize, t_s: f64) -> f64 {
    l_f as f64 * t_s
}

/// Largest gap between consecutive successes, or `None` when fewer than two
/// successes occur in the window.
pub fn realized_max_interval(outcomes: &[bool], t_s: f64) -> Option<f64> {
    let idx: Vec<usize> = outcomes.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i).collect();
    idx.windows(2).map(|w| (w[1] - w[0]) as f64 * t_s).reduce(f64::max)
}

/// Gap measured with successes assumed just outside both ends of the window.
pub fn anchored_max_interval(outcomes: &[bool], t_s: f64) -> f64 {
    (longest_failure_run(outcomes) + 1) as f64 * t_s
}

pub fn longest_failure_run(outcomes: &[bool]) -> usize {
    let (mut best, mut cur) = (0, 0);
    for &s in outcomes {
        cur = if s { 0 } else { cur + 1 };
        best = best.max(cur);
    }
    best
}

pub fn compose_budgets(deltas: &[f64]) -> f64 {
    deltas.iter().sum()
}

/// Transition probability from success to failure that makes the
/// stationary failure probability equal to `mu1`.
pub fn stationary_p01(mu1: f64, p11: f64) -> f64 {
    if mu1 >= 1.0 {
        1.0
    } else {
        (mu1 * (1.0 - p11) / (1.0 - mu1)).min(1.0)
    }
}

/// One window of outcomes (true = bidirectional success), started from
/// the stationary distribution.
pub fn sample_window<R: Rng + ?Sized>(mu1: f64, p11: f64, len: usize, rng: &mut R) -> Vec<bool> {
    let p01 = stationary_p01(mu1, p11);
    let mut fail = rng.gen::<f64>() < mu1;
    let mut v = Vec::with_capacity(len);
    for i in 0..len {
        if i > 0 {
            let p = if fail { p11 } else { p01 };
            fail = rng.gen::<f64>() < p;
        }
        v.push(!fail);
    }
    v
}

/// Exact probability, under the stationary chain, that a failure run of
/// length at least `g` occurs inside a window of `len` opportunities.
pub fn exact_run_probability(mu1: f64, p11: f64, len: usize, g: usize) -> f64 {
    assert!(len <= 24, "enumeration limited to short windows");
    let p01 = stationary_p01(mu1, p11);
    let mut total = 0.0;
    for bits in 0u32..(1 << len) {
        let seq: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 0).collect();
        if longest_failure_run(&seq) < g {
            continue;
        }
        let mut pr = if seq[0] { 1.0 - mu1 } else { mu1 };
        for w in seq.windows(2) {
            let pf = if w[0] { p01 } else { p11 };
            pr *= if w[1] { 1.0 - pf } else { pf };
        }
        total += pr;
    }
    total
}

/// Empirical frequency of windows whose failure run reaches the certified
/// tolerance, simulated with the true parameters.
pub fn validate_interaction_certificate(
    p: &ChainParams,
    true_mu1: f64,
    true_p11: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let Tolerance::Finite(g) = failure_tolerance(p) else {
        return Err(Error::Config("no finite interaction certificate".into()));
    };
    let mut bad = 0usize;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let w = sample_window(true_mu1, true_p11, p.h_t, &mut rng);
        if longest_failure_run(&w) >= g {
            bad += 1;
        }
    }
    Ok(bad as f64 / trials as f64)
}
