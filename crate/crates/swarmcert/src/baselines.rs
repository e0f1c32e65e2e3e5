//! Comparison policies. Each consumes the same per-loop inputs as the
//! certified allocator and returns decisions within the slot budget.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::allocator::{
    admit_safe, allocate_cycle, cheapest, needs_sync, sync_leftovers, zero_decision, AllocParams, CycleAllocation,
    Decision, LoopInput,
};
use crate::error::{Error, Result};
use crate::mjls::Certifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyId {
    FixedService,
    CertFixed,
    DyntxHlc,
    VoiSched,
    Safe,
}

impl PolicyId {
    pub const ALL: [PolicyId; 5] =
        [PolicyId::FixedService, PolicyId::CertFixed, PolicyId::DyntxHlc, PolicyId::VoiSched, PolicyId::Safe];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyId::FixedService => "fixed_service",
            PolicyId::CertFixed => "cert_fixed",
            PolicyId::DyntxHlc => "dyntx_hlc",
            PolicyId::VoiSched => "voi_sched",
            PolicyId::Safe => "safe",
        }
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyId::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

/// Shared per-cycle context for the baselines.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub cycle: usize,
    pub params: &'a AllocParams,
    pub certifier: &'a Certifier,
    pub dyntx_edges: [f64; 2],
}

/// Greedy fill in `order`, each loop taking `pick(i)` when it fits.
fn fill(
    loops: &[LoopInput],
    params: &AllocParams,
    order: impl IntoIterator<Item = usize>,
    mut pick: impl FnMut(usize) -> Option<usize>,
) -> (Vec<Decision>, u32) {
    let mut decisions: Vec<Decision> = loops.iter().map(|l| zero_decision(l.zeta, params)).collect();
    let mut used = 0;
    for i in order {
        if let Some(k) = pick(i) {
            let s = loops[i].actions[k].slot_cost;
            if used + s <= params.budget {
                decisions[i] = Decision::Sync(k);
                used += s;
            }
        }
    }
    (decisions, used)
}

/// Round-robin service: starting one loop later each cycle, every loop
/// takes its cheapest action while slots remain.
pub fn fixed_service(loops: &[LoopInput], ctx: &PolicyContext) -> (Vec<Decision>, u32) {
    let n = loops.len().max(1);
    let start = ctx.cycle % n;
    fill(loops, ctx.params, (0..loops.len()).map(|j| (start + j) % n), |i| cheapest(loops[i].actions))
}

/// Certificate filtering with static loop-index priority and the cheapest
/// admitted action per loop. Resynchronization is offered first, as in the
/// certified allocator.
pub fn cert_fixed(loops: &[LoopInput], ctx: &PolicyContext) -> Result<(Vec<Decision>, u32)> {
    let p = ctx.params;
    let mut decisions: Vec<Decision> = loops.iter().map(|l| zero_decision(l.zeta, p)).collect();
    let mut used = sync_leftovers(loops, &mut decisions, 0, p.budget, needs_sync);
    for (i, l) in loops.iter().enumerate() {
        if decisions[i].action().is_some() {
            continue;
        }
        let safe = admit_safe(l.zeta, &l.candidates, ctx.certifier, p.lambda_sigma, p.noise)?;
        if let Some(a) = safe.iter().min_by_key(|a| (a.slot_cost, a.action)) {
            if used + a.slot_cost <= p.budget {
                decisions[i] = Decision::Serve(a.action);
                used += a.slot_cost;
            }
        }
    }
    Ok((decisions, used))
}

/// Retransmission depth for a normalized Lyapunov value.
pub fn dyntx_depth(v_norm: f64, edges: [f64; 2]) -> u32 {
    if v_norm < edges[0] {
        0
    } else if v_norm < edges[1] {
        1
    } else {
        2
    }
}

/// State-adaptive retransmission depth on the shortest route pair, served
/// greedily by descending `V`. Failed downlinks hold the last command.
pub fn dyntx_hlc(loops: &[LoopInput], ctx: &PolicyContext) -> (Vec<Decision>, u32) {
    let v_max = ctx.params.safe.domain.v_max;
    let mut order: Vec<usize> = (0..loops.len()).collect();
    order.sort_by(|&a, &b| loops[b].zeta.v.total_cmp(&loops[a].zeta.v).then(a.cmp(&b)));
    fill(loops, ctx.params, order, |i| {
        let acts = loops[i].actions;
        let first = acts.first()?;
        let want = dyntx_depth(loops[i].zeta.v / v_max, ctx.dyntx_edges);
        acts.iter()
            .enumerate()
            .filter(|(_, a)| a.ul_route == first.ul_route && a.dl_route == first.dl_route && a.ul_cfg.n_re <= want)
            .min_by_key(|&(k, a)| (want - a.ul_cfg.n_re, a.slot_cost, k))
            .map(|(k, _)| k)
    })
}

/// Value-of-information score: sample age times state uncertainty.
pub fn voi_score(age: usize, v: f64, sigma: f64, lambda_sigma: f64) -> f64 {
    age as f64 * (v + lambda_sigma * sigma)
}

/// Greedy by score per slot on each loop's cheapest action.
pub fn voi_sched(loops: &[LoopInput], ctx: &PolicyContext) -> (Vec<Decision>, u32) {
    let lam = ctx.params.lambda_sigma;
    let ratio = |i: usize| {
        let z = loops[i].zeta;
        match cheapest(loops[i].actions) {
            Some(k) => voi_score(z.last_sample_age, z.v, z.sigma, lam) / loops[i].actions[k].slot_cost.max(1) as f64,
            None => f64::NEG_INFINITY,
        }
    };
    let mut order: Vec<usize> = (0..loops.len()).collect();
    order.sort_by(|&a, &b| ratio(b).total_cmp(&ratio(a)).then(a.cmp(&b)));
    fill(loops, ctx.params, order, |i| cheapest(loops[i].actions))
}

/// Dispatches one cycle of `policy`. The certified allocator's full
/// record is returned alongside when it runs.
pub fn decide(
    policy: PolicyId,
    loops: &[LoopInput],
    ctx: &PolicyContext,
) -> Result<(Vec<Decision>, u32, Option<CycleAllocation>)> {
    Ok(match policy {
        PolicyId::FixedService => {
            let (d, u) = fixed_service(loops, ctx);
            (d, u, None)
        }
        PolicyId::CertFixed => {
            let (d, u) = cert_fixed(loops, ctx)?;
            (d, u, None)
        }
        PolicyId::DyntxHlc => {
            let (d, u) = dyntx_hlc(loops, ctx);
            (d, u, None)
        }
        PolicyId::VoiSched => {
            let (d, u) = voi_sched(loops, ctx);
            (d, u, None)
        }
        PolicyId::Safe => {
            let a = allocate_cycle(loops, ctx.certifier, ctx.params)?;
            (a.decisions.clone(), a.used, Some(a))
        }
    })
}
