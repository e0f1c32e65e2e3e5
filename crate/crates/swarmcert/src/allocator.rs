//! Per-cycle certified allocation: drift envelopes, state-conditioned
//! admission, zero-allocation baselines, frontier pruning and the
//! multi-choice knapsack over TDMA slots.

use serde::{Deserialize, Serialize};

use crate::cert::{action_dominates, CommAction, QosCertificate, TimingTriple};
use crate::error::{Error, Result};
use crate::mjls::{Certifier, EnvelopeTable};
use crate::plant::{augmented_w, hold_admissible, hold_map, LoopState, Mode, SafeMode};

/// Per-cycle noise traces, m².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseTraces {
    pub proc: f64,
    pub meas: f64,
}

/// Worst-case expected change of the covariance trace over the certified
/// uplink success set.
pub fn covariance_envelope(zeta: &LoopState, q: &QosCertificate, timing: &TimingTriple, noise: NoiseTraces) -> f64 {
    let fresh = noise.meas + timing.h_ul as f64 * noise.proc;
    let delta = fresh - zeta.sigma - noise.proc;
    if delta >= 0.0 {
        delta + noise.proc
    } else {
        q.rho_ul * delta + noise.proc
    }
}

pub fn drift_bound(
    zeta: &LoopState,
    q: &QosCertificate,
    timing: &TimingTriple,
    table: &EnvelopeTable,
    lambda_sigma: f64,
    noise: NoiseTraces,
) -> Result<f64> {
    let alpha = table.cycle_envelope(q.rho_ul, q.rho_dl, zeta.c, timing.g)?;
    Ok((alpha - 1.0) * zeta.v + lambda_sigma * covariance_envelope(zeta, q, timing, noise))
}

/// A certified candidate for one loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Index into the loop's enumerated action list.
    pub action: usize,
    pub cert: QosCertificate,
    pub timing: TimingTriple,
    pub slot_cost: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Admitted {
    pub action: usize,
    pub cert: QosCertificate,
    pub timing: TimingTriple,
    pub slot_cost: u32,
    pub phi: f64,
    pub utility: f64,
}

/// Keeps candidates with `c < g` and a non-positive drift bound, in input
/// order. Utilities are left at zero.
pub fn admit_safe(
    zeta: &LoopState,
    candidates: &[Candidate],
    certifier: &Certifier,
    lambda_sigma: f64,
    noise: NoiseTraces,
) -> Result<Vec<Admitted>> {
    let mut out = Vec::new();
    for c in candidates {
        if zeta.c >= c.timing.g || !certifier.covers(&c.timing) {
            continue;
        }
        let table = certifier.table(c.timing.h_ul, c.timing.h_dl)?;
        let phi = drift_bound(zeta, &c.cert, &c.timing, &table, lambda_sigma, noise)?;
        if phi <= 0.0 {
            out.push(Admitted {
                action: c.action,
                cert: c.cert,
                timing: c.timing,
                slot_cost: c.slot_cost,
                phi,
                utility: 0.0,
            });
        }
    }
    Ok(out)
}

/// How a zero choice is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroKind {
    Hold,
    SafeMode,
}

/// Drift of the zero choice: nominal hold when the held state stays in the
/// domain, otherwise the safe-mode drift.
pub fn zero_baseline(zeta: &LoopState, law: &SafeMode, alpha_hold: f64, lambda_sigma: f64) -> (f64, ZeroKind) {
    if hold_admissible(zeta, &law.domain, alpha_hold, law.sigma_proc_tr) {
        let held = hold_map(zeta, alpha_hold, law.sigma_proc_tr);
        (augmented_w(&held, lambda_sigma) - augmented_w(zeta, lambda_sigma), ZeroKind::Hold)
    } else {
        (law.drift(zeta), ZeroKind::SafeMode)
    }
}

pub fn utility(baseline: f64, phi: f64) -> f64 {
    baseline - phi
}

/// Drops every member dominated by another (stronger certificate at no
/// greater cost). Panics if a dominating action has lower utility.
pub fn prune_frontier(set: &[Admitted]) -> Vec<Admitted> {
    let mut keep = Vec::with_capacity(set.len());
    'outer: for (i, p) in set.iter().enumerate() {
        for (j, other) in set.iter().enumerate() {
            if i != j && action_dominates((&other.cert, other.slot_cost), (&p.cert, p.slot_cost)) {
                assert!(
                    other.utility >= p.utility && other.slot_cost <= p.slot_cost,
                    "dominance without utility alignment: {other:?} over {p:?}"
                );
                continue 'outer;
            }
        }
        keep.push(p.clone());
    }
    keep
}

/// One non-zero choice of a loop in the knapsack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub slot_cost: u32,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSolution {
    /// Selected choice index per loop; `None` is the zero choice.
    pub picks: Vec<Option<usize>>,
    pub value: f64,
    pub used: u32,
    /// Inner-loop evaluations.
    pub ops: u64,
}

#[derive(Clone, Copy)]
struct Cell {
    value: f64,
    used: u32,
    pick: Option<usize>,
}

/// Exact maximum of total utility under the slot budget. Every loop has an
/// implicit zero choice. Ties prefer smaller slot usage, then the zero
/// choice, then the lower choice index.
pub fn dp_allocate(sets: &[Vec<Choice>], budget: u32) -> DpSolution {
    let width = budget as usize + 1;
    let mut prev = vec![Cell { value: 0.0, used: 0, pick: None }; width];
    let mut table: Vec<Vec<Cell>> = Vec::with_capacity(sets.len());
    let mut ops = 0u64;
    for set in sets {
        let mut cur: Vec<Cell> = prev.iter().map(|c| Cell { pick: None, ..*c }).collect();
        for (b, cell) in cur.iter_mut().enumerate() {
            for (k, ch) in set.iter().enumerate() {
                ops += 1;
                let s = ch.slot_cost as usize;
                if s > b {
                    continue;
                }
                let base = prev[b - s];
                let cand = Cell { value: base.value + ch.utility, used: base.used + ch.slot_cost, pick: Some(k) };
                if cand.value > cell.value || (cand.value == cell.value && cand.used < cell.used) {
                    *cell = cand;
                }
            }
            ops += 1;
        }
        table.push(cur.clone());
        prev = cur;
    }
    let last = prev[budget as usize];
    let mut picks = vec![None; sets.len()];
    let mut b = budget as usize;
    for i in (0..sets.len()).rev() {
        let cell = table[i][b];
        picks[i] = cell.pick;
        if let Some(k) = cell.pick {
            b -= sets[i][k].slot_cost as usize;
        }
    }
    DpSolution { picks, value: last.value, used: last.used, ops }
}

/// Per-loop outcome of one allocation round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "action")]
pub enum Decision {
    /// Admitted certified action.
    Serve(usize),
    /// Uncertified action on leftover slots, to resynchronize the loop.
    Sync(usize),
    Hold,
    SafeMode,
}

impl Decision {
    pub fn action(&self) -> Option<usize> {
        match *self {
            Decision::Serve(a) | Decision::Sync(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopInput<'a> {
    pub zeta: &'a LoopState,
    pub candidates: Vec<Candidate>,
    /// All enumerated actions, certified or not.
    pub actions: &'a [CommAction],
}

#[derive(Debug, Clone, Copy)]
pub struct AllocParams {
    pub lambda_sigma: f64,
    pub noise: NoiseTraces,
    pub safe: SafeMode,
    pub alpha_hold: f64,
    pub budget: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleAllocation {
    pub decisions: Vec<Decision>,
    /// Admitted set sizes before pruning.
    pub admitted: Vec<usize>,
    pub frontier: Vec<usize>,
    /// Drift bound of each served action.
    pub phi: Vec<Option<f64>>,
    pub baseline: Vec<f64>,
    pub used: u32,
    pub value: f64,
    pub ops: u64,
}

/// Cheapest action, lowest index on ties.
pub fn cheapest(actions: &[CommAction]) -> Option<usize> {
    actions.iter().enumerate().min_by_key(|&(i, a)| (a.slot_cost, i)).map(|(i, _)| i)
}

/// Zero realization for a loop left unserved.
pub fn zero_decision(zeta: &LoopState, params: &AllocParams) -> Decision {
    match zero_baseline(zeta, &params.safe, params.alpha_hold, params.lambda_sigma).1 {
        ZeroKind::Hold if zeta.mode == Mode::Nominal => Decision::Hold,
        _ => Decision::SafeMode,
    }
}

/// Loops that must resynchronize before they can be certified again: in
/// safe mode, or with the failure counter past every candidate's tolerance.
pub fn needs_sync(l: &LoopInput) -> bool {
    l.zeta.mode == Mode::SafeMode || l.candidates.iter().all(|c| l.zeta.c >= c.timing.g)
}

/// Certified-frontier allocation for one cycle. Loops that need
/// resynchronization are offered their cheapest action first; the DP runs on
/// the remaining budget.
pub fn allocate_cycle(loops: &[LoopInput], certifier: &Certifier, params: &AllocParams) -> Result<CycleAllocation> {
    let mut pre = vec![Decision::Hold; loops.len()];
    let reserved = sync_leftovers(loops, &mut pre, 0, params.budget, needs_sync);
    let mut frontiers = Vec::with_capacity(loops.len());
    let mut admitted = Vec::with_capacity(loops.len());
    let mut baseline = Vec::with_capacity(loops.len());
    for (l, d) in loops.iter().zip(&pre) {
        let (b, _) = zero_baseline(l.zeta, &params.safe, params.alpha_hold, params.lambda_sigma);
        let mut safe = admit_safe(l.zeta, &l.candidates, certifier, params.lambda_sigma, params.noise)?;
        for a in &mut safe {
            a.utility = utility(b, a.phi);
        }
        admitted.push(safe.len());
        frontiers.push(if d.action().is_some() { Vec::new() } else { prune_frontier(&safe) });
        baseline.push(b);
    }
    let sets: Vec<Vec<Choice>> = frontiers
        .iter()
        .map(|f| f.iter().map(|a| Choice { slot_cost: a.slot_cost, utility: a.utility }).collect())
        .collect();
    let sol = dp_allocate(&sets, params.budget - reserved);
    let used = sol.used + reserved;
    if used > params.budget {
        return Err(Error::OverBudget { used, budget: params.budget });
    }
    let mut decisions = Vec::with_capacity(loops.len());
    let mut phi = Vec::with_capacity(loops.len());
    for (i, l) in loops.iter().enumerate() {
        match (sol.picks[i], pre[i]) {
            (Some(k), _) => {
                decisions.push(Decision::Serve(frontiers[i][k].action));
                phi.push(Some(frontiers[i][k].phi));
            }
            (None, Decision::Sync(k)) => {
                decisions.push(Decision::Sync(k));
                phi.push(None);
            }
            _ => {
                decisions.push(zero_decision(l.zeta, params));
                phi.push(None);
            }
        }
    }
    Ok(CycleAllocation {
        decisions,
        admitted,
        frontier: frontiers.iter().map(Vec::len).collect(),
        phi,
        baseline,
        used,
        value: sol.value,
        ops: sol.ops,
    })
}

/// Offers slots beyond `used` to unserved loops matching `needs`, largest `V`
/// first, each taking its cheapest action. Returns total slots used.
pub fn sync_leftovers(
    loops: &[LoopInput],
    decisions: &mut [Decision],
    mut used: u32,
    budget: u32,
    needs: impl Fn(&LoopInput) -> bool,
) -> u32 {
    let mut order: Vec<usize> =
        (0..loops.len()).filter(|&i| decisions[i].action().is_none() && needs(&loops[i])).collect();
    order.sort_by(|&a, &b| loops[b].zeta.v.total_cmp(&loops[a].zeta.v).then(a.cmp(&b)));
    for i in order {
        if let Some(k) = cheapest(loops[i].actions) {
            let s = loops[i].actions[k].slot_cost;
            if used + s <= budget {
                decisions[i] = Decision::Sync(k);
                used += s;
            }
        }
    }
    used
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::SafeDomain;

    fn cert(rho: f64) -> QosCertificate {
        QosCertificate { d_ul: 0.01, d_dl: 0.01, t_cert: 1.0, rho_ul: rho, rho_dl: rho }
    }

    fn timing(h_ul: usize) -> TimingTriple {
        TimingTriple { h_ul, h_dl: 1, g: 4 }
    }

    #[test]
    fn covariance_envelope_examples() {
        let noise = NoiseTraces { proc: 0.01, meas: 0.03 };
        let z = LoopState::from_coords(1.0, 0.01, 0);
        assert!((covariance_envelope(&z, &cert(0.5), &timing(0), noise) - 0.02).abs() < 1e-15);
        let z = LoopState::from_coords(1.0, 0.05, 0);
        assert!((covariance_envelope(&z, &cert(0.9), &timing(0), noise) + 0.017).abs() < 1e-15);
        // branches meet at zero gap when service is certain
        let z = LoopState::from_coords(1.0, 0.02, 0);
        assert!((covariance_envelope(&z, &cert(1.0), &timing(0), noise) - 0.01).abs() < 1e-15);
    }

    fn law() -> SafeMode {
        SafeMode {
            domain: SafeDomain { v_max: 100.0, sigma_min: 0.0, sigma_max: 10.0 },
            v_floor: 1e-3,
            contraction: 0.95,
            sigma_proc_tr: 0.01,
            lambda_sigma: 1.0,
        }
    }

    #[test]
    fn baseline_branches() {
        let l = law();
        let z = LoopState::from_coords(5.0, 0.1, 0);
        let (b, k) = zero_baseline(&z, &l, 1.0, 1.0);
        assert_eq!(k, ZeroKind::Hold);
        assert!((b - 0.01).abs() < 1e-15);
        let (b, _) = zero_baseline(&z, &l, 1.2, 1.0);
        assert!((b - (0.2 * 5.0 + 0.01)).abs() < 1e-12);
        let z = LoopState::from_coords(90.0, 0.1, 0);
        let (b, k) = zero_baseline(&z, &l, 1.2, 1.0);
        assert_eq!(k, ZeroKind::SafeMode);
        assert_eq!(b, l.drift(&z));
        assert_eq!(utility(b, b), 0.0);
        assert!((utility(0.03, -1.017) - 1.047).abs() < 1e-12);
    }

    fn adm(rho: f64, cost: u32, u: f64) -> Admitted {
        Admitted { action: 0, cert: cert(rho), timing: timing(1), slot_cost: cost, phi: -u, utility: u }
    }

    #[test]
    fn pruning_examples() {
        assert_eq!(prune_frontier(&[adm(0.9, 3, 1.0)]).len(), 1);
        let kept = prune_frontier(&[adm(0.9, 4, 1.0), adm(0.9, 6, 1.0)]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].slot_cost, 4);
        let mut a = adm(0.9, 4, 1.0);
        a.cert.rho_dl = 0.8;
        let mut b = adm(0.9, 4, 1.0);
        b.cert.rho_ul = 0.8;
        assert_eq!(prune_frontier(&[a, b]).len(), 2);
    }

    #[test]
    #[should_panic(expected = "utility alignment")]
    fn pruning_checks_alignment() {
        prune_frontier(&[adm(0.95, 3, 0.5), adm(0.9, 4, 1.0)]);
    }

    #[test]
    fn dp_examples() {
        let two = vec![Choice { slot_cost: 1, utility: 2.0 }, Choice { slot_cost: 2, utility: 3.0 }];
        let s = dp_allocate(&[two.clone(), two.clone()], 0);
        assert_eq!((s.picks.clone(), s.value), (vec![None, None], 0.0));
        let s = dp_allocate(&[two.clone(), two], 2);
        assert_eq!(s.picks, vec![Some(0), Some(0)]);
        assert_eq!(s.value, 4.0);
        let s = dp_allocate(&[vec![Choice { slot_cost: 3, utility: 5.0 }]], 2);
        assert_eq!(s.picks, vec![None]);
        // equal value: fewer slots wins
        let s = dp_allocate(&[vec![Choice { slot_cost: 3, utility: 1.0 }, Choice { slot_cost: 1, utility: 1.0 }]], 5);
        assert_eq!((s.picks, s.used), (vec![Some(1)], 1));
    }

    #[test]
    fn dp_ops_are_linear() {
        let set: Vec<Choice> = (1..=5).map(|s| Choice { slot_cost: s, utility: s as f64 }).collect();
        for n in [1usize, 4, 8] {
            for budget in [10u32, 40] {
                let sets = vec![set.clone(); n];
                let s = dp_allocate(&sets, budget);
                let bound = 2 * (budget as u64 + 1) * (sets.iter().map(|x| x.len() as u64 + 1).sum::<u64>());
                assert!(s.ops <= bound);
            }
        }
    }

    #[test]
    fn leftovers_go_to_safe_mode_loops() {
        let mut z = LoopState::from_coords(1.0, 0.1, 3);
        z.mode = Mode::SafeMode;
        let n = LoopState::from_coords(2.0, 0.1, 0);
        let cfg = crate::cert::TxConfig { n_re: 0, blocklength: 400 };
        let act = |s: u32| CommAction::new(vec![1, 0], vec![0, 1], cfg, cfg, s, s);
        let (a0, a1) = ([act(3), act(2)], [act(1)]);
        let loops = vec![
            LoopInput { zeta: &z, candidates: vec![], actions: &a0 },
            LoopInput { zeta: &n, candidates: vec![], actions: &a1 },
        ];
        let mut d = vec![Decision::SafeMode, Decision::Hold];
        let used = sync_leftovers(&loops, &mut d, 0, 4, |l| l.zeta.mode == Mode::SafeMode);
        assert_eq!(d, vec![Decision::Sync(1), Decision::Hold]);
        assert_eq!(used, 4);
    }
}
