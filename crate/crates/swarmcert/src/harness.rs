//! Batch driver: calibration, matched-seed trials, aggregation, ECDF export
//! and the exhaustive allocation oracle.
//!
//! Percentiles are nearest-rank: the `p`-quantile of `n` sorted samples is
//! the sample at rank `ceil(p n)` (1-based, clamped to `1..=n`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{admit_safe, prune_frontier, utility, zero_baseline, AllocParams, Candidate, Choice};
use crate::baselines::PolicyId;
use crate::cert::{timing_indices, QosCertificate};
use crate::error::{Error, Result};
use crate::mjls::Certifier;
use crate::plant::LoopState;
use crate::sim::{calibration_log, simulate, Setup, TrialRecord};
use crate::twin::{calibrate, nearest_rank, CalibrationRecord, ConfidenceModel};

/// Largest oracle instance, in loops.
pub const ORACLE_MAX_LOOPS: usize = 6;
/// Largest oracle instance, in enumerated combinations.
pub const ORACLE_MAX_COMBINATIONS: u64 = 1_000_000;

/// Probes the calibration seeds and fits the confidence model.
pub fn calibrate_model(setup: &Setup) -> Result<(Vec<CalibrationRecord>, ConfidenceModel)> {
    let [a, b] = setup.config.seeds.calibration;
    let log = calibration_log(setup, a..b)?;
    let model = calibrate(&log, setup.config.cert.beta, &setup.config)?;
    Ok((log, model))
}

/// Probes the held-out seeds.
pub fn holdout_log(setup: &Setup) -> Result<Vec<CalibrationRecord>> {
    let [a, b] = setup.config.seeds.holdout;
    calibration_log(setup, a..b)
}

pub fn run_trial(setup: &Setup, model: &ConfidenceModel, policy: PolicyId, seed: u64) -> Result<TrialRecord> {
    simulate(setup, Some(model), policy, seed, None)
}

/// Pooled per-policy statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: PolicyId,
    pub trials: usize,
    pub cycles: usize,
    pub mean_rmse: f64,
    pub p95_rmse: f64,
    pub p95_v_norm: f64,
    /// NaN when no command was delivered.
    pub mean_dl_delay: f64,
    pub p95_dl_delay: f64,
}

/// Sample vectors of one policy in `(seed, cycle, loop)` order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Samples {
    pub rmse: Vec<f64>,
    pub v_norm: Vec<f64>,
    pub dl_delay: Vec<f64>,
}

impl Samples {
    pub fn of<'a>(trials: impl IntoIterator<Item = &'a TrialRecord>) -> Self {
        let mut s = Samples::default();
        for t in trials {
            for r in &t.rows {
                s.rmse.push(r.rmse);
                s.v_norm.extend(&r.v_norm);
                s.dl_delay.extend(&r.dl_delays);
            }
        }
        s
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn p95(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        nearest_rank(values, 0.95)
    }
}

pub fn summarize_samples(policy: PolicyId, trials: usize, s: &Samples) -> PolicySummary {
    PolicySummary {
        policy,
        trials,
        cycles: s.rmse.len(),
        mean_rmse: mean(&s.rmse),
        p95_rmse: p95(&s.rmse),
        p95_v_norm: p95(&s.v_norm),
        mean_dl_delay: mean(&s.dl_delay),
        p95_dl_delay: p95(&s.dl_delay),
    }
}

/// Trials of a campaign, sorted by `(policy, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub trials: Vec<TrialRecord>,
}

impl Experiment {
    pub fn policies(&self) -> Vec<PolicyId> {
        let mut p: Vec<PolicyId> = self.trials.iter().map(|t| t.policy).collect();
        p.dedup();
        p
    }

    pub fn trials_of(&self, policy: PolicyId) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(move |t| t.policy == policy)
    }

    pub fn samples(&self, policy: PolicyId) -> Samples {
        Samples::of(self.trials_of(policy))
    }

    pub fn summary(&self) -> Vec<PolicySummary> {
        self.policies().into_iter().map(|p| summarize_samples(p, self.trials_of(p).count(), &self.samples(p))).collect()
    }
}

/// Runs every `(policy, seed)` pair on the rayon pool.
pub fn run_experiment(
    setup: &Setup,
    model: &ConfidenceModel,
    policies: &[PolicyId],
    seeds: &[u64],
) -> Result<Experiment> {
    let mut jobs: Vec<(PolicyId, u64)> = policies.iter().flat_map(|&p| seeds.iter().map(move |&s| (p, s))).collect();
    jobs.sort();
    jobs.dedup();
    let trials = jobs.par_iter().map(|&(p, s)| run_trial(setup, model, p, s)).collect::<Result<Vec<_>>>()?;
    Ok(Experiment { trials })
}

/// ECDF families written by [`write_outputs`].
pub const ECDF_FILES: [&str; 3] = ["ecdf_rmse.csv", "ecdf_v_norm.csv", "ecdf_dl_delay.csv"];

const SUMMARY_HEADER: &str = "policy,trials,cycles,mean_rmse,p95_rmse,p95_v_norm,mean_dl_delay,p95_dl_delay";

pub fn summary_csv(rows: &[PolicySummary]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.policy, r.trials, r.cycles, r.mean_rmse, r.p95_rmse, r.p95_v_norm, r.mean_dl_delay, r.p95_dl_delay
        )
        .unwrap();
    }
    s
}

fn ecdf_csv(exp: &Experiment, pick: fn(&Samples) -> &Vec<f64>) -> String {
    let mut s = String::from("policy,value\n");
    for p in exp.policies() {
        let samples = exp.samples(p);
        for v in pick(&samples) {
            writeln!(s, "{p},{v}").unwrap();
        }
    }
    s
}

/// Writes `trials.jsonl`, `summary.csv` and the ECDF sample files into `dir`.
pub fn write_outputs(dir: &Path, exp: &Experiment) -> Result<Vec<PolicySummary>> {
    fs::create_dir_all(dir)?;
    let jsonl: String = exp.trials.iter().map(TrialRecord::to_jsonl).collect();
    fs::write(dir.join("trials.jsonl"), jsonl)?;
    let summary = exp.summary();
    fs::write(dir.join("summary.csv"), summary_csv(&summary))?;
    let picks: [fn(&Samples) -> &Vec<f64>; 3] = [|s| &s.rmse, |s| &s.v_norm, |s| &s.dl_delay];
    for (name, pick) in ECDF_FILES.iter().zip(picks) {
        fs::write(dir.join(name), ecdf_csv(exp, pick))?;
    }
    Ok(summary)
}

/// Parses an ECDF file back into per-policy samples, in file order.
pub fn read_ecdf(text: &str) -> Result<Vec<(PolicyId, Vec<f64>)>> {
    let mut lines = text.lines();
    if lines.next() != Some("policy,value") {
        return Err(Error::Parse("missing ECDF header".into()));
    }
    let mut out: Vec<(PolicyId, Vec<f64>)> = Vec::new();
    for line in lines {
        let (p, v) = line.split_once(',').ok_or_else(|| Error::Parse(format!("bad row `{line}`")))?;
        let p: PolicyId = p.parse()?;
        let v: f64 = v.parse().map_err(|_| Error::Parse(format!("bad value `{v}`")))?;
        match out.last_mut() {
            Some((q, vs)) if *q == p => vs.push(v),
            _ => out.push((p, vec![v])),
        }
    }
    Ok(out)
}

/// Parses a `summary.csv`.
pub fn read_summary(text: &str) -> Result<Vec<PolicySummary>> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::Parse("missing summary header".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{s}`")));
    let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad count `{s}`")));
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Parse(format!("bad row `{line}`")));
            }
            Ok(PolicySummary {
                policy: f[0].parse()?,
                trials: int(f[1])?,
                cycles: int(f[2])?,
                mean_rmse: num(f[3])?,
                p95_rmse: num(f[4])?,
                p95_v_norm: num(f[5])?,
                mean_dl_delay: num(f[6])?,
                p95_dl_delay: num(f[7])?,
            })
        })
        .collect()
}

/// One loop of an allocation instance, as the oracle sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleLoop {
    /// Drift of the zero choice.
    pub zero_drift: f64,
    pub options: Vec<OracleOption>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleOption {
    pub slot_cost: u32,
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    /// Summed drift objective of the selection.
    pub objective: f64,
    /// Summed utility (zero drift minus drift), in loop order.
    pub utility: f64,
    pub picks: Vec<Option<usize>>,
    pub used: u32,
    pub combinations: u64,
}

/// Exhaustive search over every per-loop option or zero choice under the
/// slot budget. Minimizing the summed drift is maximizing the summed
/// utility; the latter is accumulated in loop order so that it is
/// bit-comparable with [`crate::allocator::dp_allocate`].
pub fn brute_force_p1(loops: &[OracleLoop], budget: u32) -> Result<OracleSolution> {
    if loops.len() > ORACLE_MAX_LOOPS {
        return Err(Error::InstanceTooLarge(format!("{} loops > {ORACLE_MAX_LOOPS}", loops.len())));
    }
    let mut combinations = 1u64;
    for l in loops {
        combinations = combinations.saturating_mul(l.options.len() as u64 + 1);
    }
    if combinations > ORACLE_MAX_COMBINATIONS {
        return Err(Error::InstanceTooLarge(format!("{combinations} combinations > {ORACLE_MAX_COMBINATIONS}")));
    }
    let mut digits = vec![0usize; loops.len()];
    let mut best: Option<(f64, u32, Vec<usize>)> = None;
    for _ in 0..combinations {
        let mut used = 0u32;
        let mut value = 0.0;
        for (l, &d) in loops.iter().zip(&digits) {
            if d > 0 {
                let o = l.options[d - 1];
                used += o.slot_cost;
                value += utility(l.zero_drift, o.drift);
            }
        }
        if used <= budget && best.as_ref().is_none_or(|(b, u, _)| value > *b || (value == *b && used < *u)) {
            best = Some((value, used, digits.clone()));
        }
        for (d, l) in digits.iter_mut().zip(loops) {
            *d += 1;
            if *d <= l.options.len() {
                break;
            }
            *d = 0;
        }
    }
    let (value, used, digits) = best.expect("the all-zero selection is always feasible");
    let objective =
        loops.iter().zip(&digits).map(|(l, &d)| if d == 0 { l.zero_drift } else { l.options[d - 1].drift }).sum();
    Ok(OracleSolution {
        objective,
        utility: value,
        picks: digits.iter().map(|&d| d.checked_sub(1)).collect(),
        used,
        combinations,
    })
}

/// A random allocation instance on real certifier tables.
#[derive(Debug, Clone)]
pub struct P1Instance {
    pub states: Vec<LoopState>,
    pub candidates: Vec<Vec<Candidate>>,
    pub budget: u32,
}

fn random_cert(rng: &mut impl Rng, h_max: usize, t_s: f64) -> QosCertificate {
    let mut d = || {
        let h = rng.gen_range(0..=h_max);
        if h == 0 {
            0.0
        } else {
            (h as f64 - rng.gen_range(0.0..0.9)) * t_s
        }
    };
    let d_ul = d();
    let d_dl = d();
    let g = rng.gen_range(1..=6);
    QosCertificate {
        d_ul,
        d_dl,
        t_cert: g as f64 * t_s,
        rho_ul: rng.gen_range(0.6..0.9999),
        rho_dl: rng.gen_range(0.6..0.9999),
    }
}

/// Weakens `q` in one or more coordinates.
fn weaken(rng: &mut impl Rng, q: &QosCertificate, h_max: usize, t_s: f64) -> QosCertificate {
    let mut w = *q;
    if rng.gen_bool(0.5) {
        w.rho_ul *= rng.gen_range(0.9..1.0);
    }
    if rng.gen_bool(0.5) {
        w.rho_dl *= rng.gen_range(0.9..1.0);
    }
    if rng.gen_bool(0.3) {
        w.d_ul = (w.d_ul + rng.gen_range(0.0..1.0) * t_s).min(h_max as f64 * t_s);
    }
    if rng.gen_bool(0.3) {
        w.t_cert += t_s;
    }
    w
}

/// Instance with `n` loops, budget `budget` and up to `max_actions`
/// candidates per loop. About a third of candidates are weakened copies of
/// another candidate at equal or higher cost, so pruning has work to do.
pub fn random_instance(
    rng: &mut impl Rng,
    setup: &Setup,
    n: usize,
    budget: u32,
    max_actions: usize,
) -> Result<P1Instance> {
    let t_s = setup.config.mission.t_s;
    let h_max = setup.config.control.h_max;
    let dom = setup.law.domain;
    let mut states = Vec::with_capacity(n);
    let mut candidates = Vec::with_capacity(n);
    for _ in 0..n {
        states.push(LoopState::from_coords(
            rng.gen_range(0.0..=0.5) * dom.v_max,
            rng.gen_range(dom.sigma_min..=dom.sigma_max),
            rng.gen_range(0..3),
        ));
        let k = rng.gen_range(1..=max_actions);
        let mut set: Vec<Candidate> = Vec::with_capacity(k);
        for a in 0..k {
            let (cert, slot_cost) = if a > 0 && rng.gen_bool(0.35) {
                let base = &set[rng.gen_range(0..a)];
                (weaken(rng, &base.cert, h_max, t_s), base.slot_cost + rng.gen_range(0..=1))
            } else {
                (random_cert(rng, h_max, t_s), rng.gen_range(1..=6))
            };
            let timing = timing_indices(&cert, t_s)?;
            set.push(Candidate { action: a, cert, timing, slot_cost });
        }
        candidates.push(set);
    }
    Ok(P1Instance { states, candidates, budget })
}

/// Safe sets of an instance with utilities and zero drifts filled in.
#[derive(Debug, Clone)]
pub struct SafeInstance {
    pub zero_drift: Vec<f64>,
    pub safe: Vec<Vec<crate::allocator::Admitted>>,
    pub budget: u32,
}

impl SafeInstance {
    pub fn build(inst: &P1Instance, certifier: &Certifier, params: &AllocParams) -> Result<Self> {
        let mut zero_drift = Vec::new();
        let mut safe = Vec::new();
        for (zeta, cands) in inst.states.iter().zip(&inst.candidates) {
            let (b, _) = zero_baseline(zeta, &params.safe, params.alpha_hold, params.lambda_sigma);
            let mut s = admit_safe(zeta, cands, certifier, params.lambda_sigma, params.noise)?;
            for a in &mut s {
                a.utility = utility(b, a.phi);
            }
            zero_drift.push(b);
            safe.push(s);
        }
        Ok(SafeInstance { zero_drift, safe, budget: inst.budget })
    }

    pub fn oracle_loops(&self) -> Vec<OracleLoop> {
        self.zero_drift
            .iter()
            .zip(&self.safe)
            .map(|(&z, s)| OracleLoop {
                zero_drift: z,
                options: s.iter().map(|a| OracleOption { slot_cost: a.slot_cost, drift: a.phi }).collect(),
            })
            .collect()
    }

    pub fn choices(&self, pruned: bool) -> Vec<Vec<Choice>> {
        self.safe
            .iter()
            .map(|s| {
                let set = if pruned { prune_frontier(s) } else { s.clone() };
                set.iter().map(|a| Choice { slot_cost: a.slot_cost, utility: a.utility }).collect()
            })
            .collect()
    }
}
