//! Closed-loop swarm simulation: one deterministic trial per
//! `(config, policy, seed)`, plus the probing used to build calibration logs.

use std::collections::HashMap;

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::allocator::{AllocParams, Candidate, Decision, LoopInput, NoiseTraces};
use crate::baselines::{decide, PolicyContext, PolicyId};
use crate::cert::{certificate_dominates, CommAction};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::mission::Mission;
use crate::mjls::{Certifier, Outcome};
use crate::network::{execute_cycle, fading_db, pack_frame, threshold_db, Attempt, Building, LinkMap};
use crate::plant::{gaussian3, lqr_gain, swarm_rmse, LoopState, Mode, SafeDomain, SafeMode};
use crate::streams;
use crate::twin::{
    build_certificate, certificate_for_classes, enumerate_actions, predict, snr_bucket, CalibrationRecord, Certified,
    ClassDir, ClassKey, ConfidenceModel, TwinState,
};

/// `V` of an error of length `radius` held constant across the buffer, in
/// the worst direction.
pub fn corridor_level(x: &nalgebra::DMatrix<f64>, radius: f64) -> f64 {
    let stack = nalgebra::DMatrix::from_fn(x.nrows(), 3, |r, c| if r % 3 == c { 1.0 } else { 0.0 });
    let m = stack.transpose() * x * stack;
    crate::lmi::lambda_max(&m) * radius * radius
}

/// Everything shared by the trials of one experiment.
#[derive(Debug)]
pub struct Setup {
    pub config: Config,
    pub gain: Matrix3<f64>,
    pub certifier: Certifier,
    pub law: SafeMode,
}

impl Setup {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let c = &config.control;
        let t_s = config.mission.t_s;
        let gain = lqr_gain(t_s, [c.lqr_q; 3], [c.lqr_r; 3])?;
        let certifier = Certifier::build(c.h_max, c.epsilon, &Matrix3::identity(), &(gain * t_s))?;
        let v_max = corridor_level(&certifier.lkf.x, c.corridor_m);
        let law = SafeMode {
            domain: SafeDomain {
                v_max,
                sigma_min: config.sigma_meas_tr(),
                sigma_max: c.sigma_max_factor * config.sigma_meas_tr(),
            },
            v_floor: c.safe_v_floor * v_max,
            contraction: c.safe_contraction,
            sigma_proc_tr: config.sigma_proc_tr(),
            lambda_sigma: c.lambda_sigma,
        };
        Ok(Setup { config, gain, certifier, law })
    }

    pub fn params(&self) -> AllocParams {
        AllocParams {
            lambda_sigma: self.config.control.lambda_sigma,
            noise: NoiseTraces { proc: self.config.sigma_proc_tr(), meas: self.config.sigma_meas_tr() },
            safe: self.law,
            alpha_hold: self.certifier.alpha_hold,
            budget: self.config.tdma.slots,
        }
    }

    pub fn v_max(&self) -> f64 {
        self.law.domain.v_max
    }
}

/// One executed cycle of a loop served by an admitted certified action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmittedStep {
    #[serde(rename = "loop")]
    pub loop_id: usize,
    pub phi: f64,
    /// Realized change of `V + λ_Σ tr Σ`.
    pub dw: f64,
    /// Realized bottleneck SNR on both routes at or above the certified
    /// worst case.
    pub covered: bool,
    /// Failure counter still below the certified tolerance.
    pub interaction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRow {
    pub cycle: usize,
    pub rmse: f64,
    pub v_norm: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Delivered downlink command delays, s, from frame start.
    pub dl_delays: Vec<f64>,
    pub slots_used: u32,
    /// Loops with a non-empty safe set (certified allocator only).
    pub admitted: usize,
    pub served: usize,
    /// Served certified loops whose counter reached the tolerance.
    pub violations: usize,
    pub steps: Vec<AdmittedStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub policy: PolicyId,
    pub rows: Vec<CycleRow>,
}

impl TrialRecord {
    /// Line-delimited JSON, one row per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            #[derive(Serialize)]
            struct Line<'a> {
                seed: u64,
                policy: PolicyId,
                #[serde(flatten)]
                row: &'a CycleRow,
            }
            s.push_str(&serde_json::to_string(&Line { seed: self.seed, policy: self.policy, row: r }).expect("row"));
            s.push('\n');
        }
        s
    }

    pub fn mean_rmse(&self) -> f64 {
        self.rows.iter().map(|r| r.rmse).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

struct Uav {
    position: Vector3<f64>,
    command: Vector3<f64>,
    estimate: Vector3<f64>,
    /// Ground-side lifted error, from estimates.
    history: Vec<Vector3<f64>>,
    /// True lifted error, for metrics only.
    truth: Vec<Vector3<f64>>,
    zeta: LoopState,
}

fn lifted(history: &[Vector3<f64>]) -> DVector<f64> {
    DVector::from_iterator(history.len() * 3, history.iter().flat_map(|e| e.iter().copied()))
}

/// Bernoulli decode rule of one hop attempt on the true channel.
fn decodes(truth: &LinkMap, cfg: &Config, seed: u64, cycle: usize, a: &Attempt) -> bool {
    let link = truth.get(a.from, a.to);
    link.available
        && link.snr_db + fading_db(seed, cycle, a.from, a.to, a.use_idx, a.attempt)
            >= threshold_db(&cfg.radio, a.blocklength)
}

fn gcs(config: &Config) -> Vector3<f64> {
    Vector3::from(config.mission.gcs)
}

/// Certified candidates of one loop, in action order.
pub fn certify_loop(
    actions: &[CommAction],
    twin: &TwinState,
    model: &ConfidenceModel,
    config: &Config,
) -> Vec<(usize, Certified)> {
    actions
        .iter()
        .enumerate()
        .filter_map(|(k, a)| build_certificate(a, twin, model, config).ok().map(|c| (k, c)))
        .collect()
}

/// Runs one trial. With `probe` set, every loop also probes a fixed
/// transmission configuration on each candidate route in isolation and the
/// outcomes are appended as calibration records.
pub fn simulate(
    setup: &Setup,
    model: Option<&ConfidenceModel>,
    policy: PolicyId,
    seed: u64,
    mut probe: Option<&mut Vec<CalibrationRecord>>,
) -> Result<TrialRecord> {
    let cfg = &setup.config;
    if policy != PolicyId::FixedService && model.is_none() {
        return Err(Error::Config(format!("policy {policy} needs a calibrated model")));
    }
    let t_s = cfg.mission.t_s;
    let n = cfg.mission.n_uav;
    let mission = Mission::new(cfg, seed);
    let building = Building { half_width: cfg.mission.building_half_width, height: cfg.mission.building_height };
    let lkf = &setup.certifier.lkf;
    let depth = lkf.depth;
    let params = setup.params();
    let v_max = setup.v_max();
    let proc = Matrix3::identity() * cfg.control.proc_var;
    let meas = Matrix3::identity() * cfg.control.meas_var;
    let lam = cfg.control.lambda_sigma;
    let hold_last = policy == PolicyId::DyntxHlc;
    let tx_configs: Vec<(u32, u32)> =
        cfg.tdma.retx_depths.iter().flat_map(|&r| cfg.tdma.blocklengths.iter().map(move |&b| (r, b))).collect();

    let mut uavs: Vec<Uav> = (0..n)
        .map(|i| {
            let r = mission.reference(0.0, i)?;
            let init = Matrix3::identity() * cfg.control.initial_error_std.powi(2);
            let position = r.position + gaussian3(&init, &mut streams::stream(seed, streams::INITIAL, &[i as u64]));
            let e = position - r.position;
            let history = vec![e; depth + 1];
            let mut zeta = LoopState::from_coords(0.0, cfg.sigma_meas_tr(), 0);
            zeta.z = lifted(&history);
            zeta.v = lkf.v(&zeta.z);
            Ok(Uav { position, command: Vector3::zeros(), estimate: position, truth: history.clone(), history, zeta })
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(cfg.cycles());
    for k in 0..cfg.cycles() {
        let t = k as f64 * t_s;
        let refs: Vec<_> = (0..n).map(|i| mission.reference(t, i)).collect::<Result<_>>()?;
        let next: Vec<_> = (0..n).map(|i| mission.reference(t + t_s, i)).collect::<Result<_>>()?;

        let mut est_nodes = vec![gcs(cfg)];
        est_nodes.extend(uavs.iter().map(|u| u.estimate));
        let twin = predict(&est_nodes, cfg, seed, k);
        let mut true_nodes = vec![gcs(cfg)];
        true_nodes.extend(uavs.iter().map(|u| u.position));
        let truth = LinkMap::build(&true_nodes, &cfg.radio, &building, seed);

        let actions: Vec<Vec<CommAction>> = (0..n).map(|i| enumerate_actions(i, &twin, cfg)).collect::<Result<_>>()?;
        let certified: Vec<Vec<(usize, Certified)>> = match model {
            Some(m) => actions.iter().map(|a| certify_loop(a, &twin, m, cfg)).collect(),
            None => vec![Vec::new(); n],
        };

        if let Some(log) = probe.as_deref_mut() {
            for i in 0..n {
                for &(n_re, blocklength) in &tx_configs {
                    probe_loop(cfg, seed, k, i, n_re, blocklength, &twin, &truth, log)?;
                }
            }
        }

        let inputs: Vec<LoopInput> = (0..n)
            .map(|i| LoopInput {
                zeta: &uavs[i].zeta,
                candidates: certified[i]
                    .iter()
                    .map(|(a, c)| Candidate {
                        action: *a,
                        cert: c.cert,
                        timing: c.timing,
                        slot_cost: actions[i][*a].slot_cost,
                    })
                    .collect(),
                actions: &actions[i],
            })
            .collect();
        let ctx = PolicyContext {
            cycle: k,
            params: &params,
            certifier: &setup.certifier,
            dyntx_edges: cfg.baselines.dyntx_edges,
        };
        let (decisions, used, alloc) = decide(policy, &inputs, &ctx)?;
        if used > cfg.tdma.slots {
            return Err(Error::OverBudget { used, budget: cfg.tdma.slots });
        }

        let served: Vec<(usize, u32)> = decisions
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.action().map(|a| (i, actions[i][a].slot_cost)))
            .collect();
        let frame = pack_frame(&served, cfg.tdma.slots, cfg.tau_slot())?;
        let chosen: HashMap<usize, &CommAction> =
            served.iter().map(|&(i, _)| (i, &actions[i][decisions[i].action().unwrap()])).collect();
        let outcomes = execute_cycle(&frame, &chosen, &mut |a| decodes(&truth, cfg, seed, k, a));
        let by_loop: HashMap<usize, _> = outcomes.iter().map(|o| (o.loop_id, o)).collect();

        let mut dl_delays = Vec::new();
        let mut steps = Vec::new();
        let mut violations = 0;
        for i in 0..n {
            let u = &mut uavs[i];
            let (r, r1) = (&refs[i], &next[i]);
            let out = by_loop.get(&i);
            let ul = out.is_some_and(|o| matches!(o.outcome, Outcome::Both | Outcome::UlOnly));
            let both = out.is_some_and(|o| o.outcome == Outcome::Both);
            let dl_at = out.and_then(|o| o.command_delay);
            let w_before = u.zeta.v + lam * u.zeta.sigma;

            if decisions[i] == Decision::SafeMode {
                u.zeta.mode = Mode::SafeMode;
            }
            if ul {
                let y =
                    u.position + gaussian3(&meas, &mut streams::stream(seed, streams::MEASURE, &[i as u64, k as u64]));
                u.estimate = y;
            }
            let resync = u.zeta.mode == Mode::SafeMode && both;
            let nominal = u.zeta.mode == Mode::Nominal || resync;
            let plan = r1.position - r.position;
            // corrections ride on the onboard plan; a correction lives for one
            // cycle unless the policy holds the last one
            let correction = if nominal {
                match dl_at {
                    Some(d) => {
                        let new = -(setup.gain * (u.estimate - r.position));
                        let disp = u.command * d + new * (t_s - d);
                        u.command = if hold_last { new } else { Vector3::zeros() };
                        dl_delays.push(d);
                        disp
                    }
                    None => {
                        let disp = u.command * t_s;
                        if !hold_last {
                            u.command = Vector3::zeros();
                        }
                        disp
                    }
                }
            } else {
                let noise = Matrix3::identity() * cfg.control.safe_gnss_std.powi(2);
                let fix =
                    u.position + gaussian3(&noise, &mut streams::stream(seed, streams::ONBOARD, &[i as u64, k as u64]));
                u.command = Vector3::zeros();
                -(setup.gain * cfg.control.safe_gain_scale * (fix - r.position)) * t_s
            };
            let w = gaussian3(&proc, &mut streams::stream(seed, streams::PROCESS, &[i as u64, k as u64]));
            u.position += plan + correction + w + mission.gust_displacement(r);
            // the ground side knows delivered corrections but not onboard ones
            u.estimate += plan + if nominal { correction } else { Vector3::zeros() };

            u.zeta.sigma = crate::plant::covariance_step(u.zeta.sigma, ul, 1, cfg.sigma_proc_tr(), cfg.sigma_meas_tr());
            u.zeta.last_sample_age = if ul { 0 } else { u.zeta.last_sample_age + 1 };
            u.zeta.c = if both { 0 } else { u.zeta.c + 1 };
            if resync {
                u.zeta.mode = Mode::Nominal;
            }
            u.history.rotate_right(1);
            u.history[0] = u.estimate - r1.position;
            u.zeta.z = lifted(&u.history);
            u.truth.rotate_right(1);
            u.truth[0] = u.position - r1.position;
            u.zeta.v = lkf.v(&u.zeta.z);

            if let Decision::Serve(a) = decisions[i] {
                if let Some((_, c)) = certified[i].iter().find(|(k, _)| *k == a) {
                    let act = &actions[i][a];
                    let interaction = u.zeta.c < c.timing.g;
                    if !interaction {
                        violations += 1;
                    }
                    let q = model.map(|m| m.snr_quantile_db).unwrap_or(0.0);
                    let covered = truth.bottleneck_db(&act.ul_route) >= twin.links.bottleneck_db(&act.ul_route) - q
                        && truth.bottleneck_db(&act.dl_route) >= twin.links.bottleneck_db(&act.dl_route) - q;
                    let phi = alloc.as_ref().and_then(|al| al.phi[i]).unwrap_or(f64::NAN);
                    if policy == PolicyId::Safe {
                        steps.push(AdmittedStep {
                            loop_id: i,
                            phi,
                            dw: u.zeta.v + lam * u.zeta.sigma - w_before,
                            covered,
                            interaction,
                        });
                    }
                }
            }
        }
        let positions: Vec<_> = uavs.iter().map(|u| u.position).collect();
        let targets: Vec<_> = next.iter().map(|r| r.position).collect();
        rows.push(CycleRow {
            cycle: k,
            rmse: swarm_rmse(&positions, &targets)?,
            v_norm: uavs.iter().map(|u| lkf.v(&lifted(&u.truth)) / v_max).collect(),
            sigma: uavs.iter().map(|u| u.zeta.sigma).collect(),
            dl_delays,
            slots_used: used,
            admitted: alloc.as_ref().map(|a| a.admitted.iter().filter(|&&x| x > 0).count()).unwrap_or(0),
            served: served.len(),
            violations,
            steps,
        });
    }
    Ok(TrialRecord { seed, policy, rows })
}

/// Probes a transmission configuration on every candidate route pair of
/// loop `i` in isolation against the true channel.
#[allow(clippy::too_many_arguments)]
fn probe_loop(
    cfg: &Config,
    seed: u64,
    cycle: usize,
    i: usize,
    n_re: u32,
    blocklength: u32,
    twin: &TwinState,
    truth: &LinkMap,
    log: &mut Vec<CalibrationRecord>,
) -> Result<()> {
    let per = crate::cert::slot_cost_blocks(blocklength, cfg.tdma.b_eff, cfg.tdma.t_slot)?;
    let tx = crate::cert::TxConfig { n_re, blocklength };
    for (rank, ul) in twin.routes[i].iter().enumerate() {
        let dl: Vec<usize> = ul.iter().rev().copied().collect();
        let action = CommAction::new(ul.clone(), dl.clone(), tx, tx, per, per);
        if action.slot_cost > cfg.tdma.slots {
            continue;
        }
        let frame = pack_frame(&[(i, action.slot_cost)], cfg.tdma.slots, cfg.tau_slot())?;
        let map = HashMap::from([(i, &action)]);
        let out = execute_cycle(&frame, &map, &mut |a| decodes(truth, cfg, seed, cycle, a)).remove(0);
        let bucket = |snr: f64| snr_bucket(snr, cfg.cert.snr_bucket_db);
        let key = |hops: usize, snr: f64| ClassKey { hops: hops as u8, snr_bucket: bucket(snr), n_re, blocklength };
        let (ru, rd) = (truth.bottleneck_db(ul), truth.bottleneck_db(&dl));
        let (pu, pd) = (twin.links.bottleneck_db(ul), twin.links.bottleneck_db(&dl));
        let hops = ul.len() - 1;
        let ul_ok = matches!(out.outcome, Outcome::Both | Outcome::UlOnly);
        let dl_ok = matches!(out.outcome, Outcome::Both | Outcome::DlOnly);
        for (direction, met, real, pred) in [
            (ClassDir::Ul, ul_ok, ru, pu),
            (ClassDir::Dl, dl_ok, rd, pd),
            (ClassDir::Bi, ul_ok && dl_ok, ru.min(rd), pu.min(pd)),
        ] {
            log.push(CalibrationRecord {
                seed,
                cycle,
                loop_id: i,
                route: rank,
                class: key(hops, real),
                direction,
                met,
                realized_snr_db: real,
                predicted_snr_db: pred,
            });
        }
    }
    Ok(())
}

/// Calibration log over `seeds`, moving the swarm under round-robin service.
pub fn calibration_log(setup: &Setup, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<CalibrationRecord>> {
    let mut all = Vec::new();
    for s in seeds {
        let mut log = Vec::new();
        simulate(setup, None, PolicyId::FixedService, s, Some(&mut log))?;
        all.extend(log);
    }
    Ok(all)
}

/// Split-sample coverage counts on held-out logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Directional records whose realized SNR lies inside the interval.
    pub snr_records: usize,
    pub snr_covered: usize,
    /// Probes where the certificate built from the realized classes
    /// dominates the one built from the predicted worst case.
    pub cert_pairs: usize,
    pub cert_dominated: usize,
}

impl CoverageReport {
    pub fn snr_rate(&self) -> f64 {
        self.snr_covered as f64 / self.snr_records.max(1) as f64
    }

    pub fn cert_rate(&self) -> f64 {
        self.cert_dominated as f64 / self.cert_pairs.max(1) as f64
    }
}

pub fn holdout_coverage(config: &Config, model: &ConfidenceModel, log: &[CalibrationRecord]) -> CoverageReport {
    let mut rep = CoverageReport { snr_records: 0, snr_covered: 0, cert_pairs: 0, cert_dominated: 0 };
    for r in log.iter().filter(|r| r.direction != ClassDir::Bi) {
        rep.snr_records += 1;
        if (r.predicted_snr_db - r.realized_snr_db).abs() <= model.snr_quantile_db {
            rep.snr_covered += 1;
        }
    }
    // probes are logged as consecutive (UL, DL, bidirectional) triples
    for t in log.chunks_exact(3) {
        let worst = |r: &CalibrationRecord| ClassKey {
            snr_bucket: snr_bucket(r.predicted_snr_db - model.snr_quantile_db, model.bucket_db),
            ..r.class
        };
        let realized = [t[0].class, t[1].class, t[2].class];
        let predicted = [worst(&t[0]), worst(&t[1]), worst(&t[2])];
        let Ok(c) = certificate_for_classes(model, predicted, 0.0, 0.0, config) else { continue };
        rep.cert_pairs += 1;
        if let Ok(r) = certificate_for_classes(model, realized, 0.0, 0.0, config) {
            if certificate_dominates(&r.cert, &c.cert) {
                rep.cert_dominated += 1;
            }
        }
    }
    rep
}
