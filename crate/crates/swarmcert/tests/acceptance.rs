//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion over all of them.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swarmcert::allocator::{dp_allocate, drift_bound};
use swarmcert::baselines::PolicyId;
use swarmcert::cert::{certificate_dominates, timing_indices, QosCertificate};
use swarmcert::chain::{
    exact_run_probability, failure_tolerance, validate_interaction_certificate, ChainParams, Tolerance,
};
use swarmcert::harness::{
    brute_force_p1, calibrate_model, holdout_log, mean, random_instance, run_experiment, Experiment, SafeInstance,
};
use swarmcert::mjls::{build_run_matrix, mode_factor_raw, Certifier};
use swarmcert::plant::LoopState;
use swarmcert::sim::{holdout_coverage, Setup};
use swarmcert::Config;

const EIG_SLACK: f64 = 1e-12;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, pass: bool, detail: String) -> Verdict {
    println!("criterion {id:>2}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    Verdict { id, pass, detail }
}

fn lmi_validity(setup: &Setup) -> Verdict {
    let c = &setup.config.control;
    let t0 = Instant::now();
    let cert = Certifier::build(c.h_max, c.epsilon, &Matrix3::identity(), &(setup.gain * setup.config.mission.t_s));
    let elapsed = t0.elapsed();
    match cert {
        Ok(cert) => {
            let (res, lmin) = cert.lkf.residuals();
            let depth = cert.lkf.depth;
            let pass = res <= 1e-8 && lmin >= c.epsilon - 1e-10 && elapsed < Duration::from_secs(30) && depth <= 4;
            verdict(1, pass, format!("H {depth} residual {res:.3e} lambda_min {lmin:.6e} time {elapsed:.2?}"))
        }
        Err(e) => verdict(1, false, format!("solver error: {e}")),
    }
}

fn mode_order() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ordered = 0;
    let mut failures = Vec::new();
    for _ in 0..100 {
        let gains = Vector3::from_fn(|_, _| rng.gen_range(0.05..0.4));
        let h = rng.gen_range(0..=3);
        let res = Certifier::build(h, 1e-4, &Matrix3::identity(), &Matrix3::from_diagonal(&gains))
            .and_then(|c| c.all_tables());
        match res {
            Ok(tables) => {
                let ok = tables.iter().all(|t| {
                    let m = t.alpha_modes;
                    m.alpha_11 <= m.alpha_10 + EIG_SLACK
                        && m.alpha_10 <= m.alpha_00 + EIG_SLACK
                        && m.alpha_11 <= m.alpha_01 + EIG_SLACK
                        && m.alpha_01 <= m.alpha_00 + EIG_SLACK
                });
                if ok {
                    ordered += 1;
                } else {
                    failures.push(format!("{gains:?} h {h}"));
                }
            }
            Err(e) => failures.push(format!("{e}")),
        }
    }
    verdict(2, ordered == 100, format!("{ordered}/100 gains ordered on every grid pair {failures:?}"))
}

fn run_saturation(setup: &Setup) -> Verdict {
    let lkf = &setup.certifier.lkf;
    let depth = lkf.depth;
    let mut checked = 0;
    let mut bad = 0;
    for t in setup.certifier.all_tables().unwrap() {
        let sat = t.alpha_runs[depth - 1];
        for j in depth..depth + 5 {
            let mut f = 0.0f64;
            for hu in 0..=t.h_ul {
                for hd in 0..=t.h_dl {
                    let m = build_run_matrix(j, hu, hd, depth, &lkf.a, &lkf.bk).unwrap();
                    f = f.max(mode_factor_raw(&m, &lkf.x).unwrap());
                }
            }
            checked += 2;
            bad += usize::from(f.to_bits() != sat.to_bits());
            bad += usize::from(t.run_factor(j).to_bits() != sat.to_bits());
        }
    }
    verdict(3, bad == 0, format!("H {depth}, {checked} comparisons for j in H..H+4, {bad} mismatches"))
}

fn drift_monotonicity(setup: &Setup) -> Verdict {
    let cfg = &setup.config;
    let t_s = cfg.mission.t_s;
    let h_max = cfg.control.h_max;
    let params = setup.params();
    let dom = params.safe.domain;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = f64::NEG_INFINITY;
    let mut evaluated = 0;
    for _ in 0..200 {
        let delay = |rng: &mut ChaCha8Rng| {
            let h = rng.gen_range(0..=h_max);
            if h == 0 {
                0.0
            } else {
                (h as f64 - rng.gen_range(0.0..0.99)) * t_s
            }
        };
        let g = rng.gen_range(1..=6usize);
        let weak = QosCertificate::new(
            delay(&mut rng),
            delay(&mut rng),
            g as f64 * t_s,
            rng.gen_range(0.3..1.0),
            rng.gen_range(0.3..1.0),
        )
        .unwrap();
        let strong = QosCertificate::new(
            weak.d_ul * rng.gen_range(0.0..=1.0),
            weak.d_dl * rng.gen_range(0.0..=1.0),
            rng.gen_range(1..=g) as f64 * t_s,
            weak.rho_ul + (1.0 - weak.rho_ul) * rng.gen_range(0.0..=1.0),
            weak.rho_dl + (1.0 - weak.rho_dl) * rng.gen_range(0.0..=1.0),
        )
        .unwrap();
        assert!(certificate_dominates(&strong, &weak));
        let (ts, tw) = (timing_indices(&strong, t_s).unwrap(), timing_indices(&weak, t_s).unwrap());
        let table_s = setup.certifier.table(ts.h_ul, ts.h_dl).unwrap();
        let table_w = setup.certifier.table(tw.h_ul, tw.h_dl).unwrap();
        for _ in 0..20 {
            let zeta = LoopState::from_coords(
                rng.gen_range(0.0..=dom.v_max),
                rng.gen_range(dom.sigma_min..=dom.sigma_max),
                rng.gen_range(0..ts.g),
            );
            let ps = drift_bound(&zeta, &strong, &ts, &table_s, params.lambda_sigma, params.noise).unwrap();
            let pw = drift_bound(&zeta, &weak, &tw, &table_w, params.lambda_sigma, params.noise).unwrap();
            worst = worst.max(ps - pw);
            evaluated += 1;
        }
    }
    verdict(4, worst <= 1e-10, format!("{evaluated} evaluations, max Phi(q) - Phi(q~) = {worst:.3e}"))
}

fn interaction_certificate() -> Verdict {
    let mut cases = 0;
    let mut worst_ratio = 0.0f64;
    let mut exhaustive_ok = true;
    for h_t in 1..=12 {
        for mu1 in [0.001, 0.01, 0.05, 0.1, 0.2, 0.4] {
            for p11 in [0.0, 0.1, 0.3, 0.5, 0.8, 0.95] {
                for delta in [0.01, 0.05, 0.1] {
                    let p = ChainParams::new(mu1, p11, h_t, delta).unwrap();
                    let Tolerance::Finite(g) = failure_tolerance(&p) else { continue };
                    let pr = exact_run_probability(mu1, p11, h_t, g);
                    cases += 1;
                    worst_ratio = worst_ratio.max(pr / delta);
                    exhaustive_ok &= pr <= delta;
                }
            }
        }
    }
    let trials = 100_000;
    let mut mc = Vec::new();
    let mut mc_ok = true;
    for (k, (mu1, p11)) in [(0.05, 0.3), (0.1, 0.5), (0.02, 0.8)].into_iter().enumerate() {
        let p = ChainParams::new(mu1, p11, 16, 0.01).unwrap();
        let rate = validate_interaction_certificate(&p, mu1, p11, trials, 50 + k as u64).unwrap();
        let limit = p.delta_t + 3.0 * (p.delta_t / trials as f64).sqrt();
        mc_ok &= rate <= limit;
        mc.push(format!("{rate:.5}<={limit:.5}"));
    }
    verdict(
        5,
        exhaustive_ok && mc_ok,
        format!(
            "exhaustive {cases} cases H_T<=12, max Pr/delta {worst_ratio:.4}; MC 1e5 windows H_T=16: {}",
            mc.join(" ")
        ),
    )
}

fn allocation_exactness(setup: &Setup) -> (Verdict, Verdict) {
    let params = setup.params();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut exact, mut lossless, mut pruned_any, mut served_any) = (0, 0, 0, 0);
    for _ in 0..100 {
        let n = rng.gen_range(1..=5);
        let budget = rng.gen_range(1..=12);
        let inst = random_instance(&mut rng, setup, n, budget, 6).unwrap();
        let safe = SafeInstance::build(&inst, &setup.certifier, &params).unwrap();
        let oracle = brute_force_p1(&safe.oracle_loops(), budget).unwrap();
        let pruned = safe.choices(true);
        let full = safe.choices(false);
        let dp_pruned = dp_allocate(&pruned, budget);
        let dp_full = dp_allocate(&full, budget);
        exact += usize::from(dp_pruned.value == oracle.utility);
        lossless += usize::from(dp_pruned.value == dp_full.value);
        pruned_any += usize::from(pruned.iter().zip(&full).any(|(p, f)| p.len() < f.len()));
        served_any += usize::from(oracle.picks.iter().any(Option::is_some));
    }
    (
        verdict(
            6,
            exact == 100,
            format!("{exact}/100 DP(pruned) == brute force(unpruned); {served_any} instances serve a loop"),
        ),
        verdict(
            7,
            lossless == 100,
            format!("{lossless}/100 DP(pruned) == DP(unpruned); pruning active in {pruned_any}"),
        ),
    )
}

fn calibration_coverage(setup: &Setup, model: &swarmcert::twin::ConfidenceModel) -> Verdict {
    let beta = setup.config.cert.beta;
    let [a, b] = setup.config.seeds.holdout;
    let log = holdout_log(setup).unwrap();
    let rep = holdout_coverage(&setup.config, model, &log);
    let floor = |n: usize| 1.0 - beta - 3.0 * (beta * (1.0 - beta) / n as f64).sqrt();
    let (snr_floor, cert_floor) = (floor(rep.snr_records), floor(rep.cert_pairs));
    let pass = b - a >= 20 && rep.snr_rate() >= snr_floor && rep.cert_rate() >= cert_floor;
    verdict(
        8,
        pass,
        format!(
            "{} held-out seeds; SNR coverage {:.5} >= {snr_floor:.5} (n {}); realized>=certified {:.5} >= {cert_floor:.5} (n {})",
            b - a,
            rep.snr_rate(),
            rep.snr_records,
            rep.cert_rate(),
            rep.cert_pairs
        ),
    )
}

fn supermartingale(exp: &Experiment) -> Verdict {
    let dw: Vec<f64> = exp
        .trials_of(PolicyId::Safe)
        .flat_map(|t| t.rows.iter().flat_map(|r| r.steps.iter()))
        .filter(|s| s.covered && s.interaction)
        .map(|s| s.dw)
        .collect();
    let n = dw.len();
    let m = mean(&dw);
    let sd = (dw.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64).sqrt();
    let upper = m + 1.645 * sd / (n as f64).sqrt();
    let seeds = exp.trials_of(PolicyId::Safe).count();
    verdict(
        9,
        n > 0 && seeds >= 10 && upper <= 0.0,
        format!("{seeds} seeds, {n} cycles, mean dW {m:.4e}, one-sided 95% upper {upper:.4e}"),
    )
}

fn closed_loop_ordering(exp: &Experiment, elapsed: Duration, cfg: &Config) -> Verdict {
    let summary = exp.summary();
    let safe = summary.iter().find(|s| s.policy == PolicyId::Safe).unwrap();
    let others: Vec<_> = summary.iter().filter(|s| s.policy != PolicyId::Safe).collect();
    let fixed = others.iter().find(|s| s.policy == PolicyId::FixedService).unwrap();
    let reduction = 1.0 - safe.mean_rmse / fixed.mean_rmse;
    let pass = cfg.mission.n_uav == 10
        && cfg.tdma.slots == 40
        && cfg.cycles() == 120
        && safe.trials == 10
        && others.iter().all(|o| safe.mean_rmse <= o.mean_rmse && safe.p95_v_norm <= o.p95_v_norm)
        && reduction >= 0.10
        && elapsed < Duration::from_secs(300);
    let table: Vec<String> =
        summary.iter().map(|s| format!("{} rmse {:.4} v95 {:.5}", s.policy, s.mean_rmse, s.p95_v_norm)).collect();
    verdict(
        10,
        pass,
        format!("reduction vs fixed_service {:.1}%, time {elapsed:.1?}; {}", 100.0 * reduction, table.join(", ")),
    )
}

fn delay_falsification(exp: &Experiment, c10: bool) -> Verdict {
    let per_seed = |p: PolicyId, seed: u64| {
        let t = exp.trials_of(p).find(|t| t.seed == seed).unwrap();
        mean(&t.rows.iter().flat_map(|r| r.dl_delays.iter().copied()).collect::<Vec<_>>())
    };
    let seeds: Vec<u64> = exp.trials_of(PolicyId::Safe).map(|t| t.seed).collect();
    let lower = seeds
        .iter()
        .filter(|&&s| {
            let safe = per_seed(PolicyId::Safe, s);
            PolicyId::ALL.iter().filter(|&&p| p != PolicyId::Safe).any(|&p| per_seed(p, s) < safe)
        })
        .count();
    verdict(
        11,
        c10 && lower >= 1,
        format!("a baseline has lower mean DL delay than SAFE in {lower}/{} seeds", seeds.len()),
    )
}

fn determinism(setup: &Setup, model: &swarmcert::twin::ConfidenceModel, first: &Experiment) -> Verdict {
    let seeds: Vec<u64> = first.trials_of(PolicyId::Safe).map(|t| t.seed).collect();
    let again = run_experiment(setup, model, &PolicyId::ALL, &seeds).unwrap();
    let bytes = |e: &Experiment| e.trials.iter().map(|t| t.to_jsonl()).collect::<String>();
    let (a, b) = (bytes(first), bytes(&again));
    verdict(12, a == b, format!("{} trials rerun, {} bytes, identical {}", again.trials.len(), a.len(), a == b))
}

#[test]
fn acceptance() {
    let cfg = Config::default();
    let setup = Setup::new(cfg.clone()).unwrap();
    let mut v = vec![
        lmi_validity(&setup),
        mode_order(),
        run_saturation(&setup),
        drift_monotonicity(&setup),
        interaction_certificate(),
    ];
    let (c6, c7) = allocation_exactness(&setup);
    v.push(c6);
    v.push(c7);

    let t0 = Instant::now();
    let (_, model) = calibrate_model(&setup).unwrap();
    let seeds: Vec<u64> = (cfg.seeds.evaluation[0]..cfg.seeds.evaluation[1]).collect();
    let exp = run_experiment(&setup, &model, &PolicyId::ALL, &seeds).unwrap();
    let elapsed = t0.elapsed();

    v.push(calibration_coverage(&setup, &model));
    v.push(supermartingale(&exp));
    let c10 = closed_loop_ordering(&exp, elapsed, &cfg);
    let c10_pass = c10.pass;
    v.push(c10);
    v.push(delay_falsification(&exp, c10_pass));
    v.push(determinism(&setup, &model, &exp));

    let failed: Vec<String> = v.iter().filter(|x| !x.pass).map(|x| format!("{}: {}", x.id, x.detail)).collect();
    println!("acceptance: {}/{} criteria pass", v.len() - failed.len(), v.len());
    assert!(failed.is_empty(), "failed criteria: {failed:#?}");
}
