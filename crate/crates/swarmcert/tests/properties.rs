use std::sync::OnceLock;

use proptest::prelude::*;

use swarmcert::allocator::{admit_safe, dp_allocate, drift_bound, Candidate, Choice};
use swarmcert::cert::{action_dominates, certificate_dominates, timing_indices, QosCertificate};
use swarmcert::chain::{failure_tolerance, ChainParams, Tolerance};
use swarmcert::harness::{brute_force_p1, OracleLoop, OracleOption};
use swarmcert::plant::LoopState;
use swarmcert::sim::Setup;
use swarmcert::Config;

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| Setup::new(Config::default()).unwrap())
}

const T_S: f64 = 0.25;

prop_compose! {
    fn cert()(hu in 0usize..=3, hd in 0usize..=3, fu in 0.01f64..1.0, fd in 0.01f64..1.0, g in 1usize..=6,
              ru in 0.3f64..=1.0, rd in 0.3f64..=1.0) -> QosCertificate {
        let d = |h: usize, f: f64| if h == 0 { 0.0 } else { (h as f64 - 1.0 + f) * T_S };
        QosCertificate::new(d(hu, fu), d(hd, fd), g as f64 * T_S, ru, rd).unwrap()
    }
}

prop_compose! {
    /// A certificate at least as strong as `q`.
    fn stronger(q: QosCertificate)(su in 0.0f64..=1.0, sd in 0.0f64..=1.0, g in 1usize..=6,
                                   ru in 0.0f64..=1.0, rd in 0.0f64..=1.0) -> QosCertificate {
        let gq = (q.t_cert / T_S).round() as usize;
        QosCertificate::new(
            q.d_ul * su,
            q.d_dl * sd,
            g.min(gq) as f64 * T_S,
            q.rho_ul + (1.0 - q.rho_ul) * ru,
            q.rho_dl + (1.0 - q.rho_dl) * rd,
        )
        .unwrap()
    }
}

fn state(v: f64, s: f64, c: usize) -> LoopState {
    let d = setup().law.domain;
    LoopState::from_coords(v * d.v_max, d.sigma_min + s * (d.sigma_max - d.sigma_min), c)
}

fn phi(z: &LoopState, q: &QosCertificate) -> f64 {
    let p = setup().params();
    let t = timing_indices(q, T_S).unwrap();
    let table = setup().certifier.table(t.h_ul, t.h_dl).unwrap();
    drift_bound(z, q, &t, &table, p.lambda_sigma, p.noise).unwrap()
}

fn choice_sets() -> impl Strategy<Value = Vec<Vec<(u32, f64)>>> {
    prop::collection::vec(prop::collection::vec((1u32..=6, -1.0f64..2.0), 0..=4), 1..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dominance_is_a_partial_order(a in cert(), b in cert(), c in cert()) {
        prop_assert!(certificate_dominates(&a, &a));
        if certificate_dominates(&a, &b) && certificate_dominates(&b, &a) {
            prop_assert_eq!(a, b);
        }
        if certificate_dominates(&a, &b) && certificate_dominates(&b, &c) {
            prop_assert!(certificate_dominates(&a, &c));
        }
        prop_assert!(!action_dominates((&a, 3), (&a, 3)));
    }

    #[test]
    fn stronger_certificate_never_has_larger_drift(
        (weak, strong) in cert().prop_flat_map(|q| (Just(q), stronger(q))),
        v in 0.0f64..=1.0, s in 0.0f64..=1.0, c in 0usize..6,
    ) {
        prop_assert!(certificate_dominates(&strong, &weak));
        let g = timing_indices(&strong, T_S).unwrap().g;
        let z = state(v, s, c % g);
        prop_assert!(phi(&z, &strong) <= phi(&z, &weak) + 1e-10);
    }

    #[test]
    fn safe_sets_are_upper_closed(
        (weak, strong) in cert().prop_flat_map(|q| (Just(q), stronger(q))),
        v in 0.0f64..=1.0, s in 0.0f64..=1.0, c in 0usize..6,
    ) {
        let p = setup().params();
        let tw = timing_indices(&weak, T_S).unwrap();
        let ts = timing_indices(&strong, T_S).unwrap();
        let z = state(v, s, c % ts.g);
        let cands = [
            Candidate { action: 0, cert: weak, timing: tw, slot_cost: 1 },
            Candidate { action: 1, cert: strong, timing: ts, slot_cost: 1 },
        ];
        let safe = admit_safe(&z, &cands, &setup().certifier, p.lambda_sigma, p.noise).unwrap();
        if safe.iter().any(|a| a.action == 0) {
            prop_assert!(safe.iter().any(|a| a.action == 1));
        }
    }

    #[test]
    fn dp_matches_exhaustive_search(sets in choice_sets(), budget in 0u32..=12) {
        let choices: Vec<Vec<Choice>> = sets
            .iter()
            .map(|s| s.iter().map(|&(c, u)| Choice { slot_cost: c, utility: u }).collect())
            .collect();
        let loops: Vec<OracleLoop> = sets
            .iter()
            .map(|s| OracleLoop {
                zero_drift: 0.0,
                options: s.iter().map(|&(c, u)| OracleOption { slot_cost: c, drift: -u }).collect(),
            })
            .collect();
        let dp = dp_allocate(&choices, budget);
        let bf = brute_force_p1(&loops, budget).unwrap();
        prop_assert_eq!(dp.value, bf.utility);
        prop_assert!(dp.used <= budget);
        prop_assert!(dp.value >= 0.0);
    }

    #[test]
    fn tolerance_shrinks_with_budget(mu1 in 0.0f64..0.5, p11 in 0.0f64..0.99, h_t in 1usize..=20,
                                     d1 in 0.001f64..0.2, d2 in 0.001f64..0.2) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let tight = failure_tolerance(&ChainParams::new(mu1, p11, h_t, lo).unwrap());
        let loose = failure_tolerance(&ChainParams::new(mu1, p11, h_t, hi).unwrap());
        if let (Tolerance::Finite(a), Tolerance::Finite(b)) = (tight, loose) {
            prop_assert!(b <= a);
        }
    }
}
