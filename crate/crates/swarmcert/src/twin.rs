//! Twin-side prediction and calibration: predicted link map and candidate
//! routes, the confidence model fitted from outcome logs, candidate-action
//! enumeration and the action-to-certificate map.

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::cert::{slot_cost_blocks, CommAction, QosCertificate, TimingTriple, TxConfig};
use crate::chain::{failure_tolerance, interaction_bound, ChainParams, Tolerance};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::network::{Building, LinkMap};

/// Predicted network state for one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinState {
    pub cycle: usize,
    pub links: LinkMap,
    /// Candidate routes per loop, UAV node first, ground station last.
    pub routes: Vec<Vec<Vec<usize>>>,
}

/// Node index of loop `i` (node 0 is the ground station).
pub fn node_of(loop_id: usize) -> usize {
    loop_id + 1
}

/// Hop distance of every node to the ground station over available links.
fn hops_to_gcs(links: &LinkMap) -> Vec<usize> {
    let n = links.n_nodes;
    let mut dist = vec![usize::MAX; n];
    dist[0] = 0;
    let mut frontier = vec![0];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &u in &frontier {
            for v in 0..n {
                if dist[v] == usize::MAX && links.get(v, u).available {
                    dist[v] = dist[u] + 1;
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    dist
}

/// Up to `k` simple routes from `src` to the ground station with at most
/// `max_hops` hops: fewest hops, then highest bottleneck SNR, then
/// lexicographic node order.
pub fn candidate_routes(links: &LinkMap, src: usize, k: usize, max_hops: usize) -> Vec<Vec<usize>> {
    let dist = hops_to_gcs(links);
    if dist[src] > max_hops {
        return Vec::new();
    }
    let mut found: Vec<Vec<usize>> = Vec::new();
    let mut path = vec![src];
    fn walk(links: &LinkMap, dist: &[usize], path: &mut Vec<usize>, left: usize, out: &mut Vec<Vec<usize>>) {
        let u = *path.last().unwrap();
        if u == 0 {
            out.push(path.clone());
            return;
        }
        if left == 0 {
            return;
        }
        for v in 0..links.n_nodes {
            if links.get(u, v).available && dist[v] < left && !path.contains(&v) {
                path.push(v);
                walk(links, dist, path, left - 1, out);
                path.pop();
            }
        }
    }
    walk(links, &dist, &mut path, max_hops, &mut found);
    found.sort_by(|a, b| {
        a.len().cmp(&b.len()).then(links.bottleneck_db(b).total_cmp(&links.bottleneck_db(a))).then(a.cmp(b))
    });
    found.truncate(k);
    found
}

/// Twin prediction from the ground-station view of node positions.
pub fn predict(positions: &[Vector3<f64>], config: &Config, seed: u64, cycle: usize) -> TwinState {
    let building = Building { half_width: config.mission.building_half_width, height: config.mission.building_height };
    let links = LinkMap::build(positions, &config.radio, &building, seed);
    let routes = (0..positions.len() - 1)
        .map(|i| candidate_routes(&links, node_of(i), config.twin.k_routes, config.twin.max_hops))
        .collect();
    TwinState { cycle, links, routes }
}

/// Cross product of route pairs and transmission configurations within the
/// slot budget. Downlink routes are the reversed uplink candidates.
pub fn enumerate_actions(loop_id: usize, twin: &TwinState, config: &Config) -> Result<Vec<CommAction>> {
    let routes = &twin.routes[loop_id];
    let mut out = Vec::new();
    for ul in routes {
        for dl_src in routes {
            let dl: Vec<usize> = dl_src.iter().rev().copied().collect();
            for &n_re in &config.tdma.retx_depths {
                for &n in &config.tdma.blocklengths {
                    let per = slot_cost_blocks(n, config.tdma.b_eff, config.tdma.t_slot)?;
                    let cfg = TxConfig { n_re, blocklength: n };
                    let a = CommAction::new(ul.clone(), dl.clone(), cfg, cfg, per, per);
                    if a.slot_cost <= config.tdma.slots && a.pattern.respects_hop_order() {
                        out.push(a);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Which outcome a calibration record describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassDir {
    Ul,
    Dl,
    Bi,
}

/// Service class: hop count, bottleneck-SNR bucket, retransmission depth
/// and blocklength.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassKey {
    pub hops: u8,
    pub snr_bucket: i32,
    pub n_re: u32,
    pub blocklength: u32,
}

impl ClassKey {
    fn family(&self) -> (u8, u32, u32) {
        (self.hops, self.n_re, self.blocklength)
    }
}

pub fn snr_bucket(snr_db: f64, width_db: f64) -> i32 {
    (snr_db / width_db).floor() as i32
}

/// One deadline-level outcome from a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub seed: u64,
    pub cycle: usize,
    #[serde(rename = "loop")]
    pub loop_id: usize,
    /// Rank of the probed route among the loop's candidates.
    #[serde(default)]
    pub route: usize,
    pub class: ClassKey,
    pub direction: ClassDir,
    pub met: bool,
    pub realized_snr_db: f64,
    pub predicted_snr_db: f64,
}

/// One-sided Clopper–Pearson upper limit at confidence `1 - beta`.
pub fn clopper_pearson_upper(successes: usize, trials: usize, beta: f64) -> f64 {
    if successes >= trials {
        return 1.0;
    }
    let d = Beta::new(successes as f64 + 1.0, (trials - successes) as f64).expect("valid beta parameters");
    // bisection on the cdf; the built-in inverse is too coarse here
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if d.cdf(mid) < 1.0 - beta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    hi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBound {
    pub direction: ClassDir,
    pub class: ClassKey,
    pub records: usize,
    pub misses: usize,
    pub q_svc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainBound {
    pub class: ClassKey,
    pub predecessors: usize,
    pub persisted: usize,
    pub mu1: f64,
    pub p11: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub beta: f64,
    pub bucket_db: f64,
    /// Half-width of the per-route bottleneck-SNR interval, dB.
    pub snr_quantile_db: f64,
    pub classes: Vec<ClassBound>,
    pub chains: Vec<ChainBound>,
    /// Classes seen in the log with too few records.
    pub insufficient: Vec<String>,
    #[serde(skip)]
    index: HashMap<(ClassDir, ClassKey), usize>,
    #[serde(skip)]
    chain_index: HashMap<ClassKey, usize>,
}

/// Nearest-rank quantile of unsorted data.
pub fn nearest_rank(values: &[f64], level: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((level * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

impl ConfidenceModel {
    pub fn reindex(&mut self) {
        self.index = self.classes.iter().enumerate().map(|(i, c)| ((c.direction, c.class), i)).collect();
        self.chain_index = self.chains.iter().enumerate().map(|(i, c)| (c.class, i)).collect();
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut m: ConfidenceModel = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        m.reindex();
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    /// Calibrated bucket used for a class: the class itself, the best
    /// calibrated bucket when above the table, otherwise the nearest
    /// calibrated bucket below. `None` when nothing at or below is known.
    fn resolve<T>(&self, key: &ClassKey, lookup: impl Fn(&ClassKey) -> Option<T>) -> Option<T> {
        if let Some(v) = lookup(key) {
            return Some(v);
        }
        let mut buckets: Vec<i32> =
            self.classes.iter().filter(|c| c.class.family() == key.family()).map(|c| c.class.snr_bucket).collect();
        buckets.sort();
        buckets.dedup();
        let pick = buckets.iter().rev().find(|&&b| b <= key.snr_bucket).copied();
        pick.and_then(|b| lookup(&ClassKey { snr_bucket: b, ..*key }))
    }

    pub fn q_svc(&self, dir: ClassDir, key: &ClassKey) -> Option<f64> {
        self.resolve(key, |k| self.index.get(&(dir, *k)).map(|&i| self.classes[i].q_svc))
    }

    pub fn chain(&self, key: &ClassKey) -> Option<(f64, f64)> {
        self.resolve(key, |k| self.chain_index.get(k).map(|&i| (self.chains[i].mu1, self.chains[i].p11)))
    }
}

/// Fits the confidence model from outcome records.
pub fn calibrate(records: &[CalibrationRecord], beta: f64, config: &Config) -> Result<ConfidenceModel> {
    let cc = &config.cert;
    // per-route interval at 1 - beta/2 so that both directions hold jointly at 1 - beta
    let residuals: Vec<f64> = records
        .iter()
        .filter(|r| r.direction != ClassDir::Bi)
        .map(|r| (r.predicted_snr_db - r.realized_snr_db).abs())
        .collect();
    let snr_quantile_db = nearest_rank(&residuals, 1.0 - beta / 2.0);

    let mut counts: BTreeMap<(ClassDir, ClassKey), (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = counts.entry((r.direction, r.class)).or_default();
        e.0 += 1;
        if !r.met {
            e.1 += 1;
        }
    }
    let mut insufficient = Vec::new();
    let mut classes = Vec::new();
    for (&(direction, class), &(n, miss)) in &counts {
        if n < cc.min_class_records {
            insufficient.push(format!("{direction:?} {class:?} ({n} records)"));
            continue;
        }
        classes.push(ClassBound {
            direction,
            class,
            records: n,
            misses: miss,
            q_svc: clopper_pearson_upper(miss, n, beta),
        });
    }
    if classes.is_empty() {
        return Err(Error::InsufficientData(insufficient));
    }
    // a better bucket inherits any tighter bound found below it, so worse
    // buckets never look better
    classes.sort_by_key(|c| (c.direction, c.class.family(), c.class.snr_bucket));
    for i in 1..classes.len() {
        let (prev, cur) = (&classes[i - 1], &classes[i]);
        if prev.direction == cur.direction && prev.class.family() == cur.class.family() && prev.q_svc < cur.q_svc {
            classes[i].q_svc = classes[i - 1].q_svc;
        }
    }

    // failure persistence from consecutive bidirectional records
    let mut bi: Vec<&CalibrationRecord> = records.iter().filter(|r| r.direction == ClassDir::Bi).collect();
    bi.sort_by_key(|r| (r.seed, r.loop_id, r.route, r.class.family(), r.cycle));
    let mut pairs: BTreeMap<ClassKey, (usize, usize)> = BTreeMap::new();
    for w in bi.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.seed == b.seed
            && a.loop_id == b.loop_id
            && a.route == b.route
            && a.class == b.class
            && b.cycle == a.cycle + 1
            && !a.met
        {
            let e = pairs.entry(a.class).or_default();
            e.0 += 1;
            if !b.met {
                e.1 += 1;
            }
        }
    }
    let mut chains = Vec::new();
    for c in classes.iter().filter(|c| c.direction == ClassDir::Bi) {
        // accumulate from this bucket downward until enough predecessors
        let mut fam: Vec<(&ClassKey, &(usize, usize))> = pairs
            .iter()
            .filter(|(k, _)| k.family() == c.class.family() && k.snr_bucket <= c.class.snr_bucket)
            .collect();
        fam.sort_by_key(|(k, _)| std::cmp::Reverse(k.snr_bucket));
        let (mut pred, mut pers) = (0, 0);
        for (_, &(p, q)) in fam {
            pred += p;
            pers += q;
            if pred >= cc.min_persistence_pairs {
                break;
            }
        }
        // the limit stays valid for small counts, only looser
        let p11 = if pred > 0 { clopper_pearson_upper(pers, pred, beta) } else { 1.0 };
        chains.push(ChainBound { class: c.class, predecessors: pred, persisted: pers, mu1: c.q_svc, p11 });
    }
    for i in 1..chains.len() {
        if chains[i - 1].class.family() == chains[i].class.family() && chains[i - 1].p11 < chains[i].p11 {
            chains[i].p11 = chains[i - 1].p11;
        }
    }
    let mut m = ConfidenceModel {
        beta,
        bucket_db: cc.snr_bucket_db,
        snr_quantile_db,
        classes,
        chains,
        insufficient,
        index: HashMap::new(),
        chain_index: HashMap::new(),
    };
    m.reindex();
    Ok(m)
}

/// Why an action has no certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Excluded {
    Uncalibrated,
    NoFiniteCertificate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certified {
    pub cert: QosCertificate,
    pub chain: ChainParams,
    pub timing: TimingTriple,
    /// Worst-case class keys used (UL, DL, bidirectional).
    pub classes: [ClassKey; 3],
}

fn round_down(x: f64, g: f64) -> f64 {
    ((x / g).floor() * g).clamp(0.0, 1.0)
}

/// Worst-case class of a route under the model's SNR interval.
pub fn worst_case_key(twin: &TwinState, route: &[usize], cfg: TxConfig, model: &ConfidenceModel) -> (ClassKey, f64) {
    let worst = twin.links.bottleneck_db(route) - model.snr_quantile_db;
    let key = ClassKey {
        hops: (route.len() - 1) as u8,
        snr_bucket: snr_bucket(worst, model.bucket_db),
        n_re: cfg.n_re,
        blocklength: cfg.blocklength,
    };
    (key, worst)
}

/// Maps an action to its certificate and chain parameters.
pub fn build_certificate(
    action: &CommAction,
    twin: &TwinState,
    model: &ConfidenceModel,
    config: &Config,
) -> std::result::Result<Certified, Excluded> {
    let tau = config.tau_slot();
    let (ku, wu) = worst_case_key(twin, &action.ul_route, action.ul_cfg, model);
    let (kd, wd) = worst_case_key(twin, &action.dl_route, action.dl_cfg, model);
    let kb = ClassKey {
        hops: ku.hops.max(kd.hops),
        snr_bucket: snr_bucket(wu.min(wd), model.bucket_db),
        n_re: action.ul_cfg.n_re,
        blocklength: action.ul_cfg.blocklength,
    };
    certificate_for_classes(model, [ku, kd, kb], action.span_ul as f64 * tau, action.span_dl as f64 * tau, config)
}

/// Certificate supplied by the given (UL, DL, bidirectional) classes.
pub fn certificate_for_classes(
    model: &ConfidenceModel,
    classes: [ClassKey; 3],
    d_ul: f64,
    d_dl: f64,
    config: &Config,
) -> std::result::Result<Certified, Excluded> {
    let [ku, kd, kb] = classes;
    let gran = config.cert.rho_granularity;
    let t_s = config.mission.t_s;
    let q_ul = model.q_svc(ClassDir::Ul, &ku).ok_or(Excluded::Uncalibrated)?;
    let q_dl = model.q_svc(ClassDir::Dl, &kd).ok_or(Excluded::Uncalibrated)?;
    let q_bi = model.q_svc(ClassDir::Bi, &kb).ok_or(Excluded::Uncalibrated)?;
    let (_, p11) = model.chain(&kb).ok_or(Excluded::Uncalibrated)?;
    let rho_bi = round_down(1.0 - q_bi, gran);
    let chain = ChainParams { mu1: 1.0 - rho_bi, p11, h_t: config.cert.h_t, delta_t: config.cert.delta_t };
    let Tolerance::Finite(g) = failure_tolerance(&chain) else {
        return Err(Excluded::NoFiniteCertificate);
    };
    let cert = QosCertificate {
        d_ul,
        d_dl,
        t_cert: interaction_bound(g, t_s),
        rho_ul: round_down(1.0 - q_ul, gran),
        rho_dl: round_down(1.0 - q_dl, gran),
    };
    let timing = crate::cert::timing_indices(&cert, t_s).map_err(|_| Excluded::Uncalibrated)?;
    Ok(Certified { cert, chain, timing, classes })
}
