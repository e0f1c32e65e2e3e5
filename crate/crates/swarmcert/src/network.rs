//! Ground-truth radio network: link budget, obstruction, fading, frame
//! packing and per-hop ARQ execution.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::cert::{CommAction, Direction};
use crate::config::RadioConfig;
use crate::error::{Error, Result};
use crate::mjls::Outcome;
use crate::streams;

/// Thermal noise floor in dBm.
pub fn noise_dbm(b_ch_hz: f64, f_nf_db: f64) -> f64 {
    -174.0 + 10.0 * b_ch_hz.log10() + f_nf_db
}

pub fn link_snr_db(p_tx_dbm: f64, l_e_db: f64, x_e_db: f64, b_ch_hz: f64, f_nf_db: f64) -> f64 {
    p_tx_dbm - l_e_db + x_e_db - noise_dbm(b_ch_hz, f_nf_db)
}

/// Axis-aligned building volume `[-w, w]² × [0, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub half_width: f64,
    pub height: f64,
}

impl Building {
    /// Slab test: does the segment `a → b` pass through the volume?
    pub fn blocks(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        let lo = [-self.half_width, -self.half_width, 0.0];
        let hi = [self.half_width, self.half_width, self.height];
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for i in 0..3 {
            let d = b[i] - a[i];
            if d.abs() < 1e-12 {
                if a[i] < lo[i] || a[i] > hi[i] {
                    return false;
                }
            } else {
                let (mut ta, mut tb) = ((lo[i] - a[i]) / d, (hi[i] - a[i]) / d);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

/// Decoding threshold: a longer block of the same payload collects
/// proportionally more energy.
pub fn threshold_db(cfg: &RadioConfig, blocklength: u32) -> f64 {
    cfg.gamma0_db - 10.0 * (blocklength as f64 / cfg.n0 as f64).log10()
}

/// Rayleigh power gain in dB from a uniform draw.
pub fn rayleigh_db(u: f64) -> f64 {
    10.0 * (-u.ln()).log10()
}

/// Per-run shadowing of the unordered pair `(i, j)`, dB.
pub fn shadow_db(seed: u64, i: usize, j: usize, sigma_db: f64) -> f64 {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    sigma_db * streams::normal(seed, streams::SHADOW, &[a as u64, b as u64])
}

/// Fast-fading draw of one attempt; addressed by the directed link, the
/// ordinal of its use within the cycle and the attempt index.
pub fn fading_db(seed: u64, cycle: usize, from: usize, to: usize, use_idx: usize, attempt: u32) -> f64 {
    rayleigh_db(streams::unit(
        seed,
        streams::FADING,
        &[cycle as u64, from as u64, to as u64, use_idx as u64, attempt as u64],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkRealization {
    pub path_loss_db: f64,
    pub shadowing_db: f64,
    pub blocked: bool,
    /// Large-scale SNR, fading excluded.
    pub snr_db: f64,
    pub available: bool,
}

/// Large-scale state of every node pair for one geometry snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkMap {
    pub n_nodes: usize,
    pub links: Vec<LinkRealization>,
}

impl LinkMap {
    /// Node 0 is the ground station; `positions[k]` is node `k`.
    pub fn build(positions: &[Vector3<f64>], radio: &RadioConfig, building: &Building, seed: u64) -> Self {
        let n = positions.len();
        let lambda = 299_792_458.0 / radio.carrier_hz;
        let ref_loss = 20.0 * (4.0 * std::f64::consts::PI / lambda).log10();
        let mut links = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let d = (positions[i] - positions[j]).norm().max(1.0);
                let blocked = i != j && building.blocks(&positions[i], &positions[j]);
                let exp = if blocked { radio.nlos_exponent } else { radio.los_exponent };
                let pl = ref_loss + 10.0 * exp * d.log10() + if blocked { radio.penetration_db } else { 0.0 };
                let sh = shadow_db(seed, i, j, radio.shadowing_db);
                let snr = link_snr_db(radio.p_tx_dbm, pl + sh, 0.0, radio.b_ch_hz, radio.noise_figure_db);
                let available = i != j && d <= radio.max_range && snr >= radio.min_link_snr_db;
                links.push(LinkRealization { path_loss_db: pl, shadowing_db: sh, blocked, snr_db: snr, available });
            }
        }
        LinkMap { n_nodes: n, links }
    }

    pub fn get(&self, i: usize, j: usize) -> &LinkRealization {
        &self.links[i * self.n_nodes + j]
    }

    /// Smallest large-scale SNR along a route.
    pub fn bottleneck_db(&self, route: &[usize]) -> f64 {
        route.windows(2).map(|w| self.get(w[0], w[1]).snr_db).fold(f64::INFINITY, f64::min)
    }

    pub fn route_available(&self, route: &[usize]) -> bool {
        route.windows(2).all(|w| self.get(w[0], w[1]).available)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameBlock {
    pub loop_id: usize,
    pub start: u32,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAssignment {
    pub budget: u32,
    pub tau_slot: f64,
    pub blocks: Vec<FrameBlock>,
}

impl FrameAssignment {
    pub fn used(&self) -> u32 {
        self.blocks.iter().map(|b| b.len).sum()
    }
}

/// Contiguous blocks in loop-index order.
pub fn pack_frame(selected: &[(usize, u32)], budget: u32, tau_slot: f64) -> Result<FrameAssignment> {
    let used: u32 = selected.iter().map(|s| s.1).sum();
    if used > budget {
        return Err(Error::OverBudget { used, budget });
    }
    let mut sel = selected.to_vec();
    sel.sort_by_key(|s| s.0);
    let mut at = 0;
    let blocks = sel
        .into_iter()
        .map(|(loop_id, len)| {
            let b = FrameBlock { loop_id, start: at, len };
            at += len;
            b
        })
        .collect();
    Ok(FrameAssignment { budget, tau_slot, blocks })
}

/// Result of one action within a cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopOutcome {
    pub loop_id: usize,
    pub outcome: Outcome,
    /// Realized direction delays (first slot of the direction to the end of
    /// the last hop's successful attempt), seconds.
    pub ul_delay: Option<f64>,
    pub dl_delay: Option<f64>,
    /// Time from the start of the frame to command delivery, seconds.
    pub command_delay: Option<f64>,
}

/// One attempt to be decided by the channel.
#[derive(Debug, Clone, Copy)]
pub struct Attempt {
    pub from: usize,
    pub to: usize,
    pub use_idx: usize,
    pub attempt: u32,
    pub blocklength: u32,
}

/// Runs every packed action through its hops. `decide` says whether an
/// attempt decodes; actions are matched to blocks by loop index.
pub fn execute_cycle(
    frame: &FrameAssignment,
    actions: &HashMap<usize, &CommAction>,
    decide: &mut dyn FnMut(&Attempt) -> bool,
) -> Vec<LoopOutcome> {
    let mut uses: HashMap<(usize, usize), usize> = HashMap::new();
    let mut out = Vec::with_capacity(frame.blocks.len());
    for blk in &frame.blocks {
        let action = actions[&blk.loop_id];
        let mut ends = [None, None];
        for (slot, dir) in [Direction::Ul, Direction::Dl].into_iter().enumerate() {
            let (route, cfg) = match dir {
                Direction::Ul => (&action.ul_route, action.ul_cfg),
                Direction::Dl => (&action.dl_route, action.dl_cfg),
            };
            let hops: Vec<_> = action.pattern.blocks.iter().filter(|b| b.dir == dir).collect();
            let Some(first) = hops.first() else { continue };
            let mut end = None;
            for (h, hb) in hops.iter().enumerate() {
                let (from, to) = (route[h], route[h + 1]);
                let u = uses.entry((from, to)).or_insert(0);
                let use_idx = *u;
                *u += 1;
                let got = (0..hb.attempts)
                    .find(|&a| decide(&Attempt { from, to, use_idx, attempt: a, blocklength: cfg.blocklength }));
                match got {
                    Some(a) => end = Some(hb.start + (a + 1) * hb.slots_per_attempt - 1),
                    None => {
                        end = None;
                        break;
                    }
                }
            }
            ends[slot] = end.map(|e| (first.start, e));
        }
        let delay = |x: Option<(u32, u32)>| x.map(|(a, e)| (e - a + 1) as f64 * frame.tau_slot);
        out.push(LoopOutcome {
            loop_id: blk.loop_id,
            outcome: Outcome::from_flags(ends[0].is_some(), ends[1].is_some()),
            ul_delay: delay(ends[0]),
            dl_delay: delay(ends[1]),
            command_delay: ends[1].map(|(_, e)| (blk.start + e + 1) as f64 * frame.tau_slot),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cert::TxConfig;

    #[test]
    fn link_budget_examples() {
        let g = link_snr_db(20.0, 100.0, 0.0, 5e6, 7.0);
        assert!((noise_dbm(5e6, 7.0) + 100.0103).abs() < 1e-4);
        assert!((g - 20.0103).abs() < 1e-4);
        let g2 = link_snr_db(20.0, 100.0, 0.0, 10e6, 7.0);
        assert!((g - g2 - 10.0 * 2f64.log10()).abs() < 1e-12);
        assert!((link_snr_db(20.0, 100.0, 3.0, 5e6, 7.0) - g - 3.0).abs() < 1e-12);
    }

    #[test]
    fn obstruction_and_range() {
        let b = Building { half_width: 30.0, height: 85.0 };
        assert!(b.blocks(&Vector3::new(-100.0, 0.0, 10.0), &Vector3::new(100.0, 0.0, 10.0)));
        assert!(!b.blocks(&Vector3::new(-100.0, 0.0, 90.0), &Vector3::new(100.0, 0.0, 90.0)));
        assert!(!b.blocks(&Vector3::new(-100.0, 50.0, 10.0), &Vector3::new(100.0, 50.0, 10.0)));
        let radio = RadioConfig::default();
        let pos = [Vector3::new(-100.0, 0.0, 10.0), Vector3::new(100.0, 0.0, 10.0), Vector3::new(-100.0, 5000.0, 10.0)];
        let m = LinkMap::build(&pos, &radio, &b, 1);
        assert!(m.get(0, 1).blocked);
        assert!(!m.get(0, 2).available);
        assert_eq!(m.get(0, 1).snr_db, m.get(1, 0).snr_db);
    }

    #[test]
    fn threshold_rule() {
        let r = RadioConfig::default();
        assert_eq!(threshold_db(&r, 200), 5.0);
        assert!((threshold_db(&r, 400) - (5.0 - 10.0 * 2f64.log10())).abs() < 1e-12);
    }

    #[test]
    fn packing_examples() {
        assert!(pack_frame(&[], 8, 1.0).unwrap().blocks.is_empty());
        let f = pack_frame(&[(4, 5), (1, 3)], 8, 1.0).unwrap();
        assert_eq!(
            f.blocks,
            vec![FrameBlock { loop_id: 1, start: 0, len: 3 }, FrameBlock { loop_id: 4, start: 3, len: 5 }]
        );
        assert!(matches!(pack_frame(&[(0, 5), (1, 4)], 8, 1.0), Err(Error::OverBudget { .. })));
    }

    fn action(n_re: u32) -> CommAction {
        let cfg = TxConfig { n_re, blocklength: 400 };
        CommAction::new(vec![1, 2, 0], vec![0, 1], cfg, cfg, 2, 2)
    }

    #[test]
    fn certain_channels() {
        let a = action(1);
        let f = pack_frame(&[(0, a.slot_cost)], 40, 1e-3).unwrap();
        let acts: HashMap<usize, &CommAction> = [(0, &a)].into_iter().collect();
        let o = execute_cycle(&f, &acts, &mut |_| true);
        assert_eq!(o[0].outcome, Outcome::Both);
        // first attempts succeed: UL ends after hop 2's first attempt
        assert!((o[0].ul_delay.unwrap() - (4.0 + 2.0) * 1e-3).abs() < 1e-12);
        assert!(o[0].ul_delay.unwrap() <= a.span_ul as f64 * 1e-3);
        let o = execute_cycle(&f, &acts, &mut |_| false);
        assert_eq!(o[0].outcome, Outcome::Neither);
        assert!(o[0].command_delay.is_none());
        // deadline-level semantics: success never exceeds the span
        let o = execute_cycle(&f, &acts, &mut |at| at.attempt == 1);
        assert_eq!(o[0].outcome, Outcome::Both);
        assert!((o[0].ul_delay.unwrap() - a.span_ul as f64 * 1e-3).abs() < 1e-12);
        assert!((o[0].dl_delay.unwrap() - a.span_dl as f64 * 1e-3).abs() < 1e-12);
        assert!((o[0].command_delay.unwrap() - a.slot_cost as f64 * 1e-3).abs() < 1e-12);
    }

    #[test]
    fn arq_success_frequency() {
        let cfg = TxConfig { n_re: 1, blocklength: 400 };
        let a = CommAction::new(vec![1, 0], vec![0, 1], cfg, cfg, 1, 1);
        let f = pack_frame(&[(0, a.slot_cost)], 40, 1e-3).unwrap();
        let acts: HashMap<usize, &CommAction> = [(0, &a)].into_iter().collect();
        let p = 0.6;
        let n = 100_000;
        let mut ok = 0;
        for cyc in 0..n {
            let o = execute_cycle(&f, &acts, &mut |at| {
                streams::unit(5, streams::PROBE, &[cyc, at.attempt as u64, at.from as u64]) < p
            });
            if o[0].ul_delay.is_some() {
                ok += 1;
            }
        }
        let want = 1.0 - (1.0 - p) * (1.0 - p);
        let sd = (want * (1.0 - want) / n as f64).sqrt();
        assert!((ok as f64 / n as f64 - want).abs() < 3.0 * sd);
    }

    #[test]
    fn rayleigh_mean_power() {
        let n = 200_000;
        let m: f64 = (0..n).map(|i| 10f64.powf(fading_db(3, i, 1, 2, 0, 0) / 10.0)).sum::<f64>() / n as f64;
        assert!((m - 1.0).abs() < 0.01);
    }
}
