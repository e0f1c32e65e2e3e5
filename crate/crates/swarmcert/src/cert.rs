//! Certificate algebra: the five-coordinate QoS certificate, its partial
//! order, communication actions, slot arithmetic and timing indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that an interaction bound is a
/// multiple of the control period.
pub const MULTIPLE_RTOL: f64 = 1e-9;

/// Supply specification attached to one communication action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QosCertificate {
    /// Uplink one-way delay bound, seconds.
    pub d_ul: f64,
    /// Downlink one-way delay bound, seconds.
    pub d_dl: f64,
    /// Certified bound on the gap between bidirectional successes, seconds.
    pub t_cert: f64,
    /// Uplink service-success lower bound.
    pub rho_ul: f64,
    /// Downlink service-success lower bound.
    pub rho_dl: f64,
}

impl QosCertificate {
    pub fn new(d_ul: f64, d_dl: f64, t_cert: f64, rho_ul: f64, rho_dl: f64) -> Result<Self> {
        let q = QosCertificate { d_ul, d_dl, t_cert, rho_ul, rho_dl };
        q.validate()?;
        Ok(q)
    }

    /// Checks the sign and range invariants (not the multiple-of-T_s rule,
    /// which needs a period and is checked by [`timing_indices`]).
    pub fn validate(&self) -> Result<()> {
        let ok = self.d_ul >= 0.0
            && self.d_dl >= 0.0
            && self.t_cert > 0.0
            && (0.0..=1.0).contains(&self.rho_ul)
            && (0.0..=1.0).contains(&self.rho_dl);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidCertificate(format!("{self:?}")))
        }
    }

    fn coords_equal(&self, other: &Self) -> bool {
        self.d_ul == other.d_ul
            && self.d_dl == other.d_dl
            && self.t_cert == other.t_cert
            && self.rho_ul == other.rho_ul
            && self.rho_dl == other.rho_dl
    }
}

/// `q ⪰ r`: `q` offers at least the supply of `r` in every coordinate.
pub fn certificate_dominates(q: &QosCertificate, r: &QosCertificate) -> bool {
    q.d_ul <= r.d_ul && q.d_dl <= r.d_dl && q.t_cert <= r.t_cert && q.rho_ul >= r.rho_ul && q.rho_dl >= r.rho_dl
}

/// Strict certificate-cost dominance between two admitted actions.
pub fn action_dominates(a: (&QosCertificate, u32), b: (&QosCertificate, u32)) -> bool {
    let (qa, sa) = a;
    let (qb, sb) = b;
    certificate_dominates(qa, qb) && sa <= sb && (sa < sb || !qa.coords_equal(qb))
}

/// Slots occupied by one coded block of `n` symbols.
pub fn slot_cost_blocks(n: u32, b_eff: f64, t_slot: f64) -> Result<u32> {
    let cap = (b_eff * t_slot).floor();
    if cap < 1.0 {
        return Err(Error::ZeroCapacity);
    }
    let cap = cap as u64;
    Ok((n.max(1) as u64).div_ceil(cap) as u32)
}

/// Direction of a transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Ul,
    Dl,
}

/// One hop's reserved block: `attempts` contiguous sub-blocks of `slots_per_attempt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopBlock {
    pub dir: Direction,
    pub hop: u8,
    /// First slot, relative to the action's start.
    pub start: u32,
    pub attempts: u32,
    pub slots_per_attempt: u32,
}

impl HopBlock {
    pub fn len(&self) -> u32 {
        self.attempts * self.slots_per_attempt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Last slot occupied (inclusive).
    pub fn end(&self) -> u32 {
        self.start + self.len() - 1
    }
}

/// Ordered per-hop slot reservations of one action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotPattern {
    pub blocks: Vec<HopBlock>,
}

impl SlotPattern {
    /// Canonical pattern: UL hops first, then DL hops, each hop a contiguous
    /// block of `(1 + n_re) * ς(n)` slots.
    pub fn canonical(ul_hops: usize, dl_hops: usize, ul: TxConfig, dl: TxConfig, ul_slots: u32, dl_slots: u32) -> Self {
        let mut blocks = Vec::with_capacity(ul_hops + dl_hops);
        let mut at = 0;
        for (dir, hops, cfg, per) in [(Direction::Ul, ul_hops, ul, ul_slots), (Direction::Dl, dl_hops, dl, dl_slots)] {
            for hop in 0..hops {
                let b = HopBlock { dir, hop: hop as u8, start: at, attempts: 1 + cfg.n_re, slots_per_attempt: per };
                at += b.len();
                blocks.push(b);
            }
        }
        SlotPattern { blocks }
    }

    pub fn total_slots(&self) -> u32 {
        self.blocks.iter().map(HopBlock::len).sum()
    }

    /// First and last occupied slot of one direction.
    pub fn range(&self, dir: Direction) -> Option<(u32, u32)> {
        let mut it = self.blocks.iter().filter(|b| b.dir == dir);
        let first = it.next()?;
        let (mut a, mut b) = (first.start, first.end());
        for blk in it {
            a = a.min(blk.start);
            b = b.max(blk.end());
        }
        Some((a, b))
    }

    /// Slot count `ℓ` from the first to the last slot of a direction.
    pub fn span(&self, dir: Direction) -> u32 {
        self.range(dir).map_or(0, |(a, b)| b - a + 1)
    }

    /// Hops of a direction are ordered and non-overlapping.
    pub fn respects_hop_order(&self) -> bool {
        for dir in [Direction::Ul, Direction::Dl] {
            let hops: Vec<_> = self.blocks.iter().filter(|b| b.dir == dir).collect();
            for w in hops.windows(2) {
                if w[1].hop != w[0].hop + 1 || w[1].start <= w[0].end() {
                    return false;
                }
            }
        }
        true
    }
}

/// Base duration of one bidirectional opportunity.
pub fn opportunity_spacing(pattern: &SlotPattern, tau_slot: f64) -> Result<f64> {
    let (ua, ub) = pattern.range(Direction::Ul).ok_or(Error::MissingDirection("uplink"))?;
    let (da, db) = pattern.range(Direction::Dl).ok_or(Error::MissingDirection("downlink"))?;
    Ok((ub.max(db) - ua.min(da) + 1) as f64 * tau_slot)
}

/// Retransmission depth and blocklength of one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TxConfig {
    pub n_re: u32,
    pub blocklength: u32,
}

/// One route pair plus slot pattern plus transmission configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommAction {
    /// Node sequence from the UAV to the ground station.
    pub ul_route: Vec<usize>,
    /// Node sequence from the ground station to the UAV.
    pub dl_route: Vec<usize>,
    pub pattern: SlotPattern,
    pub ul_cfg: TxConfig,
    pub dl_cfg: TxConfig,
    pub slot_cost: u32,
    pub span_ul: u32,
    pub span_dl: u32,
}

impl CommAction {
    pub fn new(
        ul_route: Vec<usize>,
        dl_route: Vec<usize>,
        ul_cfg: TxConfig,
        dl_cfg: TxConfig,
        ul_slots: u32,
        dl_slots: u32,
    ) -> Self {
        let pattern =
            SlotPattern::canonical(ul_route.len() - 1, dl_route.len() - 1, ul_cfg, dl_cfg, ul_slots, dl_slots);
        let slot_cost = pattern.total_slots();
        let span_ul = pattern.span(Direction::Ul);
        let span_dl = pattern.span(Direction::Dl);
        CommAction { ul_route, dl_route, pattern, ul_cfg, dl_cfg, slot_cost, span_ul, span_dl }
    }

    pub fn hops(&self, dir: Direction) -> usize {
        match dir {
            Direction::Ul => self.ul_route.len() - 1,
            Direction::Dl => self.dl_route.len() - 1,
        }
    }
}

/// Cycle-level indices induced by a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimingTriple {
    pub h_ul: usize,
    pub h_dl: usize,
    pub g: usize,
}

fn ceil_cycles(d: f64, t_s: f64) -> usize {
    let r = d / t_s;
    let n = r.round();
    // absorb representation noise when d is an exact multiple
    if (r - n).abs() <= MULTIPLE_RTOL * n.max(1.0) {
        n as usize
    } else {
        r.ceil() as usize
    }
}

pub fn timing_indices(q: &QosCertificate, t_s: f64) -> Result<TimingTriple> {
    q.validate()?;
    if t_s <= 0.0 {
        return Err(Error::Config("control period must be positive".into()));
    }
    let r = q.t_cert / t_s;
    let g = r.round();
    if g < 1.0 || (r - g).abs() > MULTIPLE_RTOL * g {
        return Err(Error::NonMultiple { t_cert: q.t_cert, t_s });
    }
    Ok(TimingTriple { h_ul: ceil_cycles(q.d_ul, t_s), h_dl: ceil_cycles(q.d_dl, t_s), g: g as usize })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(d: f64, t: f64, r: f64) -> QosCertificate {
        QosCertificate::new(d, d, t, r, r).unwrap()
    }

    #[test]
    fn dominance_examples() {
        let a = q(0.01, 0.25, 0.99);
        assert!(certificate_dominates(&a, &a));
        assert!(certificate_dominates(&a, &q(0.02, 0.5, 0.9)));
        let x = QosCertificate::new(0.01, 0.02, 0.25, 0.8, 0.9).unwrap();
        let y = QosCertificate::new(0.02, 0.02, 0.25, 0.9, 0.9).unwrap();
        assert!(!certificate_dominates(&x, &y) && !certificate_dominates(&y, &x));
    }

    #[test]
    fn action_dominance_examples() {
        let a = q(0.01, 0.25, 0.99);
        assert!(action_dominates((&a, 4), (&a, 6)));
        assert!(!action_dominates((&a, 4), (&a, 4)));
        let weak = q(0.02, 0.5, 0.9);
        assert!(!action_dominates((&a, 7), (&weak, 6)));
    }

    #[test]
    fn slot_cost_examples() {
        assert_eq!(slot_cost_blocks(500, 1e6, 500e-6).unwrap(), 1);
        assert_eq!(slot_cost_blocks(501, 1e6, 500e-6).unwrap(), 2);
        assert_eq!(slot_cost_blocks(1, 1e6, 500e-6).unwrap(), 1);
        assert!(matches!(slot_cost_blocks(10, 1.0, 0.5), Err(Error::ZeroCapacity)));
    }

    fn pattern(ul: (u32, u32), dl: (u32, u32)) -> SlotPattern {
        let blk =
            |dir, (a, b): (u32, u32)| HopBlock { dir, hop: 0, start: a, attempts: 1, slots_per_attempt: b - a + 1 };
        SlotPattern { blocks: vec![blk(Direction::Ul, ul), blk(Direction::Dl, dl)] }
    }

    #[test]
    fn spacing_examples() {
        let t = 550e-6;
        assert!((opportunity_spacing(&pattern((0, 4), (5, 9)), t).unwrap() - 5.5e-3).abs() < 1e-15);
        assert_eq!(opportunity_spacing(&pattern((3, 3), (3, 3)), t).unwrap(), t);
        assert!((opportunity_spacing(&pattern((2, 3), (7, 8)), t).unwrap() - 7.0 * t).abs() < 1e-15);
        let ul_only = SlotPattern { blocks: vec![pattern((0, 1), (2, 3)).blocks[0]] };
        assert!(opportunity_spacing(&ul_only, t).is_err());
    }

    #[test]
    fn timing_examples() {
        let c = QosCertificate::new(0.3, 0.0, 1.25, 0.9, 0.9).unwrap();
        let tt = timing_indices(&c, 0.25).unwrap();
        assert_eq!((tt.h_ul, tt.h_dl, tt.g), (2, 0, 5));
        let bad = QosCertificate::new(0.0, 0.0, 0.3, 0.9, 0.9).unwrap();
        assert!(matches!(timing_indices(&bad, 0.25), Err(Error::NonMultiple { .. })));
    }

    #[test]
    fn canonical_pattern_shape() {
        let cfg = TxConfig { n_re: 1, blocklength: 400 };
        let a = CommAction::new(vec![3, 7, 0], vec![0, 3], cfg, cfg, 2, 2);
        assert_eq!(a.slot_cost, 2 * 4 + 4);
        assert_eq!(a.span_ul, 8);
        assert_eq!(a.span_dl, 4);
        assert!(a.pattern.respects_hop_order());
        assert!(a.pattern.blocks.iter().all(|b| b.len() % 2 == 0));
    }
}
