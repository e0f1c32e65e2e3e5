//! Scripted inspection mission: perimeter loops around the building with a
//! rotating hotspot regime and hotspot gusts.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::config::{Config, MissionConfig};
use crate::error::{Error, Result};
use crate::streams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cruise,
    Hotspot,
    Recovery,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gust {
    pub start_cycle: usize,
    pub cycles: usize,
    pub accel: f64,
    pub direction: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefSample {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub phase: Phase,
    /// Gust acceleration vector (zero outside gusts).
    pub gust_accel: Vector3<f64>,
    /// Index of the current gust cycle, counted from the gust start.
    pub gust_step: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Mission {
    cfg: MissionConfig,
    n_uav: usize,
    radius: f64,
    gusts: Vec<Vec<Gust>>,
}

impl Mission {
    pub fn new(config: &Config, seed: u64) -> Self {
        let cfg = config.mission.clone();
        let radius = cfg.building_half_width + cfg.facade_offset;
        let mut m = Mission { n_uav: cfg.n_uav, radius, gusts: Vec::new(), cfg };
        let cycles = config.cycles();
        let period = config.rotation_period();
        let mut gusts = Vec::with_capacity(m.n_uav);
        for i in 0..m.n_uav {
            let mix = streams::unit(seed, streams::GUST, &[i as u64, u64::MAX]);
            let mut v = Vec::new();
            let mut episode = 0u64;
            let mut start = m.group_offset(m.group(i));
            while start < cycles {
                let u = |k: u64| streams::unit(seed, streams::GUST, &[i as u64, episode, k]);
                let span = m.cfg.gust_cycles_max - m.cfg.gust_cycles_min + 1;
                let len = m.cfg.gust_cycles_min + ((u(0) * span as f64) as usize).min(span - 1);
                let slack = m.cfg.hotspot_cycles - len;
                let off = ((u(1) * (slack + 1) as f64) as usize).min(slack);
                let accel = m.cfg.gust_accel_min + u(2) * (m.cfg.gust_accel_max - m.cfg.gust_accel_min);
                let at = m.plan_position(i, (start + off) as f64 * m.cfg.t_s);
                let (tangent, normal) = m.frame_at(at.0);
                let direction = (tangent * mix + normal * (1.0 - mix)).normalize();
                v.push(Gust { start_cycle: start + off, cycles: len, accel, direction });
                episode += 1;
                start += period;
            }
            gusts.push(v);
        }
        m.gusts = gusts;
        m
    }

    pub fn group(&self, uav: usize) -> usize {
        uav % self.cfg.groups
    }

    fn group_offset(&self, group: usize) -> usize {
        group * (self.cfg.hotspot_cycles + self.cfg.recovery_cycles)
    }

    fn rotation(&self) -> usize {
        self.cfg.groups * (self.cfg.hotspot_cycles + self.cfg.recovery_cycles)
    }

    pub fn phase(&self, cycle: usize, group: usize) -> Phase {
        let off = self.group_offset(group);
        if cycle < off {
            return Phase::Cruise;
        }
        let r = (cycle - off) % self.rotation();
        if r < self.cfg.hotspot_cycles {
            Phase::Hotspot
        } else if r < self.cfg.hotspot_cycles + self.cfg.recovery_cycles {
            Phase::Recovery
        } else {
            Phase::Cruise
        }
    }

    pub fn groups_in_hotspot(&self, cycle: usize) -> usize {
        (0..self.cfg.groups).filter(|&g| self.phase(cycle, g) == Phase::Hotspot).count()
    }

    pub fn gusts(&self, uav: usize) -> &[Gust] {
        &self.gusts[uav]
    }

    /// Total time spent in the hotspot before `t`, and the time since the
    /// current hotspot began (if in one).
    fn hotspot_time(&self, group: usize, t: f64) -> (f64, Option<f64>) {
        let ts = self.cfg.t_s;
        let hot = self.cfg.hotspot_cycles as f64 * ts;
        let mut start = self.group_offset(group) as f64 * ts;
        let step = self.rotation() as f64 * ts;
        let (mut total, mut inside) = (0.0, None);
        while start < t {
            let d = (t - start).min(hot);
            total += d;
            if t - start < hot {
                inside = Some(t - start);
            }
            start += step;
        }
        (total, inside)
    }

    fn altitude(&self, uav: usize) -> f64 {
        let frac = (uav as f64 * 0.618_033_988_749_895).fract();
        self.cfg.altitude_min + (self.cfg.altitude_max - self.cfg.altitude_min - self.zig_amplitude()) * frac
    }

    fn zig_amplitude(&self) -> f64 {
        let vz = self.cfg.speed * self.cfg.zigzag_deg.to_radians().sin();
        vz * self.cfg.zigzag_period_cycles as f64 * self.cfg.t_s / 2.0
    }

    /// Point and tangent on the perimeter square at arc length `s`.
    fn perimeter(&self, s: f64) -> (Vector3<f64>, usize) {
        let side = 2.0 * self.radius;
        let s = s.rem_euclid(4.0 * side);
        let leg = ((s / side) as usize).min(3);
        let u = s - leg as f64 * side;
        let r = self.radius;
        let p = match leg {
            0 => Vector3::new(-r + u, -r, 0.0),
            1 => Vector3::new(r, -r + u, 0.0),
            2 => Vector3::new(r - u, r, 0.0),
            _ => Vector3::new(-r, r - u, 0.0),
        };
        (p, leg)
    }

    /// Unit tangent and outward normal of a perimeter leg.
    fn frame_at(&self, leg: usize) -> (Vector3<f64>, Vector3<f64>) {
        match leg {
            0 => (Vector3::x(), -Vector3::y()),
            1 => (Vector3::y(), Vector3::x()),
            2 => (-Vector3::x(), Vector3::y()),
            _ => (-Vector3::y(), -Vector3::x()),
        }
    }

    /// Perimeter leg index and planned position/velocity, gusts excluded.
    fn plan_position(&self, uav: usize, t: f64) -> (usize, Vector3<f64>, Vector3<f64>, Phase) {
        let c = &self.cfg;
        let g = self.group(uav);
        let (hot_total, inside) = self.hotspot_time(g, t);
        let slow = c.speed * (1.0 - c.zigzag_deg.to_radians().cos());
        let s0 = uav as f64 * 8.0 * self.radius / self.n_uav as f64;
        let s = s0 + c.speed * t - slow * hot_total;
        let (mut p, leg) = self.perimeter(s);
        let (tangent, _) = self.frame_at(leg);
        p.z = self.altitude(uav);
        let cycle = (t / c.t_s + 1e-9).floor() as usize;
        let phase = self.phase(cycle, g);
        let mut vel = tangent * c.speed;
        if let Some(tau) = inside {
            let vz = c.speed * c.zigzag_deg.to_radians().sin();
            let period = c.zigzag_period_cycles as f64 * c.t_s;
            let x = tau.rem_euclid(period);
            let half = period / 2.0;
            p.z += vz * (half - (x - half).abs());
            vel =
                tangent * (c.speed * c.zigzag_deg.to_radians().cos()) + Vector3::z() * if x < half { vz } else { -vz };
        }
        (leg, p, vel, phase)
    }

    pub fn reference(&self, t: f64, uav: usize) -> Result<RefSample> {
        if !(0.0..=self.cfg.horizon_s + 1e-9).contains(&t) {
            return Err(Error::OutOfHorizon(t));
        }
        let (_, position, velocity, phase) = self.plan_position(uav, t);
        let cycle = (t / self.cfg.t_s + 1e-9).floor() as usize;
        let mut gust_accel = Vector3::zeros();
        let mut gust_step = None;
        for g in &self.gusts[uav] {
            if cycle >= g.start_cycle && cycle < g.start_cycle + g.cycles {
                gust_accel = g.direction * g.accel;
                gust_step = Some(cycle - g.start_cycle);
            }
        }
        Ok(RefSample { position, velocity, phase, gust_accel, gust_step })
    }

    /// Displacement a gust adds over one cycle, given its step index.
    pub fn gust_displacement(&self, sample: &RefSample) -> Vector3<f64> {
        match sample.gust_step {
            Some(m) => sample.gust_accel * self.cfg.t_s * self.cfg.t_s * (m as f64 + 0.5),
            None => Vector3::zeros(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mission() -> (Config, Mission) {
        let c = Config::default();
        let m = Mission::new(&c, 4);
        (c, m)
    }

    #[test]
    fn one_group_in_hotspot_at_most() {
        let (c, m) = mission();
        for k in 0..c.cycles() {
            assert!(m.groups_in_hotspot(k) <= 1);
        }
        assert!((0..c.cycles()).any(|k| m.groups_in_hotspot(k) == 1));
    }

    #[test]
    fn reference_speed_bound() {
        let (c, m) = mission();
        let dt = 0.01;
        for i in 0..c.mission.n_uav {
            let mut t = 0.0;
            while t + dt <= c.mission.horizon_s {
                let a = m.reference(t, i).unwrap().position;
                let b = m.reference(t + dt, i).unwrap().position;
                assert!((b - a).norm() <= c.mission.speed * dt * (1.0 + 1e-9) + 1e-9);
                t += dt;
            }
        }
    }

    #[test]
    fn gusts_within_bounds() {
        let (c, m) = mission();
        for i in 0..c.mission.n_uav {
            assert!(!m.gusts(i).is_empty());
            for g in m.gusts(i) {
                assert!((2.0..=4.0).contains(&g.accel));
                assert!((2..=6).contains(&g.cycles));
                assert!((g.direction.norm() - 1.0).abs() < 1e-12);
                assert!(g.direction.z.abs() < 1e-12);
                for k in g.start_cycle..g.start_cycle + g.cycles {
                    assert_eq!(m.phase(k, m.group(i)), Phase::Hotspot);
                }
            }
        }
    }

    #[test]
    fn horizon_and_altitude() {
        let (c, m) = mission();
        assert!(m.reference(30.5, 0).is_err());
        assert!(m.reference(-0.1, 0).is_err());
        for i in 0..c.mission.n_uav {
            for k in 0..=c.cycles() {
                let z = m.reference(k as f64 * c.mission.t_s, i).unwrap().position.z;
                assert!(z >= c.mission.altitude_min - 1e-9 && z <= c.mission.altitude_max + 1e-9);
            }
        }
    }

    #[test]
    fn seeds_give_same_plan_but_different_gusts() {
        let c = Config::default();
        let (a, b) = (Mission::new(&c, 1), Mission::new(&c, 2));
        assert_eq!(a.reference(3.0, 2).unwrap().position, b.reference(3.0, 2).unwrap().position);
        assert_ne!(a.gusts(2)[0], b.gusts(2)[0]);
    }
}
