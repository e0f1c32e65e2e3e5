//! Hierarchical run configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub mission: MissionConfig,
    pub tdma: TdmaConfig,
    pub radio: RadioConfig,
    pub control: ControlConfig,
    pub cert: CertConfig,
    pub twin: TwinConfig,
    pub baselines: BaselineConfig,
    pub seeds: SeedConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissionConfig {
    pub n_uav: usize,
    pub horizon_s: f64,
    pub t_s: f64,
    pub speed: f64,
    /// Half-width of the square building footprint, centred at the origin.
    pub building_half_width: f64,
    pub building_height: f64,
    pub facade_offset: f64,
    pub altitude_min: f64,
    pub altitude_max: f64,
    pub groups: usize,
    pub hotspot_cycles: usize,
    pub recovery_cycles: usize,
    /// Vertical zigzag angle during the hotspot, degrees.
    pub zigzag_deg: f64,
    pub zigzag_period_cycles: usize,
    pub gust_accel_min: f64,
    pub gust_accel_max: f64,
    pub gust_cycles_min: usize,
    pub gust_cycles_max: usize,
    pub gcs: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdmaConfig {
    pub slots: u32,
    pub t_slot: f64,
    pub t_guard: f64,
    /// Effective symbol rate, symbols per second.
    pub b_eff: f64,
    pub blocklengths: Vec<u32>,
    pub retx_depths: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub p_tx_dbm: f64,
    pub b_ch_hz: f64,
    pub noise_figure_db: f64,
    pub carrier_hz: f64,
    pub los_exponent: f64,
    pub nlos_exponent: f64,
    pub penetration_db: f64,
    pub shadowing_db: f64,
    /// Decoding threshold at the reference blocklength, dB.
    pub gamma0_db: f64,
    pub n0: u32,
    pub max_range: f64,
    /// Predicted large-scale SNR below which a link is treated as down.
    pub min_link_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub lqr_q: f64,
    pub lqr_r: f64,
    /// Process-noise variance per axis and cycle, m².
    pub proc_var: f64,
    /// Measurement-noise variance per axis, m².
    pub meas_var: f64,
    pub lambda_sigma: f64,
    pub epsilon: f64,
    /// Largest certified delay index on both directions.
    pub h_max: usize,
    /// Safety corridor radius defining `V_max`, m.
    pub corridor_m: f64,
    pub sigma_max_factor: f64,
    pub safe_contraction: f64,
    pub safe_v_floor: f64,
    /// Gain multiplier of the onboard fallback tracker.
    pub safe_gain_scale: f64,
    /// Onboard positioning noise per axis in safe mode, m (standard deviation).
    pub safe_gnss_std: f64,
    pub initial_error_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertConfig {
    pub beta: f64,
    pub delta_t: f64,
    pub h_t: usize,
    pub snr_bucket_db: f64,
    pub min_class_records: usize,
    pub min_persistence_pairs: usize,
    /// Service-success rounding granularity (rounded down).
    pub rho_granularity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinConfig {
    pub k_routes: usize,
    pub max_hops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// `v / v_max` tercile edges for retransmission depth 1 and 2.
    pub dyntx_edges: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub calibration: [u64; 2],
    pub evaluation: [u64; 2],
    pub holdout: [u64; 2],
}

impl Default for MissionConfig {
    fn default() -> Self {
        MissionConfig {
            n_uav: 10,
            horizon_s: 30.0,
            t_s: 0.25,
            speed: 15.0,
            building_half_width: 30.0,
            building_height: 85.0,
            facade_offset: 20.0,
            altitude_min: 70.0,
            altitude_max: 100.0,
            groups: 4,
            hotspot_cycles: 6,
            recovery_cycles: 4,
            zigzag_deg: 45.0,
            zigzag_period_cycles: 3,
            gust_accel_min: 2.0,
            gust_accel_max: 4.0,
            gust_cycles_min: 2,
            gust_cycles_max: 6,
            gcs: [-250.0, 0.0, 1.5],
        }
    }
}

impl Default for TdmaConfig {
    fn default() -> Self {
        TdmaConfig {
            slots: 40,
            t_slot: 500e-6,
            t_guard: 50e-6,
            b_eff: 0.35e6,
            blocklengths: vec![400, 800],
            retx_depths: vec![0, 1, 2],
        }
    }
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            p_tx_dbm: 20.0,
            b_ch_hz: 10e6,
            noise_figure_db: 7.0,
            carrier_hz: 2.4e9,
            los_exponent: 2.2,
            nlos_exponent: 3.5,
            penetration_db: 20.0,
            shadowing_db: 4.0,
            gamma0_db: 5.0,
            n0: 200,
            max_range: 600.0,
            min_link_snr_db: -3.0,
        }
    }
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            lqr_q: 2.0,
            lqr_r: 1.0,
            proc_var: 0.01 / 3.0,
            meas_var: 0.01,
            lambda_sigma: 0.3,
            epsilon: 1e-4,
            h_max: 3,
            corridor_m: 10.0,
            sigma_max_factor: 25.0,
            safe_contraction: 0.95,
            safe_v_floor: 1e-5,
            safe_gain_scale: 0.5,
            safe_gnss_std: 1.5,
            initial_error_std: 0.3,
        }
    }
}

impl Default for CertConfig {
    fn default() -> Self {
        CertConfig {
            beta: 0.05,
            delta_t: 0.01,
            h_t: 16,
            snr_bucket_db: 3.0,
            min_class_records: 50,
            min_persistence_pairs: 30,
            rho_granularity: 1e-4,
        }
    }
}

impl Default for TwinConfig {
    fn default() -> Self {
        TwinConfig { k_routes: 3, max_hops: 3 }
    }
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { dyntx_edges: [1.0 / 3.0, 2.0 / 3.0] }
    }
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig { calibration: [1000, 1040], evaluation: [0, 10], holdout: [2000, 2020] }
    }
}

fn overlaps(a: [u64; 2], b: [u64; 2]) -> bool {
    a[0] < b[1] && b[0] < a[1]
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn tau_slot(&self) -> f64 {
        self.tdma.t_slot + self.tdma.t_guard
    }

    pub fn cycles(&self) -> usize {
        (self.mission.horizon_s / self.mission.t_s).round() as usize
    }

    pub fn sigma_proc_tr(&self) -> f64 {
        3.0 * self.control.proc_var
    }

    pub fn sigma_meas_tr(&self) -> f64 {
        3.0 * self.control.meas_var
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mission;
        let bad = |s: &str| Err(Error::Config(s.to_string()));
        if m.n_uav == 0 || m.t_s <= 0.0 || m.horizon_s <= 0.0 {
            return bad("mission needs at least one UAV and positive durations");
        }
        let r = m.horizon_s / m.t_s;
        if (r - r.round()).abs() > 1e-9 * r {
            return bad("horizon must be a whole number of control periods");
        }
        if self.tdma.slots as f64 * self.tau_slot() > m.t_s * (1.0 + 1e-12) {
            return bad("frame S * (T_slot + T_guard) exceeds the control period");
        }
        if (self.tdma.b_eff * self.tdma.t_slot).floor() < 1.0 {
            return bad("slot carries no symbols");
        }
        if self.tdma.blocklengths.is_empty() || self.tdma.retx_depths.is_empty() {
            return bad("transmission configuration lists must be non-empty");
        }
        if m.groups == 0 || m.hotspot_cycles == 0 {
            return bad("invalid hotspot rotation");
        }
        if m.gust_cycles_min == 0 || m.gust_cycles_min > m.gust_cycles_max || m.gust_cycles_max > m.hotspot_cycles {
            return bad("gust duration must fit in the hotspot window");
        }
        if !(0.0 < self.cert.beta && self.cert.beta < 1.0) || !(0.0 < self.cert.delta_t && self.cert.delta_t < 1.0) {
            return bad("beta and delta_t must lie in (0, 1)");
        }
        if self.control.lambda_sigma <= 0.0 || self.control.epsilon <= 0.0 {
            return bad("lambda_sigma and epsilon must be positive");
        }
        let s = &self.seeds;
        if overlaps(s.calibration, s.evaluation)
            || overlaps(s.holdout, s.evaluation)
            || overlaps(s.calibration, s.holdout)
        {
            return bad("calibration, hold-out and evaluation seed ranges must be disjoint");
        }
        Ok(())
    }

    /// Slot period used to schedule the hotspot rotation.
    pub fn rotation_period(&self) -> usize {
        self.mission.groups * (self.mission.hotspot_cycles + self.mission.recovery_cycles)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_round_trips() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.cycles(), 120);
    }

    #[test]
    fn table_numerology_passes() {
        let mut c = Config::default();
        c.tdma.slots = 160;
        assert!((160.0 * c.tau_slot() - 0.088).abs() < 1e-12);
        c.validate().unwrap();
        c.tdma.slots = 460;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = Config::from_toml("[mission]\nn_uav = 4\n").unwrap();
        assert_eq!(c.mission.n_uav, 4);
        assert_eq!(c.tdma, TdmaConfig::default());
        assert!(Config::from_toml("[mission]\nbogus = 1\n").is_err());
    }

    #[test]
    fn overlapping_seeds_rejected() {
        let c = Config::from_toml("[seeds]\ncalibration = [0, 20]\n");
        assert!(c.is_err());
    }
}
