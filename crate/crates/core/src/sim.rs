//! Simplified drop-based stochastic channel generator.
//!
//! Each drop realizes correlated large-scale parameters (shadowing,
//! K-factor, delay spread, angular spread), then builds a handful of main
//! paths whose delays and azimuths are rescaled so the drop's RMS delay
//! and angular spreads are met exactly. Used for pre-training data and
//! synthetic pseudo-measurements.

use nalgebra::{Matrix4, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::{db_to_linear, linear_to_db, wrap_azimuth, ChannelRealization, Mpc, FLOOR_DB, NUM_PATHS};
use crate::error::SimError;
use crate::stats::{fspl, weighted_spread};

/// Speed of light in m/ns.
const C_M_PER_NS: f64 = 0.299_792_458;
/// Reference distance of the close-in model.
pub const D0_M: f64 = 1.0;

/// Large-scale parameter statistics. Correlation order is
/// [shadowing, K-factor, delay spread, angular spread].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LargeScaleParams {
    pub ple: f64,
    pub shadow_sigma_db: f64,
    pub k_factor_mean_db: f64,
    pub k_factor_std_db: f64,
    /// Arithmetic mean of the lognormal delay spread, ns.
    pub ds_mean_ns: f64,
    /// Standard deviation of ln(DS).
    pub ds_log_std: f64,
    pub as_mean_deg: f64,
    pub as_log_std: f64,
    pub corr: [[f64; 4]; 4],
}

impl Default for LargeScaleParams {
    fn default() -> Self {
        LargeScaleParams {
            ple: 1.5138,
            shadow_sigma_db: 2.0,
            k_factor_mean_db: 6.0,
            k_factor_std_db: 2.0,
            ds_mean_ns: 10.94,
            ds_log_std: 0.3,
            as_mean_deg: 30.99,
            as_log_std: 0.25,
            corr: [
                [1.0, 0.5, -0.4, -0.3],
                [0.5, 1.0, -0.4, -0.2],
                [-0.4, -0.4, 1.0, 0.4],
                [-0.3, -0.2, 0.4, 1.0],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub lsp: LargeScaleParams,
    pub frequency_hz: f64,
    pub distance_min_m: f64,
    pub distance_max_m: f64,
    /// Place receivers on an even grid over the distance range instead of
    /// drawing distances uniformly.
    pub evenly_spaced: bool,
    pub main_paths_min: usize,
    pub main_paths_max: usize,
    pub cluster_centers_deg: Vec<f64>,
    /// Standard deviation of azimuths around their cluster center.
    pub cluster_spread_deg: f64,
    /// Azimuth of the dominant path.
    pub dominant_azimuth_deg: f64,
    pub eoa_min_deg: f64,
    pub eoa_max_deg: f64,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            lsp: LargeScaleParams::default(),
            frequency_hz: 313.5e9,
            distance_min_m: 3.0,
            distance_max_m: 25.0,
            evenly_spaced: false,
            main_paths_min: 6,
            main_paths_max: 8,
            cluster_centers_deg: vec![0.0, 180.0, 360.0],
            cluster_spread_deg: 8.0,
            dominant_azimuth_deg: 180.0,
            eoa_min_deg: -20.0,
            eoa_max_deg: 20.0,
            seed: 1,
            id_prefix: "sim".into(),
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }
}

/// One drop's realized large-scale parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lsp {
    pub shadow_db: f64,
    pub k_factor_db: f64,
    pub ds_ns: f64,
    pub as_deg: f64,
}

/// Validated simulator with the precomputed correlation square root.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    corr_sqrt: Matrix4<f64>,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        let c = &config;
        let l = &c.lsp;
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(l.ple > 0.0) {
            return bad("ple must be positive");
        }
        if [l.shadow_sigma_db, l.k_factor_std_db, l.ds_log_std, l.as_log_std]
            .iter()
            .any(|s| !(*s >= 0.0))
        {
            return bad("standard deviations must be non-negative");
        }
        if !(l.ds_mean_ns > 0.0 && l.as_mean_deg > 0.0) {
            return bad("delay and angular spread means must be positive");
        }
        if !(c.frequency_hz > 0.0) {
            return bad("frequency must be positive");
        }
        if !(c.distance_min_m > D0_M && c.distance_max_m >= c.distance_min_m) {
            return bad("distance range must satisfy 1 m < d_min <= d_max");
        }
        if c.main_paths_min < 1 || c.main_paths_max > NUM_PATHS || c.main_paths_min > c.main_paths_max {
            return bad("main path range must satisfy 1 <= min <= max <= 15");
        }
        if c.cluster_centers_deg.is_empty() || !(c.cluster_spread_deg >= 0.0) {
            return bad("need at least one cluster and a non-negative spread");
        }
        if !(-20.0..=20.0).contains(&c.eoa_min_deg)
            || !(-20.0..=20.0).contains(&c.eoa_max_deg)
            || c.eoa_min_deg > c.eoa_max_deg
        {
            return bad("elevation range must lie within [-20, 20]");
        }
        let m = Matrix4::from_fn(|i, j| l.corr[i][j]);
        for i in 0..4 {
            if (m[(i, i)] - 1.0).abs() > 1e-12 {
                return bad("correlation matrix must have unit diagonal");
            }
            for j in 0..4 {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 {
                    return bad("correlation matrix must be symmetric");
                }
            }
        }
        let eig = SymmetricEigen::new(m);
        let min_eig = eig.eigenvalues.min();
        if min_eig < -1e-10 {
            return Err(SimError::NotPsd(min_eig));
        }
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let corr_sqrt = eig.eigenvectors * Matrix4::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
        Ok(Simulator { config, corr_sqrt })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Draws correlated large-scale parameters for one drop.
    pub fn sample_lsp<R: Rng + ?Sized>(&self, rng: &mut R) -> Lsp {
        let l = &self.config.lsp;
        let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let zv = nalgebra::Vector4::from(z);
        let y = self.corr_sqrt * zv;
        Lsp {
            shadow_db: l.shadow_sigma_db * y[0],
            k_factor_db: l.k_factor_mean_db + l.k_factor_std_db * y[1],
            ds_ns: lognormal_with_mean(l.ds_mean_ns, l.ds_log_std, y[2]),
            as_deg: lognormal_with_mean(l.as_mean_deg, l.as_log_std, y[3]),
        }
    }

    /// Builds one channel at `distance_m`.
    pub fn generate_channel<R: Rng + ?Sized>(
        &self,
        distance_m: f64,
        rng: &mut R,
        id: impl Into<String>,
    ) -> Result<ChannelRealization, SimError> {
        let c = &self.config;
        if !(distance_m >= c.distance_min_m && distance_m <= c.distance_max_m) {
            return Err(SimError::Config(format!(
                "distance {distance_m} outside [{}, {}]",
                c.distance_min_m, c.distance_max_m
            )));
        }
        let lsp = self.sample_lsp(rng);
        let n = rng.random_range(c.main_paths_min..=c.main_paths_max);

        let path_loss = fspl(D0_M, c.frequency_hz).map_err(|e| SimError::Config(e.to_string()))?
            + 10.0 * c.lsp.ple * (distance_m / D0_M).log10()
            + lsp.shadow_db;
        let total = db_to_linear(-path_loss);

        // unit-scale excess delays, dominant path first
        let mut excess: Vec<f64> = (0..n)
            .map(|i| if i == 0 { 0.0 } else { rng.sample::<f64, _>(Exp1) })
            .collect();
        excess[1..].sort_by(f64::total_cmp);

        let k = db_to_linear(lsp.k_factor_db);
        let mut power = vec![0.0; n];
        if n == 1 {
            power[0] = 1.0;
        } else {
            power[0] = k / (k + 1.0);
            let tail: f64 = excess[1..].iter().map(|e| (-e).exp()).sum();
            for i in 1..n {
                power[i] = (-excess[i]).exp() / tail / (k + 1.0);
            }
        }

        let raw_ds = weighted_spread(excess.iter().copied().zip(power.iter().copied()))
            .map(|s| s.rms)
            .unwrap_or(0.0);
        let delay_scale = if raw_ds > 0.0 { lsp.ds_ns / raw_ds } else { 0.0 };
        let los_delay = distance_m / C_M_PER_NS;
        let delays: Vec<f64> = excess.iter().map(|e| los_delay + delay_scale * e).collect();

        let azimuths = self.draw_azimuths(&power, lsp.as_deg, rng);

        let mut mpcs = Vec::with_capacity(NUM_PATHS);
        for i in 0..n {
            let eoa = if i == 0 {
                0.0f64.clamp(c.eoa_min_deg, c.eoa_max_deg)
            } else {
                rng.random_range(c.eoa_min_deg..=c.eoa_max_deg)
            };
            let gain = linear_to_db(power[i] * total).clamp(FLOOR_DB, 0.0);
            mpcs.push(Mpc::new(gain, delays[i], azimuths[i], eoa));
        }
        Ok(ChannelRealization::new(id, distance_m, mpcs)?)
    }

    /// Draws azimuths from the wrapped cluster mixture, then rescales them
    /// about their power-weighted mean so the linear RMS angular spread
    /// equals `target`.
    fn draw_azimuths<R: Rng + ?Sized>(&self, power: &[f64], target: f64, rng: &mut R) -> Vec<f64> {
        let c = &self.config;
        let raw: Vec<f64> = (0..power.len())
            .map(|i| {
                let center = if i == 0 {
                    c.dominant_azimuth_deg
                } else {
                    c.cluster_centers_deg[rng.random_range(0..c.cluster_centers_deg.len())]
                };
                let jitter: f64 = rng.sample(StandardNormal);
                wrap_azimuth(center + c.cluster_spread_deg * jitter)
            })
            .collect();
        let spread = weighted_spread(raw.iter().copied().zip(power.iter().copied())).expect("powers are positive");
        if spread.rms == 0.0 {
            if power.len() > 1 {
                log::warn!("angular spread target {target} unreachable: all paths share one azimuth");
            }
            return raw;
        }
        let upper = 360.0 - 1e-9;
        let rescaled = |scale: f64| -> Vec<f64> {
            raw.iter()
                .map(|a| (spread.mean + scale * (a - spread.mean)).clamp(0.0, upper))
                .collect()
        };
        let scale = target / spread.rms;
        // largest scale that keeps every angle inside [0, 360) without clamping
        let mut limit = f64::INFINITY;
        for &a in &raw {
            let dev = a - spread.mean;
            if dev > 0.0 {
                limit = limit.min((upper - spread.mean) / dev);
            } else if dev < 0.0 {
                limit = limit.min(spread.mean / -dev);
            }
        }
        if scale <= limit {
            return rescaled(scale);
        }
        // Beyond the limit some angles pin to the range edges and the spread
        // is no longer linear in the scale; bisect on the realized spread.
        let realized = |angles: &[f64]| {
            weighted_spread(angles.iter().copied().zip(power.iter().copied()))
                .map(|s| s.rms)
                .unwrap_or(0.0)
        };
        let (mut lo, mut hi) = (limit, limit.max(1.0) * 2.0);
        while realized(&rescaled(hi)) < target {
            if hi > 1e12 {
                let best = rescaled(hi);
                log::warn!(
                    "angular spread target {target:.2} deg unreachable, reached {:.2} deg",
                    realized(&best)
                );
                return best;
            }
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if realized(&rescaled(mid)) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        rescaled(hi)
    }

    /// Distance of channel `index` out of `n`.
    fn distance_for<R: Rng + ?Sized>(&self, index: usize, n: usize, rng: &mut R) -> f64 {
        let c = &self.config;
        if c.evenly_spaced {
            if n == 1 {
                return 0.5 * (c.distance_min_m + c.distance_max_m);
            }
            c.distance_min_m + (c.distance_max_m - c.distance_min_m) * index as f64 / (n - 1) as f64
        } else {
            rng.random_range(c.distance_min_m..=c.distance_max_m)
        }
    }

    /// Generates `n` channels. Channel `i` draws from its own stream of the
    /// configured seed, so the result does not depend on generation order.
    pub fn generate_dataset(&self, n: usize) -> Result<Vec<ChannelRealization>, SimError> {
        (0..n)
            .map(|i| {
                let mut rng = channel_rng(self.config.seed, i);
                let d = self.distance_for(i, n, &mut rng);
                self.generate_channel(d, &mut rng, format!("{}-{i:05}", self.config.id_prefix))
            })
            .collect()
    }
}

/// Independent generator stream for channel `index`.
pub fn channel_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn lognormal_with_mean(mean: f64, log_std: f64, z: f64) -> f64 {
    mean * (log_std * z - 0.5 * log_std * log_std).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{channel_angular_spread, channel_delay_spread, fit_ci_model};

    fn zero_variance() -> SimConfig {
        let mut c = SimConfig::default();
        c.lsp.shadow_sigma_db = 0.0;
        c.lsp.k_factor_std_db = 0.0;
        c.lsp.ds_log_std = 0.0;
        c.lsp.as_log_std = 0.0;
        c
    }

    #[test]
    fn zero_std_gives_mean_lsps() {
        let sim = Simulator::new(zero_variance()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let l = sim.sample_lsp(&mut rng);
            assert_eq!(l.shadow_db, 0.0);
            assert_eq!(l.k_factor_db, 6.0);
            assert!((l.ds_ns - 10.94).abs() < 1e-12);
            assert!((l.as_deg - 30.99).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_psd_corr() {
        let mut c = SimConfig::default();
        c.lsp.corr = [
            [1.0, 0.9, 0.9, 0.0],
            [0.9, 1.0, -0.9, 0.0],
            [0.9, -0.9, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        assert!(matches!(Simulator::new(c), Err(SimError::NotPsd(_))));
    }

    #[test]
    fn rejects_bad_ranges() {
        let c = SimConfig {
            distance_min_m: 0.5,
            ..SimConfig::default()
        };
        assert!(Simulator::new(c).is_err());
        let c = SimConfig {
            main_paths_max: 16,
            ..SimConfig::default()
        };
        assert!(Simulator::new(c).is_err());
    }

    fn corr_of(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    fn draws(corr: [[f64; 4]; 4]) -> Vec<Lsp> {
        let mut c = SimConfig::default();
        c.lsp.corr = corr;
        let sim = Simulator::new(c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..10_000).map(|_| sim.sample_lsp(&mut rng)).collect()
    }

    #[test]
    fn identity_corr_gives_uncorrelated_draws() {
        let id = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let d = draws(id);
        let cols: [Vec<f64>; 4] = [
            d.iter().map(|l| l.shadow_db).collect(),
            d.iter().map(|l| l.k_factor_db).collect(),
            d.iter().map(|l| l.ds_ns.ln()).collect(),
            d.iter().map(|l| l.as_deg.ln()).collect(),
        ];
        for i in 0..4 {
            for j in i + 1..4 {
                let r = corr_of(&cols[i], &cols[j]);
                assert!(r.abs() < 0.05, "corr({i},{j}) = {r}");
            }
        }
    }

    #[test]
    fn ds_as_correlation_is_reproduced() {
        let corr = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.8],
            [0.0, 0.0, 0.8, 1.0],
        ];
        let d = draws(corr);
        let ds: Vec<f64> = d.iter().map(|l| l.ds_ns.ln()).collect();
        let az: Vec<f64> = d.iter().map(|l| l.as_deg.ln()).collect();
        let r = corr_of(&ds, &az);
        assert!((r - 0.8).abs() < 0.05, "{r}");
    }

    #[test]
    fn per_channel_spreads_match_targets_exactly() {
        let sim = Simulator::new(zero_variance()).unwrap();
        for ch in sim.generate_dataset(200).unwrap() {
            let ds = channel_delay_spread(&ch).unwrap().rms;
            let az = channel_angular_spread(&ch).unwrap().rms;
            assert!((ds - 10.94).abs() < 1e-6, "{} ds {ds}", ch.id);
            assert!((az - 30.99).abs() < 1e-6, "{} as {az}", ch.id);
        }
    }

    #[test]
    fn huge_k_factor_collapses_delay_spread() {
        let mut c = zero_variance();
        c.lsp.k_factor_mean_db = 150.0;
        let sim = Simulator::new(c).unwrap();
        for ch in sim.generate_dataset(20).unwrap() {
            let live = ch.mpcs.iter().filter(|m| m.power() > 0.0).count();
            assert_eq!(live, 1);
            let ds = channel_delay_spread(&ch).unwrap().rms;
            assert!(ds < 1e-6, "{ds}");
        }
    }

    #[test]
    fn ple_recovered_from_dataset() {
        let mut c = SimConfig::default();
        c.lsp.shadow_sigma_db = 2.0;
        let sim = Simulator::new(c.clone()).unwrap();
        let ds = sim.generate_dataset(2000).unwrap();
        let samples: Vec<_> = ds.iter().map(|ch| (ch.distance_m, ch.path_loss_db())).collect();
        let fit = fit_ci_model(&samples, c.frequency_hz, 1.0).unwrap();
        assert!((fit.ple - 1.5138).abs() < 0.05, "{}", fit.ple);
    }

    #[test]
    fn dataset_is_deterministic_and_valid() {
        let sim = Simulator::new(SimConfig::default()).unwrap();
        let a = sim.generate_dataset(50).unwrap();
        let b = sim.generate_dataset(50).unwrap();
        assert_eq!(a, b);
        for ch in &a {
            ch.validate().unwrap();
            let main = ch.mpcs.iter().filter(|m| m.gain_db > FLOOR_DB).count();
            assert!((6..=8).contains(&main));
        }
    }

    #[test]
    fn evenly_spaced_distances() {
        let c = SimConfig {
            evenly_spaced: true,
            ..SimConfig::default()
        };
        let ds = Simulator::new(c).unwrap().generate_dataset(21).unwrap();
        assert_eq!(ds[0].distance_m, 3.0);
        assert_eq!(ds[20].distance_m, 25.0);
        assert!((ds[10].distance_m - 14.0).abs() < 1e-12);
    }

    #[test]
    fn parses_toml_with_nested_sections() {
        let text = r#"
            frequency_hz = 3.0e11
            seed = 7
            [lsp]
            ple = 1.7
            corr = [[1.0,0.0,0.0,0.0],[0.0,1.0,0.0,0.0],[0.0,0.0,1.0,0.2],[0.0,0.0,0.2,1.0]]
        "#;
        let c = SimConfig::from_toml(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.lsp.ple, 1.7);
        assert_eq!(c.lsp.ds_mean_ns, 10.94);
        assert!(SimConfig::from_toml("bogus_key = 1").is_err());
    }
}
