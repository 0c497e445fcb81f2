//! Channel data model: multipath components, the flat 60-element encoding
//! consumed by the networks, min-max normalization, impulse-response
//! reconstruction, and power-delay-angular profile (PDAP) rasterization.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ChannelError;

/// Number of multipath components per channel.
pub const NUM_PATHS: usize = 15;
/// Values per multipath component: gain, delay, azimuth, elevation.
pub const FEATURES_PER_PATH: usize = 4;
/// Length of the flat channel vector.
pub const FLAT_LEN: usize = NUM_PATHS * FEATURES_PER_PATH;
/// Power floor used for padding entries and empty PDAP cells.
pub const FLOOR_DB: f64 = -200.0;
/// Elevation limits of the receiver scan, degrees.
pub const EOA_MIN_DEG: f64 = -20.0;
pub const EOA_MAX_DEG: f64 = 20.0;
/// Time resolution of the channel sounder, ns.
pub const SOUNDER_RESOLUTION_NS: f64 = 0.0667;

/// One multipath component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mpc {
    pub gain_db: f64,
    pub delay_ns: f64,
    pub aoa_deg: f64,
    pub eoa_deg: f64,
}

impl Mpc {
    pub const PADDING: Mpc = Mpc {
        gain_db: FLOOR_DB,
        delay_ns: 0.0,
        aoa_deg: 0.0,
        eoa_deg: 0.0,
    };

    pub fn new(gain_db: f64, delay_ns: f64, aoa_deg: f64, eoa_deg: f64) -> Self {
        Mpc {
            gain_db,
            delay_ns,
            aoa_deg,
            eoa_deg,
        }
    }

    /// Linear power |α|². Entries at or below the floor are padding and
    /// carry no power.
    pub fn power(&self) -> f64 {
        if self.gain_db <= FLOOR_DB {
            0.0
        } else {
            db_to_linear(self.gain_db)
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let finite = [self.gain_db, self.delay_ns, self.aoa_deg, self.eoa_deg]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(ChannelError::NonFinite);
        }
        if self.delay_ns < 0.0 {
            return Err(ChannelError::InvalidMpc(format!("negative delay {}", self.delay_ns)));
        }
        if !(0.0..360.0).contains(&self.aoa_deg) {
            return Err(ChannelError::InvalidMpc(format!(
                "azimuth {} outside [0, 360)",
                self.aoa_deg
            )));
        }
        if !(EOA_MIN_DEG..=EOA_MAX_DEG).contains(&self.eoa_deg) {
            return Err(ChannelError::InvalidMpc(format!(
                "elevation {} outside [-20, 20]",
                self.eoa_deg
            )));
        }
        if !(FLOOR_DB..=0.0).contains(&self.gain_db) {
            return Err(ChannelError::InvalidMpc(format!(
                "gain {} dB outside [{FLOOR_DB}, 0]",
                self.gain_db
            )));
        }
        Ok(())
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(p: f64) -> f64 {
    10.0 * p.log10()
}

/// Wraps an azimuth into [0, 360).
pub fn wrap_azimuth(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// A channel realization: exactly [`NUM_PATHS`] components sorted by
/// descending gain, plus the Tx-Rx distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub id: String,
    pub distance_m: f64,
    pub mpcs: Vec<Mpc>,
}

impl ChannelRealization {
    /// Builds a channel from up to 15 components, padding with floor
    /// entries and sorting by descending gain.
    pub fn new(id: impl Into<String>, distance_m: f64, mut mpcs: Vec<Mpc>) -> Result<Self, ChannelError> {
        if mpcs.len() > NUM_PATHS {
            return Err(ChannelError::PathCount(mpcs.len()));
        }
        mpcs.resize(NUM_PATHS, Mpc::PADDING);
        sort_by_gain(&mut mpcs);
        let ch = ChannelRealization {
            id: id.into(),
            distance_m,
            mpcs,
        };
        ch.validate()?;
        Ok(ch)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.mpcs.len() != NUM_PATHS {
            return Err(ChannelError::PathCount(self.mpcs.len()));
        }
        if !(self.distance_m.is_finite() && self.distance_m > 0.0) {
            return Err(ChannelError::InvalidDistance(self.distance_m));
        }
        for m in &self.mpcs {
            m.validate()?;
        }
        if self.mpcs.windows(2).any(|w| w[0].gain_db < w[1].gain_db) {
            return Err(ChannelError::Unsorted);
        }
        Ok(())
    }

    /// Total received linear power Σ|α_l|².
    pub fn total_power(&self) -> f64 {
        self.mpcs.iter().map(Mpc::power).sum()
    }

    /// Path loss in dB: transmitted over received power.
    pub fn path_loss_db(&self) -> f64 {
        -linear_to_db(self.total_power())
    }
}

/// Stable sort by descending gain.
pub fn sort_by_gain(mpcs: &mut [Mpc]) {
    mpcs.sort_by(|a, b| b.gain_db.total_cmp(&a.gain_db));
}

/// The 60-element channel encoding: 15 consecutive [gain, delay, aoa, eoa]
/// quadruples.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatChannelVector {
    pub values: [f64; FLAT_LEN],
    pub normalized: bool,
}

impl FlatChannelVector {
    pub fn from_slice(values: &[f64], normalized: bool) -> Result<Self, ChannelError> {
        let values: [f64; FLAT_LEN] = values.try_into().map_err(|_| ChannelError::FlatLength(values.len()))?;
        Ok(FlatChannelVector { values, normalized })
    }
}

pub fn flatten(channel: &ChannelRealization) -> FlatChannelVector {
    let mut values = [0.0; FLAT_LEN];
    for (chunk, m) in values.chunks_exact_mut(FEATURES_PER_PATH).zip(&channel.mpcs) {
        chunk.copy_from_slice(&[m.gain_db, m.delay_ns, m.aoa_deg, m.eoa_deg]);
    }
    FlatChannelVector {
        values,
        normalized: false,
    }
}

/// Corrections applied while decoding a flat vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeDiagnostics {
    pub clamped_delays: usize,
    pub wrapped_azimuths: usize,
    pub clamped_elevations: usize,
    pub clamped_gains: usize,
}

/// Decodes a denormalized vector into a valid channel, repairing values the
/// generator may place outside the physical ranges.
pub fn unflatten(
    vec: &FlatChannelVector,
    distance_m: f64,
    id: impl Into<String>,
) -> Result<(ChannelRealization, DecodeDiagnostics), ChannelError> {
    if vec.normalized {
        return Err(ChannelError::NormalizedInput);
    }
    if vec.values.iter().any(|v| !v.is_finite()) {
        return Err(ChannelError::NonFinite);
    }
    let mut diag = DecodeDiagnostics::default();
    let mut mpcs: Vec<Mpc> = vec
        .values
        .chunks_exact(FEATURES_PER_PATH)
        .map(|q| {
            let mut m = Mpc::new(q[0], q[1], q[2], q[3]);
            if m.delay_ns < 0.0 {
                m.delay_ns = 0.0;
                diag.clamped_delays += 1;
            }
            if !(0.0..360.0).contains(&m.aoa_deg) {
                m.aoa_deg = wrap_azimuth(m.aoa_deg);
                diag.wrapped_azimuths += 1;
            }
            if !(EOA_MIN_DEG..=EOA_MAX_DEG).contains(&m.eoa_deg) {
                m.eoa_deg = m.eoa_deg.clamp(EOA_MIN_DEG, EOA_MAX_DEG);
                diag.clamped_elevations += 1;
            }
            if !(FLOOR_DB..=0.0).contains(&m.gain_db) {
                m.gain_db = m.gain_db.clamp(FLOOR_DB, 0.0);
                diag.clamped_gains += 1;
            }
            m
        })
        .collect();
    sort_by_gain(&mut mpcs);
    let ch = ChannelRealization {
        id: id.into(),
        distance_m,
        mpcs,
    };
    ch.validate()?;
    Ok((ch, diag))
}

/// Per-feature min/max ranges for the flat encoding, plus the distance
/// scale of the condition variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    /// Minimum of gain, delay, aoa, eoa.
    pub min: [f64; FEATURES_PER_PATH],
    pub max: [f64; FEATURES_PER_PATH],
    pub distance_max: f64,
}

impl NormalizationStats {
    pub fn from_dataset(channels: &[ChannelRealization]) -> Result<Self, ChannelError> {
        if channels.is_empty() {
            return Err(ChannelError::EmptyDataset);
        }
        let mut min = [f64::INFINITY; FEATURES_PER_PATH];
        let mut max = [f64::NEG_INFINITY; FEATURES_PER_PATH];
        let mut distance_max = 0.0f64;
        for ch in channels {
            distance_max = distance_max.max(ch.distance_m);
            let flat = flatten(ch);
            for q in flat.values.chunks_exact(FEATURES_PER_PATH) {
                for f in 0..FEATURES_PER_PATH {
                    min[f] = min[f].min(q[f]);
                    max[f] = max[f].max(q[f]);
                }
            }
        }
        // a constant feature still needs a non-degenerate range
        for f in 0..FEATURES_PER_PATH {
            if max[f] <= min[f] {
                max[f] = min[f] + 1.0;
            }
        }
        let stats = NormalizationStats { min, max, distance_max };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        for f in 0..FEATURES_PER_PATH {
            if !(self.max[f] > self.min[f]) {
                return Err(ChannelError::DegenerateStats(f));
            }
        }
        if !(self.distance_max > 0.0) {
            return Err(ChannelError::InvalidDistance(self.distance_max));
        }
        Ok(())
    }

    /// Maps a distance to the condition value c ∈ [-1, 1].
    pub fn normalize_distance(&self, distance_m: f64) -> f64 {
        (2.0 * distance_m / self.distance_max - 1.0).clamp(-1.0, 1.0)
    }

    pub fn denormalize_distance(&self, c: f64) -> f64 {
        (c + 1.0) * 0.5 * self.distance_max
    }
}

/// Min-max maps every feature to [-1, 1]. Returns the vector and the number
/// of entries clamped because they fell outside the training range.
pub fn normalize(
    vec: &FlatChannelVector,
    stats: &NormalizationStats,
) -> Result<(FlatChannelVector, usize), ChannelError> {
    if vec.normalized {
        return Err(ChannelError::NormalizedInput);
    }
    let mut clamped = 0;
    let mut values = [0.0; FLAT_LEN];
    for (i, (&v, out)) in vec.values.iter().zip(values.iter_mut()).enumerate() {
        let f = i % FEATURES_PER_PATH;
        let (lo, hi) = (stats.min[f], stats.max[f]);
        let v = if v < lo || v > hi {
            clamped += 1;
            v.clamp(lo, hi)
        } else {
            v
        };
        *out = 2.0 * (v - lo) / (hi - lo) - 1.0;
    }
    Ok((
        FlatChannelVector {
            values,
            normalized: true,
        },
        clamped,
    ))
}

/// Inverse of [`normalize`]. Values outside [-1, 1] are mapped affinely
/// rather than clamped, so the decoder sees what the network produced.
pub fn denormalize(vec: &FlatChannelVector, stats: &NormalizationStats) -> Result<FlatChannelVector, ChannelError> {
    if !vec.normalized {
        return Err(ChannelError::UnnormalizedInput);
    }
    let mut values = [0.0; FLAT_LEN];
    for (i, (&v, out)) in vec.values.iter().zip(values.iter_mut()).enumerate() {
        let f = i % FEATURES_PER_PATH;
        *out = (v + 1.0) * 0.5 * (stats.max[f] - stats.min[f]) + stats.min[f];
    }
    Ok(FlatChannelVector {
        values,
        normalized: false,
    })
}

/// Discrete complex impulse response on a uniform tap grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub tap_ns: f64,
    pub taps: Vec<Complex64>,
    /// Set when the tap grid is coarser than the sounder resolution.
    pub coarse_grid: bool,
}

impl ImpulseResponse {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t.norm_sqr()).sum()
    }
}

/// Rebuilds h(τ) = Σ α_l e^{jϕ_l} δ(τ − τ_l) on a tap grid, drawing each
/// phase uniformly from `rng`. Paths falling in the same tap add coherently.
pub fn reconstruct_cir<R: Rng + ?Sized>(
    channel: &ChannelRealization,
    rng: &mut R,
    tap_ns: f64,
) -> Result<ImpulseResponse, ChannelError> {
    if !(tap_ns.is_finite() && tap_ns > 0.0) {
        return Err(ChannelError::InvalidGrid("tap interval must be positive".into()));
    }
    let coarse_grid = tap_ns > SOUNDER_RESOLUTION_NS;
    if coarse_grid {
        log::warn!("tap interval {tap_ns} ns is coarser than the {SOUNDER_RESOLUTION_NS} ns sounder resolution");
    }
    let max_delay = channel.mpcs.iter().map(|m| m.delay_ns).fold(0.0f64, f64::max);
    let n_taps = (max_delay / tap_ns).round() as usize + 1;
    let mut taps = vec![Complex64::new(0.0, 0.0); n_taps];
    for m in &channel.mpcs {
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let amp = m.power().sqrt();
        let idx = (m.delay_ns / tap_ns).round() as usize;
        taps[idx] += Complex64::from_polar(amp, phase);
    }
    Ok(ImpulseResponse {
        tap_ns,
        taps,
        coarse_grid,
    })
}

/// Delay x azimuth raster definition for PDAPs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdapGrid {
    pub delta_tau_ns: f64,
    pub delta_theta_deg: f64,
    pub max_delay_ns: f64,
    pub floor_db: f64,
}

impl Default for PdapGrid {
    fn default() -> Self {
        PdapGrid {
            delta_tau_ns: 1.0,
            delta_theta_deg: 10.0,
            max_delay_ns: 200.0,
            floor_db: FLOOR_DB,
        }
    }
}

impl PdapGrid {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.delta_tau_ns > 0.0 && self.delta_theta_deg > 0.0) {
            return Err(ChannelError::InvalidGrid("bin widths must be positive".into()));
        }
        if !(self.max_delay_ns > 0.0) {
            return Err(ChannelError::InvalidGrid("delay range must be positive".into()));
        }
        if !self.floor_db.is_finite() {
            return Err(ChannelError::InvalidGrid("floor must be finite".into()));
        }
        Ok(())
    }

    pub fn delay_bins(&self) -> usize {
        (self.max_delay_ns / self.delta_tau_ns).ceil() as usize
    }

    pub fn azimuth_bins(&self) -> usize {
        (360.0 / self.delta_theta_deg).ceil() as usize
    }
}

/// Power-delay-angular profile in dB, row-major over (delay, azimuth).
#[derive(Debug, Clone, PartialEq)]
pub struct Pdap {
    pub grid: PdapGrid,
    pub delay_bins: usize,
    pub azimuth_bins: usize,
    pub power_db: Vec<f64>,
    /// Components dropped because their delay exceeded the grid.
    pub dropped: usize,
}

impl Pdap {
    pub fn at(&self, delay_bin: usize, azimuth_bin: usize) -> f64 {
        self.power_db[delay_bin * self.azimuth_bins + azimuth_bin]
    }

    /// Linear power per cell; floor cells count as zero.
    pub fn linear(&self) -> Vec<f64> {
        self.power_db
            .iter()
            .map(|&p| if p <= self.grid.floor_db { 0.0 } else { db_to_linear(p) })
            .collect()
    }

    /// Linear power summed over azimuth, one entry per delay bin.
    pub fn delay_profile(&self) -> Vec<f64> {
        let lin = self.linear();
        lin.chunks_exact(self.azimuth_bins)
            .map(|row| row.iter().sum())
            .collect()
    }

    /// Linear power summed over delay, one entry per azimuth bin.
    pub fn azimuth_profile(&self) -> Vec<f64> {
        let lin = self.linear();
        let mut out = vec![0.0; self.azimuth_bins];
        for row in lin.chunks_exact(self.azimuth_bins) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }
}

/// Accumulates each component's linear power into its (delay, azimuth)
/// cell. Floor-gain padding entries carry no power.
pub fn build_pdap(channel: &ChannelRealization, grid: &PdapGrid) -> Result<Pdap, ChannelError> {
    grid.validate()?;
    let nd = grid.delay_bins();
    let na = grid.azimuth_bins();
    let mut lin = vec![0.0; nd * na];
    let mut dropped = 0;
    for m in &channel.mpcs {
        if m.gain_db <= grid.floor_db {
            continue;
        }
        let di = (m.delay_ns / grid.delta_tau_ns).floor() as usize;
        if m.delay_ns >= grid.max_delay_ns || di >= nd {
            dropped += 1;
            continue;
        }
        let ai = ((wrap_azimuth(m.aoa_deg) / grid.delta_theta_deg).floor() as usize).min(na - 1);
        lin[di * na + ai] += m.power();
    }
    let power_db = lin
        .into_iter()
        .map(|p| {
            if p > 0.0 {
                linear_to_db(p).max(grid.floor_db)
            } else {
                grid.floor_db
            }
        })
        .collect();
    Ok(Pdap {
        grid: *grid,
        delay_bins: nd,
        azimuth_bins: na,
        power_db,
        dropped,
    })
}
