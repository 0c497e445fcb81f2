//! Evaluation statistics: delay and angular spread, close-in path-loss
//! fitting, free-space path loss, SSIM between PDAPs, empirical CDFs with
//! DKW confidence bands, and dataset summaries.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::channel::{build_pdap, ChannelRealization, Pdap, PdapGrid};
use crate::error::StatsError;

/// Speed of light in m/s, at the 3e8 precision customary in link budgets.
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// Power-weighted first moment and RMS spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadResult {
    pub mean: f64,
    pub rms: f64,
}

/// Power-weighted mean and RMS spread of `(value, linear power)` pairs.
pub fn weighted_spread<I>(points: I) -> Result<SpreadResult, StatsError>
where
    I: IntoIterator<Item = (f64, f64)> + Clone,
{
    let mut total = 0.0;
    let mut first = 0.0;
    for (x, p) in points.clone() {
        if !(x.is_finite() && p.is_finite()) || p < 0.0 {
            return Err(StatsError::InvalidInput(format!("bad profile entry ({x}, {p})")));
        }
        total += p;
        first += x * p;
    }
    if !(total > 0.0) {
        return Err(StatsError::EmptyProfile);
    }
    let mean = first / total;
    let second: f64 = points.into_iter().map(|(x, p)| (x - mean) * (x - mean) * p).sum();
    Ok(SpreadResult {
        mean,
        rms: (second / total).sqrt(),
    })
}

fn binned_spread(profile: &[f64], bin_width: f64) -> Result<SpreadResult, StatsError> {
    if !(bin_width > 0.0) {
        return Err(StatsError::InvalidInput("bin width must be positive".into()));
    }
    weighted_spread(profile.iter().enumerate().map(|(i, &p)| (i as f64 * bin_width, p)))
}

/// Mean delay and RMS delay spread of a linear power-delay profile whose
/// bin `i` sits at delay `i * delta_tau`.
pub fn delay_spread(profile: &[f64], delta_tau_ns: f64) -> Result<SpreadResult, StatsError> {
    binned_spread(profile, delta_tau_ns)
}

/// Mean angle and RMS angular spread of a linear power-azimuth profile.
/// Angles are treated linearly; there is no wrap-around at 0/360 degrees.
pub fn angular_spread(profile: &[f64], delta_theta_deg: f64) -> Result<SpreadResult, StatsError> {
    binned_spread(profile, delta_theta_deg)
}

/// Delay spread computed directly from a channel's component delays.
pub fn channel_delay_spread(ch: &ChannelRealization) -> Result<SpreadResult, StatsError> {
    weighted_spread(ch.mpcs.iter().map(|m| (m.delay_ns, m.power())))
}

/// Angular spread computed directly from a channel's component azimuths.
pub fn channel_angular_spread(ch: &ChannelRealization) -> Result<SpreadResult, StatsError> {
    weighted_spread(ch.mpcs.iter().map(|m| (m.aoa_deg, m.power())))
}

/// Free-space path loss in dB at reference distance `d0_m`, frequency `f_hz`.
pub fn fspl(d0_m: f64, f_hz: f64) -> Result<f64, StatsError> {
    if !(d0_m > 0.0 && f_hz > 0.0 && d0_m.is_finite() && f_hz.is_finite()) {
        return Err(StatsError::InvalidInput(format!(
            "FSPL needs positive distance and frequency, got d0={d0_m}, f={f_hz}"
        )));
    }
    Ok(-20.0 * (SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * f_hz * d0_m)).log10())
}

/// Close-in reference-distance path-loss fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiFit {
    pub ple: f64,
    pub d0_m: f64,
    pub fspl_d0_db: f64,
    pub rmse_db: f64,
}

impl CiFit {
    pub fn predict(&self, distance_m: f64) -> f64 {
        self.fspl_d0_db + 10.0 * self.ple * (distance_m / self.d0_m).log10()
    }
}

/// Least-squares path loss exponent for PL(d) = FSPL(d0) + 10·n·log10(d/d0).
/// The single free parameter has the closed form n = Σ r·g / Σ g².
pub fn fit_ci_model(samples: &[(f64, f64)], f_hz: f64, d0_m: f64) -> Result<CiFit, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::InvalidInput("CI fit needs at least two samples".into()));
    }
    if samples
        .iter()
        .any(|&(d, pl)| !(d.is_finite() && pl.is_finite()) || d <= 0.0)
    {
        return Err(StatsError::InvalidInput("non-finite or non-positive sample".into()));
    }
    let first = samples[0].0;
    if samples.iter().all(|&(d, _)| d == first) {
        return Err(StatsError::DegenerateDesign);
    }
    let anchor = fspl(d0_m, f_hz)?;
    let (mut num, mut den) = (0.0, 0.0);
    for &(d, pl) in samples {
        let g = 10.0 * (d / d0_m).log10();
        num += (pl - anchor) * g;
        den += g * g;
    }
    if den == 0.0 {
        return Err(StatsError::DegenerateDesign);
    }
    let ple = num / den;
    let mut fit = CiFit {
        ple,
        d0_m,
        fspl_d0_db: anchor,
        rmse_db: 0.0,
    };
    let sse: f64 = samples.iter().map(|&(d, pl)| (pl - fit.predict(d)).powi(2)).sum();
    fit.rmse_db = (sse / samples.len() as f64).sqrt();
    Ok(fit)
}

/// Percentage agreement of an estimated PLE with a reference PLE:
/// (1 − |est − ref| / |ref|) · 100, floored at 0.
pub fn ple_accuracy(ple_est: f64, ple_ref: f64) -> Result<f64, StatsError> {
    if ple_ref == 0.0 || !ple_ref.is_finite() || !ple_est.is_finite() {
        return Err(StatsError::InvalidInput(format!(
            "PLE accuracy needs finite values and nonzero reference, got {ple_est} vs {ple_ref}"
        )));
    }
    Ok(((1.0 - (ple_est - ple_ref).abs() / ple_ref.abs()) * 100.0).max(0.0))
}

/// Single-scale SSIM settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    /// Odd side length of the Gaussian window.
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range R of the compared values (dB).
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 7,
            sigma: 1.5,
            dynamic_range: 100.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Normalized 2-D Gaussian weights, row-major `window x window`.
pub fn gaussian_window(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let g1: Vec<f64> = (0..window)
        .map(|i| {
            let x = i as f64 - half;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut w: Vec<f64> = g1.iter().flat_map(|a| g1.iter().map(move |b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean SSIM over all fully contained windows of two PDAPs on the same
/// grid. Negative local indices are clamped to 0 so the result lies in
/// [0, 1].
pub fn ssim(a: &Pdap, b: &Pdap, params: &SsimParams) -> Result<f64, StatsError> {
    if a.grid != b.grid || a.delay_bins != b.delay_bins || a.azimuth_bins != b.azimuth_bins {
        return Err(StatsError::GridMismatch);
    }
    ssim_raw(&a.power_db, &b.power_db, a.delay_bins, a.azimuth_bins, params)
}

/// SSIM over two row-major images of `rows x cols`.
pub fn ssim_raw(a: &[f64], b: &[f64], rows: usize, cols: usize, params: &SsimParams) -> Result<f64, StatsError> {
    let k = params.window;
    if k.is_multiple_of(2) {
        return Err(StatsError::InvalidInput("SSIM window must be odd".into()));
    }
    if rows < k || cols < k || a.len() != rows * cols || b.len() != rows * cols {
        return Err(StatsError::InvalidInput(format!(
            "image {rows}x{cols} too small for a {k}x{k} window"
        )));
    }
    let w = gaussian_window(k, params.sigma);
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=rows - k {
        for j in 0..=cols - k {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..k {
                let row = (i + u) * cols + j;
                for v in 0..k {
                    let wt = w[u * k + v];
                    let x = a[row + v];
                    let y = b[row + v];
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s.max(0.0);
            count += 1;
        }
    }
    Ok((total / count as f64).min(1.0))
}

/// Right-continuous empirical distribution function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    values: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(values: &[f64]) -> Result<Self, StatsError> {
        if values.is_empty() {
            return Err(StatsError::InvalidInput("empty sample".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::InvalidInput("non-finite sample".into()));
        }
        let mut values = values.to_vec();
        values.sort_by(f64::total_cmp);
        Ok(EmpiricalCdf { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Step points `(x_k, k/n)`, one per sample.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.values.len() as f64;
        self.values
            .iter()
            .enumerate()
            .map(move |(k, &x)| (x, (k + 1) as f64 / n))
    }

    /// F̂(t) = #{x ≤ t} / n.
    pub fn eval(&self, t: f64) -> f64 {
        let count = self.values.partition_point(|&x| x <= t);
        count as f64 / self.values.len() as f64
    }

    /// Left limit F̂(t⁻) = #{x < t} / n.
    pub fn eval_left(&self, t: f64) -> f64 {
        let count = self.values.partition_point(|&x| x < t);
        count as f64 / self.values.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

pub fn empirical_cdf(values: &[f64]) -> Result<EmpiricalCdf, StatsError> {
    EmpiricalCdf::new(values)
}

/// DKW half-width sqrt(ln(2/δ) / (2n)).
pub fn dkw_epsilon(n: usize, delta: f64) -> Result<f64, StatsError> {
    if n == 0 || !(delta > 0.0 && delta < 1.0) {
        return Err(StatsError::InvalidInput(format!(
            "DKW band needs n >= 1 and delta in (0, 1), got n={n}, delta={delta}"
        )));
    }
    Ok(((2.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

/// Distribution-free confidence band around an empirical CDF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub cdf: EmpiricalCdf,
    pub epsilon: f64,
    pub delta: f64,
}

impl ConfidenceBand {
    pub fn lower(&self, t: f64) -> f64 {
        (self.cdf.eval(t) - self.epsilon).max(0.0)
    }

    pub fn upper(&self, t: f64) -> f64 {
        (self.cdf.eval(t) + self.epsilon).min(1.0)
    }

    /// Rows `(x, F̂, lower, upper)` at every step point.
    pub fn table(&self) -> Vec<[f64; 4]> {
        self.cdf
            .steps()
            .map(|(x, f)| [x, f, (f - self.epsilon).max(0.0), (f + self.epsilon).min(1.0)])
            .collect()
    }
}

const BAND_HEADER: [&str; 4] = ["value", "cdf", "lower", "upper"];

/// Writes the band as CSV rows `value,cdf,lower,upper`.
pub fn write_band_csv<W: Write>(band: &ConfidenceBand, writer: W) -> Result<(), StatsError> {
    let csv_err = |e: csv::Error| StatsError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(BAND_HEADER).map_err(csv_err)?;
    for row in band.table() {
        w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
    }
    w.flush().map_err(|e| StatsError::Csv(e.to_string()))
}

/// Reads a band written by [`write_band_csv`], rebuilding it from the
/// sample values with level `delta` and checking the stored columns.
pub fn read_band_csv<R: Read>(reader: R, delta: f64) -> Result<ConfidenceBand, StatsError> {
    let csv_err = |e: csv::Error| StatsError::Csv(e.to_string());
    let mut r = csv::Reader::from_reader(reader);
    if r.headers().map_err(csv_err)?.iter().ne(BAND_HEADER) {
        return Err(StatsError::Csv("expected header value,cdf,lower,upper".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row: Vec<f64> = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| StatsError::Csv(format!("row {}: {e}", i + 1)))?;
        if row.len() != 4 {
            return Err(StatsError::Csv(format!("row {}: expected 4 columns", i + 1)));
        }
        rows.push([row[0], row[1], row[2], row[3]]);
    }
    let values: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let band = dkw_band(&EmpiricalCdf::new(&values)?, delta)?;
    for (i, (got, want)) in rows.iter().zip(band.table()).enumerate() {
        if got.iter().zip(&want).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(StatsError::Csv(format!(
                "row {}: columns disagree with the sample",
                i + 1
            )));
        }
    }
    Ok(band)
}

pub fn dkw_band(cdf: &EmpiricalCdf, delta: f64) -> Result<ConfidenceBand, StatsError> {
    Ok(ConfidenceBand {
        epsilon: dkw_epsilon(cdf.len(), delta)?,
        cdf: cdf.clone(),
        delta,
    })
}

/// Outcome of comparing a CDF against a band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandCheck {
    pub within: bool,
    /// Largest distance by which the tested CDF leaves the band (0 when inside).
    pub max_violation: f64,
    /// Kolmogorov distance sup |F_test − F̂|.
    pub sup_distance: f64,
}

/// Checks the tested CDF against the band at every jump point of either
/// CDF, using both the value and the left limit there; the supremum of a
/// difference of step functions is attained at one of these.
pub fn cdf_within_band(test: &EmpiricalCdf, band: &ConfidenceBand) -> BandCheck {
    let mut sup: f64 = 0.0;
    let mut violation: f64 = 0.0;
    let mut check = |ft: f64, fr: f64| {
        sup = sup.max((ft - fr).abs());
        let lo = (fr - band.epsilon).max(0.0);
        let hi = (fr + band.epsilon).min(1.0);
        violation = violation.max(lo - ft).max(ft - hi);
    };
    for &t in test.values().iter().chain(band.cdf.values()) {
        check(test.eval(t), band.cdf.eval(t));
        check(test.eval_left(t), band.cdf.eval_left(t));
    }
    // tiny slack absorbs rounding of k/n against ε
    let within = violation <= 1e-12;
    BandCheck {
        within,
        max_violation: if within { 0.0 } else { violation },
        sup_distance: sup,
    }
}

/// Per-channel statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub id: String,
    pub distance_m: f64,
    pub mean_delay_ns: f64,
    pub delay_spread_ns: f64,
    pub mean_angle_deg: f64,
    pub angular_spread_deg: f64,
    pub path_loss_db: f64,
    pub dropped_paths: usize,
}

pub fn channel_stats(ch: &ChannelRealization, grid: &PdapGrid) -> Result<ChannelStats, StatsError> {
    let wrap = |source: StatsError| StatsError::Channel {
        id: ch.id.clone(),
        source: Box::new(source),
    };
    let pdap = build_pdap(ch, grid).map_err(|e| wrap(e.into()))?;
    let ds = delay_spread(&pdap.delay_profile(), grid.delta_tau_ns).map_err(wrap)?;
    let az = angular_spread(&pdap.azimuth_profile(), grid.delta_theta_deg).map_err(wrap)?;
    Ok(ChannelStats {
        id: ch.id.clone(),
        distance_m: ch.distance_m,
        mean_delay_ns: ds.mean,
        delay_spread_ns: ds.rms,
        mean_angle_deg: az.mean,
        angular_spread_deg: az.rms,
        path_loss_db: ch.path_loss_db(),
        dropped_paths: pdap.dropped,
    })
}

/// Dataset-level statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub channels: Vec<ChannelStats>,
    pub mean_delay_spread_ns: f64,
    pub std_delay_spread_ns: f64,
    pub mean_angular_spread_deg: f64,
    pub std_angular_spread_deg: f64,
    pub mean_path_loss_db: f64,
    /// Absent when the distances cannot support a fit.
    pub ci_fit: Option<CiFit>,
}

impl DatasetSummary {
    pub fn delay_spreads(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.delay_spread_ns).collect()
    }

    pub fn angular_spreads(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.angular_spread_deg).collect()
    }

    pub fn delay_spread_cdf(&self) -> EmpiricalCdf {
        EmpiricalCdf::new(&self.delay_spreads()).expect("summary is nonempty")
    }

    pub fn angular_spread_cdf(&self) -> EmpiricalCdf {
        EmpiricalCdf::new(&self.angular_spreads()).expect("summary is nonempty")
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn summarize_dataset(
    channels: &[ChannelRealization],
    grid: &PdapGrid,
    f_hz: f64,
) -> Result<DatasetSummary, StatsError> {
    if channels.is_empty() {
        return Err(StatsError::InvalidInput("empty dataset".into()));
    }
    let per: Vec<ChannelStats> = channels
        .iter()
        .map(|ch| channel_stats(ch, grid))
        .collect::<Result<_, _>>()?;
    summarize_stats(per, f_hz)
}

/// Like [`summarize_dataset`], but channels with no power inside the grid
/// are left out instead of failing the whole summary. Returns the summary
/// and the ids of the skipped channels.
pub fn summarize_dataset_lenient(
    channels: &[ChannelRealization],
    grid: &PdapGrid,
    f_hz: f64,
) -> Result<(DatasetSummary, Vec<String>), StatsError> {
    let mut per = Vec::with_capacity(channels.len());
    let mut skipped = Vec::new();
    for ch in channels {
        match channel_stats(ch, grid) {
            Ok(s) if s.path_loss_db.is_finite() => per.push(s),
            Ok(_) => skipped.push(ch.id.clone()),
            Err(StatsError::Channel { source, .. }) if matches!(*source, StatsError::EmptyProfile) => {
                skipped.push(ch.id.clone())
            }
            Err(e) => return Err(e),
        }
    }
    if per.is_empty() {
        return Err(StatsError::InvalidInput("no channel has power inside the grid".into()));
    }
    Ok((summarize_stats(per, f_hz)?, skipped))
}

fn summarize_stats(per: Vec<ChannelStats>, f_hz: f64) -> Result<DatasetSummary, StatsError> {
    let (mean_ds, std_ds) = mean_std(&per.iter().map(|c| c.delay_spread_ns).collect::<Vec<_>>());
    let (mean_as, std_as) = mean_std(&per.iter().map(|c| c.angular_spread_deg).collect::<Vec<_>>());
    let (mean_pl, _) = mean_std(&per.iter().map(|c| c.path_loss_db).collect::<Vec<_>>());
    let samples: Vec<(f64, f64)> = per.iter().map(|c| (c.distance_m, c.path_loss_db)).collect();
    let ci_fit = match fit_ci_model(&samples, f_hz, 1.0) {
        Ok(fit) => Some(fit),
        Err(StatsError::DegenerateDesign) | Err(StatsError::InvalidInput(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(DatasetSummary {
        channels: per,
        mean_delay_spread_ns: mean_ds,
        std_delay_spread_ns: std_ds,
        mean_angular_spread_deg: mean_as,
        std_angular_spread_deg: std_as,
        mean_path_loss_db: mean_pl,
        ci_fit,
    })
}

/// SSIM of each generated channel against the reference channel at the
/// same distance. Returns the per-pair values and the generated channels
/// that found no partner.
pub fn paired_ssim(
    generated: &[ChannelRealization],
    reference: &[ChannelRealization],
    grid: &PdapGrid,
    params: &SsimParams,
) -> Result<(Vec<f64>, Vec<String>), StatsError> {
    let refs: Vec<(f64, Pdap)> = reference
        .iter()
        .map(|r| Ok((r.distance_m, build_pdap(r, grid)?)))
        .collect::<Result<_, StatsError>>()?;
    let mut values = Vec::new();
    let mut unpaired = Vec::new();
    for g in generated {
        let partner = refs
            .iter()
            .find(|(d, _)| (d - g.distance_m).abs() <= 1e-9 * d.abs().max(1.0));
        match partner {
            Some((_, rp)) => {
                let gp = build_pdap(g, grid)?;
                values.push(ssim(&gp, rp, params)?);
            }
            None => unpaired.push(g.id.clone()),
        }
    }
    Ok((values, unpaired))
}
