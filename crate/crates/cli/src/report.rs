//! Evaluation of a generated dataset against a reference dataset, the
//! JSON report schema and its validator, and the CSV artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use chanforge::channel::{build_pdap, ChannelRealization, Pdap};
use chanforge::stats::{
    cdf_within_band, dkw_band, empirical_cdf, paired_ssim, ple_accuracy, summarize_dataset_lenient, write_band_csv,
    BandCheck, ConfidenceBand, DatasetSummary,
};
use serde::{Deserialize, Serialize};

use crate::config::Metrics;
use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    /// Channels that entered the statistics.
    pub channels: usize,
    /// Ids of channels without power inside the PDAP grid.
    pub skipped: Vec<String>,
    pub mean_delay_spread_ns: f64,
    pub std_delay_spread_ns: f64,
    pub mean_angular_spread_deg: f64,
    pub std_angular_spread_deg: f64,
    pub mean_path_loss_db: f64,
    /// Close-in path loss exponent; absent when the distances cannot
    /// support a fit.
    pub ple: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandReport {
    /// Half-width of the reference band.
    pub epsilon: f64,
    pub within: bool,
    pub max_violation: f64,
    pub sup_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimReport {
    pub pairs: usize,
    pub mean: Option<f64>,
    /// Generated channels without a reference at the same distance.
    pub unpaired: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub delta: f64,
    pub generated: DatasetStats,
    pub reference: DatasetStats,
    /// Accuracy of the generated PLE against the reference PLE, percent.
    pub ple_accuracy_pct: Option<f64>,
    /// Generated delay spread CDF against the reference DKW band.
    pub delay_spread_band: BandReport,
    pub angular_spread_band: BandReport,
    pub ssim: SsimReport,
}

/// Everything computed by one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub generated: DatasetSummary,
    pub reference: DatasetSummary,
    pub ssim_values: Vec<f64>,
}

fn dataset_stats(summary: &DatasetSummary, skipped: Vec<String>) -> DatasetStats {
    DatasetStats {
        channels: summary.channels.len(),
        skipped,
        mean_delay_spread_ns: summary.mean_delay_spread_ns,
        std_delay_spread_ns: summary.std_delay_spread_ns,
        mean_angular_spread_deg: summary.mean_angular_spread_deg,
        std_angular_spread_deg: summary.std_angular_spread_deg,
        mean_path_loss_db: summary.mean_path_loss_db,
        ple: summary.ci_fit.map(|f| f.ple),
    }
}

fn band_report(check: BandCheck, band: &ConfidenceBand) -> BandReport {
    BandReport {
        epsilon: band.epsilon,
        within: check.within,
        max_violation: check.max_violation,
        sup_distance: check.sup_distance,
    }
}

pub fn evaluate(
    generated: &[ChannelRealization],
    reference: &[ChannelRealization],
    m: &Metrics,
) -> Result<Evaluation, CliError> {
    let (gen, gen_skipped) = summarize_dataset_lenient(generated, &m.grid, m.frequency_hz)?;
    let (refs, ref_skipped) = summarize_dataset_lenient(reference, &m.grid, m.frequency_hz)?;
    if !gen_skipped.is_empty() {
        log::warn!("{} generated channels have no power inside the grid", gen_skipped.len());
    }
    let ds_band = dkw_band(&refs.delay_spread_cdf(), m.delta)?;
    let as_band = dkw_band(&refs.angular_spread_cdf(), m.delta)?;
    let ds = cdf_within_band(&gen.delay_spread_cdf(), &ds_band);
    let az = cdf_within_band(&gen.angular_spread_cdf(), &as_band);
    let ple_accuracy_pct = match (gen.ci_fit, refs.ci_fit) {
        (Some(g), Some(r)) => Some(ple_accuracy(g.ple, r.ple)?),
        _ => None,
    };
    let (ssim_values, unpaired) = paired_ssim(generated, reference, &m.grid, &m.ssim)?;
    if !unpaired.is_empty() {
        log::warn!(
            "{} generated channels have no reference at the same distance and were left out of SSIM",
            unpaired.len()
        );
    }
    let mean = (!ssim_values.is_empty()).then(|| ssim_values.iter().sum::<f64>() / ssim_values.len() as f64);
    let report = EvaluationReport {
        schema_version: SCHEMA_VERSION,
        delta: m.delta,
        generated: dataset_stats(&gen, gen_skipped),
        reference: dataset_stats(&refs, ref_skipped),
        ple_accuracy_pct,
        delay_spread_band: band_report(ds, &ds_band),
        angular_spread_band: band_report(az, &as_band),
        ssim: SsimReport {
            pairs: ssim_values.len(),
            mean,
            unpaired,
        },
    };
    Ok(Evaluation {
        report,
        generated: gen,
        reference: refs,
        ssim_values,
    })
}

fn check(cond: bool, what: &str) -> Result<(), CliError> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Validation(format!("report: {what}")))
    }
}

fn check_stats(s: &DatasetStats, name: &str) -> Result<(), CliError> {
    check(s.channels > 0, &format!("{name}.channels must be positive"))?;
    let finite = [
        s.mean_delay_spread_ns,
        s.std_delay_spread_ns,
        s.mean_angular_spread_deg,
        s.std_angular_spread_deg,
        s.mean_path_loss_db,
    ];
    check(
        finite.iter().all(|v| v.is_finite()),
        &format!("{name} statistics must be finite"),
    )?;
    check(
        s.mean_delay_spread_ns >= 0.0 && s.mean_angular_spread_deg >= 0.0,
        &format!("{name} spreads must be non-negative"),
    )?;
    check(s.ple.is_none_or(f64::is_finite), &format!("{name}.ple must be finite"))
}

fn check_band(b: &BandReport, name: &str) -> Result<(), CliError> {
    check(b.epsilon > 0.0, &format!("{name}.epsilon must be positive"))?;
    check(
        (0.0..=1.0).contains(&b.sup_distance),
        &format!("{name}.sup_distance must lie in [0, 1]"),
    )?;
    check(
        (0.0..=1.0).contains(&b.max_violation),
        &format!("{name}.max_violation must lie in [0, 1]"),
    )?;
    check(
        b.within == (b.max_violation == 0.0),
        &format!("{name}.within disagrees with max_violation"),
    )
}

/// Parses a report against the documented schema and checks its value
/// constraints.
pub fn validate_report(text: &str) -> Result<EvaluationReport, CliError> {
    let r: EvaluationReport = serde_json::from_str(text).map_err(|e| CliError::Validation(format!("report: {e}")))?;
    check(r.schema_version == SCHEMA_VERSION, "unsupported schema_version")?;
    check(r.delta > 0.0 && r.delta < 1.0, "delta must lie in (0, 1)")?;
    check_stats(&r.generated, "generated")?;
    check_stats(&r.reference, "reference")?;
    check(
        r.ple_accuracy_pct.is_none_or(|a| (0.0..=100.0).contains(&a)),
        "ple_accuracy_pct must lie in [0, 100]",
    )?;
    check_band(&r.delay_spread_band, "delay_spread_band")?;
    check_band(&r.angular_spread_band, "angular_spread_band")?;
    check(
        r.ssim.mean.is_none_or(|s| (0.0..=1.0).contains(&s)),
        "ssim.mean must lie in [0, 1]",
    )?;
    check(
        r.ssim.mean.is_some() == (r.ssim.pairs > 0),
        "ssim.mean must be present exactly when pairs > 0",
    )?;
    Ok(r)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_band(band: &ConfidenceBand, path: &Path) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_band_csv(band, BufWriter::new(f)).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Sample CDF with its own DKW band, written as `value,cdf,lower,upper`.
pub fn write_cdf(values: &[f64], delta: f64, path: &Path) -> Result<(), CliError> {
    let band = dkw_band(&empirical_cdf(values)?, delta)?;
    write_band(&band, path)
}

/// PDAP as a delay x azimuth matrix in dB; the first column is the bin
/// delay and the header lists bin azimuths.
pub fn write_pdap(pdap: &Pdap, path: &Path) -> Result<(), CliError> {
    let io = |e| CliError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let g = &pdap.grid;
    let mut header = String::from("delay_ns");
    for a in 0..pdap.azimuth_bins {
        header.push_str(&format!(",az_{:?}", a as f64 * g.delta_theta_deg));
    }
    writeln!(w, "{header}").map_err(io)?;
    for d in 0..pdap.delay_bins {
        let mut line = format!("{:?}", d as f64 * g.delta_tau_ns);
        for a in 0..pdap.azimuth_bins {
            line.push_str(&format!(",{:?}", pdap.at(d, a)));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes the report and its CSV artifacts into `dir`.
pub fn write_evaluation(
    ev: &Evaluation,
    generated: &[ChannelRealization],
    reference: &[ChannelRealization],
    m: &Metrics,
    pdap_grids: bool,
    dir: &Path,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_json(&ev.report, &dir.join("report.json"))?;
    write_cdf(
        &ev.generated.delay_spreads(),
        m.delta,
        &dir.join("delay_spread_generated.csv"),
    )?;
    write_cdf(
        &ev.reference.delay_spreads(),
        m.delta,
        &dir.join("delay_spread_reference.csv"),
    )?;
    write_cdf(
        &ev.generated.angular_spreads(),
        m.delta,
        &dir.join("angular_spread_generated.csv"),
    )?;
    write_cdf(
        &ev.reference.angular_spreads(),
        m.delta,
        &dir.join("angular_spread_reference.csv"),
    )?;
    if !ev.ssim_values.is_empty() {
        write_cdf(&ev.ssim_values, m.delta, &dir.join("ssim.csv"))?;
    }
    if pdap_grids {
        let pdir = dir.join("pdap");
        fs::create_dir_all(&pdir).map_err(|e| CliError::io(&pdir, e))?;
        for (k, r) in reference.iter().enumerate() {
            let partner = generated
                .iter()
                .find(|g| (g.distance_m - r.distance_m).abs() <= 1e-9 * r.distance_m.max(1.0));
            let Some(g) = partner else { continue };
            let rp = build_pdap(r, &m.grid).map_err(|e| CliError::Validation(e.to_string()))?;
            let gp = build_pdap(g, &m.grid).map_err(|e| CliError::Validation(e.to_string()))?;
            write_pdap(&rp, &pdir.join(format!("{k:03}_reference.csv")))?;
            write_pdap(&gp, &pdir.join(format!("{k:03}_generated.csv")))?;
        }
    }
    Ok(())
}
