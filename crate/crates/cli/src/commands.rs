//! One function per CLI mode.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chanforge::channel::ChannelRealization;
use chanforge::checkpoint::{Checkpoint, Provenance};
use chanforge::dataset;
use chanforge::sim::Simulator;
use chanforge::stats::summarize_dataset_lenient;
use chanforge::train::{self, EpochRecord, TrainAbort, TrainConfig, TrainState};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{GenerateSection, Mode, Progress, RunConfig, Workdir};
use crate::error::CliError;
use crate::report::{self, BandReport};

pub fn run(mode: Mode, cfg: &RunConfig, wd: &Workdir) -> Result<(), CliError> {
    cfg.require(mode)?;
    match mode {
        Mode::Simulate => simulate(cfg, wd),
        Mode::Pretrain => pretrain(cfg, wd),
        Mode::Finetune => finetune(cfg, wd),
        Mode::Generate => generate(cfg, wd),
        Mode::Evaluate => evaluate(cfg, wd),
        Mode::Sweep => sweep(cfg, wd),
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| CliError::io(p, e)),
        _ => Ok(()),
    }
}

fn load_dataset(path: &Path) -> Result<Vec<ChannelRealization>, CliError> {
    dataset::load(path).map_err(|e| CliError::dataset(path, e))
}

fn save_dataset(channels: &[ChannelRealization], path: &Path) -> Result<(), CliError> {
    ensure_parent(path)?;
    dataset::save(channels, path).map_err(|e| CliError::dataset(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::checkpoint(path, e))
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CliError> {
    ensure_parent(path)?;
    ckpt.save(path).map_err(|e| CliError::checkpoint(path, e))
}

pub fn simulate(cfg: &RunConfig, wd: &Workdir) -> Result<(), CliError> {
    for job in &cfg.simulate {
        if job.channels == 0 {
            return Err(CliError::Config("simulate.channels must be >= 1".into()));
        }
        let sim = Simulator::new(job.sim.clone())?;
        let channels = sim.generate_dataset(job.channels)?;
        let out = wd.path(&job.output);
        save_dataset(&channels, &out)?;
        log::info!("wrote {} channels to {}", channels.len(), out.display());
    }
    Ok(())
}

/// Progress CSV writer; rows carry wall time, so the log is the one output
/// that differs between otherwise identical runs.
struct ProgressLog {
    every: u64,
    out: Option<(PathBuf, BufWriter<File>)>,
    start: Instant,
    error: Option<CliError>,
}

impl ProgressLog {
    fn open(p: &Progress, output: &Path, wd: &Workdir) -> Result<Self, CliError> {
        let out = if p.every > 0 {
            let path = match &p.log {
                Some(l) => wd.path(l),
                None => PathBuf::from(format!("{}.progress.csv", output.display())),
            };
            ensure_parent(&path)?;
            let mut w = BufWriter::new(File::create(&path).map_err(|e| CliError::io(&path, e))?);
            writeln!(w, "epoch,loss_d,loss_g,penalty,wall_s").map_err(|e| CliError::io(&path, e))?;
            Some((path, w))
        } else {
            None
        };
        Ok(ProgressLog {
            every: p.every,
            out,
            start: Instant::now(),
            error: None,
        })
    }

    fn record(&mut self, r: &EpochRecord) {
        if self.every == 0 || !r.epoch.is_multiple_of(self.every) || self.error.is_some() {
            return;
        }
        let wall = self.start.elapsed().as_secs_f64();
        log::info!(
            "epoch {} loss_d {:.4} loss_g {:.4} penalty {:.4} ({wall:.1} s)",
            r.epoch,
            r.loss_d,
            r.loss_g,
            r.penalty
        );
        if let Some((path, w)) = &mut self.out {
            let row = format!("{},{:?},{:?},{:?},{wall:.3}", r.epoch, r.loss_d, r.loss_g, r.penalty);
            if let Err(e) = writeln!(w, "{row}") {
                self.error = Some(CliError::io(path, e));
            }
        }
    }

    fn finish(mut self) -> Result<(), CliError> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        if let Some((path, mut w)) = self.out.take() {
            w.flush().map_err(|e| CliError::io(&path, e))?;
        }
        Ok(())
    }
}

/// Saves the last good state after an abort and converts the error.
fn handle_abort(
    abort: TrainAbort,
    config: &TrainConfig,
    provenance: Provenance,
    output: &Path,
    progress: &Progress,
    wd: &Workdir,
) -> CliError {
    if let Some(state) = abort.last_good {
        let name = format!(
            "{}.abort-epoch{}.ckpt",
            output.file_stem().and_then(|s| s.to_str()).unwrap_or("run"),
            state.epoch
        );
        let dir = match &progress.abort_dir {
            Some(d) => wd.path(d),
            None => output.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let path = dir.join(name);
        let ckpt = Checkpoint::new(config.clone(), provenance, *state);
        match fs::create_dir_all(&dir)
            .map_err(|e| CliError::io(&dir, e))
            .and_then(|_| save_checkpoint(&ckpt, &path))
        {
            Ok(()) => log::error!("last good state saved to {}", path.display()),
            Err(e) => log::error!("could not save the abort snapshot: {e}"),
        }
    }
    abort.error.into()
}

pub fn pretrain(cfg: &RunConfig, wd: &Workdir) -> Result<(), CliError> {
    let p = cfg.pretrain.as_ref().expect("checked by require");
    p.arch
        .validate()
        .map_err(|e| CliError::Config(format!("pretrain.arch: {e}")))?;
    p.train.validate()?;
    let channels = load_dataset(&wd.path(&p.dataset))?;
    let output = wd.path(&p.output);
    let mut log = ProgressLog::open(&p.progress, &output, wd)?;
    let state = train::pretrain(&p.arch, &p.train, &channels, &mut |_, r| log.record(r))
        .map_err(|a| handle_abort(a, &p.train, Provenance::Pretrained, &output, &p.progress, wd))?;
    log.finish()?;
    save_checkpoint(
        &Checkpoint::new(p.train.clone(), Provenance::Pretrained, state),
        &output,
    )
}

/// Loads a checkpoint that may serve as a fine-tuning anchor.
pub fn load_pretrained(path: &Path) -> Result<(Checkpoint, String), CliError> {
    let ckpt = load_checkpoint(path)?;
    if !ckpt.is_pretrained() {
        return Err(CliError::Validation(format!(
            "{}: fine-tuning requires a pretrained checkpoint, this one is already fine-tuned",
            path.display()
        )));
    }
    let hash = ckpt.content_hash();
    Ok((ckpt, hash))
}

pub fn finetune(cfg: &RunConfig, wd: &Workdir) -> Result<(), CliError> {
    let f = cfg.finetune.as_ref().expect("checked by require");
    f.train.validate()?;
    let (base, anchor_hash) = load_pretrained(&wd.path(&f.checkpoint))?;
    if let Some(p) = &cfg.pretrain {
        if &p.arch != base.state.arch() {
            return Err(CliError::Validation(
                "architecture in [pretrain.arch] differs from the checkpoint".into(),
            ));
        }
    }
    let channels = load_dataset(&wd.path(&f.dataset))?;
    let output = wd.path(&f.output);
    let provenance = Provenance::Finetuned { anchor_hash };
    let mut log = ProgressLog::open(&f.progress, &output, wd)?;
    let state = train::finetune(&base.state, &f.train, &channels, &mut |_, r| log.record(r))
        .map_err(|a| handle_abort(a, &f.train, provenance.clone(), &output, &f.progress, wd))?;
    log.finish()?;
    save_checkpoint(&Checkpoint::new(f.train.clone(), provenance, state), &output)
}

/// Distances for a generate run: the configured source, cycled or spread
/// to `count` entries.
pub fn generation_distances(g: &GenerateSection, wd: &Workdir) -> Result<Vec<f64>, CliError> {
    let sources = [
        g.distances.is_some(),
        g.distances_from.is_some(),
        g.distance_range.is_some(),
    ];
    if sources.iter().filter(|&&s| s).count() != 1 {
        return Err(CliError::Config(
            "generate needs exactly one of distances, distances_from, distance_range".into(),
        ));
    }
    if let Some([lo, hi]) = g.distance_range {
        let n = g
            .count
            .ok_or_else(|| CliError::Config("generate.distance_range requires generate.count".into()))?;
        if !(lo > 0.0 && hi >= lo) {
            return Err(CliError::Config(
                "generate.distance_range must satisfy 0 < min <= max".into(),
            ));
        }
        let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
        return Ok((0..n).map(|i| lo + step * i as f64).collect());
    }
    let base = match (&g.distances, &g.distances_from) {
        (Some(d), _) => d.clone(),
        (_, Some(p)) => load_dataset(&wd.path(p))?.iter().map(|c| c.distance_m).collect(),
        _ => unreachable!(),
    };
    if base.is_empty() {
        return Err(CliError::Config("generate: no distances given".into()));
    }
    Ok(cycle(&base, g.count.unwrap_or(base.len())))
}

pub fn cycle(base: &[f64], n: usize) -> Vec<f64> {
    base.iter().copied().cycle().take(n).collect()
}

pub fn generate(cfg: &RunConfig, wd: &Workdir) -> Result<(), CliError> {
    let g = cfg.generate.as_ref().expect("checked by require");
    let distances = generation_distances(g, wd)?;
    let ckpt = load_checkpoint(&wd.path(&g.checkpoint))?;
    let s = &ckpt.state;
    let channels = train::generate(&s.generator, &s.norm, &distances, g.seed, &g.id_prefix)?;
    save_dataset(&channels, &wd.path(&g.output))
}

pub fn evaluate(cfg: &RunConfig, wd: &Workdir) -> Result<(), CliError> {
    let e = cfg.evaluate.as_ref().expect("checked by require");
    let generated = load_dataset(&wd.path(&e.generated))?;
    let reference = load_dataset(&wd.path(&e.reference))?;
    let ev = report::evaluate(&generated, &reference, &e.metrics)?;
    report::write_evaluation(
        &ev,
        &generated,
        &reference,
        &e.metrics,
        e.pdap_grids,
        &wd.path(&e.output),
    )
}

/// Minimum measurement sizes at which the original measurement campaign met
/// its bands; recorded for comparison only.
pub const REFERENCE_MIN_SIZE_DELAY_SPREAD: usize = 9;
pub const REFERENCE_MIN_SIZE_ANGULAR_SPREAD: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRow {
    pub n: usize,
    pub delay_spread: BandReport,
    pub angular_spread: BandReport,
    pub ple: Option<f64>,
    pub ple_accuracy_pct: Option<f64>,
    pub mean_ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepReport {
    pub reference_channels: usize,
    pub rows: Vec<SweepRow>,
    /// Smallest n from which every larger size also passes.
    pub min_size_delay_spread: Option<usize>,
    pub min_size_angular_spread: Option<usize>,
    pub reference_min_size_delay_spread: usize,
    pub reference_min_size_angular_spread: usize,
}

/// Smallest size `n` such that every size `>= n` passes.
fn min_passing(rows: &[SweepRow], pass: impl Fn(&SweepRow) -> bool) -> Option<usize> {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by_key(|r| std::cmp::Reverse(r.n));
    let mut best = None;
    for r in sorted {
        if !pass(r) {
            break;
        }
        best = Some(r.n);
    }
    best
}

pub fn sweep(cfg: &RunConfig, wd: &Workdir) -> Result<(), CliError> {
    let w = cfg.sweep.as_ref().expect("checked by require");
    w.train.validate()?;
    let (base, anchor_hash) = load_pretrained(&wd.path(&w.checkpoint))?;
    let reference = load_dataset(&wd.path(&w.dataset))?;
    if let Some(&n) = w.sizes.iter().find(|&&n| n == 0 || n > reference.len()) {
        return Err(CliError::Validation(format!(
            "sweep size {n} is outside 1..={}",
            reference.len()
        )));
    }
    // nested subsets: every size takes a prefix of one seeded permutation
    let mut order: Vec<usize> = (0..reference.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(w.seed));
    let distances = cycle(
        &reference.iter().map(|c| c.distance_m).collect::<Vec<_>>(),
        w.generate_count,
    );
    let out = wd.path(&w.output);
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut rows = Vec::new();
    for &n in &w.sizes {
        let subset: Vec<ChannelRealization> = order[..n].iter().map(|&i| reference[i].clone()).collect();
        let state = train::finetune(&base.state, &w.train, &subset, &mut |_, _| {}).map_err(|a| {
            handle_abort(
                a,
                &w.train,
                Provenance::Finetuned {
                    anchor_hash: anchor_hash.clone(),
                },
                &out.join(format!("n{n}.ckpt")),
                &Progress::default(),
                wd,
            )
        })?;
        let generated = generated_for(&state, &distances, w.seed, n)?;
        let ev = report::evaluate(&generated, &reference, &w.metrics)?;
        let dir = out.join(format!("n{n}"));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        report::write_cdf(
            &ev.generated.delay_spreads(),
            w.metrics.delta,
            &dir.join("delay_spread.csv"),
        )?;
        report::write_cdf(
            &ev.generated.angular_spreads(),
            w.metrics.delta,
            &dir.join("angular_spread.csv"),
        )?;
        report::write_json(&ev.report, &dir.join("report.json"))?;
        log::info!(
            "n = {n}: delay spread within band {}, angular spread within band {}",
            ev.report.delay_spread_band.within,
            ev.report.angular_spread_band.within
        );
        rows.push(SweepRow {
            n,
            delay_spread: ev.report.delay_spread_band,
            angular_spread: ev.report.angular_spread_band,
            ple: ev.report.generated.ple,
            ple_accuracy_pct: ev.report.ple_accuracy_pct,
            mean_ssim: ev.report.ssim.mean,
        });
    }
    let (refs, _) = summarize_dataset_lenient(&reference, &w.metrics.grid, w.metrics.frequency_hz)?;
    report::write_cdf(
        &refs.delay_spreads(),
        w.metrics.delta,
        &out.join("delay_spread_reference.csv"),
    )?;
    report::write_cdf(
        &refs.angular_spreads(),
        w.metrics.delta,
        &out.join("angular_spread_reference.csv"),
    )?;
    write_membership_table(&rows, &out.join("band_membership.csv"))?;
    let summary = SweepReport {
        reference_channels: reference.len(),
        min_size_delay_spread: min_passing(&rows, |r| r.delay_spread.within),
        min_size_angular_spread: min_passing(&rows, |r| r.angular_spread.within),
        rows,
        reference_min_size_delay_spread: REFERENCE_MIN_SIZE_DELAY_SPREAD,
        reference_min_size_angular_spread: REFERENCE_MIN_SIZE_ANGULAR_SPREAD,
    };
    report::write_json(&summary, &out.join("sweep.json"))
}

fn generated_for(
    state: &TrainState,
    distances: &[f64],
    seed: u64,
    n: usize,
) -> Result<Vec<ChannelRealization>, CliError> {
    Ok(train::generate(
        &state.generator,
        &state.norm,
        distances,
        seed,
        &format!("sweep{n}"),
    )?)
}

fn write_membership_table(rows: &[SweepRow], path: &Path) -> Result<(), CliError> {
    let io = |e| CliError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(
        w,
        "n,delay_spread_within,delay_spread_max_violation,angular_spread_within,angular_spread_max_violation"
    )
    .map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:?},{},{:?}",
            r.n,
            r.delay_spread.within,
            r.delay_spread.max_violation,
            r.angular_spread.within,
            r.angular_spread.max_violation
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
