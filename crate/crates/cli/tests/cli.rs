use std::fs;
use std::path::Path;
use std::process::Command;

use chanforge::dataset;
use chanforge::stats::read_band_csv;
use chanforge_cli::report::{validate_report, EvaluationReport};
use chanforge_cli::{commands, exit, Mode, RunConfig, Workdir};

const TINY_ARCH: &str = r#"
[pretrain.arch]
seq_len = 20
d_x = 8
d_m = 15
n_layers = 1
heads = 1
noise_dim = 4
leaky_slope = 0.2
gen_hidden = 10
output_dim = 60
"#;

fn chanforge(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_chanforge"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn simulate_config(channels: usize) -> String {
    format!(
        r#"
[[simulate]]
output = "meas.csv"
channels = {channels}
[simulate.sim]
evenly_spaced = true
seed = 4
"#
    )
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "run.toml",
        "[[simulate]]\noutput = \"a.csv\"\nchannels = 3\nbogus = 1\n",
    );
    let out = chanforge(&["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(exit::CONFIG));
}

#[test]
fn missing_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", &simulate_config(3));
    let out = chanforge(&["pretrain", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(exit::CONFIG));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("absent.toml");
    let out = chanforge(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(exit::IO));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "run.toml",
        "[pretrain]\ndataset = \"none.csv\"\noutput = \"p.ckpt\"\n",
    );
    let out = chanforge(&["pretrain", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(exit::IO));
}

#[test]
fn corrupt_checkpoint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.ckpt"), "not a checkpoint").unwrap();
    let cfg = write(
        dir.path(),
        "run.toml",
        "[generate]\ncheckpoint = \"p.ckpt\"\noutput = \"g.csv\"\ndistances = [5.0]\n",
    );
    let out = chanforge(&["generate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(exit::VALIDATION));
}

#[test]
fn bad_mode_is_a_usage_error() {
    let out = chanforge(&["train", "--config", "x.toml"]);
    assert_eq!(out.status.code(), Some(exit::USAGE));
}

#[test]
fn exit_codes_are_distinct() {
    let codes = [
        exit::SUCCESS,
        exit::USAGE,
        exit::CONFIG,
        exit::IO,
        exit::NUMERIC,
        exit::VALIDATION,
    ];
    for (i, a) in codes.iter().enumerate() {
        for b in &codes[i + 1..] {
            assert_ne!(a, b);
        }
    }
}

#[test]
fn simulate_reruns_are_byte_identical_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", &simulate_config(5));
    let read = |sub: &str| fs::read(dir.path().join(sub).join("meas.csv")).unwrap();
    for (sub, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        let out_dir = dir.path().join(sub);
        let out = chanforge(&[
            "simulate",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(
            out.status.code(),
            Some(exit::SUCCESS),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn seed_override_reaches_every_stage() {
    let text = format!(
        "{}\n[[simulate]]\noutput = \"b.csv\"\nchannels = 2\n[pretrain]\ndataset = \"a\"\noutput = \"b\"\n\
         [generate]\ncheckpoint = \"c\"\noutput = \"d\"\ndistances = [3.0]\n",
        simulate_config(2)
    );
    let mut cfg = RunConfig::parse(&text).unwrap();
    cfg.apply_seed(Some(40));
    assert_eq!(cfg.simulate[0].sim.seed, 40);
    assert_eq!(cfg.simulate[1].sim.seed, 41);
    assert_eq!(cfg.pretrain.unwrap().train.seed, 40);
    assert_eq!(cfg.generate.unwrap().seed, 40);
}

#[test]
fn self_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}\n[evaluate]\ngenerated = \"meas.csv\"\nreference = \"meas.csv\"\noutput = \"eval\"\n",
        simulate_config(21)
    );
    let cfg = RunConfig::parse(&text).unwrap();
    let wd = Workdir::new(dir.path());
    commands::run(Mode::Simulate, &cfg, &wd).unwrap();
    commands::run(Mode::Evaluate, &cfg, &wd).unwrap();

    let eval = dir.path().join("eval");
    let text = fs::read_to_string(eval.join("report.json")).unwrap();
    let report = validate_report(&text).unwrap();
    assert!((report.ple_accuracy_pct.unwrap() - 100.0).abs() < 1e-9);
    assert!((report.ssim.mean.unwrap() - 1.0).abs() < 1e-9);
    assert!(report.delay_spread_band.within && report.angular_spread_band.within);
    assert_eq!(report.ssim.pairs, 21);

    let band = read_band_csv(fs::File::open(eval.join("delay_spread_reference.csv")).unwrap(), 0.01).unwrap();
    assert_eq!(band.table().len(), 21);
    assert!((band.epsilon - report.delay_spread_band.epsilon).abs() < 1e-12);
    assert!(eval.join("pdap").read_dir().unwrap().count() >= 2);
}

#[test]
fn report_validator_round_trips_and_rejects_bad_values() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}\n[evaluate]\ngenerated = \"meas.csv\"\nreference = \"meas.csv\"\noutput = \"eval\"\npdap_grids = false\n",
        simulate_config(6)
    );
    let cfg = RunConfig::parse(&text).unwrap();
    let wd = Workdir::new(dir.path());
    commands::run(Mode::Simulate, &cfg, &wd).unwrap();
    commands::run(Mode::Evaluate, &cfg, &wd).unwrap();
    let text = fs::read_to_string(dir.path().join("eval/report.json")).unwrap();
    let report: EvaluationReport = validate_report(&text).unwrap();
    assert_eq!(
        validate_report(&serde_json::to_string(&report).unwrap()).unwrap(),
        report
    );

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["extra"] = serde_json::json!(1);
    assert!(validate_report(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["delta"] = serde_json::json!(1.5);
    assert!(validate_report(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["schema_version"] = serde_json::json!(99);
    assert!(validate_report(&v.to_string()).is_err());
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
seed = 3
[[simulate]]
output = "pre.csv"
channels = 16

[[simulate]]
output = "meas.csv"
channels = 6
[simulate.sim]
evenly_spaced = true

[pretrain]
dataset = "pre.csv"
output = "pre.ckpt"
[pretrain.train]
epochs = 4
batch_size = 8
[pretrain.progress]
every = 2
{TINY_ARCH}

[finetune]
checkpoint = "pre.ckpt"
dataset = "meas.csv"
output = "ft.ckpt"
[finetune.train]
epochs = 3

[generate]
checkpoint = "ft.ckpt"
output = "gen.csv"
distances_from = "meas.csv"
count = 12

[evaluate]
generated = "gen.csv"
reference = "meas.csv"
output = "eval"

[sweep]
checkpoint = "pre.ckpt"
dataset = "meas.csv"
output = "sweep"
sizes = [6, 3]
generate_count = 12
[sweep.train]
epochs = 2
"#
    );
    let mut cfg = RunConfig::parse(&text).unwrap();
    cfg.apply_seed(None);
    let wd = Workdir::new(dir.path());
    for mode in [
        Mode::Simulate,
        Mode::Pretrain,
        Mode::Finetune,
        Mode::Generate,
        Mode::Evaluate,
        Mode::Sweep,
    ] {
        commands::run(mode, &cfg, &wd).unwrap_or_else(|e| panic!("{mode:?}: {e}"));
    }
    assert_eq!(dataset::load(&dir.path().join("gen.csv")).unwrap().len(), 12);
    let progress = fs::read_to_string(dir.path().join("pre.ckpt.progress.csv")).unwrap();
    assert_eq!(progress.lines().count(), 3);
    validate_report(&fs::read_to_string(dir.path().join("eval/report.json")).unwrap()).unwrap();
    let sweep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep/sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["rows"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("sweep/band_membership.csv").exists());

    // a fine-tuned checkpoint cannot anchor another fine-tune
    let mut again = cfg.clone();
    again.finetune.as_mut().unwrap().checkpoint = "ft.ckpt".into();
    let err = commands::run(Mode::Finetune, &again, &wd).unwrap_err();
    assert_eq!(err.exit_code(), exit::VALIDATION);
}

#[test]
fn finetune_table_keeps_full_batch_default() {
    let text = "[finetune]\ncheckpoint = \"a\"\ndataset = \"b\"\noutput = \"c\"\n[finetune.train]\nepochs = 7\n\
                [sweep]\ncheckpoint = \"a\"\ndataset = \"b\"\noutput = \"c\"\n[sweep.train]\nbatch_size = 5\n";
    let cfg = RunConfig::parse(text).unwrap();
    let f = cfg.finetune.unwrap().train;
    assert_eq!((f.epochs, f.batch_size), (7, None));
    assert_eq!(cfg.sweep.unwrap().train.batch_size, Some(5));
    assert!(RunConfig::parse(
        "[finetune]\ncheckpoint = \"a\"\ndataset = \"b\"\noutput = \"c\"\n[finetune.train]\nepoch = 7\n"
    )
    .is_err());
}
