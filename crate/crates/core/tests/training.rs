mod common;

use chanforge::channel::{NormalizationStats, FLAT_LEN};
use chanforge::checkpoint::{Checkpoint, Provenance};
use chanforge::train::{
    critic_objective, discriminator_step, param_distance, run_epochs, train_epoch, TrainConfig, TrainState,
    TrainingData,
};
use common::{rng, tiny_arch, uniform};
use rand::Rng;
use rand_distr::StandardNormal;

fn norm() -> NormalizationStats {
    NormalizationStats {
        min: [-120.0, 0.0, 0.0, -30.0],
        max: [-60.0, 100.0, 360.0, 30.0],
        distance_max: 25.0,
    }
}

fn toy_data(n: usize, seed: u64) -> TrainingData {
    let mut r = rng(seed);
    let c = uniform(&mut r, n, -1.0, 1.0);
    let x = (0..n * FLAT_LEN)
        .map(|i| (0.4 * c[i / FLAT_LEN] + 0.1 * (i % 4) as f64 + r.random_range(-0.05..0.05)).clamp(-1.0, 1.0))
        .collect();
    TrainingData::from_normalized(x, c).unwrap()
}

fn cfg(epochs: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: Some(8),
        seed: 5,
        ..TrainConfig::default()
    }
}

fn trained(epochs: u64, seed: u64) -> TrainState {
    let mut s = TrainState::new(&tiny_arch(), norm(), seed).unwrap();
    run_epochs(&mut s, &cfg(epochs), &toy_data(24, 1), epochs, &mut |_, _| {}).unwrap();
    s
}

fn bytes(state: &TrainState, epochs: u64) -> Vec<u8> {
    Checkpoint::new(cfg(epochs), Provenance::Pretrained, state.clone()).to_bytes()
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let (a, b) = (trained(4, 3), trained(4, 3));
    assert_eq!(bytes(&a, 4), bytes(&b, 4));
    assert_ne!(bytes(&a, 4), bytes(&trained(4, 4), 4));
}

#[test]
fn resume_from_checkpoint_equals_uninterrupted_run() {
    let data = toy_data(24, 1);
    let full = trained(5, 3);
    let mut part = TrainState::new(&tiny_arch(), norm(), 3).unwrap();
    run_epochs(&mut part, &cfg(5), &data, 2, &mut |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    Checkpoint::new(cfg(5), Provenance::Pretrained, part)
        .save(&path)
        .unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().state;
    run_epochs(&mut resumed, &cfg(5), &data, 5, &mut |_, _| {}).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(bytes(&resumed, 5), bytes(&full, 5));
}

#[test]
fn finetune_without_penalties_matches_plain_training() {
    let base = trained(2, 1);
    let data = toy_data(21, 2);
    let c = TrainConfig {
        lambda_gp: 0.0,
        l2sp_alpha: 0.0,
        ..TrainConfig::finetune()
    };
    let mut tuned = base.to_finetune(9);
    let mut plain = tuned.clone();
    plain.anchor = None;
    for _ in 0..3 {
        train_epoch(&mut tuned, &c, &data).unwrap();
        train_epoch(&mut plain, &c, &data).unwrap();
    }
    assert_eq!(tuned.generator, plain.generator);
    assert_eq!(tuned.discriminator, plain.discriminator);
    assert_eq!(tuned.history, plain.history);
}

fn max_abs_dev(a: &chanforge::diffnet::ParamStore, b: &chanforge::diffnet::ParamStore) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[test]
fn huge_alpha_pins_weights_to_anchor() {
    let base = trained(2, 1);
    let data = toy_data(21, 2);
    let c = TrainConfig {
        l2sp_alpha: 1e6,
        epochs: 100,
        ..TrainConfig::finetune()
    };
    let mut s = base.to_finetune(4);
    run_epochs(&mut s, &c, &data, 100, &mut |_, _| {}).unwrap();
    let anchor = s.anchor.as_ref().unwrap();
    let dg = max_abs_dev(&s.generator.params, &anchor.generator);
    let dd = max_abs_dev(&s.discriminator.params, &anchor.discriminator);
    assert!(dg < 1e-3 && dd < 1e-3, "generator {dg:e}, discriminator {dd:e}");
}

#[test]
fn anchor_distance_shrinks_as_alpha_grows() {
    let base = trained(2, 1);
    let data = toy_data(21, 2);
    let distances: Vec<f64> = [0.01, 0.1, 1.0, 10.0]
        .iter()
        .map(|&alpha| {
            let c = TrainConfig {
                l2sp_alpha: alpha,
                lr: 1e-3,
                generator_lr: Some(1e-2),
                epochs: 30,
                ..TrainConfig::finetune()
            };
            let mut s = base.to_finetune(6);
            run_epochs(&mut s, &c, &data, 30, &mut |_, _| {}).unwrap();
            let a = s.anchor.as_ref().unwrap();
            let dg = param_distance(&s.generator.params, &a.generator).unwrap();
            let dd = param_distance(&s.discriminator.params, &a.discriminator).unwrap();
            (dg * dg + dd * dd).sqrt()
        })
        .collect();
    for w in distances.windows(2) {
        assert!(w[1] <= w[0], "{distances:?}");
    }
}

#[test]
fn critic_step_lowers_loss_on_its_batch() {
    let mut s = TrainState::new(&tiny_arch(), norm(), 2).unwrap();
    let data = toy_data(16, 3);
    let c = TrainConfig {
        batch_size: None,
        ..TrainConfig::default()
    };
    // replay the step's draws: a full batch consumes no index samples
    let mut r = s.rng.clone();
    let b = data.len();
    let z: Vec<f64> = (0..b * tiny_arch().noise_dim)
        .map(|_| r.sample(StandardNormal))
        .collect();
    let u: Vec<f64> = (0..b).map(|_| r.random::<f64>()).collect();
    let (real, cond) = (data.x().to_vec(), data.c().to_vec());
    let fake = s.generator.forward_batch(&z, &cond).unwrap().concat();
    let before = critic_objective(&s.discriminator, c.lambda_gp, &real, &fake, &cond, &u).unwrap();
    let (loss, _) = discriminator_step(&mut s, &c, &data).unwrap();
    assert_eq!(loss, before.loss);
    let after = critic_objective(&s.discriminator, c.lambda_gp, &real, &fake, &cond, &u).unwrap();
    assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
}

#[test]
fn zero_penalty_weight_leaves_plain_log_loss() {
    let s = TrainState::new(&tiny_arch(), norm(), 2).unwrap();
    let mut r = rng(1);
    let real = uniform(&mut r, 4 * FLAT_LEN, -1.0, 1.0);
    let fake = uniform(&mut r, 4 * FLAT_LEN, -1.0, 1.0);
    let c = uniform(&mut r, 4, -1.0, 1.0);
    let u = uniform(&mut r, 4, 0.0, 1.0);
    let e = critic_objective(&s.discriminator, 0.0, &real, &fake, &c, &u).unwrap();
    assert_eq!(e.loss, e.bce);
    assert_eq!(e.penalty, 0.0);
    let p = s.discriminator.forward_batch(&real, &c).unwrap();
    let q = s.discriminator.forward_batch(&fake, &c).unwrap();
    let direct = -(p.iter().map(|v| v.ln()).sum::<f64>() + q.iter().map(|v| (1.0 - v).ln()).sum::<f64>()) / 4.0;
    assert!((e.bce - direct).abs() < 1e-12);
}

fn mean_distance_to_target(s: &TrainState, target: &[f64]) -> f64 {
    let mut r = rng(77);
    let n = 64;
    let z: Vec<f64> = (0..n * s.arch().noise_dim).map(|_| r.sample(StandardNormal)).collect();
    let c = vec![0.0; n];
    let rows = s.generator.forward_batch(&z, &c).unwrap();
    let mean: Vec<f64> = (0..2)
        .map(|j| rows.iter().map(|row| row[j]).sum::<f64>() / n as f64)
        .collect();
    mean.iter()
        .zip(target)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn toy_run_moves_generated_mean_toward_data() {
    // the first two outputs carry a 2-D Gaussian; the rest are fixed at 0
    let mut r = rng(12);
    let n = 128;
    let target = [0.6, -0.5];
    let mut x = vec![0.0; n * FLAT_LEN];
    for i in 0..n {
        for (j, t) in target.iter().enumerate() {
            let e: f64 = r.sample(StandardNormal);
            x[i * FLAT_LEN + j] = t + 0.1 * e;
        }
    }
    let data = TrainingData::from_normalized(x, vec![0.0; n]).unwrap();
    let c = TrainConfig {
        epochs: 50,
        batch_size: Some(32),
        lr: 1e-3,
        generator_lr: Some(1e-2),
        ..TrainConfig::default()
    };
    let mut s = TrainState::new(&tiny_arch(), norm(), 3).unwrap();
    let before = mean_distance_to_target(&s, &target);
    run_epochs(&mut s, &c, &data, 50, &mut |_, _| {}).unwrap();
    let after = mean_distance_to_target(&s, &target);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn epoch_schedule_is_three_critic_steps_then_one_generator_step() {
    let s = trained(3, 2);
    assert_eq!((s.epoch, s.d_steps, s.g_steps), (3, 9, 3));
    assert_eq!(s.history.len(), 3);
    assert_eq!(s.adam.t, 9);
}

#[test]
fn trained_checkpoint_round_trips_byte_identically() {
    let channels = chanforge::sim::Simulator::new(Default::default())
        .unwrap()
        .generate_dataset(30)
        .unwrap();
    let norm = NormalizationStats::from_dataset(&channels).unwrap();
    let data = TrainingData::from_channels(&channels, &norm).unwrap();
    for seed in 0..4 {
        let mut s = TrainState::new(&tiny_arch(), norm.clone(), seed).unwrap();
        run_epochs(&mut s, &cfg(3), &data, 3, &mut |_, _| {}).unwrap();
        let first = bytes(&s, 3);
        let again = Checkpoint::from_bytes(&first).unwrap();
        assert_eq!(again.state, s);
        assert_eq!(again.to_bytes(), first);
    }
}
