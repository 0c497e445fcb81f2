//! Shared fixtures for the criterion benches.

use chanforge::channel::{ChannelRealization, NormalizationStats};
use chanforge::diffnet::ArchConfig;
use chanforge::sim::{SimConfig, Simulator};
use chanforge::train::{TrainState, TrainingData};

pub fn simulated(n: usize, seed: u64) -> Vec<ChannelRealization> {
    Simulator::new(SimConfig {
        seed,
        ..SimConfig::default()
    })
    .expect("default simulator config is valid")
    .generate_dataset(n)
    .expect("simulation succeeds")
}

/// Freshly initialized state and its training data.
pub fn fresh(arch: &ArchConfig, channels: usize) -> (TrainState, TrainingData) {
    let data = simulated(channels, 1);
    let norm = NormalizationStats::from_dataset(&data).expect("non-empty dataset");
    let td = TrainingData::from_channels(&data, &norm).expect("channels normalize");
    (TrainState::new(arch, norm, 1).expect("valid arch"), td)
}

pub fn distances(n: usize) -> Vec<f64> {
    (0..n).map(|i| 3.0 + 22.0 * i as f64 / n.max(2) as f64).collect()
}
