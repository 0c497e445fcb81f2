//! Terahertz multipath channel modeling: channel data model, evaluation
//! statistics, a reference stochastic simulator, and a transformer-based
//! conditional GAN with transfer-learning fine-tuning.

pub mod channel;
pub mod checkpoint;
pub mod dataset;
pub mod diffnet;
pub mod error;
pub mod sim;
pub mod stats;
pub mod tgan;
pub mod train;

pub use channel::{ChannelRealization, FlatChannelVector, Mpc, NormalizationStats, Pdap, PdapGrid};
pub use error::{ChannelError, CheckpointError, DatasetError, DiffError, SimError, StatsError, TrainError};
