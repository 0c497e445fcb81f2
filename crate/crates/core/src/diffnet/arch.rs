use serde::{Deserialize, Serialize};

use crate::channel::{FLAT_LEN, NUM_PATHS};
use crate::error::DiffError;

/// Network dimensions shared by the generator and the discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Sequence length (one position per path).
    pub seq_len: usize,
    /// Model width inside the encoder.
    pub d_x: usize,
    /// Per-position width before the embedding layer.
    pub d_m: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub noise_dim: usize,
    pub leaky_slope: f64,
    /// Width of the generator's first head layer.
    pub gen_hidden: usize,
    /// Length of the flat channel vector.
    pub output_dim: usize,
}

impl ArchConfig {
    pub fn full() -> Self {
        ArchConfig {
            seq_len: NUM_PATHS,
            d_x: 128,
            d_m: 15,
            n_layers: 6,
            heads: 4,
            noise_dim: 32,
            leaky_slope: 0.2,
            gen_hidden: 240,
            output_dim: FLAT_LEN,
        }
    }

    /// Desk-scale configuration for CPU runs and tests.
    pub fn reduced() -> Self {
        ArchConfig {
            d_x: 32,
            n_layers: 2,
            heads: 2,
            ..Self::full()
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_x / self.heads
    }

    pub fn pre_embed(&self) -> usize {
        self.seq_len * self.d_m
    }

    pub fn validate(&self) -> Result<(), DiffError> {
        let dims = [
            self.seq_len,
            self.d_x,
            self.d_m,
            self.n_layers,
            self.heads,
            self.noise_dim,
            self.gen_hidden,
            self.output_dim,
        ];
        if dims.contains(&0) {
            return Err(DiffError::Structure("all dimensions must be >= 1".into()));
        }
        if !self.d_x.is_multiple_of(self.heads) {
            return Err(DiffError::Structure(format!(
                "d_x = {} is not divisible by {} heads",
                self.d_x, self.heads
            )));
        }
        if self.output_dim != FLAT_LEN {
            return Err(DiffError::Structure(format!(
                "output_dim must be {FLAT_LEN}, got {}",
                self.output_dim
            )));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(DiffError::Structure("leaky_slope must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Scalar parameters in one encoder layer.
    pub fn encoder_layer_params(&self) -> usize {
        let d = self.d_x;
        // per-head Q, K, V plus output projection
        let attn = 3 * d * self.d_k() * self.heads + self.heads * self.d_k() * d;
        let ffn = 2 * (d * d + d);
        let norms = 4 * d;
        attn + ffn + norms
    }

    /// Parameters shared in form by both networks: input dense, embedding,
    /// positional encoding and the encoder stack.
    fn trunk_params(&self, input: usize) -> usize {
        let pre = self.pre_embed();
        (input * pre + pre)
            + (self.d_m * self.d_x + self.d_x)
            + self.seq_len * self.d_x
            + self.n_layers * self.encoder_layer_params()
    }

    pub fn generator_params(&self) -> usize {
        let flat = self.seq_len * self.d_x;
        self.trunk_params(self.noise_dim + 1)
            + (flat * self.gen_hidden + self.gen_hidden)
            + (self.gen_hidden * self.output_dim + self.output_dim)
    }

    pub fn discriminator_params(&self) -> usize {
        self.trunk_params(self.output_dim + 1) + (self.d_x + 1) + (self.seq_len + 1)
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::full()
    }
}
