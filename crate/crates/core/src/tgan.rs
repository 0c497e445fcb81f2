//! Conditional generator and discriminator assembled from the diffnet
//! layers.
//!
//! Both networks share a trunk: a dense layer with LeakyReLU onto
//! `L * d_m` features, a reshape to `L` positions, a per-position embedding
//! to `d_x`, a learned positional table and the encoder stack. The
//! generator ends in dense layers of `gen_hidden` and 60 units; the
//! discriminator maps every position to one value, then the `L` values to a
//! single logit, clamped to `±LOGIT_CLAMP` before the sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::FlatChannelVector;
use crate::diffnet::nn::{self, EncoderLayerParams};
use crate::diffnet::{ArchConfig, Bound, Graph, ParamStore, Tensor, Var};
use crate::error::DiffError;

pub const LOGIT_CLAMP: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub arch: ArchConfig,
    pub params: ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub arch: ArchConfig,
    pub params: ParamStore,
}

/// Discriminator outputs for a batch, each `[B, 1, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct DiscOutput {
    pub logit: Var,
    pub prob: Var,
}

fn init_trunk(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    arch: &ArchConfig,
    p: &str,
    input: usize,
) -> Result<(), DiffError> {
    nn::init_dense(store, rng, &format!("{p}.in"), input, arch.pre_embed())?;
    nn::init_dense(store, rng, &format!("{p}.embed"), arch.d_m, arch.d_x)?;
    store.push_uniform(
        rng,
        format!("{p}.pe"),
        [1, arch.seq_len, arch.d_x],
        1.0 / (arch.d_x as f64).sqrt(),
    )?;
    for l in 0..arch.n_layers {
        nn::init_encoder_layer(store, rng, &format!("{p}.enc.{l}"), arch)?;
    }
    Ok(())
}

/// Seeded initialization of both networks; the generator is drawn first.
pub fn init_model(arch: &ArchConfig, seed: u64) -> Result<(Generator, Discriminator), DiffError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gp = ParamStore::new();
    init_trunk(&mut gp, &mut rng, arch, "g", arch.noise_dim + 1)?;
    nn::init_dense(&mut gp, &mut rng, "g.head1", arch.seq_len * arch.d_x, arch.gen_hidden)?;
    nn::init_dense(&mut gp, &mut rng, "g.head2", arch.gen_hidden, arch.output_dim)?;

    let mut dp = ParamStore::new();
    init_trunk(&mut dp, &mut rng, arch, "d", arch.output_dim + 1)?;
    nn::init_dense(&mut dp, &mut rng, "d.head1", arch.d_x, 1)?;
    nn::init_dense(&mut dp, &mut rng, "d.head2", arch.seq_len, 1)?;
    Ok((
        Generator {
            arch: arch.clone(),
            params: gp,
        },
        Discriminator {
            arch: arch.clone(),
            params: dp,
        },
    ))
}

/// Input `[B, 1, in]` to encoder output `[B, L, d_x]`.
fn trunk(g: &mut Graph, arch: &ArchConfig, bound: &Bound, p: &str, input: Var) -> Result<Var, DiffError> {
    let b = g.shape(input)[0];
    let v = |name: &str| bound.var(&format!("{p}.{name}"));
    let h = nn::dense(g, input, v("in.w")?, v("in.b")?)?;
    let h = g.leaky_relu(h, arch.leaky_slope);
    let h = g.reshape(h, [b, arch.seq_len, arch.d_m])?;
    let h = nn::dense(g, h, v("embed.w")?, v("embed.b")?)?;
    let h = nn::positional_encode(g, h, v("pe")?)?;
    let layers = (0..arch.n_layers)
        .map(|l| EncoderLayerParams::bind(bound, &format!("{p}.enc.{l}"), arch.heads))
        .collect::<Result<Vec<_>, _>>()?;
    nn::transformer_encoder(g, h, &layers)
}

fn check_batch(g: &Graph, x: Var, c: Var, width: usize) -> Result<(), DiffError> {
    let (sx, sc) = (g.shape(x), g.shape(c));
    if sx[1] != 1 || sx[2] != width || sc != [sx[0], 1, 1] {
        return Err(DiffError::Shape {
            op: "network input",
            lhs: sx,
            rhs: sc,
        });
    }
    Ok(())
}

/// Batched generator: `z` is `[B, 1, noise_dim]`, `c` is `[B, 1, 1]`;
/// returns `[B, 1, 60]` in normalized units.
pub fn generator_forward(g: &mut Graph, arch: &ArchConfig, bound: &Bound, z: Var, c: Var) -> Result<Var, DiffError> {
    check_batch(g, z, c, arch.noise_dim)?;
    let b = g.shape(z)[0];
    let input = g.concat_cols(&[z, c])?;
    let h = trunk(g, arch, bound, "g", input)?;
    let h = g.reshape(h, [b, 1, arch.seq_len * arch.d_x])?;
    let h = nn::dense(g, h, bound.var("g.head1.w")?, bound.var("g.head1.b")?)?;
    nn::dense(g, h, bound.var("g.head2.w")?, bound.var("g.head2.b")?)
}

/// Batched discriminator: `x` is `[B, 1, 60]`, `c` is `[B, 1, 1]`.
pub fn discriminator_forward(
    g: &mut Graph,
    arch: &ArchConfig,
    bound: &Bound,
    x: Var,
    c: Var,
) -> Result<DiscOutput, DiffError> {
    check_batch(g, x, c, arch.output_dim)?;
    let b = g.shape(x)[0];
    let input = g.concat_cols(&[x, c])?;
    let h = trunk(g, arch, bound, "d", input)?;
    let h = nn::dense(g, h, bound.var("d.head1.w")?, bound.var("d.head1.b")?)?;
    let h = g.reshape(h, [b, 1, arch.seq_len])?;
    let logit = nn::dense(g, h, bound.var("d.head2.w")?, bound.var("d.head2.b")?)?;
    let logit = g.clamp(logit, -LOGIT_CLAMP, LOGIT_CLAMP);
    let prob = g.sigmoid(logit);
    Ok(DiscOutput { logit, prob })
}

impl Generator {
    /// Forward pass without gradient tracking. `z` holds `noise_dim` values
    /// per sample; returns one raw output row per condition.
    pub fn forward_batch(&self, z: &[f64], c: &[f64]) -> Result<Vec<Vec<f64>>, DiffError> {
        let b = c.len();
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let zv = g.leaf(Tensor::new([b, 1, self.arch.noise_dim], z.to_vec())?);
        let cv = g.leaf(Tensor::new([b, 1, 1], c.to_vec())?);
        let out = generator_forward(&mut g, &self.arch, &bound, zv, cv)?;
        g.check_outputs(&[out])?;
        Ok(g.value(out)
            .data()
            .chunks_exact(self.arch.output_dim)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// One normalized channel vector; entries are clamped into [-1, 1].
    pub fn generate_one(&self, z: &[f64], c: f64) -> Result<FlatChannelVector, DiffError> {
        let row = self.forward_batch(z, &[c])?.remove(0);
        to_flat(&row)
    }
}

pub(crate) fn to_flat(row: &[f64]) -> Result<FlatChannelVector, DiffError> {
    let clamped: Vec<f64> = row.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    FlatChannelVector::from_slice(&clamped, true).map_err(|e| DiffError::InvalidTensor(e.to_string()))
}

impl Discriminator {
    /// Probabilities that each `(x, c)` pair is real.
    pub fn forward_batch(&self, x: &[f64], c: &[f64]) -> Result<Vec<f64>, DiffError> {
        let b = c.len();
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xv = g.leaf(Tensor::new([b, 1, self.arch.output_dim], x.to_vec())?);
        let cv = g.leaf(Tensor::new([b, 1, 1], c.to_vec())?);
        let out = discriminator_forward(&mut g, &self.arch, &bound, xv, cv)?;
        g.check_outputs(&[out.prob])?;
        Ok(g.value(out.prob).data().to_vec())
    }

    pub fn probability(&self, x: &FlatChannelVector, c: f64) -> Result<f64, DiffError> {
        if !x.normalized {
            return Err(DiffError::InvalidTensor(
                "discriminator expects a normalized vector".into(),
            ));
        }
        Ok(self.forward_batch(&x.values, &[c])?[0])
    }
}
