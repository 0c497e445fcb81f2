//! Adversarial training with a gradient penalty, and fine-tuning with an
//! L2 penalty towards the pretrained weights.
//!
//! One epoch is three discriminator steps followed by one generator step,
//! each on a freshly sampled batch. The discriminator descends
//! `-[mean log D(x|c) + mean log(1 - D(G(z|c)|c))] + λ·GP` with Adam; the
//! generator descends `mean log(1 - D(G(z|c)|c))` with plain SGD. All
//! randomness comes from the state's own generator, so a run is a pure
//! function of its seed, configuration and data.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{denormalize, flatten, normalize, unflatten, ChannelRealization, NormalizationStats, FLAT_LEN};
use crate::diffnet::{ArchConfig, Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{DiffError, TrainError};
use crate::tgan::{self, Discriminator, Generator};

pub const CRITIC_STEPS: usize = 3;
pub const GENERATOR_STEPS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Gradient penalty weight λ.
    pub lambda_gp: f64,
    /// Learning rate of both optimizers.
    pub lr: f64,
    /// Optional separate learning rate for the generator.
    pub generator_lr: Option<f64>,
    pub epochs: u64,
    /// Samples per step; `None` uses the whole dataset every step.
    pub batch_size: Option<usize>,
    /// L2-SP strength α, used only when fine-tuning.
    pub l2sp_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_gp: 10.0,
            lr: 1e-4,
            generator_lr: None,
            epochs: 10_000,
            batch_size: Some(64),
            l2sp_alpha: 0.1,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn finetune() -> Self {
        TrainConfig {
            batch_size: None,
            ..Self::default()
        }
    }

    pub fn generator_lr(&self) -> f64 {
        self.generator_lr.unwrap_or(self.lr)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.lambda_gp) {
            return bad("lambda_gp must be finite and >= 0");
        }
        if !nonneg(self.lr) || !nonneg(self.generator_lr()) {
            return bad("learning rates must be finite and >= 0");
        }
        if !nonneg(self.l2sp_alpha) {
            return bad("l2sp_alpha must be finite and >= 0");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be >= 1");
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad("adam betas must lie in [0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Mean discriminator objective over the epoch's critic steps.
    pub loss_d: f64,
    pub loss_g: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamState {
    pub fn new(like: &ParamStore) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }
}

/// Frozen copy of the pretrained weights used as the L2-SP anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub generator: ParamStore,
    pub discriminator: ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    /// Optimizer state of the discriminator; the generator's SGD is
    /// stateless.
    pub adam: AdamState,
    pub norm: NormalizationStats,
    pub epoch: u64,
    pub d_steps: u64,
    pub g_steps: u64,
    pub history: Vec<EpochRecord>,
    pub rng: ChaCha8Rng,
    pub anchor: Option<Anchor>,
}

impl TrainState {
    pub fn new(arch: &ArchConfig, norm: NormalizationStats, seed: u64) -> Result<Self, TrainError> {
        let (generator, discriminator) = tgan::init_model(arch, seed)?;
        let adam = AdamState::new(&discriminator.params);
        Ok(TrainState {
            generator,
            discriminator,
            adam,
            norm,
            epoch: 0,
            d_steps: 0,
            g_steps: 0,
            history: Vec::new(),
            rng: training_rng(seed),
            anchor: None,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.generator.arch
    }

    /// Starts fine-tuning from this state: the current weights become the
    /// anchor, the optimizer restarts and the counters reset.
    pub fn to_finetune(&self, seed: u64) -> TrainState {
        TrainState {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            adam: AdamState::new(&self.discriminator.params),
            norm: self.norm.clone(),
            epoch: 0,
            d_steps: 0,
            g_steps: 0,
            history: Vec::new(),
            rng: training_rng(seed),
            anchor: Some(Anchor {
                generator: self.generator.params.clone(),
                discriminator: self.discriminator.params.clone(),
            }),
        }
    }
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Normalized training vectors and conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    x: Vec<f64>,
    c: Vec<f64>,
    /// Entries clamped because they fell outside the normalization range.
    pub clamped: usize,
}

impl TrainingData {
    pub fn from_channels(channels: &[ChannelRealization], norm: &NormalizationStats) -> Result<Self, TrainError> {
        if channels.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut x = Vec::with_capacity(channels.len() * FLAT_LEN);
        let mut c = Vec::with_capacity(channels.len());
        let mut clamped = 0;
        for ch in channels {
            let (v, k) = normalize(&flatten(ch), norm)?;
            clamped += k;
            x.extend_from_slice(&v.values);
            c.push(norm.normalize_distance(ch.distance_m));
        }
        Ok(TrainingData { x, c, clamped })
    }

    /// Builds data from already normalized rows of 60 values.
    pub fn from_normalized(x: Vec<f64>, c: Vec<f64>) -> Result<Self, TrainError> {
        if c.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if x.len() != c.len() * FLAT_LEN {
            return Err(TrainError::Config(format!(
                "{} values for {} conditions",
                x.len(),
                c.len()
            )));
        }
        Ok(TrainingData { x, c, clamped: 0 })
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    /// Normalized vectors, 60 values per sample.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len() * FLAT_LEN);
        let mut c = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&self.x[i * FLAT_LEN..(i + 1) * FLAT_LEN]);
            c.push(self.c[i]);
        }
        (x, c)
    }
}

fn sample_batch(rng: &mut ChaCha8Rng, n: usize, batch: Option<usize>) -> Vec<usize> {
    match batch {
        Some(b) if b < n => index::sample(rng, n, b).into_vec(),
        _ => (0..n).collect(),
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `u·real + (1 - u)·fake` per sample.
pub fn interpolate(real: &[f64], fake: &[f64], u: &[f64]) -> Vec<f64> {
    let w = real.len() / u.len().max(1);
    real.iter()
        .zip(fake)
        .enumerate()
        .map(|(i, (&r, &f))| u[i / w] * r + (1.0 - u[i / w]) * f)
        .collect()
}

/// Mean over the batch of `(‖∇ₓ D‖₂ - 1)²`, where `d_out` holds one critic
/// value per row of `x`. The result stays differentiable with respect to
/// everything `d_out` depends on.
pub fn penalty_term(g: &mut Graph, x: Var, d_out: Var) -> Result<Var, DiffError> {
    let gx = g.grad(d_out, &[x])?[0];
    let b = g.shape(gx)[0];
    let sq = g.mul(gx, gx)?;
    let s = g.sum_to(sq, [b, 1, 1])?;
    let norm = g.powf(s, 0.5);
    let dev = g.add_scalar(norm, -1.0);
    let dev2 = g.mul(dev, dev)?;
    Ok(g.mean(dev2))
}

/// Discriminator objective and its parameter gradient for one batch.
#[derive(Debug, Clone)]
pub struct CriticEval {
    pub loss: f64,
    pub bce: f64,
    pub penalty: f64,
    pub grads: ParamStore,
}

struct CriticGraph {
    g: Graph,
    bound: Bound,
    total: Var,
    bce: Var,
    penalty: f64,
}

fn critic_graph(
    disc: &Discriminator,
    lambda_gp: f64,
    real: &[f64],
    fake: &[f64],
    c: &[f64],
    u: &[f64],
) -> Result<CriticGraph, DiffError> {
    let arch = &disc.arch;
    let b = c.len();
    let shape = [b, 1, arch.output_dim];
    let mut g = Graph::new();
    let bound = disc.params.bind(&mut g);
    let xr = g.leaf(Tensor::new(shape, real.to_vec())?);
    let xf = g.leaf(Tensor::new(shape, fake.to_vec())?);
    let cv = g.leaf(Tensor::new([b, 1, 1], c.to_vec())?);
    let dr = tgan::discriminator_forward(&mut g, arch, &bound, xr, cv)?;
    let df = tgan::discriminator_forward(&mut g, arch, &bound, xf, cv)?;
    let log_real = g.log(dr.prob);
    let log_real = g.mean(log_real);
    let one_minus = g.scale(df.prob, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let log_fake = g.log(one_minus);
    let log_fake = g.mean(log_fake);
    let sum = g.add(log_real, log_fake)?;
    let bce = g.neg(sum);
    let (total, penalty) = if lambda_gp > 0.0 {
        let xt = g.leaf(Tensor::new(shape, interpolate(real, fake, u))?);
        let dt = tgan::discriminator_forward(&mut g, arch, &bound, xt, cv)?;
        let pen = penalty_term(&mut g, xt, dt.prob)?;
        let weighted = g.scale(pen, lambda_gp);
        (g.add(bce, weighted)?, g.value(pen).item())
    } else {
        (bce, 0.0)
    };
    Ok(CriticGraph {
        g,
        bound,
        total,
        bce,
        penalty,
    })
}

/// Discriminator loss `-(mean log D(x) + mean log(1 - D(x̂))) + λ·penalty`
/// for one batch, with `u` the interpolation weights.
pub fn critic_objective(
    disc: &Discriminator,
    lambda_gp: f64,
    real: &[f64],
    fake: &[f64],
    c: &[f64],
    u: &[f64],
) -> Result<CriticEval, DiffError> {
    let CriticGraph {
        mut g,
        bound,
        total,
        bce,
        penalty,
    } = critic_graph(disc, lambda_gp, real, fake, c, u)?;
    let grads = g.grad(total, bound.vars())?;
    g.check_outputs(&[&[total][..], &grads].concat())?;
    Ok(CriticEval {
        loss: g.value(total).item(),
        bce: g.value(bce).item(),
        penalty,
        grads: disc.params.collect(&g, &grads),
    })
}

/// Value of [`critic_objective`] without the parameter gradient.
pub fn critic_loss(
    disc: &Discriminator,
    lambda_gp: f64,
    real: &[f64],
    fake: &[f64],
    c: &[f64],
    u: &[f64],
) -> Result<f64, DiffError> {
    let cg = critic_graph(disc, lambda_gp, real, fake, c, u)?;
    cg.g.check_outputs(&[cg.total])?;
    Ok(cg.g.value(cg.total).item())
}

/// [`critic_loss`] plus the graph's [`Graph::mask_pattern`], for gradient
/// checks that must not difference across a kink.
pub fn critic_loss_piece(
    disc: &Discriminator,
    lambda_gp: f64,
    real: &[f64],
    fake: &[f64],
    c: &[f64],
    u: &[f64],
) -> Result<(f64, Vec<f64>), DiffError> {
    let cg = critic_graph(disc, lambda_gp, real, fake, c, u)?;
    cg.g.check_outputs(&[cg.total])?;
    Ok((cg.g.value(cg.total).item(), cg.g.mask_pattern()))
}

/// Generator objective `mean log(1 - D(G(z|c)|c))` and its gradient.
pub fn generator_objective(
    gen: &Generator,
    disc: &Discriminator,
    z: &[f64],
    c: &[f64],
) -> Result<(f64, ParamStore), DiffError> {
    let arch = &gen.arch;
    let b = c.len();
    let mut g = Graph::new();
    let gb = gen.params.bind(&mut g);
    let db = disc.params.bind(&mut g);
    let zv = g.leaf(Tensor::new([b, 1, arch.noise_dim], z.to_vec())?);
    let cv = g.leaf(Tensor::new([b, 1, 1], c.to_vec())?);
    let fake = tgan::generator_forward(&mut g, arch, &gb, zv, cv)?;
    let d = tgan::discriminator_forward(&mut g, &disc.arch, &db, fake, cv)?;
    let one_minus = g.scale(d.prob, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let l = g.log(one_minus);
    let loss = g.mean(l);
    let grads = g.grad(loss, gb.vars())?;
    g.check_outputs(&[&[loss][..], &grads].concat())?;
    Ok((g.value(loss).item(), gen.params.collect(&g, &grads)))
}

/// `(α/2)·‖w - w⁰‖²` over all tensors.
pub fn l2sp_penalty(w: &ParamStore, w0: &ParamStore, alpha: f64) -> Result<f64, DiffError> {
    w.check_structure(w0)?;
    let sq: f64 = w
        .iter()
        .zip(w0.iter())
        .map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .sum();
    Ok(0.5 * alpha * sq)
}

/// Gradient of [`l2sp_penalty`]: `α·(w - w⁰)`.
pub fn l2sp_gradient(w: &ParamStore, w0: &ParamStore, alpha: f64) -> Result<ParamStore, DiffError> {
    w.check_structure(w0)?;
    let mut out = w.clone();
    for (t, (_, a)) in out.tensors_mut().zip(w0.iter()) {
        for (x, y) in t.data_mut().iter_mut().zip(a.data()) {
            *x = alpha * (*x - y);
        }
    }
    Ok(out)
}

/// ‖w - w⁰‖₂ over all tensors.
pub fn param_distance(w: &ParamStore, w0: &ParamStore) -> Result<f64, DiffError> {
    Ok((2.0 * l2sp_penalty(w, w0, 1.0)?).sqrt())
}

fn adam_update(
    params: &mut ParamStore,
    adam: &mut AdamState,
    grads: &ParamStore,
    anchor: Option<(&ParamStore, f64)>,
    cfg: &TrainConfig,
) {
    adam.t += 1;
    let t = adam.t as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let anchors: Vec<Option<&Tensor>> = match anchor {
        Some((w0, _)) => w0.iter().map(|(_, t)| Some(t)).collect(),
        None => vec![None; params.len()],
    };
    let alpha = anchor.map_or(0.0, |(_, a)| a);
    let iter = params
        .tensors_mut()
        .zip(adam.m.tensors_mut())
        .zip(adam.v.tensors_mut())
        .zip(grads.iter())
        .zip(anchors);
    for ((((w, m), v), (_, gt)), w0) in iter {
        let w0 = w0.map(Tensor::data);
        for (i, ((wi, mi), vi)) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).enumerate() {
            let mut gi = gt.data()[i];
            if let Some(w0) = w0 {
                gi += alpha * (*wi - w0[i]);
            }
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *wi -= cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Plain SGD. With an anchor the L2-SP term is applied as its exact
/// proximal step, `w ← (w - lr·g + lr·α·w⁰) / (1 + lr·α)`, which stays
/// stable for any α.
fn sgd_update(params: &mut ParamStore, grads: &ParamStore, lr: f64, anchor: Option<(&ParamStore, f64)>) {
    match anchor {
        Some((w0, alpha)) if alpha > 0.0 => {
            let k = lr * alpha;
            for ((w, (_, g)), (_, a)) in params.tensors_mut().zip(grads.iter()).zip(w0.iter()) {
                for ((wi, gi), ai) in w.data_mut().iter_mut().zip(g.data()).zip(a.data()) {
                    *wi = (*wi - lr * gi + k * ai) / (1.0 + k);
                }
            }
        }
        _ => {
            for (w, (_, g)) in params.tensors_mut().zip(grads.iter()) {
                for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
                    *wi -= lr * gi;
                }
            }
        }
    }
}

fn non_finite(phase: &'static str, what: impl Into<String>, epoch: u64) -> TrainError {
    TrainError::NonFinite {
        phase,
        what: what.into(),
        epoch,
    }
}

fn diff_in(phase: &'static str, epoch: u64) -> impl Fn(DiffError) -> TrainError {
    move |e| match e {
        DiffError::NonFinite { op, node } => non_finite(phase, format!("value from `{op}` (node {node})"), epoch),
        other => TrainError::Diff(other),
    }
}

/// One critic update. Returns `(loss, penalty)`.
pub fn discriminator_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainingData,
) -> Result<(f64, f64), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let arch = state.arch().clone();
    let idx = sample_batch(&mut state.rng, data.len(), cfg.batch_size);
    let b = idx.len();
    let (real, c) = data.gather(&idx);
    let z = normal_vec(&mut state.rng, b * arch.noise_dim);
    let u: Vec<f64> = (0..b).map(|_| state.rng.random::<f64>()).collect();
    let epoch = state.epoch;
    let fake: Vec<f64> = state
        .generator
        .forward_batch(&z, &c)
        .map_err(diff_in("generator forward", epoch))?
        .concat();
    let eval = critic_objective(&state.discriminator, cfg.lambda_gp, &real, &fake, &c, &u)
        .map_err(diff_in("discriminator step", epoch))?;
    if !eval.grads.is_finite() {
        return Err(non_finite("discriminator step", "gradient", epoch));
    }
    let mut params = state.discriminator.params.clone();
    let mut adam = state.adam.clone();
    let anchor = state
        .anchor
        .as_ref()
        .filter(|_| cfg.l2sp_alpha > 0.0)
        .map(|a| (&a.discriminator, cfg.l2sp_alpha));
    adam_update(&mut params, &mut adam, &eval.grads, anchor, cfg);
    if !params.is_finite() {
        return Err(non_finite("discriminator step", "parameter after update", epoch));
    }
    state.discriminator.params = params;
    state.adam = adam;
    state.d_steps += 1;
    Ok((eval.loss, eval.penalty))
}

/// One generator update on conditions drawn from the training set.
pub fn generator_step(state: &mut TrainState, cfg: &TrainConfig, data: &TrainingData) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let arch = state.arch().clone();
    let idx = sample_batch(&mut state.rng, data.len(), cfg.batch_size);
    let c: Vec<f64> = idx.iter().map(|&i| data.c[i]).collect();
    let z = normal_vec(&mut state.rng, c.len() * arch.noise_dim);
    let epoch = state.epoch;
    let (loss, grads) = generator_objective(&state.generator, &state.discriminator, &z, &c)
        .map_err(diff_in("generator step", epoch))?;
    if !grads.is_finite() {
        return Err(non_finite("generator step", "gradient", epoch));
    }
    let mut params = state.generator.params.clone();
    let anchor = state.anchor.as_ref().map(|a| (&a.generator, cfg.l2sp_alpha));
    sgd_update(&mut params, &grads, cfg.generator_lr(), anchor);
    if !params.is_finite() {
        return Err(non_finite("generator step", "parameter after update", epoch));
    }
    state.generator.params = params;
    state.g_steps += 1;
    Ok(loss)
}

/// Three critic steps then one generator step. On error `state` is left
/// as it was before the epoch.
pub fn train_epoch(state: &mut TrainState, cfg: &TrainConfig, data: &TrainingData) -> Result<EpochRecord, TrainError> {
    let mut next = state.clone();
    let mut loss_d = 0.0;
    let mut penalty = 0.0;
    for _ in 0..CRITIC_STEPS {
        let (l, p) = discriminator_step(&mut next, cfg, data)?;
        loss_d += l;
        penalty += p;
    }
    let mut loss_g = 0.0;
    for _ in 0..GENERATOR_STEPS {
        loss_g += generator_step(&mut next, cfg, data)?;
    }
    next.epoch += 1;
    let rec = EpochRecord {
        epoch: next.epoch,
        loss_d: loss_d / CRITIC_STEPS as f64,
        loss_g: loss_g / GENERATOR_STEPS as f64,
        penalty: penalty / CRITIC_STEPS as f64,
    };
    next.history.push(rec.clone());
    *state = next;
    Ok(rec)
}

/// Trains until `state.epoch == until_epoch`, calling `on_epoch` after each
/// epoch. On error the state holds the last completed epoch.
pub fn run_epochs(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainingData,
    until_epoch: u64,
    on_epoch: &mut dyn FnMut(&TrainState, &EpochRecord),
) -> Result<(), TrainError> {
    cfg.validate()?;
    while state.epoch < until_epoch {
        let rec = train_epoch(state, cfg, data)?;
        on_epoch(state, &rec);
    }
    Ok(())
}

/// Failed training run together with the last good state, when one exists.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: TrainError,
    pub last_good: Option<Box<TrainState>>,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainAbort {}

impl From<TrainError> for TrainAbort {
    fn from(error: TrainError) -> Self {
        TrainAbort { error, last_good: None }
    }
}

/// Trains a fresh model on simulated channels. Normalization statistics
/// come from this dataset and are kept for every later stage.
pub fn pretrain(
    arch: &ArchConfig,
    cfg: &TrainConfig,
    channels: &[ChannelRealization],
    on_epoch: &mut dyn FnMut(&TrainState, &EpochRecord),
) -> Result<TrainState, TrainAbort> {
    cfg.validate()?;
    let norm = NormalizationStats::from_dataset(channels).map_err(TrainError::from)?;
    let data = TrainingData::from_channels(channels, &norm)?;
    let mut state = TrainState::new(arch, norm, cfg.seed)?;
    run_epochs(&mut state, cfg, &data, cfg.epochs, on_epoch).map_err(|error| TrainAbort {
        error,
        last_good: Some(Box::new(state.clone())),
    })?;
    Ok(state)
}

/// Continues from pretrained weights with the L2-SP anchor set to them.
/// Measured channels are normalized with the pretraining statistics.
pub fn finetune(
    pretrained: &TrainState,
    cfg: &TrainConfig,
    channels: &[ChannelRealization],
    on_epoch: &mut dyn FnMut(&TrainState, &EpochRecord),
) -> Result<TrainState, TrainAbort> {
    cfg.validate()?;
    let data = TrainingData::from_channels(channels, &pretrained.norm)?;
    if data.clamped > 0 {
        log::warn!(
            "{} fine-tuning values fall outside the pretraining range and were clamped",
            data.clamped
        );
    }
    let mut state = pretrained.to_finetune(cfg.seed);
    run_epochs(&mut state, cfg, &data, cfg.epochs, on_epoch).map_err(|error| TrainAbort {
        error,
        last_good: Some(Box::new(state.clone())),
    })?;
    Ok(state)
}

/// Generates one channel per entry of `distances_m`, in order.
pub fn generate(
    generator: &Generator,
    norm: &NormalizationStats,
    distances_m: &[f64],
    seed: u64,
    id_prefix: &str,
) -> Result<Vec<ChannelRealization>, TrainError> {
    const CHUNK: usize = 256;
    let arch = &generator.arch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = normal_vec(&mut rng, distances_m.len() * arch.noise_dim);
    for &d in distances_m {
        if !(d > 0.0 && d.is_finite()) {
            return Err(TrainError::Config(format!("invalid distance {d}")));
        }
        if d > norm.distance_max {
            log::warn!(
                "distance {d} m exceeds the training range (max {} m)",
                norm.distance_max
            );
        }
    }
    let mut out = Vec::with_capacity(distances_m.len());
    for (k, chunk) in distances_m.chunks(CHUNK).enumerate() {
        let start = k * CHUNK;
        let c: Vec<f64> = chunk.iter().map(|&d| norm.normalize_distance(d)).collect();
        let zc = &z[start * arch.noise_dim..(start + chunk.len()) * arch.noise_dim];
        let rows = generator.forward_batch(zc, &c)?;
        for (j, row) in rows.iter().enumerate() {
            let flat = tgan::to_flat(row)?;
            let raw = denormalize(&flat, norm)?;
            let (ch, _) = unflatten(&raw, chunk[j], format!("{id_prefix}-{:05}", start + j))?;
            out.push(ch);
        }
    }
    Ok(out)
}
