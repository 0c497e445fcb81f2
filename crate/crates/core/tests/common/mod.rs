#![allow(dead_code)]

use chanforge::diffnet::{ArchConfig, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Denominator floor for relative errors; central differences at step 1e-5
/// carry roughly 1e-10 of absolute rounding noise.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        seq_len: 3,
        d_x: 8,
        n_layers: 1,
        heads: 1,
        noise_dim: 4,
        gen_hidden: 10,
        ..ArchConfig::reduced()
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst relative error between `grads` and central differences of `f`
/// over every scalar in `params`, with the offending tensor name.
pub fn finite_difference_check(
    params: &ParamStore,
    grads: &ParamStore,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let mut work = params.clone();
    for (name, t) in params.iter() {
        let analytic = grads.get(name).unwrap().data().to_vec();
        for i in 0..t.len() {
            let w = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = w + h;
            let fp = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = w - h;
            let fm = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = w;
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_err(analytic[i], numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic {} numeric {numeric}", analytic[i]));
            }
        }
    }
    worst
}
