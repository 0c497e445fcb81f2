//! Finite-difference verification of parameter gradients for piecewise
//! smooth objectives.
//!
//! A central difference is only valid when `w - h` and `w + h` lie on the
//! same smooth piece as `w`. The objective reports its piece as a mask
//! pattern (see [`super::Graph::mask_pattern`]); when one side crosses a
//! kink the check uses the second-order one-sided stencil on the other
//! side, and when both do it retries with a tenth of the step.

use super::ParamStore;
use crate::error::DiffError;

/// Smallest step tried before a scalar is reported as unverified.
const MIN_STEP_FACTOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over verified scalars.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `name[index]` of the worst scalar.
    pub worst_at: String,
    pub checked: usize,
    /// Scalars verified with a one-sided stencil or a reduced step because
    /// the central stencil crossed a kink.
    pub near_kink: usize,
    /// Scalars with kinks on both sides down to the smallest step.
    pub unverified: Vec<String>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.unverified.is_empty()
    }
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `grads` with finite differences of `f` at every scalar of
/// `params`. `f` returns the objective and its mask pattern.
pub fn check_gradient<F>(
    params: &ParamStore,
    grads: &ParamStore,
    h: f64,
    floor: f64,
    mut f: F,
) -> Result<GradCheck, DiffError>
where
    F: FnMut(&ParamStore) -> Result<(f64, Vec<f64>), DiffError>,
{
    params.check_structure(grads)?;
    let (f0, piece) = f(params)?;
    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_at: String::new(),
        checked: 0,
        near_kink: 0,
        unverified: Vec::new(),
    };
    let mut work = params.clone();
    for (name, t) in params.iter() {
        let analytic = grads.get(name)?.data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let w = t.data()[i];
            let mut at = |d: f64| -> Result<(f64, bool), DiffError> {
                work.get_mut(name)?.data_mut()[i] = w + d;
                let (v, p) = f(&work)?;
                work.get_mut(name)?.data_mut()[i] = w;
                Ok((v, p == piece))
            };
            let mut step = h;
            let mut numeric = None;
            while numeric.is_none() && step >= h * MIN_STEP_FACTOR {
                let (fp, p_ok) = at(step)?;
                let (fm, m_ok) = at(-step)?;
                numeric = if p_ok && m_ok {
                    Some((fp - fm) / (2.0 * step))
                } else if p_ok {
                    let (fp2, ok) = at(2.0 * step)?;
                    ok.then(|| (-3.0 * f0 + 4.0 * fp - fp2) / (2.0 * step))
                } else if m_ok {
                    let (fm2, ok) = at(-2.0 * step)?;
                    ok.then(|| (3.0 * f0 - 4.0 * fm + fm2) / (2.0 * step))
                } else {
                    None
                };
                if !(p_ok && m_ok) && step == h {
                    out.near_kink += 1;
                }
                step *= 0.1;
            }
            let Some(n) = numeric else {
                out.unverified.push(format!("{name}[{i}]"));
                continue;
            };
            out.checked += 1;
            out.max_abs_err = out.max_abs_err.max((a - n).abs());
            let e = rel_err(a, n, floor);
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst_at = format!("{name}[{i}] analytic {a:e} numeric {n:e}");
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Tensor;

    fn store(w: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new([1, 1, 1], vec![w]).unwrap()).unwrap();
        p
    }

    // |w| + w²: kink at 0, derivative sign(w) + 2w elsewhere
    fn abs_sq(p: &ParamStore) -> Result<(f64, Vec<f64>), DiffError> {
        let w = p.get("w")?.data()[0];
        Ok((w.abs() + w * w, vec![if w > 0.0 { 1.0 } else { -1.0 }]))
    }

    #[test]
    fn one_sided_stencil_near_a_kink() {
        let w = 3e-6;
        let r = check_gradient(&store(w), &store(1.0 + 2.0 * w), 1e-5, 1e-6, abs_sq).unwrap();
        assert_eq!((r.checked, r.near_kink), (1, 1));
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught_near_a_kink() {
        let r = check_gradient(&store(-3e-6), &store(0.0), 1e-5, 1e-6, abs_sq).unwrap();
        assert!(r.max_rel_err > 0.5);
    }

    #[test]
    fn smooth_points_use_the_central_stencil() {
        let r = check_gradient(&store(0.5), &store(2.0), 1e-5, 1e-6, abs_sq).unwrap();
        assert_eq!(r.near_kink, 0);
        assert!(r.passes(1e-8), "{r:?}");
    }
}
