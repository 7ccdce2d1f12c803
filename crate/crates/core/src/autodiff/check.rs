use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, Graph, NodeId, ParameterSet};
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, params: &ParameterSet) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let out = f(&mut g, &bound)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::contract("finite_diff_check", "f must return a scalar"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("f evaluated to {v}")));
    }
    Ok(v)
}

/// Step multipliers tried for each element, smallest first.
const LADDER: [f64; 5] = [0.1, 1.0, 10.0, 100.0, 1000.0];

/// Largest relative disagreement between the analytic gradient and a central
/// difference over every parameter element:
/// `max(0, |analytic - central| - res) / (|analytic| + |central| + 1e-12)`,
/// where `res`, 8 ulps of `f` over `2h`, is the rounding resolution of the
/// difference quotient.
///
/// Central differences are taken at `step` times each of 0.1, 1, 10, 100 and
/// 1000. The estimate kept is the smaller step of the adjacent pair that agrees
/// best: small steps drown tiny gradients in rounding noise, large ones can
/// straddle a kink such as a max or an absolute value.
pub fn finite_diff_check<F>(f: F, params: &ParameterSet, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<NodeId>,
{
    finite_diff_check_sampled(f, params, step, usize::MAX, 0)
}

/// Like [`finite_diff_check`] but probes at most `max_per_tensor` randomly
/// chosen elements of each parameter tensor.
pub fn finite_diff_check_sampled<F>(
    f: F,
    params: &ParameterSet,
    step: f64,
    max_per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::contract("finite_diff_check", "step must be positive"));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    if !g.value(loss).all_finite() {
        return Err(Error::Numeric("f evaluated to a non-finite value".into()));
    }
    g.backward(loss)?;
    let analytic = bound.grads(&g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let indices: Vec<usize> = if n <= max_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_per_tensor).into_vec()
        };
        let grad = analytic.get(name).expect("bound parameter");
        for i in indices {
            let orig = tensor.data()[i];
            // (estimate, resolution) per step
            let mut estimates = [(0.0, 0.0); LADDER.len()];
            for (est, k) in estimates.iter_mut().zip(LADDER) {
                let h = step * k;
                probe.get_mut(name).expect("cloned").data_mut()[i] = orig + h;
                let plus = evaluate(&f, &probe)?;
                probe.get_mut(name).expect("cloned").data_mut()[i] = orig - h;
                let minus = evaluate(&f, &probe)?;
                *est = (
                    (plus - minus) / (2.0 * h),
                    8.0 * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * h),
                );
            }
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig;
            let (central, resolution) = estimates
                .windows(2)
                .min_by(|a, b| (a[0].0 - a[1].0).abs().total_cmp(&(b[0].0 - b[1].0).abs()))
                .map(|w| w[0])
                .expect("ladder has pairs");
            let a = grad.data()[i];
            let excess = ((a - central).abs() - resolution).max(0.0);
            worst = worst.max(excess / (a.abs() + central.abs() + 1e-12));
        }
    }
    Ok(worst)
}
