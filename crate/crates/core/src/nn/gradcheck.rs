//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Denominators below this are clamped so near-zero gradients do not blow up the ratio.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Reduce `x` to a scalar with a fixed random weighting so that every output
/// coordinate contributes a distinct gradient.
pub fn random_projection(g: &Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let weights = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = g.input(weights);
    Ok(g.sum(g.mul(x, w)?))
}

fn pick(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Compare gradients of `f` with respect to its inputs against central differences.
/// `coords_per_input` limits how many coordinates of each input are probed.
pub fn grad_check<F>(
    inputs: &[Tensor],
    f: F,
    epsilon: f64,
    coords_per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.value(out).item())
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0 };
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for c in pick(inputs[i].len(), coords_per_input, &mut rng) {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + epsilon;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = orig - epsilon;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic.data()[c], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

/// Same as [`grad_check`] but perturbs model parameters. When `coords` is set,
/// that many (parameter, coordinate) pairs are sampled across the whole store.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    epsilon: f64,
    coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let out = f(&g, store)?;
    let grads = g.backward(out)?;

    let mut all: Vec<(ParamId, usize)> = Vec::new();
    for (id, p) in store.iter() {
        all.extend((0..p.value.len()).map(|c| (id, c)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<(ParamId, usize)> = pick(all.len(), coords, &mut rng).into_iter().map(|i| all[i]).collect();

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0 };
    for (id, c) in chosen {
        let analytic = grads.param(id).map(|t| t.data()[c]).unwrap_or(0.0);
        let orig = work.get(id).data()[c];
        let mut probe = |delta: f64| -> Result<f64> {
            work.get_mut(id).data_mut()[c] = orig + delta;
            let g = Graph::new();
            let out = f(&g, &work)?;
            Ok(g.value(out).item())
        };
        let plus = probe(epsilon)?;
        let minus = probe(-epsilon)?;
        work.get_mut(id).data_mut()[c] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
        report.coords_checked += 1;
    }
    Ok(report)
}
