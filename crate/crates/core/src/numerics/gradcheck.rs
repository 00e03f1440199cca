//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Per-input outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub input: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub max_rel_err: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elements: Option<usize>,
    pub seed: u64,
    pub exec: Exec,
}

impl GradCheckOptions {
    pub fn new(eps: f64, tol: f64) -> Self {
        Self {
            eps,
            tol,
            max_elements: None,
            seed: 0,
            exec: Exec::default(),
        }
    }

    pub fn sampled(mut self, max_elements: usize, seed: u64) -> Self {
        self.max_elements = Some(max_elements);
        self.seed = seed;
        self
    }
}

/// Checks every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    grad_check_with(f, inputs, GradCheckOptions::new(eps, tol))
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Relative error is `|a − n| / max(|a|, |n|, floor)`. `floor` is the larger of
/// 1e-2 of the largest gradient magnitude seen on that input and the rounding
/// resolution of the difference quotient, `1e4·ε_mach·max(1, |f|)/eps`.
pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    if !(opts.eps > 0.0 && opts.tol > 0.0) {
        return Err(Error::invalid("grad_check", "eps and tol must be positive"));
    }
    for (i, t) in inputs.iter().enumerate() {
        if let Some(index) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { input: i, index });
        }
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item();
    if !base.is_finite() {
        return Err(Error::NonFiniteInput {
            input: usize::MAX,
            index: 0,
        });
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaf gradient"))
        .collect();
    drop(g);

    let resolution = 1e4 * f64::EPSILON * base.abs().max(1.0) / opts.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut overall = 0.0f64;
    for (input, t) in inputs.iter().enumerate() {
        let n = t.len();
        let elements: Vec<usize> = match opts.max_elements {
            Some(m) if m < n => {
                let mut picked = sample(&mut rng, n, m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };

        let numeric: Vec<Result<f64>> = opts.exec.map(&elements, |&e| {
            let mut plus = inputs.to_vec();
            plus[input].data_mut()[e] += opts.eps;
            let fp = evaluate(&f, &plus)?;
            let mut minus = inputs.to_vec();
            minus[input].data_mut()[e] -= opts.eps;
            let fm = evaluate(&f, &minus)?;
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(Error::NonFiniteInput { input, index: e });
            }
            Ok((fp - fm) / (2.0 * opts.eps))
        });
        let numeric = numeric.into_iter().collect::<Result<Vec<f64>>>()?;

        let a = analytic[input].data();
        let scale = elements
            .iter()
            .zip(&numeric)
            .map(|(&e, &nv)| a[e].abs().max(nv.abs()))
            .fold(0.0f64, f64::max);
        let floor = (1e-2 * scale).max(resolution);
        let mut worst = (0.0f64, elements.first().copied().unwrap_or(0));
        for (&e, &nv) in elements.iter().zip(&numeric) {
            let denom = a[e].abs().max(nv.abs()).max(floor);
            let rel = (a[e] - nv).abs() / denom;
            if rel > worst.0 {
                worst = (rel, e);
            }
        }
        overall = overall.max(worst.0);
        reports.push(InputCheck {
            input,
            checked: elements.len(),
            max_rel_err: worst.0,
            worst_element: worst.1,
            passed: worst.0 < opts.tol,
        });
    }

    Ok(GradCheckReport {
        tol: opts.tol,
        max_rel_err: overall,
        inputs: reports,
    })
}
