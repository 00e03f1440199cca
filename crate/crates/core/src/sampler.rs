//! Prior sampling and fixed-step forward Euler integration of the flow ODE.

use std::time::Instant;

use crate::cfm::FlowTime;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::rng::{normals, stream, Purpose};

#[derive(Clone, Debug)]
pub struct SolveReport<T> {
    pub output: Tensor<T>,
    /// Number of vector-field evaluations.
    pub nfe: usize,
    pub wall_time: f64,
}

/// Zero-mean Gaussian noise with standard deviation `temperature`.
pub fn sample_prior<T: Real>(shape: &[usize], temperature: f64, seed: u64) -> Result<Tensor<T>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(
            "sample_prior",
            format!("temperature must be > 0, got {temperature}"),
        ));
    }
    let n = shape.iter().product();
    let mut rng = stream(seed, Purpose::Prior, 0);
    let tau = T::of(temperature);
    let data = normals::<T>(&mut rng, n)
        .into_iter()
        .map(|v| v * tau)
        .collect();
    Tensor::new(shape, data)
}

/// Integrates `dx/dt = field(x, t, condition)` from `t = 0` to `t = 1` in
/// `n_steps` left-endpoint Euler steps.
pub fn euler_solve<T, F>(
    x0: Tensor<T>,
    n_steps: usize,
    condition: &Tensor<T>,
    mut field: F,
) -> Result<SolveReport<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>, FlowTime, &Tensor<T>) -> Result<Tensor<T>>,
{
    if n_steps < 1 {
        return Err(Error::invalid("euler_solve", "n_steps must be >= 1"));
    }
    let start = Instant::now();
    let h = T::of(1.0 / n_steps as f64);
    let mut x = x0;
    let mut nfe = 0;
    for k in 0..n_steps {
        let t = FlowTime::new(k as f64 / n_steps as f64)?;
        let v = field(&x, t, condition)?;
        nfe += 1;
        if v.shape() != x.shape() {
            return Err(Error::shape(
                "euler_solve field output",
                v.shape(),
                x.shape(),
            ));
        }
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi = *xi + h * vi;
        }
    }
    Ok(SolveReport {
        output: x,
        nfe,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
