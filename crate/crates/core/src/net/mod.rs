//! Arrays, reverse-mode autodiff and the function approximators built on it.

mod adam;
mod array;
pub mod checkpoint;
mod denoiser;
pub mod gradcheck;
mod params;
mod qnet;
mod tape;

pub use adam::Adam;
pub use array::NumArray;
pub use denoiser::{
    denoiser_forward, init_params, mu_theta, time_embedding, Arch, DenoiserOutput, DenoiserSpec,
};
pub use params::{Param, ParamStore};
pub use qnet::{init_qnet, qnet_batch, qnet_forward, qnet_values, QNetSpec};
pub use tape::{logsumexp, softmax_row, Bound, Gradients, Tape, Var};

use rand::Rng;

/// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn fan_in_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> NumArray {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    NumArray::new(vec![rows, cols], data).unwrap()
}

/// Inserts `{prefix}.w` (fan-in uniform or zero) and a zero `{prefix}.b`.
pub(crate) fn insert_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    rng: &mut R,
) {
    let w = if zero {
        NumArray::zeros(vec![fan_in, fan_out])
    } else {
        fan_in_uniform(fan_in, fan_out, rng)
    };
    store.insert(format!("{prefix}.w"), w);
    store.insert(format!("{prefix}.b"), NumArray::zeros(vec![1, fan_out]));
}
