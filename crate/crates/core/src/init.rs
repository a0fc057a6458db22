//! Parameter initializers shared by the layer builders.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform<T: Scalar>(rng: &mut impl Rng, dims: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| T::of(rng.random_range(-bound..bound)))
}

pub(crate) fn standard_normal<T: Scalar>(rng: &mut impl Rng, dims: &[usize]) -> Tensor<T> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(dims, |_| T::of(n.sample(rng)))
}

/// Inserts a `[fan_in x out]` weight and, if `bias` is set, a zero `[out]` bias
/// named `{prefix}.W` / `{prefix}.b`.
pub(crate) fn linear<T: Scalar>(
    store: &mut ParameterStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    fan_in: usize,
    out: usize,
    bias: bool,
) -> Result<()> {
    store.insert(format!("{prefix}.W"), fan_in_uniform(rng, &[fan_in, out], fan_in))?;
    if bias {
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[out]))?;
    }
    Ok(())
}

/// Gain 1, bias 0 under `{prefix}.gain` / `{prefix}.bias`.
pub(crate) fn layernorm<T: Scalar>(store: &mut ParameterStore<T>, prefix: &str, width: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[width], T::one()))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]))
}
