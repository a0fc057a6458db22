//! Selective state-space layer and the Mamba block around it.
//!
//! Parameters live in a [`ParameterStore`] under a per-block prefix, for
//! example `il.mamba` or `stack.0.mamba`:
//!
//! | name | dims |
//! |---|---|
//! | `{p}.in_proj` | `D x 2E` |
//! | `{p}.conv.kernel`, `{p}.conv.bias` | `E x K`, `E` |
//! | `{p}.ssm.a_log` | `E x N` |
//! | `{p}.ssm.proj_B`, `{p}.ssm.proj_C` | `E x N` |
//! | `{p}.ssm.proj_delta.W`, `{p}.ssm.proj_delta.b` | `E x E`, `E` |
//! | `{p}.ssm.skip_d` | `E` (absent when the skip term is disabled) |
//! | `{p}.out_proj` | `E x D` |
//!
//! with `E = expand * D`. The state matrix is diagonal, `A = -exp(a_log)`.

use rand::Rng;

use crate::error::{MlsaError, Result};
use crate::init;
use crate::params::ParameterStore;
use crate::tensor::graph::{zoh, ScanInputs};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Step sizes at initialization are drawn log-uniformly from this range.
pub const DELTA_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

/// Zero-order hold for one diagonal entry: `(exp(delta a), (exp(delta a) - 1)/a * b)`,
/// using the limit `delta * b` when `|a| < 1e-8`.
pub fn discretize_zoh(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(MlsaError::Domain(format!("step size must be positive, got {delta}")));
    }
    if !a.is_finite() || !b.is_finite() || !delta.is_finite() {
        return Err(MlsaError::Domain("non-finite discretization input".into()));
    }
    let (a_bar, phi) = zoh(delta, a);
    Ok((a_bar, phi * b))
}

/// Inverse of softplus, `ln(exp(y) - 1)`, for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Input-dependent SSM over `E` channels with `N` states per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmCore {
    prefix: String,
    e_inner: usize,
    d_state: usize,
    skip: bool,
}

impl SsmCore {
    pub fn new(prefix: impl Into<String>, e_inner: usize, d_state: usize, skip: bool) -> Result<Self> {
        if e_inner == 0 || d_state == 0 {
            return Err(MlsaError::config("SSM channel and state sizes must be >= 1"));
        }
        Ok(SsmCore { prefix: prefix.into(), e_inner, d_state, skip })
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn e_inner(&self) -> usize {
        self.e_inner
    }

    pub fn d_state(&self) -> usize {
        self.d_state
    }

    pub fn has_skip(&self) -> bool {
        self.skip
    }

    pub fn init<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        let (e, n) = (self.e_inner, self.d_state);
        store.insert(self.name("a_log"), Tensor::from_fn(&[e, n], |i| T::of(((i % n) as f64 + 1.0).ln())))?;
        store.insert(self.name("proj_B"), init::fan_in_uniform(rng, &[e, n], e))?;
        store.insert(self.name("proj_C"), init::fan_in_uniform(rng, &[e, n], e))?;
        store.insert(self.name("proj_delta.W"), init::fan_in_uniform(rng, &[e, e], e))?;
        let (lo, hi) = (DELTA_INIT_RANGE.0.ln(), DELTA_INIT_RANGE.1.ln());
        store.insert(
            self.name("proj_delta.b"),
            Tensor::from_fn(&[e], |_| T::of(inverse_softplus(rng.random_range(lo..hi).exp()))),
        )?;
        if self.skip {
            store.insert(self.name("skip_d"), Tensor::full(&[e], T::one()))?;
        }
        Ok(())
    }

    /// `(delta, A)`: per-position step sizes `[rows x E]` and the state matrix `[E x N]`.
    fn transition<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<(Var, Var)> {
        let w = g.param(store, &self.name("proj_delta.W"))?;
        let b = g.param(store, &self.name("proj_delta.b"))?;
        let pre = g.linear(x, w, Some(b))?;
        let delta = g.softplus(pre);
        let a_log = g.param(store, &self.name("a_log"))?;
        let a = g.exp(a_log);
        Ok((delta, g.neg(a)))
    }

    /// Scan over stacked `[rows x E]` input made of `seq_len`-row segments.
    pub fn build<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var, seq_len: usize) -> Result<Var> {
        let (delta, a) = self.transition(g, store, x)?;
        let wb = g.param(store, &self.name("proj_B"))?;
        let wc = g.param(store, &self.name("proj_C"))?;
        let b = g.matmul(x, wb)?;
        let c = g.matmul(x, wc)?;
        let skip = if self.skip { Some(g.param(store, &self.name("skip_d"))?) } else { None };
        g.selective_scan(ScanInputs { u: x, delta, a, b, c, skip }, seq_len)
    }

    /// Discrete transition factors `exp(delta_t a)` for every position,
    /// channel and state, as `[rows x E*N]`.
    pub fn transition_factors<T: Scalar>(&self, x: &Tensor<T>, store: &ParameterStore<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let (delta, a) = self.transition(&mut g, store, xv)?;
        let (dv, av) = (g.value(delta), g.value(a));
        let (e, n) = (self.e_inner, self.d_state);
        Ok(Tensor::from_fn(&[dv.rows(), e * n], |i| {
            let (row, j) = (i / (e * n), i % (e * n));
            (dv.at(row, j / n) * av.data()[j]).exp()
        }))
    }
}

/// Sizes of a Mamba block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub expand: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub skip: bool,
}

impl MambaConfig {
    pub fn e_inner(&self) -> usize {
        self.expand * self.d_model
    }
}

/// `in_proj -> (u, z)`, `u -> causal conv -> silu -> SSM`, gated by `silu(z)`, then `out_proj`.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlock {
    prefix: String,
    config: MambaConfig,
    ssm: SsmCore,
}

impl MambaBlock {
    pub fn new(prefix: impl Into<String>, config: MambaConfig) -> Result<Self> {
        let prefix = prefix.into();
        if config.d_model == 0 || config.expand == 0 || config.conv_kernel == 0 {
            return Err(MlsaError::config("Mamba sizes must be >= 1"));
        }
        let ssm = SsmCore::new(format!("{prefix}.ssm"), config.e_inner(), config.d_state, config.skip)?;
        Ok(MambaBlock { prefix, config, ssm })
    }

    pub fn config(&self) -> &MambaConfig {
        &self.config
    }

    pub fn ssm(&self) -> &SsmCore {
        &self.ssm
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        let (d, e, k) = (self.config.d_model, self.config.e_inner(), self.config.conv_kernel);
        store.insert(self.name("in_proj"), init::fan_in_uniform(rng, &[d, 2 * e], d))?;
        store.insert(self.name("conv.kernel"), init::fan_in_uniform(rng, &[e, k], k))?;
        store.insert(self.name("conv.bias"), Tensor::zeros(&[e]))?;
        self.ssm.init(store, rng)?;
        store.insert(self.name("out_proj"), init::fan_in_uniform(rng, &[e, d], e))
    }

    /// Output `[rows x D]` for stacked `[rows x D]` input of `seq_len`-row segments.
    pub fn build<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var, seq_len: usize) -> Result<Var> {
        let e = self.config.e_inner();
        let w_in = g.param(store, &self.name("in_proj"))?;
        let xz = g.matmul(x, w_in)?;
        let u = g.slice_cols(xz, 0, e)?;
        let z = g.slice_cols(xz, e, e)?;
        let kernel = g.param(store, &self.name("conv.kernel"))?;
        let bias = g.param(store, &self.name("conv.bias"))?;
        let conv = g.causal_conv(u, kernel, bias, seq_len)?;
        let act = g.silu(conv);
        let y = self.ssm.build(g, store, act, seq_len)?;
        let gate = g.silu(z);
        let gated = g.mul(y, gate)?;
        let w_out = g.param(store, &self.name("out_proj"))?;
        g.matmul(gated, w_out)
    }
}

/// Runs the SSM of `core` over one `[L x E]` sequence.
pub fn selective_scan<T: Scalar>(x: &Tensor<T>, store: &ParameterStore<T>, core: &SsmCore) -> Result<Tensor<T>> {
    x.check_finite("selective_scan input")?;
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = core.build(&mut g, store, xv, x.rows())?;
    finite(&g, y, "selective_scan")
}

/// Depthwise causal convolution of one `[L x E]` sequence; tap `K-1` is the
/// current position.
pub fn causal_conv1d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let (xv, kv, bv) = (g.constant(x.clone()), g.constant(kernel.clone()), g.constant(bias.clone()));
    let y = g.causal_conv(xv, kv, bv, x.rows())?;
    finite(&g, y, "causal_conv1d")
}

/// Runs `block` over one `[L x D]` sequence.
pub fn mamba_block<T: Scalar>(x: &Tensor<T>, store: &ParameterStore<T>, block: &MambaBlock) -> Result<Tensor<T>> {
    x.check_finite("mamba_block input")?;
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = block.build(&mut g, store, xv, x.rows())?;
    finite(&g, y, "mamba_block")
}

fn finite<T: Scalar>(g: &Graph<T>, v: Var, what: &str) -> Result<Tensor<T>> {
    let out = g.value(v).clone();
    out.check_finite(what)?;
    Ok(out)
}
