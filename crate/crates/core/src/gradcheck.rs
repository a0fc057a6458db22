//! Finite-difference validation of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MlsaError, Result};
use crate::params::ParameterStore;
use crate::tensor::{Graph, Var};

pub const DEFAULT_EPS: f64 = 1e-4;

/// Denominator floor for the relative error, so that parameters with
/// near-zero gradients are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst sample.
    pub worst: Option<(String, usize)>,
    pub samples: usize,
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences `(f(p + eps) - f(p - eps)) / (2 eps)` on `n_samples` randomly
/// chosen scalar parameters (tensor chosen uniformly, then an element).
///
/// `f` must be deterministic; it is evaluated twice up front and a bitwise
/// mismatch makes the check invalid.
pub fn grad_check<F>(
    f: F,
    params: &ParameterStore<f64>,
    n_samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    if params.is_empty() {
        return Err(MlsaError::GradCheck("no parameters".into()));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(MlsaError::GradCheck("eps must be positive".into()));
    }
    let eval = |store: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, store)?;
        scalar(&g, out)
    };

    let mut analytic = params.clone();
    analytic.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, &analytic)?;
    let base = scalar(&g, out)?;
    g.backward(out)?.accumulate_into(&g, &mut analytic);

    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(MlsaError::GradCheck(format!(
            "objective is not deterministic ({base} vs {again}); fix seeds and disable dropout"
        )));
    }

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, samples: n_samples };
    let mut probe = params.clone();
    for _ in 0..n_samples {
        let name = &names[rng.random_range(0..names.len())];
        let len = params.get(name).map_or(0, |t| t.len());
        let i = rng.random_range(0..len);
        let orig = params.get(name).expect("sampled name").data()[i];

        probe.get_mut(name).expect("sampled name").data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.get_mut(name).expect("sampled name").data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.get_mut(name).expect("sampled name").data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let exact = analytic.grad(name).expect("sampled name").data()[i];
        let rel = relative_error(exact, numeric);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((name.clone(), i));
        }
    }
    Ok(report)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(MlsaError::GradCheck(format!("objective must be scalar, got {:?}", t.dims())));
    }
    let x = t.data()[0];
    if !x.is_finite() {
        return Err(MlsaError::NonFinite("grad_check objective".into()));
    }
    Ok(x)
}
