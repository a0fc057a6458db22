//! Low-rank self-attention through learned interest prototypes, and plain
//! multi-head self-attention for comparison.
//!
//! Items are softly assigned to `P` prototypes (`Z = softmax(K theta^T)` over
//! the prototypes), keys and values are pooled per prototype (`Z^T K`,
//! `Z^T V`), and every query attends over the `P` pooled rows only, so the
//! attention matrix is `L x P` per head instead of `L x L`.
//!
//! Parameters under prefix `p`: `{p}.theta` `[P x D]` (LSA only) and
//! `{p}.w_q`, `{p}.w_k`, `{p}.w_v`, each `[D x D]`.

use rand::Rng;

use crate::error::{MlsaError, Result};
use crate::init;
use crate::params::ParameterStore;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Head layout shared by both attention kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionShape {
    prefix: String,
    d_model: usize,
    heads: usize,
}

impl AttentionShape {
    pub fn new(prefix: impl Into<String>, d_model: usize, heads: usize) -> Result<Self> {
        if d_model == 0 || heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(MlsaError::config(format!("hidden size {d_model} is not divisible into {heads} heads")));
        }
        Ok(AttentionShape { prefix: prefix.into(), d_model, heads })
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn init<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        let d = self.d_model;
        for w in ["w_q", "w_k", "w_v"] {
            store.insert(self.name(w), init::fan_in_uniform(rng, &[d, d], d))?;
        }
        Ok(())
    }

    fn project<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<[Var; 3]> {
        let mut out = [x; 3];
        for (slot, w) in out.iter_mut().zip(["w_q", "w_k", "w_v"]) {
            let wv = g.param(store, &self.name(w))?;
            *slot = g.matmul(x, wv)?;
        }
        Ok(out)
    }

    /// `softmax(q k^T / sqrt(d_head)) v` per segment; `k` and `v` have `keys` rows per segment.
    fn attend<T: Scalar>(&self, g: &mut Graph<T>, q: Var, k: Var, v: Var, batch: usize) -> Result<(Var, Var)> {
        let s = g.batched_matmul(q, k, batch, false, true)?;
        let s = g.scale(s, T::of(1.0 / (self.head_dim() as f64).sqrt()));
        let w = g.softmax(s);
        Ok((g.batched_matmul(w, v, batch, false, false)?, w))
    }
}

/// Output of a tape-level attention build.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub output: Var,
    /// Attention weights per head, `[rows x P]` for LSA and `[rows x L]` for
    /// plain attention.
    pub weights: Vec<Var>,
    /// Item-to-interest distributions, one per prototype set (LSA only).
    pub assignments: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAttention {
    shape: AttentionShape,
    interests: usize,
    per_head_theta: bool,
}

impl LowRankAttention {
    /// With `per_head_theta`, head `i` assigns items using its own slice
    /// `theta[:, i*d_head..(i+1)*d_head]` of the prototypes against its key slice.
    pub fn new(
        prefix: impl Into<String>,
        d_model: usize,
        heads: usize,
        interests: usize,
        per_head_theta: bool,
    ) -> Result<Self> {
        if interests == 0 {
            return Err(MlsaError::config("interest count must be >= 1"));
        }
        Ok(LowRankAttention { shape: AttentionShape::new(prefix, d_model, heads)?, interests, per_head_theta })
    }

    pub fn shape(&self) -> &AttentionShape {
        &self.shape
    }

    pub fn interests(&self) -> usize {
        self.interests
    }

    pub fn init<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        let d = self.shape.d_model;
        store.insert(self.shape.name("theta"), init::fan_in_uniform(rng, &[self.interests, d], d))?;
        self.shape.init(store, rng)
    }

    pub fn build<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        seq_len: usize,
    ) -> Result<AttentionVars> {
        let rows = g.value(x).rows();
        if seq_len == 0 || !rows.is_multiple_of(seq_len) {
            return Err(MlsaError::shape(format!("{rows} rows are not whole segments of {seq_len}")));
        }
        let batch = rows / seq_len;
        let [q, k, v] = self.shape.project(g, store, x)?;
        let theta = g.param(store, &self.shape.name("theta"))?;
        let dh = self.shape.head_dim();
        let mut heads = Vec::with_capacity(self.shape.heads);
        let mut weights = Vec::with_capacity(self.shape.heads);
        let mut assignments = Vec::new();

        let shared = if self.per_head_theta {
            None
        } else {
            let (z, kt, vt) = aggregate(g, k, v, theta, batch)?;
            assignments.push(z);
            Some((kt, vt))
        };
        for i in 0..self.shape.heads {
            let qi = g.slice_cols(q, i * dh, dh)?;
            let (ki, vi) = match shared {
                Some((kt, vt)) => (g.slice_cols(kt, i * dh, dh)?, g.slice_cols(vt, i * dh, dh)?),
                None => {
                    let kh = g.slice_cols(k, i * dh, dh)?;
                    let vh = g.slice_cols(v, i * dh, dh)?;
                    let th = g.slice_cols(theta, i * dh, dh)?;
                    let (z, kt, vt) = aggregate(g, kh, vh, th, batch)?;
                    assignments.push(z);
                    (kt, vt)
                }
            };
            let (o, w) = self.shape.attend(g, qi, ki, vi, batch)?;
            heads.push(o);
            weights.push(w);
        }
        let output = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
        Ok(AttentionVars { output, weights, assignments })
    }
}

/// `(Z, Z^T k, Z^T v)` per segment with `Z = softmax(k theta^T)`.
fn aggregate<T: Scalar>(g: &mut Graph<T>, k: Var, v: Var, theta: Var, batch: usize) -> Result<(Var, Var, Var)> {
    let logits = g.batched_matmul(k, theta, 1, false, true)?;
    let z = g.softmax(logits);
    let kt = g.batched_matmul(z, k, batch, true, false)?;
    let vt = g.batched_matmul(z, v, batch, true, false)?;
    Ok((z, kt, vt))
}

/// Non-causal multi-head softmax attention over all positions of a segment.
#[derive(Clone, Debug, PartialEq)]
pub struct FullAttention {
    shape: AttentionShape,
}

impl FullAttention {
    pub fn new(prefix: impl Into<String>, d_model: usize, heads: usize) -> Result<Self> {
        Ok(FullAttention { shape: AttentionShape::new(prefix, d_model, heads)? })
    }

    pub fn shape(&self) -> &AttentionShape {
        &self.shape
    }

    pub fn init<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.shape.init(store, rng)
    }

    pub fn build<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        seq_len: usize,
    ) -> Result<AttentionVars> {
        let rows = g.value(x).rows();
        if seq_len == 0 || !rows.is_multiple_of(seq_len) {
            return Err(MlsaError::shape(format!("{rows} rows are not whole segments of {seq_len}")));
        }
        let [q, k, v] = self.shape.project(g, store, x)?;
        let dh = self.shape.head_dim();
        let mut heads = Vec::new();
        let mut weights = Vec::new();
        for i in 0..self.shape.heads {
            let qi = g.slice_cols(q, i * dh, dh)?;
            let ki = g.slice_cols(k, i * dh, dh)?;
            let vi = g.slice_cols(v, i * dh, dh)?;
            let (o, w) = self.shape.attend(g, qi, ki, vi, rows / seq_len)?;
            heads.push(o);
            weights.push(w);
        }
        let output = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
        Ok(AttentionVars { output, weights, assignments: Vec::new() })
    }
}

/// `(Z, Z^T hmat)` with `Z = softmax(hmat theta^T)` taken over the prototypes.
pub fn interest_aggregate<T: Scalar>(hmat: &Tensor<T>, theta: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::inference();
    let (h, th) = (g.constant(hmat.clone()), g.constant(theta.clone()));
    let (z, ht, _) = aggregate(&mut g, h, h, th, 1)?;
    Ok((g.value(z).clone(), g.value(ht).clone()))
}

/// Low-rank attention over one `[L x D]` sequence.
pub fn lsa_attention<T: Scalar>(x: &Tensor<T>, store: &ParameterStore<T>, lsa: &LowRankAttention) -> Result<Tensor<T>> {
    Ok(lsa_attention_with_weights(x, store, lsa)?.0)
}

/// As [`lsa_attention`], also returning each head's `[L x P]` attention weights.
pub fn lsa_attention_with_weights<T: Scalar>(
    x: &Tensor<T>,
    store: &ParameterStore<T>,
    lsa: &LowRankAttention,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let vars = lsa.build(&mut g, store, xv, x.rows())?;
    let out = g.value(vars.output).clone();
    out.check_finite("lsa_attention")?;
    Ok((out, vars.weights.iter().map(|&w| g.value(w).clone()).collect()))
}

/// Plain attention over one `[L x D]` sequence.
pub fn vanilla_attention<T: Scalar>(
    x: &Tensor<T>,
    store: &ParameterStore<T>,
    attn: &FullAttention,
) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let vars = attn.build(&mut g, store, xv, x.rows())?;
    let out = g.value(vars.output).clone();
    out.check_finite("vanilla_attention")?;
    Ok(out)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use approx::assert_relative_eq;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(r: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| r.random_range(-1.0..1.0))
    }

    fn softmax_vec(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn mm(a: &[Vec<f64>], b: &Tensor<f64>) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| (0..b.cols()).map(|j| row.iter().enumerate().map(|(i, x)| x * b.at(i, j)).sum()).collect())
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Dense loops: `Z` over prototypes from the keys, pooled keys/values, per-head attention.
    fn dense_lsa(x: &Tensor<f64>, s: &ParameterStore<f64>, heads: usize, per_head: bool) -> Vec<Vec<f64>> {
        let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
        let q = mm(&rows, s.get("a.w_q").unwrap());
        let k = mm(&rows, s.get("a.w_k").unwrap());
        let v = mm(&rows, s.get("a.w_v").unwrap());
        let theta = s.get("a.theta").unwrap();
        let (l, d, p) = (x.rows(), x.cols(), theta.rows());
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; l];
        for hd in 0..heads {
            let cols = if per_head { hd * dh..(hd + 1) * dh } else { 0..d };
            let z: Vec<Vec<f64>> = k
                .iter()
                .map(|kr| {
                    softmax_vec(
                        &(0..p).map(|j| dot(&kr[cols.clone()], &theta.row(j)[cols.clone()])).collect::<Vec<_>>(),
                    )
                })
                .collect();
            let pool = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                (0..p)
                    .map(|j| (hd * dh..(hd + 1) * dh).map(|c| (0..l).map(|t| z[t][j] * m[t][c]).sum()).collect())
                    .collect()
            };
            let (kt, vt) = (pool(&k), pool(&v));
            for t in 0..l {
                let scores: Vec<f64> =
                    kt.iter().map(|kr| dot(&q[t][hd * dh..(hd + 1) * dh], kr) / (dh as f64).sqrt()).collect();
                let w = softmax_vec(&scores);
                for c in 0..dh {
                    out[t][hd * dh + c] = (0..p).map(|j| w[j] * vt[j][c]).sum();
                }
            }
        }
        out
    }

    fn lsa(d: usize, heads: usize, p: usize, per_head: bool, seed: u64) -> (LowRankAttention, ParameterStore<f64>) {
        let a = LowRankAttention::new("a", d, heads, p, per_head).unwrap();
        let mut s = ParameterStore::new(seed);
        a.init(&mut s, &mut rng(seed)).unwrap();
        (a, s)
    }

    #[test]
    fn aggregate_uniform_cases() {
        let h = Tensor::<f64>::eye(2);
        let (z, ht) = interest_aggregate(&h, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(z.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(ht.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let h = Tensor::vector(vec![2.0, -4.0, 6.0]).unwrap().reshape(&[1, 3]).unwrap();
        let (_, ht) = interest_aggregate(&h, &Tensor::zeros(&[4, 3])).unwrap();
        for j in 0..4 {
            assert_eq!(ht.row(j), &[0.5, -1.0, 1.5]);
        }
    }

    #[test]
    fn aggregate_matches_direct_formula() {
        let mut r = rng(1);
        let (h, th) = (random(&mut r, &[4, 3]), random(&mut r, &[2, 3]));
        let (z, ht) = interest_aggregate(&h, &th).unwrap();
        for t in 0..4 {
            let want = softmax_vec(&[dot(h.row(t), th.row(0)), dot(h.row(t), th.row(1))]);
            assert_relative_eq!(z.row(t)[0], want[0], max_relative = 1e-12);
            assert_relative_eq!(z.row(t)[1], want[1], max_relative = 1e-12);
        }
        for j in 0..2 {
            for c in 0..3 {
                let want: f64 = (0..4).map(|t| z.at(t, j) * h.at(t, c)).sum();
                assert_relative_eq!(ht.at(j, c), want, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn single_interest_single_head_copies_pooled_value() {
        let (a, s) = lsa(4, 1, 1, false, 2);
        let x = random(&mut rng(3), &[5, 4]);
        let (out, w) = lsa_attention_with_weights(&x, &s, &a).unwrap();
        assert!(w[0].data().iter().all(|&v| v == 1.0));
        // With one prototype Z is all ones, so the pooled value row is sum_t V_t.
        let v = crate::tensor::matmul(&x, s.get("a.w_v").unwrap()).unwrap();
        for c in 0..4 {
            let pooled: f64 = (0..5).map(|t| v.at(t, c)).sum();
            for t in 0..5 {
                assert_relative_eq!(out.at(t, c), pooled, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn identity_projections_on_one_row() {
        let (a, mut s) = lsa(3, 1, 1, false, 4);
        for w in ["a.w_q", "a.w_k", "a.w_v"] {
            s.set(w, Tensor::eye(3)).unwrap();
        }
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let out = lsa_attention(&x, &s, &a).unwrap();
        assert_relative_eq!(out.data(), x.data(), max_relative = 1e-12);
    }

    #[test]
    fn lsa_matches_dense_loops() {
        for per_head in [false, true] {
            let (a, s) = lsa(4, 2, 2, per_head, 5);
            let x = random(&mut rng(6), &[6, 4]);
            let got = lsa_attention(&x, &s, &a).unwrap();
            let want = dense_lsa(&x, &s, 2, per_head);
            for t in 0..6 {
                for c in 0..4 {
                    assert_relative_eq!(got.at(t, c), want[t][c], max_relative = 1e-10);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn attention_matrix_is_l_by_p_and_stochastic(seed in any::<u64>(), l in 1usize..12, p in 1usize..5) {
            let (a, s) = lsa(4, 2, p, false, seed);
            let x = random(&mut rng(seed ^ 1), &[l, 4]);
            let (_, ws) = lsa_attention_with_weights(&x, &s, &a).unwrap();
            prop_assert!(ws.len() == 2);
            for w in ws {
                prop_assert!(w.dims() == [l, p]);
                for t in 0..l {
                    prop_assert!((w.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn rows_permute_covariantly(seed in any::<u64>()) {
            let (a, s) = lsa(4, 2, 3, false, seed);
            let mut r = rng(seed ^ 2);
            let x = random(&mut r, &[7, 4]);
            let mut perm: Vec<usize> = (0..7).collect();
            for i in (1..7).rev() {
                perm.swap(i, r.random_range(0..=i));
            }
            let xp = Tensor::from_fn(&[7, 4], |i| x.at(perm[i / 4], i % 4));
            let (y, yp) = (lsa_attention(&x, &s, &a).unwrap(), lsa_attention(&xp, &s, &a).unwrap());
            for t in 0..7 {
                for c in 0..4 {
                    prop_assert!((yp.at(t, c) - y.at(perm[t], c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(matches!(LowRankAttention::new("a", 6, 4, 2, false), Err(MlsaError::Config(_))));
        assert!(matches!(FullAttention::new("a", 5, 2), Err(MlsaError::Config(_))));
    }

    fn full(d: usize, heads: usize, seed: u64) -> (FullAttention, ParameterStore<f64>) {
        let a = FullAttention::new("a", d, heads).unwrap();
        let mut s = ParameterStore::new(seed);
        a.init(&mut s, &mut rng(seed)).unwrap();
        (a, s)
    }

    #[test]
    fn vanilla_degenerate_cases() {
        let (a, s) = full(4, 2, 7);
        let x = random(&mut rng(8), &[1, 4]);
        let v = crate::tensor::matmul(&x, s.get("a.w_v").unwrap()).unwrap();
        assert_relative_eq!(vanilla_attention(&x, &s, &a).unwrap().data(), v.data(), max_relative = 1e-12);

        let x = Tensor::from_fn(&[5, 4], |i| [0.1, -0.7, 0.4, 2.0][i % 4]);
        let y = vanilla_attention(&x, &s, &a).unwrap();
        let v = crate::tensor::matmul(&x, s.get("a.w_v").unwrap()).unwrap();
        for t in 0..5 {
            assert_relative_eq!(y.row(t), v.row(0), max_relative = 1e-12);
        }
    }

    #[test]
    fn vanilla_matches_dense_loops() {
        let (a, s) = full(4, 1, 9);
        let x = random(&mut rng(10), &[5, 4]);
        let rows: Vec<Vec<f64>> = (0..5).map(|i| x.row(i).to_vec()).collect();
        let q = mm(&rows, s.get("a.w_q").unwrap());
        let k = mm(&rows, s.get("a.w_k").unwrap());
        let v = mm(&rows, s.get("a.w_v").unwrap());
        let got = vanilla_attention(&x, &s, &a).unwrap();
        for t in 0..5 {
            let w = softmax_vec(&k.iter().map(|kr| dot(&q[t], kr) / 2.0).collect::<Vec<_>>());
            for c in 0..4 {
                let want: f64 = (0..5).map(|j| w[j] * v[j][c]).sum();
                assert!((got.at(t, c) - want).abs() <= 1e-6 * want.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn gradients_pass_check() {
        let x = random(&mut rng(11), &[2 * 4, 4]);
        for per_head in [false, true] {
            let (a, s) = lsa(4, 2, 3, per_head, 12);
            let r = grad_check(
                |g, st| {
                    let xv = g.constant(x.clone());
                    let y = a.build(g, st, xv, 4)?.output;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                },
                &s,
                120,
                DEFAULT_EPS,
                2,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-3, "{r:?}");
        }
        let (a, s) = full(4, 2, 13);
        let r = grad_check(
            |g, st| {
                let xv = g.constant(x.clone());
                let y = a.build(g, st, xv, 4)?.output;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &s,
            60,
            DEFAULT_EPS,
            3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
