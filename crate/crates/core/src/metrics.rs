//! Full-ranking evaluation: target rank, HR/NDCG/MRR at a cutoff, and the
//! per-phase evaluation loop.

use std::fmt;
use std::str::FromStr;

use crate::data::{pad_truncate, Split};
use crate::error::{MlsaError, Result};
use crate::model::{MlsaModel, PADDING_ID};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_K: usize = 10;

/// `-log softmax(logits)[target]` through log-sum-exp, in 64-bit.
pub fn ce_loss<T: Scalar>(logits: &[T], target: usize) -> Result<f64> {
    if target == PADDING_ID || target >= logits.len() {
        return Err(MlsaError::Data(format!("target {target} is padding or outside {} logits", logits.len())));
    }
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[target].as_f64()).max(0.0))
}

/// `1 +` the number of non-padding items scored strictly above the target.
pub fn rank_of_target<T: Scalar>(scores: &[T], target: usize) -> Result<usize> {
    if target == PADDING_ID || target >= scores.len() {
        return Err(MlsaError::Data(format!("target {target} is padding or outside {} scores", scores.len())));
    }
    let t = scores[target];
    Ok(1 + scores[1..].iter().filter(|&&s| s > t).count())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankMetrics {
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

pub fn metrics_at_k(rank: usize, k: usize) -> RankMetrics {
    if rank == 0 || rank > k {
        return RankMetrics { hr: 0.0, ndcg: 0.0, mrr: 0.0 };
    }
    RankMetrics { hr: 1.0, ndcg: 1.0 / ((rank + 1) as f64).log2(), mrr: 1.0 / rank as f64 }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub k: usize,
    pub population: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "HR@{k} {:.4}  NDCG@{k} {:.4}  MRR@{k} {:.4}  ({} users)",
            self.hr,
            self.ndcg,
            self.mrr,
            self.population,
            k = self.k
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Input is the training prefix, target the validation item.
    Valid,
    /// Input is the training prefix plus the validation item, target the test item.
    Test,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Valid => "valid",
            Phase::Test => "test",
        })
    }
}

impl FromStr for Phase {
    type Err = MlsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" | "validation" => Ok(Phase::Valid),
            "test" => Ok(Phase::Test),
            _ => Err(MlsaError::config(format!("unknown phase {s:?} (valid, test)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub max_len: usize,
    pub batch_size: usize,
    /// Exclude items already in the input sequence (other than the target) from the ranking.
    pub mask_history: bool,
}

impl EvalOptions {
    pub fn new(max_len: usize) -> Self {
        EvalOptions { k: DEFAULT_K, max_len, batch_size: 256, mask_history: false }
    }
}

/// Anything that scores the whole vocabulary for a batch of users.
pub trait Scorer {
    fn vocab_size(&self) -> usize;

    /// Scores `[B x vocab]` for users `users` whose padded inputs are stacked in
    /// `inputs` (`seq_len` ids each).
    fn score(&self, users: &[usize], inputs: &[usize], seq_len: usize) -> Result<Tensor<f32>>;
}

impl Scorer for MlsaModel<f32> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn score(&self, _users: &[usize], inputs: &[usize], seq_len: usize) -> Result<Tensor<f32>> {
        self.scores(inputs, seq_len)
    }
}

/// Input sequence and target of `user` for `phase`.
pub fn phase_example(split: &Split, user: usize, phase: Phase) -> (Vec<usize>, usize) {
    let u = &split.users[user];
    match phase {
        Phase::Valid => (u.train.clone(), u.valid),
        Phase::Test => {
            let mut seq = u.train.clone();
            seq.push(u.valid);
            (seq, u.test)
        }
    }
}

/// Mean HR/NDCG/MRR over every user of `split`.
pub fn evaluate(scorer: &dyn Scorer, split: &Split, phase: Phase, opts: &EvalOptions) -> Result<MetricsReport> {
    if opts.k == 0 || opts.max_len == 0 || opts.batch_size == 0 {
        return Err(MlsaError::config("k, max_len and batch_size must be >= 1"));
    }
    let n = split.users.len();
    let (mut hr, mut ndcg, mut mrr) = (0.0, 0.0, 0.0);
    let users: Vec<usize> = (0..n).collect();
    for chunk in users.chunks(opts.batch_size) {
        let mut inputs = Vec::with_capacity(chunk.len() * opts.max_len);
        let mut targets = Vec::with_capacity(chunk.len());
        for &u in chunk {
            let (seq, target) = phase_example(split, u, phase);
            inputs.extend(pad_truncate(&seq, opts.max_len));
            targets.push((seq, target));
        }
        let mut scores = scorer.score(chunk, &inputs, opts.max_len)?;
        if scores.dims() != [chunk.len(), scorer.vocab_size()] {
            return Err(MlsaError::shape(format!("scorer returned {:?} for {} users", scores.dims(), chunk.len())));
        }
        for (row, (seq, target)) in targets.iter().enumerate() {
            let s = scores.row_mut(row);
            if opts.mask_history {
                for &i in seq.iter().filter(|&&i| i != *target) {
                    s[i] = f32::NEG_INFINITY;
                }
            }
            let m = metrics_at_k(rank_of_target(s, *target)?, opts.k);
            hr += m.hr;
            ndcg += m.ndcg;
            mrr += m.mrr;
        }
    }
    let denom = n.max(1) as f64;
    Ok(MetricsReport { hr: hr / denom, ndcg: ndcg / denom, mrr: mrr / denom, k: opts.k, population: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UserSplit;
    use approx::assert_relative_eq;
    use proptest::prelude::{any, prop, prop_assert, proptest};

    #[test]
    fn ce_examples() {
        assert_relative_eq!(ce_loss(&[0.0f32; 100], 7).unwrap(), 100f64.ln(), max_relative = 1e-12);
        let mut l = vec![0.0f64; 10];
        l[3] = 1000.0;
        assert!(ce_loss(&l, 3).unwrap() < 1e-6);
        let logits = [0.3f64, -1.2, 2.5, 0.0, 0.7];
        let naive = -(logits[2].exp() / logits.iter().map(|v: &f64| v.exp()).sum::<f64>()).ln();
        assert_relative_eq!(ce_loss(&logits, 2).unwrap(), naive, max_relative = 1e-12);
        assert!(ce_loss(&logits, 0).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_target(&[9.0, 0.1, 0.8, 0.3], 2).unwrap(), 1);
        assert_eq!(rank_of_target(&[9.0, 0.1, 0.8, 0.3], 1).unwrap(), 3);
        assert_eq!(rank_of_target(&[0.0, 0.3, 0.9, 0.5], 3).unwrap(), 2);
        assert_eq!(rank_of_target(&[0.0, 0.5, 0.5, 0.5], 3).unwrap(), 1);
        assert!(rank_of_target(&[0.0, 0.5], 0).is_err());
    }

    #[test]
    fn metric_closed_forms() {
        assert_eq!(metrics_at_k(1, 10), RankMetrics { hr: 1.0, ndcg: 1.0, mrr: 1.0 });
        let m = metrics_at_k(3, 10);
        assert_eq!((m.hr, m.ndcg), (1.0, 0.5));
        assert_relative_eq!(m.mrr, 1.0 / 3.0);
        assert_eq!(metrics_at_k(11, 10), RankMetrics { hr: 0.0, ndcg: 0.0, mrr: 0.0 });
        assert_eq!(metrics_at_k(10, 10).hr, 1.0);
    }

    #[test]
    fn per_user_ordering() {
        for rank in 1..=1000 {
            let m = metrics_at_k(rank, 10);
            assert!(m.mrr <= m.ndcg && m.ndcg <= m.hr, "rank {rank}");
        }
    }

    struct Oracle {
        vocab: usize,
        transform: fn(f32) -> f32,
        raw: Vec<Vec<f32>>,
    }

    impl Scorer for Oracle {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn score(&self, users: &[usize], _inputs: &[usize], _seq_len: usize) -> Result<Tensor<f32>> {
            Ok(Tensor::from_fn(&[users.len(), self.vocab], |i| {
                (self.transform)(self.raw[users[i / self.vocab]][i % self.vocab])
            }))
        }
    }

    fn split_of(n: usize, vocab: usize) -> Split {
        Split {
            users: (0..n)
                .map(|u| UserSplit {
                    train: vec![1 + u % (vocab - 1)],
                    valid: 1 + (u + 1) % (vocab - 1),
                    test: 1 + (u + 2) % (vocab - 1),
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_scorer_gets_ones() {
        let split = split_of(30, 12);
        let raw = split.users.iter().map(|u| (0..12).map(|i| if i == u.test { 5.0 } else { 0.0 }).collect()).collect();
        let oracle = Oracle { vocab: 12, transform: |x| x, raw };
        let r = evaluate(&oracle, &split, Phase::Test, &EvalOptions { batch_size: 7, ..EvalOptions::new(4) }).unwrap();
        assert_eq!((r.hr, r.ndcg, r.mrr, r.population), (1.0, 1.0, 1.0, 30));
    }

    proptest! {
        #[test]
        fn ce_loss_is_non_negative(logits in prop::collection::vec(-50.0f64..50.0, 2..30), pick in any::<prop::sample::Index>()) {
            let target = 1 + pick.index(logits.len() - 1);
            prop_assert!(ce_loss(&logits, target).unwrap() >= 0.0);
        }

        #[test]
        fn metrics_invariant_under_monotone_transform(seed_scores in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 40), 25)) {
            let split = split_of(25, 40);
            let opts = EvalOptions::new(5);
            let a = Oracle { vocab: 40, transform: |x| x, raw: seed_scores.clone() };
            let b = Oracle { vocab: 40, transform: f32::exp, raw: seed_scores };
            let (ra, rb) = (evaluate(&a, &split, Phase::Valid, &opts).unwrap(), evaluate(&b, &split, Phase::Valid, &opts).unwrap());
            prop_assert!(ra == rb);
            prop_assert!(ra.mrr <= ra.ndcg && ra.ndcg <= ra.hr);
        }
    }

    #[test]
    fn history_masking_lifts_target() {
        let split = Split { users: vec![UserSplit { train: vec![1, 2], valid: 3, test: 4 }] };
        let raw = vec![vec![0.0, 9.0, 8.0, 7.0, 1.0]];
        let oracle = Oracle { vocab: 5, transform: |x| x, raw };
        let plain = evaluate(&oracle, &split, Phase::Test, &EvalOptions { k: 1, ..EvalOptions::new(3) }).unwrap();
        assert_eq!(plain.hr, 0.0);
        let masked =
            evaluate(&oracle, &split, Phase::Test, &EvalOptions { k: 1, mask_history: true, ..EvalOptions::new(3) })
                .unwrap();
        assert_eq!(masked.hr, 1.0);
    }

    #[test]
    fn phase_inputs() {
        let split = Split { users: vec![UserSplit { train: vec![5, 6], valid: 7, test: 8 }] };
        assert_eq!(phase_example(&split, 0, Phase::Valid), (vec![5, 6], 7));
        assert_eq!(phase_example(&split, 0, Phase::Test), (vec![5, 6, 7], 8));
    }
}
