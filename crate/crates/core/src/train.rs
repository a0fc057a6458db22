//! Optimizer, mini-batch training with early stopping, seed averaging and
//! grid search.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{pad_truncate, Split};
use crate::error::{MlsaError, Result};
use crate::metrics::{evaluate, EvalOptions, MetricsReport, Phase, DEFAULT_K};
use crate::model::{MlsaModel, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::{Graph, Scalar, Tensor};

/// Bias-corrected Adam over every entry of a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the stored gradients, then zeroes them.
    pub fn step<T: Scalar>(&mut self, store: &mut ParameterStore<T>) {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, v, _)| vec![0.0; v.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, value, grad)) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (p, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *p = T::of(p.as_f64() - update);
            }
        }
        store.zero_grads();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Augment {
    /// One example per user: the last training item from the items before it.
    #[default]
    None,
    /// Every prefix of the training sequence predicts the item that follows it.
    Sliding,
}

impl FromStr for Augment {
    type Err = MlsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augment::None),
            "sliding" => Ok(Augment::Sliding),
            _ => Err(MlsaError::config(format!("unknown augmentation {s:?} (none, sliding)"))),
        }
    }
}

impl fmt::Display for Augment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Augment::None => "none",
            Augment::Sliding => "sliding",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation NDCG@10 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub augment: Augment,
    pub eval_batch_size: usize,
    pub mask_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 256,
            epochs: 200,
            patience: 10,
            seed: 2024,
            augment: Augment::None,
            eval_batch_size: 256,
            mask_history: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(MlsaError::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(MlsaError::config("batch sizes must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(MlsaError::config("epochs must be >= 1"));
        }
        Ok(())
    }

    pub fn eval_options(&self, max_len: usize) -> EvalOptions {
        EvalOptions { k: DEFAULT_K, max_len, batch_size: self.eval_batch_size, mask_history: self.mask_history }
    }
}

/// `(padded input, target)` training pairs.
pub fn training_examples(split: &Split, max_len: usize, augment: Augment) -> Vec<(Vec<usize>, usize)> {
    let mut out = Vec::new();
    for u in &split.users {
        let n = u.train.len();
        let first = match augment {
            Augment::None => n - 1,
            Augment::Sliding => 1.min(n - 1),
        };
        for j in first..n {
            out.push((pad_truncate(&u.train[..j], max_len), u.train[j]));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's examples.
    pub loss: f64,
    pub valid: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_params: ParameterStore<f32>,
    pub best_epoch: usize,
    pub best_valid: MetricsReport,
    pub history: Vec<EpochRecord>,
    /// Loss of the very first mini-batch, before any update.
    pub first_batch_loss: f64,
}

/// Trains `model` in place and leaves it holding the best-validation parameters.
pub fn train(model: &mut MlsaModel<f32>, split: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, split, cfg, |_, _| Ok(true))
}

/// [`train`] with a hook called after every validated epoch, while `model`
/// still holds that epoch's parameters. Returning `false` stops training.
pub fn train_with(
    model: &mut MlsaModel<f32>,
    split: &Split,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &MlsaModel<f32>) -> Result<bool>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.users.is_empty() {
        return Err(MlsaError::Data("no users to train on".into()));
    }
    let max_len = model.config().max_len;
    let examples = training_examples(split, max_len, cfg.augment);
    let eval_opts = cfg.eval_options(max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, MetricsReport, ParameterStore<f32>)> = None;
    let mut first_batch_loss = None;
    let mut stale = 0;
    model.params_mut().zero_grads();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut ids = Vec::with_capacity(batch.len() * max_len);
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                ids.extend_from_slice(&examples[i].0);
                targets.push(examples[i].1);
            }
            let mut store = std::mem::replace(model.params_mut(), ParameterStore::new(0));
            let mut g = Graph::new();
            let step = model.loss(&mut g, &store, &ids, &targets, max_len, Some(&mut rng)).and_then(|loss| {
                let value = g.value(loss).data()[0].as_f64();
                g.backward(loss)?.accumulate_into(&g, &mut store);
                Ok(value)
            });
            drop(g);
            let value = match step {
                Ok(v) if v.is_finite() => v,
                Ok(v) => {
                    *model.params_mut() = store;
                    return Err(MlsaError::NonFinite(format!("training loss {v} at epoch {epoch}")));
                }
                Err(e) => {
                    *model.params_mut() = store;
                    return Err(e);
                }
            };
            model.mask_frozen_grads(&mut store);
            adam.step(&mut store);
            *model.params_mut() = store;
            first_batch_loss.get_or_insert(value);
            total += value * batch.len() as f64;
        }
        let loss = total / examples.len() as f64;
        let valid = evaluate(model, split, Phase::Valid, &eval_opts)?;
        log::info!("epoch {epoch}: loss {loss:.5}, valid {valid}");
        let record = EpochRecord { epoch, loss, valid };
        let go_on = on_epoch(&record, model)?;
        history.push(record);
        if best.as_ref().is_none_or(|(_, b, _)| valid.ndcg > b.ndcg) {
            best = Some((epoch, valid, model.params().clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("no validation improvement for {stale} epochs, stopping");
                break;
            }
        }
        if !go_on {
            break;
        }
    }
    let (best_epoch, best_valid, best_params) = best.expect("at least one epoch ran");
    model.params_mut().load_values(&best_params)?;
    Ok(TrainOutcome {
        best_params,
        best_epoch,
        best_valid,
        history,
        first_batch_loss: first_batch_loss.unwrap_or(f64::NAN),
    })
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub test: MetricsReport,
}

/// Trains a fresh model per seed and evaluates each best checkpoint on the test phase.
pub fn run_seeds(model_cfg: &ModelConfig, split: &Split, cfg: &TrainConfig, seeds: &[u64]) -> Result<Vec<RunResult>> {
    seeds
        .iter()
        .map(|&seed| {
            let mut model = MlsaModel::new(model_cfg.clone(), seed)?;
            let outcome = train(&mut model, split, &TrainConfig { seed, ..cfg.clone() })?;
            let test = evaluate(&model, split, Phase::Test, &cfg.eval_options(model_cfg.max_len))?;
            log::info!("seed {seed}: test {test}");
            Ok(RunResult { seed, outcome, test })
        })
        .collect()
}

/// Element-wise mean of reports over the same population.
pub fn mean_report(reports: &[MetricsReport]) -> Option<MetricsReport> {
    let first = *reports.first()?;
    let n = reports.len() as f64;
    Some(MetricsReport {
        hr: reports.iter().map(|r| r.hr).sum::<f64>() / n,
        ndcg: reports.iter().map(|r| r.ndcg).sum::<f64>() / n,
        mrr: reports.iter().map(|r| r.mrr).sum::<f64>() / n,
        ..first
    })
}

pub const METRICS_CSV_HEADER: &str = "phase,epoch,hr@10,ndcg@10,mrr@10,loss,seed";

/// One row per validated epoch, plus a `test` row at the best epoch.
pub fn write_metrics_csv(mut w: impl Write, runs: &[RunResult]) -> Result<()> {
    let io = |e| MlsaError::io("<metrics csv>", e);
    writeln!(w, "{METRICS_CSV_HEADER}").map_err(io)?;
    for run in runs {
        for e in &run.outcome.history {
            writeln!(w, "valid,{},{},{},{},{},{}", e.epoch, e.valid.hr, e.valid.ndcg, e.valid.mrr, e.loss, run.seed)
                .map_err(io)?;
        }
        let best = run.outcome.best_epoch;
        let loss = run.outcome.history.iter().find(|e| e.epoch == best).map_or(f64::NAN, |e| e.loss);
        writeln!(w, "test,{best},{},{},{},{loss},{}", run.test.hr, run.test.ndcg, run.test.mrr, run.seed)
            .map_err(io)?;
    }
    Ok(())
}

/// Candidate values per searched hyperparameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub batch_size: Vec<usize>,
    pub layers: Vec<usize>,
    pub dropout: Vec<f64>,
    pub heads: Vec<usize>,
    pub interests: Vec<usize>,
}

impl Grid {
    /// The single cell made of the base configuration.
    pub fn singleton(model: &ModelConfig, train: &TrainConfig) -> Self {
        Grid {
            batch_size: vec![train.batch_size],
            layers: vec![model.layers],
            dropout: vec![model.dropout],
            heads: vec![model.heads],
            interests: vec![model.interests],
        }
    }

    pub fn cardinality(&self) -> usize {
        self.batch_size.len() * self.layers.len() * self.dropout.len() * self.heads.len() * self.interests.len()
    }

    /// Every combination, in lexicographic order of
    /// (batch_size, layers, dropout, heads, interests).
    pub fn cells(&self, model: &ModelConfig, train: &TrainConfig) -> Vec<(ModelConfig, TrainConfig)> {
        let mut out = Vec::with_capacity(self.cardinality());
        for &b in &self.batch_size {
            for &n in &self.layers {
                for &d in &self.dropout {
                    for &h in &self.heads {
                        for &p in &self.interests {
                            out.push((
                                ModelConfig { layers: n, dropout: d, heads: h, interests: p, ..model.clone() },
                                TrainConfig { batch_size: b, ..train.clone() },
                            ));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct GridRow {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub valid: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the highest validation NDCG@10 (first on ties).
    pub best: usize,
}

impl GridOutcome {
    pub fn best_row(&self) -> &GridRow {
        &self.rows[self.best]
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let io = |e| MlsaError::io("<grid csv>", e);
        writeln!(w, "batch_size,layers,dropout,heads,interests,best_epoch,hr@10,ndcg@10,mrr@10").map_err(io)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.train.batch_size,
                r.model.layers,
                r.model.dropout,
                r.model.heads,
                r.model.interests,
                r.best_epoch,
                r.valid.hr,
                r.valid.ndcg,
                r.valid.mrr
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

/// Trains every cell with early stopping and picks the best validation NDCG@10.
pub fn grid_search(split: &Split, model: &ModelConfig, train_cfg: &TrainConfig, grid: &Grid) -> Result<GridOutcome> {
    let cells = grid.cells(model, train_cfg);
    if cells.is_empty() {
        return Err(MlsaError::config("grid has no cells"));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (mc, tc) in cells {
        let mut m = MlsaModel::new(mc.clone(), tc.seed)?;
        let outcome = train(&mut m, split, &tc)?;
        log::info!("grid cell {mc:?} batch {}: {}", tc.batch_size, outcome.best_valid);
        rows.push(GridRow { model: mc, train: tc, best_epoch: outcome.best_epoch, valid: outcome.best_valid });
    }
    let best =
        (0..rows.len()).reduce(|a, b| if rows[b].valid.ndcg > rows[a].valid.ndcg { b } else { a }).expect("non-empty");
    Ok(GridOutcome { rows, best })
}

/// Scalar quadratic used to sanity check the optimizer.
pub fn quadratic_descent(theta0: f64, lr: f64, steps: usize) -> Vec<f64> {
    let mut store = ParameterStore::<f64>::new(0);
    store.insert("theta", Tensor::vector(vec![theta0]).expect("one value")).expect("fresh store");
    let mut adam = Adam::new(lr);
    let mut values = vec![theta0 * theta0];
    for _ in 0..steps {
        let th = store.get("theta").expect("inserted").data()[0];
        store.grad_mut("theta").expect("inserted").data_mut()[0] = 2.0 * th;
        adam.step(&mut store);
        let th = store.get("theta").expect("inserted").data()[0];
        values.push(th * th);
    }
    values
}
