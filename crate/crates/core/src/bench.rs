//! Forward-pass scaling harness: wall-clock per component across sequence
//! lengths and a log-log least-squares slope per component.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MlsaError, Result};
use crate::lsa::{lsa_attention, vanilla_attention, FullAttention, LowRankAttention};
use crate::model::{MlsaModel, ModelConfig};
use crate::params::ParameterStore;
use crate::plot::{Chart, Series};
use crate::ssm::{mamba_block, MambaBlock, MambaConfig};
use crate::tensor::Tensor;

pub const WARMUP: usize = 3;
pub const MIN_REPS: usize = 5;
pub const DEFAULT_LENGTHS: [usize; 5] = [256, 512, 1024, 2048, 4096];
/// A timed sample must last at least this many timer ticks.
const TICKS_PER_SAMPLE: u32 = 10;
const MAX_INNER: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    MambaBlock,
    Lsa,
    VanillaAttention,
    FullModel,
}

impl Component {
    pub const ALL: [Component; 4] =
        [Component::MambaBlock, Component::Lsa, Component::VanillaAttention, Component::FullModel];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::MambaBlock => "mamba_block",
            Component::Lsa => "lsa",
            Component::VanillaAttention => "vanilla_attention",
            Component::FullModel => "full_model",
        })
    }
}

impl FromStr for Component {
    type Err = MlsaError;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| MlsaError::Bench(format!("unknown component {s:?}")))
    }
}

/// Fixed widths shared by every sequence length.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchShape {
    pub d_model: usize,
    pub d_state: usize,
    pub interests: usize,
    pub heads: usize,
    pub vocab_size: usize,
}

impl Default for BenchShape {
    fn default() -> Self {
        BenchShape { d_model: 64, d_state: 32, interests: 8, heads: 2, vocab_size: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub component: Component,
    pub len: usize,
    /// Median of group means, in milliseconds per forward.
    pub mean_ms: f64,
    pub std_ms: f64,
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<(Component, f64)>,
}

impl BenchResult {
    pub fn slope(&self, c: Component) -> Option<f64> {
        self.slopes.iter().find(|(k, _)| *k == c).map(|&(_, s)| s)
    }

    pub fn rows_for(&self, c: Component) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.component == c)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let io = |e| MlsaError::io("<bench csv>", e);
        writeln!(w, "component,L,mean_ms,std_ms,reps,fitted_slope").map_err(io)?;
        for r in &self.rows {
            let slope = self.slope(r.component).unwrap_or(f64::NAN);
            writeln!(w, "{},{},{},{},{},{}", r.component, r.len, r.mean_ms, r.std_ms, r.reps, slope).map_err(io)?;
        }
        Ok(())
    }

    /// Log-log chart of mean time against length, one line per component.
    pub fn chart(&self) -> Chart {
        Chart {
            title: "Forward time vs sequence length".into(),
            x_label: "L".into(),
            y_label: "ms per forward".into(),
            log_x: true,
            log_y: true,
            series: self
                .slopes
                .iter()
                .map(|&(c, slope)| Series {
                    name: format!("{c} ({slope:.2})"),
                    points: self.rows_for(c).map(|r| (r.len as f64, r.mean_ms)).collect(),
                })
                .collect(),
        }
    }

    /// Parses what [`BenchResult::write_csv`] emits; slopes are taken as written.
    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let bad = |line: usize, msg: String| MlsaError::Parse { path: "<bench csv>".into(), line, message: msg };
        let mut rows = Vec::new();
        let mut slopes: Vec<(Component, f64)> = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| MlsaError::io("<bench csv>", e))?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 1, format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, e.to_string()));
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(i + 1, e.to_string()));
            let component: Component = f[0].parse().map_err(|_| bad(i + 1, format!("component {:?}", f[0])))?;
            rows.push(BenchRow {
                component,
                len: int(f[1])?,
                mean_ms: num(f[2])?,
                std_ms: num(f[3])?,
                reps: int(f[4])?,
            });
            if !slopes.iter().any(|(c, _)| *c == component) {
                slopes.push((component, num(f[5])?));
            }
        }
        Ok(BenchResult { rows, slopes })
    }
}

/// Ordinary least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(MlsaError::Bench("log-log fit needs two or more positive points".into()));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(MlsaError::Bench("log-log fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Median of the means of `groups` consecutive chunks of `samples`.
pub fn median_of_means(samples: &[f64], groups: usize) -> f64 {
    let groups = groups.clamp(1, samples.len().max(1));
    let size = samples.len().div_ceil(groups);
    let mut means: Vec<f64> = samples.chunks(size).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    means.sort_by(f64::total_cmp);
    let m = means.len();
    if m % 2 == 1 {
        means[m / 2]
    } else {
        0.5 * (means[m / 2 - 1] + means[m / 2])
    }
}

fn sample_std(samples: &[f64]) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    (samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Smallest observable nonzero step of the monotonic clock.
pub fn timer_tick() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Times `f` after [`WARMUP`] untimed calls. Each sample repeats `f` enough
/// times to span at least ten timer ticks; returns per-call milliseconds.
pub fn time_forward(reps: usize, tick: Duration, mut f: impl FnMut() -> Result<()>) -> Result<(Vec<f64>, usize)> {
    if reps < MIN_REPS {
        return Err(MlsaError::Bench(format!("reps must be >= {MIN_REPS}, got {reps}")));
    }
    let floor = tick * TICKS_PER_SAMPLE;
    for _ in 0..WARMUP {
        f()?;
    }
    let mut inner = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        if t.elapsed() >= floor {
            break;
        }
        if inner >= MAX_INNER {
            return Err(MlsaError::Bench(format!("{inner} calls still run under ten timer ticks ({tick:?})")));
        }
        inner *= 2;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        let dt = t.elapsed();
        if dt < floor {
            return Err(MlsaError::Bench(format!("sample of {dt:?} is under ten timer ticks ({tick:?})")));
        }
        samples.push(dt.as_secs_f64() * 1e3 / inner as f64);
    }
    Ok((samples, inner))
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(&[rows, cols], data).expect("dims match data")
}

/// Forward-only timing of each component at each length on one random sequence.
pub fn bench_scaling(
    components: &[Component],
    lengths: &[usize],
    reps: usize,
    seed: u64,
    shape: &BenchShape,
) -> Result<BenchResult> {
    if lengths.len() < 4 || lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(MlsaError::Bench("lengths must be >= 4 positive, strictly increasing values".into()));
    }
    if components.is_empty() {
        return Err(MlsaError::Bench("no components selected".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = shape.d_model;
    let mut store = ParameterStore::<f32>::new(seed);
    let block = MambaBlock::new(
        "bench.mamba",
        MambaConfig { d_model: d, expand: 2, d_state: shape.d_state, conv_kernel: 4, skip: true },
    )?;
    block.init(&mut store, &mut rng)?;
    let lsa = LowRankAttention::new("bench.lsa", d, shape.heads, shape.interests, false)?;
    lsa.init(&mut store, &mut rng)?;
    let full = FullAttention::new("bench.attn", d, shape.heads)?;
    full.init(&mut store, &mut rng)?;
    let max_len = *lengths.last().expect("checked non-empty");
    let model = MlsaModel::new(
        ModelConfig {
            vocab_size: shape.vocab_size,
            max_len,
            d_model: d,
            d_state: shape.d_state,
            interests: shape.interests,
            heads: shape.heads,
            ..ModelConfig::default()
        },
        seed,
    )?;
    let tick = timer_tick();

    let mut rows = Vec::new();
    for &len in lengths {
        let x = random_matrix(&mut rng, len, d);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(1..shape.vocab_size)).collect();
        for &c in components {
            let (samples, inner) = match c {
                Component::MambaBlock => time_forward(reps, tick, || mamba_block(&x, &store, &block).map(drop))?,
                Component::Lsa => time_forward(reps, tick, || lsa_attention(&x, &store, &lsa).map(drop))?,
                Component::VanillaAttention => {
                    time_forward(reps, tick, || vanilla_attention(&x, &store, &full).map(drop))?
                }
                Component::FullModel => time_forward(reps, tick, || model.scores(&ids, len).map(drop))?,
            };
            let row = BenchRow {
                component: c,
                len,
                mean_ms: median_of_means(&samples, MIN_REPS),
                std_ms: sample_std(&samples),
                reps: samples.len() * inner,
            };
            log::info!("{c} L={len}: {:.3} ms (sd {:.3}, {} calls)", row.mean_ms, row.std_ms, row.reps);
            rows.push(row);
        }
    }
    let slopes = fit_slopes(&rows)?;
    Ok(BenchResult { rows, slopes })
}

/// Per-component slope, in order of first appearance.
pub fn fit_slopes(rows: &[BenchRow]) -> Result<Vec<(Component, f64)>> {
    let mut order: Vec<Component> = Vec::new();
    for r in rows {
        if !order.contains(&r.component) {
            order.push(r.component);
        }
    }
    order
        .into_iter()
        .map(|c| {
            let pts: Vec<(f64, f64)> =
                rows.iter().filter(|r| r.component == c).map(|r| (r.len as f64, r.mean_ms)).collect();
            Ok((c, loglog_slope(&pts)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    #[test]
    fn slope_of_power_laws() {
        for k in [0.5, 1.0, 2.0] {
            let pts: Vec<(f64, f64)> = [3.0, 7.0, 20.0, 55.0].iter().map(|&x: &f64| (x, 4.0 * x.powf(k))).collect();
            assert!((loglog_slope(&pts).unwrap() - k).abs() < 1e-12);
        }
        assert!(loglog_slope(&[(1.0, 1.0)]).is_err());
        assert!(loglog_slope(&[(1.0, 1.0), (2.0, 0.0)]).is_err());
    }

    #[test]
    fn median_of_means_examples() {
        assert_eq!(median_of_means(&[1.0, 2.0, 3.0, 4.0, 100.0], 5), 3.0);
        assert_eq!(median_of_means(&[1.0, 3.0, 5.0, 7.0], 2), 4.0);
        assert_eq!(median_of_means(&[2.0; 10], 5), 2.0);
    }

    #[test]
    fn timing_contracts() {
        let tick = timer_tick();
        assert!(tick > Duration::ZERO);
        assert!(time_forward(4, tick, || Ok(())).is_err());
        let mut calls = 0u64;
        let (s, inner) = time_forward(5, tick, || {
            calls = std::hint::black_box(calls + 1);
            Ok(())
        })
        .unwrap();
        assert_eq!(s.len(), 5);
        assert!(inner > 1);
        assert!(bench_scaling(&[Component::Lsa], &[8, 16, 32], 5, 0, &BenchShape::default()).is_err());
        assert!(bench_scaling(&[Component::Lsa], &[8, 16, 16, 32], 5, 0, &BenchShape::default()).is_err());
    }

    #[test]
    fn small_bench_round_trips_through_csv() {
        let shape = BenchShape { d_model: 8, d_state: 4, interests: 2, heads: 2, vocab_size: 30 };
        let res = bench_scaling(&Component::ALL, &[4, 8, 16, 32], 5, 1, &shape).unwrap();
        assert_eq!(res.rows.len(), 16);
        assert!(res.rows.iter().all(|r| r.reps >= MIN_REPS && r.mean_ms > 0.0));
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let back = BenchResult::read_csv(&buf[..]).unwrap();
        assert_eq!(back, res);
        let refit = fit_slopes(&back.rows).unwrap();
        for ((c, a), (k, b)) in refit.iter().zip(&res.slopes) {
            assert_eq!(c, k);
            assert!((a - b).abs() <= 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn slope_is_scale_invariant(k in 0.1f64..3.0, c in 0.01f64..100.0, s in 0.1f64..10.0) {
            let pts: Vec<(f64, f64)> = [2.0f64, 5.0, 9.0, 30.0].iter().map(|&x| (x, c * x.powf(k))).collect();
            let scaled: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, s * y)).collect();
            let a = loglog_slope(&pts).unwrap();
            prop_assert!((a - k).abs() < 1e-9);
            prop_assert!((a - loglog_slope(&scaled).unwrap()).abs() < 1e-9);
        }
    }
}
