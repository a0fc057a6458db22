//! `mlsa4rec` command line: subcommand dispatch over a [`RunConfig`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use clap::builder::PossibleValuesParser;
use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{Arg, Command};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{bench_scaling, BenchShape};
use crate::config::{load_model, parse_bool, save_model, RunConfig, KEYS};
use crate::data::{prepare, resolve_data_path, synthetic_successor, Dataset, Split};
use crate::error::{MlsaError, Result};
use crate::gradcheck::grad_check;
use crate::metrics::{evaluate, MetricsReport, Phase};
use crate::model::{MlsaModel, ModelConfig, Variant};
use crate::plot::{Chart, Series};
use crate::train::{grid_search, mean_report, run_seeds, write_metrics_csv, Grid, RunResult, TrainConfig};

const COMMANDS: [(&str, &str); 8] = [
    ("prep", "parse, filter and split a dataset; print its statistics"),
    ("train", "train (one run per seed) and report test metrics"),
    ("eval", "evaluate a saved model"),
    ("gridsearch", "train every grid cell and pick the best validation NDCG@10"),
    ("bench", "time component forwards across sequence lengths"),
    ("gradcheck", "finite-difference check of the model loss gradient"),
    ("ablate", "train variants default, v1..v4 and compare them"),
    ("keys", "list every configuration key with its default"),
];

const BOOL_VALUES: [&str; 8] = ["true", "false", "1", "0", "yes", "no", "on", "off"];

/// Every subcommand accepts `--config FILE` plus one option per configuration key.
pub fn command() -> Command {
    let key_args: Vec<Arg> = KEYS
        .iter()
        .map(|k| {
            let arg = Arg::new(k.name).long(k.name).help(k.doc).value_name("VALUE");
            if parse_bool(k.default).is_some() {
                arg.num_args(0..=1)
                    .default_missing_value("true")
                    .value_parser(PossibleValuesParser::new(BOOL_VALUES))
                    .hide_possible_values(true)
            } else {
                arg.num_args(1).allow_hyphen_values(true)
            }
        })
        .collect();
    let config = Arg::new("config").long("config").value_name("FILE").help("key = value file applied before overrides");
    Command::new("mlsa4rec")
        .about("Sequential recommendation with Mamba and low-rank self-attention")
        .after_help("Dashes and underscores in option names are interchangeable (--mask-history).")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(
            COMMANDS
                .iter()
                .map(|(name, about)| Command::new(*name).about(*about).arg(config.clone()).args(key_args.clone())),
        )
}

/// `--mask-history` and `--mask_history` name the same key.
fn normalize(arg: &str) -> String {
    match arg.strip_prefix("--") {
        Some(opt) => {
            let (name, rest) = opt.split_once('=').map_or((opt, None), |(n, v)| (n, Some(v)));
            let name = name.replace('-', "_");
            rest.map_or(format!("--{name}"), |v| format!("--{name}={v}"))
        }
        None => arg.to_string(),
    }
}

/// Runs the command line and returns the process exit code.
pub fn cli_main<S: AsRef<str>>(argv: &[S]) -> i32 {
    let mut out = std::io::stdout().lock();
    match run(argv, &mut out) {
        Ok(code) => code,
        Err(MlsaError::Usage(msg)) => {
            eprintln!("{msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum Parsed {
    Run(String, RunConfig),
    /// Help or version text requested explicitly.
    Info(String),
}

fn parse(argv: &[impl AsRef<str>]) -> Result<Parsed> {
    let args =
        argv.iter().enumerate().map(|(i, a)| if i == 0 { a.as_ref().to_string() } else { normalize(a.as_ref()) });
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            return Ok(Parsed::Info(e.render().to_string()));
        }
        Err(e) => return Err(MlsaError::Usage(e.render().to_string().trim_end().to_string())),
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let mut rc = RunConfig::default();
    if let Some(path) = sub.get_one::<String>("config") {
        rc.apply_file(Path::new(path))?;
    }
    for k in KEYS {
        if sub.value_source(k.name) == Some(ValueSource::CommandLine) {
            let v = sub.get_one::<String>(k.name).expect("options take one value");
            rc.set(k.name, v)?;
        }
    }
    Ok(Parsed::Run(name.to_string(), rc))
}

/// Parsed invocation (`argv[0]` is the program name): the subcommand and
/// the resulting configuration.
pub fn parse_args(argv: &[impl AsRef<str>]) -> Result<(String, RunConfig)> {
    match parse(argv)? {
        Parsed::Run(c, rc) => Ok((c, rc)),
        Parsed::Info(text) => Err(MlsaError::Usage(text)),
    }
}

/// Grid searched by `ablate --full` when no grid keys are set.
const FULL_GRID: [(&str, &str); 5] = [
    ("grid_batch_size", "256,512"),
    ("grid_layers", "1,2"),
    ("grid_dropout", "0.2,0.4"),
    ("grid_heads", "1,2"),
    ("grid_interests", "4,8,16"),
];

fn run(argv: &[impl AsRef<str>], out: &mut dyn Write) -> Result<i32> {
    let (command, rc) = match parse(argv)? {
        Parsed::Run(c, rc) => (c, rc),
        Parsed::Info(text) => {
            write!(out, "{text}").map_err(stdout_err)?;
            return Ok(0);
        }
    };
    match command.as_str() {
        "prep" => prep(&rc, out),
        "train" => train_cmd(&rc, out),
        "eval" => eval_cmd(&rc, out),
        "gridsearch" => grid_cmd(&rc, out),
        "bench" => bench_cmd(&rc, out),
        "gradcheck" => gradcheck_cmd(&rc, out),
        "ablate" => ablate_cmd(&rc, out),
        "keys" => {
            for k in KEYS {
                writeln!(out, "{:<18} {:<46} {}", k.name, format!("{:?}", k.default), k.doc).map_err(stdout_err)?;
            }
            Ok(0)
        }
        _ => unreachable!("clap only accepts known subcommands"),
    }
}

fn stdout_err(e: std::io::Error) -> MlsaError {
    MlsaError::io("<stdout>", e)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| MlsaError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| MlsaError::io(path, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| MlsaError::io(path, e))
}

/// Cached dataset when one exists, otherwise synthetic or parsed raw data.
pub fn load_data(rc: &RunConfig) -> Result<(Dataset, Split)> {
    if let Some(cache) = rc.path("cache").filter(|p| p.exists()) {
        log::info!("reading prepared dataset {}", cache.display());
        let ds = Dataset::load(&cache)?;
        let split = ds.split()?;
        return Ok((ds, split));
    }
    if rc.get("dataset") == "synthetic" {
        let ds = synthetic_successor(
            rc.parsed("synthetic_items")?,
            rc.parsed("synthetic_users")?,
            rc.parsed("synthetic_len")?,
            rc.parsed("data_seed")?,
        )?;
        let split = ds.split()?;
        return Ok((ds, split));
    }
    let path = rc.path("path").ok_or_else(|| MlsaError::Usage("--path is required for raw datasets".into()))?;
    prepare(rc.dataset_kind()?, &resolve_data_path(&path), rc.parsed("k_core")?, rc.filter_mode()?)
}

fn prep(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let t = Instant::now();
    let (ds, _) = load_data(rc)?;
    if let Some(cache) = rc.path("cache") {
        ds.save(&cache)?;
        log::info!("wrote {}", cache.display());
    }
    writeln!(out, "{}", ds.stats()).map_err(stdout_err)?;
    log::info!("prep took {:?}", t.elapsed());
    Ok(0)
}

fn report_runs(out: &mut dyn Write, runs: &[RunResult]) -> Result<()> {
    for r in runs {
        writeln!(
            out,
            "seed {}: best epoch {}, valid {}, test {}",
            r.seed, r.outcome.best_epoch, r.outcome.best_valid, r.test
        )
        .map_err(stdout_err)?;
    }
    if runs.len() > 1 {
        let mean = mean_report(&runs.iter().map(|r| r.test).collect::<Vec<_>>()).expect("non-empty");
        writeln!(out, "mean over {} seeds: test {mean}", runs.len()).map_err(stdout_err)?;
    }
    Ok(())
}

fn train_cmd(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let (ds, split) = load_data(rc)?;
    let mc = rc.model_config(Some(ds.vocab_size()))?;
    let tc = rc.train_config()?;
    let runs = run_seeds(&mc, &split, &tc, &rc.seed_list()?)?;
    report_runs(out, &runs)?;
    if let Some(p) = rc.path("metrics_csv") {
        write_file(&p, |w| write_metrics_csv(w, &runs))?;
    }
    if let Some(p) = rc.path("checkpoint") {
        let best = MlsaModel::from_params(mc, runs[0].outcome.best_params.clone())?;
        save_model(&best, &p)?;
        log::info!("saved seed {} model to {}", runs[0].seed, p.display());
    }
    Ok(0)
}

fn eval_cmd(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let path = rc.path("model").ok_or_else(|| MlsaError::Usage("--model is required".into()))?;
    let model = load_model(&path)?;
    let (ds, split) = load_data(rc)?;
    if ds.vocab_size() != model.config().vocab_size {
        return Err(MlsaError::config(format!(
            "model vocabulary {} does not match dataset vocabulary {}",
            model.config().vocab_size,
            ds.vocab_size()
        )));
    }
    let phase: Phase = rc.parsed("phase")?;
    let tc = rc.train_config()?;
    let report = evaluate(&model, &split, phase, &tc.eval_options(model.config().max_len))?;
    writeln!(out, "{phase} {report}").map_err(stdout_err)?;
    Ok(0)
}

fn grid_cmd(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let (ds, split) = load_data(rc)?;
    let mc = rc.model_config(Some(ds.vocab_size()))?;
    let tc = rc.train_config()?;
    let grid = rc.grid(&mc, &tc)?;
    let res = grid_search(&split, &mc, &tc, &grid)?;
    if let Some(p) = rc.path("grid_csv") {
        write_file(&p, |w| res.write_csv(w))?;
    } else {
        res.write_csv(&mut *out)?;
    }
    let b = res.best_row();
    writeln!(
        out,
        "best: batch_size={} layers={} dropout={} heads={} interests={} valid {}",
        b.train.batch_size, b.model.layers, b.model.dropout, b.model.heads, b.model.interests, b.valid
    )
    .map_err(stdout_err)?;
    Ok(0)
}

fn bench_cmd(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let shape = BenchShape {
        d_model: rc.parsed("d_model")?,
        d_state: rc.parsed("d_state")?,
        interests: rc.parsed("interests")?,
        heads: rc.parsed("heads")?,
        vocab_size: match rc.parsed::<usize>("vocab_size")? {
            0 => BenchShape::default().vocab_size,
            v => v,
        },
    };
    let res = bench_scaling(&rc.components()?, &rc.list("lengths")?, rc.parsed("reps")?, rc.parsed("seed")?, &shape)?;
    if let Some(p) = rc.path("bench_csv") {
        write_file(&p, |w| res.write_csv(w))?;
    } else {
        res.write_csv(&mut *out)?;
    }
    for (c, s) in &res.slopes {
        writeln!(out, "slope {c}: {s:.4}").map_err(stdout_err)?;
    }
    if let Some(p) = rc.path("plot") {
        std::fs::write(&p, res.chart().to_svg()).map_err(|e| MlsaError::io(p, e))?;
    }
    Ok(0)
}

/// Model used by `gradcheck --toy`.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        max_len: 8,
        d_model: 8,
        d_state: 4,
        interests: 2,
        heads: 2,
        layers: 1,
        ..ModelConfig::default()
    }
}

fn gradcheck_cmd(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let cfg = if rc.flag("toy")? { toy_config() } else { rc.model_config(Some(20))? };
    let seed: u64 = rc.parsed("seed")?;
    let model = MlsaModel::<f64>::with_seed(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<usize> = (0..2 * cfg.max_len).map(|_| rng.random_range(1..cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..2).map(|_| rng.random_range(1..cfg.vocab_size)).collect();
    let report = grad_check(
        |g, s| model.loss(g, s, &ids, &targets, cfg.max_len, None),
        model.params(),
        rc.parsed("samples")?,
        rc.parsed("eps")?,
        seed,
    )?;
    let pass = report.max_rel_error < 1e-3;
    let worst = report.worst.as_ref().map_or(String::new(), |(n, i)| format!(" (worst {n}[{i}])"));
    writeln!(
        out,
        "max relative error {:.3e} over {} samples{worst}: {}",
        report.max_rel_error,
        report.samples,
        if pass { "PASS" } else { "FAIL" }
    )
    .map_err(stdout_err)?;
    Ok(if pass { 0 } else { 1 })
}

struct AblationRow {
    variant: Variant,
    valid: MetricsReport,
    test: MetricsReport,
    seeds: usize,
}

fn ablate_cmd(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let mut rc = rc.clone();
    let full = rc.flag("full")?;
    if full {
        if FULL_GRID.iter().all(|(k, _)| rc.is_default(k)) {
            for (k, v) in FULL_GRID {
                rc.set(k, v)?;
            }
        }
        if rc.is_default("seeds") {
            rc.set("seeds", "4")?;
        }
    }
    let (ds, split) = load_data(&rc)?;
    let base = rc.model_config(Some(ds.vocab_size()))?;
    let tc = rc.train_config()?;
    let seeds = rc.seed_list()?;
    let mut all_runs = Vec::new();
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut mc = ModelConfig { variant, ..base.clone() };
        let mut cell_tc = tc.clone();
        if full {
            let grid: Grid = rc.grid(&mc, &tc)?;
            let g = grid_search(&split, &mc, &tc, &grid)?;
            mc = g.best_row().model.clone();
            cell_tc = TrainConfig { batch_size: g.best_row().train.batch_size, ..tc.clone() };
        }
        let runs = run_seeds(&mc, &split, &cell_tc, &seeds)?;
        let valid = mean_report(&runs.iter().map(|r| r.outcome.best_valid).collect::<Vec<_>>()).expect("seeds >= 1");
        let test = mean_report(&runs.iter().map(|r| r.test).collect::<Vec<_>>()).expect("seeds >= 1");
        writeln!(out, "{variant}: valid {valid}, test {test}").map_err(stdout_err)?;
        rows.push(AblationRow { variant, valid, test, seeds: runs.len() });
        all_runs.extend(runs);
    }
    let write_rows = |w: &mut dyn Write| -> Result<()> {
        let io = |e| MlsaError::io("<ablation csv>", e);
        writeln!(w, "variant,hr@10,ndcg@10,mrr@10,valid_ndcg@10,seeds").map_err(io)?;
        for r in &rows {
            writeln!(w, "{},{},{},{},{},{}", r.variant, r.test.hr, r.test.ndcg, r.test.mrr, r.valid.ndcg, r.seeds)
                .map_err(io)?;
        }
        Ok(())
    };
    match rc.path("ablate_csv") {
        Some(p) => write_file(&p, |w| write_rows(w))?,
        None => write_rows(out)?,
    }
    if let Some(p) = rc.path("metrics_csv") {
        write_file(&p, |w| write_metrics_csv(w, &all_runs))?;
    }
    if let Some(p) = rc.path("plot") {
        let metric = |name: &str, f: fn(&MetricsReport) -> f64| Series {
            name: name.to_string(),
            points: rows.iter().enumerate().map(|(i, r)| (i as f64, f(&r.test))).collect(),
        };
        let chart = Chart {
            title: "Test metrics by variant (0 = default, 1..4 = v1..v4)".into(),
            x_label: "variant".into(),
            y_label: "metric@10".into(),
            log_x: false,
            log_y: false,
            series: vec![metric("HR", |r| r.hr), metric("NDCG", |r| r.ndcg), metric("MRR", |r| r.mrr)],
        };
        std::fs::write(&p, chart.to_svg()).map_err(|e| MlsaError::io(p, e))?;
    }
    Ok(0)
}
