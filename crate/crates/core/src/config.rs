//! Flat `key = value` run configuration shared by every subcommand, and model
//! files (checkpoint plus a config sidecar).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::bench::Component;
use crate::data::{DatasetKind, FilterMode};
use crate::error::{MlsaError, Result};
use crate::model::{MlsaModel, ModelConfig, Variant};
use crate::params::ParameterStore;
use crate::train::{Augment, Grid, TrainConfig};

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

macro_rules! keys {
    ($($name:literal = $default:literal : $doc:literal;)*) => {
        pub const KEYS: &[Key] = &[$(Key { name: $name, default: $default, doc: $doc }),*];
    };
}

keys! {
    "dataset" = "movielens" : "movielens, amazon or synthetic";
    "path" = "" : "raw interaction file (relative paths also tried under MLSA_DATA_DIR)";
    "cache" = "" : "prepared dataset file: written by prep, read by the other commands when present";
    "k_core" = "5" : "minimum interactions per user and per item";
    "filter_mode" = "fixpoint" : "fixpoint or one-pass k-core filtering";
    "synthetic_items" = "500" : "ring size of the synthetic successor data";
    "synthetic_users" = "2000" : "users in the synthetic successor data";
    "synthetic_len" = "20" : "sequence length of the synthetic successor data";
    "data_seed" = "7" : "seed of the synthetic successor data";

    "vocab_size" = "0" : "item ids including padding; 0 takes it from the dataset";
    "max_len" = "50" : "sequence length L";
    "d_model" = "64" : "hidden size D";
    "d_state" = "32" : "SSM state size N";
    "interests" = "8" : "interest prototypes P";
    "heads" = "2" : "attention heads h";
    "layers" = "1" : "Mamba normalization layers n";
    "expand" = "2" : "Mamba inner expansion";
    "conv_kernel" = "4" : "causal convolution width";
    "dropout" = "0.2" : "dropout rate during training";
    "variant" = "default" : "default, v1, v2, v3 or v4";
    "skip" = "true" : "SSM skip feed-through";
    "per_head_theta" = "false" : "split interest prototypes across heads";
    "fresh_mlp1" = "false" : "separate first MLP for the concatenated branch";
    "mlp_depth" = "1" : "linear layers in the output MLPs";
    "freeze_padding" = "false" : "keep the padding embedding at zero";

    "lr" = "0.001" : "Adam learning rate";
    "batch_size" = "256" : "training mini-batch size";
    "epochs" = "200" : "maximum training epochs";
    "patience" = "10" : "epochs without validation NDCG@10 gain before stopping";
    "seed" = "2024" : "first training seed";
    "seeds" = "1" : "independent runs averaged (seed, seed+1, ...)";
    "augment" = "none" : "none or sliding training examples";
    "eval_batch_size" = "256" : "users scored per evaluation batch";
    "mask_history" = "false" : "exclude already-seen items from ranking";
    "metrics_csv" = "" : "where train and ablate write per-epoch metrics";
    "checkpoint" = "" : "where train saves the best model";
    "model" = "" : "model file evaluated by eval";
    "phase" = "test" : "valid or test";

    "grid_batch_size" = "" : "comma list searched by gridsearch (empty keeps batch_size)";
    "grid_layers" = "" : "comma list over n";
    "grid_dropout" = "" : "comma list over dropout";
    "grid_heads" = "" : "comma list over h";
    "grid_interests" = "" : "comma list over P";
    "grid_csv" = "" : "gridsearch report";

    "components" = "mamba_block,lsa,vanilla_attention,full_model" : "benchmarked components";
    "lengths" = "256,512,1024,2048,4096" : "benchmarked sequence lengths";
    "reps" = "5" : "timed samples per point";
    "bench_csv" = "" : "benchmark rows";
    "plot" = "" : "SVG chart written by bench and ablate";

    "toy" = "false" : "gradcheck on the small reference model";
    "samples" = "200" : "parameters sampled by gradcheck";
    "eps" = "0.0001" : "central difference step";

    "full" = "false" : "ablate over the full hyperparameter grid with four seeds";
    "ablate_csv" = "" : "per-variant results";
}

/// Keys that describe the model itself; they go into the checkpoint sidecar.
pub const MODEL_KEYS: [&str; 16] = [
    "vocab_size",
    "max_len",
    "d_model",
    "d_state",
    "interests",
    "heads",
    "layers",
    "expand",
    "conv_kernel",
    "dropout",
    "variant",
    "skip",
    "per_head_theta",
    "fresh_mlp1",
    "mlp_depth",
    "freeze_padding",
];

pub fn key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: IndexMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect() }
    }
}

pub fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = key(name).ok_or_else(|| MlsaError::Usage(format!("unknown key {name:?}")))?;
        self.values.insert(k.name, value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        self.values.get(name).unwrap_or_else(|| panic!("{name} is not a registered key"))
    }

    pub fn is_default(&self, name: &str) -> bool {
        key(name).is_some_and(|k| self.get(name) == k.default)
    }

    /// Applies `key = value` lines; `#` starts a comment, blank lines are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| MlsaError::Parse { path: origin.to_path_buf(), line: i + 1, message };
            let (k, v) =
                line.split_once('=').ok_or_else(|| parse_err(format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            if key(k).is_none() {
                return Err(parse_err(format!("unknown key {k:?}")));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| MlsaError::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// `key = value` lines for the given keys.
    pub fn to_text<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> String {
        names.into_iter().map(|n| format!("{n} = {}\n", self.get(n))).collect()
    }

    pub fn parsed<T: FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.get(name);
        v.parse().map_err(|e| MlsaError::config(format!("{name} = {v:?}: {e}")))
    }

    pub fn flag(&self, name: &str) -> Result<bool> {
        let v = self.get(name);
        parse_bool(v).ok_or_else(|| MlsaError::config(format!("{name} = {v:?} is not a boolean")))
    }

    /// Comma separated values; empty string gives an empty list.
    pub fn list<T: FromStr>(&self, name: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let v = self.get(name);
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| MlsaError::config(format!("{name}: {s:?}: {e}"))))
            .collect()
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        let v = self.get(name);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn dataset_kind(&self) -> Result<DatasetKind> {
        self.parsed("dataset")
    }

    pub fn filter_mode(&self) -> Result<FilterMode> {
        self.parsed("filter_mode")
    }

    /// Model hyperparameters; a `vocab_size` of 0 is replaced by `data_vocab`.
    pub fn model_config(&self, data_vocab: Option<usize>) -> Result<ModelConfig> {
        let mut vocab: usize = self.parsed("vocab_size")?;
        if vocab == 0 {
            vocab = data_vocab.ok_or_else(|| MlsaError::config("vocab_size is 0 and no dataset supplies it"))?;
        }
        let cfg = ModelConfig {
            vocab_size: vocab,
            max_len: self.parsed("max_len")?,
            d_model: self.parsed("d_model")?,
            d_state: self.parsed("d_state")?,
            interests: self.parsed("interests")?,
            heads: self.parsed("heads")?,
            layers: self.parsed("layers")?,
            expand: self.parsed("expand")?,
            conv_kernel: self.parsed("conv_kernel")?,
            dropout: self.parsed("dropout")?,
            variant: self.parsed::<Variant>("variant")?,
            skip: self.flag("skip")?,
            per_head_theta: self.flag("per_head_theta")?,
            fresh_mlp1: self.flag("fresh_mlp1")?,
            mlp_depth: self.parsed("mlp_depth")?,
            freeze_padding: self.flag("freeze_padding")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes every field of `cfg` back into the model keys.
    pub fn set_model(&mut self, cfg: &ModelConfig) {
        let pairs = [
            ("vocab_size", cfg.vocab_size.to_string()),
            ("max_len", cfg.max_len.to_string()),
            ("d_model", cfg.d_model.to_string()),
            ("d_state", cfg.d_state.to_string()),
            ("interests", cfg.interests.to_string()),
            ("heads", cfg.heads.to_string()),
            ("layers", cfg.layers.to_string()),
            ("expand", cfg.expand.to_string()),
            ("conv_kernel", cfg.conv_kernel.to_string()),
            ("dropout", cfg.dropout.to_string()),
            ("variant", cfg.variant.to_string()),
            ("skip", cfg.skip.to_string()),
            ("per_head_theta", cfg.per_head_theta.to_string()),
            ("fresh_mlp1", cfg.fresh_mlp1.to_string()),
            ("mlp_depth", cfg.mlp_depth.to_string()),
            ("freeze_padding", cfg.freeze_padding.to_string()),
        ];
        for (k, v) in pairs {
            self.values.insert(key(k).expect("model keys are registered").name, v);
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.parsed("lr")?,
            batch_size: self.parsed("batch_size")?,
            epochs: self.parsed("epochs")?,
            patience: self.parsed("patience")?,
            seed: self.parsed("seed")?,
            augment: self.parsed::<Augment>("augment")?,
            eval_batch_size: self.parsed("eval_batch_size")?,
            mask_history: self.flag("mask_history")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `seeds` consecutive seeds starting at `seed`.
    pub fn seed_list(&self) -> Result<Vec<u64>> {
        let first: u64 = self.parsed("seed")?;
        let n: u64 = self.parsed("seeds")?;
        if n == 0 {
            return Err(MlsaError::config("seeds must be >= 1"));
        }
        Ok((0..n).map(|i| first + i).collect())
    }

    pub fn grid(&self, model: &ModelConfig, train: &TrainConfig) -> Result<Grid> {
        fn or<T>(v: Vec<T>, base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v
            }
        }
        Ok(Grid {
            batch_size: or(self.list("grid_batch_size")?, train.batch_size),
            layers: or(self.list("grid_layers")?, model.layers),
            dropout: or(self.list("grid_dropout")?, model.dropout),
            heads: or(self.list("grid_heads")?, model.heads),
            interests: or(self.list("grid_interests")?, model.interests),
        })
    }

    pub fn components(&self) -> Result<Vec<Component>> {
        self.list("components")
    }
}

/// Sidecar that records the model configuration next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

pub fn save_model(model: &MlsaModel<f32>, path: &Path) -> Result<()> {
    let mut rc = RunConfig::default();
    rc.set_model(model.config());
    model.params().save(path)?;
    let side = sidecar_path(path);
    std::fs::write(&side, rc.to_text(MODEL_KEYS)).map_err(|e| MlsaError::io(side, e))
}

pub fn load_model(path: &Path) -> Result<MlsaModel<f32>> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| MlsaError::io(&side, e))?;
    let mut rc = RunConfig::default();
    rc.apply_text(&text, &side)?;
    let cfg = rc.model_config(None)?;
    let params = ParameterStore::<f32>::load(path)?;
    MlsaModel::from_params(cfg, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key_and_build_configs() {
        let rc = RunConfig::default();
        assert_eq!(rc.values.len(), KEYS.len());
        assert!(KEYS.iter().all(|k| !k.doc.is_empty()));
        let m = rc.model_config(Some(100)).unwrap();
        assert_eq!(m, ModelConfig { vocab_size: 100, ..ModelConfig::default() });
        let t = rc.train_config().unwrap();
        assert_eq!(t, TrainConfig::default());
        assert_eq!(rc.seed_list().unwrap(), vec![2024]);
        assert_eq!(rc.components().unwrap(), Component::ALL.to_vec());
        assert_eq!(rc.list::<usize>("lengths").unwrap(), vec![256, 512, 1024, 2048, 4096]);
        assert!(rc.model_config(None).is_err());
        assert!(MODEL_KEYS.iter().all(|k| key(k).is_some()));
    }

    #[test]
    fn text_parsing() {
        let mut rc = RunConfig::default();
        rc.apply_text("# comment\n\nd_model = 32   # inline\nvariant=v2\nseeds = 4\n", Path::new("x.cfg")).unwrap();
        assert_eq!(rc.get("d_model"), "32");
        assert_eq!(rc.model_config(Some(10)).unwrap().variant, Variant::V2);
        assert_eq!(rc.seed_list().unwrap(), vec![2024, 2025, 2026, 2027]);
        match rc.apply_text("a = 1\n", Path::new("x.cfg")) {
            Err(MlsaError::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(rc.apply_text("\nno equals\n", Path::new("x.cfg")), Err(MlsaError::Parse { line: 2, .. })));
        assert!(matches!(rc.set("nope", "1"), Err(MlsaError::Usage(_))));
        rc.set("lr", "-1").unwrap();
        assert!(rc.train_config().is_err());
        rc.set("skip", "maybe").unwrap();
        assert!(rc.model_config(Some(10)).is_err());
    }

    #[test]
    fn grid_defaults_to_base_values() {
        let mut rc = RunConfig::default();
        rc.set("grid_dropout", "0.1, 0.3").unwrap();
        let m = rc.model_config(Some(10)).unwrap();
        let t = rc.train_config().unwrap();
        let g = rc.grid(&m, &t).unwrap();
        assert_eq!(g.dropout, vec![0.1, 0.3]);
        assert_eq!(g.layers, vec![1]);
        assert_eq!(g.cardinality(), 2);
    }

    #[test]
    fn model_round_trips_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            vocab_size: 12,
            max_len: 6,
            d_model: 8,
            d_state: 4,
            interests: 2,
            variant: Variant::V3,
            dropout: 0.25,
            ..ModelConfig::default()
        };
        let m = MlsaModel::new(cfg, 9).unwrap();
        let path = dir.path().join("m.bin");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config(), m.config());
        let ids = [0, 1, 2, 3, 4, 5];
        assert_eq!(back.scores(&ids, 6).unwrap(), m.scores(&ids, 6).unwrap());
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(load_model(&path).is_err());
    }
}
