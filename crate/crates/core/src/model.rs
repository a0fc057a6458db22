//! The full recommender: item embedding, the Mamba/low-rank-attention
//! interaction layer, a stack of residual normalization layers and a
//! next-item head, plus the ablation variants.
//!
//! Parameter names (prefix `il.` for the interaction layer):
//!
//! - `embedding.M` `[vocab x D]`
//! - `il.mamba.*` (see [`crate::ssm`]), `il.lsa.*` or `il.attn.*` (see [`crate::lsa`])
//! - `il.mlp1`, `il.mlp2`, `il.mlp3` as `.W` / `.b`; deeper MLPs use `.{j}.W` / `.{j}.b`
//! - `il.mlp1_cat` when the concatenated branch has its own first MLP
//! - `il.ln1` .. `il.ln4` as `.gain` / `.bias`; V1 uses `il.mamba` and `il.ln` only
//! - `stack.{b}.mamba.*` or `stack.{b}.pffn.{W1,b1,W2,b2}`, and `stack.{b}.ln`
//! - `head.W` `[D x vocab]`, `head.b`

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MlsaError, Result};
use crate::init;
use crate::lsa::{FullAttention, LowRankAttention};
use crate::params::ParameterStore;
use crate::ssm::{MambaBlock, MambaConfig};
use crate::tensor::{Graph, Scalar, Tensor, Var, LAYERNORM_EPS};

pub const PADDING_ID: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Default,
    /// Interaction layer replaced by one residual Mamba normalization layer.
    V1,
    /// No Mamba blocks anywhere; the stack uses feed-forward layers.
    V2,
    /// Plain attention in place of the low-rank attention.
    V3,
    /// Stack uses feed-forward layers instead of Mamba layers.
    V4,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Default, Variant::V1, Variant::V2, Variant::V3, Variant::V4];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Default => "default",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = MlsaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| MlsaError::config(format!("unknown variant {s:?} (default, v1, v2, v3, v4)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of item ids including the padding id 0.
    pub vocab_size: usize,
    /// Sequence length L.
    pub max_len: usize,
    /// Hidden size D.
    pub d_model: usize,
    /// SSM state size N.
    pub d_state: usize,
    /// Interest prototypes P.
    pub interests: usize,
    pub heads: usize,
    /// Mamba normalization layers n.
    pub layers: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub variant: Variant,
    /// Include the `skip_d * x` feed-through in every SSM.
    pub skip: bool,
    pub per_head_theta: bool,
    /// Give the concatenated branch its own first MLP instead of reusing `G`.
    pub fresh_mlp1: bool,
    /// Linear layers in `mlp2` and `mlp3`.
    pub mlp_depth: usize,
    /// Keep the padding embedding at zero.
    pub freeze_padding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2,
            max_len: 50,
            d_model: 64,
            d_state: 32,
            interests: 8,
            heads: 2,
            layers: 1,
            expand: 2,
            conv_kernel: 4,
            dropout: 0.2,
            variant: Variant::Default,
            skip: true,
            per_head_theta: false,
            fresh_mlp1: false,
            mlp_depth: 1,
            freeze_padding: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("interests", self.interests),
            ("heads", self.heads),
            ("expand", self.expand),
            ("conv_kernel", self.conv_kernel),
            ("mlp_depth", self.mlp_depth),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(MlsaError::config(format!("{name} must be >= 1")));
        }
        if self.vocab_size < 2 {
            return Err(MlsaError::config("vocab_size must cover padding plus at least one item"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(MlsaError::config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MlsaError::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn mamba(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.d_model,
            expand: self.expand,
            d_state: self.d_state,
            conv_kernel: self.conv_kernel,
            skip: self.skip,
        }
    }
}

#[derive(Clone, Debug)]
enum Attention {
    LowRank(LowRankAttention),
    Full(FullAttention),
}

#[derive(Clone, Debug)]
enum StackLayer {
    Mamba(MambaBlock),
    Pffn(String),
}

#[derive(Clone, Debug)]
struct Architecture {
    il_mamba: Option<MambaBlock>,
    attention: Option<Attention>,
    stack: Vec<StackLayer>,
}

impl Architecture {
    fn new(c: &ModelConfig) -> Result<Self> {
        let il_mamba = match c.variant {
            Variant::V2 => None,
            _ => Some(MambaBlock::new("il.mamba", c.mamba())?),
        };
        let attention = match c.variant {
            Variant::V1 => None,
            Variant::V3 => Some(Attention::Full(FullAttention::new("il.attn", c.d_model, c.heads)?)),
            _ => Some(Attention::LowRank(LowRankAttention::new(
                "il.lsa",
                c.d_model,
                c.heads,
                c.interests,
                c.per_head_theta,
            )?)),
        };
        let pffn = matches!(c.variant, Variant::V2 | Variant::V4);
        let stack = (0..c.layers)
            .map(|b| {
                Ok(if pffn {
                    StackLayer::Pffn(format!("stack.{b}.pffn"))
                } else {
                    StackLayer::Mamba(MambaBlock::new(format!("stack.{b}.mamba"), c.mamba())?)
                })
            })
            .collect::<Result<_>>()?;
        Ok(Architecture { il_mamba, attention, stack })
    }
}

/// Named intermediate values of one forward pass. Entries that a variant
/// does not compute are `None`.
#[derive(Clone, Debug)]
pub struct Intermediates<X> {
    /// Embedded input `E`.
    pub e: X,
    /// `H`, the residual Mamba output after the first normalization.
    pub h: X,
    pub h_lsa: Option<X>,
    /// `G = GELU(mlp1(H_LSA))`.
    pub g: Option<X>,
    pub h_m: Option<X>,
    pub h_mlsa: Option<X>,
    /// Output of each stacked layer.
    pub stack: Vec<X>,
    /// Final hidden sequence.
    pub h_hat: X,
    /// Hidden row at the last position of each sequence.
    pub h_last: X,
    /// Head output before the softmax, one row per sequence.
    pub logits: X,
}

impl<X> Intermediates<X> {
    pub fn map<Y>(&self, mut f: impl FnMut(&X) -> Y) -> Intermediates<Y> {
        Intermediates {
            e: f(&self.e),
            h: f(&self.h),
            h_lsa: self.h_lsa.as_ref().map(&mut f),
            g: self.g.as_ref().map(&mut f),
            h_m: self.h_m.as_ref().map(&mut f),
            h_mlsa: self.h_mlsa.as_ref().map(&mut f),
            stack: self.stack.iter().map(&mut f).collect(),
            h_hat: f(&self.h_hat),
            h_last: f(&self.h_last),
            logits: f(&self.logits),
        }
    }
}

/// Interaction-layer outputs for a given embedded input.
#[derive(Clone, Debug)]
pub struct InteractionOutput<X> {
    pub h: X,
    pub h_lsa: Option<X>,
    pub g: Option<X>,
    pub h_m: Option<X>,
    pub h_mlsa: X,
}

/// Dropout source for a training-mode forward pass; `None` evaluates.
pub type DropoutRng<'a> = Option<&'a mut dyn RngCore>;

#[derive(Clone, Debug)]
pub struct MlsaModel<T: Scalar = f32> {
    config: ModelConfig,
    arch: Architecture,
    params: ParameterStore<T>,
}

impl MlsaModel<f32> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_seed(config, seed)
    }
}

/// Same as [`MlsaModel::new`]; each variant gets exactly the parameters it uses.
pub fn build_variant(config: ModelConfig, seed: u64) -> Result<MlsaModel<f32>> {
    MlsaModel::new(config, seed)
}

impl<T: Scalar> MlsaModel<T> {
    pub fn with_seed(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.interests >= config.max_len && config.variant != Variant::V1 && config.variant != Variant::V3 {
            log::warn!(
                "{} interests for sequences of length {}: no reduction over plain attention",
                config.interests,
                config.max_len
            );
        }
        let arch = Architecture::new(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterStore::new(seed);
        let (d, v) = (config.d_model, config.vocab_size);

        let mut emb = init::standard_normal::<T>(&mut rng, &[v, d]);
        if config.freeze_padding {
            emb.row_mut(PADDING_ID).iter_mut().for_each(|x| *x = T::zero());
        }
        p.insert("embedding.M", emb)?;
        if let Some(m) = &arch.il_mamba {
            m.init(&mut p, &mut rng)?;
        }
        match &arch.attention {
            None => init::layernorm(&mut p, "il.ln", d)?,
            Some(att) => {
                match att {
                    Attention::LowRank(a) => a.init(&mut p, &mut rng)?,
                    Attention::Full(a) => a.init(&mut p, &mut rng)?,
                }
                init::linear(&mut p, &mut rng, "il.mlp1", d, d, true)?;
                if config.fresh_mlp1 {
                    init::linear(&mut p, &mut rng, "il.mlp1_cat", d, d, true)?;
                }
                init_mlp(&mut p, &mut rng, "il.mlp2", 2 * d, d, config.mlp_depth)?;
                init_mlp(&mut p, &mut rng, "il.mlp3", d, d, config.mlp_depth)?;
                for i in 1..=4 {
                    init::layernorm(&mut p, &format!("il.ln{i}"), d)?;
                }
            }
        }
        for (b, layer) in arch.stack.iter().enumerate() {
            match layer {
                StackLayer::Mamba(m) => m.init(&mut p, &mut rng)?,
                StackLayer::Pffn(prefix) => {
                    p.insert(format!("{prefix}.W1"), init::fan_in_uniform(&mut rng, &[d, 4 * d], d))?;
                    p.insert(format!("{prefix}.b1"), Tensor::zeros(&[4 * d]))?;
                    p.insert(format!("{prefix}.W2"), init::fan_in_uniform(&mut rng, &[4 * d, d], 4 * d))?;
                    p.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]))?;
                }
            }
            init::layernorm(&mut p, &format!("stack.{b}.ln"), d)?;
        }
        init::linear(&mut p, &mut rng, "head", d, v, true)?;
        Ok(MlsaModel { config, arch, params: p })
    }

    /// Wraps an existing store, which must hold exactly this configuration's parameters.
    pub fn from_params(config: ModelConfig, params: ParameterStore<T>) -> Result<Self> {
        let mut model = Self::with_seed(config, params.rng_seed())?;
        model.params.load_values(&params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterStore<T> {
        self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Scalar>(&self) -> MlsaModel<U> {
        MlsaModel { config: self.config.clone(), arch: self.arch.clone(), params: self.params.cast() }
    }

    /// Clears gradients of frozen entries (the padding embedding row when
    /// `freeze_padding` is set).
    pub fn mask_frozen_grads(&self, store: &mut ParameterStore<T>) {
        if self.config.freeze_padding {
            if let Some(g) = store.grad_mut("embedding.M") {
                g.row_mut(PADDING_ID).iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab_size) {
            Some(bad) => {
                Err(MlsaError::Data(format!("item id {bad} outside vocabulary of {}", self.config.vocab_size)))
            }
            None => Ok(()),
        }
    }

    /// Forward pass over `ids`, a stack of sequences of `seq_len` ids each.
    /// Dropout is applied only when `rng` is given.
    pub fn build(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        ids: &[usize],
        seq_len: usize,
        mut rng: DropoutRng<'_>,
    ) -> Result<Intermediates<Var>> {
        if seq_len == 0 || ids.is_empty() || !ids.len().is_multiple_of(seq_len) {
            return Err(MlsaError::shape(format!("{} ids are not whole sequences of {seq_len}", ids.len())));
        }
        self.check_ids(ids)?;
        let m = g.param(store, "embedding.M")?;
        let e = g.gather(m, ids.to_vec())?;
        let e = self.dropout(g, e, &mut rng)?;
        let il = self.build_interaction(g, store, e, seq_len, &mut rng)?;
        let mut x = il.h_mlsa;
        let mut stack = Vec::with_capacity(self.arch.stack.len());
        for b in 0..self.arch.stack.len() {
            x = self.build_stack_layer(g, store, b, x, seq_len, &mut rng)?;
            stack.push(x);
        }
        let last: Vec<usize> = (0..ids.len() / seq_len).map(|s| s * seq_len + seq_len - 1).collect();
        let h_last = g.gather(x, last)?;
        let w = g.param(store, "head.W")?;
        let b = g.param(store, "head.b")?;
        let logits = g.linear(h_last, w, Some(b))?;
        Ok(Intermediates {
            e,
            h: il.h,
            h_lsa: il.h_lsa,
            g: il.g,
            h_m: il.h_m,
            h_mlsa: if self.arch.attention.is_some() { Some(il.h_mlsa) } else { None },
            stack,
            h_hat: x,
            h_last,
            logits,
        })
    }

    /// Mean next-item cross-entropy of `targets`, one per sequence.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        ids: &[usize],
        targets: &[usize],
        seq_len: usize,
        rng: DropoutRng<'_>,
    ) -> Result<Var> {
        if targets.contains(&PADDING_ID) {
            return Err(MlsaError::Data("padding id used as a training target".into()));
        }
        let out = self.build(g, store, ids, seq_len, rng)?;
        g.cross_entropy(out.logits, targets.to_vec())
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, rng: &mut DropoutRng<'_>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(r) if p > 0.0 => {
                let keep = T::of(1.0 / (1.0 - p));
                let mask =
                    (0..g.value(x).len()).map(|_| if r.random::<f64>() < p { T::zero() } else { keep }).collect();
                g.mask(x, mask)
            }
            _ => Ok(x),
        }
    }

    fn layernorm(&self, g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
        let gain = g.param(store, &format!("{prefix}.gain"))?;
        let bias = g.param(store, &format!("{prefix}.bias"))?;
        g.layernorm(x, gain, bias, T::of(LAYERNORM_EPS))
    }

    fn build_interaction(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        e: Var,
        seq_len: usize,
        rng: &mut DropoutRng<'_>,
    ) -> Result<InteractionOutput<Var>> {
        let Some(att) = &self.arch.attention else {
            let mamba = self.arch.il_mamba.as_ref().expect("V1 keeps the interaction Mamba");
            let y = mamba.build(g, store, e, seq_len)?;
            let r = g.add(y, e)?;
            let h = self.layernorm(g, store, "il.ln", r)?;
            let h = self.dropout(g, h, rng)?;
            return Ok(InteractionOutput { h, h_lsa: None, g: None, h_m: None, h_mlsa: h });
        };
        let pre = match &self.arch.il_mamba {
            Some(m) => {
                let y = m.build(g, store, e, seq_len)?;
                g.add(y, e)?
            }
            None => e,
        };
        let h = self.layernorm(g, store, "il.ln1", pre)?;
        let h = self.dropout(g, h, rng)?;

        let a = match att {
            Attention::LowRank(l) => l.build(g, store, h, seq_len)?.output,
            Attention::Full(f) => f.build(g, store, h, seq_len)?.output,
        };
        let r = g.add(a, h)?;
        let h_lsa = self.layernorm(g, store, "il.ln2", r)?;
        let h_lsa = self.dropout(g, h_lsa, rng)?;

        let gate = mlp(g, store, "il.mlp1", h_lsa, 1)?;
        let gate = g.gelu(gate);
        let cat_branch = if self.config.fresh_mlp1 {
            let c = mlp(g, store, "il.mlp1_cat", h_lsa, 1)?;
            g.gelu(c)
        } else {
            gate
        };
        let prod = g.mul(h, gate)?;
        let h_m = self.layernorm(g, store, "il.ln3", prod)?;
        let h_m = self.dropout(g, h_m, rng)?;

        let cat = g.concat(&[h_m, cat_branch])?;
        let left = mlp(g, store, "il.mlp2", cat, self.config.mlp_depth)?;
        let right = mlp(g, store, "il.mlp3", e, self.config.mlp_depth)?;
        let sum = g.add(left, right)?;
        let h_mlsa = self.layernorm(g, store, "il.ln4", sum)?;
        let h_mlsa = self.dropout(g, h_mlsa, rng)?;
        Ok(InteractionOutput { h, h_lsa: Some(h_lsa), g: Some(gate), h_m: Some(h_m), h_mlsa })
    }

    fn build_stack_layer(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        b: usize,
        x: Var,
        seq_len: usize,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let inner = match &self.arch.stack[b] {
            StackLayer::Mamba(m) => m.build(g, store, x, seq_len)?,
            StackLayer::Pffn(prefix) => {
                let w1 = g.param(store, &format!("{prefix}.W1"))?;
                let b1 = g.param(store, &format!("{prefix}.b1"))?;
                let w2 = g.param(store, &format!("{prefix}.W2"))?;
                let b2 = g.param(store, &format!("{prefix}.b2"))?;
                let hidden = g.linear(x, w1, Some(b1))?;
                let hidden = g.gelu(hidden);
                g.linear(hidden, w2, Some(b2))?
            }
        };
        let r = g.add(inner, x)?;
        let y = self.layernorm(g, store, &format!("stack.{b}.ln"), r)?;
        self.dropout(g, y, rng)
    }

    /// Embedding rows for one sequence, evaluation mode.
    pub fn embed(&self, items: &[usize]) -> Result<Tensor<T>> {
        self.check_ids(items)?;
        if items.is_empty() {
            return Err(MlsaError::shape("empty sequence"));
        }
        let m = self.params.get("embedding.M").expect("embedding exists");
        let d = self.config.d_model;
        Ok(Tensor::from_fn(&[items.len(), d], |i| m.at(items[i / d], i % d)))
    }

    /// Interaction layer applied to an embedded `[L x D]` input, evaluation mode.
    pub fn interaction_layer(&self, e: &Tensor<T>) -> Result<InteractionOutput<Tensor<T>>> {
        let mut g = Graph::inference();
        let ev = g.constant(e.clone());
        let out = self.build_interaction(&mut g, &self.params, ev, e.rows(), &mut None)?;
        let get = |v: &Var| g.value(*v).clone();
        Ok(InteractionOutput {
            h: get(&out.h),
            h_lsa: out.h_lsa.as_ref().map(get),
            g: out.g.as_ref().map(get),
            h_m: out.h_m.as_ref().map(get),
            h_mlsa: get(&out.h_mlsa),
        })
    }

    /// The first `n` stacked layers applied to `[L x D]` input; `n = 0` is the identity.
    pub fn mamba_norm_stack(&self, h0: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
        if n > self.arch.stack.len() {
            return Err(MlsaError::config(format!(
                "model has {} stacked layers, asked for {n}",
                self.arch.stack.len()
            )));
        }
        let mut g = Graph::inference();
        let mut x = g.constant(h0.clone());
        for b in 0..n {
            x = self.build_stack_layer(&mut g, &self.params, b, x, h0.rows(), &mut None)?;
        }
        Ok(g.value(x).clone())
    }

    /// Next-item distribution from the last row of `h_hat`.
    pub fn predict(&self, h_hat: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let last = h_hat.rows() - 1;
        let h = g.constant(Tensor::new(&[1, h_hat.cols()], h_hat.row(last).to_vec())?);
        let w = g.param(&self.params, "head.W")?;
        let b = g.param(&self.params, "head.b")?;
        let logits = g.linear(h, w, Some(b))?;
        let p = g.softmax(logits);
        g.value(p).clone().reshape(&[self.config.vocab_size])
    }

    /// All named intermediates for one sequence, evaluation mode.
    pub fn forward(&self, items: &[usize]) -> Result<Intermediates<Tensor<T>>> {
        let mut g = Graph::inference();
        let out = self.build(&mut g, &self.params, items, items.len(), None)?;
        let values = out.map(|v| g.value(*v).clone());
        values.logits.check_finite("forward")?;
        Ok(values)
    }

    /// Head logits `[B x vocab]` for a stack of `B` sequences of `seq_len`, evaluation mode.
    pub fn scores(&self, ids: &[usize], seq_len: usize) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let out = self.build(&mut g, &self.params, ids, seq_len, None)?;
        let logits = g.value(out.logits).clone();
        logits.check_finite("scores")?;
        Ok(logits)
    }

    /// Bytes held by an evaluation-mode forward graph over one sequence of `len` ids.
    pub fn forward_bytes(&self, len: usize) -> Result<usize> {
        let ids: Vec<usize> = (0..len).map(|i| 1 + i % (self.config.vocab_size - 1)).collect();
        let mut g = Graph::inference();
        self.build(&mut g, &self.params, &ids, len, None)?;
        Ok(g.bytes())
    }
}

fn init_mlp<T: Scalar>(
    p: &mut ParameterStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    fan_in: usize,
    out: usize,
    depth: usize,
) -> Result<()> {
    if depth == 1 {
        return init::linear(p, rng, prefix, fan_in, out, true);
    }
    for j in 0..depth {
        let inp = if j == 0 { fan_in } else { out };
        init::linear(p, rng, &format!("{prefix}.{j}"), inp, out, true)?;
    }
    Ok(())
}

/// `depth` linear layers with GELU between them.
fn mlp<T: Scalar>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var, depth: usize) -> Result<Var> {
    if depth == 1 {
        let w = g.param(store, &format!("{prefix}.W"))?;
        let b = g.param(store, &format!("{prefix}.b"))?;
        return g.linear(x, w, Some(b));
    }
    let mut h = x;
    for j in 0..depth {
        if j > 0 {
            h = g.gelu(h);
        }
        let w = g.param(store, &format!("{prefix}.{j}.W"))?;
        let b = g.param(store, &format!("{prefix}.{j}.b"))?;
        h = g.linear(h, w, Some(b))?;
    }
    Ok(h)
}
