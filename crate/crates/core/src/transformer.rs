//! Post-LN transformer encoder whose blocks expose the two LayerNorm outputs
//! as modulation sites.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KalaError, Result};
use crate::kfm::{apply_modulation, ModulationParams};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    /// Filled from the corpus vocabulary when zero.
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// 1-based layer indices that receive modulation.
    pub kfm_locations: BTreeSet<usize>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            intermediate: 256,
            heads: 4,
            vocab_size: 0,
            max_len: 128,
            dropout: 0.1,
            kfm_locations: BTreeSet::from([4]),
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(KalaError::Config(m));
        if self.num_layers == 0 || self.hidden == 0 || self.intermediate == 0 || self.heads == 0 {
            return fail("layer count, widths and head count must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return fail(format!("hidden size {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return fail("vocab_size and max_len must be positive".into());
        }
        if let Some(&bad) = self.kfm_locations.iter().find(|&&l| l == 0 || l > self.num_layers) {
            return fail(format!("KFM location {bad} outside 1..={}", self.num_layers));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn first_kfm_layer(&self) -> Option<usize> {
        self.kfm_locations.iter().next().copied()
    }
}

/// Dropout state for one forward pass. `None` means evaluation mode.
pub struct Dropout {
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Self { rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var, p: f64) -> Var {
        match self.rng.as_mut() {
            Some(rng) if p > 0.0 => g.dropout(x, p, rng),
            _ => x,
        }
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Per-layer token representations `H⁰..H^L` as tape nodes.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    pub layers: Vec<Var>,
}

impl HiddenStates {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least the embedding layer")
    }

    pub fn to_tensors(&self, g: &Graph) -> Vec<Tensor> {
        self.layers.iter().map(|&v| g.value(v).clone()).collect()
    }
}

/// Supplies modulation for a block given the block's input `H^{l-1}`.
pub trait LayerConditioner {
    fn modulation(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        h_prev: Var,
        dropout: &mut Dropout,
    ) -> Result<Option<ModulationParams>>;
}

/// No modulation anywhere.
pub struct Unconditioned;

impl LayerConditioner for Unconditioned {
    fn modulation(&mut self, _: &mut Graph, _: &ParamStore, _: usize, _: Var, _: &mut Dropout) -> Result<Option<ModulationParams>> {
        Ok(None)
    }
}

/// Precomputed modulation keyed by 1-based layer index.
pub struct FixedModulation(pub BTreeMap<usize, ModulationParams>);

impl LayerConditioner for FixedModulation {
    fn modulation(&mut self, _: &mut Graph, _: &ParamStore, layer: usize, _: Var, _: &mut Dropout) -> Result<Option<ModulationParams>> {
        Ok(self.0.get(&layer).cloned())
    }
}

/// Output of one attention block with its per-head attention matrices.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: TransformerConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_gain: ParamId,
    emb_ln_bias: ParamId,
    layers: Vec<LayerParams>,
}

impl Encoder {
    /// Register encoder parameters: normal(0, 0.02) weights, zero biases, unit LN gains.
    pub fn new(config: TransformerConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let ff = config.intermediate;
        let tok_emb = store.add_normal("encoder.tok_emb", &[config.vocab_size, d], INIT_STD, rng);
        let pos_emb = store.add_normal("encoder.pos_emb", &[config.max_len, d], INIT_STD, rng);
        let emb_ln_gain = store.add_full("encoder.emb_ln.gain", &[d], 1.0);
        let emb_ln_bias = store.add_zeros("encoder.emb_ln.bias", &[d], false);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 1..=config.num_layers {
            let p = |s: &str| format!("encoder.layer{l:02}.{s}");
            let mut w = |store: &mut ParamStore, s: &str, shape: &[usize]| store.add_normal(&p(s), shape, INIT_STD, rng);
            let wq = w(store, "wq", &[d, d]);
            let wk = w(store, "wk", &[d, d]);
            let wv = w(store, "wv", &[d, d]);
            let wo = w(store, "wo", &[d, d]);
            let w1 = w(store, "w1", &[d, ff]);
            let w2 = w(store, "w2", &[ff, d]);
            layers.push(LayerParams {
                wq,
                bq: store.add_zeros(&p("bq"), &[d], false),
                wk,
                bk: store.add_zeros(&p("bk"), &[d], false),
                wv,
                bv: store.add_zeros(&p("bv"), &[d], false),
                wo,
                bo: store.add_zeros(&p("bo"), &[d], false),
                ln1_gain: store.add_full(&p("ln1.gain"), &[d], 1.0),
                ln1_bias: store.add_zeros(&p("ln1.bias"), &[d], false),
                w1,
                b1: store.add_zeros(&p("b1"), &[ff], false),
                w2,
                b2: store.add_zeros(&p("b2"), &[d], false),
                ln2_gain: store.add_full(&p("ln2.gain"), &[d], 1.0),
                ln2_bias: store.add_zeros(&p("ln2.bias"), &[d], false),
            });
        }
        Ok(Self { config, tok_emb, pos_emb, emb_ln_gain, emb_ln_bias, layers })
    }

    /// Rebind to parameters already present in `store` (checkpoint loading).
    pub fn bind(config: TransformerConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let get = |n: String| store.id(&n).ok_or_else(|| KalaError::Checkpoint(format!("missing parameter {n}")));
        let mut layers = Vec::new();
        for l in 1..=config.num_layers {
            let p = |s: &str| format!("encoder.layer{l:02}.{s}");
            layers.push(LayerParams {
                wq: get(p("wq"))?,
                bq: get(p("bq"))?,
                wk: get(p("wk"))?,
                bk: get(p("bk"))?,
                wv: get(p("wv"))?,
                bv: get(p("bv"))?,
                wo: get(p("wo"))?,
                bo: get(p("bo"))?,
                ln1_gain: get(p("ln1.gain"))?,
                ln1_bias: get(p("ln1.bias"))?,
                w1: get(p("w1"))?,
                b1: get(p("b1"))?,
                w2: get(p("w2"))?,
                b2: get(p("b2"))?,
                ln2_gain: get(p("ln2.gain"))?,
                ln2_bias: get(p("ln2.bias"))?,
            });
        }
        Ok(Self {
            tok_emb: get("encoder.tok_emb".into())?,
            pos_emb: get("encoder.pos_emb".into())?,
            emb_ln_gain: get("encoder.emb_ln.gain".into())?,
            emb_ln_bias: get("encoder.emb_ln.bias".into())?,
            layers,
            config,
        })
    }

    /// `H⁰`: token plus learned absolute position embeddings, layer-normalized.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize], dropout: &mut Dropout) -> Result<Var> {
        if tokens.is_empty() {
            return Err(KalaError::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(KalaError::Contract(format!(
                "sequence of {} tokens exceeds max length {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(KalaError::Contract(format!("token id {t} >= vocab size {}", self.config.vocab_size)));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let te = g.param_rows(store, self.tok_emb, tokens)?;
        let pe = g.param_rows(store, self.pos_emb, &positions)?;
        let x = g.add(te, pe)?;
        let gain = g.param(store, self.emb_ln_gain);
        let bias = g.param(store, self.emb_ln_bias);
        let x = g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?;
        Ok(dropout.apply(g, x, self.config.dropout))
    }

    /// Multi-head scaled dot-product self-attention (pre-residual, pre-LN).
    pub fn attention_block(&self, g: &mut Graph, store: &ParamStore, layer: usize, h: Var, dropout: &mut Dropout) -> Result<AttentionOutput> {
        let lp = self.layer(layer)?;
        let d = self.config.hidden;
        if g.dims(h).1 != d {
            return Err(KalaError::Numerics(crate::numerics::NumericsError::Shape(format!(
                "attention input width {} != {d}",
                g.dims(h).1
            ))));
        }
        let proj = |g: &mut Graph, w: ParamId, b: ParamId| -> Result<Var> {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let x = g.matmul(h, wv)?;
            Ok(g.add_row(x, bv)?)
        };
        let q = proj(g, lp.wq, lp.bq)?;
        let k = proj(g, lp.wk, lp.bk)?;
        let v = proj(g, lp.wv, lp.bv)?;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = g.slice_cols(q, head * hd, hd)?;
            let kh = g.slice_cols(k, head * hd, hd)?;
            let vh = g.slice_cols(v, head * hd, hd)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores, None)?;
            weights.push(probs);
            let probs = dropout.apply(g, probs, self.config.dropout);
            heads.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat_cols(&heads)?;
        let wo = g.param(store, lp.wo);
        let bo = g.param(store, lp.bo);
        let out = g.matmul(ctx, wo)?;
        let output = g.add_row(out, bo)?;
        Ok(AttentionOutput { output, weights })
    }

    /// `σ(Ĥ·W1 + b1)·W2 + b2` with GELU.
    pub fn feed_forward_block(&self, g: &mut Graph, store: &ParamStore, layer: usize, h: Var) -> Result<Var> {
        let lp = self.layer(layer)?;
        let w1 = g.param(store, lp.w1);
        let b1 = g.param(store, lp.b1);
        let w2 = g.param(store, lp.w2);
        let b2 = g.param(store, lp.b2);
        let x = g.matmul(h, w1)?;
        let x = g.add_row(x, b1)?;
        let x = g.gelu(x);
        let x = g.matmul(x, w2)?;
        Ok(g.add_row(x, b2)?)
    }

    fn layer(&self, layer: usize) -> Result<&LayerParams> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or_else(|| KalaError::Config(format!("layer {layer} outside 1..={}", self.config.num_layers)))
    }

    /// One block. With modulation:
    /// `Ĥ = Γ∘LN(H+Attn(H)) + B`, `H̃ = Γ̃∘LN(Ĥ+FF(Ĥ)) + B̃`.
    pub fn block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        h_prev: Var,
        modulation: Option<&ModulationParams>,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let lp = self.layer(layer)?.clone();
        let n = g.dims(h_prev).0;
        if let Some(m) = modulation {
            m.check_shape(g, n, self.config.hidden)?;
        }
        let p = self.config.dropout;
        let attn = self.attention_block(g, store, layer, h_prev, dropout)?.output;
        let attn = dropout.apply(g, attn, p);
        let r1 = g.add(h_prev, attn)?;
        let g1 = g.param(store, lp.ln1_gain);
        let b1 = g.param(store, lp.ln1_bias);
        let mut hhat = g.layer_norm(r1, g1, b1, LAYER_NORM_EPS)?;
        if let Some(m) = modulation {
            hhat = apply_modulation(g, hhat, m.gamma1, m.beta1)?;
        }
        let ff = self.feed_forward_block(g, store, layer, hhat)?;
        let ff = dropout.apply(g, ff, p);
        let r2 = g.add(hhat, ff)?;
        let g2 = g.param(store, lp.ln2_gain);
        let b2 = g.param(store, lp.ln2_bias);
        let mut out = g.layer_norm(r2, g2, b2, LAYER_NORM_EPS)?;
        if let Some(m) = modulation {
            out = apply_modulation(g, out, m.gamma2, m.beta2)?;
        }
        Ok(out)
    }

    /// Run all layers, asking `cond` for modulation before each block.
    pub fn encode_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
        cond: &mut dyn LayerConditioner,
        dropout: &mut Dropout,
    ) -> Result<HiddenStates> {
        let mut layers = vec![self.embed(g, store, tokens, dropout)?];
        for l in 1..=self.config.num_layers {
            let h_prev = *layers.last().unwrap();
            let m = cond.modulation(g, store, l, h_prev, dropout)?;
            if m.is_some() && !self.config.kfm_locations.contains(&l) {
                return Err(KalaError::Config(format!("modulation supplied for layer {l}, which is not a KFM location")));
            }
            layers.push(self.block(g, store, l, h_prev, m.as_ref(), dropout)?);
        }
        Ok(HiddenStates { layers })
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
        modulation: &BTreeMap<usize, ModulationParams>,
        dropout: &mut Dropout,
    ) -> Result<HiddenStates> {
        self.encode_with(g, store, tokens, &mut FixedModulation(modulation.clone()), dropout)
    }
}
