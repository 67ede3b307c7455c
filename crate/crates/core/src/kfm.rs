//! Knowledge-conditioned feature modulation: per-token scale and shift derived
//! from retrieved entity vectors.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KalaError, Result};
use crate::numerics::{Graph, ParamId, ParamStore, RowSource, Tensor, Var};
use crate::transformer::INIT_STD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KfmConfig {
    pub gamma1: bool,
    pub beta1: bool,
    pub gamma2: bool,
    pub beta2: bool,
    /// Hidden width of each modulation MLP; 0 means the model width.
    pub mlp_hidden: usize,
    /// Start the final layer of every MLP at zero, i.e. at identity modulation.
    pub zero_init: bool,
}

impl Default for KfmConfig {
    fn default() -> Self {
        Self { gamma1: true, beta1: true, gamma2: true, beta2: true, mlp_hidden: 0, zero_init: true }
    }
}

impl KfmConfig {
    pub fn flags(&self) -> [bool; 4] {
        [self.gamma1, self.beta1, self.gamma2, self.beta2]
    }

    pub fn any_enabled(&self) -> bool {
        self.flags().iter().any(|&f| f)
    }

    pub fn hidden_width(&self, d: usize) -> usize {
        if self.mlp_hidden == 0 {
            d
        } else {
            self.mlp_hidden
        }
    }
}

/// Γ, B, Γ̃, B̃ as tape nodes, each `[|x|×d]`. `None` is identity for that matrix.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModulationParams {
    pub gamma1: Option<Var>,
    pub beta1: Option<Var>,
    pub gamma2: Option<Var>,
    pub beta2: Option<Var>,
}

/// Concrete modulation matrices with identity filled in for disabled parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationValues {
    pub gamma1: Tensor,
    pub beta1: Tensor,
    pub gamma2: Tensor,
    pub beta2: Tensor,
}

impl ModulationParams {
    pub fn check_shape(&self, g: &Graph, n: usize, d: usize) -> Result<()> {
        for v in [self.gamma1, self.beta1, self.gamma2, self.beta2].into_iter().flatten() {
            if g.dims(v) != (n, d) {
                return Err(KalaError::Config(format!("modulation matrix {:?} for hidden states [{n}×{d}]", g.dims(v))));
            }
        }
        Ok(())
    }

    pub fn values(&self, g: &Graph, n: usize, d: usize) -> ModulationValues {
        let get = |v: Option<Var>, fill: f64| v.map(|v| g.value(v).clone()).unwrap_or_else(|| Tensor::full(&[n, d], fill));
        ModulationValues {
            gamma1: get(self.gamma1, 1.0),
            beta1: get(self.beta1, 0.0),
            gamma2: get(self.gamma2, 1.0),
            beta2: get(self.beta2, 0.0),
        }
    }

    /// Constant modulation from explicit matrices.
    pub fn from_values(g: &mut Graph, v: &ModulationValues) -> Self {
        Self {
            gamma1: Some(g.constant(v.gamma1.clone())),
            beta1: Some(g.constant(v.beta1.clone())),
            gamma2: Some(g.constant(v.gamma2.clone())),
            beta2: Some(g.constant(v.beta2.clone())),
        }
    }
}

impl ModulationValues {
    pub fn identity(n: usize, d: usize) -> Self {
        Self {
            gamma1: Tensor::full(&[n, d], 1.0),
            beta1: Tensor::zeros(&[n, d]),
            gamma2: Tensor::full(&[n, d], 1.0),
            beta2: Tensor::zeros(&[n, d]),
        }
    }
}

/// `gamma ∘ normalized + beta`.
pub fn apply_modulation(g: &mut Graph, normalized: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
    let mut x = normalized;
    if let Some(gm) = gamma {
        x = g.mul(gm, x)?;
    }
    if let Some(b) = beta {
        x = g.add(x, b)?;
    }
    Ok(x)
}

/// A mention of the entity in row `slot` of the retrieved-vector matrix,
/// covering token positions `start..=end` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionSpan {
    pub slot: usize,
    pub start: usize,
    pub end: usize,
}

/// Reject out-of-range or overlapping spans.
pub fn validate_mentions(mentions: &[MentionSpan], seq_len: usize, slots: usize) -> Result<()> {
    let mut covered = vec![false; seq_len];
    for m in mentions {
        if m.start > m.end || m.end >= seq_len {
            return Err(KalaError::Annotation(format!(
                "mention {}..={} outside sequence of length {seq_len}",
                m.start, m.end
            )));
        }
        if m.slot >= slots {
            return Err(KalaError::Annotation(format!("mention refers to entity slot {} of {slots}", m.slot)));
        }
        for c in &mut covered[m.start..=m.end] {
            if *c {
                return Err(KalaError::Annotation(format!("overlapping mention at {}..={}", m.start, m.end)));
            }
            *c = true;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        Ok(g.add_row(o, b2)?)
    }
}

/// The four independent MLPs h1..h4 of one modulated layer.
#[derive(Clone, Debug)]
pub struct KfmLayer {
    pub layer: usize,
    mlps: [Option<Mlp>; 4],
}

const NAMES: [&str; 4] = ["h1", "h2", "h3", "h4"];

impl KfmLayer {
    pub fn new(layer: usize, d: usize, cfg: &KfmConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let hidden = cfg.hidden_width(d);
        let mut mlps = [None; 4];
        for (k, enabled) in cfg.flags().into_iter().enumerate() {
            if !enabled {
                continue;
            }
            let p = |s: &str| format!("kfm.layer{layer:02}.{}.{s}", NAMES[k]);
            let w1 = store.add_normal(&p("w1"), &[d, hidden], INIT_STD, rng);
            let b1 = store.add_zeros(&p("b1"), &[hidden], false);
            let w2 = if cfg.zero_init {
                store.add_zeros(&p("w2"), &[hidden, d], true)
            } else {
                store.add_normal(&p("w2"), &[hidden, d], INIT_STD, rng)
            };
            let b2 = store.add_zeros(&p("b2"), &[d], false);
            mlps[k] = Some(Mlp { w1, b1, w2, b2 });
        }
        Self { layer, mlps }
    }

    pub fn bind(layer: usize, cfg: &KfmConfig, store: &ParamStore) -> Result<Self> {
        let mut mlps = [None; 4];
        for (k, enabled) in cfg.flags().into_iter().enumerate() {
            if !enabled {
                continue;
            }
            let get = |s: &str| {
                let n = format!("kfm.layer{layer:02}.{}.{s}", NAMES[k]);
                store.id(&n).ok_or_else(|| KalaError::Checkpoint(format!("missing parameter {n}")))
            };
            mlps[k] = Some(Mlp { w1: get("w1")?, b1: get("b1")?, w2: get("w2")?, b2: get("b2")? });
        }
        Ok(Self { layer, mlps })
    }

    pub fn param_prefix(&self) -> String {
        format!("kfm.layer{:02}.", self.layer)
    }

    /// Build Γ, B, Γ̃, B̃ for a sequence.
    ///
    /// `vectors` is `[K×d]`, one retrieved vector per entity slot; `null[k]` marks
    /// slots whose MLP outputs are forced to zero. Every token of a mention gets the
    /// same row; tokens outside mentions get identity rows.
    pub fn compute_modulation(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vectors: Var,
        null: &[bool],
        mentions: &[MentionSpan],
        seq_len: usize,
    ) -> Result<ModulationParams> {
        let (slots, d) = g.dims(vectors);
        if null.len() != slots {
            return Err(KalaError::Contract("null flags do not match entity slots".into()));
        }
        validate_mentions(mentions, seq_len, slots)?;
        let keep: Vec<bool> = null.iter().map(|n| !n).collect();
        let mut out = [None; 4];
        for (k, mlp) in self.mlps.iter().enumerate() {
            let Some(mlp) = mlp else { continue };
            let h = mlp.forward(g, store, vectors)?;
            let h = g.mask_rows(h, &keep)?;
            let is_gamma = k % 2 == 0;
            let (src, fill) = if is_gamma { (g.add_scalar(h, 1.0), 1.0) } else { (h, 0.0) };
            let sources: Vec<RowSource> = mentions
                .iter()
                .flat_map(|m| (m.start..=m.end).map(move |j| RowSource { dest: j, src, src_row: m.slot }))
                .collect();
            out[k] = Some(g.assemble_rows(seq_len, d, fill, &sources)?);
        }
        Ok(ModulationParams { gamma1: out[0], beta1: out[1], gamma2: out[2], beta2: out[3] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn layer(cfg: &KfmConfig) -> (KfmLayer, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = KfmLayer::new(1, 4, cfg, &mut store, &mut rng);
        (l, store)
    }

    fn randomize_final(store: &mut ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            let mut tmp = ParamStore::new();
            let fresh = tmp.add_normal("x", &shape, 0.5, &mut rng);
            store.set_value(id, tmp.value(fresh).clone()).unwrap();
        }
    }

    #[test]
    fn apply_modulation_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.5, 0.0]).unwrap());
        let one = g.constant(Tensor::full(&[2, 2], 1.0));
        let zero = g.constant(Tensor::zeros(&[2, 2]));
        let y = apply_modulation(&mut g, x, Some(one), Some(zero)).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));

        let target = g.constant(Tensor::new(vec![2, 2], vec![9.0, 8.0, 7.0, 6.0]).unwrap());
        let y = apply_modulation(&mut g, x, Some(zero), Some(target)).unwrap();
        assert_eq!(g.value(y), g.value(target));

        let two = g.constant(Tensor::full(&[2, 2], 2.0));
        let neg = g.scale(x, -1.0);
        let y = apply_modulation(&mut g, x, Some(two), Some(neg)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn null_entity_rows_are_identity() {
        let (l, mut store) = layer(&KfmConfig::default());
        randomize_final(&mut store);
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![2, 4], vec![0.5, -0.2, 0.1, 0.9, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let mentions = [MentionSpan { slot: 0, start: 0, end: 1 }, MentionSpan { slot: 1, start: 3, end: 3 }];
        let m = l.compute_modulation(&mut g, &store, v, &[false, true], &mentions, 5).unwrap();
        let vals = m.values(&g, 5, 4);
        for t in [&vals.gamma1, &vals.gamma2] {
            assert_eq!(t.row(3), &[1.0; 4]);
            assert_eq!(t.row(2), &[1.0; 4]);
        }
        for t in [&vals.beta1, &vals.beta2] {
            assert_eq!(t.row(3), &[0.0; 4]);
        }
        // rows within one mention are identical and non-trivial
        for t in [&vals.gamma1, &vals.beta1, &vals.gamma2, &vals.beta2] {
            assert_eq!(t.row(0), t.row(1));
        }
        assert_ne!(vals.beta1.row(0), &[0.0; 4]);
    }

    #[test]
    fn zero_mlps_give_identity_everywhere() {
        let (l, mut store) = layer(&KfmConfig::default());
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let v = g.constant(Tensor::full(&[1, 4], 3.0));
        let m = l
            .compute_modulation(&mut g, &store, v, &[false], &[MentionSpan { slot: 0, start: 1, end: 2 }], 4)
            .unwrap();
        assert_eq!(m.values(&g, 4, 4), ModulationValues::identity(4, 4));
    }

    #[test]
    fn disabled_flags_are_absent() {
        let cfg = KfmConfig { gamma1: false, beta2: false, ..Default::default() };
        let (l, store) = layer(&cfg);
        assert!(store.id("kfm.layer01.h1.w1").is_none());
        let mut g = Graph::new();
        let v = g.constant(Tensor::full(&[1, 4], 1.0));
        let m = l
            .compute_modulation(&mut g, &store, v, &[false], &[MentionSpan { slot: 0, start: 0, end: 0 }], 2)
            .unwrap();
        assert!(m.gamma1.is_none() && m.beta2.is_none());
        assert!(m.beta1.is_some() && m.gamma2.is_some());
    }

    #[test]
    fn annotation_errors() {
        let (l, store) = layer(&KfmConfig::default());
        let mut g = Graph::new();
        let v = g.constant(Tensor::full(&[2, 4], 1.0));
        let overlap = [MentionSpan { slot: 0, start: 0, end: 2 }, MentionSpan { slot: 1, start: 2, end: 3 }];
        assert!(matches!(
            l.compute_modulation(&mut g, &store, v, &[false, false], &overlap, 5),
            Err(KalaError::Annotation(_))
        ));
        let out_of_range = [MentionSpan { slot: 0, start: 3, end: 5 }];
        assert!(matches!(
            l.compute_modulation(&mut g, &store, v, &[false, false], &out_of_range, 5),
            Err(KalaError::Annotation(_))
        ));
    }
}
