use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    assemble_documents, AssemblyContext, AssemblyOptions, Corpus, Document, EntityVocabulary, Payload, Prepared,
    RelationVocab, TagSet, TaskExample, TaskKind, TokenVocab,
};
use crate::error::{KalaError, Result};
use crate::kfm::{KfmConfig, KfmLayer, ModulationParams};
use crate::knowledge::{pointwise_retrieve, EntityMemory, GnnConfig, RelationalRetriever, Retrieved};
use crate::numerics::{Graph, ParamId, ParamStore, RowSource, Var};
use crate::transformer::{Dropout, Encoder, HiddenStates, LayerConditioner, TransformerConfig, INIT_STD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FineTune,
    KalaPointwise,
    KalaRelational,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::FineTune, Variant::KalaPointwise, Variant::KalaRelational];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FineTune => "fine-tune",
            Variant::KalaPointwise => "kala-pointwise",
            Variant::KalaRelational => "kala-relational",
        }
    }

    pub fn uses_knowledge(self) -> bool {
        self != Variant::FineTune
    }
}

impl std::str::FromStr for Variant {
    type Err = KalaError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| KalaError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryInit {
    /// normal(0, 0.02) rows.
    Random,
    /// Mean mention state of the untrained encoder at the first KFM input.
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub transformer: TransformerConfig,
    pub kfm: KfmConfig,
    pub gnn: GnnConfig,
    pub memory_init: MemoryInit,
    /// Recompute context representations and retrieval at every KFM layer
    /// instead of sharing the first KFM layer's result.
    pub per_layer_retrieval: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::KalaRelational,
            transformer: TransformerConfig::default(),
            kfm: KfmConfig::default(),
            gnn: GnnConfig::default(),
            memory_init: MemoryInit::Random,
            per_layer_retrieval: false,
        }
    }
}

impl ModelConfig {
    pub fn assembly_options(&self) -> AssemblyOptions {
        AssemblyOptions { max_len: self.transformer.max_len, self_loops: self.gnn.self_loops }
    }
}

/// Everything needed to map text and ids to model inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub task: TaskKind,
    pub tokens: TokenVocab,
    pub entities: EntityVocabulary,
    pub relations: RelationVocab,
    pub tags: Option<TagSet>,
}

impl Vocabularies {
    pub fn from_prepared(p: &Prepared) -> Self {
        Self {
            task: p.task,
            tokens: p.tokens.clone(),
            entities: p.entities.clone(),
            relations: p.relations.clone(),
            tags: p.tags.clone(),
        }
    }

    /// Assemble documents of `corpus` with these vocabularies.
    pub fn assemble(&self, corpus: &Corpus, docs: &[Document], options: AssemblyOptions) -> Result<Vec<TaskExample>> {
        let ctx = AssemblyContext {
            tokens: &self.tokens,
            entities: &self.entities,
            relations: &self.relations,
            tags: self.tags.as_ref(),
            options,
        };
        assemble_documents(corpus, docs, &ctx)
    }

    pub fn num_labels(&self) -> usize {
        match self.task {
            TaskKind::Qa => 2,
            TaskKind::Tagging => self.tags.as_ref().map_or(1, TagSet::len),
        }
    }
}

const KNOWLEDGE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Independent dropout streams for the encoder and the knowledge modules, so
/// variants that differ only in knowledge modules see identical encoder masks.
pub struct Streams {
    pub encoder: Dropout,
    pub knowledge: Dropout,
}

impl Streams {
    pub fn eval() -> Self {
        Self { encoder: Dropout::eval(), knowledge: Dropout::eval() }
    }

    pub fn train(seed: u64) -> Self {
        Self { encoder: Dropout::train(seed), knowledge: Dropout::train(seed ^ KNOWLEDGE_STREAM) }
    }
}

#[derive(Clone, Copy, Debug)]
struct Head {
    w: ParamId,
    b: ParamId,
}

pub struct Forward {
    pub hidden: HiddenStates,
    /// `[n×2]` start/end logits for QA, `[n×T]` tag logits for tagging.
    pub logits: Var,
    pub modulation: BTreeMap<usize, ModulationParams>,
    pub retrieved: Option<Retrieved>,
}

#[derive(Clone, Debug)]
pub struct KalaModel {
    pub config: ModelConfig,
    pub task: TaskKind,
    pub num_labels: usize,
    pub encoder: Encoder,
    head: Head,
    pub memory: Option<EntityMemory>,
    pub retriever: Option<RelationalRetriever>,
    pub kfm: Vec<KfmLayer>,
}

impl KalaModel {
    /// Create parameters. Encoder and head draw from the seed's main stream;
    /// knowledge modules draw from a separate stream.
    pub fn new(config: ModelConfig, vocab: &Vocabularies, seed: u64) -> Result<(Self, ParamStore)> {
        let mut config = config;
        config.transformer.vocab_size = vocab.tokens.len();
        config.transformer.validate()?;
        if config.variant.uses_knowledge() && !config.kfm.any_enabled() && !config.transformer.kfm_locations.is_empty() {
            log::warn!("all KFM flags disabled: knowledge modules have no effect");
        }
        let d = config.transformer.hidden;
        let labels = vocab.num_labels();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(config.transformer.clone(), &mut store, &mut rng)?;
        let head = Head {
            w: store.add_normal("head.w", &[d, labels], INIT_STD, &mut rng),
            b: store.add_zeros("head.b", &[labels], false),
        };
        let mut krng = ChaCha8Rng::seed_from_u64(seed ^ KNOWLEDGE_STREAM);
        let (mut memory, mut retriever, mut kfm) = (None, None, Vec::new());
        if config.variant.uses_knowledge() {
            memory = Some(EntityMemory::new(vocab.entities.len(), d, &mut store, &mut krng));
            if config.variant == Variant::KalaRelational {
                retriever =
                    Some(RelationalRetriever::new(config.gnn.clone(), vocab.relations.len(), d, &mut store, &mut krng));
            }
            for &l in &config.transformer.kfm_locations {
                kfm.push(KfmLayer::new(l, d, &config.kfm, &mut store, &mut krng));
            }
        }
        let task = vocab.task;
        Ok((Self { config, task, num_labels: labels, encoder, head, memory, retriever, kfm }, store))
    }

    /// Re-attach to parameters loaded from a checkpoint.
    pub fn bind(config: ModelConfig, task: TaskKind, store: &ParamStore) -> Result<Self> {
        let encoder = Encoder::bind(config.transformer.clone(), store)?;
        let get = |n: &str| store.id(n).ok_or_else(|| KalaError::Checkpoint(format!("missing parameter {n}")));
        let head = Head { w: get("head.w")?, b: get("head.b")? };
        let num_labels = store.value(head.w).dims2().1;
        let d = config.transformer.hidden;
        let (mut memory, mut retriever, mut kfm) = (None, None, Vec::new());
        if config.variant.uses_knowledge() {
            memory = Some(EntityMemory::bind(store)?);
            if config.variant == Variant::KalaRelational {
                retriever = Some(RelationalRetriever::bind(config.gnn.clone(), d, store)?);
            }
            for &l in &config.transformer.kfm_locations {
                kfm.push(KfmLayer::bind(l, &config.kfm, store)?);
            }
        }
        Ok(Self { config, task, num_labels, encoder, head, memory, retriever, kfm })
    }

    fn kfm_for(&self, layer: usize) -> Option<&KfmLayer> {
        self.kfm.iter().find(|k| k.layer == layer)
    }

    /// Retrieved vectors for the example's entity slots given the block input `h`.
    pub fn retrieve(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ex: &TaskExample,
        h: Var,
        dropout: &mut Dropout,
    ) -> Result<Retrieved> {
        let memory = self.memory.as_ref().ok_or_else(|| KalaError::Contract("variant has no entity memory".into()))?;
        match &self.retriever {
            None => pointwise_retrieve(g, store, memory, &ex.memory_rows),
            Some(r) => {
                let ctx = context_representations(g, ex, h)?;
                r.retrieve(g, store, memory, &ex.kg, Some(ctx), dropout)
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ex: &TaskExample, streams: &mut Streams) -> Result<Forward> {
        let mut cond = Conditioner { model: self, ex, kdrop: &mut streams.knowledge, cache: None, modulation: BTreeMap::new() };
        let hidden = self.encoder.encode_with(g, store, &ex.token_ids, &mut cond, &mut streams.encoder)?;
        let (modulation, retrieved) = (cond.modulation, cond.cache);
        let w = g.param(store, self.head.w);
        let b = g.param(store, self.head.b);
        let z = g.matmul(hidden.last(), w)?;
        let logits = g.add_row(z, b)?;
        Ok(Forward { hidden, logits, modulation, retrieved })
    }

    /// Task loss of one example.
    pub fn loss(&self, g: &mut Graph, fwd: &Forward, ex: &TaskExample) -> Result<Var> {
        match (&ex.payload, self.task) {
            (Payload::Span { start, end }, TaskKind::Qa) => span_loss(g, fwd.logits, *start, *end),
            (Payload::Tags(tags), TaskKind::Tagging) => {
                let positions: Vec<usize> = (ex.context_range.0..ex.context_range.1).collect();
                let gold: Vec<usize> = positions.iter().map(|&p| tags[p]).collect();
                tag_loss(g, fwd.logits, &positions, &gold)
            }
            _ => Err(KalaError::Contract(format!("{}: payload does not match the model's task", ex.doc_id))),
        }
    }

    /// Overwrite memory rows with the untrained encoder's mean mention state
    /// at the input of the first KFM layer.
    pub fn init_memory_from_encoder(&self, store: &mut ParamStore, examples: &[TaskExample]) -> Result<()> {
        let Some(memory) = &self.memory else { return Ok(()) };
        let Some(first) = self.config.transformer.first_kfm_layer() else { return Ok(()) };
        let d = memory.dim();
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for ex in examples {
            let mut g = Graph::new();
            let hidden = self.encoder.encode_with(
                &mut g,
                store,
                &ex.token_ids,
                &mut crate::transformer::Unconditioned,
                &mut Dropout::eval(),
            )?;
            let h = g.value(hidden.layers[first - 1]).clone();
            for m in &ex.mentions {
                let row = ex.memory_rows[m.slot];
                if row == crate::knowledge::NULL_ROW {
                    continue;
                }
                let e = sums.entry(row).or_insert_with(|| (vec![0.0; d], 0));
                for p in m.start..=m.end {
                    for (a, v) in e.0.iter_mut().zip(h.row(p)) {
                        *a += v;
                    }
                    e.1 += 1;
                }
            }
        }
        for (row, (sum, n)) in sums {
            let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
            memory.write_row(store, row, &mean)?;
        }
        Ok(())
    }
}

/// `[K×d]`: mean of the block input over each slot's first mention.
pub fn context_representations(g: &mut Graph, ex: &TaskExample, h: Var) -> Result<Var> {
    let k = ex.entities.len();
    let d = g.dims(h).1;
    let mut sources = Vec::with_capacity(k);
    for slot in 0..k {
        let m = ex
            .mentions
            .iter()
            .find(|m| m.slot == slot)
            .ok_or_else(|| KalaError::Annotation(format!("{}: entity slot {slot} has no mention", ex.doc_id)))?;
        let rows: Vec<usize> = (m.start..=m.end).collect();
        let mean = g.mean_rows(h, &rows)?;
        sources.push(RowSource { dest: slot, src: mean, src_row: 0 });
    }
    Ok(g.assemble_rows(k, d, 0.0, &sources)?)
}

struct Conditioner<'a> {
    model: &'a KalaModel,
    ex: &'a TaskExample,
    kdrop: &'a mut Dropout,
    cache: Option<Retrieved>,
    modulation: BTreeMap<usize, ModulationParams>,
}

impl LayerConditioner for Conditioner<'_> {
    fn modulation(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        h_prev: Var,
        _dropout: &mut Dropout,
    ) -> Result<Option<ModulationParams>> {
        let Some(kfm) = self.model.kfm_for(layer) else { return Ok(None) };
        if self.ex.entities.is_empty() {
            return Ok(None);
        }
        let retrieved = match &self.cache {
            Some(r) if !self.model.config.per_layer_retrieval => r.clone(),
            _ => {
                let r = self.model.retrieve(g, store, self.ex, h_prev, self.kdrop)?;
                self.cache = Some(r.clone());
                r
            }
        };
        let n = self.ex.token_ids.len();
        let m = kfm.compute_modulation(g, store, retrieved.vectors, &retrieved.null, &self.ex.mentions, n)?;
        self.modulation.insert(layer, m);
        Ok(Some(m))
    }
}

/// Sum of start and end cross-entropies over all positions.
pub fn span_loss(g: &mut Graph, logits: Var, start: usize, end: usize) -> Result<Var> {
    let (n, c) = g.dims(logits);
    if c != 2 {
        return Err(KalaError::Contract(format!("span logits must be [n×2], got [{n}×{c}]")));
    }
    if start > end || end >= n {
        return Err(KalaError::Contract(format!("gold span ({start}, {end}) outside sequence of {n}")));
    }
    let t = g.transpose(logits);
    Ok(g.cross_entropy(t, &[start, end], 1.0)?)
}

/// Mean tag cross-entropy over the given positions.
pub fn tag_loss(g: &mut Graph, logits: Var, positions: &[usize], gold: &[usize]) -> Result<Var> {
    let (n, t) = g.dims(logits);
    if positions.is_empty() || positions.len() != gold.len() {
        return Err(KalaError::Contract("tag loss needs one gold tag per scored position".into()));
    }
    if positions.iter().any(|&p| p >= n) || gold.iter().any(|&y| y >= t) {
        return Err(KalaError::Contract(format!("gold tags outside [{n}×{t}] logits")));
    }
    let rows = g.gather_rows(logits, positions)?;
    Ok(g.cross_entropy(rows, gold, 1.0 / positions.len() as f64)?)
}

/// Best `(start, end)` within `range` by summed logits, with `end - start < max_len`.
/// Ties go to the lowest start, then the shortest span.
pub fn decode_span(start_logits: &[f64], end_logits: &[f64], range: (usize, usize), max_len: usize) -> Option<(usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    for s in range.0..range.1 {
        for e in s..range.1.min(s + max_len) {
            let score = start_logits[s] + end_logits[e];
            if best.is_none_or(|(b, _, _)| score > b) {
                best = Some((score, s, e));
            }
        }
    }
    best.map(|(_, s, e)| (s, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn span_loss_uniform_is_two_log_n() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[7, 2]));
        let l = span_loss(&mut g, x, 2, 4).unwrap();
        assert!((g.value(l).item() - 2.0 * 7f64.ln()).abs() < 1e-12);
        assert!(span_loss(&mut g, x, 2, 7).is_err());
        assert!(span_loss(&mut g, x, 3, 2).is_err());
    }

    #[test]
    fn span_loss_vanishes_for_confident_gold() {
        let mut g = Graph::new();
        let mut t = Tensor::zeros(&[4, 2]);
        t.data_mut()[2] = 50.0;
        t.data_mut()[2 * 2 + 1] = 50.0;
        let x = g.constant(t);
        let l = span_loss(&mut g, x, 1, 2).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn tag_loss_uniform_is_log_t() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[5, 3]));
        let l = tag_loss(&mut g, x, &[1, 2, 3], &[0, 2, 1]).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
        let mut t = Tensor::zeros(&[2, 3]);
        t.data_mut()[1] = 60.0;
        t.data_mut()[3] = 60.0;
        let x = g.constant(t);
        let l = tag_loss(&mut g, x, &[0, 1], &[1, 0]).unwrap();
        assert!(g.value(l).item() < 1e-20);
        assert!(tag_loss(&mut g, x, &[0], &[3]).is_err());
    }

    #[test]
    fn decode_ties_prefer_lowest_start_then_shortest() {
        let s = [0.0, 1.0, 1.0, 0.0];
        let e = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(decode_span(&s, &e, (0, 4), 30), Some((1, 1)));
        assert_eq!(decode_span(&[0.0; 4], &[0.0; 4], (1, 4), 30), Some((1, 1)));
        let s = [5.0, 0.0, 0.0, 0.0];
        let e = [0.0, 0.0, 0.0, 5.0];
        assert_eq!(decode_span(&s, &e, (0, 4), 3), Some((0, 0)));
        assert_eq!(decode_span(&s, &e, (0, 4), 4), Some((0, 3)));
        assert_eq!(decode_span(&s, &e, (2, 2), 4), None);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
    }
}
