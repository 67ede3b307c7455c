//! Point-wise and relational (attentive, two-layer) retrieval of entity vectors.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KalaError, Result};
use crate::numerics::{Graph, ParamId, ParamStore, RowSource, Tensor, Var};
use crate::transformer::{Dropout, INIT_STD};

use super::memory::{EntityMemory, NULL_ROW};
use super::view::{GraphEdge, KnowledgeGraphView, RelationLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnnConfig {
    pub layers: usize,
    /// Relation embedding width before projection to the model width; 0 means half the model width.
    pub relation_dim: usize,
    /// Dropout on aggregated messages during training.
    pub dropout: f64,
    pub self_loops: bool,
    /// Negative slope of the scoring nonlinearity.
    pub leaky_slope: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self { layers: 2, relation_dim: 0, dropout: 0.1, self_loops: true, leaky_slope: 0.2 }
    }
}

impl GnnConfig {
    pub fn relation_width(&self, d: usize) -> usize {
        if self.relation_dim == 0 {
            (d / 2).max(1)
        } else {
            self.relation_dim
        }
    }
}

/// Relation embeddings (forward, reverse and self rows) and their projection to width `d`.
#[derive(Clone, Debug)]
pub struct RelationTable {
    pub layout: RelationLayout,
    emb: ParamId,
    proj: ParamId,
}

impl RelationTable {
    pub fn new(num_relations: usize, d: usize, rel_dim: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let layout = RelationLayout { num_relations };
        let emb = store.add_normal("gnn.relations.emb", &[layout.rows(), rel_dim], INIT_STD, rng);
        let proj = store.add_normal("gnn.relations.proj", &[rel_dim, d], INIT_STD, rng);
        Self { layout, emb, proj }
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| store.id(n).ok_or_else(|| KalaError::Checkpoint(format!("missing parameter {n}")));
        let emb = get("gnn.relations.emb")?;
        let (rows, _) = store.value(emb).dims2();
        Ok(Self { layout: RelationLayout { num_relations: (rows - 1) / 2 }, emb, proj: get("gnn.relations.proj")? })
    }

    /// All relation rows projected to the model width, `[(2R+1)×d]`.
    pub fn projected(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let e = g.param(store, self.emb);
        let p = g.param(store, self.proj);
        Ok(g.matmul(e, p)?)
    }
}

#[derive(Clone, Copy, Debug)]
struct GnnLayer {
    w: ParamId,
    a: ParamId,
    update_w: ParamId,
    update_b: ParamId,
}

impl GnnLayer {
    fn names(l: usize) -> [String; 4] {
        ["w", "a", "update_w", "update_b"].map(|s| format!("gnn.layer{l}.{s}"))
    }
}

/// Per-layer attention coefficients, aligned with `KnowledgeGraphView::edges`.
#[derive(Clone, Debug)]
pub struct Retrieved {
    /// `[K×d]`, one row per mentioned entity slot.
    pub vectors: Var,
    /// Slots with no unmasked support; their modulation is identity.
    pub null: Vec<bool>,
    pub attention: Vec<Var>,
}

/// Look up the mentioned entities' memory rows directly.
pub fn pointwise_retrieve(g: &mut Graph, store: &ParamStore, memory: &EntityMemory, rows: &[usize]) -> Result<Retrieved> {
    let vectors = memory.lookup(g, store, rows)?;
    Ok(Retrieved { vectors, null: rows.iter().map(|&r| r == NULL_ROW).collect(), attention: Vec::new() })
}

#[derive(Clone, Debug)]
pub struct RelationalRetriever {
    pub config: GnnConfig,
    pub relations: RelationTable,
    layers: Vec<GnnLayer>,
    dim: usize,
}

impl RelationalRetriever {
    /// Scoring weights normal(0, 0.02); UPDATE starts at the identity map.
    pub fn new(config: GnnConfig, num_relations: usize, d: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let relations = RelationTable::new(num_relations, d, config.relation_width(d), store, rng);
        let mut layers = Vec::new();
        for l in 1..=config.layers {
            let [w, a, uw, ub] = GnnLayer::names(l);
            let mut eye = Tensor::zeros(&[d, d]);
            for i in 0..d {
                eye.data_mut()[i * d + i] = 1.0;
            }
            layers.push(GnnLayer {
                w: store.add_normal(&w, &[4 * d, d], INIT_STD, rng),
                a: store.add_normal(&a, &[d, 1], INIT_STD, rng),
                update_w: store.add(&uw, eye, true),
                update_b: store.add_zeros(&ub, &[d], false),
            });
        }
        Self { config, relations, layers, dim: d }
    }

    pub fn bind(config: GnnConfig, d: usize, store: &ParamStore) -> Result<Self> {
        let relations = RelationTable::bind(store)?;
        let mut layers = Vec::new();
        for l in 1..=config.layers {
            let ids = GnnLayer::names(l)
                .map(|n| store.id(&n).ok_or_else(|| KalaError::Checkpoint(format!("missing parameter {n}"))));
            let [w, a, uw, ub] = ids;
            layers.push(GnnLayer { w: w?, a: a?, update_w: uw?, update_b: ub? });
        }
        Ok(Self { config, relations, layers, dim: d })
    }

    /// ψ for every edge of one layer: `aᵀ σ(W·[e_i ∥ r_ij ∥ e_j ∥ h_ei])`, as `[E×1]`.
    #[allow(clippy::too_many_arguments)]
    fn edge_scores(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        states: Var,
        rel_proj: Var,
        ctx: Var,
        edges: &[GraphEdge],
    ) -> Result<Var> {
        let dst: Vec<usize> = edges.iter().map(|e| e.dst).collect();
        let src: Vec<usize> = edges.iter().map(|e| e.src).collect();
        let rel: Vec<usize> = edges.iter().map(|e| e.relation).collect();
        let ei = g.gather_rows(states, &dst)?;
        let ej = g.gather_rows(states, &src)?;
        let r = g.gather_rows(rel_proj, &rel)?;
        let h = g.gather_rows(ctx, &dst)?;
        self.score_rows(g, store, layer, ei, r, ej, h)
    }

    #[allow(clippy::too_many_arguments)]
    fn score_rows(&self, g: &mut Graph, store: &ParamStore, layer: usize, ei: Var, r: Var, ej: Var, h: Var) -> Result<Var> {
        let lp = self.layers[layer];
        let estar = g.concat_cols(&[ei, r, ej, h])?;
        let w = g.param(store, lp.w);
        let z = g.matmul(estar, w)?;
        let z = g.leaky_relu(z, self.config.leaky_slope);
        let a = g.param(store, lp.a);
        Ok(g.matmul(z, a)?)
    }

    /// ψ for one triplet given explicit vectors (0-based `layer`).
    pub fn score_triplet(&self, store: &ParamStore, layer: usize, e_i: &[f64], r_ij: &[f64], e_j: &[f64], h_ei: &[f64]) -> Result<f64> {
        let d = self.dim;
        if [e_i, r_ij, e_j, h_ei].iter().any(|v| v.len() != d) {
            return Err(KalaError::Numerics(crate::numerics::NumericsError::Shape(format!("triplet vectors must have width {d}"))));
        }
        if layer >= self.layers.len() {
            return Err(KalaError::Config(format!("GNN layer {layer} of {}", self.layers.len())));
        }
        let mut g = Graph::new();
        let row = |g: &mut Graph, v: &[f64]| g.constant(Tensor::new(vec![1, d], v.to_vec()).unwrap());
        let (ei, r, ej, h) = (row(&mut g, e_i), row(&mut g, r_ij), row(&mut g, e_j), row(&mut g, h_ei));
        let s = self.score_rows(&mut g, store, layer, ei, r, ej, h)?;
        Ok(g.value(s).item())
    }

    /// Two (or `config.layers`) rounds of attentive aggregation over the view.
    ///
    /// `context` is `[K×d]` with one context representation per mentioned slot
    /// (other nodes use zero). Null nodes are masked out of every softmax; a node
    /// left without unmasked neighbors becomes null for the next layer. A mentioned
    /// entity with a memory row but no support is a degenerate neighborhood.
    pub fn retrieve(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: &EntityMemory,
        view: &KnowledgeGraphView,
        context: Option<Var>,
        dropout: &mut Dropout,
    ) -> Result<Retrieved> {
        let k = view.num_targets;
        let n = view.num_nodes();
        let d = self.dim;
        if k == 0 {
            return Err(KalaError::Contract("retrieval needs at least one mentioned entity".into()));
        }
        let mut null: Vec<bool> = view.nodes.iter().map(|v| v.is_null()).collect();
        if view.edges.is_empty() {
            if let Some(i) = (0..k).find(|&i| !null[i]) {
                return Err(KalaError::DegenerateNeighborhood(format!("entity {} has no neighbors", view.nodes[i].key)));
            }
            let vectors = g.constant(Tensor::zeros(&[k, d]));
            return Ok(Retrieved { vectors, null: vec![true; k], attention: Vec::new() });
        }
        let rows: Vec<usize> = view.nodes.iter().map(|v| v.memory_row).collect();
        let mut states = memory.lookup(g, store, &rows)?;
        let ctx = match context {
            Some(c) => {
                if g.dims(c) != (k, d) {
                    return Err(KalaError::Contract(format!("context representations {:?}, expected [{k}×{d}]", g.dims(c))));
                }
                let sources: Vec<RowSource> = (0..k).map(|i| RowSource { dest: i, src: c, src_row: i }).collect();
                g.assemble_rows(n, d, 0.0, &sources)?
            }
            None => g.constant(Tensor::zeros(&[n, d])),
        };
        let rel_proj = self.relations.projected(g, store)?;
        let dst: Vec<usize> = view.edges.iter().map(|e| e.dst).collect();
        let src: Vec<usize> = view.edges.iter().map(|e| e.src).collect();
        let mut attention = Vec::with_capacity(self.layers.len());
        for (l, lp) in self.layers.iter().enumerate() {
            let mask: Vec<bool> = src.iter().map(|&s| !null[s]).collect();
            let mut support = vec![false; n];
            for (e, &m) in mask.iter().enumerate() {
                support[dst[e]] |= m;
            }
            if l == 0 {
                if let Some(i) = (0..k).find(|&i| !null[i] && !support[i]) {
                    return Err(KalaError::DegenerateNeighborhood(format!(
                        "every neighbor of {} is masked and there is no self-loop",
                        view.nodes[i].key
                    )));
                }
            }
            let psi = self.edge_scores(g, store, l, states, rel_proj, ctx, &view.edges)?;
            let alpha = g.segment_softmax(psi, &dst, n, &mask)?;
            attention.push(alpha);
            let ej = g.gather_rows(states, &src)?;
            let msg = g.scale_rows(ej, alpha)?;
            let agg = g.scatter_add_rows(msg, &dst, n)?;
            let agg = dropout.apply(g, agg, self.config.dropout);
            let uw = g.param(store, lp.update_w);
            let ub = g.param(store, lp.update_b);
            let upd = g.matmul(agg, uw)?;
            let mut upd = g.add_row(upd, ub)?;
            if l + 1 < self.layers.len() {
                upd = g.relu(upd);
            }
            states = g.mask_rows(upd, &support)?;
            null = support.iter().map(|s| !s).collect();
        }
        let targets: Vec<usize> = (0..k).collect();
        let vectors = g.gather_rows(states, &targets)?;
        Ok(Retrieved { vectors, null: null[..k].to_vec(), attention })
    }

    /// First-layer attention coefficients over the neighborhood of node `i`,
    /// as `(edge, α)` pairs. Fails if every neighbor is masked.
    pub fn neighbor_attention(
        &self,
        store: &ParamStore,
        memory: &EntityMemory,
        view: &KnowledgeGraphView,
        i: usize,
        context: &[f64],
    ) -> Result<Vec<(GraphEdge, f64)>> {
        let d = self.dim;
        if context.len() != d || i >= view.num_nodes() {
            return Err(KalaError::Contract(format!("context of width {} for node {i}", context.len())));
        }
        let edges: Vec<GraphEdge> = view.neighbors(i).copied().collect();
        let masked: Vec<bool> = edges.iter().map(|e| !view.nodes[e.src].is_null()).collect();
        if !masked.iter().any(|&m| m) {
            return Err(KalaError::DegenerateNeighborhood(format!("node {} has no unmasked neighbor", view.nodes[i].key)));
        }
        let mut g = Graph::new();
        let rows: Vec<usize> = view.nodes.iter().map(|v| v.memory_row).collect();
        let states = memory.lookup(&mut g, store, &rows)?;
        let mut ctx = Tensor::zeros(&[view.num_nodes(), d]);
        ctx.data_mut()[i * d..(i + 1) * d].copy_from_slice(context);
        let ctx = g.constant(ctx);
        let rel_proj = self.relations.projected(&mut g, store)?;
        let psi = self.edge_scores(&mut g, store, 0, states, rel_proj, ctx, &edges)?;
        let seg = vec![0; edges.len()];
        let alpha = g.segment_softmax(psi, &seg, 1, &masked)?;
        Ok(edges.into_iter().zip(g.value(alpha).data().iter().copied()).collect())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}
