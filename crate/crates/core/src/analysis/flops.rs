//! Analytic FLOPs in the style of the ELECTRA accounting script: a
//! multiply-add is 2 FLOPs and element-wise operations carry fixed constants.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{KalaError, Result};
use crate::trainer::{ModelConfig, Variant};

pub const DROPOUT_FLOPS: f64 = 4.0;
pub const LAYER_NORM_FLOPS: f64 = 5.0;
pub const ACTIVATION_FLOPS: f64 = 8.0;
pub const SOFTMAX_FLOPS: f64 = 5.0;
/// Forward plus backward, with backward costing about twice the forward.
pub const TRAINING_MULTIPLIER: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusStats {
    pub avg_nodes: f64,
    pub avg_edges_per_node: f64,
    pub max_seq_len: usize,
    pub memory_size: usize,
}

impl CorpusStats {
    pub fn validate(&self) -> Result<()> {
        if !(self.avg_nodes >= 0.0 && self.avg_edges_per_node >= 0.0) || !self.avg_nodes.is_finite() || !self.avg_edges_per_node.is_finite() {
            return Err(KalaError::Config("corpus statistics must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Averages over a set of assembled examples.
    pub fn from_examples(examples: &[crate::corpus::TaskExample], memory_size: usize) -> Self {
        let n = examples.len().max(1) as f64;
        let nodes: usize = examples.iter().map(|e| e.kg.num_nodes()).sum();
        let edges: usize = examples.iter().map(|e| e.kg.num_fact_edges()).sum();
        Self {
            avg_nodes: nodes as f64 / n,
            avg_edges_per_node: if nodes == 0 { 0.0 } else { edges as f64 / nodes as f64 },
            max_seq_len: examples.iter().map(|e| e.len()).max().unwrap_or(0),
            memory_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub variant: Variant,
    /// Forward FLOPs per sequence, by component.
    pub components: BTreeMap<String, f64>,
    pub forward: f64,
    pub training_multiplier: f64,
    pub training: f64,
}

/// `2·n·d_in·d_out`.
pub fn affine_flops(n: f64, d_in: f64, d_out: f64) -> f64 {
    2.0 * n * d_in * d_out
}

fn embedding_flops(v: f64, d: f64, s: f64) -> f64 {
    let per_token = 2.0 * d * v + 2.0 * d * (s + 2.0) + 2.0 * d + LAYER_NORM_FLOPS * d + DROPOUT_FLOPS * d;
    per_token * s
}

fn attention_flops(d: f64, heads: f64, s: f64) -> f64 {
    let per_token = 3.0 * 2.0 * d * d
        + 3.0 * d
        + 2.0 * d * s
        + SOFTMAX_FLOPS * s * heads
        + DROPOUT_FLOPS * s * heads
        + s * heads
        + 2.0 * d * s
        + 2.0 * d * d
        + d
        + DROPOUT_FLOPS * d
        + d
        + LAYER_NORM_FLOPS * d;
    per_token * s
}

fn feed_forward_flops(d: f64, ff: f64, s: f64) -> f64 {
    let per_token = 2.0 * d * ff + ACTIVATION_FLOPS * ff + ff + 2.0 * d * ff + d + DROPOUT_FLOPS * d + d + LAYER_NORM_FLOPS * d;
    per_token * s
}

/// Enabled h-MLPs at one location, over every position, plus applying the modulation.
fn kfm_flops(d: f64, hidden: f64, enabled: f64, s: f64) -> f64 {
    let mlp = 2.0 * d * hidden + hidden + ACTIVATION_FLOPS * hidden + 2.0 * hidden * d + d;
    enabled * (mlp + d) * s
}

/// One message over one edge in one layer.
pub fn gnn_edge_flops(d: f64, rel_dim: f64) -> f64 {
    let relation = 2.0 * rel_dim * d;
    let score = 2.0 * 4.0 * d * d + ACTIVATION_FLOPS * d + 2.0 * d;
    let message = 2.0 * d * d + 2.0 * d;
    relation + score + SOFTMAX_FLOPS + message
}

pub fn estimate_flops(cfg: &ModelConfig, stats: &CorpusStats) -> Result<FlopsReport> {
    stats.validate()?;
    let t = &cfg.transformer;
    let (d, ff, heads, layers) = (t.hidden as f64, t.intermediate as f64, t.heads as f64, t.num_layers as f64);
    let s = stats.max_seq_len as f64;
    let mut c = BTreeMap::new();
    c.insert("embedding".to_string(), embedding_flops(t.vocab_size as f64, d, s));
    c.insert("attention".to_string(), layers * attention_flops(d, heads, s));
    c.insert("feed_forward".to_string(), layers * feed_forward_flops(d, ff, s));
    if cfg.variant.uses_knowledge() {
        let locations = t.kfm_locations.len() as f64;
        let enabled = cfg.kfm.flags().iter().filter(|&&f| f).count() as f64;
        // Lookup counted like a dense embedding multiply over the whole memory.
        c.insert("memory".to_string(), affine_flops(stats.avg_nodes, stats.memory_size as f64, d));
        c.insert("kfm".to_string(), locations * kfm_flops(d, cfg.kfm.hidden_width(t.hidden) as f64, enabled, s));
    }
    if cfg.variant == Variant::KalaRelational {
        let rel = cfg.gnn.relation_width(t.hidden) as f64;
        let edges = stats.avg_edges_per_node * stats.avg_nodes;
        c.insert("gnn".to_string(), cfg.gnn.layers as f64 * edges * gnn_edge_flops(d, rel));
    }
    let forward = c.values().sum();
    Ok(FlopsReport {
        variant: cfg.variant,
        components: c,
        forward,
        training_multiplier: TRAINING_MULTIPLIER,
        training: forward * TRAINING_MULTIPLIER,
    })
}

/// Reports for every variant, with the training-FLOPs ratio to fine-tuning.
pub fn compare_variants(cfg: &ModelConfig, stats: &CorpusStats) -> Result<Vec<(FlopsReport, f64)>> {
    let mut base = cfg.clone();
    base.variant = Variant::FineTune;
    let reference = estimate_flops(&base, stats)?.training;
    Variant::ALL
        .into_iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.variant = v;
            let r = estimate_flops(&c, stats)?;
            let ratio = r.training / reference;
            Ok((r, ratio))
        })
        .collect()
}

pub fn format_flops_table(rows: &[(FlopsReport, f64)]) -> String {
    let names = ["embedding", "attention", "feed_forward", "memory", "kfm", "gnn"];
    let mut s = format!("{:<16}", "variant");
    for n in names {
        let _ = write!(s, " {n:>12}");
    }
    let _ = writeln!(s, " {:>12} {:>12} {:>8}", "forward", "training", "ratio");
    for (r, ratio) in rows {
        let _ = write!(s, "{:<16}", r.variant.name());
        for n in names {
            let _ = write!(s, " {:>12.4e}", r.components.get(n).copied().unwrap_or(0.0));
        }
        let _ = writeln!(s, " {:>12.4e} {:>12.4e} {:>8.4}", r.forward, r.training, ratio);
    }
    let _ = writeln!(
        s,
        "constants: multiply-add 2, dropout {DROPOUT_FLOPS}, layer norm {LAYER_NORM_FLOPS}, activation {ACTIVATION_FLOPS}, softmax {SOFTMAX_FLOPS}, training x{TRAINING_MULTIPLIER}"
    );
    s
}
