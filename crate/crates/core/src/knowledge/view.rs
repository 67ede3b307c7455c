use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{KalaError, Result};

use super::memory::NULL_ROW;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Message from the tail of a fact to its head.
    Forward,
    /// Message from the head of a fact to its tail.
    Reverse,
    SelfLoop,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphNode {
    pub key: String,
    pub memory_row: usize,
}

impl GraphNode {
    pub fn is_null(&self) -> bool {
        self.memory_row == NULL_ROW
    }
}

/// Directed message edge `src → dst`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct GraphEdge {
    pub dst: usize,
    pub src: usize,
    /// Row in the relation embedding table.
    pub relation: usize,
    pub direction: Direction,
}

/// Per-context graph. Nodes `0..num_targets` are the context's mentioned
/// entities in slot order; further nodes are fact endpoints not mentioned.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraphView {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub num_targets: usize,
}

/// Relation rows: forward `0..R`, reverse `R..2R`, self-loop `2R`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelationLayout {
    pub num_relations: usize,
}

impl RelationLayout {
    pub fn forward(&self, r: usize) -> usize {
        r
    }
    pub fn reverse(&self, r: usize) -> usize {
        self.num_relations + r
    }
    pub fn self_loop(&self) -> usize {
        2 * self.num_relations
    }
    pub fn rows(&self) -> usize {
        2 * self.num_relations + 1
    }
}

impl KnowledgeGraphView {
    /// Build a view from the mentioned entities `(key, memory row)` and the
    /// context's facts `(head key, relation index, tail key)`. `resolve` maps keys
    /// that are not mentioned to memory rows (null row for unknown entities).
    pub fn build(
        targets: &[(String, usize)],
        facts: &[(String, usize, String)],
        resolve: impl Fn(&str) -> usize,
        layout: RelationLayout,
        self_loops: bool,
    ) -> Result<Self> {
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut nodes = Vec::new();
        for (key, row) in targets {
            if index.insert(key.clone(), nodes.len()).is_some() {
                return Err(KalaError::Annotation(format!("entity {key} occupies two slots")));
            }
            nodes.push(GraphNode { key: key.clone(), memory_row: *row });
        }
        let num_targets = nodes.len();
        let mut edges = BTreeSet::new();
        for (h, r, t) in facts {
            if *r >= layout.num_relations {
                return Err(KalaError::Lookup(format!("relation index {r} without an embedding row")));
            }
            if h == t {
                continue;
            }
            let mut node = |k: &String| -> usize {
                *index.entry(k.clone()).or_insert_with(|| {
                    nodes.push(GraphNode { key: k.clone(), memory_row: resolve(k) });
                    nodes.len() - 1
                })
            };
            let hi = node(h);
            let ti = node(t);
            edges.insert(GraphEdge { dst: hi, src: ti, relation: layout.forward(*r), direction: Direction::Forward });
            edges.insert(GraphEdge { dst: ti, src: hi, relation: layout.reverse(*r), direction: Direction::Reverse });
        }
        if self_loops {
            for i in 0..nodes.len() {
                edges.insert(GraphEdge { dst: i, src: i, relation: layout.self_loop(), direction: Direction::SelfLoop });
            }
        }
        Ok(Self { nodes, edges: edges.into_iter().collect(), num_targets })
    }

    /// Incoming edges of node `i`: its neighborhood.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = &GraphEdge> {
        self.edges.iter().filter(move |e| e.dst == i)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Edges excluding self-loops.
    pub fn num_fact_edges(&self) -> usize {
        self.edges.iter().filter(|e| e.direction != Direction::SelfLoop).count()
    }
}
