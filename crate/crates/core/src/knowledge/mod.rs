//! Entity memory, per-context knowledge graph views and retrieval.

mod memory;
mod retrieval;
mod view;

pub use memory::{EntityMemory, NULL_ROW};
pub use retrieval::{pointwise_retrieve, GnnConfig, RelationTable, RelationalRetriever, Retrieved};
pub use view::{Direction, GraphEdge, GraphNode, KnowledgeGraphView, RelationLayout};
