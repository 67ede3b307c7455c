//! FLOPs estimates, modulation statistics and unseen-entity proximity.

mod flops;
mod modulation;
mod proximity;

pub use flops::{
    affine_flops, compare_variants, estimate_flops, format_flops_table, gnn_edge_flops, CorpusStats, FlopsReport,
    ACTIVATION_FLOPS, DROPOUT_FLOPS, LAYER_NORM_FLOPS, SOFTMAX_FLOPS, TRAINING_MULTIPLIER,
};
pub use modulation::{modulation_histogram, Histogram, MatrixHistogram, ModulationReport, DEFAULT_BINS};
pub use proximity::{cosine_distance, entity_representations, nearest_seen, unseen_proximity, NearestSeen, Proximity};
