//! Interaction logs, item embeddings, evaluation splits and the synthetic
//! cluster-Markov generator.

mod embeddings;
mod interactions;
mod split;
mod synthetic;

pub use embeddings::EmbeddingTable;
pub use interactions::{
    five_core_filter, k_core_filter, load_interactions, IdMap, InteractionDataset,
    InteractionFormat, UserRecord,
};
pub use split::{make_split, sparsify_train, EvalSplit, SplitMode, SplitUser};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData, Transition};

/// Default truncation cap for Amazon-review style data, in items.
pub const DEFAULT_MAX_LEN_SHORT: usize = 20;
/// Default truncation cap for MovieLens style data, in items.
pub const DEFAULT_MAX_LEN_LONG: usize = 200;
