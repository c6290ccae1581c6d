//! Rating ingestion, binarization, splitting and popularity profiles.

mod ingest;
mod matrix;
mod snapshot;
mod split;

pub use ingest::{
    binarize, compact, load_ratings, parse_ratings, ColumnLayout, Delimiter, HeaderMode,
    IdVocabulary, RatingRecord,
};
pub use matrix::{popularity, DatasetSplit, InteractionMatrix, PopularityProfile};
pub use snapshot::SplitSnapshot;
pub use split::{holdout_users, select_holdout, split_random, split_temporal, SplitRatios};
