//! Rating files, evaluation protocols, metrics output and checkpoints.

pub mod checkpoint;
pub mod eval;
pub mod metrics;
pub mod parse;
pub mod runner;
pub mod split;
pub mod stream;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StreamProgress, CHECKPOINT_VERSION};
pub use eval::{expected_factor, mean_rating, predict_all, predict_with_fallback, purity, rmse, sgd_predict_all};
pub use metrics::{MetricsRow, MetricsWriter};
pub use parse::{parse_ratings, parse_ratings_with, parse_str, write_ratings, Dataset, IdMap, RatingFormat};
pub use runner::{fit_with_metrics, sgd_with_metrics, stream_with_metrics, Scoring};
pub use split::{kfold_splits, split_dataset, SplitMode, SplitSpec};
pub use stream::{chunk_stream, parse_chunk_stream, write_chunk_stream, RawEntry};
