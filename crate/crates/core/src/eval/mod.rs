//! Greedy decoding, cross-decoding with foreign memories, and the pair matrix.

mod decode;
mod matrix;
mod metrics;

pub use decode::{check_compatible, cross_decode, greedy_decode, greedy_decode_batch, DecodeResult, StopReason};
pub use matrix::{binding_advantage, pair_matrix, read_matrix_csv, score_pair, thread_pool, write_matrix_csv, MetricsRow};
pub(crate) use matrix::csv_err;
pub use metrics::{mean_levsim, metric_exact, metric_levsim, metric_token_acc, normalize_ids, token_accuracy};
