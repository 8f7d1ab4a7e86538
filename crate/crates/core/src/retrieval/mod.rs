//! Embedding index with exact and clustered search, and the offline
//! evaluation harness (Recall@K, GAUC).

mod eval;
mod index;
mod metrics;


pub use eval::{evaluate, EvalConfig, EvalQuery, EvalReport, EvalSpec, MetricRecord};
pub use index::{Clusters, EmbeddingIndex, KMEANS_ITERATIONS, NORM_TOLERANCE};
pub use metrics::{auc, gauc, recall_at_k};
