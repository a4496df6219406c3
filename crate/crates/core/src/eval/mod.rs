//! Classification metrics, label-level retrieval and visualization exports.

mod export;
mod metrics;
mod retrieval;

pub use export::{attention_maps, export_attention, export_embeddings, label_embeddings, write_pgm, AttentionExport};
pub use metrics::{average_precision, evaluate, metrics, AveragePrecision, MetricsReport};
pub use retrieval::{retrieve, Gallery, Hit, Query, RetrievalResult};
