//! Configuration, persistence, data ingestion, synthetic data and report
//! rendering used by the command-line pipeline.

mod checkpoint;
mod config;
mod dataset;
mod report;
mod synthetic;

pub use checkpoint::{fnv1a64, write_atomic, Checkpoint};
pub use config::{KeyValues, PipelineConfig};
pub use dataset::{ingest, parse_csv, parse_raw, parse_split, split_to_text, to_csv, to_raw, write_dataset, Dataset, Format};
pub use report::{gain_columns, parse_metrics, render_metrics, render_route_reports};
pub use synthetic::{adjusted_rand_index, generate, SyntheticData, SyntheticSpec};
