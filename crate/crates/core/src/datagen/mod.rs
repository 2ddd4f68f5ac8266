//! Datasets: records and manifests, synthetic generators, external ingestion.

mod ingest;
mod record;
pub mod shapes;
mod synth;

pub use ingest::{ingest_external, LayoutConfig};
pub use record::{Dataset, DatasetManifest, ManifestCase, SampleRecord, Split};
pub use synth::{synth_corpus, synth_seg_task, CorpusSpec, SegTaskSpec};
