//! Seed corpus ingestion, deduplication, benchmark decontamination and
//! per-source statistics.

mod hygiene;
mod ingest;
mod stats;

pub use hygiene::{
    decontaminate, dedupe, ngrams, ContaminatedPair, Decontamination, DecontaminationConfig,
    Dedup, HygieneError,
};
pub use ingest::{
    detect_language, ingest, load_testset, DropRecord, IngestError, IngestOutcome, SourceDescriptor, SourceFormat};
pub use stats::{corpus_stats, CorpusStats, SourceStats, StatsAccumulator, StatsError};
