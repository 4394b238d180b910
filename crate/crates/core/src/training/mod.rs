//! Optimization, the seven training strategies, checkpoints and metric logs.

mod checkpoint;
mod config;
mod fit;
mod model;
mod optim;
mod prepared;
mod strategies;

#[cfg(test)]
mod tests;

use std::path::Path;

pub use checkpoint::Checkpoint;
pub use config::{Strategy, TrainRunConfig};
pub use fit::{fit_retrieval, fit_seq2seq, EpochMetrics, FitOutcome, FitSettings, RetrievalVal, Secondary, Snapshot};
pub use model::{text_query, text_score, Arch, ArchKind, Model, Query};
pub use optim::{clip_global_norm, global_norm, Adam, CyclicLr, Moments, OptimConfig};
pub use prepared::{compute_features, Prepared};
pub use strategies::{
    evaluate_models, mtl_secondary, run_seeds, train, train_asr_slt, train_grounded, train_grounded_model, train_mtl, train_pipeline,
    train_prepared, MtlVariant, Pairing, PipelineMode, RunOutcome, SeedSummary, TextMetric, TrainedModel,
};

use crate::error::{Error, Result};

/// Per-epoch metrics as CSV text (empty cells for metrics a stage lacks).
pub fn metrics_csv(rows: &[EpochMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record([
            "stage", "epoch", "lr", "loss", "secondary_loss", "val_r1", "val_r5", "val_r10", "val_medr", "val_wer", "val_bleu",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
