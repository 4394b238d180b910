use std::collections::HashMap;

use crate::data::{apply_text_plan, build_char_vocab, split_dataset, CharVocab, Dataset, SampleRecord, Split, TextSupervisionPlan};
use crate::error::{Error, Result};
use crate::features::compute_mfcc;
use crate::tensor::Tensor;

use super::config::TrainRunConfig;

/// A dataset made ready for one run: splits assigned, text downsampled per
/// the plan, MFCCs computed once, and the character vocabulary fixed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    /// MFCC frames, aligned with `dataset.records`.
    pub features: Vec<Tensor>,
    /// Built from every record's text before downsampling, so the vocabulary
    /// (and therefore the parameter shapes) is the same at every fraction.
    pub vocab: Option<CharVocab>,
}

/// MFCCs for every record, checked against the encoder's minimum length.
pub fn compute_features(ds: &Dataset, cfg: &TrainRunConfig) -> Result<Vec<Tensor>> {
    ds.records
        .iter()
        .map(|r| {
            let f = compute_mfcc(&ds.audio(r)?, &cfg.mfcc)?;
            if f.rows() < cfg.encoder.min_frames() {
                return Err(Error::invalid(format!(
                    "record `{}` has {} frames; the encoder needs at least {}",
                    r.id,
                    f.rows(),
                    cfg.encoder.min_frames()
                )));
            }
            Ok(f)
        })
        .collect()
}

impl Prepared {
    pub fn new(ds: &Dataset, cfg: &TrainRunConfig) -> Result<Self> {
        Self::with_features(ds, compute_features(ds, cfg)?, cfg)
    }

    /// Reuse features computed for an earlier run over the same records.
    pub fn with_features(ds: &Dataset, features: Vec<Tensor>, cfg: &TrainRunConfig) -> Result<Self> {
        if features.len() != ds.records.len() {
            return Err(Error::shape(format!("{} feature arrays for {} records", features.len(), ds.records.len())));
        }
        let split = assign_splits(ds, cfg)?;
        cfg.check_dataset(&split)?;
        let mut records = split.records;
        let vocab = match cfg.text() {
            Some(kind) => {
                let v = build_char_vocab(&records, kind)?;
                let plan = TextSupervisionPlan { fraction: cfg.text_fraction, kind, seed: cfg.plan_seed };
                records = apply_text_plan(&records, &plan)?;
                Some(v)
            }
            None => None,
        };
        Ok(Self { dataset: ds.with_records(records), features, vocab })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.dataset.records.len()).filter(|&i| self.dataset.records[i].split == split).collect()
    }

    pub fn record(&self, i: usize) -> &SampleRecord {
        &self.dataset.records[i]
    }

    pub fn image(&self, id: &str) -> Result<&[f64]> {
        self.dataset
            .images
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Validation(format!("no features for image `{id}`")))
    }

    pub fn vocab(&self) -> Result<&CharVocab> {
        self.vocab.as_ref().ok_or_else(|| Error::invalid("this run has no character vocabulary"))
    }

    /// Distinct images of a split and, for each record index given, the
    /// position of its image in that gallery.
    pub fn gallery(&self, split: Split, records: &[usize]) -> (Vec<String>, Vec<usize>) {
        let images = self.dataset.split_images(split);
        let pos: HashMap<&str, usize> = images.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let targets = records.iter().map(|&i| pos[self.record(i).image_id.as_str()]).collect();
        (images, targets)
    }
}

fn assign_splits(ds: &Dataset, cfg: &TrainRunConfig) -> Result<Dataset> {
    let has_val = ds.records.iter().any(|r| r.split == Split::Val);
    match (&cfg.split, has_val) {
        (Some(spec), false) => Ok(ds.with_records(split_dataset(&ds.records, spec)?)),
        _ => Ok(ds.clone()),
    }
}
