use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, TextKind};
use crate::error::{Error, Result};
use crate::evaluation::RetrievalReport;

use super::config::{Strategy, TrainRunConfig};
use super::fit::{fit_retrieval, fit_seq2seq, EpochMetrics, FitSettings, RetrievalVal, Secondary, Snapshot};
use super::model::{text_query, ArchKind, Model, Query};
use super::prepared::Prepared;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    SpeechImage,
    TextImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    Independent,
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MtlVariant {
    Seq2Seq,
    Match,
}

/// A trained component: its role in the run, the selected weights, and the
/// optimizer/RNG state of the selected epoch.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub role: String,
    pub model: Model,
    pub snapshot: Snapshot,
}

/// Validation score of an ASR/SLT component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextMetric {
    pub kind: TextKind,
    /// WER for transcriptions, BLEU for translations.
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: TrainRunConfig,
    pub history: Vec<EpochMetrics>,
    /// Validation retrieval of the selected model(s).
    pub retrieval: RetrievalReport,
    pub text_metric: Option<TextMetric>,
    pub models: Vec<TrainedModel>,
    /// Texts the pipeline's text-image stage trained on.
    pub nlu_train_texts: Option<usize>,
    pub seconds: f64,
}

impl RunOutcome {
    pub fn model(&self, role: &str) -> Option<&Model> {
        self.models.iter().find(|m| m.role == role).map(|m| &m.model)
    }
}

fn settings(cfg: &TrainRunConfig, seed_offset: u64) -> FitSettings {
    FitSettings {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed.wrapping_add(seed_offset),
        optim: cfg.optim,
        margin: cfg.margin,
    }
}

fn text_of(p: &Prepared, i: usize, kind: TextKind) -> Option<&str> {
    p.record(i).text(kind)
}

/// Retrieval training of an already-built model on every training utterance
/// (or every text-bearing record, for text queries).
pub fn train_grounded_model(model: Model, cfg: &TrainRunConfig, p: &Prepared, pairing: Pairing) -> Result<RunOutcome> {
    train_retrieval_model(model, cfg, p, pairing, None)
}

fn retrieval_sets(p: &Prepared, pairing: Pairing, kind: Option<TextKind>) -> Result<(Vec<(Query, String)>, RetrievalVal)> {
    let build = |split: Split| -> Result<Vec<(usize, Query)>> {
        let mut out = Vec::new();
        for i in p.indices(split) {
            match pairing {
                Pairing::SpeechImage => out.push((i, Query::Speech(i))),
                Pairing::TextImage => {
                    let kind = kind.ok_or_else(|| Error::invalid("text pairing without a text kind"))?;
                    if let Some(t) = text_of(p, i, kind) {
                        out.push((i, text_query(p.vocab()?, t)?));
                    }
                }
            }
        }
        Ok(out)
    };
    let train = build(Split::Train)?.into_iter().map(|(i, q)| (q, p.record(i).image_id.clone())).collect();
    let (records, queries) = build(Split::Val)?.into_iter().unzip();
    Ok((train, RetrievalVal { records, queries }))
}

fn train_retrieval_model(
    mut model: Model,
    cfg: &TrainRunConfig,
    p: &Prepared,
    pairing: Pairing,
    secondary: Option<&Secondary>,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let (train, val) = retrieval_sets(p, pairing, cfg.text())?;
    let fit = fit_retrieval(&mut model, p, &train, secondary, &val, &settings(cfg, 0), "retrieval")?;
    let retrieval = model.evaluate_retrieval(p, Split::Val, &val.records, &val.queries, 32)?;
    Ok(RunOutcome {
        config: cfg.clone(),
        history: fit.history,
        retrieval,
        text_metric: None,
        models: vec![TrainedModel { role: "retrieval".into(), model, snapshot: fit.best }],
        nlu_train_texts: None,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Speech–image or text–image retrieval with the plain encoders.
pub fn train_grounded(cfg: &TrainRunConfig, p: &Prepared, pairing: Pairing) -> Result<RunOutcome> {
    let (kind, vocab) = match pairing {
        Pairing::SpeechImage => (ArchKind::SpeechImage, None),
        Pairing::TextImage => (ArchKind::TextImage, Some(p.vocab()?.clone())),
    };
    train_grounded_model(Model::new(kind, &cfg.encoder, vocab, cfg.seed)?, cfg, p, pairing)
}

/// ASR (transcriptions) or SLT (translations) on the text-bearing training
/// records; returns the selected model, its history, and its validation score
/// under beam decoding.
pub fn train_asr_slt(cfg: &TrainRunConfig, p: &Prepared, kind: TextKind) -> Result<(TrainedModel, Vec<EpochMetrics>, Option<TextMetric>)> {
    let vocab = p.vocab()?;
    let mut model = Model::new(ArchKind::Seq2Seq, &cfg.encoder, Some(vocab.clone()), cfg.seed)?;
    let train = seq2seq_pairs(p, Split::Train, kind)?;
    let val: Vec<(usize, String)> =
        p.indices(Split::Val).into_iter().filter_map(|i| text_of(p, i, kind).map(|t| (i, t.to_string()))).collect();
    let s = FitSettings { epochs: cfg.asr_epochs(), optim: cfg.asr_optim(), ..settings(cfg, 0) };
    let fit = fit_seq2seq(&mut model, p, &train, &val, kind, cfg.feed, cfg.val_beam_width, cfg.length_norm, &s)?;
    let metric = if val.is_empty() {
        None
    } else {
        let speech: Vec<usize> = val.iter().map(|(i, _)| *i).collect();
        let hyps = model.decode_text(p, &speech, cfg.beam_width, cfg.length_norm, 32)?;
        let refs: Vec<&str> = val.iter().map(|(_, t)| t.as_str()).collect();
        let hyps: Vec<&str> = hyps.iter().map(|(h, _)| h.as_str()).collect();
        Some(TextMetric { kind, value: super::model::text_score(kind, &refs, &hyps)? })
    };
    Ok((TrainedModel { role: "seq2seq".into(), model, snapshot: fit.best }, fit.history, metric))
}

fn seq2seq_pairs(p: &Prepared, split: Split, kind: TextKind) -> Result<Vec<(usize, Vec<usize>)>> {
    let vocab = p.vocab()?;
    p.indices(split)
        .into_iter()
        .filter_map(|i| text_of(p, i, kind).map(|t| vocab.encode(t).map(|e| (i, e))))
        .collect()
}

/// ASR/SLT followed by text–image retrieval over decoded text.
///
/// Independent mode trains the text side on the ground-truth text that
/// survived downsampling. Sequential mode beam-decodes every training
/// utterance — including those whose text was removed — and trains on that.
/// Validation always runs on decoded validation speech.
pub fn train_pipeline(cfg: &TrainRunConfig, p: &Prepared, mode: PipelineMode) -> Result<RunOutcome> {
    let start = Instant::now();
    let kind = cfg.text().ok_or_else(|| Error::invalid("pipeline needs a text kind"))?;
    let (asr, mut history, metric) = train_asr_slt(cfg, p, kind)?;
    let vocab = p.vocab()?;
    let decode = |idx: &[usize]| asr.model.decode_text(p, idx, cfg.beam_width, cfg.length_norm, 32);

    let train: Vec<(Query, String)> = match mode {
        PipelineMode::Independent => retrieval_sets(p, Pairing::TextImage, Some(kind))?.0,
        PipelineMode::Sequential => {
            let idx = p.indices(Split::Train);
            decode(&idx)?
                .into_iter()
                .zip(&idx)
                .map(|((t, _), &i)| Ok((text_query(vocab, &t)?, p.record(i).image_id.clone())))
                .collect::<Result<_>>()?
        }
    };
    let val_idx = p.indices(Split::Val);
    let val = RetrievalVal {
        queries: decode(&val_idx)?.iter().map(|(t, _)| text_query(vocab, t)).collect::<Result<_>>()?,
        records: val_idx,
    };
    let mut nlu = Model::new(ArchKind::TextImage, &cfg.encoder, Some(vocab.clone()), cfg.seed.wrapping_add(1))?;
    let fit = fit_retrieval(&mut nlu, p, &train, None, &val, &settings(cfg, 1), "nlu")?;
    let retrieval = nlu.evaluate_retrieval(p, Split::Val, &val.records, &val.queries, 32)?;
    history.extend(fit.history);
    Ok(RunOutcome {
        config: cfg.clone(),
        history,
        retrieval,
        text_metric: metric,
        nlu_train_texts: Some(train.len()),
        models: vec![asr, TrainedModel { role: "nlu".into(), model: nlu, snapshot: fit.best }],
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// The secondary task of an MTL run over the text-bearing training records.
pub fn mtl_secondary(cfg: &TrainRunConfig, p: &Prepared, variant: MtlVariant) -> Result<Secondary> {
    let kind = cfg.text().ok_or_else(|| Error::invalid("MTL needs a text kind"))?;
    let (speech, texts): (Vec<usize>, Vec<Vec<usize>>) = seq2seq_pairs(p, Split::Train, kind)?.into_iter().unzip();
    Ok(match variant {
        MtlVariant::Seq2Seq => Secondary::Seq2Seq { speech, targets: texts, feed: cfg.feed },
        MtlVariant::Match => Secondary::Match { speech, texts },
    })
}

/// Speech–image retrieval alternating batch by batch with ASR/SLT or
/// speech–text matching. With no text left the secondary task is skipped and
/// the run is exactly retrieval-only training of the same network.
pub fn train_mtl(cfg: &TrainRunConfig, p: &Prepared, variant: MtlVariant) -> Result<RunOutcome> {
    let arch = match variant {
        MtlVariant::Seq2Seq => ArchKind::MtlSeq2Seq,
        MtlVariant::Match => ArchKind::MtlMatch,
    };
    let model = Model::new(arch, &cfg.encoder, Some(p.vocab()?.clone()), cfg.seed)?;
    let secondary = mtl_secondary(cfg, p, variant)?;
    train_retrieval_model(model, cfg, p, Pairing::SpeechImage, Some(&secondary))
}

/// Re-score trained models on `split`, the way training scored them on
/// validation: pipelines decode the split's speech and retrieve with the text
/// model; every other strategy retrieves with its single model.
pub fn evaluate_models(cfg: &TrainRunConfig, p: &Prepared, models: &[(&str, &Model)], split: Split) -> Result<(RetrievalReport, Option<TextMetric>)> {
    let get = |role: &str| {
        models
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, m)| *m)
            .ok_or_else(|| Error::invalid(format!("strategy {} needs a `{role}` model", cfg.strategy)))
    };
    let idx = p.indices(split);
    if cfg.strategy.is_pipeline() {
        let kind = cfg.text().ok_or_else(|| Error::invalid("pipeline needs a text kind"))?;
        let (asr, nlu) = (get("seq2seq")?, get("nlu")?);
        let vocab = asr.vocab.as_ref().ok_or_else(|| Error::invalid("seq2seq model has no vocabulary"))?;
        let hyps = asr.decode_text(p, &idx, cfg.beam_width, cfg.length_norm, 32)?;
        let queries: Vec<Query> = hyps.iter().map(|(t, _)| text_query(vocab, t)).collect::<Result<_>>()?;
        let scored: Vec<(&str, &str)> =
            idx.iter().zip(&hyps).filter_map(|(&i, (h, _))| text_of(p, i, kind).map(|r| (r, h.as_str()))).collect();
        let metric = if scored.is_empty() {
            None
        } else {
            let (refs, hyps): (Vec<&str>, Vec<&str>) = scored.into_iter().unzip();
            Some(TextMetric { kind, value: super::model::text_score(kind, &refs, &hyps)? })
        };
        return Ok((nlu.evaluate_retrieval(p, split, &idx, &queries, 32)?, metric));
    }
    let model = get("retrieval")?;
    let (records, queries): (Vec<usize>, Vec<Query>) = match cfg.strategy {
        Strategy::TextImage => {
            let kind = cfg.text().expect("text-image has a text kind");
            let vocab = model.vocab.as_ref().ok_or_else(|| Error::invalid("text model has no vocabulary"))?;
            idx.iter()
                .filter_map(|&i| text_of(p, i, kind).map(|t| text_query(vocab, t).map(|q| (i, q))))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip()
        }
        _ => idx.iter().map(|&i| (i, Query::Speech(i))).unzip(),
    };
    Ok((model.evaluate_retrieval(p, split, &records, &queries, 32)?, None))
}

/// Dispatch on `cfg.strategy`.
pub fn train_prepared(cfg: &TrainRunConfig, p: &Prepared) -> Result<RunOutcome> {
    match cfg.strategy {
        Strategy::SpeechImage => train_grounded(cfg, p, Pairing::SpeechImage),
        Strategy::TextImage => train_grounded(cfg, p, Pairing::TextImage),
        Strategy::PipeInd => train_pipeline(cfg, p, PipelineMode::Independent),
        Strategy::PipeSeq => train_pipeline(cfg, p, PipelineMode::Sequential),
        Strategy::MtlTranscribe | Strategy::MtlTranslate => train_mtl(cfg, p, MtlVariant::Seq2Seq),
        Strategy::MtlMatch => train_mtl(cfg, p, MtlVariant::Match),
    }
}

pub fn train(cfg: &TrainRunConfig, ds: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    train_prepared(cfg, &Prepared::new(ds, cfg)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub per_seed: Vec<(u64, RetrievalReport)>,
    pub mean: RetrievalReport,
}

impl SeedSummary {
    pub fn from_runs(per_seed: Vec<(u64, RetrievalReport)>) -> Result<Self> {
        let reports: Vec<RetrievalReport> = per_seed.iter().map(|(_, r)| *r).collect();
        Ok(Self { mean: RetrievalReport::mean(&reports)?, per_seed })
    }
}

/// Train with seeds `seed, seed+1, …, seed+n−1` and average the reports.
pub fn run_seeds(cfg: &TrainRunConfig, ds: &Dataset, n: usize) -> Result<SeedSummary> {
    if n == 0 {
        return Err(Error::invalid("run_seeds needs n ≥ 1"));
    }
    let p = Prepared::new(ds, cfg)?;
    let runs = (0..n as u64)
        .map(|k| {
            let c = TrainRunConfig { seed: cfg.seed.wrapping_add(k), ..cfg.clone() };
            train_prepared(&c, &p).map(|o| (c.seed, o.retrieval))
        })
        .collect::<Result<Vec<_>>>()?;
    SeedSummary::from_runs(runs)
}
