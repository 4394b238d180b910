//! Epoch loops: retrieval (optionally alternating with a secondary task) and
//! sequence-to-sequence training, each with per-epoch validation and
//! best-epoch selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, TextKind};
use crate::error::{Error, Result};
use crate::evaluation::RetrievalReport;
use crate::nn::{Graph, ParamStore, Var};
use crate::seq2seq::Feed;

use super::model::{text_score, Model, Query};
use super::optim::{clip_global_norm, Adam, CyclicLr, OptimConfig};
use super::prepared::Prepared;

const EVAL_BATCH: usize = 32;

/// One row of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub loss: f64,
    pub secondary_loss: Option<f64>,
    pub val_r1: Option<f64>,
    pub val_r5: Option<f64>,
    pub val_r10: Option<f64>,
    pub val_medr: Option<f64>,
    pub val_wer: Option<f64>,
    pub val_bleu: Option<f64>,
}

impl EpochMetrics {
    fn new(stage: &str, epoch: usize, lr: f64, loss: f64) -> Self {
        Self {
            stage: stage.to_string(),
            epoch,
            lr,
            loss,
            secondary_loss: None,
            val_r1: None,
            val_r5: None,
            val_r10: None,
            val_medr: None,
            val_wer: None,
            val_bleu: None,
        }
    }

    fn with_retrieval(mut self, r: &RetrievalReport) -> Self {
        self.val_r1 = Some(r.r1);
        self.val_r5 = Some(r.r5);
        self.val_r10 = Some(r.r10);
        self.val_medr = Some(r.medr);
        self
    }
}

/// Shared loop settings.
#[derive(Clone, Copy, Debug)]
pub struct FitSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub margin: f64,
}

/// What was kept from the best epoch.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub epoch: usize,
    pub store: ParamStore,
    pub adam: Adam,
    pub rng: Vec<ChaCha8Rng>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochMetrics>,
    pub best: Snapshot,
}

/// Secondary task interleaved with retrieval batches.
#[derive(Clone, Debug)]
pub enum Secondary {
    /// Speech → text with the attention decoder.
    Seq2Seq { speech: Vec<usize>, targets: Vec<Vec<usize>>, feed: Feed },
    /// Speech ↔ text triplet loss.
    Match { speech: Vec<usize>, texts: Vec<Vec<usize>> },
}

impl Secondary {
    fn len(&self) -> usize {
        match self {
            Secondary::Seq2Seq { speech, .. } | Secondary::Match { speech, .. } => speech.len(),
        }
    }

    fn loss(&self, g: &Graph, model: &Model, p: &Prepared, idx: &[usize], margin: f64) -> Result<Var> {
        match self {
            Secondary::Seq2Seq { speech, targets, feed } => {
                let s: Vec<usize> = idx.iter().map(|&i| speech[i]).collect();
                let t: Vec<&[usize]> = idx.iter().map(|&i| targets[i].as_slice()).collect();
                model.seq2seq_loss(g, p, &s, &t, *feed)
            }
            Secondary::Match { speech, texts } => {
                let s: Vec<usize> = idx.iter().map(|&i| speech[i]).collect();
                let t: Vec<&[usize]> = idx.iter().map(|&i| texts[i].as_slice()).collect();
                model.match_loss(g, p, &s, &t, margin)
            }
        }
    }
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

fn schedule(optim: &OptimConfig, batches_per_epoch: usize) -> Result<CyclicLr> {
    CyclicLr::new(optim.lr_min, optim.lr_max, (optim.cycle_epochs * batches_per_epoch).max(1))
}

/// Backpropagate, clip, and update; returns the loss value.
fn update(g: &Graph, loss: Var, model: &mut Model, adam: &mut Adam, optim: &OptimConfig, lr: f64) -> Result<f64> {
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteGradient(format!("loss is {value}")));
    }
    let mut grads = g.backward(loss)?.into_params();
    if let Some(max) = optim.clip_norm {
        clip_global_norm(&mut grads, max);
    }
    adam.step(&mut model.store, &grads, lr)?;
    Ok(value)
}

/// Cycles through a shuffled index list, reshuffling at each wrap.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self { order: (0..n).collect(), pos: n, rng }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let k = k.min(self.order.len());
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let i = self.order[self.pos];
            self.pos += 1;
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }
}

/// Validation queries for retrieval: record indices (for the gallery) and
/// matching queries.
#[derive(Clone, Debug)]
pub struct RetrievalVal {
    pub records: Vec<usize>,
    pub queries: Vec<Query>,
}

/// Triplet-loss training over `(query, image)` pairs. With a non-empty
/// secondary task, every retrieval batch is followed by one secondary batch;
/// secondary batches cycle over their own (possibly smaller) set.
pub fn fit_retrieval(
    model: &mut Model,
    p: &Prepared,
    train: &[(Query, String)],
    secondary: Option<&Secondary>,
    val: &RetrievalVal,
    s: &FitSettings,
    stage: &str,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let n = train.len();
    let b = s.batch_size;
    let batches = n.div_ceil(b);
    let sched = schedule(&s.optim, batches)?;
    let mut adam = Adam::from_config(&s.optim);
    let mut rng = stream(s.seed, 1);
    let secondary = secondary.filter(|t| t.len() > 0);
    let mut cycler = secondary.map(|t| Cycler::new(t.len(), stream(s.seed, 2)));
    let mut history = Vec::with_capacity(s.epochs);
    let mut best: Option<(Snapshot, (f64, f64, f64, f64))> = None;
    let mut step = 0;
    for epoch in 1..=s.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut total, mut total2, mut lr) = (0.0, 0.0, sched.lr(0));
        for chunk in order.chunks(b) {
            lr = sched.lr(step);
            step += 1;
            let g = Graph::new();
            let q: Vec<&Query> = chunk.iter().map(|&i| &train[i].0).collect();
            let im: Vec<&str> = chunk.iter().map(|&i| train[i].1.as_str()).collect();
            let loss = model.retrieval_loss(&g, p, &q, &im, s.margin)?;
            total += update(&g, loss, model, &mut adam, &s.optim, lr)?;
            if let (Some(task), Some(c)) = (secondary, cycler.as_mut()) {
                let idx = c.take(b);
                let g = Graph::new();
                let loss = task.loss(&g, model, p, &idx, s.margin)?;
                total2 += update(&g, loss, model, &mut adam, &s.optim, lr)?;
            }
        }
        let report = model.evaluate_retrieval(p, Split::Val, &val.records, &val.queries, EVAL_BATCH)?;
        let mut m = EpochMetrics::new(stage, epoch, lr, total / batches as f64).with_retrieval(&report);
        if secondary.is_some() {
            m.secondary_loss = Some(total2 / batches as f64);
        }
        history.push(m);
        let key = report.selection_key();
        if best.as_ref().is_none_or(|(_, k)| key >= *k) {
            let mut rngs = vec![rng.clone()];
            rngs.extend(cycler.as_ref().map(|c| c.rng.clone()));
            best = Some((Snapshot { epoch, store: model.store.clone(), adam: adam.clone(), rng: rngs }, key));
        }
    }
    let best = best.expect("at least one epoch").0;
    model.store = best.store.clone();
    Ok(FitOutcome { history, best })
}

/// Teacher-forced (or free-running) cross-entropy training of an ASR/SLT
/// model, validated by decoding `val` each epoch.
pub fn fit_seq2seq(
    model: &mut Model,
    p: &Prepared,
    train: &[(usize, Vec<usize>)],
    val: &[(usize, String)],
    kind: TextKind,
    feed: Feed,
    val_beam: usize,
    length_norm: bool,
    s: &FitSettings,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::Validation(format!("no training records carry {kind} text")));
    }
    let stage = match kind {
        TextKind::Transcription => "asr",
        TextKind::Translation => "slt",
    };
    let n = train.len();
    let b = s.batch_size;
    let batches = n.div_ceil(b);
    let sched = schedule(&s.optim, batches)?;
    let mut adam = Adam::from_config(&s.optim);
    let mut rng = stream(s.seed, 3);
    let mut history = Vec::with_capacity(s.epochs);
    let mut best: Option<(Snapshot, f64)> = None;
    let mut step = 0;
    let val_speech: Vec<usize> = val.iter().map(|(i, _)| *i).collect();
    let refs: Vec<&str> = val.iter().map(|(_, t)| t.as_str()).collect();
    for epoch in 1..=s.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut total, mut lr) = (0.0, sched.lr(0));
        for chunk in order.chunks(b) {
            lr = sched.lr(step);
            step += 1;
            let g = Graph::new();
            let speech: Vec<usize> = chunk.iter().map(|&i| train[i].0).collect();
            let targets: Vec<&[usize]> = chunk.iter().map(|&i| train[i].1.as_slice()).collect();
            let loss = model.seq2seq_loss(&g, p, &speech, &targets, feed)?;
            total += update(&g, loss, model, &mut adam, &s.optim, lr)?;
        }
        let mut m = EpochMetrics::new(stage, epoch, lr, total / batches as f64);
        // higher is better for the selection key
        let key = if val.is_empty() {
            -m.loss
        } else {
            let hyps = model.decode_text(p, &val_speech, val_beam, length_norm, EVAL_BATCH)?;
            let hyps: Vec<&str> = hyps.iter().map(|(h, _)| h.as_str()).collect();
            let score = text_score(kind, &refs, &hyps)?;
            match kind {
                TextKind::Transcription => {
                    m.val_wer = Some(score);
                    -score
                }
                TextKind::Translation => {
                    m.val_bleu = Some(score);
                    score
                }
            }
        };
        history.push(m);
        if best.as_ref().is_none_or(|(_, k)| key >= *k) {
            best = Some((Snapshot { epoch, store: model.store.clone(), adam: adam.clone(), rng: vec![rng.clone()] }, key));
        }
    }
    let best = best.expect("at least one epoch").0;
    model.store = best.store.clone();
    Ok(FitOutcome { history, best })
}
