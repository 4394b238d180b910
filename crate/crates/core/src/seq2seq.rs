//! Character-level attention encoder–decoder with greedy and beam decoding.

use std::cmp::Ordering;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::{EOS, PAD, SOS};
use crate::encoders::{EncoderConfig, SpeechTrunk};
use crate::error::{Error, Result};
use crate::nn::{AttentionMemory, BahdanauAttention, Embedding, GruCell, Graph, Linear, ParamStore, Reduction, SeqVar, Var};
use crate::tensor::Tensor;

pub const DEFAULT_BEAM_WIDTH: usize = 10;
pub const MAX_DECODE_LEN: usize = 200;

/// The plain ASR/SLT encoder: convolution plus a deep bidirectional GRU, with
/// no pooling or normalization.
pub fn asr_encoder(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> SpeechTrunk {
    SpeechTrunk::new(store, name, cfg, cfg.asr_hidden, cfg.asr_layers)
}

/// `min(200, ceil(2.5 × encoder steps))`.
pub fn default_max_len(encoder_len: usize) -> usize {
    ((2.5 * encoder_len as f64).ceil() as usize).min(MAX_DECODE_LEN)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feed {
    /// Ground-truth previous characters.
    #[default]
    TeacherForcing,
    /// The decoder's own greedy previous characters; the loss covers positions up
    /// to the shorter of the reference and the decoded output.
    FreeRunning,
}

#[derive(Clone, Debug)]
pub struct AttentionDecoder {
    pub embed: Embedding,
    pub attn: BahdanauAttention,
    pub cell: GruCell,
    pub out: Linear,
    pub hidden: usize,
    pub vocab_size: usize,
}

impl AttentionDecoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, encoder_dim: usize, vocab_size: usize) -> Self {
        let h = cfg.decoder_hidden;
        Self {
            embed: Embedding::new(store, &format!("{name}.embed"), vocab_size, cfg.decoder_embed),
            attn: BahdanauAttention::new(store, &format!("{name}.attn"), h, encoder_dim, h),
            cell: GruCell::new(store, &format!("{name}.gru"), cfg.decoder_embed + encoder_dim, h),
            out: Linear::new(store, &format!("{name}.out"), h, vocab_size),
            hidden: h,
            vocab_size,
        }
    }

    pub fn memory(&self, g: &Graph, store: &ParamStore, enc: &SeqVar) -> Result<AttentionMemory> {
        self.attn.memory(g, store, enc)
    }

    /// One decoder step: attend with the previous state, feed `[emb(prev); ctx]`
    /// to the GRU, project the new state to logits. Rows with `mask = false`
    /// keep their state.
    pub fn step(
        &self,
        g: &Graph,
        store: &ParamStore,
        memory: &AttentionMemory,
        prev: &[usize],
        state: Var,
        mask: Rc<Vec<bool>>,
    ) -> Result<(Var, Var)> {
        let (ctx, _) = self.attn.attend(g, store, state, memory)?;
        let e = self.embed.forward(g, store, prev)?;
        let x = g.concat_cols(&[e, ctx])?;
        let xp = self.cell.project(g, store, x)?;
        let s = self.cell.step(g, store, xp, state, mask)?;
        let logits = self.out.forward(g, store, s)?;
        Ok((logits, s))
    }

    pub fn initial_state(&self, g: &Graph, batch: usize) -> Var {
        g.input(Tensor::zeros(&[batch, self.hidden]))
    }

    /// Mean per-token cross-entropy of `targets` (character indices without
    /// sentinels) given encoder output `enc`. Each target is scored as
    /// `chars + EOS` after an initial SOS.
    pub fn loss(&self, g: &Graph, store: &ParamStore, enc: &SeqVar, targets: &[&[usize]], feed: Feed) -> Result<Var> {
        let b = enc.batch();
        if targets.len() != b {
            return Err(Error::shape(format!("{} targets for a batch of {b}", targets.len())));
        }
        let out_len: Vec<usize> = targets.iter().map(|t| t.len() + 1).collect();
        let steps = *out_len.iter().max().unwrap();
        let gold = |i: usize, t: usize| if t < targets[i].len() { targets[i][t] } else { EOS };

        let memory = self.memory(g, store, enc)?;
        let mut state = self.initial_state(g, b);
        let mut prev = vec![SOS; b];
        let mut alive = vec![true; b];
        let mut logits_all = Vec::with_capacity(steps);
        let mut flat_targets = Vec::with_capacity(steps * b);
        for t in 0..steps {
            let mask: Vec<bool> = (0..b).map(|i| alive[i] && t < out_len[i]).collect();
            let (logits, s) = self.step(g, store, &memory, &prev, state, Rc::new(mask.clone()))?;
            state = s;
            for i in 0..b {
                flat_targets.push(mask[i].then(|| gold(i, t)));
            }
            let next: Vec<usize> = match feed {
                Feed::TeacherForcing => (0..b).map(|i| if mask[i] { gold(i, t) } else { PAD }).collect(),
                Feed::FreeRunning => {
                    let lv = g.value(logits);
                    (0..b).map(|i| argmax(lv.row(i))).collect()
                }
            };
            if feed == Feed::FreeRunning {
                for i in 0..b {
                    if next[i] == EOS {
                        alive[i] = false;
                    }
                }
            }
            prev = next;
            logits_all.push(logits);
        }
        let logits = g.concat_rows(&logits_all)?;
        g.cross_entropy(logits, Rc::new(flat_targets), Reduction::Mean)
    }

    /// Host copies of each item's encoder rows and key projections, for decoding.
    pub fn memories(&self, g: &Graph, store: &ParamStore, enc: &SeqVar) -> Result<Vec<DecoderMemory>> {
        let mem = self.memory(g, store, enc)?;
        let (vals, keys) = (g.value(enc.data), g.value(mem.keys));
        let b = enc.batch();
        Ok((0..b)
            .map(|i| {
                let len = enc.lengths[i];
                let pick = |t: &Tensor| {
                    let mut d = Vec::with_capacity(len * t.cols());
                    for s in 0..len {
                        d.extend_from_slice(t.row(s * b + i));
                    }
                    Tensor::matrix(len, t.cols(), d).unwrap()
                };
                DecoderMemory { values: pick(&vals), keys: pick(&keys) }
            })
            .collect())
    }

    pub fn stepper<'a>(&'a self, store: &'a ParamStore, memory: &'a DecoderMemory) -> DecoderStepper<'a> {
        DecoderStepper { decoder: self, store, memory }
    }
}

/// One utterance's encoder output `[T, D]` and attention keys `[T, A]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderMemory {
    pub values: Tensor,
    pub keys: Tensor,
}

impl DecoderMemory {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    /// Time-major copies for `k` hypotheses: row `t * k + j` is step `t`.
    fn tiled(&self, g: &Graph, k: usize) -> Result<AttentionMemory> {
        let tile = |t: &Tensor| {
            let mut d = Vec::with_capacity(t.len() * k);
            for s in 0..t.rows() {
                for _ in 0..k {
                    d.extend_from_slice(t.row(s));
                }
            }
            Tensor::matrix(t.rows() * k, t.cols(), d)
        };
        let steps = self.len();
        Ok(AttentionMemory {
            values: SeqVar { data: g.input(tile(&self.values)?), lengths: vec![steps; k], steps },
            keys: g.input(tile(&self.keys)?),
        })
    }
}

/// Decoding interface shared by the neural decoder and test models.
pub trait StepModel {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> usize;
    /// The first input token and the initial state.
    fn start(&self) -> (usize, Self::State);
    /// Log-probabilities over the vocabulary and the next state, for each
    /// `(state, previous token)` pair.
    fn step(&self, items: &[(&Self::State, usize)]) -> Result<Vec<(Vec<f64>, Self::State)>>;
}

pub struct DecoderStepper<'a> {
    decoder: &'a AttentionDecoder,
    store: &'a ParamStore,
    memory: &'a DecoderMemory,
}

impl StepModel for DecoderStepper<'_> {
    type State = Vec<f64>;

    fn vocab_size(&self) -> usize {
        self.decoder.vocab_size
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn start(&self) -> (usize, Vec<f64>) {
        (SOS, vec![0.0; self.decoder.hidden])
    }

    fn step(&self, items: &[(&Vec<f64>, usize)]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let k = items.len();
        let h = self.decoder.hidden;
        let g = Graph::new();
        let memory = self.memory.tiled(&g, k)?;
        let state: Vec<f64> = items.iter().flat_map(|(s, _)| s.iter().copied()).collect();
        let state = g.input(Tensor::matrix(k, h, state)?);
        let prev: Vec<usize> = items.iter().map(|(_, t)| *t).collect();
        let (logits, s) = self.decoder.step(&g, self.store, &memory, &prev, state, Rc::new(vec![true; k]))?;
        let (lv, sv) = (g.value(logits), g.value(s));
        Ok((0..k).map(|i| (log_softmax(lv.row(i)), sv.row(i).to_vec())).collect())
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v - z).collect()
}

/// First index of the maximum.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, ending with EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, length_norm: bool) -> f64 {
        if length_norm && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    pub length_norm: bool,
}

impl BeamConfig {
    pub fn new(width: usize, max_len: usize) -> Self {
        Self { width, max_len, length_norm: true }
    }
}

/// Argmax decoding until EOS or `max_len` tokens.
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis> {
    let (mut prev, mut state) = model.start();
    let mut hyp = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
    while hyp.tokens.len() < max_len {
        let (lp, next) = model.step(&[(&state, prev)])?.pop().unwrap();
        let v = argmax(&lp);
        hyp.tokens.push(v);
        hyp.log_prob += lp[v];
        if v == model.eos() {
            hyp.finished = true;
            break;
        }
        state = next;
        prev = v;
    }
    Ok(hyp)
}

struct Candidate {
    parent: usize,
    token: usize,
    token_lp: f64,
    log_prob: f64,
    score: f64,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.log_prob.total_cmp(&a.log_prob))
        .then(b.token_lp.total_cmp(&a.token_lp))
        .then(a.parent.cmp(&b.parent))
        .then(a.token.cmp(&b.token))
}

fn better(a: &Hypothesis, b: &Hypothesis, norm: bool) -> bool {
    match a.score(norm).total_cmp(&b.score(norm)) {
        Ordering::Equal => a.log_prob > b.log_prob,
        o => o == Ordering::Greater,
    }
}

/// Keep the `width` best expansions each step; candidates ending in EOS are
/// retired to the finished pool. Returns the best finished hypothesis, or the
/// best unfinished one if nothing finished within `max_len`.
pub fn beam_search<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    let eos = model.eos();
    let (sos, init) = model.start();
    let mut alive: Vec<(Hypothesis, M::State, usize)> =
        vec![(Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }, init, sos)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let inputs: Vec<(&M::State, usize)> = alive.iter().map(|(_, s, t)| (s, *t)).collect();
        let outs = model.step(&inputs)?;
        let mut cands = Vec::with_capacity(alive.len() * model.vocab_size());
        for (k, ((hyp, _, _), (lp, _))) in alive.iter().zip(&outs).enumerate() {
            for (v, &l) in lp.iter().enumerate() {
                let log_prob = hyp.log_prob + l;
                let len = hyp.tokens.len() + 1;
                let score = if cfg.length_norm { log_prob / len as f64 } else { log_prob };
                cands.push(Candidate { parent: k, token: v, token_lp: l, log_prob, score });
            }
        }
        cands.sort_by(candidate_order);
        cands.truncate(cfg.width);
        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let mut tokens = alive[c.parent].0.tokens.clone();
            tokens.push(c.token);
            let hyp = Hypothesis { tokens, log_prob: c.log_prob, finished: c.token == eos };
            if hyp.finished {
                finished.push(hyp);
            } else {
                next.push((hyp, outs[c.parent].1.clone(), c.token));
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { alive.into_iter().map(|(h, _, _)| h).collect() } else { finished };
    let mut best = pool[0].clone();
    for h in pool.into_iter().skip(1) {
        if better(&h, &best, cfg.length_norm) {
            best = h;
        }
    }
    Ok(best)
}
