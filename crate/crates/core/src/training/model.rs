//! Model families, the forward passes each strategy trains, and batched
//! host-side embedding/decoding for evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{CharVocab, Split, TextKind, EOS, PAD};
use crate::encoders::{rows_input, speech_input, EncoderConfig, ImageEncoder, MtlAsrEncoder, MtlMatchEncoder, SpeechEncoder, SpeechTrunk, TextEncoder, TokenBatch};
use crate::error::{Error, Result};
use crate::evaluation::{bleu_text, corpus_wer, cosine_distances, BleuTokens, RetrievalReport};
use crate::nn::{Graph, ParamStore, SeqVar, Var};
use crate::objectives::{speech_text_triplet_loss, triplet_loss};
use crate::seq2seq::{asr_encoder, beam_search, default_max_len, AttentionDecoder, BeamConfig, Feed, Hypothesis};
use crate::tensor::Tensor;

use super::prepared::Prepared;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    SpeechImage,
    TextImage,
    Seq2Seq,
    MtlSeq2Seq,
    MtlMatch,
}

#[derive(Clone, Debug)]
pub enum Arch {
    SpeechImage { speech: SpeechEncoder, image: ImageEncoder },
    TextImage { text: TextEncoder, image: ImageEncoder },
    Seq2Seq { encoder: SpeechTrunk, decoder: AttentionDecoder },
    MtlSeq2Seq { encoder: MtlAsrEncoder, image: ImageEncoder, decoder: AttentionDecoder },
    MtlMatch { encoder: MtlMatchEncoder, image: ImageEncoder, text: TextEncoder },
}

/// Parameters plus the module structure that reads them.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ArchKind,
    pub store: ParamStore,
    pub arch: Arch,
    pub vocab: Option<CharVocab>,
}

/// What a retrieval query is made of.
#[derive(Clone, Debug, PartialEq)]
pub enum Query {
    /// Index into the prepared MFCC features.
    Speech(usize),
    /// Character indices.
    Text(Vec<usize>),
}

impl Model {
    pub fn new(kind: ArchKind, cfg: &EncoderConfig, vocab: Option<CharVocab>, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let s = &mut store;
        let vocab_size = || vocab.as_ref().map(CharVocab::len).ok_or_else(|| Error::invalid(format!("{kind:?} needs a vocabulary")));
        let arch = match kind {
            ArchKind::SpeechImage => {
                let speech = SpeechEncoder::new(s, "speech", cfg);
                let image = ImageEncoder::new(s, "image", cfg.image_dim, speech.embed_dim());
                Arch::SpeechImage { speech, image }
            }
            ArchKind::TextImage => {
                let text = TextEncoder::new(s, "text", cfg, vocab_size()?);
                let image = ImageEncoder::new(s, "image", cfg.image_dim, text.embed_dim());
                Arch::TextImage { text, image }
            }
            ArchKind::Seq2Seq => {
                let encoder = asr_encoder(s, "asr", cfg);
                let decoder = AttentionDecoder::new(s, "decoder", cfg, encoder.output_dim(), vocab_size()?);
                Arch::Seq2Seq { encoder, decoder }
            }
            ArchKind::MtlSeq2Seq => {
                let encoder = MtlAsrEncoder::new(s, "mtl", cfg);
                let image = ImageEncoder::new(s, "image", cfg.image_dim, encoder.embed_dim());
                let decoder = AttentionDecoder::new(s, "decoder", cfg, encoder.sequence_dim(), vocab_size()?);
                Arch::MtlSeq2Seq { encoder, image, decoder }
            }
            ArchKind::MtlMatch => {
                let encoder = MtlMatchEncoder::new(s, "mtl", cfg);
                let image = ImageEncoder::new(s, "image", cfg.image_dim, encoder.embed_dim());
                let text = TextEncoder::new(s, "text", cfg, vocab_size()?);
                if text.embed_dim() != encoder.shared.output_dim() {
                    return Err(Error::invalid(format!(
                        "speech–text matching needs equal widths: text {} vs speech trunk {}",
                        text.embed_dim(),
                        encoder.shared.output_dim()
                    )));
                }
                Arch::MtlMatch { encoder, image, text }
            }
        };
        Ok(Self { kind, store, arch, vocab })
    }

    pub fn image_encoder(&self) -> Option<&ImageEncoder> {
        match &self.arch {
            Arch::SpeechImage { image, .. } | Arch::TextImage { image, .. } | Arch::MtlSeq2Seq { image, .. } | Arch::MtlMatch { image, .. } => {
                Some(image)
            }
            Arch::Seq2Seq { .. } => None,
        }
    }

    pub fn decoder(&self) -> Option<&AttentionDecoder> {
        match &self.arch {
            Arch::Seq2Seq { decoder, .. } | Arch::MtlSeq2Seq { decoder, .. } => Some(decoder),
            _ => None,
        }
    }

    /// Unit-norm query embeddings for a batch of queries of one modality.
    pub fn embed_queries(&self, g: &Graph, p: &Prepared, queries: &[&Query]) -> Result<Var> {
        let st = &self.store;
        match (&self.arch, queries.first()) {
            (_, None) => Err(Error::invalid("empty query batch")),
            (Arch::TextImage { text, .. }, Some(Query::Text(_))) => text.forward(g, st, &text_batch(queries)?),
            (_, Some(Query::Speech(_))) => {
                let x = speech_batch(g, p, queries)?;
                match &self.arch {
                    Arch::SpeechImage { speech, .. } => speech.forward(g, st, &x),
                    Arch::MtlSeq2Seq { encoder, .. } => encoder.retrieval(g, st, &x),
                    Arch::MtlMatch { encoder, .. } => encoder.image_task(g, st, &x),
                    _ => Err(Error::invalid(format!("{:?} cannot embed speech for retrieval", self.kind))),
                }
            }
            _ => Err(Error::invalid(format!("{:?} cannot embed text for retrieval", self.kind))),
        }
    }

    pub fn embed_images(&self, g: &Graph, rows: &[&[f64]]) -> Result<Var> {
        let enc = self.image_encoder().ok_or_else(|| Error::invalid("model has no image encoder"))?;
        enc.forward(g, &self.store, rows_input(g, rows)?)
    }

    pub fn retrieval_loss(&self, g: &Graph, p: &Prepared, queries: &[&Query], images: &[&str], margin: f64) -> Result<Var> {
        let q = self.embed_queries(g, p, queries)?;
        let rows = images.iter().map(|id| p.image(id)).collect::<Result<Vec<_>>>()?;
        let i = self.embed_images(g, &rows)?;
        triplet_loss(g, q, i, margin)
    }

    /// Encoder sequence fed to the attention decoder.
    pub fn encode_sequence(&self, g: &Graph, x: &SeqVar) -> Result<SeqVar> {
        match &self.arch {
            Arch::Seq2Seq { encoder, .. } => encoder.forward(g, &self.store, x),
            Arch::MtlSeq2Seq { encoder, .. } => encoder.sequence(g, &self.store, x),
            _ => Err(Error::invalid(format!("{:?} has no sequence encoder", self.kind))),
        }
    }

    /// Mean per-character cross-entropy of `targets` given the speech.
    pub fn seq2seq_loss(&self, g: &Graph, p: &Prepared, speech: &[usize], targets: &[&[usize]], feed: Feed) -> Result<Var> {
        let dec = self.decoder().ok_or_else(|| Error::invalid("model has no decoder"))?;
        let x = speech_input(g, &speech.iter().map(|&i| &p.features[i]).collect::<Vec<_>>())?;
        let h = self.encode_sequence(g, &x)?;
        dec.loss(g, &self.store, &h, targets, feed)
    }

    /// Speech–text triplet loss of the matching head.
    pub fn match_loss(&self, g: &Graph, p: &Prepared, speech: &[usize], texts: &[&[usize]], margin: f64) -> Result<Var> {
        let Arch::MtlMatch { encoder, text, .. } = &self.arch else {
            return Err(Error::invalid("model has no speech–text matching head"));
        };
        let x = speech_input(g, &speech.iter().map(|&i| &p.features[i]).collect::<Vec<_>>())?;
        let s = encoder.text_task(g, &self.store, &x)?;
        let t = text.forward(g, &self.store, &TokenBatch::new(texts, PAD)?)?;
        speech_text_triplet_loss(g, s, t, margin)
    }

    /// Host copies of query embeddings, computed `batch` at a time.
    pub fn query_matrix(&self, p: &Prepared, queries: &[Query], batch: usize) -> Result<Tensor> {
        let mut rows = Vec::new();
        let mut dim = 0;
        for chunk in queries.chunks(batch.max(1)) {
            let g = Graph::new();
            let v = g.value(self.embed_queries(&g, p, &chunk.iter().collect::<Vec<_>>())?);
            dim = v.cols();
            rows.extend_from_slice(v.data());
        }
        Tensor::matrix(queries.len(), dim, rows)
    }

    pub fn image_matrix(&self, p: &Prepared, images: &[String]) -> Result<Tensor> {
        let g = Graph::new();
        let rows = images.iter().map(|id| p.image(id)).collect::<Result<Vec<_>>>()?;
        Ok(g.value(self.embed_images(&g, &rows)?))
    }

    /// Rank each query against the distinct images of `split`.
    pub fn evaluate_retrieval(&self, p: &Prepared, split: Split, records: &[usize], queries: &[Query], batch: usize) -> Result<RetrievalReport> {
        if records.is_empty() {
            return Err(Error::invalid(format!("no {split:?} records to evaluate")));
        }
        let (images, targets) = p.gallery(split, records);
        let d = cosine_distances(&self.query_matrix(p, queries, batch)?, &self.image_matrix(p, &images)?)?;
        RetrievalReport::from_distances(&d, &targets)
    }

    /// Beam-decode each utterance; `batch` utterances share one encoder pass.
    pub fn decode(&self, p: &Prepared, speech: &[usize], width: usize, length_norm: bool, batch: usize) -> Result<Vec<Hypothesis>> {
        let dec = self.decoder().ok_or_else(|| Error::invalid("model has no decoder"))?;
        let mut out = Vec::with_capacity(speech.len());
        for chunk in speech.chunks(batch.max(1)) {
            let g = Graph::new();
            let x = speech_input(&g, &chunk.iter().map(|&i| &p.features[i]).collect::<Vec<_>>())?;
            let h = self.encode_sequence(&g, &x)?;
            for mem in dec.memories(&g, &self.store, &h)? {
                let cfg = BeamConfig { width, max_len: default_max_len(mem.len()), length_norm };
                out.push(beam_search(&dec.stepper(&self.store, &mem), &cfg)?);
            }
        }
        Ok(out)
    }

    pub fn decode_text(&self, p: &Prepared, speech: &[usize], width: usize, length_norm: bool, batch: usize) -> Result<Vec<(String, f64)>> {
        let vocab = self.vocab.as_ref().ok_or_else(|| Error::invalid("model has no vocabulary"))?;
        Ok(self
            .decode(p, speech, width, length_norm, batch)?
            .into_iter()
            .map(|h| (vocab.decode(&h.tokens), h.log_prob))
            .collect())
    }
}

/// Score decoded text against references: WER for transcriptions, BLEU
/// (characters) for translations.
pub fn text_score(kind: TextKind, references: &[&str], hypotheses: &[&str]) -> Result<f64> {
    match kind {
        TextKind::Transcription => corpus_wer(references, hypotheses),
        TextKind::Translation => bleu_text(references, hypotheses, BleuTokens::Chars),
    }
}

/// Text-encoder input for a decoded string. An empty decode becomes a lone
/// EOS so every utterance still yields an embedding.
pub fn text_query(vocab: &CharVocab, text: &str) -> Result<Query> {
    let t = vocab.encode(text)?;
    Ok(Query::Text(if t.is_empty() { vec![EOS] } else { t }))
}

fn text_batch(queries: &[&Query]) -> Result<TokenBatch> {
    let seqs = queries
        .iter()
        .map(|q| match q {
            Query::Text(t) => Ok(t.as_slice()),
            Query::Speech(_) => Err(Error::invalid("mixed query modalities in one batch")),
        })
        .collect::<Result<Vec<_>>>()?;
    TokenBatch::new(&seqs, PAD)
}

fn speech_batch(g: &Graph, p: &Prepared, queries: &[&Query]) -> Result<SeqVar> {
    let frames = queries
        .iter()
        .map(|q| match q {
            Query::Speech(i) => p.features.get(*i).ok_or(Error::IndexOutOfRange { index: *i, size: p.features.len() }),
            Query::Text(_) => Err(Error::invalid("mixed query modalities in one batch")),
        })
        .collect::<Result<Vec<_>>>()?;
    speech_input(g, &frames)
}
