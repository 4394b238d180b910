//! Image, speech and text encoders into the shared embedding space, plus the
//! two partially-shared speech encoders used for multitask training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MFCC_DIM;
use crate::nn::{BiGru, Conv1d, Embedding, Graph, Linear, ParamStore, SeqVar, SequenceBatch, Var, VectorialAttention};
use crate::tensor::Tensor;

/// Architecture sizes for every model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_dim: usize,
    pub acoustic_dim: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub speech_hidden: usize,
    pub speech_layers: usize,
    pub char_embed: usize,
    pub text_hidden: usize,
    pub text_layers: usize,
    pub asr_hidden: usize,
    pub asr_layers: usize,
    pub decoder_hidden: usize,
    pub decoder_embed: usize,
    pub mtl_asr_hidden: usize,
    /// (shared, retrieval head, ASR/SLT head) layer counts.
    pub mtl_asr_layers: (usize, usize, usize),
    pub mtl_match_hidden: usize,
    /// (shared, image head) layer counts; the text head is attention only.
    pub mtl_match_layers: (usize, usize),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_dim: 2048,
            acoustic_dim: MFCC_DIM,
            conv_channels: 64,
            conv_kernel: 6,
            conv_stride: 2,
            speech_hidden: 1024,
            speech_layers: 4,
            char_embed: 128,
            text_hidden: 1024,
            text_layers: 2,
            asr_hidden: 768,
            asr_layers: 5,
            decoder_hidden: 768,
            decoder_embed: 128,
            mtl_asr_hidden: 768,
            mtl_asr_layers: (4, 1, 1),
            mtl_match_hidden: 1024,
            mtl_match_layers: (2, 2),
        }
    }
}

impl EncoderConfig {
    /// Every width divided by eight; layer counts unchanged.
    pub fn toy() -> Self {
        let full = Self::default();
        Self {
            image_dim: full.image_dim / 8,
            conv_channels: full.conv_channels / 8,
            speech_hidden: full.speech_hidden / 8,
            char_embed: full.char_embed / 8,
            text_hidden: full.text_hidden / 8,
            asr_hidden: full.asr_hidden / 8,
            decoder_hidden: full.decoder_hidden / 8,
            decoder_embed: full.decoder_embed / 8,
            mtl_asr_hidden: full.mtl_asr_hidden / 8,
            mtl_match_hidden: full.mtl_match_hidden / 8,
            ..full
        }
    }

    fn conv(&self, store: &mut ParamStore, name: &str) -> Conv1d {
        Conv1d::new(store, name, self.acoustic_dim, self.conv_channels, self.conv_kernel, self.conv_stride)
    }

    /// Frames an utterance needs to survive the front-end convolution.
    pub fn min_frames(&self) -> usize {
        self.conv_kernel
    }
}

/// Padded, time-major character indices: `indices[t * B + b]`, PAD beyond each length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub indices: Vec<usize>,
    pub lengths: Vec<usize>,
    pub steps: usize,
}

impl TokenBatch {
    pub fn new(seqs: &[&[usize]], pad: usize) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("token batch needs non-empty sequences"));
        }
        let b = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap();
        let mut indices = vec![pad; steps * b];
        for (i, s) in seqs.iter().enumerate() {
            for (t, &tok) in s.iter().enumerate() {
                indices[t * b + i] = tok;
            }
        }
        Ok(Self { indices, lengths: seqs.iter().map(|s| s.len()).collect(), steps })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

pub fn speech_input(g: &Graph, frames: &[&Tensor]) -> Result<SeqVar> {
    Ok(SeqVar::input(g, &SequenceBatch::from_items(frames)?))
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, name: &str, image_dim: usize, embed_dim: usize) -> Self {
        Self { proj: Linear::new(store, &format!("{name}.proj"), image_dim, embed_dim) }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, features: Var) -> Result<Var> {
        g.l2_normalize(self.proj.forward(g, store, features)?)
    }
}

/// Convolution followed by a stack of bidirectional GRUs.
#[derive(Clone, Debug)]
pub struct SpeechTrunk {
    pub conv: Conv1d,
    pub rnn: BiGru,
}

impl SpeechTrunk {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, hidden: usize, layers: usize) -> Self {
        let conv = cfg.conv(store, &format!("{name}.conv"));
        let rnn = BiGru::new(store, &format!("{name}.rnn"), cfg.conv_channels, hidden, layers);
        Self { conv, rnn }
    }

    pub fn output_dim(&self) -> usize {
        self.rnn.output_dim()
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &SeqVar) -> Result<SeqVar> {
        let h = self.conv.forward(g, store, x)?;
        self.rnn.forward(g, store, &h)
    }
}

#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub trunk: SpeechTrunk,
    pub attn: VectorialAttention,
}

impl SpeechEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Self {
        let trunk = SpeechTrunk::new(store, name, cfg, cfg.speech_hidden, cfg.speech_layers);
        let attn = VectorialAttention::new(store, &format!("{name}.attn"), trunk.output_dim());
        Self { trunk, attn }
    }

    pub fn embed_dim(&self) -> usize {
        self.trunk.output_dim()
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &SeqVar) -> Result<Var> {
        let h = self.trunk.forward(g, store, x)?;
        g.l2_normalize(self.attn.forward(g, store, &h)?)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: Embedding,
    pub rnn: BiGru,
    pub attn: VectorialAttention,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, vocab_size: usize) -> Self {
        let embed = Embedding::new(store, &format!("{name}.embed"), vocab_size, cfg.char_embed);
        let rnn = BiGru::new(store, &format!("{name}.rnn"), cfg.char_embed, cfg.text_hidden, cfg.text_layers);
        let attn = VectorialAttention::new(store, &format!("{name}.attn"), rnn.output_dim());
        Self { embed, rnn, attn }
    }

    pub fn embed_dim(&self) -> usize {
        self.rnn.output_dim()
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, tokens: &TokenBatch) -> Result<Var> {
        let e = self.embed.forward(g, store, &tokens.indices)?;
        let x = SeqVar { data: e, lengths: tokens.lengths.clone(), steps: tokens.steps };
        let h = self.rnn.forward(g, store, &x)?;
        g.l2_normalize(self.attn.forward(g, store, &h)?)
    }
}

/// Shared trunk with a retrieval head and an ASR/SLT head.
#[derive(Clone, Debug)]
pub struct MtlAsrEncoder {
    pub shared: SpeechTrunk,
    pub retrieval_rnn: BiGru,
    pub retrieval_attn: VectorialAttention,
    pub asr_rnn: BiGru,
}

impl MtlAsrEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Self {
        let (shared, ret, asr) = cfg.mtl_asr_layers;
        let h = cfg.mtl_asr_hidden;
        let shared = SpeechTrunk::new(store, &format!("{name}.shared"), cfg, h, shared);
        let d = shared.output_dim();
        let retrieval_rnn = BiGru::new(store, &format!("{name}.retrieval.rnn"), d, h, ret);
        let retrieval_attn = VectorialAttention::new(store, &format!("{name}.retrieval.attn"), retrieval_rnn.output_dim());
        let asr_rnn = BiGru::new(store, &format!("{name}.asr.rnn"), d, h, asr);
        Self { shared, retrieval_rnn, retrieval_attn, asr_rnn }
    }

    pub fn embed_dim(&self) -> usize {
        self.retrieval_rnn.output_dim()
    }

    pub fn sequence_dim(&self) -> usize {
        self.asr_rnn.output_dim()
    }

    pub fn retrieval_from(&self, g: &Graph, store: &ParamStore, shared: &SeqVar) -> Result<Var> {
        let h = self.retrieval_rnn.forward(g, store, shared)?;
        g.l2_normalize(self.retrieval_attn.forward(g, store, &h)?)
    }

    pub fn retrieval(&self, g: &Graph, store: &ParamStore, x: &SeqVar) -> Result<Var> {
        let s = self.shared.forward(g, store, x)?;
        self.retrieval_from(g, store, &s)
    }

    /// Encoder sequence for the attention decoder.
    pub fn sequence(&self, g: &Graph, store: &ParamStore, x: &SeqVar) -> Result<SeqVar> {
        let s = self.shared.forward(g, store, x)?;
        self.asr_rnn.forward(g, store, &s)
    }
}

/// Shared trunk with an image-retrieval head (GRUs + attention) and a
/// speech–text matching head (attention directly on the trunk).
#[derive(Clone, Debug)]
pub struct MtlMatchEncoder {
    pub shared: SpeechTrunk,
    pub image_rnn: BiGru,
    pub image_attn: VectorialAttention,
    pub text_attn: VectorialAttention,
}

impl MtlMatchEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Self {
        let (shared, image) = cfg.mtl_match_layers;
        let h = cfg.mtl_match_hidden;
        let shared = SpeechTrunk::new(store, &format!("{name}.shared"), cfg, h, shared);
        let d = shared.output_dim();
        let image_rnn = BiGru::new(store, &format!("{name}.image.rnn"), d, h, image);
        let image_attn = VectorialAttention::new(store, &format!("{name}.image.attn"), image_rnn.output_dim());
        let text_attn = VectorialAttention::new(store, &format!("{name}.text.attn"), d);
        Self { shared, image_rnn, image_attn, text_attn }
    }

    pub fn embed_dim(&self) -> usize {
        self.image_rnn.output_dim()
    }

    pub fn image_from(&self, g: &Graph, store: &ParamStore, shared: &SeqVar) -> Result<Var> {
        let h = self.image_rnn.forward(g, store, shared)?;
        g.l2_normalize(self.image_attn.forward(g, store, &h)?)
    }

    pub fn text_from(&self, g: &Graph, store: &ParamStore, shared: &SeqVar) -> Result<Var> {
        g.l2_normalize(self.text_attn.forward(g, store, shared)?)
    }

    pub fn image_task(&self, g: &Graph, store: &ParamStore, x: &SeqVar) -> Result<Var> {
        let s = self.shared.forward(g, store, x)?;
        self.image_from(g, store, &s)
    }

    pub fn text_task(&self, g: &Graph, store: &ParamStore, x: &SeqVar) -> Result<Var> {
        let s = self.shared.forward(g, store, x)?;
        self.text_from(g, store, &s)
    }

    /// Both embeddings from one trunk pass: `(image task, text task)`.
    pub fn both(&self, g: &Graph, store: &ParamStore, x: &SeqVar) -> Result<(Var, Var)> {
        let s = self.shared.forward(g, store, x)?;
        Ok((self.image_from(g, store, &s)?, self.text_from(g, store, &s)?))
    }
}

/// Stack host vectors into a `[B, D]` graph input.
pub fn rows_input(g: &Graph, rows: &[&[f64]]) -> Result<Var> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("rows of different widths"));
    }
    Ok(g.input(Tensor::matrix(rows.len(), d, rows.concat())?))
}
