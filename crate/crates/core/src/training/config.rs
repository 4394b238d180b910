use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::OptimConfig;
use crate::data::{Dataset, Split, SplitSpec, TextKind};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::MfccConfig;
use crate::objectives::DEFAULT_MARGIN;
use crate::seq2seq::{Feed, DEFAULT_BEAM_WIDTH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    SpeechImage,
    TextImage,
    PipeInd,
    PipeSeq,
    MtlTranscribe,
    MtlTranslate,
    MtlMatch,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::SpeechImage,
        Strategy::TextImage,
        Strategy::PipeInd,
        Strategy::PipeSeq,
        Strategy::MtlTranscribe,
        Strategy::MtlTranslate,
        Strategy::MtlMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SpeechImage => "speech-image",
            Strategy::TextImage => "text-image",
            Strategy::PipeInd => "pipe-ind",
            Strategy::PipeSeq => "pipe-seq",
            Strategy::MtlTranscribe => "mtl-transcribe",
            Strategy::MtlTranslate => "mtl-translate",
            Strategy::MtlMatch => "mtl-match",
        }
    }

    /// The text kind this strategy consumes: fixed for the two MTL seq2seq
    /// variants, configurable otherwise, unused for speech-image.
    pub fn text_kind(self, configured: TextKind) -> Option<TextKind> {
        match self {
            Strategy::SpeechImage => None,
            Strategy::MtlTranscribe => Some(TextKind::Transcription),
            Strategy::MtlTranslate => Some(TextKind::Translation),
            _ => Some(configured),
        }
    }

    pub fn is_pipeline(self) -> bool {
        matches!(self, Strategy::PipeInd | Strategy::PipeSeq)
    }

    pub fn is_mtl(self) -> bool {
        matches!(self, Strategy::MtlTranscribe | Strategy::MtlTranslate | Strategy::MtlMatch)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub strategy: Strategy,
    pub text_kind: TextKind,
    /// Fraction of training records that keep their text.
    pub text_fraction: f64,
    /// Seed of the text-retention shuffle. Kept apart from `seed` so that
    /// repeated runs over seeds see the same retained subset.
    pub plan_seed: u64,
    pub epochs: usize,
    /// Epochs for the ASR/SLT stage of pipeline strategies; `None` means `epochs`.
    pub asr_epochs: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub margin: f64,
    pub encoder: EncoderConfig,
    pub optim: OptimConfig,
    /// Separate learning-rate bounds for ASR/SLT training; `None` reuses `optim`.
    pub asr_optim: Option<OptimConfig>,
    pub mfcc: MfccConfig,
    pub feed: Feed,
    pub beam_width: usize,
    /// Beam width used for per-epoch validation decoding during ASR/SLT training.
    pub val_beam_width: usize,
    pub length_norm: bool,
    /// Applied when the dataset carries no val records.
    pub split: Option<SplitSpec>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::SpeechImage,
            text_kind: TextKind::Transcription,
            text_fraction: 1.0,
            plan_seed: 0,
            epochs: 32,
            asr_epochs: None,
            batch_size: 32,
            seed: 0,
            margin: DEFAULT_MARGIN,
            encoder: EncoderConfig::default(),
            optim: OptimConfig::default(),
            asr_optim: None,
            mfcc: MfccConfig::default(),
            feed: Feed::TeacherForcing,
            beam_width: DEFAULT_BEAM_WIDTH,
            val_beam_width: 1,
            length_norm: true,
            split: None,
        }
    }
}

impl TrainRunConfig {
    /// Narrow encoders, small batches and a larger peak learning rate, sized
    /// for the synthetic toy corpus on one CPU core. The ASR/SLT stage gets
    /// a shallower encoder, twice the epochs and free-running decoding, which
    /// generalise much better from ~100 utterances than teacher forcing.
    pub fn toy(strategy: Strategy) -> Self {
        Self {
            strategy,
            batch_size: 8,
            encoder: EncoderConfig { asr_layers: 2, ..EncoderConfig::toy() },
            asr_epochs: Some(64),
            optim: OptimConfig { lr_max: 2e-3, ..OptimConfig::default() },
            asr_optim: Some(OptimConfig { lr_max: 3e-3, ..OptimConfig::default() }),
            feed: Feed::FreeRunning,
            split: Some(SplitSpec { n_val_images: 6, n_test_images: 0, seed: 0 }),
            ..Self::default()
        }
    }

    pub fn text(&self) -> Option<TextKind> {
        self.strategy.text_kind(self.text_kind)
    }

    pub fn asr_epochs(&self) -> usize {
        self.asr_epochs.unwrap_or(self.epochs)
    }

    pub fn asr_optim(&self) -> OptimConfig {
        self.asr_optim.unwrap_or(self.optim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(0.0..=1.0).contains(&self.text_fraction) {
            return bad(format!("text fraction {} outside [0, 1]", self.text_fraction));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if self.beam_width == 0 || self.val_beam_width == 0 {
            return bad("beam widths must be positive".into());
        }
        if self.margin <= 0.0 {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        Ok(())
    }

    /// Fail before training if the dataset lacks what the strategy needs.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        self.validate()?;
        let train: Vec<_> = ds.split(Split::Train).collect();
        if train.is_empty() {
            return Err(Error::Validation("dataset has no training records".into()));
        }
        if let Some(kind) = self.text() {
            if !train.iter().any(|r| r.text(kind).is_some()) {
                return Err(Error::Validation(format!("strategy {} needs {kind} text on training records", self.strategy)));
            }
            if self.strategy.is_pipeline() && self.text_fraction == 0.0 {
                return Err(Error::Validation(format!("strategy {} cannot train with text fraction 0", self.strategy)));
            }
        }
        if ds.image_dim() != self.encoder.image_dim {
            return Err(Error::Validation(format!(
                "image features have dim {} but the encoder expects {}",
                ds.image_dim(),
                self.encoder.image_dim
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_toy_dataset;

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("speech".parse::<Strategy>().is_err());
    }

    #[test]
    fn config_json_round_trip_and_hash() {
        let c = TrainRunConfig::toy(Strategy::MtlMatch);
        let back: TrainRunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
        let other = TrainRunConfig { seed: 1, ..c.clone() };
        assert_ne!(other.content_hash(), c.content_hash());
        let partial: TrainRunConfig = serde_json::from_str(r#"{"strategy": "pipe-seq", "epochs": 3}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.batch_size, 32);
    }

    #[test]
    fn dataset_checks() {
        let mut ds = synth_toy_dataset(6, 2, 5, 0);
        let cfg = TrainRunConfig::toy(Strategy::MtlTranslate);
        cfg.check_dataset(&ds).unwrap();
        for r in &mut ds.records {
            r.translation = None;
        }
        assert!(matches!(cfg.check_dataset(&ds), Err(Error::Validation(_))));
        TrainRunConfig::toy(Strategy::SpeechImage).check_dataset(&ds).unwrap();
        let zero = TrainRunConfig { text_fraction: 0.0, ..TrainRunConfig::toy(Strategy::PipeInd) };
        assert!(zero.check_dataset(&ds).is_err());
        let wrong_dim = TrainRunConfig::default();
        assert!(wrong_dim.check_dataset(&ds).is_err());
    }
}
