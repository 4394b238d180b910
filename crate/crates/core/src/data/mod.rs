//! Paired image / speech / text records: manifests, splits, textual
//! downsampling, character vocabularies and the synthetic toy corpus.

mod plan;
mod record;
mod toy;
mod vocab;

pub use plan::{apply_text_plan, reduced_to_translated, split_dataset, SplitSpec, TextSupervisionPlan};
pub use record::{load_dataset, load_manifest, AudioRef, Dataset, ImageRef, SampleRecord, Split, TextKind};
pub use toy::{synth_toy_dataset, ToySpec, TOY_SAMPLE_RATE};
pub use vocab::{build_char_vocab, CharVocab, EOS, PAD, SOS};
