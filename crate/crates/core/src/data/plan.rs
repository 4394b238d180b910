use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::{SampleRecord, Split, TextKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_val_images: usize,
    pub n_test_images: usize,
    pub seed: u64,
}

/// Assign splits per image. Only the set of image ids and the seed matter:
/// ids are sorted before the seeded shuffle, so caption order is irrelevant.
pub fn split_dataset(records: &[SampleRecord], spec: &SplitSpec) -> Result<Vec<SampleRecord>> {
    let images: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    if spec.n_val_images + spec.n_test_images >= images.len() {
        return Err(Error::invalid(format!(
            "{} val + {} test images leave no training images out of {}",
            spec.n_val_images,
            spec.n_test_images,
            images.len()
        )));
    }
    let mut order = images;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let split_of: HashMap<&str, Split> = order
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < spec.n_val_images {
                Split::Val
            } else if i < spec.n_val_images + spec.n_test_images {
                Split::Test
            } else {
                Split::Train
            };
            (*id, s)
        })
        .collect();
    Ok(records
        .iter()
        .map(|r| SampleRecord { split: split_of[r.image_id.as_str()], ..r.clone() })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextSupervisionPlan {
    pub fraction: f64,
    pub kind: TextKind,
    pub seed: u64,
}

impl TextSupervisionPlan {
    /// Number of training records allowed to keep text.
    pub fn budget(&self, n_train: usize) -> usize {
        ((self.fraction * n_train as f64).ceil() as usize).min(n_train)
    }
}

/// Strip text of `plan.kind` from all but `ceil(fraction × N_train)` training
/// records. Records are ranked by a seeded shuffle of their sorted ids and the
/// first ones that carry text keep it, so a smaller fraction with the same seed
/// always keeps a subset of what a larger one keeps. Val/test are untouched.
pub fn apply_text_plan(records: &[SampleRecord], plan: &TextSupervisionPlan) -> Result<Vec<SampleRecord>> {
    if !(0.0..=1.0).contains(&plan.fraction) {
        return Err(Error::invalid(format!("text fraction {} outside [0, 1]", plan.fraction)));
    }
    let mut train_ids: Vec<&str> = records.iter().filter(|r| r.split == Split::Train).map(|r| r.id.as_str()).collect();
    train_ids.sort_unstable();
    let budget = plan.budget(train_ids.len());
    train_ids.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
    let by_id: HashMap<&str, &SampleRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let keep: HashSet<&str> = train_ids
        .into_iter()
        .filter(|id| by_id[id].text(plan.kind).is_some())
        .take(budget)
        .collect();
    Ok(records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.split == Split::Train && !keep.contains(r.id.as_str()) {
                *r.text_mut(plan.kind) = None;
            }
            r
        })
        .collect())
}

/// Keep only records that also carry a translation.
pub fn reduced_to_translated(records: &[SampleRecord]) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.translation.is_some()).cloned().collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::record::AudioRef;

    fn corpus(images: usize, caps: usize) -> Vec<SampleRecord> {
        (0..images)
            .flat_map(|i| {
                (0..caps).map(move |c| SampleRecord {
                    id: format!("im{i}_{c}"),
                    image_id: format!("im{i}"),
                    audio_ref: AudioRef::Inline { sample_rate: 8000, samples: vec![0.0; 10 + c] },
                    image_ref: None,
                    transcription: Some(format!("caption {i} {c}")),
                    translation: (c % 2 == 0).then(|| format!("訳{i}{c}")),
                    split: Split::Train,
                })
            })
            .collect()
    }

    fn count(rs: &[SampleRecord], s: Split) -> usize {
        rs.iter().filter(|r| r.split == s).count()
    }

    fn texted(rs: &[SampleRecord], kind: TextKind) -> usize {
        rs.iter().filter(|r| r.split == Split::Train && r.text(kind).is_some()).count()
    }

    #[test]
    fn split_counts_and_determinism() {
        let recs = corpus(10, 2);
        let spec = SplitSpec { n_val_images: 1, n_test_images: 1, seed: 4 };
        let a = split_dataset(&recs, &spec).unwrap();
        assert_eq!((count(&a, Split::Train), count(&a, Split::Val), count(&a, Split::Test)), (16, 2, 2));
        assert_eq!(a, split_dataset(&recs, &spec).unwrap());
        for pair in a.chunks(2) {
            assert_eq!(pair[0].split, pair[1].split);
        }
        assert!(split_dataset(&recs, &SplitSpec { n_val_images: 5, n_test_images: 5, seed: 0 }).is_err());
    }

    #[test]
    fn full_scale_split_leaves_6000_training_images() {
        let recs = corpus(8000, 1);
        let a = split_dataset(&recs, &SplitSpec { n_val_images: 1000, n_test_images: 1000, seed: 0 }).unwrap();
        assert_eq!(count(&a, Split::Train), 6000);
    }

    #[test]
    fn ceil_budget_arithmetic() {
        let plan = TextSupervisionPlan { fraction: 0.4, kind: TextKind::Transcription, seed: 0 };
        assert_eq!(plan.budget(15498), 6200);
    }

    #[test]
    fn fraction_extremes() {
        let recs = corpus(6, 3);
        let all = apply_text_plan(&recs, &TextSupervisionPlan { fraction: 1.0, kind: TextKind::Transcription, seed: 1 }).unwrap();
        assert_eq!(all, recs);
        let none = apply_text_plan(&recs, &TextSupervisionPlan { fraction: 0.0, kind: TextKind::Transcription, seed: 1 }).unwrap();
        assert_eq!(none.len(), recs.len());
        assert_eq!(texted(&none, TextKind::Transcription), 0);
        assert_eq!(texted(&none, TextKind::Translation), texted(&recs, TextKind::Translation));
        assert!(apply_text_plan(&recs, &TextSupervisionPlan { fraction: 1.5, kind: TextKind::Transcription, seed: 1 }).is_err());
    }

    #[test]
    fn val_and_test_keep_their_text() {
        let recs = split_dataset(&corpus(10, 2), &SplitSpec { n_val_images: 2, n_test_images: 2, seed: 1 }).unwrap();
        let out = apply_text_plan(&recs, &TextSupervisionPlan { fraction: 0.0, kind: TextKind::Transcription, seed: 0 }).unwrap();
        assert!(out.iter().filter(|r| r.split != Split::Train).all(|r| r.transcription.is_some()));
    }

    #[test]
    fn reduced_filter_keeps_translated_records() {
        let recs = corpus(4, 4);
        let r = reduced_to_translated(&recs);
        assert_eq!(r.len(), 8);
        assert!(r.iter().all(|x| x.translation.is_some()));
    }

    proptest! {
        #[test]
        fn plan_keeps_exact_budget_and_speech(n_img in 2usize..30, caps in 1usize..5, f in 0.0f64..=1.0, seed in 0u64..1000) {
            let recs = corpus(n_img, caps);
            let plan = TextSupervisionPlan { fraction: f, kind: TextKind::Transcription, seed };
            let out = apply_text_plan(&recs, &plan).unwrap();
            prop_assert_eq!(out.len(), recs.len());
            prop_assert_eq!(texted(&out, TextKind::Transcription), (f * recs.len() as f64).ceil() as usize);
            let dur = |rs: &[SampleRecord]| rs.iter().map(|r| match &r.audio_ref { AudioRef::Inline { samples, .. } => samples.len(), _ => 0 }).sum::<usize>();
            prop_assert_eq!(dur(&out), dur(&recs));
            prop_assert_eq!(&apply_text_plan(&out, &plan).unwrap(), &out);
        }

        #[test]
        fn smaller_fractions_are_nested(n_img in 2usize..30, f1 in 0.0f64..=1.0, shrink in 0.0f64..=1.0, seed in 0u64..1000) {
            let recs = corpus(n_img, 3);
            let f2 = f1 * shrink;
            let a = apply_text_plan(&recs, &TextSupervisionPlan { fraction: f1, kind: TextKind::Transcription, seed }).unwrap();
            let b = apply_text_plan(&recs, &TextSupervisionPlan { fraction: f2, kind: TextKind::Transcription, seed }).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(y.transcription.is_none() || x.transcription.is_some());
            }
        }

        #[test]
        fn composing_on_the_retained_set(n_img in 2usize..30, f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0, seed in 0u64..100) {
            let recs = corpus(n_img, 3);
            let n = recs.len();
            let a = apply_text_plan(&recs, &TextSupervisionPlan { fraction: f1, kind: TextKind::Transcription, seed }).unwrap();
            let retained: Vec<SampleRecord> = a.into_iter().filter(|r| r.transcription.is_some()).collect();
            let b = apply_text_plan(&retained, &TextSupervisionPlan { fraction: f2, kind: TextKind::Transcription, seed: seed + 1 }).unwrap();
            let inner = (f1 * n as f64).ceil();
            prop_assert_eq!(texted(&b, TextKind::Transcription), (f2 * inner).ceil() as usize);
        }

        #[test]
        fn split_ignores_caption_order(seed in 0u64..500, rot in 0usize..20) {
            let recs = corpus(10, 2);
            let spec = SplitSpec { n_val_images: 2, n_test_images: 1, seed };
            let a = split_dataset(&recs, &spec).unwrap();
            let mut shuffled = recs.clone();
            shuffled.rotate_left(rot);
            shuffled.reverse();
            let b = split_dataset(&shuffled, &spec).unwrap();
            let split_of = |rs: &[SampleRecord]| rs.iter().map(|r| (r.id.clone(), r.split)).collect::<std::collections::BTreeMap<_, _>>();
            prop_assert_eq!(split_of(&a), split_of(&b));
        }
    }
}
