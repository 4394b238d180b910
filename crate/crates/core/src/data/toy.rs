//! A small synthetic stand-in for a captioned-image corpus with speech.
//!
//! Each image is the sum of the feature vectors of a few "concept" words plus
//! noise; its captions say 3–6 of those words. Speech is phonetic: every
//! letter has its own two-tone chord, a word is its letters' chords in order
//! (each lasting a couple of frames), and an utterance strings words together
//! with pauses, random gain and Gaussian noise. The "translation" reverses
//! word order and maps each word to a kana pair.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::record::{AudioRef, Dataset, SampleRecord, Split};

pub const TOY_SAMPLE_RATE: u32 = 16000;
const FRAME: usize = 160;
const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const KANA: &str = "あいうえおかきくけこさしすせそたちつてとなにぬねのはひふへほまみむめもやゆよらりるれろわ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub n_images: usize,
    pub captions_per_image: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub image_dim: usize,
    pub concepts_per_image: (usize, usize),
    pub caption_words: (usize, usize),
    /// Frames (10 ms each) per spoken letter, drawn per occurrence.
    pub phone_frames: (usize, usize),
    /// Silent frames between words.
    pub pause_frames: usize,
    pub noise_std: f64,
    pub image_noise_std: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_images: 30,
            captions_per_image: 5,
            vocab_size: 20,
            seed: 0,
            image_dim: 256,
            concepts_per_image: (3, 4),
            caption_words: (3, 6),
            phone_frames: (2, 3),
            pause_frames: 3,
            noise_std: 0.01,
            image_noise_std: 0.1,
        }
    }
}

pub fn synth_toy_dataset(n_images: usize, captions_per_image: usize, vocab_size: usize, seed: u64) -> Dataset {
    ToySpec { n_images, captions_per_image, vocab_size, seed, ..ToySpec::default() }.generate()
}

impl ToySpec {
    /// The synthetic word list, in generation order.
    pub fn words(&self) -> Vec<String> {
        let mut rng = self.stream(1);
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(self.vocab_size);
        while out.len() < self.vocab_size {
            let w: String = [*CONSONANTS.choose(&mut rng).unwrap(), *VOWELS.choose(&mut rng).unwrap(), *CONSONANTS.choose(&mut rng).unwrap()]
                .iter()
                .collect();
            if seen.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    }

    /// Word → kana-pair substitution, a bijection onto distinct targets.
    pub fn lexicon(&self) -> BTreeMap<String, String> {
        let kana: Vec<char> = KANA.chars().collect();
        let mut pairs: Vec<String> =
            kana.iter().flat_map(|a| kana.iter().map(move |b| [*a, *b].iter().collect())).collect();
        pairs.shuffle(&mut self.stream(2));
        self.words().into_iter().zip(pairs).collect()
    }

    pub fn translate(&self, words: &[&str], lexicon: &BTreeMap<String, String>) -> String {
        words.iter().rev().map(|w| lexicon[*w].as_str()).collect()
    }

    fn stream(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k);
        rng
    }

    /// Letter → (low, high) chord. Both tones come from evenly spaced,
    /// separately shuffled grids, so no two letters share a tone.
    fn phones(&self) -> BTreeMap<char, (f64, f64)> {
        let mut rng = self.stream(3);
        let letters: Vec<char> = CONSONANTS.iter().chain(VOWELS).copied().collect();
        let n = letters.len() as f64;
        let mut lo: Vec<f64> = (0..letters.len()).map(|i| 250.0 + 900.0 * i as f64 / n).collect();
        let mut hi: Vec<f64> = (0..letters.len()).map(|i| 1300.0 + 2400.0 * i as f64 / n).collect();
        lo.shuffle(&mut rng);
        hi.shuffle(&mut rng);
        letters.into_iter().zip(lo.into_iter().zip(hi)).collect()
    }

    pub fn generate(&self) -> Dataset {
        assert!(self.vocab_size >= 2, "toy vocabulary needs at least two words");
        let words = self.words();
        let lexicon = self.lexicon();
        let phones = self.phones();
        let mut img_rng = self.stream(4);
        let mut cap_rng = self.stream(5);
        let mut audio_rng = self.stream(6);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let scale = 1.0 / (self.image_dim as f64).sqrt();
        let concepts: Vec<Vec<f64>> =
            (0..self.vocab_size).map(|_| (0..self.image_dim).map(|_| unit.sample(&mut img_rng) * scale).collect()).collect();

        let mut images = BTreeMap::new();
        let mut records = Vec::with_capacity(self.n_images * self.captions_per_image);
        for i in 0..self.n_images {
            let image_id = format!("img{i:04}");
            let k = img_rng.random_range(self.concepts_per_image.0..=self.concepts_per_image.1).min(self.vocab_size);
            let chosen: Vec<usize> = rand::seq::index::sample(&mut img_rng, self.vocab_size, k).into_vec();
            let mut feat = vec![0.0; self.image_dim];
            for &c in &chosen {
                for (f, v) in feat.iter_mut().zip(&concepts[c]) {
                    *f += v;
                }
            }
            for f in &mut feat {
                *f += self.image_noise_std * scale * unit.sample(&mut img_rng);
            }
            images.insert(image_id.clone(), feat);

            for c in 0..self.captions_per_image {
                let n = cap_rng.random_range(self.caption_words.0..=self.caption_words.1);
                // no word directly repeats its predecessor
                let mut seq: Vec<usize> = Vec::with_capacity(n);
                while seq.len() < n {
                    let w = *chosen.choose(&mut cap_rng).unwrap();
                    if chosen.len() == 1 || seq.last() != Some(&w) {
                        seq.push(w);
                    }
                }
                let said: Vec<&str> = seq.iter().map(|&w| words[w].as_str()).collect();
                let samples = self.speak(&said, &phones, &mut audio_rng);
                records.push(SampleRecord {
                    id: format!("{image_id}_{c}"),
                    image_id: image_id.clone(),
                    audio_ref: AudioRef::Inline { sample_rate: TOY_SAMPLE_RATE, samples },
                    image_ref: None,
                    transcription: Some(said.join(" ")),
                    translation: Some(self.translate(&said, &lexicon)),
                    split: Split::Train,
                });
            }
        }
        Dataset { records, images, base_dir: None }
    }

    fn speak(&self, said: &[&str], phones: &BTreeMap<char, (f64, f64)>, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let noise = Normal::new(0.0, self.noise_std.max(1e-12)).unwrap();
        let sr = TOY_SAMPLE_RATE as f64;
        let mut out = vec![0.0; 2 * FRAME];
        for word in said {
            let gain = rng.random_range(0.25..0.35);
            for c in word.chars() {
                let (lo, hi) = phones[&c];
                let n = rng.random_range(self.phone_frames.0..=self.phone_frames.1) * FRAME;
                for s in 0..n {
                    let time = s as f64 / sr;
                    let env = (PI * s as f64 / n as f64).sin();
                    out.push(gain * env * ((2.0 * PI * lo * time).sin() + 0.5 * (2.0 * PI * hi * time).sin()));
                }
            }
            out.extend(std::iter::repeat_n(0.0, self.pause_frames * FRAME));
        }
        out.extend(std::iter::repeat_n(0.0, FRAME));
        for s in &mut out {
            *s += noise.sample(rng);
        }
        out
    }
}
