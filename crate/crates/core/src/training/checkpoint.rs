//! Checkpoint files: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header, then every array as raw little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CharVocab;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::{ArchKind, Model};
use super::optim::{Adam, Moments};
use super::strategies::TrainedModel;

const MAGIC: &[u8; 8] = b"VGSLUCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: String,
    pub kind: ArchKind,
    pub encoder: EncoderConfig,
    pub vocab: Option<CharVocab>,
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    pub params: BTreeMap<String, Tensor>,
    pub adam: Adam,
    pub rng: Vec<ChaCha8Rng>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    role: String,
    kind: ArchKind,
    encoder: EncoderConfig,
    vocab: Option<CharVocab>,
    seed: u64,
    epoch: usize,
    config_hash: String,
    adam: AdamHeader,
    rng: Vec<ChaCha8Rng>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn from_trained(t: &TrainedModel, encoder: &EncoderConfig, config_hash: &str) -> Self {
        Self {
            role: t.role.clone(),
            kind: t.model.kind,
            encoder: encoder.clone(),
            vocab: t.model.vocab.clone(),
            seed: t.model.store.seed(),
            epoch: t.snapshot.epoch,
            config_hash: config_hash.to_string(),
            params: t.snapshot.store.to_named(),
            adam: t.snapshot.adam.clone(),
            rng: t.snapshot.rng.clone(),
        }
    }

    /// Rebuild the model and load the stored weights.
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::new(self.kind, &self.encoder, self.vocab.clone(), self.seed)?;
        m.store.load_values(&self.params)?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut payload: Vec<&Tensor> = Vec::new();
        for (name, t) in &self.params {
            arrays.push(ArrayEntry { name: format!("param/{name}"), shape: t.shape().to_vec() });
            payload.push(t);
        }
        for (name, m) in &self.adam.state {
            arrays.push(ArrayEntry { name: format!("adam.m/{name}"), shape: m.m.shape().to_vec() });
            payload.push(&m.m);
            arrays.push(ArrayEntry { name: format!("adam.v/{name}"), shape: m.v.shape().to_vec() });
            payload.push(&m.v);
        }
        let header = Header {
            role: self.role.clone(),
            kind: self.kind,
            encoder: self.encoder.clone(),
            vocab: self.vocab.clone(),
            seed: self.seed,
            epoch: self.epoch,
            config_hash: self.config_hash.clone(),
            adam: AdamHeader {
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
                steps: self.adam.state.iter().map(|(k, m)| (k.clone(), m.t)).collect(),
            },
            rng: self.rng.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.iter().map(|t| 8 * t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in payload {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::Parse { path: origin.to_path_buf(), line: 0, message: m.to_string() };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 16 + hlen;
        let mut params = BTreeMap::new();
        let mut moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for a in header.arrays {
            let n: usize = a.shape.iter().product();
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated payload"))?;
            pos += 8 * n;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(a.shape, data)?;
            match a.name.split_once('/') {
                Some(("param", name)) => {
                    params.insert(name.to_string(), t);
                }
                Some(("adam.m", name)) => moments.entry(name.to_string()).or_default().0 = Some(t),
                Some(("adam.v", name)) => moments.entry(name.to_string()).or_default().1 = Some(t),
                _ => return Err(bad(&format!("unknown array `{}`", a.name))),
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        let mut adam = Adam::new(header.adam.beta1, header.adam.beta2, header.adam.eps);
        for (name, (m, v)) in moments {
            let (Some(m), Some(v)) = (m, v) else {
                return Err(bad(&format!("incomplete optimizer state for `{name}`")));
            };
            let t = *header.adam.steps.get(&name).ok_or_else(|| bad(&format!("no step count for `{name}`")))?;
            adam.state.insert(name, Moments { m, v, t });
        }
        Ok(Self {
            role: header.role,
            kind: header.kind,
            encoder: header.encoder,
            vocab: header.vocab,
            seed: header.seed,
            epoch: header.epoch,
            config_hash: header.config_hash,
            params,
            adam,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
