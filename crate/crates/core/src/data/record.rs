use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, read_array, ArrayFile, Precision, Waveform};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextKind {
    Transcription,
    Translation,
}

impl fmt::Display for TextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextKind::Transcription => "transcription",
            TextKind::Translation => "translation",
        })
    }
}

impl FromStr for TextKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transcription" => Ok(TextKind::Transcription),
            "translation" => Ok(TextKind::Translation),
            other => Err(Error::invalid(format!("unknown text kind `{other}`"))),
        }
    }
}

/// Either a path to a WAV file (relative to the manifest) or samples inline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AudioRef {
    Path(PathBuf),
    Inline { sample_rate: u32, samples: Vec<f64> },
}

/// Where an image's feature vector lives. Without `row`, every row of the
/// file is treated as one crop and the crops are averaged.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image_id: String,
    pub audio_ref: AudioRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcription: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
    #[serde(default)]
    pub split: Split,
}

impl SampleRecord {
    pub fn text(&self, kind: TextKind) -> Option<&str> {
        match kind {
            TextKind::Transcription => self.transcription.as_deref(),
            TextKind::Translation => self.translation.as_deref(),
        }
    }

    pub fn text_mut(&mut self, kind: TextKind) -> &mut Option<String> {
        match kind {
            TextKind::Transcription => &mut self.transcription,
            TextKind::Translation => &mut self.translation,
        }
    }
}

/// Parse a JSON-lines manifest. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Validation(format!("{}: line {}: duplicate id `{}`", path.display(), i + 1, rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Records plus resolved image features, keyed by image id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub images: BTreeMap<String, Vec<f64>>,
    /// Directory against which relative audio paths resolve.
    pub base_dir: Option<PathBuf>,
}

impl Dataset {
    pub fn image_dim(&self) -> usize {
        self.images.values().next().map(|v| v.len()).unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Distinct image ids of a split in first-appearance order.
    pub fn split_images(&self, split: Split) -> Vec<String> {
        let mut seen = HashSet::new();
        self.split(split).filter(|r| seen.insert(r.image_id.clone())).map(|r| r.image_id.clone()).collect()
    }

    pub fn audio(&self, rec: &SampleRecord) -> Result<Waveform> {
        match &rec.audio_ref {
            AudioRef::Inline { sample_rate, samples } => Waveform::new(samples.clone(), *sample_rate),
            AudioRef::Path(p) => features::read_wav(&self.resolve(p)),
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn with_records(&self, records: Vec<SampleRecord>) -> Self {
        Self { records, ..self.clone() }
    }

    /// Checks common to every strategy: unique ids, images present
    /// with one dimension, and split assignment consistent per image.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut split_of: HashMap<&str, Split> = HashMap::new();
        let dim = self.image_dim();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate id `{}`", r.id)));
            }
            match self.images.get(&r.image_id) {
                None => return Err(Error::Validation(format!("record `{}` has no features for image `{}`", r.id, r.image_id))),
                Some(v) if v.len() != dim => {
                    return Err(Error::Validation(format!("image `{}` has dim {} but dataset uses {dim}", r.image_id, v.len())))
                }
                _ => {}
            }
            if let Some(prev) = split_of.insert(&r.image_id, r.split) {
                if prev != r.split {
                    return Err(Error::Validation(format!("captions of image `{}` span several splits", r.image_id)));
                }
            }
        }
        Ok(())
    }

    /// Write a self-contained copy: `manifest.jsonl`, `images.f32`, and one
    /// WAV per record for any inline audio.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("audio")).map_err(|e| Error::io(dir, e))?;
        let image_ids: Vec<&String> = self.images.keys().collect();
        let row_of: HashMap<&str, usize> = image_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let dim = self.image_dim();
        let mut flat = Vec::with_capacity(dim * image_ids.len());
        for id in &image_ids {
            flat.extend_from_slice(&self.images[*id]);
        }
        features::write_array(&dir.join("images.f32"), &ArrayFile::new(dim.max(1), flat)?, Precision::F32)?;

        let manifest = dir.join("manifest.jsonl");
        let mut out = std::io::BufWriter::new(fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?);
        for r in &self.records {
            let mut r = r.clone();
            if let AudioRef::Inline { .. } = r.audio_ref {
                let rel = PathBuf::from("audio").join(format!("{}.wav", r.id));
                features::write_wav(&dir.join(&rel), &self.audio(&r)?)?;
                r.audio_ref = AudioRef::Path(rel);
            } else if let AudioRef::Path(p) = &r.audio_ref {
                r.audio_ref = AudioRef::Path(self.resolve(p));
            }
            r.image_ref = Some(ImageRef {
                path: PathBuf::from("images.f32"),
                row: Some(row_of[r.image_id.as_str()]),
            });
            writeln!(out, "{}", serde_json::to_string(&r)?).map_err(|e| Error::io(&manifest, e))?;
        }
        out.flush().map_err(|e| Error::io(&manifest, e))?;
        Ok(manifest)
    }
}

/// Load a manifest and resolve every record's image features.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let records = load_manifest(manifest)?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut files: HashMap<PathBuf, ArrayFile> = HashMap::new();
    let mut images = BTreeMap::new();
    for r in &records {
        let Some(iref) = &r.image_ref else {
            return Err(Error::Validation(format!("record `{}` has no image_ref", r.id)));
        };
        let path = if iref.path.is_relative() { base.join(&iref.path) } else { iref.path.clone() };
        if !files.contains_key(&path) {
            files.insert(path.clone(), read_array(&path, Precision::F32)?);
        }
        let arr = &files[&path];
        let feat = match iref.row {
            Some(i) if i < arr.count() => arr.row(i).to_vec(),
            Some(i) => return Err(Error::IndexOutOfRange { index: i, size: arr.count() }),
            None => features::mean_over_crops(&arr.rows().map(<[f64]>::to_vec).collect::<Vec<_>>())?,
        };
        if let Some(prev) = images.insert(r.image_id.clone(), feat.clone()) {
            if prev != feat {
                return Err(Error::Validation(format!("image `{}` resolves to different features", r.image_id)));
            }
        }
    }
    let ds = Dataset { records, images, base_dir: Some(base) };
    ds.validate()?;
    Ok(ds)
}
