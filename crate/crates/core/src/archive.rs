//! Model archive: a directory (or a zip of one) holding
//!
//! - `config.json`: encoder and fusion configuration plus the emotion order
//! - `manifest.json`: `{"magic", "tensors": [{name, dtype, shape, offset, byte_len}]}`
//! - `weights.bin`: little-endian `f32` values, row-major, at the manifest offsets
//! - `vocab.json` (optional): the word vocabulary matching `txt.emb`

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderConfig, EncoderWeights, ReferenceEncoder, POOLED_LEN};
use crate::extract::Vocab;
use crate::fusion::{FusionConfig, FusionWeights, EMOTIONS};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MAGIC: &str = "mer-weights/1";

const ENCODER_TENSORS: [&str; 3] = ["vis.proj", "aco.proj", "txt.emb"];

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("bad magic {0:?} in manifest")]
    BadMagic(String),
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("truncated blob for tensor {0}")]
    TruncatedBlob(String),
    #[error("malformed {file}: {reason}")]
    Malformed { file: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn malformed(file: &str, reason: impl ToString) -> ArchiveError {
    ArchiveError::Malformed { file: file.to_string(), reason: reason.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub emotions: Vec<String>,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, fusion: FusionConfig) -> Self {
        ModelConfig { encoder, fusion, emotions: EMOTIONS.iter().map(|e| e.to_string()).collect() }
    }

    fn validate(&self) -> Result<(), ArchiveError> {
        self.encoder.validate().map_err(|e| malformed(CONFIG_FILE, e))?;
        self.fusion.validate().map_err(|e| malformed(CONFIG_FILE, e))?;
        if self.emotions != self.fusion.emotions {
            return Err(malformed(CONFIG_FILE, "emotion order disagrees with fusion config"));
        }
        let (e, f) = (&self.encoder, &self.fusion);
        if (e.d_visual, e.d_acoustic, e.d_textual) != (f.d_visual, f.d_acoustic, f.d_textual) {
            return Err(malformed(CONFIG_FILE, "encoder and fusion dims disagree"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub config: ModelConfig,
    pub encoder: EncoderWeights,
    pub fusion: FusionWeights,
    pub vocab: Option<Vocab>,
}

impl ModelArchive {
    pub fn reference_encoder(&self) -> ReferenceEncoder {
        ReferenceEncoder::new(self.config.encoder, self.encoder.clone()).expect("archive validated on load")
    }

    fn named_tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            (ENCODER_TENSORS[0], self.encoder.vis_proj.view().into_dyn()),
            (ENCODER_TENSORS[1], self.encoder.aco_proj.view().into_dyn()),
            (ENCODER_TENSORS[2], self.encoder.txt_emb.view().into_dyn()),
        ];
        out.extend(crate::fusion::TENSORS.iter().map(|(n, _)| *n).zip(self.fusion.views()));
        out
    }

    /// Writes the archive directory. Values are stored as `f32`.
    pub fn save(&self, dir: &Path) -> Result<(), ArchiveError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ArchiveError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, view) in self.named_tensors() {
            let offset = blob.len() as u64;
            for v in view.iter() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                dtype: "f32".into(),
                shape: view.shape().to_vec(),
                offset,
                byte_len: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest { magic: MAGIC.into(), tensors };
        let write_json = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text + "\n").map_err(io_err(&p))
        };
        write_json(MANIFEST_FILE, serde_json::to_string_pretty(&manifest).expect("manifest json"))?;
        write_json(CONFIG_FILE, serde_json::to_string_pretty(&self.config).expect("config json"))?;
        let p = dir.join(WEIGHTS_FILE);
        fs::write(&p, blob).map_err(io_err(&p))?;
        if let Some(v) = &self.vocab {
            write_json(VOCAB_FILE, v.to_json())?;
        }
        Ok(())
    }

    /// Loads from an archive directory or a zip file containing its files.
    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        let mut source = Source::open(path)?;
        let config: ModelConfig = parse_json(CONFIG_FILE, &source.read(CONFIG_FILE)?)?;
        config.validate()?;
        let manifest: Manifest = parse_json(MANIFEST_FILE, &source.read(MANIFEST_FILE)?)?;
        if manifest.magic != MAGIC {
            return Err(ArchiveError::BadMagic(manifest.magic));
        }
        let blob = source.read(WEIGHTS_FILE)?;
        let vocab = match source.read_optional(VOCAB_FILE)? {
            Some(bytes) => {
                let text = String::from_utf8(bytes).map_err(|e| malformed(VOCAB_FILE, e))?;
                let tokens: VocabJson = parse_json(VOCAB_FILE, text.as_bytes())?;
                Some(Vocab::from_tokens(tokens.tokens).map_err(|e| malformed(VOCAB_FILE, e))?)
            }
            None => None,
        };

        let mut tensors = decode_tensors(&manifest, &blob)?;

        let vocab_rows = tensors.get("txt.emb").map(|t| t.shape()[0]).unwrap_or(0);
        let mut expected: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        expected.insert("vis.proj", vec![config.encoder.d_visual, POOLED_LEN]);
        expected.insert("aco.proj", vec![config.encoder.d_acoustic, config.encoder.acoustic_window]);
        expected.insert("txt.emb", vec![vocab_rows.max(1), config.encoder.d_textual]);
        for (name, shape) in config.fusion.tensor_shapes() {
            expected.insert(name, shape);
        }
        for (name, want) in &expected {
            match tensors.get(*name) {
                None => return Err(ArchiveError::ManifestMismatch(format!("missing tensor {name}"))),
                Some(t) if t.shape() != want.as_slice() => {
                    return Err(ArchiveError::ManifestMismatch(format!(
                        "tensor {name} has shape {:?}, config expects {want:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(v) = &vocab {
            if v.len() != vocab_rows {
                return Err(ArchiveError::ManifestMismatch(format!(
                    "txt.emb has {vocab_rows} rows but vocabulary has {} tokens",
                    v.len()
                )));
            }
        }

        let mut take2 = |name: &str| -> Array2<f64> {
            tensors.remove(name).expect("checked").into_dimensionality().expect("checked rank")
        };
        let encoder = EncoderWeights { vis_proj: take2("vis.proj"), aco_proj: take2("aco.proj"), txt_emb: take2("txt.emb") };
        let mut fusion = FusionWeights::zeros(&config.fusion);
        for ((name, _), mut dst) in crate::fusion::TENSORS.iter().zip(fusion.views_mut()) {
            dst.assign(&tensors.remove(*name).expect("checked"));
        }
        Ok(ModelArchive { config, encoder, fusion, vocab })
    }
}

#[derive(Deserialize)]
struct VocabJson {
    tokens: Vec<String>,
}

fn parse_json<T: serde::de::DeserializeOwned>(file: &str, bytes: &[u8]) -> Result<T, ArchiveError> {
    serde_json::from_slice(bytes).map_err(|e| malformed(file, e))
}

fn decode_tensors(manifest: &Manifest, blob: &[u8]) -> Result<BTreeMap<String, ArrayD<f64>>, ArchiveError> {
    let known: BTreeSet<&str> =
        ENCODER_TENSORS.iter().copied().chain(crate::fusion::TENSORS.iter().map(|(n, _)| *n)).collect();
    let mut out = BTreeMap::new();
    for entry in &manifest.tensors {
        if !known.contains(entry.name.as_str()) {
            return Err(ArchiveError::ManifestMismatch(format!("unknown tensor {}", entry.name)));
        }
        if entry.dtype != "f32" {
            return Err(ArchiveError::ManifestMismatch(format!("tensor {} has dtype {}", entry.name, entry.dtype)));
        }
        let count: usize = entry.shape.iter().product();
        let end = entry.offset.checked_add(entry.byte_len);
        if entry.byte_len != count as u64 * 4 || end.is_none_or(|e| e > blob.len() as u64) {
            return Err(ArchiveError::TruncatedBlob(entry.name.clone()));
        }
        let bytes = &blob[entry.offset as usize..(entry.offset + entry.byte_len) as usize];
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ArchiveError::ManifestMismatch(format!("tensor {} holds non-finite values", entry.name)));
        }
        let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("length checked");
        if out.insert(entry.name.clone(), array).is_some() {
            return Err(ArchiveError::ManifestMismatch(format!("duplicate tensor {}", entry.name)));
        }
    }
    Ok(out)
}

enum Source {
    Dir(PathBuf),
    Zip { path: PathBuf, zip: zip::ZipArchive<File> },
}

impl Source {
    fn open(path: &Path) -> Result<Self, ArchiveError> {
        if path.is_dir() {
            return Ok(Source::Dir(path.to_path_buf()));
        }
        let file = File::open(path).map_err(|source| ArchiveError::Io { path: path.to_path_buf(), source })?;
        let zip = zip::ZipArchive::new(file).map_err(|e| malformed(&path.display().to_string(), e))?;
        Ok(Source::Zip { path: path.to_path_buf(), zip })
    }

    fn read_optional(&mut self, name: &str) -> Result<Option<Vec<u8>>, ArchiveError> {
        match self {
            Source::Dir(dir) => {
                let p = dir.join(name);
                match fs::read(&p) {
                    Ok(b) => Ok(Some(b)),
                    Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
                    Err(source) => Err(ArchiveError::Io { path: p, source }),
                }
            }
            Source::Zip { path, zip } => {
                let mut entry = match zip.by_name(name) {
                    Ok(e) => e,
                    Err(zip::result::ZipError::FileNotFound) => return Ok(None),
                    Err(e) => return Err(malformed(&path.display().to_string(), e)),
                };
                let mut buf = Vec::new();
                entry
                    .read_to_end(&mut buf)
                    .map_err(|source| ArchiveError::Io { path: path.join(name), source })?;
                Ok(Some(buf))
            }
        }
    }

    fn read(&mut self, name: &str) -> Result<Vec<u8>, ArchiveError> {
        self.read_optional(name)?
            .ok_or_else(|| ArchiveError::Io { path: PathBuf::from(name), source: io::ErrorKind::NotFound.into() })
    }
}
