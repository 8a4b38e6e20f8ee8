//! Weight archives: a JSON manifest next to a blob of little-endian `f64`s.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::classifier::{Classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::nn::{Module, Rng};
use crate::pce::{Pce, PceConfig};
use crate::tensor::Array;

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_kind: String,
    /// Architecture needed to rebuild the model before loading its state.
    pub meta: serde_json::Value,
    pub entries: Vec<ArchiveEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightArchive {
    pub manifest: Manifest,
    pub blob: Vec<u8>,
}

/// Write `bytes` next to `path`, then rename over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

impl WeightArchive {
    pub fn from_state(kind: &str, meta: serde_json::Value, state: &[(String, &Array)]) -> Self {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(state.len());
        for (name, a) in state {
            let offset = blob.len() as u64;
            for v in a.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ArchiveEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
                dtype: DTYPE.into(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                model_kind: kind.into(),
                meta,
                entries,
            },
            blob,
        }
    }

    /// Decode every entry, checking dtype, bounds, sizes and overlaps.
    pub fn to_state(&self) -> Result<HashMap<String, Array>> {
        let m = &self.manifest;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Archive(format!("unsupported format version {}", m.format_version)));
        }
        let mut spans: Vec<(u64, u64)> = Vec::new();
        let mut out = HashMap::new();
        for e in &m.entries {
            if e.dtype != DTYPE {
                return Err(Error::Archive(format!("entry {} has dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.length).filter(|&end| end <= self.blob.len() as u64);
            let Some(end) = end else {
                return Err(Error::Archive(format!("entry {} is out of bounds", e.name)));
            };
            if e.length != 8 * numel as u64 {
                return Err(Error::Archive(format!("entry {} length does not match its shape", e.name)));
            }
            if spans.iter().any(|&(s, t)| e.offset < t && s < end) {
                return Err(Error::Archive(format!("entry {} overlaps another entry", e.name)));
            }
            spans.push((e.offset, end));
            let bytes = &self.blob[e.offset as usize..end as usize];
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if out.insert(e.name.clone(), Array::new(e.shape.clone(), data)?).is_some() {
                return Err(Error::Archive(format!("duplicate entry {}", e.name)));
            }
        }
        Ok(out)
    }

    /// `<stem>.bin` then `<stem>.json`, each written atomically; the manifest
    /// lands last so its presence implies a complete archive.
    pub fn save(&self, stem: &Path) -> Result<()> {
        write_atomic(&with_ext(stem, ".bin"), &self.blob)?;
        write_atomic(&with_ext(stem, ".json"), serde_json::to_string_pretty(&self.manifest)?.as_bytes())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(with_ext(stem, ".json"))?)?;
        let blob = fs::read(with_ext(stem, ".bin"))?;
        Ok(Self { manifest, blob })
    }

    pub fn exists(stem: &Path) -> bool {
        with_ext(stem, ".json").exists() && with_ext(stem, ".bin").exists()
    }

    fn meta<T: for<'de> Deserialize<'de>>(&self, kind: &str) -> Result<T> {
        if self.manifest.model_kind != kind {
            return Err(Error::Archive(format!(
                "expected a {kind} archive, found {}",
                self.manifest.model_kind
            )));
        }
        serde_json::from_value(self.manifest.meta.clone()).map_err(|e| Error::Archive(format!("bad {kind} metadata: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    dim: usize,
    classes: usize,
    hidden: usize,
    dropout: f64,
}

#[derive(Serialize, Deserialize)]
struct PceMeta {
    dim: usize,
    classes: usize,
    classifier_hidden: usize,
    latent: usize,
    hidden: usize,
    fusion: bool,
}

pub fn classifier_archive(c: &Classifier) -> WeightArchive {
    let meta = json!(ClassifierMeta {
        dim: c.dim(),
        classes: c.classes(),
        hidden: c.hidden(),
        dropout: c.dropout.rate,
    });
    WeightArchive::from_state("classifier", meta, &c.named_state())
}

pub fn classifier_from_archive(a: &WeightArchive) -> Result<Classifier> {
    let m: ClassifierMeta = a.meta("classifier")?;
    let config = ClassifierConfig {
        hidden: m.hidden,
        dropout: m.dropout,
        ..ClassifierConfig::default()
    };
    let mut c = Classifier::new(m.dim, m.classes, &config, &mut Rng::new(0))?;
    c.load_state(&a.to_state()?)?;
    Ok(c)
}

pub fn pce_archive(p: &Pce) -> WeightArchive {
    let hidden = p.encoder.l1.fan_out();
    let fused = p.discriminator.head.fan_in() - hidden;
    let meta = json!(PceMeta {
        dim: p.encoder.l1.fan_in(),
        classes: p.classes(),
        classifier_hidden: fused,
        latent: p.encoder.latent(),
        hidden,
        fusion: p.discriminator.fusion,
    });
    WeightArchive::from_state("pce", meta, &p.named_state())
}

pub fn pce_from_archive(a: &WeightArchive) -> Result<Pce> {
    let m: PceMeta = a.meta("pce")?;
    let config = PceConfig {
        latent: m.latent,
        hidden: m.hidden,
        fusion: m.fusion,
        ..PceConfig::default()
    };
    let mut p = Pce::with_shape(m.dim, m.classes, m.classifier_hidden, &config, &mut Rng::new(0));
    p.load_state(&a.to_state()?)?;
    Ok(p)
}
