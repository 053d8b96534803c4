//! Manifest-based image-caption corpora, the synthetic toy corpus, and
//! distilled-dataset materialization.
//!
//! Manifests are line-delimited JSON: an optional leading meta record
//! (`{"split": ...}`) followed by one record per line with fields
//! `image_id`, `image_path` (relative to the manifest's directory) and
//! `captions`. Images are stored as lossless PNG so round-trips are
//! bit-exact.

pub mod toy;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{EdgeError, Result};

/// 8-bit RGB image, row-major HWC storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize) -> Self {
        ImageBuf {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// CHW float tensor with values in [0,1].
    pub fn to_f64(&self) -> Array3<f64> {
        Array3::from_shape_fn((3, self.height, self.width), |(c, y, x)| {
            self.data[(y * self.width + x) * 3 + c] as f64 / 255.0
        })
    }

    /// Quantize a CHW float tensor (clamped to [0,1]) back to 8-bit.
    pub fn from_f64(t: &Array3<f64>) -> Self {
        let (c, h, w) = t.dim();
        assert_eq!(c, 3, "expected 3-channel tensor");
        let mut img = ImageBuf::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (t[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (t[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (t[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                img.set(y, x, px);
            }
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| EdgeError::Write {
                path: path.to_path_buf(),
                source: e,
            })?;
        }
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| EdgeError::Write {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e),
        })
    }

    /// Encode as PNG in memory (for shipping over the wire).
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| EdgeError::Write {
            path: PathBuf::from("<memory>"),
            source: std::io::Error::new(std::io::ErrorKind::Other, e),
        })?;
        Ok(out.into_inner())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| EdgeError::Load {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::Other, e),
            })?
            .to_rgb8();
        Ok(ImageBuf {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.into_raw(),
        })
    }
}

/// One image with its captions; the atomic dataset record.
#[derive(Debug, Clone)]
pub struct ImageTextPair {
    pub image_id: String,
    pub image: ImageBuf,
    pub captions: Vec<String>,
}

impl ImageTextPair {
    pub fn validate(&self) -> Result<()> {
        if self.captions.is_empty() {
            return Err(EdgeError::Validation(format!(
                "image {} has no captions",
                self.image_id
            )));
        }
        for c in &self.captions {
            if c.trim().is_empty() {
                return Err(EdgeError::Validation(format!(
                    "image {} has an empty caption",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub image_path: String,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetaRecord {
    split: Split,
}

/// Immutable view of an on-disk corpus.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root_path: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_image(&self, record: &ManifestRecord) -> Result<ImageBuf> {
        ImageBuf::load_png(&self.root_path.join(&record.image_path))
    }

    /// Loads every image into memory, preserving record order.
    pub fn load_pairs(&self) -> Result<Vec<ImageTextPair>> {
        self.records
            .iter()
            .map(|r| {
                let pair = ImageTextPair {
                    image_id: r.image_id.clone(),
                    image: self.load_image(r)?,
                    captions: r.captions.clone(),
                };
                pair.validate()?;
                Ok(pair)
            })
            .collect()
    }

    /// Total number of (image, caption) pairs.
    pub fn pair_count(&self) -> usize {
        self.records.iter().map(|r| r.captions.len()).sum()
    }
}

/// Per-image synthesis provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub image_id: String,
    pub seed_caption: String,
    pub sampler_seed: u64,
    pub captioner_id: String,
}

/// A distilled dataset: |S|/cpi images, each with exactly `cpi` captions.
#[derive(Debug, Clone)]
pub struct DistilledDataset {
    pub images: Vec<ImageTextPair>,
    pub cpi: usize,
    pub provenance: Vec<ProvenanceRecord>,
}

impl DistilledDataset {
    pub fn pair_count(&self) -> usize {
        self.images.iter().map(|p| p.captions.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cpi == 0 {
            return Err(EdgeError::Validation("cpi must be positive".into()));
        }
        for p in &self.images {
            p.validate()?;
            if p.captions.len() != self.cpi {
                return Err(EdgeError::Validation(format!(
                    "image {} carries {} captions, expected cpi={}",
                    p.image_id,
                    p.captions.len(),
                    self.cpi
                )));
            }
        }
        if self.pair_count() != self.images.len() * self.cpi {
            return Err(EdgeError::Validation("pair-count arithmetic violated".into()));
        }
        Ok(())
    }
}

/// Parse and validate a line-delimited manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| EdgeError::Load {
        path: path.to_path_buf(),
        source: e,
    })?;
    let root_path = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut split = Split::Train;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EdgeError::Load {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 0 {
            if let Ok(meta) = serde_json::from_str::<MetaRecord>(&line) {
                split = meta.split;
                continue;
            }
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| EdgeError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(rec.image_id.clone()) {
            return Err(EdgeError::Validation(format!(
                "duplicate image_id {} in manifest",
                rec.image_id
            )));
        }
        if rec.captions.is_empty() || rec.captions.iter().any(|c| c.trim().is_empty()) {
            return Err(EdgeError::Validation(format!(
                "image {} has missing or empty captions",
                rec.image_id
            )));
        }
        let img_path = root_path.join(&rec.image_path);
        if !img_path.exists() {
            return Err(EdgeError::Validation(format!(
                "image file {} referenced by {} does not exist",
                img_path.display(),
                rec.image_id
            )));
        }
        records.push(rec);
    }
    Ok(DatasetManifest {
        root_path,
        records,
        split,
    })
}

/// Write a manifest (with meta line) to `path`.
pub fn write_manifest(path: &Path, split: Split, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&MetaRecord { split }).unwrap());
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).unwrap());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| EdgeError::Write {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    let mut f = fs::File::create(path).map_err(|e| EdgeError::Write {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(bytes).map_err(|e| EdgeError::Write {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Materialize a distilled dataset: PNGs, manifest, provenance file.
/// Returns the manifest path.
pub fn write_distilled(dataset: &DistilledDataset, out_dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    let mut records = Vec::new();
    for pair in &dataset.images {
        let rel = format!("images/{}.png", pair.image_id);
        pair.image.save_png(&out_dir.join(&rel))?;
        records.push(ManifestRecord {
            image_id: pair.image_id.clone(),
            image_path: rel,
            captions: pair.captions.clone(),
        });
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, Split::Train, &records)?;

    let mut prov = String::new();
    for p in &dataset.provenance {
        prov.push_str(&serde_json::to_string(p).unwrap());
        prov.push('\n');
    }
    write_atomic(&out_dir.join("provenance.jsonl"), prov.as_bytes())?;
    Ok(manifest_path)
}

/// Read the provenance file sitting next to a distilled manifest.
pub fn load_provenance(dir: &Path) -> Result<Vec<ProvenanceRecord>> {
    let path = dir.join("provenance.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| EdgeError::Load {
        path: path.clone(),
        source: e,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EdgeError::Parse {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Load a distilled dataset directory (manifest + provenance + images).
pub fn load_distilled(dir: &Path) -> Result<DistilledDataset> {
    let manifest = load_manifest(&dir.join("manifest.jsonl"))?;
    let images = manifest.load_pairs()?;
    let provenance = load_provenance(dir)?;
    let cpi = images.first().map(|p| p.captions.len()).unwrap_or(1);
    let ds = DistilledDataset {
        images,
        cpi,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}
