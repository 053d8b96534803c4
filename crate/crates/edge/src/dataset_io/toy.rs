//! Deterministic synthetic corpus: colored shapes at grid positions, with
//! captions generated from a fixed grammar over the ground-truth
//! attributes. Image-caption correspondence is therefore known exactly.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_manifest, DatasetManifest, ImageBuf, ManifestRecord, Split};
use crate::error::{EdgeError, Result};

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "cross", "diamond"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const COLOR_RGB: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 80, 230],
    [230, 220, 40],
    [220, 50, 220],
    [40, 210, 210],
];
pub const POSITIONS: [&str; 5] = [
    "top left",
    "top right",
    "bottom left",
    "bottom right",
    "center",
];
pub const SIZES: [&str; 2] = ["small", "big"];

/// Ground-truth attributes of a toy image, as vocabulary indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: usize,
    pub color: usize,
    pub position: usize,
    pub size: usize,
}

/// Parameters for [`generate_toy_corpus`]. `shapes`/`colors`/`positions`/
/// `sizes` select prefixes of the built-in vocabularies.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusSpec {
    pub image_size: usize,
    pub num_images: usize,
    pub captions_per_image: usize,
    pub shapes: usize,
    pub colors: usize,
    pub positions: usize,
    pub sizes: usize,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            image_size: 16,
            num_images: 64,
            captions_per_image: 2,
            shapes: SHAPES.len(),
            colors: COLORS.len(),
            positions: POSITIONS.len(),
            sizes: SIZES.len(),
        }
    }
}

impl ToyCorpusSpec {
    pub fn capacity(&self) -> usize {
        self.shapes * self.colors * self.positions * self.sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(EdgeError::Config("toy image_size must be >= 8".into()));
        }
        if self.num_images == 0 || self.captions_per_image == 0 {
            return Err(EdgeError::Config(
                "toy corpus needs at least one image and one caption".into(),
            ));
        }
        if self.shapes == 0
            || self.shapes > SHAPES.len()
            || self.colors == 0
            || self.colors > COLORS.len()
            || self.positions == 0
            || self.positions > POSITIONS.len()
            || self.sizes == 0
            || self.sizes > SIZES.len()
        {
            return Err(EdgeError::Config("toy vocabulary counts out of range".into()));
        }
        Ok(())
    }
}

fn position_center(pos: usize, n: usize) -> (f64, f64) {
    let lo = n as f64 * 0.27;
    let hi = n as f64 * 0.73;
    let mid = n as f64 * 0.5;
    match pos {
        0 => (lo, lo),
        1 => (lo, hi),
        2 => (hi, lo),
        3 => (hi, hi),
        _ => (mid, mid),
    }
}

fn shape_mask(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.86 && dy.abs() <= r * 0.86,
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.55,
        3 => (dx.abs() <= r * 0.34 && dy.abs() <= r) || (dy.abs() <= r * 0.34 && dx.abs() <= r),
        _ => dx.abs() + dy.abs() <= r,
    }
}

/// Render a toy image from its attributes.
pub fn render(attrs: &Attributes, image_size: usize) -> ImageBuf {
    let n = image_size;
    let (cy, cx) = position_center(attrs.position, n);
    let r = if attrs.size == 0 {
        n as f64 * 0.14
    } else {
        n as f64 * 0.24
    };
    let rgb = COLOR_RGB[attrs.color];
    let mut img = ImageBuf::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            if shape_mask(attrs.shape, dx, dy, r) {
                img.set(y, x, rgb);
            }
        }
    }
    img
}

const CAPTION_TEMPLATES: usize = 5;

/// Grammar sentence number `variation` describing `attrs`.
pub fn caption_text(attrs: &Attributes, variation: usize) -> String {
    let shape = SHAPES[attrs.shape];
    let color = COLORS[attrs.color];
    let pos = POSITIONS[attrs.position];
    let size = SIZES[attrs.size];
    match variation % CAPTION_TEMPLATES {
        0 => format!("a {size} {color} {shape} in the {pos}"),
        1 => format!("the {pos} holds a {size} {color} {shape}"),
        2 => format!("a {color} {shape} of {size} size at the {pos}"),
        3 => format!("one {size} {shape} drawn in {color} near the {pos}"),
        _ => format!("this picture shows a {size} {color} {shape} in the {pos}"),
    }
}

/// All attribute combinations covered by a spec, in vocabulary order.
pub fn all_combinations(spec: &ToyCorpusSpec) -> Vec<Attributes> {
    let mut out = Vec::with_capacity(spec.capacity());
    for shape in 0..spec.shapes {
        for color in 0..spec.colors {
            for position in 0..spec.positions {
                for size in 0..spec.sizes {
                    out.push(Attributes {
                        shape,
                        color,
                        position,
                        size,
                    });
                }
            }
        }
    }
    out
}

/// Nearest-template attribute estimate; `Some` when the best match is
/// close enough to look like a (possibly noisy) toy rendering.
pub fn estimate_attributes(img: &ImageBuf, max_mse: f64) -> Option<Attributes> {
    if img.height != img.width || img.height < 8 {
        return None;
    }
    let spec = ToyCorpusSpec {
        image_size: img.height,
        ..Default::default()
    };
    let x = img.to_f64();
    let mut best: Option<(f64, Attributes)> = None;
    for attrs in all_combinations(&spec) {
        let t = render(&attrs, img.height).to_f64();
        let mse = (&x - &t).mapv(|v| v * v).mean().unwrap();
        if best.map_or(true, |(b, _)| mse < b) {
            best = Some((mse, attrs));
        }
    }
    let (mse, attrs) = best?;
    (mse <= max_mse).then_some(attrs)
}

/// Render a deterministic toy corpus under `out_dir` and return its
/// manifest. Attribute combinations are sampled without replacement.
pub fn generate_toy_corpus(
    spec: &ToyCorpusSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    generate_toy_corpus_split(spec, seed, out_dir, Split::Train)
}

pub fn generate_toy_corpus_split(
    spec: &ToyCorpusSpec,
    seed: u64,
    out_dir: &Path,
    split: Split,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let capacity = spec.capacity();
    if spec.num_images > capacity {
        return Err(EdgeError::Capacity {
            requested: spec.num_images,
            capacity,
        });
    }
    let mut combos = all_combinations(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    combos.shuffle(&mut rng);
    combos.truncate(spec.num_images);

    let mut records = Vec::with_capacity(spec.num_images);
    for (i, attrs) in combos.iter().enumerate() {
        let image_id = format!("toy_{i:04}");
        let rel = format!("images/{image_id}.png");
        render(attrs, spec.image_size).save_png(&out_dir.join(&rel))?;
        let captions = (0..spec.captions_per_image)
            .map(|v| caption_text(attrs, v))
            .collect();
        records.push(ManifestRecord {
            image_id,
            image_path: rel,
            captions,
        });
    }
    let manifest_path = toy_manifest_path(out_dir);
    write_manifest(&manifest_path, split, &records)?;
    Ok(DatasetManifest {
        root_path: out_dir.to_path_buf(),
        records,
        split,
    })
}

pub fn toy_manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.jsonl")
}
