//! The negative (outlier-source) dataset: catalog filtering against inlier
//! classes and extraction of patches with rectangular or class-shaped masks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{resize_bilinear, resize_mask_nearest, AlphaMask, ImageRgb};
use crate::io;
use crate::labels::LabelMap;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSample {
    pub image: PathBuf,
    pub label: PathBuf,
    #[serde(rename = "classes")]
    pub present_classes: BTreeSet<u8>,
}

/// Ordered by image path so that seeded sampling is reproducible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeCatalog {
    pub source_name: String,
    pub samples: Vec<NegativeSample>,
}

impl NegativeCatalog {
    pub fn new(source_name: impl Into<String>, mut samples: Vec<NegativeSample>) -> Self {
        samples.sort_by(|a, b| a.image.cmp(&b.image));
        Self {
            source_name: source_name.into(),
            samples,
        }
    }

    /// JSON Lines, one `{"image", "label", "classes"}` record per line.
    /// Relative paths are resolved against the catalog's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut s: NegativeSample = serde_json::from_str(&line).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            s.image = root.join(&s.image);
            s.label = root.join(&s.label);
            samples.push(s);
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::new(name, samples))
    }

    /// Write the catalog with paths relative to `path`'s directory where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let root = path.parent().unwrap_or(Path::new(""));
        let mut out = String::new();
        for s in &self.samples {
            let rel = |p: &Path| p.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
            let rec = NegativeSample {
                image: rel(&s.image),
                label: rel(&s.label),
                present_classes: s.present_classes.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("sample serializes"));
            out.push('\n');
        }
        io::write_bytes(path, out.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMappingEntry {
    pub id: u8,
    pub excluded: bool,
}

/// Negative-dataset class name to id plus a flag marking classes that also
/// occur in the inlier training set.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassMapping(pub BTreeMap<String, ClassMappingEntry>);

impl ClassMapping {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn excluded_ids(&self) -> BTreeSet<u8> {
        self.0.values().filter(|e| e.excluded).map(|e| e.id).collect()
    }

    pub fn all_ids(&self) -> BTreeSet<u8> {
        self.0.values().map(|e| e.id).collect()
    }
}

/// Keep samples containing none of the `excluded` classes.
pub fn filter_catalog(catalog: &NegativeCatalog, excluded: &BTreeSet<u8>) -> NegativeCatalog {
    NegativeCatalog {
        source_name: catalog.source_name.clone(),
        samples: catalog
            .samples
            .iter()
            .filter(|s| s.present_classes.is_disjoint(excluded))
            .cloned()
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeMode {
    Rectangle,
    ClassShape,
}

pub fn choose_mode<R: Rng + ?Sized>(rectangle_prob: f64, rng: &mut R) -> ShapeMode {
    if rectangle_prob > 0.0 && rng.random::<f64>() < rectangle_prob {
        ShapeMode::Rectangle
    } else {
        ShapeMode::ClassShape
    }
}

/// A negative sample with its pixels in memory.
#[derive(Clone, Debug)]
pub struct LoadedNegative {
    pub sample: Arc<NegativeSample>,
    pub image: ImageRgb,
    /// Negative-dataset class ids (not inlier ids).
    pub labels: LabelMap,
}

impl LoadedNegative {
    /// Build from in-memory data; `present_classes` is recomputed from the labels.
    pub fn from_parts(image_ref: PathBuf, image: ImageRgb, labels: LabelMap) -> Result<Self> {
        if image.width != labels.width || image.height != labels.height {
            return Err(Error::DimensionMismatch(format!(
                "negative image {}x{} vs labels {}x{}",
                image.width, image.height, labels.width, labels.height
            )));
        }
        let present_classes = labels.ids.iter().copied().collect();
        let label = image_ref.with_extension("labels.png");
        Ok(Self {
            sample: Arc::new(NegativeSample {
                image: image_ref,
                label,
                present_classes,
            }),
            image,
            labels,
        })
    }

    pub fn load(sample: &NegativeSample) -> Result<Self> {
        let image = io::read_image(&sample.image)?;
        let gray = image::open(&sample.label)
            .map_err(|source| Error::Image {
                path: sample.label.clone(),
                source,
            })?
            .into_luma8();
        let labels = LabelMap::new(gray.height() as usize, gray.width() as usize, gray.into_raw())?;
        if labels.width != image.width || labels.height != image.height {
            return Err(Error::format(&sample.label, "label and image sizes differ"));
        }
        let present: BTreeSet<u8> = labels.ids.iter().copied().collect();
        if present != sample.present_classes {
            return Err(Error::format(
                &sample.label,
                format!(
                    "catalog lists classes {:?} but the label map contains {:?}",
                    sample.present_classes, present
                ),
            ));
        }
        Ok(Self {
            sample: Arc::new(sample.clone()),
            image,
            labels,
        })
    }
}

/// Loaded negatives, ready for concurrent patch extraction.
#[derive(Clone, Debug, Default)]
pub struct NegativePool {
    pub items: Vec<LoadedNegative>,
}

impl NegativePool {
    pub fn load(catalog: &NegativeCatalog) -> Result<Self> {
        let items = catalog
            .samples
            .iter()
            .map(LoadedNegative::load)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    /// Class-shaped patches use between 1 and this many classes.
    pub max_classes: usize,
    /// Class regions with fewer pixels are not used.
    pub min_region_pixels: usize,
    /// Rectangle crops span at least this fraction of each side.
    pub min_crop_fraction: f64,
    /// Negative-dataset ids never used as shapes (e.g. "unlabeled").
    pub skip_classes: BTreeSet<u8>,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            max_classes: 2,
            min_region_pixels: 32,
            min_crop_fraction: 0.25,
            skip_classes: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Patch {
    pub image: ImageRgb,
    pub mask: AlphaMask,
    pub source: Arc<NegativeSample>,
    pub mode: ShapeMode,
}

impl Patch {
    pub fn new(image: ImageRgb, mask: AlphaMask, source: Arc<NegativeSample>, mode: ShapeMode) -> Result<Self> {
        if image.width != mask.width || image.height != mask.height {
            return Err(Error::DimensionMismatch(format!(
                "patch image {}x{} vs mask {}x{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        if mask.positive_count() == 0 {
            return Err(Error::NoUsableRegion(source.image.display().to_string()));
        }
        Ok(Self {
            image,
            mask,
            source,
            mode,
        })
    }

    /// Resize image (bilinear) and mask (nearest) to the given dims.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        Patch::new(
            resize_bilinear(&self.image, width, height),
            resize_mask_nearest(&self.mask, width, height),
            self.source.clone(),
            self.mode,
        )
    }
}

/// Dimensions with the aspect ratio of `h x w` and area close to `area`.
fn scaled_dims(h: usize, w: usize, area: f64) -> (usize, usize) {
    let f = (area / (h * w) as f64).sqrt();
    let nh = ((h as f64 * f).round() as usize).max(1);
    let nw = ((w as f64 * f).round() as usize).max(1);
    (nh, nw)
}

/// Cut a patch from `negative` and resize it so that its area is about
/// `scale * target_area` pixels.
pub fn extract_patch<R: Rng + ?Sized>(
    negative: &LoadedNegative,
    mode: ShapeMode,
    scale: f64,
    target_area: usize,
    config: &PatchConfig,
    rng: &mut R,
) -> Result<Patch> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidParameter(format!("patch scale {scale} outside (0, 1]")));
    }
    let src = &negative.image;
    let (h, w) = (src.height, src.width);
    let (image, mask) = match mode {
        ShapeMode::Rectangle => {
            let min_side = |len: usize| ((len as f64 * config.min_crop_fraction).ceil() as usize).clamp(1, len);
            let ch = rng.random_range(min_side(h)..=h);
            let cw = rng.random_range(min_side(w)..=w);
            let r0 = rng.random_range(0..=h - ch);
            let c0 = rng.random_range(0..=w - cw);
            (src.crop(r0, c0, ch, cw)?, AlphaMask::filled(cw, ch, 1.0))
        }
        ShapeMode::ClassShape => {
            let mut counts = [0usize; 256];
            for &id in &negative.labels.ids {
                counts[id as usize] += 1;
            }
            let usable: Vec<u8> = (0..=255u8)
                .filter(|&c| counts[c as usize] >= config.min_region_pixels.max(1) && !config.skip_classes.contains(&c))
                .collect();
            if usable.is_empty() {
                return Err(Error::NoUsableRegion(negative.sample.image.display().to_string()));
            }
            let max_k = config.max_classes.clamp(1, usable.len());
            let k = rng.random_range(1..=max_k);
            let mut chosen = [false; 256];
            for i in index::sample(rng, usable.len(), k) {
                chosen[usable[i] as usize] = true;
            }
            let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
            for r in 0..h {
                for c in 0..w {
                    if chosen[negative.labels.get(r, c) as usize] {
                        r0 = r0.min(r);
                        r1 = r1.max(r);
                        c0 = c0.min(c);
                        c1 = c1.max(c);
                    }
                }
            }
            let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
            let mut alpha = Vec::with_capacity(bh * bw);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    alpha.push(if chosen[negative.labels.get(r, c) as usize] { 1.0 } else { 0.0 });
                }
            }
            (src.crop(r0, c0, bh, bw)?, AlphaMask::new(bw, bh, alpha)?)
        }
    };
    let (nh, nw) = scaled_dims(image.height, image.width, scale * target_area as f64);
    Patch::new(image, mask, negative.sample.clone(), mode)?.resized(nw, nh)
}
