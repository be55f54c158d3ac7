//! Mixed-content sample generation: negative patches are pasted below a
//! horizon row, optionally histogram-matched to the scene, alpha-blended
//! through a blurred mask, and the label map is rewritten from the blended
//! coverage.
//!
//! Label rewrite uses the accumulated outlier coverage `c` of each pixel
//! (`c <- c + a (1 - c)` per paste): `c > 0.5` becomes [`OUTLIER_ID`],
//! `0 < c <= 0.5` becomes [`IGNORE_ID`], `c == 0` keeps the input label.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{
    alpha_blend, blur_radius, gaussian_blur_mask, histogram_match, pad_replicate, ImageRgb, PixelCoord,
    BLUR_IDENTITY_SIGMA,
};
use crate::io::{self, ClassMap, Manifest};
use crate::labels::{LabelMap, IGNORE_ID, OUTLIER_ID};
use crate::negatives::{choose_mode, extract_patch, NegativePool, Patch, PatchConfig, ShapeMode};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSample {
    pub image: ImageRgb,
    pub labels: LabelMap,
}

impl TrainingSample {
    pub fn new(image: ImageRgb, labels: LabelMap) -> Result<Self> {
        if image.width != labels.width || image.height != labels.height {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} vs labels {}x{}",
                image.width, image.height, labels.width, labels.height
            )));
        }
        Ok(Self { image, labels })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PasteParams {
    /// Horizon row as a fraction of image height from the top.
    pub horizon_fraction: f64,
    pub alpha_range: [f64; 2],
    /// Blur sigma is this coefficient times the patch's larger side; 0 disables blurring.
    pub blur_sigma_coeff: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub hist_match: bool,
    pub rectangle_prob: f64,
    pub pastes_per_image: [usize; 2],
    /// Patch area as a fraction of the target image area.
    pub scale_range: [f64; 2],
    pub max_rescale_attempts: usize,
    pub patch: PatchConfig,
}

impl Default for PasteParams {
    fn default() -> Self {
        Self {
            horizon_fraction: 0.4,
            alpha_range: [0.65, 0.9],
            blur_sigma_coeff: 0.02,
            blur_sigma_min: 0.5,
            blur_sigma_max: 5.0,
            hist_match: true,
            rectangle_prob: 0.0,
            pastes_per_image: [1, 3],
            scale_range: [0.005, 0.05],
            max_rescale_attempts: 10,
            patch: PatchConfig::default(),
        }
    }
}

impl PasteParams {
    /// The original recipe: rectangles half the time, anywhere in the image,
    /// hard opaque edges, no colour adaptation.
    pub fn baseline() -> Self {
        Self {
            horizon_fraction: 0.0,
            alpha_range: [1.0, 1.0],
            blur_sigma_coeff: 0.0,
            hist_match: false,
            rectangle_prob: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(0.0..=1.0).contains(&self.horizon_fraction) {
            return bad(format!("horizon_fraction {} outside [0, 1]", self.horizon_fraction));
        }
        let [alo, ahi] = self.alpha_range;
        if !(alo > 0.0 && alo <= ahi && ahi <= 1.0) {
            return bad(format!("alpha_range [{alo}, {ahi}] must satisfy 0 < lo <= hi <= 1"));
        }
        if !(self.blur_sigma_coeff >= 0.0) || !(self.blur_sigma_min > 0.0 && self.blur_sigma_min <= self.blur_sigma_max) {
            return bad("blur sigma settings must be non-negative with 0 < min <= max".into());
        }
        if !(0.0..=1.0).contains(&self.rectangle_prob) {
            return bad(format!("rectangle_prob {} outside [0, 1]", self.rectangle_prob));
        }
        let [plo, phi] = self.pastes_per_image;
        if plo > phi {
            return bad(format!("pastes_per_image [{plo}, {phi}] has lo > hi"));
        }
        let [slo, shi] = self.scale_range;
        if !(slo > 0.0 && slo <= shi && shi <= 1.0) {
            return bad(format!("scale_range [{slo}, {shi}] must satisfy 0 < lo <= hi <= 1"));
        }
        Ok(())
    }

    /// Blur sigma for a patch with the given dims, or None when blurring is off.
    pub fn blur_sigma(&self, height: usize, width: usize) -> Option<f64> {
        if self.blur_sigma_coeff <= 0.0 {
            return None;
        }
        let s = (self.blur_sigma_coeff * height.max(width) as f64).clamp(self.blur_sigma_min, self.blur_sigma_max);
        Some(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasteRecord {
    /// Top-left corner of the (padded) pasted rectangle.
    pub origin: PixelCoord,
    pub height: usize,
    pub width: usize,
    /// Border of zero mask added around the patch before blurring.
    pub pad: usize,
    pub mode: ShapeMode,
    pub alpha: f64,
    pub sigma: Option<f64>,
    pub source: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub image: ImageRgb,
    pub labels: LabelMap,
    pub paste_log: Vec<PasteRecord>,
}

pub fn horizon_row(image_height: usize, horizon_fraction: f64) -> usize {
    ((horizon_fraction * image_height as f64).floor() as usize).min(image_height)
}

/// Uniform top-left origin for a `patch_dims` rectangle lying entirely at or
/// below the horizon row. Dims are `(height, width)`.
pub fn sample_placement<R: Rng + ?Sized>(
    image_dims: (usize, usize),
    patch_dims: (usize, usize),
    horizon_fraction: f64,
    rng: &mut R,
) -> Result<PixelCoord> {
    let (h, w) = image_dims;
    let (ph, pw) = patch_dims;
    let hr = horizon_row(h, horizon_fraction);
    if ph == 0 || pw == 0 {
        return Err(Error::InvalidParameter("patch must be non-empty".into()));
    }
    if ph > h - hr || pw > w {
        return Err(Error::RescalePatch {
            patch_height: ph,
            image_height: h,
            horizon_row: hr,
        });
    }
    let row = rng.random_range(hr..=h - ph);
    let col = rng.random_range(0..=w - pw);
    Ok(PixelCoord::new(row, col))
}

/// Incrementally pastes patches into one training sample.
#[derive(Clone, Debug)]
pub struct Composer {
    input: TrainingSample,
    image: ImageRgb,
    coverage: Vec<f64>,
    log: Vec<PasteRecord>,
}

impl Composer {
    pub fn new(sample: TrainingSample) -> Self {
        let n = sample.labels.len();
        Self {
            image: sample.image.clone(),
            input: sample,
            coverage: vec![0.0; n],
            log: Vec::new(),
        }
    }

    /// Paste one patch. Returns `Ok(false)` when no placement was found even
    /// after shrinking the patch, leaving the sample untouched.
    pub fn paste<R: Rng + ?Sized>(&mut self, patch: &Patch, params: &PasteParams, rng: &mut R) -> Result<bool> {
        let (h, w) = (self.image.height, self.image.width);
        let mut patch = patch.clone();
        let mut attempt = 0;
        let (origin, sigma, pad) = loop {
            let sigma = params.blur_sigma(patch.image.height, patch.image.width);
            let pad = match sigma {
                Some(s) if s > BLUR_IDENTITY_SIGMA => blur_radius(s),
                _ => 0,
            };
            let dims = (patch.image.height + 2 * pad, patch.image.width + 2 * pad);
            match sample_placement((h, w), dims, params.horizon_fraction, rng) {
                Ok(origin) => break (origin, sigma, pad),
                Err(Error::RescalePatch { .. }) if attempt < params.max_rescale_attempts => {
                    attempt += 1;
                    let nh = (patch.image.height * 3 / 4).max(1);
                    let nw = (patch.image.width * 3 / 4).max(1);
                    patch = match patch.resized(nw, nh) {
                        Ok(p) => p,
                        Err(Error::NoUsableRegion(_)) => return Ok(false),
                        Err(e) => return Err(e),
                    };
                }
                Err(Error::RescalePatch { .. }) => {
                    log::warn!(
                        "no placement for a {}x{} patch from {} after {attempt} rescales; skipping paste",
                        patch.image.height,
                        patch.image.width,
                        patch.source.image.display()
                    );
                    return Ok(false);
                }
                Err(e) => return Err(e),
            }
        };

        let mut content = patch.image.clone();
        if params.hist_match {
            let hr = horizon_row(h, params.horizon_fraction);
            let reference: Vec<[u8; 3]> = self.input.image.data[hr * w * 3..]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            content = histogram_match(&content, &reference)?;
        }
        let [alo, ahi] = params.alpha_range;
        let alpha = if alo < ahi { rng.random_range(alo..=ahi) } else { alo };

        let mut mask = patch.mask.padded(pad);
        if let Some(s) = sigma {
            mask = gaussian_blur_mask(&mask, s)?;
        }
        let mask = mask.scaled(alpha);
        let content = pad_replicate(&content, pad);

        self.image = alpha_blend(&self.image, &content, &mask, origin)?;
        for r in 0..mask.height {
            for c in 0..mask.width {
                let a = mask.get(r, c);
                if a > 0.0 {
                    let cov = &mut self.coverage[(origin.row + r) * w + origin.col + c];
                    *cov += a * (1.0 - *cov);
                }
            }
        }
        self.log.push(PasteRecord {
            origin,
            height: mask.height,
            width: mask.width,
            pad,
            mode: patch.mode,
            alpha,
            sigma,
            source: patch.source.image.clone(),
        });
        Ok(true)
    }

    pub fn finish(self) -> MixedSample {
        let mut labels = self.input.labels;
        for (id, &cov) in labels.ids.iter_mut().zip(&self.coverage) {
            if cov > 0.5 {
                *id = OUTLIER_ID;
            } else if cov > 0.0 {
                *id = IGNORE_ID;
            }
        }
        MixedSample {
            image: self.image,
            labels,
            paste_log: self.log,
        }
    }
}

/// Paste a single patch into `sample`.
pub fn paste_outlier<R: Rng + ?Sized>(
    sample: &TrainingSample,
    patch: &Patch,
    params: &PasteParams,
    rng: &mut R,
) -> Result<MixedSample> {
    params.validate()?;
    let mut composer = Composer::new(sample.clone());
    composer.paste(patch, params, rng)?;
    Ok(composer.finish())
}

/// SplitMix64 finalizer over `seed` and a record counter; independent
/// streams per record regardless of processing order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}

const MAX_PATCH_DRAWS: usize = 20;

/// Mix one sample with a random number of patches from `pool`.
pub fn mix_sample<R: Rng + ?Sized>(
    sample: &TrainingSample,
    pool: &NegativePool,
    params: &PasteParams,
    rng: &mut R,
) -> Result<MixedSample> {
    if pool.is_empty() {
        return Err(Error::Empty("negative pool".into()));
    }
    let [plo, phi] = params.pastes_per_image;
    let n = rng.random_range(plo..=phi);
    let target_area = sample.image.width * sample.image.height;
    let mut composer = Composer::new(sample.clone());
    for _ in 0..n {
        for _ in 0..MAX_PATCH_DRAWS {
            let neg = &pool.items[rng.random_range(0..pool.len())];
            let mode = choose_mode(params.rectangle_prob, rng);
            let [slo, shi] = params.scale_range;
            let scale = if slo < shi { rng.random_range(slo..=shi) } else { slo };
            match extract_patch(neg, mode, scale, target_area, &params.patch, rng) {
                Ok(patch) => {
                    composer.paste(&patch, params, rng)?;
                    break;
                }
                Err(Error::NoUsableRegion(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(composer.finish())
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))
}

/// Mix every sample; record `i` uses the stream `derive_seed(seed, i)`.
pub fn generate_mixed(
    samples: &[TrainingSample],
    pool: &NegativePool,
    params: &PasteParams,
    seed: u64,
    workers: usize,
) -> Result<Vec<MixedSample>> {
    params.validate()?;
    if pool.is_empty() {
        return Err(Error::Empty("negative pool".into()));
    }
    thread_pool(workers)?.install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| mix_sample(s, pool, params, &mut record_rng(seed, i as u64)))
            .collect()
    })
}

/// File-backed variant: one result per manifest record, in manifest order.
/// Unreadable records produce an error entry and the rest continue.
pub fn generate_mixed_batch(
    manifest: &Manifest,
    classmap: &ClassMap,
    pool: &NegativePool,
    params: &PasteParams,
    seed: u64,
    workers: usize,
) -> Result<Vec<Result<MixedSample>>> {
    params.validate()?;
    if manifest.is_empty() {
        return Err(Error::Empty("manifest".into()));
    }
    if pool.is_empty() {
        return Err(Error::Empty("negative catalog".into()));
    }
    Ok(thread_pool(workers)?.install(|| {
        manifest
            .records
            .par_iter()
            .enumerate()
            .map(|(i, rec)| {
                let image = io::read_image(&manifest.resolve(&rec.image))?;
                let labels = io::read_label_map(&manifest.resolve(&rec.label), classmap)?;
                let sample = TrainingSample::new(image, labels)?;
                mix_sample(&sample, pool, params, &mut record_rng(seed, i as u64))
            })
            .collect()
    }))
}

/// Write `{stem}.png`, `{stem}_labels.png` and `{stem}_paste.json`.
pub fn write_mixed(dir: &Path, stem: &str, mixed: &MixedSample) -> Result<()> {
    io::write_image(&dir.join(format!("{stem}.png")), &mixed.image)?;
    io::write_label_map(&dir.join(format!("{stem}_labels.png")), &mixed.labels)?;
    io::write_json(&dir.join(format!("{stem}_paste.json")), &mixed.paste_log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::AlphaMask;
    use crate::negatives::NegativeSample;
    use std::sync::Arc;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn scene(h: usize, w: usize) -> TrainingSample {
        let data = (0..h * w * 3).map(|i| (i * 7 % 200) as u8).collect();
        let ids = (0..h * w).map(|i| (i % 3) as u8).collect();
        TrainingSample::new(ImageRgb::new(w, h, data).unwrap(), LabelMap::new(h, w, ids).unwrap()).unwrap()
    }

    fn square_patch(side: usize, value: u8) -> Patch {
        Patch::new(
            ImageRgb::filled(side, side, [value, 255 - value, value / 2]),
            AlphaMask::filled(side, side, 1.0),
            Arc::new(NegativeSample {
                image: "p.png".into(),
                label: "p_l.png".into(),
                present_classes: [1].into(),
            }),
            ShapeMode::Rectangle,
        )
        .unwrap()
    }

    fn plain(alpha: f64) -> PasteParams {
        PasteParams {
            alpha_range: [alpha, alpha],
            blur_sigma_coeff: 0.0,
            hist_match: false,
            ..PasteParams::default()
        }
    }

    #[test]
    fn placement_respects_horizon() {
        let mut r = rng(0);
        for _ in 0..1000 {
            let o = sample_placement((100, 100), (10, 10), 0.4, &mut r).unwrap();
            assert!((40..=90).contains(&o.row));
            assert!(o.col <= 90);
        }
        let rows: Vec<usize> = (0..2000).map(|_| sample_placement((20, 20), (5, 5), 0.0, &mut r).unwrap().row).collect();
        assert_eq!(*rows.iter().min().unwrap(), 0);
        assert_eq!(*rows.iter().max().unwrap(), 15);
        assert!(matches!(
            sample_placement((100, 100), (70, 10), 0.4, &mut r),
            Err(Error::RescalePatch { horizon_row: 40, .. })
        ));
    }

    #[test]
    fn opaque_paste_copies_patch_and_marks_outliers() {
        let s = scene(32, 32);
        let p = square_patch(6, 90);
        let m = paste_outlier(&s, &p, &plain(1.0), &mut rng(1)).unwrap();
        let rec = &m.paste_log[0];
        assert_eq!((rec.height, rec.width, rec.pad), (6, 6, 0));
        for r in 0..32 {
            for c in 0..32 {
                let inside = (rec.origin.row..rec.origin.row + 6).contains(&r)
                    && (rec.origin.col..rec.origin.col + 6).contains(&c);
                if inside {
                    assert_eq!(m.image.pixel(r, c), [90, 165, 45]);
                    assert_eq!(m.labels.get(r, c), OUTLIER_ID);
                } else {
                    assert_eq!(m.image.pixel(r, c), s.image.pixel(r, c));
                    assert_eq!(m.labels.get(r, c), s.labels.get(r, c));
                }
            }
        }
    }

    #[test]
    fn alpha_above_half_without_blur_is_all_outlier() {
        let s = scene(32, 32);
        let m = paste_outlier(&s, &square_patch(8, 10), &plain(0.6), &mut rng(2)).unwrap();
        assert_eq!(m.labels.ids.iter().filter(|&&id| id == OUTLIER_ID).count(), 64);
        assert!(!m.labels.ids.contains(&IGNORE_ID));
        let m = paste_outlier(&s, &square_patch(8, 10), &plain(0.5), &mut rng(2)).unwrap();
        assert_eq!(m.labels.ids.iter().filter(|&&id| id == IGNORE_ID).count(), 64);
    }

    #[test]
    fn blurred_edges_form_an_ignore_ring() {
        let s = scene(48, 48);
        let params = PasteParams {
            alpha_range: [0.6, 0.6],
            blur_sigma_coeff: 0.1,
            blur_sigma_min: 1.0,
            hist_match: false,
            horizon_fraction: 0.0,
            ..PasteParams::default()
        };
        let m = paste_outlier(&s, &square_patch(12, 10), &params, &mut rng(3)).unwrap();
        let rec = &m.paste_log[0];
        assert!((rec.sigma.unwrap() - 1.2).abs() < 1e-12);
        assert_eq!(rec.pad, 4);
        let ignored = m.labels.ids.iter().filter(|&&id| id == IGNORE_ID).count();
        let outliers = m.labels.ids.iter().filter(|&&id| id == OUTLIER_ID).count();
        assert!(ignored > 0 && outliers > 0);
        // the padded rectangle is the whole support
        assert_eq!(ignored + outliers, 20 * 20);
    }

    #[test]
    fn infeasible_placement_leaves_sample_unmodified() {
        let s = scene(10, 10);
        let params = PasteParams {
            horizon_fraction: 1.0,
            ..plain(1.0)
        };
        let m = paste_outlier(&s, &square_patch(4, 0), &params, &mut rng(0)).unwrap();
        assert!(m.paste_log.is_empty());
        assert_eq!(m.image, s.image);
        assert_eq!(m.labels, s.labels);
    }

    #[test]
    fn tall_patch_is_rescaled() {
        let s = scene(20, 20);
        let m = paste_outlier(&s, &square_patch(16, 0), &plain(1.0), &mut rng(0)).unwrap();
        let rec = &m.paste_log[0];
        assert!(rec.height <= 12);
        assert!(rec.origin.row >= 8);
    }

    #[test]
    fn params_validation() {
        assert!(PasteParams::default().validate().is_ok());
        assert!(PasteParams::baseline().validate().is_ok());
        let bad = |f: fn(&mut PasteParams)| {
            let mut p = PasteParams::default();
            f(&mut p);
            p.validate().is_err()
        };
        assert!(bad(|p| p.horizon_fraction = 1.5));
        assert!(bad(|p| p.alpha_range = [0.9, 0.6]));
        assert!(bad(|p| p.alpha_range = [0.0, 0.5]));
        assert!(bad(|p| p.pastes_per_image = [3, 1]));
        assert!(bad(|p| p.scale_range = [0.1, 0.05]));
        assert!(bad(|p| p.rectangle_prob = -0.1));
    }

    #[test]
    fn sigma_rule() {
        let p = PasteParams::default();
        assert_eq!(p.blur_sigma(10, 10), Some(0.5));
        assert_eq!(p.blur_sigma(100, 50), Some(2.0));
        assert_eq!(p.blur_sigma(1000, 50), Some(5.0));
        assert_eq!(plain(1.0).blur_sigma(100, 100), None);
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
    }
}
