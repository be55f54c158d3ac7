//! A procedural "shapes world" for desk-scale experiments.
//!
//! Scenes have a sky band above the horizon and ground below, both class 0,
//! with coloured shapes as the remaining inlier classes. A held-out yellow
//! upright bar plays the anomaly: it never appears in training scenes and
//! is labelled [`OUTLIER_ID`] in test scenes.
//!
//! A separate negative dataset with its own class vocabulary supplies the
//! synthetic outliers. Some of its classes look like inlier shapes and are
//! meant to be filtered out before use.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compositor::{derive_seed, TrainingSample};
use crate::error::{Error, Result};
use crate::imageops::ImageRgb;
use crate::io::{ClassEntry, ClassMap};
use crate::labels::{LabelMap, OUTLIER_ID};
use crate::negatives::{ClassMapping, ClassMappingEntry, LoadedNegative, NegativePool};

pub const MAX_CLASSES: usize = 4;

const SKY: [u8; 3] = [150, 180, 215];
const GROUND: [u8; 3] = [110, 100, 90];
const SHAPE_COLORS: [[u8; 3]; 3] = [[200, 40, 40], [40, 170, 60], [50, 70, 200]];
pub const INLIER_NAMES: [&str; 4] = ["background", "disc", "square", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Bar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSpec {
    pub shape: Shape,
    pub color: [u8; 3],
    /// Instances per test image.
    pub count: [usize; 2],
}

impl Default for OutlierSpec {
    fn default() -> Self {
        Self {
            shape: Shape::Bar,
            color: [225, 205, 40],
            count: [1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesConfig {
    pub image_size: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub num_classes: usize,
    pub outlier: OutlierSpec,
    /// Amplitude of per-pixel uniform noise, in 8-bit intensity units.
    pub noise_level: f64,
    /// Per-object colour jitter amplitude.
    pub color_jitter: i32,
    pub shapes_per_image: [usize; 2],
    pub horizon_fraction: f64,
    pub num_negatives: usize,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_train: 200,
            num_test: 50,
            num_classes: 4,
            outlier: OutlierSpec::default(),
            noise_level: 8.0,
            color_jitter: 20,
            shapes_per_image: [2, 4],
            horizon_fraction: 0.4,
            num_negatives: 120,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 2..={MAX_CLASSES}, got {}", self.num_classes));
        }
        if self.image_size < 16 {
            return bad(format!("image_size {} is below 16", self.image_size));
        }
        if self.num_train == 0 || self.num_test == 0 {
            return bad("num_train and num_test must be positive".into());
        }
        if !(self.noise_level >= 0.0) || self.color_jitter < 0 {
            return bad("noise_level and color_jitter must be non-negative".into());
        }
        let [lo, hi] = self.shapes_per_image;
        let [olo, ohi] = self.outlier.count;
        if lo > hi || olo == 0 || olo > ohi {
            return bad("count ranges must satisfy lo <= hi, with at least one outlier".into());
        }
        if !(0.1..=0.9).contains(&self.horizon_fraction) {
            return bad(format!("horizon_fraction {} outside [0.1, 0.9]", self.horizon_fraction));
        }
        let c = self.outlier.color;
        let near = |a: [u8; 3]| a.iter().zip(c).all(|(&x, y)| (x as i32 - y as i32).abs() <= 2 * self.color_jitter);
        if near(SKY) || near(GROUND) || SHAPE_COLORS.iter().any(|&s| near(s)) {
            return bad(format!("outlier colour {c:?} is too close to an inlier colour"));
        }
        Ok(())
    }

    pub fn class_map(&self) -> ClassMap {
        ClassMap::new((0..self.num_classes).map(|id| ClassEntry {
            id: id as u8,
            name: INLIER_NAMES[id].to_string(),
            inlier: true,
        }))
        .expect("builtin class names are valid")
    }

    fn horizon(&self) -> usize {
        (self.horizon_fraction * self.image_size as f64).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapesDataset {
    pub train: Vec<TrainingSample>,
    pub test: Vec<TrainingSample>,
}

fn jitter<R: Rng + ?Sized>(c: [u8; 3], amp: i32, rng: &mut R) -> [u8; 3] {
    if amp == 0 {
        return c;
    }
    c.map(|v| (v as i32 + rng.random_range(-amp..=amp)).clamp(0, 255) as u8)
}

fn inside(shape: Shape, r: f64, c: f64, cy: f64, cx: f64, half: f64) -> bool {
    let (dy, dx) = (r - cy, c - cx);
    match shape {
        Shape::Disc => dy * dy + dx * dx <= half * half,
        Shape::Square => dy.abs() <= half && dx.abs() <= half,
        // apex up, base at the bottom of the bounding box
        Shape::Triangle => {
            let t = (dy + half) / (2.0 * half);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * half
        }
        Shape::Bar => dy.abs() <= half && dx.abs() <= half * 0.3,
    }
}

struct Canvas {
    image: ImageRgb,
    labels: LabelMap,
}

impl Canvas {
    fn scene<R: Rng + ?Sized>(size: usize, horizon: usize, sky: [u8; 3], ground: [u8; 3], rng: &mut R, amp: i32) -> Self {
        let sky = jitter(sky, amp, rng);
        let ground = jitter(ground, amp, rng);
        let mut image = ImageRgb::filled(size, size, ground);
        for r in 0..horizon {
            for c in 0..size {
                image.put_pixel(r, c, sky);
            }
        }
        Self {
            image,
            labels: LabelMap::filled(size, size, 0),
        }
    }

    /// Draw `shape` centred at (cy, cx); returns the number of pixels painted.
    fn draw(&mut self, shape: Shape, cy: f64, cx: f64, half: f64, color: [u8; 3], id: u8) -> usize {
        let (h, w) = (self.image.height, self.image.width);
        let r0 = (cy - half).floor().max(0.0) as usize;
        let r1 = ((cy + half).ceil() as usize).min(h - 1);
        let c0 = (cx - half).floor().max(0.0) as usize;
        let c1 = ((cx + half).ceil() as usize).min(w - 1);
        let mut n = 0;
        for r in r0..=r1 {
            for c in c0..=c1 {
                if inside(shape, r as f64 + 0.5, c as f64 + 0.5, cy, cx, half) {
                    self.image.put_pixel(r, c, color);
                    self.labels.set(r, c, id);
                    n += 1;
                }
            }
        }
        n
    }

    fn add_noise<R: Rng + ?Sized>(&mut self, level: f64, rng: &mut R) {
        if level <= 0.0 {
            return;
        }
        for v in &mut self.image.data {
            let n: f64 = rng.random_range(-level..=level);
            *v = (*v as f64 + n).round().clamp(0.0, 255.0) as u8;
        }
    }
}

fn scene<R: Rng + ?Sized>(cfg: &ShapesConfig, with_outliers: bool, rng: &mut R) -> TrainingSample {
    let size = cfg.image_size;
    let s = size as f64;
    let horizon = cfg.horizon();
    let mut canvas = Canvas::scene(size, horizon, SKY, GROUND, rng, cfg.color_jitter);
    let shape_classes = cfg.num_classes - 1;
    if shape_classes > 0 {
        let [lo, hi] = cfg.shapes_per_image;
        for _ in 0..rng.random_range(lo..=hi) {
            let class = rng.random_range(0..shape_classes);
            let shape = [Shape::Disc, Shape::Square, Shape::Triangle][class];
            let half = rng.random_range(0.06 * s..=0.14 * s);
            let cy = rng.random_range(0.0..s);
            let cx = rng.random_range(0.0..s);
            let color = jitter(SHAPE_COLORS[class], cfg.color_jitter, rng);
            canvas.draw(shape, cy, cx, half, color, class as u8 + 1);
        }
    }
    if with_outliers {
        let [lo, hi] = cfg.outlier.count;
        let n = rng.random_range(lo..=hi);
        let mut drawn = 0;
        let mut placed = 0;
        // the object must stay visible even if a later one overlaps it
        while placed < n || drawn == 0 {
            let half = rng.random_range(0.10 * s..=0.18 * s);
            let cy = rng.random_range(horizon as f64 + 0.5 * half..s - 0.5 * half);
            let cx = rng.random_range(0.1 * s..0.9 * s);
            let color = jitter(cfg.outlier.color, cfg.color_jitter / 2, rng);
            drawn += canvas.draw(cfg.outlier.shape, cy, cx, half, color, OUTLIER_ID);
            placed += 1;
        }
    }
    canvas.add_noise(cfg.noise_level, rng);
    TrainingSample {
        image: canvas.image,
        labels: canvas.labels,
    }
}

/// Build the train (no anomalies) and test (at least one anomaly) splits.
/// Image `i` of each split draws from its own derived stream.
pub fn make_shapes_dataset(cfg: &ShapesConfig, seed: u64) -> Result<ShapesDataset> {
    cfg.validate()?;
    let split = |tag: u64, n: usize, outliers: bool| -> Vec<TrainingSample> {
        let base = derive_seed(seed, tag);
        (0..n)
            .map(|i| scene(cfg, outliers, &mut ChaCha8Rng::seed_from_u64(derive_seed(base, i as u64))))
            .collect()
    };
    Ok(ShapesDataset {
        train: split(0, cfg.num_train, false),
        test: split(1, cfg.num_test, true),
    })
}

/// Negative-dataset vocabulary. The first three entries mirror inlier shapes.
pub const NEGATIVE_CLASSES: [(&str, u8, bool); 8] = [
    ("red_disc", 1, true),
    ("green_square", 2, true),
    ("blue_triangle", 3, true),
    ("wall", 10, false),
    ("lamp", 11, false),
    ("crate", 12, false),
    ("post", 13, false),
    ("sign", 14, false),
];

pub fn negative_class_mapping() -> ClassMapping {
    ClassMapping(
        NEGATIVE_CLASSES
            .iter()
            .map(|&(name, id, excluded)| (name.to_string(), ClassMappingEntry { id, excluded }))
            .collect::<BTreeMap<_, _>>(),
    )
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Render the negative dataset: a plain wall with a few objects of
/// arbitrary colour. Roughly a quarter of the images also contain an
/// inlier-like shape.
pub fn make_negatives(cfg: &ShapesConfig, seed: u64) -> Result<Vec<(String, ImageRgb, LabelMap)>> {
    cfg.validate()?;
    let base = derive_seed(seed, 2);
    let size = cfg.image_size;
    let s = size as f64;
    let objects = [(Shape::Disc, 11u8), (Shape::Square, 12), (Shape::Bar, 13), (Shape::Triangle, 14)];
    let mut out = Vec::with_capacity(cfg.num_negatives);
    for i in 0..cfg.num_negatives {
        let rng = &mut ChaCha8Rng::seed_from_u64(derive_seed(base, i as u64));
        let wall = random_color(rng);
        let mut canvas = Canvas::scene(size, 0, wall, wall, rng, 0);
        canvas.labels = LabelMap::filled(size, size, 10);
        for _ in 0..rng.random_range(1..=3) {
            let (shape, id) = objects[rng.random_range(0..objects.len())];
            let half = rng.random_range(0.12 * s..=0.3 * s);
            canvas.draw(shape, rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s), half, random_color(rng), id);
        }
        if rng.random_bool(0.25) {
            let class = rng.random_range(0..3);
            let shape = [Shape::Disc, Shape::Square, Shape::Triangle][class];
            let half = rng.random_range(0.1 * s..=0.2 * s);
            canvas.draw(shape, rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s), half, SHAPE_COLORS[class], class as u8 + 1);
        }
        canvas.add_noise(cfg.noise_level, rng);
        out.push((format!("neg_{i:04}"), canvas.image, canvas.labels));
    }
    Ok(out)
}

/// In-memory negative pool with inlier-like images already removed.
pub fn negative_pool(cfg: &ShapesConfig, seed: u64) -> Result<NegativePool> {
    let excluded = negative_class_mapping().excluded_ids();
    let items = make_negatives(cfg, seed)?
        .into_iter()
        .filter(|(_, _, labels)| !labels.ids.iter().any(|id| excluded.contains(id)))
        .map(|(name, image, labels)| LoadedNegative::from_parts(format!("{name}.png").into(), image, labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(NegativePool { items })
}
