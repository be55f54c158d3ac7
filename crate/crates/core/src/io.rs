//! Dataset manifests, class maps and on-disk artifacts.
//!
//! Formats:
//! - manifest: JSON Lines, `{"image": path, "label": path, "split": tag}`;
//!   relative paths resolve against the manifest's directory.
//! - class map: JSON array `[{"id": 0, "name": "road", "inlier": true}, ...]`.
//! - label maps: 8-bit single-channel PNG.
//! - score maps: raw little-endian f32, row-major, plus a JSON sidecar at
//!   `<path>.json` holding `{"width", "height", "dtype": "f32le", "kind"}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};

use image::{ColorType, GrayImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::ImageRgb;
use crate::labels::{LabelMap, IGNORE_ID, OUTLIER_ID};
use crate::scoring::ScoreMap;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub label: PathBuf,
    #[serde(default)]
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image: PathBuf,
    label: PathBuf,
    #[serde(default)]
    split: String,
}

/// Reject absolute paths and `..` so every record stays under the root.
fn check_relative(path: &Path) -> std::result::Result<(), String> {
    if path.as_os_str().is_empty() {
        return Err("empty path".into());
    }
    for c in path.components() {
        match c {
            Component::Normal(_) | Component::CurDir => {}
            _ => return Err(format!("path {} does not stay under the manifest root", path.display())),
        }
    }
    Ok(())
}

impl Manifest {
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose split tag equals `split`.
    pub fn split(&self, split: &str) -> Manifest {
        Manifest {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let manifest_err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| manifest_err(e.to_string()))?;
        check_relative(&raw.image).map_err(manifest_err)?;
        check_relative(&raw.label).map_err(manifest_err)?;
        records.push(ManifestRecord {
            image: raw.image,
            label: raw.label,
            split: raw.split,
        });
    }
    records.sort();
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert(&r.image) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: 0,
                message: format!("duplicate record for image {}", r.image.display()),
            });
        }
    }
    Ok(Manifest { root, records })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut sorted = records.to_vec();
    sorted.sort();
    let mut out = String::new();
    for r in &sorted {
        out.push_str(&serde_json::to_string(r).expect("manifest record serializes"));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    pub inlier: bool,
}

/// Class id to name and inlier flag. Ids 254 and 255 are reserved.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ClassMap {
    entries: BTreeMap<u8, ClassEntry>,
}

impl ClassMap {
    pub fn new(entries: impl IntoIterator<Item = ClassEntry>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in entries {
            if e.id == OUTLIER_ID || e.id == IGNORE_ID {
                return Err(Error::InvalidParameter(format!(
                    "class '{}' uses reserved id {}",
                    e.name, e.id
                )));
            }
            if map.insert(e.id, e.clone()).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate class id {}", e.id)));
            }
        }
        Ok(Self { entries: map })
    }

    /// Inlier classes `0..k` with generated names.
    pub fn inliers(k: usize) -> Self {
        Self {
            entries: (0..k as u8)
                .map(|id| {
                    (
                        id,
                        ClassEntry {
                            id,
                            name: format!("class{id}"),
                            inlier: true,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn contains(&self, id: u8) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn get(&self, id: u8) -> Option<&ClassEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ClassEntry> {
        self.entries.values()
    }

    pub fn num_inliers(&self) -> usize {
        self.entries.values().filter(|e| e.inlier).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ClassEntry> = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Self::new(entries).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<&ClassEntry> = self.entries.values().collect();
        write_json(path, &entries)
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Append one JSON line to `path`, creating it if needed.
pub fn append_json_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value).expect("value serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Read an 8-bit label PNG and check every id against `classmap` and the
/// two sentinels.
pub fn read_label_map(path: &Path, classmap: &ClassMap) -> Result<LabelMap> {
    let img = open_image(path)?;
    if img.color() != ColorType::L8 {
        return Err(Error::format(
            path,
            format!("label map must be 8-bit single channel, found {:?}", img.color()),
        ));
    }
    let gray = img.into_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let ids = gray.into_raw();
    if let Some(i) = ids
        .iter()
        .position(|&id| id != OUTLIER_ID && id != IGNORE_ID && !classmap.contains(id))
    {
        return Err(Error::UnknownLabel {
            path: path.to_path_buf(),
            id: ids[i],
            row: i / w,
            col: i % w,
        });
    }
    LabelMap::new(h, w, ids)
}

pub fn write_label_map(path: &Path, labels: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(labels.width as u32, labels.height as u32, labels.ids.clone())
        .expect("label buffer matches dims");
    save_image(path, |p| img.save(p))
}

fn save_image(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_image(path: &Path) -> Result<ImageRgb> {
    let rgb = open_image(path)?.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    ImageRgb::new(w, h, rgb.into_raw())
}

pub fn write_image(path: &Path, image: &ImageRgb) -> Result<()> {
    let img = RgbImage::from_raw(image.width as u32, image.height as u32, image.data.clone())
        .expect("image buffer matches dims");
    save_image(path, |p| img.save(p))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreSidecar {
    pub width: usize,
    pub height: usize,
    pub dtype: String,
    pub kind: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Little-endian f32 payload of a score map.
pub fn encode_scores(map: &ScoreMap) -> Vec<u8> {
    map.values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn write_score_map(path: &Path, map: &ScoreMap, kind: &str) -> Result<()> {
    if let Some(i) = map.values.iter().position(|v| !(*v as f32).is_finite()) {
        return Err(Error::NonFinite(format!("score at index {i} in {}", path.display())));
    }
    write_bytes(path, &encode_scores(map))?;
    write_json(
        &sidecar_path(path),
        &ScoreSidecar {
            width: map.width,
            height: map.height,
            dtype: "f32le".into(),
            kind: kind.into(),
        },
    )
}

pub fn read_score_map(path: &Path) -> Result<(ScoreMap, ScoreSidecar)> {
    let side_path = sidecar_path(path);
    let side: ScoreSidecar = read_json(&side_path)?;
    if side.dtype != "f32le" {
        return Err(Error::format(&side_path, format!("unsupported dtype '{}'", side.dtype)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != side.width * side.height * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload has {} bytes but sidecar says {}x{} f32",
                bytes.len(),
                side.width,
                side.height
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let map = ScoreMap::new(side.height, side.width, values).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((map, side))
}

/// Min-max normalized 8-bit grayscale rendering of a score map.
pub fn write_score_png(path: &Path, map: &ScoreMap) -> Result<()> {
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels: Vec<u8> = map
        .values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    let img = GrayImage::from_raw(map.width as u32, map.height as u32, pixels).expect("dims match");
    save_image(path, |p| img.save(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn manifest_sorted_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"image\":\"b.png\",\"label\":\"b_l.png\",\"split\":\"train\"}\n{\"image\":\"a.png\",\"label\":\"a_l.png\"}\n",
        )
        .unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.records[0].image, PathBuf::from("a.png"));
        assert_eq!(m.records[1].split, "train");
        assert_eq!(m.resolve(&m.records[0].image), dir.path().join("a.png"));

        fs::write(&p, "{\"image\":\"a.png\",\"label\":\"x\"}\n{\"image\":\"b.png\"}\n").unwrap();
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("label"), "{err}");

        fs::write(&p, "{\"image\":\"a.png\",\"label\":\"x\"}\n{\"image\":\"a.png\",\"label\":\"y\"}\n").unwrap();
        assert!(load_manifest(&p).unwrap_err().to_string().contains("duplicate"));

        fs::write(&p, "{\"image\":\"../a.png\",\"label\":\"x\"}\n").unwrap();
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn classmap_rejects_reserved_and_duplicates() {
        let e = |id, name: &str| ClassEntry { id, name: name.into(), inlier: true };
        assert!(ClassMap::new([e(254, "x")]).is_err());
        assert!(ClassMap::new([e(1, "a"), e(1, "b")]).is_err());
        assert_eq!(ClassMap::new([e(0, "a"), e(3, "b")]).unwrap().num_inliers(), 2);
    }

    #[test]
    fn label_map_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        let labels = LabelMap::new(2, 3, vec![0, 1, OUTLIER_ID, IGNORE_ID, 2, 0]).unwrap();
        write_label_map(&p, &labels).unwrap();
        assert_eq!(read_label_map(&p, &ClassMap::inliers(3)).unwrap(), labels);

        let zeros = LabelMap::filled(4, 4, 0);
        write_label_map(&p, &zeros).unwrap();
        assert_eq!(read_label_map(&p, &ClassMap::inliers(1)).unwrap(), zeros);

        let mut bad = LabelMap::filled(3, 4, 0);
        bad.set(2, 1, 17);
        write_label_map(&p, &bad).unwrap();
        match read_label_map(&p, &ClassMap::inliers(4)) {
            Err(Error::UnknownLabel { id: 17, row: 2, col: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }

        write_image(&p, &ImageRgb::filled(2, 2, [1, 2, 3])).unwrap();
        assert!(matches!(read_label_map(&p, &ClassMap::inliers(4)), Err(Error::Format { .. })));
    }

    #[test]
    fn score_map_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.f32");
        let map = ScoreMap::new(1, 2, vec![1.0, -2.5]).unwrap();
        write_score_map(&p, &map, "ml").unwrap();
        assert_eq!(fs::read(&p).unwrap(), vec![0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x20, 0xC0]);
        let (back, side) = read_score_map(&p).unwrap();
        assert_eq!(back, map);
        assert_eq!(side.kind, "ml");

        let two = ScoreMap::new(2, 2, vec![0.1, 1e-8, -3.75, 12345.678]).unwrap();
        write_score_map(&p, &two, "msp").unwrap();
        let (back, _) = read_score_map(&p).unwrap();
        for (a, b) in back.values.iter().zip(&two.values) {
            assert_eq!(*a as f32, *b as f32);
        }

        fs::write(&p, [0u8; 12]).unwrap();
        assert!(read_score_map(&p).is_err());
    }

    #[test]
    fn image_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img = ImageRgb::new(2, 2, (0..12).map(|v| v * 20).collect()).unwrap();
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
    }
}
