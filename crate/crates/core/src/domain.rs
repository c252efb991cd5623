//! Shared domain types.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// 8-bit grayscale fingerprint raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGrayImage")]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    sensor_id: String,
    source_path: String,
}

#[derive(Deserialize)]
struct RawGrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    sensor_id: String,
    source_path: String,
}

impl TryFrom<RawGrayImage> for GrayImage {
    type Error = Error;

    fn try_from(r: RawGrayImage) -> Result<Self> {
        GrayImage::new(r.width, r.height, r.pixels, r.sensor_id, r.source_path)
    }
}

impl GrayImage {
    pub fn new(
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        sensor_id: impl Into<String>,
        source_path: impl Into<String>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!("image dimensions {width}x{height}")));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(Error::Config(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
            sensor_id: sensor_id.into(),
            source_path: source_path.into(),
        })
    }

    /// Build from a per-pixel function `f(x, y)`.
    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        GrayImage::new(width, height, pixels, "", "").expect("from_fn dimensions")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn with_provenance(mut self, sensor_id: impl Into<String>, path: impl Into<String>) -> Self {
        self.sensor_id = sensor_id.into();
        self.source_path = path.into();
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinutiaKind {
    Ending,
    Bifurcation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Minutia {
    pub x: u32,
    pub y: u32,
    /// Orientation in degrees, `[0, 360)`.
    pub theta: f64,
    /// `[0, 100]`.
    pub quality: u8,
    pub kind: MinutiaKind,
    /// Near the edge of the segmented region; patches around it need padding.
    #[serde(default)]
    pub border: bool,
}

impl Minutia {
    pub fn new(x: u32, y: u32, theta: f64, quality: u8, kind: MinutiaKind) -> Self {
        Minutia {
            x,
            y,
            theta: normalize_degrees(theta),
            quality: quality.min(100),
            kind,
            border: false,
        }
    }

    pub fn inside(&self, width: u32, height: u32) -> bool {
        self.x < width && self.y < height
    }
}

pub fn normalize_degrees(theta: f64) -> f64 {
    let t = theta.rem_euclid(360.0);
    if t >= 360.0 {
        0.0
    } else {
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchLabel {
    Live,
    Spoof,
    Generated,
}

impl PatchLabel {
    /// Classifier target: live = 1, spoof and generated = 0.
    pub fn target(self) -> f32 {
        match self {
            PatchLabel::Live => 1.0,
            PatchLabel::Spoof | PatchLabel::Generated => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PatchOrigin {
    Minutia { x: u32, y: u32 },
    Synthetic,
}

/// Square window normalized to `[-1, 1]`, tagged with its fingerprint section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    size: usize,
    values: Vec<f32>,
    section: u8,
    label: PatchLabel,
    origin: PatchOrigin,
    /// Path of the image the patch came from; empty for generated patches.
    #[serde(default)]
    source: String,
}

impl Patch {
    pub fn new(
        size: usize,
        values: Vec<f32>,
        section: u8,
        label: PatchLabel,
        origin: PatchOrigin,
        source: impl Into<String>,
    ) -> Result<Self> {
        if size == 0 || values.len() != size * size {
            return Err(Error::Config(format!(
                "patch of size {size} with {} values",
                values.len()
            )));
        }
        if section > 8 {
            return Err(Error::Config(format!("patch section {section} outside 0..=8")));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("patch value {v} outside [-1, 1]")));
        }
        Ok(Patch {
            size,
            values,
            section,
            label,
            origin,
            source: source.into(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn section(&self) -> usize {
        self.section as usize
    }

    pub fn label(&self) -> PatchLabel {
        self.label
    }

    pub fn origin(&self) -> &PatchOrigin {
        &self.origin
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Live,
    Spoof,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Live => "live",
            Label::Spoof => "spoof",
        })
    }
}

pub const LIVE_MATERIAL: &str = "live";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: String,
    pub sensor_id: String,
    pub split: Split,
    pub label: Label,
    pub material: String,
    pub known_material: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub sensors: Vec<String>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let sensors: HashSet<&str> = self.sensors.iter().map(String::as_str).collect();
        let mut paths = HashSet::new();
        for r in &self.records {
            if !sensors.contains(r.sensor_id.as_str()) {
                return Err(Error::Config(format!(
                    "record {} has unknown sensor {}",
                    r.path, r.sensor_id
                )));
            }
            if !paths.insert(r.path.as_str()) {
                return Err(Error::Config(format!("duplicate path {}", r.path)));
            }
            if (r.label == Label::Live) != (r.material == LIVE_MATERIAL) {
                return Err(Error::Config(format!(
                    "record {} labelled {} with material {}",
                    r.path, r.label, r.material
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn has_sensor(&self, sensor: &str) -> bool {
        self.sensors.iter().any(|s| s == sensor)
    }

    pub fn select<'a>(
        &'a self,
        sensor: Option<&'a str>,
        split: Option<Split>,
        label: Option<Label>,
    ) -> impl Iterator<Item = &'a SampleRecord> + 'a {
        self.records.iter().filter(move |r| {
            sensor.is_none_or(|s| r.sensor_id == s)
                && split.is_none_or(|s| r.split == s)
                && label.is_none_or(|l| r.label == l)
        })
    }

    /// Record counts keyed by `(sensor, split, label)`.
    pub fn counts(&self) -> BTreeMap<(String, Split, Label), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.sensor_id.clone(), r.split, r.label)).or_insert(0) += 1;
        }
        out
    }

    /// Record counts keyed by `(sensor, split, material)`.
    pub fn material_counts(&self) -> BTreeMap<(String, Split, String), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.sensor_id.clone(), r.split, r.material.clone()))
                .or_insert(0) += 1;
        }
        out
    }

    /// Recompute `known_material` for every record: a spoof material is
    /// known when it appears among the same sensor's train-split spoofs.
    pub fn recompute_known_materials(&mut self) {
        let mut train_materials: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in &self.records {
            if r.split == Split::Train && r.label == Label::Spoof {
                train_materials
                    .entry(r.sensor_id.clone())
                    .or_default()
                    .insert(r.material.clone());
            }
        }
        for r in &mut self.records {
            r.known_material = match r.label {
                Label::Live => true,
                Label::Spoof => train_materials
                    .get(&r.sensor_id)
                    .is_some_and(|m| m.contains(&r.material)),
            };
        }
    }
}

/// Order-independent digest of a set of sample paths.
pub fn paths_fingerprint<'a>(paths: impl IntoIterator<Item = &'a str>) -> String {
    let sorted: BTreeSet<&str> = paths.into_iter().collect();
    let mut h = Sha256::new();
    for p in sorted {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
