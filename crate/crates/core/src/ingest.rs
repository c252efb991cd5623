//! Dataset discovery, image loading and synthetic fixtures.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{DatasetManifest, GrayImage, Label, SampleRecord, Split, LIVE_MATERIAL};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "bmp", "jpg", "jpeg", "tif", "tiff"];

/// Directory names that make up a dataset tree:
/// `root/<sensor>/<split>/<live_dir>/*` and
/// `root/<sensor>/<split>/<spoof_dir>/<material>/*`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSpec {
    pub live_dir: String,
    pub spoof_dir: String,
    pub train_dir: String,
    pub test_dir: String,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        LayoutSpec {
            live_dir: "Live".into(),
            spoof_dir: "Fake".into(),
            train_dir: "train".into(),
            test_dir: "test".into(),
        }
    }
}

impl LayoutSpec {
    pub fn validate(&self) -> Result<()> {
        let names = [&self.live_dir, &self.spoof_dir, &self.train_dir, &self.test_dir];
        if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return Err(Error::Config("layout directory names must be plain, non-empty names".into()));
        }
        if self.live_dir == self.spoof_dir || self.train_dir == self.test_dir {
            return Err(Error::Config("layout directories must be distinct".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let l: LayoutSpec = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        l.validate()?;
        Ok(l)
    }

    fn split_dir(&self, split: Split) -> &str {
        match split {
            Split::Train => &self.train_dir,
            Split::Test => &self.test_dir,
        }
    }
}

/// Result of a scan: the manifest plus files that looked like images but
/// could not be read.
#[derive(Clone, Debug)]
pub struct ScanReport {
    pub manifest: DatasetManifest,
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn image_files(dir: &Path) -> Vec<PathBuf> {
    walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && is_image(e.path()))
        .map(|e| e.into_path())
        .collect()
}

fn readable(p: &Path) -> std::result::Result<(), String> {
    image::ImageReader::open(p)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .into_dimensions()
        .map(|_| ())
        .map_err(|e| e.to_string())
}

/// Build a manifest from a dataset tree. Sensors are the top-level
/// directories that contribute at least one record, in name order.
pub fn scan_dataset(root: &Path, layout: &LayoutSpec) -> Result<ScanReport> {
    layout.validate()?;
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut sensors = Vec::new();
    for sensor_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let sensor = sensor_dir.file_name().unwrap().to_string_lossy().into_owned();
        let before = records.len();
        for split in [Split::Train, Split::Test] {
            let base = sensor_dir.join(layout.split_dir(split));
            let mut found: Vec<(PathBuf, Label, String)> = Vec::new();
            let live = base.join(&layout.live_dir);
            if live.is_dir() {
                found.extend(image_files(&live).into_iter().map(|p| (p, Label::Live, LIVE_MATERIAL.to_string())));
            }
            let spoof = base.join(&layout.spoof_dir);
            if spoof.is_dir() {
                for entry in sorted_entries(&spoof)? {
                    if entry.is_dir() {
                        let material = entry.file_name().unwrap().to_string_lossy().into_owned();
                        found.extend(image_files(&entry).into_iter().map(|p| (p, Label::Spoof, material.clone())));
                    } else if is_image(&entry) {
                        skipped.push((entry, "spoof image outside a material directory".to_string()));
                    }
                }
            }
            for (path, label, material) in found {
                if let Err(reason) = readable(&path) {
                    skipped.push((path, reason));
                    continue;
                }
                records.push(SampleRecord {
                    path: path.to_string_lossy().into_owned(),
                    sensor_id: sensor.clone(),
                    split,
                    label,
                    material,
                    known_material: true,
                });
            }
        }
        if records.len() > before {
            sensors.push(sensor);
        }
    }
    for (p, why) in &skipped {
        log::warn!("skipping {}: {why}", p.display());
    }
    let mut manifest = DatasetManifest {
        name: root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        sensors,
        records,
    };
    manifest.recompute_known_materials();
    manifest.validate()?;
    Ok(ScanReport { manifest, skipped })
}

/// Decode any supported raster to 8-bit gray. Multi-channel images are
/// reduced by the rounded mean of their colour channels; alpha is ignored.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    let pixels = if img.color().has_color() {
        img.to_rgb8()
            .pixels()
            .map(|p| ((p[0] as u32 + p[1] as u32 + p[2] as u32 + 1) / 3) as u8)
            .collect()
    } else {
        img.to_luma8().into_raw()
    };
    GrayImage::new(w, h, pixels, "", path.to_string_lossy()).map_err(|e| decode_err(e.to_string()))
}

/// Load the image behind a record, tagged with its sensor and path.
pub fn load_record(record: &SampleRecord) -> Result<GrayImage> {
    Ok(load_image(Path::new(&record.path))?.with_provenance(&record.sensor_id, &record.path))
}

pub fn save_gray_png(path: &Path, image: &GrayImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::GrayImage::from_raw(image.width(), image.height(), image.pixels().to_vec())
        .expect("dimensions checked at construction")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: format!("cannot write image: {e}"),
        })
}

/// Spoof materials used in the train split of every fixture sensor.
pub const FIXTURE_TRAIN_MATERIALS: &[&str] = &["ecoflex", "gelatine"];
/// Extra material that only appears in the fixture test split.
pub const FIXTURE_UNKNOWN_MATERIAL: &str = "latex";

/// Knobs for [`make_synthetic_fixture_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub seed: u64,
    pub sensors: usize,
    pub per_class_count: usize,
    pub width: u32,
    pub height: u32,
}

impl FixtureSpec {
    pub fn new(seed: u64, sensors: usize, per_class_count: usize) -> Self {
        FixtureSpec {
            seed,
            sensors,
            per_class_count,
            width: 160,
            height: 160,
        }
    }
}

pub fn fixture_sensor_name(i: usize) -> String {
    format!("sensor_{}", (b'a' + (i % 26) as u8) as char)
}

/// Ridge-pattern parameters for one synthetic print.
struct PrintStyle {
    period: f64,
    amplitude: f64,
    noise: f64,
    brightness: f64,
    breaks: usize,
}

fn print_style(sensor: usize, material: &str) -> PrintStyle {
    // Sensors differ in scale and brightness; live prints have wider,
    // cleaner ridges than spoofs, whatever the sensor.
    let scale = 1.0 + 0.07 * sensor as f64;
    let brightness = 128.0 + 10.0 * (sensor as f64 - 1.0);
    match material {
        LIVE_MATERIAL => PrintStyle {
            period: 9.0 * scale,
            amplitude: 100.0,
            noise: 6.0,
            brightness,
            breaks: 14,
        },
        "ecoflex" => PrintStyle {
            period: 6.0 * scale,
            amplitude: 60.0,
            noise: 16.0,
            brightness,
            breaks: 14,
        },
        "gelatine" => PrintStyle {
            period: 6.3 * scale,
            amplitude: 55.0,
            noise: 18.0,
            brightness: brightness + 8.0,
            breaks: 14,
        },
        _ => PrintStyle {
            period: 5.7 * scale,
            amplitude: 65.0,
            noise: 20.0,
            brightness: brightness - 8.0,
            breaks: 14,
        },
    }
}

/// One fingerprint-like image: elliptical ridges around a random core,
/// with small valley-filled breaks that create ridge endings.
pub fn synthetic_print(seed: u64, sensor: usize, material: &str, width: u32, height: u32) -> GrayImage {
    let style = print_style(sensor, material);
    let mut rng = seeded_rng(seed);
    let (w, h) = (width as f64, height as f64);
    let cx = w * rng.gen_range(0.35..0.65);
    let cy = h * rng.gen_range(0.35..0.65);
    let squash = rng.gen_range(1.1..1.4);
    let phase0 = rng.gen_range(0.0..TAU);
    let breaks: Vec<(f64, f64, f64)> = (0..style.breaks)
        .map(|_| (rng.gen_range(0.1..0.9) * w, rng.gen_range(0.1..0.9) * h, rng.gen_range(0.4..0.6) * style.period))
        .collect();
    let noise = Normal::new(0.0, style.noise).expect("finite noise");
    let mut pixels = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as f64 - cx, (y as f64 - cy) * squash);
            let r = (dx * dx + dy * dy).sqrt();
            let broken = breaks.iter().any(|&(bx, by, br)| (x as f64 - bx).powi(2) + (y as f64 - by).powi(2) < br * br);
            // Ridges are dark: the cosine peak is the valley.
            let ridge = if broken { 1.0 } else { (TAU * r / style.period + phase0).cos() };
            let v = style.brightness + style.amplitude * ridge + noise.sample(&mut rng);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(width, height, pixels, fixture_sensor_name(sensor), "").expect("fixture dimensions")
}

/// Write a fixture with the default 160×160 prints. See
/// [`make_synthetic_fixture_with`].
pub fn make_synthetic_fixture(seed: u64, sensors: usize, per_class_count: usize, out: &Path) -> Result<DatasetManifest> {
    make_synthetic_fixture_with(&FixtureSpec::new(seed, sensors, per_class_count), out)
}

/// Write `per_class_count` live and spoof prints per sensor and split, in
/// the default layout under `out`, plus `out/manifest.json`. Train spoofs
/// cycle through [`FIXTURE_TRAIN_MATERIALS`]; test spoofs also include
/// [`FIXTURE_UNKNOWN_MATERIAL`] so the known/unknown split is exercised.
pub fn make_synthetic_fixture_with(spec: &FixtureSpec, out: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let layout = LayoutSpec::default();
    let mut records = Vec::new();
    let mut sensors = Vec::new();
    for s in 0..spec.sensors {
        let sensor = fixture_sensor_name(s);
        for split in [Split::Train, Split::Test] {
            let base = out.join(&sensor).join(layout.split_dir(split));
            let mut materials: Vec<&str> = FIXTURE_TRAIN_MATERIALS.to_vec();
            if split == Split::Test {
                materials.push(FIXTURE_UNKNOWN_MATERIAL);
            }
            for label in [Label::Live, Label::Spoof] {
                for i in 0..spec.per_class_count {
                    let (material, path) = match label {
                        Label::Live => (LIVE_MATERIAL, base.join(&layout.live_dir).join(format!("live_{i:04}.png"))),
                        Label::Spoof => {
                            let m = materials[i % materials.len()];
                            (m, base.join(&layout.spoof_dir).join(m).join(format!("spoof_{i:04}.png")))
                        }
                    };
                    let tag = format!("{sensor}/{split}/{material}/{i}");
                    let img = synthetic_print(derive_seed(spec.seed, &tag), s, material, spec.width, spec.height);
                    save_gray_png(&path, &img)?;
                    records.push(SampleRecord {
                        path: path.to_string_lossy().into_owned(),
                        sensor_id: sensor.clone(),
                        split,
                        label,
                        material: material.to_string(),
                        known_material: true,
                    });
                }
            }
        }
        if spec.per_class_count > 0 {
            sensors.push(sensor);
        }
    }
    let mut manifest = DatasetManifest {
        name: out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "fixture".into()),
        sensors,
        records,
    };
    manifest.recompute_known_materials();
    manifest.validate()?;
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}
