//! Minutia-centred patches and their fingerprint sections.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::domain::{hex, GrayImage, Label, Minutia, Patch, PatchLabel, PatchOrigin, SampleRecord};
use crate::error::{Error, Result};
use crate::ingest::load_record;
use crate::minutiae::{extract_minutiae, BBox};

pub const SECTIONS: usize = 9;

/// Map `i` into `0..n` by mirroring about the edges without repeating the
/// edge pixel (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: i64, n: i64) -> i64 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i.rem_euclid(period);
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pixel value mapped to `[-1, 1]`.
pub fn normalize_pixel(v: u8) -> f32 {
    (v as f32 / 127.5 - 1.0).clamp(-1.0, 1.0)
}

/// Inverse of [`normalize_pixel`], rounding and clamping.
pub fn denormalize_value(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// `size × size` window centred on the minutia (rows and columns
/// `[c - size/2, c - size/2 + size)`), reflect-padded and normalized.
pub fn extract_window(image: &GrayImage, cx: u32, cy: u32, size: usize) -> Result<Vec<f32>> {
    let (w, h) = (image.width() as i64, image.height() as i64);
    if size == 0 || size as i64 > 2 * w.min(h) {
        return Err(Error::Config(format!(
            "patch size {size} must be in 1..={} for a {w}x{h} image",
            2 * w.min(h)
        )));
    }
    if cx as i64 >= w || cy as i64 >= h {
        return Err(Error::Config(format!("minutia ({cx}, {cy}) outside {w}x{h} image")));
    }
    let x0 = cx as i64 - (size / 2) as i64;
    let y0 = cy as i64 - (size / 2) as i64;
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size as i64 {
        let y = reflect_index(y0 + r, h) as u32;
        for c in 0..size as i64 {
            let x = reflect_index(x0 + c, w) as u32;
            out.push(normalize_pixel(image.get(x, y)));
        }
    }
    Ok(out)
}

/// Section `3 * row + col` of the minutia within the bbox, where
/// `col = floor(3 (x - x_min) / (x_max - x_min))` clamped to `0..=2` and
/// likewise for rows.
pub fn assign_section(m: &Minutia, bbox: BBox) -> Result<u8> {
    section_of(m.x, m.y, bbox)
}

pub fn section_of(x: u32, y: u32, bbox: BBox) -> Result<u8> {
    if bbox.x_max <= bbox.x_min || bbox.y_max <= bbox.y_min {
        return Err(Error::DegenerateBbox(bbox.as_tuple()));
    }
    let cell = |v: u32, lo: u32, hi: u32| -> u8 {
        let off = v.saturating_sub(lo) as u64;
        ((3 * off) / (hi - lo) as u64).min(2) as u8
    };
    Ok(3 * cell(y, bbox.y_min, bbox.y_max) + cell(x, bbox.x_min, bbox.x_max))
}

/// Patch for one minutia, with its section and the image's source path.
pub fn extract_patch(
    image: &GrayImage,
    m: &Minutia,
    size: usize,
    bbox: BBox,
    label: PatchLabel,
) -> Result<Patch> {
    let values = extract_window(image, m.x, m.y, size)?;
    let section = assign_section(m, bbox)?;
    Patch::new(
        size,
        values,
        section,
        label,
        PatchOrigin::Minutia { x: m.x, y: m.y },
        image.source_path(),
    )
}

/// Split patches into the nine sections, preserving order within each.
pub fn group_by_section(patches: Vec<Patch>) -> [Vec<Patch>; SECTIONS] {
    let mut out: [Vec<Patch>; SECTIONS] = Default::default();
    for p in patches {
        out[p.section()].push(p);
    }
    out
}

pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub section: u8,
    pub label: PatchLabel,
    pub origin: PatchOrigin,
    pub source: String,
}

/// JSON sidecar describing a patch blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub version: u32,
    pub patch_size: usize,
    pub count: usize,
    pub blob_sha256: String,
    pub entries: Vec<CacheEntry>,
}

fn cache_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Write patches as `<stem>.bin` (little-endian `f32`, patch after patch)
/// and `<stem>.json`. All patches must share one size.
pub fn write_patch_cache(stem: &Path, patches: &[Patch]) -> Result<()> {
    let size = patches.first().map_or(0, |p| p.size());
    if patches.iter().any(|p| p.size() != size) {
        return Err(Error::Config("patch cache needs patches of one size".into()));
    }
    let mut blob = Vec::with_capacity(patches.len() * size * size * 4);
    for p in patches {
        for v in p.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CacheHeader {
        version: CACHE_VERSION,
        patch_size: size,
        count: patches.len(),
        blob_sha256: hex(&Sha256::digest(&blob)),
        entries: patches
            .iter()
            .map(|p| CacheEntry {
                section: p.section() as u8,
                label: p.label(),
                origin: p.origin().clone(),
                source: p.source().to_string(),
            })
            .collect(),
    };
    let (bin, json) = cache_paths(stem);
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_vec_pretty(&header).map_err(|e| Error::json(&json, e))?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn read_patch_cache(stem: &Path) -> Result<Vec<Patch>> {
    let (bin, json) = cache_paths(stem);
    let text = std::fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let header: CacheHeader = serde_json::from_slice(&text).map_err(|e| Error::json(&json, e))?;
    let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let bad = |reason: &str| Error::Checkpoint {
        path: bin.clone(),
        reason: reason.into(),
    };
    if header.version != CACHE_VERSION {
        return Err(bad("unsupported patch cache version"));
    }
    if hex(&Sha256::digest(&blob)) != header.blob_sha256 {
        return Err(bad("patch blob digest mismatch"));
    }
    let per = header.patch_size * header.patch_size;
    if header.entries.len() != header.count || blob.len() != header.count * per * 4 {
        return Err(bad("patch blob length does not match header"));
    }
    if header.count == 0 {
        return Ok(Vec::new());
    }
    header
        .entries
        .into_iter()
        .zip(blob.chunks_exact(per * 4))
        .map(|(e, chunk)| {
            let values = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Patch::new(header.patch_size, values, e.section, e.label, e.origin, e.source)
        })
        .collect()
}

/// Patches for every surviving minutia of one image. An image whose
/// foreground cannot be segmented yields no patches rather than an error.
pub fn image_patches(image: &GrayImage, label: PatchLabel, cfg: &RunConfig) -> Result<Vec<Patch>> {
    let ex = match extract_minutiae(image, cfg) {
        Ok(ex) => ex,
        Err(Error::BlankImage) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let bbox = ex.mask.bbox;
    if bbox.x_max <= bbox.x_min || bbox.y_max <= bbox.y_min {
        return Ok(Vec::new());
    }
    ex.minutiae
        .iter()
        .map(|m| extract_patch(image, m, cfg.patch_size, bbox, label))
        .collect()
}

/// Patches of a set of manifest records, keyed by image path.
#[derive(Clone, Debug, Default)]
pub struct PatchStore {
    entries: BTreeMap<String, (SampleRecord, Vec<Patch>)>,
}

impl PatchStore {
    /// Load and patch every record, in parallel on the current rayon pool.
    pub fn build<'a>(
        records: impl IntoIterator<Item = &'a SampleRecord>,
        cfg: &RunConfig,
    ) -> Result<Self> {
        let records: Vec<&SampleRecord> = records.into_iter().collect();
        let done: Vec<(SampleRecord, Vec<Patch>)> = records
            .par_iter()
            .map(|r| {
                let image = load_record(r)?;
                let label = match r.label {
                    Label::Live => PatchLabel::Live,
                    Label::Spoof => PatchLabel::Spoof,
                };
                Ok(((*r).clone(), image_patches(&image, label, cfg)?))
            })
            .collect::<Result<_>>()?;
        let mut store = PatchStore::default();
        for (r, p) in done {
            store.entries.insert(r.path.clone(), (r, p));
        }
        Ok(store)
    }

    /// Add records not yet present.
    pub fn extend<'a>(
        &mut self,
        records: impl IntoIterator<Item = &'a SampleRecord>,
        cfg: &RunConfig,
    ) -> Result<()> {
        let missing: Vec<&SampleRecord> = records
            .into_iter()
            .filter(|r| !self.entries.contains_key(&r.path))
            .collect();
        let more = PatchStore::build(missing, cfg)?;
        self.entries.extend(more.entries);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Option<&[Patch]> {
        self.entries.get(path).map(|(_, p)| p.as_slice())
    }

    /// Patches of the given records; every record must be in the store.
    pub fn patches_of<'a>(
        &self,
        records: impl IntoIterator<Item = &'a SampleRecord>,
    ) -> Result<Vec<Patch>> {
        let mut out = Vec::new();
        for r in records {
            let p = self.get(&r.path).ok_or_else(|| {
                Error::Protocol(format!("image {} was never patched", r.path))
            })?;
            out.extend_from_slice(p);
        }
        Ok(out)
    }

    pub fn records(&self) -> impl Iterator<Item = &SampleRecord> {
        self.entries.values().map(|(r, _)| r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::MinutiaKind;
    use proptest::prelude::*;

    fn at(x: u32, y: u32) -> Minutia {
        Minutia::new(x, y, 0.0, 50, MinutiaKind::Ending)
    }

    #[test]
    fn centred_window_needs_no_padding() {
        let img = GrayImage::from_fn(300, 300, |x, y| ((x * 7 + y * 13) % 256) as u8);
        let v = extract_window(&img, 150, 150, 96).unwrap();
        assert_eq!(v.len(), 96 * 96);
        for r in 0..96 {
            for c in 0..96 {
                assert_eq!(v[r * 96 + c], normalize_pixel(img.get(102 + c as u32, 102 + r as u32)));
            }
        }
    }

    #[test]
    fn corner_window_is_reflect_padded() {
        let img = GrayImage::from_fn(100, 100, |x, y| (x + 2 * y) as u8);
        let v = extract_window(&img, 0, 0, 96).unwrap();
        assert_eq!(v.len(), 96 * 96);
        assert!(v.iter().all(|v| (-1.0..=1.0).contains(v)));
        // Row 48 is image row 0; column 47 is image column -1 -> 1.
        assert_eq!(v[48 * 96 + 47], normalize_pixel(img.get(1, 0)));
        assert_eq!(v[47 * 96 + 48], normalize_pixel(img.get(0, 1)));
    }

    #[test]
    fn constant_image_normalizes_to_expected_value() {
        let img = GrayImage::from_fn(120, 120, |_, _| 128);
        let v = extract_window(&img, 60, 60, 96).unwrap();
        assert!(v.iter().all(|&v| (v - (128.0 / 127.5 - 1.0)).abs() < 1e-6));
        assert!((v[0] - 0.00392).abs() < 1e-5);
    }

    #[test]
    fn bad_sizes_are_config_errors() {
        let img = GrayImage::from_fn(40, 30, |_, _| 0);
        assert!(matches!(extract_window(&img, 5, 5, 0), Err(Error::Config(_))));
        assert!(matches!(extract_window(&img, 5, 5, 61), Err(Error::Config(_))));
        assert!(extract_window(&img, 5, 5, 60).is_ok());
    }

    #[test]
    fn section_examples() {
        let b = BBox::new(0, 0, 299, 299);
        assert_eq!(assign_section(&at(0, 0), b).unwrap(), 0);
        assert_eq!(assign_section(&at(299, 299), b).unwrap(), 8);
        assert_eq!(assign_section(&at(150, 40), b).unwrap(), 1);
        assert!(matches!(
            assign_section(&at(5, 5), BBox::new(5, 0, 5, 10)),
            Err(Error::DegenerateBbox(_))
        ));
    }

    #[test]
    fn patch_carries_section_and_origin() {
        let img = GrayImage::from_fn(90, 90, |x, _| x as u8).with_provenance("s", "a.png");
        let p = extract_patch(&img, &at(80, 10), 32, BBox::new(0, 0, 89, 89), PatchLabel::Spoof).unwrap();
        assert_eq!(p.section(), 2);
        assert_eq!(p.origin(), &PatchOrigin::Minutia { x: 80, y: 10 });
        assert_eq!(p.source(), "a.png");
    }

    fn patch(section: u8, tag: f32) -> Patch {
        Patch::new(2, vec![tag; 4], section, PatchLabel::Live, PatchOrigin::Synthetic, "").unwrap()
    }

    #[test]
    fn grouping_examples() {
        let g = group_by_section((0..9).map(|s| patch(s, 0.0)).collect());
        assert!(g.iter().enumerate().all(|(i, l)| l.len() == 1 && l[0].section() == i));
        assert!(group_by_section(Vec::new()).iter().all(|l| l.is_empty()));
    }

    #[test]
    fn cache_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("img0");
        let ps = vec![patch(3, 0.5), patch(7, -0.25)];
        write_patch_cache(&stem, &ps).unwrap();
        assert_eq!(read_patch_cache(&stem).unwrap(), ps);
        write_patch_cache(&stem, &[]).unwrap();
        assert!(read_patch_cache(&stem).unwrap().is_empty());
        write_patch_cache(&stem, &ps).unwrap();
        let bin = stem.with_extension("bin");
        let mut b = std::fs::read(&bin).unwrap();
        b[0] ^= 1;
        std::fs::write(&bin, b).unwrap();
        assert!(read_patch_cache(&stem).is_err());
    }

    /// Which of the nine closed-at-the-far-edge rectangles holds the point,
    /// by testing each rectangle in turn with exact integer comparisons.
    fn rectangle_oracle(x: u32, y: u32, b: BBox) -> u8 {
        let (sx, sy) = ((b.x_max - b.x_min) as u64, (b.y_max - b.y_min) as u64);
        let (dx, dy) = ((x - b.x_min) as u64, (y - b.y_min) as u64);
        for row in 0..3u64 {
            for col in 0..3u64 {
                // [lo, hi) in units of span/3, scaled by 3.
                let in_x = 3 * dx >= col * sx && (3 * dx < (col + 1) * sx || col == 2);
                let in_y = 3 * dy >= row * sy && (3 * dy < (row + 1) * sy || row == 2);
                if in_x && in_y {
                    return (3 * row + col) as u8;
                }
            }
        }
        unreachable!("point outside bbox")
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn section_matches_rectangle_oracle(
            x0 in 0u32..500, y0 in 0u32..500, sx in 1u32..500, sy in 1u32..500,
            fx in 0.0f64..=1.0, fy in 0.0f64..=1.0, edge in 0u8..4,
        ) {
            let b = BBox::new(x0, y0, x0 + sx, y0 + sy);
            let mut x = x0 + (fx * sx as f64).round() as u32;
            let mut y = y0 + (fy * sy as f64).round() as u32;
            // Force some exact boundary points.
            match edge {
                1 => x = x0 + sx,
                2 => y = y0 + sy / 3,
                3 => { x = x0 + (2 * sx).div_ceil(3); y = y0; }
                _ => {}
            }
            prop_assert_eq!(section_of(x, y, b).unwrap(), rectangle_oracle(x, y, b));
        }
    }

    proptest! {
        #[test]
        fn windows_are_always_full_and_bounded(w in 8u32..60, h in 8u32..60, fx in 0.0f64..1.0, fy in 0.0f64..1.0, seed in any::<u64>()) {
            let img = GrayImage::from_fn(w, h, |x, y| (seed.wrapping_mul(x as u64 * 31 + y as u64 + 1) >> 56) as u8);
            let size = 2 * w.min(h) as usize;
            let (cx, cy) = ((fx * w as f64) as u32, (fy * h as f64) as u32);
            let v = extract_window(&img, cx, cy, size).unwrap();
            prop_assert_eq!(v.len(), size * size);
            prop_assert!(v.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn grouping_is_a_partition(sections in proptest::collection::vec(0u8..9, 0..100)) {
            let ps: Vec<Patch> = sections.iter().enumerate().map(|(i, &s)| patch(s, i as f32 / 100.0)).collect();
            let groups = group_by_section(ps.clone());
            prop_assert_eq!(groups.iter().map(|g| g.len()).sum::<usize>(), ps.len());
            let mut seen: Vec<f32> = groups.iter().flatten().map(|p| p.values()[0]).collect();
            seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut want: Vec<f32> = ps.iter().map(|p| p.values()[0]).collect();
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assert_eq!(seen, want);
            for (i, g) in groups.iter().enumerate() {
                prop_assert!(g.iter().all(|p| p.section() == i));
                let tags: Vec<f32> = g.iter().map(|p| p.values()[0]).collect();
                prop_assert!(tags.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
