//! Minutiae extraction: segmentation, binarization, thinning, crossing
//! numbers and quality scoring, plus an importer for mindtct-style files.
//!
//! Quality here is contrast times coherence in a 16×16 window. It is a
//! stand-in for the NBIS quality value, so a threshold tuned for NBIS
//! (such as 15) carries over only roughly; recalibrate on real data.

mod detect;
mod mindtct;
mod quality;
mod segment;
mod thinning;

use std::path::Path;

pub use detect::{crossing_number, detect_minutiae, flag_border, ridge_direction};
pub use mindtct::{import_mindtct, parse_mindtct};
pub use quality::{filter_by_quality, quality_factors, score_quality, suppress_close_pairs};
pub use segment::{block_variances, segment, BBox, SegmentationMask};
pub use thinning::{binarize, binarize_and_thin, thin, BinaryRaster};

use crate::config::RunConfig;
use crate::domain::{GrayImage, Minutia, MinutiaKind};
use crate::error::{Error, Result};

/// Everything the built-in extractor produces for one image.
#[derive(Clone, Debug)]
pub struct Extraction {
    pub mask: SegmentationMask,
    pub skeleton: BinaryRaster,
    pub minutiae: Vec<Minutia>,
}

/// Full extraction pipeline.
///
/// Minutiae within half a segmentation block of the mask boundary are
/// dropped first: they are ridges cut by the mask, not real endings. The
/// rest are scored, filtered at `quality_threshold`, thinned out to
/// `min_minutia_distance`, flagged if near the skeleton border, and capped
/// at `max_patches_per_image` (highest quality first) when that is set.
pub fn extract_minutiae(image: &GrayImage, cfg: &RunConfig) -> Result<Extraction> {
    let mask = segment(image, cfg.segment_block, cfg.segment_var_threshold)?;
    let skeleton = binarize_and_thin(image, &mask)?;
    let margin = (cfg.segment_block / 2) as u32;
    let mut found: Vec<Minutia> = detect_minutiae(&skeleton)
        .into_iter()
        .filter(|m| mask.depth(m.x, m.y, margin) >= margin)
        .collect();
    for m in &mut found {
        m.quality = score_quality(m, image);
    }
    let found = filter_by_quality(&found, cfg.quality_threshold);
    let mut found = suppress_close_pairs(&found, cfg.min_minutia_distance);
    if let Some(b) = skeleton.bbox() {
        flag_border(&mut found, b, cfg.patch_size);
    }
    if cfg.max_patches_per_image > 0 && found.len() > cfg.max_patches_per_image {
        let mut idx: Vec<usize> = (0..found.len()).collect();
        idx.sort_by(|&a, &b| found[b].quality.cmp(&found[a].quality));
        idx.truncate(cfg.max_patches_per_image);
        idx.sort_unstable();
        found = idx.into_iter().map(|i| found[i].clone()).collect();
    }
    Ok(Extraction {
        mask,
        skeleton,
        minutiae: found,
    })
}

/// Draw minutiae over the image: endings red, bifurcations blue, each a
/// small square with a tick along its direction.
pub fn render_overlay(image: &GrayImage, minutiae: &[Minutia]) -> image::RgbImage {
    let (w, h) = (image.width(), image.height());
    let mut out = image::RgbImage::from_fn(w, h, |x, y| {
        let v = image.get(x, y);
        image::Rgb([v, v, v])
    });
    let mut put = |x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
            out.put_pixel(x as u32, y as u32, image::Rgb(c));
        }
    };
    for m in minutiae {
        let c = match m.kind {
            MinutiaKind::Ending => [220, 30, 30],
            MinutiaKind::Bifurcation => [30, 60, 220],
        };
        let (x, y) = (m.x as i64, m.y as i64);
        for d in -3..=3 {
            put(x + d, y - 3, c);
            put(x + d, y + 3, c);
            put(x - 3, y + d, c);
            put(x + 3, y + d, c);
        }
        let t = m.theta.to_radians();
        for r in 4..=10 {
            let r = r as f64;
            put(x + (r * t.cos()).round() as i64, y - (r * t.sin()).round() as i64, c);
        }
    }
    out
}

pub fn save_overlay(path: &Path, image: &GrayImage, minutiae: &[Minutia]) -> Result<()> {
    render_overlay(image, minutiae).save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: format!("cannot write overlay: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Concentric-ish ridge pattern with a break so endings exist.
    fn print_like(w: u32, h: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - w as f64 / 2.0, y as f64 - h as f64 / 2.0);
            let r = (dx * dx + dy * dy).sqrt();
            let broken = dx.abs() < 6.0 && dy < 0.0;
            let v = if broken { 1.0 } else { (r * std::f64::consts::TAU / 9.0).sin() };
            (128.0 + 110.0 * v) as u8
        })
    }

    #[test]
    fn pipeline_finds_quality_filtered_minutiae_on_skeleton() {
        let img = print_like(160, 160);
        let cfg = RunConfig {
            patch_size: 32,
            ..Default::default()
        };
        let ex = extract_minutiae(&img, &cfg).unwrap();
        assert!(!ex.minutiae.is_empty());
        for m in &ex.minutiae {
            assert!(ex.skeleton.get(m.x as i64, m.y as i64));
            assert!(m.quality >= cfg.quality_threshold);
        }
        for (i, a) in ex.minutiae.iter().enumerate() {
            for b in &ex.minutiae[i + 1..] {
                let d2 = (a.x as f64 - b.x as f64).powi(2) + (a.y as f64 - b.y as f64).powi(2);
                assert!(d2 >= 64.0);
            }
        }
    }

    #[test]
    fn cap_keeps_the_best() {
        let img = print_like(160, 160);
        let base = RunConfig {
            patch_size: 32,
            ..Default::default()
        };
        let all = extract_minutiae(&img, &base).unwrap().minutiae;
        assert!(all.len() > 3);
        let capped = extract_minutiae(
            &img,
            &RunConfig {
                max_patches_per_image: 3,
                ..base
            },
        )
        .unwrap()
        .minutiae;
        assert_eq!(capped.len(), 3);
        let mut q: Vec<u8> = all.iter().map(|m| m.quality).collect();
        q.sort_unstable_by(|a, b| b.cmp(a));
        assert!(capped.iter().all(|m| m.quality >= q[2]));
    }

    #[test]
    fn overlay_marks_minutiae() {
        let img = GrayImage::from_fn(40, 40, |_, _| 128);
        let m = [Minutia::new(20, 20, 0.0, 50, MinutiaKind::Ending)];
        let o = render_overlay(&img, &m);
        assert_eq!(o.get_pixel(23, 20).0, [220, 30, 30]);
        assert_eq!(o.get_pixel(0, 0).0, [128, 128, 128]);
        let dir = tempfile::tempdir().unwrap();
        save_overlay(&dir.path().join("o.png"), &img, &m).unwrap();
    }
}
