use serde::{Deserialize, Serialize};

use super::segment::{BBox, SegmentationMask};
use crate::domain::GrayImage;
use crate::error::{Error, Result};

/// Boolean raster, row-major. Reads outside the raster are `false`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryRaster {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl BinaryRaster {
    pub fn new(width: u32, height: u32) -> Self {
        BinaryRaster {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut r = BinaryRaster::new(width, height);
        for y in 0..height {
            for x in 0..width {
                r.set(x, y, f(x, y));
            }
        }
        r
    }

    pub fn get(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && x < self.width as i64
            && y < self.height as i64
            && self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight box around the set pixels, `None` when empty.
    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x as i64, y as i64) {
                    b = Some(match b {
                        None => BBox::new(x, y, x, y),
                        Some(b) => BBox::new(b.x_min.min(x), b.y_min.min(y), b.x_max.max(x), b.y_max.max(y)),
                    });
                }
            }
        }
        b
    }

    /// The 8 neighbours clockwise from north: P2..P9 in the usual thinning
    /// notation.
    pub fn neighbours(&self, x: u32, y: u32) -> [bool; 8] {
        let (x, y) = (x as i64, y as i64);
        [
            self.get(x, y - 1),
            self.get(x + 1, y - 1),
            self.get(x + 1, y),
            self.get(x + 1, y + 1),
            self.get(x, y + 1),
            self.get(x - 1, y + 1),
            self.get(x - 1, y),
            self.get(x - 1, y - 1),
        ]
    }
}

/// Half-width of the local-mean window used for binarization.
pub const BINARIZE_RADIUS: i64 = 7;

/// Dark pixels below their local mean become ridge pixels. Only pixels
/// inside the mask are considered.
pub fn binarize(image: &GrayImage, mask: &SegmentationMask) -> Result<BinaryRaster> {
    let (w, h) = (image.width(), image.height());
    if mask.width != w || mask.height != h {
        return Err(Error::Config(format!(
            "mask is {}x{} but image is {w}x{h}",
            mask.width, mask.height
        )));
    }
    // Summed-area table with a zero row and column in front.
    let (wi, hi) = (w as usize + 1, h as usize + 1);
    let mut sat = vec![0u64; wi * hi];
    for y in 0..h as usize {
        let mut row = 0u64;
        for x in 0..w as usize {
            row += image.pixels()[y * w as usize + x] as u64;
            sat[(y + 1) * wi + x + 1] = sat[y * wi + x + 1] + row;
        }
    }
    let mut out = BinaryRaster::new(w, h);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !mask.is_foreground(x as u32, y as u32) {
                continue;
            }
            let x0 = (x - BINARIZE_RADIUS).max(0) as usize;
            let y0 = (y - BINARIZE_RADIUS).max(0) as usize;
            let x1 = (x + BINARIZE_RADIUS + 1).min(w as i64) as usize;
            let y1 = (y + BINARIZE_RADIUS + 1).min(h as i64) as usize;
            let sum = sat[y1 * wi + x1] + sat[y0 * wi + x0] - sat[y0 * wi + x1] - sat[y1 * wi + x0];
            let n = ((x1 - x0) * (y1 - y0)) as u64;
            let v = image.get(x as u32, y as u32) as u64;
            if v * n < sum {
                out.set(x as u32, y as u32, true);
            }
        }
    }
    Ok(out)
}

/// Two-subiteration thinning (Zhang and Suen) until no pixel changes.
pub fn thin(raster: &BinaryRaster) -> BinaryRaster {
    let mut img = raster.clone();
    let mut doomed = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            doomed.clear();
            for y in 0..img.height {
                for x in 0..img.width {
                    if !img.get(x as i64, y as i64) {
                        continue;
                    }
                    let n = img.neighbours(x, y);
                    let b = n.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&k| !n[k] && n[(k + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let [p2, _, p4, _, p6, _, p8, _] = n;
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        doomed.push((x, y));
                    }
                }
            }
            for &(x, y) in &doomed {
                img.set(x, y, false);
            }
            changed |= !doomed.is_empty();
        }
        if !changed {
            return img;
        }
    }
}

pub fn binarize_and_thin(image: &GrayImage, mask: &SegmentationMask) -> Result<BinaryRaster> {
    Ok(thin(&binarize(image, mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bar(width: u32) -> BinaryRaster {
        BinaryRaster::from_fn(50, 25, |x, y| (5..45).contains(&x) && (10..10 + width).contains(&y))
    }

    #[test]
    fn five_pixel_bar_thins_to_a_single_line() {
        let s = thin(&bar(5));
        let mut rows = std::collections::BTreeSet::new();
        for x in 10..40 {
            let col: Vec<u32> = (0..25).filter(|&y| s.get(x, y as i64)).collect();
            assert_eq!(col.len(), 1, "column {x}: {col:?}");
            rows.insert(col[0]);
        }
        assert_eq!(rows.len(), 1);
        assert!(s.bits.iter().zip(&bar(5).bits).all(|(&t, &o)| !t || o));
    }

    #[test]
    fn one_pixel_line_is_a_fixed_point() {
        let line = bar(1);
        assert_eq!(thin(&line), line);
    }

    #[test]
    fn thinning_is_idempotent() {
        let blob = BinaryRaster::from_fn(30, 30, |x, y| {
            let (dx, dy) = (x as f64 - 15.0, y as f64 - 15.0);
            (dx * dx + dy * dy).sqrt() < 9.0 || (x > 20 && y % 7 < 3)
        });
        let once = thin(&blob);
        assert_eq!(thin(&once), once);
    }

    #[test]
    fn background_outside_mask_stays_empty() {
        let img = GrayImage::from_fn(40, 40, |x, _| if x % 6 < 3 { 30 } else { 220 });
        let mut mask = SegmentationMask::full(40, 40);
        for y in 0..40 {
            for x in 20..40 {
                mask.foreground[y * 40 + x] = false;
            }
        }
        let s = binarize_and_thin(&img, &mask).unwrap();
        for y in 0..40 {
            for x in 20..40 {
                assert!(!s.get(x, y));
            }
        }
        assert!(s.count() > 0);
    }

    #[test]
    fn dark_ridges_become_foreground() {
        let img = GrayImage::from_fn(30, 30, |x, _| if x % 6 < 2 { 20 } else { 230 });
        let b = binarize(&img, &SegmentationMask::full(30, 30)).unwrap();
        assert!(b.get(12, 15));
        assert!(!b.get(15, 15));
    }
}
