use serde::{Deserialize, Serialize};

use crate::domain::GrayImage;
use crate::error::{Error, Result};

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        BBox::new(0, 0, width - 1, height - 1)
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn as_tuple(&self) -> (u32, u32, u32, u32) {
        (self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationMask {
    pub width: u32,
    pub height: u32,
    pub foreground: Vec<bool>,
    pub bbox: BBox,
}

impl SegmentationMask {
    /// Everything is foreground.
    pub fn full(width: u32, height: u32) -> Self {
        SegmentationMask {
            width,
            height,
            foreground: vec![true; width as usize * height as usize],
            bbox: BBox::full(width, height),
        }
    }

    pub fn is_foreground(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.foreground[y as usize * self.width as usize + x as usize]
    }

    /// Chebyshev distance from `(x, y)` to the nearest background pixel or
    /// position outside the image, capped at `cap`.
    pub fn depth(&self, x: u32, y: u32, cap: u32) -> u32 {
        for r in 0..=cap {
            let x0 = x as i64 - r as i64;
            let y0 = y as i64 - r as i64;
            let x1 = x as i64 + r as i64;
            let y1 = y as i64 + r as i64;
            if x0 < 0 || y0 < 0 || x1 >= self.width as i64 || y1 >= self.height as i64 {
                return r;
            }
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if (yy == y0 || yy == y1 || xx == x0 || xx == x1)
                        && !self.is_foreground(xx as u32, yy as u32)
                    {
                        return r;
                    }
                }
            }
        }
        cap
    }
}

/// Per-block intensity variance, row-major over the block grid. Edge blocks
/// cover whatever pixels remain.
pub fn block_variances(image: &GrayImage, block: usize) -> (usize, usize, Vec<f64>) {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let bw = w.div_ceil(block);
    let bh = h.div_ceil(block);
    let mut out = Vec::with_capacity(bw * bh);
    for by in 0..bh {
        for bx in 0..bw {
            let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
            for y in by * block..((by + 1) * block).min(h) {
                for x in bx * block..((bx + 1) * block).min(w) {
                    let v = image.pixels()[y * w + x] as f64;
                    s += v;
                    s2 += v * v;
                    n += 1.0;
                }
            }
            let mean = s / n;
            out.push((s2 / n - mean * mean).max(0.0));
        }
    }
    (bw, bh, out)
}

/// Foreground = blocks whose intensity variance reaches `var_threshold`,
/// restricted to the largest 4-connected group of such blocks.
pub fn segment(image: &GrayImage, block: usize, var_threshold: f64) -> Result<SegmentationMask> {
    if block == 0 {
        return Err(Error::Config("segmentation block size must be positive".into()));
    }
    let (bw, bh, vars) = block_variances(image, block);
    let pass: Vec<bool> = vars.iter().map(|&v| v >= var_threshold).collect();
    let keep = largest_component(&pass, bw, bh);
    if !keep.iter().any(|&k| k) {
        return Err(Error::BlankImage);
    }
    let (w, h) = (image.width(), image.height());
    let mut foreground = vec![false; w as usize * h as usize];
    let (mut x_min, mut y_min, mut x_max, mut y_max) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let b = (y as usize / block) * bw + x as usize / block;
            if keep[b] {
                foreground[y as usize * w as usize + x as usize] = true;
                x_min = x_min.min(x);
                y_min = y_min.min(y);
                x_max = x_max.max(x);
                y_max = y_max.max(y);
            }
        }
    }
    Ok(SegmentationMask {
        width: w,
        height: h,
        foreground,
        bbox: BBox::new(x_min, y_min, x_max, y_max),
    })
}

fn largest_component(pass: &[bool], bw: usize, bh: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; pass.len()];
    let mut best = (0usize, usize::MAX);
    let mut next = 0;
    for start in 0..pass.len() {
        if !pass[start] || label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % bw, i / bw);
            let mut visit = |j: usize| {
                if pass[j] && label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < bw {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - bw);
            }
            if y + 1 < bh {
                visit(i + bw);
            }
        }
        if size > best.0 {
            best = (size, next);
        }
        next += 1;
    }
    if best.0 == 0 {
        return vec![false; pass.len()];
    }
    label.iter().map(|&l| l == best.1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grating(x: u32, y: u32) -> u8 {
        let _ = y;
        (127.5 + 127.0 * (x as f64 * std::f64::consts::TAU / 8.0).sin()) as u8
    }

    #[test]
    fn uniform_image_is_blank() {
        let img = GrayImage::from_fn(64, 64, |_, _| 128);
        assert!(matches!(segment(&img, 16, 100.0), Err(Error::BlankImage)));
    }

    #[test]
    fn full_frame_grating_covers_the_image() {
        let img = GrayImage::from_fn(100, 80, grating);
        let m = segment(&img, 16, 100.0).unwrap();
        assert_eq!(m.bbox, BBox::full(100, 80));
        assert!(m.foreground.iter().all(|&f| f));
    }

    #[test]
    fn ridges_in_left_half_give_left_bbox() {
        let (w, h, block) = (128u32, 96u32, 16usize);
        let img = GrayImage::from_fn(w, h, |x, y| if x < w / 2 { grating(x, y) } else { 200 });
        let img = &img;
        // Brute-force: which blocks have variance above threshold?
        let mut max_fg_x = 0;
        for by in 0..(h as usize).div_ceil(block) {
            for bx in 0..(w as usize).div_ceil(block) {
                let vals: Vec<f64> = (by * block..((by + 1) * block).min(h as usize))
                    .flat_map(|y| {
                        (bx * block..((bx + 1) * block).min(w as usize))
                            .map(move |x| img.get(x as u32, y as u32) as f64)
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                if var >= 100.0 {
                    max_fg_x = max_fg_x.max((bx + 1) * block - 1);
                }
            }
        }
        let m = segment(img, block, 100.0).unwrap();
        assert_eq!(m.bbox.x_max as usize, max_fg_x);
        assert!(m.bbox.x_max < w / 2 + block as u32);
        assert_eq!(m.bbox.x_min, 0);
    }

    #[test]
    fn keeps_only_largest_component() {
        let img = GrayImage::from_fn(96, 96, |x, y| {
            if (x < 48 && y < 96) || (x >= 80 && y < 16) {
                grating(x, y)
            } else {
                128
            }
        });
        let m = segment(&img, 16, 100.0).unwrap();
        assert_eq!(m.bbox, BBox::new(0, 0, 47, 95));
    }

    #[test]
    fn depth_measures_distance_to_background() {
        let m = SegmentationMask::full(10, 10);
        assert_eq!(m.depth(0, 5, 4), 1);
        assert_eq!(m.depth(5, 5, 10), 5);
        assert_eq!(m.depth(5, 5, 2), 2);
    }
}
