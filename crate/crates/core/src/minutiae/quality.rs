use crate::domain::{GrayImage, Minutia};

/// Side of the square window used for quality scoring.
pub const QUALITY_WINDOW: i64 = 16;

/// Standard deviation at which the contrast factor saturates at 1.
pub const CONTRAST_SCALE: f64 = 64.0;

/// Contrast and coherence factors of the window centred on `(x, y)`.
///
/// Contrast is the intensity standard deviation over `CONTRAST_SCALE`,
/// capped at 1. Coherence is the anisotropy of the gradient structure
/// tensor, `sqrt((Gxx - Gyy)^2 + 4 Gxy^2) / (Gxx + Gyy)`, in [0, 1].
pub fn quality_factors(image: &GrayImage, x: u32, y: u32) -> (f64, f64) {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let half = QUALITY_WINDOW / 2;
    let x0 = (x as i64 - half).max(0);
    let y0 = (y as i64 - half).max(0);
    let x1 = (x as i64 + half).min(w);
    let y1 = (y as i64 + half).min(h);
    let px = |x: i64, y: i64| image.get(x.clamp(0, w - 1) as u32, y.clamp(0, h - 1) as u32) as f64;

    let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
    let (mut gxx, mut gyy, mut gxy) = (0.0, 0.0, 0.0);
    for yy in y0..y1 {
        for xx in x0..x1 {
            let v = px(xx, yy);
            s += v;
            s2 += v * v;
            n += 1.0;
            // Sobel gradients with edge replication.
            let gx = (px(xx + 1, yy - 1) + 2.0 * px(xx + 1, yy) + px(xx + 1, yy + 1))
                - (px(xx - 1, yy - 1) + 2.0 * px(xx - 1, yy) + px(xx - 1, yy + 1));
            let gy = (px(xx - 1, yy + 1) + 2.0 * px(xx, yy + 1) + px(xx + 1, yy + 1))
                - (px(xx - 1, yy - 1) + 2.0 * px(xx, yy - 1) + px(xx + 1, yy - 1));
            gxx += gx * gx;
            gyy += gy * gy;
            gxy += gx * gy;
        }
    }
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let mean = s / n;
    let std = (s2 / n - mean * mean).max(0.0).sqrt();
    let contrast = (std / CONTRAST_SCALE).min(1.0);
    let energy = gxx + gyy;
    let coherence = if energy > 0.0 {
        (((gxx - gyy).powi(2) + 4.0 * gxy * gxy).sqrt() / energy).min(1.0)
    } else {
        0.0
    };
    (contrast, coherence)
}

/// `round(100 * contrast * coherence)`.
pub fn score_quality(m: &Minutia, image: &GrayImage) -> u8 {
    let (c, k) = quality_factors(image, m.x, m.y);
    (100.0 * c * k).round().clamp(0.0, 100.0) as u8
}

/// Keep minutiae with `quality >= threshold`, preserving order.
pub fn filter_by_quality(minutiae: &[Minutia], threshold: u8) -> Vec<Minutia> {
    minutiae.iter().filter(|m| m.quality >= threshold).cloned().collect()
}

/// Drop the lower-quality member of every pair closer than `min_distance`.
/// Ties favour the earlier minutia. Survivors keep their input order.
pub fn suppress_close_pairs(minutiae: &[Minutia], min_distance: f64) -> Vec<Minutia> {
    let mut order: Vec<usize> = (0..minutiae.len()).collect();
    order.sort_by(|&a, &b| minutiae[b].quality.cmp(&minutiae[a].quality));
    let mut kept: Vec<usize> = Vec::new();
    let d2 = min_distance * min_distance;
    for i in order {
        let m = &minutiae[i];
        let clash = kept.iter().any(|&j| {
            let (dx, dy) = (m.x as f64 - minutiae[j].x as f64, m.y as f64 - minutiae[j].y as f64);
            dx * dx + dy * dy < d2
        });
        if !clash {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| minutiae[i].clone()).collect()
}
