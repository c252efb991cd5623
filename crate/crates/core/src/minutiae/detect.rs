use super::segment::BBox;
use super::thinning::BinaryRaster;
use crate::domain::{Minutia, MinutiaKind};

/// Half the number of 0/1 changes around the 8-neighbour cycle.
pub fn crossing_number(skeleton: &BinaryRaster, x: u32, y: u32) -> u32 {
    let n = skeleton.neighbours(x, y);
    let changes: u32 = (0..8).map(|k| (n[k] != n[(k + 1) % 8]) as u32).sum();
    changes / 2
}

/// Half-width of the window used to estimate ridge direction.
pub const DIRECTION_RADIUS: i64 = 4;

/// Ridge direction at a skeleton pixel, in degrees counter-clockwise from
/// +x with y pointing up. The principal axis of nearby skeleton pixels
/// gives the line; the sign is chosen to point away from where the ridge
/// mass lies, so an ending points out of its ridge.
pub fn ridge_direction(skeleton: &BinaryRaster, x: u32, y: u32) -> f64 {
    let (mut sxx, mut syy, mut sxy, mut mx, mut my, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in -DIRECTION_RADIUS..=DIRECTION_RADIUS {
        for dx in -DIRECTION_RADIUS..=DIRECTION_RADIUS {
            if (dx, dy) == (0, 0) || !skeleton.get(x as i64 + dx, y as i64 + dy) {
                continue;
            }
            // Flip y so angles are in the usual mathematical orientation.
            let (fx, fy) = (dx as f64, -dy as f64);
            sxx += fx * fx;
            syy += fy * fy;
            sxy += fx * fy;
            mx += fx;
            my += fy;
            n += 1.0;
        }
    }
    if n == 0.0 {
        return 0.0;
    }
    let phi = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (ux, uy) = (phi.cos(), phi.sin());
    let toward_mass = ux * mx + uy * my;
    let angle = if toward_mass > 0.0 { phi + std::f64::consts::PI } else { phi };
    crate::domain::normalize_degrees(angle.to_degrees())
}

/// Every skeleton pixel with crossing number 1 (ending) or 3
/// (bifurcation), scanned row by row. Quality is left at 0.
pub fn detect_minutiae(skeleton: &BinaryRaster) -> Vec<Minutia> {
    let mut out = Vec::new();
    for y in 0..skeleton.height {
        for x in 0..skeleton.width {
            if !skeleton.get(x as i64, y as i64) {
                continue;
            }
            let kind = match crossing_number(skeleton, x, y) {
                1 => MinutiaKind::Ending,
                3 => MinutiaKind::Bifurcation,
                _ => continue,
            };
            out.push(Minutia::new(x, y, ridge_direction(skeleton, x, y), 0, kind));
        }
    }
    out
}

/// Mark minutiae closer than `patch_size / 2` to any edge of `bbox`.
pub fn flag_border(minutiae: &mut [Minutia], bbox: BBox, patch_size: usize) {
    let half = (patch_size / 2) as u32;
    for m in minutiae {
        m.border = m.x < bbox.x_min + half
            || m.y < bbox.y_min + half
            || m.x + half > bbox.x_max
            || m.y + half > bbox.y_max;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raster(w: u32, h: u32, on: &[(u32, u32)]) -> BinaryRaster {
        BinaryRaster::from_fn(w, h, |x, y| on.contains(&(x, y)))
    }

    #[test]
    fn isolated_line_end_is_an_ending() {
        let s = raster(7, 7, &[(3, 3), (4, 3), (5, 3)]);
        assert_eq!(crossing_number(&s, 3, 3), 1);
        let m = detect_minutiae(&s);
        assert!(m.iter().any(|m| (m.x, m.y, m.kind) == (3, 3, MinutiaKind::Ending)));
    }

    #[test]
    fn y_junction_is_a_bifurcation() {
        let s = raster(7, 7, &[(3, 3), (3, 2), (2, 4), (4, 4)]);
        assert_eq!(crossing_number(&s, 3, 3), 3);
        let found: Vec<_> = detect_minutiae(&s).into_iter().filter(|m| (m.x, m.y) == (3, 3)).collect();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].kind, MinutiaKind::Bifurcation);
    }

    #[test]
    fn straight_interior_pixel_is_not_reported() {
        let s = raster(7, 7, &[(2, 3), (3, 3), (4, 3)]);
        assert_eq!(crossing_number(&s, 3, 3), 2);
        assert!(detect_minutiae(&s).iter().all(|m| (m.x, m.y) != (3, 3)));
    }

    #[test]
    fn ending_points_away_from_its_ridge() {
        // Ridge runs to the right of the ending: the ending faces left.
        let s = BinaryRaster::from_fn(20, 9, |x, y| y == 4 && (5..18).contains(&x));
        let m = detect_minutiae(&s);
        let left = m.iter().find(|m| m.x == 5).unwrap();
        assert!((left.theta - 180.0).abs() < 1e-9, "{}", left.theta);
        let right = m.iter().find(|m| m.x == 17).unwrap();
        assert!(right.theta.abs() < 1e-9 || (right.theta - 360.0).abs() < 1e-9);
        // Vertical ridge going down from the ending: it faces up (90 deg).
        let v = BinaryRaster::from_fn(9, 20, |x, y| x == 4 && (3..15).contains(&y));
        let top = detect_minutiae(&v).into_iter().find(|m| m.y == 3).unwrap();
        assert!((top.theta - 90.0).abs() < 1e-9, "{}", top.theta);
    }

    #[test]
    fn border_flag_uses_half_patch_margin() {
        let mut m = vec![
            Minutia::new(10, 50, 0.0, 50, MinutiaKind::Ending),
            Minutia::new(50, 50, 0.0, 50, MinutiaKind::Ending),
            Minutia::new(50, 95, 0.0, 50, MinutiaKind::Ending),
        ];
        flag_border(&mut m, BBox::new(0, 0, 99, 99), 32);
        assert_eq!(m.iter().map(|m| m.border).collect::<Vec<_>>(), vec![true, false, true]);
    }

    /// Independent crossing-number scan: walk the cycle of offsets
    /// explicitly and count transitions.
    fn oracle(bits: &[bool], w: usize, h: usize) -> Vec<(u32, u32, MinutiaKind)> {
        const CYCLE: [(i64, i64); 9] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1)];
        let at = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && bits[y as usize * w + x as usize];
        let mut out = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if !at(x, y) {
                    continue;
                }
                let mut sum = 0;
                for k in 0..8 {
                    let a = at(x + CYCLE[k].0, y + CYCLE[k].1) as i32;
                    let b = at(x + CYCLE[k + 1].0, y + CYCLE[k + 1].1) as i32;
                    sum += (a - b).abs();
                }
                match sum / 2 {
                    1 => out.push((x as u32, y as u32, MinutiaKind::Ending)),
                    3 => out.push((x as u32, y as u32, MinutiaKind::Bifurcation)),
                    _ => {}
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn matches_brute_force_crossing_number_scan(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let s = BinaryRaster { width: 8, height: 8, bits: bits.clone() };
            let got: Vec<_> = detect_minutiae(&s).iter().map(|m| (m.x, m.y, m.kind)).collect();
            prop_assert_eq!(&got, &oracle(&bits, 8, 8));
            for m in detect_minutiae(&s) {
                prop_assert!(s.get(m.x as i64, m.y as i64));
            }
        }
    }
}
