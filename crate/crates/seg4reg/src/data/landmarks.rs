//! Landmark geometry: rasterizing the 17 vertebra quadrilaterals into a
//! binary spine mask, and extracting the three clinical angles from
//! endplate slopes by exhaustive pair search.

use crate::domain::{CobbTriple, LandmarkSet, SpineMask};
use crate::error::{Error, Result};
use crate::tensor::Array2;

/// Rasterizes the union of the 17 vertebra quadrilaterals into a binary
/// mask. Corner pixels are always set, so every (non-degenerate) landmark
/// lies inside or on the produced mask. Degenerate (collinear) vertebrae
/// contribute nothing; self-intersecting quadrilaterals fall back to their
/// convex hull. Both conditions emit a warning string.
pub fn masks_from_landmarks(lm: &LandmarkSet) -> Result<(SpineMask, Vec<String>)> {
    let (h, w) = lm.image_shape();
    let mut mask = Array2::zeros(h, w);
    let mut warnings = Vec::new();
    for v in 0..lm.vertebra_count() {
        let [tl, tr, bl, br] = lm.vertebra(v);
        // corner order tl, tr, bl, br -> polygon ring tl, tr, br, bl
        let ring = [tl, tr, br, bl];
        // a bowtie has zero net signed area, so intersection is tested first
        let poly: Vec<(f64, f64)> = if ring_self_intersects(&ring) {
            warnings.push(format!(
                "vertebra {v}: self-intersecting quadrilateral, using convex hull"
            ));
            convex_hull(&ring)
        } else if polygon_area(&ring).abs() < 1e-9 {
            warnings.push(format!(
                "vertebra {v}: degenerate (collinear corners), skipped"
            ));
            continue;
        } else {
            ring.to_vec()
        };
        fill_polygon(&mut mask, &poly);
        for &(r, c) in &ring {
            let ri = (r.round().max(0.0) as usize).min(h - 1);
            let ci = (c.round().max(0.0) as usize).min(w - 1);
            mask.set(ri, ci, 1.0);
        }
    }
    Ok((SpineMask::ground_truth(mask)?, warnings))
}

fn polygon_area(ring: &[(f64, f64)]) -> f64 {
    let n = ring.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (r0, c0) = ring[i];
        let (r1, c1) = ring[(i + 1) % n];
        acc += c0 * r1 - c1 * r0;
    }
    acc / 2.0
}

fn segments_cross(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let orient = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| -> f64 {
        (q.1 - p.1) * (r.0 - p.0) - (q.0 - p.0) * (r.1 - p.1)
    };
    let d1 = orient(a, b, c);
    let d2 = orient(a, b, d);
    let d3 = orient(c, d, a);
    let d4 = orient(c, d, b);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// A quad ring tl->tr->br->bl self-intersects iff one pair of opposite
/// edges crosses.
fn ring_self_intersects(ring: &[(f64, f64); 4]) -> bool {
    segments_cross(ring[0], ring[1], ring[2], ring[3])
        || segments_cross(ring[1], ring[2], ring[3], ring[0])
}

/// Andrew monotone chain over the four corners.
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| -> f64 {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Inclusive fill: a pixel center on the polygon boundary counts as inside.
fn fill_polygon(mask: &mut Array2, poly: &[(f64, f64)]) {
    let (h, w) = mask.shape();
    let r_lo = poly
        .iter()
        .map(|p| p.0)
        .fold(f64::INFINITY, f64::min)
        .floor()
        .max(0.0) as usize;
    let r_hi = (poly
        .iter()
        .map(|p| p.0)
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil() as usize)
        .min(h - 1);
    let c_lo = poly
        .iter()
        .map(|p| p.1)
        .fold(f64::INFINITY, f64::min)
        .floor()
        .max(0.0) as usize;
    let c_hi = (poly
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil() as usize)
        .min(w - 1);
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            if point_in_polygon((r as f64, c as f64), poly) {
                mask.set(r, c, 1.0);
            }
        }
    }
}

fn point_in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let n = poly.len();
    for i in 0..n {
        if point_on_segment(p, poly[i], poly[(i + 1) % n]) {
            return true;
        }
    }
    // even-odd ray cast along +col
    let mut inside = false;
    for i in 0..n {
        let (r0, c0) = poly[i];
        let (r1, c1) = poly[(i + 1) % n];
        if (r0 > p.0) != (r1 > p.0) {
            let c_cross = c0 + (p.0 - r0) / (r1 - r0) * (c1 - c0);
            if p.1 < c_cross {
                inside = !inside;
            }
        }
    }
    inside
}

fn point_on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    let eps = 1e-9;
    let cross = (b.1 - a.1) * (p.0 - a.0) - (b.0 - a.0) * (p.1 - a.1);
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    if len < eps {
        return (p.0 - a.0).abs() < eps && (p.1 - a.1).abs() < eps;
    }
    if (cross / len).abs() > eps {
        return false;
    }
    let dot = (p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1);
    (-eps..=len * len + eps).contains(&dot)
}

/// Endplate line angles in degrees, top to bottom: for each vertebra the
/// top edge (tl->tr) then the bottom edge (bl->br). Angles are line angles
/// against the horizontal, folded into (-90, 90].
pub fn endplate_angles(lm: &LandmarkSet) -> Vec<f64> {
    let mut angles = Vec::with_capacity(lm.vertebra_count() * 2);
    for v in 0..lm.vertebra_count() {
        let [tl, tr, bl, br] = lm.vertebra(v);
        angles.push(line_angle_deg(tl, tr));
        angles.push(line_angle_deg(bl, br));
    }
    angles
}

fn line_angle_deg(p: (f64, f64), q: (f64, f64)) -> f64 {
    let dr = q.0 - p.0;
    let dc = q.1 - p.1;
    if dr.abs() < 1e-12 && dc.abs() < 1e-12 {
        return 0.0;
    }
    let mut a = dr.atan2(dc).to_degrees();
    if a > 90.0 {
        a -= 180.0;
    }
    if a <= -90.0 {
        a += 180.0;
    }
    a
}

/// Angle between two endplate lines, folded into [0, 90].
fn pair_angle(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d > 90.0 {
        180.0 - d
    } else {
        d
    }
}

/// Region decomposition over an ordered endplate angle list: the main angle
/// is the global maximum over all pairs (first maximal pair in scan order);
/// the proximal angle searches pairs at or above the main pair's upper
/// endplate, the distal angle pairs at or below its lower endplate.
pub fn cobb_from_endplate_angles(angles: &[f64]) -> (f64, f64, f64) {
    let n = angles.len();
    let mut mt = 0.0;
    let mut best = (0usize, 1usize.min(n.saturating_sub(1)));
    for i in 0..n {
        for j in (i + 1)..n {
            let a = pair_angle(angles[i], angles[j]);
            if a > mt {
                mt = a;
                best = (i, j);
            }
        }
    }
    let max_in = |lo: usize, hi: usize| -> f64 {
        let mut m = 0.0;
        for i in lo..=hi {
            for j in (i + 1)..=hi {
                let a = pair_angle(angles[i], angles[j]);
                if a > m {
                    m = a;
                }
            }
        }
        m
    };
    let pt = if best.0 > 0 { max_in(0, best.0) } else { 0.0 };
    let tl = if best.1 + 1 < n {
        max_in(best.1, n - 1)
    } else {
        0.0
    };
    (pt, mt, tl)
}

/// Extracts the three clinical angles from vertebra landmarks: per-vertebra
/// endplate slopes, then exhaustive pair search with the apex-splitting
/// region rule.
pub fn cobb_from_landmarks(lm: &LandmarkSet) -> Result<CobbTriple> {
    let mut center_rows: Vec<i64> = (0..lm.vertebra_count())
        .map(|v| {
            let q = lm.vertebra(v);
            ((q.iter().map(|p| p.0).sum::<f64>() / 4.0).round()) as i64
        })
        .collect();
    center_rows.sort_unstable();
    center_rows.dedup();
    if center_rows.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 distinct vertebra rows, got {}",
            center_rows.len()
        )));
    }
    let angles = endplate_angles(lm);
    let (pt, mt, tl) = cobb_from_endplate_angles(&angles);
    CobbTriple::from_degrees([pt, mt, tl])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{LandmarkSet, VERTEBRA_COUNT};

    /// Landmarks for 17 axis-aligned rectangles stacked vertically.
    fn straight_landmarks(h: usize, w: usize) -> LandmarkSet {
        let mut points = Vec::new();
        let spacing = (h as f64 - 8.0) / VERTEBRA_COUNT as f64;
        for v in 0..VERTEBRA_COUNT {
            let top = 4.0 + v as f64 * spacing;
            let bot = top + spacing * 0.6;
            let left = w as f64 / 4.0;
            let right = 3.0 * w as f64 / 4.0;
            points.push((top, left));
            points.push((top, right));
            points.push((bot, left));
            points.push((bot, right));
        }
        LandmarkSet::new(points, (h, w)).unwrap()
    }

    #[test]
    fn straight_spine_has_zero_angles() {
        let lm = straight_landmarks(128, 64);
        let cobb = cobb_from_landmarks(&lm).unwrap();
        assert_eq!(cobb.degrees(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_opposed_tilts_give_their_sum() {
        // all endplates flat except one at +10 and one at -10 degrees
        let mut angles = vec![0.0; 34];
        angles[10] = 10.0;
        angles[20] = -10.0;
        let (_, mt, _) = cobb_from_endplate_angles(&angles);
        assert!((mt - 20.0).abs() < 1e-12);
    }

    #[test]
    fn rectangle_union_area_matches_analytic_count() {
        // integer-cornered, non-overlapping axis-aligned rectangles:
        // the inclusive fill covers exactly (dr+1)*(dc+1) pixels each
        let mut points = Vec::new();
        let mut expected = 0usize;
        for v in 0..VERTEBRA_COUNT {
            let top = (4 + v * 7) as f64;
            let bot = top + 4.0;
            let left = 10.0;
            let right = 29.0;
            points.push((top, left));
            points.push((top, right));
            points.push((bot, left));
            points.push((bot, right));
            expected += 5 * 20; // 5 rows x 20 cols inclusive
        }
        let lm = LandmarkSet::new(points, (128, 40)).unwrap();
        let (mask, warnings) = masks_from_landmarks(&lm).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(mask.values().sum() as usize, expected);
    }

    #[test]
    fn collinear_vertebra_warns_and_contributes_nothing() {
        let mut lm = straight_landmarks(128, 64);
        let mut points = lm.points().to_vec();
        // collapse vertebra 5 onto a line
        for k in 0..4 {
            points[5 * 4 + k] = (50.0, 10.0 + k as f64);
        }
        lm = LandmarkSet::new(points, (128, 64)).unwrap();
        let (mask, warnings) = masks_from_landmarks(&lm).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("degenerate"));
        // row 50 holds no filled pixels outside other vertebrae columns
        assert_eq!(mask.values().get(50, 10), 0.0);
    }

    #[test]
    fn bowtie_quad_falls_back_to_convex_hull() {
        let mut lm = straight_landmarks(128, 64);
        let mut points = lm.points().to_vec();
        // swap bl/br of vertebra 3 so edges tr->br and bl->tl cross
        points.swap(3 * 4 + 2, 3 * 4 + 3);
        lm = LandmarkSet::new(points, (128, 64)).unwrap();
        let (mask, warnings) = masks_from_landmarks(&lm).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("convex hull"));
        // hull fill covers the rectangle interior
        let [tl, tr, _, _] = lm.vertebra(3);
        let mid_r = (tl.0 + 2.0) as usize;
        let mid_c = ((tl.1 + tr.1) / 2.0) as usize;
        assert_eq!(mask.values().get(mid_r, mid_c), 1.0);
    }

    #[test]
    fn every_landmark_is_covered_by_the_mask() {
        let lm = straight_landmarks(96, 48);
        let (mask, _) = masks_from_landmarks(&lm).unwrap();
        for &(r, c) in lm.points() {
            let ri = r.round() as usize;
            let ci = c.round() as usize;
            assert_eq!(
                mask.values().get(ri, ci),
                1.0,
                "landmark ({r}, {c}) uncovered"
            );
        }
    }

    #[test]
    fn cobb_is_mirror_invariant() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let base = straight_landmarks(128, 64);
            let mut pts = base.points().to_vec();
            for p in pts.iter_mut() {
                p.0 += rng.random::<f64>() * 2.0 - 1.0;
                p.1 += rng.random::<f64>() * 6.0 - 3.0;
            }
            let lm = LandmarkSet::new(pts.clone(), (128, 64)).unwrap();
            let mirrored: Vec<(f64, f64)> = pts
                .chunks_exact(4)
                .flat_map(|q| {
                    // mirror columns and restore corner order (tl<->tr, bl<->br)
                    [
                        (q[1].0, 63.0 - q[1].1),
                        (q[0].0, 63.0 - q[0].1),
                        (q[3].0, 63.0 - q[3].1),
                        (q[2].0, 63.0 - q[2].1),
                    ]
                })
                .collect();
            let lm_m = LandmarkSet::new(mirrored, (128, 64)).unwrap();
            let a = cobb_from_landmarks(&lm).unwrap().degrees();
            let b = cobb_from_landmarks(&lm_m).unwrap().degrees();
            for k in 0..3 {
                assert!(
                    (a[k] - b[k]).abs() < 1e-9,
                    "component {k}: {} vs {}",
                    a[k],
                    b[k]
                );
            }
        }
    }

    #[test]
    fn cobb_is_scale_invariant() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let base = straight_landmarks(128, 64);
        let mut pts = base.points().to_vec();
        for p in pts.iter_mut() {
            p.0 += rng.random::<f64>() * 2.0 - 1.0;
            p.1 += rng.random::<f64>() * 6.0 - 3.0;
        }
        let lm = LandmarkSet::new(pts.clone(), (128, 64)).unwrap();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(r, c)| (r * 3.0, c * 3.0)).collect();
        let lm_s = LandmarkSet::new(scaled, (384, 192)).unwrap();
        let a = cobb_from_landmarks(&lm).unwrap().degrees();
        let b = cobb_from_landmarks(&lm_s).unwrap().degrees();
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn collapsed_rows_are_rejected() {
        let mut points = Vec::new();
        for _ in 0..VERTEBRA_COUNT {
            points.push((10.0, 5.0));
            points.push((10.0, 20.0));
            points.push((12.0, 5.0));
            points.push((12.0, 20.0));
        }
        let lm = LandmarkSet::new(points, (64, 32)).unwrap();
        assert!(cobb_from_landmarks(&lm).is_err());
    }
}
