use super::FeatureMap;

/// Gradients of [`bilinear_sample`] with respect to the map data and the
/// sampling coordinates (one `(d_row, d_col)` pair per point).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrads {
    pub map: Vec<f64>,
    pub points: Vec<(f64, f64)>,
}

struct Corner {
    lo: usize,
    hi: usize,
    frac: f64,
    // false when the coordinate was clamped, so it receives no gradient
    live: bool,
}

fn locate(coord: f64, dim: usize) -> Corner {
    let max = (dim - 1) as f64;
    let live = coord > 0.0 && coord < max;
    let c = coord.clamp(0.0, max);
    let lo = (c.floor() as usize).min(dim - 1);
    let hi = (lo + 1).min(dim - 1);
    Corner {
        lo,
        hi,
        frac: c - lo as f64,
        live,
    }
}

/// Samples the map at continuous `(row, col)` positions. Coordinates are
/// clamped to the grid border first. Returns `points.len() x channels`.
pub fn bilinear_sample(map: &FeatureMap, points: &[(f64, f64)]) -> Vec<f64> {
    let c = map.channels;
    let mut out = vec![0.0; points.len() * c];
    for (p, &(r, col)) in points.iter().enumerate() {
        let y = locate(r, map.height);
        let x = locate(col, map.width);
        let (v00, v01) = (map.pixel(y.lo, x.lo), map.pixel(y.lo, x.hi));
        let (v10, v11) = (map.pixel(y.hi, x.lo), map.pixel(y.hi, x.hi));
        let o = &mut out[p * c..(p + 1) * c];
        for k in 0..c {
            let top = v00[k] + x.frac * (v01[k] - v00[k]);
            let bot = v10[k] + x.frac * (v11[k] - v10[k]);
            o[k] = top + y.frac * (bot - top);
        }
    }
    out
}

/// Backward of [`bilinear_sample`] given `grad_out` shaped like its output.
pub fn bilinear_sample_backward(map: &FeatureMap, points: &[(f64, f64)], grad_out: &[f64]) -> SampleGrads {
    let c = map.channels;
    let mut gmap = vec![0.0; map.data.len()];
    let mut gpts = Vec::with_capacity(points.len());
    for (p, &(r, col)) in points.iter().enumerate() {
        let y = locate(r, map.height);
        let x = locate(col, map.width);
        let g = &grad_out[p * c..(p + 1) * c];
        let (v00, v01) = (map.pixel(y.lo, x.lo), map.pixel(y.lo, x.hi));
        let (v10, v11) = (map.pixel(y.hi, x.lo), map.pixel(y.hi, x.hi));
        let (mut dr, mut dc) = (0.0, 0.0);
        for k in 0..c {
            let top = v00[k] + x.frac * (v01[k] - v00[k]);
            let bot = v10[k] + x.frac * (v11[k] - v10[k]);
            dr += g[k] * (bot - top);
            let left = v00[k] + y.frac * (v10[k] - v00[k]);
            let right = v01[k] + y.frac * (v11[k] - v01[k]);
            dc += g[k] * (right - left);
        }
        gpts.push((if y.live { dr } else { 0.0 }, if x.live { dc } else { 0.0 }));
        let weights = [
            ((1.0 - y.frac) * (1.0 - x.frac), y.lo, x.lo),
            ((1.0 - y.frac) * x.frac, y.lo, x.hi),
            (y.frac * (1.0 - x.frac), y.hi, x.lo),
            (y.frac * x.frac, y.hi, x.hi),
        ];
        for (w, rr, cc) in weights {
            if w == 0.0 {
                continue;
            }
            let base = map.idx(rr, cc);
            for k in 0..c {
                gmap[base + k] += w * g[k];
            }
        }
    }
    SampleGrads {
        map: gmap,
        points: gpts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded, uniform, uniform_vec};

    fn random_map(seed: u64, h: usize, w: usize, c: usize) -> FeatureMap {
        let mut rng = seeded(seed);
        FeatureMap::new(h, w, c, uniform_vec(&mut rng, h * w * c, 1.0)).unwrap()
    }

    #[test]
    fn on_grid_sample_returns_stored_vector() {
        let m = random_map(1, 3, 4, 5);
        assert_eq!(bilinear_sample(&m, &[(1.0, 2.0)]), m.pixel(1, 2).to_vec());
    }

    #[test]
    fn midpoint_averages_neighbours() {
        let m = FeatureMap::new(1, 2, 1, vec![0.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&m, &[(0.0, 0.5)]), vec![2.0]);
    }

    #[test]
    fn out_of_range_is_clamped() {
        let m = random_map(2, 3, 3, 2);
        assert_eq!(bilinear_sample(&m, &[(-4.0, 7.5)]), m.pixel(0, 2).to_vec());
    }

    #[test]
    fn empty_points_give_empty_output() {
        let m = random_map(3, 2, 2, 3);
        assert!(bilinear_sample(&m, &[]).is_empty());
    }

    #[test]
    fn matches_reference_and_finite_differences() {
        let m = random_map(4, 5, 6, 3);
        let mut rng = seeded(40);
        let pts: Vec<(f64, f64)> = (0..8)
            .map(|_| (2.0 + uniform(&mut rng, 1.9), 2.5 + uniform(&mut rng, 2.4)))
            .collect();
        let out = bilinear_sample(&m, &pts);
        // independent reference: explicit weighted sum of four corners
        for (p, &(r, c)) in pts.iter().enumerate() {
            let (r0, c0) = (r.floor() as usize, c.floor() as usize);
            let (dy, dx) = (r - r0 as f64, c - c0 as f64);
            for k in 0..3 {
                let v = (1.0 - dy) * (1.0 - dx) * m.pixel(r0, c0)[k]
                    + (1.0 - dy) * dx * m.pixel(r0, c0 + 1)[k]
                    + dy * (1.0 - dx) * m.pixel(r0 + 1, c0)[k]
                    + dy * dx * m.pixel(r0 + 1, c0 + 1)[k];
                assert!((out[p * 3 + k] - v).abs() < 1e-12);
            }
        }
        let weights = uniform_vec(&mut rng, out.len(), 1.0);
        let f = |pts: &[(f64, f64)]| -> f64 {
            bilinear_sample(&m, pts)
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum()
        };
        let grads = bilinear_sample_backward(&m, &pts, &weights);
        let eps = 1e-5;
        for p in 0..pts.len() {
            for axis in 0..2 {
                let mut plus = pts.clone();
                let mut minus = pts.clone();
                if axis == 0 {
                    plus[p].0 += eps;
                    minus[p].0 -= eps;
                } else {
                    plus[p].1 += eps;
                    minus[p].1 -= eps;
                }
                let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
                let an = if axis == 0 { grads.points[p].0 } else { grads.points[p].1 };
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-4, "point {p} axis {axis}: fd {fd} analytic {an}");
            }
        }
    }
}
