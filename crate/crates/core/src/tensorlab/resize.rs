use super::FeatureMap;
use crate::error::{invalid, Result};

/// Per-output-index source lookup along one axis: `out = v[lo] + frac * (v[hi] - v[lo])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResizeAxis {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Align-corners source coordinates. A single output samples the input center.
pub(crate) fn axis_table(in_dim: usize, out_dim: usize) -> Vec<ResizeAxis> {
    (0..out_dim)
        .map(|o| {
            let src = if out_dim == 1 {
                (in_dim - 1) as f64 / 2.0
            } else {
                (o * (in_dim - 1)) as f64 / (out_dim - 1) as f64
            };
            let lo = (src.floor() as usize).min(in_dim - 1);
            let hi = (lo + 1).min(in_dim - 1);
            ResizeAxis {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize with the align-corners convention.
pub fn bilinear_resize(map: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    if (out_h, out_w) == (map.height, map.width) {
        return Ok(map.clone());
    }
    let c = map.channels;
    let rows = axis_table(map.height, out_h);
    let cols = axis_table(map.width, out_w);
    let mut out = FeatureMap::zeros(out_h, out_w, c);
    out.source_resolution = map.source_resolution;
    for (i, ry) in rows.iter().enumerate() {
        for (j, rx) in cols.iter().enumerate() {
            let v00 = map.pixel(ry.lo, rx.lo);
            let v01 = map.pixel(ry.lo, rx.hi);
            let v10 = map.pixel(ry.hi, rx.lo);
            let v11 = map.pixel(ry.hi, rx.hi);
            let o = out.idx(i, j);
            for k in 0..c {
                let top = v00[k] + rx.frac * (v01[k] - v00[k]);
                let bot = v10[k] + rx.frac * (v11[k] - v10[k]);
                out.data[o + k] = top + ry.frac * (bot - top);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: maps an output gradient back onto the input grid.
pub fn bilinear_resize_backward(
    in_h: usize,
    in_w: usize,
    grad_out: &FeatureMap,
) -> Result<FeatureMap> {
    if in_h == 0 || in_w == 0 {
        return Err(invalid("resize source dims must be positive"));
    }
    let c = grad_out.channels;
    if (in_h, in_w) == (grad_out.height, grad_out.width) {
        return Ok(grad_out.clone());
    }
    let rows = axis_table(in_h, grad_out.height);
    let cols = axis_table(in_w, grad_out.width);
    let mut g = FeatureMap::zeros(in_h, in_w, c);
    for (i, ry) in rows.iter().enumerate() {
        for (j, rx) in cols.iter().enumerate() {
            let w00 = (1.0 - ry.frac) * (1.0 - rx.frac);
            let w01 = (1.0 - ry.frac) * rx.frac;
            let w10 = ry.frac * (1.0 - rx.frac);
            let w11 = ry.frac * rx.frac;
            let go = grad_out.idx(i, j);
            for (w, (r, cc)) in [
                (w00, (ry.lo, rx.lo)),
                (w01, (ry.lo, rx.hi)),
                (w10, (ry.hi, rx.lo)),
                (w11, (ry.hi, rx.hi)),
            ] {
                if w == 0.0 {
                    continue;
                }
                let gi = g.idx(r, cc);
                for k in 0..c {
                    g.data[gi + k] += w * grad_out.data[go + k];
                }
            }
        }
    }
    Ok(g)
}
