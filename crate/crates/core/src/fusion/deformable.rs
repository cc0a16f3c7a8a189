use crate::error::{invalid, Result};
use crate::params::{axpy, dot, softmax_backward, softmax_in_place, Linear, Params, Rng};
use crate::tensorlab::{bilinear_sample, bilinear_sample_backward, FeatureMap, TokenSequence};

/// Deformable attention: each base token predicts `K` offsets (grid
/// units, row then column) around its reference point plus `K` weights,
/// samples the high-res map bilinearly and adds the weighted sum back.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformableParams {
    pub n_points: usize,
    pub w_off: Linear,
    pub w_attn: Linear,
    pub wo: Linear,
}

impl DeformableParams {
    pub fn init(rng: &mut Rng, lo_dim: usize, hi_dim: usize, n_points: usize) -> Self {
        Self {
            n_points,
            w_off: Linear::init(rng, lo_dim, 2 * n_points),
            w_attn: Linear::init(rng, lo_dim, n_points),
            wo: Linear::init(rng, hi_dim, lo_dim),
        }
    }
}

impl Params for DeformableParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.w_off.w, &self.w_attn.w, &self.wo.w]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w_off.w, &mut self.w_attn.w, &mut self.wo.w]
    }
}

#[derive(Debug, Clone)]
pub struct DeformableCache {
    /// `n_tokens x K` sampling positions.
    pub points: Vec<(f64, f64)>,
    weights: Vec<f64>,
    samples: Vec<f64>,
    aggregated: Vec<f64>,
}

/// Center of token `(i, j)`'s co-located region in high-res grid coordinates.
pub fn reference_point(i: usize, j: usize, n: usize, hi: &FeatureMap) -> (f64, f64) {
    let sy = hi.height as f64 / n as f64;
    let sx = hi.width as f64 / n as f64;
    ((i as f64 + 0.5) * sy - 0.5, (j as f64 + 0.5) * sx - 0.5)
}

pub fn fuse_deformable(lo: &TokenSequence, hi: &FeatureMap, p: &DeformableParams) -> Result<TokenSequence> {
    Ok(deformable_forward(lo, hi, p)?.0)
}

pub fn deformable_forward(lo: &TokenSequence, hi: &FeatureMap, p: &DeformableParams) -> Result<(TokenSequence, DeformableCache)> {
    let n = lo
        .grid_side()
        .ok_or_else(|| invalid(format!("{} base tokens do not form a square grid", lo.length)))?;
    if p.n_points == 0 {
        return Err(invalid("deformable attention needs at least one sampling point"));
    }
    if p.w_off.in_dim != lo.dim || p.wo.in_dim != hi.channels || p.wo.out_dim != lo.dim {
        return Err(invalid("deformable attention dims do not match inputs"));
    }
    let k = p.n_points;
    let c = hi.channels;
    let offsets = p.w_off.apply_rows(&lo.data);
    let mut weights = p.w_attn.apply_rows(&lo.data);
    let mut points = Vec::with_capacity(lo.length * k);
    for t in 0..lo.length {
        softmax_in_place(&mut weights[t * k..(t + 1) * k]);
        let (ry, rx) = reference_point(t / n, t % n, n, hi);
        for s in 0..k {
            let o = &offsets[t * 2 * k + 2 * s..t * 2 * k + 2 * s + 2];
            points.push((ry + o[0], rx + o[1]));
        }
    }
    let samples = bilinear_sample(hi, &points);
    let mut aggregated = vec![0.0; lo.length * c];
    let mut out = lo.clone();
    for t in 0..lo.length {
        let agg = &mut aggregated[t * c..(t + 1) * c];
        for s in 0..k {
            axpy(weights[t * k + s], &samples[(t * k + s) * c..(t * k + s + 1) * c], agg);
        }
        p.wo.apply_add(agg, &mut out.data[t * lo.dim..(t + 1) * lo.dim]);
    }
    Ok((
        out,
        DeformableCache {
            points,
            weights,
            samples,
            aggregated,
        },
    ))
}

pub fn deformable_backward(
    lo: &TokenSequence,
    hi: &FeatureMap,
    p: &DeformableParams,
    cache: &DeformableCache,
    grad_out: &TokenSequence,
    mut grads: Option<&mut DeformableParams>,
) -> (TokenSequence, FeatureMap) {
    let k = p.n_points;
    let c = hi.channels;
    let mut dagg = vec![0.0; cache.aggregated.len()];
    p.wo.backward_rows(&cache.aggregated, &grad_out.data, grads.as_deref_mut().map(|g| &mut g.wo), Some(&mut dagg));
    let mut dsamples = vec![0.0; cache.samples.len()];
    let mut dlogits = vec![0.0; cache.weights.len()];
    for t in 0..lo.length {
        let dg = &dagg[t * c..(t + 1) * c];
        let a = &cache.weights[t * k..(t + 1) * k];
        let mut da = vec![0.0; k];
        for s in 0..k {
            let row = (t * k + s) * c;
            da[s] = dot(dg, &cache.samples[row..row + c]);
            axpy(a[s], dg, &mut dsamples[row..row + c]);
        }
        dlogits[t * k..(t + 1) * k].copy_from_slice(&softmax_backward(a, &da));
    }
    let sg = bilinear_sample_backward(hi, &cache.points, &dsamples);
    let doff: Vec<f64> = sg.points.iter().flat_map(|&(r, c)| [r, c]).collect();
    let mut dlo = grad_out.clone();
    p.w_attn.backward_rows(&lo.data, &dlogits, grads.as_deref_mut().map(|g| &mut g.w_attn), Some(&mut dlo.data));
    p.w_off.backward_rows(&lo.data, &doff, grads.map(|g| &mut g.w_off), Some(&mut dlo.data));
    let dhi = FeatureMap {
        height: hi.height,
        width: hi.width,
        channels: c,
        data: sg.map,
        source_resolution: None,
    };
    (dlo, dhi)
}
