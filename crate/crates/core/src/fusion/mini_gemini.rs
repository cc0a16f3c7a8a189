use super::llava_hr::window_ratio;
use crate::error::{invalid, Result};
use crate::params::{dot, softmax_backward, softmax_in_place, Linear, Params, Rng};
use crate::tensorlab::{FeatureMap, TokenSequence};

/// Window cross-attention: each base token queries its co-located
/// `window x window` high-res cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniGeminiParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MiniGeminiParams {
    pub fn init(rng: &mut Rng, lo_dim: usize, hi_dim: usize) -> Self {
        let d = lo_dim;
        Self {
            wq: Linear::init(rng, lo_dim, d),
            wk: Linear::init(rng, hi_dim, d),
            wv: Linear::init(rng, hi_dim, d),
            wo: Linear::init(rng, d, lo_dim),
        }
    }

    fn attn_dim(&self) -> usize {
        self.wq.out_dim
    }
}

impl Params for MiniGeminiParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.wq.w, &self.wk.w, &self.wv.w, &self.wo.w]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.wq.w, &mut self.wk.w, &mut self.wv.w, &mut self.wo.w]
    }
}

#[derive(Debug, Clone)]
pub struct MiniGeminiCache {
    pub window: usize,
    queries: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
    /// Row `t` holds token `t`'s weights over its window cells (raster order).
    pub attention: Vec<f64>,
    context: Vec<f64>,
}

/// Flat hi-res cell indices of token `(i, j)`'s window, raster order.
fn window_cells(i: usize, j: usize, w: usize, side: usize) -> impl Iterator<Item = usize> {
    (0..w * w).map(move |k| (i * w + k / w) * side + j * w + k % w)
}

pub fn fuse_mini_gemini(lo: &TokenSequence, hi: &FeatureMap, window: usize, p: &MiniGeminiParams) -> Result<TokenSequence> {
    Ok(mini_gemini_forward(lo, hi, window, p)?.0)
}

pub fn mini_gemini_forward(
    lo: &TokenSequence,
    hi: &FeatureMap,
    window: usize,
    p: &MiniGeminiParams,
) -> Result<(TokenSequence, MiniGeminiCache)> {
    let (n, w) = window_ratio(lo, hi)?;
    if w != window {
        return Err(invalid(format!(
            "Mini-Gemini window {window} does not match high-res side {} / token side {n}",
            hi.height
        )));
    }
    if p.wq.in_dim != lo.dim || p.wk.in_dim != hi.channels || p.wo.out_dim != lo.dim {
        return Err(invalid("Mini-Gemini projection dims do not match inputs"));
    }
    let d = p.attn_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let queries = p.wq.apply_rows(&lo.data);
    let keys = p.wk.apply_rows(&hi.data);
    let values = p.wv.apply_rows(&hi.data);
    let ww = w * w;
    let mut attention = vec![0.0; n * n * ww];
    let mut context = vec![0.0; n * n * d];
    let mut out = lo.clone();
    for i in 0..n {
        for j in 0..n {
            let t = i * n + j;
            let q = &queries[t * d..(t + 1) * d];
            let a = &mut attention[t * ww..(t + 1) * ww];
            for (slot, cell) in window_cells(i, j, w, hi.width).enumerate() {
                a[slot] = dot(q, &keys[cell * d..(cell + 1) * d]) * scale;
            }
            softmax_in_place(a);
            let ctx = &mut context[t * d..(t + 1) * d];
            for (slot, cell) in window_cells(i, j, w, hi.width).enumerate() {
                crate::params::axpy(a[slot], &values[cell * d..(cell + 1) * d], ctx);
            }
            p.wo.apply_add(ctx, &mut out.data[t * lo.dim..(t + 1) * lo.dim]);
        }
    }
    Ok((
        out,
        MiniGeminiCache {
            window: w,
            queries,
            keys,
            values,
            attention,
            context,
        },
    ))
}

pub fn mini_gemini_backward(
    lo: &TokenSequence,
    hi: &FeatureMap,
    p: &MiniGeminiParams,
    cache: &MiniGeminiCache,
    grad_out: &TokenSequence,
    mut grads: Option<&mut MiniGeminiParams>,
) -> (TokenSequence, FeatureMap) {
    let d = p.attn_dim();
    let w = cache.window;
    let ww = w * w;
    let n = hi.height / w;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dctx = vec![0.0; cache.context.len()];
    p.wo.backward_rows(&cache.context, &grad_out.data, grads.as_deref_mut().map(|g| &mut g.wo), Some(&mut dctx));
    let mut dq = vec![0.0; cache.queries.len()];
    let mut dk = vec![0.0; cache.keys.len()];
    let mut dv = vec![0.0; cache.values.len()];
    for i in 0..n {
        for j in 0..n {
            let t = i * n + j;
            let a = &cache.attention[t * ww..(t + 1) * ww];
            let dc = &dctx[t * d..(t + 1) * d];
            let mut da = vec![0.0; ww];
            for (slot, cell) in window_cells(i, j, w, hi.width).enumerate() {
                da[slot] = dot(dc, &cache.values[cell * d..(cell + 1) * d]);
                crate::params::axpy(a[slot], dc, &mut dv[cell * d..(cell + 1) * d]);
            }
            let ds = softmax_backward(a, &da);
            let q = &cache.queries[t * d..(t + 1) * d];
            for (slot, cell) in window_cells(i, j, w, hi.width).enumerate() {
                let s = ds[slot] * scale;
                crate::params::axpy(s, &cache.keys[cell * d..(cell + 1) * d], &mut dq[t * d..(t + 1) * d]);
                crate::params::axpy(s, q, &mut dk[cell * d..(cell + 1) * d]);
            }
        }
    }
    let mut dlo = grad_out.clone();
    p.wq.backward_rows(&lo.data, &dq, grads.as_deref_mut().map(|g| &mut g.wq), Some(&mut dlo.data));
    let mut dhi = FeatureMap::zeros(hi.height, hi.width, hi.channels);
    p.wk.backward_rows(&hi.data, &dk, grads.as_deref_mut().map(|g| &mut g.wk), Some(&mut dhi.data));
    p.wv.backward_rows(&hi.data, &dv, grads.map(|g| &mut g.wv), Some(&mut dhi.data));
    (dlo, dhi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded, uniform_vec};

    fn inputs(seed: u64, n: usize, w: usize, dlo: usize, dhi: usize) -> (TokenSequence, FeatureMap) {
        let mut rng = seeded(seed);
        let lo = TokenSequence::new(n * n, dlo, uniform_vec(&mut rng, n * n * dlo, 1.0)).unwrap();
        let m = n * w;
        let hi = FeatureMap::new(m, m, dhi, uniform_vec(&mut rng, m * m * dhi, 1.0)).unwrap();
        (lo, hi)
    }

    #[test]
    fn singleton_window_has_unit_weight() {
        let (lo, hi) = inputs(1, 4, 1, 3, 2);
        let p = MiniGeminiParams::init(&mut seeded(2), 3, 2);
        let (out, cache) = mini_gemini_forward(&lo, &hi, 1, &p).unwrap();
        assert!(cache.attention.iter().all(|&a| a == 1.0));
        for t in 0..16 {
            let v = p.wv.apply(hi.pixel(t / 4, t % 4));
            let inj = p.wo.apply(&v);
            for k in 0..3 {
                assert!((out.token(t)[k] - lo.token(t)[k] - inj[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let (lo, hi) = inputs(3, 2, 2, 4, 3);
        let mut p = MiniGeminiParams::init(&mut seeded(4), 4, 3);
        p.wo.w.fill(0.0);
        assert_eq!(fuse_mini_gemini(&lo, &hi, 2, &p).unwrap(), lo);
    }

    #[test]
    fn rows_sum_to_one_and_match_brute_force() {
        let (lo, hi) = inputs(5, 4, 2, 3, 5);
        let p = MiniGeminiParams::init(&mut seeded(6), 3, 5);
        let (out, cache) = mini_gemini_forward(&lo, &hi, 2, &p).unwrap();
        let d = 3;
        for (t, row) in cache.attention.chunks_exact(4).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // brute force: explicit softmax over the window
            let (i, j) = (t / 4, t % 4);
            let q = p.wq.apply(lo.token(t));
            let cells: Vec<(usize, usize)> = (0..4).map(|k| (2 * i + k / 2, 2 * j + k % 2)).collect();
            let scores: Vec<f64> = cells
                .iter()
                .map(|&(r, c)| {
                    let k = p.wk.apply(hi.pixel(r, c));
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let mut ctx = vec![0.0; d];
            for (s, &(r, c)) in scores.iter().zip(&cells) {
                let v = p.wv.apply(hi.pixel(r, c));
                for k in 0..d {
                    ctx[k] += s.exp() / z * v[k];
                }
            }
            let inj = p.wo.apply(&ctx);
            for k in 0..3 {
                assert!((out.token(t)[k] - lo.token(t)[k] - inj[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_mismatch_rejected() {
        let (lo, hi) = inputs(1, 2, 2, 3, 3);
        let p = MiniGeminiParams::init(&mut seeded(2), 3, 3);
        assert!(fuse_mini_gemini(&lo, &hi, 3, &p).is_err());
    }
}
