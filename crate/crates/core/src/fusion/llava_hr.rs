use crate::error::{invalid, Result};
use crate::params::{tanh_backward, tanh_in_place, Linear, Params, Rng};
use crate::tensorlab::{FeatureMap, TokenSequence};

/// Mixture-of-resolution adapter: `out = lo + tanh(pool(hi) W1) W2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LlavaHrParams {
    pub w1: Linear,
    pub w2: Linear,
}

impl LlavaHrParams {
    pub fn init(rng: &mut Rng, lo_dim: usize, hi_dim: usize) -> Self {
        Self {
            w1: Linear::init(rng, hi_dim, lo_dim),
            w2: Linear::init(rng, lo_dim, lo_dim),
        }
    }
}

impl Params for LlavaHrParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.w1.w, &self.w2.w]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w1.w, &mut self.w2.w]
    }
}

#[derive(Debug, Clone)]
pub struct LlavaHrCache {
    pub window: usize,
    pub pooled: Vec<f64>,
    hidden: Vec<f64>,
}

/// Integer ratio between the high-res grid side and the token grid side.
pub(crate) fn window_ratio(lo: &TokenSequence, hi: &FeatureMap) -> Result<(usize, usize)> {
    let n = lo
        .grid_side()
        .ok_or_else(|| invalid(format!("{} base tokens do not form a square grid", lo.length)))?;
    if hi.height != hi.width {
        return Err(invalid(format!("high-res grid must be square, got {}x{}", hi.height, hi.width)));
    }
    if hi.height % n != 0 {
        return Err(invalid(format!(
            "high-res side {} is not an integer multiple of token grid side {n}",
            hi.height
        )));
    }
    Ok((n, hi.height / n))
}

/// Average of the `w x w` high-res window co-located with each token.
pub(crate) fn window_pool(hi: &FeatureMap, n: usize, w: usize) -> Vec<f64> {
    let c = hi.channels;
    let mut pooled = vec![0.0; n * n * c];
    let inv = 1.0 / (w * w) as f64;
    for i in 0..n {
        for j in 0..n {
            let dst = &mut pooled[(i * n + j) * c..(i * n + j + 1) * c];
            for dy in 0..w {
                for dx in 0..w {
                    for (d, s) in dst.iter_mut().zip(hi.pixel(i * w + dy, j * w + dx)) {
                        *d += s;
                    }
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
    }
    pooled
}

pub fn fuse_llava_hr(lo: &TokenSequence, hi: &FeatureMap, p: &LlavaHrParams) -> Result<TokenSequence> {
    Ok(llava_hr_forward(lo, hi, p)?.0)
}

pub fn llava_hr_forward(lo: &TokenSequence, hi: &FeatureMap, p: &LlavaHrParams) -> Result<(TokenSequence, LlavaHrCache)> {
    let (n, w) = window_ratio(lo, hi)?;
    if p.w1.in_dim != hi.channels || p.w2.out_dim != lo.dim {
        return Err(invalid("LLaVA-HR adapter dims do not match inputs"));
    }
    let pooled = window_pool(hi, n, w);
    let mut hidden = p.w1.apply_rows(&pooled);
    tanh_in_place(&mut hidden);
    let mut out = lo.clone();
    for (o, h) in out.data.chunks_exact_mut(lo.dim).zip(hidden.chunks_exact(p.w1.out_dim)) {
        p.w2.apply_add(h, o);
    }
    Ok((out, LlavaHrCache { window: w, pooled, hidden }))
}

/// Returns `(d_lo, d_hi)`.
pub fn llava_hr_backward(
    hi: &FeatureMap,
    p: &LlavaHrParams,
    cache: &LlavaHrCache,
    grad_out: &TokenSequence,
    mut grads: Option<&mut LlavaHrParams>,
) -> (TokenSequence, FeatureMap) {
    let mut dh = vec![0.0; cache.hidden.len()];
    p.w2.backward_rows(&cache.hidden, &grad_out.data, grads.as_deref_mut().map(|g| &mut g.w2), Some(&mut dh));
    let dz = tanh_backward(&cache.hidden, &dh);
    let mut dpooled = vec![0.0; cache.pooled.len()];
    p.w1.backward_rows(&cache.pooled, &dz, grads.map(|g| &mut g.w1), Some(&mut dpooled));
    let w = cache.window;
    let n = hi.height / w;
    let c = hi.channels;
    let inv = 1.0 / (w * w) as f64;
    let mut dhi = FeatureMap::zeros(hi.height, hi.width, c);
    for i in 0..n {
        for j in 0..n {
            let src = &dpooled[(i * n + j) * c..(i * n + j + 1) * c];
            for dy in 0..w {
                for dx in 0..w {
                    for (d, s) in dhi.pixel_mut(i * w + dy, j * w + dx).iter_mut().zip(src) {
                        *d += s * inv;
                    }
                }
            }
        }
    }
    (grad_out.clone(), dhi)
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
    fn zero_output_map_is_identity() {
        let (lo, hi) = inputs(1, 4, 2, 3, 5);
        let mut p = LlavaHrParams::init(&mut seeded(2), 3, 5);
        p.w2.w.fill(0.0);
        assert_eq!(fuse_llava_hr(&lo, &hi, &p).unwrap(), lo);
    }

    #[test]
    fn unit_window_with_identity_input_map() {
        let (lo, hi) = inputs(3, 3, 1, 4, 4);
        let mut p = LlavaHrParams::init(&mut seeded(4), 4, 4);
        p.w1 = Linear::identity(4);
        let out = fuse_llava_hr(&lo, &hi, &p).unwrap();
        for t in 0..9 {
            let mut h: Vec<f64> = hi.data[t * 4..(t + 1) * 4].to_vec();
            tanh_in_place(&mut h);
            let inj = p.w2.apply(&h);
            for k in 0..4 {
                assert!((out.token(t)[k] - lo.token(t)[k] - inj[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pooled_windows_match_brute_force() {
        let (lo, hi) = inputs(5, 4, 3, 2, 3);
        let p = LlavaHrParams::init(&mut seeded(6), 2, 3);
        let (_, cache) = llava_hr_forward(&lo, &hi, &p).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..3 {
                    let mut s = 0.0;
                    for r in i * 3..i * 3 + 3 {
                        for c in j * 3..j * 3 + 3 {
                            s += hi.pixel(r, c)[k];
                        }
                    }
                    let got = cache.pooled[(i * 4 + j) * 3 + k];
                    assert!((got - s / 9.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_integer_ratio_rejected() {
        let (lo, _) = inputs(1, 4, 1, 2, 2);
        let hi = FeatureMap::zeros(6, 6, 2);
        let p = LlavaHrParams::init(&mut seeded(2), 2, 2);
        assert!(fuse_llava_hr(&lo, &hi, &p).is_err());
    }
}
