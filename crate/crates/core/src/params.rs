//! Parameter containers shared by every trainable component.
//!
//! Gradients reuse the parameter types themselves: a gradient for a
//! `Linear` is another `Linear` of the same shape, zeroed and then
//! accumulated by the backward passes.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws from U[-bound, bound].
pub fn uniform(rng: &mut Rng, bound: f64) -> f64 {
    (rng.gen::<f64>() * 2.0 - 1.0) * bound
}

pub fn uniform_vec(rng: &mut Rng, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| uniform(rng, bound)).collect()
}

/// Anything that owns a fixed list of real-valued tensors.
pub trait Params {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(1.0, src, dst);
        }
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Zeroed copy with the same shapes, used as a gradient accumulator.
pub fn zeros_like<T: Params + Clone>(p: &T) -> T {
    let mut z = p.clone();
    z.fill_zero();
    z
}

#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Dense map `y = x W` on row vectors, weight stored `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
        }
    }

    /// Uniform init with bound `1/sqrt(in_dim)`.
    pub fn init(rng: &mut Rng, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            w: uniform_vec(rng, in_dim * out_dim, bound),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.w[i * dim + i] = 1.0;
        }
        l
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.out_dim..(i + 1) * self.out_dim]
    }

    /// Accumulates `x W` into `y`.
    #[inline]
    pub fn apply_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(y.len(), self.out_dim);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, self.row(i), y);
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_dim];
        self.apply_add(x, &mut y);
        y
    }

    /// Row-wise map over an `n x in_dim` matrix.
    pub fn apply_rows(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.in_dim;
        let mut y = vec![0.0; n * self.out_dim];
        for (xr, yr) in x
            .chunks_exact(self.in_dim)
            .zip(y.chunks_exact_mut(self.out_dim))
        {
            self.apply_add(xr, yr);
        }
        y
    }

    /// Backward of `y = x W` for one row: `gw += x^T dy`, `dx += W dy`.
    #[inline]
    pub fn backward_add(&self, x: &[f64], dy: &[f64], gw: Option<&mut Linear>, dx: Option<&mut [f64]>) {
        if let Some(gw) = gw {
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    axpy(xi, dy, &mut gw.w[i * self.out_dim..(i + 1) * self.out_dim]);
                }
            }
        }
        if let Some(dx) = dx {
            for (i, d) in dx.iter_mut().enumerate() {
                *d += dot(self.row(i), dy);
            }
        }
    }

    /// Row-wise backward over `n` rows.
    pub fn backward_rows(&self, x: &[f64], dy: &[f64], mut gw: Option<&mut Linear>, mut dx: Option<&mut [f64]>) {
        let n = x.len() / self.in_dim;
        for r in 0..n {
            let xr = &x[r * self.in_dim..(r + 1) * self.in_dim];
            let dyr = &dy[r * self.out_dim..(r + 1) * self.out_dim];
            let dxr = dx
                .as_deref_mut()
                .map(|d| &mut d[r * self.in_dim..(r + 1) * self.in_dim]);
            self.backward_add(xr, dyr, gw.as_deref_mut(), dxr);
        }
    }
}

impl Params for Linear {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.w]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w]
    }
}

pub(crate) fn tanh_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}

/// `dz = dy * (1 - tanh^2)` given the tanh output.
pub(crate) fn tanh_backward(t: &[f64], dy: &[f64]) -> Vec<f64> {
    t.iter().zip(dy).map(|(t, d)| d * (1.0 - t * t)).collect()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Backward of softmax: `dz_i = p_i (dp_i - sum_j p_j dp_j)`.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let s = dot(p, dp);
    p.iter().zip(dp).map(|(p, d)| p * (d - s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_applies_row_vector_convention() {
        let l = Linear {
            in_dim: 2,
            out_dim: 3,
            w: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        assert_eq!(l.apply(&[1.0, -1.0]), vec![-3.0, -3.0, -3.0]);
    }

    #[test]
    fn init_respects_bound() {
        let mut rng = seeded(3);
        let l = Linear::init(&mut rng, 192, 4);
        let s = 1.0 / 192f64.sqrt();
        assert!(l.w.iter().all(|v| v.abs() <= s));
        assert!(l.w.iter().any(|v| v.abs() > 0.5 * s));
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
