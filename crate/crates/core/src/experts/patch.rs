use super::{ExpertSpec, Image};
use crate::params::{tanh_backward, tanh_in_place, uniform_vec, Linear, Params, Rng};
use crate::tensorlab::FeatureMap;

/// One mixing block: `x <- x + tanh(x W1) W2 + alpha * mean_tokens(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBlock {
    pub w1: Linear,
    pub w2: Linear,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchParams {
    pub proj: Linear,
    /// Side of the square position grid.
    pub pos_side: usize,
    /// `pos_side x pos_side x embed_dim`, row-major.
    pub pos: Vec<f64>,
    pub blocks: Vec<PatchBlock>,
}

#[derive(Debug, Clone)]
pub struct PatchCache {
    patches: Vec<f64>,
    block_inputs: Vec<Vec<f64>>,
    block_hidden: Vec<Vec<f64>>,
    block_means: Vec<Vec<f64>>,
    resolution: usize,
}

impl PatchParams {
    pub(super) fn init(rng: &mut Rng, spec: &ExpertSpec) -> Self {
        let p = spec.patch_or_stride;
        let d = spec.embed_dim;
        let fan_in = 3 * p * p;
        let proj = Linear::init(rng, fan_in, d);
        let side = spec.native_resolution / p;
        let pos = uniform_vec(rng, side * side * d, 1.0 / (fan_in as f64).sqrt());
        let blocks = (0..spec.depth)
            .map(|_| PatchBlock {
                w1: Linear::init(rng, d, d),
                w2: Linear::init(rng, d, d),
                alpha: uniform_vec(rng, 1, 1.0 / (d as f64).sqrt()),
            })
            .collect();
        Self {
            proj,
            pos_side: side,
            pos,
            blocks,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.out_dim
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["patch_proj".to_string(), "pos_embed".to_string()];
        for b in 0..self.blocks.len() {
            names.push(format!("block{b}.w1"));
            names.push(format!("block{b}.w2"));
            names.push(format!("block{b}.alpha"));
        }
        names
    }

    pub(super) fn forward(&self, image: &Image, patch: usize) -> (FeatureMap, PatchCache) {
        let side = image.resolution / patch;
        let d = self.embed_dim();
        let n = side * side;
        let patches = patchify(image, patch);
        let mut x = self.proj.apply_rows(&patches);
        for (xi, pi) in x.iter_mut().zip(&self.pos) {
            *xi += pi;
        }
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_hidden = Vec::with_capacity(self.blocks.len());
        let mut block_means = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut h = b.w1.apply_rows(&x);
            tanh_in_place(&mut h);
            let u = b.w2.apply_rows(&h);
            let m = token_mean(&x, d);
            let a = b.alpha[0];
            let mut next = x.clone();
            for (t, row) in next.chunks_exact_mut(d).enumerate() {
                for k in 0..d {
                    row[k] += u[t * d + k] + a * m[k];
                }
            }
            block_inputs.push(std::mem::replace(&mut x, next));
            block_hidden.push(h);
            block_means.push(m);
        }
        debug_assert_eq!(x.len(), n * d);
        (
            FeatureMap {
                height: side,
                width: side,
                channels: d,
                data: x,
                source_resolution: None,
            },
            PatchCache {
                patches,
                block_inputs,
                block_hidden,
                block_means,
                resolution: image.resolution,
            },
        )
    }

    pub(super) fn backward(
        &self,
        cache: &PatchCache,
        grad_out: &[f64],
        patch: usize,
        mut grads: Option<&mut PatchParams>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let d = self.embed_dim();
        let n = grad_out.len() / d;
        let mut dx = grad_out.to_vec();
        for (bi, b) in self.blocks.iter().enumerate().rev() {
            let x_in = &cache.block_inputs[bi];
            let h = &cache.block_hidden[bi];
            let m = &cache.block_means[bi];
            let mut total = vec![0.0; d];
            for row in dx.chunks_exact(d) {
                for k in 0..d {
                    total[k] += row[k];
                }
            }
            let mut dh = vec![0.0; h.len()];
            b.w2.backward_rows(h, &dx, grads.as_deref_mut().map(|g| &mut g.blocks[bi].w2), Some(&mut dh));
            let dz = tanh_backward(h, &dh);
            let a = b.alpha[0];
            if let Some(g) = grads.as_deref_mut() {
                g.blocks[bi].alpha[0] += crate::params::dot(&total, m);
            }
            let mut dx_in = dx.clone();
            b.w1.backward_rows(x_in, &dz, grads.as_deref_mut().map(|g| &mut g.blocks[bi].w1), Some(&mut dx_in));
            let scale = a / n as f64;
            for row in dx_in.chunks_exact_mut(d) {
                for k in 0..d {
                    row[k] += scale * total[k];
                }
            }
            dx = dx_in;
        }
        if let Some(g) = grads.as_deref_mut() {
            for (gp, v) in g.pos.iter_mut().zip(&dx) {
                *gp += v;
            }
        }
        let mut dpatches = want_input.then(|| vec![0.0; cache.patches.len()]);
        self.proj.backward_rows(
            &cache.patches,
            &dx,
            grads.map(|g| &mut g.proj),
            dpatches.as_deref_mut(),
        );
        dpatches.map(|dp| unpatchify(&dp, cache.resolution, patch))
    }
}

impl Params for PatchParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.proj.w, &self.pos];
        for b in &self.blocks {
            v.extend([b.w1.w.as_slice(), b.w2.w.as_slice(), b.alpha.as_slice()]);
        }
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![&mut self.proj.w, &mut self.pos];
        for b in &mut self.blocks {
            v.push(&mut b.w1.w);
            v.push(&mut b.w2.w);
            v.push(&mut b.alpha);
        }
        v
    }
}

fn token_mean(x: &[f64], d: usize) -> Vec<f64> {
    let n = x.len() / d;
    let mut m = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for k in 0..d {
            m[k] += row[k];
        }
    }
    for v in &mut m {
        *v /= n as f64;
    }
    m
}

/// Raster-order patches, each flattened `(dy, dx, channel)` with channel fastest.
fn patchify(image: &Image, p: usize) -> Vec<f64> {
    let side = image.resolution / p;
    let pd = 3 * p * p;
    let mut out = vec![0.0; side * side * pd];
    for i in 0..side {
        for j in 0..side {
            let dst = &mut out[(i * side + j) * pd..(i * side + j + 1) * pd];
            for dy in 0..p {
                let src = ((i * p + dy) * image.resolution + j * p) * 3;
                dst[dy * p * 3..(dy + 1) * p * 3].copy_from_slice(&image.data[src..src + p * 3]);
            }
        }
    }
    out
}

fn unpatchify(patches: &[f64], resolution: usize, p: usize) -> Vec<f64> {
    let side = resolution / p;
    let pd = 3 * p * p;
    let mut img = vec![0.0; resolution * resolution * 3];
    for i in 0..side {
        for j in 0..side {
            let src = &patches[(i * side + j) * pd..(i * side + j + 1) * pd];
            for dy in 0..p {
                let dst = ((i * p + dy) * resolution + j * p) * 3;
                img[dst..dst + p * 3].copy_from_slice(&src[dy * p * 3..(dy + 1) * p * 3]);
            }
        }
    }
    img
}
