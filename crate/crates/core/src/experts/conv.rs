use super::{ExpertSpec, Image};
use crate::params::{tanh_backward, tanh_in_place, Linear, Params, Rng};
use crate::tensorlab::FeatureMap;

/// 3x3, stride 2, padding 1 convolution followed by tanh. The kernel is a
/// `Linear` over im2col rows laid out `(ky, kx, c_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub layers: Vec<ConvLayer>,
    /// Final 1x1 projection to the embedding dim.
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    /// `(side_in, im2col rows, tanh outputs)` per layer.
    layers: Vec<(usize, Vec<f64>, Vec<f64>)>,
    proj_input: Vec<f64>,
    resolution: usize,
}

impl ConvParams {
    pub(super) fn init(rng: &mut Rng, spec: &ExpertSpec) -> Self {
        let mut c = 3;
        let mut layers = Vec::with_capacity(spec.depth);
        for _ in 0..spec.depth {
            let c_out = c * 2;
            layers.push(ConvLayer {
                c_in: c,
                c_out,
                kernel: Linear::init(rng, 9 * c, c_out),
            });
            c = c_out;
        }
        let proj = Linear::init(rng, c, spec.embed_dim);
        Self { layers, proj }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.layers.len()).map(|l| format!("conv{l}")).collect();
        names.push("proj".into());
        names
    }

    pub(super) fn forward(&self, image: &Image) -> (FeatureMap, ConvCache) {
        let mut side = image.resolution;
        let mut x = image.data.clone();
        let mut c = 3;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let cols = im2col(&x, side, c);
            let mut y = l.kernel.apply_rows(&cols);
            tanh_in_place(&mut y);
            layers.push((side, cols, y.clone()));
            x = y;
            side /= 2;
            c = l.c_out;
        }
        let out = self.proj.apply_rows(&x);
        (
            FeatureMap {
                height: side,
                width: side,
                channels: self.proj.out_dim,
                data: out,
                source_resolution: None,
            },
            ConvCache {
                layers,
                proj_input: x,
                resolution: image.resolution,
            },
        )
    }

    pub(super) fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &[f64],
        mut grads: Option<&mut ConvParams>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let need_dx = want_input || !self.layers.is_empty();
        let mut dx = need_dx.then(|| vec![0.0; cache.proj_input.len()]);
        self.proj.backward_rows(
            &cache.proj_input,
            grad_out,
            grads.as_deref_mut().map(|g| &mut g.proj),
            dx.as_deref_mut(),
        );
        for (li, l) in self.layers.iter().enumerate().rev() {
            let (side_in, cols, y) = &cache.layers[li];
            let dy = dx.take().expect("upstream gradient");
            let dz = tanh_backward(y, &dy);
            let need_below = li > 0 || want_input;
            let mut dcols = need_below.then(|| vec![0.0; cols.len()]);
            l.kernel.backward_rows(
                cols,
                &dz,
                grads.as_deref_mut().map(|g| &mut g.layers[li].kernel),
                dcols.as_deref_mut(),
            );
            dx = dcols.map(|dc| col2im(&dc, *side_in, l.c_in));
        }
        if want_input {
            debug_assert_eq!(dx.as_ref().map(Vec::len), Some(cache.resolution * cache.resolution * 3));
            dx
        } else {
            None
        }
    }
}

impl Params for ConvParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.layers.iter().map(|l| l.kernel.w.as_slice()).collect();
        v.push(&self.proj.w);
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self
            .layers
            .iter_mut()
            .map(|l| l.kernel.w.as_mut_slice())
            .collect();
        v.push(&mut self.proj.w);
        v
    }
}

/// Gathers the 3x3 stride-2 neighbourhoods (zero padded) of each output cell.
fn im2col(x: &[f64], side: usize, c: usize) -> Vec<f64> {
    let out_side = side / 2;
    let k = 9 * c;
    let mut cols = vec![0.0; out_side * out_side * k];
    for i in 0..out_side {
        for j in 0..out_side {
            let row = &mut cols[(i * out_side + j) * k..(i * out_side + j + 1) * k];
            for ky in 0..3 {
                let y = (2 * i + ky) as isize - 1;
                if y < 0 || y >= side as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = (2 * j + kx) as isize - 1;
                    if xx < 0 || xx >= side as isize {
                        continue;
                    }
                    let src = (y as usize * side + xx as usize) * c;
                    let dst = (ky * 3 + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], side: usize, c: usize) -> Vec<f64> {
    let out_side = side / 2;
    let k = 9 * c;
    let mut x = vec![0.0; side * side * c];
    for i in 0..out_side {
        for j in 0..out_side {
            let row = &cols[(i * out_side + j) * k..(i * out_side + j + 1) * k];
            for ky in 0..3 {
                let y = (2 * i + ky) as isize - 1;
                if y < 0 || y >= side as isize {
                    continue;
                }
                for kx in 0..3 {
                    let xx = (2 * j + kx) as isize - 1;
                    if xx < 0 || xx >= side as isize {
                        continue;
                    }
                    let dst = (y as usize * side + xx as usize) * c;
                    let src = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        x[dst + ch] += row[src + ch];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded, uniform_vec};

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = seeded(1);
        let x = uniform_vec(&mut rng, 6 * 6 * 2, 1.0);
        let cols = im2col(&x, 6, 2);
        let g = uniform_vec(&mut rng, cols.len(), 1.0);
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&g, 6, 2)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn channels_double_per_layer() {
        let spec = super::super::testutil::conv_spec(32, 5, 3);
        let mut rng = seeded(0);
        let p = ConvParams::init(&mut rng, &spec);
        let widths: Vec<_> = p.layers.iter().map(|l| (l.c_in, l.c_out)).collect();
        assert_eq!(widths, vec![(3, 6), (6, 12), (12, 24)]);
        assert_eq!(p.proj.in_dim, 24);
    }
}
