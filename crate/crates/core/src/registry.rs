//! Named gradient-check problems for every differentiable op.
//!
//! Each op is reduced to a scalar `sum(out * R)` with a seeded random
//! weighting `R`, so the analytic gradient is the op's backward pass
//! applied to `R`.

use crate::error::{Error, Result};
use crate::experts::{
    build_expert, normalize_tokens, normalize_tokens_backward, Arch, ExpertSpec, Image, PostProcess,
};
use crate::fusion::{
    channel_concat_backward, deformable_backward, deformable_forward, fuse_channel_concat, fuse_sequence_append,
    llava_hr_backward, llava_hr_forward, mini_gemini_backward, mini_gemini_forward, sequence_append_backward,
    DeformableParams, FusionConfig, LlavaHrParams, MiniGeminiParams, Strategy,
};
use crate::lmstub::{lm_backward, lm_forward_cached, loss, project_backward, project_forward, LmStubParams, ProjectorParams};
use crate::model::{Dims, ExpertSetup, ModelAssembly, ModelProblem, Route};
use crate::params::{dot, seeded, uniform_vec, zeros_like, Linear, Params, Rng};
use crate::tensorlab::{
    bilinear_resize, bilinear_resize_backward, bilinear_sample, bilinear_sample_backward, check_gradients,
    pixel_shuffle, pixel_shuffle_backward, FeatureMap, GradProblem, GradReport, ShuffleDirection, TokenSequence,
};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: [u64; 3] = [7, 8, 9];

/// Deliberately wrong backward pass, reachable by name only.
pub const BROKEN_OP: &str = "broken_backward";

type Groups = [Vec<f64>];

struct FnProblem {
    names: Vec<String>,
    init: Vec<Vec<f64>>,
    value: Box<dyn Fn(&Groups) -> f64>,
    grad: Box<dyn Fn(&Groups) -> Vec<Vec<f64>>>,
}

impl GradProblem for FnProblem {
    fn group_names(&self) -> Vec<String> {
        self.names.clone()
    }
    fn initial(&self) -> Vec<Vec<f64>> {
        self.init.clone()
    }
    fn value(&self, g: &Groups) -> f64 {
        (self.value)(g)
    }
    fn gradient(&self, g: &Groups) -> Vec<Vec<f64>> {
        (self.grad)(g)
    }
}

fn problem<S: AsRef<str>>(
    names: &[S],
    init: Vec<Vec<f64>>,
    value: impl Fn(&Groups) -> f64 + 'static,
    grad: impl Fn(&Groups) -> Vec<Vec<f64>> + 'static,
) -> Box<dyn GradProblem> {
    Box::new(FnProblem {
        names: names.iter().map(|s| s.as_ref().to_string()).collect(),
        init,
        value: Box::new(value),
        grad: Box::new(grad),
    })
}

fn tensors_of<T: Params>(p: &T) -> Vec<Vec<f64>> {
    p.tensors().into_iter().map(<[f64]>::to_vec).collect()
}

fn with_tensors<T: Params + Clone>(template: &T, groups: &Groups) -> T {
    let mut p = template.clone();
    for (dst, src) in p.tensors_mut().into_iter().zip(groups) {
        dst.copy_from_slice(src);
    }
    p
}

fn map_of(shape: (usize, usize, usize), data: &[f64]) -> FeatureMap {
    FeatureMap::new(shape.0, shape.1, shape.2, data.to_vec()).expect("registry shapes are consistent")
}

fn tokens_of(length: usize, dim: usize, data: &[f64]) -> TokenSequence {
    TokenSequence::new(length, dim, data.to_vec()).expect("registry shapes are consistent")
}

fn resize_problem(rng: &mut Rng) -> Box<dyn GradProblem> {
    let (h, w, c) = (3, 4, 2);
    let x = uniform_vec(rng, h * w * c, 1.0);
    let r = uniform_vec(rng, 5 * 6 * c, 1.0);
    let r2 = r.clone();
    problem(
        &["map"],
        vec![x],
        move |g| dot(&bilinear_resize(&map_of((h, w, c), &g[0]), 5, 6).unwrap().data, &r),
        move |_| vec![bilinear_resize_backward(h, w, &map_of((5, 6, c), &r2)).unwrap().data],
    )
}

/// Interior points kept away from cell borders, where sampling has kinks.
fn interior_points(rng: &mut Rng, n: usize, side: usize) -> Vec<f64> {
    (0..2 * n)
        .map(|_| {
            let cell = rand::Rng::gen_range(rng, 0..side - 1) as f64;
            cell + rand::Rng::gen_range(rng, 0.2..0.8)
        })
        .collect()
}

fn sample_problem(rng: &mut Rng) -> Box<dyn GradProblem> {
    let (side, c, n) = (4, 3, 6);
    let x = uniform_vec(rng, side * side * c, 1.0);
    let pts = interior_points(rng, n, side);
    let r = uniform_vec(rng, n * c, 1.0);
    let r2 = r.clone();
    let pairs = |v: &[f64]| v.chunks_exact(2).map(|p| (p[0], p[1])).collect::<Vec<_>>();
    problem(
        &["map", "points"],
        vec![x, pts],
        move |g| dot(&bilinear_sample(&map_of((side, side, c), &g[0]), &pairs(&g[1])), &r),
        move |g| {
            let sg = bilinear_sample_backward(&map_of((side, side, c), &g[0]), &pairs(&g[1]), &r2);
            vec![sg.map, sg.points.iter().flat_map(|&(a, b)| [a, b]).collect()]
        },
    )
}

fn shuffle_problem(rng: &mut Rng, direction: ShuffleDirection) -> Box<dyn GradProblem> {
    let (shape, r) = match direction {
        ShuffleDirection::Shuffle => ((2, 3, 8), 2),
        ShuffleDirection::Unshuffle => ((4, 6, 2), 2),
    };
    let n = shape.0 * shape.1 * shape.2;
    let x = uniform_vec(rng, n, 1.0);
    let out = pixel_shuffle(&map_of(shape, &x), r, direction).unwrap();
    let out_shape = out.shape();
    let w = uniform_vec(rng, n, 1.0);
    let w2 = w.clone();
    problem(
        &["map"],
        vec![x],
        move |g| dot(&pixel_shuffle(&map_of(shape, &g[0]), r, direction).unwrap().data, &w),
        move |_| vec![pixel_shuffle_backward(&map_of(out_shape, &w2), r, direction).unwrap().data],
    )
}

fn linear_problem(rng: &mut Rng) -> Box<dyn GradProblem> {
    let (rows, i, o) = (3, 4, 5);
    let lin = Linear::init(rng, i, o);
    let x = uniform_vec(rng, rows * i, 1.0);
    let r = uniform_vec(rng, rows * o, 1.0);
    let r2 = r.clone();
    let at = move |w: &[f64]| Linear {
        in_dim: i,
        out_dim: o,
        w: w.to_vec(),
    };
    problem(
        &["w", "x"],
        vec![lin.w, x],
        move |g| dot(&at(&g[0]).apply_rows(&g[1]), &r),
        move |g| {
            let l = at(&g[0]);
            let mut gw = Linear::zeros(i, o);
            let mut dx = vec![0.0; rows * i];
            l.backward_rows(&g[1], &r2, Some(&mut gw), Some(&mut dx));
            vec![gw.w, dx]
        },
    )
}

fn normalize_problem(rng: &mut Rng) -> Box<dyn GradProblem> {
    let shape = (6, 6, 2);
    let post = PostProcess::PixelUnshuffle(2);
    let x = uniform_vec(rng, 72, 1.0);
    let r = uniform_vec(rng, 4 * 4 * 8, 1.0);
    let r2 = r.clone();
    problem(
        &["map"],
        vec![x],
        move |g| dot(&normalize_tokens(&map_of(shape, &g[0]), 16, post).unwrap().data, &r),
        move |_| vec![normalize_tokens_backward(shape, post, &tokens_of(16, 8, &r2)).unwrap().data],
    )
}

fn encode_problem(rng: &mut Rng, arch: Arch, seed: u64) -> Box<dyn GradProblem> {
    let spec = ExpertSpec {
        name: "x".into(),
        arch,
        native_resolution: 8,
        patch_or_stride: 2,
        embed_dim: 4,
        depth: 2,
        post_process: PostProcess::None,
        frozen_default: false,
    };
    let expert = build_expert(&spec, seed).unwrap();
    let image: Vec<f64> = (0..8 * 8 * 3).map(|_| rand::Rng::gen::<f64>(rng)).collect();
    let out = expert.encode(&Image::new(8, image.clone()).unwrap()).unwrap();
    let out_shape = out.shape();
    let r = uniform_vec(rng, out.data.len(), 1.0);
    let mut names = expert.params.tensor_names();
    names.push("image".into());
    let n_params = names.len() - 1;
    let mut init = tensors_of(&expert.params);
    init.push(image);
    let e2 = expert.clone();
    let r2 = r.clone();
    problem(
        &names,
        init,
        move |g| {
            let mut e = expert.clone();
            e.params = with_tensors(&expert.params, &g[..n_params]);
            dot(&e.encode(&Image::new(8, g[n_params].clone()).unwrap()).unwrap().data, &r)
        },
        move |g| {
            let mut e = e2.clone();
            e.params = with_tensors(&e2.params, &g[..n_params]);
            let (_, cache) = e.encode_cached(&Image::new(8, g[n_params].clone()).unwrap()).unwrap();
            let mut grads = zeros_like(&e.params);
            let dimg = e.encode_backward(&cache, &map_of(out_shape, &r2), Some(&mut grads), true).unwrap();
            let mut out = tensors_of(&grads);
            out.push(dimg);
            out
        },
    )
}

fn concat_problem(rng: &mut Rng, strategy: Strategy) -> Box<dyn GradProblem> {
    let (la, lb, da, db) = match strategy {
        Strategy::SA => (4, 9, 3, 3),
        _ => (4, 4, 3, 5),
    };
    let a = uniform_vec(rng, la * da, 1.0);
    let b = uniform_vec(rng, lb * db, 1.0);
    let out_len = if strategy == Strategy::SA { (la + lb) * da } else { la * (da + db) };
    let r = uniform_vec(rng, out_len, 1.0);
    let r2 = r.clone();
    let fwd = move |g: &Groups| {
        let seqs = [tokens_of(la, da, &g[0]), tokens_of(lb, db, &g[1])];
        match strategy {
            Strategy::SA => fuse_sequence_append(&seqs).unwrap(),
            _ => fuse_channel_concat(&seqs).unwrap(),
        }
    };
    problem(
        &["tokens_a", "tokens_b"],
        vec![a, b],
        move |g| dot(&fwd(g).data, &r),
        move |_| {
            let grad = match strategy {
                Strategy::SA => sequence_append_backward(&[la, lb], &tokens_of(la + lb, da, &r2)),
                _ => channel_concat_backward(&[da, db], &tokens_of(la, da + db, &r2)),
            };
            grad.into_iter().map(|t| t.data).collect()
        },
    )
}

/// Base stream of `n x n` tokens (dim `dl`) and a `2n x 2n` grid (dim `dh`).
fn injection_inputs(rng: &mut Rng) -> (usize, usize, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, m, dl, dh) = (2, 4, 3, 5);
    let lo = uniform_vec(rng, n * n * dl, 1.0);
    let hi = uniform_vec(rng, m * m * dh, 1.0);
    let r = uniform_vec(rng, n * n * dl, 1.0);
    (n, m, dl, dh, lo, hi, r)
}

macro_rules! injection_problem {
    ($rng:expr, $params:expr, $names:expr, $fwd:expr, $bwd:expr) => {{
        let (n, m, dl, dh, lo, hi, r) = injection_inputs($rng);
        let p = $params(&mut *$rng, dl, dh);
        let k = p.tensors().len();
        let mut init = tensors_of(&p);
        init.push(lo);
        init.push(hi);
        let mut names: Vec<&str> = $names.to_vec();
        names.extend(["lo_tokens", "hi_map"]);
        let p2 = p.clone();
        let r2 = r.clone();
        problem(
            &names,
            init,
            move |g| {
                let q = with_tensors(&p, &g[..k]);
                let (out, _) = $fwd(&tokens_of(n * n, dl, &g[k]), &map_of((m, m, dh), &g[k + 1]), &q).unwrap();
                dot(&out.data, &r)
            },
            move |g| {
                let q = with_tensors(&p2, &g[..k]);
                let lo = tokens_of(n * n, dl, &g[k]);
                let hi = map_of((m, m, dh), &g[k + 1]);
                let (_, cache) = $fwd(&lo, &hi, &q).unwrap();
                let mut grads = zeros_like(&q);
                let (dlo, dhi) = $bwd(&lo, &hi, &q, &cache, &tokens_of(n * n, dl, &r2), Some(&mut grads));
                let mut out = tensors_of(&grads);
                out.push(dlo.data);
                out.push(dhi.data);
                out
            },
        )
    }};
}

fn llava_hr_problem(rng: &mut Rng) -> Box<dyn GradProblem> {
    injection_problem!(
        rng,
        |rng: &mut Rng, dl, dh| LlavaHrParams::init(rng, dl, dh),
        ["w1", "w2"],
        llava_hr_forward,
        |_lo: &TokenSequence, hi: &FeatureMap, q: &LlavaHrParams, c, d: &TokenSequence, g| llava_hr_backward(hi, q, c, d, g)
    )
}

fn mini_gemini_problem(rng: &mut Rng) -> Box<dyn GradProblem> {
    injection_problem!(
        rng,
        |rng: &mut Rng, dl, dh| MiniGeminiParams::init(rng, dl, dh),
        ["wq", "wk", "wv", "wo"],
        |lo: &TokenSequence, hi: &FeatureMap, q: &MiniGeminiParams| mini_gemini_forward(lo, hi, 2, q),
        mini_gemini_backward
    )
}

fn deformable_problem(rng: &mut Rng) -> Box<dyn GradProblem> {
    injection_problem!(
        rng,
        |rng: &mut Rng, dl, dh| DeformableParams::init(rng, dl, dh, 3),
        ["w_off", "w_attn", "wo"],
        deformable_forward,
        deformable_backward
    )
}

fn project_problem(rng: &mut Rng) -> Box<dyn GradProblem> {
    let (len, i, h, o) = (5, 4, 6, 3);
    let p = ProjectorParams::init(rng, i, h, o);
    let x = uniform_vec(rng, len * i, 1.0);
    let r = uniform_vec(rng, len * o, 1.0);
    let (p2, r2) = (p.clone(), r.clone());
    let mut init = tensors_of(&p);
    init.push(x);
    problem(
        &["w1", "w2", "tokens"],
        init,
        move |g| {
            let q = with_tensors(&p, &g[..2]);
            dot(&project_forward(&tokens_of(len, i, &g[2]), &q).unwrap().0.data, &r)
        },
        move |g| {
            let q = with_tensors(&p2, &g[..2]);
            let (_, cache) = project_forward(&tokens_of(len, i, &g[2]), &q).unwrap();
            let mut grads = zeros_like(&q);
            let dx = project_backward(&q, &cache, &tokens_of(len, o, &r2), Some(&mut grads), true).unwrap();
            let mut out = tensors_of(&grads);
            out.push(dx.data);
            out
        },
    )
}

fn lm_problem(rng: &mut Rng) -> Box<dyn GradProblem> {
    let (len, d, tasks, vocab, task) = (4, 3, 3, 6, 1);
    let p = LmStubParams::init(rng, d, tasks, vocab);
    let x = uniform_vec(rng, len * d, 1.0);
    let r = uniform_vec(rng, vocab, 1.0);
    let (p2, r2) = (p.clone(), r.clone());
    let mut init = tensors_of(&p);
    init.push(x);
    problem(
        &["task_embed", "head", "tokens"],
        init,
        move |g| {
            let q = with_tensors(&p, &g[..2]);
            dot(&lm_forward_cached(&tokens_of(len, d, &g[2]), task, &q).unwrap().0, &r)
        },
        move |g| {
            let q = with_tensors(&p2, &g[..2]);
            let (_, cache) = lm_forward_cached(&tokens_of(len, d, &g[2]), task, &q).unwrap();
            let mut grads = zeros_like(&q);
            let dx = lm_backward(&q, &cache, &r2, Some(&mut grads), true).unwrap();
            let mut out = tensors_of(&grads);
            out.push(dx.data);
            out
        },
    )
}

fn loss_problem(rng: &mut Rng) -> Box<dyn GradProblem> {
    let z = uniform_vec(rng, 7, 3.0);
    problem(
        &["logits"],
        vec![z],
        |g| loss(&g[0], 2).unwrap().0,
        |g| vec![loss(&g[0], 2).unwrap().1],
    )
}

fn chain_problem(rng: &mut Rng, strategy: Strategy, seed: u64) -> Box<dyn GradProblem> {
    let lo = ExpertSpec {
        name: "lo".into(),
        arch: Arch::PatchLinear,
        native_resolution: 16,
        patch_or_stride: 4,
        embed_dim: 3,
        depth: 1,
        post_process: PostProcess::None,
        frozen_default: false,
    };
    let hi = ExpertSpec {
        name: "hi".into(),
        arch: Arch::ConvStack,
        native_resolution: 16,
        patch_or_stride: 2,
        embed_dim: 2,
        depth: 1,
        post_process: PostProcess::None,
        frozen_default: false,
    };
    let setups: Vec<ExpertSetup> = [lo, hi]
        .into_iter()
        .map(|spec| ExpertSetup {
            spec,
            adapt_resolution: None,
            frozen: None,
        })
        .collect();
    let mut fusion = FusionConfig::new(strategy);
    fusion.window = Some(2);
    fusion.n_points = 2;
    let dims = Dims {
        target_tokens: 16,
        projector_hidden: 4,
        lm_dim: 3,
        n_tasks: 3,
        vocab: 5,
    };
    let model = ModelAssembly::build(&setups, &fusion, &dims, seed).unwrap();
    let image = Image::new(16, (0..16 * 16 * 3).map(|_| rand::Rng::gen::<f64>(rng)).collect()).unwrap();
    Box::new(ModelProblem {
        model,
        image,
        task: (seed % 3) as usize,
        answer: 2,
        route: Route::Fused,
    })
}

fn broken_problem(rng: &mut Rng) -> Box<dyn GradProblem> {
    let x = uniform_vec(rng, 6, 1.0);
    problem(
        &["x"],
        vec![x],
        |g| g[0].iter().map(|v| v.tanh()).sum(),
        // d tanh = 1 - tanh^2, not 1 - tanh.
        |g| vec![g[0].iter().map(|v| 1.0 - v.tanh()).collect()],
    )
}

const OPS: &[&str] = &[
    "bilinear_resize",
    "bilinear_sample",
    "pixel_shuffle",
    "pixel_unshuffle",
    "linear",
    "normalize_tokens",
    "encode_patch_linear",
    "encode_conv_stack",
    "fuse_sequence_append",
    "fuse_channel_concat",
    "fuse_llava_hr",
    "fuse_mini_gemini",
    "fuse_deformable",
    "project",
    "lm_forward",
    "loss",
    "chain_sa",
    "chain_cc",
    "chain_lh",
    "chain_mg",
    "chain_da",
];

/// Every op covered by the `all` scope.
pub fn registered_ops() -> &'static [&'static str] {
    OPS
}

fn build(op_id: &str, seed: u64) -> Result<Box<dyn GradProblem>> {
    let rng = &mut seeded(seed);
    Ok(match op_id {
        "bilinear_resize" => resize_problem(rng),
        "bilinear_sample" => sample_problem(rng),
        "pixel_shuffle" => shuffle_problem(rng, ShuffleDirection::Shuffle),
        "pixel_unshuffle" => shuffle_problem(rng, ShuffleDirection::Unshuffle),
        "linear" => linear_problem(rng),
        "normalize_tokens" => normalize_problem(rng),
        "encode_patch_linear" => encode_problem(rng, Arch::PatchLinear, seed),
        "encode_conv_stack" => encode_problem(rng, Arch::ConvStack, seed),
        "fuse_sequence_append" => concat_problem(rng, Strategy::SA),
        "fuse_channel_concat" => concat_problem(rng, Strategy::CC),
        "fuse_llava_hr" => llava_hr_problem(rng),
        "fuse_mini_gemini" => mini_gemini_problem(rng),
        "fuse_deformable" => deformable_problem(rng),
        "project" => project_problem(rng),
        "lm_forward" => lm_problem(rng),
        "loss" => loss_problem(rng),
        "chain_sa" => chain_problem(rng, Strategy::SA, seed),
        "chain_cc" => chain_problem(rng, Strategy::CC, seed),
        "chain_lh" => chain_problem(rng, Strategy::LH, seed),
        "chain_mg" => chain_problem(rng, Strategy::MG, seed),
        "chain_da" => chain_problem(rng, Strategy::DA, seed),
        BROKEN_OP => broken_problem(rng),
        other => {
            return Err(Error::Lookup {
                kind: "op",
                name: other.to_string(),
            })
        }
    })
}

/// Central finite differences against the op's analytic gradient.
pub fn grad_check(op_id: &str, seed: u64, eps: f64) -> Result<GradReport> {
    if !(eps > 0.0) {
        return Err(crate::error::invalid(format!("eps must be positive, got {eps}")));
    }
    let p = build(op_id, seed)?;
    Ok(check_gradients(op_id, p.as_ref(), eps))
}

/// Worst report over `seeds` for one op.
pub fn grad_check_seeds(op_id: &str, seeds: &[u64], eps: f64) -> Result<GradReport> {
    let mut worst: Option<GradReport> = None;
    for &s in seeds {
        let r = grad_check(op_id, s, eps)?;
        let mut merged = worst.take().unwrap_or_else(|| GradReport {
            op_name: op_id.to_string(),
            max_rel_error: 0.0,
            per_parameter_errors: r.per_parameter_errors.iter().map(|(n, _)| (n.clone(), 0.0)).collect(),
        });
        for ((_, e), (_, new)) in merged.per_parameter_errors.iter_mut().zip(&r.per_parameter_errors) {
            *e = e.max(*new);
        }
        merged.max_rel_error = merged.max_rel_error.max(r.max_rel_error);
        worst = Some(merged);
    }
    worst.ok_or_else(|| crate::error::invalid("no seeds given"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_passes_on_three_seeds() {
        for op in registered_ops() {
            let r = grad_check_seeds(op, &DEFAULT_SEEDS, DEFAULT_EPS).unwrap();
            assert!(r.max_rel_error < GRAD_TOLERANCE, "{op}: {:?}", r.per_parameter_errors);
            assert!(!r.per_parameter_errors.is_empty());
        }
    }

    #[test]
    fn linear_op_is_exact_to_rounding() {
        for s in DEFAULT_SEEDS {
            assert!(grad_check("linear", s, DEFAULT_EPS).unwrap().max_rel_error < 1e-8);
        }
    }

    #[test]
    fn projector_is_near_exact() {
        assert!(grad_check("project", 7, DEFAULT_EPS).unwrap().max_rel_error < 1e-8);
    }

    #[test]
    fn deformable_report_covers_offsets() {
        let r = grad_check("fuse_deformable", 7, DEFAULT_EPS).unwrap();
        assert!(r.per_parameter_errors.iter().any(|(n, _)| n == "w_off"));
    }

    #[test]
    fn broken_backward_is_caught() {
        assert!(!registered_ops().contains(&BROKEN_OP));
        assert!(grad_check(BROKEN_OP, 7, DEFAULT_EPS).unwrap().max_rel_error > GRAD_TOLERANCE);
    }

    #[test]
    fn unknown_op_is_a_lookup_error() {
        assert!(matches!(grad_check("nope", 1, DEFAULT_EPS), Err(Error::Lookup { .. })));
        assert!(grad_check("loss", 1, 0.0).is_err());
    }

    #[test]
    fn max_is_max_of_parts() {
        let r = grad_check("fuse_mini_gemini", 8, DEFAULT_EPS).unwrap();
        let m = r.per_parameter_errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        assert_eq!(r.max_rel_error, m);
    }
}
