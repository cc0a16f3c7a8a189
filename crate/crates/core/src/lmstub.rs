//! Projector and a pooled-classification stand-in for the language model.

use crate::error::{invalid, Error, Result};
use crate::params::{axpy, tanh_backward, tanh_in_place, uniform_vec, Linear, Params, Rng};
use crate::tensorlab::TokenSequence;

/// Two-layer perceptron applied per token: `y = tanh(x W1) W2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub w1: Linear,
    pub w2: Linear,
}

#[derive(Debug, Clone)]
pub struct ProjectorCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl ProjectorParams {
    pub fn init(rng: &mut Rng, in_dim: usize, hidden: usize, lm_dim: usize) -> Self {
        Self {
            w1: Linear::init(rng, in_dim, hidden),
            w2: Linear::init(rng, hidden, lm_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.w2.out_dim
    }
}

impl Params for ProjectorParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.w1.w, &self.w2.w]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w1.w, &mut self.w2.w]
    }
}

pub fn project(tokens: &TokenSequence, p: &ProjectorParams) -> Result<TokenSequence> {
    Ok(project_forward(tokens, p)?.0)
}

pub fn project_forward(tokens: &TokenSequence, p: &ProjectorParams) -> Result<(TokenSequence, ProjectorCache)> {
    if tokens.dim != p.in_dim() {
        return Err(invalid(format!(
            "projector expects dim {}, got {}",
            p.in_dim(),
            tokens.dim
        )));
    }
    let mut hidden = p.w1.apply_rows(&tokens.data);
    tanh_in_place(&mut hidden);
    let data = p.w2.apply_rows(&hidden);
    Ok((
        TokenSequence {
            length: tokens.length,
            dim: p.out_dim(),
            data,
        },
        ProjectorCache {
            input: tokens.data.clone(),
            hidden,
        },
    ))
}

/// Returns the gradient with respect to the input tokens when `want_input` is set.
pub fn project_backward(
    p: &ProjectorParams,
    cache: &ProjectorCache,
    grad_out: &TokenSequence,
    mut grads: Option<&mut ProjectorParams>,
    want_input: bool,
) -> Option<TokenSequence> {
    let mut dh = vec![0.0; cache.hidden.len()];
    p.w2.backward_rows(&cache.hidden, &grad_out.data, grads.as_deref_mut().map(|g| &mut g.w2), Some(&mut dh));
    let dz = tanh_backward(&cache.hidden, &dh);
    let mut dx = want_input.then(|| vec![0.0; cache.input.len()]);
    p.w1.backward_rows(&cache.input, &dz, grads.map(|g| &mut g.w1), dx.as_deref_mut());
    dx.map(|data| TokenSequence {
        length: grad_out.length,
        dim: p.in_dim(),
        data,
    })
}

/// Task embeddings plus a linear answer head.
#[derive(Debug, Clone, PartialEq)]
pub struct LmStubParams {
    pub lm_dim: usize,
    /// `n_tasks x lm_dim`.
    pub task_embed: Vec<f64>,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct LmCache {
    length: usize,
    task: usize,
    activation: Vec<f64>,
}

impl LmStubParams {
    pub fn init(rng: &mut Rng, lm_dim: usize, n_tasks: usize, vocab: usize) -> Self {
        let bound = 1.0 / (lm_dim as f64).sqrt();
        Self {
            lm_dim,
            task_embed: uniform_vec(rng, n_tasks * lm_dim, bound),
            head: Linear::init(rng, lm_dim, vocab),
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.task_embed.len() / self.lm_dim
    }

    pub fn vocab(&self) -> usize {
        self.head.out_dim
    }
}

impl Params for LmStubParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.task_embed, &self.head.w]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.task_embed, &mut self.head.w]
    }
}

/// `logits = tanh(mean_tokens(visual) + task_embed[task]) head`.
pub fn lm_forward(visual: &TokenSequence, task: usize, p: &LmStubParams) -> Result<Vec<f64>> {
    Ok(lm_forward_cached(visual, task, p)?.0)
}

pub fn lm_forward_cached(visual: &TokenSequence, task: usize, p: &LmStubParams) -> Result<(Vec<f64>, LmCache)> {
    if task >= p.n_tasks() {
        return Err(Error::Lookup {
            kind: "task id",
            name: task.to_string(),
        });
    }
    if visual.dim != p.lm_dim {
        return Err(invalid(format!(
            "language model expects dim {}, got {}",
            p.lm_dim, visual.dim
        )));
    }
    let d = p.lm_dim;
    let mut act = p.task_embed[task * d..(task + 1) * d].to_vec();
    let inv = 1.0 / visual.length as f64;
    for row in visual.data.chunks_exact(d) {
        axpy(inv, row, &mut act);
    }
    tanh_in_place(&mut act);
    let logits = p.head.apply(&act);
    Ok((
        logits,
        LmCache {
            length: visual.length,
            task,
            activation: act,
        },
    ))
}

/// Returns the gradient with respect to the visual tokens when `want_input` is set.
pub fn lm_backward(
    p: &LmStubParams,
    cache: &LmCache,
    grad_logits: &[f64],
    grads: Option<&mut LmStubParams>,
    want_input: bool,
) -> Option<TokenSequence> {
    let d = p.lm_dim;
    let mut dact = vec![0.0; d];
    let (gh, gt) = match grads {
        Some(g) => (Some(&mut g.head), Some(&mut g.task_embed)),
        None => (None, None),
    };
    p.head.backward_add(&cache.activation, grad_logits, gh, Some(&mut dact));
    let dz = tanh_backward(&cache.activation, &dact);
    if let Some(gt) = gt {
        axpy(1.0, &dz, &mut gt[cache.task * d..(cache.task + 1) * d]);
    }
    want_input.then(|| {
        let inv = 1.0 / cache.length as f64;
        let row: Vec<f64> = dz.iter().map(|v| v * inv).collect();
        TokenSequence {
            length: cache.length,
            dim: d,
            data: row.repeat(cache.length),
        }
    })
}

/// Cross-entropy of `answer` under `softmax(logits)`, with its gradient.
pub fn loss(logits: &[f64], answer: usize) -> Result<(f64, Vec<f64>)> {
    if answer >= logits.len() {
        return Err(invalid(format!(
            "answer {answer} outside vocabulary of size {}",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    let lse = m + sum.ln();
    let value = lse - logits[answer];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    grad[answer] -= 1.0;
    Ok((value, grad))
}
