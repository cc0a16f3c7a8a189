//! Fusion strategies turning several expert outputs into one token stream.
//!
//! Sequence append (SA) and channel concatenation (CC) combine normalized
//! token streams. LLaVA-HR (LH), Mini-Gemini (MG) and deformable attention
//! (DA) inject the raw feature grid of each further expert into the base
//! expert's tokens, one expert at a time in list order.

mod concat;
mod deformable;
mod llava_hr;
mod mini_gemini;

pub use crate::tensorlab::TokenSequence;
pub use concat::{channel_concat_backward, fuse_channel_concat, fuse_sequence_append, sequence_append_backward};
pub use deformable::{
    deformable_backward, deformable_forward, fuse_deformable, reference_point, DeformableCache, DeformableParams,
};
pub use llava_hr::{fuse_llava_hr, llava_hr_backward, llava_hr_forward, LlavaHrCache, LlavaHrParams};
pub use mini_gemini::{fuse_mini_gemini, mini_gemini_backward, mini_gemini_forward, MiniGeminiCache, MiniGeminiParams};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Params, Rng};
use crate::tensorlab::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    SA,
    CC,
    LH,
    MG,
    DA,
}

impl Strategy {
    pub fn is_injection(self) -> bool {
        matches!(self, Self::LH | Self::MG | Self::DA)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

fn default_points() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: Strategy,
    /// Mini-Gemini window side.
    #[serde(default)]
    pub window: Option<usize>,
    /// Deformable attention sampling points per query.
    #[serde(default = "default_points")]
    pub n_points: usize,
}

impl FusionConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            window: None,
            n_points: default_points(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::Config("fusion.n_points must be at least 1".into()));
        }
        if self.strategy == Strategy::MG && self.window.map_or(true, |w| w == 0) {
            return Err(Error::Config("fusion.window must be a positive integer for MG".into()));
        }
        Ok(())
    }
}

/// Learned parameters of one injection step.
#[derive(Debug, Clone, PartialEq)]
pub enum Injector {
    LlavaHr(LlavaHrParams),
    MiniGemini(MiniGeminiParams),
    Deformable(DeformableParams),
}

impl Injector {
    pub fn init(cfg: &FusionConfig, rng: &mut Rng, lo_dim: usize, hi_dim: usize) -> Option<Self> {
        match cfg.strategy {
            Strategy::SA | Strategy::CC => None,
            Strategy::LH => Some(Self::LlavaHr(LlavaHrParams::init(rng, lo_dim, hi_dim))),
            Strategy::MG => Some(Self::MiniGemini(MiniGeminiParams::init(rng, lo_dim, hi_dim))),
            Strategy::DA => Some(Self::Deformable(DeformableParams::init(rng, lo_dim, hi_dim, cfg.n_points))),
        }
    }

    /// Zeroes the residual output map, making the injection an identity.
    pub fn zero_output(&mut self) {
        match self {
            Self::LlavaHr(p) => p.w2.w.fill(0.0),
            Self::MiniGemini(p) => p.wo.w.fill(0.0),
            Self::Deformable(p) => p.wo.w.fill(0.0),
        }
    }
}

impl Params for Injector {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Self::LlavaHr(p) => p.tensors(),
            Self::MiniGemini(p) => p.tensors(),
            Self::Deformable(p) => p.tensors(),
        }
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Self::LlavaHr(p) => p.tensors_mut(),
            Self::MiniGemini(p) => p.tensors_mut(),
            Self::Deformable(p) => p.tensors_mut(),
        }
    }
}

/// One expert's contribution: its normalized tokens and its raw grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutput {
    pub tokens: TokenSequence,
    pub map: FeatureMap,
}

#[derive(Debug, Clone)]
enum StepCache {
    LlavaHr(LlavaHrCache),
    MiniGemini(MiniGeminiCache),
    Deformable(DeformableCache),
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    /// Base stream entering each injection step.
    stream_inputs: Vec<TokenSequence>,
    steps: Vec<StepCache>,
}

/// Per-expert gradients from [`fuse_backward`]: tokens for SA/CC and the
/// base expert, raw grid for injected experts.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputGrad {
    Tokens(TokenSequence),
    Map(FeatureMap),
}

fn check_arity(cfg: &FusionConfig, outputs: usize, injectors: usize) -> Result<()> {
    if outputs == 0 {
        return Err(Error::Config("fusion needs at least one expert output".into()));
    }
    if cfg.strategy.is_injection() {
        if outputs < 2 {
            return Err(Error::Config(format!(
                "{} fusion needs a base expert plus at least one injected expert",
                cfg.strategy
            )));
        }
        if injectors != outputs - 1 {
            return Err(Error::Config(format!(
                "{} fusion over {outputs} experts needs {} injectors, got {injectors}",
                cfg.strategy,
                outputs - 1
            )));
        }
    }
    Ok(())
}

/// Dispatches to the configured strategy.
pub fn fuse(cfg: &FusionConfig, injectors: &[Injector], outputs: &[ExpertOutput]) -> Result<TokenSequence> {
    Ok(fuse_forward(cfg, injectors, outputs)?.0)
}

pub fn fuse_forward(
    cfg: &FusionConfig,
    injectors: &[Injector],
    outputs: &[ExpertOutput],
) -> Result<(TokenSequence, FusionCache)> {
    check_arity(cfg, outputs.len(), injectors.len())?;
    let tokens: Vec<TokenSequence> = match cfg.strategy {
        Strategy::SA | Strategy::CC => outputs.iter().map(|o| o.tokens.clone()).collect(),
        _ => Vec::new(),
    };
    let empty = FusionCache {
        stream_inputs: Vec::new(),
        steps: Vec::new(),
    };
    match cfg.strategy {
        Strategy::SA => return Ok((fuse_sequence_append(&tokens)?, empty)),
        Strategy::CC => return Ok((fuse_channel_concat(&tokens)?, empty)),
        _ => {}
    }
    let mut stream = outputs[0].tokens.clone();
    let mut cache = empty;
    for (inj, out) in injectors.iter().zip(&outputs[1..]) {
        let (next, step) = match (cfg.strategy, inj) {
            (Strategy::LH, Injector::LlavaHr(p)) => {
                let (o, c) = llava_hr_forward(&stream, &out.map, p)?;
                (o, StepCache::LlavaHr(c))
            }
            (Strategy::MG, Injector::MiniGemini(p)) => {
                let window = cfg.window.unwrap_or(0);
                let (o, c) = mini_gemini_forward(&stream, &out.map, window, p)?;
                (o, StepCache::MiniGemini(c))
            }
            (Strategy::DA, Injector::Deformable(p)) => {
                let (o, c) = deformable_forward(&stream, &out.map, p)?;
                (o, StepCache::Deformable(c))
            }
            (s, _) => return Err(Error::Config(format!("injector kind does not match strategy {s}"))),
        };
        cache.stream_inputs.push(std::mem::replace(&mut stream, next));
        cache.steps.push(step);
    }
    Ok((stream, cache))
}

/// Backward of [`fuse_forward`]. Returns one gradient per expert output.
pub fn fuse_backward(
    cfg: &FusionConfig,
    injectors: &[Injector],
    outputs: &[ExpertOutput],
    cache: &FusionCache,
    grad: &TokenSequence,
    mut grads: Option<&mut [Injector]>,
) -> Vec<OutputGrad> {
    match cfg.strategy {
        Strategy::SA => {
            let lengths: Vec<usize> = outputs.iter().map(|o| o.tokens.length).collect();
            return sequence_append_backward(&lengths, grad)
                .into_iter()
                .map(OutputGrad::Tokens)
                .collect();
        }
        Strategy::CC => {
            let dims: Vec<usize> = outputs.iter().map(|o| o.tokens.dim).collect();
            return channel_concat_backward(&dims, grad)
                .into_iter()
                .map(OutputGrad::Tokens)
                .collect();
        }
        _ => {}
    }
    let mut hi_grads = Vec::with_capacity(injectors.len());
    let mut dstream = grad.clone();
    for (k, inj) in injectors.iter().enumerate().rev() {
        let lo = &cache.stream_inputs[k];
        let hi = &outputs[k + 1].map;
        let g = grads.as_deref_mut().map(|g| &mut g[k]);
        let (dlo, dhi) = match (inj, &cache.steps[k]) {
            (Injector::LlavaHr(p), StepCache::LlavaHr(c)) => {
                let g = g.map(|g| match g {
                    Injector::LlavaHr(g) => g,
                    _ => unreachable!(),
                });
                llava_hr_backward(hi, p, c, &dstream, g)
            }
            (Injector::MiniGemini(p), StepCache::MiniGemini(c)) => {
                let g = g.map(|g| match g {
                    Injector::MiniGemini(g) => g,
                    _ => unreachable!(),
                });
                mini_gemini_backward(lo, hi, p, c, &dstream, g)
            }
            (Injector::Deformable(p), StepCache::Deformable(c)) => {
                let g = g.map(|g| match g {
                    Injector::Deformable(g) => g,
                    _ => unreachable!(),
                });
                deformable_backward(lo, hi, p, c, &dstream, g)
            }
            _ => unreachable!("cache does not match injector"),
        };
        hi_grads.push(OutputGrad::Map(dhi));
        dstream = dlo;
    }
    hi_grads.reverse();
    let mut all = vec![OutputGrad::Tokens(dstream)];
    all.extend(hi_grads);
    all
}
