//! Full encoder -> fusion -> projector -> language-model chain.
//!
//! Parameters are organised in named groups, which is the unit freeze
//! masks and snapshot audits work with:
//!
//! | group id            | contents                                        |
//! |---------------------|-------------------------------------------------|
//! | `expert:<name>`     | one expert's encoder weights                    |
//! | `projector:<name>`  | that expert's own projector (SA, pre-alignment) |
//! | `projector`         | the projector after CC / injection fusion       |
//! | `fusion:<name>`     | injector that merges `<name>` into the base     |
//! | `lm`                | task embeddings and answer head                 |

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::experts::{
    build_expert, interpolate_pos_embed, normalize_tokens, normalize_tokens_backward, EncodeCache, ExpertParams,
    ExpertSpec, ExpertState, Image, PostProcess,
};
use crate::fusion::{fuse_backward, fuse_forward, ExpertOutput, FusionCache, FusionConfig, Injector, OutputGrad, Strategy};
use crate::lmstub::{
    lm_backward, lm_forward_cached, project_backward, project_forward, LmCache, LmStubParams, ProjectorCache,
    ProjectorParams,
};
use crate::params::{seeded, zeros_like, Params};
use crate::tensorlab::{FeatureMap, GradProblem, TokenSequence};

pub const LM_GROUP: &str = "lm";
pub const FUSED_PROJECTOR_GROUP: &str = "projector";

pub fn expert_group(name: &str) -> String {
    format!("expert:{name}")
}

pub fn projector_group(name: &str) -> String {
    format!("projector:{name}")
}

pub fn fusion_group(name: &str) -> String {
    format!("fusion:{name}")
}

pub type GroupMask = BTreeSet<String>;

/// Sizes shared by every assembly built from a run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Dims {
    pub target_tokens: usize,
    pub projector_hidden: usize,
    pub lm_dim: usize,
    pub n_tasks: usize,
    pub vocab: usize,
}

/// Which path a forward pass takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// All experts, fused.
    Fused,
    /// One expert through its own projector, as in pre-alignment.
    Solo(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelAssembly {
    pub experts: Vec<ExpertState>,
    pub fusion: FusionConfig,
    /// One per injected expert (`experts[1..]`) for LH/MG/DA.
    pub injectors: Vec<Injector>,
    pub expert_projectors: Vec<ProjectorParams>,
    /// Absent for SA, which projects each expert separately.
    pub fused_projector: Option<ProjectorParams>,
    pub lm: LmStubParams,
    pub target_tokens: usize,
}

/// Options applied to an expert right after initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSetup {
    pub spec: ExpertSpec,
    /// Interpolate position embeddings so the expert accepts this resolution.
    pub adapt_resolution: Option<usize>,
    pub frozen: Option<bool>,
}

fn normalized_dim(e: &ExpertState) -> usize {
    match e.spec.post_process {
        PostProcess::PixelUnshuffle(r) => e.embed_dim() * r * r,
        _ => e.embed_dim(),
    }
}

impl ModelAssembly {
    /// Builds every component from one seed. Sub-streams are derived per
    /// component so adding an expert does not perturb the others.
    pub fn build(setups: &[ExpertSetup], fusion: &FusionConfig, dims: &Dims, seed: u64) -> Result<Self> {
        if setups.is_empty() {
            return Err(Error::Config("at least one expert is required".into()));
        }
        fusion.validate()?;
        let mut names = BTreeSet::new();
        let mut experts = Vec::with_capacity(setups.len());
        for (i, s) in setups.iter().enumerate() {
            if !names.insert(s.spec.name.clone()) {
                return Err(Error::Config(format!("duplicate expert name `{}`", s.spec.name)));
            }
            let mut e = build_expert(&s.spec, seed.wrapping_add(1000 + i as u64))?;
            if let Some(res) = s.adapt_resolution {
                if res % e.spec.patch_or_stride != 0 {
                    return Err(Error::Config(format!(
                        "expert `{}`: adapt_resolution {res} not divisible by patch size {}",
                        e.spec.name, e.spec.patch_or_stride
                    )));
                }
                if let ExpertParams::Patch(_) = e.params {
                    e = interpolate_pos_embed(&e, res / e.spec.patch_or_stride)?;
                } else if res != e.spec.native_resolution {
                    return Err(Error::Config(format!(
                        "expert `{}`: conv-stack experts cannot be adapted to {res}",
                        e.spec.name
                    )));
                }
            }
            if let Some(f) = s.frozen {
                e.frozen = f;
            }
            experts.push(e);
        }
        let g = (dims.target_tokens as f64).sqrt().round() as usize;
        if g * g != dims.target_tokens || g == 0 {
            return Err(Error::Config(format!(
                "target token count {} is not a perfect square",
                dims.target_tokens
            )));
        }
        let mut rng = seeded(seed.wrapping_add(1));
        let expert_projectors = experts
            .iter()
            .map(|e| ProjectorParams::init(&mut rng, normalized_dim(e), dims.projector_hidden, dims.lm_dim))
            .collect();
        let mut rng = seeded(seed.wrapping_add(2));
        let fused_in = match fusion.strategy {
            Strategy::SA => None,
            Strategy::CC => Some(experts.iter().map(normalized_dim).sum()),
            _ => Some(normalized_dim(&experts[0])),
        };
        let fused_projector =
            fused_in.map(|d| ProjectorParams::init(&mut rng, d, dims.projector_hidden, dims.lm_dim));
        let mut rng = seeded(seed.wrapping_add(3));
        let lo_dim = normalized_dim(&experts[0]);
        let injectors: Vec<Injector> = if fusion.strategy.is_injection() {
            if experts.len() < 2 {
                return Err(Error::Config(format!(
                    "{} fusion needs at least two experts",
                    fusion.strategy
                )));
            }
            experts[1..]
                .iter()
                .filter_map(|e| Injector::init(fusion, &mut rng, lo_dim, e.embed_dim()))
                .collect()
        } else {
            Vec::new()
        };
        if fusion.strategy == Strategy::MG {
            let w = fusion.window.unwrap_or(0);
            for e in &experts[1..] {
                if e.output_side() != w * g {
                    return Err(Error::Config(format!(
                        "MG window {w} inconsistent: expert `{}` grid side {} != window x token grid side {g}",
                        e.spec.name,
                        e.output_side()
                    )));
                }
            }
        }
        if fusion.strategy == Strategy::LH {
            for e in &experts[1..] {
                if e.output_side() % g != 0 {
                    return Err(Error::Config(format!(
                        "LH needs expert `{}` grid side {} to be a multiple of token grid side {g}",
                        e.spec.name,
                        e.output_side()
                    )));
                }
            }
        }
        let mut rng = seeded(seed.wrapping_add(4));
        let lm = LmStubParams::init(&mut rng, dims.lm_dim, dims.n_tasks, dims.vocab);
        Ok(Self {
            experts,
            fusion: fusion.clone(),
            injectors,
            expert_projectors,
            fused_projector,
            lm,
            target_tokens: dims.target_tokens,
        })
    }

    pub fn group_ids(&self) -> Vec<String> {
        self.groups().into_iter().map(|(id, _)| id).collect()
    }

    /// Every parameter group with its tensors, in a fixed order.
    pub fn groups(&self) -> Vec<(String, Vec<&[f64]>)> {
        let mut out = Vec::new();
        for e in &self.experts {
            out.push((expert_group(&e.spec.name), e.params.tensors()));
        }
        for (e, p) in self.experts.iter().zip(&self.expert_projectors) {
            out.push((projector_group(&e.spec.name), p.tensors()));
        }
        if let Some(p) = &self.fused_projector {
            out.push((FUSED_PROJECTOR_GROUP.to_string(), p.tensors()));
        }
        for (e, inj) in self.experts[1..].iter().zip(&self.injectors) {
            out.push((fusion_group(&e.spec.name), inj.tensors()));
        }
        out.push((LM_GROUP.to_string(), self.lm.tensors()));
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, Vec<&mut [f64]>)> {
        let mut out = Vec::new();
        let names: Vec<String> = self.experts.iter().map(|e| e.spec.name.clone()).collect();
        for (e, n) in self.experts.iter_mut().zip(&names) {
            out.push((expert_group(n), e.params.tensors_mut()));
        }
        for (p, n) in self.expert_projectors.iter_mut().zip(&names) {
            out.push((projector_group(n), p.tensors_mut()));
        }
        if let Some(p) = &mut self.fused_projector {
            out.push((FUSED_PROJECTOR_GROUP.to_string(), p.tensors_mut()));
        }
        for (inj, n) in self.injectors.iter_mut().zip(&names[1..]) {
            out.push((fusion_group(n), inj.tensors_mut()));
        }
        out.push((LM_GROUP.to_string(), self.lm.tensors_mut()));
        out
    }

    /// Groups a fused forward pass depends on (excludes per-expert projectors unless SA).
    pub fn fused_groups(&self) -> GroupMask {
        let mut m: GroupMask = self.experts.iter().map(|e| expert_group(&e.spec.name)).collect();
        m.extend(self.connector_groups());
        m.extend(self.experts[1..].iter().take(self.injectors.len()).map(|e| fusion_group(&e.spec.name)));
        m.insert(LM_GROUP.into());
        m
    }

    /// The projector group(s) of the fused path.
    pub fn connector_groups(&self) -> GroupMask {
        if self.fused_projector.is_some() {
            [FUSED_PROJECTOR_GROUP.to_string()].into()
        } else {
            self.experts.iter().map(|e| projector_group(&e.spec.name)).collect()
        }
    }

    fn prepare(&self, e: &ExpertState, image: &Image) -> Result<Image> {
        image.resized(e.accepted_resolution())
    }

    pub fn forward(&self, image: &Image, task: usize, route: Route) -> Result<(Vec<f64>, Trace)> {
        let mut trace = Trace::default();
        let visual = match route {
            Route::Solo(i) => {
                let e = self
                    .experts
                    .get(i)
                    .ok_or_else(|| Error::Lookup { kind: "expert index", name: i.to_string() })?;
                let (map, cache) = e.encode_cached(&self.prepare(e, image)?)?;
                let tokens = normalize_tokens(&map, self.target_tokens, e.spec.post_process)?;
                let (v, pc) = project_forward(&tokens, &self.expert_projectors[i])?;
                trace.experts.push(Some(ExpertTrace { shape: map.shape(), cache }));
                trace.projectors.push(Some(pc));
                v
            }
            Route::Fused => {
                let mut outputs = Vec::with_capacity(self.experts.len());
                for e in &self.experts {
                    let (map, cache) = e.encode_cached(&self.prepare(e, image)?)?;
                    let tokens = normalize_tokens(&map, self.target_tokens, e.spec.post_process)?;
                    trace.experts.push(Some(ExpertTrace { shape: map.shape(), cache }));
                    outputs.push(ExpertOutput { tokens, map });
                }
                let v = match &self.fused_projector {
                    None => {
                        let mut projected = Vec::with_capacity(outputs.len());
                        for (o, p) in outputs.iter().zip(&self.expert_projectors) {
                            let (v, pc) = project_forward(&o.tokens, p)?;
                            trace.projectors.push(Some(pc));
                            projected.push(ExpertOutput {
                                tokens: v,
                                map: FeatureMap::zeros(1, 1, 1),
                            });
                        }
                        let (v, fc) = fuse_forward(&self.fusion, &self.injectors, &projected)?;
                        trace.fusion = Some(fc);
                        trace.projected_lengths = projected.iter().map(|p| p.tokens.length).collect();
                        v
                    }
                    Some(p) => {
                        let (fused, fc) = fuse_forward(&self.fusion, &self.injectors, &outputs)?;
                        let (v, pc) = project_forward(&fused, p)?;
                        trace.fusion = Some(fc);
                        trace.projectors.push(Some(pc));
                        v
                    }
                };
                trace.outputs = outputs;
                v
            }
        };
        let (logits, lc) = lm_forward_cached(&visual, task, &self.lm)?;
        trace.route = Some(route);
        trace.lm = Some(lc);
        Ok((logits, trace))
    }

    /// Accumulates parameter gradients of groups in `mask` into `grads`.
    pub fn backward(&self, trace: &Trace, grad_logits: &[f64], mask: &GroupMask, grads: &mut ModelAssembly) {
        let route = trace.route.expect("trace from forward");
        let lm_cache = trace.lm.as_ref().expect("trace from forward");
        let expert_live: Vec<bool> = self
            .experts
            .iter()
            .map(|e| mask.contains(&expert_group(&e.spec.name)))
            .collect();
        let any_expert = match route {
            Route::Solo(i) => expert_live[i],
            Route::Fused => expert_live.iter().any(|&b| b),
        };
        let fusion_live = self.experts[1..]
            .iter()
            .take(self.injectors.len())
            .any(|e| mask.contains(&fusion_group(&e.spec.name)));
        let below_projector = any_expert || (route == Route::Fused && fusion_live);
        let need_visual = below_projector
            || match route {
                Route::Solo(i) => mask.contains(&projector_group(&self.experts[i].spec.name)),
                Route::Fused => self.connector_groups().iter().any(|g| mask.contains(g)),
            };
        let glm = mask.contains(LM_GROUP).then_some(&mut grads.lm);
        let Some(dvisual) = lm_backward(&self.lm, lm_cache, grad_logits, glm, need_visual) else {
            return;
        };
        match route {
            Route::Solo(i) => {
                let name = &self.experts[i].spec.name;
                let gp = mask
                    .contains(&projector_group(name))
                    .then_some(&mut grads.expert_projectors[i]);
                let pc = trace.projectors[0].as_ref().expect("projector cache");
                let dtok = project_backward(&self.expert_projectors[i], pc, &dvisual, gp, any_expert);
                if let Some(dtok) = dtok {
                    self.expert_backward(i, trace, &dtok, grads);
                }
            }
            Route::Fused => {
                let fcache = trace.fusion.as_ref().expect("fusion cache");
                match &self.fused_projector {
                    None => {
                        let piece_grads = fuse_backward(
                            &self.fusion,
                            &self.injectors,
                            &placeholder_outputs(&trace.projected_lengths, dvisual.dim),
                            fcache,
                            &dvisual,
                            None,
                        );
                        for (i, pg) in piece_grads.into_iter().enumerate() {
                            let OutputGrad::Tokens(dv) = pg else { unreachable!() };
                            let name = &self.experts[i].spec.name;
                            let gp = mask
                                .contains(&projector_group(name))
                                .then_some(&mut grads.expert_projectors[i]);
                            let pc = trace.projectors[i].as_ref().expect("projector cache");
                            if let Some(dtok) = project_backward(&self.expert_projectors[i], pc, &dv, gp, expert_live[i]) {
                                self.expert_backward(i, trace, &dtok, grads);
                            }
                        }
                    }
                    Some(p) => {
                        let gp = mask
                            .contains(FUSED_PROJECTOR_GROUP)
                            .then(|| grads.fused_projector.as_mut().expect("grad container"));
                        let pc = trace.projectors[0].as_ref().expect("projector cache");
                        let Some(dfused) = project_backward(p, pc, &dvisual, gp, below_projector) else {
                            return;
                        };
                        let mut inj_grads = grads.injectors.clone();
                        inj_grads.iter_mut().for_each(Params::fill_zero);
                        let per_expert = fuse_backward(
                            &self.fusion,
                            &self.injectors,
                            &trace.outputs,
                            fcache,
                            &dfused,
                            fusion_live.then_some(inj_grads.as_mut_slice()),
                        );
                        if fusion_live {
                            for (k, (g, e)) in grads.injectors.iter_mut().zip(&self.experts[1..]).enumerate() {
                                if mask.contains(&fusion_group(&e.spec.name)) {
                                    g.add_assign(&inj_grads[k]);
                                }
                            }
                        }
                        for (i, g) in per_expert.into_iter().enumerate() {
                            if !expert_live[i] {
                                continue;
                            }
                            match g {
                                OutputGrad::Tokens(dt) => self.expert_backward(i, trace, &dt, grads),
                                OutputGrad::Map(dm) => self.expert_map_backward(i, trace, &dm, grads),
                            }
                        }
                    }
                }
            }
        }
    }

    fn expert_backward(&self, i: usize, trace: &Trace, dtokens: &TokenSequence, grads: &mut ModelAssembly) {
        let e = &self.experts[i];
        let et = trace.experts_for(i);
        let dmap = normalize_tokens_backward(et.shape, e.spec.post_process, dtokens)
            .expect("shapes recorded by forward");
        self.expert_map_backward(i, trace, &dmap, grads);
    }

    fn expert_map_backward(&self, i: usize, trace: &Trace, dmap: &FeatureMap, grads: &mut ModelAssembly) {
        let et = trace.experts_for(i);
        self.experts[i].encode_backward(&et.cache, dmap, Some(&mut grads.experts[i].params), false);
    }

    /// Loss and accumulated gradient for one sample.
    pub fn loss_and_grad(
        &self,
        image: &Image,
        task: usize,
        answer: usize,
        route: Route,
        mask: &GroupMask,
        grads: &mut ModelAssembly,
    ) -> Result<f64> {
        let (logits, trace) = self.forward(image, task, route)?;
        let (l, dl) = crate::lmstub::loss(&logits, answer)?;
        self.backward(&trace, &dl, mask, grads);
        Ok(l)
    }

    /// Each group's tensors flattened, in [`Self::groups`] order.
    pub fn group_vectors(&self) -> Vec<Vec<f64>> {
        self.groups().into_iter().map(|(_, t)| t.concat()).collect()
    }

    pub fn load_group_vectors(&mut self, values: &[Vec<f64>]) {
        for ((_, tensors), v) in self.groups_mut().into_iter().zip(values) {
            let mut off = 0;
            for t in tensors {
                t.copy_from_slice(&v[off..off + t.len()]);
                off += t.len();
            }
        }
    }

    pub fn logits(&self, image: &Image, task: usize) -> Result<Vec<f64>> {
        Ok(self.forward(image, task, Route::Fused)?.0)
    }
}

impl Params for ModelAssembly {
    fn tensors(&self) -> Vec<&[f64]> {
        self.groups().into_iter().flat_map(|(_, t)| t).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.groups_mut().into_iter().flat_map(|(_, t)| t).collect()
    }
}

/// Loss of one sample as a function of every parameter group.
#[derive(Debug, Clone)]
pub struct ModelProblem {
    pub model: ModelAssembly,
    pub image: Image,
    pub task: usize,
    pub answer: usize,
    pub route: Route,
}

impl ModelProblem {
    fn with(&self, groups: &[Vec<f64>]) -> ModelAssembly {
        let mut m = self.model.clone();
        m.load_group_vectors(groups);
        m
    }
}

impl GradProblem for ModelProblem {
    fn group_names(&self) -> Vec<String> {
        self.model.group_ids()
    }
    fn initial(&self) -> Vec<Vec<f64>> {
        self.model.group_vectors()
    }
    fn value(&self, groups: &[Vec<f64>]) -> f64 {
        let m = self.with(groups);
        let (logits, _) = m.forward(&self.image, self.task, self.route).expect("valid problem");
        crate::lmstub::loss(&logits, self.answer).expect("valid answer").0
    }
    fn gradient(&self, groups: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let m = self.with(groups);
        let mut g = zeros_like(&m);
        let mask: GroupMask = m.group_ids().into_iter().collect();
        m.loss_and_grad(&self.image, self.task, self.answer, self.route, &mask, &mut g)
            .expect("valid problem");
        g.group_vectors()
    }
}

fn placeholder_outputs(lengths: &[usize], dim: usize) -> Vec<ExpertOutput> {
    lengths
        .iter()
        .map(|&l| ExpertOutput {
            tokens: TokenSequence::zeros(l, dim),
            map: FeatureMap::zeros(1, 1, 1),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExpertTrace {
    shape: (usize, usize, usize),
    cache: EncodeCache,
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    route: Option<Route>,
    experts: Vec<Option<ExpertTrace>>,
    outputs: Vec<ExpertOutput>,
    fusion: Option<FusionCache>,
    projectors: Vec<Option<ProjectorCache>>,
    projected_lengths: Vec<usize>,
    lm: Option<LmCache>,
}

impl Trace {
    fn experts_for(&self, i: usize) -> &ExpertTrace {
        let slot = match self.route {
            Some(Route::Solo(_)) => 0,
            _ => i,
        };
        self.experts[slot].as_ref().expect("expert trace")
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::experts::testutil::{conv_spec, patch_spec};

    pub fn tiny_dims() -> Dims {
        Dims {
            target_tokens: 16,
            projector_hidden: 4,
            lm_dim: 3,
            n_tasks: 3,
            vocab: 5,
        }
    }

    /// lo: 16px patch-4 expert (4x4 grid); hi: 16px conv expert (8x8 grid).
    pub fn tiny_setups() -> Vec<ExpertSetup> {
        vec![
            ExpertSetup {
                spec: patch_spec(16, 4, 3, 1),
                adapt_resolution: None,
                frozen: None,
            },
            ExpertSetup {
                spec: conv_spec(16, 2, 1),
                adapt_resolution: None,
                frozen: None,
            },
        ]
    }

    pub fn tiny_fusion(strategy: Strategy) -> FusionConfig {
        let mut f = FusionConfig::new(strategy);
        f.n_points = 2;
        if strategy == Strategy::MG {
            f.window = Some(2);
        }
        f
    }

    pub fn tiny_model(strategy: Strategy, seed: u64) -> ModelAssembly {
        ModelAssembly::build(&tiny_setups(), &tiny_fusion(strategy), &tiny_dims(), seed).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::experts::testutil::random_image;
    use crate::tensorlab::check_gradients;

    const ALL: [Strategy; 5] = [Strategy::SA, Strategy::CC, Strategy::LH, Strategy::MG, Strategy::DA];

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for s in ALL {
            for seed in 0..3 {
                let problem = ModelProblem {
                    model: tiny_model(s, seed),
                    image: random_image(seed + 50, 16),
                    task: (seed % 3) as usize,
                    answer: 2,
                    route: Route::Fused,
                };
                let r = check_gradients("chain", &problem, 1e-5);
                assert!(r.max_rel_error < 1e-4, "{s} seed {seed}: {:?}", r.per_parameter_errors);
            }
        }
    }

    #[test]
    fn solo_route_gradients_match_finite_differences() {
        for i in 0..2 {
            let problem = ModelProblem {
                model: tiny_model(Strategy::CC, 4),
                image: random_image(9, 16),
                task: 1,
                answer: 4,
                route: Route::Solo(i),
            };
            let r = check_gradients("solo", &problem, 1e-5);
            assert!(r.max_rel_error < 1e-4, "{:?}", r.per_parameter_errors);
        }
    }

    #[test]
    fn every_used_group_receives_gradient() {
        for s in ALL {
            let m = tiny_model(s, 1);
            let mut g = zeros_like(&m);
            let mask: GroupMask = m.group_ids().into_iter().collect();
            m.loss_and_grad(&random_image(3, 16), 0, 1, Route::Fused, &mask, &mut g).unwrap();
            let used = m.fused_groups();
            for (id, t) in g.groups() {
                let nonzero = t.iter().any(|x| x.iter().any(|&v| v != 0.0));
                assert_eq!(nonzero, used.contains(&id), "{s}: group {id}");
            }
        }
    }

    #[test]
    fn masked_groups_get_no_gradient() {
        let m = tiny_model(Strategy::DA, 2);
        let mut g = zeros_like(&m);
        let mask: GroupMask = [FUSED_PROJECTOR_GROUP.to_string()].into();
        m.loss_and_grad(&random_image(3, 16), 0, 1, Route::Fused, &mask, &mut g).unwrap();
        for (id, t) in g.groups() {
            let nonzero = t.iter().any(|x| x.iter().any(|&v| v != 0.0));
            assert_eq!(nonzero, id == FUSED_PROJECTOR_GROUP, "group {id}");
        }
    }

    #[test]
    fn group_ids_follow_strategy() {
        let ids = tiny_model(Strategy::SA, 0).group_ids();
        assert_eq!(ids, ["expert:lo", "expert:hi", "projector:lo", "projector:hi", "lm"]);
        let ids = tiny_model(Strategy::MG, 0).group_ids();
        assert_eq!(
            ids,
            ["expert:lo", "expert:hi", "projector:lo", "projector:hi", "projector", "fusion:hi", "lm"]
        );
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(tiny_model(Strategy::DA, 5), tiny_model(Strategy::DA, 5));
        assert_ne!(tiny_model(Strategy::DA, 5), tiny_model(Strategy::DA, 6));
    }

    #[test]
    fn inconsistent_mg_window_rejected() {
        let mut f = tiny_fusion(Strategy::MG);
        f.window = Some(4);
        let err = ModelAssembly::build(&tiny_setups(), &f, &tiny_dims(), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn injection_needs_two_experts() {
        let one = &tiny_setups()[..1];
        assert!(ModelAssembly::build(one, &tiny_fusion(Strategy::LH), &tiny_dims(), 0).is_err());
        assert!(ModelAssembly::build(one, &tiny_fusion(Strategy::CC), &tiny_dims(), 0).is_ok());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = tiny_setups();
        s[1].spec.name = "lo".into();
        assert!(ModelAssembly::build(&s, &tiny_fusion(Strategy::CC), &tiny_dims(), 0).is_err());
    }

    #[test]
    fn adapted_expert_takes_larger_images() {
        let mut s = tiny_setups();
        s[0].adapt_resolution = Some(32);
        let m = ModelAssembly::build(&s, &tiny_fusion(Strategy::CC), &tiny_dims(), 0).unwrap();
        assert_eq!(m.experts[0].accepted_resolution(), 32);
        assert_eq!(m.logits(&random_image(1, 16), 0).unwrap().len(), 5);
    }

    #[test]
    fn load_round_trips_group_vectors() {
        let a = tiny_model(Strategy::LH, 1);
        let mut b = tiny_model(Strategy::LH, 2);
        b.load_group_vectors(&a.group_vectors());
        assert_eq!(a, b);
    }
}
