//! Stage plans, the optimizer and the freeze-mask audit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{expert_group, projector_group, GroupMask, ModelAssembly, Route};
use crate::params::{seeded, zeros_like, Params};
use crate::synthbench::{Sample, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Caption-style single-task samples (color only).
    Pairs,
    /// The full three-task mix.
    Sft,
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::Pairs => "pairs",
            DataSource::Sft => "sft",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: String,
    pub data_source: DataSource,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub trainable_mask: GroupMask,
    pub route: Route,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

/// Steps and learning rates for each kind of stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    pub pairs_steps: usize,
    pub pairs_lr: f64,
    pub sft_steps: usize,
    pub sft_lr: f64,
    pub prealign_steps: usize,
    pub prealign_lr: f64,
    pub batch_size: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            pairs_steps: 500,
            pairs_lr: 1e-3,
            sft_steps: 2000,
            sft_lr: 1e-3,
            prealign_steps: 500,
            prealign_lr: 2e-5,
            batch_size: 32,
        }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<()> {
        let steps = [
            ("pairs_steps", self.pairs_steps),
            ("sft_steps", self.sft_steps),
            ("prealign_steps", self.prealign_steps),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in steps {
            if v == 0 {
                return Err(Error::Config(format!("training.{key} must be at least 1")));
            }
        }
        for (key, v) in [
            ("pairs_lr", self.pairs_lr),
            ("sft_lr", self.sft_lr),
            ("prealign_lr", self.prealign_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("training.{key} must be a nonnegative number")));
            }
        }
        Ok(())
    }
}

/// Baseline: projector on pairs, then everything on sft. Pre-alignment adds
/// one stage per expert (expert plus its own projector, LM frozen) first.
/// Frozen experts never enter a mask.
pub fn make_stage_plan(pre_align: bool, model: &ModelAssembly, budgets: &Budgets) -> Result<StagePlan> {
    budgets.validate()?;
    let frozen: BTreeSet<String> = model
        .experts
        .iter()
        .filter(|e| e.frozen)
        .map(|e| expert_group(&e.spec.name))
        .collect();
    let mut stages = Vec::new();
    if pre_align {
        for (i, e) in model.experts.iter().enumerate() {
            let mut mask: GroupMask = [expert_group(&e.spec.name), projector_group(&e.spec.name)].into();
            mask.retain(|g| !frozen.contains(g));
            stages.push(Stage {
                name: format!("prealign-{}", e.spec.name),
                data_source: DataSource::Sft,
                steps: budgets.prealign_steps,
                learning_rate: budgets.prealign_lr,
                batch_size: budgets.batch_size,
                trainable_mask: mask,
                route: Route::Solo(i),
            });
        }
    }
    stages.push(Stage {
        name: if pre_align { "joint-projector" } else { "pretrain" }.into(),
        data_source: DataSource::Pairs,
        steps: budgets.pairs_steps,
        learning_rate: budgets.pairs_lr,
        batch_size: budgets.batch_size,
        trainable_mask: model.connector_groups(),
        route: Route::Fused,
    });
    let mut all = model.fused_groups();
    all.retain(|g| !frozen.contains(g));
    stages.push(Stage {
        name: "sft".into(),
        data_source: DataSource::Sft,
        steps: budgets.sft_steps,
        learning_rate: budgets.sft_lr,
        batch_size: budgets.batch_size,
        trainable_mask: all,
        route: Route::Fused,
    });
    Ok(StagePlan { stages })
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments of one parameter group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected adaptive-moment step over a group's tensors.
pub fn update_params(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut MomentState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(invalid("parameter and gradient shapes differ"));
    }
    let total: usize = params.iter().map(|p| p.len()).sum();
    if state.m.is_empty() && state.t == 0 {
        state.m = vec![0.0; total];
        state.v = vec![0.0; total];
    } else if state.m.len() != total {
        return Err(invalid("optimizer state does not match parameter group size"));
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    let mut k = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, &gi) in p.iter_mut().zip(g.iter()) {
            let m = &mut state.m[k];
            let v = &mut state.v[k];
            *m = BETA1 * *m + (1.0 - BETA1) * gi;
            *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
            let step = lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            if lr != 0.0 {
                *x -= step;
            }
            k += 1;
        }
    }
    Ok(())
}

/// Samples a stage draws from.
pub fn stage_data<'a>(source: DataSource, data: &'a [Sample]) -> Vec<&'a Sample> {
    match source {
        DataSource::Sft => data.iter().collect(),
        DataSource::Pairs => data.iter().filter(|s| s.task == Task::Color).collect(),
    }
}

/// Runs `stage.steps` minibatch updates. Returns the updated model and the
/// mean minibatch loss of each step.
pub fn run_stage(model: &ModelAssembly, stage: &Stage, data: &[Sample], seed: u64) -> Result<(ModelAssembly, Vec<f64>)> {
    let ids: BTreeSet<String> = model.group_ids().into_iter().collect();
    if let Some(g) = stage.trainable_mask.iter().find(|g| !ids.contains(*g)) {
        return Err(Error::Lookup {
            kind: "parameter group",
            name: g.clone(),
        });
    }
    if stage.steps == 0 || stage.batch_size == 0 {
        return Err(invalid(format!("stage `{}` needs positive steps and batch size", stage.name)));
    }
    let pool = stage_data(stage.data_source, data);
    if pool.is_empty() {
        return Err(invalid(format!("stage `{}` has no {} data", stage.name, stage.data_source)));
    }
    let mut model = model.clone();
    let mut rng = seeded(seed);
    let mut grads = zeros_like(&model);
    let mut states: BTreeMap<String, MomentState> = BTreeMap::new();
    let mut losses = Vec::with_capacity(stage.steps);
    let scale = 1.0 / stage.batch_size as f64;
    for step in 0..stage.steps {
        grads.fill_zero();
        let mut total = 0.0;
        for _ in 0..stage.batch_size {
            let s = pool[rng.gen_range(0..pool.len())];
            total += model.loss_and_grad(
                &s.image(),
                s.task.id(),
                s.answer,
                stage.route,
                &stage.trainable_mask,
                &mut grads,
            )?;
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: stage.name.clone(),
                step,
            });
        }
        losses.push(loss);
        let grad_groups = grads.groups();
        for ((id, mut tensors), (_, g)) in model.groups_mut().into_iter().zip(grad_groups) {
            if !stage.trainable_mask.contains(&id) {
                continue;
            }
            let scaled: Vec<Vec<f64>> = g.iter().map(|t| t.iter().map(|v| v * scale).collect()).collect();
            let refs: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
            update_params(&mut tensors, &refs, states.entry(id).or_default(), stage.learning_rate)?;
        }
        if !model.is_finite() {
            return Err(Error::Diverged {
                stage: stage.name.clone(),
                step,
            });
        }
    }
    Ok((model, losses))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDiff {
    pub changed: BTreeSet<String>,
    pub max_abs_change: BTreeMap<String, f64>,
}

/// Bitwise per-group comparison of two identically wired assemblies.
pub fn snapshot_diff(before: &ModelAssembly, after: &ModelAssembly) -> Result<SnapshotDiff> {
    let a = before.groups();
    let b = after.groups();
    let wiring = |g: &[(String, Vec<&[f64]>)]| -> Vec<(String, Vec<usize>)> {
        g.iter().map(|(id, t)| (id.clone(), t.iter().map(|x| x.len()).collect())).collect()
    };
    if wiring(&a) != wiring(&b) {
        return Err(invalid("snapshots have different wiring"));
    }
    let mut changed = BTreeSet::new();
    let mut max_abs_change = BTreeMap::new();
    for ((id, ta), (_, tb)) in a.into_iter().zip(b) {
        let mut differs = false;
        let mut max = 0.0f64;
        for (x, y) in ta.iter().flat_map(|t| t.iter()).zip(tb.iter().flat_map(|t| t.iter())) {
            if x.to_bits() != y.to_bits() {
                differs = true;
                max = max.max((x - y).abs());
            }
        }
        if differs {
            changed.insert(id.clone());
        }
        max_abs_change.insert(id, max);
    }
    Ok(SnapshotDiff {
        changed,
        max_abs_change,
    })
}

/// Outcome of one executed stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: Stage,
    pub losses: Vec<f64>,
    pub diff: SnapshotDiff,
}

/// Executes every stage in order. Stage `k` draws minibatches from `seed + k`.
/// `on_stage` sees each record as soon as its stage finishes.
pub fn run_plan(
    model: &ModelAssembly,
    plan: &StagePlan,
    data: &[Sample],
    seed: u64,
    mut on_stage: impl FnMut(&StageRecord) -> Result<()>,
) -> Result<(ModelAssembly, Vec<StageRecord>)> {
    let mut current = model.clone();
    let mut records = Vec::with_capacity(plan.stages.len());
    for (k, stage) in plan.stages.iter().enumerate() {
        let (next, losses) = run_stage(&current, stage, data, seed.wrapping_add(k as u64))?;
        let record = StageRecord {
            stage: stage.clone(),
            losses,
            diff: snapshot_diff(&current, &next)?,
        };
        on_stage(&record)?;
        records.push(record);
        current = next;
    }
    Ok((current, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Strategy;
    use crate::model::testutil::{tiny_dims, tiny_fusion, tiny_setups};
    use crate::model::{LM_GROUP, FUSED_PROJECTOR_GROUP};
    use crate::synthbench::gen_dataset;

    fn model(strategy: Strategy) -> ModelAssembly {
        let mut dims = tiny_dims();
        dims.vocab = 16;
        ModelAssembly::build(&tiny_setups(), &tiny_fusion(strategy), &dims, 3).unwrap()
    }

    fn small_budgets() -> Budgets {
        Budgets {
            pairs_steps: 3,
            sft_steps: 3,
            prealign_steps: 2,
            batch_size: 4,
            ..Budgets::default()
        }
    }

    #[test]
    fn baseline_plan_masks() {
        let m = model(Strategy::CC);
        let plan = make_stage_plan(false, &m, &small_budgets()).unwrap();
        assert_eq!(plan.stages.len(), 2);
        assert_eq!(plan.stages[0].trainable_mask, [FUSED_PROJECTOR_GROUP.to_string()].into());
        assert_eq!(plan.stages[0].data_source, DataSource::Pairs);
        assert_eq!(plan.stages[1].trainable_mask, m.fused_groups());
    }

    #[test]
    fn prealign_plan_has_one_stage_per_expert() {
        let m = model(Strategy::CC);
        let plan = make_stage_plan(true, &m, &small_budgets()).unwrap();
        assert_eq!(plan.stages.len(), 4);
        let s1 = &plan.stages[0];
        assert_eq!(s1.trainable_mask, ["expert:lo".to_string(), "projector:lo".to_string()].into());
        assert!(!s1.trainable_mask.contains(LM_GROUP));
        assert_eq!(s1.route, Route::Solo(0));
        assert_eq!(plan.stages[1].route, Route::Solo(1));
    }

    #[test]
    fn frozen_experts_stay_out_of_masks() {
        let mut m = model(Strategy::CC);
        m.experts[0].frozen = true;
        for pre in [false, true] {
            let plan = make_stage_plan(pre, &m, &small_budgets()).unwrap();
            assert!(plan.stages.iter().all(|s| !s.trainable_mask.contains("expert:lo")));
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = MomentState::default();
        for _ in 0..5 {
            update_params(&mut [&mut p], &[&[0.0, 0.0]], &mut st, 0.1).unwrap();
        }
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_matches_closed_form() {
        for g in [0.3, -2.0, 1e-3] {
            let mut x = [0.7];
            let mut st = MomentState::default();
            let lr = 1e-2;
            for t in 1..=50 {
                update_params(&mut [&mut x], &[&[g]], &mut st, lr).unwrap();
                let expected = 0.7 - t as f64 * lr * g / (g.abs() + ADAM_EPS);
                assert!((x[0] - expected).abs() < 1e-12, "g={g} t={t}");
            }
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = vec![0.5; 3];
        let mut st = MomentState::default();
        update_params(&mut [&mut p], &[&[1.0, -4.0, f64::NAN]], &mut st, 0.0).unwrap();
        assert_eq!(p, [0.5; 3]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![0.5; 3];
        let mut st = MomentState::default();
        assert!(update_params(&mut [&mut p], &[&[1.0]], &mut st, 0.1).is_err());
    }

    fn stage(mask: GroupMask, steps: usize, lr: f64) -> Stage {
        Stage {
            name: "t".into(),
            data_source: DataSource::Sft,
            steps,
            learning_rate: lr,
            batch_size: 4,
            trainable_mask: mask,
            route: Route::Fused,
        }
    }

    #[test]
    fn empty_mask_changes_nothing() {
        let m = model(Strategy::LH);
        let d = gen_dataset(1, 12);
        let (after, losses) = run_stage(&m, &stage(GroupMask::new(), 2, 1e-2), &d, 0).unwrap();
        assert_eq!(after, m);
        assert_eq!(losses.len(), 2);
    }

    #[test]
    fn zero_lr_single_step() {
        let m = model(Strategy::DA);
        let d = gen_dataset(1, 12);
        let (after, losses) = run_stage(&m, &stage(m.fused_groups(), 1, 0.0), &d, 0).unwrap();
        assert_eq!(after, m);
        assert_eq!(losses.len(), 1);
    }

    #[test]
    fn runs_are_bit_deterministic() {
        let m = model(Strategy::MG);
        let d = gen_dataset(2, 30);
        let s = stage(m.fused_groups(), 3, 1e-2);
        let (a, la) = run_stage(&m, &s, &d, 5).unwrap();
        let (b, lb) = run_stage(&m, &s, &d, 5).unwrap();
        assert_eq!(la.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), lb.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(a, b);
    }

    #[test]
    fn only_masked_groups_change() {
        for s in [Strategy::SA, Strategy::CC, Strategy::LH, Strategy::MG, Strategy::DA] {
            let m = model(s);
            let d = gen_dataset(3, 30);
            let plan = make_stage_plan(true, &m, &small_budgets()).unwrap();
            let (_, records) = run_plan(&m, &plan, &d, 1, |_| Ok(())).unwrap();
            for r in &records {
                assert!(r.diff.changed.is_subset(&r.stage.trainable_mask), "{s} {}", r.stage.name);
                assert_eq!(r.diff.changed, r.stage.trainable_mask, "{s} {}", r.stage.name);
            }
        }
    }

    #[test]
    fn identical_snapshots_have_no_changes() {
        let m = model(Strategy::CC);
        let d = snapshot_diff(&m, &m.clone()).unwrap();
        assert!(d.changed.is_empty());
        assert!(d.max_abs_change.values().all(|&v| v == 0.0));
    }

    #[test]
    fn snapshot_of_different_wiring_rejected() {
        assert!(snapshot_diff(&model(Strategy::CC), &model(Strategy::SA)).is_err());
    }

    #[test]
    fn unknown_mask_group_rejected() {
        let m = model(Strategy::CC);
        let d = gen_dataset(1, 6);
        let err = run_stage(&m, &stage(["nope".to_string()].into(), 1, 0.1), &d, 0).unwrap_err();
        assert!(matches!(err, Error::Lookup { .. }));
    }

    #[test]
    fn nan_loss_reports_step() {
        let mut m = model(Strategy::CC);
        m.lm.head.w[0] = f64::NAN;
        let d = gen_dataset(1, 6);
        let err = run_stage(&m, &stage(m.fused_groups(), 3, 0.1), &d, 0).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    }

    #[test]
    fn pairs_stage_sees_only_color_samples() {
        let d = gen_dataset(1, 30);
        let pool = stage_data(DataSource::Pairs, &d);
        assert_eq!(pool.len(), 10);
        assert!(pool.iter().all(|s| s.task == Task::Color));
    }
}
