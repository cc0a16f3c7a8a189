//! One PASS/FAIL line per acceptance criterion. Exits nonzero when any fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Deserialize;
use visionmix::commands::{self, TrainSummary};
use visionmix::config::RunConfig;
use visionmix::experts::{build_expert, normalize_tokens, tile_encode, Arch, ExpertParams, ExpertSpec, Image, PostProcess};
use visionmix::fusion::{
    fuse_channel_concat, fuse_deformable, fuse_llava_hr, fuse_mini_gemini, fuse_sequence_append, mini_gemini_forward,
    DeformableParams, LlavaHrParams, MiniGeminiParams, TokenSequence,
};
use visionmix::model::{FUSED_PROJECTOR_GROUP, LM_GROUP};
use visionmix::params::{seeded, Linear};
use visionmix::registry::{grad_check_seeds, registered_ops, DEFAULT_EPS, DEFAULT_SEEDS, GRAD_TOLERANCE};
use visionmix::selector::AVG_TOLERANCE;
use visionmix::synthbench::Task;
use visionmix::tensorlab::{bilinear_resize, pixel_shuffle, FeatureMap, ShuffleDirection};

type Check = Result<String, String>;

#[derive(Deserialize)]
struct Pins {
    seed: u64,
    complementary_margin: f64,
    unfreeze_margin: f64,
}

fn pins() -> Pins {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/pins.toml");
    toml::from_str(&fs::read_to_string(path).expect("pins fixture")).expect("pins parse")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load_config(name: &str, seed: u64) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::load(&configs_dir().join(name)).map_err(|e| e.to_string())?;
    cfg.seed = seed;
    Ok(cfg)
}

fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary, String> {
    commands::train(cfg, out).map_err(|e| format!("training failed: {e}"))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn avg_reproduction() -> Check {
    let (tables, outcome) = commands::repro_avg(&commands::bundled_tables()).map_err(|e| e.to_string())?;
    let rows: Vec<usize> = tables.iter().map(|t| t.checks.len()).collect();
    ensure(rows == [7, 12, 9, 11], || format!("row counts {rows:?}"))?;
    let worst = tables
        .iter()
        .flat_map(|t| &t.checks)
        .map(|c| c.abs_diff)
        .fold(0.0, f64::max);
    ensure(outcome.passed && worst <= AVG_TOLERANCE, || format!("max |diff| {worst:.3}"))?;
    Ok(format!("{} rows, max |diff| {worst:.2}", rows.iter().sum::<usize>()))
}

fn selection_path() -> Check {
    let (h, _) = commands::select(&commands::fixtures_dir().join("table5.csv")).map_err(|e| e.to_string())?;
    let expected = [("ABF", 665.3), ("ABFE", 666.1), ("ABFEC", 666.5), ("ABFECD", 656.3)];
    ensure(h.rounds.len() == expected.len(), || format!("{} rounds", h.rounds.len()))?;
    for (round, (labels, avg)) in h.rounds.iter().zip(expected) {
        let want: BTreeSet<String> = labels.chars().map(String::from).collect();
        let got: BTreeSet<String> = round.retained.iter().cloned().collect();
        ensure(got == want && (round.retained_avg - avg).abs() <= 1.0, || {
            format!("round winner {} = {:.1}, expected {labels} = {avg}", round.retained.join("+"), round.retained_avg)
        })?;
    }
    let rec: BTreeSet<&str> = h.recommendation.iter().map(String::as_str).collect();
    ensure(rec == BTreeSet::from(["A", "B", "C", "E", "F"]), || format!("recommendation {rec:?}"))?;
    ensure((h.recommendation_avg - 666.5).abs() <= 1.0, || format!("recommendation avg {}", h.recommendation_avg))?;
    let table = visionmix::selector::load_score_fixture(&commands::fixtures_dir().join("table5.csv")).map_err(|e| e.to_string())?;
    let row = table.find(&h.recommendation).ok_or("recommendation row missing")?;
    let names: BTreeSet<&str> = row.encoders.iter().map(String::as_str).collect();
    ensure(
        names == BTreeSet::from(["CLIP", "ConvNeXt", "EVA-02", "Pix2Struct", "SAM"]),
        || format!("recommended encoders {names:?}"),
    )?;
    Ok(format!("F -> E -> C -> D, recommendation {} = {:.1}", h.recommendation.join("+"), h.recommendation_avg))
}

fn gradient_suite() -> Check {
    let ops = registered_ops();
    let required = [
        "bilinear_resize",
        "bilinear_sample",
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
    ];
    for r in required {
        ensure(ops.contains(&r), || format!("op {r} not registered"))?;
    }
    ensure(DEFAULT_SEEDS.len() >= 3 && DEFAULT_EPS == 1e-5, || "seeds or eps off".into())?;
    let mut worst = (String::new(), 0.0);
    for op in ops {
        let r = grad_check_seeds(op, &DEFAULT_SEEDS, DEFAULT_EPS).map_err(|e| e.to_string())?;
        if r.max_rel_error >= worst.1 {
            worst = (op.to_string(), r.max_rel_error);
        }
    }
    ensure(worst.1 < GRAD_TOLERANCE, || format!("{} rel error {:.3e}", worst.0, worst.1))?;
    Ok(format!("{} ops x {} seeds, worst {} {:.2e}", ops.len(), DEFAULT_SEEDS.len(), worst.0, worst.1))
}

fn random_map(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_tokens(rng: &mut impl Rng, len: usize, dim: usize) -> TokenSequence {
    TokenSequence::new(len, dim, (0..len * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn structural_invariants() -> Check {
    let mut rng = seeded(4);
    let err = |e: visionmix::Error| e.to_string();

    for (h, c, r) in [(4, 3, 2), (6, 2, 3), (8, 5, 4), (16, 8, 2)] {
        let m = random_map(&mut rng, h, h, c);
        let down = pixel_shuffle(&m, r, ShuffleDirection::Unshuffle).map_err(err)?;
        let back = pixel_shuffle(&down, r, ShuffleDirection::Shuffle).map_err(err)?;
        ensure(back.data == m.data, || format!("shuffle round trip {h}x{h}x{c} r={r}"))?;
    }

    for (h, w, oh, ow) in [(5, 7, 5, 7), (4, 4, 9, 3), (8, 8, 3, 5)] {
        let f = random_map(&mut rng, h, w, 3);
        let g = random_map(&mut rng, h, w, 3);
        if (h, w) == (oh, ow) {
            ensure(bilinear_resize(&f, oh, ow).map_err(err)?.data == f.data, || "resize identity".into())?;
        }
        let (a, b) = (0.7, -1.3);
        let mix = FeatureMap::new(h, w, 3, f.data.iter().zip(&g.data).map(|(x, y)| a * x + b * y).collect()).unwrap();
        let lhs = bilinear_resize(&mix, oh, ow).map_err(err)?;
        let rf = bilinear_resize(&f, oh, ow).map_err(err)?;
        let rg = bilinear_resize(&g, oh, ow).map_err(err)?;
        for (k, v) in lhs.data.iter().enumerate() {
            let rhs = a * rf.data[k] + b * rg.data[k];
            ensure((v - rhs).abs() <= 1e-12, || format!("resize linearity off by {:e}", (v - rhs).abs()))?;
        }
    }

    for side in 2..=32 {
        let m = random_map(&mut rng, side, side, 2);
        for target in [16, 64] {
            let t = normalize_tokens(&m, target, PostProcess::None).map_err(err)?;
            ensure(t.length == target, || format!("side {side} target {target} gave {}", t.length))?;
        }
    }

    let (dl, dh) = (6, 4);
    for n in [2, 4, 8] {
        let lo = random_tokens(&mut rng, n * n, dl);
        let other = random_tokens(&mut rng, n * n, dl);
        let hi = random_map(&mut rng, 2 * n, 2 * n, dh);
        let sa = fuse_sequence_append(&[lo.clone(), other.clone()]).map_err(err)?;
        ensure((sa.length, sa.dim) == (2 * n * n, dl), || format!("SA shape at side {n}"))?;
        let wide = random_tokens(&mut rng, n * n, dh);
        let cc = fuse_channel_concat(&[lo.clone(), wide]).map_err(err)?;
        ensure((cc.length, cc.dim) == (n * n, dl + dh), || format!("CC shape at side {n}"))?;

        let mut prng = seeded(n as u64);
        let lh = fuse_llava_hr(&lo, &hi, &LlavaHrParams::init(&mut prng, dl, dh)).map_err(err)?;
        let mgp = MiniGeminiParams::init(&mut prng, dl, dh);
        let mg = fuse_mini_gemini(&lo, &hi, 2, &mgp).map_err(err)?;
        let da = fuse_deformable(&lo, &hi, &DeformableParams::init(&mut prng, dl, dh, 4)).map_err(err)?;
        for (name, out) in [("LH", &lh), ("MG", &mg), ("DA", &da)] {
            ensure((out.length, out.dim) == (lo.length, lo.dim), || format!("{name} shape at side {n}"))?;
        }

        let (_, cache) = mini_gemini_forward(&lo, &hi, 2, &mgp).map_err(err)?;
        for row in cache.attention.chunks(4) {
            let s: f64 = row.iter().sum();
            ensure((s - 1.0).abs() <= 1e-12, || format!("MG attention row sums to {s}"))?;
        }
    }

    let spec = ExpertSpec {
        name: "identity".into(),
        arch: Arch::PatchLinear,
        native_resolution: 16,
        patch_or_stride: 1,
        embed_dim: 3,
        depth: 0,
        post_process: PostProcess::None,
        frozen_default: false,
    };
    let mut id = build_expert(&spec, 0).map_err(err)?;
    if let ExpertParams::Patch(p) = &mut id.params {
        p.proj = Linear::identity(3);
        p.pos.iter_mut().for_each(|v| *v = 0.0);
    }
    for t in [1, 2, 4] {
        let res = 16 * t;
        let img = Image::new(res, (0..res * res * 3).map(|_| rng.gen::<f64>()).collect()).map_err(err)?;
        let out = tile_encode(&id, &img, t).map_err(err)?;
        ensure(out.data == img.data && out.height == res, || format!("tile reassembly with t={t}"))?;
    }
    Ok("shuffle, resize, token count, fusion shapes, MG rows, tiling".into())
}

fn freeze_audit(work: &Path, seed: u64) -> Check {
    let base = train(&load_config("lo.toml", seed)?, &work.join("baseline"))?;
    let pre = train(&load_config("prealign.toml", seed)?, &work.join("prealign"))?;
    for rec in base.records.iter().chain(&pre.records) {
        ensure(rec.diff.changed.is_subset(&rec.stage.trainable_mask), || {
            format!("stage {} changed {:?} outside {:?}", rec.stage.name, rec.diff.changed, rec.stage.trainable_mask)
        })?;
    }
    let first = &base.records[0].diff.changed;
    ensure(*first == BTreeSet::from([FUSED_PROJECTOR_GROUP.to_string()]), || {
        format!("baseline stage 1 changed {first:?}")
    })?;
    let stage1: Vec<_> = pre.records.iter().filter(|r| r.stage.name.starts_with("prealign-")).collect();
    ensure(stage1.len() == 2 && pre.records.len() == 4, || format!("{} pre-align records", pre.records.len()))?;
    for r in &stage1 {
        ensure(!r.diff.changed.contains(LM_GROUP), || format!("{} touched the LM", r.stage.name))?;
        ensure(!r.diff.changed.is_empty(), || format!("{} changed nothing", r.stage.name))?;
    }
    Ok(format!(
        "baseline 2 stages, pre-align {} stages; LM untouched in {}",
        pre.records.len(),
        stage1.iter().map(|r| r.stage.name.as_str()).collect::<Vec<_>>().join(", ")
    ))
}

fn complementary_experts(work: &Path, p: &Pins) -> Check {
    let mut macros = Vec::new();
    for name in ["lo", "hi", "cc"] {
        let s = train(&load_config(&format!("{name}.toml"), p.seed)?, &work.join(name))?;
        macros.push((name, s.result.macro_avg));
    }
    let detail = macros.iter().map(|(n, m)| format!("{n} {m:.3}")).collect::<Vec<_>>().join(", ");
    let cc = macros[2].1;
    let best_single = macros[0].1.max(macros[1].1);
    ensure(cc >= best_single + p.complementary_margin, || {
        format!("{detail}; CC margin {:+.3} < {}", cc - best_single, p.complementary_margin)
    })?;
    Ok(detail)
}

fn unfreezing(work: &Path, p: &Pins) -> Check {
    let glyph = |name: &str| -> Result<f64, String> {
        let s = train(&load_config(&format!("{name}.toml"), p.seed)?, &work.join(name))?;
        Ok(s.result.accuracy(Task::Glyph).unwrap_or(0.0))
    };
    let unfrozen = glyph("lo64-unfrozen")?;
    let frozen = glyph("lo64-frozen")?;
    let detail = format!("glyph unfrozen {unfrozen:.3}, frozen {frozen:.3}");
    ensure(unfrozen >= frozen + p.unfreeze_margin, || {
        format!("{detail}; gap {:+.3} < {}", unfrozen - frozen, p.unfreeze_margin)
    })?;
    Ok(detail)
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    v.sort();
    v
}

fn determinism(work: &Path, seed: u64) -> Check {
    let cfg = load_config("lo.toml", seed)?;
    let a = work.join("first");
    let b = work.join("second");
    train(&cfg, &a)?;
    train(&cfg, &b)?;
    let files = csv_files(&a);
    ensure(files.len() >= 3, || format!("only {} CSVs written", files.len()))?;
    for f in &files {
        let name = f.file_name().unwrap();
        let other = b.join(name);
        ensure(fs::read(f).ok() == fs::read(&other).ok(), || format!("{} differs", name.to_string_lossy()))?;
    }
    Ok(format!("{} CSVs byte-identical", files.len()))
}

fn main() -> ExitCode {
    let pins = pins();
    let tmp = tempfile::tempdir().expect("temp dir");
    let work = tmp.path();
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    type Criterion<'a> = (&'a str, Option<Duration>, Box<dyn Fn() -> Check + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("avg reproduction", Some(Duration::from_secs(1)), Box::new(avg_reproduction)),
        ("selection path", Some(Duration::from_secs(1)), Box::new(selection_path)),
        ("gradient suite", minutes(2), Box::new(gradient_suite)),
        ("structural invariants", Some(Duration::from_secs(30)), Box::new(structural_invariants)),
        ("freeze-mask audit", minutes(5), Box::new(|| freeze_audit(&work.join("audit"), pins.seed))),
        ("complementary experts", minutes(10), Box::new(|| complementary_experts(&work.join("experts"), &pins))),
        ("unfreezing", minutes(10), Box::new(|| unfreezing(&work.join("unfreeze"), &pins))),
        ("determinism", None, Box::new(|| determinism(&work.join("determinism"), pins.seed))),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut result = check();
        let took = start.elapsed();
        if let (Ok(detail), Some(limit)) = (&result, limit) {
            if took > *limit {
                result = Err(format!("{detail}; took {took:.1?}, limit {limit:?}"));
            }
        }
        let (verdict, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {name}: {verdict} ({detail}; {:.2}s)", i + 1, took.as_secs_f64());
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
