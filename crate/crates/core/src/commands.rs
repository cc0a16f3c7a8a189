//! The four user-facing commands. Each returns a report and a verdict; the
//! binary only maps them to stdout and exit codes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::registry::{grad_check_seeds, registered_ops, DEFAULT_EPS, DEFAULT_SEEDS, GRAD_TOLERANCE};
use crate::selector::{load_score_fixture, recompute_table_avgs, select_from_table, AvgCheck, SelectionHistory, AVG_TOLERANCE};
use crate::synthbench::{evaluate, gen_dataset, EvalResult, Task};
use crate::trainer::{make_stage_plan, run_plan, StageRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_NOT_FOUND: i32 = 5;

pub const FAILED_MARKER: &str = "FAILED";
pub const CONFIG_ECHO: &str = "config.toml";
pub const RESULT_CSV: &str = "result.csv";
pub const AUDIT_REPORT: &str = "audit.md";
pub const MANIFEST: &str = "manifest.toml";

/// Exit status for an error that stopped a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_NOT_FOUND,
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_VALIDATION,
    }
}

/// Text for stdout plus whether every check passed.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: String,
    pub passed: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_OK
        } else {
            EXIT_MISMATCH
        }
    }
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Score tables shipped with the crate, in the order `repro-avg` checks them.
pub fn bundled_tables() -> Vec<PathBuf> {
    ["table1.csv", "table3.csv", "table4.csv", "table5.csv"]
        .iter()
        .map(|f| fixtures_dir().join(f))
        .collect()
}

#[derive(Debug, Clone)]
pub struct FixtureAvgs {
    pub path: PathBuf,
    pub checks: Vec<AvgCheck>,
}

pub fn repro_avg(paths: &[PathBuf]) -> Result<(Vec<FixtureAvgs>, Outcome)> {
    let mut all = Vec::with_capacity(paths.len());
    for path in paths {
        let table = load_score_fixture(path)?;
        let reported = table
            .reported_avgs()
            .ok_or_else(|| Error::Validation(format!("{}: no Avg column to check", path.display())))?;
        let checks = recompute_table_avgs(&table, &reported)?;
        all.push(FixtureAvgs {
            path: path.clone(),
            checks,
        });
    }
    let mut report = String::new();
    let mut passed = true;
    let mut worst: f64 = 0.0;
    for f in &all {
        let _ = writeln!(report, "## {}\n", f.path.display());
        report.push_str("| row | recomputed | reported | diff | |\n|---|---:|---:|---:|---|\n");
        for c in &f.checks {
            let _ = writeln!(
                report,
                "| {} | {:.2} | {:.2} | {:.2} | {} |",
                c.row,
                c.recomputed,
                c.reported,
                c.abs_diff,
                if c.flagged { "MISMATCH" } else { "ok" }
            );
            passed &= !c.flagged;
            worst = worst.max(c.abs_diff);
        }
        report.push('\n');
    }
    let _ = writeln!(report, "max |diff| = {worst:.2} (tolerance {AVG_TOLERANCE})");
    Ok((all, Outcome { report, passed }))
}

pub fn select(path: &Path) -> Result<(SelectionHistory, Outcome)> {
    let table = load_score_fixture(path)?;
    let history = select_from_table(&table)?;
    let names = |combo: &[String]| -> String {
        let mut v = table.find(combo).map(|r| r.encoders.clone()).unwrap_or_else(|| combo.to_vec());
        v.sort();
        v.join(", ")
    };
    let mut report = String::new();
    let _ = writeln!(report, "round 0: {} = {:.1}", history.base.join("+"), history.base_avg);
    for (i, round) in history.rounds.iter().enumerate() {
        let _ = writeln!(report, "round {}:", i + 1);
        for (combo, avg) in &round.candidates {
            let mark = if *combo == round.retained { "  <- retained" } else { "" };
            let _ = writeln!(report, "  {} = {:.1}{}", combo.join("+"), avg, mark);
        }
    }
    let _ = writeln!(
        report,
        "recommendation: {} = {:.1} ({})",
        history.recommendation.join("+"),
        history.recommendation_avg,
        names(&history.recommendation)
    );
    Ok((history, Outcome { report, passed: true }))
}

/// Empty `ops` means every registered op.
pub fn gradcheck(ops: &[String], seeds: &[u64], eps: f64) -> Result<Outcome> {
    let ids: Vec<String> = if ops.is_empty() {
        registered_ops().iter().map(|s| s.to_string()).collect()
    } else {
        ops.to_vec()
    };
    let mut rows = Vec::with_capacity(ids.len());
    for id in &ids {
        rows.push(grad_check_seeds(id, seeds, eps)?);
    }
    let mut report = String::from("| op | max rel error | |\n|---|---:|---|\n");
    let mut passed = true;
    for r in &rows {
        let ok = r.max_rel_error < GRAD_TOLERANCE;
        passed &= ok;
        let _ = writeln!(report, "| {} | {:.3e} | {} |", r.op_name, r.max_rel_error, if ok { "ok" } else { "FAIL" });
    }
    let _ = writeln!(
        report,
        "\n{} ops, seeds {:?}, eps {:e}, tolerance {:e}",
        rows.len(),
        seeds,
        eps,
        GRAD_TOLERANCE
    );
    Ok(Outcome { report, passed })
}

pub fn gradcheck_default(ops: &[String]) -> Result<Outcome> {
    gradcheck(ops, &DEFAULT_SEEDS, DEFAULT_EPS)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub records: Vec<StageRecord>,
    pub result: EvalResult,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a str,
    seed: u64,
    status: &'a str,
    wall_time_secs: f64,
    stages: Vec<String>,
    rerun: String,
}

pub fn loss_file_name(index: usize, stage: &str) -> String {
    format!("loss-{index}-{stage}.csv")
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:?}");
    }
    s
}

pub fn result_csv(result: &EvalResult) -> String {
    let mut s = String::from("task,accuracy\n");
    for t in Task::ALL {
        if let Some(a) = result.accuracy(t) {
            let _ = writeln!(s, "{},{a:?}", t.name());
        }
    }
    let _ = writeln!(s, "macro_avg,{:?}", result.macro_avg);
    s
}

fn audit_report(records: &[StageRecord]) -> String {
    let mut s = String::from("# Freeze audit\n\n| stage | data | steps | lr | trainable | changed | sound |\n|---|---|---:|---:|---|---|---|\n");
    for r in records {
        let join = |it: &mut dyn Iterator<Item = &String>| it.cloned().collect::<Vec<_>>().join(", ");
        let sound = r.diff.changed.is_subset(&r.stage.trainable_mask);
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:e} | {} | {} | {} |",
            r.stage.name,
            r.stage.data_source,
            r.stage.steps,
            r.stage.learning_rate,
            join(&mut r.stage.trainable_mask.iter()),
            join(&mut r.diff.changed.iter()),
            if sound { "yes" } else { "NO" }
        );
    }
    s.push_str("\n## Largest change per group\n\n");
    for r in records {
        let _ = writeln!(s, "- {}", r.stage.name);
        for (g, v) in &r.diff.max_abs_change {
            let _ = writeln!(s, "  - {g}: {v:e}");
        }
    }
    s
}

/// Runs the stage plan of `cfg` and writes every artifact under `out`.
/// On divergence the completed stages' artifacts stay, next to a `FAILED` marker.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stale = out.join(FAILED_MARKER);
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    write(&out.join(CONFIG_ECHO), &cfg.echo())?;

    let model = cfg.build_model()?;
    let plan = make_stage_plan(cfg.pre_align, &model, &cfg.training)?;
    let train_set = gen_dataset(cfg.data.train_seed, cfg.data.train_size);

    let mut done: Vec<StageRecord> = Vec::new();
    let outcome = run_plan(&model, &plan, &train_set, cfg.seed, |rec| {
        write(&out.join(loss_file_name(done.len(), &rec.stage.name)), &loss_csv(&rec.losses))?;
        done.push(rec.clone());
        write(&out.join(AUDIT_REPORT), &audit_report(&done))
    });

    let manifest = |status: &str| -> Result<()> {
        let m = Manifest {
            config: CONFIG_ECHO,
            seed: cfg.seed,
            status,
            wall_time_secs: start.elapsed().as_secs_f64(),
            stages: plan.stages.iter().map(|s| s.name.clone()).collect(),
            rerun: format!("visionmix train --config {CONFIG_ECHO} --seed {}", cfg.seed),
        };
        write(&out.join(MANIFEST), &toml::to_string(&m).expect("manifest serializes"))
    };

    let (trained, records) = match outcome {
        Ok(v) => v,
        Err(e) => {
            write(&out.join(FAILED_MARKER), &format!("{e}\n"))?;
            manifest("failed")?;
            return Err(e);
        }
    };
    let test_set = gen_dataset(cfg.data.test_seed, cfg.data.test_size);
    let result = evaluate(&trained, &test_set)?;
    write(&out.join(RESULT_CSV), &result_csv(&result))?;
    manifest("ok")?;
    Ok(TrainSummary {
        out: out.to_path_buf(),
        records,
        result,
    })
}

pub fn train_report(summary: &TrainSummary) -> String {
    let mut s = String::new();
    for r in &summary.records {
        let first = r.losses.first().copied().unwrap_or(f64::NAN);
        let last = r.losses.last().copied().unwrap_or(f64::NAN);
        let _ = writeln!(s, "{}: {} steps, loss {first:.4} -> {last:.4}", r.stage.name, r.losses.len());
    }
    for t in Task::ALL {
        if let Some(a) = summary.result.accuracy(t) {
            let _ = writeln!(s, "{} accuracy {a:.4}", t.name());
        }
    }
    let _ = writeln!(s, "macro_avg {:.4}", summary.result.macro_avg);
    let _ = writeln!(s, "artifacts in {}", summary.out.display());
    s
}
