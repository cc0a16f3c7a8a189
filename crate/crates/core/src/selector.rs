//! Normalized benchmark averages, round-robin greedy expert selection, and
//! CSV score fixtures.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};

/// Avg column scale: the mean fraction-of-max is reported per mille.
pub const AVG_SCALE: f64 = 1000.0;
/// Largest acceptable |recomputed - reported| before a row is flagged.
pub const AVG_TOLERANCE: f64 = 1.0;

const COMBINATION_COLUMN: &str = "combination";
const VARIANT_COLUMN: &str = "variant";
const AVG_COLUMN: &str = "Avg";

/// `1000 * mean(value / max)` over `(value, max)` pairs.
pub fn normalized_avg(scores: &[(f64, f64)]) -> Result<f64> {
    if scores.is_empty() {
        return Err(invalid("normalized average of an empty metric list"));
    }
    let mut sum = 0.0;
    for &(value, max) in scores {
        if !(max > 0.0) || !max.is_finite() {
            return Err(invalid(format!("metric maximum must be positive, got {max}")));
        }
        if !(0.0..=max).contains(&value) {
            return Err(invalid(format!("score {value} outside [0, {max}]")));
        }
        sum += value / max;
    }
    Ok(AVG_SCALE * sum / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub id: String,
    pub max_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    /// Labels as written in the fixture, e.g. `["A", "B"]`.
    pub labels: Vec<String>,
    /// Labels resolved through the encoder sidecar; unknown labels pass through.
    pub encoders: Vec<String>,
    pub variant: Option<String>,
    /// One value per table metric, in `ScoreTable::metrics` order.
    pub scores: Vec<f64>,
    pub reported_avg: Option<f64>,
    /// 1-based line in the source file.
    pub line: usize,
}

impl ScoreRow {
    pub fn name(&self) -> String {
        let combo = self.labels.join("+");
        match &self.variant {
            Some(v) => format!("{combo} ({v})"),
            None => combo,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub metrics: Vec<Metric>,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn row_avg(&self, row: &ScoreRow) -> Result<f64> {
        let pairs: Vec<(f64, f64)> = row
            .scores
            .iter()
            .zip(&self.metrics)
            .map(|(&v, m)| (v, m.max_value))
            .collect();
        normalized_avg(&pairs)
    }

    /// The row whose label set equals `combination`, ignoring order.
    pub fn find(&self, combination: &[String]) -> Option<&ScoreRow> {
        let want: BTreeSet<&str> = combination.iter().map(String::as_str).collect();
        self.rows
            .iter()
            .find(|r| r.labels.len() == want.len() && r.labels.iter().all(|l| want.contains(l.as_str())))
    }

    pub fn reported_avgs(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.reported_avg).collect()
    }
}

/// Metric maxima, keyed by metric id.
pub type MetricCatalog = BTreeMap<String, f64>;

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn records(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let mut rdr = open_csv(path)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, out))
}

fn parse_number(path: &Path, line: usize, column: &str, text: &str) -> Result<f64> {
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(path, line, format!("column `{column}`: `{text}` is not a number")))
}

/// Reads a `metric,max` sidecar.
pub fn load_metric_catalog(path: &Path) -> Result<MetricCatalog> {
    let (header, rows) = records(path)?;
    if header != ["metric", "max"] {
        return Err(parse_err(path, 1, "expected header `metric,max`"));
    }
    let mut out = MetricCatalog::new();
    for (line, rec) in rows {
        let max = parse_number(path, line, "max", &rec[1])?;
        if max <= 0.0 {
            return Err(parse_err(path, line, format!("maximum for `{}` must be positive", rec[0])));
        }
        if out.insert(rec[0].clone(), max).is_some() {
            return Err(parse_err(path, line, format!("duplicate metric `{}`", rec[0])));
        }
    }
    Ok(out)
}

/// Reads a `label,name` sidecar mapping combination labels to encoder ids.
pub fn load_encoder_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    let (header, rows) = records(path)?;
    if header != ["label", "name"] {
        return Err(parse_err(path, 1, "expected header `label,name`"));
    }
    Ok(rows.into_iter().map(|(_, r)| (r[0].clone(), r[1].clone())).collect())
}

fn sidecar(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

/// Loads a score fixture using the `metrics.csv` (required) and
/// `encoders.csv` (optional) sidecars from the same directory.
pub fn load_score_fixture(path: &Path) -> Result<ScoreTable> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let catalog = load_metric_catalog(&sidecar(path, "metrics.csv"))?;
    let labels_path = sidecar(path, "encoders.csv");
    let labels = if labels_path.exists() {
        load_encoder_labels(&labels_path)?
    } else {
        BTreeMap::new()
    };
    load_score_fixture_with(path, &catalog, &labels)
}

pub fn load_score_fixture_with(
    path: &Path,
    catalog: &MetricCatalog,
    labels: &BTreeMap<String, String>,
) -> Result<ScoreTable> {
    let (header, rows) = records(path)?;
    if header.first().map(String::as_str) != Some(COMBINATION_COLUMN) {
        return Err(parse_err(path, 1, "first column must be `combination`"));
    }
    let mut variant_col = None;
    let mut avg_col = None;
    let mut metric_cols = Vec::new();
    let mut metrics = Vec::new();
    for (i, name) in header.iter().enumerate().skip(1) {
        match name.as_str() {
            VARIANT_COLUMN => variant_col = Some(i),
            AVG_COLUMN => avg_col = Some(i),
            m => {
                let max_value = *catalog
                    .get(m)
                    .ok_or_else(|| parse_err(path, 1, format!("unknown metric `{m}`")))?;
                if metrics.iter().any(|x: &Metric| x.id == m) {
                    return Err(parse_err(path, 1, format!("duplicate metric `{m}`")));
                }
                metric_cols.push(i);
                metrics.push(Metric {
                    id: m.to_string(),
                    max_value,
                });
            }
        }
    }
    if metrics.is_empty() {
        return Err(parse_err(path, 1, "no metric columns"));
    }
    let mut out = Vec::new();
    for (line, rec) in rows {
        let combo = &rec[0];
        let row_labels: Vec<String> = combo.split('+').map(|s| s.trim().to_string()).collect();
        if row_labels.iter().any(String::is_empty) {
            return Err(parse_err(path, line, format!("malformed combination `{combo}`")));
        }
        let mut scores = Vec::with_capacity(metric_cols.len());
        for (&c, m) in metric_cols.iter().zip(&metrics) {
            let v = parse_number(path, line, &m.id, &rec[c])?;
            if !(0.0..=m.max_value).contains(&v) {
                return Err(parse_err(
                    path,
                    line,
                    format!("{} = {v} outside [0, {}]", m.id, m.max_value),
                ));
            }
            scores.push(v);
        }
        let reported_avg = avg_col.map(|c| parse_number(path, line, AVG_COLUMN, &rec[c])).transpose()?;
        out.push(ScoreRow {
            encoders: row_labels
                .iter()
                .map(|l| labels.get(l).cloned().unwrap_or_else(|| l.clone()))
                .collect(),
            labels: row_labels,
            variant: variant_col.map(|c| rec[c].clone()).filter(|v| !v.is_empty()),
            scores,
            reported_avg,
            line,
        });
    }
    Ok(ScoreTable { metrics, rows: out })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvgCheck {
    pub row: String,
    pub recomputed: f64,
    pub reported: f64,
    pub abs_diff: f64,
    pub flagged: bool,
}

pub fn recompute_table_avgs(table: &ScoreTable, reported: &[f64]) -> Result<Vec<AvgCheck>> {
    if reported.len() != table.rows.len() {
        return Err(invalid(format!(
            "{} reported averages for {} rows",
            reported.len(),
            table.rows.len()
        )));
    }
    table
        .rows
        .iter()
        .zip(reported)
        .map(|(row, &rep)| {
            let recomputed = table.row_avg(row)?;
            let abs_diff = (recomputed - rep).abs();
            Ok(AvgCheck {
                row: row.name(),
                recomputed,
                reported: rep,
                abs_diff,
                flagged: abs_diff > AVG_TOLERANCE,
            })
        })
        .collect()
}

pub type Combination = Vec<String>;

#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    /// Every candidate of the round with its average, in pool order.
    pub candidates: Vec<(Combination, f64)>,
    pub retained: Combination,
    pub retained_avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionHistory {
    pub base: Combination,
    pub base_avg: f64,
    pub rounds: Vec<Round>,
    pub recommendation: Combination,
    pub recommendation_avg: f64,
}

impl SelectionHistory {
    pub fn evaluations(&self) -> usize {
        self.rounds.iter().map(|r| r.candidates.len()).sum()
    }
}

/// Grows `base` one expert per round, keeping the best candidate of each
/// round. `pool` order breaks ties: the earlier element wins.
pub fn greedy_select<F>(pool: &[String], base: &[String], mut evaluate: F) -> Result<SelectionHistory>
where
    F: FnMut(&[String]) -> Result<f64>,
{
    if let Some(x) = pool.iter().find(|x| base.contains(x)) {
        return Err(invalid(format!("`{x}` is both in the base and in the pool")));
    }
    let distinct: BTreeSet<&String> = pool.iter().collect();
    if distinct.len() != pool.len() {
        return Err(invalid("pool contains duplicates"));
    }
    let mut eval = |c: &[String]| {
        evaluate(c).map_err(|e| Error::Evaluation {
            combination: c.join("+"),
            source: Box::new(e),
        })
    };
    let base_avg = eval(base)?;
    let mut current: Combination = base.to_vec();
    let mut remaining: Vec<String> = pool.to_vec();
    let mut rounds = Vec::new();
    let (mut best, mut best_avg) = (current.clone(), base_avg);
    while !remaining.is_empty() {
        let mut candidates: Vec<(Combination, f64)> = Vec::with_capacity(remaining.len());
        let mut winner = 0;
        for (i, x) in remaining.iter().enumerate() {
            let mut c = current.clone();
            c.push(x.clone());
            let avg = eval(&c)?;
            if i == 0 || avg > candidates[winner].1 {
                winner = i;
            }
            candidates.push((c, avg));
        }
        let (retained, retained_avg) = candidates[winner].clone();
        if retained_avg > best_avg {
            best = retained.clone();
            best_avg = retained_avg;
        }
        remaining.remove(winner);
        current = retained.clone();
        rounds.push(Round {
            candidates,
            retained,
            retained_avg,
        });
    }
    Ok(SelectionHistory {
        base: base.to_vec(),
        base_avg,
        rounds,
        recommendation: best,
        recommendation_avg: best_avg,
    })
}

/// Selection driven by a fixture: the smallest row is the base and every
/// other label forms the pool, in sorted label order.
pub fn select_from_table(table: &ScoreTable) -> Result<SelectionHistory> {
    let base_row = table
        .rows
        .iter()
        .min_by_key(|r| r.labels.len())
        .ok_or_else(|| invalid("score table has no rows"))?;
    let base = base_row.labels.clone();
    let pool: Vec<String> = table
        .rows
        .iter()
        .flat_map(|r| r.labels.iter().cloned())
        .filter(|l| !base.contains(l))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    greedy_select(&pool, &base, |c| {
        let row = table.find(c).ok_or_else(|| Error::Incomplete(c.join("+")))?;
        table.row_avg(row)
    })
}
