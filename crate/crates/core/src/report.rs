//! Result tables and the pre-train loss vs. downstream accuracy fit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::experiment::{RunRecord, Scenario};

/// Rendered in place of a cell with no data.
pub const MISSING: &str = "-";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub sparsity: f64,
    pub seeds: usize,
    pub pretrain_loss: Option<f64>,
    /// Seed-mean best dev accuracy per task column.
    pub accuracy: Vec<Option<f64>>,
    /// Seed-mean final train loss per task column.
    pub train_loss: Vec<Option<f64>>,
}

impl ReportRow {
    /// Mean accuracy over tasks; absent unless every task has a value.
    pub fn average_accuracy(&self) -> Option<f64> {
        self.accuracy.iter().copied().collect::<Option<Vec<f64>>>().and_then(|v| mean(&v))
    }

    pub fn average_train_loss(&self) -> Option<f64> {
        self.train_loss.iter().copied().collect::<Option<Vec<f64>>>().and_then(|v| mean(&v))
    }
}

/// Downstream results by sparsity level, with an accuracy and train loss
/// column per task.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub scenario: Option<Scenario>,
    pub tasks: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn sparsity_key(s: f64) -> i64 {
    (s * 1000.0).round() as i64
}

impl ReportTable {
    /// Averages records over seeds. Rows follow the sparsity grid of the
    /// records' configs; levels without records keep placeholder cells.
    pub fn from_records(records: &[RunRecord]) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::Results("no records".into()));
        };
        if records.iter().any(|r| r.scenario != first.scenario) {
            return Err(Error::Results("records mix several scenarios".into()));
        }
        let mut tasks: Vec<String> = first.config.tasks.iter().map(|t| t.name.clone()).collect();
        for t in records.iter().flat_map(|r| &r.tasks) {
            if !tasks.contains(&t.task) {
                tasks.push(t.task.clone());
            }
        }
        let mut groups: BTreeMap<i64, (f64, Vec<&RunRecord>)> = BTreeMap::new();
        for r in records {
            for &s in &r.config.sparsities {
                groups.entry(sparsity_key(s)).or_insert((s, Vec::new()));
            }
        }
        for r in records {
            groups.entry(sparsity_key(r.sparsity)).or_insert((r.sparsity, Vec::new())).1.push(r);
        }
        let rows = groups
            .into_values()
            .map(|(sparsity, group)| {
                let column = |f: &dyn Fn(&crate::experiment::TaskResult) -> f64| -> Vec<Option<f64>> {
                    tasks.iter().map(|name| mean(&group.iter().filter_map(|r| r.task(name)).map(f).collect::<Vec<_>>())).collect()
                };
                ReportRow {
                    sparsity,
                    seeds: group.len(),
                    pretrain_loss: mean(&group.iter().map(|r| r.pretrain_dev_loss).collect::<Vec<_>>()),
                    accuracy: column(&|t| t.best_dev_accuracy),
                    train_loss: column(&|t| t.final_train_loss),
                }
            })
            .collect();
        Ok(Self { scenario: Some(first.scenario), tasks, rows })
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["sparsity".to_string(), "seeds".into(), "pretrain_loss".into()];
        for t in &self.tasks {
            h.push(format!("{t}_acc"));
            h.push(format!("{t}_train_loss"));
        }
        h.push("avg_acc".into());
        h.push("avg_train_loss".into());
        h
    }

    fn row_cells(row: &ReportRow) -> Vec<String> {
        let fmt = |v: Option<f64>| v.map_or_else(|| MISSING.to_string(), |x| format!("{x:.4}"));
        let mut out = vec![format!("{:.2}", row.sparsity), row.seeds.to_string(), fmt(row.pretrain_loss)];
        for (&a, &l) in row.accuracy.iter().zip(&row.train_loss) {
            out.push(fmt(a));
            out.push(fmt(l));
        }
        out.push(fmt(row.average_accuracy()));
        out.push(fmt(row.average_train_loss()));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&Self::row_cells(row).join(","));
            out.push('\n');
        }
        out
    }

    /// Right-aligned columns separated by two spaces.
    pub fn to_text(&self) -> String {
        let mut lines = vec![self.header()];
        lines.extend(self.rows.iter().map(Self::row_cells));
        let widths: Vec<usize> = (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        if let Some(s) = self.scenario {
            writeln!(out, "scenario: {s}").expect("write to string");
        }
        for l in &lines {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
            writeln!(out, "{}", cells.join("  ")).expect("write to string");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n: usize,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn ols(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidParameter(format!("{} x values but {} y values", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::InvalidParameter("a fit needs at least two points".into()));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("x values have zero variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit { slope, intercept, r_squared, n })
}

/// Fits dev accuracy on `task` against pre-train dev loss, one point per record.
/// Records whose accuracy is at most `chance + margin` are left out: a model
/// that learned nothing carries no information about the relationship.
pub fn loss_accuracy_fit(records: &[RunRecord], task: &str, chance: f64, margin: f64) -> Result<LinearFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| r.task(task).map(|t| (r.pretrain_dev_loss, t.best_dev_accuracy)))
        .filter(|&(_, acc)| acc > chance + margin)
        .unzip();
    ols(&xs, &ys)
}
