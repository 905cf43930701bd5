//! Aggregation of evaluation reports across seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::eval::EvalReport;
use crate::stats;
use crate::{GeodeError, Result};

/// Reports read from JSONL files plus one warning per skipped line.
#[derive(Debug, Default)]
pub struct Loaded {
    pub reports: Vec<EvalReport>,
    pub warnings: Vec<String>,
}

/// Reads one report per line. Blank lines are ignored; malformed or
/// inconsistent lines are skipped with a warning naming file and line.
pub fn read_reports(paths: &[impl AsRef<Path>]) -> Result<Loaded> {
    let mut out = Loaded::default();
    for path in paths {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GeodeError::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<EvalReport>(line)
                .map_err(|e| e.to_string())
                .and_then(|r| r.check().map(|_| r).map_err(|e| e.to_string()));
            match parsed {
                Ok(r) => out.reports.push(r),
                Err(e) => {
                    let w = format!("{}:{}: skipped malformed line: {e}", path.display(), i + 1);
                    log::warn!("{w}");
                    out.warnings.push(w);
                }
            }
        }
    }
    Ok(out)
}

/// Mean and sample standard deviation of one metric over runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// `None` for a single run.
    pub std: Option<f64>,
}

impl Stat {
    fn of(xs: &[f64]) -> Self {
        Stat {
            mean: stats::mean(xs),
            std: stats::std(xs),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub seeds: Vec<u64>,
    pub overall: Stat,
    pub tasks: BTreeMap<String, Stat>,
    pub na_mean: Stat,
    pub mca_mean: Stat,
    pub unparseable_rate: Stat,
}

/// Groups reports by arm, in order of first appearance.
pub fn summarize(reports: &[EvalReport]) -> Vec<ArmSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !order.contains(&r.arm.as_str()) {
            order.push(&r.arm);
        }
    }
    order
        .into_iter()
        .map(|arm| {
            let runs: Vec<&EvalReport> = reports.iter().filter(|r| r.arm == arm).collect();
            let col = |f: &dyn Fn(&EvalReport) -> f64| Stat::of(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let mut names: Vec<&String> = runs.iter().flat_map(|r| r.tasks.keys()).collect();
            names.sort();
            names.dedup();
            let tasks = names
                .into_iter()
                .map(|t| {
                    let xs: Vec<f64> = runs.iter().filter_map(|r| r.tasks.get(t).copied()).collect();
                    (t.clone(), Stat::of(&xs))
                })
                .collect();
            ArmSummary {
                arm: arm.to_string(),
                seeds: runs.iter().map(|r| r.seed).collect(),
                overall: col(&|r| r.overall),
                tasks,
                na_mean: col(&|r| r.na_mean),
                mca_mean: col(&|r| r.mca_mean),
                unparseable_rate: col(&|r| r.unparseable_rate),
            }
        })
        .collect()
}

const TASK_COLUMNS: [&str; 7] = [
    "obj_count",
    "abs_dist",
    "obj_size",
    "room_size",
    "rel_dist",
    "rel_dir",
    "appear_order",
];

fn cell(s: Option<&Stat>) -> String {
    match s {
        None => "-".into(),
        Some(Stat { mean, std: Some(sd) }) => format!("{:.1}±{:.1}", 100.0 * mean, 100.0 * sd),
        Some(Stat { mean, std: None }) => format!("{:.1}", 100.0 * mean),
    }
}

/// Fixed-width table of mean±std scores in percent.
pub fn render_table(summaries: &[ArmSummary]) -> String {
    let mut header = vec!["arm".to_string(), "runs".into(), "overall".into()];
    header.extend(TASK_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(["na".into(), "mca".into(), "unparse".into()]);
    let mut rows = vec![header];
    for s in summaries {
        let mut row = vec![s.arm.clone(), s.seeds.len().to_string(), cell(Some(&s.overall))];
        row.extend(TASK_COLUMNS.iter().map(|t| cell(s.tasks.get(*t))));
        row.extend([cell(Some(&s.na_mean)), cell(Some(&s.mca_mean)), cell(Some(&s.unparseable_rate))]);
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| {
                if c == 0 {
                    format!("{v:<w$}")
                } else {
                    format!("{v:>w$}")
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// CSV with a mean and a std column per metric; the std cell is empty for a single run.
pub fn summary_csv(summaries: &[ArmSummary]) -> String {
    let mut metrics = vec!["overall"];
    metrics.extend(TASK_COLUMNS);
    metrics.extend(["na_mean", "mca_mean", "unparseable_rate"]);
    let mut header = vec!["arm".to_string(), "runs".into()];
    for m in &metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    let mut out = header.join(",") + "\n";
    for s in summaries {
        let mut row = vec![s.arm.clone(), s.seeds.len().to_string()];
        for m in &metrics {
            let stat = match *m {
                "overall" => Some(&s.overall),
                "na_mean" => Some(&s.na_mean),
                "mca_mean" => Some(&s.mca_mean),
                "unparseable_rate" => Some(&s.unparseable_rate),
                t => s.tasks.get(t),
            };
            row.push(stat.map_or(String::new(), |x| format!("{:.6}", x.mean)));
            row.push(stat.and_then(|x| x.std).map_or(String::new(), |v| format!("{v:.6}")));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
