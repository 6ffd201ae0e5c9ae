//! Baseline-relative comparison of evaluation runs.
//!
//! Every metric is compared against the best deterministic (single-sample)
//! result of the same tag and metric. Improvements are signed so that
//! positive always means better:
//!
//! | metric                          | direction | improvement         |
//! |---------------------------------|-----------|---------------------|
//! | `aurc_*`, `ece_*`               | lower     | `(base - x) / base` |
//! | `auroc`, `miou`, `pq`, `sq`, `rq` | higher  | `(x - base) / base` |
//!
//! A baseline of exactly zero leaves the improvement undefined (empty cell).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::pipeline::MetricRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Lower,
    Higher,
}

impl Direction {
    pub fn of(metric: &str) -> Direction {
        if metric.starts_with("aurc") || metric.starts_with("ece") {
            Direction::Lower
        } else {
            Direction::Higher
        }
    }

    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Lower => a < b,
            Direction::Higher => a > b,
        }
    }

    /// Signed relative change of `x` against `base`, positive when `x` is better.
    pub fn improvement(self, x: f64, base: f64) -> Option<f64> {
        if base == 0.0 {
            return None;
        }
        Some(match self {
            Direction::Lower => (base - x) / base,
            Direction::Higher => (x - base) / base,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRow {
    pub tag: String,
    pub task: String,
    pub metric: String,
    pub direction: Direction,
    pub config: String,
    pub samples: usize,
    pub measure: String,
    pub pixel_agg: String,
    pub value: f64,
    pub baseline: f64,
    pub baseline_config: String,
    pub improvement: Option<f64>,
}

/// Which rows count as the deterministic baseline.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum BaselineSelector {
    /// Any configuration with a single sample.
    #[default]
    SingleSample,
    /// Rows of one named configuration, e.g. `mc0_f0_none`.
    Config(String),
}

impl BaselineSelector {
    fn matches(&self, row: &MetricRow) -> bool {
        match self {
            BaselineSelector::SingleSample => row.samples == 1,
            BaselineSelector::Config(c) => &row.config == c,
        }
    }
}

/// Normalizes every row with a value against its group's best baseline row.
///
/// Groups are `(tag, metric)`; the baseline is the best value over all
/// measures and pixel aggregations of the baseline configurations, ties
/// resolved by input order.
pub fn relative_to_baseline(rows: &[MetricRow], selector: &BaselineSelector) -> Result<Vec<RelativeRow>> {
    let valued: Vec<(&MetricRow, f64)> = rows.iter().filter_map(|r| Some((r, r.value?))).collect();
    if valued.is_empty() {
        return Err(Error::MissingBaseline("no metric rows with values".into()));
    }
    let mut best: BTreeMap<(&str, &str), (&MetricRow, f64)> = BTreeMap::new();
    for &(r, v) in &valued {
        if !selector.matches(r) {
            continue;
        }
        let dir = Direction::of(&r.metric);
        best.entry((&r.tag, &r.metric))
            .and_modify(|cur| {
                if dir.better(v, cur.1) {
                    *cur = (r, v);
                }
            })
            .or_insert((r, v));
    }
    let mut out = Vec::with_capacity(valued.len());
    for &(r, v) in &valued {
        let &(base_row, base) = best
            .get(&(r.tag.as_str(), r.metric.as_str()))
            .ok_or_else(|| Error::MissingBaseline(format!("tag {:?}, metric {:?}", r.tag, r.metric)))?;
        let direction = Direction::of(&r.metric);
        out.push(RelativeRow {
            tag: r.tag.clone(),
            task: r.task.clone(),
            metric: r.metric.clone(),
            direction,
            config: r.config.clone(),
            samples: r.samples,
            measure: r.measure.clone(),
            pixel_agg: r.pixel_agg.clone(),
            value: v,
            baseline: base,
            baseline_config: base_row.config.clone(),
            improvement: direction.improvement(v, base),
        });
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bar chart of improvements, one bar per row.
pub fn svg_bar_chart(title: &str, rows: &[&RelativeRow]) -> String {
    const LABEL_W: f64 = 420.0;
    const PLOT_W: f64 = 360.0;
    const BAR_H: f64 = 16.0;
    const TOP: f64 = 40.0;
    let values: Vec<f64> = rows.iter().map(|r| r.improvement.unwrap_or(0.0)).collect();
    let span = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let height = TOP + BAR_H * rows.len() as f64 + 30.0;
    let width = LABEL_W + PLOT_W + 80.0;
    let zero = LABEL_W + PLOT_W / 2.0;
    let scale = PLOT_W / 2.0 / span;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{zero}" y1="{}" x2="{zero}" y2="{}" stroke="black"/>"#,
        TOP - 5.0,
        height - 25.0
    );
    for (i, (r, &v)) in rows.iter().zip(&values).enumerate() {
        let y = TOP + BAR_H * i as f64;
        let len = v.abs() * scale;
        let x = if v < 0.0 { zero - len } else { zero };
        let fill = if v < 0.0 { "#c0504d" } else { "#4f81bd" };
        let label = format!("{} {} {} {}", r.config, r.metric, r.measure, r.pixel_agg);
        let _ = writeln!(
            s,
            r#"<text x="10" y="{:.1}">{}</text>"#,
            y + BAR_H - 4.0,
            escape(label.trim())
        );
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.1}" width="{len:.2}" height="{:.1}" fill="{fill}"/>"#,
            y + 2.0,
            BAR_H - 4.0
        );
        let text = r
            .improvement
            .map_or("n/a".to_string(), |v| format!("{:+.1}%", 100.0 * v));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{text}</text>"#,
            LABEL_W + PLOT_W + 5.0,
            y + BAR_H - 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="10" y="{:.1}">improvement relative to baseline; positive is better</text>"#,
        height - 8.0
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `relative.csv` and one `<task>.svg` per task into `dir`.
pub fn write_report(dir: &Path, rows: &[RelativeRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_csv(&dir.join("relative.csv"), rows)?;
    let mut by_task: BTreeMap<&str, Vec<&RelativeRow>> = BTreeMap::new();
    for r in rows {
        by_task.entry(&r.task).or_default().push(r);
    }
    for (task, rows) in by_task {
        std::fs::write(dir.join(format!("{task}.svg")), svg_bar_chart(task, &rows))?;
    }
    Ok(())
}
