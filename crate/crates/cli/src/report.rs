//! Per-class IoU table of a training run, in report column order.

use std::fmt::Write as _;

use symseg::continual::TrainReport;
use symseg::dataset::taxonomy::class_name;
use symseg::dataset::NUM_CLASSES;
use symseg::geometry::ClassId;
use symseg::metrics::{fmt_score, report_order, IouReport};

/// One row per step and branch; cells for classes not yet seen are empty.
pub struct ReportTable {
    pub columns: Vec<ClassId>,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn mean(report: &IouReport, classes: &[ClassId]) -> String {
    if classes.is_empty() {
        String::new()
    } else {
        fmt_score(report.miou_over(classes))
    }
}

impl ReportTable {
    pub fn new(report: &TrainReport, total_classes: usize) -> Self {
        let columns = report_order(&report.last().classes);
        let named = total_classes == NUM_CLASSES;
        let mut headers = vec!["step".to_string(), "branch".to_string()];
        headers.extend(columns.iter().map(|&c| match class_name(c) {
            Some(name) if named => name.to_string(),
            _ => c.to_string(),
        }));
        headers.extend(["miou", "base_miou", "novel_miou"].map(String::from));

        let base = &report.steps[0].new_classes;
        let mut rows = Vec::new();
        for s in &report.steps {
            let novel: Vec<ClassId> = s.classes.iter().copied().filter(|c| !base.contains(c)).collect();
            for (branch, r) in [("rgb", &s.color), ("lidar", &s.lidar)] {
                let mut row = vec![s.step.to_string(), branch.to_string()];
                row.extend(columns.iter().map(|&c| {
                    if s.classes.contains(&c) {
                        fmt_score(r.get(c))
                    } else {
                        String::new()
                    }
                }));
                row.push(fmt_score(r.miou));
                row.push(mean(r, base));
                row.push(mean(r, &novel));
                rows.push(row);
            }
        }
        ReportTable { columns, headers, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.headers.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Space-aligned text table.
    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|i| {
                self.rows
                    .iter()
                    .map(|r| r[i].len())
                    .chain([self.headers[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for line in std::iter::once(&self.headers).chain(&self.rows) {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        out
    }
}
