//! Report tables and plot series with deterministic text, JSON and CSV
//! renderings. Rounding to displayed precision happens only here.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{AgreementSummary, DatasetSummary, ReasonCategory, ReasonsCrosstab, ReferenceComparison};
use crate::metrics::{format_decimal, BootstrapInterval, Rate, RocCurve};
use crate::model::{ConfusionMatrix, SeverityGrade};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateStyle {
    /// `88.1% (185/210)`
    PercentWithCounts,
    /// `603/999 (60.5%)`
    CountsWithPercent,
    /// `81.5%`
    PercentOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Blank,
    Text(String),
    Count(u64),
    Rate { rate: Rate, style: RateStyle },
    Number { value: f64, decimals: u32 },
    MeanSd { mean: f64, sd: f64, decimals: u32 },
    Interval { point: f64, low: f64, high: f64, decimals: u32 },
}

/// Percent precision used throughout the tables.
pub const PERCENT_DECIMALS: u32 = 1;
pub const KAPPA_DECIMALS: u32 = 2;
pub const AUC_DECIMALS: u32 = 3;

impl Cell {
    pub fn rate(rate: Rate) -> Self {
        Cell::Rate {
            rate,
            style: RateStyle::PercentWithCounts,
        }
    }

    pub fn kappa(value: Option<f64>) -> Self {
        value.map_or(Cell::Text("undefined".into()), |value| Cell::Number {
            value,
            decimals: KAPPA_DECIMALS,
        })
    }

    pub fn display(&self) -> String {
        match self {
            Cell::Blank => String::new(),
            Cell::Text(s) => s.clone(),
            Cell::Count(n) => thousands(*n),
            Cell::Rate { rate, style } => {
                let pct = rate
                    .percent(PERCENT_DECIMALS)
                    .unwrap_or_else(|| "n/a".to_string());
                let counts = format!("{}/{}", thousands(rate.numerator), thousands(rate.denominator));
                match style {
                    RateStyle::PercentWithCounts => format!("{pct} ({counts})"),
                    RateStyle::CountsWithPercent => format!("{counts} ({pct})"),
                    RateStyle::PercentOnly => pct,
                }
            }
            Cell::Number { value, decimals } => format_decimal(*value, *decimals),
            Cell::MeanSd { mean, sd, decimals } => {
                format!("{} ± {}", format_decimal(*mean, *decimals), format_decimal(*sd, *decimals))
            }
            Cell::Interval {
                point,
                low,
                high,
                decimals,
            } => format!(
                "{} [{}, {}]",
                format_decimal(*point, *decimals),
                format_decimal(*low, *decimals),
                format_decimal(*high, *decimals)
            ),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Blank => Value::Null,
            Cell::Text(s) => Value::from(s.as_str()),
            Cell::Count(n) => Value::from(*n),
            Cell::Rate { rate, .. } => json!({
                "numerator": rate.numerator,
                "denominator": rate.denominator,
                "percent": rate.percent(PERCENT_DECIMALS).map(|p| p.trim_end_matches('%').to_string()),
            }),
            Cell::Number { value, decimals } => json!({
                "value": value,
                "display": format_decimal(*value, *decimals),
            }),
            Cell::MeanSd { mean, sd, .. } => json!({ "mean": mean, "sd": sd, "display": self.display() }),
            Cell::Interval { point, low, high, .. } => {
                json!({ "point": point, "low": low, "high": high, "display": self.display() })
            }
        }
    }

    /// Raw value plus numerator/denominator columns for CSV.
    fn csv_fields(&self) -> [String; 3] {
        match self {
            Cell::Rate { rate, .. } => [
                rate.percent(PERCENT_DECIMALS)
                    .map(|p| p.trim_end_matches('%').to_string())
                    .unwrap_or_default(),
                rate.numerator.to_string(),
                rate.denominator.to_string(),
            ],
            Cell::Count(n) => [n.to_string(), String::new(), String::new()],
            Cell::Number { value, decimals } => [format_decimal(*value, *decimals), String::new(), String::new()],
            other => [other.display(), String::new(), String::new()],
        }
    }
}

/// `1469` -> `1,469`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub id: String,
    pub title: String,
    /// Header for the row-label column.
    pub corner: String,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn new(id: impl Into<String>, title: impl Into<String>, corner: impl Into<String>, columns: Vec<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            corner: corner.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, cells: Vec<Cell>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(ReportRow {
            label: label.into(),
            cells,
        });
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<&Cell> {
        let j = self.columns.iter().position(|c| c == column)?;
        self.row(row).map(|r| &r.cells[j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub id: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub tables: Vec<ReportTable>,
    pub series: Vec<PlotSeries>,
}

impl ReportBundle {
    pub fn table(&self, id: &str) -> Option<&ReportTable> {
        self.tables.iter().find(|t| t.id == id)
    }

    pub fn extend(&mut self, other: ReportBundle) {
        self.tables.extend(other.tables);
        self.series.extend(other.series);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
    Csv,
}

pub fn render(bundle: &ReportBundle, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => render_text(bundle),
        ReportFormat::Json => render_json(bundle),
        ReportFormat::Csv => render_csv(bundle),
    }
}

pub fn render_text(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    for (idx, t) in bundle.tables.iter().enumerate() {
        if idx > 0 {
            out.push('\n');
        }
        out.push_str(&t.title);
        out.push('\n');
        let cells: Vec<Vec<String>> = t
            .rows
            .iter()
            .map(|r| r.cells.iter().map(Cell::display).collect())
            .collect();
        let label_w = t
            .rows
            .iter()
            .map(|r| r.label.chars().count())
            .chain([t.corner.chars().count()])
            .max()
            .unwrap_or(0);
        let widths: Vec<usize> = (0..t.columns.len())
            .map(|j| {
                cells
                    .iter()
                    .map(|r| r[j].chars().count())
                    .chain([t.columns[j].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |label: &str, values: &[String]| -> String {
            let mut s = pad_right(label, label_w);
            for (v, w) in values.iter().zip(&widths) {
                s.push_str("  ");
                s.push_str(&pad_left(v, *w));
            }
            s.trim_end().to_string()
        };
        out.push_str(&line(&t.corner, &t.columns));
        out.push('\n');
        for (r, values) in t.rows.iter().zip(&cells) {
            out.push_str(&line(&r.label, values));
            out.push('\n');
        }
    }
    for s in &bundle.series {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "series {} ({} vs {})", s.id, s.y_label, s.x_label);
        for [x, y] in &s.points {
            let _ = writeln!(out, "{x}\t{y}");
        }
    }
    out
}

fn pad_right(s: &str, w: usize) -> String {
    let n = s.chars().count();
    format!("{s}{}", " ".repeat(w.saturating_sub(n)))
}

fn pad_left(s: &str, w: usize) -> String {
    let n = s.chars().count();
    format!("{}{s}", " ".repeat(w.saturating_sub(n)))
}

pub fn render_json(bundle: &ReportBundle) -> String {
    let tables: Vec<Value> = bundle
        .tables
        .iter()
        .map(|t| {
            json!({
                "id": t.id,
                "title": t.title,
                "columns": t.columns,
                "rows": t.rows.iter().map(|r| json!({
                    "label": r.label,
                    "cells": r.cells.iter().map(Cell::to_json).collect::<Vec<_>>(),
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    let series: Vec<Value> = bundle
        .series
        .iter()
        .map(|s| json!({ "id": s.id, "x_label": s.x_label, "y_label": s.y_label, "points": s.points }))
        .collect();
    let mut out = serde_json::to_string_pretty(&json!({ "tables": tables, "series": series }))
        .expect("report values serialize");
    out.push('\n');
    out
}

/// Long format: one line per cell, one per series point.
pub fn render_csv(bundle: &ReportBundle) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["table", "row", "column", "value", "numerator", "denominator"])
        .expect("in-memory write");
    for t in &bundle.tables {
        for r in &t.rows {
            for (c, cell) in t.columns.iter().zip(&r.cells) {
                let [value, num, den] = cell.csv_fields();
                w.write_record([t.id.as_str(), &r.label, c, &value, &num, &den])
                    .expect("in-memory write");
            }
        }
    }
    for s in &bundle.series {
        for (i, [x, y]) in s.points.iter().enumerate() {
            w.write_record([s.id.as_str(), &i.to_string(), "x", &x.to_string(), "", ""])
                .expect("in-memory write");
            w.write_record([s.id.as_str(), &i.to_string(), "y", &y.to_string(), "", ""])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

// ---- builders ----

pub fn matrix_table(id: &str, title: &str, m: &ConfusionMatrix, corner: &str) -> ReportTable {
    let labels: Vec<String> = if m.k() == 5 {
        SeverityGrade::ALL.iter().map(|g| short_grade(*g).to_string()).collect()
    } else if m.k() == 2 && m.classes().iter().any(|c| c.contains("referable")) {
        vec!["Not Referable".into(), "Referable DME".into()]
    } else {
        m.classes().to_vec()
    };
    let mut t = ReportTable::new(id, title, corner, labels.clone());
    for (i, label) in labels.iter().enumerate() {
        t.push(label.clone(), (0..m.k()).map(|j| Cell::Count(m.get(i, j))).collect());
    }
    t
}

fn short_grade(g: SeverityGrade) -> &'static str {
    match g {
        SeverityGrade::NoDr => "No",
        SeverityGrade::Mild => "Mild",
        SeverityGrade::Moderate => "Moderate",
        SeverityGrade::Severe => "Severe",
        SeverityGrade::Proliferative => "Proliferative",
    }
}

pub const METRIC_COLUMNS: [&str; 5] = [
    "DR Sensitivity",
    "DR Specificity",
    "Quadratic-weighted kappa",
    "DME Sensitivity",
    "DME Specificity",
];

/// One row per comparison: DR sensitivity/specificity at `cutoff`, kappa,
/// and DME sensitivity/specificity.
pub fn metrics_table(id: &str, title: &str, rows: &[(String, &ReferenceComparison)], cutoff: SeverityGrade) -> ReportTable {
    let mut t = ReportTable::new(id, title, "", METRIC_COLUMNS.iter().map(|s| s.to_string()).collect());
    for (label, c) in rows {
        let dr_ss = c.dr.as_ref().and_then(|d| d.by_cutoff.get(&cutoff).copied().flatten());
        let dme_ss = c.dme.as_ref().and_then(|d| d.sens_spec);
        let opt_rate = |r: Option<Rate>| r.map_or(Cell::Blank, Cell::rate);
        t.push(
            label.clone(),
            vec![
                opt_rate(dr_ss.map(|s| s.sensitivity)),
                opt_rate(dr_ss.map(|s| s.specificity)),
                c.dr.as_ref().map_or(Cell::Blank, |d| Cell::kappa(d.kappa)),
                opt_rate(dme_ss.map(|s| s.sensitivity)),
                opt_rate(dme_ss.map(|s| s.specificity)),
            ],
        );
    }
    t
}

pub fn steps_table(id: &str, title: &str, c: &ReferenceComparison) -> Option<ReportTable> {
    let dr = c.dr.as_ref()?;
    let s = &dr.steps;
    let n = dr.confusion.matrix.n();
    let mut t = ReportTable::new(
        id,
        title,
        "",
        vec!["Count".into(), "% of images".into(), "% of disagreements".into()],
    );
    let mut push = |label: &str, count: u64| {
        let pct = |den| Cell::Rate {
            rate: Rate::new(count, den),
            style: RateStyle::PercentOnly,
        };
        t.push(label, vec![Cell::Count(count), pct(n), pct(s.total_disagreements)]);
    };
    push("Disagreements", s.total_disagreements);
    push("1 step", s.with_magnitude(1));
    push("2 steps", s.with_magnitude(2));
    push(">=2 steps", s.at_least(2));
    push(">=3 steps", s.at_least(3));
    push("Overgrading", s.over_count);
    push("Undergrading", s.under_count);
    push("Overgrading >=2 steps", s.over_at_least(2));
    push("Undergrading >=2 steps", s.under_at_least(2));
    Some(t)
}

/// Matrices, step analysis and headline metrics of one comparison.
pub fn comparison_report(
    prefix: &str,
    reference_label: &str,
    test_label: &str,
    c: &ReferenceComparison,
    cutoff: SeverityGrade,
) -> ReportBundle {
    let mut b = ReportBundle::default();
    let corner = format!("{reference_label} \\ {test_label}");
    if let Some(dr) = &c.dr {
        b.tables.push(matrix_table(
            &format!("{prefix}_dr"),
            &format!("DR: {reference_label} (rows) vs {test_label} (columns)"),
            &dr.confusion.matrix,
            &corner,
        ));
    }
    if let Some(dme) = &c.dme {
        b.tables.push(matrix_table(
            &format!("{prefix}_dme"),
            &format!("DME: {reference_label} (rows) vs {test_label} (columns)"),
            &dme.confusion.matrix,
            &corner,
        ));
    }
    if let Some(t) = steps_table(&format!("{prefix}_steps"), &format!("DR step analysis: {test_label} minus {reference_label}"), c) {
        b.tables.push(t);
    }
    b.tables.push(metrics_table(
        &format!("{prefix}_metrics"),
        &format!("Agreement with {reference_label} ({} or worse DR, referable DME)", cutoff.name()),
        &[(test_label.to_string(), c)],
        cutoff,
    ));
    b
}

fn step_header(s: i64) -> String {
    s.to_string()
}

pub fn reasons_table(id: &str, title: &str, x: &ReasonsCrosstab) -> ReportTable {
    let mut columns: Vec<String> = x.steps.iter().map(|&s| step_header(s)).collect();
    columns.push("Total".into());
    let mut t = ReportTable::new(id, title, "", columns);
    let count_or_blank = |n: u64| if n == 0 { Cell::Blank } else { Cell::Count(n) };
    for c in ReasonCategory::ALL {
        let mut cells: Vec<Cell> = x.rows[&c].iter().map(|&n| count_or_blank(n)).collect();
        cells.push(count_or_blank(x.row_totals[&c]));
        t.push(c.label(), cells);
    }
    let mut totals: Vec<Cell> = x.column_totals.iter().map(|&n| Cell::Count(n)).collect();
    totals.push(Cell::Count(x.grand_total));
    t.push("Total", totals);
    t
}

pub fn summary_report(prefix: &str, name: &str, s: &DatasetSummary) -> ReportBundle {
    let mut chars = ReportTable::new(format!("{prefix}_characteristics"), format!("Dataset characteristics: {name}"), "", vec![name.into()]);
    chars.push("Images (#)", vec![Cell::Count(s.images as u64)]);
    chars.push("Unique Individuals (#)", vec![Cell::Count(s.unique_individuals as u64)]);
    chars.push(
        "Age (Average ± Stdev)",
        vec![s.age.map_or(Cell::Text("not recorded".into()), |a| Cell::MeanSd {
            mean: a.mean,
            sd: a.sd,
            decimals: 1,
        })],
    );
    chars.push(
        "Female / patients with known gender",
        vec![Cell::Rate {
            rate: s.female,
            style: RateStyle::CountsWithPercent,
        }],
    );
    chars.push(
        "Fully gradable / images with quality assessed",
        vec![Cell::Rate {
            rate: s.gradable,
            style: RateStyle::CountsWithPercent,
        }],
    );

    let mut dist = ReportTable::new(
        format!("{prefix}_severity"),
        format!("Disease severity distribution: {name}"),
        "",
        vec!["#".into(), "%".into()],
    );
    let pct = |rate: Rate| Cell::Rate {
        rate,
        style: RateStyle::PercentOnly,
    };
    let dr_total = s.dr_distribution.values().next().map_or(0, |r| r.denominator);
    dist.push("Total images where DR was assessed", vec![Cell::Count(dr_total), pct(Rate::new(dr_total, dr_total))]);
    for (g, rate) in &s.dr_distribution {
        let label = if *g == SeverityGrade::NoDr { "No diabetic retinopathy" } else { g.name() };
        dist.push(label, vec![Cell::Count(rate.numerator), pct(*rate)]);
    }
    let dme_total = s.dme_referable.denominator;
    dist.push("Total images where DME was assessed", vec![Cell::Count(dme_total), pct(Rate::new(dme_total, dme_total))]);
    dist.push(
        "Referable diabetic macular edema",
        vec![Cell::Count(s.dme_referable.numerator), pct(s.dme_referable)],
    );
    ReportBundle {
        tables: vec![chars, dist],
        series: vec![],
    }
}

pub fn agreement_table(id: &str, title: &str, s: &AgreementSummary) -> ReportTable {
    let mut t = ReportTable::new(
        id,
        title,
        "Grader",
        vec![
            "DR referable".into(),
            "DR non-referable".into(),
            "DME referable".into(),
            "DME non-referable".into(),
        ],
    );
    for g in &s.graders {
        t.push(
            g.grader.id.clone(),
            [g.dr_referable, g.dr_nonreferable, g.dme_referable, g.dme_nonreferable]
                .into_iter()
                .map(Cell::rate)
                .collect(),
        );
    }
    t
}

pub fn roc_series(id: &str, curve: &RocCurve) -> PlotSeries {
    PlotSeries {
        id: id.into(),
        x_label: "false positive rate".into(),
        y_label: "sensitivity".into(),
        points: curve
            .points
            .iter()
            .map(|p| [p.false_positive_rate, p.sensitivity])
            .collect(),
    }
}

/// AUC per input resolution, e.g. for a resolution sweep.
pub fn resolution_series(id: &str, points: &[(u32, f64)]) -> PlotSeries {
    let mut pts: Vec<[f64; 2]> = points.iter().map(|&(r, a)| [f64::from(r), a]).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
    PlotSeries {
        id: id.into(),
        x_label: "input resolution (px)".into(),
        y_label: "AUC".into(),
        points: pts,
    }
}

pub fn auc_table(id: &str, title: &str, rows: &[(String, f64, Option<&BootstrapInterval>)]) -> ReportTable {
    let mut t = ReportTable::new(id, title, "", vec!["AUC".into()]);
    for (label, auc, ci) in rows {
        let cell = match ci {
            Some(ci) => Cell::Interval {
                point: *auc,
                low: ci.low,
                high: ci.high,
                decimals: AUC_DECIMALS,
            },
            None => Cell::Number {
                value: *auc,
                decimals: AUC_DECIMALS,
            },
        };
        t.push(label.clone(), vec![cell]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{compare_references, reasons_crosstab, DisagreementReason};
    use crate::metrics::roc;
    use crate::model::{Assessment, DmeStatus, ReferenceEntry, ReferenceMethod, ReferenceStandard};

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(1469), "1,469");
        assert_eq!(thousands(1665151), "1,665,151");
    }

    fn small_comparison() -> ReferenceComparison {
        let mut a = ReferenceStandard::new(ReferenceMethod::AdjudicatedConsensus);
        let mut b = ReferenceStandard::new(ReferenceMethod::Majority);
        for (i, (x, y)) in [(0u8, 0u8), (2, 2), (2, 1), (3, 3), (4, 2), (0, 1)].into_iter().enumerate() {
            let id = format!("i{i}");
            let g = |l| SeverityGrade::from_level(l).unwrap();
            a.insert(ReferenceEntry::from_assessment(&id, Assessment::gradable(g(x), DmeStatus::NotReferable), vec![]));
            b.insert(ReferenceEntry::from_assessment(&id, Assessment::gradable(g(y), DmeStatus::NotReferable), vec![]));
        }
        compare_references(&a, &b).unwrap()
    }

    #[test]
    fn rendering_is_deterministic() {
        let c = small_comparison();
        let mut bundle = comparison_report("cmp", "Adjudicated", "Majority", &c, SeverityGrade::Moderate);
        bundle.series.push(roc_series(
            "toy",
            &roc(&[true, true, false, false], &[0.9, 0.4, 0.6, 0.1]).unwrap(),
        ));
        for f in [ReportFormat::Text, ReportFormat::Json, ReportFormat::Csv] {
            assert_eq!(render(&bundle, f), render(&bundle.clone(), f));
        }
        let text = render_text(&bundle);
        assert!(text.contains("75.0% (3/4)"), "{text}");
    }

    #[test]
    fn toy_roc_series_has_endpoints() {
        let s = roc_series("toy", &roc(&[true, true, false, false], &[0.9, 0.4, 0.6, 0.1]).unwrap());
        assert_eq!(s.points.first(), Some(&[0.0, 0.0]));
        assert_eq!(s.points.last(), Some(&[1.0, 1.0]));
        assert_eq!(s.points.len(), 5);
    }

    #[test]
    fn rates_carry_counts_in_every_format() {
        let c = small_comparison();
        let b = comparison_report("cmp", "A", "B", &c, SeverityGrade::Moderate);
        let json: Value = serde_json::from_str(&render_json(&b)).unwrap();
        let metrics = json["tables"]
            .as_array()
            .unwrap()
            .iter()
            .find(|t| t["id"] == "cmp_metrics")
            .unwrap();
        let sens = &metrics["rows"][0]["cells"][0];
        assert_eq!((sens["numerator"].as_u64(), sens["denominator"].as_u64()), (Some(3), Some(4)));
        assert!(render_csv(&b).contains("cmp_metrics,B,DR Sensitivity,75.0,3,4"));
    }

    #[test]
    fn reasons_table_totals_row() {
        let reasons = vec![
            DisagreementReason {
                image_id: "a".into(),
                category: ReasonCategory::MissedMa,
                signed_step: 1,
                note: None,
            },
            DisagreementReason {
                image_id: "b".into(),
                category: ReasonCategory::PrpVsNot,
                signed_step: -4,
                note: None,
            },
        ];
        let t = reasons_table("t5", "Reasons", &reasons_crosstab(&reasons).unwrap());
        assert_eq!(t.columns, ["-4", "1", "Total"]);
        assert_eq!(t.cell("Total", "Total"), Some(&Cell::Count(2)));
        assert_eq!(t.cell("Missed MA", "-4"), Some(&Cell::Blank));
    }
}
