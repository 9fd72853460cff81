//! Report serialization: JSON or CSV, reals at 6 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::metrics::{AggregateReport, CaseReport, MetricKind, MetricValue};
use crate::posthoc::VarianceSummary;
use crate::stats::{ClassCorrelation, CorrelationOutcome};

pub const SIGNIFICANT_DIGITS: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

/// Key/value pairs recorded with a report, in insertion order.
pub type ReportMetadata = Vec<(String, String)>;

pub enum Report<'a> {
    Case(&'a CaseReport),
    Cases(&'a [CaseReport]),
    Aggregate(&'a AggregateReport),
    Correlation(&'a [ClassCorrelation]),
    Variance(&'a VarianceSummary<f64>),
}

impl Report<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            Report::Case(_) => "case",
            Report::Cases(_) => "cases",
            Report::Aggregate(_) => "aggregate",
            Report::Correlation(_) => "correlation",
            Report::Variance(_) => "variance",
        }
    }
}

/// `%g`-style formatting with [`SIGNIFICANT_DIGITS`] digits: fixed notation for
/// decimal exponents in `[-4, 6)`, scientific otherwise, trailing zeros dropped.
pub fn format_real(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let p = SIGNIFICANT_DIGITS;
    let sci = format!("{:.*e}", p - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..p as i32).contains(&exp) {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, v))
    } else {
        let sign = if exp < 0 { "-" } else { "+" };
        format!("{}e{}{:02}", trim(mantissa), sign, exp.abs())
    }
}

/// `v` rounded to [`SIGNIFICANT_DIGITS`] digits.
pub fn round_real(v: f64) -> f64 {
    format_real(v).parse().unwrap_or(v)
}

fn round_json(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round_real(n.as_f64().expect("f64 number"));
            serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

fn metric_cell(v: &MetricValue) -> String {
    match v {
        MetricValue::Defined(x) => format_real(*x),
        MetricValue::Undefined(r) => format!("null:{}", r.code()),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn correlation_json(rows: &[ClassCorrelation]) -> Value {
    Value::Array(
        rows.iter()
            .map(|r| match &r.outcome {
                CorrelationOutcome::Defined(c) => json!({
                    "class_id": r.class_id,
                    "class": r.class_name,
                    "rho": c.rho,
                    "p_value": c.p_value,
                    "n": r.n,
                    "method": c.method.label(),
                    "sidedness": c.sidedness.label(),
                }),
                CorrelationOutcome::Undefined(why) => json!({
                    "class_id": r.class_id,
                    "class": r.class_name,
                    "rho": {"value": null, "reason": why},
                    "p_value": {"value": null, "reason": why},
                    "n": r.n,
                    "method": null,
                    "sidedness": null,
                }),
            })
            .collect(),
    )
}

fn variance_json(v: &VarianceSummary<f64>) -> Value {
    json!({
        "estimator": v.estimator,
        "members": v.members,
        "voxels_considered": v.voxels_considered,
        "per_class_mean": v.per_class_mean,
        "global_mean": v.global_mean,
        "global_std": v.global_std,
    })
}

fn check_nonempty(report: &Report) -> Result<()> {
    let empty = match report {
        Report::Case(c) => c.rows.is_empty(),
        Report::Cases(c) => c.is_empty() || c.iter().all(|c| c.rows.is_empty()),
        Report::Aggregate(a) => a.class_ids.is_empty() || a.case_count == 0,
        Report::Correlation(r) => r.is_empty(),
        Report::Variance(v) => v.per_class_mean.is_empty(),
    };
    if empty {
        Err(Error::Empty("report has no rows"))
    } else {
        Ok(())
    }
}

/// Renders `report` with its metadata block.
pub fn render_report(report: &Report, metadata: &ReportMetadata, format: ReportFormat) -> Result<String> {
    check_nonempty(report)?;
    match format {
        ReportFormat::Json => {
            let body = match report {
                Report::Case(c) => serde_json::to_value(c)?,
                Report::Cases(c) => serde_json::to_value(c)?,
                Report::Aggregate(a) => serde_json::to_value(a)?,
                Report::Correlation(r) => correlation_json(r),
                Report::Variance(v) => variance_json(v),
            };
            let meta: serde_json::Map<String, Value> =
                metadata.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
            let doc = json!({
                "kind": report.kind(),
                "metadata": meta,
                "report": round_json(body),
            });
            let mut s = serde_json::to_string_pretty(&doc)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut out = String::new();
            let _ = writeln!(out, "# kind={}", report.kind());
            for (k, v) in metadata {
                let _ = writeln!(out, "# {k}={v}");
            }
            render_csv_body(report, &mut out);
            Ok(out)
        }
    }
}

fn render_csv_body(report: &Report, out: &mut String) {
    let case_rows = |out: &mut String, c: &CaseReport| {
        for r in &c.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                csv_field(&c.case_id),
                r.class_id,
                csv_field(&r.class_name),
                metric_cell(&r.dice),
                metric_cell(&r.nsd),
                metric_cell(&r.sensitivity),
                metric_cell(&r.specificity),
                metric_cell(&r.auc),
                r.gt_voxels,
                r.pred_voxels
            );
        }
    };
    const CASE_HEADER: &str = "case_id,class_id,class,dice,nsd,sensitivity,specificity,auc,gt_voxels,pred_voxels";
    match report {
        Report::Case(c) => {
            let _ = writeln!(out, "{CASE_HEADER}");
            case_rows(out, c);
        }
        Report::Cases(cs) => {
            let _ = writeln!(out, "{CASE_HEADER}");
            for c in cs.iter() {
                case_rows(out, c);
            }
        }
        Report::Aggregate(a) => {
            let names: Vec<String> = a.class_names.iter().map(|n| csv_field(n)).collect();
            let _ = writeln!(out, "metric,{},Avg", names.join(","));
            for kind in MetricKind::ALL {
                let m = a.metric(kind);
                let cells: Vec<String> = m.per_class.iter().map(metric_cell).collect();
                let _ = writeln!(out, "{},{},{}", kind.table_label(), cells.join(","), metric_cell(&m.avg));
            }
        }
        Report::Correlation(rows) => {
            let _ = writeln!(out, "class_id,class,rho,p_value,n,method,sidedness");
            for r in rows.iter() {
                let (rho, p, method, side) = match &r.outcome {
                    CorrelationOutcome::Defined(c) => (
                        format_real(c.rho),
                        format_real(c.p_value),
                        c.method.label().to_string(),
                        c.sidedness.label().to_string(),
                    ),
                    CorrelationOutcome::Undefined(why) => {
                        let cell = csv_field(&format!("null:{why}"));
                        (cell.clone(), cell, String::new(), String::new())
                    }
                };
                let _ = writeln!(
                    out,
                    "{},{},{rho},{p},{},{method},{side}",
                    r.class_id,
                    csv_field(&r.class_name),
                    r.n
                );
            }
        }
        Report::Variance(v) => {
            let _ = writeln!(out, "scope,mean_variance");
            for (c, m) in v.per_class_mean.iter().enumerate() {
                let _ = writeln!(out, "channel_{c},{}", format_real(*m));
            }
            let _ = writeln!(out, "global,{}", format_real(v.global_mean));
            let _ = writeln!(out, "global_std,{}", format_real(v.global_std));
        }
    }
}

/// Renders and writes a report. Empty reports are rejected before any file is created.
pub fn write_report(report: &Report, metadata: &ReportMetadata, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = render_report(report, metadata, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{MetricRow, MetricSummary, Undefined};
    use crate::stats::{CorrelationResult, PValueMethod, Sidedness};

    #[test]
    fn real_formatting() {
        let cases = [
            (0.7692307692307692, "0.769231"),
            (1.0, "1"),
            (0.020686192908586372, "0.0206862"),
            (1.607733468833539e-13, "1.60773e-13"),
            (-0.46, "-0.46"),
            (123456789.0, "1.23457e+08"),
            (0.0001, "0.0001"),
            (0.00001, "1e-05"),
            (999999.6, "1e+06"),
            (0.0, "0"),
        ];
        for (v, want) in cases {
            assert_eq!(format_real(v), want, "{v}");
        }
    }

    fn aggregate() -> AggregateReport {
        let summary = |kind, a: f64, b: Option<f64>| MetricSummary {
            metric: kind,
            per_class: vec![
                MetricValue::Defined(a),
                b.map_or(MetricValue::Undefined(Undefined::NoDefinedCases), MetricValue::Defined),
            ],
            avg: MetricValue::Defined(b.map_or(a, |b| (a + b) / 2.0)),
            excluded: vec![0, usize::from(b.is_none())],
        };
        AggregateReport {
            case_count: 2,
            class_ids: vec![1, 2],
            class_names: vec!["Bronchiectasis".into(), "Consolidation".into()],
            metrics: vec![
                summary(MetricKind::Dice, 0.8, Some(0.6)),
                summary(MetricKind::Nsd, 0.9, Some(0.7)),
                summary(MetricKind::Sensitivity, 0.75, Some(2.0 / 3.0)),
                summary(MetricKind::Specificity, 0.99, Some(0.98)),
                summary(MetricKind::Auc, 0.95, None),
            ],
        }
    }

    #[test]
    fn aggregate_csv_layout() {
        let meta = vec![("tolerance_mm".to_string(), "1.8".to_string())];
        let text = render_report(&Report::Aggregate(&aggregate()), &meta, ReportFormat::Csv).unwrap();
        let expected = "# kind=aggregate\n# tolerance_mm=1.8\nmetric,Bronchiectasis,Consolidation,Avg\n\
Dice,0.8,0.6,0.7\nNSD,0.9,0.7,0.8\nSensibility,0.75,0.666667,0.708333\n\
Specificity,0.99,0.98,0.985\nAUC,0.95,null:no_defined_cases,0.95\n";
        assert_eq!(text, expected);
    }

    #[test]
    fn json_keeps_undefined_with_reason() {
        let text = render_report(&Report::Aggregate(&aggregate()), &vec![], ReportFormat::Json).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        let auc = &v["report"]["metrics"][4];
        assert_eq!(auc["per_class"][1]["reason"], "no_defined_cases");
        assert!(auc["per_class"][1]["value"].is_null());
        assert_eq!(v["report"]["metrics"][2]["per_class"][1], json!(0.666667));
    }

    #[test]
    fn correlation_csv_rows() {
        let rows = vec![
            ClassCorrelation {
                class_id: 1,
                class_name: "Bronchiectasis".into(),
                n: 25,
                outcome: CorrelationOutcome::Defined(CorrelationResult {
                    rho: -0.46,
                    p_value: 0.020686192908586372,
                    n: 25,
                    method: PValueMethod::TApproximation,
                    sidedness: Sidedness::TwoSided,
                }),
            },
            ClassCorrelation {
                class_id: 2,
                class_name: "Consolidation".into(),
                n: 25,
                outcome: CorrelationOutcome::Undefined("constant x".into()),
            },
        ];
        let text = render_report(&Report::Correlation(&rows), &vec![], ReportFormat::Csv).unwrap();
        assert_eq!(
            text,
            "# kind=correlation\nclass_id,class,rho,p_value,n,method,sidedness\n\
1,Bronchiectasis,-0.46,0.0206862,25,t-approximation,two-sided\n\
2,Consolidation,null:constant x,null:constant x,25,,\n"
        );
    }

    #[test]
    fn empty_reports_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let r = write_report(&Report::Correlation(&[]), &vec![], &path, ReportFormat::Csv);
        assert!(matches!(r, Err(Error::Empty(_))));
        assert!(!path.exists());
        let c = CaseReport {
            case_id: "a".into(),
            rows: Vec::<MetricRow>::new(),
            region_used: false,
            tolerance_mm: 1.8,
            auc_subsample: None,
        };
        assert!(render_report(&Report::Case(&c), &vec![], ReportFormat::Json).is_err());
    }
}
