use std::collections::BTreeSet;

use rayon::prelude::*;

use airwayseg::stats::{correlate_volumes, CaseVolumes, ClassCorrelation};
use airwayseg::volio::{read_labels, read_pft_csv, write_report, Report, ReportMetadata};
use airwayseg::ClassTable;

use super::ensure_parent;
use crate::cases::collect;
use crate::{load_classes, CliError, CliResult, CorrelateArgs, EXIT_OK};

#[derive(Debug, Clone)]
pub struct CorrelationRun {
    pub rows: Vec<ClassCorrelation>,
    pub metadata: ReportMetadata,
}

pub fn correlate_cases(args: &CorrelateArgs) -> CliResult<CorrelationRun> {
    let cases = collect(&args.cases)?;
    let preds: Vec<(String, std::path::PathBuf)> = cases
        .iter()
        .filter_map(|c| c.pred.clone().map(|p| (c.case_id.clone(), p)))
        .collect();
    if preds.is_empty() {
        return Err(CliError("no prediction volumes found".into()));
    }
    let pft = read_pft_csv(&args.pft)?;

    let pred_ids: BTreeSet<&str> = preds.iter().map(|p| p.0.as_str()).collect();
    let pft_ids: BTreeSet<&str> = pft.rows().iter().map(|r| r.0.as_str()).collect();
    let no_pft: Vec<&str> = pred_ids.difference(&pft_ids).copied().collect();
    let no_pred: Vec<&str> = pft_ids.difference(&pred_ids).copied().collect();
    if !no_pft.is_empty() || !no_pred.is_empty() {
        return Err(CliError(format!(
            "case ids do not match; without FEV1%: [{}]; without prediction: [{}]",
            no_pft.join(", "),
            no_pred.join(", ")
        )));
    }
    if preds.len() < 3 {
        return Err(CliError(format!("correlation needs at least 3 cases, got {}", preds.len())));
    }

    let classes = load_classes(args.cases.classes.as_deref())?;
    let loaded: Vec<_> = preds
        .par_iter()
        .map(|(id, path)| read_labels(path, classes.as_ref()).map(|v| (id.clone(), v)))
        .collect::<Result<_, _>>()?;
    let table: ClassTable = loaded[0].1.classes().clone();
    if let Some((id, _)) = loaded.iter().find(|(_, v)| v.classes() != &table) {
        return Err(CliError(format!("case {id} has a different class table")));
    }
    let volumes: Vec<CaseVolumes> = loaded.iter().map(|(id, v)| CaseVolumes::from_labels(id.clone(), v)).collect();
    let rows = correlate_volumes(&volumes, &pft, &table, args.sidedness.into())?;

    let metadata = vec![
        ("sidedness".to_string(), airwayseg::stats::Sidedness::from(args.sidedness).label().to_string()),
        ("pft".to_string(), args.pft.display().to_string()),
        (
            "classes".to_string(),
            args.cases.classes.as_ref().map_or("header".to_string(), |p| p.display().to_string()),
        ),
        ("volume_unit".to_string(), "mm3".to_string()),
    ];
    Ok(CorrelationRun { rows, metadata })
}

pub fn run(args: &CorrelateArgs) -> CliResult<i32> {
    let run = correlate_cases(args)?;
    ensure_parent(&args.out)?;
    write_report(&Report::Correlation(&run.rows), &run.metadata, &args.out, args.output.format.into())?;
    println!("wrote {} correlation row(s) to {}", run.rows.len(), args.out.display());
    Ok(EXIT_OK)
}
