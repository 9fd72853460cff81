use rayon::prelude::*;

use airwayseg::metrics::{aggregate, evaluate_case, AggregateReport, CaseReport, EvalOptions};
use airwayseg::volio::{read_labels, read_mask, read_probabilities, write_report, Report, ReportFormat, ReportMetadata};
use airwayseg::{BinaryMask, ClassTable};

use super::{ensure_dir, ensure_parent};
use crate::cases::{collect, CaseFiles};
use crate::{load_classes, CliError, CliResult, EvaluateArgs, EXIT_OK, EXIT_PARTIAL};

/// Reports of one `evaluate` invocation, before anything is written.
#[derive(Debug, Clone)]
pub struct EvaluationRun {
    /// Successful cases in case-id order.
    pub reports: Vec<CaseReport>,
    /// `(case_id, reason)` for cases that could not be evaluated.
    pub failures: Vec<(String, String)>,
    pub aggregate: Option<AggregateReport>,
    pub metadata: ReportMetadata,
}

fn evaluate_one(
    case: &CaseFiles,
    classes: Option<&ClassTable>,
    region: Option<&BinaryMask>,
    args: &EvaluateArgs,
) -> Result<CaseReport, String> {
    let gt_path = case.gt.as_ref().ok_or("missing ground truth file")?;
    let pred_path = case.pred.as_ref().ok_or("missing prediction file")?;
    let err = |e: airwayseg::Error| e.to_string();
    let gt = read_labels(gt_path, classes).map_err(err)?;
    let pred = read_labels(pred_path, classes).map_err(err)?;
    let prob = match (&case.prob, args.no_auc) {
        (Some(p), false) => Some(read_probabilities(p).map_err(err)?),
        _ => None,
    };
    let own_region = match (region, &case.region) {
        (None, Some(r)) => Some(read_mask(r).map_err(err)?),
        _ => None,
    };
    let tolerance_mm = match args.tolerance_px {
        Some(px) => px * gt.spacing().max_in_plane(),
        None => args.tolerance_mm,
    };
    let opts = EvalOptions {
        tolerance_mm,
        compute_auc: !args.no_auc,
        auc_subsample: args.auc_subsample,
    };
    evaluate_case(
        &case.case_id,
        &gt,
        &pred,
        prob.as_ref(),
        region.or(own_region.as_ref()),
        &opts,
    )
    .map_err(err)
}

fn metadata(args: &EvaluateArgs, failures: &[(String, String)]) -> ReportMetadata {
    let mut m: ReportMetadata = Vec::new();
    let mut put = |k: &str, v: String| m.push((k.to_string(), v));
    match args.tolerance_px {
        Some(px) => put("tolerance_px", px.to_string()),
        None => put("tolerance_mm", args.tolerance_mm.to_string()),
    }
    put("compute_auc", (!args.no_auc).to_string());
    put(
        "auc_subsample",
        args.auc_subsample.map_or("none".to_string(), |n| n.to_string()),
    );
    put(
        "region",
        args.region
            .as_ref()
            .map_or("per-case".to_string(), |p| p.display().to_string()),
    );
    put(
        "classes",
        args.cases
            .classes
            .as_ref()
            .map_or("header".to_string(), |p| p.display().to_string()),
    );
    let failed: Vec<&str> = failures.iter().map(|f| f.0.as_str()).collect();
    put("failed_cases", failed.join(";"));
    m
}

/// Evaluates every discovered case in the current thread pool.
pub fn evaluate_cases(args: &EvaluateArgs) -> CliResult<EvaluationRun> {
    if let Some(px) = args.tolerance_px {
        if !(px.is_finite() && px >= 0.0) {
            return Err(CliError(format!("--tolerance-px {px} must be >= 0")));
        }
    }
    let cases = collect(&args.cases)?;
    if !cases.iter().any(|c| c.gt.is_some() && c.pred.is_some()) {
        return Err(CliError("no matched (ground truth, prediction) pairs".into()));
    }
    let classes = load_classes(args.cases.classes.as_deref())?;
    let region = args.region.as_ref().map(read_mask).transpose()?;

    let results: Vec<Result<CaseReport, String>> = cases
        .par_iter()
        .map(|c| evaluate_one(c, classes.as_ref(), region.as_ref(), args))
        .collect();

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (case, r) in cases.iter().zip(results) {
        match r {
            Ok(rep) => reports.push(rep),
            Err(why) => failures.push((case.case_id.clone(), why)),
        }
    }
    let aggregate = if reports.is_empty() {
        None
    } else {
        Some(aggregate(&reports)?)
    };
    Ok(EvaluationRun {
        metadata: metadata(args, &failures),
        reports,
        failures,
        aggregate,
    })
}

pub fn run(args: &EvaluateArgs) -> CliResult<i32> {
    let run = evaluate_cases(args)?;
    for (id, why) in &run.failures {
        eprintln!("case {id} failed: {why}");
    }
    let format: ReportFormat = args.output.format.into();
    if let Some(agg) = &run.aggregate {
        ensure_dir(&args.out)?;
        let cases_path = args.out.join(format!("cases.{}", format.extension()));
        let agg_path = args.out.join(format!("aggregate.{}", format.extension()));
        ensure_parent(&cases_path)?;
        write_report(&Report::Cases(&run.reports), &run.metadata, &cases_path, format)?;
        write_report(&Report::Aggregate(agg), &run.metadata, &agg_path, format)?;
        println!(
            "evaluated {} case(s), {} failed; wrote {} and {}",
            run.reports.len(),
            run.failures.len(),
            cases_path.display(),
            agg_path.display()
        );
    }
    Ok(if run.failures.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}
