use airwayseg::posthoc::{ensemble_variance, Ensemble, VarianceSummary};
use airwayseg::volio::{read_mask, read_probabilities, write_probabilities, write_report, Report, ReportMetadata};

use super::ensure_parent;
use crate::{CliError, CliResult, UncertaintyArgs, EXIT_OK};

pub fn summarize(args: &UncertaintyArgs) -> CliResult<(VarianceSummary<f64>, ReportMetadata)> {
    if args.members.len() < 2 {
        return Err(CliError(format!(
            "an ensemble needs at least 2 members, got {}",
            args.members.len()
        )));
    }
    let members = args.members.iter().map(read_probabilities).collect::<Result<Vec<_>, _>>()?;
    let ensemble = Ensemble::new(members)?;
    let region = args.region.as_ref().map(read_mask).transpose()?;
    let summary = ensemble_variance(&ensemble, region.as_ref(), args.estimator.into())?;
    let metadata = vec![
        ("estimator".to_string(), format!("{:?}", summary.estimator).to_lowercase()),
        ("members".to_string(), args.members.len().to_string()),
        (
            "region".to_string(),
            args.region.as_ref().map_or("none".to_string(), |p| p.display().to_string()),
        ),
    ];
    Ok((summary, metadata))
}

pub fn run(args: &UncertaintyArgs) -> CliResult<i32> {
    let (summary, metadata) = summarize(args)?;
    ensure_parent(&args.out_volume)?;
    ensure_parent(&args.out)?;
    write_probabilities(&summary.variance, &args.out_volume)?;
    write_report(&Report::Variance(&summary), &metadata, &args.out, args.output.format.into())?;
    println!(
        "global mean variance {:e} (std {:e}) over {} voxel(s)",
        summary.global_mean, summary.global_std, summary.voxels_considered
    );
    Ok(EXIT_OK)
}
