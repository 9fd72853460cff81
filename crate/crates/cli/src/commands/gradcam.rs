use airwayseg::posthoc::{grad_cam, normalize_heatmap, resample_heatmap, NormalizedHeatmap};
use airwayseg::volio::{read_tensor, write_tensor};

use super::ensure_parent;
use crate::{CliResult, GradcamArgs, EXIT_OK};

/// Grad-CAM map, resampled to the target grid (if any) and then scaled to max 1.
pub fn heatmap(args: &GradcamArgs) -> CliResult<NormalizedHeatmap<f64>> {
    let activations = read_tensor(&args.activations)?;
    let gradients = read_tensor(&args.gradients)?;
    let mut map = grad_cam(&activations, &gradients)?;
    if let Some(target) = &args.target_dims {
        map = resample_heatmap(&map, &target.0)?;
    }
    Ok(normalize_heatmap(&map)?)
}

pub fn run(args: &GradcamArgs) -> CliResult<i32> {
    let h = heatmap(args)?;
    ensure_parent(&args.out)?;
    let dims: Vec<String> = h.heatmap.spatial().iter().map(|d| d.to_string()).collect();
    let zero_map = h.zero_map;
    write_tensor(&h.heatmap.into_tensor(), &args.out)?;
    println!("heatmap {} written to {}; zero_map={zero_map}", dims.join("x"), args.out.display());
    Ok(EXIT_OK)
}
