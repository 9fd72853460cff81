use serde::Serialize;

use airwayseg::losses::{
    compare_gradients, evaluate_loss, finite_difference_gradient, LossKind, LossOptions, GRADIENT_REL_TOL,
};
use airwayseg::volgrid::one_hot;
use airwayseg::volio::{read_labels, read_probabilities, XorShift64Star};
use airwayseg::{ClassTable, Dims, LabelVolume, ProbVolume, VoxelSpacing};

use super::ensure_parent;
use crate::{CliError, CliResult, LossCheckArgs, EXIT_OK, EXIT_PARTIAL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Top-k selection has an exact tie, so the loss is not differentiable here.
    Tie,
}

#[derive(Clone, Debug, Serialize)]
pub struct LossCheckRow {
    pub loss: String,
    pub value: f64,
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
    pub status: CheckStatus,
}

#[derive(Clone, Debug, Serialize)]
pub struct LossCheckReport {
    pub options: LossOptions,
    pub h: f64,
    pub k_fraction: f64,
    pub rows: Vec<LossCheckRow>,
    /// Largest `|W(a) - ((1 - a) W(0) + a W(1))|` over the requested blend weights.
    pub alpha_linearity_deviation: f64,
    pub passed: bool,
}

/// Random labels and strictly positive normalized probabilities on an
/// `nx × ny × nz` grid with `c` classes.
pub fn random_pair(dims: [usize; 4], seed: u64) -> CliResult<(ProbVolume<f64>, ProbVolume<f64>)> {
    let [nx, ny, nz, c] = dims;
    if !(2..=256).contains(&c) {
        return Err(CliError(format!("class count {c} must be in 2..=256")));
    }
    let grid = Dims::new(nx, ny, nz);
    let n = grid.len();
    let mut rng = XorShift64Star::new(seed);
    let labels: Vec<u8> = (0..n).map(|_| rng.below(c) as u8).collect();
    let mut p = vec![0.0; n * c];
    for i in 0..n {
        let raw: Vec<f64> = (0..c).map(|_| 0.05 + rng.next_f64()).collect();
        let s: f64 = raw.iter().sum();
        for (k, r) in raw.iter().enumerate() {
            p[k * n + i] = r / s;
        }
    }
    let spacing = VoxelSpacing::isotropic_mm();
    let y = LabelVolume::new(grid, spacing, labels, ClassTable::numbered(c - 1)?)?;
    Ok((one_hot(&y), ProbVolume::new(grid, spacing, c, p, true)?))
}

fn check_one(
    kind: LossKind,
    y: &ProbVolume<f64>,
    p: &ProbVolume<f64>,
    h: f64,
    opts: &LossOptions,
) -> CliResult<LossCheckRow> {
    let v = evaluate_loss(kind, y, p, opts, true)?;
    let fd = finite_difference_gradient(kind, y, p, h, opts)?;
    let check = compare_gradients(v.gradient.as_deref().expect("gradient requested"), &fd.gradient);
    let status = if v.has_selection_tie() {
        CheckStatus::Tie
    } else if check.passed {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok(LossCheckRow {
        loss: kind.label(),
        value: v.value,
        max_rel_err: check.max_rel_err,
        max_abs_err_small: check.max_abs_err_small,
        status,
    })
}

pub fn check_losses(y: &ProbVolume<f64>, p: &ProbVolume<f64>, args: &LossCheckArgs) -> CliResult<LossCheckReport> {
    let opts = LossOptions {
        dice_convention: args.loss.dice_convention.into(),
        top_k_normalization: args.loss.top_k_normalization.into(),
        include_background: args.loss.include_background,
    };
    let k = args.k_fraction;
    let mut kinds = vec![
        LossKind::CrossEntropy,
        LossKind::SoftDice,
        LossKind::DiceCe,
        LossKind::TopK { k_fraction: k },
    ];
    kinds.extend(args.alpha.iter().map(|&alpha| LossKind::WDiceTopK { alpha, k_fraction: k }));
    let rows = kinds
        .into_iter()
        .map(|kind| check_one(kind, y, p, args.h, &opts))
        .collect::<CliResult<Vec<_>>>()?;

    let blend = |alpha: f64| {
        evaluate_loss(LossKind::WDiceTopK { alpha, k_fraction: k }, y, p, &opts, false).map(|v| v.value)
    };
    let (w0, w1) = (blend(0.0)?, blend(1.0)?);
    let mut deviation: f64 = 0.0;
    for &a in &args.alpha {
        deviation = deviation.max((blend(a)? - ((1.0 - a) * w0 + a * w1)).abs());
    }
    let passed = rows.iter().all(|r| r.status != CheckStatus::Fail);
    Ok(LossCheckReport {
        options: opts,
        h: args.h,
        k_fraction: k,
        rows,
        alpha_linearity_deviation: deviation,
        passed,
    })
}

fn load_pair(args: &LossCheckArgs) -> CliResult<(ProbVolume<f64>, ProbVolume<f64>)> {
    match (&args.y, &args.p, &args.random) {
        (Some(yp), Some(pp), _) => {
            let p = read_probabilities(pp)?;
            let classes = ClassTable::numbered(p.num_classes().saturating_sub(1))?;
            let labels = read_labels(yp, Some(&classes))?;
            Ok((one_hot(&labels), p))
        }
        (_, _, Some(dims)) => {
            let d: [usize; 4] = dims
                .0
                .as_slice()
                .try_into()
                .map_err(|_| CliError(format!("--random {dims} must be NXxNYxNZxC")))?;
            random_pair(d, args.seed)
        }
        _ => Err(CliError("give --y and --p, or --random".into())),
    }
}

pub fn run(args: &LossCheckArgs) -> CliResult<i32> {
    let (y, p) = load_pair(args)?;
    let report = check_losses(&y, &p, args)?;
    println!(
        "{:<26} {:>14} {:>13} {:>13}  status",
        "loss", "value", "max_rel_err", "max_abs_small"
    );
    for r in &report.rows {
        println!(
            "{:<26} {:>14.8} {:>13.3e} {:>13.3e}  {:?}",
            r.loss, r.value, r.max_rel_err, r.max_abs_err_small, r.status
        );
    }
    println!("alpha linearity max deviation: {:.3e}", report.alpha_linearity_deviation);
    println!("relative tolerance: {GRADIENT_REL_TOL:e}");
    if let Some(out) = &args.out {
        ensure_parent(out)?;
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError(e.to_string()))?;
        std::fs::write(out, text + "\n").map_err(|e| CliError(format!("{}: {e}", out.display())))?;
    }
    Ok(if report.passed { EXIT_OK } else { EXIT_PARTIAL })
}
