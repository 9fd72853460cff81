//! Segmentation losses with analytic gradients.
//!
//! All losses take a target `y` (normally one-hot) and a prediction `p`, both
//! [`ProbVolume`]s of the same shape, and apply the binary formulas channel by
//! channel. Channel values are averaged over foreground channels unless
//! [`LossOptions::include_background`] is set; a single-channel volume is
//! treated as one binary foreground problem. Gradients are taken with respect
//! to `p` and share its channel-major layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volgrid::ProbVolume;

/// Probabilities are clamped to `[PROB_EPSILON, 1 - PROB_EPSILON]` before logarithms.
pub const PROB_EPSILON: f64 = 1e-7;

/// Fraction of hardest voxels kept by the default top-k cross-entropy.
pub const DEFAULT_K_FRACTION: f64 = 0.5;

/// How the Dice coefficient enters a composite loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiceConvention {
    /// `1 - Dice`, so that better overlap lowers the loss.
    #[default]
    Complement,
    /// The raw coefficient, added as written.
    Raw,
}

/// Denominator of the top-k cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopKNormalization {
    /// Divide by the channel's total voxel count N.
    #[default]
    Total,
    /// Divide by the number of selected voxels.
    Selected,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    pub dice_convention: DiceConvention,
    pub top_k_normalization: TopKNormalization,
    pub include_background: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    /// `∂value/∂p`, channel-major like the prediction; `None` unless requested.
    pub gradient: Option<Vec<T>>,
    /// Channels entering the mean.
    pub channels: Vec<usize>,
    /// Channels dropped because both `y` and `p` sum to zero there (Dice only).
    pub excluded_channels: Vec<usize>,
    /// Smallest gap between the last selected and first rejected per-voxel term
    /// over all channels (top-k only; `None` when every voxel is selected).
    pub selection_margin: Option<T>,
}

impl<T: Scalar> LossValue<T> {
    /// True when some channel has an exact tie at the top-k selection threshold.
    pub fn has_selection_tie(&self) -> bool {
        self.selection_margin.is_some_and(|m| m == T::zero())
    }
}

/// Training progress used to blend the Dice and top-k terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleState {
    epoch: u32,
    total_epochs: u32,
}

impl ScheduleState {
    pub fn new(epoch: u32, total_epochs: u32) -> Result<Self> {
        if total_epochs == 0 {
            return Err(Error::param("total_epochs", "must be positive"));
        }
        if epoch > total_epochs {
            return Err(Error::param(
                "epoch",
                format!("{epoch} exceeds total_epochs {total_epochs}"),
            ));
        }
        Ok(Self { epoch, total_epochs })
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn total_epochs(&self) -> u32 {
        self.total_epochs
    }
}

/// Blend weight `epoch / total_epochs`.
pub fn alpha_schedule(s: &ScheduleState) -> f64 {
    f64::from(s.epoch) / f64::from(s.total_epochs)
}

fn channels_for(num_classes: usize, include_background: bool) -> Vec<usize> {
    if num_classes == 1 || include_background {
        (0..num_classes).collect()
    } else {
        (1..num_classes).collect()
    }
}

fn check_inputs<T: Scalar>(y: &ProbVolume<T>, p: &ProbVolume<T>) -> Result<usize> {
    y.ensure_same_shape(p)?;
    let n = p.voxel_count();
    if n == 0 {
        return Err(Error::InvalidData("loss over an empty grid".into()));
    }
    Ok(n)
}

/// Per-voxel binary cross-entropy and its derivative in `p`, at the clamped point.
#[inline]
fn ce_term<T: Scalar>(y: T, p: T) -> (T, T) {
    let eps = T::lit(PROB_EPSILON);
    let pc = p.max(eps).min(T::one() - eps);
    let q = T::one() - pc;
    let term = -(y * pc.ln() + (T::one() - y) * q.ln());
    let d = -(y / pc) + (T::one() - y) / q;
    (term, d)
}

fn mean_in_order<T: Scalar>(values: &[T]) -> T {
    let mut s = T::zero();
    for &v in values {
        s = s + v;
    }
    s / T::from_count(values.len())
}

/// Binary cross-entropy averaged over voxels, then over included channels.
pub fn cross_entropy<T: Scalar>(
    y: &ProbVolume<T>,
    p: &ProbVolume<T>,
    opts: &LossOptions,
    want_gradient: bool,
) -> Result<LossValue<T>> {
    let n = check_inputs(y, p)?;
    let channels = channels_for(p.num_classes(), opts.include_background);
    let nf = T::from_count(n);
    let mut grad = want_gradient.then(|| vec![T::zero(); p.data().len()]);
    let scale = T::one() / (nf * T::from_count(channels.len()));
    let mut per_channel = Vec::with_capacity(channels.len());
    for &c in &channels {
        let (yc, pc) = (y.channel(c), p.channel(c));
        let mut sum = T::zero();
        for i in 0..n {
            let (t, d) = ce_term(yc[i], pc[i]);
            sum = sum + t;
            if let Some(g) = grad.as_mut() {
                g[c * n + i] = d * scale;
            }
        }
        per_channel.push(sum / nf);
    }
    Ok(LossValue {
        value: mean_in_order(&per_channel),
        gradient: grad,
        channels,
        excluded_channels: Vec::new(),
        selection_margin: None,
    })
}

/// Mean soft Dice coefficient `2Σyp / (Σy + Σp)` over included, non-empty channels.
pub fn soft_dice<T: Scalar>(
    y: &ProbVolume<T>,
    p: &ProbVolume<T>,
    opts: &LossOptions,
    want_gradient: bool,
) -> Result<LossValue<T>> {
    let n = check_inputs(y, p)?;
    let requested = channels_for(p.num_classes(), opts.include_background);
    let two = T::lit(2.0);

    let mut sums = Vec::with_capacity(requested.len());
    for &c in &requested {
        let (yc, pc) = (y.channel(c), p.channel(c));
        let (mut sy, mut sp, mut inter) = (T::zero(), T::zero(), T::zero());
        for i in 0..n {
            sy = sy + yc[i];
            sp = sp + pc[i];
            inter = inter + yc[i] * pc[i];
        }
        sums.push((c, sy + sp, inter));
    }
    let (used, excluded): (Vec<_>, Vec<_>) = sums.into_iter().partition(|&(_, denom, _)| denom > T::zero());
    if used.is_empty() {
        return Err(Error::UndefinedDice);
    }

    let per_channel: Vec<T> = used.iter().map(|&(_, denom, inter)| two * inter / denom).collect();
    let gradient = want_gradient.then(|| {
        let mut g = vec![T::zero(); p.data().len()];
        let k = T::from_count(used.len());
        for &(c, denom, inter) in &used {
            let yc = y.channel(c);
            let scale = two / (denom * denom * k);
            for i in 0..n {
                g[c * n + i] = (yc[i] * denom - inter) * scale;
            }
        }
        g
    });
    Ok(LossValue {
        value: mean_in_order(&per_channel),
        gradient,
        channels: used.iter().map(|u| u.0).collect(),
        excluded_channels: excluded.iter().map(|e| e.0).collect(),
        selection_margin: None,
    })
}

/// Dice as a loss term under the chosen convention, with its gradient.
fn dice_term<T: Scalar>(dice: LossValue<T>, convention: DiceConvention) -> LossValue<T> {
    match convention {
        DiceConvention::Raw => dice,
        DiceConvention::Complement => LossValue {
            value: T::one() - dice.value,
            gradient: dice.gradient.map(|g| g.into_iter().map(|v| -v).collect()),
            ..dice
        },
    }
}

/// Cross-entropy plus the Dice term.
pub fn dice_ce_loss<T: Scalar>(
    y: &ProbVolume<T>,
    p: &ProbVolume<T>,
    opts: &LossOptions,
    want_gradient: bool,
) -> Result<LossValue<T>> {
    let ce = cross_entropy(y, p, opts, want_gradient)?;
    let dice = dice_term(soft_dice(y, p, opts, want_gradient)?, opts.dice_convention);
    let gradient = match (ce.gradient, dice.gradient) {
        (Some(a), Some(b)) => Some(a.into_iter().zip(b).map(|(a, b)| a + b).collect()),
        _ => None,
    };
    Ok(LossValue {
        value: ce.value + dice.value,
        gradient,
        channels: ce.channels,
        excluded_channels: dice.excluded_channels,
        selection_margin: None,
    })
}

/// Number of voxels kept out of `n` for a given fraction.
pub fn top_k_count(k_fraction: f64, n: usize) -> usize {
    ((k_fraction * n as f64).ceil() as usize).clamp(1, n)
}

/// Cross-entropy over the `⌈k_fraction·N⌉` voxels with the largest per-voxel
/// terms in each channel. Ties at the threshold keep the smaller linear index.
pub fn top50_cross_entropy<T: Scalar>(
    y: &ProbVolume<T>,
    p: &ProbVolume<T>,
    k_fraction: f64,
    opts: &LossOptions,
    want_gradient: bool,
) -> Result<LossValue<T>> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::param("k_fraction", format!("{k_fraction} not in (0, 1]")));
    }
    let n = check_inputs(y, p)?;
    let channels = channels_for(p.num_classes(), opts.include_background);
    let k = top_k_count(k_fraction, n);
    let denom = match opts.top_k_normalization {
        TopKNormalization::Total => T::from_count(n),
        TopKNormalization::Selected => T::from_count(k),
    };
    let scale = T::one() / (denom * T::from_count(channels.len()));

    let mut grad = want_gradient.then(|| vec![T::zero(); p.data().len()]);
    let mut per_channel = Vec::with_capacity(channels.len());
    let mut margin: Option<T> = None;
    let mut terms = Vec::with_capacity(n);
    let mut selected = vec![false; n];
    for &c in &channels {
        let (yc, pc) = (y.channel(c), p.channel(c));
        terms.clear();
        terms.extend((0..n).map(|i| ce_term(yc[i], pc[i])));

        selected.fill(false);
        if k == n {
            selected.fill(true);
        } else {
            // Descending by term, ascending by index.
            let mut order: Vec<usize> = (0..n).collect();
            let cmp = |a: &usize, b: &usize| {
                terms[*b]
                    .0
                    .partial_cmp(&terms[*a].0)
                    .expect("finite terms")
                    .then(a.cmp(b))
            };
            let (head, kth, tail) = order.select_nth_unstable_by(k - 1, cmp);
            let kth = *kth;
            for &i in head.iter() {
                selected[i] = true;
            }
            selected[kth] = true;
            let first_rejected = tail
                .iter()
                .map(|&i| terms[i].0)
                .fold(T::neg_infinity(), T::max);
            let gap = terms[kth].0 - first_rejected;
            margin = Some(margin.map_or(gap, |m| m.min(gap)));
        }

        let mut sum = T::zero();
        for i in 0..n {
            if selected[i] {
                sum = sum + terms[i].0;
                if let Some(g) = grad.as_mut() {
                    g[c * n + i] = terms[i].1 * scale;
                }
            }
        }
        per_channel.push(sum / denom);
    }
    Ok(LossValue {
        value: mean_in_order(&per_channel),
        gradient: grad,
        channels,
        excluded_channels: Vec::new(),
        selection_margin: margin,
    })
}

/// `(1 - α)·DiceTerm + α·TopK`.
pub fn wdice_top50<T: Scalar>(
    y: &ProbVolume<T>,
    p: &ProbVolume<T>,
    alpha: f64,
    k_fraction: f64,
    opts: &LossOptions,
    want_gradient: bool,
) -> Result<LossValue<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param("alpha", format!("{alpha} not in [0, 1]")));
    }
    let dice = dice_term(soft_dice(y, p, opts, want_gradient)?, opts.dice_convention);
    let top = top50_cross_entropy(y, p, k_fraction, opts, want_gradient)?;
    let a = T::lit(alpha);
    let b = T::one() - a;
    let gradient = match (dice.gradient, top.gradient) {
        (Some(gd), Some(gt)) => Some(gd.into_iter().zip(gt).map(|(d, t)| b * d + a * t).collect()),
        _ => None,
    };
    Ok(LossValue {
        value: b * dice.value + a * top.value,
        gradient,
        channels: top.channels,
        excluded_channels: dice.excluded_channels,
        selection_margin: top.selection_margin,
    })
}

/// Identifies a loss for generic evaluation and gradient checking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "loss")]
pub enum LossKind {
    CrossEntropy,
    SoftDice,
    DiceCe,
    TopK { k_fraction: f64 },
    WDiceTopK { alpha: f64, k_fraction: f64 },
}

impl LossKind {
    pub fn label(&self) -> String {
        match self {
            LossKind::CrossEntropy => "CE".into(),
            LossKind::SoftDice => "SoftDice".into(),
            LossKind::DiceCe => "DiceCE".into(),
            LossKind::TopK { k_fraction } => format!("Top{}", (k_fraction * 100.0).round()),
            LossKind::WDiceTopK { alpha, k_fraction } => {
                format!("WDiceTop{}(alpha={alpha})", (k_fraction * 100.0).round())
            }
        }
    }
}

pub fn evaluate_loss<T: Scalar>(
    kind: LossKind,
    y: &ProbVolume<T>,
    p: &ProbVolume<T>,
    opts: &LossOptions,
    want_gradient: bool,
) -> Result<LossValue<T>> {
    match kind {
        LossKind::CrossEntropy => cross_entropy(y, p, opts, want_gradient),
        LossKind::SoftDice => soft_dice(y, p, opts, want_gradient),
        LossKind::DiceCe => dice_ce_loss(y, p, opts, want_gradient),
        LossKind::TopK { k_fraction } => top50_cross_entropy(y, p, k_fraction, opts, want_gradient),
        LossKind::WDiceTopK { alpha, k_fraction } => wdice_top50(y, p, alpha, k_fraction, opts, want_gradient),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDifference<T> {
    pub gradient: Vec<T>,
    /// Entries whose perturbed probability had to be clamped into `[0, 1]`.
    pub clamped_entries: usize,
}

/// Central-difference gradient of any scalar function of the prediction.
///
/// Perturbations leaving `[0, 1]` are clamped and the quotient uses the step
/// actually taken.
pub fn finite_difference_with<T, F>(p: &ProbVolume<T>, h: f64, mut f: F) -> Result<FiniteDifference<T>>
where
    T: Scalar,
    F: FnMut(&ProbVolume<T>) -> Result<T>,
{
    if !(1e-8..=1e-3).contains(&h) {
        return Err(Error::param("h", format!("{h} not in [1e-8, 1e-3]")));
    }
    let h = T::lit(h);
    let mut work = p.clone();
    let mut gradient = Vec::with_capacity(p.data().len());
    let mut clamped_entries = 0;
    for j in 0..p.data().len() {
        let orig = p.data()[j];
        let hi = (orig + h).min(T::one());
        let lo = (orig - h).max(T::zero());
        if hi != orig + h || lo != orig - h {
            clamped_entries += 1;
        }
        work.data_mut()[j] = hi;
        let f_hi = f(&work)?;
        work.data_mut()[j] = lo;
        let f_lo = f(&work)?;
        work.data_mut()[j] = orig;
        gradient.push((f_hi - f_lo) / (hi - lo));
    }
    Ok(FiniteDifference {
        gradient,
        clamped_entries,
    })
}

/// Central-difference gradient of a named loss with step `h`.
pub fn finite_difference_gradient<T: Scalar>(
    kind: LossKind,
    y: &ProbVolume<T>,
    p: &ProbVolume<T>,
    h: f64,
    opts: &LossOptions,
) -> Result<FiniteDifference<T>> {
    finite_difference_with(p, h, |q| evaluate_loss(kind, y, q, opts, false).map(|v| v.value))
}

/// Relative tolerance between analytic and finite-difference gradients.
pub const GRADIENT_REL_TOL: f64 = 1e-4;
/// Absolute tolerance applied to entries whose analytic value is below
/// [`GRADIENT_SMALL_ENTRY`] in magnitude.
pub const GRADIENT_ABS_TOL: f64 = 1e-6;
pub const GRADIENT_SMALL_ENTRY: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
}

pub fn compare_gradients<T: Scalar>(analytic: &[T], numeric: &[T]) -> GradientCheck {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err_small: f64 = 0.0;
    let mut worst: Option<(usize, f64)> = None;
    let mut passed = true;
    for (i, (&a, &f)) in analytic.iter().zip(numeric).enumerate() {
        let (a, f) = (a.as_f64(), f.as_f64());
        let diff = (a - f).abs();
        let badness = if a.abs() < GRADIENT_SMALL_ENTRY {
            max_abs_err_small = max_abs_err_small.max(diff);
            passed &= diff < GRADIENT_ABS_TOL;
            diff / GRADIENT_ABS_TOL
        } else {
            let rel = diff / a.abs();
            max_rel_err = max_rel_err.max(rel);
            passed &= rel < GRADIENT_REL_TOL;
            rel / GRADIENT_REL_TOL
        };
        if !badness.is_finite() {
            passed = false;
        }
        if worst.is_none_or(|(_, b)| badness > b) {
            worst = Some((i, badness));
        }
    }
    GradientCheck {
        max_rel_err,
        max_abs_err_small,
        worst_index: worst.map(|w| w.0),
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::{Dims, VoxelSpacing};

    fn single(y: &[f64], p: &[f64]) -> (ProbVolume<f64>, ProbVolume<f64>) {
        let d = Dims::new(y.len(), 1, 1);
        let s = VoxelSpacing::isotropic_mm();
        (
            ProbVolume::new(d, s, 1, y.to_vec(), false).unwrap(),
            ProbVolume::new(d, s, 1, p.to_vec(), false).unwrap(),
        )
    }

    // Per-pixel oracle, written out term by term.
    fn bce(y: f64, p: f64) -> f64 {
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }

    const Y4: [f64; 4] = [1.0, 1.0, 0.0, 0.0];
    const P4: [f64; 4] = [0.9, 0.6, 0.3, 0.1];

    #[test]
    fn four_pixel_fixture_matches_oracle() {
        let terms: Vec<f64> = Y4.iter().zip(P4).map(|(&y, p)| bce(y, p)).collect();
        let ce_oracle = terms.iter().sum::<f64>() / 4.0;
        let mut sorted = terms.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let top_oracle = (sorted[0] + sorted[1]) / 4.0;
        let dice_oracle: f64 = 2.0 * (0.9 + 0.6) / (2.0 + 1.9);
        assert!((ce_oracle - 0.26956).abs() < 1e-5);
        assert!((top_oracle - 0.21688).abs() < 1e-5);
        assert!((dice_oracle - 0.76923).abs() < 1e-5);

        let (y, p) = single(&Y4, &P4);
        let o = LossOptions::default();
        assert!((cross_entropy(&y, &p, &o, false).unwrap().value - ce_oracle).abs() < 1e-12);
        assert!((top50_cross_entropy(&y, &p, 0.5, &o, false).unwrap().value - top_oracle).abs() < 1e-12);
        assert!((soft_dice(&y, &p, &o, false).unwrap().value - dice_oracle).abs() < 1e-12);
        let dce = dice_ce_loss(&y, &p, &o, false).unwrap().value;
        assert!((dce - 0.50033).abs() < 1e-5);
        let w = wdice_top50(&y, &p, 0.5, 0.5, &o, false).unwrap().value;
        assert!((w - 0.22383).abs() < 1e-5);
    }

    #[test]
    fn ce_single_pixel_and_perfect_prediction() {
        let (y, p) = single(&[1.0], &[0.5]);
        let v = cross_entropy(&y, &p, &LossOptions::default(), false).unwrap().value;
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

        let (y, p) = single(&Y4, &Y4);
        let v = cross_entropy(&y, &p, &LossOptions::default(), false).unwrap().value;
        assert!(v <= 2e-7, "{v}");
        let v = dice_ce_loss(&y, &p, &LossOptions::default(), false).unwrap().value;
        assert!(v <= 2e-7, "{v}");
    }

    #[test]
    fn worst_case_is_large_but_finite() {
        let (y, p) = single(&Y4, &[0.0, 0.0, 1.0, 1.0]);
        let v = dice_ce_loss(&y, &p, &LossOptions::default(), true).unwrap();
        assert!(v.value.is_finite() && v.value > 16.0);
        assert!(v.gradient.unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn soft_dice_examples() {
        let o = LossOptions::default();
        let (y, p) = single(&Y4, &Y4);
        assert_eq!(soft_dice(&y, &p, &o, false).unwrap().value, 1.0);
        let (y, p) = single(&Y4, &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(soft_dice(&y, &p, &o, false).unwrap().value, 0.0);
        let (y, p) = single(&Y4, &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(soft_dice(&y, &p, &o, false).unwrap().value, 0.5);
        let (y, p) = single(&[0.0; 4], &[0.0; 4]);
        assert!(matches!(soft_dice(&y, &p, &o, false), Err(Error::UndefinedDice)));
    }

    #[test]
    fn empty_dice_channel_is_excluded() {
        let d = Dims::new(2, 1, 1);
        let s = VoxelSpacing::isotropic_mm();
        // channel 1 matches perfectly, channel 2 is empty in both.
        let y = ProbVolume::new(d, s, 3, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0], true).unwrap();
        let v = soft_dice(&y, &y, &LossOptions::default(), false).unwrap();
        assert_eq!(v.value, 1.0);
        assert_eq!(v.channels, vec![1]);
        assert_eq!(v.excluded_channels, vec![2]);
    }

    #[test]
    fn background_channel_is_skipped_by_default() {
        let d = Dims::new(2, 1, 1);
        let s = VoxelSpacing::isotropic_mm();
        let y = ProbVolume::new(d, s, 2, vec![1.0, 0.0, 0.0, 1.0], true).unwrap();
        let p = ProbVolume::new(d, s, 2, vec![0.5, 0.5, 0.5, 0.5], true).unwrap();
        let fg = cross_entropy(&y, &p, &LossOptions::default(), false).unwrap();
        assert_eq!(fg.channels, vec![1]);
        let all = cross_entropy(
            &y,
            &p,
            &LossOptions {
                include_background: true,
                ..Default::default()
            },
            false,
        )
        .unwrap();
        assert_eq!(all.channels, vec![0, 1]);
    }

    #[test]
    fn top_k_with_full_fraction_is_cross_entropy() {
        let (y, p) = single(&Y4, &P4);
        let o = LossOptions::default();
        let ce = cross_entropy(&y, &p, &o, true).unwrap();
        let top = top50_cross_entropy(&y, &p, 1.0, &o, true).unwrap();
        assert_eq!(ce.value.to_bits(), top.value.to_bits());
        assert_eq!(ce.gradient, top.gradient);
    }

    #[test]
    fn uniform_terms_select_first_half() {
        let (y, p) = single(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &[0.5; 6]);
        let v = top50_cross_entropy(&y, &p, 0.5, &LossOptions::default(), true).unwrap();
        assert!((v.value - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
        let g = v.gradient.as_ref().unwrap();
        assert!(g[..3].iter().all(|&x| x != 0.0));
        assert!(g[3..].iter().all(|&x| x == 0.0));
        assert!(v.has_selection_tie());
    }

    #[test]
    fn selected_normalization_divides_by_k() {
        let (y, p) = single(&Y4, &P4);
        let o = LossOptions {
            top_k_normalization: TopKNormalization::Selected,
            ..Default::default()
        };
        let v = top50_cross_entropy(&y, &p, 0.5, &o, false).unwrap().value;
        assert!((v - 2.0 * 0.2168751419261808).abs() < 1e-12);
    }

    #[test]
    fn raw_dice_convention_adds_coefficient() {
        let (y, p) = single(&Y4, &P4);
        let o = LossOptions {
            dice_convention: DiceConvention::Raw,
            ..Default::default()
        };
        let v = dice_ce_loss(&y, &p, &o, false).unwrap().value;
        assert!((v - (0.26955539975509396 + 0.7692307692307692)).abs() < 1e-12);
    }

    #[test]
    fn alpha_schedule_examples() {
        assert_eq!(alpha_schedule(&ScheduleState::new(0, 1000).unwrap()), 0.0);
        assert_eq!(alpha_schedule(&ScheduleState::new(1000, 1000).unwrap()), 1.0);
        assert_eq!(alpha_schedule(&ScheduleState::new(500, 1000).unwrap()), 0.5);
        assert!(ScheduleState::new(1, 0).is_err());
        assert!(ScheduleState::new(11, 10).is_err());
    }

    #[test]
    fn wdice_endpoints_are_exact() {
        let (y, p) = single(&Y4, &P4);
        let o = LossOptions::default();
        let dice = soft_dice(&y, &p, &o, false).unwrap().value;
        let top = top50_cross_entropy(&y, &p, 0.5, &o, false).unwrap().value;
        assert_eq!(wdice_top50(&y, &p, 0.0, 0.5, &o, false).unwrap().value, 1.0 - dice);
        assert_eq!(wdice_top50(&y, &p, 1.0, 0.5, &o, false).unwrap().value, top);
        assert!(wdice_top50(&y, &p, 1.5, 0.5, &o, false).is_err());
    }

    #[test]
    fn invalid_parameters() {
        let (y, p) = single(&Y4, &P4);
        let o = LossOptions::default();
        assert!(top50_cross_entropy(&y, &p, 0.0, &o, false).is_err());
        assert!(top50_cross_entropy(&y, &p, 1.01, &o, false).is_err());
        let (y2, _) = single(&[1.0, 0.0], &[0.5, 0.5]);
        assert!(matches!(cross_entropy(&y2, &p, &o, false), Err(Error::ShapeMismatch { .. })));
        assert!(finite_difference_gradient(LossKind::CrossEntropy, &y, &p, 1e-2, &o).is_err());
    }

    #[test]
    fn fd_of_quadratic_toy_loss() {
        let (_, p) = single(&Y4, &P4);
        let fd = finite_difference_with(&p, 1e-5, |q| Ok(q.data().iter().map(|v| v * v).sum())).unwrap();
        for (g, &v) in fd.gradient.iter().zip(&P4) {
            assert!((g - 2.0 * v).abs() < 1e-9);
        }
        assert_eq!(fd.clamped_entries, 0);
    }

    #[test]
    fn fd_clamps_at_the_unit_interval() {
        let (_, p) = single(&Y4, &[0.0, 1.0, 0.5, 0.5]);
        let fd = finite_difference_with(&p, 1e-4, |q| Ok(q.data().iter().map(|v| v * v).sum())).unwrap();
        assert_eq!(fd.clamped_entries, 2);
        assert!((fd.gradient[0] - 1e-4).abs() < 1e-12);
        assert!((fd.gradient[1] - (2.0 - 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn f32_losses_track_f64() {
        let d = Dims::new(4, 1, 1);
        let s = VoxelSpacing::isotropic_mm();
        let y32 = ProbVolume::new(d, s, 1, Y4.map(|v| v as f32).to_vec(), false).unwrap();
        let p32 = ProbVolume::new(d, s, 1, P4.map(|v| v as f32).to_vec(), false).unwrap();
        let o = LossOptions::default();
        let v = wdice_top50(&y32, &p32, 0.5, 0.5, &o, true).unwrap();
        assert!((f64::from(v.value) - 0.22382218634770581).abs() < 1e-6);
    }

    #[test]
    fn compare_gradients_uses_both_tolerances() {
        let ok = compare_gradients(&[1.0, 1e-4], &[1.00005, 1e-4 + 5e-7]);
        assert!(ok.passed);
        let bad = compare_gradients(&[1.0, 1e-4], &[1.0002, 1e-4]);
        assert!(!bad.passed);
        assert_eq!(bad.worst_index, Some(0));
        let bad_small = compare_gradients(&[1.0, 1e-4], &[1.0, 1e-4 + 2e-6]);
        assert!(!bad_small.passed);
        assert_eq!(bad_small.worst_index, Some(1));
    }
}
