//! Internal-evaluation metrics and reports.
//!
//! Per class and case: Dice, normalized surface distance (NSD) at a physical
//! tolerance, sensitivity, specificity and voxel-level AUC. Metrics that are
//! undefined for an input (for example Dice when a class is absent from both
//! volumes) carry a reason instead of a number and are skipped when averaging.

mod auc;
pub mod surface;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volgrid::{BinaryMask, ConfusionCounts, LabelVolume, ProbVolume};

pub use auc::auc_from_scores;
pub use surface::{extract_boundary, SurfaceIndex, SurfacePointSet};

/// Surface tolerance in millimetres used when none is given (3 px at 0.6 mm).
pub const DEFAULT_TOLERANCE_MM: f64 = 1.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Undefined {
    /// Class absent from both ground truth and prediction.
    BothEmpty,
    /// No positive voxels (sensitivity, AUC).
    NoPositives,
    /// No negative voxels (specificity, AUC).
    NoNegatives,
    NoProbabilities,
    AucDisabled,
    /// Aggregate over cases where the metric was never defined.
    NoDefinedCases,
}

impl Undefined {
    pub fn code(&self) -> &'static str {
        match self {
            Undefined::BothEmpty => "both_empty",
            Undefined::NoPositives => "no_positives",
            Undefined::NoNegatives => "no_negatives",
            Undefined::NoProbabilities => "no_probabilities",
            Undefined::AucDisabled => "auc_disabled",
            Undefined::NoDefinedCases => "no_defined_cases",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetricValue {
    Defined(f64),
    Undefined(Undefined),
}

impl MetricValue {
    pub fn value(&self) -> Option<f64> {
        match *self {
            MetricValue::Defined(v) => Some(v),
            MetricValue::Undefined(_) => None,
        }
    }

    pub fn is_defined(&self) -> bool {
        matches!(self, MetricValue::Defined(_))
    }

    /// Defined values within `tol` of each other, or identical reasons.
    pub fn approx_eq(&self, other: &MetricValue, tol: f64) -> bool {
        match (self, other) {
            (MetricValue::Defined(a), MetricValue::Defined(b)) => (a - b).abs() <= tol,
            (MetricValue::Undefined(a), MetricValue::Undefined(b)) => a == b,
            _ => false,
        }
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Defined(v) => write!(f, "{v}"),
            MetricValue::Undefined(r) => write!(f, "null:{}", r.code()),
        }
    }
}

impl Serialize for MetricValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        match self {
            MetricValue::Defined(v) => s.serialize_f64(*v),
            MetricValue::Undefined(r) => {
                let mut st = s.serialize_struct("Undefined", 2)?;
                st.serialize_field("value", &Option::<f64>::None)?;
                st.serialize_field("reason", r)?;
                st.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Missing {
            #[allow(dead_code)]
            value: Option<f64>,
            reason: Undefined,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Missing(Missing),
        }
        Ok(match Repr::deserialize(d)? {
            Repr::Number(v) => MetricValue::Defined(v),
            Repr::Missing(m) => MetricValue::Undefined(m.reason),
        })
    }
}

/// The five reported metrics, in report row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Dice,
    Nsd,
    Sensitivity,
    Specificity,
    Auc,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::Dice,
        MetricKind::Nsd,
        MetricKind::Sensitivity,
        MetricKind::Specificity,
        MetricKind::Auc,
    ];

    /// Row label used in tabular reports.
    pub fn table_label(&self) -> &'static str {
        match self {
            MetricKind::Dice => "Dice",
            MetricKind::Nsd => "NSD",
            MetricKind::Sensitivity => "Sensibility",
            MetricKind::Specificity => "Specificity",
            MetricKind::Auc => "AUC",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub class_id: u8,
    pub class_name: String,
    pub dice: MetricValue,
    pub nsd: MetricValue,
    pub sensitivity: MetricValue,
    pub specificity: MetricValue,
    pub auc: MetricValue,
    pub gt_voxels: u64,
    pub pred_voxels: u64,
}

impl MetricRow {
    pub fn get(&self, kind: MetricKind) -> MetricValue {
        match kind {
            MetricKind::Dice => self.dice,
            MetricKind::Nsd => self.nsd,
            MetricKind::Sensitivity => self.sensitivity,
            MetricKind::Specificity => self.specificity,
            MetricKind::Auc => self.auc,
        }
    }

    /// Field-by-field comparison with tolerance on defined values.
    pub fn approx_eq(&self, other: &MetricRow, tol: f64) -> bool {
        self.class_id == other.class_id
            && self.gt_voxels == other.gt_voxels
            && self.pred_voxels == other.pred_voxels
            && MetricKind::ALL.iter().all(|&k| self.get(k).approx_eq(&other.get(k), tol))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub rows: Vec<MetricRow>,
    pub region_used: bool,
    pub tolerance_mm: f64,
    /// Per-side cap on AUC samples when subsampling was requested.
    pub auc_subsample: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub metric: MetricKind,
    /// Mean over cases where defined, one entry per foreground class.
    pub per_class: Vec<MetricValue>,
    /// Mean of the defined per-class means.
    pub avg: MetricValue,
    /// Cases excluded as undefined, per class.
    pub excluded: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateReport {
    pub case_count: usize,
    pub class_ids: Vec<u8>,
    pub class_names: Vec<String>,
    pub metrics: Vec<MetricSummary>,
}

impl AggregateReport {
    pub fn metric(&self, kind: MetricKind) -> &MetricSummary {
        self.metrics.iter().find(|m| m.metric == kind).expect("all metrics present")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tolerance_mm: f64,
    pub compute_auc: bool,
    pub auc_subsample: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tolerance_mm: DEFAULT_TOLERANCE_MM,
            compute_auc: true,
            auc_subsample: None,
        }
    }
}

fn ratio(num: u64, den: u64, if_zero: Undefined) -> MetricValue {
    if den == 0 {
        MetricValue::Undefined(if_zero)
    } else {
        MetricValue::Defined(num as f64 / den as f64)
    }
}

fn dice_from_counts(c: &ConfusionCounts) -> MetricValue {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, Undefined::BothEmpty)
}

/// `2|gt ∩ pred| / (|gt| + |pred|)`.
pub fn dice_score(gt: &BinaryMask, pred: &BinaryMask) -> Result<MetricValue> {
    let c = crate::volgrid::confusion_counts(gt, pred, None)?;
    Ok(dice_from_counts(&c))
}

pub fn sensitivity(c: &ConfusionCounts) -> MetricValue {
    ratio(c.tp, c.tp + c.fn_, Undefined::NoPositives)
}

pub fn specificity(c: &ConfusionCounts) -> MetricValue {
    ratio(c.tn, c.tn + c.fp, Undefined::NoNegatives)
}

/// Symmetric NSD between two surfaces: the fraction of all surface elements
/// lying within `tolerance_mm` (inclusive) of the other surface.
pub fn nsd_from_surfaces(gt: &SurfacePointSet, pred: &SurfacePointSet, tolerance_mm: f64) -> MetricValue {
    let total = gt.element_count() + pred.element_count();
    if total == 0 {
        return MetricValue::Undefined(Undefined::BothEmpty);
    }
    if gt.is_empty() || pred.is_empty() {
        return MetricValue::Defined(0.0);
    }
    let (gt_close, pred_close) = rayon::join(
        || SurfaceIndex::new(&pred.points, tolerance_mm).count_within(&gt.points),
        || SurfaceIndex::new(&gt.points, tolerance_mm).count_within(&pred.points),
    );
    MetricValue::Defined((gt_close + pred_close) as f64 / total as f64)
}

fn check_tolerance(tolerance_mm: f64) -> Result<()> {
    if tolerance_mm.is_finite() && tolerance_mm >= 0.0 {
        Ok(())
    } else {
        Err(Error::param("tolerance_mm", format!("{tolerance_mm} must be finite and >= 0")))
    }
}

pub fn nsd(gt: &BinaryMask, pred: &BinaryMask, tolerance_mm: f64) -> Result<MetricValue> {
    gt.geometry().ensure_matches(&pred.geometry())?;
    check_tolerance(tolerance_mm)?;
    let (sg, sp) = rayon::join(|| extract_boundary(gt), || extract_boundary(pred));
    Ok(nsd_from_surfaces(&sg, &sp, tolerance_mm))
}

/// One-vs-rest AUC of `scores` for the positives in `gt`, counting only voxels
/// inside `region` when given.
pub fn auc<T: Scalar>(gt: &BinaryMask, scores: &[T], region: Option<&BinaryMask>) -> Result<MetricValue> {
    auc_subsampled(gt, scores, region, None)
}

/// As [`auc`], keeping at most `subsample` evenly strided voxels on each side.
pub fn auc_subsampled<T: Scalar>(
    gt: &BinaryMask,
    scores: &[T],
    region: Option<&BinaryMask>,
    subsample: Option<usize>,
) -> Result<MetricValue> {
    if scores.len() != gt.data().len() {
        return Err(Error::shape(
            format!("{} mask voxels", gt.data().len()),
            format!("{} scores", scores.len()),
        ));
    }
    if let Some(r) = region {
        gt.geometry().ensure_matches(&r.geometry())?;
    }
    let (pos, neg) = auc::split_scores(scores, |i| gt.get(i), |i| region.is_none_or(|r| r.get(i)), subsample);
    Ok(auc_from_scores(&pos, neg))
}

const COUNT_CHUNK: usize = 1 << 16;

fn per_class_counts(gt: &[u8], pred: &[u8], region: Option<&[bool]>, num_classes: usize) -> Vec<ConfusionCounts> {
    gt.par_chunks(COUNT_CHUNK)
        .zip(pred.par_chunks(COUNT_CHUNK))
        .enumerate()
        .map(|(chunk, (g, p))| {
            // pair histogram, then expand into per-class tallies
            let mut pairs = vec![0u64; num_classes * num_classes];
            let base = chunk * COUNT_CHUNK;
            for (k, (&a, &b)) in g.iter().zip(p).enumerate() {
                if region.is_none_or(|r| r[base + k]) {
                    pairs[usize::from(a) * num_classes + usize::from(b)] += 1;
                }
            }
            pairs
        })
        .reduce(
            || vec![0u64; num_classes * num_classes],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
        .chunks(num_classes)
        .enumerate()
        .fold(vec![ConfusionCounts::default(); num_classes], |mut acc, (g, row)| {
            for (p, &n) in row.iter().enumerate() {
                for (c, counts) in acc.iter_mut().enumerate() {
                    match (g == c, p == c) {
                        (true, true) => counts.tp += n,
                        (false, true) => counts.fp += n,
                        (true, false) => counts.fn_ += n,
                        (false, false) => counts.tn += n,
                    }
                }
            }
            acc
        })
}

/// Every metric for every foreground class of one case.
///
/// With a region, voxels outside it count as background for surfaces and are
/// ignored by confusion counts and AUC.
pub fn evaluate_case<T: Scalar>(
    case_id: &str,
    gt: &LabelVolume,
    pred: &LabelVolume,
    prob: Option<&ProbVolume<T>>,
    region: Option<&BinaryMask>,
    opts: &EvalOptions,
) -> Result<CaseReport> {
    check_tolerance(opts.tolerance_mm)?;
    let geom = gt.geometry();
    geom.ensure_matches(&pred.geometry())?;
    if gt.classes() != pred.classes() {
        return Err(Error::InconsistentClassTables);
    }
    let classes = gt.classes();
    let nc = classes.len();
    if let Some(p) = prob {
        geom.ensure_matches(&p.geometry())?;
        if p.num_classes() != nc {
            return Err(Error::shape(
                format!("{nc} classes"),
                format!("{} probability channels", p.num_classes()),
            ));
        }
    }
    if let Some(r) = region {
        geom.ensure_matches(&r.geometry())?;
    }
    let region_data = region.map(BinaryMask::data);
    let in_region = |i: usize| region_data.is_none_or(|r| r[i]);

    let counts = per_class_counts(gt.data(), pred.data(), region_data, nc);
    let (gdat, pdat) = (gt.data(), pred.data());
    let (gt_surfaces, pred_surfaces) = rayon::join(
        || surface::boundaries_by_label(geom.dims, &geom.spacing, nc, |i| if in_region(i) { gdat[i] } else { 0 }),
        || surface::boundaries_by_label(geom.dims, &geom.spacing, nc, |i| if in_region(i) { pdat[i] } else { 0 }),
    );

    let rows = classes
        .foreground_ids()
        .map(|c| {
            let ci = usize::from(c);
            let cc = &counts[ci];
            let auc = match prob {
                _ if !opts.compute_auc => MetricValue::Undefined(Undefined::AucDisabled),
                None => MetricValue::Undefined(Undefined::NoProbabilities),
                Some(p) => {
                    let (pos, neg) = auc::split_scores(p.channel(ci), |i| gdat[i] == c, in_region, opts.auc_subsample);
                    auc_from_scores(&pos, neg)
                }
            };
            MetricRow {
                class_id: c,
                class_name: classes.name(c).unwrap_or_default().to_string(),
                dice: dice_from_counts(cc),
                nsd: nsd_from_surfaces(&gt_surfaces[ci], &pred_surfaces[ci], opts.tolerance_mm),
                sensitivity: sensitivity(cc),
                specificity: specificity(cc),
                auc,
                gt_voxels: cc.tp + cc.fn_,
                pred_voxels: cc.tp + cc.fp,
            }
        })
        .collect();

    Ok(CaseReport {
        case_id: case_id.to_string(),
        rows,
        region_used: region.is_some(),
        tolerance_mm: opts.tolerance_mm,
        auc_subsample: opts.auc_subsample.filter(|_| opts.compute_auc && prob.is_some()),
    })
}

/// Per-class means over cases (undefined entries skipped) plus the class average.
pub fn aggregate(reports: &[CaseReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or(Error::Empty("no case reports to aggregate"))?;
    let class_ids: Vec<u8> = first.rows.iter().map(|r| r.class_id).collect();
    let class_names: Vec<String> = first.rows.iter().map(|r| r.class_name.clone()).collect();
    for r in reports {
        let same = r.rows.len() == class_ids.len()
            && r.rows
                .iter()
                .zip(class_ids.iter().zip(&class_names))
                .all(|(row, (&id, name))| row.class_id == id && &row.class_name == name);
        if !same {
            return Err(Error::InconsistentClassTables);
        }
    }

    let metrics = MetricKind::ALL
        .iter()
        .map(|&kind| {
            let mut per_class = Vec::with_capacity(class_ids.len());
            let mut excluded = Vec::with_capacity(class_ids.len());
            for k in 0..class_ids.len() {
                let values: Vec<f64> = reports.iter().filter_map(|r| r.rows[k].get(kind).value()).collect();
                excluded.push(reports.len() - values.len());
                per_class.push(mean(&values).map_or(MetricValue::Undefined(Undefined::NoDefinedCases), MetricValue::Defined));
            }
            let defined: Vec<f64> = per_class.iter().filter_map(MetricValue::value).collect();
            MetricSummary {
                metric: kind,
                avg: mean(&defined).map_or(MetricValue::Undefined(Undefined::NoDefinedCases), MetricValue::Defined),
                per_class,
                excluded,
            }
        })
        .collect();

    Ok(AggregateReport {
        case_count: reports.len(),
        class_ids,
        class_names,
        metrics,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut s = 0.0;
    for v in values {
        s += v;
    }
    Some(s / values.len() as f64)
}
