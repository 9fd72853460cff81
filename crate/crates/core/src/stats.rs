//! Spearman rank correlation for external validation against lung function.
//!
//! ρ is the Pearson correlation of fractional ranks, so ties are handled
//! exactly. Small samples (n ≤ 8) get an exact permutation p-value; larger ones
//! use the Student-t approximation with n − 2 degrees of freedom.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{ClassTable, LabelVolume};
use crate::volio::PftTable;

/// Largest sample size for which p-values come from full permutation enumeration.
pub const EXACT_PERMUTATION_MAX_N: usize = 8;

const RHO_TIE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    #[default]
    TwoSided,
    /// Tests in the direction of the observed correlation.
    OneSided,
}

impl Sidedness {
    pub fn label(&self) -> &'static str {
        match self {
            Sidedness::TwoSided => "two-sided",
            Sidedness::OneSided => "one-sided",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PValueMethod {
    TApproximation,
    ExactPermutation,
    /// |ρ| = 1 with n above the exact threshold: the smallest attainable
    /// permutation p-value.
    PermutationBound,
}

impl PValueMethod {
    pub fn label(&self) -> &'static str {
        match self {
            PValueMethod::TApproximation => "t-approximation",
            PValueMethod::ExactPermutation => "exact-permutation",
            PValueMethod::PermutationBound => "permutation-bound",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub ids: Vec<String>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl PairedSample {
    pub fn new(ids: Vec<String>, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || ids.len() != x.len() {
            return Err(Error::shape(
                format!("{} ids, {} x", ids.len(), x.len()),
                format!("{} y", y.len()),
            ));
        }
        if x.len() < 3 {
            return Err(Error::param("n", format!("need at least 3 paired values, got {}", x.len())));
        }
        if let Some(i) = x.iter().chain(&y).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { ids, x, y })
    }

    /// Sample with generated ids `0..n`.
    pub fn from_xy(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let ids = (0..x.len()).map(|i| i.to_string()).collect();
        Self::new(ids, x, y)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: PValueMethod,
    pub sidedness: Sidedness,
}

/// Fractional ranks 1..n; tied values share the mean of their rank span.
pub fn rank_average_ties(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("no values to rank"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    Ok(ranks)
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spearman's ρ with a p-value chosen by sample size.
pub fn spearman(s: &PairedSample, sidedness: Sidedness) -> Result<CorrelationResult> {
    let n = s.len();
    if n < 3 {
        return Err(Error::param("n", format!("need at least 3 paired values, got {n}")));
    }
    let rx = centered(&rank_average_ties(&s.x)?);
    let ry = centered(&rank_average_ties(&s.y)?);
    let (sxx, syy) = (dot(&rx, &rx), dot(&ry, &ry));
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero rank variance (constant values)".into(),
        ));
    }
    let norm = (sxx * syy).sqrt();
    let rho = (dot(&rx, &ry) / norm).clamp(-1.0, 1.0);

    let (p_value, method) = if n <= EXACT_PERMUTATION_MAX_N {
        (exact_permutation_p(&rx, &ry, norm, rho, sidedness), PValueMethod::ExactPermutation)
    } else if (rho.abs() - 1.0).abs() <= RHO_TIE_TOL {
        let perms = (1..=n).map(|k| k as f64).product::<f64>();
        let p = match sidedness {
            Sidedness::TwoSided => 2.0 / perms,
            Sidedness::OneSided => 1.0 / perms,
        };
        (p, PValueMethod::PermutationBound)
    } else {
        (t_approximation_p(rho, n, sidedness), PValueMethod::TApproximation)
    };
    Ok(CorrelationResult {
        rho,
        p_value,
        n,
        method,
        sidedness,
    })
}

/// Fraction of all n! pairings of the centred ranks at least as extreme as `rho`.
fn exact_permutation_p(rx: &[f64], ry: &[f64], norm: f64, rho: f64, sidedness: Sidedness) -> f64 {
    let n = ry.len();
    let mut perm = ry.to_vec();
    let mut extreme = 0u64;
    let mut total = 0u64;
    let mut visit = |p: &[f64]| {
        let r = dot(rx, p) / norm;
        let hit = match sidedness {
            Sidedness::TwoSided => r.abs() >= rho.abs() - RHO_TIE_TOL,
            Sidedness::OneSided if rho < 0.0 => r <= rho + RHO_TIE_TOL,
            Sidedness::OneSided => r >= rho - RHO_TIE_TOL,
        };
        extreme += u64::from(hit);
        total += 1;
    };
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    extreme as f64 / total as f64
}

/// p-value of ρ through `t = ρ·√((n−2)/(1−ρ²))` on n − 2 degrees of freedom.
pub fn t_approximation_p(rho: f64, n: usize, sidedness: Sidedness) -> f64 {
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let two_sided = student_t_two_sided_p(t, df);
    match sidedness {
        Sidedness::TwoSided => two_sided,
        Sidedness::OneSided => 0.5 * two_sided,
    }
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / (df + t * t), 0.5 * df, 0.5).clamp(0.0, 1.0)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The fraction converges fast for x < (a + 1) / (a + b + 2); use symmetry otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Predicted lesion volume per class (mm³), indexed by class id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseVolumes {
    pub case_id: String,
    pub volumes_mm3: Vec<f64>,
}

impl CaseVolumes {
    pub fn from_labels(case_id: impl Into<String>, labels: &LabelVolume) -> Self {
        let voxel = labels.spacing().voxel_volume();
        Self {
            case_id: case_id.into(),
            volumes_mm3: labels.class_counts().into_iter().map(|c| c as f64 * voxel).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CorrelationOutcome {
    Defined(CorrelationResult),
    Undefined(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassCorrelation {
    pub class_id: u8,
    pub class_name: String,
    pub n: usize,
    pub outcome: CorrelationOutcome,
}

/// Spearman correlation of each foreground class volume against FEV1%.
///
/// Classes whose volumes are constant across cases come back as undefined rows.
pub fn correlate_volumes(
    cases: &[CaseVolumes],
    pft: &PftTable,
    classes: &ClassTable,
    sidedness: Sidedness,
) -> Result<Vec<ClassCorrelation>> {
    let missing: Vec<String> = cases
        .iter()
        .filter(|c| pft.fev1(&c.case_id).is_none())
        .map(|c| c.case_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCases(missing));
    }
    if cases.len() < 3 {
        return Err(Error::param("n", format!("need at least 3 cases, got {}", cases.len())));
    }
    if let Some(c) = cases.iter().find(|c| c.volumes_mm3.len() != classes.len()) {
        return Err(Error::shape(
            format!("{} classes", classes.len()),
            format!("{} volumes for case {}", c.volumes_mm3.len(), c.case_id),
        ));
    }
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let fev1: Vec<f64> = cases.iter().map(|c| pft.fev1(&c.case_id).expect("checked above")).collect();

    classes
        .foreground_ids()
        .map(|class_id| {
            let x: Vec<f64> = cases.iter().map(|c| c.volumes_mm3[usize::from(class_id)]).collect();
            let sample = PairedSample::new(ids.clone(), x, fev1.clone())?;
            let outcome = match spearman(&sample, sidedness) {
                Ok(r) => CorrelationOutcome::Defined(r),
                Err(Error::UndefinedCorrelation(why)) => CorrelationOutcome::Undefined(why),
                Err(e) => return Err(e),
            };
            Ok(ClassCorrelation {
                class_id,
                class_name: classes.name(class_id).unwrap_or_default().to_string(),
                n: cases.len(),
                outcome,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_average_ties(&[10.0, 20.0, 30.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(rank_average_ties(&[5.0, 5.0, 9.0]).unwrap(), vec![1.5, 1.5, 3.0]);
        assert_eq!(rank_average_ties(&[7.0, 7.0, 7.0]).unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(rank_average_ties(&[3.0, 1.0, 2.0, 1.0]).unwrap(), vec![4.0, 1.5, 3.0, 1.5]);
        assert!(rank_average_ties(&[]).is_err());
        assert!(rank_average_ties(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn monotone_sample_has_unit_rho() {
        let s = PairedSample::from_xy(vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![10.0, 20.0, 30.0, 40.0, 50.0]).unwrap();
        let r = spearman(&s, Sidedness::TwoSided).unwrap();
        assert_eq!(r.rho, 1.0);
        assert_eq!(r.method, PValueMethod::ExactPermutation);
        // 2 of 120 permutations reach |ρ| = 1
        assert!((r.p_value - 2.0 / 120.0).abs() < 1e-15);
    }

    #[test]
    fn reversed_three_points() {
        let s = PairedSample::from_xy(vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]).unwrap();
        let r = spearman(&s, Sidedness::TwoSided).unwrap();
        assert_eq!(r.rho, -1.0);
        assert!((r.p_value - 2.0 / 6.0).abs() < 1e-15);
        let one = spearman(&s, Sidedness::OneSided).unwrap();
        assert!((one.p_value - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_is_undefined() {
        let s = PairedSample::from_xy(vec![1.0, 1.0, 1.0, 1.0], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(spearman(&s, Sidedness::TwoSided), Err(Error::UndefinedCorrelation(_))));
        assert!(PairedSample::from_xy(vec![1.0, 2.0], vec![1.0, 2.0]).is_err());
        assert!(PairedSample::from_xy(vec![1.0, 2.0, 3.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn perfect_correlation_above_exact_threshold_uses_bound() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 100.0 - v * v).collect();
        let r = spearman(&PairedSample::from_xy(x, y).unwrap(), Sidedness::TwoSided).unwrap();
        assert_eq!(r.rho, -1.0);
        assert_eq!(r.method, PValueMethod::PermutationBound);
        assert!(r.p_value > 0.0 && r.p_value < 1e-5);
    }

    #[test]
    fn reported_bronchiectasis_p_value() {
        let p = t_approximation_p(-0.46, 25, Sidedness::TwoSided);
        assert!((p - 0.020686192908586372).abs() < 1e-10, "{p}");
        assert!((p - 0.021).abs() <= 0.002);
    }

    #[test]
    fn t_distribution_against_tabulated_values() {
        // reference values from a numerical CDF implementation
        let table = [
            (2.0, 10.0, 0.07338803477074039),
            (0.5, 1.0, 0.7048327646991336),
            (1.0, 3.0, 0.39100221895577053),
            (3.5, 7.0, 0.009993040881885544),
            (2.4846, 23.0, 0.020684099615343184),
            (10.0, 50.0, 1.607733468833539e-13),
            (0.1, 100.0, 0.9205445310958512),
            (4.0, 2.0, 0.05719095841793663),
        ];
        for (t, df, p) in table {
            let got = student_t_two_sided_p(t, df);
            assert!((got - p).abs() < 1e-10, "t={t} df={df}: {got} vs {p}");
            assert!((student_t_two_sided_p(-t, df) - got).abs() < 1e-15);
        }
    }

    #[test]
    fn t_distribution_against_statrs() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for df in [1.0, 2.0, 5.0, 13.0, 23.0, 60.0] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            for t in [0.0, 0.3, 1.1, 2.2, 4.7, 9.0] {
                let reference = 2.0 * (1.0 - dist.cdf(t));
                let got = student_t_two_sided_p(t, df);
                assert!((got - reference).abs() < 1e-10, "t={t} df={df}: {got} vs {reference}");
            }
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(10.0) - 362880f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn correlate_anti_monotone_cohort() {
        let classes = ClassTable::numbered(2).unwrap();
        let cases: Vec<CaseVolumes> = (0..6)
            .map(|i| CaseVolumes {
                case_id: format!("c{i}"),
                volumes_mm3: vec![0.0, i as f64 * 10.0, 0.0],
            })
            .collect();
        let pft = PftTable::new(cases.iter().enumerate().map(|(i, c)| (c.case_id.clone(), 100.0 - i as f64 * 10.0))).unwrap();
        let rows = correlate_volumes(&cases, &pft, &classes, Sidedness::TwoSided).unwrap();
        assert_eq!(rows.len(), 2);
        match &rows[0].outcome {
            CorrelationOutcome::Defined(r) => assert_eq!(r.rho, -1.0),
            other => panic!("{other:?}"),
        }
        assert!(matches!(rows[1].outcome, CorrelationOutcome::Undefined(_)));
    }

    #[test]
    fn correlate_reports_missing_cases() {
        let classes = ClassTable::numbered(1).unwrap();
        let cases: Vec<CaseVolumes> = ["a", "b", "c"]
            .iter()
            .map(|id| CaseVolumes {
                case_id: id.to_string(),
                volumes_mm3: vec![0.0, 1.0],
            })
            .collect();
        let pft = PftTable::new([("a".to_string(), 80.0)]).unwrap();
        match correlate_volumes(&cases, &pft, &classes, Sidedness::TwoSided) {
            Err(Error::MissingCases(m)) => assert_eq!(m, vec!["b".to_string(), "c".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
