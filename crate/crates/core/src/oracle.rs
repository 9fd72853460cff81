//! Brute-force reference computations.
//!
//! These are deliberately naive: all-pairs surface distances, direct voxel
//! counting and pairwise AUC enumeration. Phantom metric cards are produced
//! here so that they never depend on the production code in [`crate::metrics`].

use std::collections::HashMap;

use crate::metrics::{MetricRow, MetricValue, Undefined};
use crate::volgrid::{Dims, LabelVolume, ProbVolume, VoxelSpacing};

/// Face-centre boundary points of the voxels for which `inside` holds, visiting
/// voxels in linear order and faces in the order -x, +x, -y, +y, -z, +z.
pub fn boundary_points(dims: Dims, spacing: VoxelSpacing, inside: impl Fn(usize, usize, usize) -> bool) -> Vec<[f64; 3]> {
    let half = [0.5 * spacing.dx(), 0.5 * spacing.dy(), 0.5 * spacing.dz()];
    let size = [dims.nx as i64, dims.ny as i64, dims.nz as i64];
    let occupied = |p: [i64; 3]| -> bool {
        (0..3).all(|a| p[a] >= 0 && p[a] < size[a]) && inside(p[0] as usize, p[1] as usize, p[2] as usize)
    };
    let mut out = Vec::new();
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                if !inside(x, y, z) {
                    continue;
                }
                let v = [x as i64, y as i64, z as i64];
                for axis in 0..3 {
                    for step in [-1i64, 1] {
                        let mut n = v;
                        n[axis] += step;
                        if occupied(n) {
                            continue;
                        }
                        let mut p = [0.0; 3];
                        for a in 0..3 {
                            let h = 2 * v[a] + if a == axis { step } else { 0 };
                            p[a] = h as f64 * half[a];
                        }
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

fn euclid(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Symmetric NSD by comparing every point with every point of the other surface.
pub fn nsd_all_pairs(a: &[[f64; 3]], b: &[[f64; 3]], tolerance_mm: f64) -> MetricValue {
    if a.is_empty() && b.is_empty() {
        return MetricValue::Undefined(Undefined::BothEmpty);
    }
    let close = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        from.iter()
            .filter(|p| to.iter().any(|q| euclid(p, q) <= tolerance_mm))
            .count()
    };
    let hits = close(a, b) + close(b, a);
    MetricValue::Defined(hits as f64 / (a.len() + b.len()) as f64)
}

/// AUC by enumerating every (positive, negative) pair, grouped by distinct score.
pub fn auc_pairs(pos: &[f64], neg: &[f64]) -> MetricValue {
    if pos.is_empty() {
        return MetricValue::Undefined(Undefined::NoPositives);
    }
    if neg.is_empty() {
        return MetricValue::Undefined(Undefined::NoNegatives);
    }
    let group = |xs: &[f64]| {
        let mut m: HashMap<u64, (f64, u64)> = HashMap::new();
        for &x in xs {
            m.entry(x.to_bits()).or_insert((x, 0)).1 += 1;
        }
        m.into_values().collect::<Vec<_>>()
    };
    let (gp, gn) = (group(pos), group(neg));
    let mut doubled: u128 = 0;
    for &(s, np) in &gp {
        for &(t, nn) in &gn {
            let weight = if s > t {
                2
            } else if s == t {
                1
            } else {
                0
            };
            doubled += weight * np as u128 * nn as u128;
        }
    }
    let pairs = pos.len() as u128 * neg.len() as u128;
    MetricValue::Defined(doubled as f64 / (2 * pairs) as f64)
}

fn frac(num: u64, den: u64, reason: Undefined) -> MetricValue {
    if den == 0 {
        MetricValue::Undefined(reason)
    } else {
        MetricValue::Defined(num as f64 / den as f64)
    }
}

/// Expected per-class metrics for a labelled pair, computed from scratch.
pub fn metric_card(gt: &LabelVolume, pred: &LabelVolume, prob: Option<&ProbVolume<f64>>, tolerance_mm: f64) -> Vec<MetricRow> {
    let dims = gt.dims();
    let (g, p) = (gt.data(), pred.data());
    gt.classes()
        .foreground_ids()
        .map(|c| {
            let (mut both, mut only_gt, mut only_pred, mut neither) = (0u64, 0u64, 0u64, 0u64);
            for i in 0..g.len() {
                match (g[i] == c, p[i] == c) {
                    (true, true) => both += 1,
                    (true, false) => only_gt += 1,
                    (false, true) => only_pred += 1,
                    (false, false) => neither += 1,
                }
            }
            let gt_voxels = both + only_gt;
            let pred_voxels = both + only_pred;
            let sg = boundary_points(dims, gt.spacing(), |x, y, z| g[dims.index(x, y, z)] == c);
            let sp = boundary_points(dims, gt.spacing(), |x, y, z| p[dims.index(x, y, z)] == c);
            let auc = match prob {
                None => MetricValue::Undefined(Undefined::NoProbabilities),
                Some(pv) => {
                    let ch = pv.channel(usize::from(c));
                    let pos: Vec<f64> = (0..g.len()).filter(|&i| g[i] == c).map(|i| ch[i]).collect();
                    let neg: Vec<f64> = (0..g.len()).filter(|&i| g[i] != c).map(|i| ch[i]).collect();
                    auc_pairs(&pos, &neg)
                }
            };
            MetricRow {
                class_id: c,
                class_name: gt.classes().name(c).unwrap_or_default().to_string(),
                dice: frac(2 * both, gt_voxels + pred_voxels, Undefined::BothEmpty),
                nsd: if sg.is_empty() != sp.is_empty() {
                    MetricValue::Defined(0.0)
                } else {
                    nsd_all_pairs(&sg, &sp, tolerance_mm)
                },
                sensitivity: frac(both, gt_voxels, Undefined::NoPositives),
                specificity: frac(neither, neither + only_pred, Undefined::NoNegatives),
                auc,
                gt_voxels,
                pred_voxels,
            }
        })
        .collect()
}
