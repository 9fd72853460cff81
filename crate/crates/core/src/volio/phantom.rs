//! Synthetic ground-truth/prediction pairs with independently computed metric cards.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rng::XorShift64Star;
use crate::error::{Error, Result};
use crate::metrics::{MetricRow, DEFAULT_TOLERANCE_MM};
use crate::oracle;
use crate::volgrid::{ClassTable, Dims, LabelVolume, ProbVolume, VoxelSpacing};

/// Probability assigned to the predicted label; the rest is split evenly.
pub const PHANTOM_CONFIDENCE: f64 = 0.8;

/// Shapes in voxel-index coordinates (voxel `i` is centred at `i`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Primitive {
    Sphere {
        class_id: u8,
        center: [f64; 3],
        radius: f64,
    },
    /// Capsule around the segment `start`–`end`.
    Tube {
        class_id: u8,
        start: [f64; 3],
        end: [f64; 3],
        radius: f64,
    },
    /// Union of balls along a 6-connected random walk from `start`.
    Blob {
        class_id: u8,
        start: [i64; 3],
        steps: usize,
        radius: f64,
    },
}

impl Primitive {
    pub fn class_id(&self) -> u8 {
        match self {
            Primitive::Sphere { class_id, .. } | Primitive::Tube { class_id, .. } | Primitive::Blob { class_id, .. } => {
                *class_id
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbation {
    /// Translation of the whole label map, in voxels.
    pub shift: [i64; 3],
    /// Positive: dilation steps per foreground class; negative: erosion steps.
    pub morph_steps: i32,
    pub flip_probability: f64,
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE_MM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default)]
    pub classes: Option<ClassTable>,
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub perturbation: Perturbation,
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance_mm: f64,
}

impl PhantomSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn class_table(&self) -> ClassTable {
        self.classes.clone().unwrap_or_default()
    }
}

/// Expected metrics stored next to a phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCard {
    pub seed: u64,
    pub tolerance_mm: f64,
    pub rows: Vec<MetricRow>,
}

impl MetricCard {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Full-precision JSON.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub gt: LabelVolume,
    pub pred: LabelVolume,
    pub prob: ProbVolume<f64>,
    pub expected: MetricCard,
}

fn check_box(index: usize, lo: [f64; 3], hi: [f64; 3], dims: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if lo[a] < 0.0 || hi[a] > (dims[a] as f64 - 1.0) || !lo[a].is_finite() || !hi[a].is_finite() {
            return Err(Error::PrimitiveOutOfBounds {
                index,
                message: format!(
                    "axis {a} extent [{}, {}] exceeds [0, {}]",
                    lo[a],
                    hi[a],
                    dims[a] as f64 - 1.0
                ),
            });
        }
    }
    Ok(())
}

fn dist2(p: [f64; 3], q: [f64; 3]) -> f64 {
    (0..3).map(|a| (p[a] - q[a]) * (p[a] - q[a])).sum()
}

fn segment_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: Vec<f64> = (0..3).map(|i| b[i] - a[i]).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((0..3).map(|i| (p[i] - a[i]) * ab[i]).sum::<f64>() / len2).clamp(0.0, 1.0)
    };
    dist2(p, [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]])
}

fn paint_ball(labels: &mut [u8], dims: Dims, c: [f64; 3], r: f64, class_id: u8) {
    let lo = |a: usize| (c[a] - r).ceil().max(0.0) as usize;
    let hi = |a: usize, n: usize| ((c[a] + r).floor() as usize).min(n - 1);
    for z in lo(2)..=hi(2, dims.nz) {
        for y in lo(1)..=hi(1, dims.ny) {
            for x in lo(0)..=hi(0, dims.nx) {
                if dist2([x as f64, y as f64, z as f64], c) <= r * r {
                    labels[dims.index(x, y, z)] = class_id;
                }
            }
        }
    }
}

fn rasterize(spec: &PhantomSpec, table: &ClassTable, rng: &mut XorShift64Star) -> Result<Vec<u8>> {
    let d = spec.dims;
    let dims = Dims::new(d[0], d[1], d[2]);
    let mut labels = vec![0u8; dims.len()];
    for (index, prim) in spec.primitives.iter().enumerate() {
        let class_id = prim.class_id();
        if class_id == 0 || !table.contains(class_id) {
            return Err(Error::param(
                "primitives",
                format!("primitive {index} has class {class_id}, not a foreground class of the table"),
            ));
        }
        match *prim {
            Primitive::Sphere { center, radius, .. } => {
                if radius.is_nan() || radius < 0.0 {
                    return Err(Error::param("radius", format!("primitive {index}: radius {radius}")));
                }
                check_box(index, center.map(|c| c - radius), center.map(|c| c + radius), d)?;
                paint_ball(&mut labels, dims, center, radius, class_id);
            }
            Primitive::Tube { start, end, radius, .. } => {
                if radius.is_nan() || radius < 0.0 {
                    return Err(Error::param("radius", format!("primitive {index}: radius {radius}")));
                }
                let lo = [0, 1, 2].map(|a| start[a].min(end[a]) - radius);
                let hi = [0, 1, 2].map(|a| start[a].max(end[a]) + radius);
                check_box(index, lo, hi, d)?;
                for z in lo[2].ceil() as usize..=hi[2].floor() as usize {
                    for y in lo[1].ceil() as usize..=hi[1].floor() as usize {
                        for x in lo[0].ceil() as usize..=hi[0].floor() as usize {
                            if segment_dist2([x as f64, y as f64, z as f64], start, end) <= radius * radius {
                                labels[dims.index(x, y, z)] = class_id;
                            }
                        }
                    }
                }
            }
            Primitive::Blob { start, steps, radius, .. } => {
                if radius.is_nan() || radius < 0.0 {
                    return Err(Error::param("radius", format!("primitive {index}: radius {radius}")));
                }
                let fits = |p: [i64; 3]| (0..3).all(|a| p[a] as f64 - radius >= 0.0 && p[a] as f64 + radius <= d[a] as f64 - 1.0);
                if !fits(start) {
                    let s = start.map(|v| v as f64);
                    check_box(index, s.map(|v| v - radius), s.map(|v| v + radius), d)?;
                }
                let mut p = start;
                paint_ball(&mut labels, dims, p.map(|v| v as f64), radius, class_id);
                for _ in 0..steps {
                    let dir = rng.below(6);
                    let mut q = p;
                    q[dir / 2] += if dir.is_multiple_of(2) { -1 } else { 1 };
                    // Moves that would leave the grid are skipped, keeping the walk inside.
                    if fits(q) {
                        p = q;
                        paint_ball(&mut labels, dims, p.map(|v| v as f64), radius, class_id);
                    }
                }
            }
        }
    }
    Ok(labels)
}

fn shift(labels: &[u8], dims: Dims, s: [i64; 3]) -> Vec<u8> {
    let mut out = vec![0u8; labels.len()];
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let (tx, ty, tz) = (x as i64 + s[0], y as i64 + s[1], z as i64 + s[2]);
                if tx < 0 || ty < 0 || tz < 0 || tx >= dims.nx as i64 || ty >= dims.ny as i64 || tz >= dims.nz as i64 {
                    continue;
                }
                out[dims.index(tx as usize, ty as usize, tz as usize)] = labels[dims.index(x, y, z)];
            }
        }
    }
    out
}

/// 6-neighbours of a voxel; `None` for positions outside the grid.
fn neighbours(dims: Dims, i: usize) -> [Option<usize>; 6] {
    let (x, y, z) = dims.coords(i);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < dims.nx).then(|| i + 1),
        (y > 0).then(|| i - dims.nx),
        (y + 1 < dims.ny).then(|| i + dims.nx),
        (z > 0).then(|| i - dims.nx * dims.ny),
        (z + 1 < dims.nz).then(|| i + dims.nx * dims.ny),
    ]
}

/// Dilation grows each class (ascending id) into background only; erosion
/// turns voxels touching another label or the grid border into background.
fn morph(labels: &mut [u8], dims: Dims, classes: &ClassTable, steps: i32) {
    for _ in 0..steps.unsigned_abs() {
        for c in classes.foreground_ids() {
            let before = labels.to_vec();
            for i in 0..before.len() {
                let nb = neighbours(dims, i);
                if steps > 0 {
                    if before[i] == 0 && nb.iter().flatten().any(|&j| before[j] == c) {
                        labels[i] = c;
                    }
                } else if before[i] == c && nb.iter().any(|j| j.is_none_or(|j| before[j] != c)) {
                    labels[i] = 0;
                }
            }
        }
    }
}

/// Builds the pair and its expected metrics. Deterministic for a given spec.
///
/// The random stream (see [`XorShift64Star`]) is consumed first by blob walks in
/// primitive order, then by label flips in voxel order: one draw per voxel, and
/// a second draw choosing uniformly among the other labels when a flip happens.
pub fn synthesize_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let d = spec.dims;
    let dims = Dims::new(d[0], d[1], d[2]);
    if dims.is_empty() {
        return Err(Error::param("dims", format!("{dims} has no voxels")));
    }
    let spacing = VoxelSpacing::new(spec.spacing[0], spec.spacing[1], spec.spacing[2])?;
    let table = spec.class_table();
    if table.len() < 2 {
        return Err(Error::param("classes", "a phantom needs at least one foreground class"));
    }
    let pert = &spec.perturbation;
    if !(0.0..=1.0).contains(&pert.flip_probability) {
        return Err(Error::param(
            "flip_probability",
            format!("{} outside [0, 1]", pert.flip_probability),
        ));
    }
    if spec.tolerance_mm.is_nan() || spec.tolerance_mm < 0.0 {
        return Err(Error::param("tolerance_mm", format!("{} must be >= 0", spec.tolerance_mm)));
    }

    let mut rng = XorShift64Star::new(spec.seed);
    let gt_labels = rasterize(spec, &table, &mut rng)?;
    let mut pred_labels = shift(&gt_labels, dims, pert.shift);
    morph(&mut pred_labels, dims, &table, pert.morph_steps);
    if pert.flip_probability > 0.0 {
        let others = table.len() - 1;
        for l in pred_labels.iter_mut() {
            if rng.next_f64() < pert.flip_probability {
                let j = rng.below(others) as u8;
                *l = if j < *l { j } else { j + 1 };
            }
        }
    }

    let c = table.len();
    let n = dims.len();
    let rest = (1.0 - PHANTOM_CONFIDENCE) / (c - 1) as f64;
    let mut prob = vec![rest; c * n];
    for (i, &l) in pred_labels.iter().enumerate() {
        prob[usize::from(l) * n + i] = PHANTOM_CONFIDENCE;
    }

    let gt = LabelVolume::new(dims, spacing, gt_labels, table.clone())?;
    let pred = LabelVolume::new(dims, spacing, pred_labels, table)?;
    let prob = ProbVolume::new(dims, spacing, c, prob, true)?;
    let rows = oracle::metric_card(&gt, &pred, Some(&prob), spec.tolerance_mm);
    Ok(Phantom {
        gt,
        pred,
        prob,
        expected: MetricCard {
            seed: spec.seed,
            tolerance_mm: spec.tolerance_mm,
            rows,
        },
    })
}
