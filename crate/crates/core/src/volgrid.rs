//! Voxel grids, class tables, region masking and confusion tallies.
//!
//! Every grid stores its voxels x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Probability volumes hold one such grid per class,
//! channel after channel.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tolerance on per-voxel class sums for volumes flagged as normalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Names of the five lesion classes in the default table, in id order 1..=5.
pub const DEFAULT_LESION_NAMES: [&str; 5] = [
    "Bronchiectasis",
    "Peribronchial Thickening",
    "Bronchial mucus",
    "Bronchiolar mucus",
    "Consolidation",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.nx;
        let rest = i / self.nx;
        (x, rest % self.ny, rest / self.ny)
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Physical voxel size in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VoxelSpacing {
    dx: f64,
    dy: f64,
    dz: f64,
}

impl VoxelSpacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(dx) && ok(dy) && ok(dz) {
            Ok(Self { dx, dy, dz })
        } else {
            Err(Error::Spacing(dx, dy, dz))
        }
    }

    pub const fn isotropic_mm() -> Self {
        Self {
            dx: 1.0,
            dy: 1.0,
            dz: 1.0,
        }
    }

    pub const fn dx(&self) -> f64 {
        self.dx
    }
    pub const fn dy(&self) -> f64 {
        self.dy
    }
    pub const fn dz(&self) -> f64 {
        self.dz
    }

    pub const fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    /// Largest in-plane (x/y) spacing; converts pixel margins to millimetres.
    pub fn max_in_plane(&self) -> f64 {
        self.dx.max(self.dy)
    }
}

impl<'de> Deserialize<'de> for VoxelSpacing {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [dx, dy, dz] = <[f64; 3]>::deserialize(d)?;
        VoxelSpacing::new(dx, dy, dz).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for VoxelSpacing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}) mm", self.dx, self.dy, self.dz)
    }
}

/// Ordered class names; id `i` is the `i`-th entry and id 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClassTable {
    names: Vec<String>,
}

impl ClassTable {
    /// Builds a table from names listed in id order, background first.
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::ClassTable("at least the background class is required".into()));
        }
        if names.len() > 256 {
            return Err(Error::ClassTable(format!("{} classes exceed the uint8 label range", names.len())));
        }
        Ok(Self { names })
    }

    /// Builds a table from explicit `(id, name)` pairs. Ids must be unique and
    /// cover `0..n` exactly.
    pub fn from_entries<S: Into<String>>(entries: impl IntoIterator<Item = (u8, S)>) -> Result<Self> {
        let mut entries: Vec<(u8, String)> = entries.into_iter().map(|(i, s)| (i, s.into())).collect();
        entries.sort_by_key(|e| e.0);
        for (expected, (id, _)) in entries.iter().enumerate() {
            if usize::from(*id) != expected {
                return Err(Error::ClassTable(format!(
                    "ids must be unique and contiguous from 0; found {id} where {expected} was expected"
                )));
            }
        }
        Self::new(entries.into_iter().map(|e| e.1))
    }

    /// Background plus the five airway lesion classes.
    pub fn default_lesions() -> Self {
        let mut names = vec!["Background".to_string()];
        names.extend(DEFAULT_LESION_NAMES.iter().map(|s| s.to_string()));
        Self { names }
    }

    /// Background plus `n` generically named foreground classes.
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new(std::iter::once("Background".to_string()).chain((1..=n).map(|i| format!("Class {i}"))))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, id: u8) -> bool {
        usize::from(id) < self.names.len()
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.names.get(usize::from(id)).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn foreground_ids(&self) -> impl Iterator<Item = u8> + '_ {
        (1..self.names.len()).map(|i| i as u8)
    }

    pub fn check(&self, id: u8) -> Result<()> {
        if self.contains(id) {
            Ok(())
        } else {
            Err(Error::UnknownClass(id))
        }
    }
}

impl Default for ClassTable {
    fn default() -> Self {
        Self::default_lesions()
    }
}

impl<'de> Deserialize<'de> for ClassTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Entry {
            id: u8,
            name: String,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Names(Vec<String>),
            Entries(Vec<Entry>),
        }
        match Repr::deserialize(d)? {
            Repr::Names(n) => ClassTable::new(n),
            Repr::Entries(e) => ClassTable::from_entries(e.into_iter().map(|e| (e.id, e.name))),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Dims and spacing of a grid, used to check alignment between inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub dims: Dims,
    pub spacing: VoxelSpacing,
}

impl fmt::Display for GridGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} @ {}", self.dims, self.spacing)
    }
}

impl GridGeometry {
    pub fn ensure_matches(&self, other: &GridGeometry) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::shape(self, other))
        }
    }
}

/// Integer class labels on a 3D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: VoxelSpacing,
    data: Vec<u8>,
    classes: ClassTable,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: VoxelSpacing, data: Vec<u8>, classes: ClassTable) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidData(format!(
                "{} labels for a {} grid ({} voxels)",
                data.len(),
                dims,
                dims.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| !classes.contains(v)) {
            return Err(Error::UnknownClass(bad));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            classes,
        })
    }

    /// All-background volume.
    pub fn background(dims: Dims, spacing: VoxelSpacing, classes: ClassTable) -> Self {
        Self {
            dims,
            spacing,
            data: vec![0; dims.len()],
            classes,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn spacing(&self) -> VoxelSpacing {
        self.spacing
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn classes(&self) -> &ClassTable {
        &self.classes
    }
    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            dims: self.dims,
            spacing: self.spacing,
        }
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Voxel count per class id, indexed by id.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.classes.len()];
        for &v in &self.data {
            counts[usize::from(v)] += 1;
        }
        counts
    }
}

/// Boolean voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    dims: Dims,
    spacing: VoxelSpacing,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, spacing: VoxelSpacing, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidData(format!(
                "{} mask values for a {} grid ({} voxels)",
                data.len(),
                dims,
                dims.len()
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: VoxelSpacing, value: bool) -> Self {
        Self {
            dims,
            spacing,
            data: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn spacing(&self) -> VoxelSpacing {
        self.spacing
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }
    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            dims: self.dims,
            spacing: self.spacing,
        }
    }

    pub fn count(&self) -> u64 {
        self.data.iter().filter(|&&b| b).count() as u64
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.data[i]
    }
}

/// Per-class probability grids aligned with a label grid.
///
/// Channel `c` occupies `data[c * n .. (c + 1) * n]` with `n = dims.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume<T> {
    dims: Dims,
    spacing: VoxelSpacing,
    num_classes: usize,
    data: Vec<T>,
    normalized: bool,
}

impl<T: Scalar> ProbVolume<T> {
    /// Validates that every value lies in `[0, 1]` and, when `normalized` is
    /// set, that each voxel's channel values sum to one within
    /// [`NORMALIZATION_TOLERANCE`].
    pub fn new(dims: Dims, spacing: VoxelSpacing, num_classes: usize, data: Vec<T>, normalized: bool) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidData("probability volume needs at least one channel".into()));
        }
        if data.len() != dims.len() * num_classes {
            return Err(Error::InvalidData(format!(
                "{} probabilities for {} channels of a {} grid",
                data.len(),
                num_classes,
                dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        if let Some(i) = data.iter().position(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::InvalidData(format!(
                "probability {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        let vol = Self {
            dims,
            spacing,
            num_classes,
            data,
            normalized,
        };
        if normalized {
            let n = dims.len();
            for i in 0..n {
                let s: f64 = (0..num_classes).map(|c| vol.data[c * n + i].as_f64()).sum();
                if (s - 1.0).abs() > NORMALIZATION_TOLERANCE {
                    return Err(Error::InvalidData(format!(
                        "voxel {i} channel sum {s} differs from 1 by more than {NORMALIZATION_TOLERANCE}"
                    )));
                }
            }
        }
        Ok(vol)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn spacing(&self) -> VoxelSpacing {
        self.spacing
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn voxel_count(&self) -> usize {
        self.dims.len()
    }
    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            dims: self.dims,
            spacing: self.spacing,
        }
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize) -> T {
        self.data[c * self.dims.len() + i]
    }

    /// Same geometry and channel count.
    pub fn ensure_same_shape<U: Scalar>(&self, other: &ProbVolume<U>) -> Result<()> {
        if self.geometry() != other.geometry() || self.num_classes != other.num_classes {
            return Err(Error::shape(
                format!("{} x {} channels", self.geometry(), self.num_classes),
                format!("{} x {} channels", other.geometry(), other.num_classes),
            ));
        }
        Ok(())
    }

    /// Replaces the payload, keeping geometry; the result is not flagged normalized.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.num_classes, data, false)
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Voxel tallies for one class of one case.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    #[inline]
    pub(crate) fn tally(&mut self, gt: bool, pred: bool) {
        match (gt, pred) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub(crate) fn merge(mut self, other: Self) -> Self {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
        self
    }
}

/// One-vs-rest mask of `class_id`.
pub fn class_mask(vol: &LabelVolume, class_id: u8) -> Result<BinaryMask> {
    vol.classes.check(class_id)?;
    Ok(BinaryMask {
        dims: vol.dims,
        spacing: vol.spacing,
        data: vol.data.iter().map(|&v| v == class_id).collect(),
    })
}

/// One channel per class holding exactly one 1.0 per voxel.
pub fn one_hot<T: Scalar>(vol: &LabelVolume) -> ProbVolume<T> {
    let n = vol.dims.len();
    let c = vol.classes.len();
    let mut data = vec![T::zero(); n * c];
    for (i, &label) in vol.data.iter().enumerate() {
        data[usize::from(label) * n + i] = T::one();
    }
    ProbVolume {
        dims: vol.dims,
        spacing: vol.spacing,
        num_classes: c,
        data,
        normalized: true,
    }
}

/// Hard labels from per-class probabilities; ties go to the smallest class id.
pub fn argmax_labels<T: Scalar>(p: &ProbVolume<T>, classes: ClassTable) -> Result<LabelVolume> {
    if p.num_classes < 2 {
        return Err(Error::param("num_classes", "argmax needs at least two channels"));
    }
    if classes.len() != p.num_classes {
        return Err(Error::ClassTable(format!(
            "{} classes in table but {} probability channels",
            classes.len(),
            p.num_classes
        )));
    }
    let n = p.dims.len();
    let data = (0..n)
        .map(|i| {
            let mut best = 0usize;
            let mut best_p = p.data[i];
            for c in 1..p.num_classes {
                let v = p.data[c * n + i];
                if v > best_p {
                    best = c;
                    best_p = v;
                }
            }
            best as u8
        })
        .collect();
    Ok(LabelVolume {
        dims: p.dims,
        spacing: p.spacing,
        data,
        classes,
    })
}

/// Restriction of a grid to a region: everything outside becomes false / 0.
pub trait RegionMasked: Sized {
    fn apply_region_mask(&self, region: &BinaryMask) -> Result<Self>;
}

impl RegionMasked for BinaryMask {
    fn apply_region_mask(&self, region: &BinaryMask) -> Result<Self> {
        self.geometry().ensure_matches(&region.geometry())?;
        Ok(BinaryMask {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().zip(&region.data).map(|(&a, &r)| a && r).collect(),
        })
    }
}

impl<T: Scalar> RegionMasked for ProbVolume<T> {
    fn apply_region_mask(&self, region: &BinaryMask) -> Result<Self> {
        self.geometry().ensure_matches(&region.geometry())?;
        let n = self.dims.len();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(j, &v)| if region.data[j % n] { v } else { T::zero() })
            .collect();
        // Zeroed voxels no longer sum to one.
        Ok(ProbVolume {
            dims: self.dims,
            spacing: self.spacing,
            num_classes: self.num_classes,
            data,
            normalized: self.normalized && region.data.iter().all(|&r| r),
        })
    }
}

pub fn apply_region_mask<M: RegionMasked>(x: &M, region: &BinaryMask) -> Result<M> {
    x.apply_region_mask(region)
}

const CONFUSION_CHUNK: usize = 1 << 16;

/// 2x2 voxel tallies of `pred` against `gt`, restricted to `region` when given.
pub fn confusion_counts(gt: &BinaryMask, pred: &BinaryMask, region: Option<&BinaryMask>) -> Result<ConfusionCounts> {
    gt.geometry().ensure_matches(&pred.geometry())?;
    if let Some(r) = region {
        gt.geometry().ensure_matches(&r.geometry())?;
    }
    let counts = gt
        .data
        .par_chunks(CONFUSION_CHUNK)
        .zip(pred.data.par_chunks(CONFUSION_CHUNK))
        .enumerate()
        .map(|(chunk, (g, p))| {
            let mut c = ConfusionCounts::default();
            let base = chunk * CONFUSION_CHUNK;
            for (k, (&gv, &pv)) in g.iter().zip(p).enumerate() {
                if region.is_none_or(|r| r.data[base + k]) {
                    c.tally(gv, pv);
                }
            }
            c
        })
        .reduce(ConfusionCounts::default, ConfusionCounts::merge);
    Ok(counts)
}
