//! Voxel-face boundary surfaces and the spatial index used for surface distances.
//!
//! A boundary element is a voxel face separating a foreground voxel from a
//! voxel of any other label, or from the outside of the grid. Its point is the
//! face centre. Voxel `(x, y, z)` is centred at `(x·dx, y·dy, z·dz)`; with
//! half-voxel lattice coordinates `h`, every coordinate is `h as f64 * (0.5 * d)`.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::volgrid::{BinaryMask, Dims, VoxelSpacing};

/// Face order within a voxel: -x, +x, -y, +y, -z, +z.
pub const FACE_OFFSETS: [(usize, i64); 6] = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfacePointSet {
    pub points: Vec<[f64; 3]>,
}

impl SurfacePointSet {
    pub fn element_count(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[inline]
pub(crate) fn face_point(x: usize, y: usize, z: usize, face: usize, half: &[f64; 3]) -> [f64; 3] {
    let mut h = [2 * x as i64, 2 * y as i64, 2 * z as i64];
    let (axis, sign) = FACE_OFFSETS[face];
    h[axis] += sign;
    [h[0] as f64 * half[0], h[1] as f64 * half[1], h[2] as f64 * half[2]]
}

#[inline]
pub(crate) fn half_spacing(spacing: &VoxelSpacing) -> [f64; 3] {
    let [dx, dy, dz] = spacing.as_array();
    [0.5 * dx, 0.5 * dy, 0.5 * dz]
}

/// Boundary points of every label `1..num_labels` in one sweep.
///
/// `label_of(i)` gives the label of voxel `i`, with 0 meaning background.
/// Points of each label come out ordered by voxel index, then face.
pub(crate) fn boundaries_by_label<F>(dims: Dims, spacing: &VoxelSpacing, num_labels: usize, label_of: F) -> Vec<SurfacePointSet>
where
    F: Fn(usize) -> u8 + Sync,
{
    let half = half_spacing(spacing);
    let Dims { nx, ny, nz } = dims;
    let per_slice: Vec<Vec<Vec<[f64; 3]>>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut out: Vec<Vec<[f64; 3]>> = vec![Vec::new(); num_labels];
            for y in 0..ny {
                for x in 0..nx {
                    let i = dims.index(x, y, z);
                    let c = label_of(i);
                    if c == 0 {
                        continue;
                    }
                    let neighbour_differs = [
                        x == 0 || label_of(i - 1) != c,
                        x + 1 == nx || label_of(i + 1) != c,
                        y == 0 || label_of(i - nx) != c,
                        y + 1 == ny || label_of(i + nx) != c,
                        z == 0 || label_of(i - nx * ny) != c,
                        z + 1 == nz || label_of(i + nx * ny) != c,
                    ];
                    for (face, differs) in neighbour_differs.into_iter().enumerate() {
                        if differs {
                            out[usize::from(c)].push(face_point(x, y, z, face, &half));
                        }
                    }
                }
            }
            out
        })
        .collect();

    let mut sets: Vec<SurfacePointSet> = (0..num_labels)
        .map(|c| SurfacePointSet {
            points: Vec::with_capacity(per_slice.iter().map(|s| s[c].len()).sum()),
        })
        .collect();
    for slice in per_slice {
        for (set, pts) in sets.iter_mut().zip(slice) {
            set.points.extend(pts);
        }
    }
    sets
}

/// Face-centre boundary of a mask under 6-connectivity; the grid border counts
/// as background.
pub fn extract_boundary(mask: &BinaryMask) -> SurfacePointSet {
    let data = mask.data();
    let mut sets = boundaries_by_label(mask.dims(), &mask.spacing(), 2, |i| u8::from(data[i]));
    sets.swap_remove(1)
}

#[inline]
pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

type CellKey = (i64, i64, i64);

/// Uniform-grid bucketing of a point set for fixed-radius "any point within"
/// queries. Buckets are at least as wide as the radius, so every hit lies in
/// the query's own or an adjacent bucket.
pub struct SurfaceIndex<'a> {
    points: &'a [[f64; 3]],
    order: Vec<u32>,
    buckets: HashMap<CellKey, (u32, u32)>,
    cell: f64,
    radius: f64,
}

impl<'a> SurfaceIndex<'a> {
    pub fn new(points: &'a [[f64; 3]], radius: f64) -> Self {
        // Slightly wider than the radius so rounding in the bucket key can never
        // separate two points within `radius` by more than one bucket.
        let cell = radius.max(1e-9) * (1.0 + 1e-6);
        let key = |p: &[f64; 3]| -> CellKey {
            (
                (p[0] / cell).floor() as i64,
                (p[1] / cell).floor() as i64,
                (p[2] / cell).floor() as i64,
            )
        };
        let mut keyed: Vec<(CellKey, u32)> = points.iter().enumerate().map(|(i, p)| (key(p), i as u32)).collect();
        keyed.par_sort_unstable();
        let mut buckets = HashMap::new();
        let mut start = 0;
        while start < keyed.len() {
            let k = keyed[start].0;
            let mut end = start + 1;
            while end < keyed.len() && keyed[end].0 == k {
                end += 1;
            }
            buckets.insert(k, (start as u32, end as u32));
            start = end;
        }
        Self {
            points,
            order: keyed.into_iter().map(|e| e.1).collect(),
            buckets,
            cell,
            radius,
        }
    }

    /// Whether some indexed point lies within the radius (inclusive) of `q`.
    pub fn any_within(&self, q: &[f64; 3]) -> bool {
        let cx = (q[0] / self.cell).floor() as i64;
        let cy = (q[1] / self.cell).floor() as i64;
        let cz = (q[2] / self.cell).floor() as i64;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(&(s, e)) = self.buckets.get(&(cx + dx, cy + dy, cz + dz)) {
                        let hit = self.order[s as usize..e as usize]
                            .iter()
                            .any(|&j| distance(q, &self.points[j as usize]) <= self.radius);
                        if hit {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Number of `queries` with an indexed point within the radius.
    pub fn count_within(&self, queries: &[[f64; 3]]) -> usize {
        queries.par_iter().filter(|q| self.any_within(q)).count()
    }
}
