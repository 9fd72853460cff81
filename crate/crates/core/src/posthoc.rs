//! Ensemble variance and Grad-CAM aggregation over exported network tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volgrid::{BinaryMask, ProbVolume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceEstimator {
    /// Divide by K.
    #[default]
    Population,
    /// Divide by K − 1.
    Sample,
}

/// K aligned probability predictions of the same case.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble<T> {
    members: Vec<ProbVolume<T>>,
}

impl<T: Scalar> Ensemble<T> {
    pub fn new(members: Vec<ProbVolume<T>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::EnsembleSize(members.len()));
        }
        for m in &members[1..] {
            members[0].ensure_same_shape(m)?;
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[ProbVolume<T>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSummary<T> {
    /// Per-voxel, per-class variance across members, laid out like the members.
    pub variance: ProbVolume<T>,
    /// Mean variance per class over the considered voxels.
    pub per_class_mean: Vec<T>,
    /// Mean variance over all classes and considered voxels.
    pub global_mean: T,
    /// `sqrt(global_mean)`, the same spread expressed as a standard deviation.
    pub global_std: T,
    pub voxels_considered: usize,
    pub estimator: VarianceEstimator,
    pub members: usize,
}

/// Variance of each probability across ensemble members.
///
/// Member values are sorted per voxel before summation, so the result does not
/// depend on member order. Means cover `region` only when one is given.
pub fn ensemble_variance<T: Scalar>(
    e: &Ensemble<T>,
    region: Option<&BinaryMask>,
    estimator: VarianceEstimator,
) -> Result<VarianceSummary<T>> {
    let first = &e.members[0];
    if let Some(r) = region {
        first.geometry().ensure_matches(&r.geometry())?;
    }
    let k = e.members.len();
    let kf = T::from_count(k);
    let divisor = match estimator {
        VarianceEstimator::Population => kf,
        VarianceEstimator::Sample => T::from_count(k - 1),
    };
    let len = first.data().len();
    let mut variance = Vec::with_capacity(len);
    let mut vals = vec![T::zero(); k];
    for j in 0..len {
        for (v, m) in vals.iter_mut().zip(&e.members) {
            *v = m.data()[j];
        }
        vals.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite probabilities"));
        // Shifting by the smallest value makes identical members give exactly 0.
        let base = vals[0];
        let mean = vals.iter().fold(T::zero(), |s, &v| s + (v - base)) / kf;
        let ss = vals.iter().fold(T::zero(), |s, &v| {
            let d = v - base - mean;
            s + d * d
        });
        variance.push((ss / divisor).min(T::one()));
    }
    let variance = first.with_data(variance)?;

    let n = first.voxel_count();
    let inside = |i: usize| region.is_none_or(|r| r.get(i));
    let voxels_considered = (0..n).filter(|&i| inside(i)).count();
    let per_class_mean: Vec<T> = (0..first.num_classes())
        .map(|c| {
            if voxels_considered == 0 {
                return T::zero();
            }
            let ch = variance.channel(c);
            let s = (0..n).filter(|&i| inside(i)).fold(T::zero(), |s, i| s + ch[i]);
            s / T::from_count(voxels_considered)
        })
        .collect();
    let global_mean = per_class_mean.iter().fold(T::zero(), |s, &v| s + v) / T::from_count(per_class_mean.len());
    Ok(VarianceSummary {
        variance,
        global_std: global_mean.sqrt(),
        per_class_mean,
        global_mean,
        voxels_considered,
        estimator,
        members: k,
    })
}

/// Multi-channel feature grid (2D or 3D), channel-major, each channel x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor<T> {
    channels: usize,
    spatial: Vec<usize>,
    spacing: Vec<f64>,
    data: Vec<T>,
}

fn check_spatial(spatial: &[usize], spacing: &[f64]) -> Result<()> {
    if !(2..=3).contains(&spatial.len()) {
        return Err(Error::InvalidData(format!("{} spatial dims; expected 2 or 3", spatial.len())));
    }
    if spacing.len() != spatial.len() || spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidData(format!("bad spacing {spacing:?} for dims {spatial:?}")));
    }
    Ok(())
}

impl<T: Scalar> FeatureTensor<T> {
    pub fn new(channels: usize, spatial: Vec<usize>, spacing: Vec<f64>, data: Vec<T>) -> Result<Self> {
        check_spatial(&spatial, &spacing)?;
        let n: usize = spatial.iter().product();
        if channels == 0 || data.len() != channels * n {
            return Err(Error::InvalidData(format!(
                "{} values for {channels} channels of {spatial:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            channels,
            spatial,
            spacing,
            data,
        })
    }

    /// Unit spacing on every axis.
    pub fn unit_spacing(channels: usize, spatial: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let spacing = vec![1.0; spatial.len()];
        Self::new(channels, spatial, spacing, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }
    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn spatial_len(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn channel(&self, k: usize) -> &[T] {
        let n = self.spatial_len();
        &self.data[k * n..(k + 1) * n]
    }
}

/// Spatial map of non-negative relevance values.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T> {
    spatial: Vec<usize>,
    spacing: Vec<f64>,
    data: Vec<T>,
}

impl<T: Scalar> Heatmap<T> {
    pub fn new(spatial: Vec<usize>, spacing: Vec<f64>, data: Vec<T>) -> Result<Self> {
        check_spatial(&spatial, &spacing)?;
        if data.len() != spatial.iter().product::<usize>() {
            return Err(Error::InvalidData(format!("{} values for {spatial:?}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::InvalidData(format!("heatmap value at {i} is negative or non-finite")));
        }
        Ok(Self { spatial, spacing, data })
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }
    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::zero(), T::max)
    }

    /// Single-channel tensor view, for writing with the tensor format.
    pub fn into_tensor(self) -> FeatureTensor<T> {
        FeatureTensor {
            channels: 1,
            spatial: self.spatial,
            spacing: self.spacing,
            data: self.data,
        }
    }
}

/// `Σ_k w_k · A^k` with `w_k` the spatial mean of gradient channel k.
pub fn grad_cam_pre_relu<T: Scalar>(activations: &FeatureTensor<T>, gradients: &FeatureTensor<T>) -> Result<Vec<T>> {
    if activations.channels != gradients.channels || activations.spatial != gradients.spatial {
        return Err(Error::shape(
            format!("activations {} x {:?}", activations.channels, activations.spatial),
            format!("gradients {} x {:?}", gradients.channels, gradients.spatial),
        ));
    }
    let n = activations.spatial_len();
    let nf = T::from_count(n);
    let mut out = vec![T::zero(); n];
    for k in 0..activations.channels {
        let w = gradients.channel(k).iter().fold(T::zero(), |s, &g| s + g) / nf;
        for (o, &a) in out.iter_mut().zip(activations.channel(k)) {
            *o = *o + w * a;
        }
    }
    Ok(out)
}

/// Grad-CAM map `ReLU(Σ_k w_k · A^k)` on the feature grid, before normalization.
pub fn grad_cam<T: Scalar>(activations: &FeatureTensor<T>, gradients: &FeatureTensor<T>) -> Result<Heatmap<T>> {
    let data = grad_cam_pre_relu(activations, gradients)?
        .into_iter()
        .map(|v| v.max(T::zero()))
        .collect();
    Ok(Heatmap {
        spatial: activations.spatial.clone(),
        spacing: activations.spacing.clone(),
        data,
    })
}

/// Resamples one axis with pixel-centre alignment and edge clamping.
fn resample_axis<T: Scalar>(data: &[T], dims: &[usize], axis: usize, target: usize) -> Vec<T> {
    let src = dims[axis];
    let stride: usize = dims[..axis].iter().product();
    let outer: usize = dims[axis + 1..].iter().product();
    let scale = src as f64 / target as f64;
    let taps: Vec<(usize, usize, T)> = (0..target)
        .map(|j| {
            let pos = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, T::lit(pos - lo as f64))
        })
        .collect();
    let mut out = Vec::with_capacity(stride * target * outer);
    for o in 0..outer {
        for &(lo, hi, t) in &taps {
            for s in 0..stride {
                let a = data[s + stride * (lo + src * o)];
                let b = data[s + stride * (hi + src * o)];
                // a + t(b - a) is exact for a == b; the clamp keeps rounding inside [a, b].
                let v = (a + t * (b - a)).max(a.min(b)).min(a.max(b));
                out.push(v);
            }
        }
    }
    out
}

/// Multi-linear (bi- or trilinear) resampling to `target` dims.
pub fn resample_heatmap<T: Scalar>(h: &Heatmap<T>, target: &[usize]) -> Result<Heatmap<T>> {
    if target.len() != h.spatial.len() || target.contains(&0) {
        return Err(Error::param(
            "target",
            format!("{target:?} must have {} axes, each >= 1", h.spatial.len()),
        ));
    }
    if h.data.is_empty() {
        return Err(Error::InvalidData("cannot resample an empty heatmap".into()));
    }
    let mut dims = h.spatial.clone();
    let mut data = h.data.clone();
    for axis in 0..dims.len() {
        if dims[axis] != target[axis] {
            data = resample_axis(&data, &dims, axis, target[axis]);
            dims[axis] = target[axis];
        }
    }
    let spacing = h
        .spacing
        .iter()
        .zip(h.spatial.iter().zip(target))
        .map(|(&s, (&from, &to))| s * from as f64 / to as f64)
        .collect();
    Ok(Heatmap {
        spatial: dims,
        spacing,
        data,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedHeatmap<T> {
    pub heatmap: Heatmap<T>,
    /// The input was identically zero and was left unscaled.
    pub zero_map: bool,
}

/// Scales a non-negative map so its maximum is 1.
pub fn normalize_heatmap<T: Scalar>(h: &Heatmap<T>) -> Result<NormalizedHeatmap<T>> {
    if let Some(i) = h.data.iter().position(|&v| v < T::zero()) {
        return Err(Error::InvalidData(format!("negative heatmap value at index {i}")));
    }
    let max = h.max();
    if max == T::zero() {
        return Ok(NormalizedHeatmap {
            heatmap: h.clone(),
            zero_map: true,
        });
    }
    Ok(NormalizedHeatmap {
        heatmap: Heatmap {
            spatial: h.spatial.clone(),
            spacing: h.spacing.clone(),
            data: h.data.iter().map(|&v| v / max).collect(),
        },
        zero_map: false,
    })
}
