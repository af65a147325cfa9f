//! Overlapping patch extraction from 1-D trajectories and mask sampling.
//!
//! Patch extraction is a pure gather, so it stays linear and differentiable
//! when applied to a graph variable.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// One candidate patch scale: size, derived stride, and the ratio that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride: usize,
    pub stride_ratio: f64,
}

impl PatchSpec {
    pub fn new(patch_size: usize, stride_ratio: f64) -> Result<Self> {
        Ok(PatchSpec {
            patch_size,
            stride: compute_stride(patch_size, stride_ratio)?,
            stride_ratio,
        })
    }
}

/// Stride for a patch size: max{1, floor(rho * P + 1/2)}.
pub fn compute_stride(patch_size: usize, stride_ratio: f64) -> Result<usize> {
    if patch_size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    if !(stride_ratio > 0.0 && stride_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "stride ratio must lie in (0, 1], got {stride_ratio}"
        )));
    }
    Ok(((stride_ratio * patch_size as f64 + 0.5).floor() as usize).max(1))
}

/// Number of full patches that fit a trajectory of length `t`.
pub fn patch_count(t: usize, spec: &PatchSpec) -> Result<usize> {
    if t < spec.patch_size {
        return Err(Error::DegenerateScale {
            patch: spec.patch_size,
            len: t,
        });
    }
    Ok((t - spec.patch_size) / spec.stride + 1)
}

/// Trajectory offsets of each patch row.
pub fn start_indices(t: usize, spec: &PatchSpec) -> Result<Vec<usize>> {
    let n = patch_count(t, spec)?;
    Ok((0..n).map(|i| i * spec.stride).collect())
}

/// Stacked patch rows of one trajectory.
#[derive(Debug, Clone)]
pub struct PatchSet {
    /// N_r x P_r patch matrix.
    pub matrix: Tensor,
    pub start_indices: Vec<usize>,
}

/// Extract all full patches of a trajectory as an N_r x P_r matrix.
pub fn extract_patches(trajectory: &[f64], spec: &PatchSpec) -> Result<PatchSet> {
    let starts = start_indices(trajectory.len(), spec)?;
    let p = spec.patch_size;
    let mut data = Vec::with_capacity(starts.len() * p);
    for &s in &starts {
        data.extend_from_slice(&trajectory[s..s + p]);
    }
    Ok(PatchSet {
        matrix: Tensor::new(vec![starts.len(), p], data)?,
        start_indices: starts,
    })
}

/// Graph-level patch extraction from a [T] or [T, 1] variable.
pub fn extract_patches_var(trajectory: &Var, spec: &PatchSpec) -> Result<(Var, Vec<usize>)> {
    let t = trajectory.numel();
    let starts = start_indices(t, spec)?;
    let p = spec.patch_size;
    let mut idx = Vec::with_capacity(starts.len() * p);
    for &s in &starts {
        for j in 0..p {
            idx.push(s + j);
        }
    }
    let patches = trajectory.gather(&idx, &[starts.len(), p])?;
    Ok((patches, starts))
}

/// Indices of masked patch rows, sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub indices: Vec<usize>,
    pub mask_ratio: f64,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

/// |M| = max{1, floor(rho_mask * N + 1/2)}.
pub fn mask_cardinality(n: usize, mask_ratio: f64) -> usize {
    ((mask_ratio * n as f64 + 0.5).floor() as usize).clamp(1, n)
}

/// Uniform sample of patch indices without replacement.
pub fn sample_mask<R: Rng>(n: usize, mask_ratio: f64, rng: &mut R) -> Result<MaskSet> {
    if n == 0 {
        return Err(Error::Config("cannot mask an empty patch set".into()));
    }
    let m = mask_cardinality(n, mask_ratio);
    // partial Fisher-Yates over 0..n
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut indices = pool[..m].to_vec();
    indices.sort_unstable();
    Ok(MaskSet {
        indices,
        mask_ratio,
    })
}
