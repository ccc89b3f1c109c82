//! Resampling, normalization, patch extraction and spatial augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};

use super::volume::Volume;

fn at(dims: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

/// Trilinear sample at continuous voxel coordinates; corners outside the grid read as zero.
fn trilinear(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> f32 {
    let base = p.map(f64::floor);
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let hi = (corner >> (2 - a)) & 1 == 1;
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
            let c = base[a] as i64 + hi as i64;
            if c < 0 || c >= dims[a] as i64 {
                inside = false;
            }
            idx[a] = c.max(0) as usize;
        }
        if inside && w != 0.0 {
            acc += w * data[at(dims, idx[0], idx[1], idx[2])] as f64;
        }
    }
    acc as f32
}

/// Resamples every channel onto `round(dim * spacing / target)` voxels with
/// centre-aligned trilinear interpolation, clamped at the borders.
pub fn resample_trilinear(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Invalid(format!("target spacing {target:?} must be > 0")));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = (v.dims[a] as f64 * v.spacing[a] / target[a]).round() as usize;
        if dims[a] == 0 {
            return Err(Error::Invalid(format!("resampling {} collapses axis {a} to 0 voxels", v.source)));
        }
    }
    let ratio = [0, 1, 2].map(|a| target[a] / v.spacing[a]);
    let coord = |a: usize, j: usize| ((j as f64 + 0.5) * ratio[a] - 0.5).clamp(0.0, (v.dims[a] - 1) as f64);
    let n = dims.iter().product::<usize>();
    let mut data = Vec::with_capacity(v.channels * n);
    for c in 0..v.channels {
        let src = v.channel(c);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(trilinear(src, v.dims, [coord(0, z), coord(1, y), coord(2, x)]));
                }
            }
        }
    }
    Volume::new(v.channels, dims, target, data, v.modality.clone(), v.source.clone())
}

/// Per-channel `(x - mean) / std` over all voxels (population variance).
pub fn zscore(v: &Volume) -> Result<Volume> {
    let mut out = v.clone();
    for c in 0..v.channels {
        let x = v.channel(c);
        let n = x.len() as f64;
        let mean = x.iter().map(|&a| a as f64).sum::<f64>() / n;
        let var = x.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n;
        if !(var > 1e-12 * mean.abs().max(1.0).powi(2)) {
            return Err(Error::Invalid(format!("cannot z-score {}: channel {c} has zero variance", v.source)));
        }
        let inv = 1.0 / var.sqrt();
        for (o, &a) in out.channel_mut(c).iter_mut().zip(x) {
            *o = ((a as f64 - mean) * inv) as f32;
        }
    }
    Ok(out)
}

/// Copies a `patch`-sized window whose corner sits at `offset` in the
/// symmetrically zero-padded volume (padding only where the volume is smaller).
pub fn crop_padded<T: Copy + Default>(
    data: &[T],
    channels: usize,
    dims: [usize; 3],
    patch: [usize; 3],
    offset: [usize; 3],
) -> Vec<T> {
    let pad = [0, 1, 2].map(|a| patch[a].saturating_sub(dims[a]) / 2);
    let n = dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(channels * patch.iter().product::<usize>());
    for c in 0..channels {
        let src = &data[c * n..(c + 1) * n];
        for z in 0..patch[0] {
            for y in 0..patch[1] {
                for x in 0..patch[2] {
                    let p = [z + offset[0], y + offset[1], x + offset[2]];
                    let mut q = [0usize; 3];
                    let mut inside = true;
                    for a in 0..3 {
                        match p[a].checked_sub(pad[a]) {
                            Some(v) if v < dims[a] => q[a] = v,
                            _ => inside = false,
                        }
                    }
                    out.push(if inside { src[at(dims, q[0], q[1], q[2])] } else { T::default() });
                }
            }
        }
    }
    out
}

/// Largest valid corner offset per axis after padding.
pub fn max_offset(dims: [usize; 3], patch: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| dims[a].max(patch[a]) - patch[a])
}

pub fn random_offset<R: Rng + ?Sized>(dims: [usize; 3], patch: [usize; 3], rng: &mut R) -> [usize; 3] {
    max_offset(dims, patch).map(|m| rng.random_range(0..=m))
}

pub fn center_offset(dims: [usize; 3], patch: [usize; 3]) -> [usize; 3] {
    max_offset(dims, patch).map(|m| m / 2)
}

/// Uniform random crop as a `1 x C x patch` tensor, plus the offset used.
pub fn sample_patch<R: Rng + ?Sized>(v: &Volume, patch: [usize; 3], rng: &mut R) -> (Tensor5<f32>, [usize; 3]) {
    let offset = random_offset(v.dims, patch, rng);
    (patch_at(v, patch, offset), offset)
}

pub fn patch_at(v: &Volume, patch: [usize; 3], offset: [usize; 3]) -> Tensor5<f32> {
    let data = crop_padded(&v.data, v.channels, v.dims, patch, offset);
    Tensor5::from_vec(Shape5::new(1, v.channels, patch[0], patch[1], patch[2]), data).expect("crop size")
}

fn default_max_rotation() -> f64 {
    15.0
}
fn default_scale_range() -> [f64; 2] {
    [0.9, 1.1]
}
fn default_mirror_p() -> f64 {
    0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub mirror: bool,
    pub rotate: bool,
    pub scale: bool,
    #[serde(default = "default_mirror_p")]
    pub mirror_p: f64,
    /// Degrees, per axis, drawn uniformly from `[-max, max]`.
    #[serde(default = "default_max_rotation")]
    pub max_rotation_deg: f64,
    #[serde(default = "default_scale_range")]
    pub scale_range: [f64; 2],
}

impl AugmentConfig {
    pub fn off() -> Self {
        AugmentConfig {
            mirror: false,
            rotate: false,
            scale: false,
            ..Self::default()
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror: true,
            rotate: true,
            scale: true,
            mirror_p: default_mirror_p(),
            max_rotation_deg: default_max_rotation(),
            scale_range: default_scale_range(),
        }
    }
}

/// One concrete draw of the augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub mirror: [bool; 3],
    /// Radians; `angles[a]` rotates the plane orthogonal to axis `a`.
    pub angles: [f64; 3],
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = AugmentParams {
        mirror: [false; 3],
        angles: [0.0; 3],
        scale: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut p = Self::IDENTITY;
        if cfg.mirror {
            p.mirror = [(); 3].map(|_| rng.random_bool(cfg.mirror_p));
        }
        if cfg.rotate && cfg.max_rotation_deg > 0.0 {
            let m = cfg.max_rotation_deg.to_radians();
            p.angles = [(); 3].map(|_| rng.random_range(-m..=m));
        }
        if cfg.scale && cfg.scale_range[1] > cfg.scale_range[0] {
            p.scale = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
        }
        p
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Source coordinates (about the patch centre) for each output voxel:
    /// the inverse of `scale * R * F`.
    fn inverse(&self) -> [[f64; 3]; 3] {
        let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        // R = R0 * R1 * R2; R^T = R2^T * R1^T * R0^T, applied right to left.
        for a in 0..3 {
            let (s, c) = self.angles[a].sin_cos();
            if s == 0.0 && c == 1.0 {
                continue;
            }
            let (i, j) = ((a + 1) % 3, (a + 2) % 3);
            let mut rt = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            rt[i][i] = c;
            rt[i][j] = s;
            rt[j][i] = -s;
            rt[j][j] = c;
            m = mat_mul(&rt, &m);
        }
        for (a, row) in m.iter_mut().enumerate() {
            let f = if self.mirror[a] { -1.0 } else { 1.0 };
            for v in row.iter_mut() {
                *v *= f / self.scale;
            }
        }
        m
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn source_coords(params: &AugmentParams, dims: [usize; 3]) -> Vec<[f64; 3]> {
    let inv = params.inverse();
    let centre = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let q = [z as f64 - centre[0], y as f64 - centre[1], x as f64 - centre[2]];
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = centre[a] + inv[a][0] * q[0] + inv[a][1] * q[1] + inv[a][2] * q[2];
                }
                out.push(p);
            }
        }
    }
    out
}

/// Applies the affine to every batch item and channel (trilinear, zero fill).
pub fn augment_patch(patch: &Tensor5<f32>, params: &AugmentParams) -> Tensor5<f32> {
    if params.is_identity() {
        return patch.clone();
    }
    let s = patch.shape();
    let dims = s.spatial();
    let coords = source_coords(params, dims);
    let mut out = Tensor5::zeros(s);
    for b in 0..s.batch() {
        for c in 0..s.channels() {
            let src = patch.plane(b, c);
            for (o, p) in out.plane_mut(b, c).iter_mut().zip(&coords) {
                *o = trilinear(src, dims, *p);
            }
        }
    }
    out
}

/// Nearest-neighbour version for label rasters; outside reads as class 0.
pub fn augment_labels(labels: &[u8], dims: [usize; 3], params: &AugmentParams) -> Vec<u8> {
    if params.is_identity() {
        return labels.to_vec();
    }
    source_coords(params, dims)
        .into_iter()
        .map(|p| {
            let q = p.map(|v| v.round());
            if (0..3).all(|a| q[a] >= 0.0 && q[a] < dims[a] as f64) {
                labels[at(dims, q[0] as usize, q[1] as usize, q[2] as usize)]
            } else {
                0
            }
        })
        .collect()
}
