//! Instance normalization, optionally restricted to unmasked voxels.

use crate::error::{Error, Result};
use crate::masking::VoxelMask;
use crate::par;
use crate::tensor::{Scalar, Tensor5};

/// Per-(batch, channel) statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T = f32> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub count: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct NormGrads<T = f32> {
    pub input: Tensor5<T>,
    pub gain: Vec<T>,
    pub shift: Vec<T>,
}

fn check_params<T>(op: &'static str, channels: usize, gain: &[T], shift: &[T], eps: f64) -> Result<()> {
    if gain.len() != channels || shift.len() != channels {
        return Err(Error::shape(op, channels, format!("gain {} / shift {}", gain.len(), shift.len())));
    }
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("{op}: eps must be > 0, got {eps}")));
    }
    Ok(())
}

/// `gain * (x - mean) / sqrt(var + eps) + shift` with statistics over every voxel.
pub fn instance_norm<T: Scalar>(
    input: &Tensor5<T>,
    gain: &[T],
    shift: &[T],
    eps: f64,
) -> Result<(Tensor5<T>, NormCache<T>)> {
    masked_instance_norm(input, gain, shift, eps, None)
}

/// Instance norm whose statistics exclude masked voxels; masked outputs are exactly zero.
pub fn masked_instance_norm<T: Scalar>(
    input: &Tensor5<T>,
    gain: &[T],
    shift: &[T],
    eps: f64,
    mask: Option<&VoxelMask>,
) -> Result<(Tensor5<T>, NormCache<T>)> {
    let shape = input.shape();
    let (batch, channels, n) = (shape.batch(), shape.channels(), shape.spatial_len());
    check_params("instance_norm", channels, gain, shift, eps)?;
    if let Some(m) = mask {
        m.check("masked_instance_norm", batch, shape.spatial())?;
    }
    // Two-pass statistics in f64 per plane.
    let stats: Vec<(f64, f64, usize)> = par::map_range(batch * channels, |idx| {
        let b = idx / channels;
        let x = input.plane(b, idx % channels);
        let keep = mask.map(|m| m.plane(b));
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for (i, v) in x.iter().enumerate() {
            if keep.is_none_or(|k| !k[i]) {
                sum += v.as_f64();
                cnt += 1;
            }
        }
        if cnt == 0 {
            return (0.0, 0.0, 0);
        }
        let mean = sum / cnt as f64;
        let mut ss = 0.0;
        for (i, v) in x.iter().enumerate() {
            if keep.is_none_or(|k| !k[i]) {
                let d = v.as_f64() - mean;
                ss += d * d;
            }
        }
        (mean, ss / cnt as f64, cnt)
    });
    if let Some(pos) = stats.iter().position(|s| s.2 == 0) {
        return Err(Error::Invalid(format!(
            "masked_instance_norm: (batch {}, channel {}) is fully masked",
            pos / channels,
            pos % channels
        )));
    }
    let cache = NormCache {
        mean: stats.iter().map(|s| T::from_f64(s.0)).collect(),
        inv_std: stats.iter().map(|s| T::from_f64(1.0 / (s.1 + eps).sqrt())).collect(),
        count: stats.iter().map(|s| s.2).collect(),
    };
    let mut out = Tensor5::zeros(shape);
    let in_data = input.data();
    par::for_each_chunk(out.data_mut(), n, |idx, plane| {
        let (b, c) = (idx / channels, idx % channels);
        let (mean, inv) = (cache.mean[idx], cache.inv_std[idx]);
        let scale = gain[c] * inv;
        let x = &in_data[idx * n..(idx + 1) * n];
        match mask {
            Some(m) => {
                let k = m.plane(b);
                for i in 0..n {
                    plane[i] = if k[i] { T::zero() } else { (x[i] - mean) * scale + shift[c] };
                }
            }
            None => {
                for i in 0..n {
                    plane[i] = (x[i] - mean) * scale + shift[c];
                }
            }
        }
    });
    out.check_finite("instance_norm")?;
    Ok((out, cache))
}

/// Backward of [`masked_instance_norm`]; masked voxels get zero gradient.
pub fn masked_instance_norm_backward<T: Scalar>(
    input: &Tensor5<T>,
    gain: &[T],
    cache: &NormCache<T>,
    out_grad: &Tensor5<T>,
    mask: Option<&VoxelMask>,
) -> Result<NormGrads<T>> {
    let shape = input.shape();
    if out_grad.shape() != shape {
        return Err(Error::shape("instance_norm_backward", shape, out_grad.shape()));
    }
    let (channels, n) = (shape.channels(), shape.spatial_len());
    if let Some(m) = mask {
        m.check("masked_instance_norm_backward", shape.batch(), shape.spatial())?;
    }
    // Per plane: sum(dy), sum(dy * xhat) over the kept set.
    let sums: Vec<(f64, f64)> = par::map_range(shape.batch() * channels, |idx| {
        let b = idx / channels;
        let x = input.plane(b, idx % channels);
        let g = out_grad.plane(b, idx % channels);
        let keep = mask.map(|m| m.plane(b));
        let (mean, inv) = (cache.mean[idx].as_f64(), cache.inv_std[idx].as_f64());
        let mut sdy = 0.0;
        let mut sdyx = 0.0;
        for i in 0..n {
            if keep.is_none_or(|k| !k[i]) {
                let dy = g[i].as_f64();
                sdy += dy;
                sdyx += dy * (x[i].as_f64() - mean) * inv;
            }
        }
        (sdy, sdyx)
    });
    let mut dgain = vec![0.0f64; channels];
    let mut dshift = vec![0.0f64; channels];
    for (idx, &(sdy, sdyx)) in sums.iter().enumerate() {
        dshift[idx % channels] += sdy;
        dgain[idx % channels] += sdyx;
    }
    let mut dx = Tensor5::zeros(shape);
    let (in_data, g_data) = (input.data(), out_grad.data());
    par::for_each_chunk(dx.data_mut(), n, |idx, plane| {
        let (b, c) = (idx / channels, idx % channels);
        let (mean, inv) = (cache.mean[idx], cache.inv_std[idx]);
        let cnt = T::from_f64(cache.count[idx] as f64);
        let (sdy, sdyx) = (T::from_f64(sums[idx].0), T::from_f64(sums[idx].1));
        let scale = gain[c] * inv / cnt;
        let x = &in_data[idx * n..(idx + 1) * n];
        let g = &g_data[idx * n..(idx + 1) * n];
        let keep = mask.map(|m| m.plane(b));
        for i in 0..n {
            if keep.is_none_or(|k| !k[i]) {
                let xhat = (x[i] - mean) * inv;
                plane[i] = scale * (cnt * g[i] - sdy - xhat * sdyx);
            }
        }
    });
    Ok(NormGrads {
        input: dx,
        gain: dgain.into_iter().map(T::from_f64).collect(),
        shift: dshift.into_iter().map(T::from_f64).collect(),
    })
}
