//! Sparsified encoder operations: dense compute followed by re-masking,
//! masked-statistics normalization, and mask-token densification.
//!
//! Masked voxels are carried in-band as zeros next to a [`VoxelMask`].

use crate::error::{Error, Result};
use crate::kernels::conv::{conv3d, conv3d_backward, ConvGrads, ConvSpec};
use crate::masking::VoxelMask;
use crate::tensor::{Scalar, Shape5, Tensor5};

pub use crate::kernels::norm::{masked_instance_norm, masked_instance_norm_backward};

/// Zeroes every channel of `t` at masked voxels.
pub fn apply_mask<T: Scalar>(t: &mut Tensor5<T>, mask: &VoxelMask) -> Result<()> {
    let shape = t.shape();
    mask.check("apply_mask", shape.batch(), shape.spatial())?;
    let n = shape.spatial_len();
    for (idx, plane) in t.data_mut().chunks_mut(n).enumerate() {
        let m = mask.plane(idx / shape.channels());
        for (v, &k) in plane.iter_mut().zip(m) {
            if k {
                *v = T::zero();
            }
        }
    }
    Ok(())
}

/// `conv3d` with masked output voxels forced to zero. The mask must match the output resolution.
pub fn sparse_conv3d<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
    mask: &VoxelMask,
) -> Result<Tensor5<T>> {
    let mut out = conv3d(input, weight, bias, spec)?;
    apply_mask(&mut out, mask)?;
    Ok(out)
}

/// Backward of [`sparse_conv3d`]: masked output gradients are dropped first.
pub fn sparse_conv3d_backward<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    spec: &ConvSpec,
    out_grad: &Tensor5<T>,
    mask: &VoxelMask,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let mut g = out_grad.clone();
    apply_mask(&mut g, mask)?;
    conv3d_backward(input, weight, spec, &g, need_input)
}

fn check_token<T>(op: &'static str, feature: Shape5, token: &[T]) -> Result<()> {
    if token.len() != feature.channels() {
        return Err(Error::shape(op, feature.channels(), token.len()));
    }
    Ok(())
}

/// Replaces masked voxels with the per-channel token; unmasked voxels pass through.
pub fn densify<T: Scalar>(feature: &Tensor5<T>, mask: &VoxelMask, token: &[T]) -> Result<Tensor5<T>> {
    let shape = feature.shape();
    check_token("densify", shape, token)?;
    mask.check("densify", shape.batch(), shape.spatial())?;
    let mut out = feature.clone();
    let n = shape.spatial_len();
    for (idx, plane) in out.data_mut().chunks_mut(n).enumerate() {
        let t = token[idx % shape.channels()];
        let m = mask.plane(idx / shape.channels());
        for (v, &k) in plane.iter_mut().zip(m) {
            if k {
                *v = t;
            }
        }
    }
    Ok(out)
}

/// Returns `(feature_grad, token_grad)`; the token collects the summed gradient over masked voxels.
pub fn densify_backward<T: Scalar>(
    out_grad: &Tensor5<T>,
    mask: &VoxelMask,
) -> Result<(Tensor5<T>, Vec<T>)> {
    let shape = out_grad.shape();
    mask.check("densify_backward", shape.batch(), shape.spatial())?;
    let n = shape.spatial_len();
    let mut token = vec![0.0f64; shape.channels()];
    let mut g = out_grad.clone();
    for (idx, plane) in g.data_mut().chunks_mut(n).enumerate() {
        let m = mask.plane(idx / shape.channels());
        let mut acc = 0.0;
        for (v, &k) in plane.iter_mut().zip(m) {
            if k {
                acc += v.as_f64();
                *v = T::zero();
            }
        }
        token[idx % shape.channels()] += acc;
    }
    Ok((g, token.into_iter().map(T::from_f64).collect()))
}

/// Geometry of the channel-preserving 3x3x3 densification convolution.
pub fn densification_spec(channels: usize) -> ConvSpec {
    ConvSpec::same(channels, channels, 3, 1).with_bias(true)
}

/// Dense 3x3x3 convolution applied after token filling (no re-masking).
pub fn densification_conv<T: Scalar>(feature: &Tensor5<T>, weight: &Tensor5<T>, bias: &[T]) -> Result<Tensor5<T>> {
    conv3d(feature, weight, Some(bias), &densification_spec(feature.shape().channels()))
}

/// Identity kernel for the densification conv (centre tap 1 on the diagonal).
pub fn identity_kernel<T: Scalar>(channels: usize) -> Tensor5<T> {
    let spec = densification_spec(channels);
    let mut w = Tensor5::zeros(spec.weight_shape());
    for c in 0..channels {
        let i = w.index(c, c, 1, 1, 1);
        w.data_mut()[i] = T::one();
    }
    w
}
