//! Direct 3-D convolution and its adjoint.
//!
//! Every kernel walks output rows along x so the inner loop is a contiguous
//! multiply-accumulate for unit stride. Work is split over independent output
//! planes (forward, input gradient) or output channels (weight gradient).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Shape5, Tensor5};

use super::flat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub has_bias: bool,
}

impl ConvSpec {
    /// Isotropic kernel with "same" padding `(k - 1) / 2`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [(kernel - 1) / 2; 3],
            has_bias: false,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn weight_shape(&self) -> Shape5 {
        let [kz, ky, kx] = self.kernel;
        Shape5::new(self.out_channels, self.in_channels, kz, ky, kx)
    }

    /// Weight shape when used as a transposed convolution (input channels first).
    pub fn transpose_weight_shape(&self) -> Shape5 {
        let [kz, ky, kx] = self.kernel;
        Shape5::new(self.in_channels, self.out_channels, kz, ky, kx)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride.iter().any(|&s| s == 0) {
            return Err(Error::Invalid(format!("conv stride must be >= 1, got {:?}", self.stride)));
        }
        if self.kernel.iter().any(|&k| k == 0) || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Invalid(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    /// `floor((in + 2p - k) / s) + 1` per axis.
    pub fn output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::shape("conv3d output size", ">= 1", format!("{input:?}")));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// `(in - 1) * s - 2p + k` per axis.
    pub fn transpose_output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.padding[a] {
                return Err(Error::shape("conv3d_transpose output size", ">= 1", format!("{input:?}")));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }

    /// The forward convolution whose input gradient this transposed conv computes.
    fn adjoint(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            ..*self
        }
    }
}

/// Gradients produced by a convolution backward pass.
#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Option<Tensor5<T>>,
    pub weight: Tensor5<T>,
    pub bias: Option<Vec<T>>,
}

/// Output range `[lo, hi)` along one axis such that `o * s + k - p` lands in `[0, n)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    // o*s + k >= p  =>  o >= ceil((p - k) / s)
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // o*s + k - p <= n - 1  =>  o <= (n - 1 + p - k) / s
    let hi = if in_len + p < k + 1 {
        0
    } else {
        ((in_len - 1 + p - k) / s + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

fn check_input(op: &'static str, input: Shape5, spec: &ConvSpec, weight: Shape5, expect_w: Shape5) -> Result<()> {
    spec.validate()?;
    if input.channels() != spec.in_channels {
        return Err(Error::shape(op, format!("{} input channels", spec.in_channels), input));
    }
    if weight != expect_w {
        return Err(Error::shape(op, expect_w, weight));
    }
    Ok(())
}

/// `out[b, o] = bias[o] + sum_c W[o, c] * pad(in[b, c])`.
pub fn conv3d<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor5<T>> {
    check_input("conv3d", input.shape(), spec, weight.shape(), spec.weight_shape())?;
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::shape("conv3d bias", spec.out_channels, b.len()));
        }
    }
    let out_sp = spec.output_spatial(input.shape().spatial())?;
    let out = conv_forward_raw(input, weight, bias, spec, out_sp);
    out.check_finite("conv3d")?;
    Ok(out)
}

fn conv_forward_raw<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
    out_sp: [usize; 3],
) -> Tensor5<T> {
    if spec.stride == [1; 3] {
        return flat::conv_stride1(input, weight.data(), bias, spec.out_channels, spec.kernel, spec.padding);
    }
    let [batch, cin, di, hi, wi] = input.shape().0;
    let cout = spec.out_channels;
    let [dout, hout, wout] = out_sp;
    let [kz, ky, kx] = spec.kernel;
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.padding;
    let kvol = spec.kernel_volume();
    let plane_out = dout * hout * wout;
    let plane_in = di * hi * wi;
    let in_data = input.data();
    let w_data = weight.data();

    let mut out = Tensor5::zeros(Shape5::new(batch, cout, dout, hout, wout));
    par::for_each_chunk(out.data_mut(), plane_out, |idx, plane| {
        let (b, o) = (idx / cout, idx % cout);
        if let Some(bias) = bias {
            plane.iter_mut().for_each(|v| *v = bias[o]);
        }
        for c in 0..cin {
            let src = &in_data[(b * cin + c) * plane_in..][..plane_in];
            let wbase = (o * cin + c) * kvol;
            for dz in 0..kz {
                let (zlo, zhi) = valid_range(dout, di, sz, dz, pz);
                for dy in 0..ky {
                    let (ylo, yhi) = valid_range(hout, hi, sy, dy, py);
                    for dx in 0..kx {
                        let w = w_data[wbase + (dz * ky + dy) * kx + dx];
                        let (xlo, xhi) = valid_range(wout, wi, sx, dx, px);
                        if xlo >= xhi {
                            continue;
                        }
                        for oz in zlo..zhi {
                            let iz = oz * sz + dz - pz;
                            for oy in ylo..yhi {
                                let iy = oy * sy + dy - py;
                                let orow = &mut plane[(oz * hout + oy) * wout..][..wout];
                                let irow = &src[(iz * hi + iy) * wi..][..wi];
                                if sx == 1 {
                                    let ix0 = xlo + dx - px;
                                    let n = xhi - xlo;
                                    axpy(w, &irow[ix0..ix0 + n], &mut orow[xlo..xhi]);
                                } else {
                                    for ox in xlo..xhi {
                                        orow[ox] += w * irow[ox * sx + dx - px];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Input gradient of `conv3d`: scatters `out_grad` back through the kernel.
fn conv_input_grad_raw<T: Scalar>(
    out_grad: &Tensor5<T>,
    weight: &Tensor5<T>,
    spec: &ConvSpec,
    in_sp: [usize; 3],
) -> Tensor5<T> {
    if spec.stride == [1; 3] && (0..3).all(|a| spec.padding[a] < spec.kernel[a]) {
        return flat::input_grad_stride1(out_grad, weight, spec);
    }
    let [batch, cout, dout, hout, wout] = out_grad.shape().0;
    let cin = spec.in_channels;
    let [di, hi, wi] = in_sp;
    let [kz, ky, kx] = spec.kernel;
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.padding;
    let kvol = spec.kernel_volume();
    let plane_out = dout * hout * wout;
    let plane_in = di * hi * wi;
    let g_data = out_grad.data();
    let w_data = weight.data();

    let mut grad = Tensor5::zeros(Shape5::new(batch, cin, di, hi, wi));
    par::for_each_chunk(grad.data_mut(), plane_in, |idx, plane| {
        let (b, c) = (idx / cin, idx % cin);
        for o in 0..cout {
            let src = &g_data[(b * cout + o) * plane_out..][..plane_out];
            let wbase = (o * cin + c) * kvol;
            for dz in 0..kz {
                let (zlo, zhi) = valid_range(dout, di, sz, dz, pz);
                for dy in 0..ky {
                    let (ylo, yhi) = valid_range(hout, hi, sy, dy, py);
                    for dx in 0..kx {
                        let w = w_data[wbase + (dz * ky + dy) * kx + dx];
                        let (xlo, xhi) = valid_range(wout, wi, sx, dx, px);
                        if xlo >= xhi {
                            continue;
                        }
                        for oz in zlo..zhi {
                            let iz = oz * sz + dz - pz;
                            for oy in ylo..yhi {
                                let iy = oy * sy + dy - py;
                                let grow = &src[(oz * hout + oy) * wout..][..wout];
                                let irow = &mut plane[(iz * hi + iy) * wi..][..wi];
                                if sx == 1 {
                                    let ix0 = xlo + dx - px;
                                    let n = xhi - xlo;
                                    axpy(w, &grow[xlo..xhi], &mut irow[ix0..ix0 + n]);
                                } else {
                                    for ox in xlo..xhi {
                                        irow[ox * sx + dx - px] += w * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    grad
}

/// Weight gradient: `dW[o, c, k] = sum_{b, v} out_grad[b, o, v] * in[b, c, v*s + k - p]`.
fn conv_weight_grad_raw<T: Scalar>(
    input: &Tensor5<T>,
    out_grad: &Tensor5<T>,
    spec: &ConvSpec,
) -> Tensor5<T> {
    if spec.stride == [1; 3] {
        return flat::weight_grad_stride1(input, out_grad, spec);
    }
    let [batch, cin, di, hi, wi] = input.shape().0;
    let [_, cout, dout, hout, wout] = out_grad.shape().0;
    let [kz, ky, kx] = spec.kernel;
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.padding;
    let kvol = spec.kernel_volume();
    let plane_out = dout * hout * wout;
    let plane_in = di * hi * wi;
    let in_data = input.data();
    let g_data = out_grad.data();

    let mut grad = Tensor5::zeros(spec.weight_shape());
    par::for_each_chunk(grad.data_mut(), cin * kvol, |o, wrow| {
        for c in 0..cin {
            for dz in 0..kz {
                let (zlo, zhi) = valid_range(dout, di, sz, dz, pz);
                for dy in 0..ky {
                    let (ylo, yhi) = valid_range(hout, hi, sy, dy, py);
                    for dx in 0..kx {
                        let (xlo, xhi) = valid_range(wout, wi, sx, dx, px);
                        let mut acc = 0.0f64;
                        if xlo < xhi {
                            for b in 0..batch {
                                let src = &in_data[(b * cin + c) * plane_in..][..plane_in];
                                let g = &g_data[(b * cout + o) * plane_out..][..plane_out];
                                for oz in zlo..zhi {
                                    let iz = oz * sz + dz - pz;
                                    for oy in ylo..yhi {
                                        let iy = oy * sy + dy - py;
                                        let grow = &g[(oz * hout + oy) * wout..][..wout];
                                        let irow = &src[(iz * hi + iy) * wi..][..wi];
                                        let partial = if sx == 1 {
                                            let ix0 = xlo + dx - px;
                                            dot(&grow[xlo..xhi], &irow[ix0..ix0 + (xhi - xlo)])
                                        } else {
                                            let mut s = T::zero();
                                            for ox in xlo..xhi {
                                                s += grow[ox] * irow[ox * sx + dx - px];
                                            }
                                            s
                                        };
                                        acc += partial.as_f64();
                                    }
                                }
                            }
                        }
                        wrow[c * kvol + (dz * ky + dy) * kx + dx] = T::from_f64(acc);
                    }
                }
            }
        }
    });
    grad
}

fn bias_grad_raw<T: Scalar>(out_grad: &Tensor5<T>) -> Vec<T> {
    let [batch, cout, ..] = out_grad.shape().0;
    (0..cout)
        .map(|o| {
            let mut acc = 0.0f64;
            for b in 0..batch {
                acc += out_grad.plane(b, o).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            T::from_f64(acc)
        })
        .collect()
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four lanes so the compiler can keep independent accumulators.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Backward of [`conv3d`]. The input gradient is skipped when `need_input` is false.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    spec: &ConvSpec,
    out_grad: &Tensor5<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (input_grad, weight_grad, bias) = conv3d_grads(input, weight, spec, out_grad, need_input, true)?;
    Ok(ConvGrads {
        input: input_grad,
        weight: weight_grad.expect("requested"),
        bias,
    })
}

type RawGrads<T> = (Option<Tensor5<T>>, Option<Tensor5<T>>, Option<Vec<T>>);

/// Backward of [`conv3d`] computing only the requested gradients.
pub(crate) fn conv3d_grads<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    spec: &ConvSpec,
    out_grad: &Tensor5<T>,
    need_input: bool,
    need_params: bool,
) -> Result<RawGrads<T>> {
    check_input("conv3d_backward", input.shape(), spec, weight.shape(), spec.weight_shape())?;
    let out_sp = spec.output_spatial(input.shape().spatial())?;
    let expect = Shape5::new(input.shape().batch(), spec.out_channels, out_sp[0], out_sp[1], out_sp[2]);
    if out_grad.shape() != expect {
        return Err(Error::shape("conv3d_backward out_grad", expect, out_grad.shape()));
    }
    let input_grad = need_input.then(|| conv_input_grad_raw(out_grad, weight, spec, input.shape().spatial()));
    let weight_grad = need_params.then(|| conv_weight_grad_raw(input, out_grad, spec));
    let bias = (need_params && spec.has_bias).then(|| bias_grad_raw(out_grad));
    Ok((input_grad, weight_grad, bias))
}

/// Transposed convolution: the adjoint of `conv3d` with the same geometry.
///
/// `weight` has shape `(in_channels, out_channels, kz, ky, kx)`.
pub fn conv3d_transpose<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor5<T>> {
    check_input(
        "conv3d_transpose",
        input.shape(),
        spec,
        weight.shape(),
        spec.transpose_weight_shape(),
    )?;
    let out_sp = spec.transpose_output_spatial(input.shape().spatial())?;
    let mut out = conv_input_grad_raw(input, weight, &spec.adjoint(), out_sp);
    if let Some(bias) = bias {
        if bias.len() != spec.out_channels {
            return Err(Error::shape("conv3d_transpose bias", spec.out_channels, bias.len()));
        }
        let n = out.shape().spatial_len();
        for (i, plane) in out.data_mut().chunks_mut(n).enumerate() {
            let bv = bias[i % spec.out_channels];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    out.check_finite("conv3d_transpose")?;
    Ok(out)
}

pub fn conv3d_transpose_backward<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    spec: &ConvSpec,
    out_grad: &Tensor5<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (input_grad, weight_grad, bias) = conv3d_transpose_grads(input, weight, spec, out_grad, need_input, true)?;
    Ok(ConvGrads {
        input: input_grad,
        weight: weight_grad.expect("requested"),
        bias,
    })
}

pub(crate) fn conv3d_transpose_grads<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    spec: &ConvSpec,
    out_grad: &Tensor5<T>,
    need_input: bool,
    need_params: bool,
) -> Result<RawGrads<T>> {
    check_input(
        "conv3d_transpose_backward",
        input.shape(),
        spec,
        weight.shape(),
        spec.transpose_weight_shape(),
    )?;
    let out_sp = spec.transpose_output_spatial(input.shape().spatial())?;
    let expect = Shape5::new(input.shape().batch(), spec.out_channels, out_sp[0], out_sp[1], out_sp[2]);
    if out_grad.shape() != expect {
        return Err(Error::shape("conv3d_transpose_backward out_grad", expect, out_grad.shape()));
    }
    let adj = spec.adjoint();
    let input_grad = need_input.then(|| conv_forward_raw(out_grad, weight, None, &adj, input.shape().spatial()));
    let weight_grad = need_params.then(|| conv_weight_grad_raw(out_grad, input, &adj));
    let bias = (need_params && spec.has_bias).then(|| bias_grad_raw(out_grad));
    Ok((input_grad, weight_grad, bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Seven nested loops, no range tricks.
    fn naive_conv(input: &Tensor5<f64>, weight: &Tensor5<f64>, bias: Option<&[f64]>, spec: &ConvSpec) -> Tensor5<f64> {
        let [b_n, cin, di, hi, wi] = input.shape().0;
        let [dout, hout, wout] = spec.output_spatial([di, hi, wi]).unwrap();
        let mut out = Tensor5::zeros(Shape5::new(b_n, spec.out_channels, dout, hout, wout));
        for b in 0..b_n {
            for o in 0..spec.out_channels {
                for oz in 0..dout {
                    for oy in 0..hout {
                        for ox in 0..wout {
                            let mut acc = bias.map_or(0.0, |bb| bb[o]);
                            for c in 0..cin {
                                for kz in 0..spec.kernel[0] {
                                    for ky in 0..spec.kernel[1] {
                                        for kx in 0..spec.kernel[2] {
                                            let iz = (oz * spec.stride[0] + kz) as isize - spec.padding[0] as isize;
                                            let iy = (oy * spec.stride[1] + ky) as isize - spec.padding[1] as isize;
                                            let ix = (ox * spec.stride[2] + kx) as isize - spec.padding[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= di as isize || iy >= hi as isize || ix >= wi as isize {
                                                continue;
                                            }
                                            acc += weight.at(o, c, kz, ky, kx)
                                                * input.at(b, c, iz as usize, iy as usize, ix as usize);
                                        }
                                    }
                                }
                            }
                            let i = out.index(b, o, oz, oy, ox);
                            out.data_mut()[i] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor5::<f32>::randn(Shape5::new(1, 1, 3, 3, 3), 1.0, &mut rng);
        let spec = ConvSpec::same(1, 1, 1, 1).with_bias(true);
        let w = Tensor5::full(spec.weight_shape(), 1.0);
        let y = conv3d(&x, &w, Some(&[0.0]), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let spec = ConvSpec::same(2, 3, 3, 1).with_bias(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor5::<f32>::randn(spec.weight_shape(), 1.0, &mut rng);
        let x = Tensor5::zeros(Shape5::new(1, 2, 4, 4, 4));
        let y = conv3d(&x, &w, Some(&[0.5, -1.0, 2.0]), &spec).unwrap();
        for o in 0..3 {
            assert!(y.plane(0, o).iter().all(|&v| v == [0.5, -1.0, 2.0][o]));
        }
    }

    #[test]
    fn matches_loop_oracle() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = ConvSpec::same(2, 3, 3, 1).with_bias(true);
            let x = Tensor5::<f64>::randn(Shape5::new(1, 2, 4, 4, 4), 1.0, &mut rng);
            let w = Tensor5::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
            let bias = [0.1, -0.2, 0.3];
            let fast = conv3d(&x, &w, Some(&bias), &spec).unwrap();
            let slow = naive_conv(&x, &w, Some(&bias), &spec);
            let err = fast.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-5, "max err {err}");
        }
    }

    #[test]
    fn strided_and_anisotropic_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 2,
            kernel: [3, 1, 3],
            stride: [2, 1, 2],
            padding: [1, 0, 1],
            has_bias: false,
        };
        let x = Tensor5::<f64>::randn(Shape5::new(2, 2, 5, 4, 6), 1.0, &mut rng);
        let w = Tensor5::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
        let fast = conv3d(&x, &w, None, &spec).unwrap();
        let slow = naive_conv(&x, &w, None, &spec);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_of_ones_upsamples() {
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: [2; 3],
            stride: [2; 3],
            padding: [0; 3],
            has_bias: false,
        };
        let x = Tensor5::<f32>::full(Shape5::new(1, 1, 2, 2, 2), 1.0);
        let w = Tensor5::full(spec.transpose_weight_shape(), 1.0);
        let y = conv3d_transpose(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), Shape5::new(1, 1, 4, 4, 4));
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transpose_of_zero_is_zero() {
        let spec = ConvSpec::same(3, 2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor5::<f32>::randn(spec.transpose_weight_shape(), 1.0, &mut rng);
        let y = conv3d_transpose(&Tensor5::zeros(Shape5::new(1, 3, 2, 2, 2)), &w, None, &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_grad_is_adjoint() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let fwd = ConvSpec::same(3, 2, 3, 2);
            let x = Tensor5::<f32>::randn(Shape5::new(1, 3, 6, 6, 6), 1.0, &mut rng);
            let w = Tensor5::<f32>::randn(fwd.weight_shape(), 1.0, &mut rng);
            let ax = conv3d(&x, &w, None, &fwd).unwrap();
            let y = Tensor5::<f32>::randn(ax.shape(), 1.0, &mut rng);
            let g = conv3d_backward(&x, &w, &fwd, &y, true).unwrap().input.unwrap();
            let lhs = ax.dot(&y);
            let rhs = x.dot(&g);
            assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn transpose_adjoint_identity() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let tspec = ConvSpec {
                in_channels: 4,
                out_channels: 2,
                kernel: [2; 3],
                stride: [2; 3],
                padding: [0; 3],
                has_bias: false,
            };
            let w = Tensor5::<f32>::randn(tspec.transpose_weight_shape(), 1.0, &mut rng);
            let small = Tensor5::<f32>::randn(Shape5::new(2, 4, 3, 3, 3), 1.0, &mut rng);
            let big = Tensor5::<f32>::randn(Shape5::new(2, 2, 6, 6, 6), 1.0, &mut rng);
            let fwd = tspec.adjoint();
            let a_big = conv3d(&big, &w, None, &fwd).unwrap();
            let at_small = conv3d_transpose(&small, &w, None, &tspec).unwrap();
            let lhs = a_big.dot(&small);
            let rhs = big.dot(&at_small);
            assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let spec = ConvSpec::same(2, 1, 3, 1);
        let w = Tensor5::<f32>::zeros(spec.weight_shape());
        let x = Tensor5::<f32>::zeros(Shape5::new(1, 3, 4, 4, 4));
        assert!(matches!(conv3d(&x, &w, None, &spec), Err(Error::Shape { .. })));
    }

    #[test]
    fn rejects_non_finite() {
        let spec = ConvSpec::same(1, 1, 1, 1);
        let w = Tensor5::<f32>::full(spec.weight_shape(), 1.0);
        let mut x = Tensor5::<f32>::zeros(Shape5::new(1, 1, 2, 2, 2));
        x.data_mut()[0] = f32::INFINITY;
        assert!(matches!(conv3d(&x, &w, None, &spec), Err(Error::NonFinite(_))));
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for out_len in 1..7 {
            for in_len in 1..9 {
                for s in 1..3 {
                    for k in 0..3 {
                        for p in 0..2 {
                            let (lo, hi) = valid_range(out_len, in_len, s, k, p);
                            let brute: Vec<usize> = (0..out_len)
                                .filter(|&o| {
                                    let i = (o * s + k) as isize - p as isize;
                                    i >= 0 && i < in_len as isize
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, brute, "out {out_len} in {in_len} s {s} k {k} p {p}");
                        }
                    }
                }
            }
        }
    }

    /// Brute-force input and weight gradients of `conv3d`.
    fn naive_backward(input: &Tensor5<f64>, spec: &ConvSpec, weight: &Tensor5<f64>, g: &Tensor5<f64>) -> (Vec<f64>, Vec<f64>) {
        let [b_n, cin, di, hi, wi] = input.shape().0;
        let [dout, hout, wout] = spec.output_spatial([di, hi, wi]).unwrap();
        let mut gi = vec![0.0; input.len()];
        let mut gw = vec![0.0; weight.len()];
        let [kz, ky, kx] = spec.kernel;
        for b in 0..b_n {
            for o in 0..spec.out_channels {
                for c in 0..cin {
                    for (oz, oy, ox) in (0..dout).flat_map(|z| (0..hout).flat_map(move |y| (0..wout).map(move |x| (z, y, x)))) {
                        for (dz, dy, dx) in (0..kz).flat_map(|z| (0..ky).flat_map(move |y| (0..kx).map(move |x| (z, y, x)))) {
                            let iz = (oz * spec.stride[0] + dz) as isize - spec.padding[0] as isize;
                            let iy = (oy * spec.stride[1] + dy) as isize - spec.padding[1] as isize;
                            let ix = (ox * spec.stride[2] + dx) as isize - spec.padding[2] as isize;
                            if iz < 0 || iy < 0 || ix < 0 || iz >= di as isize || iy >= hi as isize || ix >= wi as isize {
                                continue;
                            }
                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                            let gv = g.at(b, o, oz, oy, ox);
                            let ii = (((b * cin + c) * di + iz) * hi + iy) * wi + ix;
                            let wi_ = (((o * cin + c) * kz + dz) * ky + dy) * kx + dx;
                            gi[ii] += gv * weight.data()[wi_];
                            gw[wi_] += gv * input.data()[ii];
                        }
                    }
                }
            }
        }
        (gi, gw)
    }

    #[test]
    fn backward_matches_brute_force_on_odd_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            ([2, 3, 5, 4, 7], 5, [3, 3, 3], [1, 1, 1], [1, 1, 1]),
            ([1, 2, 3, 6, 5], 3, [3, 1, 5], [1, 0, 2], [1, 1, 1]),
            ([2, 5, 4, 4, 4], 6, [1, 1, 1], [0, 0, 0], [1, 1, 1]),
            ([1, 2, 4, 5, 6], 2, [3, 3, 3], [0, 1, 2], [1, 1, 1]),
            ([1, 2, 7, 6, 5], 3, [3, 3, 3], [1, 1, 1], [2, 2, 1]),
        ];
        for (shape, cout, kernel, padding, stride) in cases {
            let x = Tensor5::<f64>::randn(Shape5(shape), 1.0, &mut rng);
            let spec = ConvSpec {
                in_channels: shape[1],
                out_channels: cout,
                kernel,
                stride,
                padding,
                has_bias: false,
            };
            let w = Tensor5::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
            let y = conv3d(&x, &w, None, &spec).unwrap();
            let want = naive_conv(&x, &w, None, &spec);
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10);
            }
            let g = Tensor5::<f64>::randn(y.shape(), 1.0, &mut rng);
            let grads = conv3d_backward(&x, &w, &spec, &g, true).unwrap();
            let (gi, gw) = naive_backward(&x, &spec, &w, &g);
            for (a, b) in grads.input.unwrap().data().iter().zip(&gi) {
                assert!((a - b).abs() < 1e-10, "input grad {a} vs {b} for {spec:?}");
            }
            for (a, b) in grads.weight.data().iter().zip(&gw) {
                assert!((a - b).abs() < 1e-9, "weight grad {a} vs {b} for {spec:?}");
            }
        }
    }
}
