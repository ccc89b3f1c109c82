//! Stride-1 convolution on a zero-padded, flattened grid.
//!
//! With the input padded to `Dp x Hp x Wp`, the output voxel at flat
//! position `j = (oz*Hp + oy)*Wp + ox` reads tap `(dz, dy, dx)` from
//! `j + (dz*Hp + dy)*Wp + dx`. Every tap then becomes one long contiguous
//! stream instead of many short rows; positions with `ox >= Wout` or
//! `oy >= Hout` are computed and thrown away. The inner loops are blocked
//! over output channels (and taps along x for the weight gradient) so the
//! accumulators stay in registers.

use crate::par;
use crate::tensor::{Scalar, Shape5, Tensor5};

use super::conv::ConvSpec;

/// Output channels per register block.
const OB: usize = 4;
/// Voxels per register block.
const L: usize = 8;
/// Weight-gradient partial sums are flushed to f64 this often.
const FLUSH: usize = 2048;

struct Grid {
    padded: [usize; 3],
    out: [usize; 3],
    /// Voxels of one padded channel.
    vol: usize,
    /// Length of the flat output range.
    span: usize,
}

impl Grid {
    fn new(input: [usize; 3], kernel: [usize; 3], pad: [usize; 3]) -> Grid {
        let padded = [0, 1, 2].map(|a| input[a] + 2 * pad[a]);
        let out = [0, 1, 2].map(|a| padded[a] + 1 - kernel[a]);
        let [_, hp, wp] = padded;
        Grid {
            padded,
            out,
            vol: padded.iter().product(),
            span: ((out[0] - 1) * hp + out[1] - 1) * wp + out[2],
        }
    }

    fn tap_offset(&self, dz: usize, dy: usize, dx: usize) -> usize {
        (dz * self.padded[1] + dy) * self.padded[2] + dx
    }

    /// Calls `f(flat, dense)` for every valid output voxel, row by row:
    /// `flat` indexes the padded flat range and `dense` the output plane.
    fn rows(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.out;
        for z in 0..d {
            for y in 0..h {
                f((z * self.padded[1] + y) * self.padded[2], (z * h + y) * w, w);
            }
        }
    }
}

/// Zero-padded copies of every channel of batch item `b`.
fn pad_item<T: Scalar>(t: &Tensor5<T>, b: usize, pad: [usize; 3], grid: &Grid) -> Vec<T> {
    let [_, c_n, d, h, w] = t.shape().0;
    let [_, hp, wp] = grid.padded;
    let mut out = vec![T::zero(); c_n * grid.vol];
    for c in 0..c_n {
        let src = t.plane(b, c);
        let dst = &mut out[c * grid.vol..][..grid.vol];
        for z in 0..d {
            for y in 0..h {
                let at = ((z + pad[0]) * hp + y + pad[1]) * wp + pad[2];
                dst[at..at + w].copy_from_slice(&src[(z * h + y) * w..][..w]);
            }
        }
    }
    out
}

/// `weight` laid out as `(out, in, taps)`, regrouped into blocks of `OB`
/// output channels: `blocks[blk][(c*taps + t)*OB + i]`, zero-filled.
fn block_weights<T: Scalar>(w: &[T], cout: usize, cin: usize, taps: usize) -> Vec<Vec<T>> {
    (0..cout.div_ceil(OB))
        .map(|blk| {
            let mut v = vec![T::zero(); cin * taps * OB];
            for i in 0..OB.min(cout - blk * OB) {
                let o = blk * OB + i;
                for ct in 0..cin * taps {
                    v[ct * OB + i] = w[o * cin * taps + ct];
                }
            }
            v
        })
        .collect()
}

/// `acc[i][j] = sum_ct w[ct*OB + i] * p[offs[ct] + j]` over the flat span.
fn forward_block<T: Scalar>(p: &[T], offs: &[usize], w: &[T], span: usize) -> Vec<T> {
    let mut out = vec![T::zero(); OB * span];
    let mut j = 0;
    while j + L <= span {
        let mut acc = [[T::zero(); L]; OB];
        for (ct, &off) in offs.iter().enumerate() {
            let x: &[T; L] = p[off + j..off + j + L].try_into().expect("block");
            let wv: &[T; OB] = w[ct * OB..ct * OB + OB].try_into().expect("block");
            for i in 0..OB {
                for l in 0..L {
                    acc[i][l] += wv[i] * x[l];
                }
            }
        }
        for i in 0..OB {
            out[i * span + j..][..L].copy_from_slice(&acc[i]);
        }
        j += L;
    }
    for j in j..span {
        let mut acc = [T::zero(); OB];
        for (ct, &off) in offs.iter().enumerate() {
            let x = p[off + j];
            for i in 0..OB {
                acc[i] += w[ct * OB + i] * x;
            }
        }
        for i in 0..OB {
            out[i * span + j] = acc[i];
        }
    }
    out
}

/// Stride-1 correlation of `input` with `weight` (`cout x cin x k`) under
/// `padding`, plus optional bias.
pub(crate) fn conv_stride1<T: Scalar>(
    input: &Tensor5<T>,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    kernel: [usize; 3],
    padding: [usize; 3],
) -> Tensor5<T> {
    let [batch, cin, d, h, w] = input.shape().0;
    let grid = Grid::new([d, h, w], kernel, padding);
    let [kz, ky, kx] = kernel;
    let taps = kz * ky * kx;
    let mut offs = Vec::with_capacity(cin * taps);
    for c in 0..cin {
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    offs.push(c * grid.vol + grid.tap_offset(dz, dy, dx));
                }
            }
        }
    }
    let blocks = block_weights(weight, cout, cin, taps);
    let padded = par::map_range(batch, |b| pad_item(input, b, padding, &grid));
    let nblk = blocks.len();
    let tiles = par::map_range(batch * nblk, |task| {
        forward_block(&padded[task / nblk], &offs, &blocks[task % nblk], grid.span)
    });
    let [od, oh, ow] = grid.out;
    let plane = od * oh * ow;
    let mut out = Tensor5::zeros(Shape5::new(batch, cout, od, oh, ow));
    let data = out.data_mut();
    for (task, tile) in tiles.iter().enumerate() {
        let (b, blk) = (task / nblk, task % nblk);
        for i in 0..OB.min(cout - blk * OB) {
            let o = blk * OB + i;
            let src = &tile[i * grid.span..][..grid.span];
            let dst = &mut data[(b * cout + o) * plane..][..plane];
            let bv = bias.map_or(T::zero(), |bb| bb[o]);
            grid.rows(|flat, dense, n| {
                for (dv, &sv) in dst[dense..dense + n].iter_mut().zip(&src[flat..flat + n]) {
                    *dv = sv + bv;
                }
            });
        }
    }
    out
}

/// Input gradient of a stride-1 conv: a full correlation of `out_grad`
/// with the spatially flipped, channel-transposed kernel.
pub(crate) fn input_grad_stride1<T: Scalar>(
    out_grad: &Tensor5<T>,
    weight: &Tensor5<T>,
    spec: &ConvSpec,
) -> Tensor5<T> {
    let [cout, cin, kz, ky, kx] = weight.shape().0;
    let taps = kz * ky * kx;
    let w = weight.data();
    let mut flipped = vec![T::zero(); w.len()];
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..taps {
                flipped[(c * cout + o) * taps + (taps - 1 - t)] = w[(o * cin + c) * taps + t];
            }
        }
    }
    let pad = [0, 1, 2].map(|a| spec.kernel[a] - 1 - spec.padding[a]);
    conv_stride1(out_grad, &flipped, None, cin, spec.kernel, pad)
}

/// Weight gradient of a stride-1 conv, accumulated in f64.
pub(crate) fn weight_grad_stride1<T: Scalar>(
    input: &Tensor5<T>,
    out_grad: &Tensor5<T>,
    spec: &ConvSpec,
) -> Tensor5<T> {
    let [batch, cin, d, h, w] = input.shape().0;
    let cout = spec.out_channels;
    let grid = Grid::new([d, h, w], spec.kernel, spec.padding);
    let [kz, ky, kx] = spec.kernel;
    let taps = kz * ky * kx;
    let padded = par::map_range(batch, |b| pad_item(input, b, spec.padding, &grid));
    // Output gradients on the flat grid, zero at the discarded positions,
    // grouped in blocks of OB channels: gflat[b][blk][i*span + j].
    let nblk = cout.div_ceil(OB);
    let plane = grid.out.iter().product::<usize>();
    let gflat: Vec<Vec<Vec<T>>> = (0..batch)
        .map(|b| {
            (0..nblk)
                .map(|blk| {
                    let mut g = vec![T::zero(); OB * grid.span];
                    for i in 0..OB.min(cout - blk * OB) {
                        let src = &out_grad.data()[(b * cout + blk * OB + i) * plane..][..plane];
                        let dst = &mut g[i * grid.span..][..grid.span];
                        grid.rows(|flat, dense, n| dst[flat..flat + n].copy_from_slice(&src[dense..dense + n]));
                    }
                    g
                })
                .collect()
        })
        .collect();
    let sums = par::map_range(nblk * cin, |task| {
        let (blk, c) = (task / cin, task % cin);
        let mut acc = vec![0.0f64; OB * taps];
        for b in 0..batch {
            let p = &padded[b][c * grid.vol..][..grid.vol];
            let g = &gflat[b][blk];
            for dz in 0..kz {
                for dy in 0..ky {
                    let base = grid.tap_offset(dz, dy, 0);
                    let t0 = (dz * ky + dy) * kx;
                    if kx == 3 {
                        tap_row_sums::<T, 3>(p, base, g, grid.span, &mut acc, t0, taps);
                    } else if kx == 1 {
                        tap_row_sums::<T, 1>(p, base, g, grid.span, &mut acc, t0, taps);
                    } else {
                        for dx in 0..kx {
                            for i in 0..OB {
                                let gi = &g[i * grid.span..][..grid.span];
                                let s: f64 = gi.iter().zip(&p[base + dx..]).map(|(a, b)| (*a * *b).as_f64()).sum();
                                acc[i * taps + t0 + dx] += s;
                            }
                        }
                    }
                }
            }
        }
        acc
    });
    let mut grad = Tensor5::zeros(spec.weight_shape());
    let gw = grad.data_mut();
    for (task, acc) in sums.iter().enumerate() {
        let (blk, c) = (task / cin, task % cin);
        for i in 0..OB.min(cout - blk * OB) {
            let o = blk * OB + i;
            for t in 0..taps {
                gw[(o * cin + c) * taps + t] = T::from_f64(acc[i * taps + t]);
            }
        }
    }
    grad
}

/// Adds `sum_j g[i][j] * p[base + dx + j]` for `dx < KX` and every `i < OB`
/// into `acc[i*taps + t0 + dx]`.
fn tap_row_sums<T: Scalar, const KX: usize>(
    p: &[T],
    base: usize,
    g: &[T],
    span: usize,
    acc: &mut [f64],
    t0: usize,
    taps: usize,
) {
    let mut start = 0;
    while start < span {
        let end = (start + FLUSH).min(span);
        let mut part = [[[T::zero(); 4]; KX]; OB];
        let mut j = start;
        while j + 4 <= end {
            let gv: [[T; 4]; OB] = std::array::from_fn(|i| g[i * span + j..][..4].try_into().expect("lane"));
            for dx in 0..KX {
                let x: &[T; 4] = p[base + dx + j..][..4].try_into().expect("lane");
                for i in 0..OB {
                    for l in 0..4 {
                        part[i][dx][l] += gv[i][l] * x[l];
                    }
                }
            }
            j += 4;
        }
        for j in j..end {
            for dx in 0..KX {
                let x = p[base + dx + j];
                for i in 0..OB {
                    part[i][dx][0] += g[i * span + j] * x;
                }
            }
        }
        for i in 0..OB {
            for dx in 0..KX {
                let s = (part[i][dx][0] + part[i][dx][1]) + (part[i][dx][2] + part[i][dx][3]);
                acc[i * taps + t0 + dx] += s.as_f64();
            }
        }
        start = end;
    }
}
