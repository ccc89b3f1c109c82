//! Brute-force reference implementations, written directly from the
//! definitions and sharing no code with the library.

use std::collections::HashSet;

use rand::Rng;

/// Dense 5D array in batch, channel, z, y, x order.
#[derive(Clone, Debug)]
pub struct Arr {
    pub dims: [usize; 5],
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(dims: [usize; 5]) -> Self {
        Arr {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }
    pub fn idx(&self, b: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        let [_, cn, d, h, w] = self.dims;
        (((b * cn + c) * d + z) * h + y) * w + x
    }
    pub fn get(&self, b: usize, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(b, c, z, y, x)]
    }
}

pub struct Geometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

/// `out[b,o,p] = bias[o] + sum_{c,k} in[b,c,p*s - pad + k] * w[o,c,k]`, zero outside.
pub fn conv(input: &Arr, weight: &Arr, bias: Option<&[f64]>, g: &Geometry) -> Arr {
    let [bn, cin, d, h, w] = input.dims;
    let cout = weight.dims[0];
    let size = |a: usize, n: usize| (n + 2 * g.padding[a] - g.kernel[a]) / g.stride[a] + 1;
    let (od, oh, ow) = (size(0, d), size(1, h), size(2, w));
    let mut out = Arr::zeros([bn, cout, od, oh, ow]);
    for b in 0..bn {
        for o in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias.map_or(0.0, |bs| bs[o]);
                        for c in 0..cin {
                            for kz in 0..g.kernel[0] {
                                for ky in 0..g.kernel[1] {
                                    for kx in 0..g.kernel[2] {
                                        let iz = (z * g.stride[0] + kz) as isize - g.padding[0] as isize;
                                        let iy = (y * g.stride[1] + ky) as isize - g.padding[1] as isize;
                                        let ix = (x * g.stride[2] + kx) as isize - g.padding[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= w {
                                            continue;
                                        }
                                        acc += input.get(b, c, iz, iy, ix) * weight.get(o, c, kz, ky, kx);
                                    }
                                }
                            }
                        }
                        let i = out.idx(b, o, z, y, x);
                        out.data[i] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution; `weight` is `(in, out, k...)`.
pub fn conv_transpose(input: &Arr, weight: &Arr, bias: Option<&[f64]>, g: &Geometry) -> Arr {
    let [bn, cin, d, h, w] = input.dims;
    let cout = weight.dims[1];
    let size = |a: usize, n: usize| (n - 1) * g.stride[a] + g.kernel[a] - 2 * g.padding[a];
    let (od, oh, ow) = (size(0, d), size(1, h), size(2, w));
    let mut out = Arr::zeros([bn, cout, od, oh, ow]);
    for b in 0..bn {
        for o in 0..cout {
            let bv = bias.map_or(0.0, |bs| bs[o]);
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let i = out.idx(b, o, z, y, x);
                        out.data[i] = bv;
                    }
                }
            }
        }
        for c in 0..cin {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let v = input.get(b, c, z, y, x);
                        for o in 0..cout {
                            for kz in 0..g.kernel[0] {
                                for ky in 0..g.kernel[1] {
                                    for kx in 0..g.kernel[2] {
                                        let oz = (z * g.stride[0] + kz) as isize - g.padding[0] as isize;
                                        let oy = (y * g.stride[1] + ky) as isize - g.padding[1] as isize;
                                        let ox = (x * g.stride[2] + kx) as isize - g.padding[2] as isize;
                                        if oz < 0 || oy < 0 || ox < 0 {
                                            continue;
                                        }
                                        let (oz, oy, ox) = (oz as usize, oy as usize, ox as usize);
                                        if oz >= od || oy >= oh || ox >= ow {
                                            continue;
                                        }
                                        let i = out.idx(b, o, oz, oy, ox);
                                        out.data[i] += v * weight.get(c, o, kz, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Instance norm over the voxels where `keep` is true; other outputs are 0.
/// `keep[b][voxel]`; `None` keeps everything.
pub fn instance_norm(input: &Arr, gain: &[f64], shift: &[f64], eps: f64, keep: Option<&[Vec<bool>]>) -> Arr {
    let [bn, cn, d, h, w] = input.dims;
    let n = d * h * w;
    let mut out = Arr::zeros(input.dims);
    for b in 0..bn {
        let kept = |i: usize| keep.map_or(true, |k| k[b][i]);
        for c in 0..cn {
            let base = (b * cn + c) * n;
            let vals: Vec<f64> = (0..n).filter(|&i| kept(i)).map(|i| input.data[base + i]).collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for i in 0..n {
                if kept(i) {
                    out.data[base + i] = gain[c] * (input.data[base + i] - mean) / (var + eps).sqrt() + shift[c];
                }
            }
        }
    }
    out
}

/// Zeroes masked voxels (`masked[b][voxel]`) of every channel.
pub fn zero_masked(a: &Arr, masked: &[Vec<bool>]) -> Arr {
    let [bn, cn, d, h, w] = a.dims;
    let n = d * h * w;
    let mut out = a.clone();
    for b in 0..bn {
        for c in 0..cn {
            for i in 0..n {
                if masked[b][i] {
                    out.data[(b * cn + c) * n + i] = 0.0;
                }
            }
        }
    }
    out
}

pub fn densify(a: &Arr, masked: &[Vec<bool>], token: &[f64]) -> Arr {
    let [bn, cn, d, h, w] = a.dims;
    let n = d * h * w;
    let mut out = a.clone();
    for b in 0..bn {
        for c in 0..cn {
            for i in 0..n {
                if masked[b][i] {
                    out.data[(b * cn + c) * n + i] = token[c];
                }
            }
        }
    }
    out
}

pub fn masked_l2(pred: &Arr, target: &Arr, masked: &[Vec<bool>]) -> f64 {
    let [bn, cn, d, h, w] = pred.dims;
    let n = d * h * w;
    let (mut sum, mut count) = (0.0, 0usize);
    for b in 0..bn {
        for c in 0..cn {
            for i in 0..n {
                if masked[b][i] {
                    let k = (b * cn + c) * n + i;
                    sum += (pred.data[k] - target.data[k]).powi(2);
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

/// `0.5 * (1 - mean_fg softDice + mean CE)` with smoothing `smooth`.
pub fn dice_ce(logits: &Arr, labels: &[u8], smooth: f64) -> f64 {
    let [bn, cn, d, h, w] = logits.dims;
    let n = d * h * w;
    let mut ce = 0.0;
    let mut inter = vec![0.0; cn];
    let mut denom = vec![0.0; cn];
    for b in 0..bn {
        for i in 0..n {
            let z: Vec<f64> = (0..cn).map(|c| logits.data[(b * cn + c) * n + i]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            let label = labels[b * n + i] as usize;
            ce += lse - z[label];
            for c in 0..cn {
                let p = (z[c] - lse).exp();
                let y = if c == label { 1.0 } else { 0.0 };
                inter[c] += p * y;
                denom[c] += p + y;
            }
        }
    }
    ce /= (bn * n) as f64;
    let dice: f64 = (1..cn).map(|c| (2.0 * inter[c] + smooth) / (denom[c] + smooth)).sum::<f64>() / (cn - 1) as f64;
    0.5 * (1.0 - dice + ce)
}

// ---- metrics ----

pub fn dice(p: &[bool], g: &[bool]) -> f64 {
    let a: HashSet<usize> = (0..p.len()).filter(|&i| p[i]).collect();
    let b: HashSet<usize> = (0..g.len()).filter(|&i| g[i]).collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// Foreground voxels with a 6-neighbour outside the mask or outside the grid.
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let [d, h, w] = dims;
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && mask[(z as usize * h + y as usize) * w + x as usize]
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[(z * h + y) * w + x] {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let nb = [
                    (zi - 1, yi, xi),
                    (zi + 1, yi, xi),
                    (zi, yi - 1, xi),
                    (zi, yi + 1, xi),
                    (zi, yi, xi - 1),
                    (zi, yi, xi + 1),
                ];
                if nb.iter().any(|&(a, b, c)| !inside(a, b, c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Surface Dice at tolerance `tau` by comparing every pair of surface voxels.
pub fn nsd(p: &[bool], g: &[bool], dims: [usize; 3], spacing: [f64; 3], tau: f64) -> f64 {
    let (sp, sg) = (surface(p, dims), surface(g, dims));
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let dist = |a: [usize; 3], b: [usize; 3]| {
        (0..3)
            .map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let close = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .filter(|&&a| to.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min) <= tau)
            .count()
    };
    (close(&sp, &sg) + close(&sg, &sp)) as f64 / (sp.len() + sg.len()) as f64
}

/// Rank 1 for the largest value; tied values share the mean of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let greater = values.iter().filter(|&&u| u > v).count() as f64;
            let equal = values.iter().filter(|&&u| u == v).count() as f64;
            greater + (equal + 1.0) / 2.0
        })
        .collect()
}

/// `scores[dataset][method][case]`; returns aggregated ranks per replicate.
pub fn bootstrap<R: Rng>(scores: &[Vec<Vec<f64>>], n_boot: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let methods = scores[0].len();
    let mut out = Vec::new();
    for _ in 0..n_boot {
        let mut total = vec![0.0; methods];
        for ds in scores {
            let n = ds[0].len();
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let means: Vec<f64> = ds
                .iter()
                .map(|cases| picks.iter().map(|&i| cases[i]).sum::<f64>() / n as f64)
                .collect();
            for (t, r) in total.iter_mut().zip(ranks(&means)) {
                *t += r;
            }
        }
        out.push(total.iter().map(|t| t / scores.len() as f64).collect());
    }
    out
}
