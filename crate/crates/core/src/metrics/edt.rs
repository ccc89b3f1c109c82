//! Exact Euclidean distance transform (separable lower-envelope algorithm).

/// Squared distance in mm² from every voxel to the nearest `true` voxel of
/// `sites`; `f64::INFINITY` everywhere when there are no sites.
pub fn squared_edt(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut f: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let [d, h, w] = dims;
    let strides = [h * w, w, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        // Every line along `axis` starts at an index whose `axis` coordinate is 0.
        let starts: Vec<usize> = (0..d * h * w)
            .filter(|&i| (i / stride) % n == 0)
            .collect();
        for s in starts {
            line.clear();
            line.extend((0..n).map(|k| f[s + k * stride]));
            envelope(&line, spacing[axis], &mut out);
            for (k, &v) in out.iter().enumerate() {
                f[s + k * stride] = v;
            }
        }
    }
    f
}

/// 1-D transform `out[q] = min_p (spacing·(q − p))² + f[p]`.
fn envelope(f: &[f64], spacing: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    let sites: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if sites.is_empty() {
        out.resize(n, f64::INFINITY);
        return;
    }
    let pos = |p: usize| p as f64 * spacing;
    // Intersection abscissa of the parabolas rooted at p and q (p < q).
    let cross = |p: usize, q: usize| {
        ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)))
    };
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        loop {
            match hull.last() {
                Some(&p) => {
                    let x = cross(p, q);
                    if x <= *bounds.last().expect("bound per hull entry") {
                        hull.pop();
                        bounds.pop();
                    } else {
                        hull.push(q);
                        bounds.push(x);
                        break;
                    }
                }
                None => {
                    hull.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
            }
        }
    }
    let mut k = 0;
    for q in 0..n {
        let x = pos(q);
        while k + 1 < hull.len() && bounds[k + 1] < x {
            k += 1;
        }
        let p = hull[k];
        let dx = x - pos(p);
        out.push(dx * dx + f[p]);
    }
}
