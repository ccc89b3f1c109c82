//! Deterministic synthetic head-like phantoms with blob labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::volume::{Modality, Volume};
use super::SegCase;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    /// Head semi-axes as a fraction of the half-extent, drawn uniformly.
    pub head_radius: [f64; 2],
    pub texture_amplitude: f64,
    pub blob_count: [usize; 2],
    pub blob_radius: [f64; 2],
    pub blob_intensity: f64,
    pub noise_std: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [32; 3],
            head_radius: [0.6, 0.85],
            texture_amplitude: 0.15,
            blob_count: [1, 3],
            blob_radius: [2.5, 4.5],
            blob_intensity: 0.8,
            noise_std: 0.05,
        }
    }
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// One phantom: a soft ellipsoid with a darker core, low-frequency texture,
/// bright spherical blobs (the foreground class) and Gaussian noise.
pub fn phantom<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R, source: &str) -> SegCase {
    let dims = cfg.dims;
    let half = dims.map(|d| d as f64 / 2.0);
    let centre = [0, 1, 2].map(|a| half[a] - 0.5 + rng.random_range(-0.1..=0.1) * half[a]);
    let radii = [0, 1, 2].map(|a| rng.random_range(cfg.head_radius[0]..=cfg.head_radius[1]) * half[a]);
    let core_scale = rng.random_range(0.3..0.45);

    // Sum of three random plane waves with wavelength >= ~8 voxels.
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = [(); 3].map(|_| rng.random_range(-0.7..0.7));
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();

    let n_blobs = rng.random_range(cfg.blob_count[0]..=cfg.blob_count[1]);
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let r = rng.random_range(cfg.blob_radius[0]..=cfg.blob_radius[1]);
        // Place inside the head, away from its edge.
        let dir = [(); 3].map(|_| rng.random_range(-1.0..1.0f64));
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-9);
        let reach = rng.random_range(0.2..0.6);
        let c = [0, 1, 2].map(|a| centre[a] + dir[a] / norm * reach * (radii[a] - r).max(0.0));
        blobs.push((c, r));
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("valid std");
    let n = dims.iter().product();
    let mut image = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let rho = (0..3).map(|a| ((p[a] - centre[a]) / radii[a]).powi(2)).sum::<f64>().sqrt();
                let head = logistic((1.0 - rho) * 12.0);
                let core = logistic((core_scale - rho) * 20.0);
                let texture: f64 = waves
                    .iter()
                    .map(|(k, phase)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
                    .sum::<f64>()
                    * cfg.texture_amplitude;
                let mut v = head * (1.0 + texture) - 0.4 * core;
                let mut label = 0u8;
                for (c, r) in &blobs {
                    let d = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>().sqrt();
                    if d <= *r {
                        label = 1;
                    }
                    v += cfg.blob_intensity * logistic((r - d) * 4.0);
                }
                if cfg.noise_std > 0.0 {
                    v += noise.sample(rng);
                }
                image.push(v as f32);
                labels.push(label);
            }
        }
    }
    SegCase {
        image: Volume::new(1, dims, [1.0; 3], image, Modality::T1, source).expect("finite phantom"),
        labels,
    }
}

/// `n` phantoms; case `i` depends only on `(seed, i)`.
pub fn synth_dataset(cfg: &PhantomConfig, n: usize, seed: u64, prefix: &str) -> Vec<SegCase> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            phantom(cfg, &mut rng, &format!("{prefix}{i:03}"))
        })
        .collect()
}
