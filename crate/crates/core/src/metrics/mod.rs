//! Segmentation metrics and bootstrapped rank aggregation.

mod edt;
mod plot;
mod rank;
mod table;

use crate::error::{Error, Result};

pub use edt::squared_edt;
pub use plot::{line_plot_svg, rank_plot_svg, Series};
pub use rank::{average_ranks, bootstrap_ranks, DatasetScores, RankSummary, ScoreTable};
pub use table::{format_rank_summary, format_scores, parse_scores, ScoreRow};

/// Default NSD tolerance in mm.
pub const DEFAULT_TOLERANCE_MM: f64 = 1.0;

/// Class ids on a voxel grid with physical spacing (z, y, x order).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRaster {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub labels: Vec<u8>,
}

impl LabelRaster {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(Error::shape("LabelRaster", n, labels.len()));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(LabelRaster { dims, spacing, labels })
    }

    pub fn class_mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= classes) {
            Some(l) => Err(Error::Invalid(format!("label {l} out of range for {classes} classes"))),
            None => Ok(()),
        }
    }
}

fn check_pair(pred: &LabelRaster, gt: &LabelRaster, op: &'static str) -> Result<()> {
    if pred.dims != gt.dims {
        return Err(Error::shape(op, format!("{:?}", gt.dims), format!("{:?}", pred.dims)));
    }
    Ok(())
}

pub fn dice_masks(p: &[bool], g: &[bool]) -> f64 {
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.iter().zip(g) {
        np += a as usize;
        ng += b as usize;
        inter += (a && b) as usize;
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}

/// Dice similarity of class `class`; 1 when both are empty.
pub fn dsc(pred: &LabelRaster, gt: &LabelRaster, class: u8) -> Result<f64> {
    check_pair(pred, gt, "dsc")?;
    Ok(dice_masks(&pred.class_mask(class), &gt.class_mask(class)))
}

/// Foreground voxels with at least one background face neighbour; outside
/// the volume counts as background.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                out[(z * h + y) * w + x] = edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
            }
        }
    }
    out
}

/// Normalized surface distance of class `class` at tolerance `tau` mm.
pub fn nsd(pred: &LabelRaster, gt: &LabelRaster, class: u8, tau: f64) -> Result<f64> {
    check_pair(pred, gt, "nsd")?;
    if pred.spacing != gt.spacing {
        return Err(Error::Invalid(format!(
            "nsd: spacing mismatch {:?} vs {:?}",
            pred.spacing, gt.spacing
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("nsd tolerance must be > 0, got {tau}")));
    }
    Ok(nsd_masks(&pred.class_mask(class), &gt.class_mask(class), pred.dims, pred.spacing, tau))
}

pub fn nsd_masks(p: &[bool], g: &[bool], dims: [usize; 3], spacing: [f64; 3], tau: f64) -> f64 {
    let bp = boundary(p, dims);
    let bg = boundary(g, dims);
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    match (np, ng) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let tau2 = tau * tau;
    let dg = squared_edt(&bg, dims, spacing);
    let dp = squared_edt(&bp, dims, spacing);
    let hits_p = bp.iter().zip(&dg).filter(|(&b, &d)| b && d <= tau2).count();
    let hits_g = bg.iter().zip(&dp).filter(|(&b, &d)| b && d <= tau2).count();
    (hits_p + hits_g) as f64 / (np + ng) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(dims: [usize; 3], lo: [usize; 3], size: usize) -> LabelRaster {
        let mut l = vec![0u8; dims.iter().product()];
        for z in lo[0]..lo[0] + size {
            for y in lo[1]..lo[1] + size {
                for x in lo[2]..lo[2] + size {
                    l[(z * dims[1] + y) * dims[2] + x] = 1;
                }
            }
        }
        LabelRaster::new(dims, [1.0; 3], l).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = cube([8; 3], [1; 3], 3);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dsc(&a, &cube([8; 3], [5; 3], 2), 1).unwrap(), 0.0);
        let empty = LabelRaster::new([8; 3], [1.0; 3], vec![0; 512]).unwrap();
        assert_eq!(dsc(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dsc(&empty, &a, 1).unwrap(), 0.0);
        let mut p = vec![0u8; 8];
        let mut g = vec![0u8; 8];
        p[..4].fill(1);
        g[2..6].fill(1);
        let p = LabelRaster::new([1, 1, 8], [1.0; 3], p).unwrap();
        let g = LabelRaster::new([1, 1, 8], [1.0; 3], g).unwrap();
        assert_eq!(dsc(&p, &g, 1).unwrap(), 0.5);
        assert!(dsc(&p, &a, 1).is_err());
    }

    #[test]
    fn boundary_of_solid_cube_is_its_shell() {
        let c = cube([6; 3], [1; 3], 4);
        let b = boundary(&c.class_mask(1), c.dims);
        assert_eq!(b.iter().filter(|&&v| v).count(), 64 - 8);
        // Touching the volume border makes voxels boundary.
        let full = vec![true; 27];
        assert_eq!(boundary(&full, [3; 3]).iter().filter(|&&v| v).count(), 26);
    }

    #[test]
    fn nsd_examples() {
        let a = cube([10; 3], [2; 3], 4);
        assert_eq!(nsd(&a, &a, 1, 1.0).unwrap(), 1.0);
        let far = cube([10; 3], [7; 3], 2);
        let small = cube([10; 3], [0; 3], 2);
        assert_eq!(nsd(&small, &far, 1, 1.0).unwrap(), 0.0);
        let shifted = cube([10; 3], [3, 2, 2], 4);
        let n1 = nsd(&a, &shifted, 1, 1.0).unwrap();
        let n2 = nsd(&a, &shifted, 1, 2.0).unwrap();
        assert!(n1 > 0.5 && n1 <= n2 && n2 == 1.0, "{n1} {n2}");
        assert!(nsd(&a, &a, 1, 0.0).is_err());
    }
}
