//! Volume I/O, curation, preprocessing and synthetic datasets.

mod filter;
mod io;
pub mod synth;
mod transform;
mod volume;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use filter::{
    discard_reason, filter_dataset, format_record, parse_manifest, DiscardReason, FilterOutcome, ManifestRecord,
    MAX_SPACING_MM, MIN_FILE_BYTES, MIN_FOV_MM,
};
pub use io::{decode_nifti, decode_nvol, encode_nvol, nifti_fixture, read_volume, write_volume};
pub use transform::{
    augment_labels, augment_patch, center_offset, crop_padded, max_offset, patch_at, random_offset,
    resample_trilinear, sample_patch, zscore, AugmentConfig, AugmentParams,
};
pub use volume::{Modality, Volume};

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// An image with a per-voxel class raster of the same spatial shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SegCase {
    pub image: Volume,
    pub labels: Vec<u8>,
}

impl SegCase {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.image.voxels() {
            return Err(Error::shape("SegCase labels", self.image.voxels(), self.labels.len()));
        }
        Ok(())
    }
}

pub fn labels_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image.with_file_name(format!("{stem}_seg.nvol"))
}

pub fn labels_from_volume(v: &Volume) -> Result<Vec<u8>> {
    v.data
        .iter()
        .map(|&x| {
            if x >= 0.0 && x <= 255.0 && x.fract() == 0.0 {
                Ok(x as u8)
            } else {
                Err(Error::Invalid(format!("{}: label value {x} is not a class id", v.source)))
            }
        })
        .collect()
}

pub fn labels_to_volume(labels: &[u8], like: &Volume) -> Result<Volume> {
    Volume::new(
        1,
        like.dims,
        like.spacing,
        labels.iter().map(|&l| l as f32).collect(),
        Modality::Other("labels".into()),
        format!("{}_seg", like.source),
    )
}

/// Nearest-neighbour label resampling on the same grid rule as [`resample_trilinear`].
pub fn resample_labels(labels: &[u8], v: &Volume, target: [f64; 3]) -> Result<(Vec<u8>, [usize; 3])> {
    let dims = resample_trilinear(&v.select_channel(0), target)?.dims;
    let ratio = [0, 1, 2].map(|a| target[a] / v.spacing[a]);
    let idx = |a: usize, j: usize| {
        (((j as f64 + 0.5) * ratio[a] - 0.5).round().max(0.0) as usize).min(v.dims[a] - 1)
    };
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                out.push(labels[(idx(0, z) * v.dims[1] + idx(1, y)) * v.dims[2] + idx(2, x)]);
            }
        }
    }
    Ok((out, dims))
}

/// Optional resampling to `target` spacing, then z-scoring.
pub fn preprocess(v: &Volume, target: Option<[f64; 3]>) -> Result<Volume> {
    match target {
        Some(t) if t != v.spacing => zscore(&resample_trilinear(v, t)?),
        _ => zscore(v),
    }
}

pub fn preprocess_case(case: &SegCase, target: Option<[f64; 3]>) -> Result<SegCase> {
    case.validate()?;
    match target {
        Some(t) if t != case.image.spacing => {
            let (labels, _) = resample_labels(&case.labels, &case.image, t)?;
            Ok(SegCase {
                image: zscore(&resample_trilinear(&case.image, t)?)?,
                labels,
            })
        }
        _ => Ok(SegCase {
            image: zscore(&case.image)?,
            labels: case.labels.clone(),
        }),
    }
}

/// Writes `<source>.nvol`, `<source>_seg.nvol` and a manifest into `dir`.
pub fn write_seg_dataset(dir: &Path, cases: &[SegCase]) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(cases.len());
    for case in cases {
        case.validate()?;
        let path = dir.join(format!("{}.nvol", case.image.source));
        write_volume(&case.image, &path)?;
        write_volume(&labels_to_volume(&case.labels, &case.image)?, &labels_path(&path))?;
        let size = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        records.push(ManifestRecord {
            path: PathBuf::from(format!("{}.nvol", case.image.source)),
            dims: case.image.dims,
            spacing: case.image.spacing,
            file_size: size,
            modality: case.image.modality.clone(),
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::from("# path\tdims\tspacing\tbytes\tmodality\n");
    for r in records {
        text.push_str(&format_record(r));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads the images listed in a manifest (paths relative to its directory).
pub fn read_images(manifest: &Path) -> Result<Vec<Volume>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .map(|r| read_volume(&resolve(base, &r.path)))
        .collect()
}

/// Reads images and their `_seg` label rasters listed in `dir/manifest.tsv`.
pub fn read_seg_dataset(dir: &Path) -> Result<Vec<SegCase>> {
    let manifest = dir.join(MANIFEST_FILE);
    read_manifest(&manifest)?
        .iter()
        .map(|r| {
            let path = resolve(dir, &r.path);
            let image = read_volume(&path)?;
            let lv = read_volume(&labels_path(&path))?;
            if lv.dims != image.dims {
                return Err(Error::shape("label raster", format!("{:?}", image.dims), format!("{:?}", lv.dims)));
            }
            Ok(SegCase {
                labels: labels_from_volume(&lv)?,
                image,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seg_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synth::PhantomConfig {
            dims: [8, 8, 8],
            ..Default::default()
        };
        let cases = synth::synth_dataset(&cfg, 2, 1, "case");
        write_seg_dataset(dir.path(), &cases).unwrap();
        let back = read_seg_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].labels, cases[1].labels);
        assert_eq!(back[1].image.data, cases[1].image.data);
        let imgs = read_images(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(imgs.len(), 2);
    }

    #[test]
    fn label_resampling_matches_grid() {
        let v = Volume::new(1, [2, 2, 2], [2.0; 3], vec![0.0; 8], Modality::T1, "x").unwrap();
        let labels: Vec<u8> = (0..8).collect();
        let (l, dims) = resample_labels(&labels, &v, [1.0; 3]).unwrap();
        assert_eq!(dims, [4, 4, 4]);
        assert_eq!(l[0], 0);
        assert_eq!(l[63], 7);
    }
}
