//! Volume containers: the native NVOL format (read/write) and minimal
//! uncompressed NIfTI-1 (read only).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::volume::{Modality, Volume};

const NVOL_MAGIC: &[u8; 4] = b"NVOL";
const NVOL_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_nvol(v: &Volume) -> Result<Vec<u8>> {
    v.validate()?;
    let tag = v.modality.to_string();
    let mut out = Vec::with_capacity(64 + tag.len() + 4 * v.data.len());
    out.extend_from_slice(NVOL_MAGIC);
    out.extend_from_slice(&NVOL_VERSION.to_le_bytes());
    out.extend_from_slice(&(v.channels as u32).to_le_bytes());
    for d in v.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out.push(DTYPE_F32);
    out.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    out.extend_from_slice(tag.as_bytes());
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated: need {n} bytes at offset {}, have {}", self.pos, self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_nvol(bytes: &[u8], path: &Path) -> Result<Volume> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != NVOL_MAGIC {
        return Err(Error::format(path, "bad magic, expected NVOL"));
    }
    let version = r.u32()?;
    if version != NVOL_VERSION {
        return Err(Error::format(path, format!("unsupported NVOL version {version}")));
    }
    let channels = r.u32()? as usize;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
    let dtype = r.take(1)?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype code {dtype}")));
    }
    let tag_len = r.u32()? as usize;
    let tag = std::str::from_utf8(r.take(tag_len)?).map_err(|_| Error::format(path, "modality tag is not UTF-8"))?;
    let n = channels
        .checked_mul(dims.iter().product())
        .ok_or_else(|| Error::format(path, "dims overflow"))?;
    let payload = r.take(n * 4)?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Volume::new(channels, dims, spacing, data, tag.parse().expect("infallible"), path.display().to_string())
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Decodes a single-file NIfTI-1 image. Axes map as x -> W, y -> H, z -> D,
/// and a 4th dimension becomes channels.
pub fn decode_nifti(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < 352 {
        return Err(Error::format(path, "truncated NIfTI header"));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) == 348;
    let be = i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")) == 348;
    if !le && !be {
        return Err(Error::format(path, "bad magic: sizeof_hdr is not 348"));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format(path, "bad magic: only single-file NIfTI-1 (n+1) is supported"));
    }
    let i16_at = |o: usize| {
        let b: [u8; 2] = bytes[o..o + 2].try_into().expect("2 bytes");
        if le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().expect("4 bytes");
        if le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let ndim = i16_at(40);
    if !(1..=4).contains(&ndim) {
        return Err(Error::format(path, format!("unsupported dim[0] = {ndim}")));
    }
    let dim = |i: usize| -> Result<usize> {
        if i as i16 > ndim {
            return Ok(1);
        }
        let d = i16_at(40 + 2 * i);
        if d < 1 {
            return Err(Error::format(path, format!("dim[{i}] = {d}")));
        }
        Ok(d as usize)
    };
    let (nx, ny, nz, nt) = (dim(1)?, dim(2)?, dim(3)?, dim(4)?);
    let datatype = i16_at(70);
    let width = match datatype {
        2 => 1,  // uint8
        4 => 2,  // int16
        16 => 4, // float32
        other => return Err(Error::format(path, format!("unsupported NIfTI datatype {other}"))),
    };
    let pix = |i: usize| (f32_at(76 + 4 * i) as f64).abs();
    let spacing = [pix(3), pix(2), pix(1)].map(|s| if s > 0.0 { s } else { 1.0 });
    let offset = f32_at(108);
    if !(offset >= 352.0) {
        return Err(Error::format(path, format!("vox_offset {offset} < 352")));
    }
    let offset = offset as usize;
    let (slope, inter) = (f32_at(112), f32_at(116));
    let n = nx * ny * nz * nt;
    let end = offset + n * width;
    if bytes.len() < end {
        return Err(Error::format(path, format!("truncated payload: need {end} bytes, have {}", bytes.len())));
    }
    let raw = &bytes[offset..end];
    let mut data: Vec<f32> = match datatype {
        2 => raw.iter().map(|&b| b as f32).collect(),
        4 => raw
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }) as f32
            })
            .collect(),
        _ => raw
            .chunks_exact(4)
            .map(|c| {
                let b: [u8; 4] = c.try_into().expect("4 bytes");
                if le {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }
            })
            .collect(),
    };
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    // NIfTI is x-fastest, which is already W-fastest in D/H/W order.
    Volume::new(
        nt,
        [nz, ny, nx],
        spacing,
        data,
        Modality::Other("unknown".into()),
        path.display().to_string(),
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let bytes = encode_nvol(v)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads NVOL or NIfTI-1, chosen by content.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(NVOL_MAGIC) {
        decode_nvol(&bytes, path)
    } else if bytes.len() >= 4 && (bytes[..4] == 348i32.to_le_bytes() || bytes[..4] == 348i32.to_be_bytes()) {
        decode_nifti(&bytes, path)
    } else {
        Err(Error::format(path, "bad magic: neither NVOL nor NIfTI-1"))
    }
}

/// A minimal little-endian NIfTI-1 file (header plus payload), for tests and fixtures.
pub fn nifti_fixture(dims: [i16; 3], pixdim: [f32; 3], datatype: i16, payload: &[u8]) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim = [3i16, dims[0], dims[1], dims[2], 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    let bitpix: i16 = match datatype {
        2 => 8,
        4 => 16,
        _ => 32,
    };
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pix = [1.0f32, pixdim[0], pixdim[1], pixdim[2], 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pix.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352.0f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(payload);
    h
}
