//! The `.cxv` volume file format.
//!
//! Layout: magic "CXV1" | u32 LE header length H | H bytes of UTF-8 JSON |
//! raw little-endian payload, row-major with x fastest, complex as (re, im)
//! pairs. The header carries dims, dtype, kind, centered flag and a free-form
//! source tag.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CxdiError, Result};
use crate::volume::{ComplexVolume, DiffractionPattern, Grid3, RealVolume};

const MAGIC: &[u8; 4] = b"CXV1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CxvHeader {
    pub dims: [usize; 3],
    pub dtype: String,
    pub kind: String,
    pub centered: bool,
    pub source_tag: String,
}

/// What a `.cxv` file decodes to, depending on its `kind` field.
#[derive(Debug, Clone)]
pub enum VolumeFile {
    Complex(ComplexVolume),
    Pattern(DiffractionPattern),
    Real(RealVolume),
}

impl VolumeFile {
    pub fn into_complex(self) -> Result<ComplexVolume> {
        match self {
            VolumeFile::Complex(v) => Ok(v),
            _ => Err(CxdiError::Config(
                "expected a complex_density volume".into(),
            )),
        }
    }

    pub fn into_pattern(self) -> Result<DiffractionPattern> {
        match self {
            VolumeFile::Pattern(p) => Ok(p),
            _ => Err(CxdiError::Config(
                "expected a diffraction_amplitude volume".into(),
            )),
        }
    }
}

fn scalar_width(dtype: &str) -> Result<usize> {
    match dtype {
        "c64" => Ok(16),
        "c32" => Ok(8),
        "f64" => Ok(8),
        "f32" => Ok(4),
        other => Err(CxdiError::HeaderParse(format!("unknown dtype {other:?}"))),
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeFile> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    read_volume_bytes(&bytes)
}

pub fn read_volume_bytes(bytes: &[u8]) -> Result<VolumeFile> {
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(CxdiError::BadMagic);
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(CxdiError::HeaderParse("header runs past end of file".into()));
    }
    let header: CxvHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| CxdiError::HeaderParse(e.to_string()))?;
    let [nx, ny, nz] = header.dims;
    let grid = Grid3::new(nx, ny, nz)?;
    let n = grid.len();
    let width = scalar_width(&header.dtype)?;
    let payload = &bytes[8 + hlen..];
    if payload.len() < n * width {
        return Err(CxdiError::TruncatedPayload {
            expected: n * width,
            actual: payload.len(),
        });
    }
    let payload = &payload[..n * width];

    let read_f = |chunk: &[u8], double: bool| -> f64 {
        if double {
            f64::from_le_bytes(chunk.try_into().unwrap())
        } else {
            f32::from_le_bytes(chunk.try_into().unwrap()) as f64
        }
    };

    let complex = header.dtype.starts_with('c');
    let double = header.dtype.ends_with("64");
    let volume = if complex {
        let half = width / 2;
        let data: Vec<Complex64> = payload
            .chunks_exact(width)
            .map(|c| Complex64::new(read_f(&c[..half], double), read_f(&c[half..], double)))
            .collect();
        VolumeFile::Complex(ComplexVolume::from_data(grid, data)?)
    } else {
        let data: Vec<f64> = payload
            .chunks_exact(width)
            .map(|c| read_f(c, double))
            .collect();
        let rv = RealVolume::from_data(grid, data)?;
        if header.kind == "diffraction_amplitude" {
            VolumeFile::Pattern(DiffractionPattern {
                grid,
                amplitude: rv,
                centered: header.centered,
                source_tag: header.source_tag.clone(),
            })
        } else {
            VolumeFile::Real(rv)
        }
    };
    Ok(volume)
}

fn write_file(path: &Path, header: &CxvHeader, payload: &[u8]) -> Result<()> {
    let hjson = serde_json::to_vec(header)?;
    let mut f = File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(hjson.len() as u32).to_le_bytes())?;
    f.write_all(&hjson)?;
    f.write_all(payload)?;
    Ok(())
}

pub fn write_complex(v: &ComplexVolume, path: impl AsRef<Path>, source_tag: &str) -> Result<()> {
    let header = CxvHeader {
        dims: v.grid.dims(),
        dtype: "c64".into(),
        kind: "complex_density".into(),
        centered: true,
        source_tag: source_tag.into(),
    };
    let mut payload = Vec::with_capacity(v.data.len() * 16);
    for c in &v.data {
        payload.extend_from_slice(&c.re.to_le_bytes());
        payload.extend_from_slice(&c.im.to_le_bytes());
    }
    write_file(path.as_ref(), &header, &payload)
}

pub fn write_pattern(p: &DiffractionPattern, path: impl AsRef<Path>) -> Result<()> {
    let header = CxvHeader {
        dims: p.grid.dims(),
        dtype: "f64".into(),
        kind: "diffraction_amplitude".into(),
        centered: p.centered,
        source_tag: p.source_tag.clone(),
    };
    let mut payload = Vec::with_capacity(p.amplitude.data.len() * 8);
    for v in &p.amplitude.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path.as_ref(), &header, &payload)
}

pub fn write_real(v: &RealVolume, path: impl AsRef<Path>, source_tag: &str) -> Result<()> {
    let header = CxvHeader {
        dims: v.grid.dims(),
        dtype: "f64".into(),
        kind: "real".into(),
        centered: true,
        source_tag: source_tag.into(),
    };
    let mut payload = Vec::with_capacity(v.data.len() * 8);
    for x in &v.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_file(path.as_ref(), &header, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let grid = Grid3::cube(4).unwrap();
        let data: Vec<Complex64> = (0..grid.len())
            .map(|i| Complex64::new(i as f64 * 0.25, -(i as f64)))
            .collect();
        let v = ComplexVolume::from_data(grid, data).unwrap();
        let p1 = dir.path().join("a.cxv");
        let p2 = dir.path().join("b.cxv");
        write_complex(&v, &p1, "test").unwrap();
        let back = read_volume(&p1).unwrap().into_complex().unwrap();
        write_complex(&back, &p2, "test").unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_payload_detected() {
        let grid = Grid3::cube(4).unwrap();
        let header = CxvHeader {
            dims: grid.dims(),
            dtype: "c64".into(),
            kind: "complex_density".into(),
            centered: true,
            source_tag: String::new(),
        };
        let hjson = serde_json::to_vec(&header).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CXV1");
        bytes.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&hjson);
        // 63 complex values instead of 64
        bytes.extend_from_slice(&vec![0u8; 63 * 16]);
        assert!(matches!(
            read_volume_bytes(&bytes),
            Err(CxdiError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn zero_payload_decodes_to_zeros() {
        let grid = Grid3::cube(4).unwrap();
        let header = CxvHeader {
            dims: grid.dims(),
            dtype: "c64".into(),
            kind: "complex_density".into(),
            centered: true,
            source_tag: String::new(),
        };
        let hjson = serde_json::to_vec(&header).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CXV1");
        bytes.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&hjson);
        bytes.extend_from_slice(&vec![0u8; 64 * 16]);
        let v = read_volume_bytes(&bytes).unwrap().into_complex().unwrap();
        assert_eq!(v.data.len(), 64);
        assert!(v.data.iter().all(|c| c.re == 0.0 && c.im == 0.0));
    }

    #[test]
    fn bad_magic_detected() {
        assert!(matches!(
            read_volume_bytes(b"NOPE\0\0\0\0"),
            Err(CxdiError::BadMagic)
        ));
    }

    #[test]
    fn f32_payload_reads_back() {
        let grid = Grid3::cube(4).unwrap();
        let header = CxvHeader {
            dims: grid.dims(),
            dtype: "f32".into(),
            kind: "diffraction_amplitude".into(),
            centered: true,
            source_tag: "interop".into(),
        };
        let hjson = serde_json::to_vec(&header).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CXV1");
        bytes.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&hjson);
        for i in 0..64 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let p = read_volume_bytes(&bytes).unwrap().into_pattern().unwrap();
        assert_eq!(p.amplitude.data[5], 5.0);
        assert_eq!(p.source_tag, "interop");
    }
}
