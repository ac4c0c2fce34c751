//! Bit-exact binary containers for volumes and projection stacks, plus the
//! dense-matrix dump (testing), raw-stack import, and PGM slice export.
//!
//! Volume file: magic `CBVL`, u32 version, u32×3 dims (nx, ny, nz), f64
//! voxel_size, u32 element type, payload. Projection file: magic `CBPR`,
//! u32 version, u32 n_views, u32×2 detector dims (rows, cols), f64 pixel
//! pitch, u32 element type, payload. Payload is little-endian in the in-memory
//! linearization order (x fastest for volumes, column fastest for
//! projections). Element type 0 is float32, 1 is float64; float64 round-trips
//! the in-memory data bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::projector::DenseMatrix;
use crate::types::{ProjectionStack, Volume3D};

const VOLUME_MAGIC: &[u8; 4] = b"CBVL";
const PROJ_MAGIC: &[u8; 4] = b"CBPR";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    F32,
    F64,
}

impl ElementType {
    fn code(self) -> u32 {
        match self {
            ElementType::F32 => 0,
            ElementType::F64 => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(ElementType::F32),
            1 => Ok(ElementType::F64),
            other => Err(Error::Format(format!("unknown element type code {other}"))),
        }
    }

    fn byte_width(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format(format!("truncated header at {what}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Format(format!("truncated header at {what}")))?;
    Ok(f64::from_le_bytes(b))
}

fn write_payload(w: &mut impl Write, data: &[f64], elem: ElementType) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * elem.byte_width());
    match elem {
        ElementType::F32 => {
            for &v in data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        ElementType::F64 => {
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_payload(r: &mut impl Read, n: usize, elem: ElementType) -> Result<Vec<f64>> {
    let expect = n * elem.byte_width();
    let mut buf = Vec::with_capacity(expect);
    r.take(expect as u64 + 1).read_to_end(&mut buf)?;
    if buf.len() != expect {
        return Err(Error::Format(format!(
            "payload truncated or oversized: expected {expect} bytes, got {}{}",
            buf.len().min(expect + 1),
            if buf.len() > expect { "+" } else { "" }
        )));
    }
    let data = match elem {
        ElementType::F32 => buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        ElementType::F64 => {
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        }
    };
    Ok(data)
}

pub fn write_volume(path: &Path, vol: &Volume3D, elem: ElementType) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VOLUME_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, vol.dims.0 as u32)?;
    write_u32(&mut w, vol.dims.1 as u32)?;
    write_u32(&mut w, vol.dims.2 as u32)?;
    write_f64(&mut w, vol.voxel_size)?;
    write_u32(&mut w, elem.code())?;
    write_payload(&mut w, &vol.data, elem)?;
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file shorter than magic".into()))?;
    if &magic != VOLUME_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, want CBVL")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported volume version {version}")));
    }
    let nx = read_u32(&mut r, "nx")? as usize;
    let ny = read_u32(&mut r, "ny")? as usize;
    let nz = read_u32(&mut r, "nz")? as usize;
    let voxel_size = read_f64(&mut r, "voxel_size")?;
    let elem = ElementType::from_code(read_u32(&mut r, "element type")?)?;
    let data = read_payload(&mut r, nx * ny * nz, elem)?;
    Volume3D::new((nx, ny, nz), voxel_size, data)
}

pub fn write_projections(
    path: &Path,
    proj: &ProjectionStack,
    pixel_pitch: f64,
    elem: ElementType,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PROJ_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, proj.n_views as u32)?;
    write_u32(&mut w, proj.det_rows as u32)?;
    write_u32(&mut w, proj.det_cols as u32)?;
    write_f64(&mut w, pixel_pitch)?;
    write_u32(&mut w, elem.code())?;
    write_payload(&mut w, &proj.data, elem)?;
    w.flush()?;
    Ok(())
}

/// Returns the stack and the pixel pitch recorded in the header.
pub fn read_projections(path: &Path) -> Result<(ProjectionStack, f64)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file shorter than magic".into()))?;
    if &magic != PROJ_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, want CBPR")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported projection version {version}")));
    }
    let n_views = read_u32(&mut r, "n_views")? as usize;
    let det_rows = read_u32(&mut r, "det_rows")? as usize;
    let det_cols = read_u32(&mut r, "det_cols")? as usize;
    let pitch = read_f64(&mut r, "pixel_pitch")?;
    let elem = ElementType::from_code(read_u32(&mut r, "element type")?)?;
    let data = read_payload(&mut r, n_views * det_rows * det_cols, elem)?;
    Ok((ProjectionStack::new(n_views, det_rows, det_cols, data)?, pitch))
}

/// Dense system matrix dump (testing only): three little-endian u64 integers
/// (rows, cols, 0) followed by row-major float64 data.
pub fn write_dense_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(m.rows as u64).to_le_bytes())?;
    w.write_all(&(m.cols as u64).to_le_bytes())?;
    w.write_all(&0u64.to_le_bytes())?;
    for &v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dense_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut b = [0u8; 8];
    let mut next = |what: &str| -> Result<u64> {
        r.read_exact(&mut b).map_err(|_| Error::Format(format!("truncated at {what}")))?;
        Ok(u64::from_le_bytes(b))
    };
    let rows = next("rows")? as usize;
    let cols = next("cols")? as usize;
    let reserved = next("reserved")?;
    if reserved != 0 {
        return Err(Error::Format(format!("reserved header word is {reserved}, want 0")));
    }
    let data = read_payload(&mut r, rows * cols, ElementType::F64)?;
    Ok(DenseMatrix { rows, cols, data })
}

/// Import a headerless row-major float32 raw stack (Walnut-style export);
/// geometry metadata must be supplied separately.
pub fn import_raw_f32_volume(
    path: &Path,
    dims: (usize, usize, usize),
    voxel_size: f64,
) -> Result<Volume3D> {
    let mut r = BufReader::new(File::open(path)?);
    let data = read_payload(&mut r, dims.0 * dims.1 * dims.2, ElementType::F32)?;
    Volume3D::new(dims, voxel_size, data)
}

/// 8-bit binary PGM of one axial slice, windowed to `[window.0, window.1]`.
pub fn write_pgm_slice(path: &Path, vol: &Volume3D, k: usize, window: (f64, f64)) -> Result<()> {
    let (nx, ny, _) = vol.dims;
    if k >= vol.dims.2 {
        return Err(Error::InvalidSpec(format!("slice {k} out of range {}", vol.dims.2)));
    }
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(Error::InvalidSpec(format!("window must satisfy hi > lo, got {window:?}")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{nx} {ny}\n255\n")?;
    let bytes: Vec<u8> = vol
        .slice(k)
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        std::mem::forget(dir); // keep alive for the test process
        path
    }

    #[test]
    fn f64_volume_round_trip_is_bit_exact() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let data: Vec<f64> =
            (0..3 * 4 * 5).map(|_| rng.gen_range(-1.0..1.0) * 1e-3).collect();
        let vol = Volume3D::new((3, 4, 5), 0.125, data).unwrap();
        let path = tmp("v.cbvl");
        write_volume(&path, &vol, ElementType::F64).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(vol, back);
    }

    #[test]
    fn f32_round_trip_is_idempotent() {
        let data: Vec<f64> = vec![0.5, -1.25, 3.75, 0.0, -0.0, 1e-8];
        let vol = Volume3D::new((3, 2, 1), 1.0, data).unwrap();
        let path = tmp("v32.cbvl");
        write_volume(&path, &vol, ElementType::F32).unwrap();
        let once = read_volume(&path).unwrap();
        write_volume(&path, &once, ElementType::F32).unwrap();
        let twice = read_volume(&path).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn projection_round_trip_keeps_pitch() {
        let p = ProjectionStack::new(2, 3, 4, (0..24).map(|i| i as f64 - 11.5).collect()).unwrap();
        let path = tmp("p.cbpr");
        write_projections(&path, &p, 0.15, ElementType::F64).unwrap();
        let (back, pitch) = read_projections(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(pitch, 0.15);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let path = tmp("bad.cbvl");
        std::fs::write(&path, b"NOPE rest of file").unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format(msg)) if msg.contains("magic")));
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let vol = Volume3D::new((4, 4, 4), 1.0, vec![1.5; 64]).unwrap();
        let path = tmp("t.cbvl");
        write_volume(&path, &vol, ElementType::F64).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match read_volume(&path) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("512"), "message should name expected bytes: {msg}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn dense_matrix_round_trip() {
        let m = DenseMatrix { rows: 3, cols: 2, data: vec![1.0, -2.0, 3.5, 0.0, 1e-12, 9.0] };
        let path = tmp("a.mat");
        write_dense_matrix(&path, &m).unwrap();
        let back = read_dense_matrix(&path).unwrap();
        assert_eq!((back.rows, back.cols), (3, 2));
        assert_eq!(back.data, m.data);
    }

    #[test]
    fn raw_f32_import_reads_row_major() {
        let path = tmp("raw.f32");
        let vals: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut bytes = Vec::new();
        for v in &vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let vol = import_raw_f32_volume(&path, (3, 2, 1), 0.5).unwrap();
        assert_eq!(vol.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn pgm_has_expected_header_and_size() {
        let vol = Volume3D::new((4, 3, 2), 1.0, (0..24).map(|i| i as f64).collect()).unwrap();
        let path = tmp("s.pgm");
        write_pgm_slice(&path, &vol, 1, (0.0, 23.0)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(bytes.len(), b"P5\n4 3\n255\n".len() + 12);
        assert_eq!(*bytes.last().unwrap(), 255);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn volume_f64_round_trip_property(
            nx in 1usize..5, ny in 1usize..5, nz in 1usize..5,
            seed in 0u64..1000,
        ) {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let data: Vec<f64> = (0..nx * ny * nz)
                .map(|_| f64::from_bits(rng.gen::<u64>() & 0x7FEF_FFFF_FFFF_FFFF)
                    * if rng.gen() { -1.0 } else { 1.0 })
                .collect();
            let vol = Volume3D::new((nx, ny, nz), 0.1, data).unwrap();
            let path = tmp("prop.cbvl");
            write_volume(&path, &vol, ElementType::F64).unwrap();
            let back = read_volume(&path).unwrap();
            prop_assert!(vol.data.iter().zip(&back.data).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(vol.dims, back.dims);
        }
    }
}
