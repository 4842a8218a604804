//! CORD v1 grid container.
//!
//! Layout: bytes 0–3 are the ASCII magic `CORD`, byte 4 is the format
//! version (1), followed by three little-endian `u32` fields `h`, `w`, `c`,
//! then `h*w*c` IEEE-754 `f32` little-endian values in row-major order
//! (`h`, then `w`, then `c`). Masks use the same container with `c = 1` and
//! values restricted to `{0.0, 1.0}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{CoralError, Result};
use crate::grid::{BinaryMask, DescriptorGrid};

const MAGIC: [u8; 4] = *b"CORD";
const VERSION: u8 = 1;

pub fn write_grid(path: &Path, grid: &DescriptorGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        grid.height() as u32,
        grid.width() as u32,
        grid.channels() as u32,
    )?;
    for v in grid.data().iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<DescriptorGrid> {
    let (h, w, c, values) = read_raw(path)?;
    let data: Vec<f64> = values.into_iter().map(f64::from).collect();
    let arr = Array3::from_shape_vec((h, w, c), data)
        .map_err(|e| CoralError::Format(format!("{}: {e}", path.display())))?;
    DescriptorGrid::new(arr)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, mask.height() as u32, mask.width() as u32, 1)?;
    for b in mask.bits().iter() {
        let v: f32 = if *b { 1.0 } else { 0.0 };
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (h, w, c, values) = read_raw(path)?;
    if c != 1 {
        return Err(CoralError::Format(format!(
            "{}: mask requires c=1, got c={c}",
            path.display()
        )));
    }
    let mut bits = Array2::from_elem((h, w), false);
    for (i, v) in values.iter().enumerate() {
        let bit = if *v == 1.0 {
            true
        } else if *v == 0.0 {
            false
        } else {
            return Err(CoralError::Format(format!(
                "{}: mask value {v} is not 0.0 or 1.0",
                path.display()
            )));
        };
        bits[[i / w, i % w]] = bit;
    }
    Ok(BinaryMask::new(bits))
}

/// Writes a bare matrix (e.g. an attention map) as a single-channel grid.
pub fn write_matrix(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (h, w) = values.dim();
    let mut out = BufWriter::new(File::create(path)?);
    write_header(&mut out, h as u32, w as u32, 1)?;
    for v in values.iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn write_header<W: Write>(w: &mut W, h: u32, width: u32, c: u32) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&h.to_le_bytes())?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&c.to_le_bytes())?;
    Ok(())
}

fn read_raw(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CoralError::Format(format!("{}: truncated header", path.display())))?;
    if magic != MAGIC {
        return Err(CoralError::Format(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(CoralError::Format(format!(
            "{}: unsupported version {}",
            path.display(),
            version[0]
        )));
    }
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let n = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(c))
        .ok_or_else(|| CoralError::Format(format!("{}: shape overflow", path.display())))?;
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|_| CoralError::Format(format!("{}: truncated payload", path.display())))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CoralError::Format(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    let values = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((h, w, c, values))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.cord");
        let data = Array3::from_shape_vec(
            (2, 3, 2),
            (0..12).map(|i| i as f64 * 0.25 - 1.0).collect(),
        )
        .unwrap();
        let grid = DescriptorGrid::new(data).unwrap();
        write_grid(&path, &grid).unwrap();
        let back = read_grid(&path).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.cord");
        let grid = DescriptorGrid::new(Array3::from_elem((1, 2, 1), 1.5)).unwrap();
        write_grid(&path, &grid).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"CORD");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &1u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 17 + 2 * 4);
    }

    #[test]
    fn mask_round_trip_and_value_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cord");
        let mask = BinaryMask::new(array![[true, false], [false, true]]);
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);

        // Corrupt one value to 0.5: must be rejected.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[17..21].copy_from_slice(&0.5f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_mask(&path), Err(CoralError::Format(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cord");
        std::fs::write(&path, b"XORD\x01aaaaaaaaaaaa").unwrap();
        assert!(matches!(read_grid(&path), Err(CoralError::Format(_))));
    }
}
