//! Big-endian IDX files as used by the MNIST distribution.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Image file contents with intensities scaled to [0, 1], `[count, rows, cols]`.
pub fn parse_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let size = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(4, "image dimensions overflow"))?;
    let payload = payload(bytes, 16, size)?;
    Tensor::new(&[count, rows, cols], payload.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Label file contents, each checked to lie in 0..=9.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let labels = payload(bytes, 8, count)?;
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(Error::format(8 + i as u64, format!("label {} outside 0..=9", labels[i])));
    }
    Ok(labels.to_vec())
}

pub fn load_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    parse_images(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_labels(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != count * rows * cols {
        return Err(Error::shape(format!(
            "{} pixels for {count} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_images(path: impl AsRef<Path>, count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_images(count, rows, cols, pixels)?).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(at as u64, "truncated header"))
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    let have = bytes.len().saturating_sub(start);
    if have < len {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {len} bytes declared, {have} present"),
        ));
    }
    if have > len {
        return Err(Error::format((start + len) as u64, "trailing bytes after payload"));
    }
    Ok(&bytes[start..start + len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_round_trip_and_scale() {
        let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 11) as u8).collect();
        let bytes = encode_images(2, 3, 4, &pixels).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let t = parse_images(&bytes).unwrap();
        assert_eq!(t.dims(), &[2, 3, 4]);
        let back: Vec<u8> = t.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, pixels);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn labels_round_trip_and_range() {
        let labels = vec![0, 9, 3, 3];
        let bytes = encode_labels(&labels);
        assert_eq!(&bytes[..4], &[0, 0, 8, 1]);
        assert_eq!(parse_labels(&bytes).unwrap(), labels);
        let bad = encode_labels(&[1, 10]);
        assert!(matches!(parse_labels(&bad), Err(Error::Format { offset: 9, .. })));
    }

    #[test]
    fn errors_carry_offsets() {
        let labels = encode_labels(&[1, 2]);
        assert!(matches!(parse_images(&labels), Err(Error::Format { offset: 0, .. })));
        let images = encode_images(1, 2, 2, &[0; 4]).unwrap();
        assert!(matches!(parse_images(&images[..18]), Err(Error::Format { offset: 18, .. })));
        assert!(matches!(parse_images(&images[..10]), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imgs");
        write_images(&p, 1, 1, 2, &[0, 255]).unwrap();
        assert_eq!(load_images(&p).unwrap().data(), &[0.0, 1.0]);
        let p = dir.path().join("labels");
        write_labels(&p, &[4]).unwrap();
        assert_eq!(load_labels(&p).unwrap(), vec![4]);
    }
}
