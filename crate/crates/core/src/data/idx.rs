//! IDX (MNIST / Fashion-MNIST) reader and writer.

use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw images: `count`, `rows`, `cols` and the row-major pixel bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], header: usize, len: usize, path: &Path) -> Result<Vec<u8>> {
    let body = &bytes[header.min(bytes.len())..];
    if body.len() != len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: len,
            found: body.len(),
        });
    }
    Ok(body.to_vec())
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let pixels = payload(bytes, 16, count * rows * cols, path)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    payload(bytes, 8, count, path)
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read(path)?, path)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read(path)?, path)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend(v.to_be_bytes());
    }
    out.extend(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> IdxImages {
        IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: vec![0, 1, 2, 3, 4, 255, 10, 20, 30, 40, 50, 60],
        }
    }

    #[test]
    fn round_trip() {
        let p = Path::new("fixture");
        let img = fixture();
        assert_eq!(parse_idx_images(&encode_idx_images(&img), p).unwrap(), img);
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[7, 3]), p).unwrap(), vec![7, 3]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let p = Path::new("fixture");
        let labels = encode_idx_labels(&[1, 2]);
        assert!(matches!(parse_idx_images(&labels, p), Err(Error::BadMagic { .. })));
        let mut bytes = encode_idx_images(&fixture());
        bytes.pop();
        assert!(matches!(
            parse_idx_images(&bytes, p),
            Err(Error::Truncated { expected: 12, found: 11, .. })
        ));
        assert!(matches!(parse_idx_labels(&[0, 0], p), Err(Error::Truncated { .. })));
    }
}
