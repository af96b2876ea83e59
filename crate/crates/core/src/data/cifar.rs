//! CIFAR-10 binary batches: records of one label byte followed by 3072 pixel
//! bytes (1024 R, 1024 G, 1024 B, each row-major 32×32).

use std::path::Path;

use crate::error::{Error, Result};

pub const RECORD: usize = 1 + 3 * 32 * 32;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// `(labels, pixels)` of a batch file; pixels are CHW per record.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("size {} is not a positive multiple of the {RECORD}-byte record", bytes.len()),
        });
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (RECORD - 1));
    for rec in bytes.chunks_exact(RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("label {} out of range", rec[0]),
            });
        }
        labels.push(rec[0]);
        pixels.extend(&rec[1..]);
    }
    Ok((labels, pixels))
}

pub fn read_cifar_batch(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_cifar_batch(&bytes, path)
}

pub fn encode_cifar_batch(labels: &[u8], pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), labels.len() * (RECORD - 1), "pixel buffer size");
    let mut out = Vec::with_capacity(labels.len() * RECORD);
    for (l, p) in labels.iter().zip(pixels.chunks_exact(RECORD - 1)) {
        out.push(*l);
        out.extend(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_record_round_trip() {
        let labels = [3u8, 9];
        let pixels: Vec<u8> = (0..2 * 3072).map(|i| (i * 7 % 256) as u8).collect();
        let bytes = encode_cifar_batch(&labels, &pixels);
        assert_eq!(bytes.len(), 2 * RECORD);
        assert_eq!(bytes[0], 3);
        // Record 0, green plane, first pixel.
        assert_eq!(bytes[1 + 1024], pixels[1024]);
        let (l, p) = parse_cifar_batch(&bytes, Path::new("f")).unwrap();
        assert_eq!(l, labels);
        assert_eq!(p, pixels);
    }

    #[test]
    fn wrong_size_rejected() {
        let err = parse_cifar_batch(&[0u8; RECORD + 1], Path::new("f")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
