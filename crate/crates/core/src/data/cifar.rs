use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by 32×32 pixels per channel, R then G then B.
pub const RECORD_BYTES: usize = 3073;

pub const CIFAR10_CLASSES: [&str; 10] =
    ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

pub fn parse_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 file of {} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Format(format!("record {i} has label {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(
        Tensor::new(&[n, 3, 32, 32], data)?,
        labels,
        CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        split,
    )
}

/// Loads one batch file, or every `data_batch_*.bin` (train) /
/// `test_batch.bin` (test) file of a directory in name order.
pub fn load_cifar10_binary(path: &Path, split: Split) -> Result<Dataset> {
    if path.is_file() {
        return parse_cifar10(&std::fs::read(path)?, split);
    }
    let mut files: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            match split {
                Split::Train => name.starts_with("data_batch") && name.ends_with(".bin"),
                Split::Test => name == "test_batch.bin",
            }
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format(format!("no CIFAR-10 {split:?} batches in {}", path.display())));
    }
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(std::fs::read(f)?);
    }
    parse_cifar10(&bytes, split)
}

/// Writes a 32×32 RGB dataset in the binary record layout (pixels rounded to bytes).
pub fn write_cifar10_binary(ds: &Dataset, path: &Path) -> Result<()> {
    let (n, c, h, w) = ds.images.dims4()?;
    if (c, h, w) != (3, 32, 32) {
        return Err(Error::shape(format!("CIFAR-10 records are 3x32x32, got {c}x{h}x{w}")));
    }
    let mut out = Vec::with_capacity(n * RECORD_BYTES);
    for (i, &l) in ds.labels.iter().enumerate() {
        out.push(u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit a byte")))?);
        out.extend(ds.images.data()[i * 3072..(i + 1) * 3072].iter().map(|&v| (v * 255.0).round() as u8));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn ten_records_from_30730_bytes() {
        let bytes: Vec<u8> = (0..10).flat_map(|i| record(i as u8, |j| (j % 256) as u8)).collect();
        assert_eq!(bytes.len(), 30730);
        let ds = parse_cifar10(&bytes, Split::Train).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn saturated_record_is_all_ones() {
        let ds = parse_cifar10(&record(3, |_| 255), Split::Test).unwrap();
        assert!(ds.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn channel_major_layout() {
        // red plane first: byte 1 is R(0,0), byte 1025 is G(0,0)
        let ds = parse_cifar10(&record(0, |j| if j == 1024 { 255 } else { 0 }), Split::Test).unwrap();
        assert_eq!(ds.images[1024], 1.0);
        assert_eq!(ds.images[0], 0.0);
    }

    #[test]
    fn bad_length_and_label_rejected() {
        assert!(matches!(parse_cifar10(&[0u8; 3072], Split::Train), Err(Error::Format(_))));
        assert!(matches!(parse_cifar10(&record(10, |_| 0), Split::Train), Err(Error::Format(_))));
    }

    #[test]
    fn roundtrip_through_file() {
        let bytes: Vec<u8> = (0..3).flat_map(|i| record(i as u8 * 3, |j| ((j * 7 + i) % 256) as u8)).collect();
        let ds = parse_cifar10(&bytes, Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        write_cifar10_binary(&ds, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(load_cifar10_binary(dir.path(), Split::Train).unwrap(), ds);
    }
}
