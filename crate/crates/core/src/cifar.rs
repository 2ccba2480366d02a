//! CIFAR-10 binary record ingestion and emission.
//!
//! The format is a concatenation of 3073-byte records: one label byte (0-9)
//! followed by 3072 pixel bytes (1024 red, 1024 green, 1024 blue, each a
//! row-major 32x32 plane). Synthetic datasets and adversarial dumps reuse the
//! same layout so external tooling can read them unchanged.

use std::fs;
use std::path::Path;

use crate::data::{ImageTensor, LabeledDataset, Split};
use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 3073;
pub const IMAGE_SIDE: usize = 32;
pub const NUM_CLASSES: usize = 10;
const PLANE: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Load a CIFAR-10 binary file. Pixel bytes are divided by 255 into `[0,1]`
/// and record order is preserved.
pub fn load_cifar10_binary(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path)?;
    load_cifar10_bytes(&bytes)
}

/// Decode CIFAR-10 records from an in-memory buffer.
pub fn load_cifar10_bytes(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "file size {} is not a multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (idx, record) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = record[0];
        if label as usize >= NUM_CLASSES {
            return Err(Error::CorruptRecord(format!(
                "record {idx} has label byte {label} > 9"
            )));
        }
        let pixels = &record[1..];
        let img = ImageTensor::from_fn(3, IMAGE_SIDE, IMAGE_SIDE, |(c, r, col)| {
            pixels[c * PLANE + r * IMAGE_SIDE + col] as f64 / 255.0
        })?;
        images.push(img);
        labels.push(label as usize);
    }
    LabeledDataset::new(images, labels, NUM_CLASSES, Split::Train)
}

/// Encode a dataset of 32x32x3 images as CIFAR-10 binary records.
///
/// Intensities are quantized with `round(v * 255)`; images loaded from this
/// format round-trip bit-exactly.
pub fn cifar10_bytes(dataset: &LabeledDataset) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(dataset.len() * RECORD_BYTES);
    for (img, &label) in dataset.images.iter().zip(dataset.labels.iter()) {
        if img.channels() != 3 || img.height() != IMAGE_SIDE || img.width() != IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "CIFAR records require 3x{IMAGE_SIDE}x{IMAGE_SIDE} images, got {}x{}x{}",
                img.channels(),
                img.height(),
                img.width()
            )));
        }
        if label >= NUM_CLASSES {
            return Err(Error::Config(format!("label {label} > 9")));
        }
        bytes.push(label as u8);
        for c in 0..3 {
            for r in 0..IMAGE_SIDE {
                for col in 0..IMAGE_SIDE {
                    let v = img.data()[[c, r, col]].clamp(0.0, 1.0);
                    bytes.push((v * 255.0).round() as u8);
                }
            }
        }
    }
    Ok(bytes)
}

pub fn write_cifar10_binary(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    fs::write(path, cifar10_bytes(dataset)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_record_decodes_to_black_image() {
        let bytes = vec![0u8; RECORD_BYTES];
        let data = load_cifar10_bytes(&bytes).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.labels[0], 0);
        let img = &data.images[0];
        assert_eq!((img.channels(), img.height(), img.width()), (3, 32, 32));
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_record_decodes_to_white_image() {
        let mut bytes = vec![255u8; RECORD_BYTES];
        bytes[0] = 9;
        let data = load_cifar10_bytes(&bytes).unwrap();
        assert_eq!(data.labels[0], 9);
        assert!(data.images[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = vec![0u8; RECORD_BYTES - 1];
        assert!(matches!(
            load_cifar10_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bad_label_is_a_corrupt_record() {
        let mut bytes = vec![0u8; RECORD_BYTES * 2];
        bytes[RECORD_BYTES] = 10;
        assert!(matches!(
            load_cifar10_bytes(&bytes),
            Err(Error::CorruptRecord(_))
        ));
    }

    #[test]
    fn two_record_file_round_trips_bit_exactly() {
        // Byte-level round-trip oracle: hand-built bytes -> load -> encode.
        let mut bytes = Vec::with_capacity(2 * RECORD_BYTES);
        bytes.push(3u8);
        bytes.extend((0..3072).map(|i| (i * 7 % 256) as u8));
        bytes.push(8u8);
        bytes.extend((0..3072).map(|i| (i * 13 + 5) as u8));
        let data = load_cifar10_bytes(&bytes).unwrap();
        let encoded = cifar10_bytes(&data).unwrap();
        assert_eq!(encoded, bytes);
    }

    #[test]
    fn loader_rejects_wrong_shape_on_write() {
        let img = ImageTensor::zeros(1, 32, 32).unwrap();
        let data = LabeledDataset::new(vec![img], vec![0], 10, Split::Test).unwrap();
        assert!(cifar10_bytes(&data).is_err());
    }
}
