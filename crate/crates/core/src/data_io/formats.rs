//! IDX (MNIST family) and CIFAR-10 binary readers and writers.

use std::path::Path;

use super::RawImages;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse {
            offset,
            message: format!("truncated header: missing {what}"),
        })
}

/// Parses an unsigned-byte IDX file with the given magic; returns its
/// dimensions and payload.
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != expected_magic {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad IDX magic: expected {expected_magic:#010x}, found {magic:#010x}"),
        });
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(be_u32(bytes, 4 + 4 * i, "dimension")? as usize);
    }
    let start = 4 + 4 * rank;
    let len = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Parse {
            offset: 4,
            message: format!("dimensions {dims:?} overflow"),
        })?;
    let available = bytes.len() - start;
    if available < len {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated payload: need {len} bytes after header, found {available}"),
        });
    }
    if available > len {
        return Err(Error::Parse {
            offset: start + len,
            message: format!("{} trailing bytes after payload", available - len),
        });
    }
    Ok((dims, &bytes[start..]))
}

/// Reads an IDX image file (`N × H × W` unsigned bytes) and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<RawImages> {
    parse_idx_pair(&std::fs::read(images)?, &std::fs::read(labels)?)
}

pub fn parse_idx_pair(image_bytes: &[u8], label_bytes: &[u8]) -> Result<RawImages> {
    let (dims, pixels) = parse_idx(image_bytes, IDX_IMAGES_MAGIC)?;
    let (ldims, labels) = parse_idx(label_bytes, IDX_LABELS_MAGIC)?;
    if dims[0] != ldims[0] {
        return Err(Error::Parse {
            offset: 4,
            message: format!("{} images but {} labels", dims[0], ldims[0]),
        });
    }
    let num_classes = labels.iter().max().map_or(1, |&m| m as usize + 1).max(10);
    RawImages::new(dims[0], [1, dims[1], dims[2]], pixels.to_vec(), labels.to_vec(), num_classes)
}

pub fn idx_bytes(raw: &RawImages) -> Result<(Vec<u8>, Vec<u8>)> {
    if raw.channels != 1 {
        return Err(Error::Param(format!("IDX images are single-channel, got {}", raw.channels)));
    }
    let mut images = Vec::with_capacity(16 + raw.pixels.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [raw.len(), raw.height, raw.width] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend_from_slice(&raw.pixels);
    let mut labels = Vec::with_capacity(8 + raw.labels.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(raw.len() as u32).to_be_bytes());
    labels.extend_from_slice(&raw.labels);
    Ok((images, labels))
}

pub fn write_idx(raw: &RawImages, images: &Path, labels: &Path) -> Result<()> {
    let (i, l) = idx_bytes(raw)?;
    std::fs::write(images, i)?;
    std::fs::write(labels, l)?;
    Ok(())
}

/// Parses CIFAR-10 binary records (1 label byte + 3072 channel-major pixels).
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<RawImages> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Parse {
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            message: format!(
                "size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Parse {
                offset: i * CIFAR_RECORD,
                message: format!("label {} out of range for {CIFAR_CLASSES} classes", rec[0]),
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    RawImages::new(n, [3, CIFAR_SIDE, CIFAR_SIDE], pixels, labels, CIFAR_CLASSES)
}

pub fn load_cifar_binary(path: &Path) -> Result<RawImages> {
    parse_cifar_binary(&std::fs::read(path)?)
}

pub fn cifar_bytes(raw: &RawImages) -> Result<Vec<u8>> {
    if (raw.channels, raw.height, raw.width) != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::Param(format!(
            "CIFAR records are 3×32×32, got {}×{}×{}",
            raw.channels, raw.height, raw.width
        )));
    }
    let per = raw.sample_len();
    let mut out = Vec::with_capacity(raw.len() * CIFAR_RECORD);
    for i in 0..raw.len() {
        out.push(raw.labels[i]);
        out.extend_from_slice(&raw.pixels[i * per..(i + 1) * per]);
    }
    Ok(out)
}

pub fn write_cifar_binary(raw: &RawImages, path: &Path) -> Result<()> {
    std::fs::write(path, cifar_bytes(raw)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::Normalization;

    fn fixture(n: usize) -> RawImages {
        let pixels = (0..n * 4 * 4).map(|i| (i * 37 % 256) as u8).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        RawImages::new(n, [1, 4, 4], pixels, labels, 10).unwrap()
    }

    #[test]
    fn idx_round_trip() {
        let raw = fixture(4);
        let (i, l) = idx_bytes(&raw).unwrap();
        let back = parse_idx_pair(&i, &l).unwrap();
        assert_eq!(back, raw);
        assert_eq!(back.len(), 4);
        let ds = back.normalize(&Normalization::mnist()).unwrap();
        assert_eq!(ds.images.shape(), &[4, 1, 4, 4]);
    }

    #[test]
    fn idx_wrong_magic_names_both() {
        let (mut i, l) = idx_bytes(&fixture(2)).unwrap();
        i[3] = 0x01;
        let msg = parse_idx_pair(&i, &l).unwrap_err().to_string();
        assert!(msg.contains("0x00000803") && msg.contains("0x00000801"), "{msg}");
    }

    #[test]
    fn idx_rejects_every_truncation() {
        let (i, l) = idx_bytes(&fixture(3)).unwrap();
        for cut in 0..i.len() {
            assert!(matches!(parse_idx_pair(&i[..cut], &l), Err(Error::Parse { .. })), "cut {cut}");
        }
        for cut in 0..l.len() {
            assert!(parse_idx_pair(&i, &l[..cut]).is_err());
        }
    }

    #[test]
    fn idx_count_mismatch() {
        let (i, _) = idx_bytes(&fixture(3)).unwrap();
        let (_, l) = idx_bytes(&fixture(2)).unwrap();
        assert!(parse_idx_pair(&i, &l).is_err());
    }

    fn cifar_fixture() -> Vec<u8> {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 9;
        bytes[CIFAR_RECORD + 1 + 1024] = 255;
        bytes
    }

    #[test]
    fn cifar_two_records() {
        let raw = parse_cifar_binary(&cifar_fixture()).unwrap();
        assert_eq!(raw.len(), 2);
        assert_eq!(raw.labels, vec![3, 9]);
        let norm = Normalization::cifar10();
        let ds = raw.normalize(&norm).unwrap();
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        let first = ds.images.data()[0];
        assert!((first - (1.0 - norm.mean[0]) / norm.std[0]).abs() < 1e-12);
        // Second record's 255 sits in the green channel.
        let green = ds.images.data()[3072 + 1024];
        assert!((green - (1.0 - norm.mean[1]) / norm.std[1]).abs() < 1e-12);
        assert_eq!(cifar_bytes(&raw).unwrap(), cifar_fixture());
    }

    #[test]
    fn cifar_bad_label_and_size() {
        let mut bytes = cifar_fixture();
        bytes[CIFAR_RECORD] = 255;
        assert!(matches!(parse_cifar_binary(&bytes), Err(Error::Parse { offset, .. }) if offset == CIFAR_RECORD));
        let bytes = cifar_fixture();
        assert!(parse_cifar_binary(&bytes[..bytes.len() - 1]).is_err());
    }
}
