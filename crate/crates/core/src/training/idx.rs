//! IDX container reader (the MNIST distribution format).
//!
//! Files may be raw or gzip-compressed; compression is detected from the
//! first two bytes.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{DataError, Dataset, Split};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = fs::read(path).map_err(|e| DataError::Io(path.to_path_buf(), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| DataError::Io(path.to_path_buf(), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Format(format!("{what}: truncated header")))
}

/// Parses an image file and a label file already in memory.
pub fn parse_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset, DataError> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::Format(format!(
            "images: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let magic = be_u32(labels, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(DataError::Format(format!(
            "labels: magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = be_u32(labels, 4, "labels")? as usize;
    if label_count != count {
        return Err(DataError::Format(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let pixels = rows * cols;
    if rows == 0 || cols == 0 {
        return Err(DataError::Format("images: zero-sized image".into()));
    }
    let body = &images[16..];
    if body.len() != count * pixels {
        return Err(DataError::Format(format!(
            "images: expected {} pixel bytes, found {}",
            count * pixels,
            body.len()
        )));
    }
    let label_body = &labels[8..];
    if label_body.len() != count {
        return Err(DataError::Format(format!(
            "labels: expected {count} label bytes, found {}",
            label_body.len()
        )));
    }
    let images = body
        .chunks_exact(pixels)
        .map(|px| {
            let data = px.iter().map(|&b| f64::from(b) / 255.0).collect();
            Tensor::new(vec![1, rows, cols], data).expect("shape matches data")
        })
        .collect();
    let labels: Vec<usize> = label_body.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(images, labels, classes, split)
}

/// Loads an image/label file pair.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<Dataset, DataError> {
    let images = read_maybe_gz(images_path)?;
    let labels = read_maybe_gz(labels_path)?;
    parse_idx(&images, &labels, split)
}

fn locate(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

/// Paths of the standard MNIST file pair for `split` inside `dir`
/// (`train-*` / `t10k-*`, optionally gzipped).
pub fn split_paths(dir: &Path, split: Split) -> Result<(PathBuf, PathBuf), DataError> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = locate(dir, &format!("{prefix}-images-idx3-ubyte"));
    let labels = locate(dir, &format!("{prefix}-labels-idx1-ubyte"));
    match (images, labels) {
        (Some(i), Some(l)) => Ok((i, l)),
        _ => Err(DataError::Missing(
            dir.join(format!("{prefix}-*-ubyte[.gz]")),
        )),
    }
}

/// Loads `split` from a directory holding the standard MNIST file names.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let (images, labels) = split_paths(dir, split)?;
    load_idx(&images, &labels, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    fn two_images() -> (Vec<u8>, Vec<u8>) {
        let mut images = header(IMAGES_MAGIC, &[2, 2, 2]);
        images.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4]);
        let mut labels = header(LABELS_MAGIC, &[2]);
        labels.extend_from_slice(&[7, 3]);
        (images, labels)
    }

    #[test]
    fn hand_built_pair() {
        let (images, labels) = two_images();
        let ds = parse_idx(&images, &labels, Split::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[7, 3]);
        assert_eq!(ds.image(0).shape(), &[1, 2, 2]);
        assert_eq!(ds.image(0).data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.image(0).data()[1], 1.0);
        assert_eq!(
            ds.image(1).data(),
            &[1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0, 4.0 / 255.0]
        );
    }

    #[test]
    fn swapped_files_rejected() {
        let (images, labels) = two_images();
        assert!(matches!(
            parse_idx(&labels, &images, Split::Test),
            Err(DataError::Format(_))
        ));
        // a labels file carrying the images magic
        let mut bad = labels.clone();
        bad[..4].copy_from_slice(&IMAGES_MAGIC.to_be_bytes());
        assert!(matches!(
            parse_idx(&images, &bad, Split::Test),
            Err(DataError::Format(_))
        ));
    }

    #[test]
    fn count_mismatch_and_truncation() {
        let (images, mut labels) = two_images();
        labels[7] = 3;
        labels.push(1);
        assert!(parse_idx(&images, &labels, Split::Test).is_err());
        let (images, labels) = two_images();
        assert!(parse_idx(&images[..images.len() - 1], &labels, Split::Test).is_err());
        assert!(parse_idx(&images[..10], &labels, Split::Test).is_err());
    }

    #[test]
    fn gzip_files_are_transparent() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let (images, labels) = two_images();
        let dir = tempfile::tempdir().unwrap();
        let ipath = dir.path().join("t10k-images-idx3-ubyte.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&images).unwrap();
        fs::write(&ipath, enc.finish().unwrap()).unwrap();
        fs::write(dir.path().join("t10k-labels-idx1-ubyte"), &labels).unwrap();
        let ds = load_split(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(matches!(
            load_split(dir.path(), Split::Train),
            Err(DataError::Missing(_))
        ));
    }
}
