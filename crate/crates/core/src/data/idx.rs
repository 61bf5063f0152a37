//! Big-endian IDX files as distributed for MNIST, optionally gzip-compressed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Dataset, Split};
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

struct Header<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl Header<'_> {
    fn u32_at(&self, offset: usize, field: &'static str) -> Result<u32> {
        let b = self.bytes.get(offset..offset + 4).ok_or_else(|| Error::Ingestion {
            path: self.path.to_path_buf(),
            field,
            detail: "file truncated inside header".into(),
        })?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn expect_magic(&self, magic: u32) -> Result<()> {
        let found = self.u32_at(0, "magic")?;
        if found != magic {
            return Err(Error::Ingestion {
                path: self.path.to_path_buf(),
                field: "magic",
                detail: format!("expected {magic:#010x}, found {found:#010x}"),
            });
        }
        Ok(())
    }

    fn payload(&self, offset: usize, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len().saturating_sub(offset);
        if available != len {
            return Err(Error::Ingestion {
                path: self.path.to_path_buf(),
                field: "payload",
                detail: format!("header declares {len} bytes, file holds {available}"),
            });
        }
        Ok(&self.bytes[offset..])
    }
}

/// Reads an image/label IDX pair. Pixels are scaled by 1/255.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = read_all(images)?;
    let img = Header { path: images, bytes: &img_bytes };
    img.expect_magic(IMAGE_MAGIC)?;
    let count = img.u32_at(4, "count")? as usize;
    let rows = img.u32_at(8, "rows")? as usize;
    let cols = img.u32_at(12, "cols")? as usize;
    let pixels = img.payload(16, count * rows * cols)?;

    let lbl_bytes = read_all(labels)?;
    let lbl = Header { path: labels, bytes: &lbl_bytes };
    lbl.expect_magic(LABEL_MAGIC)?;
    let label_count = lbl.u32_at(4, "count")? as usize;
    if label_count != count {
        return Err(Error::Ingestion {
            path: labels.to_path_buf(),
            field: "count",
            detail: format!("{label_count} labels for {count} images"),
        });
    }
    let raw_labels = lbl.payload(8, label_count)?;

    let features = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    let split = if images
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("t10k") || n.contains("test"))
    {
        Split::Test
    } else {
        Split::Train
    };
    Dataset::new(features, vec![1, rows, cols], labels, classes, split)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

/// Writes the images of `ds` as an IDX3 file, quantising pixels to bytes.
pub fn write_idx_images(path: &Path, ds: &Dataset) -> Result<()> {
    let (_, rows, cols) = ds
        .image_dims()
        .ok_or_else(|| Error::Data("dataset does not hold images".into()))?;
    let mut out = Vec::with_capacity(16 + ds.features.len());
    for v in [IMAGE_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(ds.features.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    write_bytes(path, &out)
}

pub fn write_idx_labels(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        out.push(u8::try_from(l).map_err(|_| Error::Data(format!("label {l} exceeds a byte")))?);
    }
    write_bytes(path, &out)
}

/// Locates `{prefix}-images-idx3-ubyte[.gz]` and the matching label file in
/// `dir`, where the prefix is `train` or `t10k`.
pub fn find_mnist(dir: &Path, split: Split) -> Result<(PathBuf, PathBuf)> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let pick = |stem: String| -> Result<PathBuf> {
        for candidate in [dir.join(&stem), dir.join(format!("{stem}.gz"))] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
        Err(Error::io(
            dir.join(&stem),
            std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
        ))
    };
    Ok((
        pick(format!("{prefix}-images-idx3-ubyte"))?,
        pick(format!("{prefix}-labels-idx1-ubyte"))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let features = vec![0.0, 1.0, 128.0 / 255.0, 1.0 / 255.0, 200.0 / 255.0, 0.0, 0.0, 0.0];
        Dataset::new(features, vec![1, 2, 2], vec![3, 9], 10, Split::Train).unwrap()
    }

    #[test]
    fn byte_scaling_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for ext in ["", ".gz"] {
            let (ip, lp) = (dir.path().join(format!("i{ext}")), dir.path().join(format!("l{ext}")));
            write_idx_images(&ip, &tiny()).unwrap();
            write_idx_labels(&lp, &tiny()).unwrap();
            let ds = load_mnist(&ip, &lp).unwrap();
            assert_eq!(ds.features, tiny().features);
            assert_eq!(ds.features[1], 1.0);
            assert_eq!(ds.features[0], 0.0);
            assert_eq!(ds.labels, vec![3, 9]);
        }
    }

    #[test]
    fn rejects_swapped_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx_images(&ip, &tiny()).unwrap();
        write_idx_labels(&lp, &tiny()).unwrap();
        let err = load_mnist(&lp, &ip).unwrap_err();
        assert!(matches!(err, Error::Ingestion { field: "magic", .. }), "{err}");
    }

    #[test]
    fn rejects_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx_images(&ip, &tiny()).unwrap();
        write_idx_labels(&lp, &tiny().head(1)).unwrap();
        assert!(matches!(
            load_mnist(&ip, &lp),
            Err(Error::Ingestion { field: "count", .. })
        ));
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.pop();
        std::fs::write(&ip, bytes).unwrap();
        write_idx_labels(&lp, &tiny()).unwrap();
        assert!(matches!(
            load_mnist(&ip, &lp),
            Err(Error::Ingestion { field: "payload", .. })
        ));
    }
}
