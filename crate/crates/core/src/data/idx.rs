//! IDX files as distributed for MNIST: big-endian headers, `u8` payloads.
//!
//! ```text
//! images: u32 magic = 2051 | u32 count | u32 rows | u32 cols | count*rows*cols bytes
//! labels: u32 magic = 2049 | u32 count | count bytes
//! ```
//!
//! Gzipped files are recognized by their magic bytes and inflated on read.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{Dataset, Preprocess};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                needed: (n - have) as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, want: u32) -> Result<()> {
        let offset = self.pos as u64;
        let got = self.u32()?;
        if got != want {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset,
                msg: format!("magic number {got}, expected {want}"),
            });
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(&[0x1f, 0x8b]) {
        return Ok(bytes);
    }
    let mut out = Vec::new();
    GzDecoder::new(&bytes[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
    Ok(out)
}

/// Images as `count x (rows*cols)` raw values in `[0, 1]`, plus `(rows, cols)`.
pub fn read_images(path: &Path) -> Result<(Tensor, (usize, usize))> {
    let bytes = read(path)?;
    let mut cur = Cursor { path, bytes: &bytes, pos: 0 };
    cur.magic(IMAGE_MAGIC)?;
    let count = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let pixels = cur.take(count * rows * cols)?;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok((Tensor::matrix(count, rows * cols, data)?, (rows, cols)))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read(path)?;
    let mut cur = Cursor { path, bytes: &bytes, pos: 0 };
    cur.magic(LABEL_MAGIC)?;
    let count = cur.u32()? as usize;
    Ok(cur.take(count)?.iter().map(|&b| b as usize).collect())
}

/// Parses an image/label file pair into an unpreprocessed dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (images, side) = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if images.rows() != labels.len() {
        return Err(Error::CountMismatch { images: images.rows(), labels: labels.len() });
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let mut ds = Dataset::new(images, labels, classes, Preprocess::MNIST)?;
    ds.side = Some(side);
    Ok(ds)
}

/// Writes raw `[0,1]` images (rounded to bytes) and labels in IDX layout.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (rows, cols) = dataset.side.unwrap_or((1, dataset.width()));
    let mut img = Vec::with_capacity(16 + dataset.images().len());
    for v in [IMAGE_MAGIC, dataset.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(dataset.images().as_slice().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + dataset.len());
    for v in [LABEL_MAGIC, dataset.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(dataset.labels().iter().map(|&l| l as u8));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

pub const MNIST_FILES: [&str; 4] = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

/// `dir/name`, or `dir/name.gz` if only that exists.
pub fn mnist_file(dir: &Path, name: &str) -> PathBuf {
    let plain = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    if !plain.is_file() && gz.is_file() {
        gz
    } else {
        plain
    }
}

/// True if all four MNIST files, plain or gzipped, are under `dir`.
pub fn mnist_present(dir: &Path) -> bool {
    MNIST_FILES.iter().all(|f| mnist_file(dir, f).is_file())
}

/// Looks for the standard MNIST file names under `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let [ti, tl, ei, el] = MNIST_FILES.map(|f| mnist_file(dir, f));
    Ok((load_idx(&ti, &tl)?, load_idx(&ei, &el)?))
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

    #[test]
    fn parses_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let mut img = header(IMAGE_MAGIC, &[2, 1, 2]);
        img.extend_from_slice(&[0, 255, 51, 102]);
        fs::write(&ip, img).unwrap();
        let mut lab = header(LABEL_MAGIC, &[2]);
        lab.extend_from_slice(&[3, 7]);
        fs::write(&lp, lab).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images().as_slice(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(ds.side, Some((1, 2)));
    }

    #[test]
    fn bad_magic_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i");
        fs::write(&p, header(2049, &[0, 28, 28])).unwrap();
        match read_images(&p) {
            Err(Error::Parse { offset, msg, .. }) => {
                assert_eq!(offset, 0);
                assert!(msg.contains("2051"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i");
        let mut img = header(IMAGE_MAGIC, &[2, 2, 2]);
        img.extend_from_slice(&[1, 2, 3]);
        fs::write(&p, img).unwrap();
        assert!(matches!(read_images(&p), Err(Error::Truncated { offset: 16, needed: 5, .. })));
        fs::write(&p, [0u8, 0, 8]).unwrap();
        assert!(matches!(read_images(&p), Err(Error::Truncated { offset: 0, .. })));
    }

    #[test]
    fn count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let mut img = header(IMAGE_MAGIC, &[2, 1, 1]);
        img.extend_from_slice(&[0, 0]);
        fs::write(&ip, img).unwrap();
        let mut lab = header(LABEL_MAGIC, &[3]);
        lab.extend_from_slice(&[0, 1, 2]);
        fs::write(&lp, lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::CountMismatch { images: 2, labels: 3 })));
    }

    #[test]
    fn write_then_read_round_trips_byte_images() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let data: Vec<f64> = (0..12).map(|k| (k * 20) as f64 / 255.0).collect();
        let mut ds = Dataset::new(Tensor::matrix(3, 4, data).unwrap(), vec![0, 9, 4], 10, Preprocess::MNIST).unwrap();
        ds.side = Some((2, 2));
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.images().as_slice().iter().zip(ds.images().as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gzipped_mnist_dir_loads_like_plain() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        use std::io::Write;

        let plain = tempfile::tempdir().unwrap();
        let gz = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..8).map(|k| (k * 30) as f64 / 255.0).collect();
        let mut ds = Dataset::new(Tensor::matrix(2, 4, data).unwrap(), vec![3, 1], 10, Preprocess::MNIST).unwrap();
        ds.side = Some((2, 2));
        for pair in MNIST_FILES.chunks(2) {
            write_idx(&ds, &plain.path().join(pair[0]), &plain.path().join(pair[1])).unwrap();
        }
        assert!(!mnist_present(gz.path()));
        for f in MNIST_FILES {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&fs::read(plain.path().join(f)).unwrap()).unwrap();
            fs::write(gz.path().join(format!("{f}.gz")), enc.finish().unwrap()).unwrap();
        }
        assert!(mnist_present(gz.path()) && mnist_present(plain.path()));
        assert_eq!(load_mnist_dir(gz.path()).unwrap(), load_mnist_dir(plain.path()).unwrap());
    }
}
