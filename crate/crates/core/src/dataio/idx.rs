//! IDX container parsing (the MNIST distribution format).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

use super::Dataset;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

/// Big-endian magic followed by one `u32` per dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    pub fn parse(bytes: &[u8]) -> Result<(IdxHeader, &[u8])> {
        if bytes.len() < 4 {
            return Err(Error::data("IDX file shorter than its magic number"));
        }
        let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
        if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
            return Err(Error::data(format!("bad IDX magic {magic}")));
        }
        let ndim = bytes[3] as usize;
        let end = 4 + 4 * ndim;
        if bytes.len() < end {
            return Err(Error::data("IDX header truncated"));
        }
        let dims = bytes[4..end]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
            .collect();
        Ok((IdxHeader { magic, dims }, &bytes[end..]))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.magic.to_be_bytes().to_vec();
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// Reads a file, inflating it when it starts with the gzip signature.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Decodes an image/label pair already in memory.
pub fn parse_mnist(images: &[u8], labels: &[u8], name: &str) -> Result<Dataset> {
    let (ih, ipix) = IdxHeader::parse(images)?;
    if ih.magic != IMAGES_MAGIC || ih.dims.len() != 3 {
        return Err(Error::data(format!("expected image magic {IMAGES_MAGIC}, found {}", ih.magic)));
    }
    let (lh, lbytes) = IdxHeader::parse(labels)?;
    if lh.magic != LABELS_MAGIC || lh.dims.len() != 1 {
        return Err(Error::data(format!("expected label magic {LABELS_MAGIC}, found {}", lh.magic)));
    }
    if ipix.len() < ih.payload_len() {
        return Err(Error::data(format!(
            "image file truncated: {} of {} pixel bytes",
            ipix.len(),
            ih.payload_len()
        )));
    }
    if lbytes.len() < lh.payload_len() {
        return Err(Error::data("label file truncated"));
    }
    let n = ih.dims[0] as usize;
    if lh.dims[0] as usize != n {
        return Err(Error::data(format!("{n} images but {} labels", lh.dims[0])));
    }
    let d = (ih.dims[1] * ih.dims[2]) as usize;
    let inputs: Vec<f32> = ipix[..n * d].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lbytes[..n].iter().map(|&b| b as usize).collect();
    Dataset::new(Tensor::matrix(n, d, inputs)?, labels, 10, name)
}

pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_mnist(&read_maybe_gz(images_path)?, &read_maybe_gz(labels_path)?, &name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

/// Locates `{train,t10k}-{images,labels}-idx?-ubyte[.gz]` inside `dir`.
pub fn mnist_paths(dir: &Path, split: MnistSplit) -> Result<(PathBuf, PathBuf)> {
    let prefix = match split {
        MnistSplit::Train => "train",
        MnistSplit::Test => "t10k",
    };
    let find = |kind: &str, rank: u8| -> Result<PathBuf> {
        for sep in ['-', '.'] {
            for ext in ["", ".gz"] {
                let p = dir.join(format!("{prefix}-{kind}{sep}idx{rank}-ubyte{ext}"));
                if p.is_file() {
                    return Ok(p);
                }
            }
        }
        Err(Error::data(format!(
            "no {prefix}-{kind}-idx{rank}-ubyte file in {}",
            dir.display()
        )))
    };
    Ok((find("images", 3)?, find("labels", 1)?))
}

pub fn load_mnist_dir(dir: &Path, split: MnistSplit) -> Result<Dataset> {
    let (i, l) = mnist_paths(dir, split)?;
    load_mnist(&i, &l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn images(n: u32, rows: u32, cols: u32, pix: &[u8]) -> Vec<u8> {
        let mut v = IdxHeader {
            magic: IMAGES_MAGIC,
            dims: vec![n, rows, cols],
        }
        .encode();
        v.extend_from_slice(pix);
        v
    }

    fn labels(ls: &[u8]) -> Vec<u8> {
        let mut v = IdxHeader {
            magic: LABELS_MAGIC,
            dims: vec![ls.len() as u32],
        }
        .encode();
        v.extend_from_slice(ls);
        v
    }

    #[test]
    fn header_bytes_follow_the_format() {
        // 0x00000803 then three big-endian dims
        let h = IdxHeader {
            magic: 2051,
            dims: vec![2, 28, 28],
        };
        let b = h.encode();
        assert_eq!(&b[..4], &[0, 0, 8, 3]);
        assert_eq!(&b[4..8], &[0, 0, 0, 2]);
        assert_eq!(IdxHeader::parse(&b).unwrap().0, h);
        assert_eq!(&[0, 0, 8, 1], &2049u32.to_be_bytes());
    }

    #[test]
    fn parses_and_scales() {
        let ds = parse_mnist(&images(2, 1, 2, &[0, 255, 51, 102]), &labels(&[3, 9]), "t").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels(), &[3, 9]);
        assert_eq!(ds.inputs().data(), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn rejects_bad_files() {
        let img = images(2, 1, 2, &[0, 255, 51, 102]);
        assert!(parse_mnist(&labels(&[1, 2]), &labels(&[1, 2]), "t").is_err());
        assert!(parse_mnist(&img, &img, "t").is_err());
        assert!(parse_mnist(&img[..img.len() - 1], &labels(&[1, 2]), "t").is_err());
        assert!(parse_mnist(&img, &labels(&[1, 2, 3]), "t").is_err());
        assert!(parse_mnist(&img, &labels(&[1, 12]), "t").is_err());
        let mut wrong = img.clone();
        wrong[2] = 9;
        assert!(matches!(parse_mnist(&wrong, &labels(&[1, 2]), "t"), Err(Error::Data(_))));
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let img = images(1, 1, 3, &[0, 128, 255]);
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&img).unwrap();
        fs::write(dir.path().join("t10k-images-idx3-ubyte.gz"), enc.finish().unwrap()).unwrap();
        fs::write(dir.path().join("t10k-labels-idx1-ubyte"), labels(&[7])).unwrap();
        let ds = load_mnist_dir(dir.path(), MnistSplit::Test).unwrap();
        assert_eq!(ds.labels(), &[7]);
        assert!(load_mnist_dir(dir.path(), MnistSplit::Train).is_err());
    }
}
