//! IDX image/label files as distributed for MNIST.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::{Error, Result};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Images and labels with the files they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistSet {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    /// `(path, sha256)` of each source file.
    pub provenance: Vec<(PathBuf, String)>,
}

impl MnistSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.images[i * n..(i + 1) * n]
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let b = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos,
            msg: "truncated header".into(),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, want: u32) -> Result<()> {
        let got = self.u32()?;
        if got != want {
            return Err(Error::Format { offset: 0, msg: format!("magic {got}, expected {want}") });
        }
        Ok(())
    }

    fn body(&self, len: usize) -> Result<&[u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < len {
            return Err(Error::Format {
                offset: self.bytes.len(),
                msg: format!("payload truncated: need {len} bytes after offset {}, have {}", self.pos, rest.len()),
            });
        }
        if rest.len() > len {
            return Err(Error::Format { offset: self.pos + len, msg: "trailing bytes after payload".into() });
        }
        Ok(rest)
    }
}

/// Parses an image file into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IMAGE_MAGIC)?;
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let body = r.body(n * rows * cols)?;
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LABEL_MAGIC)?;
    let n = r.u32()? as usize;
    Ok(r.body(n)?.to_vec())
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if rows == 0 || cols == 0 || pixels.len() % (rows * cols) != 0 {
        return Err(Error::invalid("pixel buffer is not a whole number of images"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, (pixels.len() / (rows * cols)) as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<(Vec<u8>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = format!("{:x}", Sha256::digest(&bytes));
    Ok((bytes, digest))
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<MnistSet> {
    let (ib, ih) = read(images)?;
    let (lb, lh) = read(labels)?;
    let (n, rows, cols, pixels) = parse_images(&ib)?;
    let lab = parse_labels(&lb)?;
    if lab.len() != n {
        return Err(Error::Format { offset: 4, msg: format!("{n} images but {} labels", lab.len()) });
    }
    Ok(MnistSet {
        rows,
        cols,
        images: pixels,
        labels: lab,
        provenance: vec![(images.to_path_buf(), ih), (labels.to_path_buf(), lh)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_image_file() {
        let bytes = encode_images(2, 2, &[0, 64, 128, 255]).unwrap();
        let (n, r, c, px) = parse_images(&bytes).unwrap();
        assert_eq!((n, r, c), (1, 2, 2));
        assert_eq!(px, vec![0, 64, 128, 255]);
    }

    #[test]
    fn wrong_magic_for_labels() {
        let bytes = encode_images(1, 1, &[3]).unwrap();
        assert!(matches!(parse_labels(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut bytes = encode_labels(&[1, 2, 3]);
        bytes.pop();
        match parse_labels(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
        match parse_labels(&bytes[..6]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }
}
