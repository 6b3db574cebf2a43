//! Reader for the IDX files MNIST ships in, with transparent gzip support.

use crate::error::{Error, Result};
use flate2::read::GzDecoder;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

/// Opens `path`, or `path.gz` if the plain file is absent, decompressing as
/// needed (sniffed from the gzip magic bytes).
fn read_maybe_gz(path: &Path) -> Result<(PathBuf, Vec<u8>)> {
    let candidates = [path.to_path_buf(), path.with_extension("gz")];
    let existing = candidates
        .iter()
        .find(|p| p.is_file())
        .ok_or(Error::MissingSource {
            path: path.to_path_buf(),
        })?;
    let mut raw = Vec::new();
    File::open(existing)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(existing.clone(), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(existing.clone(), e))?;
        raw = out;
    }
    Ok((existing.clone(), raw))
}

fn be_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

/// Raw MNIST-style image file: `count` images of `rows x cols` bytes.
#[derive(Debug)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    let (src, buf) = read_maybe_gz(path)?;
    let malformed = |reason: &str| Error::MalformedSource {
        path: src.clone(),
        reason: reason.to_string(),
    };
    if buf.len() < 16 {
        return Err(malformed("truncated header"));
    }
    if be_u32(&buf, 0) != MAGIC_IMAGES {
        return Err(malformed("bad magic number for an image file"));
    }
    let count = be_u32(&buf, 4) as usize;
    let rows = be_u32(&buf, 8) as usize;
    let cols = be_u32(&buf, 12) as usize;
    let expected = 16 + count * rows * cols;
    if buf.len() != expected {
        return Err(malformed(&format!(
            "expected {expected} bytes, found {}",
            buf.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: buf[16..].to_vec(),
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let (src, buf) = read_maybe_gz(path)?;
    let malformed = |reason: &str| Error::MalformedSource {
        path: src.clone(),
        reason: reason.to_string(),
    };
    if buf.len() < 8 {
        return Err(malformed("truncated header"));
    }
    if be_u32(&buf, 0) != MAGIC_LABELS {
        return Err(malformed("bad magic number for a label file"));
    }
    let count = be_u32(&buf, 4) as usize;
    if buf.len() != 8 + count {
        return Err(malformed("label count disagrees with file size"));
    }
    Ok(buf[8..].to_vec())
}
