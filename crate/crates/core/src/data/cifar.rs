//! Readers for the CIFAR-10 and CIFAR-100 binary formats.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const CIFAR_SIDE: usize = 32;
const PIXELS_PER_IMAGE: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Which of the two CIFAR-100 label columns to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cifar100Labels {
    Fine,
    Coarse,
}

#[derive(Debug)]
pub struct CifarRecords {
    /// Channel-planar RGB pixel bytes, one `3*32*32` block per image.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingSource {
            path: path.to_path_buf(),
        });
    }
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    Ok(buf)
}

/// Parses concatenated CIFAR records with `label_bytes` label bytes per row,
/// keeping the label at `label_index`.
fn parse_records(
    path: &PathBuf,
    buf: &[u8],
    label_bytes: usize,
    label_index: usize,
    out: &mut CifarRecords,
) -> Result<()> {
    let row = label_bytes + PIXELS_PER_IMAGE;
    if buf.is_empty() || buf.len() % row != 0 {
        return Err(Error::MalformedSource {
            path: path.clone(),
            reason: format!("file size {} is not a multiple of {row}", buf.len()),
        });
    }
    for rec in buf.chunks_exact(row) {
        out.labels.push(rec[label_index]);
        out.pixels.extend_from_slice(&rec[label_bytes..]);
    }
    Ok(())
}

/// Reads CIFAR-10 batch files (`data_batch_*.bin` / `test_batch.bin`).
pub fn read_cifar10(paths: &[PathBuf]) -> Result<CifarRecords> {
    let mut out = CifarRecords {
        pixels: Vec::new(),
        labels: Vec::new(),
    };
    for path in paths {
        let buf = read_file(path)?;
        parse_records(path, &buf, 1, 0, &mut out)?;
    }
    Ok(out)
}

/// Reads a CIFAR-100 file (`train.bin` / `test.bin`); each row carries a
/// coarse label byte then a fine label byte.
pub fn read_cifar100(path: &PathBuf, which: Cifar100Labels) -> Result<CifarRecords> {
    let mut out = CifarRecords {
        pixels: Vec::new(),
        labels: Vec::new(),
    };
    let buf = read_file(path)?;
    let label_index = match which {
        Cifar100Labels::Coarse => 0,
        Cifar100Labels::Fine => 1,
    };
    parse_records(path, &buf, 2, label_index, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    pub fn write_cifar10_batch(path: &Path, labels: &[u8]) {
        let mut buf = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            buf.push(l);
            buf.extend(std::iter::repeat((i % 251) as u8).take(PIXELS_PER_IMAGE));
        }
        File::create(path).unwrap().write_all(&buf).unwrap();
    }

    #[test]
    fn parses_cifar10_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        write_cifar10_batch(&p, &[3, 1, 9]);
        let rec = read_cifar10(&[p]).unwrap();
        assert_eq!(rec.labels, vec![3, 1, 9]);
        assert_eq!(rec.pixels.len(), 3 * PIXELS_PER_IMAGE);
    }

    #[test]
    fn cifar100_label_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.bin");
        let mut buf = Vec::new();
        buf.push(4u8); // coarse
        buf.push(42u8); // fine
        buf.extend(std::iter::repeat(0u8).take(PIXELS_PER_IMAGE));
        File::create(&p).unwrap().write_all(&buf).unwrap();
        assert_eq!(
            read_cifar100(&p, Cifar100Labels::Fine).unwrap().labels,
            vec![42]
        );
        assert_eq!(
            read_cifar100(&p, Cifar100Labels::Coarse).unwrap().labels,
            vec![4]
        );
    }

    #[test]
    fn ragged_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        File::create(&p).unwrap().write_all(&[0u8; 100]).unwrap();
        assert!(matches!(
            read_cifar10(&[p]).unwrap_err(),
            Error::MalformedSource { .. }
        ));
    }
}
