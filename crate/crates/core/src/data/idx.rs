//! Reader for the IDX container used by MNIST and Fashion-MNIST.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Image tensor decoded from an IDX3 file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

/// Reads a file, transparently inflating it when the name ends in `.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn header(bytes: &[u8], words: usize) -> Result<Vec<u32>> {
    if bytes.len() < 4 * words {
        return Err(Error::validation(format!("IDX file truncated: {} bytes", bytes.len())));
    }
    Ok(bytes[..4 * words]
        .chunks_exact(4)
        .map(|w| u32::from_be_bytes([w[0], w[1], w[2], w[3]]))
        .collect())
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    let h = header(bytes, 4)?;
    if h[0] != IMAGES_MAGIC {
        return Err(Error::validation(format!("bad IDX image magic {:#010x}", h[0])));
    }
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(Error::validation(format!(
            "IDX image payload is {} bytes, header declares {count}x{rows}x{cols}",
            body.len()
        )));
    }
    Ok(IdxImages { count, rows, cols, pixels: body.to_vec() })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let h = header(bytes, 2)?;
    if h[0] != LABELS_MAGIC {
        return Err(Error::validation(format!("bad IDX label magic {:#010x}", h[0])));
    }
    let body = &bytes[8..];
    if body.len() != h[1] as usize {
        return Err(Error::validation(format!(
            "IDX label payload is {} bytes, header declares {}",
            body.len(),
            h[1]
        )));
    }
    Ok(body.to_vec())
}

/// Encodes images in IDX3 layout. Used to stage datasets and in tests.
pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
