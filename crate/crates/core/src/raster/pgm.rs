//! Binary PGM (P5) export for raster inspection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Writes a grayscale image; values are clamped to [0, 1] and scaled to the
/// 8-bit maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), width * height, "raster dimensions");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    write!(w, "P5\n{width} {height}\n255\n").map_err(io_err)?;
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes).map_err(io_err)?;
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        write_pgm(&path, 2, 2, &[0.0, 1.0, 0.5, 2.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..9], b"P5\n2 2\n25");
        let payload = &bytes[bytes.len() - 4..];
        assert_eq!(payload, &[0u8, 255, 128, 255]);
    }
}
