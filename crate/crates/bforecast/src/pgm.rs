//! Binary PGM (P5) and PPM (P6) read/write, 8-bit, maxval 255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: bad netpbm header: {reason}")]
    BadHeader { path: String, reason: String },
    #[error("{path}: truncated pixel data (expected {expected} bytes, got {got})")]
    Truncated { path: String, expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, PgmError>;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize) -> Self {
        GrayImage { height, width, pixels: vec![0; height * width] }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PgmError {
    PgmError::Io { path: path.display().to_string(), source }
}

fn read_token(r: &mut impl Read, path: &Path) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        let n = r.read(&mut byte).map_err(|e| io_err(path, e))?;
        if n == 0 {
            if tok.is_empty() {
                return Err(PgmError::BadHeader {
                    path: path.display().to_string(),
                    reason: "unexpected end of header".into(),
                });
            }
            return Ok(tok);
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let magic = read_token(&mut r, path)?;
    if magic != "P5" {
        return Err(PgmError::BadHeader {
            path: path.display().to_string(),
            reason: format!("expected P5, got {magic:?}"),
        });
    }
    let parse = |tok: String| -> Result<usize> {
        tok.parse().map_err(|_| PgmError::BadHeader {
            path: path.display().to_string(),
            reason: format!("non-numeric header field {tok:?}"),
        })
    };
    let width = parse(read_token(&mut r, path)?)?;
    let height = parse(read_token(&mut r, path)?)?;
    let maxval = parse(read_token(&mut r, path)?)?;
    if maxval != 255 {
        return Err(PgmError::BadHeader {
            path: path.display().to_string(),
            reason: format!("unsupported maxval {maxval}"),
        });
    }
    let mut pixels = vec![0u8; width * height];
    let mut got = 0;
    while got < pixels.len() {
        let n = r.read(&mut pixels[got..]).map_err(|e| io_err(path, e))?;
        if n == 0 {
            return Err(PgmError::Truncated {
                path: path.display().to_string(),
                expected: pixels.len(),
                got,
            });
        }
        got += n;
    }
    Ok(GrayImage { height, width, pixels })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n255\n", img.width, img.height).map_err(|e| io_err(path, e))?;
    w.write_all(&img.pixels).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// RGB PPM writer; `rgb` is row-major interleaved, length 3 * h * w.
pub fn write_ppm(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), 3 * height * width);
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{width} {height}\n255\n").map_err(|e| io_err(path, e))?;
    w.write_all(rgb).map_err(|e| io_err(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let img = GrayImage {
            height: 3,
            width: 5,
            pixels: (0..15).map(|i| (i * 17) as u8).collect(),
        };
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
        assert!(matches!(read_pgm(&path), Err(PgmError::BadHeader { .. })));
        std::fs::write(&path, b"P5\n4 4\n255\nab").unwrap();
        assert!(matches!(read_pgm(&path), Err(PgmError::Truncated { .. })));
    }
}
