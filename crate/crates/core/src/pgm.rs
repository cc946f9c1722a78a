//! Binary PGM (P5) image reading and writing.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// Single-channel 8-bit raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    write!(out, "P5\n{} {}\n255\n", img.width, img.height)
        .expect("writing to memory cannot fail");
    out.extend_from_slice(&img.pixels);
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let fail = |detail: &str| Error::ParseLine {
        path: path.to_path_buf(),
        line: 1,
        detail: detail.to_string(),
    };
    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // then a single whitespace byte before the raster.
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Option<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        // PGM comments run to end of line.
        while *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            None
        } else {
            Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        }
    };
    let magic = token(&mut pos).ok_or_else(|| fail("empty file"))?;
    if magic != "P5" {
        return Err(fail(&format!("expected P5 magic, got '{magic}'")));
    }
    let width: usize = token(&mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| fail("bad width"))?;
    let height: usize = token(&mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| fail("bad height"))?;
    let maxval: usize = token(&mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| fail("bad maxval"))?;
    if maxval != 255 {
        return Err(fail(&format!("only maxval 255 supported, got {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(fail(&format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let mut img = GrayImage::new(5, 3);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = (i * 17 % 256) as u8;
        }
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, img);
        let bytes_a = std::fs::read(&path).unwrap();
        write_pgm(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes_a);
    }

    #[test]
    fn rejects_non_p5() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        std::fs::write(&path, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
