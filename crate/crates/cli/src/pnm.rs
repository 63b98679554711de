//! Binary netpbm IO: P6 PPM for RGB images, P5 PGM for masks (8-bit)
//! and depth maps (16-bit big-endian, the netpbm wide format).

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug)]
pub enum PnmError {
    Io { path: String, source: std::io::Error },
    Malformed { path: String, reason: String },
}

impl fmt::Display for PnmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PnmError::Io { path, source } => write!(f, "{path}: {source}"),
            PnmError::Malformed { path, reason } => write!(f, "{path}: {reason}"),
        }
    }
}

impl std::error::Error for PnmError {}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PnmError + '_ {
    move |source| PnmError::Io { path: path.display().to_string(), source }
}

fn bad(path: &Path, reason: impl Into<String>) -> PnmError {
    PnmError::Malformed { path: path.display().to_string(), reason: reason.into() }
}

pub fn write_ppm(path: &Path, rgb: &[u8], height: usize, width: usize) -> Result<(), PnmError> {
    if rgb.len() != height * width * 3 {
        return Err(bad(path, format!("{} bytes for {height}x{width} RGB", rgb.len())));
    }
    let mut out = Vec::with_capacity(rgb.len() + 32);
    write!(out, "P6\n{width} {height}\n255\n").expect("vec write");
    out.extend_from_slice(rgb);
    fs::write(path, out).map_err(io_err(path))
}

pub fn write_pgm8(path: &Path, gray: &[u8], height: usize, width: usize) -> Result<(), PnmError> {
    if gray.len() != height * width {
        return Err(bad(path, format!("{} bytes for {height}x{width} gray", gray.len())));
    }
    let mut out = Vec::with_capacity(gray.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n").expect("vec write");
    out.extend_from_slice(gray);
    fs::write(path, out).map_err(io_err(path))
}

/// 16-bit PGM; values big-endian per the netpbm wide-pixel convention.
pub fn write_pgm16(path: &Path, gray: &[u16], height: usize, width: usize) -> Result<(), PnmError> {
    if gray.len() != height * width {
        return Err(bad(path, format!("{} values for {height}x{width} gray", gray.len())));
    }
    let mut out = Vec::with_capacity(gray.len() * 2 + 32);
    write!(out, "P5\n{width} {height}\n65535\n").expect("vec write");
    for &v in gray {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

/// Parse "P{n}\n" then three whitespace-separated decimals, tolerating
/// `#` comment lines, as the netpbm grammar allows.
fn parse_header(path: &Path, bytes: &[u8], magic: &str) -> Result<Header, PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(bad(path, format!("not a {magic} file")));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, "truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| bad(path, format!("bad header field {text}")))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad(path, "missing header terminator"));
    }
    Ok(Header {
        width: fields[0] as usize,
        height: fields[1] as usize,
        maxval: fields[2],
        data_offset: pos + 1,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, PnmError> {
    let mut buf = Vec::new();
    fs::File::open(path).map_err(io_err(path))?.read_to_end(&mut buf).map_err(io_err(path))?;
    Ok(buf)
}

pub fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize), PnmError> {
    let bytes = read_bytes(path)?;
    let h = parse_header(path, &bytes, "P6")?;
    if h.maxval != 255 {
        return Err(bad(path, format!("unsupported maxval {}", h.maxval)));
    }
    let n = h.height * h.width * 3;
    let data = bytes
        .get(h.data_offset..h.data_offset + n)
        .ok_or_else(|| bad(path, "truncated pixel data"))?;
    Ok((data.to_vec(), h.height, h.width))
}

pub fn read_pgm8(path: &Path) -> Result<(Vec<u8>, usize, usize), PnmError> {
    let bytes = read_bytes(path)?;
    let h = parse_header(path, &bytes, "P5")?;
    if h.maxval != 255 {
        return Err(bad(path, format!("expected 8-bit PGM, maxval {}", h.maxval)));
    }
    let n = h.height * h.width;
    let data = bytes
        .get(h.data_offset..h.data_offset + n)
        .ok_or_else(|| bad(path, "truncated pixel data"))?;
    Ok((data.to_vec(), h.height, h.width))
}

pub fn read_pgm16(path: &Path) -> Result<(Vec<u16>, usize, usize), PnmError> {
    let bytes = read_bytes(path)?;
    let h = parse_header(path, &bytes, "P5")?;
    if h.maxval != 65535 {
        return Err(bad(path, format!("expected 16-bit PGM, maxval {}", h.maxval)));
    }
    let n = h.height * h.width;
    let data = bytes
        .get(h.data_offset..h.data_offset + 2 * n)
        .ok_or_else(|| bad(path, "truncated pixel data"))?;
    let values = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((values, h.height, h.width))
}

/// Depth in [0, 1] to 16-bit gray and back. Quantization error is at
/// most 1/131070, far below every tolerance in the pipeline.
pub fn depth_to_u16(values: &[f64]) -> Vec<u16> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect()
}

pub fn u16_to_depth(values: &[u16]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(v) / 65535.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let p = dir.path().join("img.ppm");
        write_ppm(&p, &rgb, 2, 3).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), (rgb, 2, 3));

        let gray: Vec<u8> = vec![0, 255, 128, 7];
        let p = dir.path().join("mask.pgm");
        write_pgm8(&p, &gray, 2, 2).unwrap();
        assert_eq!(read_pgm8(&p).unwrap(), (gray, 2, 2));

        let wide: Vec<u16> = vec![0, 65535, 300, 40000];
        let p = dir.path().join("depth.pgm");
        write_pgm16(&p, &wide, 2, 2).unwrap();
        assert_eq!(read_pgm16(&p).unwrap(), (wide, 2, 2));
    }

    #[test]
    fn header_comments_are_skipped_and_junk_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        std::fs::write(&p, b"P5\n# made by hand\n2 1\n255\n\x01\x02").unwrap();
        assert_eq!(read_pgm8(&p).unwrap(), (vec![1, 2], 1, 2));

        let p = dir.path().join("bad.pgm");
        std::fs::write(&p, b"P5\n2 1\n255\n\x01").unwrap();
        let err = read_pgm8(&p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        std::fs::write(&p, b"P6\n2 1\n255\n\x01\x02").unwrap();
        assert!(read_pgm8(&p).is_err());
    }

    #[test]
    fn depth_quantization_error_stays_below_half_step() {
        let values = [0.0, 1.0, 0.31457, 0.999999];
        let back = u16_to_depth(&depth_to_u16(&values));
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
    }
}
