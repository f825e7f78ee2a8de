//! Binary greymap (PGM `P5`) files with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Quantize a value in `[0, 1]` to a byte: `round(v * 255)`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    f64::from(b) / 255.0
}

/// Encode a row-major `height × width` image with maxval 255.
pub fn encode(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), height * width, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    out
}

/// An image decoded to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Greymap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .filter(|t| !t.is_empty())
}

/// Decode a `P5` image. Header comments are allowed; samples must be one byte
/// (maxval ≤ 255) and are scaled by `1 / maxval`.
pub fn decode(bytes: &[u8]) -> std::result::Result<Greymap, String> {
    let mut pos = 0;
    match token(bytes, &mut pos) {
        Some("P5") => {}
        other => return Err(format!("not a binary PGM (magic {other:?})")),
    }
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let tok = token(bytes, &mut pos);
        tok.and_then(|t| t.parse().ok())
            .ok_or_else(|| format!("malformed PGM header: bad {what} {tok:?}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("malformed PGM header: empty {width}x{height} image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (need 1..=255)"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("malformed PGM header: missing raster separator".into());
    }
    pos += 1;
    let raster = &bytes[pos..];
    let n = width * height;
    if raster.len() < n {
        return Err(format!(
            "truncated raster: {} of {n} bytes",
            raster.len()
        ));
    }
    let scale = maxval as f64;
    Ok(Greymap {
        height,
        width,
        values: raster[..n].iter().map(|&b| f64::from(b) / scale).collect(),
    })
}

pub fn write(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    fs::write(path, encode(height, width, values)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Greymap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::data(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_quantizes_to_128() {
        assert_eq!(quantize(0.5), 128);
        assert!((dequantize(128) - 0.50196).abs() < 1e-5);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
    }

    #[test]
    fn round_trip_is_exact_after_quantization() {
        let v: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let bytes = encode(3, 4, &v);
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        let img = decode(&bytes).unwrap();
        assert_eq!((img.height, img.width), (3, 4));
        assert_eq!(encode(3, 4, &img.values), bytes);
    }

    #[test]
    fn header_comments_and_small_maxval() {
        let mut bytes = b"P5 # made by hand\n2 1\n# comment\n15\n".to_vec();
        bytes.extend([15, 5]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.values, vec![1.0, 5.0 / 15.0]);
    }

    #[test]
    fn rejects_malformed_headers() {
        assert!(decode(b"P2\n1 1\n255\n\x00").unwrap_err().contains("magic"));
        assert!(decode(b"P5\nx 1\n255\n\x00").unwrap_err().contains("width"));
        assert!(decode(b"P5\n2 2\n255\n\x00").unwrap_err().contains("truncated"));
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode(b"P5\n1 1\n255").is_err());
    }
}
