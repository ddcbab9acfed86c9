//! Binary PPM (P6) and PGM (P5) images, 8 bits per sample.

use std::fs;
use std::path::Path;

use super::FeatureMap;
use crate::error::{Error, Result};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first three channels of `map` as RGB, clamped to [0, 1].
pub fn write_ppm(path: &Path, map: &FeatureMap) -> Result<()> {
    if map.dim < 3 {
        return Err(Error::Dimension(format!("PPM needs 3 channels, map has {}", map.dim)));
    }
    let mut buf = format!("P6\n{} {}\n255\n", map.width, map.height).into_bytes();
    for p in 0..map.pixel_count() {
        buf.extend(map.pixel(p)[..3].iter().map(|&v| quantize(v)));
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes a single-channel image of values in [0, 1].
pub fn write_pgm_unit(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    write_pgm(path, width, height, &bytes)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!(
            "{} pixels for a {width}×{height} image",
            pixels.len()
        )));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a P5 or P6 file, returning `(width, height, channels, samples)`.
pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: start as u64,
                msg: "truncated image header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("unsupported image magic {other:?}"),
            })
        }
    };
    let mut number = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| Error::Format {
            offset: 0,
            msg: format!("bad image {what} {t:?}"),
        })
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("only 8-bit images are supported, maxval {maxval}"),
        });
    }
    // header ends with exactly one whitespace byte
    let start = pos + 1;
    let need = width * height * channels;
    if bytes.len() < start + need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("image payload truncated, expected {need} bytes after offset {start}"),
        });
    }
    Ok((width, height, channels, bytes[start..start + need].to_vec()))
}
