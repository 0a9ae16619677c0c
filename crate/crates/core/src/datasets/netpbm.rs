//! Minimal binary PPM (P6) / PGM (P5) codec, 8-bit only.

use std::path::Path;

use crate::error::{Result, SanError};

pub struct Image8 {
    pub width: usize,
    pub height: usize,
    /// Samples per pixel: 3 for PPM, 1 for PGM.
    pub channels: usize,
    /// Interleaved row-major samples.
    pub data: Vec<u8>,
}

pub fn encode(img: &Image8) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write(path: &Path, img: &Image8) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| SanError::io(path, e))
}

pub fn read(path: &Path) -> Result<Image8> {
    let bytes = std::fs::read(path).map_err(|e| SanError::io(path, e))?;
    decode(&bytes).map_err(|e| SanError::Data(format!("{}: {e}", path.display())))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Image8, String> {
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match header[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
    let width = parse(&header[1], "width")?;
    let height = parse(&header[2], "height")?;
    if parse(&header[3], "maxval")? != 255 {
        return Err("only maxval 255 is supported".into());
    }
    let n = width * height * channels;
    let data = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format!("raster truncated: expected {n} bytes"))?
        .to_vec();
    Ok(Image8 {
        width,
        height,
        channels,
        data,
    })
}
