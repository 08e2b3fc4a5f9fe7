//! Binary PPM (`P6`, maxval 255).

use std::fs;
use std::path::Path;

use super::{DatasetError, Result};
use crate::image::Image;

/// Writes an RGB image; values are rounded to the nearest of 256 levels.
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    if image.channels != 3 {
        return Err(DatasetError::Ppm {
            path: path.to_path_buf(),
            msg: format!("PPM needs 3 channels, image has {}", image.channels),
        });
    }
    let mut bytes = format!("P6\n{} {}\n255\n", image.size, image.size).into_bytes();
    bytes.extend(image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |msg: &str| DatasetError::Ppm {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    // Header: magic, width, height, maxval, separated by whitespace with
    // optional `#` comments, then exactly one whitespace byte.
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary RGB PPM (P6) is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w != h || w == 0 {
        return Err(bad("image must be square and non-empty"));
    }
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let body = &bytes[i + 1..];
    if body.len() != w * h * 3 {
        return Err(bad("pixel payload size does not match header"));
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image::new(w, 3, data).expect("size checked"))
}
