//! Binary PPM (P6) and PGM (P5) 8-bit images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Image;
use crate::tensor::Tensor;

/// Encodes a 1- or 3-channel image, rounding to the nearest 8-bit level.
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::Dimension(format!("pnm supports 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.tensor().data().iter().map(|&v| (v * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "truncated pnm header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    pos += 1;
    let channels = match fields[0].1 {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::format(0, format!("unsupported pnm magic '{other}'"))),
    };
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .1
            .parse()
            .map_err(|_| Error::format(fields[i].0, format!("bad header field '{}'", fields[i].1)))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::format(fields[3].0, "only 8-bit pnm is supported"));
    }
    let n = w * h * channels;
    let body = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::format(pos, format!("pixel data truncated, need {n} bytes")))?;
    let data = body.iter().map(|&b| f32::from(b) / 255.0).collect();
    Image::new(Tensor::new(vec![h, w, channels], data)?)
}

pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_pnm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}
