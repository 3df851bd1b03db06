//! Binary PGM (`P5`, one channel) and PPM (`P6`, three channels) frames,
//! 8 bits per sample.

use std::fs;
use std::path::Path;

use pit_core::data::Image;

use crate::error::{io_err, Error, Result};

/// File extension used for an image with `channels` channels.
pub fn extension(channels: usize) -> Result<&'static str> {
    match channels {
        1 => Ok("pgm"),
        3 => Ok("ppm"),
        c => Err(Error::Invalid(format!(
            "{c}-channel images cannot be stored as PGM/PPM"
        ))),
    }
}

pub fn encode(image: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims();
    let magic = match extension(c)? {
        "pgm" => "P5",
        _ => "P6",
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let planar = image.to_u8();
    let plane = h * w;
    out.reserve(planar.len());
    for i in 0..plane {
        for ch in 0..c {
            out.push(planar[ch * plane + i]);
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format!("unsupported magic `{m}` (expected P5 or P6)")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("maxval {max} unsupported (expected 255)"));
    }
    let plane = h * w;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != plane * channels {
        return Err(format!(
            "expected {} sample bytes, found {}",
            plane * channels,
            body.len()
        ));
    }
    let mut planar = vec![0u8; body.len()];
    for i in 0..plane {
        for ch in 0..channels {
            planar[ch * plane + i] = body[i * channels + ch];
        }
    }
    Image::from_u8(channels, h, w, &planar).map_err(|e| e.to_string())
}

pub fn write(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode(image)?).map_err(io_err(path))
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|msg| Error::Format {
        path: path.into(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_gray_and_colour() {
        for c in [1, 3] {
            let data: Vec<u8> = (0..c * 5 * 4).map(|i| (i * 7 % 256) as u8).collect();
            let img = Image::from_u8(c, 5, 4, &data).unwrap();
            let back = decode(&encode(&img).unwrap()).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0, 255]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        let two = Image::from_u8(2, 1, 1, &[0, 0]).unwrap();
        assert!(encode(&two).is_err());
    }
}
