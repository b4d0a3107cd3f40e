//! Binary PPM (`P6`, 8-bit) reading and writing.

use std::fs;
use std::path::Path;

use crate::image::Image;

use super::DataError;

/// Encodes an image as `P6` with maxval 255, rounding each channel.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let s = image.size();
    let mut out = format!("P6\n{s} {s}\n255\n").into_bytes();
    out.reserve(3 * s * s);
    for y in 0..s {
        for x in 0..s {
            for v in image.pixel(y, x) {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err("missing P6 magic".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("header field {} is not a number", i + 1));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("header field {} out of range", i + 1))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("header must end with a single whitespace byte".into()),
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        offset: pos,
    })
}

/// Decodes a square `P6` image, scaling channel values by `1 / maxval`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image, String> {
    let h = parse_header(bytes)?;
    if h.maxval == 0 || h.maxval > 255 {
        return Err(format!("maxval {} is not an 8-bit value", h.maxval));
    }
    if h.width == 0 || h.width != h.height {
        return Err(format!("expected a square image, got {}x{}", h.width, h.height));
    }
    let need = 3 * h.width * h.height;
    let payload = &bytes[h.offset..];
    if payload.len() < need {
        return Err(format!("payload truncated: {} of {need} bytes", payload.len()));
    }
    if payload.len() > need {
        return Err(format!("payload has {} bytes, header declares {need}", payload.len()));
    }
    let s = h.width;
    let mut img = Image::filled(s, [0.0; 3]);
    let maxval = h.maxval as f64;
    for y in 0..s {
        for x in 0..s {
            let i = 3 * (y * s + x);
            let px = [payload[i], payload[i + 1], payload[i + 2]];
            if px.iter().any(|&v| v as usize > h.maxval) {
                return Err(format!("pixel ({x}, {y}) exceeds maxval {}", h.maxval));
            }
            img.set_pixel(y, x, px.map(|v| v as f64 / maxval));
        }
    }
    Ok(img)
}

pub fn save_image(path: &Path, image: &Image) -> Result<(), DataError> {
    fs::write(path, encode_ppm(image)).map_err(|e| DataError::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_ppm(&bytes).map_err(|msg| DataError::Image {
        path: path.display().to_string(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_image_round_trips_bytes() {
        let img = Image::filled(2, [1.0, 0.0, 0.0]);
        let bytes = encode_ppm(&img);
        assert_eq!(&bytes[..11], b"P6\n2 2\n255\n");
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_ppm(&back), bytes);
    }

    #[test]
    fn black_loads_as_zeros() {
        let bytes = encode_ppm(&Image::filled(3, [0.0; 3]));
        assert!(decode_ppm(&bytes).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_magic() {
        let mut bytes = encode_ppm(&Image::filled(2, [0.5; 3]));
        bytes[1] = b'3';
        assert!(decode_ppm(&bytes).unwrap_err().contains("magic"));
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = encode_ppm(&Image::filled(4, [0.5; 3]));
        let err = decode_ppm(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_header_payload_mismatch() {
        let mut bytes = b"P6\n3 3\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(7u8, 3 * 2 * 2));
        assert!(decode_ppm(&bytes).is_err());
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend([1u8; 12]);
        assert!(decode_ppm(&bytes).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.2]);
    }
}
