//! Binary greymap (`P5`) decoding and encoding.

use std::path::Path;

use super::DataError;

/// Decoded 8-bit greyscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(DataError::InvalidArgument(format!(
                "{width}×{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Sub-rectangle copy; the caller guarantees the box lies inside the image.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self, DataError> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(DataError::InvalidArgument(format!(
                "crop {w}×{h}+{x}+{y} outside {}×{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for row in y..y + h {
            pixels.extend_from_slice(&self.pixels[row * self.width + x..row * self.width + x + w]);
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("missing {what} in header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| format!("{what} out of range"))
    }
}

fn parse(bytes: &[u8]) -> Result<RawImage, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(format!("expected binary PGM magic \"P5\", found {magic:?}"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, found {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err(format!("degenerate extents {width}×{height}"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err("missing separator after maxval".into()),
    }
    let need = width
        .checked_mul(height)
        .ok_or_else(|| format!("extents {width}×{height} overflow"))?;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(format!("truncated raster: need {need} bytes, found {}", payload.len()));
    }
    Ok(RawImage {
        width,
        height,
        pixels: payload[..need].to_vec(),
    })
}

/// Decodes an in-memory PGM; `origin` names the source in errors.
pub fn decode_pgm(bytes: &[u8], origin: &str) -> Result<RawImage, DataError> {
    parse(bytes).map_err(|reason| DataError::Format {
        path: origin.to_string(),
        reason,
    })
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<RawImage, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_pgm(&bytes, &path.display().to_string())
}

pub fn encode_pgm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn save_pgm(img: &RawImage, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_minimal_image() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 64]);
        let img = decode_pgm(&bytes, "mem").unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![0, 128, 255, 64]);
    }

    #[test]
    fn skips_header_comments() {
        let mut bytes = b"P5\n# made by hand\n3 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        let img = decode_pgm(&bytes, "mem").unwrap();
        assert_eq!(img.pixels, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_wrong_magic_and_maxval_and_truncation() {
        let err = decode_pgm(b"P6 1 1 255\n\0\0\0", "x.ppm").unwrap_err();
        assert!(err.to_string().contains("x.ppm"), "{err}");
        assert!(decode_pgm(b"P5 1 1 65535\n\0\0", "m").is_err());
        assert!(decode_pgm(b"P5 2 2 255\n\0\0\0", "m").is_err());
        assert!(decode_pgm(b"P5 2", "m").is_err());
        assert!(decode_pgm(b"", "m").is_err());
    }

    #[test]
    fn encode_then_decode() {
        let img = RawImage::new(3, 2, vec![9, 8, 7, 6, 5, 4]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&img), "mem").unwrap(), img);
    }

    #[test]
    fn crop_bounds() {
        let img = RawImage::new(3, 3, (0..9).collect()).unwrap();
        assert_eq!(img.crop(1, 1, 2, 2).unwrap().pixels, vec![4, 5, 7, 8]);
        assert!(img.crop(2, 2, 2, 1).is_err());
    }
}
