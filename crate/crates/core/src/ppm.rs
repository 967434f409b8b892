//! Binary PPM (P6) reader/writer. P5 grayscale input is accepted and
//! replicated to RGB. Only `maxval = 255` is supported.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tokenizer::{RgbImage, TokenizerError};

#[derive(Debug, Error)]
pub enum PpmError {
    #[error("not a binary PPM/PGM file (magic {0:?})")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported maxval {0}; only 255 is supported")]
    MaxVal(u32),
    #[error("raster truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error(transparent)]
    Image(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String, PpmError> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(PpmError::Header("unexpected end of header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, PpmError> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| PpmError::Header(format!("bad {what} `{tok}`")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, PpmError> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(PpmError::BadMagic(magic)),
    };
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(PpmError::MaxVal(maxval as u32));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PpmError::Header("missing separator after maxval".into()));
    }
    pos += 1;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| PpmError::Header("dimensions overflow".into()))?;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            actual: raster.len(),
        });
    }
    let raster = &raster[..expected];
    Ok(if channels == 3 {
        RgbImage::new(width, height, raster.to_vec())?
    } else {
        RgbImage::from_gray(width, height, raster)?
    })
}

pub fn read_ppm<R: Read>(mut r: R) -> Result<RgbImage, PpmError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_ppm(&bytes)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn write_ppm<W: Write>(mut w: W, img: &RgbImage) -> io::Result<()> {
    w.write_all(&encode_ppm(img))
}

pub fn load_ppm(path: &Path) -> Result<RgbImage, PpmError> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn save_ppm(path: &Path, img: &RgbImage) -> Result<(), PpmError> {
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_canonical_header() {
        let img = RgbImage::new(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(encode_ppm(&img), b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06");
    }

    #[test]
    fn reads_comments_and_gray() {
        let mut bytes = b"P6 # made by hand\n# another\n1 2\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7, 6, 5, 4]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (1, 2));
        assert_eq!(img.pixel(0, 1), [6, 5, 4]);

        let gray = decode_ppm(b"P5\n2 1\n255\n\x10\x20").unwrap();
        assert_eq!(gray.data(), &[16, 16, 16, 32, 32, 32]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n0 0 0"),
            Err(PpmError::BadMagic(_))
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n"),
            Err(PpmError::MaxVal(65535))
        ));
        assert!(matches!(
            decode_ppm(b"P6\n2 2\n255\n\x00\x00"),
            Err(PpmError::Truncated {
                expected: 12,
                actual: 2
            })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n0 4\n255\n"),
            Err(PpmError::Image(_))
        ));
        assert!(matches!(
            decode_ppm(b"P6\nx 4\n255\n"),
            Err(PpmError::Header(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn encode_decode_round_trip(
                (w, h, data) in (1usize..9, 1usize..9)
                    .prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(any::<u8>(), w * h * 3)))
            ) {
                let img = RgbImage::new(w, h, data).unwrap();
                prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
            }
        }
    }
}
