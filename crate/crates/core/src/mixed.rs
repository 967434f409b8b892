//! `UPWMIX1` container of interleaved text and image records.
//!
//! ```text
//! header:  magic "UPWMIX1\0" (8) | version u32 = 1 | record count u64
//! record:  tag u8 (0 = text, 1 = image) | payload
//! text:    length u64 | UTF-8 bytes
//! image:   width u32 | height u32 | width * height * 3 RGB bytes
//! ```
//! Little-endian, uncompressed, no trailing bytes. [`MixedReader`] decodes
//! one record at a time from any [`Read`].

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::tokenizer::RgbImage;

pub const MIXED_MAGIC: &[u8; 8] = b"UPWMIX1\0";
pub const MIXED_VERSION: u32 = 1;
/// Largest payload a single record may declare.
pub const MAX_PAYLOAD: u64 = 1 << 32;

const TAG_TEXT: u8 = 0;
const TAG_IMAGE: u8 = 1;

#[derive(Debug, Error)]
pub enum MixedError {
    #[error("bad magic: not a mixed container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated {what} at byte offset {offset}")]
    Truncated { what: &'static str, offset: u64 },
    #[error("invalid UTF-8 in text record at byte offset {offset}")]
    InvalidUtf8 { offset: u64 },
    #[error("corrupt record at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl MixedError {
    /// Coarse category name used by the CLI and tests.
    pub fn kind(&self) -> &'static str {
        match self {
            MixedError::BadMagic | MixedError::UnsupportedVersion(_) => "format",
            MixedError::Truncated { .. } => "truncation",
            MixedError::InvalidUtf8 { .. } => "encoding",
            MixedError::Corrupt { .. } => "corruption",
            MixedError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MixedRecord {
    Text(String),
    Image(RgbImage),
}

pub fn write_mixed_to<W: Write>(mut w: W, records: &[MixedRecord]) -> io::Result<()> {
    w.write_all(MIXED_MAGIC)?;
    w.write_all(&MIXED_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        match r {
            MixedRecord::Text(s) => {
                w.write_all(&[TAG_TEXT])?;
                w.write_all(&(s.len() as u64).to_le_bytes())?;
                w.write_all(s.as_bytes())?;
            }
            MixedRecord::Image(img) => {
                w.write_all(&[TAG_IMAGE])?;
                w.write_all(&(img.width() as u32).to_le_bytes())?;
                w.write_all(&(img.height() as u32).to_le_bytes())?;
                w.write_all(img.data())?;
            }
        }
    }
    Ok(())
}

pub fn write_mixed(records: &[MixedRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    write_mixed_to(&mut out, records).expect("writing to a Vec cannot fail");
    out
}

pub fn read_mixed(bytes: &[u8]) -> Result<Vec<MixedRecord>, MixedError> {
    MixedReader::new(bytes)?.collect()
}

/// Streaming decoder; yields each record in file order, then checks that
/// the input ends exactly after the declared count.
pub struct MixedReader<R> {
    inner: R,
    offset: u64,
    remaining: u64,
    declared: u64,
    done: bool,
}

impl<R: Read> MixedReader<R> {
    pub fn new(inner: R) -> Result<Self, MixedError> {
        let mut r = Self {
            inner,
            offset: 0,
            remaining: 0,
            declared: 0,
            done: false,
        };
        let mut magic = [0u8; 8];
        let got = r.fill(&mut magic)?;
        if got < 8 || &magic != MIXED_MAGIC {
            return Err(MixedError::BadMagic);
        }
        let version = u32::from_le_bytes(r.array("version")?);
        if version != MIXED_VERSION {
            return Err(MixedError::UnsupportedVersion(version));
        }
        r.declared = u64::from_le_bytes(r.array("record count")?);
        r.remaining = r.declared;
        Ok(r)
    }

    /// Number of records the header declares.
    pub fn declared_count(&self) -> u64 {
        self.declared
    }

    /// Bytes consumed so far.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Reads until `buf` is full or the input ends; returns bytes read.
    fn fill(&mut self, buf: &mut [u8]) -> Result<usize, MixedError> {
        let mut n = 0;
        while n < buf.len() {
            match self.inner.read(&mut buf[n..]) {
                Ok(0) => break,
                Ok(k) => n += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += n as u64;
        Ok(n)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], MixedError> {
        let at = self.offset;
        let mut buf = [0u8; N];
        if self.fill(&mut buf)? < N {
            return Err(MixedError::Truncated { what, offset: at });
        }
        Ok(buf)
    }

    fn payload(&mut self, len: u64, what: &'static str) -> Result<Vec<u8>, MixedError> {
        let at = self.offset;
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(len).read_to_end(&mut buf)?;
        self.offset += got as u64;
        if (got as u64) < len {
            return Err(MixedError::Truncated { what, offset: at });
        }
        Ok(buf)
    }

    fn record(&mut self) -> Result<MixedRecord, MixedError> {
        let start = self.offset;
        let [tag] = self.array::<1>("record tag")?;
        match tag {
            TAG_TEXT => {
                let len = u64::from_le_bytes(self.array("text length")?);
                if len > MAX_PAYLOAD {
                    return Err(MixedError::Corrupt {
                        offset: start,
                        reason: format!("text length {len} exceeds {MAX_PAYLOAD}"),
                    });
                }
                let body_at = self.offset;
                let bytes = self.payload(len, "text payload")?;
                String::from_utf8(bytes)
                    .map(MixedRecord::Text)
                    .map_err(|_| MixedError::InvalidUtf8 { offset: body_at })
            }
            TAG_IMAGE => {
                let w = u32::from_le_bytes(self.array("image width")?);
                let h = u32::from_le_bytes(self.array("image height")?);
                let len = u64::from(w)
                    .checked_mul(u64::from(h))
                    .and_then(|n| n.checked_mul(3))
                    .filter(|&n| n <= MAX_PAYLOAD);
                let len = match len {
                    Some(n) if w > 0 && h > 0 => n,
                    _ => {
                        return Err(MixedError::Corrupt {
                            offset: start,
                            reason: format!("image dimensions {w}x{h} do not fit a payload"),
                        })
                    }
                };
                let data = self.payload(len, "image payload")?;
                RgbImage::new(w as usize, h as usize, data)
                    .map(MixedRecord::Image)
                    .map_err(|e| MixedError::Corrupt {
                        offset: start,
                        reason: e.to_string(),
                    })
            }
            other => Err(MixedError::Corrupt {
                offset: start,
                reason: format!("unknown record tag {other}"),
            }),
        }
    }
}

impl<R: Read> Iterator for MixedReader<R> {
    type Item = Result<MixedRecord, MixedError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.remaining == 0 {
            self.done = true;
            let at = self.offset;
            let mut probe = [0u8; 1];
            return match self.fill(&mut probe) {
                Ok(0) => None,
                Ok(_) => Some(Err(MixedError::Corrupt {
                    offset: at,
                    reason: format!("trailing bytes after {} declared records", self.declared),
                })),
                Err(e) => Some(Err(e)),
            };
        }
        self.remaining -= 1;
        let r = self.record();
        if r.is_err() {
            self.done = true;
        }
        Some(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: usize, h: usize) -> RgbImage {
        RgbImage::new(w, h, (0..w * h * 3).map(|i| i as u8).collect()).unwrap()
    }

    #[test]
    fn empty_container() {
        let bytes = write_mixed(&[]);
        assert_eq!(bytes.len(), 8 + 4 + 8);
        assert_eq!(&bytes[..8], MIXED_MAGIC);
        assert!(read_mixed(&bytes).unwrap().is_empty());
    }

    #[test]
    fn text_and_image_round_trip() {
        let records = vec![
            MixedRecord::Image(image(2, 2)),
            MixedRecord::Text("caption".into()),
        ];
        let bytes = write_mixed(&records);
        assert_eq!(read_mixed(&bytes).unwrap(), records);
        let streamed: Vec<_> = MixedReader::new(&bytes[..])
            .unwrap()
            .map(Result::unwrap)
            .collect();
        assert_eq!(streamed, records);
        assert_eq!(
            read_mixed(&write_mixed(&[MixedRecord::Text("hi".into())]))
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn bad_magic() {
        let mut bytes = write_mixed(&[]);
        bytes[0] = b'X';
        assert!(matches!(read_mixed(&bytes), Err(MixedError::BadMagic)));
        assert!(matches!(read_mixed(b"UPW"), Err(MixedError::BadMagic)));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = write_mixed(&[MixedRecord::Text("hello".into())]);
        // header 20 + tag 1 + len 8 = 29; cut inside the payload
        let err = read_mixed(&bytes[..31]).unwrap_err();
        assert!(
            matches!(err, MixedError::Truncated { offset: 29, .. }),
            "{err}"
        );
        let err = read_mixed(&bytes[..15]).unwrap_err();
        assert!(
            matches!(err, MixedError::Truncated { offset: 12, .. }),
            "{err}"
        );
    }

    #[test]
    fn invalid_utf8() {
        let mut bytes = write_mixed(&[MixedRecord::Text("ab".into())]);
        let n = bytes.len();
        bytes[n - 1] = 0xff;
        assert!(matches!(
            read_mixed(&bytes),
            Err(MixedError::InvalidUtf8 { offset: 29 })
        ));
    }

    #[test]
    fn overflowing_dimensions_are_corruption() {
        let mut bytes = write_mixed(&[MixedRecord::Image(image(1, 1))]);
        bytes[21..25].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[25..29].copy_from_slice(&u32::MAX.to_le_bytes());
        let err = read_mixed(&bytes).unwrap_err();
        assert_eq!(err.kind(), "corruption");
        bytes[21..25].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(read_mixed(&bytes).unwrap_err().kind(), "corruption");
    }

    #[test]
    fn count_must_match_contents() {
        let mut bytes = write_mixed(&[MixedRecord::Text("a".into())]);
        bytes[12..20].copy_from_slice(&0u64.to_le_bytes());
        assert_eq!(read_mixed(&bytes).unwrap_err().kind(), "corruption");
        bytes[12..20].copy_from_slice(&2u64.to_le_bytes());
        assert_eq!(read_mixed(&bytes).unwrap_err().kind(), "truncation");
        let mut bytes = write_mixed(&[]);
        bytes[8] = 2;
        assert!(matches!(
            read_mixed(&bytes),
            Err(MixedError::UnsupportedVersion(2))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn record() -> impl Strategy<Value = MixedRecord> {
            prop_oneof![
                ".{0,40}".prop_map(MixedRecord::Text),
                (1usize..5, 1usize..5)
                    .prop_flat_map(|(w, h)| (
                        Just(w),
                        Just(h),
                        prop::collection::vec(any::<u8>(), w * h * 3)
                    ))
                    .prop_map(|(w, h, d)| MixedRecord::Image(RgbImage::new(w, h, d).unwrap())),
            ]
        }

        proptest! {
            #[test]
            fn arbitrary_sequences_round_trip(records in prop::collection::vec(record(), 0..8)) {
                let bytes = write_mixed(&records);
                prop_assert_eq!(&read_mixed(&bytes).unwrap(), &records);
                let streamed: Result<Vec<_>, _> = MixedReader::new(&bytes[..]).unwrap().collect();
                prop_assert_eq!(streamed.unwrap(), records);
            }

            #[test]
            fn every_strict_prefix_is_rejected(records in prop::collection::vec(record(), 1..4), cut in any::<prop::sample::Index>()) {
                let bytes = write_mixed(&records);
                let n = cut.index(bytes.len());
                prop_assert!(read_mixed(&bytes[..n]).is_err());
            }
        }
    }
}
