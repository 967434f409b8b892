//! One contiguous id space for bytes, pix tokens and special tokens.
//!
//! ```text
//! [0, 256)                 word tokens (raw bytes)
//! [256, 256 + V)           pix tokens, V = (256 / f)^3
//! 256 + V                  pad pix
//! 256 + V + 1 .. + 4       Bos, Eos, ImgStart, ImgEnd
//! ```

use std::fmt;

use thiserror::Error;

use crate::tokenizer::FoldingFactor;
use crate::window::WindowGrid;

pub const WORD_COUNT: u32 = 256;
pub const SPECIAL_COUNT: u32 = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("unified id {id} out of range (total vocab {total})")]
    InvalidId { id: u32, total: u32 },
    #[error("{token} is out of range for folding factor {factor}")]
    InvalidToken { token: UnifiedToken, factor: u32 },
    #[error("id {id} is not a {expected} token")]
    UnexpectedKind { id: u32, expected: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnifiedToken {
    Word(u8),
    Pix(u32),
    PadPix,
    Bos,
    Eos,
    ImgStart,
    ImgEnd,
}

impl fmt::Display for UnifiedToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnifiedToken::Word(b) => write!(f, "Word({b})"),
            UnifiedToken::Pix(p) => write!(f, "Pix({p})"),
            UnifiedToken::PadPix => f.write_str("PadPix"),
            UnifiedToken::Bos => f.write_str("Bos"),
            UnifiedToken::Eos => f.write_str("Eos"),
            UnifiedToken::ImgStart => f.write_str("ImgStart"),
            UnifiedToken::ImgEnd => f.write_str("ImgEnd"),
        }
    }
}

/// Id layout for one folding factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    factor: FoldingFactor,
}

impl Vocab {
    pub fn new(factor: FoldingFactor) -> Self {
        Self { factor }
    }

    pub fn factor(&self) -> FoldingFactor {
        self.factor
    }

    pub fn pix_count(&self) -> u32 {
        self.factor.vocab_size()
    }

    pub fn pix_base(&self) -> u32 {
        WORD_COUNT
    }

    pub fn pad_id(&self) -> u32 {
        WORD_COUNT + self.pix_count()
    }

    pub fn bos_id(&self) -> u32 {
        self.pad_id() + 1
    }

    pub fn eos_id(&self) -> u32 {
        self.pad_id() + 2
    }

    pub fn img_start_id(&self) -> u32 {
        self.pad_id() + 3
    }

    pub fn img_end_id(&self) -> u32 {
        self.pad_id() + 4
    }

    pub fn total(&self) -> u32 {
        WORD_COUNT + self.pix_count() + SPECIAL_COUNT
    }

    pub fn to_unified(&self, token: UnifiedToken) -> Result<u32, VocabError> {
        Ok(match token {
            UnifiedToken::Word(b) => u32::from(b),
            UnifiedToken::Pix(p) if p < self.pix_count() => WORD_COUNT + p,
            UnifiedToken::Pix(_) => {
                return Err(VocabError::InvalidToken {
                    token,
                    factor: self.factor.value(),
                })
            }
            UnifiedToken::PadPix => self.pad_id(),
            UnifiedToken::Bos => self.bos_id(),
            UnifiedToken::Eos => self.eos_id(),
            UnifiedToken::ImgStart => self.img_start_id(),
            UnifiedToken::ImgEnd => self.img_end_id(),
        })
    }

    pub fn from_unified(&self, id: u32) -> Result<UnifiedToken, VocabError> {
        let pad = self.pad_id();
        Ok(match id {
            _ if id < WORD_COUNT => UnifiedToken::Word(id as u8),
            _ if id < pad => UnifiedToken::Pix(id - WORD_COUNT),
            _ if id == pad => UnifiedToken::PadPix,
            _ if id == pad + 1 => UnifiedToken::Bos,
            _ if id == pad + 2 => UnifiedToken::Eos,
            _ if id == pad + 3 => UnifiedToken::ImgStart,
            _ if id == pad + 4 => UnifiedToken::ImgEnd,
            _ => {
                return Err(VocabError::InvalidId {
                    id,
                    total: self.total(),
                })
            }
        })
    }

    pub fn is_pix(&self, id: u32) -> bool {
        (WORD_COUNT..self.pad_id()).contains(&id)
    }

    /// Row in the image-side embedding table (pix ids then pad), if any.
    pub fn image_row(&self, id: u32) -> Option<usize> {
        (WORD_COUNT..=self.pad_id())
            .contains(&id)
            .then(|| (id - WORD_COUNT) as usize)
    }

    /// Row in the text-side embedding table (bytes then Bos, Eos, ImgStart,
    /// ImgEnd), if any.
    pub fn text_row(&self, id: u32) -> Option<usize> {
        if id < WORD_COUNT {
            Some(id as usize)
        } else if id > self.pad_id() && id < self.total() {
            Some((id - self.pad_id() - 1 + WORD_COUNT) as usize)
        } else {
            None
        }
    }

    pub fn image_rows(&self) -> usize {
        self.pix_count() as usize + 1
    }

    pub fn text_rows(&self) -> usize {
        (WORD_COUNT + SPECIAL_COUNT - 1) as usize
    }

    /// Prints the id range table.
    pub fn range_table(&self) -> String {
        let pad = self.pad_id();
        format!(
            "folding factor {f}\n\
             kind      first     last      count\n\
             word      {w0:<9} {w1:<9} {wc}\n\
             pix       {p0:<9} {p1:<9} {pc}\n\
             pad_pix   {pad:<9} {pad:<9} 1\n\
             bos       {b:<9} {b:<9} 1\n\
             eos       {e:<9} {e:<9} 1\n\
             img_start {s:<9} {s:<9} 1\n\
             img_end   {x:<9} {x:<9} 1\n\
             total     {t}\n",
            f = self.factor,
            w0 = 0,
            w1 = WORD_COUNT - 1,
            wc = WORD_COUNT,
            p0 = WORD_COUNT,
            p1 = pad - 1,
            pc = self.pix_count(),
            b = self.bos_id(),
            e = self.eos_id(),
            s = self.img_start_id(),
            x = self.img_end_id(),
            t = self.total(),
        )
    }

    pub fn encode_image(&self, wg: &WindowGrid) -> Result<ImageSpan, VocabError> {
        let pad = wg.factor.vocab_size();
        let windows = wg
            .windows
            .iter()
            .map(|win| {
                win.iter()
                    .map(|&t| {
                        if t == pad {
                            Ok(self.pad_id())
                        } else {
                            self.to_unified(UnifiedToken::Pix(t))
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ImageSpan {
            windows_x: wg.windows_x,
            windows_y: wg.windows_y,
            window_size: wg.window_size,
            orig_width: wg.orig_width,
            orig_height: wg.orig_height,
            windows,
        })
    }

    pub fn decode_image(&self, span: &ImageSpan) -> Result<WindowGrid, VocabError> {
        let windows = span
            .windows
            .iter()
            .map(|win| {
                win.iter()
                    .map(|&id| match self.from_unified(id)? {
                        UnifiedToken::Pix(p) => Ok(p),
                        UnifiedToken::PadPix => Ok(self.pix_count()),
                        _ => Err(VocabError::UnexpectedKind {
                            id,
                            expected: "pix",
                        }),
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(WindowGrid {
            windows_x: span.windows_x,
            windows_y: span.windows_y,
            window_size: span.window_size,
            orig_width: span.orig_width,
            orig_height: span.orig_height,
            factor: self.factor,
            windows,
        })
    }
}

pub fn encode_text(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

pub fn decode_text(ids: &[u32]) -> Result<Vec<u8>, VocabError> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| VocabError::UnexpectedKind {
                id,
                expected: "word",
            })
        })
        .collect()
}

/// An image as per-window unified id sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSpan {
    pub windows_x: usize,
    pub windows_y: usize,
    pub window_size: usize,
    pub orig_width: usize,
    pub orig_height: usize,
    pub windows: Vec<Vec<u32>>,
}

impl ImageSpan {
    /// Flat form: `[ImgStart, window 0 .., window 1 .., ..., ImgEnd]`.
    pub fn to_ids(&self, vocab: &Vocab) -> Vec<u32> {
        let mut ids = Vec::with_capacity(2 + self.windows.iter().map(Vec::len).sum::<usize>());
        ids.push(vocab.img_start_id());
        for w in &self.windows {
            ids.extend_from_slice(w);
        }
        ids.push(vocab.img_end_id());
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::FoldedImage;
    use crate::window::{pad_and_partition, partition};

    fn vocab(f: u32) -> Vocab {
        Vocab::new(FoldingFactor::new(f).unwrap())
    }

    #[test]
    fn layout_examples() {
        let v = vocab(16);
        assert_eq!(v.to_unified(UnifiedToken::Word(65)).unwrap(), 65);
        assert_eq!(v.to_unified(UnifiedToken::Pix(0)).unwrap(), 256);
        assert_eq!(v.to_unified(UnifiedToken::PadPix).unwrap(), 4352);
        assert_eq!(v.total(), 256 + 4096 + 5);
        assert_eq!(vocab(32).total(), 773);
    }

    #[test]
    fn out_of_range() {
        let v = vocab(32);
        assert!(matches!(
            v.from_unified(773),
            Err(VocabError::InvalidId {
                id: 773,
                total: 773
            })
        ));
        assert!(v.to_unified(UnifiedToken::Pix(512)).is_err());
    }

    #[test]
    fn bijection_is_exhaustive() {
        for f in [16, 32] {
            let v = vocab(f);
            let mut text_rows = vec![false; v.text_rows()];
            let mut image_rows = vec![false; v.image_rows()];
            for id in 0..v.total() {
                let tok = v.from_unified(id).unwrap();
                assert_eq!(v.to_unified(tok).unwrap(), id);
                // each id owns exactly one embedding row on exactly one side
                match (v.text_row(id), v.image_row(id)) {
                    (Some(r), None) => {
                        assert!(!text_rows[r]);
                        text_rows[r] = true;
                    }
                    (None, Some(r)) => {
                        assert!(!image_rows[r]);
                        image_rows[r] = true;
                    }
                    other => panic!("id {id} maps to {other:?}"),
                }
                assert_eq!(v.is_pix(id), matches!(tok, UnifiedToken::Pix(_)));
            }
            assert!(text_rows.iter().all(|&b| b) && image_rows.iter().all(|&b| b));
        }
    }

    #[test]
    fn text_encoding() {
        assert!(encode_text(b"").is_empty());
        assert_eq!(encode_text(b"hi"), vec![104, 105]);
        assert_eq!(decode_text(&encode_text(b"hello")).unwrap(), b"hello");
        assert!(decode_text(&[300]).is_err());
    }

    #[test]
    fn single_window_image_encoding() {
        let f = FoldingFactor::new(16).unwrap();
        let v = Vocab::new(f);
        let img = FoldedImage::new(4, 4, f, vec![0; 16]).unwrap();
        let span = v.encode_image(&partition(&img, 4).unwrap()).unwrap();
        let mut expected = vec![v.img_start_id()];
        expected.extend(std::iter::repeat_n(256, 16));
        expected.push(v.img_end_id());
        assert_eq!(span.to_ids(&v), expected);
    }

    #[test]
    fn image_encoding_round_trips_with_pads() {
        let f = FoldingFactor::new(32).unwrap();
        let v = Vocab::new(f);
        let img = FoldedImage::new(5, 3, f, (0..15).collect()).unwrap();
        let wg = pad_and_partition(&img, 4).unwrap();
        let span = v.encode_image(&wg).unwrap();
        assert!(span.windows[0].contains(&v.pad_id()));
        assert_eq!(v.decode_image(&span).unwrap(), wg);
    }
}
