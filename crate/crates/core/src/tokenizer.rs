//! Color folding: uniform per-channel quantization of 8-bit RGB into pix tokens.
//!
//! A folding factor `f` collapses each channel into `256 / f` half-open bins
//! `[k*f, (k+1)*f)`. The three bin indices are packed R-major:
//! `id = r_bin * B^2 + g_bin * B + b_bin` with `B = 256 / f`.

use std::fmt;

use thiserror::Error;

use crate::parallel::{self, Execution};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("invalid folding factor {0}; valid factors are {{2, 4, 8, 16, 32}}")]
    InvalidFactor(u32),
    #[error("pix token {id} out of range for folding factor {factor} (vocab size {vocab})")]
    InvalidToken { id: u32, factor: u32, vocab: u32 },
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("raster length {actual} does not match {width}x{height}x{channels}")]
    RasterSize {
        width: usize,
        height: usize,
        channels: usize,
        actual: usize,
    },
}

/// Per-channel quantization step. Only the divisors of 256 listed in
/// [`FoldingFactor::ALL`] are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FoldingFactor(u32);

impl FoldingFactor {
    pub const ALL: [FoldingFactor; 5] = [
        FoldingFactor(2),
        FoldingFactor(4),
        FoldingFactor(8),
        FoldingFactor(16),
        FoldingFactor(32),
    ];

    pub fn new(value: u32) -> Result<Self, TokenizerError> {
        Self::ALL
            .iter()
            .copied()
            .find(|f| f.0 == value)
            .ok_or(TokenizerError::InvalidFactor(value))
    }

    pub fn value(self) -> u32 {
        self.0
    }

    /// Bins per channel, `256 / f`.
    pub fn bins(self) -> u32 {
        256 / self.0
    }

    /// Number of distinct pix tokens, `(256 / f)^3`.
    pub fn vocab_size(self) -> u32 {
        let b = self.bins();
        b * b * b
    }
}

impl fmt::Display for FoldingFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<u32> for FoldingFactor {
    type Error = TokenizerError;

    fn try_from(value: u32) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

pub fn vocab_size(f: FoldingFactor) -> usize {
    f.vocab_size() as usize
}

/// Id of one folded color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixToken(u32);

impl PixToken {
    pub fn new(id: u32, f: FoldingFactor) -> Result<Self, TokenizerError> {
        if id < f.vocab_size() {
            Ok(PixToken(id))
        } else {
            Err(TokenizerError::InvalidToken {
                id,
                factor: f.value(),
                vocab: f.vocab_size(),
            })
        }
    }

    pub fn id(self) -> u32 {
        self.0
    }
}

pub fn fold_pixel(rgb: [u8; 3], f: FoldingFactor) -> PixToken {
    let b = f.bins();
    let fv = f.value();
    let [r, g, bl] = rgb.map(|c| u32::from(c) / fv);
    PixToken(r * b * b + g * b + bl)
}

/// Bin-midpoint color of a token.
pub fn unfold_token(t: PixToken, f: FoldingFactor) -> Result<[u8; 3], TokenizerError> {
    let t = PixToken::new(t.0, f)?;
    Ok(unfold_id(t.0, f))
}

fn unfold_id(id: u32, f: FoldingFactor) -> [u8; 3] {
    let b = f.bins();
    let fv = f.value();
    let half = fv / 2;
    let bins = [id / (b * b), (id / b) % b, id % b];
    // largest value is 256 - f/2
    bins.map(|k| (k * fv + half) as u8)
}

/// 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, TokenizerError> {
        if width == 0 || height == 0 {
            return Err(TokenizerError::EmptyImage);
        }
        if data.len() != width * height * 3 {
            return Err(TokenizerError::RasterSize {
                width,
                height,
                channels: 3,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Grayscale samples replicated into all three channels.
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self, TokenizerError> {
        if gray.len() != width * height {
            return Err(TokenizerError::RasterSize {
                width,
                height,
                channels: 1,
                actual: gray.len(),
            });
        }
        let data = gray.iter().flat_map(|&v| [v, v, v]).collect();
        Self::new(width, height, data)
    }

    pub fn from_pixels(
        width: usize,
        height: usize,
        pixels: &[[u8; 3]],
    ) -> Result<Self, TokenizerError> {
        Self::new(width, height, pixels.iter().flatten().copied().collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }
}

/// Row-major grid of pix token ids produced under one folding factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldedImage {
    width: usize,
    height: usize,
    factor: FoldingFactor,
    tokens: Vec<u32>,
}

impl FoldedImage {
    pub fn new(
        width: usize,
        height: usize,
        factor: FoldingFactor,
        tokens: Vec<u32>,
    ) -> Result<Self, TokenizerError> {
        if width == 0 || height == 0 {
            return Err(TokenizerError::EmptyImage);
        }
        if tokens.len() != width * height {
            return Err(TokenizerError::RasterSize {
                width,
                height,
                channels: 1,
                actual: tokens.len(),
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= factor.vocab_size()) {
            return Err(TokenizerError::InvalidToken {
                id,
                factor: factor.value(),
                vocab: factor.vocab_size(),
            });
        }
        Ok(Self {
            width,
            height,
            factor,
            tokens,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn factor(&self) -> FoldingFactor {
        self.factor
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<u32> {
        self.tokens
    }
}

pub fn fold_image(img: &RgbImage, f: FoldingFactor) -> Result<FoldedImage, TokenizerError> {
    fold_image_with(img, f, Execution::Sequential)
}

/// [`fold_image`] with an explicit execution strategy; rows are folded
/// independently so the result does not depend on the strategy.
pub fn fold_image_with(
    img: &RgbImage,
    f: FoldingFactor,
    exec: Execution,
) -> Result<FoldedImage, TokenizerError> {
    if img.width == 0 || img.height == 0 {
        return Err(TokenizerError::EmptyImage);
    }
    let rows: Vec<&[u8]> = img.data.chunks_exact(img.width * 3).collect();
    let folded = parallel::map_ordered(&rows, exec, |row| {
        row.chunks_exact(3)
            .map(|c| fold_pixel([c[0], c[1], c[2]], f).0)
            .collect::<Vec<u32>>()
    });
    Ok(FoldedImage {
        width: img.width,
        height: img.height,
        factor: f,
        tokens: folded.concat(),
    })
}

pub fn unfold_image(fi: &FoldedImage) -> RgbImage {
    let data = fi
        .tokens
        .iter()
        .flat_map(|&t| unfold_id(t, fi.factor))
        .collect();
    RgbImage {
        width: fi.width,
        height: fi.height,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(v: u32) -> FoldingFactor {
        FoldingFactor::new(v).unwrap()
    }

    #[test]
    fn table_of_vocab_sizes() {
        let expected = [
            (2, 2_097_152),
            (4, 262_144),
            (8, 32_768),
            (16, 4096),
            (32, 512),
        ];
        for (factor, total) in expected {
            assert_eq!(vocab_size(f(factor)), total);
        }
    }

    #[test]
    fn rejects_non_listed_factors() {
        for bad in [0, 1, 3, 64, 128, 256] {
            assert_eq!(
                FoldingFactor::new(bad),
                Err(TokenizerError::InvalidFactor(bad))
            );
        }
    }

    #[test]
    fn fold_examples() {
        assert_eq!(fold_pixel([0, 0, 0], f(16)).id(), 0);
        assert_eq!(fold_pixel([255, 255, 255], f(16)).id(), 4095);
        assert_eq!(fold_pixel([128, 64, 32], f(16)).id(), 2114);
        assert_eq!(
            fold_pixel([31, 31, 31], f(32)),
            fold_pixel([0, 0, 0], f(32))
        );
    }

    #[test]
    fn unfold_examples() {
        assert_eq!(unfold_token(PixToken(0), f(2)).unwrap(), [1, 1, 1]);
        assert_eq!(unfold_token(PixToken(2114), f(16)).unwrap(), [136, 72, 40]);
        assert_eq!(
            unfold_token(PixToken(4095), f(16)).unwrap(),
            [248, 248, 248]
        );
    }

    #[test]
    fn unfold_rejects_out_of_range() {
        let err = unfold_token(PixToken(512), f(32)).unwrap_err();
        assert!(matches!(err, TokenizerError::InvalidToken { id: 512, .. }));
    }

    #[test]
    fn corner_colors_at_32() {
        let img = RgbImage::from_pixels(2, 2, &[[0, 0, 0], [0, 0, 255], [0, 255, 0], [255, 0, 0]])
            .unwrap();
        let fi = fold_image(&img, f(32)).unwrap();
        assert_eq!(fi.tokens(), &[0, 7, 56, 448]);
    }

    #[test]
    fn single_pixel_image() {
        let img = RgbImage::from_pixels(1, 1, &[[0, 0, 0]]).unwrap();
        let fi = fold_image(&img, f(16)).unwrap();
        assert_eq!((fi.width(), fi.height(), fi.tokens()), (1, 1, &[0u32][..]));
    }

    #[test]
    fn empty_image_rejected() {
        assert_eq!(RgbImage::new(0, 3, vec![]), Err(TokenizerError::EmptyImage));
        assert_eq!(
            FoldedImage::new(2, 0, f(16), vec![]),
            Err(TokenizerError::EmptyImage)
        );
    }

    #[test]
    fn grayscale_is_replicated() {
        let img = RgbImage::from_gray(2, 1, &[10, 200]).unwrap();
        assert_eq!(img.data(), &[10, 10, 10, 200, 200, 200]);
    }

    #[test]
    fn surjective_and_round_trips_exhaustively() {
        for factor in [f(16), f(32)] {
            let v = factor.vocab_size() as usize;
            let mut hits = vec![0u32; v];
            for r in 0..=255u8 {
                for g in 0..=255u8 {
                    for b in 0..=255u8 {
                        hits[fold_pixel([r, g, b], factor).id() as usize] += 1;
                    }
                }
            }
            let per_bin = factor.value().pow(3);
            assert!(hits.iter().all(|&h| h == per_bin));
            for id in 0..v as u32 {
                let rgb = unfold_token(PixToken(id), factor).unwrap();
                assert_eq!(fold_pixel(rgb, factor).id(), id);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let data: Vec<u8> = (0..(17 * 9 * 3)).map(|i| (i * 37 % 256) as u8).collect();
        let img = RgbImage::new(17, 9, data).unwrap();
        let a = fold_image_with(&img, f(8), Execution::Sequential).unwrap();
        let b = fold_image_with(&img, f(8), Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn factor() -> impl Strategy<Value = FoldingFactor> {
            prop::sample::select(FoldingFactor::ALL.to_vec())
        }

        proptest! {
            #[test]
            fn in_bin_perturbation_keeps_token(rgb in any::<[u8; 3]>(), off in any::<[u8; 3]>(), fac in factor()) {
                let fv = fac.value();
                let moved = [0, 1, 2].map(|i| {
                    let base = u32::from(rgb[i]) / fv * fv;
                    (base + u32::from(off[i]) % fv) as u8
                });
                prop_assert_eq!(fold_pixel(rgb, fac), fold_pixel(moved, fac));
            }

            #[test]
            fn quantization_is_idempotent(
                (w, h, data) in (1usize..6, 1usize..6)
                    .prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(any::<u8>(), w * h * 3))),
                fac in factor()
            ) {
                let img = RgbImage::new(w, h, data).unwrap();
                let once = fold_image(&img, fac).unwrap();
                let twice = fold_image(&unfold_image(&once), fac).unwrap();
                prop_assert_eq!(once, twice);
            }
        }
    }
}
