//! Lossless conversion between folded images and ordered local windows.
//!
//! Images are padded on the right and bottom with a reserved pad id until both
//! sides divide the window size, then cut into non-overlapping square windows.
//! Windows are listed row-major and each window is read row-major, so the
//! token at window `(wx, wy)`, offset `(dx, dy)` is the padded pixel
//! `(wx * ws + dx, wy * ws + dy)`.

use thiserror::Error;

use crate::tokenizer::{FoldedImage, FoldingFactor, TokenizerError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WindowError {
    #[error(
        "{width}x{height} is not a multiple of window size {window_size}; pad the image first"
    )]
    Misaligned {
        width: usize,
        height: usize,
        window_size: usize,
    },
    #[error("sub-window size {sub_size} does not divide window size {window_size}")]
    SubMisaligned { window_size: usize, sub_size: usize },
    #[error("window size must be at least 1")]
    ZeroWindow,
    #[error("window grid is empty")]
    EmptyImage,
    #[error("pad id {pad} is inconsistent with folding factor {factor} (expected {expected})")]
    PadMismatch {
        pad: u32,
        factor: u32,
        expected: u32,
    },
    #[error("window {window} has length {actual}, expected {expected}")]
    WindowLength {
        window: usize,
        actual: usize,
        expected: usize,
    },
    #[error("window grid declares {declared} windows but holds {actual}")]
    WindowCount { declared: usize, actual: usize },
    #[error("corrupt window grid: token {id} at pixel ({x}, {y}) inside the original image")]
    Corruption { id: u32, x: usize, y: usize },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadSpec {
    window_size: usize,
    pad_token_id: u32,
}

impl PadSpec {
    /// Pad spec whose pad id is the first id past the pix range of `factor`.
    pub fn new(window_size: usize, factor: FoldingFactor) -> Result<Self, WindowError> {
        if window_size == 0 {
            return Err(WindowError::ZeroWindow);
        }
        Ok(Self {
            window_size,
            pad_token_id: pad_token_id(factor),
        })
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn pad_token_id(&self) -> u32 {
        self.pad_token_id
    }
}

pub fn pad_token_id(factor: FoldingFactor) -> u32 {
    factor.vocab_size()
}

/// Anything that can be cut into windows.
pub trait TokenGrid {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn tokens(&self) -> &[u32];
    fn factor(&self) -> FoldingFactor;
    /// Dimensions of the image before padding.
    fn orig_dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
}

impl TokenGrid for FoldedImage {
    fn width(&self) -> usize {
        FoldedImage::width(self)
    }
    fn height(&self) -> usize {
        FoldedImage::height(self)
    }
    fn tokens(&self) -> &[u32] {
        FoldedImage::tokens(self)
    }
    fn factor(&self) -> FoldingFactor {
        FoldedImage::factor(self)
    }
}

/// A folded image extended with pad ids on the right and bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedImage {
    width: usize,
    height: usize,
    orig_width: usize,
    orig_height: usize,
    factor: FoldingFactor,
    tokens: Vec<u32>,
}

impl PaddedImage {
    pub fn pad_count(&self) -> usize {
        let pad = pad_token_id(self.factor);
        self.tokens.iter().filter(|&&t| t == pad).count()
    }
}

impl TokenGrid for PaddedImage {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn tokens(&self) -> &[u32] {
        &self.tokens
    }
    fn factor(&self) -> FoldingFactor {
        self.factor
    }
    fn orig_dims(&self) -> (usize, usize) {
        (self.orig_width, self.orig_height)
    }
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

pub fn pad_image(fi: &FoldedImage, spec: PadSpec) -> Result<PaddedImage, WindowError> {
    let expected = pad_token_id(fi.factor());
    if spec.pad_token_id != expected {
        return Err(WindowError::PadMismatch {
            pad: spec.pad_token_id,
            factor: fi.factor().value(),
            expected,
        });
    }
    let (w, h) = (fi.width(), fi.height());
    let ws = spec.window_size;
    let (pw, ph) = (round_up(w, ws), round_up(h, ws));
    let mut tokens = vec![spec.pad_token_id; pw * ph];
    for (y, row) in fi.tokens().chunks_exact(w).enumerate() {
        tokens[y * pw..y * pw + w].copy_from_slice(row);
    }
    Ok(PaddedImage {
        width: pw,
        height: ph,
        orig_width: w,
        orig_height: h,
        factor: fi.factor(),
        tokens,
    })
}

/// Non-overlapping square windows, row-major at both levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowGrid {
    pub windows_x: usize,
    pub windows_y: usize,
    pub window_size: usize,
    pub orig_width: usize,
    pub orig_height: usize,
    pub factor: FoldingFactor,
    pub windows: Vec<Vec<u32>>,
}

impl WindowGrid {
    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    pub fn window_len(&self) -> usize {
        self.window_size * self.window_size
    }
}

pub fn partition<G: TokenGrid + ?Sized>(
    grid: &G,
    window_size: usize,
) -> Result<WindowGrid, WindowError> {
    if window_size == 0 {
        return Err(WindowError::ZeroWindow);
    }
    let (w, h) = (grid.width(), grid.height());
    if w == 0 || h == 0 {
        return Err(WindowError::EmptyImage);
    }
    if w % window_size != 0 || h % window_size != 0 {
        return Err(WindowError::Misaligned {
            width: w,
            height: h,
            window_size,
        });
    }
    let (nx, ny) = (w / window_size, h / window_size);
    let tokens = grid.tokens();
    let mut windows = Vec::with_capacity(nx * ny);
    for wy in 0..ny {
        for wx in 0..nx {
            let mut win = Vec::with_capacity(window_size * window_size);
            for dy in 0..window_size {
                let start = (wy * window_size + dy) * w + wx * window_size;
                win.extend_from_slice(&tokens[start..start + window_size]);
            }
            windows.push(win);
        }
    }
    let (orig_width, orig_height) = grid.orig_dims();
    Ok(WindowGrid {
        windows_x: nx,
        windows_y: ny,
        window_size,
        orig_width,
        orig_height,
        factor: grid.factor(),
        windows,
    })
}

/// Pads as needed and partitions in one call.
pub fn pad_and_partition(fi: &FoldedImage, window_size: usize) -> Result<WindowGrid, WindowError> {
    let spec = PadSpec::new(window_size, fi.factor())?;
    partition(&pad_image(fi, spec)?, window_size)
}

pub fn unpartition(wg: &WindowGrid) -> Result<FoldedImage, WindowError> {
    if wg.windows.is_empty() || wg.windows_x == 0 || wg.windows_y == 0 {
        return Err(WindowError::EmptyImage);
    }
    if wg.window_size == 0 {
        return Err(WindowError::ZeroWindow);
    }
    let declared = wg.windows_x * wg.windows_y;
    if declared != wg.windows.len() {
        return Err(WindowError::WindowCount {
            declared,
            actual: wg.windows.len(),
        });
    }
    let ws = wg.window_size;
    let expected = ws * ws;
    if let Some((i, win)) = wg
        .windows
        .iter()
        .enumerate()
        .find(|(_, w)| w.len() != expected)
    {
        return Err(WindowError::WindowLength {
            window: i,
            actual: win.len(),
            expected,
        });
    }
    let (ow, oh) = (wg.orig_width, wg.orig_height);
    if ow == 0 || oh == 0 {
        return Err(WindowError::EmptyImage);
    }
    if ow > wg.windows_x * ws || oh > wg.windows_y * ws {
        return Err(WindowError::Misaligned {
            width: ow,
            height: oh,
            window_size: ws,
        });
    }
    let vocab = wg.factor.vocab_size();
    let mut tokens = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            let win = &wg.windows[(y / ws) * wg.windows_x + x / ws];
            let id = win[(y % ws) * ws + x % ws];
            if id >= vocab {
                return Err(WindowError::Corruption { id, x, y });
            }
            tokens.push(id);
        }
    }
    Ok(FoldedImage::new(ow, oh, wg.factor, tokens)?)
}

fn check_sub(window_len: usize, window_size: usize, sub_size: usize) -> Result<(), WindowError> {
    if sub_size == 0 || !window_size.is_multiple_of(sub_size) {
        return Err(WindowError::SubMisaligned {
            window_size,
            sub_size,
        });
    }
    if window_len != window_size * window_size {
        return Err(WindowError::WindowLength {
            window: 0,
            actual: window_len,
            expected: window_size * window_size,
        });
    }
    Ok(())
}

/// Index of the sub-window holding raster position `pos` of a window.
pub fn sub_window_of(pos: usize, window_size: usize, sub_size: usize) -> usize {
    let per_row = window_size / sub_size;
    let (x, y) = (pos % window_size, pos / window_size);
    (y / sub_size) * per_row + x / sub_size
}

/// Splits one raster-ordered window into `(window_size / sub_size)^2`
/// raster-ordered sub-windows.
pub fn sub_partition(
    window: &[u32],
    window_size: usize,
    sub_size: usize,
) -> Result<Vec<Vec<u32>>, WindowError> {
    check_sub(window.len(), window_size, sub_size)?;
    let per_row = window_size / sub_size;
    let mut subs = vec![Vec::with_capacity(sub_size * sub_size); per_row * per_row];
    for (pos, &id) in window.iter().enumerate() {
        subs[sub_window_of(pos, window_size, sub_size)].push(id);
    }
    Ok(subs)
}

/// Inverse of [`sub_partition`].
pub fn merge_sub_windows(
    subs: &[Vec<u32>],
    window_size: usize,
    sub_size: usize,
) -> Result<Vec<u32>, WindowError> {
    check_sub(window_size * window_size, window_size, sub_size)?;
    let per_row = window_size / sub_size;
    if subs.len() != per_row * per_row {
        return Err(WindowError::WindowCount {
            declared: per_row * per_row,
            actual: subs.len(),
        });
    }
    if let Some((i, s)) = subs
        .iter()
        .enumerate()
        .find(|(_, s)| s.len() != sub_size * sub_size)
    {
        return Err(WindowError::WindowLength {
            window: i,
            actual: s.len(),
            expected: sub_size * sub_size,
        });
    }
    let mut window = vec![0; window_size * window_size];
    for (s, sub) in subs.iter().enumerate() {
        let (sx, sy) = (s % per_row * sub_size, s / per_row * sub_size);
        for (k, &id) in sub.iter().enumerate() {
            let (x, y) = (sx + k % sub_size, sy + k / sub_size);
            window[y * window_size + x] = id;
        }
    }
    Ok(window)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f16() -> FoldingFactor {
        FoldingFactor::new(16).unwrap()
    }

    fn ramp(w: usize, h: usize) -> FoldedImage {
        FoldedImage::new(w, h, f16(), (0..(w * h) as u32).map(|i| i % 4096).collect()).unwrap()
    }

    #[test]
    fn aligned_image_gets_no_padding() {
        let p = pad_image(&ramp(16, 16), PadSpec::new(16, f16()).unwrap()).unwrap();
        assert_eq!((p.width, p.height, p.pad_count()), (16, 16, 0));
        let p = pad_image(&ramp(224, 224), PadSpec::new(16, f16()).unwrap()).unwrap();
        assert_eq!((p.width, p.height, p.pad_count()), (224, 224, 0));
    }

    #[test]
    fn seventeen_pads_to_thirty_two() {
        let p = pad_image(&ramp(17, 17), PadSpec::new(16, f16()).unwrap()).unwrap();
        assert_eq!((p.width, p.height), (32, 32));
        assert_eq!(p.pad_count(), 32 * 32 - 17 * 17);
        assert_eq!(p.pad_count(), 735);
        // original pixels stay at their coordinates
        for y in 0..17 {
            for x in 0..17 {
                assert_eq!(p.tokens[y * 32 + x], (y * 17 + x) as u32);
            }
        }
    }

    #[test]
    fn pad_spec_must_match_factor() {
        let spec = PadSpec::new(4, FoldingFactor::new(32).unwrap()).unwrap();
        assert!(matches!(
            pad_image(&ramp(4, 4), spec),
            Err(WindowError::PadMismatch { .. })
        ));
    }

    #[test]
    fn table2_partition_counts() {
        let wg = partition(&ramp(224, 224), 16).unwrap();
        assert_eq!(
            (wg.windows_x, wg.windows_y, wg.window_count()),
            (14, 14, 196)
        );
        assert!(wg.windows.iter().all(|w| w.len() == 256));
    }

    #[test]
    fn identity_partition() {
        let img = ramp(16, 16);
        let wg = partition(&img, 16).unwrap();
        assert_eq!(wg.windows, vec![img.tokens().to_vec()]);
    }

    #[test]
    fn window_zero_of_32x32() {
        let wg = partition(&ramp(32, 32), 16).unwrap();
        let mut expected = Vec::new();
        for dy in 0..16u32 {
            expected.extend((0..16).map(|dx| dy * 32 + dx));
        }
        assert_eq!(wg.windows[0], expected);
        assert_eq!(
            &wg.windows[0][..17],
            &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 32]
        );
        assert_eq!(wg.windows[1][0], 16);
        assert_eq!(wg.windows[2][0], 16 * 32);
    }

    #[test]
    fn misaligned_partition_is_rejected() {
        assert!(matches!(
            partition(&ramp(17, 16), 16),
            Err(WindowError::Misaligned { .. })
        ));
    }

    #[test]
    fn round_trip_with_padding() {
        let img = ramp(17, 17);
        let wg = pad_and_partition(&img, 16).unwrap();
        assert_eq!(wg.window_count(), 4);
        assert_eq!(unpartition(&wg).unwrap(), img);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let wg = WindowGrid {
            windows_x: 0,
            windows_y: 0,
            window_size: 4,
            orig_width: 0,
            orig_height: 0,
            factor: f16(),
            windows: vec![],
        };
        assert_eq!(unpartition(&wg), Err(WindowError::EmptyImage));
    }

    #[test]
    fn pad_inside_original_region_is_corruption() {
        let mut wg = pad_and_partition(&ramp(5, 5), 4).unwrap();
        wg.windows[0][5] = pad_token_id(f16());
        assert!(matches!(
            unpartition(&wg),
            Err(WindowError::Corruption { x: 1, y: 1, .. })
        ));
    }

    #[test]
    fn sub_partition_shapes() {
        let win: Vec<u32> = (0..256).collect();
        assert_eq!(sub_partition(&win, 16, 16).unwrap(), vec![win.clone()]);
        let s4 = sub_partition(&win, 16, 4).unwrap();
        assert_eq!(s4.len(), 16);
        assert!(s4.iter().all(|s| s.len() == 16));
        assert_eq!(&s4[0][..5], &[0, 1, 2, 3, 16]);
        assert_eq!(s4[1][0], 4);
        assert_eq!(s4[4][0], 64);
        let s8 = sub_partition(&win, 16, 8).unwrap();
        assert_eq!(s8.len(), 4);
        assert!(s8.iter().all(|s| s.len() == 64));
        assert_eq!(s8[3][0], 8 * 16 + 8);
        assert!(matches!(
            sub_partition(&win, 16, 5),
            Err(WindowError::SubMisaligned { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pad_partition_unpartition_is_lossless(
                w in 1usize..40, h in 1usize..40, ws in 1usize..9, seed in any::<u32>()
            ) {
                let tokens: Vec<u32> = (0..w * h)
                    .map(|i| (seed as usize).wrapping_mul(2654435761).wrapping_add(i * 40503) as u32 % 4096)
                    .collect();
                let img = FoldedImage::new(w, h, f16(), tokens).unwrap();
                let padded = pad_image(&img, PadSpec::new(ws, f16()).unwrap()).unwrap();
                let wg = partition(&padded, ws).unwrap();
                // every padded token appears exactly once
                let mut a: Vec<u32> = wg.windows.concat();
                let mut b = padded.tokens.clone();
                a.sort_unstable();
                b.sort_unstable();
                prop_assert_eq!(a, b);
                // pads only in the margin
                let pad = pad_token_id(f16());
                for (i, &t) in padded.tokens.iter().enumerate() {
                    let (x, y) = (i % padded.width, i / padded.width);
                    prop_assert_eq!(t == pad, x >= w || y >= h);
                }
                prop_assert_eq!(unpartition(&wg).unwrap(), img);
            }

            #[test]
            fn sub_partition_inverts(ws_pow in 0u32..5, sub_pow in 0u32..5) {
                let ws = 1usize << ws_pow;
                let sub = 1usize << sub_pow.min(ws_pow);
                let win: Vec<u32> = (0..(ws * ws) as u32).collect();
                let subs = sub_partition(&win, ws, sub).unwrap();
                prop_assert_eq!(merge_sub_windows(&subs, ws, sub).unwrap(), win);
            }
        }
    }
}
