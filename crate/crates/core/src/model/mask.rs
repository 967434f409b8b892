//! Boolean attention masks (`true` = attendable).

use std::fmt;

use crate::window::sub_window_of;

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self {
            rows,
            cols,
            allowed,
        }
    }

    /// Square lower-triangular mask.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    /// Leading `n x n` block; for causal masks this is the mask of the
    /// first `n` positions.
    pub fn top_left(&self, n: usize) -> Self {
        let n = n.min(self.rows).min(self.cols);
        Self::from_fn(n, n, |i, j| self.allows(i, j))
    }

    /// Every query row has at least one attendable key.
    pub fn is_well_formed(&self) -> bool {
        self.cols > 0 && (0..self.rows).all(|i| self.row(i).iter().any(|&b| b))
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let line: Vec<&str> = self
                .row(i)
                .iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

fn window_side(window_len: usize) -> Option<usize> {
    let side = (window_len as f64).sqrt().round() as usize;
    (side * side == window_len).then_some(side)
}

/// Whether window position `q` may attend window position `k` (both raster
/// indices). Without sub-windows this is plain causality. With sub-windows a
/// query sees earlier positions of its own sub-window and every sub-window
/// whose positions all precede it.
fn window_attends(q: usize, k: usize, window_size: usize, sub: Option<usize>) -> bool {
    if k > q {
        return false;
    }
    let Some(sub) = sub else { return true };
    let sq = sub_window_of(q, window_size, sub);
    let sk = sub_window_of(k, window_size, sub);
    if sq == sk {
        return true;
    }
    // last raster position of sub-window sk
    let per_row = window_size / sub;
    let last_y = (sk / per_row) * sub + sub - 1;
    let last_x = (sk % per_row) * sub + sub - 1;
    last_y * window_size + last_x <= q
}

/// `window_len x (condition_len + window_len)` mask for the window positions
/// of a local sequence `[prefix.., window..]`.
///
/// `sub_size` is the side of a square sub-window; `window_len` must then be a
/// perfect square whose side it divides.
pub fn local_window_mask(
    window_len: usize,
    condition_len: usize,
    sub_size: Option<usize>,
) -> Result<AttentionMask, ModelError> {
    let side = check_sub(window_len, sub_size)?;
    Ok(AttentionMask::from_fn(
        window_len,
        condition_len + window_len,
        |q, j| j < condition_len || window_attends(q, j - condition_len, side, sub_size),
    ))
}

/// Square mask over a full local sequence: prefix rows are causal among
/// themselves, window rows follow [`local_window_mask`].
pub fn local_sequence_mask(
    window_len: usize,
    condition_len: usize,
    sub_size: Option<usize>,
) -> Result<AttentionMask, ModelError> {
    let side = check_sub(window_len, sub_size)?;
    let n = condition_len + window_len;
    Ok(AttentionMask::from_fn(n, n, |i, j| {
        if i < condition_len {
            j <= i
        } else {
            j < condition_len
                || window_attends(i - condition_len, j - condition_len, side, sub_size)
        }
    }))
}

fn check_sub(window_len: usize, sub_size: Option<usize>) -> Result<usize, ModelError> {
    match sub_size {
        None => Ok(window_len.max(1)),
        Some(sub) => {
            let side = window_side(window_len).ok_or(ModelError::Alignment {
                window_len,
                sub_size: sub,
            })?;
            if sub == 0 || side % sub != 0 {
                return Err(ModelError::Alignment {
                    window_len,
                    sub_size: sub,
                });
            }
            Ok(side)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(m: &AttentionMask) -> Vec<Vec<u8>> {
        (0..m.rows())
            .map(|i| m.row(i).iter().map(|&b| u8::from(b)).collect())
            .collect()
    }

    fn attended(m: &AttentionMask, i: usize) -> Vec<usize> {
        (0..m.cols()).filter(|&j| m.allows(i, j)).collect()
    }

    #[test]
    fn four_tokens_one_prefix() {
        let m = local_window_mask(4, 1, None).unwrap();
        assert_eq!(
            rows(&m),
            vec![
                vec![1, 1, 0, 0, 0],
                vec![1, 1, 1, 0, 0],
                vec![1, 1, 1, 1, 0],
                vec![1, 1, 1, 1, 1]
            ]
        );
    }

    #[test]
    fn no_prefix_is_lower_triangular() {
        for n in [1, 5, 16] {
            assert_eq!(
                local_window_mask(n, 0, None).unwrap(),
                AttentionMask::causal(n)
            );
        }
    }

    #[test]
    fn sub_window_example() {
        let m = local_window_mask(4, 0, Some(2)).unwrap();
        assert_eq!(attended(&m, 2), vec![0, 1, 2]);
        assert_eq!(attended(&m, 3), vec![0, 1, 2, 3]);
    }

    #[test]
    fn sub_windows_restrict_raster_order() {
        // 4x4 window, 2x2 sub-windows: sub 0 = {0,1,4,5}, sub 1 = {2,3,6,7}
        let m = local_window_mask(16, 1, Some(2)).unwrap();
        assert_eq!(attended(&m, 2), vec![0, 3]); // prefix + itself
        assert_eq!(attended(&m, 4), vec![0, 1, 2, 5]); // prefix, 0, 1, 4
        assert_eq!(attended(&m, 6), vec![0, 1, 2, 3, 4, 5, 6, 7]); // sub 0 complete
        assert!(m.is_well_formed());
    }

    #[test]
    fn sub_size_must_divide() {
        assert!(matches!(
            local_window_mask(16, 0, Some(3)),
            Err(ModelError::Alignment { .. })
        ));
        assert!(local_window_mask(15, 0, Some(1)).is_err());
    }

    #[test]
    fn sequence_mask_embeds_window_mask() {
        let w = local_window_mask(16, 2, Some(2)).unwrap();
        let s = local_sequence_mask(16, 2, Some(2)).unwrap();
        assert_eq!(s.rows(), 18);
        for i in 0..16 {
            assert_eq!(s.row(i + 2), w.row(i));
        }
        assert_eq!(rows(&s)[0][..3], [1, 0, 0]);
        assert!(s.is_well_formed());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn masks_are_causal_and_well_formed(side_pow in 0u32..4, sub_pow in 0u32..4, cond in 0usize..3) {
                let side = 1usize << side_pow;
                let sub = 1usize << sub_pow.min(side_pow);
                let m = local_sequence_mask(side * side, cond, Some(sub)).unwrap();
                prop_assert!(m.is_well_formed());
                for i in 0..m.rows() {
                    prop_assert!(m.allows(i, i));
                    for j in i + 1..m.cols() {
                        prop_assert!(!m.allows(i, j));
                    }
                }
            }
        }
    }
}
