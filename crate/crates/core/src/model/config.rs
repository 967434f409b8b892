use crate::kv::{KvError, KvMap};
use crate::tokenizer::FoldingFactor;

use super::ModelError;

/// Hyperparameters of the hierarchical model.
///
/// `image_*` fields describe the local (per-window) stack; `dim`/`layers`
/// describe the global stack over the unified sequence. `max_seq_len` sizes
/// the global position table and `sub_window` (0 = off) enables the
/// sub-window attention pattern inside each local window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub image_dim: usize,
    pub image_layers: usize,
    pub fold_factor: u32,
    pub image_size: usize,
    pub window_size: usize,
    pub max_seq_len: usize,
    pub sub_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            layers: 12,
            heads: 12,
            kv_heads: 6,
            image_dim: 768,
            image_layers: 5,
            fold_factor: 16,
            image_size: 224,
            window_size: 16,
            max_seq_len: 1024,
            sub_window: 0,
        }
    }
}

pub const MODEL_KEYS: [&str; 11] = [
    "dim",
    "layers",
    "heads",
    "kv_heads",
    "image_dim",
    "image_layers",
    "fold_factor",
    "image_size",
    "window_size",
    "max_seq_len",
    "sub_window",
];

impl ModelConfig {
    /// Desk-scale configuration used by tests and the smoke run.
    pub fn tiny() -> Self {
        Self {
            dim: 32,
            layers: 2,
            heads: 4,
            kv_heads: 2,
            image_dim: 32,
            image_layers: 2,
            fold_factor: 32,
            image_size: 8,
            window_size: 4,
            max_seq_len: 64,
            sub_window: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("image_dim", self.image_dim),
            ("image_size", self.image_size),
            ("window_size", self.window_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(ModelError::Config(format!(
                "kv_heads {} must divide heads {}",
                self.kv_heads, self.heads
            )));
        }
        if !self.dim.is_multiple_of(self.heads) || !self.image_dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "dim {} and image_dim {} must be multiples of heads {}",
                self.dim, self.image_dim, self.heads
            )));
        }
        FoldingFactor::new(self.fold_factor).map_err(|e| ModelError::Config(e.to_string()))?;
        if self.sub_window != 0 && !self.window_size.is_multiple_of(self.sub_window) {
            return Err(ModelError::Config(format!(
                "sub_window {} must divide window_size {}",
                self.sub_window, self.window_size
            )));
        }
        // ImgStart + every window of one configured image
        if self.max_seq_len < self.windows_per_image() + 1 {
            return Err(ModelError::Config(format!(
                "max_seq_len {} cannot hold {} windows plus a start token",
                self.max_seq_len,
                self.windows_per_image()
            )));
        }
        Ok(())
    }

    pub fn factor(&self) -> FoldingFactor {
        FoldingFactor::new(self.fold_factor).expect("validated folding factor")
    }

    pub fn window_len(&self) -> usize {
        self.window_size * self.window_size
    }

    /// Windows per side of a padded `image_size` square.
    pub fn windows_per_side(&self) -> usize {
        self.image_size.div_ceil(self.window_size)
    }

    pub fn windows_per_image(&self) -> usize {
        self.windows_per_side() * self.windows_per_side()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn image_head_dim(&self) -> usize {
        self.image_dim / self.heads
    }

    pub fn sub_window(&self) -> Option<usize> {
        (self.sub_window != 0).then_some(self.sub_window)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        for (k, v) in MODEL_KEYS.iter().zip(self.values()) {
            kv.insert(k, v);
        }
        kv
    }

    fn values(&self) -> [usize; 11] {
        [
            self.dim,
            self.layers,
            self.heads,
            self.kv_heads,
            self.image_dim,
            self.image_layers,
            self.fold_factor as usize,
            self.image_size,
            self.window_size,
            self.max_seq_len,
            self.sub_window,
        ]
    }

    /// Reads model keys from `kv`, falling back to `base` for absent ones.
    /// Keys outside [`MODEL_KEYS`] are left for the caller to judge.
    pub fn from_kv(kv: &KvMap, base: ModelConfig) -> Result<Self, KvError> {
        let mut c = base;
        macro_rules! take {
            ($($field:ident),*) => {
                $( if let Some(v) = kv.get(stringify!($field))? { c.$field = v; } )*
            };
        }
        take!(
            dim,
            layers,
            heads,
            kv_heads,
            image_dim,
            image_layers,
            fold_factor,
            image_size,
            window_size,
            max_seq_len,
            sub_window
        );
        Ok(c)
    }

    /// `key = value` lines in [`MODEL_KEYS`] order.
    pub fn to_text(&self) -> String {
        MODEL_KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
