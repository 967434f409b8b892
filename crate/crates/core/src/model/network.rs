//! The hierarchical unified model.
//!
//! A unified sequence is a list of items, each either a non-pix token (byte or
//! special) or a whole local window of pix ids. Every item occupies one
//! position of the global stack:
//!
//! * a token enters through the text embedding table;
//! * a window is first run through the local stack, conditioned on the global
//!   hidden state of the position before it (projected to `image_dim` and
//!   prepended as a one-row prefix), and its last-position hidden state is
//!   projected back to `dim` as the window's global input.
//!
//! Pix tokens are predicted by the local stack: prefix row `j` of the local
//! sequence `[prefix, t0, .., t(n-1)]` predicts `tj`. Non-pix tokens are
//! predicted by the global stack from the previous position. Both paths end
//! in the same head over the full unified vocabulary.

use rand::Rng;

use crate::tokenizer::FoldedImage;
use crate::vocab::{ImageSpan, Vocab};
use crate::window::{unpartition, WindowGrid};

use super::config::ModelConfig;
use super::mask::{local_sequence_mask, AttentionMask};
use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::ModelError;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone)]
struct Block {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    text_embedding: ParamId,
    global_position: ParamId,
    global_blocks: Vec<Block>,
    global_norm: (ParamId, ParamId),
    image_embedding: ParamId,
    local_position: ParamId,
    local_blocks: Vec<Block>,
    local_norm: (ParamId, ParamId),
    local_output: (ParamId, ParamId),
    window_bridge: (ParamId, ParamId),
    condition_bridge: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1.gain",
    "ln1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln2.gain",
    "ln2.bias",
    "mlp.fc.weight",
    "mlp.fc.bias",
    "mlp.proj.weight",
    "mlp.proj.bias",
];

fn block_specs(prefix: &str, width: usize, kv_width: usize) -> Vec<ParamSpec> {
    let shapes = [
        (vec![width], Init::Ones),
        (vec![width], Init::Zeros),
        (vec![width, width], Init::Normal),
        (vec![width], Init::Zeros),
        (vec![width, kv_width], Init::Normal),
        (vec![kv_width], Init::Zeros),
        (vec![width, kv_width], Init::Normal),
        (vec![kv_width], Init::Zeros),
        (vec![width, width], Init::Normal),
        (vec![width], Init::Zeros),
        (vec![width], Init::Ones),
        (vec![width], Init::Zeros),
        (vec![width, 4 * width], Init::Normal),
        (vec![4 * width], Init::Zeros),
        (vec![4 * width, width], Init::Normal),
        (vec![width], Init::Zeros),
    ];
    BLOCK_FIELDS
        .iter()
        .zip(shapes)
        .map(|(f, (shape, init))| ParamSpec {
            name: format!("{prefix}.{f}"),
            shape,
            init,
        })
        .collect()
}

fn linear_specs(name: &str, input: usize, output: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![input, output],
            init: Init::Normal,
        },
        ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![output],
            init: Init::Zeros,
        },
    ]
}

fn norm_specs(name: &str, width: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{name}.gain"),
            shape: vec![width],
            init: Init::Ones,
        },
        ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![width],
            init: Init::Zeros,
        },
    ]
}

fn specs(cfg: &ModelConfig, vocab: &Vocab) -> Vec<ParamSpec> {
    let (d, di) = (cfg.dim, cfg.image_dim);
    let kv = cfg.kv_heads * cfg.head_dim();
    let kv_image = cfg.kv_heads * cfg.image_head_dim();
    let mut s = vec![
        ParamSpec {
            name: "text.embedding".into(),
            shape: vec![vocab.text_rows(), d],
            init: Init::Normal,
        },
        ParamSpec {
            name: "global.position".into(),
            shape: vec![cfg.max_seq_len, d],
            init: Init::Normal,
        },
    ];
    for i in 0..cfg.layers {
        s.extend(block_specs(&format!("global.block{i}"), d, kv));
    }
    s.extend(norm_specs("global.norm", d));
    s.push(ParamSpec {
        name: "image.embedding".into(),
        shape: vec![vocab.image_rows(), di],
        init: Init::Normal,
    });
    s.push(ParamSpec {
        name: "local.position".into(),
        shape: vec![cfg.window_len() + 1, di],
        init: Init::Normal,
    });
    for i in 0..cfg.image_layers {
        s.extend(block_specs(&format!("local.block{i}"), di, kv_image));
    }
    s.extend(norm_specs("local.norm", di));
    s.extend(linear_specs("local.output", di, d));
    s.extend(linear_specs("bridge.window", di, d));
    s.extend(linear_specs("bridge.condition", d, di));
    s.extend(linear_specs("head", d, vocab.total() as usize));
    s
}

impl Layout {
    fn resolve(cfg: &ModelConfig, vocab: &Vocab, store: &ParamStore) -> Result<Self, ModelError> {
        let specs = specs(cfg, vocab);
        for spec in &specs {
            let id = store
                .id(&spec.name)
                .ok_or_else(|| ModelError::Config(format!("missing parameter {}", spec.name)))?;
            if store.get(id).shape() != spec.shape.as_slice() {
                return Err(ModelError::Shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    store.get(id).shape(),
                    spec.shape
                )));
            }
        }
        if store.len() != specs.len() {
            return Err(ModelError::Config(format!(
                "store holds {} parameters, model expects {}",
                store.len(),
                specs.len()
            )));
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let pair = |n: &str, a: &str, b: &str| (id(&format!("{n}.{a}")), id(&format!("{n}.{b}")));
        let block = |prefix: String| {
            let f: Vec<ParamId> = BLOCK_FIELDS
                .iter()
                .map(|f| id(&format!("{prefix}.{f}")))
                .collect();
            Block {
                ln1_gain: f[0],
                ln1_bias: f[1],
                wq: f[2],
                bq: f[3],
                wk: f[4],
                bk: f[5],
                wv: f[6],
                bv: f[7],
                wo: f[8],
                bo: f[9],
                ln2_gain: f[10],
                ln2_bias: f[11],
                w1: f[12],
                b1: f[13],
                w2: f[14],
                b2: f[15],
            }
        };
        Ok(Self {
            text_embedding: id("text.embedding"),
            global_position: id("global.position"),
            global_blocks: (0..cfg.layers)
                .map(|i| block(format!("global.block{i}")))
                .collect(),
            global_norm: pair("global.norm", "gain", "bias"),
            image_embedding: id("image.embedding"),
            local_position: id("local.position"),
            local_blocks: (0..cfg.image_layers)
                .map(|i| block(format!("local.block{i}")))
                .collect(),
            local_norm: pair("local.norm", "gain", "bias"),
            local_output: pair("local.output", "weight", "bias"),
            window_bridge: pair("bridge.window", "weight", "bias"),
            condition_bridge: pair("bridge.condition", "weight", "bias"),
            head: pair("head", "weight", "bias"),
        })
    }
}

/// One position of the global sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SeqItem {
    /// A word or special token (unified id).
    Token(u32),
    /// One local window of pix/pad unified ids in raster order.
    Window(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UnifiedSequence {
    pub items: Vec<SeqItem>,
}

impl UnifiedSequence {
    /// `[ImgStart, windows.., ImgEnd]`.
    pub fn image(span: &ImageSpan, vocab: &Vocab) -> Self {
        let mut s = Self::default();
        s.push_image(span, vocab);
        s
    }

    pub fn push_token(&mut self, id: u32) {
        self.items.push(SeqItem::Token(id));
    }

    pub fn push_text(&mut self, ids: &[u32]) {
        self.items.extend(ids.iter().map(|&id| SeqItem::Token(id)));
    }

    pub fn push_image(&mut self, span: &ImageSpan, vocab: &Vocab) {
        self.items.push(SeqItem::Token(vocab.img_start_id()));
        self.items
            .extend(span.windows.iter().map(|w| SeqItem::Window(w.clone())));
        self.items.push(SeqItem::Token(vocab.img_end_id()));
    }

    /// Token ids in flattened order (windows expanded in place).
    pub fn flat_ids(&self) -> Vec<u32> {
        let mut ids = Vec::new();
        for item in &self.items {
            match item {
                SeqItem::Token(t) => ids.push(*t),
                SeqItem::Window(w) => ids.extend_from_slice(w),
            }
        }
        ids
    }

    pub fn flat_len(&self) -> usize {
        self.items
            .iter()
            .map(|i| match i {
                SeqItem::Token(_) => 1,
                SeqItem::Window(w) => w.len(),
            })
            .sum()
    }
}

/// Which targets contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Pix tokens only.
    #[default]
    Image,
    /// Every token after the first, pix or not.
    Unified,
}

/// Logit rows produced for one block of predictions.
#[derive(Debug, Clone)]
pub struct PredictionBlock {
    pub logits: NodeId,
    /// `(row in logits, flat position predicted, target id)`.
    pub rows: Vec<(usize, usize, u32)>,
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    pub blocks: Vec<PredictionBlock>,
    /// Summed cross-entropy over counted targets; `None` when nothing counts.
    pub loss_sum: Option<NodeId>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalOutput {
    /// `[prefix + tokens, image_dim]` residual-stream states.
    pub hidden: NodeId,
    /// `[1, image_dim]` state at the last position.
    pub window_embedding: NodeId,
}

#[derive(Debug, Clone)]
pub struct UnifiedModel {
    cfg: ModelConfig,
    vocab: Vocab,
    params: ParamStore,
    layout: Layout,
}

impl UnifiedModel {
    /// Fresh model: weights `normal(0, 0.02)`, biases zero, norm gains one.
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let vocab = Vocab::new(cfg.factor());
        let mut params = ParamStore::new();
        for spec in specs(&cfg, &vocab) {
            match spec.init {
                Init::Normal => params.add_normal(&spec.name, spec.shape, INIT_STD, rng)?,
                Init::Zeros => params.add_filled(&spec.name, spec.shape, 0.0)?,
                Init::Ones => params.add_filled(&spec.name, spec.shape, 1.0)?,
            };
        }
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        let vocab = Vocab::new(cfg.factor());
        let layout = Layout::resolve(&cfg, &vocab, &params)?;
        Ok(Self {
            cfg,
            vocab,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn block(
        &self,
        tape: &mut Tape<'_>,
        x: NodeId,
        b: &Block,
        mask: &AttentionMask,
    ) -> Result<NodeId, ModelError> {
        let (g1, b1) = (tape.param(b.ln1_gain), tape.param(b.ln1_bias));
        let h = tape.layer_norm(x, g1, b1)?;
        let (wq, bq) = (tape.param(b.wq), tape.param(b.bq));
        let (wk, bk) = (tape.param(b.wk), tape.param(b.bk));
        let (wv, bv) = (tape.param(b.wv), tape.param(b.bv));
        let q = tape.linear(h, wq, Some(bq))?;
        let k = tape.linear(h, wk, Some(bk))?;
        let v = tape.linear(h, wv, Some(bv))?;
        let a = tape.attention(q, k, v, mask, self.cfg.heads, self.cfg.kv_heads)?;
        let (wo, bo) = (tape.param(b.wo), tape.param(b.bo));
        let o = tape.linear(a, wo, Some(bo))?;
        let x = tape.add(x, o)?;
        let (g2, b2) = (tape.param(b.ln2_gain), tape.param(b.ln2_bias));
        let h = tape.layer_norm(x, g2, b2)?;
        let (w1, bb1) = (tape.param(b.w1), tape.param(b.b1));
        let f = tape.linear(h, w1, Some(bb1))?;
        let f = tape.gelu(f)?;
        let (w2, bb2) = (tape.param(b.w2), tape.param(b.b2));
        let m = tape.linear(f, w2, Some(bb2))?;
        tape.add(x, m)
    }

    fn affine(
        &self,
        tape: &mut Tape<'_>,
        x: NodeId,
        p: (ParamId, ParamId),
    ) -> Result<NodeId, ModelError> {
        let (w, b) = (tape.param(p.0), tape.param(p.1));
        tape.linear(x, w, Some(b))
    }

    fn norm(
        &self,
        tape: &mut Tape<'_>,
        x: NodeId,
        p: (ParamId, ParamId),
    ) -> Result<NodeId, ModelError> {
        let (g, b) = (tape.param(p.0), tape.param(p.1));
        tape.layer_norm(x, g, b)
    }

    /// Runs the local stack over one (possibly partial) window.
    ///
    /// `ids` are unified pix/pad ids, at most `window_size^2` of them.
    /// `condition` is an optional `[1, image_dim]` prefix. Token `j` sits at
    /// local position `j + 1`; position 0 belongs to the prefix.
    pub fn forward_local(
        &self,
        tape: &mut Tape<'_>,
        ids: &[u32],
        condition: Option<NodeId>,
    ) -> Result<LocalOutput, ModelError> {
        let wl = self.cfg.window_len();
        if ids.len() > wl {
            return Err(ModelError::Shape(format!(
                "window of {} tokens exceeds {wl}",
                ids.len()
            )));
        }
        let rows = ids
            .iter()
            .map(|&id| self.vocab.image_row(id).ok_or(ModelError::InvalidToken(id)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut parts = Vec::new();
        let pos_table = tape.param(self.layout.local_position);
        if let Some(c) = condition {
            let shape = tape.value(c).shape();
            if shape != [1, self.cfg.image_dim] {
                return Err(ModelError::Shape(format!(
                    "condition embedding {shape:?}, expected [1, {}]",
                    self.cfg.image_dim
                )));
            }
            let p0 = tape.embedding(pos_table, &[0])?;
            parts.push(tape.add(c, p0)?);
        }
        if !rows.is_empty() {
            let table = tape.param(self.layout.image_embedding);
            let tok = tape.embedding(table, &rows)?;
            let positions: Vec<usize> = (1..=rows.len()).collect();
            let pos = tape.embedding(pos_table, &positions)?;
            parts.push(tape.add(tok, pos)?);
        }
        if parts.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let cond_len = usize::from(condition.is_some());
        let mut x = tape.concat_rows(&parts)?;
        let n = cond_len + rows.len();
        let mask = local_sequence_mask(wl, cond_len, self.cfg.sub_window())?.top_left(n);
        for b in &self.layout.local_blocks {
            x = self.block(tape, x, b, &mask)?;
        }
        let window_embedding = tape.select_rows(x, &[n - 1])?;
        Ok(LocalOutput {
            hidden: x,
            window_embedding,
        })
    }

    /// Causal global stack over `[len, dim]` inputs, followed by the final norm.
    pub fn forward_global(
        &self,
        tape: &mut Tape<'_>,
        inputs: NodeId,
    ) -> Result<NodeId, ModelError> {
        let shape = tape.value(inputs).shape().to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(ModelError::EmptyInput);
        }
        let (len, width) = (shape[0], shape[1]);
        if width != self.cfg.dim {
            return Err(ModelError::Shape(format!(
                "global input width {width}, expected {}",
                self.cfg.dim
            )));
        }
        if len > self.cfg.max_seq_len {
            return Err(ModelError::Shape(format!(
                "sequence of {len} exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }
        let table = tape.param(self.layout.global_position);
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.embedding(table, &positions)?;
        let mut x = tape.add(inputs, pos)?;
        let mask = AttentionMask::causal(len);
        for b in &self.layout.global_blocks {
            x = self.block(tape, x, b, &mask)?;
        }
        self.norm(tape, x, self.layout.global_norm)
    }

    /// `[len, dim]` hidden states to `[len, total_vocab]` logits.
    pub fn predict_logits(
        &self,
        tape: &mut Tape<'_>,
        hidden: NodeId,
    ) -> Result<NodeId, ModelError> {
        if tape.value(hidden).cols() != self.cfg.dim {
            return Err(ModelError::Shape(format!(
                "hidden width {}, expected {}",
                tape.value(hidden).cols(),
                self.cfg.dim
            )));
        }
        self.affine(tape, hidden, self.layout.head)
    }

    /// Logits for local hidden rows: norm, lift to `dim`, shared head.
    pub fn predict_local_logits(
        &self,
        tape: &mut Tape<'_>,
        local_hidden: NodeId,
    ) -> Result<NodeId, ModelError> {
        let h = self.norm(tape, local_hidden, self.layout.local_norm)?;
        let h = self.affine(tape, h, self.layout.local_output)?;
        self.predict_logits(tape, h)
    }

    /// `[1, dim]` global input for a text-side token.
    pub fn embed_token(&self, tape: &mut Tape<'_>, id: u32) -> Result<NodeId, ModelError> {
        let row = self
            .vocab
            .text_row(id)
            .ok_or(ModelError::InvalidToken(id))?;
        let table = tape.param(self.layout.text_embedding);
        tape.embedding(table, &[row])
    }

    /// `[1, dim]` global input for a window embedding.
    pub fn lift_window(
        &self,
        tape: &mut Tape<'_>,
        window_embedding: NodeId,
    ) -> Result<NodeId, ModelError> {
        self.affine(tape, window_embedding, self.layout.window_bridge)
    }

    /// `[1, image_dim]` local prefix from the global state at `row` of `hidden`.
    pub fn condition_from(
        &self,
        tape: &mut Tape<'_>,
        hidden: NodeId,
        row: usize,
    ) -> Result<NodeId, ModelError> {
        let h = tape.select_rows(hidden, &[row])?;
        self.affine(tape, h, self.layout.condition_bridge)
    }

    /// Teacher-forced forward pass over a whole unified sequence.
    pub fn forward_sequence(
        &self,
        tape: &mut Tape<'_>,
        seq: &UnifiedSequence,
        objective: Objective,
    ) -> Result<SequenceOutput, ModelError> {
        let items = &seq.items;
        match items.first() {
            None => return Err(ModelError::EmptyInput),
            Some(SeqItem::Window(_)) => {
                return Err(ModelError::Config(
                    "a sequence must start with a token, not a window".into(),
                ))
            }
            Some(SeqItem::Token(_)) => {}
        }
        let pad = self.vocab.pad_id();
        let mut inputs: Vec<NodeId> = Vec::with_capacity(items.len());
        let mut blocks = Vec::new();
        let mut token_targets = Vec::new();
        let mut flat = 0usize;
        for (i, item) in items.iter().enumerate() {
            match item {
                SeqItem::Token(id) => {
                    if i > 0 {
                        token_targets.push((i - 1, flat, *id));
                    }
                    inputs.push(self.embed_token(tape, *id)?);
                    flat += 1;
                }
                SeqItem::Window(ids) => {
                    if ids.is_empty() {
                        return Err(ModelError::EmptyInput);
                    }
                    let x = tape.concat_rows(&inputs)?;
                    let hidden = self.forward_global(tape, x)?;
                    let cond = self.condition_from(tape, hidden, i - 1)?;
                    let local = self.forward_local(tape, ids, Some(cond))?;
                    let rows: Vec<usize> = (0..ids.len()).collect();
                    let h = tape.select_rows(local.hidden, &rows)?;
                    let logits = self.predict_local_logits(tape, h)?;
                    blocks.push(PredictionBlock {
                        logits,
                        rows: ids
                            .iter()
                            .enumerate()
                            .map(|(j, &t)| (j, flat + j, t))
                            .collect(),
                    });
                    inputs.push(self.lift_window(tape, local.window_embedding)?);
                    flat += ids.len();
                }
            }
        }
        // token predictions never count under the image objective
        if !token_targets.is_empty() && objective == Objective::Unified {
            let x = tape.concat_rows(&inputs)?;
            let hidden = self.forward_global(tape, x)?;
            let logits = self.predict_logits(tape, hidden)?;
            blocks.push(PredictionBlock {
                logits,
                rows: token_targets,
            });
        }

        let mut loss_sum = None;
        let mut count = 0;
        for b in &blocks {
            let counted: Vec<(usize, usize)> = b
                .rows
                .iter()
                .filter(|&&(_, _, t)| {
                    t != pad
                        && match objective {
                            Objective::Image => self.vocab.is_pix(t),
                            Objective::Unified => true,
                        }
                })
                .map(|&(r, _, t)| (r, t as usize))
                .collect();
            if counted.is_empty() {
                continue;
            }
            let rows: Vec<usize> = counted.iter().map(|c| c.0).collect();
            let targets: Vec<usize> = counted.iter().map(|c| c.1).collect();
            let logits = if rows.len() == tape.value(b.logits).rows() {
                b.logits
            } else {
                tape.select_rows(b.logits, &rows)?
            };
            let ce = tape.cross_entropy_sum(logits, &targets)?;
            loss_sum = Some(match loss_sum {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
            count += counted.len();
        }
        Ok(SequenceOutput {
            blocks,
            loss_sum,
            count,
        })
    }

    /// Summed loss node and the number of counted targets.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape<'_>,
        seq: &UnifiedSequence,
        objective: Objective,
    ) -> Result<(NodeId, usize), ModelError> {
        let out = self.forward_sequence(tape, seq, objective)?;
        match out.loss_sum {
            Some(l) => Ok((l, out.count)),
            None => Err(ModelError::EmptyInput),
        }
    }

    /// Mean per-token loss in nats under the current parameters.
    pub fn evaluate(&self, seq: &UnifiedSequence, objective: Objective) -> Result<f64, ModelError> {
        let mut tape = Tape::new(&self.params);
        let (l, n) = self.sequence_loss(&mut tape, seq, objective)?;
        Ok(tape.value(l).data()[0] / n as f64)
    }

    /// Per-target `(flat position, target, loss in nats)` in flat order.
    pub fn position_losses(
        &self,
        seq: &UnifiedSequence,
    ) -> Result<Vec<(usize, u32, f64)>, ModelError> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward_sequence(&mut tape, seq, Objective::Unified)?;
        let mut all = Vec::new();
        for b in &out.blocks {
            let l = tape.value(b.logits);
            for &(r, p, t) in &b.rows {
                let row = l.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                all.push((p, t, z.ln() + max - row[t as usize]));
            }
        }
        all.sort_by_key(|e| e.0);
        Ok(all)
    }

    /// Logit rows keyed by the flat position they predict, in flat order.
    pub fn sequence_logits(
        &self,
        seq: &UnifiedSequence,
    ) -> Result<Vec<(usize, Vec<f64>)>, ModelError> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward_sequence(&mut tape, seq, Objective::Unified)?;
        let mut all = Vec::new();
        for b in &out.blocks {
            let l = tape.value(b.logits);
            for &(r, p, _) in &b.rows {
                all.push((p, l.row(r).to_vec()));
            }
        }
        all.sort_by_key(|e| e.0);
        Ok(all)
    }

    /// Window embeddings of an image sequence, in window order.
    pub fn window_embeddings(&self, seq: &UnifiedSequence) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new(&self.params);
        let mut inputs = Vec::new();
        let mut out = Vec::new();
        for (i, item) in seq.items.iter().enumerate() {
            match item {
                SeqItem::Token(id) => inputs.push(self.embed_token(&mut tape, *id)?),
                SeqItem::Window(ids) => {
                    if inputs.is_empty() {
                        return Err(ModelError::EmptyInput);
                    }
                    let x = tape.concat_rows(&inputs)?;
                    let hidden = self.forward_global(&mut tape, x)?;
                    let cond = self.condition_from(&mut tape, hidden, i - 1)?;
                    let local = self.forward_local(&mut tape, ids, Some(cond))?;
                    out.push(tape.value(local.window_embedding).data().to_vec());
                    inputs.push(self.lift_window(&mut tape, local.window_embedding)?);
                }
            }
        }
        Ok(out)
    }

    /// Autoregressively samples one `image_size` square image, window by
    /// window, under the same conditioning as training. Only pix ids are
    /// eligible; positions in the pad margin are filled with the pad id.
    /// `temperature <= 0` decodes greedily (lowest id wins ties).
    pub fn generate_image<R: Rng>(
        &self,
        temperature: f64,
        rng: &mut R,
    ) -> Result<FoldedImage, ModelError> {
        let cfg = &self.cfg;
        let (ws, side) = (cfg.window_size, cfg.image_size);
        let per_side = cfg.windows_per_side();
        let pix_lo = self.vocab.pix_base() as usize;
        let pix_hi = self.vocab.pad_id() as usize;
        let mut window_embeddings: Vec<Tensor> = Vec::new();
        let mut windows = Vec::with_capacity(per_side * per_side);
        for w in 0..per_side * per_side {
            let (wx, wy) = (w % per_side, w / per_side);
            // global state before this window
            let condition = {
                let mut tape = Tape::new(&self.params);
                let mut inputs = vec![self.embed_token(&mut tape, self.vocab.img_start_id())?];
                for e in &window_embeddings {
                    let c = tape.constant(e.clone());
                    inputs.push(self.lift_window(&mut tape, c)?);
                }
                let x = tape.concat_rows(&inputs)?;
                let hidden = self.forward_global(&mut tape, x)?;
                let c = self.condition_from(&mut tape, hidden, inputs.len() - 1)?;
                tape.value(c).clone()
            };
            let mut ids: Vec<u32> = Vec::with_capacity(ws * ws);
            for j in 0..ws * ws {
                let (x, y) = (wx * ws + j % ws, wy * ws + j / ws);
                if x >= side || y >= side {
                    ids.push(self.vocab.pad_id());
                    continue;
                }
                let mut tape = Tape::new(&self.params);
                let c = tape.constant(condition.clone());
                let local = self.forward_local(&mut tape, &ids, Some(c))?;
                let h = tape.select_rows(local.hidden, &[j])?;
                let logits = self.predict_local_logits(&mut tape, h)?;
                let row = &tape.value(logits).data()[pix_lo..pix_hi];
                ids.push((pix_lo + pick(row, temperature, rng)) as u32);
            }
            let mut tape = Tape::new(&self.params);
            let c = tape.constant(condition);
            let local = self.forward_local(&mut tape, &ids, Some(c))?;
            window_embeddings.push(tape.value(local.window_embedding).clone());
            windows.push(ids);
        }
        let span = ImageSpan {
            windows_x: per_side,
            windows_y: per_side,
            window_size: ws,
            orig_width: side,
            orig_height: side,
            windows,
        };
        let grid: WindowGrid = self
            .vocab
            .decode_image(&span)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        unpartition(&grid).map_err(|e| ModelError::Config(e.to_string()))
    }
}

fn pick<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}
