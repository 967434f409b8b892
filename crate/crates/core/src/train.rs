//! Desk-scale pretraining loop: next-pix-token objective, optimizers,
//! loss-curve emission and checkpointing.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kv::{KvError, KvMap};
use crate::mixed::{MixedError, MixedReader, MixedRecord};
use crate::model::config::MODEL_KEYS;
use crate::model::{
    load_model, save_model, CheckpointError, Gradients, ModelConfig, ModelError, Objective,
    ParamStore, Tape, UnifiedModel, UnifiedSequence,
};
use crate::parallel::{self, Execution};
use crate::ppm::{load_ppm, PpmError};
use crate::tokenizer::{fold_image, FoldedImage, RgbImage, TokenizerError};
use crate::vocab::{encode_text, Vocab, VocabError};
use crate::window::{pad_and_partition, WindowError};

pub const TRAIN_KEYS: [&str; 8] = [
    "steps",
    "batch_size",
    "learning_rate",
    "seed",
    "optimizer",
    "log_every",
    "out_dir",
    "objective",
];

pub const LOSS_CSV: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error("dataset: {0}")]
    Data(String),
    #[error("optimizer step mismatch in parameter `{name}` at index {index}: {got} != {want}")]
    Mismatch {
        name: String,
        index: usize,
        got: f64,
        want: f64,
    },
    #[error(transparent)]
    Ppm(#[from] PpmError),
    #[error(transparent)]
    Mixed(#[from] MixedError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd => write!(f, "sgd"),
            OptimizerKind::Adam { beta1, beta2, eps } => write!(f, "adam({beta1}, {beta2}, {eps})"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    /// `sgd`, `adam` or `adam(beta1, beta2, eps)`.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "sgd" {
            return Ok(OptimizerKind::Sgd);
        }
        if s == "adam" {
            return Ok(OptimizerKind::default());
        }
        let args = s
            .strip_prefix("adam(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| format!("unknown optimizer `{s}`; expected sgd or adam(b1, b2, eps)"))?;
        let v: Vec<f64> = args
            .split(',')
            .map(|a| a.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("bad adam arguments `{args}`"))?;
        match v[..] {
            [beta1, beta2, eps]
                if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 =>
            {
                Ok(OptimizerKind::Adam { beta1, beta2, eps })
            }
            _ => Err(format!(
                "adam needs 0 <= b1, b2 < 1 and eps > 0, got `{args}`"
            )),
        }
    }
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    match s {
        "image" => Ok(Objective::Image),
        "unified" => Ok(Objective::Unified),
        _ => Err(format!(
            "unknown objective `{s}`; expected image or unified"
        )),
    }
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Image => "image",
        Objective::Unified => "unified",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Record the loss every this many steps (the last step is always kept).
    pub log_every: usize,
    pub out_dir: PathBuf,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            steps: 1000,
            batch_size: 1,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::default(),
            log_every: 1,
            out_dir: PathBuf::from("run"),
            objective: Objective::Image,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(TrainError::Config("log_every must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be a positive number, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Parses flat `key = value` text. Model keys and training keys share one
    /// namespace; absent keys keep their defaults (tiny model) and unknown
    /// keys are rejected.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let kv = KvMap::parse(text)?;
        let allowed: Vec<&str> = MODEL_KEYS
            .iter()
            .chain(TRAIN_KEYS.iter())
            .copied()
            .collect();
        kv.check_keys(&allowed)?;
        let mut tc = TrainConfig {
            model: ModelConfig::from_kv(&kv, ModelConfig::tiny())?,
            ..Default::default()
        };
        if let Some(v) = kv.get("steps")? {
            tc.steps = v;
        }
        if let Some(v) = kv.get("batch_size")? {
            tc.batch_size = v;
        }
        if let Some(v) = kv.get("learning_rate")? {
            tc.learning_rate = v;
        }
        if let Some(v) = kv.get("seed")? {
            tc.seed = v;
        }
        if let Some(v) = kv.get("log_every")? {
            tc.log_every = v;
        }
        if let Some(v) = kv.raw("out_dir") {
            tc.out_dir = PathBuf::from(v);
        }
        if let Some(v) = kv.raw("optimizer") {
            tc.optimizer = v.parse().map_err(TrainError::Config)?;
        }
        if let Some(v) = kv.raw("objective") {
            tc.objective = parse_objective(v).map_err(TrainError::Config)?;
        }
        tc.validate()?;
        Ok(tc)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        s.push_str(&format!("steps = {}\n", self.steps));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("learning_rate = {}\n", self.learning_rate));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("optimizer = {}\n", self.optimizer));
        s.push_str(&format!("log_every = {}\n", self.log_every));
        s.push_str(&format!("out_dir = \"{}\"\n", self.out_dir.display()));
        s.push_str(&format!("objective = {}\n", objective_name(self.objective)));
        s
    }
}

/// Parameter update rule.
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients);
}

pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            for (p, g) in params.get_mut(id).data_mut().iter_mut().zip(g) {
                *p -= self.lr * g;
            }
        }
    }
}

/// Adam with bias correction: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in params.ids().collect::<Vec<_>>() {
            let k = id.index();
            let g = grads.dense(id, params);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in params.get_mut(id).data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

pub fn build_optimizer(tc: &TrainConfig, params: &ParamStore) -> Box<dyn Optimizer> {
    match tc.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd {
            lr: tc.learning_rate,
        }),
        OptimizerKind::Adam { beta1, beta2, eps } => {
            Box::new(Adam::new(tc.learning_rate, beta1, beta2, eps, params))
        }
    }
}

/// `(step, mean cross-entropy in nats)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.points {
            s.push_str(&format!("{step},{loss}\n"));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next() != Some("step,loss") {
            return Err(TrainError::Data(
                "loss csv must start with `step,loss`".into(),
            ));
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || TrainError::Data(format!("loss csv line {}: `{line}`", i + 2));
            let (a, b) = line.split_once(',').ok_or_else(bad)?;
            points.push((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?));
        }
        Ok(Self { points })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    /// Trailing moving average over `window` points (shorter at the start).
    pub fn smoothed(&self, window: usize) -> Vec<(usize, f64)> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.points.len());
        let mut sum = 0.0;
        for (i, &(step, loss)) in self.points.iter().enumerate() {
            sum += loss;
            if i >= w {
                sum -= self.points[i - w].1;
            }
            out.push((step, sum / (i + 1).min(w) as f64));
        }
        out
    }
}

/// Training samples in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<MixedRecord>,
}

impl Dataset {
    pub fn from_images(images: Vec<RgbImage>) -> Self {
        Self {
            records: images.into_iter().map(MixedRecord::Image).collect(),
        }
    }

    /// A directory of `.ppm` files (sorted by name) or a mixed container.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")));
            files.sort();
            if files.is_empty() {
                return Err(TrainError::Data(format!(
                    "no .ppm files in {}",
                    path.display()
                )));
            }
            let images = files
                .iter()
                .map(|p| load_ppm(p))
                .collect::<Result<_, _>>()?;
            Ok(Self::from_images(images))
        } else {
            let reader = MixedReader::new(std::io::BufReader::new(fs::File::open(path)?))?;
            Ok(Self {
                records: reader.collect::<Result<_, _>>()?,
            })
        }
    }

    /// One sequence per record. Text records become `[Bos, bytes.., Eos]` and
    /// are only used under the unified objective.
    pub fn sequences(
        &self,
        cfg: &ModelConfig,
        objective: Objective,
    ) -> Result<Vec<UnifiedSequence>, TrainError> {
        let vocab = Vocab::new(cfg.factor());
        let mut out = Vec::new();
        for r in &self.records {
            match r {
                MixedRecord::Image(img) => out.push(image_sequence(img, cfg, &vocab)?),
                MixedRecord::Text(s) if objective == Objective::Unified => {
                    let mut seq = UnifiedSequence::default();
                    seq.push_token(vocab.bos_id());
                    seq.push_text(&encode_text(s.as_bytes()));
                    seq.push_token(vocab.eos_id());
                    out.push(seq);
                }
                MixedRecord::Text(_) => {}
            }
        }
        if out.is_empty() {
            return Err(TrainError::Data("dataset has no usable samples".into()));
        }
        Ok(out)
    }
}

pub fn image_sequence(
    img: &RgbImage,
    cfg: &ModelConfig,
    vocab: &Vocab,
) -> Result<UnifiedSequence, TrainError> {
    let folded = fold_image(img, cfg.factor())?;
    let grid = pad_and_partition(&folded, cfg.window_size)?;
    Ok(UnifiedSequence::image(&vocab.encode_image(&grid)?, vocab))
}

/// Summed loss, target count and gradient of the summed loss for one sample.
fn sample_gradients(
    model: &UnifiedModel,
    seq: &UnifiedSequence,
    objective: Objective,
) -> Result<(f64, usize, Gradients), ModelError> {
    let mut tape = Tape::new(model.params());
    let (loss, n) = model.sequence_loss(&mut tape, seq, objective)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, n, grads))
}

/// Mean per-token loss and its gradient over `batch`, reduced in batch order.
pub fn batch_gradients(
    model: &UnifiedModel,
    batch: &[&UnifiedSequence],
    objective: Objective,
    exec: Execution,
) -> Result<(f64, Gradients), ModelError> {
    let parts = parallel::map_ordered(batch, exec, |s| sample_gradients(model, s, objective));
    let mut total = Gradients::empty(model.params());
    let (mut loss, mut count) = (0.0, 0usize);
    for p in parts {
        let (l, n, g) = p?;
        loss += l;
        count += n;
        total.accumulate(&g);
    }
    if count == 0 {
        return Err(ModelError::EmptyInput);
    }
    total.scale(1.0 / count as f64);
    Ok((loss / count as f64, total))
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: UnifiedModel,
    pub curve: LossCurve,
}

/// Runs the loop in memory. The model is initialized from `tc.seed`; batch
/// indices come from an independent stream of the same seed.
pub fn train(
    samples: &[UnifiedSequence],
    tc: &TrainConfig,
    exec: Execution,
) -> Result<TrainRun, TrainError> {
    tc.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Data("no training samples".into()));
    }
    let mut model = UnifiedModel::new(tc.model, &mut ChaCha8Rng::seed_from_u64(tc.seed))?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    batch_rng.set_stream(1);
    let mut opt = build_optimizer(tc, model.params());
    let mut curve = LossCurve::default();
    for step in 0..tc.steps {
        let batch: Vec<&UnifiedSequence> = (0..tc.batch_size)
            .map(|_| &samples[batch_rng.gen_range(0..samples.len())])
            .collect();
        let (loss, grads) = batch_gradients(&model, &batch, tc.objective, exec)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, what: "loss" });
        }
        if !grads.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                what: "gradient",
            });
        }
        if step % tc.log_every == 0 || step + 1 == tc.steps {
            curve.points.push((step, loss));
        }
        opt.step(model.params_mut(), &grads);
    }
    Ok(TrainRun { model, curve })
}

/// Trains on `dataset` and writes `loss.csv` and `model.ckpt` into
/// `tc.out_dir`.
pub fn pretrain_images(
    dataset: &Dataset,
    tc: &TrainConfig,
    exec: Execution,
) -> Result<TrainRun, TrainError> {
    let samples = dataset.sequences(&tc.model, tc.objective)?;
    let run = train(&samples, tc, exec)?;
    fs::create_dir_all(&tc.out_dir)?;
    fs::write(tc.out_dir.join(LOSS_CSV), run.curve.to_csv())?;
    save_model(&tc.out_dir.join(CHECKPOINT_FILE), &run.model)?;
    Ok(run)
}

/// Samples one image from a saved checkpoint. `temperature <= 0` is greedy.
pub fn sample_image(
    checkpoint: &Path,
    temperature: f64,
    seed: u64,
) -> Result<FoldedImage, TrainError> {
    let model = load_model(checkpoint)?;
    Ok(model.generate_image(temperature, &mut ChaCha8Rng::seed_from_u64(seed))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub optimizer: OptimizerKind,
    pub elements: usize,
    pub max_abs_update: f64,
}

/// Hand-rolled single update, written independently of [`Optimizer`].
fn reference_update(kind: OptimizerKind, lr: f64, p: f64, g: f64) -> f64 {
    match kind {
        OptimizerKind::Sgd => p - lr * g,
        OptimizerKind::Adam { beta1, beta2, eps } => {
            // first step from zero moments
            let m = beta1 * 0.0 + (1.0 - beta1) * g;
            let v = beta2 * 0.0 + (1.0 - beta2) * g * g;
            let m_hat = m / (1.0 - beta1);
            let v_hat = v / (1.0 - beta2);
            p - lr * m_hat / (v_hat.sqrt() + eps)
        }
    }
}

/// Checks one optimizer step on a freshly initialized model against a
/// hand-rolled update, bit for bit.
pub fn training_step_equivalence(tc: &TrainConfig) -> Result<StepReport, TrainError> {
    tc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let model = UnifiedModel::new(tc.model, &mut rng)?;
    let side = tc.model.image_size;
    let data: Vec<u8> = (0..side * side * 3).map(|_| rng.gen()).collect();
    let img = RgbImage::new(side, side, data)?;
    let seq = image_sequence(&img, &tc.model, model.vocab())?;
    let (_, grads) = batch_gradients(&model, &[&seq], Objective::Image, Execution::Sequential)?;

    let mut stepped = model.params().clone();
    build_optimizer(tc, &stepped).step(&mut stepped, &grads);

    let mut report = StepReport {
        optimizer: tc.optimizer,
        elements: 0,
        max_abs_update: 0.0,
    };
    for (id, name, before) in model.params().iter() {
        let g = grads.dense(id, model.params());
        let after = stepped.get(id).data();
        for (i, (&p, &q)) in before.data().iter().zip(after).enumerate() {
            let want = reference_update(tc.optimizer, tc.learning_rate, p, g[i]);
            if q.to_bits() != want.to_bits() {
                return Err(TrainError::Mismatch {
                    name: name.to_string(),
                    index: i,
                    got: q,
                    want,
                });
            }
            report.max_abs_update = report.max_abs_update.max((q - p).abs());
            report.elements += 1;
        }
    }
    Ok(report)
}
