//! The learner: an MLP feature extractor with one linear-softmax head per
//! time period, trained by SGD with momentum, with an EMA shadow copy of
//! every parameter for evaluation.
//!
//! All math is 64-bit. Backpropagation is hand-written for the fixed
//! graph (affine/ReLU extractor, affine heads, softmax at the loss); the
//! loss layer produces logit gradients and the model maps them to
//! parameter gradients.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extractor architecture. The last hidden width is the feature width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_widths: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths: default_hidden(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden_widths.last().unwrap_or(&self.input_dim)
    }
}

/// Weight-initialization strategy when entering a new time period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitStrategy {
    /// All parameters randomly initialized.
    TrainScratch,
    /// Extractor copied from the previous TP's model; everything trains.
    FinetunePrev,
    /// Extractor copied and frozen; only the new head trains.
    FreezePrev,
}

impl std::fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InitStrategy::TrainScratch => "TrainScratch",
            InitStrategy::FinetunePrev => "FinetunePrev",
            InitStrategy::FreezePrev => "FreezePrev",
        };
        f.write_str(s)
    }
}

/// One affine map, stored as `(in, out)` weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    /// Symmetric scaled-uniform weights, zero bias.
    fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        Self {
            w,
            b: Array1::zeros(fan_out),
        }
    }
}

/// A full parameter set: extractor layers plus one head per TP.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub extractor: Vec<Linear>,
    pub heads: Vec<Linear>,
}

impl Params {
    fn for_each_pair(&mut self, other: &Params, mut f: impl FnMut(&mut f64, f64)) {
        let pairs = self
            .extractor
            .iter_mut()
            .zip(&other.extractor)
            .chain(self.heads.iter_mut().zip(&other.heads));
        for (a, b) in pairs {
            a.w.zip_mut_with(&b.w, |x, &y| f(x, y));
            a.b.zip_mut_with(&b.b, |x, &y| f(x, y));
        }
    }
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub extractor: Vec<Linear>,
    pub heads: Vec<Linear>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        let shape = |l: &Linear| Linear::zeros(l.w.nrows(), l.w.ncols());
        Self {
            extractor: model.params.extractor.iter().map(shape).collect(),
            heads: model.params.heads.iter().map(shape).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in self.extractor.iter_mut().chain(self.heads.iter_mut()) {
            l.w.mapv_inplace(|v| v * factor);
            l.b.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self
            .extractor
            .iter_mut()
            .zip(&other.extractor)
            .chain(self.heads.iter_mut().zip(&other.heads))
        {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.extractor
            .iter()
            .chain(self.heads.iter())
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }

    /// Largest absolute entry, for diagnostics.
    pub fn max_abs(&self) -> f64 {
        self.extractor
            .iter()
            .chain(self.heads.iter())
            .flat_map(|l| l.w.iter().chain(l.b.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Extractor activations retained for backpropagation.
pub struct ForwardCache {
    input: Array2<f64>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    /// Post-ReLU activation of each layer; the last is the feature matrix.
    act: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn features(&self) -> &Array2<f64> {
        self.act.last().unwrap_or(&self.input)
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

/// MLP extractor plus per-TP heads and their EMA shadow.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub ema: Params,
    pub frozen_extractor: bool,
    /// Per-head trainability; frozen heads receive no updates.
    pub trainable_heads: Vec<bool>,
    /// How this model was initialized, kept for checkpoint provenance.
    pub strategy: InitStrategy,
}

impl Model {
    /// Initializes the model for a new time period.
    ///
    /// `TrainScratch` redraws everything; the other strategies copy the
    /// previous model's extractor and heads and append a fresh random head
    /// of `new_head_size` outputs. Old heads are retained in all cases so
    /// multi-head losses stay available.
    pub fn init_for_tp<R: Rng>(
        config: &ModelConfig,
        prev: Option<&Model>,
        strategy: InitStrategy,
        new_head_size: usize,
        rng: &mut R,
    ) -> Result<Model> {
        if new_head_size == 0 {
            return Err(Error::Model("head must have at least one class".into()));
        }
        let feature_dim = config.feature_dim();
        let (extractor, mut heads) = match (strategy, prev) {
            (InitStrategy::TrainScratch, prev) => {
                let mut dims = vec![config.input_dim];
                dims.extend_from_slice(&config.hidden_widths);
                let extractor = dims
                    .windows(2)
                    .map(|d| Linear::glorot(d[0], d[1], rng))
                    .collect();
                // Old heads are redrawn at their existing sizes.
                let heads = prev
                    .map(|p| {
                        p.params
                            .heads
                            .iter()
                            .map(|h| Linear::glorot(feature_dim, h.w.ncols(), rng))
                            .collect()
                    })
                    .unwrap_or_default();
                (extractor, heads)
            }
            (InitStrategy::FinetunePrev | InitStrategy::FreezePrev, Some(prev)) => {
                if prev.config != *config {
                    return Err(Error::Model(
                        "previous model architecture does not match config".into(),
                    ));
                }
                // Checkpoint selection validates the EMA weights, so those
                // are the weights worth transferring.
                (prev.ema.extractor.clone(), prev.ema.heads.clone())
            }
            (InitStrategy::FinetunePrev | InitStrategy::FreezePrev, None) => {
                return Err(Error::Model(format!(
                    "{strategy} requires a previous model"
                )));
            }
        };
        let num_old_heads = heads.len();
        heads.push(Linear::glorot(feature_dim, new_head_size, rng));
        let frozen_extractor = strategy == InitStrategy::FreezePrev;
        let mut trainable_heads = vec![strategy != InitStrategy::FreezePrev; num_old_heads];
        trainable_heads.push(true);
        let params = Params { extractor, heads };
        Ok(Model {
            config: config.clone(),
            ema: params.clone(),
            params,
            frozen_extractor,
            trainable_heads,
            strategy,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.params.heads.len()
    }

    pub fn head_size(&self, level: usize) -> usize {
        self.params.heads[level].w.ncols()
    }

    fn check_head(&self, level: usize) -> Result<()> {
        if level >= self.num_heads() {
            return Err(Error::Model(format!(
                "no head for level {level} (model has {})",
                self.num_heads()
            )));
        }
        Ok(())
    }

    fn param_set(&self, use_ema: bool) -> &Params {
        if use_ema {
            &self.ema
        } else {
            &self.params
        }
    }

    /// Runs the extractor, retaining activations for backprop.
    pub fn extract(&self, x: &Array2<f64>, use_ema: bool) -> ForwardCache {
        let params = self.param_set(use_ema);
        let mut pre = Vec::with_capacity(params.extractor.len());
        let mut act = Vec::with_capacity(params.extractor.len());
        let mut current = x;
        for layer in &params.extractor {
            let mut p = current.dot(&layer.w);
            p += &layer.b;
            let a = p.mapv(|v| v.max(0.0));
            pre.push(p);
            act.push(a);
            current = act.last().unwrap();
        }
        ForwardCache {
            input: x.clone(),
            pre,
            act,
        }
    }

    /// Logits of one head over a feature matrix.
    pub fn head_logits(&self, features: &Array2<f64>, level: usize, use_ema: bool) -> Array2<f64> {
        let head = &self.param_set(use_ema).heads[level];
        let mut logits = features.dot(&head.w);
        logits += &head.b;
        logits
    }

    /// Batched forward pass: features, softmax probabilities, and logits
    /// at the requested head.
    pub fn forward_batch(
        &self,
        x: &Array2<f64>,
        level: usize,
        use_ema: bool,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Model(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.config.input_dim
            )));
        }
        self.check_head(level)?;
        let cache = self.extract(x, use_ema);
        let logits = self.head_logits(cache.features(), level, use_ema);
        let q = softmax_rows(&logits);
        Ok((cache.act.last().cloned().unwrap_or(cache.input), q, logits))
    }

    /// Single-sample forward pass.
    pub fn forward(
        &self,
        x: &[f64],
        level: usize,
        use_ema: bool,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let x = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| Error::Model(e.to_string()))?;
        let (z, q, logits) = self.forward_batch(&x, level, use_ema)?;
        Ok((
            z.row(0).to_vec(),
            q.row(0).to_vec(),
            logits.row(0).to_vec(),
        ))
    }

    /// Accumulates the head-parameter gradients for `dlogits` and returns
    /// the gradient with respect to the features.
    pub fn backward_head(
        &self,
        features: &Array2<f64>,
        level: usize,
        dlogits: &Array2<f64>,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        let grad = &mut grads.heads[level];
        general_mat_mul(1.0, &features.t(), dlogits, 1.0, &mut grad.w);
        grad.b += &dlogits.sum_axis(Axis(0));
        dlogits.dot(&self.params.heads[level].w.t())
    }

    /// Backpropagates a feature gradient through the extractor,
    /// accumulating layer gradients.
    pub fn backward_extractor(
        &self,
        cache: &ForwardCache,
        d_features: Array2<f64>,
        grads: &mut Gradients,
    ) {
        let mut d_act = d_features;
        for layer_idx in (0..self.params.extractor.len()).rev() {
            // ReLU gate; the derivative at exactly zero is taken as zero.
            let mut d_pre = d_act;
            d_pre.zip_mut_with(&cache.pre[layer_idx], |d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
            let input = if layer_idx == 0 {
                &cache.input
            } else {
                &cache.act[layer_idx - 1]
            };
            let grad = &mut grads.extractor[layer_idx];
            general_mat_mul(1.0, &input.t(), &d_pre, 1.0, &mut grad.w);
            grad.b += &d_pre.sum_axis(Axis(0));
            d_act = d_pre.dot(&self.params.extractor[layer_idx].w.t());
        }
    }

    /// EMA update: `ema <- decay * ema + (1 - decay) * theta` for every
    /// parameter.
    pub fn ema_update(&mut self, decay: f64) {
        let params = self.params.clone();
        self.ema
            .for_each_pair(&params, |e, p| *e = decay * *e + (1.0 - decay) * p);
    }

    /// Writes a checkpoint: a text manifest and a flat little-endian f64
    /// tensor file, covering both raw and EMA parameters.
    pub fn save(&self, manifest_path: &Path, tensors_path: &Path) -> Result<()> {
        let mut manifest = String::new();
        manifest.push_str(&format!("input_dim {}\n", self.config.input_dim));
        manifest.push_str(&format!(
            "hidden_widths {}\n",
            join_usize(&self.config.hidden_widths)
        ));
        manifest.push_str(&format!(
            "head_sizes {}\n",
            join_usize(
                &self
                    .params
                    .heads
                    .iter()
                    .map(|h| h.w.ncols())
                    .collect::<Vec<_>>()
            )
        ));
        manifest.push_str(&format!("frozen_extractor {}\n", self.frozen_extractor));
        manifest.push_str(&format!(
            "trainable_heads {}\n",
            self.trainable_heads
                .iter()
                .map(|t| if *t { "1" } else { "0" })
                .collect::<Vec<_>>()
                .join(",")
        ));
        manifest.push_str(&format!("strategy {}\n", self.strategy));

        let mut file = std::fs::File::create(tensors_path)?;
        let mut offset = 0usize;
        for (set_name, set) in [("param", &self.params), ("ema", &self.ema)] {
            for (kind, layers) in [("extractor", &set.extractor), ("head", &set.heads)] {
                for (idx, layer) in layers.iter().enumerate() {
                    for (part, len, data) in [
                        (
                            "w",
                            layer.w.len(),
                            layer.w.iter().copied().collect::<Vec<f64>>(),
                        ),
                        ("b", layer.b.len(), layer.b.to_vec()),
                    ] {
                        manifest.push_str(&format!(
                            "tensor {set_name}.{kind}.{idx}.{part} offset={offset} len={len}\n"
                        ));
                        for v in &data {
                            file.write_all(&v.to_le_bytes())?;
                        }
                        offset += len;
                    }
                }
            }
        }
        std::fs::write(manifest_path, manifest)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Model::save`].
    pub fn load(manifest_path: &Path, tensors_path: &Path) -> Result<Model> {
        let manifest = std::fs::read_to_string(manifest_path)?;
        let mut input_dim = None;
        let mut hidden = Vec::new();
        let mut head_sizes = Vec::new();
        let mut frozen = false;
        let mut trainable: Vec<bool> = Vec::new();
        let mut strategy = InitStrategy::TrainScratch;
        for line in manifest.lines() {
            let mut it = line.splitn(2, ' ');
            let (key, value) = (it.next().unwrap_or(""), it.next().unwrap_or(""));
            match key {
                "input_dim" => input_dim = value.parse().ok(),
                "hidden_widths" => hidden = parse_usize_list(value)?,
                "head_sizes" => head_sizes = parse_usize_list(value)?,
                "frozen_extractor" => frozen = value == "true",
                "trainable_heads" => {
                    trainable = value.split(',').map(|v| v == "1").collect();
                }
                "strategy" => {
                    strategy = match value {
                        "TrainScratch" => InitStrategy::TrainScratch,
                        "FinetunePrev" => InitStrategy::FinetunePrev,
                        "FreezePrev" => InitStrategy::FreezePrev,
                        other => {
                            return Err(Error::Parse(format!("unknown strategy {other:?}")))
                        }
                    }
                }
                _ => {}
            }
        }
        let input_dim =
            input_dim.ok_or_else(|| Error::Parse("manifest missing input_dim".into()))?;
        let config = ModelConfig {
            input_dim,
            hidden_widths: hidden,
        };

        let mut raw = Vec::new();
        std::fs::File::open(tensors_path)?.read_to_end(&mut raw)?;
        if raw.len() % 8 != 0 {
            return Err(Error::Parse("tensor file length not a multiple of 8".into()));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();

        let mut cursor = 0usize;
        let mut take = |rows: usize, cols: usize| -> Result<Linear> {
            let w_len = rows * cols;
            let end = cursor + w_len + cols;
            if end > values.len() {
                return Err(Error::Parse("tensor file truncated".into()));
            }
            let w = Array2::from_shape_vec((rows, cols), values[cursor..cursor + w_len].to_vec())
                .map_err(|e| Error::Parse(e.to_string()))?;
            let b = Array1::from_vec(values[cursor + w_len..end].to_vec());
            cursor = end;
            Ok(Linear { w, b })
        };

        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden_widths);
        let feature_dim = config.feature_dim();
        let read_set =
            |take: &mut dyn FnMut(usize, usize) -> Result<Linear>| -> Result<Params> {
                let extractor = dims
                    .windows(2)
                    .map(|d| take(d[0], d[1]))
                    .collect::<Result<_>>()?;
                let heads = head_sizes
                    .iter()
                    .map(|&s| take(feature_dim, s))
                    .collect::<Result<_>>()?;
                Ok(Params { extractor, heads })
            };
        let params = read_set(&mut take)?;
        let ema = read_set(&mut take)?;
        if cursor != values.len() {
            return Err(Error::Parse("tensor file has trailing data".into()));
        }
        if trainable.len() != params.heads.len() {
            trainable = vec![true; params.heads.len()];
        }
        Ok(Model {
            config,
            params,
            ema,
            frozen_extractor: frozen,
            trainable_heads: trainable,
            strategy,
        })
    }
}

fn join_usize(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_usize_list(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad integer {s:?} in manifest")))
        })
        .collect()
}

/// Numerically stable row softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// SGD with momentum and L2 weight decay. Velocity persists across steps:
/// `v <- momentum * v + (grad + weight_decay * theta)`, then
/// `theta <- theta - lr * v`. Frozen parameters are left untouched.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Gradients::zeros_like(model),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Train(
                "non-finite gradient encountered; aborting".into(),
            ));
        }
        let (momentum, wd) = (self.momentum, self.weight_decay);
        let update = |layer: &mut Linear, grad: &Linear, vel: &mut Linear| {
            ndarray::Zip::from(&mut vel.w)
                .and(&grad.w)
                .and(&layer.w)
                .for_each(|v, &g, &p| *v = momentum * *v + g + wd * p);
            ndarray::Zip::from(&mut vel.b)
                .and(&grad.b)
                .and(&layer.b)
                .for_each(|v, &g, &p| *v = momentum * *v + g + wd * p);
            layer.w.scaled_add(-lr, &vel.w);
            layer.b.scaled_add(-lr, &vel.b);
        };
        if !model.frozen_extractor {
            for ((layer, grad), vel) in model
                .params
                .extractor
                .iter_mut()
                .zip(&grads.extractor)
                .zip(self.velocity.extractor.iter_mut())
            {
                update(layer, grad, vel);
            }
        }
        for ((trainable, (layer, grad)), vel) in model
            .trainable_heads
            .iter()
            .zip(model.params.heads.iter_mut().zip(&grads.heads))
            .zip(self.velocity.heads.iter_mut())
        {
            if *trainable {
                update(layer, grad, vel);
            }
        }
        Ok(())
    }
}
