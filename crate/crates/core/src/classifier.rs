//! Softmax MLP classifiers trained with cross-entropy and plain minibatch SGD.
//!
//! Three shapes are supported: MLP-0 (input wired straight to the softmax
//! layer), MLP-1 (one hidden layer) and MLP-2 (two hidden layers). Every
//! hidden layer is `dense -> batch norm -> ReLU`.
//!
//! Parameter order, used by [`MlpModel::parameters`] and gradients: for each
//! hidden layer its weights (row-major, `out x in`), bias, gamma and beta; then
//! the output weights and bias.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MODEL_FORMAT: &str = "prix-mlp";
pub const MODEL_VERSION: u32 = 1;

pub const DEFAULT_HIDDEN_WIDTH: usize = 128;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("input has dimension {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("non-finite training loss at epoch {epoch} (batch {batch}); lr = {lr}")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    Empty,
    #[error("model file: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mlp0,
    Mlp1,
    Mlp2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Mlp0, Variant::Mlp1, Variant::Mlp2];

    pub fn hidden_layers(self) -> usize {
        match self {
            Variant::Mlp0 => 0,
            Variant::Mlp1 => 1,
            Variant::Mlp2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mlp0 => "mlp0",
            Variant::Mlp1 => "mlp1",
            Variant::Mlp2 => "mlp2",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "mlp0" => Ok(Variant::Mlp0),
            "mlp1" => Ok(Variant::Mlp1),
            "mlp2" => Ok(Variant::Mlp2),
            other => Err(format!("unknown architecture `{other}` (expected mlp0, mlp1 or mlp2)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub variant: Variant,
    pub input_dim: usize,
    pub hidden_width: usize,
    pub num_classes: usize,
}

impl MlpArchitecture {
    pub fn new(variant: Variant, input_dim: usize, num_classes: usize) -> Self {
        MlpArchitecture {
            variant,
            input_dim,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            num_classes,
        }
    }

    pub fn with_hidden_width(mut self, width: usize) -> Self {
        self.hidden_width = width;
        self
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        vec![self.hidden_width; self.variant.hidden_layers()]
    }
}

/// How batch-norm parameters enter a parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamConvention {
    /// Every trainable parameter: dense weights and biases plus batch-norm
    /// gamma and beta.
    AllTrainable,
    /// Dense weights and biases only. This is the convention behind the
    /// commonly quoted closed forms `C·n + C`, `h·n + h + h·C + C` and
    /// `h·n + h + h² + h + h·C + C` (e.g. 10245 / 262917 / 279429 for
    /// n = 2048, h = 128, C = 5).
    DenseOnly,
}

/// Exact count of trainable parameters, batch-norm gamma/beta included.
pub fn param_count(arch: &MlpArchitecture) -> usize {
    param_count_with(arch, ParamConvention::AllTrainable)
}

pub fn param_count_with(arch: &MlpArchitecture, convention: ParamConvention) -> usize {
    let mut fan_in = arch.input_dim;
    let mut total = 0;
    for h in arch.hidden_dims() {
        total += fan_in * h + h;
        if convention == ParamConvention::AllTrainable {
            total += 2 * h;
        }
        fan_in = h;
    }
    total + fan_in * arch.num_classes + arch.num_classes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn glorot(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Dense {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Dense {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn glorot_bound(&self) -> f64 {
        (6.0 / (self.in_dim + self.out_dim) as f64).sqrt()
    }

    fn forward(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in self
            .weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .enumerate()
        {
            out[o] = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    fn forward_batch(&self, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        inputs
            .iter()
            .map(|x| {
                let mut out = vec![0.0; self.out_dim];
                self.forward(x, &mut out);
                out
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(dim: usize) -> BatchNorm {
        BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub dense: Dense,
    pub norm: BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub architecture: MlpArchitecture,
    pub hidden: Vec<HiddenLayer>,
    pub output: Dense,
    #[serde(default)]
    pub train_config_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are not touched.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 100,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ClassifierError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(ClassifierError::Config("epochs must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(ClassifierError::Config("batch_size must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("plain struct");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Glorot-uniform weights, zero biases, identity batch norm.
pub fn init_model(arch: MlpArchitecture, seed: u64) -> MlpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hidden = Vec::new();
    let mut fan_in = arch.input_dim;
    for h in arch.hidden_dims() {
        hidden.push(HiddenLayer {
            dense: Dense::glorot(fan_in, h, &mut rng),
            norm: BatchNorm::new(h),
        });
        fan_in = h;
    }
    MlpModel {
        architecture: arch,
        hidden,
        output: Dense::glorot(fan_in, arch.num_classes, &mut rng),
        train_config_digest: String::new(),
    }
}

/// Forward caches for one hidden layer over a batch.
struct HiddenCache {
    input: Vec<Vec<f64>>,
    xhat: Vec<Vec<f64>>,
    pre_relu: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

struct BatchPass {
    hidden: Vec<HiddenCache>,
    last: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    hidden: Vec<HiddenGrad>,
    output_w: Vec<f64>,
    output_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct HiddenGrad {
    w: Vec<f64>,
    b: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for h in &self.hidden {
            out.extend_from_slice(&h.w);
            out.extend_from_slice(&h.b);
            out.extend_from_slice(&h.gamma);
            out.extend_from_slice(&h.beta);
        }
        out.extend_from_slice(&self.output_w);
        out.extend_from_slice(&self.output_b);
        out
    }
}

fn axpy(dst: &mut [f64], scale: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.architecture.num_classes
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(ClassifierError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Pre-softmax scores of one input in eval mode.
    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(input)?;
        let mut x = input.to_vec();
        for layer in &self.hidden {
            let mut z = vec![0.0; layer.dense.out_dim];
            layer.dense.forward(&x, &mut z);
            let n = &layer.norm;
            for (j, v) in z.iter_mut().enumerate() {
                let y = n.gamma[j] * (*v - n.running_mean[j]) / (n.running_var[j] + BN_EPSILON).sqrt()
                    + n.beta[j];
                *v = y.max(0.0);
            }
            x = z;
        }
        let mut out = vec![0.0; self.num_classes()];
        self.output.forward(&x, &mut out);
        Ok(out)
    }

    /// Class posteriors of one input. In train mode the input is treated as a
    /// batch of one.
    pub fn forward(&self, input: &[f64], mode: Mode) -> Result<Vec<f64>> {
        match mode {
            Mode::Eval => Ok(softmax(&self.logits(input)?)),
            Mode::Train => Ok(self.forward_batch(&[input.to_vec()], Mode::Train)?.remove(0)),
        }
    }

    pub fn forward_batch(&self, inputs: &[Vec<f64>], mode: Mode) -> Result<Vec<Vec<f64>>> {
        match mode {
            Mode::Eval => inputs.iter().map(|x| self.forward(x, Mode::Eval)).collect(),
            Mode::Train => {
                for x in inputs {
                    self.check_dim(x)?;
                }
                Ok(self.train_pass(inputs).probs)
            }
        }
    }

    /// Eval-mode prediction: argmax class (lowest index on ties) and posteriors.
    pub fn predict(&self, input: &[f64]) -> Result<(usize, Vec<f64>)> {
        let probs = self.forward(input, Mode::Eval)?;
        Ok((argmax(&probs), probs))
    }

    fn train_pass(&self, inputs: &[Vec<f64>]) -> BatchPass {
        let batch = inputs.len() as f64;
        let mut x: Vec<Vec<f64>> = inputs.to_vec();
        let mut caches = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let z = layer.dense.forward_batch(&x);
            let width = layer.dense.out_dim;
            let mut mean = vec![0.0; width];
            for row in &z {
                axpy(&mut mean, 1.0, row);
            }
            mean.iter_mut().for_each(|m| *m /= batch);
            let mut var = vec![0.0; width];
            for row in &z {
                for ((v, zi), m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (zi - m) * (zi - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= batch);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
            let mut xhat = Vec::with_capacity(z.len());
            let mut pre = Vec::with_capacity(z.len());
            let mut act = Vec::with_capacity(z.len());
            for row in &z {
                let h: Vec<f64> = (0..width).map(|j| (row[j] - mean[j]) * inv_std[j]).collect();
                let y: Vec<f64> = (0..width)
                    .map(|j| layer.norm.gamma[j] * h[j] + layer.norm.beta[j])
                    .collect();
                act.push(y.iter().map(|v| v.max(0.0)).collect::<Vec<f64>>());
                xhat.push(h);
                pre.push(y);
            }
            caches.push(HiddenCache {
                input: std::mem::replace(&mut x, act),
                xhat,
                pre_relu: pre,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            });
        }
        let probs = self
            .output
            .forward_batch(&x)
            .iter()
            .map(|l| softmax(l))
            .collect();
        BatchPass {
            hidden: caches,
            last: x,
            probs,
        }
    }

    fn backward(&self, pass: &BatchPass, labels: &[usize]) -> Gradients {
        let batch = labels.len() as f64;
        let classes = self.num_classes();
        // d(mean CE)/d(logits)
        let mut delta: Vec<Vec<f64>> = pass
            .probs
            .iter()
            .zip(labels)
            .map(|(p, &y)| {
                let mut d = p.clone();
                d[y] -= 1.0;
                d.iter_mut().for_each(|v| *v /= batch);
                d
            })
            .collect();

        let mut output_w = vec![0.0; self.output.weights.len()];
        let mut output_b = vec![0.0; classes];
        for (d, a) in delta.iter().zip(&pass.last) {
            for (c, &dc) in d.iter().enumerate() {
                axpy(&mut output_w[c * self.output.in_dim..(c + 1) * self.output.in_dim], dc, a);
                output_b[c] += dc;
            }
        }
        let mut upstream = backprop_input(&self.output, &delta);

        let mut hidden = Vec::with_capacity(self.hidden.len());
        for (layer, cache) in self.hidden.iter().zip(&pass.hidden).rev() {
            let width = layer.dense.out_dim;
            // ReLU
            for (row, pre) in upstream.iter_mut().zip(&cache.pre_relu) {
                for (g, &y) in row.iter_mut().zip(pre) {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let mut dgamma = vec![0.0; width];
            let mut dbeta = vec![0.0; width];
            for (dy, xh) in upstream.iter().zip(&cache.xhat) {
                for j in 0..width {
                    dgamma[j] += dy[j] * xh[j];
                    dbeta[j] += dy[j];
                }
            }
            // batch-norm backward, per feature:
            // dz = inv_std / B * (B*dxhat - Σdxhat - xhat*Σ(dxhat*xhat))
            let mut sum_dxhat = vec![0.0; width];
            let mut sum_dxhat_xhat = vec![0.0; width];
            for (dy, xh) in upstream.iter().zip(&cache.xhat) {
                for j in 0..width {
                    let dxh = dy[j] * layer.norm.gamma[j];
                    sum_dxhat[j] += dxh;
                    sum_dxhat_xhat[j] += dxh * xh[j];
                }
            }
            delta = upstream
                .iter()
                .zip(&cache.xhat)
                .map(|(dy, xh)| {
                    (0..width)
                        .map(|j| {
                            let dxh = dy[j] * layer.norm.gamma[j];
                            cache.inv_std[j] / batch
                                * (batch * dxh - sum_dxhat[j] - xh[j] * sum_dxhat_xhat[j])
                        })
                        .collect()
                })
                .collect();
            let in_dim = layer.dense.in_dim;
            let mut dw = vec![0.0; layer.dense.weights.len()];
            let mut db = vec![0.0; width];
            for (d, x) in delta.iter().zip(&cache.input) {
                for (j, &dj) in d.iter().enumerate() {
                    if dj != 0.0 {
                        axpy(&mut dw[j * in_dim..(j + 1) * in_dim], dj, x);
                    }
                    db[j] += dj;
                }
            }
            upstream = backprop_input(&layer.dense, &delta);
            hidden.push(HiddenGrad {
                w: dw,
                b: db,
                gamma: dgamma,
                beta: dbeta,
            });
        }
        hidden.reverse();
        Gradients {
            hidden,
            output_w,
            output_b,
        }
    }

    /// Mean cross-entropy of a batch in train mode and its gradient. Running
    /// statistics are left untouched.
    pub fn loss_and_gradient(&self, inputs: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Gradients)> {
        if inputs.is_empty() {
            return Err(ClassifierError::Empty);
        }
        for (x, &y) in inputs.iter().zip(labels) {
            self.check_dim(x)?;
            self.check_class(y)?;
        }
        let pass = self.train_pass(inputs);
        let loss = batch_loss(&pass.probs, labels);
        Ok((loss, self.backward(&pass, labels)))
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(ClassifierError::ClassOutOfRange {
                class,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for h in &self.hidden {
            out.extend_from_slice(&h.dense.weights);
            out.extend_from_slice(&h.dense.bias);
            out.extend_from_slice(&h.norm.gamma);
            out.extend_from_slice(&h.norm.beta);
        }
        out.extend_from_slice(&self.output.weights);
        out.extend_from_slice(&self.output.bias);
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) {
        let mut rest = params;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for h in &mut self.hidden {
            take(&mut h.dense.weights);
            take(&mut h.dense.bias);
            take(&mut h.norm.gamma);
            take(&mut h.norm.beta);
        }
        take(&mut self.output.weights);
        take(&mut self.output.bias);
        assert!(rest.is_empty(), "parameter vector longer than model");
    }

    fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (h, g) in self.hidden.iter_mut().zip(&grads.hidden) {
            axpy(&mut h.dense.weights, -lr, &g.w);
            axpy(&mut h.dense.bias, -lr, &g.b);
            axpy(&mut h.norm.gamma, -lr, &g.gamma);
            axpy(&mut h.norm.beta, -lr, &g.beta);
        }
        axpy(&mut self.output.weights, -lr, &grads.output_w);
        axpy(&mut self.output.bias, -lr, &grads.output_b);
    }

    fn update_running_stats(&mut self, pass: &BatchPass, batch: usize) {
        for (h, cache) in self.hidden.iter_mut().zip(&pass.hidden) {
            // unbiased batch variance for the running estimate
            let correction = if batch > 1 {
                batch as f64 / (batch as f64 - 1.0)
            } else {
                1.0
            };
            for j in 0..h.norm.running_mean.len() {
                h.norm.running_mean[j] =
                    (1.0 - BN_MOMENTUM) * h.norm.running_mean[j] + BN_MOMENTUM * cache.batch_mean[j];
                h.norm.running_var[j] = (1.0 - BN_MOMENTUM) * h.norm.running_var[j]
                    + BN_MOMENTUM * cache.batch_var[j] * correction;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.is_finite())
            && self
                .hidden
                .iter()
                .all(|h| h.norm.running_mean.iter().chain(&h.norm.running_var).all(|v| v.is_finite()))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct File<'a> {
            format: &'a str,
            version: u32,
            model: &'a MlpModel,
        }
        Ok(serde_json::to_string(&File {
            format: MODEL_FORMAT,
            version: MODEL_VERSION,
            model: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            format: String,
            version: u32,
            model: MlpModel,
        }
        let f: File = serde_json::from_str(text)?;
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(ClassifierError::Format(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                f.format, f.version
            )));
        }
        Ok(f.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|source| ClassifierError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ClassifierError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn backprop_input(layer: &Dense, delta: &[Vec<f64>]) -> Vec<Vec<f64>> {
    delta
        .iter()
        .map(|d| {
            let mut g = vec![0.0; layer.in_dim];
            for (row, &dj) in layer.weights.chunks_exact(layer.in_dim).zip(d) {
                if dj != 0.0 {
                    axpy(&mut g, dj, row);
                }
            }
            g
        })
        .collect()
}

fn batch_loss(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub model: MlpModel,
    /// Mean training loss of each epoch, measured on the minibatches before
    /// their update.
    pub loss_curve: Vec<f64>,
}

/// Minibatch SGD for `config.epochs` epochs, reshuffling each epoch.
pub fn train(mut model: MlpModel, data: &[(Vec<f64>, usize)], config: &TrainConfig) -> Result<TrainingRun> {
    config.validate()?;
    if data.is_empty() {
        return Err(ClassifierError::Empty);
    }
    for (x, y) in data {
        model.check_dim(x)?;
        model.check_class(*y)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let inputs: Vec<Vec<f64>> = chunk.iter().map(|&i| data[i].0.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
            let pass = model.train_pass(&inputs);
            let loss = batch_loss(&pass.probs, &labels);
            if !loss.is_finite() {
                return Err(ClassifierError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                    lr: config.learning_rate,
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            let grads = model.backward(&pass, &labels);
            model.update_running_stats(&pass, chunk.len());
            model.sgd_step(&grads, config.learning_rate);
        }
        loss_curve.push(epoch_loss / data.len() as f64);
    }
    if !model.is_finite() {
        return Err(ClassifierError::NonFiniteLoss {
            epoch: config.epochs,
            batch: 0,
            lr: config.learning_rate,
        });
    }
    model.train_config_digest = config.digest();
    Ok(TrainingRun { model, loss_curve })
}
