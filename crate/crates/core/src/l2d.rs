//! The language-to-depth (L2D) network.
//!
//! A small fully connected network with rectifier hidden layers, in one of
//! two heads:
//!
//! - [`Mode::LogMean`]: one linear output read as the natural log of the
//!   class mean depth in meters.
//! - [`Mode::Classification`]: 256 logits turned into log-probabilities by a
//!   stable log-softmax; the last hidden layer must be 50 wide and its
//!   post-activation output is the feature vector used for hint planes.
//!
//! Parameters are kept in `f64`; checkpoints store `f32`.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::losses::log_softmax;
use crate::rng::{self, RngSeed};
use crate::{Error, Result};

pub const CLASS_BINS: usize = 256;
pub const FEATURE_DIM: usize = 50;

const CHECKPOINT_MAGIC: &[u8; 4] = b"DHL2";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    LogMean,
    Classification,
}

impl Mode {
    fn code(self) -> u8 {
        match self {
            Mode::LogMean => 0,
            Mode::Classification => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Mode::LogMean),
            1 => Some(Mode::Classification),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct L2DConfig {
    pub mode: Mode,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl L2DConfig {
    /// One hidden layer of 100 units.
    pub fn log_mean(input_dim: usize) -> Self {
        Self {
            mode: Mode::LogMean,
            input_dim,
            hidden_dims: vec![100],
        }
    }

    /// Hidden layers of 100 and 50 units.
    pub fn classification(input_dim: usize) -> Self {
        Self {
            mode: Mode::Classification,
            input_dim,
            hidden_dims: vec![100, FEATURE_DIM],
        }
    }

    pub fn for_mode(mode: Mode, input_dim: usize) -> Self {
        match mode {
            Mode::LogMean => Self::log_mean(input_dim),
            Mode::Classification => Self::classification(input_dim),
        }
    }

    pub fn with_hidden(mut self, hidden_dims: Vec<usize>) -> Result<Self> {
        self.hidden_dims = hidden_dims;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input dim must be at least 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden layers must have at least one unit"));
        }
        if self.mode == Mode::Classification && self.hidden_dims.last() != Some(&FEATURE_DIM) {
            return Err(Error::invalid(format!(
                "classification mode needs a last hidden layer of {FEATURE_DIM} units, got {:?}",
                self.hidden_dims
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.mode {
            Mode::LogMean => 1,
            Mode::Classification => CLASS_BINS,
        }
    }

    pub fn penultimate_dim(&self) -> usize {
        *self.hidden_dims.last().unwrap_or(&self.input_dim)
    }

    /// `(out, in)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim());
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// Dense layer: `out = weights * in + bias`, weights row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weights: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }
}

/// Learnable state of an L2D network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParameters {
    config: L2DConfig,
    layers: Vec<Layer>,
}

/// Per-layer activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Affine outputs per layer (the logits for the last layer).
    pub pre: Vec<Vec<f64>>,
    /// Rectified outputs for hidden layers; the network output for the last
    /// layer (log-depth, or log-probabilities).
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("trace has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationOutput {
    pub features: Vec<f64>,
    pub log_probs: Vec<f64>,
}

/// Gradients with the same layout as [`MlpParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParameters) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.out_dim, l.in_dim))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }
}

impl MlpParameters {
    /// Xavier-uniform weights, zero biases. Weights are drawn in layer order,
    /// row-major, and rounded to `f32` so a fresh model survives a checkpoint
    /// round trip unchanged.
    pub fn init(config: &L2DConfig, seed: RngSeed) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, rng::stream::INIT);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(out_dim, in_dim)| {
                let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
                let weights = (0..out_dim * in_dim)
                    .map(|_| rng::uniform(&mut r, -limit, limit) as f32 as f64)
                    .collect();
                Layer {
                    out_dim,
                    in_dim,
                    weights,
                    bias: vec![0.0; out_dim],
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    /// Builds parameters from explicit layers, checking them against `mode`.
    pub fn from_layers(mode: Mode, layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::invalid("network has no layers"))?;
        let mut hidden = Vec::new();
        let mut prev = first.in_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim != prev {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} inputs but the previous layer has {prev} outputs",
                    l.in_dim
                )));
            }
            if l.weights.len() != l.out_dim * l.in_dim || l.bias.len() != l.out_dim {
                return Err(Error::invalid(format!(
                    "layer {i} has inconsistent weight or bias length"
                )));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("layer {i} has non-finite parameters")));
            }
            if i + 1 < layers.len() {
                hidden.push(l.out_dim);
            }
            prev = l.out_dim;
        }
        let config = L2DConfig {
            mode,
            input_dim: first.in_dim,
            hidden_dims: hidden,
        };
        config.validate()?;
        if prev != config.output_dim() {
            return Err(Error::invalid(format!(
                "{mode:?} head needs {} outputs, last layer has {prev}",
                config.output_dim()
            )));
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &L2DConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(&mut l.bias) {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardTrace> {
        if input.len() != self.config.input_dim {
            return Err(Error::DimMismatch {
                expected: self.config.input_dim,
                actual: input.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &post[i - 1] };
            let z = layer.affine(x);
            let a = if i < last {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                match self.config.mode {
                    Mode::LogMean => z.clone(),
                    Mode::Classification => log_softmax(&z),
                }
            };
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardTrace {
            input: input.to_vec(),
            pre,
            post,
        })
    }

    /// Natural-log depth prediction.
    pub fn forward_logmean(&self, input: &[f64]) -> Result<(f64, ForwardTrace)> {
        self.expect_mode(Mode::LogMean)?;
        let trace = self.forward(input)?;
        Ok((trace.output()[0], trace))
    }

    pub fn forward_classification(&self, input: &[f64]) -> Result<(ClassificationOutput, ForwardTrace)> {
        self.expect_mode(Mode::Classification)?;
        let trace = self.forward(input)?;
        let n = trace.post.len();
        let out = ClassificationOutput {
            features: trace.post[n - 2].clone(),
            log_probs: trace.post[n - 1].clone(),
        };
        Ok((out, trace))
    }

    fn expect_mode(&self, mode: Mode) -> Result<()> {
        if self.config.mode != mode {
            return Err(Error::invalid(format!(
                "model is in {:?} mode, {mode:?} requested",
                self.config.mode
            )));
        }
        Ok(())
    }

    /// Parameter gradients of a scalar loss, given the loss gradient with
    /// respect to the network output (log-depth, or log-probabilities).
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &[f64]) -> Result<Gradients> {
        let n = self.layers.len();
        if trace.pre.len() != n || trace.post.len() != n || trace.input.len() != self.config.input_dim {
            return Err(Error::invalid("trace does not match the network"));
        }
        if output_grad.len() != self.config.output_dim() {
            return Err(Error::DimMismatch {
                expected: self.config.output_dim(),
                actual: output_grad.len(),
            });
        }

        // delta = dL/d(pre-activation) of the current layer
        let mut delta: Vec<f64> = match self.config.mode {
            Mode::LogMean => output_grad.to_vec(),
            Mode::Classification => {
                let total: f64 = output_grad.iter().sum();
                output_grad
                    .iter()
                    .zip(trace.output())
                    .map(|(g, lp)| g - lp.exp() * total)
                    .collect()
            }
        };

        let mut grads = Gradients::zeros_like(self);
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let x = if i == 0 { &trace.input } else { &trace.post[i - 1] };
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] = *d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(x).for_each(|(w, xv)| *w = d * xv);
            }
            if i > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for (o, d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
                }
                for (p, z) in prev.iter_mut().zip(&trace.pre[i - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// DHL2 checkpoint: magic, u8 mode, u32 layer count, `(out, in)` per
    /// layer, then for each layer its weights (row-major) and its biases,
    /// all little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::with_capacity(9 + 8 * self.layers.len() + 4 * self.param_count());
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.push(self.config.mode.code());
        w.write_u32::<LittleEndian>(self.layers.len() as u32).unwrap();
        for l in &self.layers {
            w.write_u32::<LittleEndian>(l.out_dim as u32).unwrap();
            w.write_u32::<LittleEndian>(l.in_dim as u32).unwrap();
        }
        for l in &self.layers {
            for &v in l.weights.iter().chain(&l.bias) {
                w.write_f32::<LittleEndian>(v as f32).unwrap();
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |m: &str| Error::format(origin, m);
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fail("bad magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fail("bad magic"));
        }
        let mode = r.read_u8().map_err(|_| fail("truncated header"))?;
        let mode = Mode::from_code(mode).ok_or_else(|| Error::format(origin, format!("unknown mode {mode}")))?;
        let count = r.read_u32::<LittleEndian>().map_err(|_| fail("truncated header"))? as usize;
        if count == 0 || count > 1024 {
            return Err(Error::format(origin, format!("implausible layer count {count}")));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let out_dim = r.read_u32::<LittleEndian>().map_err(|_| fail("truncated header"))? as usize;
            let in_dim = r.read_u32::<LittleEndian>().map_err(|_| fail("truncated header"))? as usize;
            shapes.push((out_dim, in_dim));
        }
        let total: usize = shapes.iter().map(|(o, i)| o * i + o).sum();
        if r.len() != total * 4 {
            return Err(fail(if r.len() < total * 4 {
                "truncated parameters"
            } else {
                "trailing bytes after parameters"
            }));
        }
        let mut layers = Vec::with_capacity(count);
        for (out_dim, in_dim) in shapes {
            let mut read = |n: usize| -> Vec<f64> {
                let mut buf = vec![0f32; n];
                r.read_f32_into::<LittleEndian>(&mut buf).expect("length checked");
                buf.into_iter().map(f64::from).collect()
            };
            let weights = read(out_dim * in_dim);
            let bias = read(out_dim);
            layers.push(Layer {
                out_dim,
                in_dim,
                weights,
                bias,
            });
        }
        Self::from_layers(mode, layers).map_err(|e| Error::format(origin, e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Gradients,
    v: Gradients,
    step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParameters) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut MlpParameters, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.layers.len() != params.layers.len()
        || grads
            .layers
            .iter()
            .zip(&params.layers)
            .any(|(g, p)| g.weights.len() != p.weights.len() || g.bias.len() != p.bias.len())
    {
        return Err(Error::invalid("gradient shapes do not match the parameters"));
    }
    if let Some(i) = grads
        .layers
        .iter()
        .position(|l| l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()))
    {
        return Err(Error::Numerical(format!("non-finite gradient in layer {i}")));
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.m.layers)
        .zip(&mut state.v.layers)
    {
        let ps = p.weights.iter_mut().chain(&mut p.bias);
        let gs = g.weights.iter().chain(&g.bias);
        let ms = m.weights.iter_mut().chain(&mut m.bias);
        let vs = v.weights.iter_mut().chain(&mut v.bias);
        for (((p, g), m), v) in ps.zip(gs).zip(ms).zip(vs) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
