//! LSTM sequence classifier trained from scratch.
//!
//! The network reads the N timed I/O vectors of a window through one or more
//! stacked LSTM layers, applies a dense layer to the last hidden state and
//! turns the eight logits into class probabilities with a softmax. Training
//! minimizes categorical cross-entropy with backpropagation through time.
//!
//! Gate blocks inside `W`, `U` and `b` are ordered input, forget, cell
//! candidate, output, each `hidden` rows tall.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::extended::{reference_loss, Dd, Real};
use crate::dataset::{Dataset, FoldSplit, TimeScaling, TimedIOVector};
use crate::faults::{ClassLabel, NUM_CLASSES};
use crate::metrics::{confusion, ConfusionMatrix};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid training configuration: {0}")]
    TrainConfig(String),
    #[error("window shape {found:?} does not match model shape {expected:?}")]
    Dimension {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("fold {fold}, epoch {epoch}: non-finite {what}")]
    NonFinite {
        fold: usize,
        epoch: usize,
        what: &'static str,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("fold split covers {split} samples, dataset has {dataset}")]
    FoldMismatch { split: usize, dataset: usize },
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error("curves line {line}: {message}")]
    Curves { line: usize, message: String },
    #[error("thread pool: {0}")]
    Threads(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Signal count + 1 (the leading feature is the scaled `t_rel`).
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub classes: usize,
    pub window: usize,
    pub time_scaling: TimeScaling,
}

impl ModelConfig {
    /// Defaults: one LSTM layer of 64 units over the given signal width.
    pub fn for_width(width: usize, window: usize) -> Self {
        ModelConfig {
            input_dim: width + 1,
            hidden: 64,
            layers: 1,
            classes: NUM_CLASSES,
            window,
            time_scaling: TimeScaling::default(),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if self.classes != NUM_CLASSES {
            return bad("the classifier has exactly 8 output classes");
        }
        if self.hidden == 0 || self.layers == 0 || self.window == 0 || self.input_dim < 2 {
            return bad("hidden size, layer count, window length and input width must be positive");
        }
        self.time_scaling.validate().map_err(|e| NnError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.input_dim - 1
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// 4H × in
    pub w: Matrix,
    /// 4H × H
    pub u: Matrix,
    /// 4H
    pub b: Vec<f64>,
}

/// Model parameters. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub lstm: Vec<LstmLayer>,
    /// classes × H
    pub dense_w: Matrix,
    pub dense_b: Vec<f64>,
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// tanh through one `exp`, about twice as fast as `f64::tanh`; the absolute
/// error stays at rounding level and both tails saturate to ±1.
fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

impl Model {
    pub fn zeros(config: ModelConfig) -> Self {
        let h = config.hidden;
        let lstm = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.input_dim } else { h };
                LstmLayer { w: Matrix::zeros(4 * h, input), u: Matrix::zeros(4 * h, h), b: vec![0.0; 4 * h] }
            })
            .collect();
        Model {
            config,
            lstm,
            dense_w: Matrix::zeros(config.classes, h),
            dense_b: vec![0.0; config.classes],
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases except
    /// the forget gate, which starts at 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::zeros(config);
        let fill = |m: &mut Matrix, rng: &mut ChaCha8Rng| {
            let s = 1.0 / (m.cols as f64).sqrt();
            for v in &mut m.data {
                *v = rng.gen_range(-s..s);
            }
        };
        let h = config.hidden;
        for layer in &mut model.lstm {
            fill(&mut layer.w, &mut rng);
            fill(&mut layer.u, &mut rng);
            layer.b[h..2 * h].fill(1.0);
        }
        fill(&mut model.dense_w, &mut rng);
        Ok(model)
    }

    /// Named parameter tensors in checkpoint order: (name, rows, cols, values).
    pub fn tensors(&self) -> Vec<(String, usize, usize, &[f64])> {
        let mut out = Vec::new();
        for (l, layer) in self.lstm.iter().enumerate() {
            out.push((format!("lstm{l}.w"), layer.w.rows, layer.w.cols, &layer.w.data[..]));
            out.push((format!("lstm{l}.u"), layer.u.rows, layer.u.cols, &layer.u.data[..]));
            out.push((format!("lstm{l}.b"), layer.b.len(), 1, &layer.b[..]));
        }
        out.push(("dense.w".into(), self.dense_w.rows, self.dense_w.cols, &self.dense_w.data[..]));
        out.push(("dense.b".into(), self.dense_b.len(), 1, &self.dense_b[..]));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.lstm {
            out.push(&mut layer.w.data);
            out.push(&mut layer.u.data);
            out.push(&mut layer.b);
        }
        out.push(&mut self.dense_w.data);
        out.push(&mut self.dense_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.3.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.3.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.3.iter().all(|v| v.is_finite()))
    }

    /// Flattened features of a window: per step `[scaled t_rel, bits...]`.
    pub fn features(&self, window: &[TimedIOVector]) -> Result<Vec<f64>, NnError> {
        let cfg = &self.config;
        let width = window.first().map_or(0, |v| v.values.len());
        if window.len() != cfg.window || window.iter().any(|v| v.values.len() != cfg.width()) {
            return Err(NnError::Dimension { expected: (cfg.window, cfg.width()), found: (window.len(), width) });
        }
        let mut x = Vec::with_capacity(cfg.window * cfg.input_dim);
        for v in window {
            x.push(cfg.time_scaling.apply(v.t_rel));
            x.extend(v.values.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        Ok(x)
    }

    /// Class probabilities for one window.
    pub fn forward(&self, window: &[TimedIOVector]) -> Result<Vec<f64>, NnError> {
        let x = self.features(window)?;
        let mut cache = Cache::new(&self.config, 1);
        self.forward_batch(&[&x], &mut cache);
        Ok(cache.probs(0).to_vec())
    }

    /// Forward pass of a batch of pre-computed feature windows, keeping the
    /// activations in `cache` for a subsequent [`Model::backward_batch`].
    ///
    /// Activations are stored time-major: row `t·B + s` holds step `t` of
    /// sample `s`.
    pub fn forward_batch(&self, inputs: &[&[f64]], cache: &mut Cache) {
        let cfg = &self.config;
        let (n, h, b) = (cfg.window, cfg.hidden, inputs.len());
        assert!(b > 0 && b <= cache.capacity, "batch of {b} exceeds cache capacity {}", cache.capacity);
        cache.batch = b;
        let d = cfg.input_dim;
        for (s, x) in inputs.iter().enumerate() {
            for t in 0..n {
                cache.x[(t * b + s) * d..(t * b + s + 1) * d].copy_from_slice(&x[t * d..(t + 1) * d]);
            }
        }

        for (l, layer) in self.lstm.iter().enumerate() {
            let (below, rest) = cache.layers.split_at_mut(l);
            let lc = &mut rest[0];
            let in_dim = layer.w.cols;
            let input: &[f64] = if l == 0 { &cache.x[..n * b * d] } else { &below[l - 1].h[b * h..(n + 1) * b * h] };
            let z = &mut lc.gates[..n * b * 4 * h];
            for row in z.chunks_exact_mut(4 * h) {
                row.copy_from_slice(&layer.b);
            }
            // input contribution of every step at once: Z += X · Wᵀ
            gemm(n * b, in_dim, 4 * h, input, in_dim, 1, &layer.w.data, 1, in_dim, 1.0, z);
            lc.c[..b * h].fill(0.0);
            lc.h[..b * h].fill(0.0);
            for t in 0..n {
                let (h_hist, h_cur) = lc.h.split_at_mut((t + 1) * b * h);
                let h_prev = &h_hist[t * b * h..];
                let zt = &mut lc.gates[t * b * 4 * h..(t + 1) * b * 4 * h];
                gemm(b, h, 4 * h, h_prev, h, 1, &layer.u.data, 1, h, 1.0, zt);
                let (c_hist, c_cur) = lc.c.split_at_mut((t + 1) * b * h);
                let c_prev = &c_hist[t * b * h..];
                for s in 0..b {
                    let g = &mut zt[s * 4 * h..(s + 1) * 4 * h];
                    for (r, v) in g.iter_mut().enumerate() {
                        *v = if (2 * h..3 * h).contains(&r) { tanh(*v) } else { sigmoid(*v) };
                    }
                    for k in 0..h {
                        let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                        let c = f * c_prev[s * h + k] + i * gg;
                        c_cur[s * h + k] = c;
                        let tc = tanh(c);
                        lc.tanh_c[(t * b + s) * h + k] = tc;
                        h_cur[s * h + k] = o * tc;
                    }
                }
            }
        }

        let classes = cfg.classes;
        let last = &cache.layers[self.lstm.len() - 1].h[n * b * h..(n + 1) * b * h];
        let logits = &mut cache.logits[..b * classes];
        for row in logits.chunks_exact_mut(classes) {
            row.copy_from_slice(&self.dense_b);
        }
        gemm(b, h, classes, last, h, 1, &self.dense_w.data, 1, h, 1.0, logits);
        for s in 0..b {
            let z = &cache.logits[s * classes..(s + 1) * classes];
            let p = &mut cache.probs[s * classes..(s + 1) * classes];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (pj, zj) in p.iter_mut().zip(z) {
                *pj = (zj - max).exp();
                sum += *pj;
            }
            cache.log_sum_exp[s] = max + sum.ln();
            p.iter_mut().for_each(|v| *v /= sum);
        }
    }

    /// Accumulates `Σ_s weights[s] · ∂CCE_s/∂θ` for the batch held in
    /// `cache` into `grads`.
    pub fn backward_batch(&self, labels: &[ClassLabel], weights: &[f64], cache: &mut Cache, grads: &mut Model) {
        let cfg = &self.config;
        let (n, h, b, classes) = (cfg.window, cfg.hidden, cache.batch, cfg.classes);
        assert_eq!(labels.len(), b);
        assert_eq!(weights.len(), b);
        let top = self.lstm.len() - 1;

        let dlogits = &mut cache.dlogits[..b * classes];
        for s in 0..b {
            for j in 0..classes {
                let y = if j == labels[s].index() { 1.0 } else { 0.0 };
                dlogits[s * classes + j] = weights[s] * (cache.probs[s * classes + j] - y);
            }
        }
        let last = &cache.layers[top].h[n * b * h..(n + 1) * b * h];
        gemm(classes, b, h, dlogits, 1, classes, last, h, 1, 1.0, &mut grads.dense_w.data);
        for row in dlogits.chunks_exact(classes) {
            axpy(1.0, row, &mut grads.dense_b);
        }
        cache.dh_ext[..n * b * h].fill(0.0);
        gemm(b, classes, h, dlogits, classes, 1, &self.dense_w.data, h, 1, 0.0, &mut cache.dh_ext[(n - 1) * b * h..n * b * h]);

        for l in (0..=top).rev() {
            let layer = &self.lstm[l];
            let g = &mut grads.lstm[l];
            let in_dim = layer.w.cols;
            let (below, rest) = cache.layers.split_at(l);
            let lc = &rest[0];
            cache.dh_next[..b * h].fill(0.0);
            cache.dc_next[..b * h].fill(0.0);
            for t in (0..n).rev() {
                for s in 0..b {
                    let row = t * b + s;
                    let gates = &lc.gates[row * 4 * h..(row + 1) * 4 * h];
                    let dz = &mut cache.dz[row * 4 * h..(row + 1) * 4 * h];
                    for k in 0..h {
                        let dh = cache.dh_ext[row * h + k] + cache.dh_next[s * h + k];
                        let (i, f, gg, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
                        let tc = lc.tanh_c[row * h + k];
                        let dc = dh * o * (1.0 - tc * tc) + cache.dc_next[s * h + k];
                        cache.dc_next[s * h + k] = dc * f;
                        dz[k] = dc * gg * i * (1.0 - i);
                        dz[h + k] = dc * lc.c[row * h + k] * f * (1.0 - f);
                        dz[2 * h + k] = dc * i * (1.0 - gg * gg);
                        dz[3 * h + k] = dh * tc * o * (1.0 - o);
                    }
                }
                let dzt = &cache.dz[t * b * 4 * h..(t + 1) * b * 4 * h];
                gemm(b, 4 * h, h, dzt, 4 * h, 1, &layer.u.data, h, 1, 0.0, &mut cache.dh_next[..b * h]);
            }
            let dz = &cache.dz[..n * b * 4 * h];
            let input: &[f64] = if l == 0 { &cache.x[..n * b * in_dim] } else { &below[l - 1].h[b * h..(n + 1) * b * h] };
            gemm(4 * h, n * b, in_dim, dz, 1, 4 * h, input, in_dim, 1, 1.0, &mut g.w.data);
            gemm(4 * h, n * b, h, dz, 1, 4 * h, &lc.h[..n * b * h], h, 1, 1.0, &mut g.u.data);
            for row in dz.chunks_exact(4 * h) {
                axpy(1.0, row, &mut g.b);
            }
            if l > 0 {
                gemm(n * b, 4 * h, h, dz, 4 * h, 1, &layer.w.data, h, 1, 0.0, &mut cache.dx[..n * b * h]);
                std::mem::swap(&mut cache.dh_ext, &mut cache.dx);
            }
        }
    }

    /// Argmax (lowest index on ties) and the full distribution.
    pub fn predict(&self, window: &[TimedIOVector]) -> Result<(ClassLabel, Vec<f64>), NnError> {
        let probs = self.forward(window)?;
        Ok((argmax(&probs), probs))
    }
}

/// `C = A·B + beta·C` for row-major `C` (m × n); `A` (m × k) and `B` (k × n)
/// are addressed through row and column strides so transposes cost nothing.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> ClassLabel {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    ClassLabel::new(best).expect("eight outputs")
}

/// −log(max(ŷ_label, 1e-12)).
pub fn loss(probs: &[f64], label: ClassLabel) -> f64 {
    -probs[label.index()].max(PROB_FLOOR).ln()
}

/// Per-layer activations of one batched forward pass, time-major.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// N·B × 4H post-activation gate values.
    gates: Vec<f64>,
    /// (N+1)·B × H, the first B rows are the zero initial state.
    c: Vec<f64>,
    h: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Reusable forward/backward scratch space for batches of up to `capacity`
/// windows.
#[derive(Debug, Clone)]
pub struct Cache {
    capacity: usize,
    batch: usize,
    x: Vec<f64>,
    layers: Vec<LayerCache>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    log_sum_exp: Vec<f64>,
    dlogits: Vec<f64>,
    dh_ext: Vec<f64>,
    dx: Vec<f64>,
    dh_next: Vec<f64>,
    dc_next: Vec<f64>,
    dz: Vec<f64>,
}

impl Cache {
    pub fn new(cfg: &ModelConfig, capacity: usize) -> Self {
        let (n, h, b) = (cfg.window, cfg.hidden, capacity.max(1));
        Cache {
            capacity: b,
            batch: 0,
            x: vec![0.0; n * b * cfg.input_dim],
            layers: (0..cfg.layers)
                .map(|_| LayerCache {
                    gates: vec![0.0; n * b * 4 * h],
                    c: vec![0.0; (n + 1) * b * h],
                    h: vec![0.0; (n + 1) * b * h],
                    tanh_c: vec![0.0; n * b * h],
                })
                .collect(),
            logits: vec![0.0; b * cfg.classes],
            probs: vec![0.0; b * cfg.classes],
            log_sum_exp: vec![0.0; b],
            dlogits: vec![0.0; b * cfg.classes],
            dh_ext: vec![0.0; n * b * h],
            dx: vec![0.0; n * b * h],
            dh_next: vec![0.0; b * h],
            dc_next: vec![0.0; b * h],
            dz: vec![0.0; n * b * 4 * h],
        }
    }

    /// Distribution of sample `s` of the last forward batch.
    pub fn probs(&self, s: usize) -> &[f64] {
        let c = self.probs.len() / self.capacity;
        &self.probs[s * c..(s + 1) * c]
    }

    pub fn logits(&self, s: usize) -> &[f64] {
        let c = self.logits.len() / self.capacity;
        &self.logits[s * c..(s + 1) * c]
    }

    /// Cross-entropy of sample `s`, computed in the log domain.
    pub fn loss(&self, s: usize, label: ClassLabel) -> f64 {
        let nll = self.log_sum_exp[s] - self.logits(s)[label.index()];
        nll.min(-PROB_FLOOR.ln())
    }
}

/// Gradients of the mean batch CCE and the mean loss itself.
pub fn backward(model: &Model, batch: &[(&[TimedIOVector], ClassLabel)]) -> Result<(Model, f64), NnError> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let features = batch.iter().map(|(w, _)| model.features(w)).collect::<Result<Vec<_>, _>>()?;
    let inputs: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    let labels: Vec<ClassLabel> = batch.iter().map(|(_, l)| *l).collect();
    let weight = 1.0 / batch.len() as f64;
    let mut grads = Model::zeros(model.config);
    let mut cache = Cache::new(&model.config, batch.len());
    model.forward_batch(&inputs, &mut cache);
    let total: f64 = labels.iter().enumerate().map(|(s, &l)| cache.loss(s, l)).sum();
    model.backward_batch(&labels, &vec![weight; batch.len()], &mut cache, &mut grads);
    if !grads.all_finite() {
        return Err(NnError::NonFinite { fold: 0, epoch: 0, what: "gradient" });
    }
    Ok((grads, total * weight))
}

/// Largest relative error between analytic gradients and central finite
/// differences, `|a − n| / max(|a|, |n|, 1e-8)`, over every parameter.
/// The perturbed losses are evaluated in double-double precision so the
/// difference quotient is not swamped by f64 rounding.
pub fn grad_check(model: &Model, window: &[TimedIOVector], label: ClassLabel, eps: f64) -> Result<f64, NnError> {
    let (grads, _) = backward(model, &[(window, label)])?;
    let x = model.features(window)?;
    let step = Dd::from_f64(eps);
    let mut worst: f64 = 0.0;
    for (ti, tensor) in grads.tensors().iter().enumerate() {
        for (k, &analytic) in tensor.3.iter().enumerate() {
            let plus = reference_loss(model, &x, label, Some((ti, k, step)));
            let minus = reference_loss(model, &x, label, Some((ti, k, -step)));
            let numeric = (plus - minus).to_f64() / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub gradient_clip: Option<f64>,
    /// Weight each sample's loss by the inverse frequency of its class.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 32,
            optimizer: Optimizer::default(),
            seed: 0,
            gradient_clip: Some(5.0),
            class_weighting: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::TrainConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.gradient_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }
}

/// Optimizer state for one model.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m: Option<Model>,
    v: Option<Model>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64, shape: &ModelConfig) -> Self {
        let moments = matches!(kind, Optimizer::Adam { .. }).then(|| Model::zeros(*shape));
        OptimizerState { kind, lr, step: 0, m: moments.clone(), v: moments }
    }

    pub fn apply(&mut self, model: &mut Model, grads: &Model) {
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in model.tensors_mut().into_iter().zip(grads.tensors()) {
                    axpy(-lr, g.3, p);
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step);
                let bc2 = 1.0 - beta2.powi(self.step);
                let m = self.m.as_mut().expect("adam moments");
                let v = self.v.as_mut().expect("adam moments");
                for (((p, g), m), v) in model
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut())
                {
                    for k in 0..p.len() {
                        let gk = g.3[k];
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                        let mh = m[k] / bc1;
                        let vh = v[k] / bc2;
                        p[k] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Metrics of one (fold, epoch).
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub fold: usize,
    pub epoch: usize,
    /// Mean sample loss over the epoch's training batches.
    pub train_cce: f64,
    pub val_cce: f64,
    pub val_ac: f64,
    pub precision: [Option<f64>; NUM_CLASSES],
    pub recall: [Option<f64>; NUM_CLASSES],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurves {
    pub points: Vec<CurvePoint>,
}

pub const CURVES_HEADER: &str = "fold,epoch,train_cce,val_cce,val_ac,\
p_0,p_1,p_2,p_3,p_4,p_5,p_6,p_7,r_0,r_1,r_2,r_3,r_4,r_5,r_6,r_7";

impl TrainingCurves {
    pub fn fold(&self, fold: usize) -> impl Iterator<Item = &CurvePoint> {
        self.points.iter().filter(move |p| p.fold == fold)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CURVES_HEADER);
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        for p in &self.points {
            write!(out, "{},{},{:.6},{:.6},{:.6}", p.fold, p.epoch, p.train_cce, p.val_cce, p.val_ac).unwrap();
            for v in p.precision.iter().chain(&p.recall) {
                write!(out, ",{}", cell(*v)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<TrainingCurves, NnError> {
        let err = |line: usize, message: String| NnError::Curves { line: line + 1, message };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == CURVES_HEADER => {}
            Some((i, _)) => return Err(err(i, "unexpected header".into())),
            None => return Err(err(0, "empty curves file".into())),
        }
        let mut points = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 + 2 * NUM_CLASSES {
                return Err(err(i, format!("expected {} fields, found {}", 5 + 2 * NUM_CLASSES, f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| err(i, format!("bad integer `{s}`")));
            let real = |s: &str| s.parse::<f64>().map_err(|_| err(i, format!("bad number `{s}`")));
            let opt = |s: &str| if s == "undefined" { Ok(None) } else { real(s).map(Some) };
            let mut precision = [None; NUM_CLASSES];
            let mut recall = [None; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                precision[c] = opt(f[5 + c])?;
                recall[c] = opt(f[5 + NUM_CLASSES + c])?;
            }
            points.push(CurvePoint {
                fold: int(f[0])?,
                epoch: int(f[1])?,
                train_cce: real(f[2])?,
                val_cce: real(f[3])?,
                val_ac: real(f[4])?,
                precision,
                recall,
            });
        }
        Ok(TrainingCurves { points })
    }

    pub fn folds(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.points.iter().map(|p| p.fold).collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

/// Mean loss and confusion matrix of `model` on the given samples.
pub fn evaluate(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<(f64, ConfusionMatrix), NnError> {
    let features = indices
        .iter()
        .map(|&i| model.features(&dataset.samples[i].window))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<ClassLabel> = indices.iter().map(|&i| dataset.samples[i].label).collect();
    let inputs: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    evaluate_features(model, &inputs, &labels)
}

/// Windows are evaluated in fixed chunks so results never depend on the
/// caller.
const EVAL_BATCH: usize = 64;

fn evaluate_features(model: &Model, inputs: &[&[f64]], labels: &[ClassLabel]) -> Result<(f64, ConfusionMatrix), NnError> {
    if inputs.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut cache = Cache::new(&model.config, EVAL_BATCH);
    let mut preds = Vec::with_capacity(inputs.len());
    let mut total = 0.0;
    for (xs, ls) in inputs.chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
        model.forward_batch(xs, &mut cache);
        for (s, &l) in ls.iter().enumerate() {
            total += cache.loss(s, l);
            preds.push(argmax(cache.probs(s)));
        }
    }
    let cm = confusion(&preds, labels, model.config.classes).expect("labels in range");
    Ok((total / inputs.len() as f64, cm))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: Vec<Model>,
    pub curves: TrainingCurves,
}

/// Seed of fold `fold` derived from the master seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    crate::derive_seed(seed, 0, fold as u64)
}

/// Trains one model per fold: on all other folds, validated on the fold.
/// Folds run on up to `threads` worker threads; results do not depend on
/// the thread count.
pub fn train(
    dataset: &Dataset,
    folds: &FoldSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    threads: usize,
) -> Result<TrainOutcome, NnError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if folds.assignment.len() != dataset.len() {
        return Err(NnError::FoldMismatch { split: folds.assignment.len(), dataset: dataset.len() });
    }
    if (dataset.window, dataset.width) != (model_cfg.window, model_cfg.width()) {
        return Err(NnError::Dimension {
            expected: (model_cfg.window, model_cfg.width()),
            found: (dataset.window, dataset.width),
        });
    }
    let probe = Model::zeros(*model_cfg);
    let features = dataset
        .samples
        .iter()
        .map(|s| probe.features(&s.window))
        .collect::<Result<Vec<_>, _>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| NnError::Threads(e.to_string()))?;
    let results: Vec<Result<(Model, Vec<CurvePoint>), NnError>> = pool.install(|| {
        (0..folds.k)
            .into_par_iter()
            .map(|fold| train_fold(dataset, &features, folds, fold, model_cfg, train_cfg))
            .collect()
    });
    let mut models = Vec::with_capacity(folds.k);
    let mut curves = TrainingCurves::default();
    for r in results {
        let (m, pts) = r?;
        models.push(m);
        curves.points.extend(pts);
    }
    Ok(TrainOutcome { models, curves })
}

fn train_fold(
    dataset: &Dataset,
    features: &[Vec<f64>],
    folds: &FoldSplit,
    fold: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<CurvePoint>), NnError> {
    let train_idx = folds.training(fold);
    let val_idx = folds.validation(fold);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let val_inputs: Vec<&[f64]> = val_idx.iter().map(|&i| features[i].as_slice()).collect();
    let val_labels: Vec<ClassLabel> = val_idx.iter().map(|&i| dataset.samples[i].label).collect();
    let mut points = Vec::with_capacity(cfg.epochs);
    let model = fit_features(dataset, features, &train_idx, fold, model_cfg, cfg, |epoch, model, train_cce| {
        let (val_cce, cm) = evaluate_features(model, &val_inputs, &val_labels)?;
        let val_ac = cm.average_accuracy().expect("non-empty validation fold");
        points.push(CurvePoint {
            fold,
            epoch,
            train_cce,
            val_cce,
            val_ac,
            precision: std::array::from_fn(|i| cm.precision(i)),
            recall: std::array::from_fn(|i| cm.recall(i)),
        });
        Ok(true)
    })?;
    Ok((model, points))
}

/// Trains a fresh model on `indices` for up to `cfg.epochs` epochs, seeded
/// like fold 0. After every epoch `on_epoch(epoch, model, mean train CCE)`
/// runs; returning `false` stops early.
pub fn fit<F>(dataset: &Dataset, indices: &[usize], model_cfg: &ModelConfig, cfg: &TrainConfig, on_epoch: F) -> Result<Model, NnError>
where
    F: FnMut(usize, &Model, f64) -> Result<bool, NnError>,
{
    model_cfg.validate()?;
    cfg.validate()?;
    let probe = Model::zeros(*model_cfg);
    let features = dataset.samples.iter().map(|s| probe.features(&s.window)).collect::<Result<Vec<_>, _>>()?;
    fit_features(dataset, &features, indices, 0, model_cfg, cfg, on_epoch)
}

fn fit_features<F>(
    dataset: &Dataset,
    features: &[Vec<f64>],
    indices: &[usize],
    fold: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Model, NnError>
where
    F: FnMut(usize, &Model, f64) -> Result<bool, NnError>,
{
    if indices.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let seed = fold_seed(cfg.seed, fold);
    let mut model = Model::init(*model_cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66);
    let mut train_idx = indices.to_vec();

    let mut class_weight = [1.0; NUM_CLASSES];
    if cfg.class_weighting {
        let mut counts = [0usize; NUM_CLASSES];
        for &i in &train_idx {
            counts[dataset.samples[i].label.index()] += 1;
        }
        let present = counts.iter().filter(|&&c| c > 0).count() as f64;
        for (w, &c) in class_weight.iter_mut().zip(&counts) {
            if c > 0 {
                *w = train_idx.len() as f64 / (present * c as f64);
            }
        }
    }

    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, model_cfg);
    let mut grads = Model::zeros(*model_cfg);
    let mut cache = Cache::new(model_cfg, cfg.batch_size);
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| features[i].as_slice()).collect();
            let labels: Vec<ClassLabel> = batch.iter().map(|&i| dataset.samples[i].label).collect();
            let weights: Vec<f64> = labels.iter().map(|l| class_weight[l.index()] * scale).collect();
            model.forward_batch(&inputs, &mut cache);
            for (s, &label) in labels.iter().enumerate() {
                let l = cache.loss(s, label);
                if !l.is_finite() {
                    return Err(NnError::NonFinite { fold, epoch, what: "loss" });
                }
                epoch_loss += l;
            }
            model.backward_batch(&labels, &weights, &mut cache, &mut grads);
            if let Some(clip) = cfg.gradient_clip {
                let norm = grads.norm();
                if !norm.is_finite() {
                    return Err(NnError::NonFinite { fold, epoch, what: "gradient" });
                }
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            opt.apply(&mut model, &grads);
        }
        if !model.all_finite() {
            return Err(NnError::NonFinite { fold, epoch, what: "parameter" });
        }
        if !on_epoch(epoch, &model, epoch_loss / train_idx.len() as f64)? {
            break;
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Checkpoints

impl Model {
    /// Versioned text checkpoint; values carry 17 significant digits.
    pub fn to_checkpoint(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        writeln!(out, "format={CHECKPOINT_FORMAT}").unwrap();
        writeln!(out, "input_dim={}", c.input_dim).unwrap();
        writeln!(out, "hidden={}", c.hidden).unwrap();
        writeln!(out, "layers={}", c.layers).unwrap();
        writeln!(out, "classes={}", c.classes).unwrap();
        writeln!(out, "window={}", c.window).unwrap();
        writeln!(out, "time_scaling={}", c.time_scaling).unwrap();
        for (name, rows, cols, values) in self.tensors() {
            write!(out, "{name} {rows}x{cols}").unwrap();
            for v in values {
                write!(out, " {v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Model, NnError> {
        let err = |line: usize, message: String| NnError::Checkpoint { line: line + 1, message };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut kv = |key: &str| -> Result<(usize, String), NnError> {
            let (i, line) = lines.next().ok_or_else(|| err(0, format!("missing `{key}`")))?;
            match line.split_once('=') {
                Some((k, v)) if k.trim() == key => Ok((i, v.trim().to_string())),
                _ => Err(err(i, format!("expected `{key}=`"))),
            }
        };
        let num = |(i, v): (usize, String)| -> Result<usize, NnError> {
            v.parse().map_err(|_| err(i, format!("bad integer `{v}`")))
        };
        let (fi, format) = kv("format")?;
        if format != CHECKPOINT_FORMAT.to_string() {
            return Err(err(fi, format!("unsupported format `{format}`")));
        }
        let input_dim = num(kv("input_dim")?)?;
        let hidden = num(kv("hidden")?)?;
        let layers = num(kv("layers")?)?;
        let classes = num(kv("classes")?)?;
        let window = num(kv("window")?)?;
        let (ti, ts) = kv("time_scaling")?;
        let time_scaling = ts.parse().map_err(|_| err(ti, format!("bad time scaling `{ts}`")))?;
        let config = ModelConfig { input_dim, hidden, layers, classes, window, time_scaling };
        config.validate()?;
        let mut model = Model::zeros(config);
        let expected: Vec<(String, usize, usize)> =
            model.tensors().iter().map(|(n, r, c, _)| (n.clone(), *r, *c)).collect();
        let mut targets = model.tensors_mut();
        for ((name, rows, cols), target) in expected.iter().zip(targets.iter_mut()) {
            let (i, line) = lines.next().ok_or_else(|| err(0, format!("missing tensor `{name}`")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name.as_str()) {
                return Err(err(i, format!("expected tensor `{name}`")));
            }
            let shape = format!("{rows}x{cols}");
            if parts.next() != Some(shape.as_str()) {
                return Err(err(i, format!("expected shape {shape}")));
            }
            let values = parts
                .map(|p| p.parse::<f64>().map_err(|_| err(i, format!("bad value `{p}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != target.len() {
                return Err(err(i, format!("expected {} values, found {}", target.len(), values.len())));
            }
            target.copy_from_slice(&values);
        }
        if let Some((i, _)) = lines.next() {
            return Err(err(i, "trailing data".into()));
        }
        if !model.all_finite() {
            return Err(err(0, "non-finite parameter".into()));
        }
        Ok(model)
    }
}
