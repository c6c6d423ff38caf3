//! Graph convolutional network with hand-written reverse mode, input
//! normalization, Adam and adaptive gradient clipping.
//!
//! Layer map: `Z' = φ(Σ_{f=0}^{F} S^f Z Θ_f + 1 θ_b^T)`, ReLU on hidden
//! layers and `φ(x) = exp(c·tanh(x/c))` on the output layer, so outputs lie
//! in `[e^{−c}, e^{c}]`. Products with the shift operator use
//! order-independent summation, which makes the network exactly
//! permutation equivariant.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::linalg::{RMat, RVec};
use crate::stats::{quantile, sorted_sum};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnnConfig {
    pub in_features: usize,
    /// Number of graph convolution layers.
    pub layers: usize,
    /// Highest shift power per layer; 0 gives a per-node fully connected net.
    pub order: usize,
    pub hidden: usize,
    pub out_features: usize,
    /// Soft bound `c` of the output activation.
    pub out_bound: f64,
}

impl Default for GcnnConfig {
    fn default() -> Self {
        Self { in_features: 4, layers: 3, order: 1, hidden: 32, out_features: 4, out_bound: 8.0 }
    }
}

impl GcnnConfig {
    /// Feature widths `F^0, …, F^L`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_features];
        w.extend(std::iter::repeat_n(self.hidden, self.layers.saturating_sub(1)));
        w.push(self.out_features);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.in_features == 0 || self.out_features == 0 {
            return Err(config_err("network needs at least one layer and nonempty in/out features"));
        }
        if self.layers > 1 && self.hidden == 0 {
            return Err(config_err("hidden width must be positive"));
        }
        if !(self.out_bound > 0.0) {
            return Err(config_err("output bound must be positive"));
        }
        Ok(())
    }
}

/// Trainable parameters; also used for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnnParams {
    /// `weights[layer][f]` is `Θ_f` of that layer.
    pub weights: Vec<Vec<RMat>>,
    pub biases: Vec<RVec>,
    pub norm_scale: RVec,
    pub norm_shift: RVec,
}

impl GcnnParams {
    pub fn zeros(cfg: &GcnnConfig) -> Self {
        let w = cfg.widths();
        Self {
            weights: (0..cfg.layers).map(|l| vec![RMat::zeros(w[l], w[l + 1]); cfg.order + 1]).collect(),
            biases: (0..cfg.layers).map(|l| RVec::zeros(w[l + 1])).collect(),
            norm_scale: RVec::zeros(cfg.in_features),
            norm_shift: RVec::zeros(cfg.in_features),
        }
    }

    /// Uniform fan-in initialization `U(−1/√F_in, 1/√F_in)`, zero biases,
    /// identity normalization affine map.
    pub fn init(cfg: &GcnnConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(cfg);
        for layer in p.weights.iter_mut() {
            for theta in layer.iter_mut() {
                let bound = 1.0 / (theta.nrows() as f64).sqrt();
                theta.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
            }
        }
        p.norm_scale.fill(1.0);
        p
    }

    /// Flattened in the order: per layer (Θ_0..Θ_F column-major, bias), then
    /// normalization scale and shift.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (layer, bias) in self.weights.iter().zip(&self.biases) {
            for theta in layer {
                out.extend_from_slice(theta.as_slice());
            }
            out.extend_from_slice(bias.as_slice());
        }
        out.extend_from_slice(self.norm_scale.as_slice());
        out.extend_from_slice(self.norm_shift.as_slice());
        out
    }

    pub fn from_flat(cfg: &GcnnConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(cfg);
        let mut k = 0;
        let mut take = |dst: &mut [f64]| -> Result<()> {
            let end = k + dst.len();
            let src = flat.get(k..end).ok_or_else(|| Error::Format("parameter blob too short".into()))?;
            dst.copy_from_slice(src);
            k = end;
            Ok(())
        };
        for (layer, bias) in p.weights.iter_mut().zip(p.biases.iter_mut()) {
            for theta in layer.iter_mut() {
                take(theta.as_mut_slice())?;
            }
            take(bias.as_mut_slice())?;
        }
        take(p.norm_scale.as_mut_slice())?;
        take(p.norm_shift.as_mut_slice())?;
        if k != flat.len() {
            return Err(Error::Format("parameter blob too long".into()));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.weights.iter().flatten().map(|t| t.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
            + 2 * self.norm_scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &Self) {
        for (a, b) in self.weights.iter_mut().flatten().zip(other.weights.iter().flatten()) {
            *a += b * c;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b * c;
        }
        self.norm_scale += &other.norm_scale * c;
        self.norm_shift += &other.norm_shift * c;
    }
}

/// Cached quantities of one normalization call.
#[derive(Debug, Clone)]
pub struct NormCache {
    /// Standardized inputs per graph before the affine map.
    pub standardized: Vec<RMat>,
}

/// Cached activations of one graph forward pass.
#[derive(Debug, Clone)]
pub struct GraphCache {
    shift: RMat,
    /// `shifted[layer][f] = S^f Z_layer`.
    shifted: Vec<Vec<RMat>>,
    pre: Vec<RMat>,
    out: Vec<RMat>,
}

/// `S Z` with every entry summed independently of node order.
fn shift_mul(s: &RMat, z: &RMat) -> RMat {
    let n = s.nrows();
    let mut terms = Vec::with_capacity(n);
    RMat::from_fn(n, z.ncols(), |i, c| {
        terms.clear();
        terms.extend((0..n).map(|k| s[(i, k)] * z[(k, c)]));
        sorted_sum(&mut terms)
    })
}

fn shift_mul_t(s: &RMat, z: &RMat) -> RMat {
    shift_mul(&s.transpose(), z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gcnn {
    pub cfg: GcnnConfig,
    pub params: GcnnParams,
    pub running_mean: RVec,
    pub running_var: RVec,
}

impl Gcnn {
    pub fn new(cfg: GcnnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params: GcnnParams::init(&cfg, rng),
            running_mean: RVec::zeros(cfg.in_features),
            running_var: RVec::from_element(cfg.in_features, 1.0),
            cfg,
        })
    }

    fn check_input(&self, z0: &RMat, shift: &RMat) -> Result<()> {
        if z0.ncols() != self.cfg.in_features {
            return Err(Error::Dimension(format!(
                "expected {} input features, got {}",
                self.cfg.in_features,
                z0.ncols()
            )));
        }
        if shift.nrows() != z0.nrows() || shift.ncols() != z0.nrows() {
            return Err(Error::Dimension("shift operator must be I×I".into()));
        }
        Ok(())
    }

    /// Normalizes every graph's node features. Training mode uses the
    /// statistics of all nodes in the batch and updates the running
    /// statistics; eval mode (or a batch with fewer than two nodes) uses the
    /// running statistics.
    pub fn normalize(&mut self, inputs: &[RMat], training: bool) -> (Vec<RMat>, NormCache) {
        let f = self.cfg.in_features;
        let rows: usize = inputs.iter().map(|z| z.nrows()).sum();
        let (mean, var) = if training && rows >= 2 {
            let mut mean = RVec::zeros(f);
            let mut var = RVec::zeros(f);
            let mut terms = Vec::with_capacity(rows);
            for c in 0..f {
                terms.clear();
                terms.extend(inputs.iter().flat_map(|z| z.column(c).iter().copied().collect::<Vec<_>>()));
                let m = sorted_sum(&mut terms.clone()) / rows as f64;
                let mut sq: Vec<f64> = terms.iter().map(|x| (x - m).powi(2)).collect();
                mean[c] = m;
                var[c] = sorted_sum(&mut sq) / rows as f64;
            }
            self.running_mean = &self.running_mean * (1.0 - NORM_MOMENTUM) + &mean * NORM_MOMENTUM;
            self.running_var = &self.running_var * (1.0 - NORM_MOMENTUM) + &var * NORM_MOMENTUM;
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        self.apply_norm(inputs, &mean, &var)
    }

    /// Normalization with the running statistics (no state change).
    pub fn normalize_eval(&self, inputs: &[RMat]) -> (Vec<RMat>, NormCache) {
        self.apply_norm(inputs, &self.running_mean, &self.running_var)
    }

    fn apply_norm(&self, inputs: &[RMat], mean: &RVec, var: &RVec) -> (Vec<RMat>, NormCache) {
        let inv_std = var.map(|v| 1.0 / (v + NORM_EPS).sqrt());
        let standardized: Vec<RMat> = inputs
            .iter()
            .map(|z| RMat::from_fn(z.nrows(), z.ncols(), |r, c| (z[(r, c)] - mean[c]) * inv_std[c]))
            .collect();
        let out = standardized
            .iter()
            .map(|x| {
                RMat::from_fn(x.nrows(), x.ncols(), |r, c| {
                    x[(r, c)] * self.params.norm_scale[c] + self.params.norm_shift[c]
                })
            })
            .collect();
        (out, NormCache { standardized })
    }

    /// Graph layers on already normalized features.
    pub fn forward_graph(&self, z0: &RMat, shift: &RMat) -> Result<(RMat, GraphCache)> {
        self.check_input(z0, shift)?;
        let n = z0.nrows();
        let last = self.cfg.layers - 1;
        let c = self.cfg.out_bound;
        let mut z = z0.clone();
        let mut cache = GraphCache { shift: shift.clone(), shifted: Vec::new(), pre: Vec::new(), out: Vec::new() };
        for (l, (thetas, bias)) in self.params.weights.iter().zip(&self.params.biases).enumerate() {
            let mut shifted = vec![z.clone()];
            for _ in 1..thetas.len() {
                let next = shift_mul(shift, shifted.last().expect("nonempty"));
                shifted.push(next);
            }
            let mut pre = RMat::from_fn(n, bias.len(), |_, k| bias[k]);
            for (y, theta) in shifted.iter().zip(thetas) {
                pre += y * theta;
            }
            let out = if l == last { pre.map(|x| (c * (x / c).tanh()).exp()) } else { pre.map(|x| x.max(0.0)) };
            cache.shifted.push(shifted);
            cache.pre.push(pre);
            cache.out.push(out.clone());
            z = out;
        }
        Ok((z, cache))
    }

    /// Reverse pass of [`Gcnn::forward_graph`]: weight/bias gradients (the
    /// normalization entries are left zero) and the gradient w.r.t. the
    /// normalized input features.
    pub fn backward_graph(&self, cache: &GraphCache, dout: &RMat) -> (GcnnParams, RMat) {
        let mut grads = GcnnParams::zeros(&self.cfg);
        let last = self.cfg.layers - 1;
        let c = self.cfg.out_bound;
        let mut dz = dout.clone();
        for l in (0..self.cfg.layers).rev() {
            let pre = &cache.pre[l];
            let dpre = if l == last {
                let out = &cache.out[l];
                RMat::from_fn(pre.nrows(), pre.ncols(), |r, k| {
                    let t = (pre[(r, k)] / c).tanh();
                    dz[(r, k)] * out[(r, k)] * (1.0 - t * t)
                })
            } else {
                RMat::from_fn(pre.nrows(), pre.ncols(), |r, k| if pre[(r, k)] > 0.0 { dz[(r, k)] } else { 0.0 })
            };
            for k in 0..dpre.ncols() {
                grads.biases[l][k] = dpre.column(k).sum();
            }
            let thetas = &self.params.weights[l];
            let mut dy: Option<RMat> = None;
            for f in (0..thetas.len()).rev() {
                grads.weights[l][f] = cache.shifted[l][f].transpose() * &dpre;
                // Horner form of Σ_f (S^T)^f dpre Θ_f^T
                let term = &dpre * thetas[f].transpose();
                dy = Some(match dy {
                    None => term,
                    Some(acc) => term + shift_mul_t(&cache.shift, &acc),
                });
            }
            dz = dy.expect("at least one shift power");
        }
        (grads, dz)
    }

    /// Accumulates normalization affine gradients from gradients w.r.t. the
    /// normalized features.
    pub fn backward_norm(&self, cache: &NormCache, dnorm: &[RMat], grads: &mut GcnnParams) {
        for (x, d) in cache.standardized.iter().zip(dnorm) {
            for c in 0..x.ncols() {
                for r in 0..x.nrows() {
                    grads.norm_scale[c] += d[(r, c)] * x[(r, c)];
                    grads.norm_shift[c] += d[(r, c)];
                }
            }
        }
    }

    /// Eval-mode forward of one graph.
    pub fn forward(&self, z0: &RMat, shift: &RMat) -> Result<RMat> {
        let (norm, _) = self.normalize_eval(std::slice::from_ref(z0));
        Ok(self.forward_graph(&norm[0], shift)?.0)
    }

    /// Parameters followed by running mean and variance.
    pub fn to_blob(&self) -> Vec<f64> {
        let mut v = self.params.to_flat();
        v.extend_from_slice(self.running_mean.as_slice());
        v.extend_from_slice(self.running_var.as_slice());
        v
    }

    pub fn from_blob(cfg: GcnnConfig, blob: &[f64]) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.in_features;
        if blob.len() < 2 * f {
            return Err(Error::Format("network blob too short".into()));
        }
        let split = blob.len() - 2 * f;
        let params = GcnnParams::from_flat(&cfg, &blob[..split])?;
        Ok(Self {
            cfg,
            params,
            running_mean: RVec::from_row_slice(&blob[split..split + f]),
            running_var: RVec::from_row_slice(&blob[split + f..]),
        })
    }

    pub fn blob_len(&self) -> usize {
        self.params.len() + 2 * self.cfg.in_features
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// Moment accumulators of Adam.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    /// Steps skipped because of non-finite gradients.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, skipped: 0 }
    }
}

/// Bias-corrected Adam step with decoupled weight decay. Returns `false`
/// (and leaves everything but the skip counter untouched) for non-finite
/// gradients.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> bool {
    assert_eq!(params.len(), grads.len());
    if state.m.len() != params.len() {
        *state = AdamState { skipped: state.skipped, ..AdamState::new(params.len()) };
    }
    if !grads.iter().all(|g| g.is_finite()) {
        state.skipped += 1;
        return false;
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        params[k] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[k]);
    }
    true
}

/// Bounded history of pre-clipping gradient ∞-norms.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipHistory {
    pub norms: VecDeque<f64>,
    pub capacity: usize,
    pub level: f64,
}

impl Default for ClipHistory {
    fn default() -> Self {
        Self { norms: VecDeque::new(), capacity: 1000, level: 0.9 }
    }
}

/// Rescales `grad` so its ∞-norm does not exceed the `level`-quantile of the
/// history, then records the pre-clip norm. Returns the applied factor.
pub fn clip_gradient_adaptive(grad: &mut [f64], history: &mut ClipHistory) -> f64 {
    let norm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let mut factor = 1.0;
    let hist: Vec<f64> = history.norms.iter().copied().collect();
    if let Some(limit) = quantile(&hist, history.level) {
        if norm > limit && norm > 0.0 {
            factor = limit / norm;
            grad.iter_mut().for_each(|g| *g *= factor);
        }
    }
    if norm.is_finite() {
        history.norms.push_back(norm);
        while history.norms.len() > history.capacity {
            history.norms.pop_front();
        }
    }
    factor
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HBFCKPT1";

/// Writes a checkpoint: magic, little-endian `u64` header length, JSON
/// header, little-endian `u64` value count, then the float64 values.
pub fn write_checkpoint<H: Serialize>(path: &Path, header: &H, blob: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&(blob.len() as u64).to_le_bytes())?;
    for x in blob {
        f.write_all(&x.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = || Error::Format(format!("{} is not a valid checkpoint", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad());
    }
    let read_u64 = |at: usize| -> Result<usize> {
        let b: [u8; 8] = bytes.get(at..at + 8).ok_or_else(bad)?.try_into().map_err(|_| bad())?;
        Ok(u64::from_le_bytes(b) as usize)
    };
    let hlen = read_u64(8)?;
    let header: H = serde_json::from_slice(bytes.get(16..16 + hlen).ok_or_else(bad)?)?;
    let count = read_u64(16 + hlen)?;
    let start = 24 + hlen;
    let data = bytes.get(start..start + 8 * count).ok_or_else(bad)?;
    if start + 8 * count != bytes.len() {
        return Err(bad());
    }
    let blob = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    Ok((header, blob))
}
