//! Bias-free ReLU feedforward networks `f(x) = W_n φ(W_{n-1} … φ(W_1 x))`
//! with exact reverse-mode gradients, the margin operator, weight-norm
//! statistics, spectral rebalancing and Gaussian weight perturbation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::seeded;
use crate::tensor::{frobenius_norm, spectral_norm_default, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNet {
    layers: Vec<Matrix>,
}

/// Pre-activations recorded by [`FeedForwardNet::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// `pre_activations[l] = W_{l+1} a_l`; the last entry is the logits.
    pub pre_activations: Vec<Vec<f64>>,
}

/// Gradients of a scalar with respect to every weight and to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub weight_grads: Vec<Matrix>,
    pub input_grad: Vec<f64>,
}

impl GradBundle {
    /// All-zero gradients shaped like `net` (empty input gradient).
    pub fn zeros_like(net: &FeedForwardNet) -> Self {
        Self {
            weight_grads: net
                .layers
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            input_grad: Vec::new(),
        }
    }

    /// `self += c · other` on the weight gradients.
    pub fn add_scaled(&mut self, other: &GradBundle, c: f64) {
        for (a, b) in self.weight_grads.iter_mut().zip(&other.weight_grads) {
            a.add_scaled(b, c);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weight_grads
            .iter()
            .all(|g| g.as_slice().iter().all(|&x| x == 0.0))
    }

    /// Inner product of the weight gradients with a weight-shaped direction.
    pub fn dot_weights(&self, direction: &[Matrix]) -> f64 {
        self.weight_grads
            .iter()
            .zip(direction)
            .map(|(g, d)| crate::tensor::dot(g.as_slice(), d.as_slice()))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightStats {
    pub spectral: Vec<f64>,
    pub frobenius: Vec<f64>,
    /// `Π ‖W_l‖₂`
    pub spec_product: f64,
    /// `Σ ‖W_l‖_F² / ‖W_l‖₂²`
    pub fro_spec_ratio_sum: f64,
    /// Geometric mean of the spectral norms.
    pub beta: f64,
}

impl FeedForwardNet {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "network needs at least one layer".into(),
            ));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() {
                return Err(shape_err(
                    "FeedForwardNet::new",
                    format!("layer {} input dim {}", l + 2, pair[0].rows()),
                    pair[1].cols(),
                ));
            }
        }
        if layers.iter().any(|w| w.is_empty()) {
            return Err(Error::EmptyMatrix);
        }
        if layers
            .iter()
            .any(|w| w.as_slice().iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite("FeedForwardNet::new"));
        }
        Ok(Self { layers })
    }

    /// He-initialized network: entries of layer `l` drawn from
    /// `N(0, 2 / fan_in)`. `dims = [input, hidden…, output]`.
    pub fn he_init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer dims {dims:?}")));
        }
        let mut rng = seeded(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("valid std");
                Matrix::from_fn(w[1], w[0], |_, _| normal.sample(&mut rng))
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    /// Mutable weights for in-place optimizer updates. Callers keep the
    /// entries finite and shapes unchanged.
    pub fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    /// Number of layers `n`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    /// Output dimension `d_y`.
    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    /// `[input, hidden…, output]`
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Matrix::rows))
            .collect()
    }

    /// Width `h`: the largest dimension of any weight matrix.
    pub fn width(&self) -> usize {
        self.dims().into_iter().max().unwrap_or(0)
    }

    /// Logits and the pre-activations needed by [`Self::backward`].
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for (l, w) in self.layers.iter().enumerate() {
            let z = w.matvec(&act);
            if l + 1 < self.layers.len() {
                act = z.iter().map(|&v| relu(v)).collect();
            }
            pre.push(z);
        }
        let logits = pre.last().cloned().unwrap_or_default();
        Ok((
            logits,
            ForwardTrace {
                input: x.to_vec(),
                pre_activations: pre,
            },
        ))
    }

    /// Logits only.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut act = x.to_vec();
        for (l, w) in self.layers.iter().enumerate() {
            act = w.matvec(&act);
            if l + 1 < self.layers.len() {
                act.iter_mut().for_each(|v| *v = relu(*v));
            }
        }
        Ok(act)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(shape_err("forward", self.input_dim(), x.len()));
        }
        Ok(())
    }

    /// Gradients of `grad_logitsᵀ · f(x)` for the input recorded in `trace`.
    /// The ReLU derivative at exactly zero is taken as zero.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &[f64]) -> Result<GradBundle> {
        let n = self.layers.len();
        if trace.pre_activations.len() != n
            || trace
                .pre_activations
                .iter()
                .zip(&self.layers)
                .any(|(z, w)| z.len() != w.rows())
            || trace.input.len() != self.input_dim()
        {
            return Err(shape_err(
                "backward",
                "trace from this network",
                "foreign trace",
            ));
        }
        if grad_logits.len() != self.output_dim() {
            return Err(shape_err("backward", self.output_dim(), grad_logits.len()));
        }
        let mut weight_grads = vec![Matrix::zeros(0, 0); n];
        let mut delta = grad_logits.to_vec();
        for l in (0..n).rev() {
            let below: Vec<f64> = if l == 0 {
                trace.input.clone()
            } else {
                trace.pre_activations[l - 1]
                    .iter()
                    .map(|&v| relu(v))
                    .collect()
            };
            weight_grads[l] = Matrix::outer(&delta, &below);
            let mut back = self.layers[l].matvec_t(&delta);
            if l > 0 {
                for (b, &z) in back.iter_mut().zip(&trace.pre_activations[l - 1]) {
                    if z <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
            delta = back;
        }
        Ok(GradBundle {
            weight_grads,
            input_grad: delta,
        })
    }

    /// Per-layer spectral and Frobenius norms and the products built from them.
    pub fn weight_norm_stats(&self) -> Result<WeightStats> {
        let spectral = self
            .layers
            .iter()
            .map(spectral_norm_default)
            .collect::<Result<Vec<_>>>()?;
        let frobenius: Vec<f64> = self.layers.iter().map(frobenius_norm).collect();
        let spec_product = spectral.iter().product();
        let fro_spec_ratio_sum = frobenius
            .iter()
            .zip(&spectral)
            .map(|(f, s)| (f / s).powi(2))
            .sum();
        let n = spectral.len() as f64;
        let beta = (spectral.iter().map(|s| s.ln()).sum::<f64>() / n).exp();
        Ok(WeightStats {
            spectral,
            frobenius,
            spec_product,
            fro_spec_ratio_sum,
            beta,
        })
    }

    /// Rescales every layer to spectral norm β (the geometric mean of the
    /// layer norms). By positive homogeneity of ReLU the function is unchanged.
    pub fn rebalance(&self) -> Result<Self> {
        let stats = self.weight_norm_stats()?;
        if let Some(l) = stats.spectral.iter().position(|&s| s <= 0.0) {
            return Err(Error::ZeroNormLayer(l));
        }
        let layers = self
            .layers
            .iter()
            .zip(&stats.spectral)
            .map(|(w, s)| w.scaled(stats.beta / s))
            .collect();
        Self::new(layers)
    }

    /// Adds i.i.d. `N(0, σ²)` noise to every weight. Returns the perturbed
    /// net and the spectral norm of each layer's noise matrix.
    pub fn perturb(&self, sigma: f64, seed: u64) -> Result<(Self, Vec<f64>)> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma must be >= 0, got {sigma}"
            )));
        }
        if sigma == 0.0 {
            return Ok((self.clone(), vec![0.0; self.layers.len()]));
        }
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        let mut rng = seeded(seed);
        let mut noise_norms = Vec::with_capacity(self.layers.len());
        let mut layers = Vec::with_capacity(self.layers.len());
        for w in &self.layers {
            let noise = Matrix::from_fn(w.rows(), w.cols(), |_, _| normal.sample(&mut rng));
            noise_norms.push(spectral_norm_default(&noise)?);
            let mut p = w.clone();
            p.add_scaled(&noise, 1.0);
            layers.push(p);
        }
        Ok((Self::new(layers)?, noise_norms))
    }

    /// Multiplies layer `l` by `c`.
    pub fn scale_layer(&mut self, l: usize, c: f64) {
        self.layers[l].scale_in_place(c);
    }

    /// Writes a checkpoint: one line of JSON header followed by every layer's
    /// entries as little-endian f64, layer by layer in row-major order.
    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut out, seed)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_checkpoint(&self, out: &mut impl Write, seed: u64) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            dims: self.dims(),
            n: self.depth(),
            h: self.width(),
            d_y: self.output_dim(),
            seed,
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for w in &self.layers {
            for x in w.as_slice() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`Self::save`]; returns the net and the seed.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        Self::read_checkpoint(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_checkpoint(input: &mut impl BufRead) -> Result<(Self, u64)> {
        let mut line = Vec::new();
        input.read_until(b'\n', &mut line)?;
        let header: CheckpointHeader = serde_json::from_slice(&line)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Malformed(format!(
                "unknown checkpoint format {}",
                header.format
            )));
        }
        if header.dims.len() < 2 || header.n != header.dims.len() - 1 {
            return Err(Error::Malformed("checkpoint dims disagree with n".into()));
        }
        let mut layers = Vec::with_capacity(header.n);
        for w in header.dims.windows(2) {
            let len = w[0] * w[1];
            let mut bytes = vec![0u8; len * 8];
            input.read_exact(&mut bytes).map_err(|_| Error::Truncated {
                what: "checkpoint layer",
                expected: len * 8,
                found: 0,
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            layers.push(Matrix::new(w[1], w[0], data)?);
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes in checkpoint",
                rest.len()
            )));
        }
        Ok((Self::new(layers)?, header.seed))
    }
}

const CHECKPOINT_FORMAT: &str = "fairspec-ffn-v1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    dims: Vec<usize>,
    n: usize,
    h: usize,
    d_y: usize,
    seed: u64,
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Index of the largest entry; the smallest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Strongest competitor of class `y`: argmax over `i ≠ y`, smallest index on ties.
pub fn runner_up(logits: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &x) in logits.iter().enumerate() {
        if i != y && (best == usize::MAX || x > logits[best]) {
            best = i;
        }
    }
    best
}

/// Margin `f[y] − max_{i≠y} f[i]`.
pub fn margin(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: logits.len(),
        });
    }
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(
            "margin needs at least two classes".into(),
        ));
    }
    Ok(logits[y] - logits[runner_up(logits, y)])
}

/// Cross-entropy `−log softmax(z)[y]` and its gradient `softmax(z) − e_y`.
pub fn softmax_cross_entropy(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[y];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[y] -= 1.0;
    (loss.max(0.0), grad)
}
