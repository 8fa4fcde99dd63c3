//! Confusion-matrix spectral regularization.
//!
//! The confusion matrices here follow the error-matrix convention: entry
//! `(i, j)` is the fraction of class-`j` samples attributed to class `i ≠ j`,
//! and the diagonal is zero. Column `j` therefore sums to class `j`'s error
//! rate, and the ℓ₁ operator norm is the worst-class error.
//!
//! Training minimizes mean adversarial cross-entropy plus `α·Ψ`, where the
//! gradient of `Ψ` is
//!
//! ```text
//! Σ_{i≠j} (∂‖C‖₂/∂C_ij) · (+1) · ∂L_ij/∂w
//! ```
//!
//! with `C` the margin confusion matrix on adversarial data, `∂‖C‖₂/∂C = u₁v₁ᵀ`,
//! and `L` the surrogate matrix whose cells average a margin-shifted
//! cross-entropy over the samples counted in the matching cell of `C`.

use std::path::Path;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{adversarial_set, AttackConfig};
use crate::data::{BatchPlan, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::eval::{per_class_accuracy, ClassAccuracyVector};
use crate::network::{
    argmax, runner_up, softmax_cross_entropy, FeedForwardNet, ForwardTrace, GradBundle,
};
use crate::rng::derive_seed;
use crate::tensor::{l1_matrix_norm, spectral_grad, spectral_norm_default, Matrix};

/// Samples per parallel work unit when summing gradients; the partial sums
/// are added in chunk order so results do not depend on scheduling.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    m: Matrix,
}

impl ConfusionMatrix {
    /// Validates the error-matrix invariants: square, zero diagonal,
    /// entries in `[0, 1]`, column sums at most 1.
    pub fn new(m: Matrix) -> Result<Self> {
        let (r, c) = m.shape();
        if r != c {
            return Err(shape_err(
                "ConfusionMatrix::new",
                "square",
                format!("{r}x{c}"),
            ));
        }
        for i in 0..r {
            if m[(i, i)] != 0.0 {
                return Err(Error::InvalidArgument(format!("nonzero diagonal at {i}")));
            }
        }
        if m.as_slice().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::InvalidArgument(
                "confusion entry outside [0, 1]".into(),
            ));
        }
        if let Some(j) = m.column_sums().iter().position(|&s| s > 1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!("column {j} sums above 1")));
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    pub fn num_classes(&self) -> usize {
        self.m.rows()
    }

    pub fn worst_class_error(&self) -> f64 {
        worst_class_error(self)
    }

    pub fn spectral_norm(&self) -> Result<f64> {
        spectral_norm_default(&self.m)
    }

    /// `‖C‖₁ / ‖C‖₂`, or `None` for the zero matrix.
    pub fn nu(&self) -> Result<Option<f64>> {
        let s = self.spectral_norm()?;
        Ok((s > 0.0).then(|| l1_matrix_norm(&self.m) / s))
    }
}

/// Worst-class error: the largest column sum.
pub fn worst_class_error(c: &ConfusionMatrix) -> f64 {
    l1_matrix_norm(&c.m)
}

fn all_logits(net: &FeedForwardNet, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..ds.len())
        .into_par_iter()
        .map(|q| net.logits(ds.sample(q).0))
        .collect()
}

fn class_counts_of(labels: &[usize], d_y: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; d_y];
    for &y in labels {
        if y >= d_y {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: d_y,
            });
        }
        counts[y] += 1;
    }
    Ok(counts)
}

/// Which off-diagonal cell, if any, a sample is counted in.
fn hard_cell(z: &[f64], y: usize) -> Option<usize> {
    let p = argmax(z);
    (p != y).then_some(p)
}

fn margin_cell(z: &[f64], y: usize, gamma: f64) -> Option<usize> {
    let i = runner_up(z, y);
    (z[y] <= gamma + z[i]).then_some(i)
}

fn confusion_from_cells(
    logits: &[Vec<f64>],
    labels: &[usize],
    d_y: usize,
    allow_missing: bool,
    cell: impl Fn(&[f64], usize) -> Option<usize>,
) -> Result<ConfusionMatrix> {
    if logits.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: logits.len(),
            labels: labels.len(),
        });
    }
    let counts = class_counts_of(labels, d_y)?;
    if !allow_missing {
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingClass(j));
        }
    }
    let mut hits = vec![0usize; d_y * d_y];
    for (z, &y) in logits.iter().zip(labels) {
        if z.len() != d_y {
            return Err(shape_err("confusion", d_y, z.len()));
        }
        if let Some(i) = cell(z, y) {
            hits[i * d_y + y] += 1;
        }
    }
    let m = Matrix::from_fn(d_y, d_y, |i, j| {
        if counts[j] == 0 {
            0.0
        } else {
            hits[i * d_y + j] as f64 / counts[j] as f64
        }
    });
    ConfusionMatrix::new(m)
}

/// `ĉ_ij = #{q : argmax f(x_q) = i, y_q = j} / m_j` for `i ≠ j`.
pub fn confusion_hard_from_logits(
    logits: &[Vec<f64>],
    labels: &[usize],
    d_y: usize,
) -> Result<ConfusionMatrix> {
    confusion_from_cells(logits, labels, d_y, false, hard_cell)
}

/// Margin confusion: sample `q` of class `j` counts toward `(i, j)` when `i`
/// is its strongest competitor and `f[j] ≤ γ + f[i]`.
pub fn confusion_margin_from_logits(
    logits: &[Vec<f64>],
    labels: &[usize],
    d_y: usize,
    gamma: f64,
) -> Result<ConfusionMatrix> {
    check_gamma(gamma)?;
    confusion_from_cells(logits, labels, d_y, false, |z, y| margin_cell(z, y, gamma))
}

pub fn confusion_hard(net: &FeedForwardNet, ds: &Dataset) -> Result<ConfusionMatrix> {
    ds.require_all_classes()?;
    confusion_hard_from_logits(&all_logits(net, ds)?, ds.labels(), ds.num_classes())
}

pub fn confusion_margin(net: &FeedForwardNet, ds: &Dataset, gamma: f64) -> Result<ConfusionMatrix> {
    check_gamma(gamma)?;
    ds.require_all_classes()?;
    confusion_margin_from_logits(&all_logits(net, ds)?, ds.labels(), ds.num_classes(), gamma)
}

/// Margin confusion of a minibatch; classes absent from the batch get a
/// zero column instead of an error.
pub fn confusion_margin_partial(
    net: &FeedForwardNet,
    ds: &Dataset,
    gamma: f64,
) -> Result<ConfusionMatrix> {
    check_gamma(gamma)?;
    let logits = all_logits(net, ds)?;
    confusion_from_cells(&logits, ds.labels(), ds.num_classes(), true, |z, y| {
        margin_cell(z, y, gamma)
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) || gamma.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "gamma must be >= 0, got {gamma}"
        )));
    }
    Ok(())
}

/// Cross-entropy of the margin-shifted logits `z + γ(1 − e_y)` against
/// class `y`, with its gradient with respect to `z`.
pub fn margin_shifted_ce(z: &[f64], y: usize, gamma: f64) -> (f64, Vec<f64>) {
    let shifted: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(i, &v)| if i == y { v } else { v + gamma })
        .collect();
    softmax_cross_entropy(&shifted, y)
}

/// Differentiable stand-in for the margin confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateMatrix {
    pub values: Matrix,
    /// Sample indices per cell, row-major `(i, j) ↦ i·d_y + j`.
    membership: Vec<Vec<usize>>,
    d_y: usize,
}

impl SurrogateMatrix {
    /// Indices of the samples in cell `(i, j)`: class `j`, strongest
    /// competitor `i`, within margin γ.
    pub fn cell(&self, i: usize, j: usize) -> &[usize] {
        &self.membership[i * self.d_y + j]
    }

    pub fn num_members(&self) -> usize {
        self.membership.iter().map(Vec::len).sum()
    }

    /// `Σ_{i≠j} g_ij L_ij`
    pub fn weighted_sum(&self, g: &Matrix) -> f64 {
        crate::tensor::dot(self.values.as_slice(), g.as_slice())
    }
}

/// Per-sample data needed to build the surrogate and replay its gradient.
struct Member {
    cell: (usize, usize),
    ce: f64,
}

fn members(net: &FeedForwardNet, ds: &Dataset, gamma: f64) -> Result<Vec<Option<Member>>> {
    (0..ds.len())
        .into_par_iter()
        .map(|q| {
            let (x, y) = ds.sample(q);
            let z = net.logits(x)?;
            Ok(margin_cell(&z, y, gamma).map(|i| Member {
                cell: (i, y),
                ce: margin_shifted_ce(&z, y, gamma).0,
            }))
        })
        .collect()
}

/// Class normalizers `m_j` of a full dataset; every class must be present.
fn full_normalizers(ds: &Dataset) -> Result<Vec<f64>> {
    Ok(ds
        .require_all_classes()?
        .into_iter()
        .map(|c| c as f64)
        .collect())
}

/// `L_ij = (1/m_j) Σ_{q ∈ S'_ij} CE(z_q + γ(1 − e_{y_q}), y_q)`.
pub fn surrogate_matrix(
    net: &FeedForwardNet,
    adv: &Dataset,
    gamma: f64,
) -> Result<SurrogateMatrix> {
    let norms = full_normalizers(adv)?;
    surrogate_matrix_with(net, adv, gamma, &norms)
}

/// [`surrogate_matrix`] with explicit per-class normalizers (used for
/// minibatches, where the normalizer is the expected class count).
pub fn surrogate_matrix_with(
    net: &FeedForwardNet,
    adv: &Dataset,
    gamma: f64,
    normalizers: &[f64],
) -> Result<SurrogateMatrix> {
    check_gamma(gamma)?;
    let d_y = adv.num_classes();
    check_normalizers(normalizers, d_y)?;
    let mut sums = vec![0.0; d_y * d_y];
    let mut membership = vec![Vec::new(); d_y * d_y];
    for (q, m) in members(net, adv, gamma)?.into_iter().enumerate() {
        if let Some(Member { cell: (i, j), ce }) = m {
            sums[i * d_y + j] += ce;
            membership[i * d_y + j].push(q);
        }
    }
    let values = Matrix::from_fn(d_y, d_y, |i, j| sums[i * d_y + j] / normalizers[j]);
    Ok(SurrogateMatrix {
        values,
        membership,
        d_y,
    })
}

fn check_normalizers(normalizers: &[f64], d_y: usize) -> Result<()> {
    if normalizers.len() != d_y {
        return Err(shape_err("normalizers", d_y, normalizers.len()));
    }
    if normalizers.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::InvalidArgument(
            "class normalizers must be > 0".into(),
        ));
    }
    Ok(())
}

/// Sums `backward(trace_q, grad_q)` over the samples for which `f` yields
/// a gradient, in a fixed order.
fn summed_grads<F>(net: &FeedForwardNet, n: usize, f: F) -> Result<GradBundle>
where
    F: Fn(usize) -> Result<Option<(ForwardTrace, Vec<f64>)>> + Sync,
{
    let idx: Vec<usize> = (0..n).collect();
    let partials = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc = GradBundle::zeros_like(net);
            for &q in chunk {
                if let Some((trace, g)) = f(q)? {
                    acc.add_scaled(&net.backward(&trace, &g)?, 1.0);
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradBundle::zeros_like(net);
    for p in &partials {
        total.add_scaled(p, 1.0);
    }
    Ok(total)
}

/// Gradient of the regularizer: each sample in cell `(i, j)` contributes
/// `spec_grad_ij / m_j` times its margin-shifted CE gradient.
pub fn psi_grad(
    net: &FeedForwardNet,
    adv: &Dataset,
    gamma: f64,
    spec_grad: &Matrix,
) -> Result<GradBundle> {
    let norms = full_normalizers(adv)?;
    psi_grad_with(net, adv, gamma, spec_grad, &norms).map(|(g, _)| g)
}

/// [`psi_grad`] with explicit normalizers; also returns `Σ g_ij L_ij`.
pub fn psi_grad_with(
    net: &FeedForwardNet,
    adv: &Dataset,
    gamma: f64,
    spec_grad: &Matrix,
    normalizers: &[f64],
) -> Result<(GradBundle, f64)> {
    check_gamma(gamma)?;
    let d_y = adv.num_classes();
    check_normalizers(normalizers, d_y)?;
    if spec_grad.shape() != (d_y, d_y) {
        return Err(shape_err(
            "psi_grad",
            format!("{d_y}x{d_y}"),
            format!("{:?}", spec_grad.shape()),
        ));
    }
    let values: Vec<f64> = (0..adv.len())
        .into_par_iter()
        .map(|q| -> Result<f64> {
            let (x, y) = adv.sample(q);
            let z = net.logits(x)?;
            Ok(match margin_cell(&z, y, gamma) {
                Some(i) => spec_grad[(i, y)] * margin_shifted_ce(&z, y, gamma).0 / normalizers[y],
                None => 0.0,
            })
        })
        .collect::<Result<_>>()?;
    let reg_value = values.iter().sum();
    let grads = summed_grads(net, adv.len(), |q| {
        let (x, y) = adv.sample(q);
        let (z, trace) = net.forward(x)?;
        let Some(i) = margin_cell(&z, y, gamma) else {
            return Ok(None);
        };
        let weight = spec_grad[(i, y)] / normalizers[y];
        if weight == 0.0 {
            return Ok(None);
        }
        let (_, g) = margin_shifted_ce(&z, y, gamma);
        Ok(Some((trace, g.into_iter().map(|v| v * weight).collect())))
    })?;
    Ok((grads, reg_value))
}

/// Mean cross-entropy over `ds` and its weight gradient.
pub fn mean_ce_grad(net: &FeedForwardNet, ds: &Dataset) -> Result<(GradBundle, f64)> {
    let n = ds.len();
    if n == 0 {
        return Ok((GradBundle::zeros_like(net), 0.0));
    }
    let scale = 1.0 / n as f64;
    let losses: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|q| {
            let (x, y) = ds.sample(q);
            net.logits(x).map(|z| softmax_cross_entropy(&z, y).0)
        })
        .collect::<Result<_>>()?;
    let grads = summed_grads(net, n, |q| {
        let (x, y) = ds.sample(q);
        let (z, trace) = net.forward(x)?;
        let (_, g) = softmax_cross_entropy(&z, y);
        Ok(Some((trace, g.into_iter().map(|v| v * scale).collect())))
    })?;
    Ok((grads, losses.iter().sum::<f64>() * scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    /// Spectral factor from the full training set once per epoch; surrogate
    /// gradient per minibatch.
    Hybrid,
    /// Both factors per minibatch.
    Minibatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub mode: RegMode,
    /// Build the epoch-level confusion matrix from the adversarial examples
    /// generated during the previous epoch instead of a fresh attack.
    #[serde(default)]
    pub stale_adversarial: bool,
}

impl Default for RegConfig {
    /// α = 0.3, γ = 0, hybrid.
    fn default() -> Self {
        Self {
            alpha: 0.3,
            gamma: 0.0,
            mode: RegMode::Hybrid,
            stale_adversarial: false,
        }
    }
}

impl RegConfig {
    /// Regularizer off: plain adversarial training.
    pub fn disabled() -> Self {
        Self {
            alpha: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        check_gamma(self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// `(epoch, factor)`: from `epoch` on, the learning rate is multiplied by `factor`.
    #[serde(default)]
    pub lr_drops: Vec<(usize, f64)>,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    /// Fine-tuning defaults: 2 epochs at lr 0.01 without drops, SGD momentum
    /// 0.9, weight decay 5e-4, batch 128.
    pub fn finetune_defaults(seed: u64) -> Self {
        Self {
            epochs: 2,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drops: Vec::new(),
            seed,
        }
    }

    /// Checks everything except the epoch count.
    pub fn validate(&self) -> Result<()> {
        self.check(0)
    }

    fn check(&self, min_epochs: usize) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.epochs < min_epochs {
            return Err(Error::InvalidArgument(format!(
                "epochs must be >= {min_epochs}, got {}",
                self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(
                "momentum must be in [0, 1) and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_drops
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.lr, |lr, (_, f)| lr * f)
    }
}

/// Metrics recorded after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean adversarial cross-entropy over the epoch's minibatches.
    pub train_ce: f64,
    /// Mean over minibatches of `Σ g_ij L_ij` (0 when the regularizer is off).
    pub reg_value: f64,
    /// `train_ce + α·reg_value`
    pub objective: f64,
    /// `‖C_{S',γ}‖₂` on the full adversarial training set after the epoch.
    pub spec_norm_conf: f64,
    /// Worst-class error of the same matrix.
    pub worst_class_error_conf: f64,
    pub train_clean: Vec<f64>,
    pub train_robust: Vec<f64>,
    pub test_clean: Option<Vec<f64>>,
    pub test_robust: Option<Vec<f64>>,
    /// Spectral-factor refreshes skipped this epoch (degenerate σ₁).
    pub skipped_refreshes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// One row per epoch: scalar metrics, per-class clean/robust accuracy
    /// (train, then test when present) and worst-class columns.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_rows(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_rows(&mut w)?;
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Malformed(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Malformed(e.to_string()))
    }

    fn write_rows<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let Some(first) = self.records.first() else {
            return Ok(());
        };
        let d_y = first.train_clean.len();
        let has_test = first.test_clean.is_some();
        let mut header: Vec<String> = [
            "epoch",
            "lr",
            "train_ce",
            "reg_value",
            "objective",
            "spec_norm_conf",
            "worst_class_error_conf",
            "skipped_refreshes",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let mut sets = vec!["train"];
        if has_test {
            sets.push("test");
        }
        for set in &sets {
            for kind in ["clean", "robust"] {
                header.extend((0..d_y).map(|j| format!("{set}_{kind}_c{j}")));
            }
        }
        for set in &sets {
            for kind in ["clean", "robust"] {
                header.push(format!("{set}_worst_{kind}"));
            }
        }
        w.write_record(&header)?;
        let fmt = |v: f64| format!("{v:?}");
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                fmt(r.lr),
                fmt(r.train_ce),
                fmt(r.reg_value),
                fmt(r.objective),
                fmt(r.spec_norm_conf),
                fmt(r.worst_class_error_conf),
                r.skipped_refreshes.to_string(),
            ];
            let mut blocks: Vec<&Vec<f64>> = vec![&r.train_clean, &r.train_robust];
            if let (Some(c), Some(rb)) = (&r.test_clean, &r.test_robust) {
                blocks.push(c);
                blocks.push(rb);
            }
            for b in &blocks {
                row.extend(b.iter().map(|&v| fmt(v)));
            }
            for b in &blocks {
                row.push(fmt(b.iter().copied().fold(f64::INFINITY, f64::min)));
            }
            w.write_record(&row)?;
        }
        Ok(())
    }
}

/// Adversarial training with the confusion-matrix spectral regularizer.
pub fn train(
    net: &FeedForwardNet,
    ds: &Dataset,
    attack_cfg: &AttackConfig,
    reg_cfg: &RegConfig,
    train_cfg: &TrainConfig,
    test: Option<&Dataset>,
) -> Result<(FeedForwardNet, History)> {
    train_cfg.check(1)?;
    run(net, ds, attack_cfg, reg_cfg, train_cfg, test)
}

/// Same loop as [`train`] starting from a pretrained net; see
/// [`TrainConfig::finetune_defaults`]. Zero epochs return the net unchanged.
pub fn finetune(
    net: &FeedForwardNet,
    ds: &Dataset,
    attack_cfg: &AttackConfig,
    reg_cfg: &RegConfig,
    ft_cfg: &TrainConfig,
    test: Option<&Dataset>,
) -> Result<(FeedForwardNet, History)> {
    ft_cfg.check(0)?;
    run(net, ds, attack_cfg, reg_cfg, ft_cfg, test)
}

/// Seed streams used by the loop, all derived from the train seed.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_BATCH_ATTACK: u64 = 2;
const STREAM_FULL_ATTACK: u64 = 3;
const STREAM_TEST_ATTACK: u64 = 4;

fn attack_with_seed(cfg: &AttackConfig, seed: u64) -> AttackConfig {
    AttackConfig {
        seed: derive_seed(cfg.seed, seed),
        ..cfg.clone()
    }
}

fn stream(train_seed: u64, kind: u64, index: u64) -> u64 {
    derive_seed(derive_seed(train_seed, kind), index)
}

fn spectral_factor(c: &ConfusionMatrix, skipped: &mut usize) -> Option<Matrix> {
    match spectral_grad(c.matrix()) {
        Ok(g) => Some(g),
        Err(e) => {
            // The zero matrix (no margin violations) is the common benign case.
            if c.matrix().as_slice().iter().any(|&x| x != 0.0) {
                warn!("skipping regularizer refresh: {e}");
            } else {
                debug!("skipping regularizer refresh: confusion matrix is zero");
            }
            *skipped += 1;
            None
        }
    }
}

fn run(
    net: &FeedForwardNet,
    ds: &Dataset,
    attack_cfg: &AttackConfig,
    reg_cfg: &RegConfig,
    cfg: &TrainConfig,
    test: Option<&Dataset>,
) -> Result<(FeedForwardNet, History)> {
    attack_cfg.validate()?;
    reg_cfg.validate()?;
    let counts = ds.require_all_classes()?;
    if ds.dim() != net.input_dim() || ds.num_classes() != net.output_dim() {
        return Err(shape_err(
            "train",
            format!("{} -> {}", net.input_dim(), net.output_dim()),
            format!("{} -> {}", ds.dim(), ds.num_classes()),
        ));
    }
    if let Some(t) = test {
        t.require_all_classes()?;
    }
    let regularize = reg_cfg.alpha > 0.0;
    let m = ds.len() as f64;
    let mut net = net.clone();
    let mut velocity = GradBundle::zeros_like(&net);
    let mut history = History::default();
    let full_attack = |epoch: usize| {
        attack_with_seed(
            attack_cfg,
            stream(cfg.seed, STREAM_FULL_ATTACK, epoch as u64),
        )
    };

    // Adversarial training set at the current weights, if already computed.
    let mut current_adv: Option<Dataset> = None;
    // Adversarial rows produced by the previous epoch's minibatches.
    let mut previous_epoch_adv: Option<Dataset> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut skipped = 0;
        let cached = if regularize && reg_cfg.mode == RegMode::Hybrid {
            let source = match (&previous_epoch_adv, reg_cfg.stale_adversarial) {
                (Some(prev), true) => prev.clone(),
                _ => match current_adv.take() {
                    Some(adv) => adv,
                    None => adversarial_set(&net, ds, &full_attack(epoch))?,
                },
            };
            let c = confusion_margin(&net, &source, reg_cfg.gamma)?;
            spectral_factor(&c, &mut skipped)
        } else {
            None
        };

        let plan = BatchPlan::new(
            ds.len(),
            cfg.batch_size,
            stream(cfg.seed, STREAM_SHUFFLE, epoch as u64),
        )?;
        let mut epoch_adv_rows: Vec<Option<Vec<f64>>> = if reg_cfg.stale_adversarial {
            vec![None; ds.len()]
        } else {
            Vec::new()
        };
        let (mut ce_total, mut reg_total) = (0.0, 0.0);
        for (b, idx) in plan.batches().enumerate() {
            let batch = ds.subset(idx);
            let batch_seed = stream(
                cfg.seed,
                STREAM_BATCH_ATTACK,
                (epoch * plan.num_batches() + b) as u64,
            );
            let adv = adversarial_set(&net, &batch, &attack_with_seed(attack_cfg, batch_seed))?;
            let (mut grad, ce) = mean_ce_grad(&net, &adv)?;
            ce_total += ce;
            if regularize {
                let factor = match reg_cfg.mode {
                    RegMode::Hybrid => cached.clone(),
                    RegMode::Minibatch => {
                        let c = confusion_margin_partial(&net, &adv, reg_cfg.gamma)?;
                        spectral_factor(&c, &mut skipped)
                    }
                };
                if let Some(g) = factor {
                    let share = batch.len() as f64 / m;
                    let norms: Vec<f64> = counts.iter().map(|&c| c as f64 * share).collect();
                    let (psi, value) = psi_grad_with(&net, &adv, reg_cfg.gamma, &g, &norms)?;
                    grad.add_scaled(&psi, reg_cfg.alpha);
                    reg_total += value;
                }
            }
            if reg_cfg.stale_adversarial {
                for (k, &q) in idx.iter().enumerate() {
                    epoch_adv_rows[q] = Some(adv.sample(k).0.to_vec());
                }
            }
            sgd_step(
                &mut net,
                &mut velocity,
                &grad,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
        }
        if reg_cfg.stale_adversarial {
            let rows: Vec<f64> = epoch_adv_rows
                .into_iter()
                .flat_map(|r| r.expect("every sample visited"))
                .collect();
            previous_epoch_adv = Some(ds.with_features(Matrix::new(ds.len(), ds.dim(), rows)?)?);
        }

        let batches = plan.num_batches() as f64;
        let adv_full = adversarial_set(&net, ds, &full_attack(epoch + 1))?;
        let conf = confusion_margin(&net, &adv_full, reg_cfg.gamma)?;
        let spec = conf.spectral_norm()?;
        debug_assert!(
            conf.worst_class_error()
                <= (ds.num_classes() as f64).sqrt() * spec * (1.0 + 1e-9) + 1e-12
        );
        let train_clean = per_class_accuracy(&net, ds)?;
        let train_robust = per_class_accuracy(&net, &adv_full)?;
        let (test_clean, test_robust) = match test {
            Some(t) => {
                let tcfg = attack_with_seed(
                    attack_cfg,
                    stream(cfg.seed, STREAM_TEST_ATTACK, epoch as u64),
                );
                let clean = per_class_accuracy(&net, t)?;
                let robust = per_class_accuracy(&net, &adversarial_set(&net, t, &tcfg)?)?;
                (Some(clean.values), Some(robust.values))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_ce: ce_total / batches,
            reg_value: reg_total / batches,
            objective: ce_total / batches + reg_cfg.alpha * reg_total / batches,
            spec_norm_conf: spec,
            worst_class_error_conf: conf.worst_class_error(),
            train_clean: train_clean.values,
            train_robust: train_robust.values,
            test_clean,
            test_robust,
            skipped_refreshes: skipped,
        };
        info!(
            "epoch {epoch}: ce {:.4} reg {:.4} |C|_2 {:.4} worst robust (train) {:.3}",
            record.train_ce,
            record.reg_value,
            spec,
            ClassAccuracyVector {
                values: record.train_robust.clone()
            }
            .min()
        );
        history.records.push(record);
        current_adv = Some(adv_full);
    }
    Ok((net, history))
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μv + (g + λw)`, `w ← w − η v`.
fn sgd_step(
    net: &mut FeedForwardNet,
    velocity: &mut GradBundle,
    grad: &GradBundle,
    lr: f64,
    momentum: f64,
    decay: f64,
) {
    for ((w, v), g) in net
        .layers_mut()
        .iter_mut()
        .zip(velocity.weight_grads.iter_mut())
        .zip(&grad.weight_grads)
    {
        for ((wi, vi), gi) in w
            .as_mut_slice()
            .iter_mut()
            .zip(v.as_mut_slice())
            .zip(g.as_slice())
        {
            *vi = momentum * *vi + gi + decay * *wi;
            *wi -= lr * *vi;
        }
    }
}
