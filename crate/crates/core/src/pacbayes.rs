//! Computable forms of the worst-class PAC-Bayes bound and the numerical
//! studies around it.
//!
//! All formulas take `n` = depth and `h` = the largest layer dimension.

use std::path::Path;

use log::info;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::{Exp1, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{adversarial_set, AttackConfig};
use crate::data::{ClassStats, Dataset};
use crate::error::{Error, Result};
use crate::eval::predictions;
use crate::network::FeedForwardNet;
use crate::rng::{derive_seed, seeded};
use crate::tensor::{l1_matrix_norm, norm2, spectral_norm_default, Matrix};

/// `n²·h·ln(nh)·Π‖W_l‖₂²·Σ ‖W_l‖_F²/‖W_l‖₂²`, the part of Φ shared with Φ′.
fn capacity(net: &FeedForwardNet) -> Result<f64> {
    let stats = net.weight_norm_stats()?;
    if let Some(l) = stats.spectral.iter().position(|&s| s <= 0.0) {
        return Err(Error::ZeroNormLayer(l));
    }
    let n = net.depth() as f64;
    let h = net.width() as f64;
    let nh = n * h;
    if nh < 2.0 {
        return Err(Error::InvalidArgument(
            "need n·h >= 2 so that ln(nh) > 0".into(),
        ));
    }
    Ok(n * n * h * nh.ln() * stats.spec_product.powi(2) * stats.fro_spec_ratio_sum)
}

/// `Φ(f_w) = B²n²h ln(nh) Π‖W_l‖₂² Σ ‖W_l‖_F²/‖W_l‖₂²`
pub fn phi(net: &FeedForwardNet, b: f64) -> Result<f64> {
    phi_robust(net, b, 0.0)
}

/// `Φ′(f_w)`: [`phi`] with `B` replaced by `B + ε` (ε an ℓ₂ radius).
pub fn phi_robust(net: &FeedForwardNet, b: f64, epsilon: f64) -> Result<f64> {
    if !(b >= 0.0) || !(epsilon >= 0.0) || !b.is_finite() || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need B >= 0 and epsilon >= 0, got {b}, {epsilon}"
        )));
    }
    Ok((b + epsilon).powi(2) * capacity(net)?)
}

/// ℓ₂ radius of the ℓ∞ ball of radius `eps_inf` in `d` dimensions.
pub fn linf_to_l2(eps_inf: f64, d: usize) -> f64 {
    eps_inf * (d as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    /// `ν·‖C_{S',γ}‖₂`
    pub spectral_term: f64,
    pub phi_prime: f64,
    /// `√(ν²d_y / ((m_min − 8d_y)γ²) · (Φ′ + ln(n·m_min/δ)))` with the
    /// hidden constant set to 1.
    pub complexity_term: f64,
    pub total: f64,
    pub note: &'static str,
    pub conf_spec: f64,
    pub d_y: usize,
    pub m_min: usize,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub input_radius: f64,
    pub n: usize,
    pub h: usize,
    pub nu: f64,
}

/// Worst-class robust error bound: spectral term plus complexity term.
/// `nu` defaults to `√d_y`. The complexity term is a scale, not a
/// certificate: its constant is unknown and taken as 1.
pub fn bound_value(
    conf_spec: f64,
    net: &FeedForwardNet,
    stats: &ClassStats,
    gamma: f64,
    delta: f64,
    epsilon: f64,
    nu: Option<f64>,
) -> Result<BoundReport> {
    let d_y = stats.counts.len();
    if d_y != net.output_dim() {
        return Err(crate::error::shape_err(
            "bound_value",
            net.output_dim(),
            d_y,
        ));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gamma must be > 0, got {gamma}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    if !(conf_spec >= 0.0) || !conf_spec.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "confusion spectral norm must be >= 0, got {conf_spec}"
        )));
    }
    let limit = 8 * d_y;
    if stats.m_min <= limit {
        return Err(Error::BoundInfeasible {
            m_min: stats.m_min,
            limit,
        });
    }
    let root = (d_y as f64).sqrt();
    let nu = nu.unwrap_or(root);
    if !(1.0..=root + 1e-12).contains(&nu) {
        return Err(Error::InvalidArgument(format!(
            "nu must be in [1, sqrt(d_y)], got {nu}"
        )));
    }
    let b = stats.input_radius;
    let phi_prime = phi_robust(net, b, epsilon)?;
    let n = net.depth();
    let m_min = stats.m_min as f64;
    let ratio = nu * nu * d_y as f64 / ((m_min - limit as f64) * gamma * gamma);
    let complexity_term = (ratio * (phi_prime + (n as f64 * m_min / delta).ln())).sqrt();
    let spectral_term = nu * conf_spec;
    let report = BoundReport {
        spectral_term,
        phi_prime,
        complexity_term,
        total: spectral_term + complexity_term,
        note: "complexity term is a scale, not a certificate",
        conf_spec,
        d_y,
        m_min: stats.m_min,
        gamma,
        delta,
        epsilon,
        input_radius: b,
        n,
        h: net.width(),
        nu,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite("bound_value"));
    }
    Ok(report)
}

/// Largest prior standard deviation for which the perturbed margin stays
/// within γ/4:
/// `σ = γ / (114·n·B·√(h ln(4nh))·Π‖W_l‖₂^((n−1)/n))`.
pub fn sigma_star(net: &FeedForwardNet, gamma: f64, b: f64) -> Result<f64> {
    if !(gamma > 0.0) || !(b > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need gamma > 0 and B > 0, got {gamma}, {b}"
        )));
    }
    let stats = net.weight_norm_stats()?;
    if let Some(l) = stats.spectral.iter().position(|&s| s <= 0.0) {
        return Err(Error::ZeroNormLayer(l));
    }
    let n = net.depth() as f64;
    let h = net.width() as f64;
    let prod = stats.spec_product.powf((n - 1.0) / n);
    Ok(gamma / (114.0 * n * b * (h * (4.0 * n * h).ln()).sqrt() * prod))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub trials: usize,
    pub samples: usize,
    pub sigma: f64,
    /// Largest `‖f_{w+u}(x) − f_w(x)‖₂ / bound` over all trials and samples
    /// with a nonzero bound.
    pub max_ratio: f64,
    pub violations: usize,
    /// Trials in which at least one layer's noise had to be shrunk to
    /// `‖U_l‖₂ = ‖W_l‖₂/n`.
    pub rescaled_trials: usize,
}

/// Checks `‖f_{w+u}(x) − f_w(x)‖₂ ≤ e·‖x‖·Π‖W_l‖₂·Σ ‖U_l‖₂/‖W_l‖₂` for
/// Gaussian `u` with `‖U_l‖₂ ≤ ‖W_l‖₂/n` (noise is rescaled to meet this).
/// Each sample is its own radius `B = ‖x‖₂`.
pub fn check_perturbation_bound(
    net: &FeedForwardNet,
    xs: &Matrix,
    sigma: f64,
    seed: u64,
    trials: usize,
) -> Result<PerturbationReport> {
    if xs.cols() != net.input_dim() {
        return Err(crate::error::shape_err(
            "check_perturbation_bound",
            net.input_dim(),
            xs.cols(),
        ));
    }
    let stats = net.weight_norm_stats()?;
    if let Some(l) = stats.spectral.iter().position(|&s| s <= 0.0) {
        return Err(Error::ZeroNormLayer(l));
    }
    let n = net.depth() as f64;
    let clean: Vec<Vec<f64>> = (0..xs.rows())
        .map(|q| net.logits(xs.row(q)))
        .collect::<Result<_>>()?;
    let per_trial = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<(f64, usize, bool)> {
            let (noisy, noise_norms) = net.perturb(sigma, derive_seed(seed, t as u64))?;
            let mut layers = Vec::with_capacity(net.depth());
            let mut rel_sum = 0.0;
            let mut rescaled = false;
            for ((w, p), (&s, &u)) in net
                .layers()
                .iter()
                .zip(noisy.layers())
                .zip(stats.spectral.iter().zip(&noise_norms))
            {
                let cap = s / n;
                let mut noise = p.clone();
                noise.add_scaled(w, -1.0);
                let mut u_norm = u;
                if u > cap {
                    noise.scale_in_place(cap / u);
                    u_norm = cap;
                    rescaled = true;
                }
                rel_sum += u_norm / s;
                let mut q = w.clone();
                q.add_scaled(&noise, 1.0);
                layers.push(q);
            }
            let perturbed = FeedForwardNet::new(layers)?;
            let (mut worst, mut bad) = (0.0f64, 0);
            for (q, base) in clean.iter().enumerate() {
                let x = xs.row(q);
                let out = perturbed.logits(x)?;
                let diff: Vec<f64> = out.iter().zip(base).map(|(a, b)| a - b).collect();
                let change = norm2(&diff);
                let bound = std::f64::consts::E * norm2(x) * stats.spec_product * rel_sum;
                if change > bound + 1e-9 {
                    bad += 1;
                }
                if bound > 0.0 {
                    worst = worst.max(change / bound);
                }
            }
            Ok((worst, bad, rescaled))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationReport {
        trials,
        samples: xs.rows(),
        sigma,
        max_ratio: per_trial.iter().map(|t| t.0).fold(0.0, f64::max),
        violations: per_trial.iter().map(|t| t.1).sum(),
        rescaled_trials: per_trial.iter().filter(|t| t.2).count(),
    })
}

/// Which training accuracy the sharpness search holds fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccuracyFlavor {
    Clean,
    Robust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessConfig {
    /// Candidate variances, ascending.
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_threshold")]
    pub drop_threshold: f64,
    #[serde(default = "default_flavor")]
    pub flavor: AccuracyFlavor,
    #[serde(default)]
    pub seed: u64,
}

fn default_grid() -> Vec<f64> {
    (1..=100).map(|k| k as f64 / 100.0).collect()
}

fn default_samples() -> usize {
    50
}

fn default_threshold() -> f64 {
    0.05
}

fn default_flavor() -> AccuracyFlavor {
    AccuracyFlavor::Robust
}

impl Default for SharpnessConfig {
    /// σ² ∈ {0.01, …, 1.00}, 50 perturbations, 5% drop, robust accuracy.
    fn default() -> Self {
        Self {
            grid: default_grid(),
            n_samples: default_samples(),
            drop_threshold: default_threshold(),
            flavor: default_flavor(),
            seed: 0,
        }
    }
}

impl SharpnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("empty sharpness grid".into()));
        }
        if self.grid.iter().any(|&s| !(s > 0.0) || !s.is_finite())
            || self.grid.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidArgument(
                "sharpness grid must be positive and strictly ascending".into(),
            ));
        }
        if self.n_samples == 0 || !(self.drop_threshold >= 0.0) {
            return Err(Error::InvalidArgument(
                "need n_samples >= 1 and drop_threshold >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharpnessReport {
    pub sigma2_star: Option<f64>,
    pub grid: Vec<f64>,
    /// Largest drop seen at each grid point. The scan runs from the top of
    /// the grid down and stops at the first feasible value; a failing value
    /// records the first drop above the threshold, values below σ²* are `None`.
    pub worst_drop: Vec<Option<f64>>,
    pub n_samples: usize,
    pub drop_threshold: f64,
    pub flavor: AccuracyFlavor,
    pub base_accuracy: f64,
    pub seed: u64,
}

fn accuracy(
    net: &FeedForwardNet,
    ds: &Dataset,
    flavor: AccuracyFlavor,
    attack: &AttackConfig,
) -> Result<f64> {
    let evaluated;
    let target = match flavor {
        AccuracyFlavor::Clean => ds,
        AccuracyFlavor::Robust => {
            evaluated = adversarial_set(net, ds, attack)?;
            &evaluated
        }
    };
    let preds = predictions(net, target)?;
    let correct = preds
        .iter()
        .zip(ds.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Training-accuracy drop of perturbation `i` at variance `sigma2`. Sample
/// `i` always uses the same standard-normal draw, scaled by `√σ²`.
pub fn accuracy_drop(
    net: &FeedForwardNet,
    ds: &Dataset,
    cfg: &SharpnessConfig,
    attack: &AttackConfig,
    base_accuracy: f64,
    sigma2: f64,
    i: usize,
) -> Result<f64> {
    let (noisy, _) = net.perturb(sigma2.sqrt(), derive_seed(cfg.seed, i as u64))?;
    Ok(base_accuracy - accuracy(&noisy, ds, cfg.flavor, attack)?)
}

/// Largest σ² on the grid such that every one of the `n_samples` perturbed
/// nets loses at most `drop_threshold` training accuracy.
pub fn sharpness_variance(
    net: &FeedForwardNet,
    ds: &Dataset,
    cfg: &SharpnessConfig,
    attack: &AttackConfig,
) -> Result<SharpnessReport> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    info!(
        "sharpness: {} grid points up to {}, {} perturbations, threshold {}",
        cfg.grid.len(),
        cfg.grid[cfg.grid.len() - 1],
        cfg.n_samples,
        cfg.drop_threshold
    );
    let base = accuracy(net, ds, cfg.flavor, attack)?;
    let mut worst_drop = vec![None; cfg.grid.len()];
    let mut sigma2_star = None;
    for (k, &s2) in cfg.grid.iter().enumerate().rev() {
        let mut worst = f64::NEG_INFINITY;
        let mut feasible = true;
        for i in 0..cfg.n_samples {
            let d = accuracy_drop(net, ds, cfg, attack, base, s2, i)?;
            worst = worst.max(d);
            if d > cfg.drop_threshold {
                feasible = false;
                break;
            }
        }
        worst_drop[k] = Some(worst);
        if feasible {
            sigma2_star = Some(s2);
            break;
        }
    }
    Ok(SharpnessReport {
        sigma2_star,
        grid: cfg.grid.clone(),
        worst_drop,
        n_samples: cfg.n_samples,
        drop_threshold: cfg.drop_threshold,
        flavor: cfg.flavor,
        base_accuracy: base,
        seed: cfg.seed,
    })
}

/// Random zero-diagonal confusion matrices for the ν study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NuGenerator {
    /// Column `j` is a Dirichlet(1, …, 1) prediction distribution for class
    /// `j` with the diagonal (correct) entry zeroed.
    SimplexColumns,
    /// Off-diagonal entries i.i.d. U(0, 1), each column rescaled to sum to
    /// an independent U(0, 1) error rate.
    ScaledUniform,
}

impl NuGenerator {
    pub fn name(self) -> &'static str {
        match self {
            Self::SimplexColumns => "simplex-columns",
            Self::ScaledUniform => "scaled-uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "simplex-columns" => Ok(Self::SimplexColumns),
            "scaled-uniform" => Ok(Self::ScaledUniform),
            other => Err(Error::InvalidArgument(format!(
                "unknown generator {other:?} (expected simplex-columns or scaled-uniform)"
            ))),
        }
    }

    pub fn generate(self, d_y: usize, seed: u64) -> Matrix {
        let mut rng = seeded(seed);
        let mut m = Matrix::zeros(d_y, d_y);
        let unit = Uniform::new(0.0, 1.0).expect("valid range");
        for j in 0..d_y {
            let col: Vec<f64> = match self {
                Self::SimplexColumns => {
                    let e: Vec<f64> = (0..d_y).map(|_| Exp1.sample(&mut rng)).collect();
                    let total: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / total).collect()
                }
                Self::ScaledUniform => {
                    let raw: Vec<f64> = (0..d_y)
                        .map(|i| if i == j { 0.0 } else { unit.sample(&mut rng) })
                        .collect();
                    let rate: f64 = rng.random();
                    let total: f64 = raw.iter().sum();
                    raw.into_iter()
                        .map(|v| if total > 0.0 { v * rate / total } else { 0.0 })
                        .collect()
                }
            };
            for (i, v) in col.into_iter().enumerate() {
                if i != j {
                    m[(i, j)] = v;
                }
            }
        }
        m
    }
}

pub const NU_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuReport {
    pub trials: usize,
    pub d_y: usize,
    pub generator: &'static str,
    pub seed: u64,
    pub mean_nu: f64,
    pub max_nu: f64,
    pub min_nu: f64,
    /// All-zero matrices, for which ν is undefined.
    pub skipped: usize,
    /// Counts over `NU_BINS` equal bins on `[0, √d_y]`.
    pub histogram: Vec<usize>,
    pub bin_width: f64,
}

impl NuReport {
    /// `bin_lo,bin_hi,count` rows.
    pub fn write_histogram_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        for (k, c) in self.histogram.iter().enumerate() {
            w.write_record([
                format!("{:?}", k as f64 * self.bin_width),
                format!("{:?}", (k + 1) as f64 * self.bin_width),
                c.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `ν = ‖C‖₁/‖C‖₂` over `trials` random confusion matrices.
pub fn nu_study(d_y: usize, trials: usize, seed: u64, generator: NuGenerator) -> Result<NuReport> {
    if trials == 0 || d_y < 2 {
        return Err(Error::InvalidArgument(
            "need trials >= 1 and d_y >= 2".into(),
        ));
    }
    let root = (d_y as f64).sqrt();
    let nus: Vec<Option<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<Option<f64>> {
            let c = generator.generate(d_y, derive_seed(seed, t as u64));
            let s = spectral_norm_default(&c)?;
            if s == 0.0 {
                return Ok(None);
            }
            let nu = l1_matrix_norm(&c) / s;
            if !(1.0 / root - 1e-9..=root + 1e-9).contains(&nu) {
                return Err(Error::Malformed(format!(
                    "nu = {nu} outside [1/sqrt(d_y), sqrt(d_y)] in trial {t}"
                )));
            }
            Ok(Some(nu))
        })
        .collect::<Result<_>>()?;
    let bin_width = root / NU_BINS as f64;
    let mut histogram = vec![0usize; NU_BINS];
    let (mut sum, mut max, mut min, mut count) = (0.0, f64::NEG_INFINITY, f64::INFINITY, 0usize);
    for nu in nus.iter().flatten() {
        sum += nu;
        max = max.max(*nu);
        min = min.min(*nu);
        count += 1;
        histogram[((nu / bin_width) as usize).min(NU_BINS - 1)] += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "every generated matrix was zero".into(),
        ));
    }
    Ok(NuReport {
        trials,
        d_y,
        generator: generator.name(),
        seed,
        mean_nu: sum / count as f64,
        max_nu: max,
        min_nu: min,
        skipped: trials - count,
        histogram,
        bin_width,
    })
}
