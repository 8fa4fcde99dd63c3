//! White-box first-order adversaries on the cross-entropy loss: FGSM and
//! PGD in ℓ∞ or ℓ₂ balls, with an optional box clamp.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{softmax_cross_entropy, FeedForwardNet};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{norm2, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub step_size: f64,
    pub iters: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
    /// Box the adversarial input is clamped to, e.g. `[0, 1]` for images.
    #[serde(default)]
    pub clamp: Option<(f64, f64)>,
}

impl AttackConfig {
    /// ℓ∞ PGD with ε = 8/255, 20 steps of 2/255, clamped to `[0, 1]`.
    pub fn standard_linf() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            iters: 20,
            random_start: true,
            seed: 0,
            clamp: Some((0.0, 1.0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.iters == 0 {
            return Err(Error::InvalidArgument("iters must be >= 1".into()));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "empty clamp box [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Cross-entropy at `x` and its gradient with respect to `x`.
pub fn loss_and_input_grad(net: &FeedForwardNet, x: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    let (logits, trace) = net.forward(x)?;
    check_label(y, logits.len())?;
    let (loss, g) = softmax_cross_entropy(&logits, y);
    Ok((loss, net.backward(&trace, &g)?.input_grad))
}

pub fn cross_entropy(net: &FeedForwardNet, x: &[f64], y: usize) -> Result<f64> {
    let logits = net.logits(x)?;
    check_label(y, logits.len())?;
    Ok(softmax_cross_entropy(&logits, y).0)
}

fn check_label(y: usize, classes: usize) -> Result<()> {
    if y >= classes {
        return Err(Error::LabelOutOfRange { label: y, classes });
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp_box(x: &mut [f64], clamp: Option<(f64, f64)>) {
    if let Some((lo, hi)) = clamp {
        x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
}

/// Ascent direction scaled to `step`: `step·sign(g)` for ℓ∞, `step·g/‖g‖₂`
/// for ℓ₂. `None` when the ℓ₂ gradient vanishes.
fn ascent_step(g: &[f64], norm: Norm, step: f64) -> Option<Vec<f64>> {
    match norm {
        Norm::Linf => Some(g.iter().map(|&v| step * sign(v)).collect()),
        Norm::L2 => {
            let n = norm2(g);
            (n > 0.0).then(|| g.iter().map(|&v| step * v / n).collect())
        }
    }
}

/// Projects a perturbation onto the ε-ball in place.
fn project(delta: &mut [f64], norm: Norm, epsilon: f64) {
    match norm {
        Norm::Linf => delta
            .iter_mut()
            .for_each(|d| *d = d.clamp(-epsilon, epsilon)),
        Norm::L2 => {
            let n = norm2(delta);
            if n > epsilon {
                let s = epsilon / n;
                delta.iter_mut().for_each(|d| *d *= s);
            }
        }
    }
}

/// `‖a − b‖_p`
pub fn perturbation_norm(a: &[f64], b: &[f64], norm: Norm) -> f64 {
    let diff = a.iter().zip(b).map(|(p, q)| p - q);
    match norm {
        Norm::Linf => diff.map(f64::abs).fold(0.0, f64::max),
        Norm::L2 => diff.map(|d| d * d).sum::<f64>().sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgsmOutcome {
    pub x_adv: Vec<f64>,
    /// Set when ℓ₂ mode met a zero gradient and returned `x` unchanged.
    pub zero_gradient: bool,
}

/// Single-step attack: `x + ε·sign(∇)` (ℓ∞) or `x + ε·∇/‖∇‖₂` (ℓ₂), then clamped.
pub fn fgsm(
    net: &FeedForwardNet,
    x: &[f64],
    y: usize,
    epsilon: f64,
    norm: Norm,
    clamp: Option<(f64, f64)>,
) -> Result<FgsmOutcome> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be >= 0, got {epsilon}"
        )));
    }
    let (_, g) = loss_and_input_grad(net, x, y)?;
    if epsilon == 0.0 {
        return Ok(FgsmOutcome {
            x_adv: x.to_vec(),
            zero_gradient: false,
        });
    }
    let Some(step) = ascent_step(&g, norm, epsilon) else {
        return Ok(FgsmOutcome {
            x_adv: x.to_vec(),
            zero_gradient: true,
        });
    };
    let mut x_adv: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + s).collect();
    clamp_box(&mut x_adv, clamp);
    Ok(FgsmOutcome {
        x_adv,
        zero_gradient: false,
    })
}

/// Random point of the ε-ball: uniform per coordinate for ℓ∞, uniform in
/// volume for ℓ₂.
fn random_start(d: usize, norm: Norm, epsilon: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
    match norm {
        Norm::Linf => (0..d)
            .map(|_| rng.random_range(-1.0..=1.0) * epsilon)
            .collect(),
        Norm::L2 => {
            let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let n = norm2(&g);
            if n == 0.0 {
                return vec![0.0; d];
            }
            let r = epsilon * rng.random::<f64>().powf(1.0 / d as f64);
            g.into_iter().map(|v| v * r / n).collect()
        }
    }
}

/// Projected gradient ascent on the cross-entropy within the ε-ball around
/// `x`. Returns the iterate with the largest loss among the start point and
/// every step; the clean input competes too, so the result never has lower
/// loss than `x`.
pub fn pgd(net: &FeedForwardNet, x: &[f64], y: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    pgd_seeded(net, x, y, cfg, cfg.seed)
}

/// [`pgd`] with an explicit random-start seed (used for per-sample streams).
pub fn pgd_seeded(
    net: &FeedForwardNet,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        // The ball is the single point x; only validate the inputs.
        cross_entropy(net, x, y)?;
        return Ok(x.to_vec());
    }
    let mut delta = if cfg.random_start {
        let mut d = random_start(x.len(), cfg.norm, cfg.epsilon, &mut seeded(seed));
        project(&mut d, cfg.norm, cfg.epsilon);
        d
    } else {
        vec![0.0; x.len()]
    };
    let mut current: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
    if cfg.random_start {
        clamp_box(&mut current, cfg.clamp);
        delta = current.iter().zip(x).map(|(c, a)| c - a).collect();
    }

    let mut best = x.to_vec();
    let mut best_loss = cross_entropy(net, x, y)?;
    for _ in 0..cfg.iters {
        let (loss, g) = loss_and_input_grad(net, &current, y)?;
        if loss > best_loss {
            best_loss = loss;
            best.clone_from(&current);
        }
        let Some(step) = ascent_step(&g, cfg.norm, cfg.step_size) else {
            break;
        };
        delta.iter_mut().zip(&step).for_each(|(d, s)| *d += s);
        project(&mut delta, cfg.norm, cfg.epsilon);
        current = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
        if cfg.clamp.is_some() {
            clamp_box(&mut current, cfg.clamp);
            delta = current.iter().zip(x).map(|(c, a)| c - a).collect();
        }
        debug_assert!(perturbation_norm(&current, x, cfg.norm) <= cfg.epsilon + 1e-12);
    }
    let final_loss = cross_entropy(net, &current, y)?;
    if final_loss > best_loss {
        best = current;
    }
    Ok(best)
}

/// Adversarial copy of `ds`: PGD on every sample with seed
/// `derive_seed(cfg.seed, q)` for sample `q`, labels preserved.
pub fn adversarial_set(net: &FeedForwardNet, ds: &Dataset, cfg: &AttackConfig) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(ds.clone());
    }
    let rows = (0..ds.len())
        .into_par_iter()
        .map(|q| {
            let (x, y) = ds.sample(q);
            pgd_seeded(net, x, y, cfg, derive_seed(cfg.seed, q as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let features = Matrix::new(ds.len(), ds.dim(), rows.concat())?;
    ds.with_features(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn linear_net(seed: u64, d_in: usize, d_out: usize) -> FeedForwardNet {
        let mut rng = seeded(seed);
        FeedForwardNet::new(vec![Matrix::from_fn(d_out, d_in, |_, _| {
            rng.random_range(-1.0..1.0)
        })])
        .unwrap()
    }

    fn cfg(norm: Norm, epsilon: f64, step: f64, iters: usize) -> AttackConfig {
        AttackConfig {
            norm,
            epsilon,
            step_size: step,
            iters,
            random_start: false,
            seed: 0,
            clamp: None,
        }
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let net = FeedForwardNet::he_init(&[4, 6, 3], 1).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4];
        for norm in [Norm::Linf, Norm::L2] {
            assert_eq!(fgsm(&net, &x, 1, 0.0, norm, None).unwrap().x_adv, x);
            let mut c = cfg(norm, 0.0, 0.1, 5);
            c.random_start = true;
            assert_eq!(pgd(&net, &x, 1, &c).unwrap(), x);
        }
    }

    #[test]
    fn fgsm_linf_follows_gradient_sign() {
        let net = FeedForwardNet::he_init(&[5, 8, 3], 2).unwrap();
        let x = [0.5, -0.1, 0.3, 0.9, -0.7];
        let (_, g) = loss_and_input_grad(&net, &x, 2).unwrap();
        let out = fgsm(&net, &x, 2, 0.1, Norm::Linf, None).unwrap();
        for ((a, b), gi) in out.x_adv.iter().zip(&x).zip(&g) {
            assert_eq!(sign(a - b), sign(*gi));
        }
        assert!(perturbation_norm(&out.x_adv, &x, Norm::Linf) <= 0.1 + 1e-12);
    }

    #[test]
    fn fgsm_l2_zero_gradient_is_flagged() {
        let net = FeedForwardNet::new(vec![Matrix::zeros(2, 3)]).unwrap();
        let out = fgsm(&net, &[1.0, 2.0, 3.0], 0, 0.5, Norm::L2, None).unwrap();
        assert!(out.zero_gradient);
        assert_eq!(out.x_adv, vec![1.0, 2.0, 3.0]);
    }

    /// Worst-case CE of a linear model `z = W x` over the ℓ∞ ball when the
    /// input gradient keeps its sign across the ball: every coordinate moves
    /// by ε in the sign of `Σ_k (p_k − e_y,k) W_k·`.
    #[test]
    fn fgsm_linear_matches_closed_form() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![-1.0, 1.0, 1.5]]).unwrap();
        let net = FeedForwardNet::new(vec![w.clone()]).unwrap();
        let x = [0.2, 0.1, -0.3];
        let y = 0;
        let eps = 0.05;
        // Two classes: CE = log(1 + exp(z₁ − z₀)), ∇ₓ ∝ (W₁ − W₀), so the
        // worst case moves x by ε·sign(W₁ − W₀) and raises z₁ − z₀ by ε‖W₁ − W₀‖₁.
        let diff: Vec<f64> = (0..3).map(|i| w[(1, i)] - w[(0, i)]).collect();
        let gap = crate::tensor::dot(&diff, &x) + eps * diff.iter().map(|v| v.abs()).sum::<f64>();
        let expected = (1.0 + gap.exp()).ln();
        let out = fgsm(&net, &x, y, eps, Norm::Linf, None).unwrap();
        let got = cross_entropy(&net, &out.x_adv, y).unwrap();
        assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
    }

    #[test]
    fn single_step_pgd_equals_fgsm() {
        let net = linear_net(4, 6, 4);
        let x = [0.3, -0.2, 0.8, 0.1, 0.0, -0.5];
        for step in [0.02, 0.5] {
            let c = cfg(Norm::Linf, 0.1, step, 1);
            let p = pgd(&net, &x, 3, &c).unwrap();
            let f = fgsm(&net, &x, 3, step.min(0.1), Norm::Linf, None)
                .unwrap()
                .x_adv;
            assert_eq!(p, f);
        }
    }

    #[test]
    fn pgd_equals_fgsm_on_two_class_linear_nets() {
        // With two classes the input gradient direction of a linear model is
        // constant, so iterating cannot beat the single ε step.
        for seed in 0..20 {
            let net = linear_net(seed, 5, 2);
            let mut rng = seeded(seed + 100);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = cfg(Norm::Linf, 0.2, 0.05, 10);
            let p = pgd(&net, &x, 1, &c).unwrap();
            let f = fgsm(&net, &x, 1, 0.2, Norm::Linf, None).unwrap().x_adv;
            let lp = cross_entropy(&net, &p, 1).unwrap();
            let lf = cross_entropy(&net, &f, 1).unwrap();
            assert!((lp - lf).abs() < 1e-8, "seed {seed}: {lp} vs {lf}");
        }
    }

    #[test]
    fn standard_linf_config_is_accepted() {
        let c = AttackConfig::standard_linf();
        c.validate().unwrap();
        assert_eq!(c.iters, 20);
        assert!((c.epsilon - 8.0 / 255.0).abs() < 1e-15);
        let net = FeedForwardNet::he_init(&[4, 5, 3], 0).unwrap();
        let x = [0.2, 0.4, 0.6, 0.8];
        let adv = pgd(&net, &x, 0, &c).unwrap();
        assert!(perturbation_norm(&adv, &x, Norm::Linf) <= c.epsilon + 1e-12);
        assert!(adv.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(Norm::L2, 0.1, 0.1, 1);
        c.iters = 0;
        assert!(c.validate().is_err());
        let c = cfg(Norm::L2, -0.1, 0.1, 1);
        assert!(c.validate().is_err());
        let c = cfg(Norm::L2, 0.1, 0.0, 1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn adversarial_set_contracts() {
        let ds = synth_blobs(4, 3, &[10, 10, 10], 2.0, 0.8, 5).unwrap();
        let net = FeedForwardNet::he_init(&[4, 16, 3], 6).unwrap();
        let zero = cfg(Norm::Linf, 0.0, 0.1, 3);
        assert_eq!(adversarial_set(&net, &ds, &zero).unwrap(), ds);

        let mut c = cfg(Norm::L2, 0.5, 0.2, 10);
        let adv = adversarial_set(&net, &ds, &c).unwrap();
        assert_eq!(adv.labels(), ds.labels());
        let mean = |d: &Dataset| {
            (0..d.len())
                .map(|q| cross_entropy(&net, d.sample(q).0, d.sample(q).1).unwrap())
                .sum::<f64>()
                / d.len() as f64
        };
        assert!(mean(&adv) >= mean(&ds));
        for q in 0..ds.len() {
            assert!(perturbation_norm(adv.sample(q).0, ds.sample(q).0, Norm::L2) <= 0.5 + 1e-12);
        }

        c.random_start = true;
        c.seed = 77;
        let a = adversarial_set(&net, &ds, &c).unwrap();
        let b = adversarial_set(&net, &ds, &c).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn ball_constraint_holds(seed in any::<u64>(), eps in 0.0f64..1.0, l2 in any::<bool>(), rs in any::<bool>()) {
            let net = FeedForwardNet::he_init(&[3, 6, 3], seed).unwrap();
            let x = [0.4, 0.5, 0.6];
            let norm = if l2 { Norm::L2 } else { Norm::Linf };
            let mut c = cfg(norm, eps, 0.3, 5);
            c.random_start = rs;
            c.seed = seed;
            c.clamp = Some((0.0, 1.0));
            let adv = pgd(&net, &x, 1, &c).unwrap();
            prop_assert!(perturbation_norm(&adv, &x, norm) <= eps + 1e-12);
            prop_assert!(adv.iter().all(|v| (0.0..=1.0).contains(v)));
            if !rs {
                prop_assert!(cross_entropy(&net, &adv, 1).unwrap() >= cross_entropy(&net, &x, 1).unwrap());
            }
        }

        #[test]
        fn loss_monotone_in_radius_on_linear_nets(seed in any::<u64>(), e1 in 0.0f64..0.5, e2 in 0.0f64..0.5) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let net = linear_net(seed, 4, 2);
            let x = [0.1, -0.2, 0.3, 0.05];
            let l = |e: f64| {
                let adv = pgd(&net, &x, 0, &cfg(Norm::Linf, e, 0.6, 3)).unwrap();
                cross_entropy(&net, &adv, 0).unwrap()
            };
            prop_assert!(l(lo) <= l(hi) + 1e-9);
        }
    }
}
