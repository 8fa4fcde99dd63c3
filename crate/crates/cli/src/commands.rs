//! Subcommand implementations.

use std::path::Path;

use fairspec::attack::{adversarial_set, AttackConfig, Norm};
use fairspec::data::{class_stats, load_mnist_idx, synth_blobs_split, Dataset};
use fairspec::eval::{per_class_accuracy, EvalReport};
use fairspec::fairness::{confusion_margin, finetune, train, History, RegConfig, TrainConfig};
use fairspec::pacbayes::{bound_value, linf_to_l2, nu_study, sharpness_variance, BoundReport};
use fairspec::rng::derive_seed;
use fairspec::FeedForwardNet;
use log::info;
use serde::Serialize;

use crate::config::{streams, BoundConfig, DataConfig, ExperimentConfig};
use crate::{CliError, Command};

pub const CHECKPOINT: &str = "model.ckpt";
pub const HISTORY: &str = "history.csv";

pub fn dispatch(cmd: Command, cfg: &ExperimentConfig) -> Result<(), CliError> {
    write_json(&cfg.out_dir.join("config.json"), cfg)?;
    match cmd {
        Command::Synth => cmd_synth(cfg),
        Command::Train => cmd_train(cfg, false),
        Command::Finetune => cmd_train(cfg, true),
        Command::Eval => cmd_eval(cfg),
        Command::Bound => cmd_bound(cfg),
        Command::Sharpness => cmd_sharpness(cfg),
        Command::NuStudy => cmd_nu_study(cfg),
    }
}

/// A report together with the resolved config that produced it.
#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    config: &'a ExperimentConfig,
    report: T,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(fairspec::Error::from)?;
    text.push('\n');
    std::fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn write_artifact<T: Serialize>(
    cfg: &ExperimentConfig,
    name: &str,
    report: T,
) -> Result<(), CliError> {
    write_json(
        &cfg.out_dir.join(name),
        &Artifact {
            config: cfg,
            report,
        },
    )
}

/// Training set and optional test set.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>), CliError> {
    let data = cfg.require(&cfg.data, "data")?;
    Ok(match data {
        DataConfig::Blobs {
            d,
            train_counts,
            test_counts,
            centers_scale,
            noise_std,
        } => {
            let (tr, te) = synth_blobs_split(
                *d,
                train_counts.len(),
                train_counts,
                test_counts,
                *centers_scale,
                *noise_std,
                derive_seed(cfg.seed, streams::DATA),
            )?;
            (tr, (!te.is_empty()).then_some(te))
        }
        DataConfig::Csv { train, test } => {
            let tr = Dataset::read_csv(train)?.0;
            let te = test
                .as_ref()
                .map(|p| Dataset::read_csv(p).map(|r| r.0))
                .transpose()?;
            (tr, te)
        }
        DataConfig::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit,
        } => {
            let cap = |ds: Dataset| match limit {
                Some(n) if *n < ds.len() => ds.subset(&(0..*n).collect::<Vec<_>>()),
                _ => ds,
            };
            let tr = cap(load_mnist_idx(train_images, train_labels)?);
            let te = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(cap(load_mnist_idx(i, l)?)),
                (None, None) => None,
                _ => {
                    return Err(CliError::Config(
                        "data: test_images and test_labels must be given together".into(),
                    ))
                }
            };
            (tr, te)
        }
    })
}

fn cmd_synth(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if !matches!(cfg.data, Some(DataConfig::Blobs { .. })) {
        return Err(CliError::Config(
            "synth needs `data` with source \"blobs\"".into(),
        ));
    }
    let (tr, te) = load_data(cfg)?;
    let seed = derive_seed(cfg.seed, streams::DATA);
    tr.write_csv(cfg.out_dir.join("train.csv"), seed)?;
    if let Some(te) = te {
        te.write_csv(cfg.out_dir.join("test.csv"), seed)?;
    }
    Ok(())
}

fn load_or_init(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    need_checkpoint: bool,
) -> Result<FeedForwardNet, CliError> {
    let model = cfg.require(&cfg.model, "model")?;
    match &model.checkpoint {
        Some(path) => Ok(FeedForwardNet::load(path)?.0),
        None if need_checkpoint => Err(CliError::Config(
            "missing key `model.checkpoint` required by this command".into(),
        )),
        None => {
            let mut dims = vec![ds.dim()];
            dims.extend(&model.hidden);
            dims.push(ds.num_classes());
            Ok(FeedForwardNet::he_init(
                &dims,
                derive_seed(cfg.seed, streams::INIT),
            )?)
        }
    }
}

fn eval_attack(cfg: &ExperimentConfig) -> Result<&AttackConfig, CliError> {
    cfg.require(&cfg.eval_attack, "attack")
}

fn evaluate(
    net: &FeedForwardNet,
    train_ds: &Dataset,
    test: Option<&Dataset>,
    atk: &AttackConfig,
) -> Result<EvalReport, CliError> {
    let target = test.unwrap_or(train_ds);
    let clean = per_class_accuracy(net, target)?;
    let robust = per_class_accuracy(net, &adversarial_set(net, target, atk)?)?;
    let train_robust = match test {
        Some(_) => Some(per_class_accuracy(
            net,
            &adversarial_set(net, train_ds, atk)?,
        )?),
        None => None,
    };
    Ok(EvalReport::new(&clean, &robust, train_robust.as_ref()))
}

fn write_eval(cfg: &ExperimentConfig, report: &EvalReport) -> Result<(), CliError> {
    report.write_csvs(
        cfg.out_dir.join("eval_per_class.csv"),
        cfg.out_dir.join("eval_summary.csv"),
    )?;
    write_artifact(cfg, "eval.json", report)
}

#[derive(Serialize)]
struct BoundArtifact {
    epsilon_linf: Option<f64>,
    bound: Option<BoundReport>,
    /// Set when the bound is undefined for this data (e.g. too few samples).
    infeasible: Option<String>,
}

fn bound_defaults() -> BoundConfig {
    BoundConfig {
        gamma: 0.1,
        delta: 0.05,
        nu: None,
        epsilon_l2: None,
    }
}

fn compute_bound(
    cfg: &ExperimentConfig,
    net: &FeedForwardNet,
    ds: &Dataset,
) -> Result<BoundArtifact, CliError> {
    let b = cfg.bound.clone().unwrap_or_else(bound_defaults);
    let atk = eval_attack(cfg)?;
    let (epsilon, epsilon_linf) = match (b.epsilon_l2, atk.norm) {
        (Some(e), _) => (e, None),
        (None, Norm::L2) => (atk.epsilon, None),
        (None, Norm::Linf) => (linf_to_l2(atk.epsilon, ds.dim()), Some(atk.epsilon)),
    };
    let adv = adversarial_set(net, ds, atk)?;
    let conf = confusion_margin(net, &adv, b.gamma)?;
    let stats = class_stats(ds)?;
    match bound_value(
        conf.spectral_norm()?,
        net,
        &stats,
        b.gamma,
        b.delta,
        epsilon,
        b.nu,
    ) {
        Ok(r) => Ok(BoundArtifact {
            epsilon_linf,
            bound: Some(r),
            infeasible: None,
        }),
        Err(e @ fairspec::Error::BoundInfeasible { .. }) => Ok(BoundArtifact {
            epsilon_linf,
            bound: None,
            infeasible: Some(e.to_string()),
        }),
        Err(e) => Err(e.into()),
    }
}

fn cmd_train(cfg: &ExperimentConfig, fine: bool) -> Result<(), CliError> {
    let (ds, test) = load_data(cfg)?;
    let net = load_or_init(cfg, &ds, fine)?;
    let atk = cfg.require(&cfg.attack, "attack")?;
    let reg = cfg.reg.clone().unwrap_or_else(RegConfig::default);
    let (out, history): (FeedForwardNet, History) = if fine {
        let ft = match &cfg.train {
            Some(t) => t.clone(),
            None => TrainConfig::finetune_defaults(derive_seed(cfg.seed, streams::TRAIN)),
        };
        finetune(&net, &ds, atk, &reg, &ft, test.as_ref())?
    } else {
        let t = cfg.require(&cfg.train, "train")?;
        if t.epochs == 0 {
            return Err(CliError::Config("train.epochs must be >= 1".into()));
        }
        train(&net, &ds, atk, &reg, t, test.as_ref())?
    };
    out.save(cfg.out_dir.join(CHECKPOINT), cfg.seed)?;
    history.write_csv(cfg.out_dir.join(HISTORY))?;
    write_eval(cfg, &evaluate(&out, &ds, test.as_ref(), eval_attack(cfg)?)?)?;
    write_artifact(cfg, "bound.json", compute_bound(cfg, &out, &ds)?)
}

fn cmd_eval(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (ds, test) = load_data(cfg)?;
    let net = load_or_init(cfg, &ds, true)?;
    write_eval(cfg, &evaluate(&net, &ds, test.as_ref(), eval_attack(cfg)?)?)
}

fn cmd_bound(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (ds, _) = load_data(cfg)?;
    let net = load_or_init(cfg, &ds, true)?;
    write_artifact(cfg, "bound.json", compute_bound(cfg, &net, &ds)?)
}

fn cmd_sharpness(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (ds, _) = load_data(cfg)?;
    let net = load_or_init(cfg, &ds, true)?;
    let sh = cfg.require(&cfg.sharpness, "sharpness")?;
    let report = sharpness_variance(&net, &ds, sh, eval_attack(cfg)?)?;
    write_artifact(cfg, "sharpness.json", report)
}

fn cmd_nu_study(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let nu = cfg.require(&cfg.nu_study, "nu_study")?;
    let report = nu_study(
        nu.d_y,
        nu.trials,
        derive_seed(cfg.seed, streams::NU),
        nu.generator,
    )?;
    report.write_histogram_csv(cfg.out_dir.join("nu_histogram.csv"))?;
    info!(
        "nu: mean {:.4}, max {:.4} over {} trials",
        report.mean_nu, report.max_nu, report.trials
    );
    write_artifact(cfg, "nu.json", report)
}
