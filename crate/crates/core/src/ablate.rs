//! Ablation matrix: named configuration deltas, a runner that trains each
//! arm across seeds, and a fixed-column CSV summary.

use std::path::Path;

use crate::config::{FeaturePerturb, LossMode, RunConfig};
use crate::error::{Error, Result};
use crate::perturb::CutMixMode;
use crate::scalar::Scalar;
use crate::trainer::run_training;

/// One named delta against a base configuration. Unset fields inherit.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub name: String,
    pub loss: Option<LossMode>,
    pub tvat: Option<FeaturePerturb>,
    pub auxiliary_teacher: Option<bool>,
    pub cutmix: Option<CutMixMode>,
    /// Consistency-weight ceiling; zero turns the unlabelled term off.
    pub beta_max: Option<f64>,
}

impl AblationArm {
    fn named(name: &str) -> Self {
        AblationArm {
            name: name.to_string(),
            loss: None,
            tvat: None,
            auxiliary_teacher: None,
            cutmix: None,
            beta_max: None,
        }
    }

    /// Base configuration with this arm's overrides applied.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        if let Some(loss) = self.loss {
            cfg.loss = loss;
        }
        if let Some(mode) = self.tvat {
            cfg.tvat.mode = mode;
        }
        if let Some(aux) = self.auxiliary_teacher {
            cfg.auxiliary_teacher = aux;
        }
        if let Some(mode) = self.cutmix {
            cfg.cutmix.mode = mode;
        }
        if let Some(bm) = self.beta_max {
            cfg.ramp.beta_max = bm;
        }
        cfg
    }
}

/// The component ablation: classic mean teacher with MSE, then the
/// confidence-weighted loss, then the adversarial feature perturbation, then
/// the second teacher.
pub fn builtin_ablation_arms() -> Vec<AblationArm> {
    vec![
        AblationArm {
            loss: Some(LossMode::Mse),
            tvat: Some(FeaturePerturb::Off),
            auxiliary_teacher: Some(false),
            ..AblationArm::named("mt_mse")
        },
        AblationArm {
            loss: Some(LossMode::ConfCe),
            tvat: Some(FeaturePerturb::Off),
            auxiliary_teacher: Some(false),
            ..AblationArm::named("mt_conf_ce")
        },
        AblationArm {
            loss: Some(LossMode::ConfCe),
            tvat: Some(FeaturePerturb::Tvat),
            auxiliary_teacher: Some(false),
            ..AblationArm::named("conf_ce_tvat")
        },
        AblationArm {
            loss: Some(LossMode::ConfCe),
            tvat: Some(FeaturePerturb::Tvat),
            auxiliary_teacher: Some(true),
            ..AblationArm::named("full")
        },
    ]
}

/// The feature-perturbation comparison: none, random direction, adversarial
/// against the student, adversarial against the teachers.
pub fn perturbation_arms() -> Vec<AblationArm> {
    vec![
        AblationArm {
            tvat: Some(FeaturePerturb::Off),
            ..AblationArm::named("original")
        },
        AblationArm {
            tvat: Some(FeaturePerturb::Uniform),
            ..AblationArm::named("uniform")
        },
        AblationArm {
            tvat: Some(FeaturePerturb::VatStudent),
            ..AblationArm::named("vat")
        },
        AblationArm {
            tvat: Some(FeaturePerturb::Tvat),
            ..AblationArm::named("tvat")
        },
    ]
}

/// Labelled-data-only reference: the unlabelled objective is switched off
/// entirely and the teachers just track the student.
pub fn supervised_arm() -> AblationArm {
    AblationArm {
        beta_max: Some(0.0),
        tvat: Some(FeaturePerturb::Off),
        auxiliary_teacher: Some(false),
        cutmix: Some(CutMixMode::Off),
        ..AblationArm::named("supervised")
    }
}

/// Look up any named arm usable from the command line.
pub fn builtin_arm(name: &str) -> Option<AblationArm> {
    builtin_ablation_arms()
        .into_iter()
        .chain(perturbation_arms())
        .chain(std::iter::once(supervised_arm()))
        .find(|a| a.name == name)
}

/// Outcome of one arm across seeds; a failed seed run aborts the arm but
/// not the matrix.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub mious: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub error: Option<String>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train every arm at every seed and score it on the validation set named in
/// the base configuration. Output rows keep the input arm order.
pub fn run_ablation<T: Scalar>(
    base: &RunConfig,
    arms: &[AblationArm],
    seeds: &[u64],
    out_root: &Path,
) -> Result<Vec<ArmResult>> {
    if base.data.val_root.is_none() {
        return Err(Error::Config(
            "the ablation needs data.val_root for its mIoU scores".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is needed".into()));
    }
    let mut results = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut mious = Vec::new();
        let mut error = None;
        for &seed in seeds {
            let mut cfg = arm.apply(base);
            cfg.seed = seed;
            cfg.io.out_dir = out_root.join(&arm.name).join(format!("seed_{seed}"));
            match run_training::<T>(&cfg, None) {
                Ok(out) => match out.final_eval {
                    Some(rep) => mious.push(rep.miou),
                    None => {
                        error = Some("run produced no validation score".to_string());
                        break;
                    }
                },
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        let (mean, std) = mean_std(&mious);
        results.push(ArmResult {
            name: arm.name.clone(),
            seeds: seeds.to_vec(),
            mious,
            mean,
            std,
            error,
        });
    }
    Ok(results)
}

/// Fixed-column CSV: one row per arm, in run order.
pub fn ablation_csv(results: &[ArmResult]) -> String {
    let mut out = String::from("arm,seeds,mean_miou,std_miou,per_seed_miou,error\n");
    for r in results {
        let seeds = r
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let per_seed = r
            .mious
            .iter()
            .map(|m| format!("{m:.6}"))
            .collect::<Vec<_>>()
            .join(";");
        let err = r.error.as_deref().unwrap_or("");
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{}\n",
            r.name,
            seeds,
            r.mean,
            r.std,
            per_seed,
            err.replace(',', ";")
        ));
    }
    out
}

pub fn write_ablation_csv(results: &[ArmResult], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, ablation_csv(results)).map_err(|e| Error::io(path, e))
}
