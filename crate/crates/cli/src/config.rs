//! Run configuration: a structured-text (JSON) config file with command-line
//! overrides. Precedence: flag wins over file wins over built-in default.

use noise2box::matching::CostWeights;
use noise2box::padding::{PadStrategy, PaddingConfig};
use noise2box::pipeline::{InferConfig, LossTarget, TrainConfig};
use serde::Deserialize;
use std::path::Path;

use crate::AppError;

/// Optional-field mirror of the run configuration as it appears on disk.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainSection,
    pub infer: InferSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub padding: PaddingSection,
    pub weights: WeightsSection,
    pub t_max: Option<usize>,
    pub b_scale: Option<f64>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub loss_target: Option<LossTarget>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaddingSection {
    pub strategy: Option<String>,
    pub n: Option<usize>,
    pub lambda_scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    pub lambda_l1: Option<f64>,
    pub lambda_giou: Option<f64>,
    pub lambda_conf_bce: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub steps: Option<usize>,
    pub lambda_conf: Option<f64>,
    pub n_proposals: Option<usize>,
    pub seed: Option<u64>,
    pub use_nms: Option<bool>,
    pub nms_iou: Option<f64>,
}

/// Flag-level overrides collected from the command line.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub strategy: Option<String>,
    pub n_targets: Option<usize>,
    pub lambda_scale: Option<f64>,
    pub loss_target: Option<LossTarget>,
    pub steps: Option<usize>,
    pub lambda_conf: Option<f64>,
    pub n_proposals: Option<usize>,
    pub no_nms: bool,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, AppError> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    AppError::Usage(format!("cannot read config file {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    AppError::Usage(format!("malformed config file {}: {e}", p.display()))
                })
            }
        }
    }
}

fn parse_strategy(name: &str) -> Result<PadStrategy, AppError> {
    PadStrategy::from_name(name).ok_or_else(|| {
        let valid: Vec<&str> = PadStrategy::ALL.iter().map(|s| s.name()).collect();
        AppError::Usage(format!(
            "unknown padding strategy {name:?}; valid strategies: {}",
            valid.join(", ")
        ))
    })
}

/// Resolve the effective train and infer configuration. Unless set
/// explicitly, the proposal count at inference follows `padding.n`.
pub fn resolve(file: &FileConfig, flags: &Overrides) -> Result<(TrainConfig, InferConfig), AppError> {
    let dt = TrainConfig::default();
    let strategy = match flags.strategy.as_deref().or(file.train.padding.strategy.as_deref()) {
        Some(name) => parse_strategy(name)?,
        None => dt.padding.strategy,
    };
    let padding = PaddingConfig {
        strategy,
        n: flags
            .n_targets
            .or(file.train.padding.n)
            .unwrap_or(dt.padding.n),
        lambda_scale: flags
            .lambda_scale
            .or(file.train.padding.lambda_scale)
            .unwrap_or(dt.padding.lambda_scale),
    };
    let dw = CostWeights::default();
    let weights = CostWeights {
        lambda_l1: file.train.weights.lambda_l1.unwrap_or(dw.lambda_l1),
        lambda_giou: file.train.weights.lambda_giou.unwrap_or(dw.lambda_giou),
        lambda_conf_bce: file
            .train
            .weights
            .lambda_conf_bce
            .unwrap_or(dw.lambda_conf_bce),
    };
    let train = TrainConfig {
        padding,
        weights,
        t_max: file.train.t_max.unwrap_or(dt.t_max),
        b_scale: file.train.b_scale.unwrap_or(dt.b_scale),
        iterations: flags.iterations.or(file.train.iterations).unwrap_or(dt.iterations),
        batch_size: flags.batch_size.or(file.train.batch_size).unwrap_or(dt.batch_size),
        seed: flags.seed.or(file.train.seed).unwrap_or(dt.seed),
        loss_target: flags
            .loss_target
            .or(file.train.loss_target)
            .unwrap_or(dt.loss_target),
    };

    let di = InferConfig::default();
    let infer = InferConfig {
        steps: flags.steps.or(file.infer.steps).unwrap_or(di.steps),
        lambda_conf: flags
            .lambda_conf
            .or(file.infer.lambda_conf)
            .unwrap_or(di.lambda_conf),
        n_proposals: flags
            .n_proposals
            .or(file.infer.n_proposals)
            .unwrap_or(train.padding.n),
        seed: flags.seed.or(file.infer.seed).unwrap_or(di.seed),
        use_nms: if flags.no_nms {
            false
        } else {
            file.infer.use_nms.unwrap_or(di.use_nms)
        },
        nms_iou: file.infer.nms_iou.unwrap_or(di.nms_iou),
    };

    train.validate().map_err(AppError::Usage)?;
    infer.validate().map_err(AppError::Usage)?;
    Ok((train, infer))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_file() {
        let (train, infer) = resolve(&FileConfig::default(), &Overrides::default()).unwrap();
        assert_eq!(train.padding.n, 300);
        assert_eq!(train.iterations, 120_000);
        assert_eq!(infer.n_proposals, 300);
        assert_eq!(infer.lambda_conf, 0.5);
    }

    #[test]
    fn proposals_follow_padding_n() {
        let file: FileConfig =
            serde_json::from_str(r#"{"train": {"padding": {"n": 64}}}"#).unwrap();
        let (train, infer) = resolve(&file, &Overrides::default()).unwrap();
        assert_eq!(train.padding.n, 64);
        assert_eq!(infer.n_proposals, 64);

        let file: FileConfig = serde_json::from_str(
            r#"{"train": {"padding": {"n": 64}}, "infer": {"n_proposals": 17}}"#,
        )
        .unwrap();
        let (_, infer) = resolve(&file, &Overrides::default()).unwrap();
        assert_eq!(infer.n_proposals, 17);
    }

    #[test]
    fn flags_beat_file() {
        let file: FileConfig = serde_json::from_str(
            r#"{"train": {"seed": 5, "iterations": 10, "padding": {"strategy": "uniform"}}}"#,
        )
        .unwrap();
        let flags = Overrides {
            seed: Some(9),
            strategy: Some("duplicate".into()),
            ..Overrides::default()
        };
        let (train, infer) = resolve(&file, &flags).unwrap();
        assert_eq!(train.seed, 9);
        assert_eq!(infer.seed, 9);
        assert_eq!(train.iterations, 10);
        assert_eq!(train.padding.strategy, PadStrategy::Duplicate);
    }

    #[test]
    fn bad_strategy_lists_valid_names() {
        let flags = Overrides {
            strategy: Some("bogus".into()),
            ..Overrides::default()
        };
        match resolve(&FileConfig::default(), &flags) {
            Err(AppError::Usage(msg)) => {
                assert!(msg.contains("center_aligned"));
                assert!(msg.contains("duplicate"));
            }
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let flags = Overrides {
            lambda_conf: Some(1.5),
            ..Overrides::default()
        };
        assert!(matches!(
            resolve(&FileConfig::default(), &flags),
            Err(AppError::Usage(_))
        ));
    }

    #[test]
    fn unknown_keys_rejected() {
        let parsed: Result<FileConfig, _> = serde_json::from_str(r#"{"trian": {}}"#);
        assert!(parsed.is_err());
    }
}
