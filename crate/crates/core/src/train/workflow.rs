use log::info;
use serde::{Deserialize, Serialize};

use crate::bound::PathwiseBlock;
use crate::collapse::{collapse_named, without_batchnorm, CollapseConfig, CollapseReport};
use crate::error::{Error, Result};
use crate::nn::{init_model, ArchSpec, Layer, LayerSpec, ModelGraph, PRelu};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::data::{gen_regression_1d, Dataset, Shape1d, Split, Targets};
use super::trainer::{evaluate_split, train_layers, TrainConfig, TrainLog};

/// One fine-tune-then-collapse step of [`sequential_collapse`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: usize,
    pub block: String,
    pub epochs: usize,
    pub collapse: CollapseReport,
    pub params_after: u64,
    /// Validation metric after fine-tuning, before the collapse attempt.
    pub metric_before: Option<f64>,
    pub metric_after: Option<f64>,
    /// Largest absolute model-output change caused by the collapse, on
    /// validation inputs.
    pub max_output_diff: f64,
    /// Whether every validation input satisfied the per-sample
    /// operator-norm bound for this block (BatchNorm folded in first).
    pub pathwise_bound_holds: bool,
}

#[derive(Clone, Debug)]
pub struct SequentialOutcome<T> {
    pub model: ModelGraph<T>,
    pub stages: Vec<StageReport>,
    pub log: TrainLog,
}

fn eval_inputs(data: &Dataset) -> Dataset {
    let val = data.split(Split::Val);
    if val.is_empty() {
        data.clone()
    } else {
        val
    }
}

fn pathwise_holds<T: Scalar>(pre: &ModelGraph<T>, index: usize, xs: &Tensor<T>) -> Result<bool> {
    let Layer::Block(block) = &pre.layers()[index].layer else {
        return Err(Error::Contract("pathwise check needs a block".into()));
    };
    let pw = PathwiseBlock::new(&without_batchnorm(block)?)?;
    let inputs = pre.infer_range(0..index, xs)?;
    for i in 0..inputs.rows() {
        let x: Vec<f64> = inputs.row(i).iter().map(|v| v.as_f64()).collect();
        let p = pw.at(&x)?;
        if p.error_sq > p.operator * (1.0 + 1e-9) + 1e-12 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// From the last block to the first: fine-tune with only that block's
/// slope regularized (unless it already passes the `tau` test), then try
/// to collapse it once. Blocks that fail the test stay in place.
///
/// Each stage gets at most `max_epochs_per_layer` epochs, and all stages
/// together at most `total_epoch_cap`.
pub fn sequential_collapse<T: Scalar>(
    m: &ModelGraph<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<&ModelGraph<T>>,
) -> Result<SequentialOutcome<T>> {
    cfg.validate()?;
    let collapse_cfg = CollapseConfig::new(cfg.tau)?;
    let eval_set = eval_inputs(data);
    let xs = eval_set.inputs_as::<T>();
    let mut model = m.clone();
    let mut stages = Vec::new();
    let mut log = TrainLog::default();
    let mut used = 0;
    for (stage, name) in m.block_names().into_iter().rev().enumerate() {
        let alpha = model.block(&name).expect("listed block").alpha().as_f64();
        let mut epochs = 0;
        if !collapse_cfg.accepts(alpha) {
            epochs = cfg.max_epochs_per_layer.min(cfg.total_epoch_cap.saturating_sub(used));
            if epochs > 0 {
                let stage_cfg = TrainConfig {
                    seed: cfg.seed.wrapping_add(stage as u64),
                    ..cfg.clone()
                };
                log.extend(train_layers(
                    &mut model,
                    data,
                    &stage_cfg,
                    teacher,
                    std::slice::from_ref(&name),
                    epochs,
                )?);
                used += epochs;
            }
        }
        let metric_before = evaluate_split(&model, data, Split::Val)?.map(|e| e.metric);
        let pre = model.clone();
        let index = model.position(&name).expect("listed block");
        let collapse = collapse_named(&mut model, &name, &collapse_cfg)?;
        let metric_after = evaluate_split(&model, data, Split::Val)?.map(|e| e.metric);
        let max_output_diff = pre.infer(&xs)?.max_abs_diff(&model.infer(&xs)?)?.as_f64();
        let pathwise_bound_holds = pathwise_holds(&pre, index, &xs)?;
        info!(
            "stage {stage}: {name} alpha {:.4} collapsed {} after {epochs} epochs, val metric {metric_before:?} -> {metric_after:?}",
            collapse.alpha_at_collapse, collapse.collapsed
        );
        stages.push(StageReport {
            stage,
            block: name,
            epochs,
            params_after: model.param_count(),
            collapse,
            metric_before,
            metric_after,
            max_output_diff,
            pathwise_bound_holds,
        });
    }
    Ok(SequentialOutcome { model, stages, log })
}

/// One point of the cumulative collapse curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub layers_collapsed: usize,
    /// Block handled at this stage; empty for the baseline row.
    pub block: String,
    pub alpha: Option<f64>,
    pub metric: Option<f64>,
    pub params: u64,
}

/// Baseline row followed by one row per [`sequential_collapse`] stage.
/// With `max_epochs_per_layer = 0` this is a plain collapse-and-evaluate
/// sweep.
pub fn sensitivity_sweep<T: Scalar>(
    m: &ModelGraph<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<&ModelGraph<T>>,
) -> Result<Vec<SweepRow>> {
    let baseline = SweepRow {
        layers_collapsed: 0,
        block: String::new(),
        alpha: None,
        metric: evaluate_split(m, data, Split::Val)?.map(|e| e.metric),
        params: m.param_count(),
    };
    let outcome = sequential_collapse(m, data, cfg, teacher)?;
    let mut collapsed = 0;
    let mut rows = vec![baseline];
    for s in outcome.stages {
        collapsed += usize::from(s.collapse.collapsed);
        rows.push(SweepRow {
            layers_collapsed: collapsed,
            block: s.block,
            alpha: Some(s.collapse.alpha_at_collapse),
            metric: s.metric_after,
            params: s.params_after,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig1Config {
    pub seed: u64,
    pub samples: usize,
    pub noise_std: f64,
    pub shape: Shape1d,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Regularizer strength for the learned-slope run.
    pub lc: f64,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Fig1Config {
            seed: 0,
            samples: 60,
            noise_std: 0.3,
            shape: Shape1d::Sine,
            hidden: 64,
            epochs: 300,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            lc: 1.0,
        }
    }
}

/// Fixed slopes of the demo, followed by one learned-slope run.
pub const FIG1_FIXED_ALPHAS: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig1Setting {
    pub label: String,
    pub alpha: f64,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig1Point {
    pub x: f64,
    pub y_data: f64,
    /// One fit per setting, in [`Fig1Output::settings`] order.
    pub fits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fig1Output {
    pub settings: Vec<Fig1Setting>,
    /// Training points sorted by `x`.
    pub points: Vec<Fig1Point>,
    pub models: Vec<ModelGraph<f64>>,
}

/// Fits a `1 -> hidden -> 1` block on noisy 1-D data with the slope held
/// at 0, 0.5 and 1, then once more with a learned, regularized slope.
pub fn demo_fig1(cfg: &Fig1Config) -> Result<Fig1Output> {
    let data = gen_regression_1d(cfg.seed, cfg.samples, cfg.noise_std, cfg.shape)?;
    let spec = ArchSpec {
        input: vec![1],
        layers: vec![LayerSpec::Block {
            hidden: cfg.hidden,
            out: 1,
            batch_norm: false,
            dropout: 0.0,
        }],
    };
    let mut settings = Vec::new();
    let mut models = Vec::new();
    let runs = FIG1_FIXED_ALPHAS.iter().map(|&a| Some(a)).chain(std::iter::once(None));
    for fixed in runs {
        let mut m: ModelGraph<f64> = init_model(&spec, cfg.seed, false)?;
        if let (Some(a), Some(Layer::Block(b))) = (fixed, m.layer_mut("block0")) {
            b.act = PRelu::frozen(a);
        }
        let train_cfg = TrainConfig {
            seed: cfg.seed,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            momentum: cfg.momentum,
            reg: crate::loss::RegConfig::new(if fixed.is_some() { 0.0 } else { cfg.lc }, 1.0)?,
            ..TrainConfig::default()
        };
        let layers = if fixed.is_some() {
            vec![]
        } else {
            vec!["block0".to_string()]
        };
        train_layers(&mut m, &data, &train_cfg, None, &layers, cfg.epochs)?;
        let train_mse = evaluate_split(&m, &data, Split::Train)?.map_or(f64::NAN, |e| e.metric);
        let val_mse = evaluate_split(&m, &data, Split::Val)?.map_or(f64::NAN, |e| e.metric);
        let alpha = m.block("block0").expect("demo block").alpha();
        settings.push(Fig1Setting {
            label: fixed.map_or("learned".to_string(), |a| format!("alpha={a}")),
            alpha,
            train_mse,
            val_mse,
        });
        models.push(m);
    }
    let train = data.split(Split::Train);
    let Targets::Values(y) = &train.targets else {
        unreachable!("regression data")
    };
    let fits: Vec<Tensor<f64>> = models.iter().map(|m| m.infer(&train.inputs)).collect::<Result<_>>()?;
    let mut points: Vec<Fig1Point> = (0..train.len())
        .map(|i| Fig1Point {
            x: train.inputs.data()[i],
            y_data: y.data()[i],
            fits: fits.iter().map(|f| f.data()[i]).collect(),
        })
        .collect();
    points.sort_by(|a, b| a.x.total_cmp(&b.x));
    Ok(Fig1Output {
        settings,
        points,
        models,
    })
}
