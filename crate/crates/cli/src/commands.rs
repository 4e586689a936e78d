use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use layercollapse::arch::{ArchFamily, MacConvention};
use layercollapse::bound::verify_bound;
use layercollapse::collapse::{collapse_model, without_batchnorm, CollapseConfig};
use layercollapse::io::{
    bound_table, collapse_table, eval_table, fig1_curve_table, fig1_settings_table, load_checkpoint, save_checkpoint,
    share_table, stage_table, sweep_table, totals_table, train_log_table, write_atomic, CsvTable, RunConfig,
};
use layercollapse::loss::RegConfig;
use layercollapse::nn::init_model;
use layercollapse::rng::Rng;
use layercollapse::tensor::Tensor;
use layercollapse::train::{self, evaluate_split, sensitivity_sweep, sequential_collapse, Dataset, Split, TrainConfig};
use layercollapse::{Error, Model, Result};

use crate::Common;

const DEFAULT_OUT: &str = "out";

/// A loaded configuration with the command-line overrides applied.
struct Run {
    cfg: RunConfig,
    /// Directory that relative paths in the config resolve against.
    base: PathBuf,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
}

impl Run {
    fn new(c: &Common) -> Result<Run> {
        let (mut cfg, base) = match &c.config {
            Some(path) => {
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (RunConfig::load(path)?, base)
            }
            None => (RunConfig::default(), PathBuf::new()),
        };
        if let Some(seed) = c.seed {
            cfg.train.seed = seed;
            cfg.fig1.seed = seed;
            cfg.bound.seed = seed;
        }
        if let Some(lc) = c.lc {
            cfg.reg = Some(RegConfig {
                lc,
                ..cfg.effective_train().reg
            });
            cfg.fig1.lc = lc;
        }
        if let Some(tau) = c.tau {
            cfg.collapse = Some(CollapseConfig { tau });
        }
        if let Some(epochs) = c.epochs {
            cfg.train.epochs = epochs;
            cfg.fig1.epochs = epochs;
        }
        cfg.validate()?;
        let out = c
            .out
            .clone()
            .or_else(|| cfg.output.as_ref().map(|o| base.join(o)))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        let checkpoint = c.checkpoint.clone().or_else(|| {
            cfg.model
                .as_ref()
                .and_then(|m| m.checkpoint.as_ref())
                .map(|p| base.join(p))
        });
        fs::create_dir_all(&out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        let run = Run {
            cfg,
            base,
            out,
            checkpoint,
        };
        run.write("run.json", &run.echo()?)?;
        Ok(run)
    }

    fn train_cfg(&self) -> TrainConfig {
        self.cfg.effective_train()
    }

    /// The effective configuration without the output path, so that runs
    /// differing only in where they write produce identical artifacts.
    fn echo(&self) -> Result<Vec<u8>> {
        let mut cfg = self.cfg.clone();
        cfg.output = None;
        Ok(serde_json::to_vec_pretty(&cfg)?)
    }

    fn model(&self) -> Result<Model> {
        if let Some(path) = &self.checkpoint {
            info!("loading {}", path.display());
            return load_checkpoint(path);
        }
        match &self.cfg.model {
            Some(src) => {
                let arch = src.arch.as_ref().expect("validated model section");
                init_model(arch, self.cfg.train.seed, src.retrofit)
            }
            None => Err(Error::Config(vec![
                "model: required; give `model.arch`, `model.checkpoint` or --checkpoint".into(),
            ])),
        }
    }

    fn data(&self) -> Result<Dataset> {
        self.cfg
            .data
            .as_ref()
            .ok_or_else(|| Error::Config(vec!["data: required by this command".into()]))?
            .load(self.cfg.train.seed, &self.base)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out.join(name), bytes)
    }

    fn table(&self, name: &str, t: &CsvTable) -> Result<()> {
        t.write(&self.out.join(name))?;
        info!("wrote {}", self.out.join(name).display());
        Ok(())
    }

    fn save(&self, name: &str, m: &mut Model, command: &str) -> Result<()> {
        m.metadata.insert("command".into(), command.into());
        m.metadata.insert("seed".into(), self.cfg.train.seed.to_string());
        m.metadata
            .insert("config".into(), String::from_utf8(self.echo()?).expect("JSON is UTF-8"));
        let path = self.out.join(name);
        save_checkpoint(m, &path)?;
        info!("wrote {} ({} parameters)", path.display(), m.param_count());
        Ok(())
    }
}

pub fn train(c: &Common) -> Result<()> {
    let run = Run::new(c)?;
    let mut m = run.model()?;
    let data = run.data()?;
    let log = train::train(&mut m, &data, &run.train_cfg(), None)?;
    run.table("train_log.csv", &train_log_table(&log))?;
    run.save("model.lckp", &mut m, "train")
}

pub fn finetune(c: &Common) -> Result<()> {
    let run = Run::new(c)?;
    let teacher = run.model()?;
    let data = run.data()?;
    let mut m = teacher.clone();
    let log = train::train(&mut m, &data, &run.train_cfg(), Some(&teacher))?;
    run.table("train_log.csv", &train_log_table(&log))?;
    run.save("model.lckp", &mut m, "finetune")
}

pub fn collapse(c: &Common, sequential: bool) -> Result<()> {
    let run = Run::new(c)?;
    let m = run.model()?;
    let tc = run.train_cfg();
    let mut collapsed = if sequential {
        let data = run.data()?;
        let outcome = sequential_collapse(&m, &data, &tc, Some(&m))?;
        run.table("stages.csv", &stage_table(&outcome.stages))?;
        run.table("train_log.csv", &train_log_table(&outcome.log))?;
        let reports: Vec<_> = outcome.stages.into_iter().map(|s| s.collapse).collect();
        run.table("collapse.csv", &collapse_table(&reports))?;
        outcome.model
    } else {
        let (collapsed, reports) = collapse_model(&m, &CollapseConfig::new(tc.tau)?)?;
        run.table("collapse.csv", &collapse_table(&reports))?;
        collapsed
    };
    info!("parameters {} -> {}", m.param_count(), collapsed.param_count());
    run.save("model.lckp", &mut collapsed, "collapse")
}

pub fn eval(c: &Common) -> Result<()> {
    let run = Run::new(c)?;
    let m = run.model()?;
    let rows = match &run.cfg.data {
        Some(_) => {
            let data = run.data()?;
            let mut rows = Vec::new();
            for (label, split) in [("train", Split::Train), ("val", Split::Val)] {
                let e = evaluate_split(&m, &data, split)?;
                rows.push((label, e.map(|e| (e.loss, e.metric))));
            }
            rows
        }
        None => vec![("none", None)],
    };
    run.table("eval.csv", &eval_table(m.param_count(), m.macs_per_sample()?, &rows))
}

pub fn gain_report(c: &Common, families: &[String], attention_macs: bool) -> Result<()> {
    let run = Run::new(c)?;
    let families: Vec<ArchFamily> = if families.is_empty() {
        ArchFamily::ALL.to_vec()
    } else {
        families.iter().map(|f| f.parse()).collect::<Result<_>>()?
    };
    let conv = MacConvention {
        attention_products: attention_macs,
    };
    run.table("mlp_share.csv", &share_table(&families, conv)?)?;
    run.table("collapse_totals.csv", &totals_table(&families, conv)?)
}

/// Data inputs when a `data` section is given, otherwise standard-normal
/// probes at the model input.
fn probe_inputs(run: &Run, m: &Model) -> Result<Tensor<f64>> {
    if run.cfg.data.is_some() {
        return Ok(run.data()?.inputs);
    }
    let mut shape = vec![run.cfg.bound.samples];
    shape.extend_from_slice(m.input_shape());
    let n = shape.iter().product();
    let mut rng = Rng::seed(run.cfg.bound.seed);
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
}

pub fn bound_check(c: &Common) -> Result<()> {
    let run = Run::new(c)?;
    let m = run.model()?;
    let names = m.block_names();
    if names.is_empty() {
        return Err(Error::Contract("model has no collapsible blocks".into()));
    }
    let xs = probe_inputs(&run, &m)?;
    let mut rows = Vec::new();
    for name in names {
        let index = m.position(&name).expect("listed block");
        let block = without_batchnorm(m.block(&name).expect("listed block"))?;
        let inputs = m.infer_range(0..index, &xs)?;
        for &delta in &run.cfg.bound.deltas {
            let r = verify_bound(&block, &inputs, delta, run.cfg.bound.seed)?;
            info!(
                "{name} delta {delta}: violation rate {:.4} (operator form {:.4})",
                r.violation_rate, r.operator_violation_rate
            );
            rows.push((name.clone(), r));
        }
    }
    run.table("bound.csv", &bound_table(&rows))
}

pub fn sensitivity(c: &Common) -> Result<()> {
    let run = Run::new(c)?;
    let m = run.model()?;
    let data = run.data()?;
    let rows = sensitivity_sweep(&m, &data, &run.train_cfg(), Some(&m))?;
    run.table("sensitivity.csv", &sweep_table(&rows))
}

pub fn demo_fig1(c: &Common) -> Result<()> {
    let run = Run::new(c)?;
    let out = train::demo_fig1(&run.cfg.fig1)?;
    for s in &out.settings {
        info!("{}: alpha {:.4}, val mse {:.4}", s.label, s.alpha, s.val_mse);
    }
    run.table("fig1_settings.csv", &fig1_settings_table(&out))?;
    run.table("fig1_curve.csv", &fig1_curve_table(&out))
}
