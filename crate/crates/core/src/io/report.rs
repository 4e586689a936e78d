use std::path::Path;

use crate::arch::{collapse_accounting, describe, mlp_share, ArchFamily, MacConvention, REFERENCE_COLLAPSES};
use crate::bound::BoundReport;
use crate::collapse::{CollapseReport, CountParams};
use crate::error::Result;
use crate::train::{Fig1Output, StageReport, SweepRow, TrainLog};

/// Formats like C's `%.6g`: six significant digits, trailing zeros dropped.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        format!("{}e{exp}", trim(mant))
    } else {
        trim(&format!("{x:.*}", (5 - exp) as usize))
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        CsvTable {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner()
            .map_err(|e| crate::error::Error::Contract(format!("csv buffer: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes()?)
    }

    /// Column index by header name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn collapse_table(reports: &[CollapseReport]) -> CsvTable {
    let mut t = CsvTable::new([
        "layer_name",
        "alpha",
        "params_before",
        "params_after",
        "gain",
        "macs_before",
        "macs_after",
        "status",
    ]);
    for r in reports {
        t.push(vec![
            r.layer_name.clone(),
            fmt_num(r.alpha_at_collapse),
            r.params_before.to_string(),
            r.params_after.to_string(),
            fmt_num(r.gain_fraction),
            r.macs_before.to_string(),
            r.macs_after.to_string(),
            if r.collapsed { "collapsed" } else { "uncollapsible" }.to_string(),
        ]);
    }
    t
}

/// Two rows per epoch (`train`, then `val`) with one `alpha:<layer>`
/// column per slope.
pub fn train_log_table(log: &TrainLog) -> CsvTable {
    let names: Vec<String> = log
        .records
        .first()
        .map(|r| r.alphas.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = ["epoch", "split", "total", "ce", "kl", "reg", "metric", "lr"]
        .map(String::from)
        .to_vec();
    header.extend(names.iter().map(|n| format!("alpha:{n}")));
    let mut t = CsvTable::new(header);
    for r in &log.records {
        let alphas: Vec<String> = r.alphas.iter().map(|(_, a)| fmt_num(*a)).collect();
        let mut train = vec![
            r.epoch.to_string(),
            "train".into(),
            fmt_num(r.train.total),
            fmt_num(r.train.ce_term),
            fmt_num(r.train.kl_term),
            fmt_num(r.train.reg_term),
            fmt_num(r.train_metric),
            fmt_num(r.lr),
        ];
        train.extend(alphas.iter().cloned());
        t.push(train);
        if r.val_metric.is_some() {
            let mut val = vec![
                r.epoch.to_string(),
                "val".into(),
                opt(r.val_loss),
                String::new(),
                String::new(),
                String::new(),
                opt(r.val_metric),
                fmt_num(r.lr),
            ];
            val.extend(alphas);
            t.push(val);
        }
    }
    t
}

pub fn stage_table(stages: &[StageReport]) -> CsvTable {
    let mut t = CsvTable::new([
        "stage",
        "block",
        "epochs",
        "alpha",
        "status",
        "params_after",
        "metric_before",
        "metric_after",
        "max_output_diff",
        "pathwise_bound_holds",
    ]);
    for s in stages {
        t.push(vec![
            s.stage.to_string(),
            s.block.clone(),
            s.epochs.to_string(),
            fmt_num(s.collapse.alpha_at_collapse),
            if s.collapse.collapsed {
                "collapsed"
            } else {
                "uncollapsible"
            }
            .to_string(),
            s.params_after.to_string(),
            opt(s.metric_before),
            opt(s.metric_after),
            fmt_num(s.max_output_diff),
            s.pathwise_bound_holds.to_string(),
        ]);
    }
    t
}

pub fn sweep_table(rows: &[SweepRow]) -> CsvTable {
    let mut t = CsvTable::new(["layers_collapsed", "block", "alpha", "metric", "params"]);
    for r in rows {
        t.push(vec![
            r.layers_collapsed.to_string(),
            r.block.clone(),
            opt(r.alpha),
            opt(r.metric),
            r.params.to_string(),
        ]);
    }
    t
}

pub fn bound_table(rows: &[(String, BoundReport)]) -> CsvTable {
    let mut t = CsvTable::new([
        "block",
        "delta",
        "x_delta_norm",
        "sigma_max",
        "c",
        "alpha",
        "violation_rate",
        "c_operator",
        "operator_violation_rate",
        "n_evaluation",
    ]);
    for (name, r) in rows {
        t.push(vec![
            name.clone(),
            fmt_num(r.delta),
            fmt_num(r.x_delta_norm),
            fmt_num(r.sigma_max),
            fmt_num(r.c),
            fmt_num(r.alpha),
            fmt_num(r.violation_rate),
            fmt_num(r.c_operator),
            fmt_num(r.operator_violation_rate),
            r.n_evaluation.to_string(),
        ]);
    }
    t
}

/// Model summary: parameters, per-sample MACs, and metrics per split.
pub fn eval_table(params: u64, macs: u64, rows: &[(&str, Option<(f64, f64)>)]) -> CsvTable {
    let mut t = CsvTable::new(["split", "params", "macs_per_sample", "loss", "metric"]);
    for (split, v) in rows {
        t.push(vec![
            split.to_string(),
            params.to_string(),
            macs.to_string(),
            opt(v.map(|v| v.0)),
            opt(v.map(|v| v.1)),
        ]);
    }
    t
}

/// Percentage of parameters and MACs held by collapsible MLPs.
pub fn share_table(families: &[ArchFamily], conv: MacConvention) -> Result<CsvTable> {
    let mut t = CsvTable::new(["model", "params_share_pct", "macs_share_pct"]);
    for &f in families {
        let (p, m) = mlp_share(&describe(f), conv)?;
        t.push(vec![f.name().to_string(), fmt_num(100.0 * p), fmt_num(100.0 * m)]);
    }
    Ok(t)
}

/// Parameter and MAC totals at the reference collapse counts.
pub fn totals_table(families: &[ArchFamily], conv: MacConvention) -> Result<CsvTable> {
    let mut t = CsvTable::new(["model", "collapsed_layers", "params", "params_m", "macs", "macs_g"]);
    for &f in families {
        let d = describe(f);
        let counts: Vec<usize> = REFERENCE_COLLAPSES
            .iter()
            .find(|(g, _)| *g == f)
            .map(|(_, c)| c.to_vec())
            .unwrap_or_else(|| vec![0, d.collapsible_sites.len()]);
        for k in counts {
            let (p, m) = collapse_accounting(&d, k, conv)?;
            t.push(vec![
                f.name().to_string(),
                k.to_string(),
                p.to_string(),
                fmt_num(p as f64 / 1e6),
                m.to_string(),
                fmt_num(m as f64 / 1e9),
            ]);
        }
        debug_assert_eq!(d.count_params(), collapse_accounting(&d, 0, conv)?.0);
    }
    Ok(t)
}

pub fn fig1_settings_table(out: &Fig1Output) -> CsvTable {
    let mut t = CsvTable::new(["setting", "alpha", "train_mse", "val_mse"]);
    for s in &out.settings {
        t.push(vec![
            s.label.clone(),
            fmt_num(s.alpha),
            fmt_num(s.train_mse),
            fmt_num(s.val_mse),
        ]);
    }
    t
}

pub fn fig1_curve_table(out: &Fig1Output) -> CsvTable {
    let mut header = vec!["x".to_string(), "y_data".to_string()];
    header.extend(out.settings.iter().map(|s| format!("fit:{}", s.label)));
    let mut t = CsvTable::new(header);
    for p in &out.points {
        let mut row = vec![fmt_num(p.x), fmt_num(p.y_data)];
        row.extend(p.fits.iter().map(|&f| fmt_num(f)));
        t.push(row);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(0.712345678), "0.712346");
        assert_eq!(fmt_num(71.23456), "71.2346");
        assert_eq!(fmt_num(-2.5), "-2.5");
        assert_eq!(fmt_num(123456789.0), "1.23457e8");
        assert_eq!(fmt_num(0.00001234), "1.234e-5");
        assert_eq!(fmt_num(999999.7), "1e6");
    }

    #[test]
    fn share_table_vgg16_row() {
        let t = share_table(&[ArchFamily::Vgg16], MacConvention::default()).unwrap();
        assert_eq!(t.rows[0][0], "VGG16");
        let share: f64 = t.rows[0][1].parse().unwrap();
        assert!((share - 71.2).abs() < 0.5);
    }
}
