//! Hyperparameter sweeps: independent seeded runs over one axis,
//! aggregated into summary and trace CSVs.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::pipeline::{run_schedule, TrainPlan};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    PrefixLen,
    Stage1Steps,
    Alpha,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix-len" | "prefix_len" => Ok(Self::PrefixLen),
            "stage1-steps" | "stage1_steps" => Ok(Self::Stage1Steps),
            "alpha" => Ok(Self::Alpha),
            other => Err(Error::config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

impl SweepAxis {
    pub fn apply(self, plan: &mut TrainPlan, value: f64) -> Result<()> {
        match self {
            SweepAxis::PrefixLen => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::config(format!(
                        "prefix-len sweep value {value} is not a nonnegative integer"
                    )));
                }
                plan.model.prefix_len = value as usize;
            }
            SweepAxis::Stage1Steps => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::config(format!(
                        "stage1-steps sweep value {value} is not a nonnegative integer"
                    )));
                }
                plan.stage1.steps = value as usize;
            }
            SweepAxis::Alpha => {
                if value < 0.0 {
                    return Err(Error::config(format!("alpha sweep value {value} is negative")));
                }
                plan.stage2.alpha = value;
            }
        }
        Ok(())
    }
}

/// One eval point of one run: step plus δ/κ/dev traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTracePoint {
    pub step: u64,
    pub delta: f64,
    pub kappa: Option<f64>,
    pub dev_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub best_dev: Option<f64>,
    pub final_dev: Option<f64>,
    pub test_spearman: Option<f64>,
    pub trace: Vec<SweepTracePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

/// Runs the template plan once per value, optionally with several
/// worker threads. Runs are independent and identically seeded from
/// the template, so rows are comparable.
pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    template: &TrainPlan,
    corpus: &Corpus,
    jobs: usize,
) -> Result<SweepResult> {
    if values.len() < 2 {
        return Err(Error::config("a sweep needs at least two values"));
    }
    let jobs = jobs.max(1);

    let run_one = |value: f64| -> Result<SweepRow> {
        let mut plan = template.clone();
        axis.apply(&mut plan, value)?;
        let outcome = run_schedule(&plan, corpus)?;
        let trace = outcome
            .report
            .trace
            .diagnostics
            .iter()
            .map(|p| SweepTracePoint {
                step: p.record.step as u64,
                delta: p.record.delta,
                kappa: p.record.kappa,
                dev_spearman: p.record.dev_spearman,
            })
            .collect();
        Ok(SweepRow {
            value,
            best_dev: outcome.report.best_dev,
            final_dev: outcome.report.final_dev,
            test_spearman: outcome.report.test_spearman,
            trace,
        })
    };

    let mut rows: Vec<SweepRow> = Vec::with_capacity(values.len());
    if jobs == 1 {
        for &v in values {
            rows.push(run_one(v)?);
        }
    } else {
        for chunk in values.chunks(jobs) {
            let results = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&v| scope.spawn(move || run_one(v)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("sweep worker panicked"))
                    .collect::<Vec<_>>()
            });
            for r in results {
                rows.push(r?);
            }
        }
    }
    Ok(SweepResult { axis, rows })
}

/// Writes `sweep.csv` (one row per value) and `sweep_trace.csv`
/// (long format: one row per value per eval point) into `dir`.
pub fn write_sweep_csv(result: &SweepResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();

    let mut summary = fs::File::create(dir.join("sweep.csv"))?;
    writeln!(summary, "value,best_dev,final_dev,test_spearman")?;
    for row in &result.rows {
        writeln!(
            summary,
            "{},{},{},{}",
            row.value,
            opt(row.best_dev),
            opt(row.final_dev),
            opt(row.test_spearman)
        )?;
    }

    let mut trace = fs::File::create(dir.join("sweep_trace.csv"))?;
    writeln!(trace, "value,step,delta,kappa,dev_spearman")?;
    for row in &result.rows {
        for p in &row.trace {
            writeln!(
                trace,
                "{},{},{},{},{}",
                row.value,
                p.step,
                p.delta,
                opt(p.kappa),
                opt(p.dev_spearman)
            )?;
        }
    }
    Ok(())
}
