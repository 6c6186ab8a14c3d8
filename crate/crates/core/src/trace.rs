//! Training traces and their CSV form.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureId;
use crate::error::{LabError, Result};
use crate::probe::CorrelationSnapshot;

/// One logged pretraining iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub loss: f64,
    pub lambda_min: f64,
    pub lambda_mean: f64,
    pub lambda_max: f64,
    pub offdiag_max: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// `"ts"` or `"mae"`.
    pub framework: String,
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<CorrelationSnapshot>,
    /// Soft-check violations; informative, never fatal.
    pub warnings: Vec<String>,
    /// Intermediate weights kept at the configured checkpoint stride.
    #[serde(skip)]
    pub checkpoints: Vec<(usize, crate::network::EncoderWeights)>,
}

impl TrainTrace {
    pub fn new(framework: &str) -> Self {
        Self {
            framework: framework.to_string(),
            ..Self::default()
        }
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Flags every logged drop of `max Λ` at or after iteration `burn_in`.
    pub fn check_lambda_growth(&mut self, burn_in: usize) {
        let logged: Vec<&TraceRecord> = self.records.iter().filter(|r| r.t >= burn_in).collect();
        let mut flags = Vec::new();
        for pair in logged.windows(2) {
            if pair[1].lambda_max < pair[0].lambda_max {
                flags.push(format!(
                    "max lambda decreased from {} at t = {} to {} at t = {}",
                    pair[0].lambda_max, pair[0].t, pair[1].lambda_max, pair[1].t
                ));
            }
        }
        self.warnings.extend(flags);
    }

    /// Columns `t, loss, lambda_min, lambda_mean, lambda_max, offdiag_max, grad_norm`,
    /// followed by `framework` when `tagged`.
    pub fn write_csv<W: Write>(&self, out: W, tagged: bool) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec![
            "t",
            "loss",
            "lambda_min",
            "lambda_mean",
            "lambda_max",
            "offdiag_max",
            "grad_norm",
        ];
        if tagged {
            header.push("framework");
        }
        wtr.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![
                r.t.to_string(),
                fmt_f64(r.loss),
                fmt_f64(r.lambda_min),
                fmt_f64(r.lambda_mean),
                fmt_f64(r.lambda_max),
                fmt_f64(r.offdiag_max),
                fmt_f64(r.grad_norm),
            ];
            if tagged {
                row.push(self.framework.clone());
            }
            wtr.write_record(&row).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Long format `t, r, i, l, corr` over every stored snapshot.
    pub fn write_snapshots_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["t", "r", "i", "l", "corr"]).map_err(csv_err)?;
        for snap in &self.snapshots {
            for (r, row) in snap.corr.iter().enumerate() {
                for (f, c) in row.iter().enumerate() {
                    let id = FeatureId::from_index(f);
                    wtr.write_record(&[
                        snap.t.to_string(),
                        r.to_string(),
                        id.class.to_string(),
                        id.slot.to_string(),
                        fmt_f64(*c),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// One logged fine-tuning iteration, accuracies measured on the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub t: usize,
    pub loss: f64,
    pub acc_overall: f64,
    pub acc_multi: f64,
    pub acc_single: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneTrace {
    pub records: Vec<FinetuneRecord>,
    pub warnings: Vec<String>,
}

impl FinetuneTrace {
    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["t", "loss", "acc_overall", "acc_multi", "acc_single"])
            .map_err(csv_err)?;
        for r in &self.records {
            wtr.write_record(&[
                r.t.to_string(),
                fmt_f64(r.loss),
                fmt_f64(r.acc_overall),
                fmt_f64(r.acc_multi),
                fmt_f64(r.acc_single),
            ])
            .map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shortest round-trip representation; `NaN` when undefined.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:?}")
    }
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::Format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: usize) -> TraceRecord {
        TraceRecord {
            t,
            loss: 0.5,
            lambda_min: 0.1,
            lambda_mean: 0.2,
            lambda_max: 0.3,
            offdiag_max: 0.05,
            grad_norm: 1.0,
        }
    }

    #[test]
    fn csv_headers() {
        let mut tr = TrainTrace::new("mae");
        tr.records.push(rec(0));
        let mut buf = Vec::new();
        tr.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,loss,lambda_min,lambda_mean,lambda_max,offdiag_max,grad_norm,framework"
        );
        assert_eq!(lines.next().unwrap(), "0,0.5,0.1,0.2,0.3,0.05,1.0,mae");

        let mut buf = Vec::new();
        TrainTrace::new("ts").write_csv(&mut buf, false).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,loss,"));
    }
}
