use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::LossBreakdown;
use crate::error::{Error, Result};
use crate::fsutil;

pub const CSV_HEADER: [&str; 6] = ["step", "epoch", "cls", "bbox", "mask", "total"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub steps: Vec<StepLog>,
    /// `(epoch, validation loss)` in epoch order.
    pub validation: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn push(&mut self, s: StepLog) {
        self.steps.push(s);
    }

    pub fn record_validation(&mut self, epoch: usize, loss: f64) {
        self.validation.push((epoch, loss));
    }

    pub fn n_epochs(&self) -> usize {
        self.steps.last().map_or(0, |s| s.epoch)
    }

    /// Mean of each term over the steps of one epoch.
    pub fn epoch_mean(&self, epoch: usize) -> Option<LossBreakdown> {
        let (mut c, mut b, mut m, mut n) = (0.0, 0.0, 0.0, 0usize);
        for s in self.steps.iter().filter(|s| s.epoch == epoch) {
            c += s.loss.classification;
            b += s.loss.bbox;
            m += s.loss.mask;
            n += 1;
        }
        (n > 0).then(|| {
            let n = n as f64;
            LossBreakdown::new(c / n, b / n, m / n)
        })
    }

    pub fn epoch_means(&self) -> Vec<LossBreakdown> {
        (1..=self.n_epochs()).filter_map(|e| self.epoch_mean(e)).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(io)?;
        for s in &self.steps {
            let l = s.loss;
            w.write_record([
                s.step.to_string(),
                s.epoch.to_string(),
                l.classification.to_string(),
                l.bbox.to_string(),
                l.mask.to_string(),
                l.total.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_csv()?.as_bytes())
    }

    /// Parses a curve written by [`LossCurve::write_csv`]. The logged total
    /// is kept as written, not recomputed.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fsutil::read_string(path)?;
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let parse_err = |line: usize, msg: String| Error::parse(path, line, msg);
        let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?;
        if header.iter().ne(CSV_HEADER) {
            return Err(parse_err(1, format!("expected header {}", CSV_HEADER.join(","))));
        }
        let mut steps = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
            let f = |k: usize| -> Result<f64> {
                rec[k].parse::<f64>().map_err(|e| parse_err(line, format!("{}: {e}", CSV_HEADER[k])))
            };
            let u = |k: usize| -> Result<usize> {
                rec[k].parse::<usize>().map_err(|e| parse_err(line, format!("{}: {e}", CSV_HEADER[k])))
            };
            steps.push(StepLog {
                step: u(0)?,
                epoch: u(1)?,
                loss: LossBreakdown {
                    classification: f(2)?,
                    bbox: f(3)?,
                    mask: f(4)?,
                    total: f(5)?,
                },
            });
        }
        Ok(Self {
            steps,
            validation: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve() -> LossCurve {
        let mut c = LossCurve::default();
        for (i, (e, v)) in [(1, 1.0), (1, 3.0), (2, 0.5), (2, 0.1 + 0.2)].into_iter().enumerate() {
            c.push(StepLog {
                step: i + 1,
                epoch: e,
                loss: LossBreakdown::new(v, v / 3.0, 1e-17),
            });
        }
        c
    }

    #[test]
    fn epoch_means() {
        let c = curve();
        assert_eq!(c.n_epochs(), 2);
        let m = c.epoch_mean(1).unwrap();
        assert_eq!(m.classification, 2.0);
        assert!(c.epoch_mean(3).is_none());
        assert_eq!(c.epoch_means().len(), 2);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let c = curve();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.csv");
        c.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,epoch,cls,bbox,mask,total\n"));
        assert_eq!(LossCurve::read_csv(&p).unwrap().steps, c.steps);
    }

    #[test]
    fn bad_header_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.csv");
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(LossCurve::read_csv(&p), Err(Error::Parse { line: 1, .. })));
    }
}
