use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSet {
    Generation,
    Segmentation,
}

impl MetricSet {
    pub fn metric_names(&self) -> &'static [&'static str] {
        match self {
            MetricSet::Generation => &["mae", "mse", "rmse", "ssim", "ms_ssim"],
            MetricSet::Segmentation => &["dice", "precision", "recall", "hd95", "assd"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    /// One value per metric, in [`MetricSet::metric_names`] order.
    pub values: Vec<f64>,
    /// Free-text note, e.g. when a surface metric fell back to its sentinel.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (zero for a single case).
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub set: MetricSet,
    /// Pixel spacing used by the surface metrics, when uniform.
    pub spacing: Option<(f64, f64)>,
    pub rows: Vec<CaseRow>,
    pub aggregates: Vec<Aggregate>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

impl MetricsReport {
    pub fn from_rows(set: MetricSet, spacing: Option<(f64, f64)>, rows: Vec<CaseRow>) -> Result<Self> {
        let names = set.metric_names();
        if let Some(r) = rows.iter().find(|r| r.values.len() != names.len()) {
            return Err(Error::Validation(format!(
                "case {} has {} values for {} metrics",
                r.case_id,
                r.values.len(),
                names.len()
            )));
        }
        let aggregates = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let col: Vec<f64> = rows.iter().map(|r| r.values[i]).collect();
                let (mean, std) = mean_std(&col);
                Aggregate {
                    metric: name.to_string(),
                    mean,
                    std,
                }
            })
            .collect();
        Ok(Self {
            set,
            spacing,
            rows,
            aggregates,
        })
    }

    pub fn aggregate(&self, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.metric == metric)
    }

    pub fn mean(&self, metric: &str) -> f64 {
        self.aggregate(metric).map(|a| a.mean).unwrap_or(f64::NAN)
    }

    pub fn column(&self, metric: &str) -> Option<Vec<f64>> {
        let i = self.set.metric_names().iter().position(|m| *m == metric)?;
        Some(self.rows.iter().map(|r| r.values[i]).collect())
    }

    /// Concatenates reports of the same set (e.g. the folds of a
    /// cross-validation) and recomputes the aggregates.
    pub fn merge(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Argument("no reports to merge".into()))?;
        if reports.iter().any(|r| r.set != first.set) {
            return Err(Error::Argument("cannot merge reports of different metric sets".into()));
        }
        let spacing = if reports.iter().all(|r| r.spacing == first.spacing) {
            first.spacing
        } else {
            None
        };
        let rows = reports.iter().flat_map(|r| r.rows.iter().cloned()).collect();
        Self::from_rows(first.set, spacing, rows)
    }

    /// Checks the stored aggregates against a recomputation from the rows.
    pub fn verify(&self) -> Result<()> {
        let fresh = Self::from_rows(self.set, self.spacing, self.rows.clone())?;
        for (a, b) in self.aggregates.iter().zip(&fresh.aggregates) {
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 || (x.is_nan() && y.is_nan());
            if a.metric != b.metric || !close(a.mean, b.mean) || !close(a.std, b.std) {
                return Err(Error::Validation(format!("aggregate {} does not match its rows", a.metric)));
            }
        }
        if self.aggregates.len() != fresh.aggregates.len() {
            return Err(Error::Validation("aggregate list is incomplete".into()));
        }
        Ok(())
    }

    /// Per-case table with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["case_id"];
        header.extend(self.set.metric_names());
        header.push("warning");
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.case_id.clone()];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            rec.push(r.warning.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, set: MetricSet, spacing: Option<(f64, f64)>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let names = set.metric_names();
        let header = r.headers()?.clone();
        let expected: Vec<&str> = std::iter::once("case_id").chain(names.iter().copied()).chain(["warning"]).collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Validation(format!("{}: unexpected header", path.display())));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let values = (1..=names.len())
                .map(|i| {
                    rec[i]
                        .parse::<f64>()
                        .map_err(|_| Error::Validation(format!("{}: bad number {:?}", path.display(), &rec[i])))
                })
                .collect::<Result<Vec<_>>>()?;
            let warning = &rec[names.len() + 1];
            rows.push(CaseRow {
                case_id: rec[0].to_string(),
                values,
                warning: (!warning.is_empty()).then(|| warning.to_string()),
            });
        }
        Self::from_rows(set, spacing, rows)
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&Summary {
            set: self.set,
            spacing: self.spacing,
            cases: self.rows.len(),
            warnings: self.rows.iter().filter(|r| r.warning.is_some()).count(),
            aggregates: self.aggregates.clone(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.write_csv(&dir.join(format!("{stem}.csv")))?;
        self.write_summary(&dir.join(format!("{stem}.json")))
    }

    /// Reloads from the per-case table; the summary is checked against it.
    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let spath = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
        let summary: Summary = serde_json::from_str(&text)?;
        let report = Self::read_csv(&dir.join(format!("{stem}.csv")), summary.set, summary.spacing)?;
        let stored = Self {
            aggregates: summary.aggregates,
            ..report.clone()
        };
        stored.verify()?;
        Ok(report)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Summary {
    set: MetricSet,
    spacing: Option<(f64, f64)>,
    cases: usize,
    warnings: usize,
    aggregates: Vec<Aggregate>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        let rows = (0..4)
            .map(|i| CaseRow {
                case_id: format!("c{i}"),
                values: vec![0.1 * i as f64, 0.3, 1.0 / 3.0, 2.5 + i as f64, 1e-17],
                warning: (i == 2).then(|| "empty prediction, sentinel used".to_string()),
            })
            .collect();
        MetricsReport::from_rows(MetricSet::Segmentation, Some((1.0, 1.0)), rows).unwrap()
    }

    #[test]
    fn aggregates() {
        let r = report();
        let d = r.aggregate("dice").unwrap();
        assert!((d.mean - 0.15).abs() < 1e-15);
        let expected = ((0.0225 + 0.0025 + 0.0025 + 0.0225) / 3.0f64).sqrt();
        assert!((d.std - expected).abs() < 1e-12);
        assert_eq!(r.aggregate("precision").unwrap().std, 0.0);
        r.verify().unwrap();
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        r.save(dir.path(), "seg").unwrap();
        let back = MetricsReport::load(dir.path(), "seg").unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn tampered_summary_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = report();
        r.aggregates[0].mean += 0.01;
        r.save(dir.path(), "seg").unwrap();
        assert!(MetricsReport::load(dir.path(), "seg").is_err());
    }
}
