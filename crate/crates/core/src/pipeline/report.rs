use std::fmt::Write as _;
use std::path::Path;

use super::config::{Method, Stage};
use super::plot::bar_chart;
use super::run::{read_methods, read_pairing, RunLayout};
use crate::error::{Error, Result};
use crate::metrics::{MetricSet, MetricsReport};

/// Generation scores of conditioned samples against their own originals and
/// against shifted (unrelated) originals.
#[derive(Debug, Clone)]
pub struct GenerationResults {
    pub matched: MetricsReport,
    pub unpaired: MetricsReport,
    pub shift: usize,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub generation: Option<GenerationResults>,
    pub segmentation: Vec<(Method, MetricsReport)>,
}

impl Report {
    pub fn method(&self, method: Method) -> Option<&MetricsReport> {
        self.segmentation.iter().find(|(m, _)| *m == method).map(|(_, r)| r)
    }
}

fn pm(report: &MetricsReport, metric: &str) -> String {
    match report.aggregate(metric) {
        Some(a) => format!("{:.4} ± {:.4}", a.mean, a.std),
        None => "n/a".into(),
    }
}

/// Loads every completed evaluation under `run_dir` (each table is checked
/// against its per-case file) without writing anything.
pub fn load_results(run_dir: &Path) -> Result<Report> {
    let layout = RunLayout::new(run_dir);
    let gen_dir = layout.stage_dir(Stage::EvalGen);
    let generation = if gen_dir.join("generation.csv").exists() {
        Some(GenerationResults {
            matched: MetricsReport::load(&gen_dir, "generation")?,
            unpaired: MetricsReport::load(&gen_dir, "unpaired")?,
            shift: read_pairing(&gen_dir)?.shift,
        })
    } else {
        None
    };
    let seg_dir = layout.stage_dir(Stage::EvalSeg);
    let mut segmentation = Vec::new();
    if seg_dir.join("methods.json").exists() {
        for m in read_methods(&seg_dir)? {
            segmentation.push((m, MetricsReport::load(&seg_dir, m.as_str())?));
        }
    }
    if generation.is_none() && segmentation.is_empty() {
        return Err(Error::EmptyReport(run_dir.to_path_buf()));
    }
    Ok(Report { generation, segmentation })
}

/// Consolidates the evaluations of a run into `report/`: comma-separated
/// tables, a text summary and SVG charts.
pub fn write_report(run_dir: &Path) -> Result<Report> {
    let report = load_results(run_dir)?;
    let out = RunLayout::new(run_dir).report();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut summary = String::new();

    if let Some(g) = &report.generation {
        let path = out.join("generation.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["metric", "mean", "std", "unpaired_mean", "unpaired_std"])?;
        for name in MetricSet::Generation.metric_names() {
            let a = g.matched.aggregate(name).expect("metric present");
            let b = g.unpaired.aggregate(name).expect("metric present");
            w.write_record([name.to_string(), a.mean.to_string(), a.std.to_string(), b.mean.to_string(), b.std.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(summary, "Generation ({} held-out cases)", g.matched.rows.len());
        for name in MetricSet::Generation.metric_names() {
            let _ = writeln!(
                summary,
                "  {name:<8} {}   unpaired {}",
                pm(&g.matched, name),
                pm(&g.unpaired, name)
            );
        }
        summary.push('\n');
        let bars: Vec<(String, f64, f64)> = ["mae", "rmse"]
            .iter()
            .flat_map(|m| {
                let a = g.matched.aggregate(m).unwrap();
                let b = g.unpaired.aggregate(m).unwrap();
                [
                    (format!("{m} own edge"), a.mean, a.std),
                    (format!("{m} unpaired"), b.mean, b.std),
                ]
            })
            .collect();
        bar_chart(&out.join("generation.svg"), "Generated vs original", "error", &bars)?;
    }

    if !report.segmentation.is_empty() {
        let names = MetricSet::Segmentation.metric_names();
        let path = out.join("segmentation.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["method".to_string(), "cases".to_string()];
        for n in names {
            header.push(format!("{n}_mean"));
            header.push(format!("{n}_std"));
        }
        w.write_record(&header)?;
        let _ = writeln!(summary, "Segmentation (validation folds, all repetitions)");
        for (m, r) in &report.segmentation {
            let mut rec = vec![m.label(), r.rows.len().to_string()];
            let mut line = format!("  {:<22}", m.label());
            for n in names {
                let a = r.aggregate(n).expect("metric present");
                rec.push(a.mean.to_string());
                rec.push(a.std.to_string());
                let _ = write!(line, " {n} {}", pm(r, n));
            }
            w.write_record(&rec)?;
            let _ = writeln!(summary, "{line}");
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let bars: Vec<(String, f64, f64)> = report
            .segmentation
            .iter()
            .map(|(m, r)| {
                let a = r.aggregate("dice").unwrap();
                (m.label(), a.mean, a.std)
            })
            .collect();
        bar_chart(&out.join("segmentation.svg"), "Validation Dice", "Dice", &bars)?;
    }

    let path = out.join("summary.txt");
    std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
