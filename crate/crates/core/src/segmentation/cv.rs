use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::backbone::SegBackboneSpec;
use super::train::{evaluate, train_segmentation, Augment, SegTrainConfig, SegTrainOutcome};
use crate::datagen::SampleRecord;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::rng::{derive_seed, seeded};

/// Splits record indices into `folds` validation sets. Records sharing a
/// source volume stay in one fold; folds are balanced by record count.
pub fn fold_partition(records: &[&SampleRecord], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("cross-validation needs at least 2 folds, got {folds}")));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.group_key()).or_default().push(i);
    }
    if groups.len() < folds {
        return Err(Error::InvalidConfig(format!(
            "{} independent images/volumes cannot fill {folds} folds",
            groups.len()
        )));
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut seeded(derive_seed(seed, "folds", 0)));
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
    let mut out = vec![Vec::new(); folds];
    for g in groups {
        let target = (0..folds).min_by_key(|&f| (out[f].len(), f)).unwrap();
        out[target].extend(g);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub losses: Vec<f64>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    /// Every validation case of every fold, with aggregates over all of them.
    pub pooled: MetricsReport,
}

/// One trained fold: validation indices into the record list and the model.
pub struct TrainedFold {
    pub val: Vec<usize>,
    pub outcome: SegTrainOutcome,
}

/// Trains one model per fold on the records outside it.
pub fn train_folds(
    records: &[&SampleRecord],
    augment: Augment<'_>,
    spec: &SegBackboneSpec,
    config: &SegTrainConfig,
    seed: u64,
) -> Result<Vec<TrainedFold>> {
    config.validate()?;
    let parts = fold_partition(records, config.folds, seed)?;
    let mut out = Vec::with_capacity(parts.len());
    for (k, val) in parts.into_iter().enumerate() {
        let train: Vec<&SampleRecord> = (0..records.len())
            .filter(|i| !val.contains(i))
            .map(|i| records[i])
            .collect();
        let outcome = train_segmentation(&train, augment, spec, config, derive_seed(seed, "fold", k as u64))?;
        out.push(TrainedFold { val, outcome });
    }
    Ok(out)
}

/// Trains one model per fold on the other folds and evaluates it on its own.
pub fn cross_validate(
    records: &[&SampleRecord],
    augment: Augment<'_>,
    spec: &SegBackboneSpec,
    config: &SegTrainConfig,
    seed: u64,
) -> Result<CrossValidation> {
    let trained = train_folds(records, augment, spec, config, seed)?;
    let mut folds = Vec::with_capacity(trained.len());
    for (k, t) in trained.into_iter().enumerate() {
        let valr: Vec<&SampleRecord> = t.val.iter().map(|&i| records[i]).collect();
        let report = evaluate(&t.outcome.model, &valr)?;
        log::info!("fold {k}: dice {:.4}", report.mean("dice"));
        folds.push(FoldResult {
            fold: k,
            train_ids: (0..records.len())
                .filter(|i| !t.val.contains(i))
                .map(|i| records[i].case_id.clone())
                .collect(),
            val_ids: valr.iter().map(|r| r.case_id.clone()).collect(),
            losses: t.outcome.losses,
            report,
        });
    }
    let pooled = MetricsReport::merge(&folds.iter().map(|f| f.report.clone()).collect::<Vec<_>>())?;
    Ok(CrossValidation { folds, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::Vocabulary;
    use crate::datagen::{synth_seg_task, SegTaskSpec};

    fn records(count: usize) -> Vec<SampleRecord> {
        let spec = SegTaskSpec {
            count,
            size: 16,
            ..SegTaskSpec::default()
        };
        synth_seg_task(&spec, &Vocabulary::default(), 1).unwrap().records
    }

    #[test]
    fn even_split() {
        let data = records(33);
        let refs: Vec<_> = data.iter().collect();
        let parts = fold_partition(&refs, 3, 4).unwrap();
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![11, 11, 11]);
        let mut all: Vec<_> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..33).collect::<Vec<_>>());
    }

    #[test]
    fn volumes_never_split() {
        let mut data = records(12);
        for (i, r) in data.iter_mut().enumerate() {
            r.source_volume_id = Some(format!("vol{}", i / 3));
        }
        let refs: Vec<_> = data.iter().collect();
        let parts = fold_partition(&refs, 2, 0).unwrap();
        for p in &parts {
            for &i in p {
                let vol = &data[i].source_volume_id;
                assert!(parts.iter().filter(|q| q.iter().any(|&k| &data[k].source_volume_id == vol)).count() == 1);
            }
        }
        assert!(fold_partition(&refs, 5, 0).is_err());
        assert!(fold_partition(&refs, 1, 0).is_err());
    }
}
