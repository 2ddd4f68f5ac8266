use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::DType;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Method, RunConfig, Stage};
use super::report::write_report;
use crate::augmentation::{build_augmentation_cache, AugmentationCache, ClassicTransformSpec};
use crate::conditioning::{edges_from_mask, encode_prompt, Vocabulary};
use crate::datagen::{ingest_external, synth_corpus, synth_seg_task, Dataset, SampleRecord, Split};
use crate::denoiser::{
    generate, load_checkpoint, save_checkpoint, train_diffusion, Checkpoint, GenerationCondition, TrainStart,
    TrainingStage,
};
use crate::error::{Error, Result};
use crate::imageio;
use crate::metrics::{generation_row, segmentation_row, MetricSet, MetricsReport};
use crate::rng::{derive_seed, seeded};
use crate::segmentation::{threshold, train_folds, Augment, SegModel};

const MARKER: &str = "complete.json";
const CHECKPOINT: &str = "checkpoint.dbk";

#[derive(Debug, Serialize, Deserialize)]
struct Marker {
    stage: Stage,
    hash: String,
    seed: u64,
}

/// Artifact locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.as_str())
    }

    pub fn vocab(&self) -> PathBuf {
        self.stage_dir(Stage::Data).join("vocab.txt")
    }

    pub fn corpus(&self) -> PathBuf {
        self.stage_dir(Stage::Data).join("corpus")
    }

    pub fn task(&self) -> PathBuf {
        self.stage_dir(Stage::Data).join("task")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join(CHECKPOINT)
    }

    pub fn cache(&self) -> PathBuf {
        self.stage_dir(Stage::Generate).join("cache")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join(MARKER)
    }

    /// The file whose presence shows the stage produced its output.
    fn primary_output(&self, stage: Stage) -> PathBuf {
        let dir = self.stage_dir(stage);
        match stage {
            Stage::Data => self.task().join("manifest.json"),
            Stage::Pretrain | Stage::Finetune => dir.join(CHECKPOINT),
            Stage::Generate => self.cache().join("manifest.json"),
            Stage::EvalGen => dir.join("generation.csv"),
            Stage::TrainSeg => dir.join("runs.json"),
            Stage::EvalSeg => dir.join("methods.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn stage_inputs(config: &RunConfig, stage: Stage) -> Result<serde_json::Value> {
    use serde_json::to_value as v;
    Ok(match stage {
        Stage::Data => serde_json::json!({ "data": v(&config.data)? }),
        Stage::Pretrain => serde_json::json!({
            "schedule": v(config.schedule)?,
            "denoiser": v(&config.denoiser)?,
            "pretrain": v(&config.pretrain)?,
        }),
        Stage::Finetune => serde_json::json!({ "finetune": v(&config.finetune)? }),
        Stage::Generate => serde_json::json!({ "cache": v(&config.cache)? }),
        Stage::EvalGen => serde_json::json!({ "metrics": v(&config.metrics)? }),
        Stage::TrainSeg => serde_json::json!({
            "segmentation": v(&config.segmentation)?,
            "classic": v(config.classic)?,
        }),
        Stage::EvalSeg => serde_json::json!({}),
    })
}

/// Hash of everything that determines a stage's output: its own settings,
/// the seed and the hashes of the stages it reads from.
pub fn stage_hash(config: &RunConfig, stage: Stage) -> Result<String> {
    let upstream = config
        .dependencies(stage)
        .into_iter()
        .map(|d| stage_hash(config, d))
        .collect::<Result<Vec<_>>>()?;
    let doc = serde_json::json!({
        "stage": stage,
        "seed": config.seed,
        "inputs": stage_inputs(config, stage)?,
        "upstream": upstream,
    });
    Ok(sha256_hex(doc.to_string().as_bytes()))
}

/// True when the stage's marker matches `config` and its output exists.
pub fn is_complete(layout: &RunLayout, config: &RunConfig, stage: Stage) -> Result<bool> {
    let path = layout.marker(stage);
    if !path.exists() || !layout.primary_output(stage).exists() {
        return Ok(false);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let Ok(marker) = serde_json::from_str::<Marker>(&text) else {
        return Ok(false);
    };
    Ok(marker.hash == stage_hash(config, stage)?)
}

fn downstream_of(config: &RunConfig, stage: Stage) -> Vec<Stage> {
    let mut hit = BTreeSet::from([stage]);
    for s in Stage::ALL {
        if config.dependencies(s).iter().any(|d| hit.contains(d)) {
            hit.insert(s);
        }
    }
    hit.remove(&stage);
    hit.into_iter().collect()
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs one stage after checking its upstream artifacts, then records
/// completion and invalidates every stage that read the old output.
pub fn run_stage(config: &RunConfig, stage: Stage) -> Result<()> {
    let layout = RunLayout::new(&config.run_dir);
    for dep in config.dependencies(stage) {
        if !is_complete(&layout, config, dep)? {
            return Err(Error::Dependency { stage: dep.to_string() });
        }
    }
    log::info!("stage {stage}: running");
    let dir = layout.stage_dir(stage);
    fresh_dir(&dir)?;
    match stage {
        Stage::Data => stage_data(config, &layout)?,
        Stage::Pretrain => stage_pretrain(config, &layout)?,
        Stage::Finetune => stage_finetune(config, &layout)?,
        Stage::Generate => stage_generate(config, &layout)?,
        Stage::EvalGen => stage_eval_gen(config, &layout)?,
        Stage::TrainSeg => stage_train_seg(config, &layout)?,
        Stage::EvalSeg => stage_eval_seg(config, &layout)?,
    }
    for d in downstream_of(config, stage) {
        let m = layout.marker(d);
        if m.exists() {
            std::fs::remove_file(&m).map_err(|e| Error::io(&m, e))?;
        }
    }
    write_json(
        &layout.marker(stage),
        &Marker {
            stage,
            hash: stage_hash(config, stage)?,
            seed: config.seed,
        },
    )
}

/// Executes the selected stages in order. With `resume`, stages whose
/// outputs match the configuration are skipped. Missing data is always
/// prepared first; any other missing upstream stage is an error. A report
/// is written when an evaluation stage ran.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let layout = RunLayout::new(&config.run_dir);
    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    config.save(&layout.root.join("config.toml"))?;
    let mut stages = config.selected_stages();
    if !stages.contains(&Stage::Data) && !is_complete(&layout, config, Stage::Data)? {
        stages.insert(0, Stage::Data);
    }
    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    for &stage in &stages {
        if config.resume && is_complete(&layout, config, stage)? {
            log::info!("stage {stage}: up to date");
            skipped.push(stage);
            continue;
        }
        run_stage(config, stage)?;
        executed.push(stage);
    }
    if stages.iter().any(|s| matches!(s, Stage::EvalGen | Stage::EvalSeg)) {
        write_report(&layout.root)?;
    }
    Ok(PipelineOutcome {
        run_dir: layout.root,
        executed,
        skipped,
    })
}

pub(crate) fn load_vocab(layout: &RunLayout) -> Result<Vocabulary> {
    Vocabulary::load(&layout.vocab())
}

pub(crate) fn load_task(layout: &RunLayout) -> Result<Dataset> {
    Dataset::load(&layout.task())
}

pub(crate) fn load_stage_checkpoint(layout: &RunLayout, stage: Stage) -> Result<Checkpoint> {
    load_checkpoint(&layout.checkpoint(stage), &load_vocab(layout)?)
}

fn heldout_ids(records: &[SampleRecord], count: usize) -> BTreeSet<String> {
    let groups: BTreeSet<&str> = records.iter().map(|r| r.group_key()).collect();
    let mut held = BTreeSet::new();
    let mut cases = 0;
    for g in groups.into_iter().rev() {
        if cases >= count {
            break;
        }
        held.insert(g.to_string());
        cases += records.iter().filter(|r| r.group_key() == g).count();
    }
    held
}

fn build_task(config: &RunConfig, vocab: &Vocabulary) -> Result<Dataset> {
    let seed = config.seed;
    if let Some(ext) = &config.data.external {
        let mut data = ingest_external(&ext.root, &ext.layout)?;
        let held = heldout_ids(&data.records, config.data.heldout);
        let records: Vec<SampleRecord> = data
            .records
            .drain(..)
            .map(|mut r| {
                r.split = if held.contains(r.group_key()) { Split::Test } else { Split::Train };
                r
            })
            .collect();
        return Dataset::new(
            &data.manifest.name,
            Some(seed),
            data.manifest.settings.clone(),
            records,
            data.manifest.warnings.clone(),
        );
    }
    let spec = &config.data.task;
    let mut records = synth_seg_task(spec, vocab, derive_seed(seed, "task", 0))?.records;
    if config.data.heldout > 0 {
        let held_spec = crate::datagen::SegTaskSpec {
            count: config.data.heldout,
            ..spec.clone()
        };
        let held = synth_seg_task(&held_spec, vocab, derive_seed(seed, "heldout", 0))?;
        records.extend(held.records.into_iter().enumerate().map(|(i, mut r)| {
            r.case_id = format!("heldout-{i:04}");
            r.split = Split::Test;
            r
        }));
    }
    Dataset::new("synthetic-task", Some(seed), serde_json::to_value(&config.data)?, records, vec![])
}

fn stage_data(config: &RunConfig, layout: &RunLayout) -> Result<()> {
    let vocab = Vocabulary::default();
    vocab.save(&layout.vocab())?;
    synth_corpus(&config.data.corpus, &vocab, derive_seed(config.seed, "corpus", 0))?.save(&layout.corpus())?;
    let task = build_task(config, &vocab)?;
    if task.split(Split::Train).is_empty() {
        return Err(Error::Validation("segmentation task has no training cases".into()));
    }
    task.save(&layout.task())
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn owned(records: Vec<&SampleRecord>) -> Vec<SampleRecord> {
    records.into_iter().cloned().collect()
}

fn stage_pretrain(config: &RunConfig, layout: &RunLayout) -> Result<()> {
    let vocab = load_vocab(layout)?;
    let corpus = Dataset::load(&layout.corpus())?;
    let train = owned(corpus.split(Split::Train));
    let cfg = config.pretrain.train_config(&config.denoiser, config.schedule);
    let out = train_diffusion(
        &train,
        &cfg,
        TrainingStage::Pretrained,
        TrainStart::Fresh(&vocab),
        derive_seed(config.seed, "pretrain", 0),
    )?;
    write_losses(&layout.stage_dir(Stage::Pretrain).join("losses.csv"), &out.losses)?;
    save_checkpoint(&out.checkpoint, &layout.checkpoint(Stage::Pretrain))
}

fn stage_finetune(config: &RunConfig, layout: &RunLayout) -> Result<()> {
    let base = load_stage_checkpoint(layout, Stage::Pretrain)?;
    let task = load_task(layout)?;
    let train = owned(task.split(Split::Train));
    let cfg = config.finetune.train_config(&base.config, base.schedule);
    let out = train_diffusion(
        &train,
        &cfg,
        TrainingStage::Finetuned,
        TrainStart::From(&base),
        derive_seed(config.seed, "finetune", 0),
    )?;
    write_losses(&layout.stage_dir(Stage::Finetune).join("losses.csv"), &out.losses)?;
    save_checkpoint(&out.checkpoint, &layout.checkpoint(Stage::Finetune))
}

fn stage_generate(config: &RunConfig, layout: &RunLayout) -> Result<()> {
    let ckpt = load_stage_checkpoint(layout, Stage::Finetune)?;
    let task = load_task(layout)?;
    let cache = build_augmentation_cache(
        &task.split(Split::Train),
        &ckpt,
        &config.cache,
        derive_seed(config.seed, "cache", 0),
    )?;
    cache.save(&layout.cache())
}

/// Generates one sample per record, conditioned on its mask boundary and
/// prompt.
pub fn generate_for(ckpt: &Checkpoint, records: &[&SampleRecord], seed: u64, batch_size: usize) -> Result<Vec<Array2<f64>>> {
    let model = ckpt.instantiate(DType::F32)?;
    let table = model.embedding_table()?;
    let mut conditions = Vec::with_capacity(records.len());
    for r in records {
        conditions.push(GenerationCondition {
            text: encode_prompt(&r.triplet, &table)?,
            edge: edges_from_mask(r.mask_or_err()?),
        });
    }
    let seeds: Vec<u64> = (0..records.len())
        .map(|k| derive_seed(seed, "sample", k as u64))
        .collect();
    generate(&model, &ckpt.schedule()?, &conditions, &seeds, batch_size)
}

/// Generation pairing used for the unpaired reference scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    /// Sample `k` is compared with held-out case `(k + shift) % n`.
    pub shift: usize,
}

fn stage_eval_gen(config: &RunConfig, layout: &RunLayout) -> Result<()> {
    let ckpt = load_stage_checkpoint(layout, Stage::Finetune)?;
    let task = load_task(layout)?;
    let held = task.split(Split::Test);
    if held.len() < 2 {
        return Err(Error::Validation(format!(
            "generation scoring needs at least 2 held-out cases, found {}",
            held.len()
        )));
    }
    let dir = layout.stage_dir(Stage::EvalGen);
    let samples = generate_for(&ckpt, &held, derive_seed(config.seed, "eval-gen", 0), config.metrics.batch_size)?;
    for (r, s) in held.iter().zip(&samples) {
        imageio::write_gray(&dir.join("samples").join(format!("{}.png", r.case_id)), s)?;
    }
    let n = held.len();
    let shift = 1 + seeded(derive_seed(config.seed, "eval-gen-pairing", 0)).random_range(0..n - 1);
    let mut matched = Vec::with_capacity(n);
    let mut unpaired = Vec::with_capacity(n);
    for (k, s) in samples.iter().enumerate() {
        matched.push(generation_row(&held[k].case_id, s, &held[k].image)?);
        let other = held[(k + shift) % n];
        unpaired.push(generation_row(&format!("{}~{}", held[k].case_id, other.case_id), s, &other.image)?);
    }
    MetricsReport::from_rows(MetricSet::Generation, None, matched)?.save(&dir, "generation")?;
    MetricsReport::from_rows(MetricSet::Generation, None, unpaired)?.save(&dir, "unpaired")?;
    write_json(&dir.join("pairing.json"), &Pairing { shift })
}

/// One trained segmentation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegRun {
    pub method: Method,
    pub repeat: usize,
    pub seed: u64,
    pub fold: usize,
    /// Relative to the train-seg directory.
    pub model: PathBuf,
    pub val_ids: Vec<String>,
}

/// Seed of segmentation repetition `repeat`; every method shares it.
pub fn repeat_seed(master: u64, repeat: usize) -> u64 {
    derive_seed(master, "seg-seed", repeat as u64)
}

pub(crate) fn augment_for<'a>(method: Method, cache: Option<&'a AugmentationCache>, config: &RunConfig) -> Result<Augment<'a>> {
    Ok(match method {
        Method::Baseline => Augment::none(),
        Method::DiffBoost => Augment::diffboost(
            cache.ok_or_else(|| Error::Dependency {
                stage: Stage::Generate.to_string(),
            })?,
        ),
        Method::Classic(kind) => Augment::classic(ClassicTransformSpec {
            kind,
            ranges: config.classic,
        }),
    })
}

fn stage_train_seg(config: &RunConfig, layout: &RunLayout) -> Result<()> {
    let task = load_task(layout)?;
    let train = task.split(Split::Train);
    let cache = if config.uses_cache() {
        Some(AugmentationCache::load(&layout.cache())?)
    } else {
        None
    };
    let dir = layout.stage_dir(Stage::TrainSeg);
    let seg = &config.segmentation;
    let mut runs = Vec::new();
    for &method in &seg.methods {
        let augment = augment_for(method, cache.as_ref(), config)?;
        for repeat in 0..seg.seeds {
            let seed = repeat_seed(config.seed, repeat);
            let folds = train_folds(&train, augment, &seg.backbone, &seg.train, seed)?;
            for (fold, t) in folds.into_iter().enumerate() {
                let rel = PathBuf::from(method.as_str()).join(format!("seed-{repeat}")).join(format!("fold-{fold}.seg"));
                let val_ids: Vec<String> = t.val.iter().map(|&i| train[i].case_id.clone()).collect();
                let path = dir.join(&rel);
                std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
                t.outcome.model.save(
                    &path,
                    serde_json::json!({ "method": method, "repeat": repeat, "fold": fold }),
                )?;
                write_losses(&path.with_extension("losses.csv"), &t.outcome.losses)?;
                runs.push(SegRun {
                    method,
                    repeat,
                    seed,
                    fold,
                    model: rel,
                    val_ids,
                });
            }
            log::info!("train-seg {method}: repeat {repeat} done");
        }
    }
    write_json(&dir.join("runs.json"), &runs)
}

/// Scores every trained model on its validation fold. Case ids are prefixed
/// with the repetition (`r<k>/`), so one table pools all repetitions.
pub(crate) fn score_runs(
    runs: &[SegRun],
    model_dir: &Path,
    records: &[&SampleRecord],
) -> Result<Vec<crate::metrics::CaseRow>> {
    let mut rows = Vec::new();
    for run in runs {
        let model = SegModel::load(&model_dir.join(&run.model), DType::F32)?;
        let val: Vec<&SampleRecord> = run
            .val_ids
            .iter()
            .map(|id| {
                records
                    .iter()
                    .copied()
                    .find(|r| &r.case_id == id)
                    .ok_or_else(|| Error::Validation(format!("validation case {id} is not in the task")))
            })
            .collect::<Result<_>>()?;
        for chunk in val.chunks(32) {
            let probs = model.probabilities(&chunk.iter().map(|r| &r.image).collect::<Vec<_>>())?;
            for (r, p) in chunk.iter().zip(&probs) {
                rows.push(segmentation_row(
                    &format!("r{}/{}", run.repeat, r.case_id),
                    &threshold(p),
                    r.mask_or_err()?,
                    r.spacing,
                )?);
            }
        }
    }
    Ok(rows)
}

pub(crate) fn uniform_spacing(records: &[&SampleRecord]) -> Option<(f64, f64)> {
    let first = records.first().map(|r| r.spacing)?;
    records.iter().all(|r| r.spacing == first).then_some(first)
}

fn stage_eval_seg(config: &RunConfig, layout: &RunLayout) -> Result<()> {
    let task = load_task(layout)?;
    let train = task.split(Split::Train);
    let model_dir = layout.stage_dir(Stage::TrainSeg);
    let runs: Vec<SegRun> = read_json(&model_dir.join("runs.json"))?;
    let dir = layout.stage_dir(Stage::EvalSeg);
    let mut methods = Vec::new();
    for &method in &config.segmentation.methods {
        let mine: Vec<SegRun> = runs.iter().filter(|r| r.method == method).cloned().collect();
        let rows = score_runs(&mine, &model_dir, &train)?;
        MetricsReport::from_rows(MetricSet::Segmentation, uniform_spacing(&train), rows)?.save(&dir, method.as_str())?;
        methods.push(method);
    }
    write_json(&dir.join("methods.json"), &methods)
}

pub(crate) fn read_methods(dir: &Path) -> Result<Vec<Method>> {
    read_json(&dir.join("methods.json"))
}

pub(crate) fn read_pairing(dir: &Path) -> Result<Pairing> {
    read_json(&dir.join("pairing.json"))
}
