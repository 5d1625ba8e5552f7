//! K-fold cross-validation training and checkpoint evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::CodecSpec;
use crate::dataset::{fold_split, make_folds, Access, ClipStore, FoldPlan, Manifest};
use crate::error::{Error, Result};
use crate::model::{ArchDescriptor, Checkpoint, ModelParams, INPUT_LEN, INPUT_RATE, NUM_CLASSES};
use crate::seed::derive;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Mode};

/// Clips per forward pass during evaluation.
const EVAL_BATCH: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub input_rate: u32,
    pub input_len: usize,
    pub k: usize,
    pub seed: u64,
    pub use_augmented_train: bool,
    /// Codec variants present in the manifest; filled in by
    /// [`cross_validate`] for provenance.
    #[serde(default)]
    pub codec_variants: Vec<CodecSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 5,
            lr: 0.0005,
            weight_decay: 0.0001,
            input_rate: INPUT_RATE,
            input_len: INPUT_LEN,
            k: 10,
            seed: 0,
            use_augmented_train: true,
            codec_variants: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if self.input_rate == 0 || self.input_len == 0 {
            return bad("input rate and length must be positive");
        }
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        self.arch().validate()
    }

    pub fn arch(&self) -> ArchDescriptor {
        ArchDescriptor {
            input_len: self.input_len,
            ..ArchDescriptor::m5(NUM_CLASSES)
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Classification error rate in percent.
pub fn cer(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "cer: {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("cer of an empty set".into()));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; NUM_CLASSES]; NUM_CLASSES]);

impl Confusion {
    pub fn from_pairs(predictions: &[usize], labels: &[usize]) -> Self {
        let mut m = [[0; NUM_CLASSES]; NUM_CLASSES];
        for (&p, &l) in predictions.iter().zip(labels) {
            m[l][p] += 1;
        }
        Confusion(m)
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.0[i][i]).sum()
    }

    pub fn row_sums(&self) -> [u64; NUM_CLASSES] {
        self.0.map(|row| row.iter().sum())
    }

    /// Error rate in percent, or `None` when empty.
    pub fn cer(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| 100.0 * (total - self.trace()) as f64 / total as f64)
    }
}

/// CER and confusion matrix over one set of clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetEval {
    pub count: usize,
    pub cer: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_count: usize,
    pub cer_original: f64,
    pub confusion_original: Confusion,
    /// `None` when the manifest has no codec copies.
    pub cer_codec: Option<f64>,
    pub confusion_codec: Option<Confusion>,
    /// Codec CER per variant tag, e.g. `builtin_mdct4500`.
    pub cer_codec_by_variant: BTreeMap<String, f64>,
    /// Mean training loss per epoch.
    pub train_loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub config: TrainConfig,
    pub folds: Vec<FoldResult>,
    /// Sum of the fold values divided by k, in f64.
    pub mean_cer_original: f64,
    /// Sample standard deviation (divisor k - 1).
    pub std_cer_original: f64,
    pub mean_cer_codec: Option<f64>,
    pub std_cer_codec: Option<f64>,
    pub mean_cer_codec_by_variant: BTreeMap<String, f64>,
}

impl CVReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Eval-mode predictions for `ids`, in order.
pub fn predict_ids(params: &ModelParams<f32>, store: &ClipStore<'_>, ids: &[String]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_BATCH) {
        let batch = store.batch(chunk, Access::Eval)?;
        out.extend(params.predict(&batch.inputs)?);
    }
    Ok(out)
}

fn evaluate(params: &ModelParams<f32>, store: &ClipStore<'_>, ids: &[String]) -> Result<Option<SubsetEval>> {
    if ids.is_empty() {
        return Ok(None);
    }
    let predictions = predict_ids(params, store, ids)?;
    let labels = labels_of(store.manifest(), ids)?;
    let confusion = Confusion::from_pairs(&predictions, &labels);
    Ok(Some(SubsetEval {
        count: ids.len(),
        cer: cer(&predictions, &labels)?,
        confusion,
    }))
}

fn labels_of(manifest: &Manifest, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            manifest
                .get(id)
                .map(|e| e.label.index())
                .ok_or_else(|| Error::Dataset(format!("id {id} is not in the manifest")))
        })
        .collect()
}

/// A trained model together with its fold metrics.
pub struct TrainedFold {
    pub result: FoldResult,
    pub params: ModelParams<f32>,
    pub optimizer: AdamState<f32>,
}

/// Trains a fresh model on the training part of `fold` and evaluates it on
/// the held-out originals and, separately, their codec copies.
///
/// Everything random (initialisation, batch order) derives from
/// `config.seed` and the fold index. The last short batch of an epoch is
/// kept. Batch-norm running statistics at the end of training are used
/// for evaluation as they are.
pub fn train_fold(store: &ClipStore<'_>, plan: &FoldPlan, fold: usize, config: &TrainConfig) -> Result<TrainedFold> {
    config.validate()?;
    let manifest = store.manifest();
    let split = fold_split(manifest, plan, fold, config.use_augmented_train)?;
    if split.train.is_empty() {
        return Err(Error::Dataset(format!("fold {fold} has no training clips")));
    }
    if split.test_original.is_empty() {
        return Err(Error::Dataset(format!("fold {fold} has no test clips")));
    }

    let mut params = ModelParams::<f32>::new(config.arch(), derive(config.seed, &format!("fold{fold}/init")))?;
    let mut optimizer = AdamState::new(config.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(derive(config.seed, &format!("fold{fold}/shuffle")));
    let mut order = split.train.clone();
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for ids in order.chunks(config.batch_size) {
            let batch = store.batch(ids, Access::Train)?;
            let loss = train_step(&mut params, &mut optimizer, &batch.inputs, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += loss * ids.len() as f64;
        }
        let mean = total / order.len() as f64;
        log::debug!("fold {fold} epoch {epoch}: loss {mean:.4}");
        curve.push(mean);
    }

    let original = evaluate(&params, store, &split.test_original)?.expect("non-empty test set");
    let codec = evaluate(&params, store, &split.test_codec)?;
    let mut by_variant: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for id in &split.test_codec {
        let e = manifest.get(id).expect("split ids come from the manifest");
        if let (Some(format), Some(bps)) = (e.codec_format, e.bitrate_bps) {
            by_variant
                .entry(
                    CodecSpec {
                        format,
                        bitrate_bps: bps,
                    }
                    .tag(),
                )
                .or_default()
                .push(id.clone());
        }
    }
    let mut cer_codec_by_variant = BTreeMap::new();
    for (tag, ids) in by_variant {
        // the whole codec subset was just predicted, so this hits the cache
        if let Some(eval) = evaluate(&params, store, &ids)? {
            cer_codec_by_variant.insert(tag, eval.cer);
        }
    }

    Ok(TrainedFold {
        result: FoldResult {
            fold,
            train_count: split.train.len(),
            cer_original: original.cer,
            confusion_original: original.confusion,
            cer_codec: codec.as_ref().map(|c| c.cer),
            confusion_codec: codec.map(|c| c.confusion),
            cer_codec_by_variant,
            train_loss_curve: curve,
        },
        params,
        optimizer,
    })
}

/// One forward/backward pass and Adam update; returns the batch loss.
pub fn train_step(
    params: &mut ModelParams<f32>,
    optimizer: &mut AdamState<f32>,
    inputs: &crate::tensor::Tensor<f32>,
    labels: &[usize],
) -> Result<f64> {
    let mut graph = Graph::new();
    let x = graph.leaf(inputs.clone());
    let (logits, vars) = params.forward(&mut graph, x, Mode::Train)?;
    let loss = graph.softmax_cross_entropy(logits, labels)?;
    let value = graph.value(loss)[0] as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    graph.backward(loss)?;
    params.zero_grad();
    params.collect_grads(&graph, &vars);
    adam_step(&mut params.parameters_mut(), optimizer)?;
    Ok(value)
}

/// Mean eval-mode cross-entropy of `params` over `ids`.
pub fn mean_loss(params: &ModelParams<f32>, store: &ClipStore<'_>, ids: &[String]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in ids.chunks(EVAL_BATCH) {
        let batch = store.batch(chunk, Access::Eval)?;
        let logits = params.logits(&batch.inputs)?;
        let mut graph = Graph::new();
        let z = graph.leaf(logits);
        let loss = graph.softmax_cross_entropy(z, &batch.labels)?;
        total += graph.value(loss)[0] as f64 * chunk.len() as f64;
    }
    Ok(total / ids.len() as f64)
}

/// Where and how to run a cross-validation.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Folds trained concurrently; 0 means one per available core.
    pub jobs: usize,
    /// When set, each fold's checkpoint is written to
    /// `<dir>/<run id>/fold<i>.json`.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Stable identifier of a configuration, used to name checkpoint folders.
pub fn run_id(config: &TrainConfig) -> Result<String> {
    let json = serde_json::to_string(config)?;
    Ok(format!("run-{:016x}", derive(config.seed, &json)))
}

/// Trains and evaluates every fold and aggregates the results.
///
/// Folds run in parallel on `options.jobs` threads but are individually
/// sequential, so the report does not depend on the thread count.
pub fn cross_validate(manifest: &Manifest, config: &TrainConfig, options: &RunOptions) -> Result<CVReport> {
    config.validate()?;
    let plan = make_folds(manifest, config.k, config.seed)?;
    let mut config = config.clone();
    let mut variants: Vec<CodecSpec> = manifest
        .codec_entries()
        .filter_map(|e| {
            Some(CodecSpec {
                format: e.codec_format?,
                bitrate_bps: e.bitrate_bps?,
            })
        })
        .collect();
    variants.sort_by_key(|s| (s.format.name(), s.bitrate_bps));
    variants.dedup();
    config.codec_variants = variants;

    let checkpoint_dir = match &options.checkpoint_dir {
        Some(dir) => {
            let dir = dir.join(run_id(&config)?);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            Some(dir)
        }
        None => None,
    };
    let store = ClipStore::new(manifest, config.input_rate, config.input_len);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {} worker(s): {e}", options.jobs)))?;
    let folds: Vec<FoldResult> = pool.install(|| {
        (0..config.k)
            .into_par_iter()
            .map(|fold| {
                let wrap = |source: Error| Error::Fold {
                    fold,
                    source: Box::new(source),
                };
                let trained = train_fold(&store, &plan, fold, &config).map_err(wrap)?;
                log::info!(
                    "fold {fold}: original CER {:.2}%{}",
                    trained.result.cer_original,
                    trained
                        .result
                        .cer_codec
                        .map(|c| format!(", codec CER {c:.2}%"))
                        .unwrap_or_default()
                );
                if let Some(dir) = &checkpoint_dir {
                    Checkpoint::capture(&trained.params, Some(&trained.optimizer))
                        .save(dir.join(format!("fold{fold}.json")))
                        .map_err(wrap)?;
                }
                Ok(trained.result)
            })
            .collect::<Result<_>>()
    })?;
    Ok(aggregate(config, folds))
}

/// Builds a report from per-fold results.
pub fn aggregate(config: TrainConfig, folds: Vec<FoldResult>) -> CVReport {
    let original: Vec<f64> = folds.iter().map(|f| f.cer_original).collect();
    let (mean_cer_original, std_cer_original) = mean_std(&original);
    let codec: Option<Vec<f64>> = folds.iter().map(|f| f.cer_codec).collect();
    let (mean_cer_codec, std_cer_codec) = match codec.filter(|c| !c.is_empty()) {
        Some(c) => {
            let (m, s) = mean_std(&c);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    let mut per_variant: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in &folds {
        for (tag, v) in &f.cer_codec_by_variant {
            per_variant.entry(tag.clone()).or_default().push(*v);
        }
    }
    let mean_cer_codec_by_variant = per_variant.into_iter().map(|(t, v)| (t, mean_std(&v).0)).collect();
    CVReport {
        config,
        folds,
        mean_cer_original,
        std_cer_original,
        mean_cer_codec,
        std_cer_codec,
        mean_cer_codec_by_variant,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Original,
    Codec,
    Both,
}

/// Result for one subset; an absent subset is reported as such rather
/// than as a perfect score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SubsetOutcome {
    NotRequested,
    NoEntries,
    Evaluated(Box<SubsetEval>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub original: SubsetOutcome,
    pub codec: SubsetOutcome,
}

/// Eval-mode inference of a saved checkpoint over a manifest.
///
/// The checkpoint's architecture must equal `expected`.
pub fn evaluate_checkpoint(
    checkpoint: impl AsRef<Path>,
    manifest: &Manifest,
    subset: Subset,
    expected: &ArchDescriptor,
    input_rate: u32,
) -> Result<EvalReport> {
    let path = checkpoint.as_ref();
    let ckpt = Checkpoint::load(path)?;
    if &ckpt.arch != expected {
        return Err(Error::Checkpoint(format!(
            "{} was saved for architecture {:?}, expected {:?}",
            path.display(),
            ckpt.arch,
            expected
        )));
    }
    let params = ckpt.restore()?;
    let store = ClipStore::new(manifest, input_rate, expected.input_len);
    let run = |wanted: bool, ids: Vec<String>| -> Result<SubsetOutcome> {
        if !wanted {
            return Ok(SubsetOutcome::NotRequested);
        }
        Ok(match evaluate(&params, &store, &ids)? {
            Some(e) => SubsetOutcome::Evaluated(Box::new(e)),
            None => SubsetOutcome::NoEntries,
        })
    };
    let originals = manifest.originals().map(|e| e.id.clone()).collect();
    let codec = manifest.codec_entries().map(|e| e.id.clone()).collect();
    Ok(EvalReport {
        checkpoint: path.to_path_buf(),
        original: run(subset != Subset::Codec, originals)?,
        codec: run(subset != Subset::Original, codec)?,
    })
}
