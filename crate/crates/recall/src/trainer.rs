//! Experiment orchestration: the initial training step, incremental steps
//! with background inpainting + replay + interleaved sampling, the
//! fine-tuning / store-and-replay / joint baselines, the memory-accounting
//! ledger, and deterministic report emission.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::core::{
    derive_seed, mask_to, rng_from, ClassSet, CoreError, Dataset, LabelMap, Sample, BACKGROUND,
};
use crate::eval::{ConfusionMatrix, MemorySnapshot, StepReport};
use crate::protocol::{
    build_partition, make_schedule, ClassOrder, ProtocolError, Setup, TaskPartition, TaskSchedule,
};
use crate::replay::{
    build_replay_set, inpaint, FixtureFetcher, GeneratorSource, HelperDecoderBank, HttpFetcher,
    ReplayError, ReplaySet, RetrievalSource, SourceBlock,
};
use crate::segmodel::{
    decoder_blob_len, decoder_grad_from_features, encode, grow_decoder, model_blob_len,
    serialize_decoder, serialize_model, Decoder, Encoder, FeatureMap, Gradients, OptimizerState,
    SegError, SegModel, TrainableSet,
};
use crate::synthdata::{
    gen_dataset, generator_vocab, GenClassifier, SceneConfig, SynthError, DEFAULT_TEMPERATURE,
};

#[derive(Error, Debug)]
pub enum TrainerError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("empty sample pool: {0}")]
    EmptyPool(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ft,
    Joint,
    Snr,
    InpaintOnly,
    ReplayOnlyGen,
    ReplayOnlyRetrieval,
    RecallGen,
    RecallRetrieval,
}

impl Method {
    pub fn uses_inpaint(self) -> bool {
        matches!(self, Method::InpaintOnly | Method::RecallGen | Method::RecallRetrieval)
    }

    pub fn uses_replay(self) -> bool {
        matches!(
            self,
            Method::ReplayOnlyGen
                | Method::ReplayOnlyRetrieval
                | Method::RecallGen
                | Method::RecallRetrieval
        )
    }

    pub fn uses_generator(self) -> bool {
        matches!(self, Method::ReplayOnlyGen | Method::RecallGen)
    }

    pub fn uses_retrieval(self) -> bool {
        matches!(self, Method::ReplayOnlyRetrieval | Method::RecallRetrieval)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::Joint => "joint",
            Method::Snr => "snr",
            Method::InpaintOnly => "inpaint-only",
            Method::ReplayOnlyGen => "replay-only-gen",
            Method::ReplayOnlyRetrieval => "replay-only-retrieval",
            Method::RecallGen => "recall-gen",
            Method::RecallRetrieval => "recall-retrieval",
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 400,
            n_test: 200,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderSpec {
    Ascending,
    Seeded,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub step_sizes: Vec<usize>,
    pub order: OrderSpec,
    pub order_seed: u64,
    pub setup: Setup,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            step_sizes: vec![5, 1, 1, 1, 1, 1],
            order: OrderSpec::Ascending,
            order_seed: 0,
            setup: Setup::Disjoint,
        }
    }
}

impl ScheduleConfig {
    pub fn class_order(&self) -> ClassOrder {
        match self.order {
            OrderSpec::Ascending => ClassOrder::Ascending,
            OrderSpec::Seeded => ClassOrder::Seeded(self.order_seed),
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    /// Replay samples fetched per past class (N_r).
    pub n_replay_per_class: usize,
    /// Fixture directory for offline retrieval sources.
    pub fixture_dir: Option<String>,
    /// HTTP endpoint for online retrieval sources.
    pub source_url: Option<String>,
    /// Forbid HTTP sources; retrieval methods then require a fixture dir.
    pub offline: bool,
    pub http_timeout_ms: u64,
    pub http_retries: u32,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            n_replay_per_class: 16,
            fixture_dir: None,
            source_url: None,
            offline: false,
            http_timeout_ms: 5000,
            http_retries: 2,
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub r_new: u32,
    pub r_old: u32,
    pub steps_per_class_disjoint: usize,
    pub steps_per_class_overlapped: usize,
    pub lr0: f64,
    pub lr_end: f64,
    pub power: f64,
    pub momentum: f64,
    pub helper_lr0: f64,
    pub helper_lr_end: f64,
    pub helper_steps_per_class: usize,
    pub patch_size: usize,
    pub feature_dim: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 4,
            r_new: 1,
            r_old: 1,
            steps_per_class_disjoint: 1000,
            steps_per_class_overlapped: 1500,
            lr0: 5e-2,
            lr_end: 5e-4,
            power: 0.9,
            momentum: 0.9,
            helper_lr0: 2e-2,
            helper_lr_end: 2e-4,
            helper_steps_per_class: 1000,
            patch_size: 5,
            feature_dim: 32,
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub eval_shards: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            eval_shards: 1,
        }
    }
}

#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SnrConfig {
    /// Replace the helper-decoder-sized byte budget with a fixed one.
    pub budget_override_bytes: Option<u64>,
}

/// Everything one experiment needs, loadable from a single TOML file.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub replay: ReplayConfig,
    pub training: TrainingConfig,
    pub run: RunConfig,
    pub snr: SnrConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::RecallGen,
            scene: SceneConfig::default(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            replay: ReplayConfig::default(),
            training: TrainingConfig::default(),
            run: RunConfig::default(),
            snr: SnrConfig::default(),
        }
    }
}

/// Reduced step multipliers for CI and the acceptance suite.
pub const FAST_STEPS_DISJOINT: usize = 60;
pub const FAST_STEPS_OVERLAPPED: usize = 90;
pub const FAST_HELPER_STEPS: usize = 60;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainerError> {
        toml::from_str(text).map_err(|e| TrainerError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        self.scene.validate()?;
        let ratio = self.training.r_new + self.training.r_old;
        if ratio == 0 {
            return Err(TrainerError::Config("r_new + r_old must be positive".into()));
        }
        if self.training.batch_size == 0 || self.training.batch_size % ratio as usize != 0 {
            return Err(TrainerError::Config(format!(
                "r_new + r_old = {ratio} must divide batch_size = {}",
                self.training.batch_size
            )));
        }
        if self.training.patch_size % 2 == 0 {
            return Err(TrainerError::Config("patch_size must be odd".into()));
        }
        if self.scene.height < self.training.patch_size
            || self.scene.width < self.training.patch_size
        {
            return Err(TrainerError::Config("canvas smaller than the patch".into()));
        }
        if self.run.eval_shards == 0 {
            return Err(TrainerError::Config("eval_shards must be positive".into()));
        }
        let sum: usize = self.schedule.step_sizes.iter().sum();
        if sum != self.scene.num_classes {
            return Err(TrainerError::Config(format!(
                "schedule covers {sum} classes but the scene has {}",
                self.scene.num_classes
            )));
        }
        Ok(())
    }

    /// Shrink training step multipliers for quick runs.
    pub fn apply_fast(&mut self) {
        self.training.steps_per_class_disjoint = FAST_STEPS_DISJOINT;
        self.training.steps_per_class_overlapped = FAST_STEPS_OVERLAPPED;
        self.training.helper_steps_per_class = FAST_HELPER_STEPS;
    }

    pub fn steps_per_class(&self) -> usize {
        match self.schedule.setup {
            Setup::Disjoint => self.training.steps_per_class_disjoint,
            Setup::Overlapped => self.training.steps_per_class_overlapped,
        }
    }

    /// The effective schedule: joint training collapses to a single step over
    /// every class.
    pub fn make_schedule(&self) -> Result<TaskSchedule, TrainerError> {
        let sizes: Vec<usize> = if self.method == Method::Joint {
            vec![self.scene.num_classes]
        } else {
            self.schedule.step_sizes.clone()
        };
        Ok(make_schedule(
            self.scene.num_classes,
            &sizes,
            self.schedule.class_order(),
            self.schedule.setup,
        )?)
    }
}

/// Stable hex digest of the canonical TOML form, for run directory naming.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    hex::encode(&digest[..6])
}

pub fn run_dir_name(cfg: &ExperimentConfig) -> String {
    format!("{}-s{}", config_hash(cfg), cfg.run.seed)
}

// ---------------------------------------------------------------------------
// Interleaved batch stream
// ---------------------------------------------------------------------------

/// Index composition of one training batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub new_indices: Vec<usize>,
    pub replay_indices: Vec<usize>,
}

struct PoolCycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl PoolCycler {
    fn new(len: usize, seed: u64) -> Self {
        let mut cycler = PoolCycler {
            order: (0..len).collect(),
            pos: 0,
            rng: rng_from(seed),
        };
        cycler.reshuffle();
        cycler
    }

    fn reshuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.reshuffle();
        }
        let v = self.order[self.pos];
        self.pos += 1;
        v
    }
}

/// Deterministic infinite stream of batches with an exact per-batch
/// composition of `batch_size * r_new / (r_new + r_old)` new samples and the
/// complement of replay samples. Each pool cycles through an independent
/// seeded shuffle and reshuffles on exhaustion.
pub struct InterleavedBatches {
    n_new: usize,
    n_old: usize,
    new_pool: PoolCycler,
    old_pool: Option<PoolCycler>,
}

pub fn interleaved_batches(
    new_len: usize,
    replay_len: usize,
    r_new: u32,
    r_old: u32,
    batch_size: usize,
    seed: u64,
) -> Result<InterleavedBatches, TrainerError> {
    let ratio = (r_new + r_old) as usize;
    if ratio == 0 || batch_size == 0 || batch_size % ratio != 0 {
        return Err(TrainerError::Config(format!(
            "ratio {r_new}:{r_old} does not divide batch size {batch_size}"
        )));
    }
    let n_new = batch_size * r_new as usize / ratio;
    let n_old = batch_size * r_old as usize / ratio;
    if n_new > 0 && new_len == 0 {
        return Err(TrainerError::EmptyPool("new-data pool is empty".into()));
    }
    if n_old > 0 && replay_len == 0 {
        return Err(TrainerError::EmptyPool("replay pool is empty".into()));
    }
    Ok(InterleavedBatches {
        n_new,
        n_old,
        new_pool: PoolCycler::new(new_len, derive_seed(seed, 0x4e45_u64, 0)),
        old_pool: if n_old > 0 {
            Some(PoolCycler::new(replay_len, derive_seed(seed, 0x4f4c_u64, 0)))
        } else {
            None
        },
    })
}

impl Iterator for InterleavedBatches {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let new_indices = (0..self.n_new).map(|_| self.new_pool.next()).collect();
        let replay_indices = match self.old_pool.as_mut() {
            Some(pool) => (0..self.n_old).map(|_| pool.next()).collect(),
            None => Vec::new(),
        };
        Some(Batch {
            new_indices,
            replay_indices,
        })
    }
}

// ---------------------------------------------------------------------------
// Training phases
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct OptimizerParams {
    lr0: f64,
    lr_end: f64,
    power: f64,
    momentum: f64,
}

impl ExperimentConfig {
    fn main_opt(&self) -> OptimizerParams {
        OptimizerParams {
            lr0: self.training.lr0,
            lr_end: self.training.lr_end,
            power: self.training.power,
            momentum: self.training.momentum,
        }
    }

    fn helper_opt(&self) -> OptimizerParams {
        OptimizerParams {
            lr0: self.training.helper_lr0,
            lr_end: self.training.helper_lr_end,
            power: self.training.power,
            momentum: self.training.momentum,
        }
    }
}

fn encode_all(enc: &Encoder, samples: &[Sample]) -> Vec<FeatureMap> {
    samples
        .par_iter()
        .map(|s| encode(enc, &s.image))
        .collect()
}

/// Train every weight of the model on uniformly shuffled batches.
fn train_all_weights(
    mut model: SegModel,
    data: &Dataset,
    steps: usize,
    batch_size: usize,
    opt: OptimizerParams,
    seed: u64,
) -> Result<SegModel, TrainerError> {
    if data.is_empty() {
        return Err(TrainerError::EmptyPool("initial training set".into()));
    }
    let mut stream = interleaved_batches(data.len(), 0, 1, 0, batch_size, seed)?;
    let mut state = OptimizerState::new(
        opt.lr0,
        opt.lr_end,
        opt.power,
        opt.momentum,
        steps,
        Some(model.encoder.num_params()),
        model.decoder.num_params(),
    );
    for _ in 0..steps {
        let batch = stream.next().expect("infinite stream");
        let samples: Vec<&Sample> = batch
            .new_indices
            .iter()
            .map(|i| &data.samples[*i])
            .collect();
        let grads = crate::segmodel::grad(&model, &samples, TrainableSet::All)?;
        crate::segmodel::sgd_step(&mut model, &grads, &mut state)?;
    }
    Ok(model)
}

/// Train a decoder against frozen features with interleaved new/replay
/// batches. Batch gradients are accumulated new-pool first, then replay, in
/// emitted index order, so results are bit-deterministic.
#[allow(clippy::too_many_arguments)]
fn train_decoder_interleaved(
    encoder: &Encoder,
    decoder: Decoder,
    new_pool: (&[FeatureMap], &[&LabelMap]),
    old_pool: (&[FeatureMap], &[&LabelMap]),
    steps: usize,
    batch_size: usize,
    r_new: u32,
    r_old: u32,
    opt: OptimizerParams,
    seed: u64,
) -> Result<Decoder, TrainerError> {
    let mut stream = interleaved_batches(
        new_pool.0.len(),
        old_pool.0.len(),
        r_new,
        r_old,
        batch_size,
        seed,
    )?;
    let mut model = SegModel {
        encoder: encoder.clone(),
        decoder,
    };
    let mut state = OptimizerState::new(
        opt.lr0,
        opt.lr_end,
        opt.power,
        opt.momentum,
        steps,
        None,
        model.decoder.num_params(),
    );
    for _ in 0..steps {
        let batch = stream.next().expect("infinite stream");
        let mut items: Vec<(&FeatureMap, &LabelMap)> =
            Vec::with_capacity(batch.new_indices.len() + batch.replay_indices.len());
        for i in &batch.new_indices {
            items.push((&new_pool.0[*i], new_pool.1[*i]));
        }
        for i in &batch.replay_indices {
            items.push((&old_pool.0[*i], old_pool.1[*i]));
        }
        let dec_grad = decoder_grad_from_features(&model.decoder, &items)?;
        let grads = Gradients {
            encoder: None,
            decoder: dec_grad,
        };
        crate::segmodel::sgd_step(&mut model, &grads, &mut state)?;
    }
    Ok(model.decoder)
}

/// Train one helper decoder (step classes plus background) over the original
/// step data against the frozen encoder.
fn train_helper_decoder(
    encoder: &Encoder,
    step_classes: &ClassSet,
    features: &[FeatureMap],
    labels: &[&LabelMap],
    cfg: &ExperimentConfig,
    steps: usize,
    seed: u64,
) -> Result<Decoder, TrainerError> {
    let helper = Decoder::new_zero(step_classes.with(BACKGROUND), cfg.training.feature_dim);
    train_decoder_interleaved(
        encoder,
        helper,
        (features, labels),
        (&[], &[]),
        steps,
        cfg.training.batch_size,
        1,
        0,
        cfg.helper_opt(),
        seed,
    )
}

// ---------------------------------------------------------------------------
// Memory accounting
// ---------------------------------------------------------------------------

/// Raw bytes one stored sample costs: RGB8 image plus one label byte per pixel.
pub fn sample_bytes(canvas: (usize, usize)) -> u64 {
    (canvas.0 * canvas.1 * 4) as u64
}

/// Inputs of the closed-form footprint ledger at one step.
#[derive(Clone, Debug)]
pub struct FootprintContext {
    pub patch_size: usize,
    pub feature_dim: usize,
    pub canvas: (usize, usize),
    pub vocab_len: usize,
    /// |C_{0->k}| for the reporting step.
    pub covered_classes: usize,
    /// Class-list sizes (including background) of every stored helper decoder.
    pub helper_class_counts: Vec<usize>,
    /// Bytes of raw samples the store-and-replay baseline holds.
    pub snr_stored_bytes: u64,
    /// Total training images of steps 0..=k (the saving-images reference).
    pub train_images_through: u64,
}

/// Closed-form ledger for the end of one step; matches serializer byte counts
/// exactly.
pub fn memory_footprint(method: Method, ctx: &FootprintContext) -> MemorySnapshot {
    let model_bytes = model_blob_len(ctx.patch_size, ctx.feature_dim, ctx.covered_classes) as u64;
    let helper_bytes: u64 = if method.uses_replay() {
        ctx.helper_class_counts
            .iter()
            .map(|n| decoder_blob_len(ctx.feature_dim, *n) as u64)
            .sum()
    } else {
        0
    };
    let generator_bytes = if method.uses_generator() {
        crate::replay::generator_blob_len(ctx.vocab_len) as u64
    } else {
        0
    };
    let stored_sample_bytes = if method == Method::Snr {
        ctx.snr_stored_bytes
    } else {
        0
    };
    let total_bytes = model_bytes + helper_bytes + generator_bytes + stored_sample_bytes;
    let saving_images_ref_bytes =
        model_bytes + ctx.train_images_through * sample_bytes(ctx.canvas);
    MemorySnapshot {
        model_bytes,
        helper_bytes,
        generator_bytes,
        stored_sample_bytes,
        total_bytes,
        saving_images_ref_bytes,
    }
}

// ---------------------------------------------------------------------------
// Run state and steps
// ---------------------------------------------------------------------------

/// Mutable state of one experiment: current model, helper bank, source block,
/// the store-and-replay sample store, and per-step checkpoints.
pub struct RunState {
    pub model: SegModel,
    pub bank: HelperDecoderBank,
    pub source: Option<SourceBlock>,
    /// (origin step, stored sample) pairs for the store-and-replay baseline.
    pub snr_store: Vec<(usize, Sample)>,
    /// Bytes stored by the S&R baseline at each step.
    pub snr_bytes_per_step: Vec<u64>,
    /// Serialized model checkpoint per completed step.
    pub model_checkpoints: Vec<Vec<u8>>,
    /// Serialized helper decoder per completed step (replay methods only).
    pub helper_checkpoints: Vec<Vec<u8>>,
    pub completed_steps: usize,
}

const TAG_ENCODER: u64 = 0x454e_43;
const TAG_CLASSIFIER: u64 = 0x434c_46;
const TAG_TRAIN: u64 = 0x5452_4e;
const TAG_HELPER: u64 = 0x4845_4c;
const TAG_REPLAY: u64 = 0x5250_4c;

fn build_source_block(cfg: &ExperimentConfig) -> Result<Option<SourceBlock>, TrainerError> {
    if !cfg.method.uses_replay() {
        return Ok(None);
    }
    let canvas = cfg.scene.canvas();
    if cfg.method.uses_generator() {
        let vocab = generator_vocab(cfg.scene.num_classes);
        let clf = GenClassifier::fit(
            &vocab,
            canvas,
            derive_seed(cfg.run.seed, TAG_CLASSIFIER, 0),
            DEFAULT_TEMPERATURE,
        );
        return Ok(Some(SourceBlock::Generator(GeneratorSource::new(
            canvas, vocab, clf,
        ))));
    }
    // retrieval source
    if let Some(dir) = &cfg.replay.fixture_dir {
        return Ok(Some(SourceBlock::Retrieval(RetrievalSource::new(
            canvas,
            Box::new(FixtureFetcher::new(dir.clone())),
        ))));
    }
    if cfg.replay.offline {
        return Err(TrainerError::Config(
            "offline mode requires replay.fixture_dir for retrieval methods".into(),
        ));
    }
    if let Some(url) = &cfg.replay.source_url {
        return Ok(Some(SourceBlock::Retrieval(RetrievalSource::new(
            canvas,
            Box::new(HttpFetcher::new(
                url.clone(),
                std::time::Duration::from_millis(cfg.replay.http_timeout_ms),
                cfg.replay.http_retries,
            )),
        ))));
    }
    Err(TrainerError::Config(
        "retrieval methods need replay.fixture_dir or replay.source_url (or RECALL_SOURCE_URL)"
            .into(),
    ))
}

/// Store-and-replay bookkeeping: store samples of the new classes within the
/// byte budget the step's helper decoder would occupy, with a floor of one
/// sample per new class.
fn snr_store_step(
    state: &mut RunState,
    cfg: &ExperimentConfig,
    t_k: &Dataset,
    c_k: &ClassSet,
    k: usize,
) {
    let helper_classes = c_k.with(BACKGROUND).len();
    let budget = cfg
        .snr
        .budget_override_bytes
        .unwrap_or(decoder_blob_len(cfg.training.feature_dim, helper_classes) as u64);
    let per_sample = sample_bytes(cfg.scene.canvas());
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    // floor: at least one stored sample per new class
    for c in c_k.foreground().iter() {
        let covered = chosen
            .iter()
            .any(|i| t_k.samples[*i].present_classes().contains(c));
        if covered {
            continue;
        }
        if let Some(i) = t_k
            .samples
            .iter()
            .position(|s| s.present_classes().contains(c))
        {
            chosen.insert(i);
        }
    }
    // fill the remaining budget with whole samples
    let mut used = chosen.len() as u64 * per_sample;
    for i in 0..t_k.len() {
        if used + per_sample > budget {
            break;
        }
        if chosen.insert(i) {
            used += per_sample;
        }
    }
    let stored_bytes = chosen.len() as u64 * per_sample;
    for i in chosen {
        state.snr_store.push((k, t_k.samples[i].clone()));
    }
    state.snr_bytes_per_step.push(stored_bytes);
}

/// The initial training step: train every weight on T_0, freeze the encoder,
/// then (for replay methods) fit the source on C_0 and train the first helper
/// decoder on the original T_0.
pub fn run_initial_step(
    cfg: &ExperimentConfig,
    t_0: &Dataset,
    c_0: &ClassSet,
) -> Result<RunState, TrainerError> {
    if t_0.is_empty() {
        return Err(TrainerError::EmptyPool("T_0 is empty".into()));
    }
    let seed = cfg.run.seed;
    let encoder = Encoder::new_random(
        cfg.training.patch_size,
        cfg.training.feature_dim,
        derive_seed(seed, TAG_ENCODER, 0),
    );
    let decoder = Decoder::new_zero(c_0.clone(), cfg.training.feature_dim);
    let steps = cfg.steps_per_class() * c_0.len();
    let mut model = train_all_weights(
        SegModel { encoder, decoder },
        t_0,
        steps,
        cfg.training.batch_size,
        cfg.main_opt(),
        derive_seed(seed, TAG_TRAIN, 0),
    )?;
    model.encoder.freeze();

    let mut state = RunState {
        model,
        bank: HelperDecoderBank::new(),
        source: build_source_block(cfg)?,
        snr_store: Vec::new(),
        snr_bytes_per_step: Vec::new(),
        model_checkpoints: Vec::new(),
        helper_checkpoints: Vec::new(),
        completed_steps: 0,
    };

    if let Some(source) = state.source.as_mut() {
        source.fit_step(c_0, t_0)?;
        let features = encode_all(&state.model.encoder, &t_0.samples);
        let labels: Vec<&LabelMap> = t_0.samples.iter().map(|s| &s.labels).collect();
        let helper_steps = cfg.training.helper_steps_per_class * c_0.len();
        let helper = train_helper_decoder(
            &state.model.encoder,
            c_0,
            &features,
            &labels,
            cfg,
            helper_steps,
            derive_seed(seed, TAG_HELPER, 0),
        )?;
        state.helper_checkpoints.push(serialize_decoder(&helper));
        state.bank.push(c_0, helper)?;
    }
    if cfg.method == Method::Snr {
        snr_store_step(&mut state, cfg, t_0, c_0, 0);
    }
    state.model_checkpoints.push(serialize_model(&state.model));
    state.completed_steps = 1;
    Ok(state)
}

/// One incremental step: inpaint, build the replay set, grow the decoder,
/// train on the interleaved mixture, then fit the source and helper for this
/// step's classes on the original T_k.
pub fn run_incremental_step(
    state: &mut RunState,
    cfg: &ExperimentConfig,
    schedule: &TaskSchedule,
    t_k: &Dataset,
    c_k: &ClassSet,
    k: usize,
) -> Result<(), TrainerError> {
    if cfg.method == Method::Snr {
        return run_snr_baseline(state, cfg, schedule, t_k, c_k, k);
    }
    if t_k.is_empty() {
        return Err(TrainerError::EmptyPool(format!("T_{k} is empty")));
    }
    let seed = cfg.run.seed;
    let prev_model = state.model.clone(); // pre-growth snapshot

    // (1) background self-inpainting
    let new_data: Vec<Sample> = if cfg.method.uses_inpaint() {
        t_k.samples
            .par_iter()
            .map(|s| inpaint(s, &prev_model, c_k))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        t_k.samples.clone()
    };

    // (2) replay set over all past steps
    let replay_set: Option<ReplaySet> = if cfg.method.uses_replay() {
        let source = state
            .source
            .as_ref()
            .expect("replay methods always carry a source block");
        Some(build_replay_set(
            source,
            &state.bank,
            &prev_model.encoder,
            &schedule.steps()[..k],
            cfg.replay.n_replay_per_class,
            derive_seed(seed, TAG_REPLAY, k as u64),
        )?)
    } else {
        None
    };

    // (3) grow the decoder for the new classes
    state.model.decoder = grow_decoder(&state.model.decoder, c_k)?;

    // (4) train the grown decoder on the interleaved mixture
    let new_features = encode_all(&state.model.encoder, &new_data);
    let new_labels: Vec<&LabelMap> = new_data.iter().map(|s| &s.labels).collect();
    let (old_features, old_labels): (Vec<FeatureMap>, Vec<&LabelMap>) = match &replay_set {
        Some(rs) => (
            encode_all(&state.model.encoder, &rs.samples),
            rs.samples.iter().map(|s| &s.labels).collect(),
        ),
        None => (Vec::new(), Vec::new()),
    };
    let (r_new, r_old) = if old_features.is_empty() {
        (1, 0) // pure fine-tuning batches without a replay pool
    } else {
        (cfg.training.r_new, cfg.training.r_old)
    };
    let steps = cfg.steps_per_class() * c_k.len();
    let decoder = std::mem::replace(
        &mut state.model.decoder,
        Decoder::new_zero(ClassSet::empty(), 0),
    );
    state.model.decoder = train_decoder_interleaved(
        &state.model.encoder,
        decoder,
        (&new_features, &new_labels),
        (&old_features, &old_labels),
        steps,
        cfg.training.batch_size,
        r_new,
        r_old,
        cfg.main_opt(),
        derive_seed(seed, TAG_TRAIN, k as u64),
    )?;

    // (5) fit the source mapping and helper decoder for C_k on the ORIGINAL
    // T_k; these are used by future steps, not the current one
    if cfg.method.uses_replay() {
        let source = state
            .source
            .as_mut()
            .expect("replay methods always carry a source block");
        source.fit_step(c_k, t_k)?;
        let orig_features = encode_all(&state.model.encoder, &t_k.samples);
        let orig_labels: Vec<&LabelMap> = t_k.samples.iter().map(|s| &s.labels).collect();
        let helper_steps = cfg.training.helper_steps_per_class * c_k.len();
        let helper = train_helper_decoder(
            &state.model.encoder,
            c_k,
            &orig_features,
            &orig_labels,
            cfg,
            helper_steps,
            derive_seed(seed, TAG_HELPER, k as u64),
        )?;
        state.helper_checkpoints.push(serialize_decoder(&helper));
        state.bank.push(c_k, helper)?;
    }
    state.model_checkpoints.push(serialize_model(&state.model));
    state.completed_steps = k + 1;
    Ok(())
}

/// Store-and-replay baseline step: no generated replay; instead the stored
/// real samples of earlier steps are interleaved with the new data, and new
/// samples are stored for the future within the helper-decoder byte budget.
pub fn run_snr_baseline(
    state: &mut RunState,
    cfg: &ExperimentConfig,
    _schedule: &TaskSchedule,
    t_k: &Dataset,
    c_k: &ClassSet,
    k: usize,
) -> Result<(), TrainerError> {
    if t_k.is_empty() {
        return Err(TrainerError::EmptyPool(format!("T_{k} is empty")));
    }
    let seed = cfg.run.seed;
    state.model.decoder = grow_decoder(&state.model.decoder, c_k)?;

    let stored: Vec<&Sample> = state
        .snr_store
        .iter()
        .filter(|(origin, _)| *origin < k)
        .map(|(_, s)| s)
        .collect();
    let new_features = encode_all(&state.model.encoder, &t_k.samples);
    let new_labels: Vec<&LabelMap> = t_k.samples.iter().map(|s| &s.labels).collect();
    let old_features: Vec<FeatureMap> = stored
        .par_iter()
        .map(|s| encode(&state.model.encoder, &s.image))
        .collect();
    let old_labels: Vec<&LabelMap> = stored.iter().map(|s| &s.labels).collect();
    let (r_new, r_old) = if old_features.is_empty() {
        (1, 0)
    } else {
        (cfg.training.r_new, cfg.training.r_old)
    };
    let steps = cfg.steps_per_class() * c_k.len();
    let decoder = std::mem::replace(
        &mut state.model.decoder,
        Decoder::new_zero(ClassSet::empty(), 0),
    );
    state.model.decoder = train_decoder_interleaved(
        &state.model.encoder,
        decoder,
        (&new_features, &new_labels),
        (&old_features, &old_labels),
        steps,
        cfg.training.batch_size,
        r_new,
        r_old,
        cfg.main_opt(),
        derive_seed(seed, TAG_TRAIN, k as u64),
    )?;

    snr_store_step(state, cfg, t_k, c_k, k);
    state.model_checkpoints.push(serialize_model(&state.model));
    state.completed_steps = k + 1;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Evaluate a frozen model over the test set with ground truth masked to the
/// covered classes. Shards evaluate independently (in parallel) and merge in
/// shard order; counts are integers, so the result is shard-count invariant.
pub fn evaluate_model(
    model: &SegModel,
    test: &Dataset,
    coverage: &ClassSet,
    shards: usize,
) -> ConfusionMatrix {
    let universe = test.class_universe.max_id().map(|c| c.0 as usize + 1).unwrap_or(1);
    let shards = shards.max(1).min(test.len().max(1));
    let chunk = test.len().div_ceil(shards);
    let partials: Vec<ConfusionMatrix> = test
        .samples
        .par_chunks(chunk.max(1))
        .map(|shard| {
            let mut cm = ConfusionMatrix::new(universe);
            for sample in shard {
                let gt = mask_to(&sample.labels, coverage, BACKGROUND);
                let pred = crate::segmodel::predict(model, &sample.image);
                cm.accumulate(&gt, &pred).expect("universe covers all labels");
            }
            cm
        })
        .collect();
    let mut total = ConfusionMatrix::new(universe);
    for p in &partials {
        total.merge(p).expect("same universe");
    }
    total
}

// ---------------------------------------------------------------------------
// Full experiment
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub steps: Vec<StepReport>,
}

pub struct RunOutput {
    pub report: ExperimentReport,
    pub state: RunState,
    pub schedule: TaskSchedule,
    pub partition: TaskPartition,
}

fn assemble_step_report(
    cfg: &ExperimentConfig,
    schedule: &TaskSchedule,
    partition: &TaskPartition,
    state: &RunState,
    cm: ConfusionMatrix,
    k: usize,
    wall_ms: u64,
) -> StepReport {
    let coverage = schedule.coverage_through(k);
    let universe = cfg.scene.num_classes;
    let old_group = schedule.step(0).foreground();
    let new_group = coverage.foreground().difference(&old_group);
    let step_group = schedule.step(k).foreground();

    let per_class_iou: Vec<Option<f64>> = (0..=universe as u8)
        .map(|c| cm.iou(crate::core::ClassId(c)))
        .collect();
    let per_class_pa: Vec<Option<f64>> = (0..=universe as u8)
        .map(|c| cm.pixel_accuracy(crate::core::ClassId(c)))
        .collect();
    let pa_defined: Vec<f64> = step_group
        .iter()
        .filter_map(|c| cm.pixel_accuracy(c))
        .collect();
    let pa_new = if pa_defined.is_empty() {
        None
    } else {
        Some(pa_defined.iter().sum::<f64>() / pa_defined.len() as f64)
    };

    let helper_class_counts: Vec<usize> = state
        .bank
        .entries()
        .iter()
        .take(k + 1)
        .map(|(_, d)| d.num_classes())
        .collect();
    let train_images_through: u64 = partition.per_step[..=k]
        .iter()
        .map(|d| d.len() as u64)
        .sum();
    let snr_stored_bytes: u64 = state.snr_bytes_per_step.iter().take(k + 1).sum();
    let vocab_len = match &state.source {
        Some(SourceBlock::Generator(g)) => g.vocab().len(),
        _ => generator_vocab(cfg.scene.num_classes).len(),
    };
    let memory = memory_footprint(
        cfg.method,
        &FootprintContext {
            patch_size: cfg.training.patch_size,
            feature_dim: cfg.training.feature_dim,
            canvas: cfg.scene.canvas(),
            vocab_len,
            covered_classes: coverage.len(),
            helper_class_counts,
            snr_stored_bytes,
            train_images_through,
        },
    );

    StepReport {
        step: k,
        classes: coverage.clone(),
        per_class_iou,
        per_class_pa,
        miou_old: cm.miou(&old_group),
        miou_new: cm.miou(&new_group),
        miou_all: cm.miou(&coverage),
        pa_new,
        memory,
        wall_ms,
        confusion: cm,
    }
}

/// Execute every step of the configured method, evaluating on the full test
/// set after each one. Deterministic given the config's seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, TrainerError> {
    cfg.validate()?;
    let (train, test) = gen_dataset(&cfg.scene, cfg.data.n_train, cfg.data.n_test)?;
    let schedule = cfg.make_schedule()?;
    let partition = build_partition(&train, &schedule)?;

    let mut steps = Vec::with_capacity(schedule.num_steps());
    let t0 = Instant::now();
    let mut state = run_initial_step(cfg, &partition.per_step[0], schedule.step(0))?;
    let cm = evaluate_model(
        &state.model,
        &test,
        &schedule.coverage_through(0),
        cfg.run.eval_shards,
    );
    steps.push(assemble_step_report(
        cfg,
        &schedule,
        &partition,
        &state,
        cm,
        0,
        t0.elapsed().as_millis() as u64,
    ));

    for k in 1..schedule.num_steps() {
        let tk = Instant::now();
        run_incremental_step(
            &mut state,
            cfg,
            &schedule,
            &partition.per_step[k],
            schedule.step(k),
            k,
        )?;
        let cm = evaluate_model(
            &state.model,
            &test,
            &schedule.coverage_through(k),
            cfg.run.eval_shards,
        );
        steps.push(assemble_step_report(
            cfg,
            &schedule,
            &partition,
            &state,
            cm,
            k,
            tk.elapsed().as_millis() as u64,
        ));
    }

    Ok(RunOutput {
        report: ExperimentReport {
            config: cfg.clone(),
            steps,
        },
        state,
        schedule,
        partition,
    })
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => String::new(),
    }
}

/// Render the per-step CSV with a bit-stable column order.
pub fn report_csv(report: &ExperimentReport) -> String {
    let universe = report.config.scene.num_classes;
    let mut out = String::from("step,setup,method,miou_old,miou_new,miou_all,pa_new,mem_bytes,wall_ms");
    for c in 0..=universe {
        out.push_str(&format!(",iou_{c}"));
    }
    out.push('\n');
    for s in &report.steps {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}",
            s.step,
            report.config.schedule.setup,
            report.config.method.name(),
            fmt_opt(s.miou_old),
            fmt_opt(s.miou_new),
            fmt_opt(s.miou_all),
            fmt_opt(s.pa_new),
            s.memory.total_bytes,
            s.wall_ms,
        ));
        for c in 0..=universe {
            out.push(',');
            out.push_str(&fmt_opt(s.per_class_iou[c]));
        }
        out.push('\n');
    }
    out
}

/// Write report.csv, report.json, the per-step checkpoints, and the partition
/// manifest into a run directory.
pub fn write_run_artifacts(dir: &Path, output: &RunOutput) -> Result<(), TrainerError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), report_csv(&output.report))?;
    let json = serde_json::to_string_pretty(&output.report)
        .map_err(|e| TrainerError::Config(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json)?;
    std::fs::write(dir.join("config.toml"), output.report.config.to_toml())?;
    for (k, blob) in output.state.model_checkpoints.iter().enumerate() {
        std::fs::write(dir.join(format!("model_step{k}.bin")), blob)?;
    }
    for (k, blob) in output.state.helper_checkpoints.iter().enumerate() {
        std::fs::write(dir.join(format!("helper_step{k}.bin")), blob)?;
    }
    crate::protocol::save_partition_manifest(
        &dir.join("partition.json"),
        &output.schedule,
        &output.partition,
    )?;
    Ok(())
}
