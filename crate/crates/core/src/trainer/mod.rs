//! Training loop, metrics, intrinsic evaluation and the objective-ablation
//! harness.
//!
//! All randomness in a run is keyed rather than streamed: the example
//! order of epoch `e` comes from `(seed, e)` and the dropout masks of
//! micro-batch `k` of step `t` from `(seed, t, k)`. A run resumed from a
//! checkpoint therefore replays exactly what an uninterrupted run does.

mod checkpoint;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SegmentPair;
use crate::corruption::{build_examples, CorruptedExample, CorruptionConfig, CorruptionError, Shard, ShardError};
use crate::model::{
    count_params, forward, init_params, loss_and_grads, AlbertConfig, MetricsAccumulator, ModelError,
    ObjectiveMetrics, Objectives, ParameterSet,
};
use crate::numeric::TensorError;
use crate::optimizer::{lamb_step, GradAccumulator, LambConfig, LambState, OptimizerError, Schedule};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

const ORDER_SALT: u64 = 0x006f_7264_6572;
const DROPOUT_SALT: u64 = 0x6472_6f70;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("every objective is disabled")]
    AllObjectivesDisabled,
    #[error("data has sequence length {found}, model expects {expected}")]
    ShardMismatch { expected: usize, found: usize },
    #[error("no training examples")]
    EmptyDataset,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    /// Warmup steps as a fraction of `trainer.total_steps`.
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub trust_min: f64,
    pub trust_max: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let lamb = LambConfig::default();
        Self {
            peak_lr: 1.25e-3,
            warmup_ratio: 1.25e-2,
            beta1: lamb.beta1,
            beta2: lamb.beta2,
            epsilon: lamb.epsilon,
            weight_decay: lamb.weight_decay,
            trust_min: lamb.trust_min,
            trust_max: lamb.trust_max,
        }
    }
}

impl OptimizerConfig {
    pub fn lamb(&self) -> LambConfig {
        LambConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
            trust_min: self.trust_min,
            trust_max: self.trust_max,
        }
    }

    pub fn schedule(&self, total_steps: u64) -> Result<Schedule, OptimizerError> {
        Schedule::new(self.peak_lr, self.warmup_ratio, total_steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub micro_batch_size: usize,
    pub accumulation_steps: usize,
    pub total_steps: u64,
    pub metrics_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Fraction of segment pairs held out for evaluation by the ablation
    /// harness.
    pub eval_fraction: f64,
    pub data: Vec<PathBuf>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            micro_batch_size: 32,
            accumulation_steps: 64,
            total_steps: 125_000,
            metrics_every: 100,
            checkpoint_every: 5_000,
            seed: 0,
            eval_fraction: 0.1,
            data: Vec::new(),
        }
    }
}

impl TrainerConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch_size * self.accumulation_steps
    }
}

/// A complete run description; the JSON config file format.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: AlbertConfig,
    pub corruption: CorruptionConfig,
    pub optimizer: OptimizerConfig,
    pub trainer: TrainerConfig,
}

pub type TrainConfig = RunConfig;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.corruption.validate()?;
        self.optimizer.lamb().validate()?;
        self.optimizer.schedule(self.trainer.total_steps.max(1))?;
        if !self.model.objectives.any() {
            return Err(TrainError::AllObjectivesDisabled);
        }
        let t = &self.trainer;
        if t.micro_batch_size == 0 || t.accumulation_steps == 0 {
            return Err(TrainError::InvalidConfig("batch sizes must be at least 1".into()));
        }
        if t.total_steps == 0 || t.metrics_every == 0 {
            return Err(TrainError::InvalidConfig("total_steps and metrics_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&t.eval_fraction) {
            return Err(TrainError::InvalidConfig(format!("eval_fraction {} outside [0, 1)", t.eval_fraction)));
        }
        Ok(())
    }

    /// This configuration with one objective set switched on in both the
    /// model and the corruption pipeline.
    pub fn with_objectives(&self, objectives: Objectives) -> Self {
        let mut cfg = self.clone();
        cfg.model.objectives = objectives;
        cfg.corruption.enable_mlm = objectives.mlm;
        cfg.corruption.enable_sop = objectives.sop;
        cfg.corruption.enable_wop = objectives.wop;
        cfg
    }
}

/// Position of a run in its keyed random streams.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub examples_seen: u64,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub metrics: ObjectiveMetrics,
    pub examples_seen: u64,
    pub wall_ms: u64,
}

/// Sequential reads with wraparound over a per-epoch shuffle.
struct DataOrder {
    n: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
}

impl DataOrder {
    fn new(n: usize, seed: u64) -> Self {
        let mut order = Self {
            n,
            seed,
            epoch: 0,
            perm: Vec::new(),
        };
        order.shuffle(0);
        order
    }

    fn shuffle(&mut self, epoch: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ORDER_SALT);
        rng.set_stream(epoch);
        self.perm = (0..self.n).collect();
        self.perm.shuffle(&mut rng);
        self.epoch = epoch;
    }

    fn index(&mut self, position: u64) -> usize {
        let epoch = position / self.n as u64;
        if epoch != self.epoch {
            self.shuffle(epoch);
        }
        self.perm[(position % self.n as u64) as usize]
    }
}

fn dropout_rng(seed: u64, step: u64, micro: u64, accumulation: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_SALT);
    rng.set_stream(step * accumulation + micro);
    rng
}

/// Reads every shard into memory, checking the sequence length.
pub fn load_shards<P: AsRef<Path>>(paths: &[P], seq_len: usize) -> Result<Vec<CorruptedExample>, TrainError> {
    let mut out = Vec::new();
    for p in paths {
        let shard = Shard::open(p.as_ref())?;
        if shard.seq_len() != seq_len {
            return Err(TrainError::ShardMismatch {
                expected: seq_len,
                found: shard.seq_len(),
            });
        }
        out.extend(shard.iter());
    }
    Ok(out)
}

fn check_data(data: &[CorruptedExample], seq_len: usize) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    match data.iter().find(|e| e.seq_len() != seq_len) {
        Some(e) => Err(TrainError::ShardMismatch {
            expected: seq_len,
            found: e.seq_len(),
        }),
        None => Ok(()),
    }
}

fn numeric_failure(e: ModelError, step: u64) -> TrainError {
    match e {
        ModelError::Tensor(TensorError::NonFinite { .. }) => TrainError::NonFiniteLoss { step },
        other => other.into(),
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `metrics.jsonl` and checkpoints; nothing is written
    /// when unset.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed steps instead of `total_steps`.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

/// File name of the checkpoint written after `step` updates.
pub fn step_checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.kalc")
}

/// File name of the checkpoint written when a run ends.
pub const FINAL_CHECKPOINT: &str = "checkpoint.kalc";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn train(cfg: &RunConfig, data: &[CorruptedExample], opts: &TrainOptions) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_data(data, cfg.model.seq_len)?;
    let t_cfg = &cfg.trainer;
    let schedule = cfg.optimizer.schedule(t_cfg.total_steps)?;
    let (mb, k) = (t_cfg.micro_batch_size, t_cfg.accumulation_steps);

    let (mut params, mut state, start) = match &opts.resume {
        Some(ck) => {
            if ck.config.model != cfg.model || ck.rng.seed != t_cfg.seed {
                return Err(TrainError::InvalidConfig(
                    "checkpoint was written with a different model config or seed".into(),
                ));
            }
            (ck.params.clone(), ck.optimizer.clone(), ck.step)
        }
        None => {
            let params = init_params(&cfg.model, t_cfg.seed)?;
            let state = LambState::new(&params, cfg.optimizer.lamb());
            (params, state, 0)
        }
    };
    crate::model::check_params(&params, &cfg.model)?;
    let end = opts.stop_after.unwrap_or(t_cfg.total_steps).min(t_cfg.total_steps);

    let mut sink = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(start > 0)
                .truncate(start == 0)
                .open(dir.join(METRICS_FILE))?;
            Some(BufWriter::new(file))
        }
        None => None,
    };

    let started = Instant::now();
    let mut order = DataOrder::new(data.len(), t_cfg.seed);
    let mut records = Vec::new();
    let per_step = (mb * k) as u64;
    let snapshot = |params: &ParameterSet, state: &LambState, step: u64| Checkpoint {
        config: cfg.clone(),
        step,
        params: params.clone(),
        optimizer: state.clone(),
        rng: RngState {
            seed: t_cfg.seed,
            examples_seen: step * per_step,
        },
    };

    for t in start..end {
        let step = t + 1;
        let lr = schedule.lr_at(t)?;
        let mut grads = GradAccumulator::new(&params, k);
        let mut tally = MetricsAccumulator::new();
        for micro in 0..k {
            let first = (t * k as u64 + micro as u64) * mb as u64;
            let batch: Vec<CorruptedExample> =
                (0..mb as u64).map(|j| data[order.index(first + j)].clone()).collect();
            let mut rng = dropout_rng(t_cfg.seed, t, micro as u64, k as u64);
            let rng: Option<&mut dyn RngCore> = (cfg.model.dropout > 0.0).then_some(&mut rng as &mut dyn RngCore);
            let (out, g) = loss_and_grads(&params, &cfg.model, &batch, rng).map_err(|e| numeric_failure(e, step))?;
            if !out.total_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            tally.add(&out);
            grads.add(&g)?;
        }
        let mean = grads.finish(cfg.model.dtype)?;
        match lamb_step(&mut params, &mean, &mut state, lr) {
            Err(OptimizerError::NonFiniteGradient { .. }) => return Err(TrainError::NonFiniteLoss { step }),
            other => other?,
        }

        if step % t_cfg.metrics_every == 0 || step == t_cfg.total_steps {
            let record = MetricsRecord {
                step,
                lr,
                metrics: tally.finish(),
                examples_seen: step * per_step,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            log::info!("step {step} lr {lr:.3e} loss {:.4}", record.metrics.loss_total);
            if let Some(w) = sink.as_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            records.push(record);
        }
        if let Some(dir) = &opts.out_dir {
            if t_cfg.checkpoint_every > 0 && step % t_cfg.checkpoint_every == 0 {
                let path = dir.join(step_checkpoint_name(step));
                save_checkpoint(&snapshot(&params, &state, step), &path)?;
                log::info!("wrote {}", path.display());
            }
        }
    }

    let checkpoint = snapshot(&params, &state, end.max(start));
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&checkpoint, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics: records,
    })
}

/// Dropout-free metrics of `params` over every example, in batches of
/// `batch_size`.
pub fn evaluate_intrinsic(
    params: &ParameterSet,
    cfg: &AlbertConfig,
    data: &[CorruptedExample],
    batch_size: usize,
) -> Result<ObjectiveMetrics, TrainError> {
    check_data(data, cfg.seq_len)?;
    let mut tally = MetricsAccumulator::new();
    for batch in data.chunks(batch_size.max(1)) {
        tally.add(&forward(params, cfg, batch)?);
    }
    Ok(tally.finish())
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &[CorruptedExample]) -> Result<ObjectiveMetrics, TrainError> {
    evaluate_intrinsic(
        &ckpt.params,
        &ckpt.config.model,
        data,
        ckpt.config.trainer.micro_batch_size,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub objectives: Objectives,
    pub label: String,
    pub parameters: usize,
    /// Held-out metrics of the final parameters.
    pub eval: ObjectiveMetrics,
    /// Last training-stream record.
    pub last_train: Option<MetricsRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl std::fmt::Display for AblationTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        writeln!(
            f,
            "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "objectives", "params", "loss", "acc_mlm", "acc_sop", "acc_wop"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10}",
                r.label,
                r.parameters,
                format!("{:.4}", r.eval.loss_total),
                cell(r.eval.acc_mlm),
                cell(r.eval.acc_sop),
                cell(r.eval.acc_wop)
            )?;
        }
        Ok(())
    }
}

/// Trains one model per objective combination from the same initial seed
/// and segment pairs, and evaluates each on a held-out tail of the pairs.
pub fn run_ablation(
    base: &RunConfig,
    pairs: &[SegmentPair],
    vocab_size: usize,
    combos: &[Objectives],
) -> Result<AblationTable, TrainError> {
    if combos.is_empty() {
        return Err(TrainError::InvalidConfig("no objective combinations given".into()));
    }
    if combos.iter().any(|c| !c.any()) {
        return Err(TrainError::AllObjectivesDisabled);
    }
    let held = ((pairs.len() as f64 * base.trainer.eval_fraction).ceil() as usize).min(pairs.len().saturating_sub(1));
    let (train_pairs, eval_pairs) = pairs.split_at(pairs.len() - held);
    let mut rows = Vec::with_capacity(combos.len());
    for &objectives in combos {
        let cfg = base.with_objectives(objectives);
        cfg.validate()?;
        let seq_len = cfg.model.seq_len;
        let (train_data, _) = build_examples(train_pairs, vocab_size, seq_len, &cfg.corruption)?;
        let outcome = train(&cfg, &train_data, &TrainOptions::default())?;
        let eval_data = if eval_pairs.is_empty() {
            train_data
        } else {
            let eval_corruption = CorruptionConfig {
                seed: cfg.corruption.seed.wrapping_add(1),
                ..cfg.corruption.clone()
            };
            build_examples(eval_pairs, vocab_size, seq_len, &eval_corruption)?.0
        };
        let eval = evaluate_checkpoint(&outcome.checkpoint, &eval_data)?;
        log::info!("ablation {}: {:?}", objectives.label(), eval);
        rows.push(AblationRow {
            objectives,
            label: objectives.label(),
            parameters: count_params(&cfg.model).total(),
            eval,
            last_train: outcome.metrics.last().cloned(),
        });
    }
    Ok(AblationTable { rows })
}

/// Writes `table` as pretty JSON.
pub fn write_ablation_json(table: &AblationTable, path: &Path) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, table)?;
    w.flush()?;
    Ok(())
}
