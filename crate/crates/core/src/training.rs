//! Supervised finetuning: optimizers, learning-rate schedule, the training
//! loop, and the ablation sweep driver.
//!
//! Optimizer conventions (beta1 = 0.9, beta2 = 0.999, eps = 1e-8,
//! bias-corrected moments):
//!
//! * `adam_step` treats weight decay as a coupled L2 gradient term
//!   (`g += wd * p`), matching the classic regularized-Adam reading of a
//!   plain "Adam with weight decay" recipe;
//! * `adamw_step` decays decoupled: `p -= lr * wd * p` before the moment
//!   update is applied.
//!
//! Defaults: finetuning uses Adam at a fixed 2e-4 with wd 5e-3 and batch
//! 16; reconstruction pretraining uses AdamW at 1.5e-4 under a linear
//! warmup followed by cosine decay to zero, wd 0.05, batch 64. Desk runs
//! shrink epochs and batch; `paper_scale` restores the full recipe.
//!
//! The loop early-stops on dev ACER (patience 5), retains the best-dev
//! parameters (a flag keeps the last epoch instead), and emits a
//! `RunRecord` directory: `config.echo`, `metrics.csv`,
//! `scores_dev.csv`, `scores_test.csv`, `checkpoint.bin`.

use crate::adapters::AdapterConfig;
use crate::checkpoint::{Checkpoint, Provenance};
use crate::data::{prepare_input, Dataset, Label, MultimodalSample, Split};
use crate::descriptors::{DescriptorConfig, Modality, ModalityInputPolicy, Recipe};
use crate::m2a2e::{pretrain, M2a2eConfig};
use crate::metrics::{
    acer, bpcer_target_threshold, eer_threshold, evaluate, MetricReport, ScoreRow, ScoreSet,
    DESK_FPR_TARGET,
};
use crate::rng::{stream_rng, STREAM_FINETUNE_SHUFFLE};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};
use crate::vit::{live_score, FreezePolicy, ViTConfig, ViTModel};
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adam_w",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adam_w" | "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(TensorError::InvalidArgument(format!(
                "unknown optimizer {other:?} (expected adam or adam_w)"
            ))),
        }
    }
}

/// First/second moment estimates, allocated lazily per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Scalar> {
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
    pub t: u64,
}

fn moment_step<T: Scalar>(
    params: &mut IndexMap<String, Tensor<T>>,
    grads: &IndexMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
    decoupled: bool,
) -> Result<(), TensorError> {
    state.t += 1;
    let b1 = T::from_f64(BETA1);
    let b2 = T::from_f64(BETA2);
    let eps = T::from_f64(EPS);
    let lr_t = T::from_f64(lr);
    let wd = T::from_f64(weight_decay);
    let c1 = T::from_f64(1.0 - BETA1.powi(state.t as i32));
    let c2 = T::from_f64(1.0 - BETA2.powi(state.t as i32));
    for (name, g) in grads {
        let p = params.get_mut(name).ok_or_else(|| {
            TensorError::InvalidArgument(format!("gradient for unknown parameter {name:?}"))
        })?;
        if p.data.len() != g.len() {
            return Err(TensorError::Shape(format!(
                "gradient length {} != parameter length {} for {name:?}",
                g.len(),
                p.data.len()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![T::ZERO; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![T::ZERO; g.len()]);
        for i in 0..g.len() {
            let grad = if decoupled { g[i] } else { g[i] + wd * p.data[i] };
            m[i] = b1 * m[i] + (T::ONE - b1) * grad;
            v[i] = b2 * v[i] + (T::ONE - b2) * grad * grad;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            if decoupled {
                let decay = lr_t * wd * p.data[i];
                p.data[i] -= decay;
            }
            p.data[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam with coupled L2 weight decay (`g += wd * p`).
pub fn adam_step<T: Scalar>(
    params: &mut IndexMap<String, Tensor<T>>,
    grads: &IndexMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TensorError> {
    moment_step(params, grads, state, lr, weight_decay, false)
}

/// AdamW: decoupled decay `p -= lr * wd * p`.
pub fn adamw_step<T: Scalar>(
    params: &mut IndexMap<String, Tensor<T>>,
    grads: &IndexMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TensorError> {
    moment_step(params, grads, state, lr, weight_decay, true)
}

/// Linear warmup from zero over `warmup` steps, then cosine decay to zero
/// at `total`. `step == warmup` returns exactly `base`.
pub fn lr_schedule(step: u64, total: u64, warmup: u64, base: f64) -> Result<f64, TensorError> {
    if warmup > total {
        return Err(TensorError::InvalidArgument(format!(
            "warmup {warmup} exceeds total steps {total}"
        )));
    }
    if step > total {
        return Err(TensorError::InvalidArgument(format!(
            "step {step} exceeds total steps {total}"
        )));
    }
    if step <= warmup {
        if warmup == 0 {
            // No warmup: start directly on the cosine.
            if total == 0 {
                return Ok(base);
            }
        } else {
            return Ok(base * step as f64 / warmup as f64);
        }
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Scalar>(grads: &mut IndexMap<String, Vec<T>>, max_norm: f64) {
    let sq: f64 = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&v| v.to_f64() * v.to_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// How the dev threshold (and hence dev ACER for model selection) is
/// chosen each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum ThresholdRule {
    /// Equal-error threshold on the dev split (default).
    Eer,
    /// Smallest threshold meeting a BPCER budget on the dev split.
    BpcerTarget { target: f64 },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Eer
    }
}

impl ThresholdRule {
    pub fn threshold(&self, dev: &ScoreSet) -> Result<f64, TensorError> {
        match self {
            ThresholdRule::Eer => Ok(eer_threshold(dev)?.0),
            ThresholdRule::BpcerTarget { target } => Ok(bpcer_target_threshold(dev, *target)?.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Warmup steps as epochs; only the AdamW schedule consumes it (Adam
    /// runs at a fixed rate).
    pub warmup_epochs: usize,
    pub patience: usize,
    pub freeze: FreezePolicy,
    pub modalities: Vec<Modality>,
    pub input_policy: ModalityInputPolicy,
    pub selection: ThresholdRule,
    /// Keep the last epoch's parameters instead of the best-dev ones.
    pub keep_last: bool,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    pub fpr_target: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            optimizer: OptimizerKind::Adam,
            lr: 2e-4,
            weight_decay: 5e-3,
            batch_size: 16,
            max_epochs: 10,
            warmup_epochs: 0,
            patience: 5,
            freeze: FreezePolicy::AllBlocks,
            modalities: Modality::ALL.to_vec(),
            input_policy: ModalityInputPolicy::default(),
            selection: ThresholdRule::Eer,
            keep_last: false,
            grad_clip: None,
            fpr_target: DESK_FPR_TARGET,
            seed: 42,
        }
    }
}

impl FinetuneConfig {
    /// The full-scale supervised recipe: fixed-rate Adam, 30 epochs.
    pub fn paper_scale() -> Self {
        FinetuneConfig {
            max_epochs: 30,
            ..FinetuneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TensorError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(TensorError::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TensorError::InvalidArgument("need at least one epoch".into()));
        }
        if self.modalities.is_empty() {
            return Err(TensorError::InvalidArgument(
                "modality subset must not be empty".into(),
            ));
        }
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.modalities.len() {
            return Err(TensorError::InvalidArgument(
                "modality subset contains duplicates".into(),
            ));
        }
        Ok(())
    }
}

/// Everything one training run produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config_echo: String,
    pub train_loss: Vec<f64>,
    pub dev_acer: Vec<f64>,
    pub dev_threshold: Vec<f64>,
    /// Epoch whose parameters were kept (0-based).
    pub selected_epoch: usize,
    pub report: MetricReport,
    pub dev_scores: ScoreSet,
    pub test_scores: ScoreSet,
    pub wall_clock_secs: f64,
    pub checkpoint_path: Option<PathBuf>,
}

impl RunRecord {
    fn write(&self, dir: &Path) -> Result<(), TensorError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.echo"), &self.config_echo)?;
        let mut csv = String::from("epoch,train_loss,dev_acer,dev_threshold\n");
        for e in 0..self.train_loss.len() {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                e, self.train_loss[e], self.dev_acer[e], self.dev_threshold[e]
            ));
        }
        std::fs::write(dir.join("metrics.csv"), csv)?;
        self.dev_scores.write_csv(&dir.join("scores_dev.csv"))?;
        self.test_scores.write_csv(&dir.join("scores_test.csv"))?;
        Ok(())
    }
}

fn prepared<T: Scalar>(
    samples: &[MultimodalSample],
    cfg: &FinetuneConfig,
    dcfg: &DescriptorConfig,
) -> Result<Vec<(crate::vit::SampleInput<T>, usize, String, Label)>, TensorError> {
    samples
        .iter()
        .map(|s| {
            Ok((
                prepare_input::<T>(s, &cfg.modalities, &cfg.input_policy, dcfg)?,
                s.label.class_index(),
                s.id.clone(),
                s.label,
            ))
        })
        .collect()
}

fn score_split<T: Scalar>(
    model: &ViTModel<T>,
    inputs: &[(crate::vit::SampleInput<T>, usize, String, Label)],
    split: Split,
) -> Result<ScoreSet, TensorError> {
    let mut rows = Vec::with_capacity(inputs.len());
    for (input, _, id, label) in inputs {
        let mut tape = Tape::new();
        let binds = model.bind(&mut tape);
        let logits = model.forward_logits(&mut tape, &binds, input, None)?;
        let score = live_score(tape.data(logits));
        if !score.is_finite() {
            return Err(TensorError::Numeric(format!(
                "non-finite liveness score for {id:?}"
            )));
        }
        rows.push(ScoreRow {
            id: id.clone(),
            label: *label,
            score,
        });
    }
    ScoreSet::new(split, rows)
}

/// Score one split of `ds` with `model` at its current parameters, using
/// `cfg` only for the modality list and input policy.
pub fn score_dataset<T: Scalar>(
    model: &ViTModel<T>,
    ds: &Dataset,
    split: Split,
    cfg: &FinetuneConfig,
    dcfg: &DescriptorConfig,
) -> Result<ScoreSet, TensorError> {
    let inputs = prepared::<T>(ds.split(split), cfg, dcfg)?;
    score_split(model, &inputs, split)
}

/// Supervised training of `model` on `ds` under `cfg`; `config_echo` is
/// stored verbatim in the record and checkpoint, `provenance` states how
/// the starting weights were obtained.
pub fn finetune<T: Scalar>(
    model: &mut ViTModel<T>,
    ds: &Dataset,
    dcfg: &DescriptorConfig,
    cfg: &FinetuneConfig,
    config_echo: &str,
    provenance: Provenance,
    out_dir: Option<&Path>,
) -> Result<RunRecord, TensorError> {
    let started = Instant::now();
    cfg.validate()?;
    if cfg.modalities.len() != model.cfg.modalities {
        return Err(TensorError::InvalidArgument(format!(
            "model expects {} modalities, config selects {}",
            model.cfg.modalities,
            cfg.modalities.len()
        )));
    }
    let manifest = model.apply_freeze(cfg.freeze)?;
    if manifest.is_empty() {
        return Err(TensorError::InvalidArgument(
            "freeze policy leaves nothing trainable".into(),
        ));
    }

    let train = prepared::<T>(&ds.train, cfg, dcfg)?;
    let dev = prepared::<T>(&ds.dev, cfg, dcfg)?;
    let test = prepared::<T>(&ds.test, cfg, dcfg)?;
    if train.is_empty() || dev.is_empty() {
        return Err(TensorError::InvalidArgument(
            "train and dev splits must be non-empty".into(),
        ));
    }

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.max_epochs as u64;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs as u64;

    let mut state = AdamState::<T>::default();
    let mut step: u64 = 0;
    let mut train_loss = Vec::new();
    let mut dev_acer_trace = Vec::new();
    let mut dev_threshold_trace = Vec::new();
    let mut best: Option<(f64, usize, Vec<(String, Vec<T>)>)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = stream_rng(cfg.seed, STREAM_FINETUNE_SHUFFLE, epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = match cfg.optimizer {
                OptimizerKind::Adam => cfg.lr,
                OptimizerKind::AdamW => lr_schedule(step, total_steps, warmup_steps, cfg.lr)?,
            };
            let mut tape = Tape::new();
            let binds = model.bind(&mut tape);
            let mut logit_rows = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let (input, label, _, _) = &train[idx];
                logit_rows.push(model.forward_logits(&mut tape, &binds, input, None)?);
                labels.push(*label);
            }
            let logits = tape.concat(&logit_rows, 0)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let loss_val = tape.data(loss)[0].to_f64();
            if !loss_val.is_finite() {
                return Err(TensorError::Numeric(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss_val * chunk.len() as f64;
            tape.backward(loss)?;
            let mut grads = tape.named_grads();
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            match cfg.optimizer {
                OptimizerKind::Adam => {
                    adam_step(&mut model.params, &grads, &mut state, lr, cfg.weight_decay)?
                }
                OptimizerKind::AdamW => {
                    adamw_step(&mut model.params, &grads, &mut state, lr, cfg.weight_decay)?
                }
            }
            step += 1;
        }
        train_loss.push(epoch_loss / train.len() as f64);

        let dev_scores = score_split(model, &dev, Split::Dev)?;
        let threshold = cfg.selection.threshold(&dev_scores)?;
        let dev_acer = acer(&dev_scores, threshold)?;
        dev_acer_trace.push(dev_acer);
        dev_threshold_trace.push(threshold);

        let improved = best.as_ref().map_or(true, |(b, _, _)| dev_acer < *b);
        if improved {
            let snapshot: Vec<(String, Vec<T>)> = model
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.data.clone()))
                .collect();
            best = Some((dev_acer, epoch, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_epoch, snapshot) = best.expect("at least one epoch ran");
    let selected_epoch = if cfg.keep_last {
        train_loss.len() - 1
    } else {
        for (name, data) in snapshot {
            model.params[&name].data = data;
        }
        best_epoch
    };

    let dev_scores = score_split(model, &dev, Split::Dev)?;
    let test_scores = score_split(model, &test, Split::Test)?;
    let report = evaluate(&dev_scores, &test_scores, cfg.fpr_target)?;

    let checkpoint_path = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("checkpoint.bin");
            Checkpoint::from_params(config_echo, provenance, &model.params).save(&path)?;
            Some(path)
        }
        None => None,
    };

    let record = RunRecord {
        config_echo: config_echo.to_string(),
        train_loss,
        dev_acer: dev_acer_trace,
        dev_threshold: dev_threshold_trace,
        selected_epoch,
        report,
        dev_scores,
        test_scores,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint_path,
    };
    if let Some(dir) = out_dir {
        record.write(dir)?;
    }
    Ok(record)
}

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

/// One swept axis with its grid of values.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    DescriptorRecipe(Vec<Recipe>),
    AdapterKind(Vec<crate::adapters::AdapterKind>),
    AdapterDim(Vec<usize>),
    AdapterPosition(Vec<crate::adapters::AdapterPosition>),
    MaskRatio(Vec<f64>),
    DecoderDepth(Vec<usize>),
    PretrainEpochs(Vec<usize>),
    FreezePolicy(Vec<FreezePolicy>),
    ModalitySubset(Vec<Vec<Modality>>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::DescriptorRecipe(_) => "descriptor_recipe",
            SweepAxis::AdapterKind(_) => "adapter_kind",
            SweepAxis::AdapterDim(_) => "adapter_dim",
            SweepAxis::AdapterPosition(_) => "adapter_position",
            SweepAxis::MaskRatio(_) => "mask_ratio",
            SweepAxis::DecoderDepth(_) => "decoder_depth",
            SweepAxis::PretrainEpochs(_) => "pretrain_epochs",
            SweepAxis::FreezePolicy(_) => "freeze_policy",
            SweepAxis::ModalitySubset(_) => "modality_subset",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::DescriptorRecipe(v) => v.len(),
            SweepAxis::AdapterKind(v) => v.len(),
            SweepAxis::AdapterDim(v) => v.len(),
            SweepAxis::AdapterPosition(v) => v.len(),
            SweepAxis::MaskRatio(v) => v.len(),
            SweepAxis::DecoderDepth(v) => v.len(),
            SweepAxis::PretrainEpochs(v) => v.len(),
            SweepAxis::FreezePolicy(v) => v.len(),
            SweepAxis::ModalitySubset(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Human-readable label of grid point `i`, used in run-directory
    /// names and summary rows.
    pub fn value_label(&self, i: usize) -> String {
        match self {
            SweepAxis::DescriptorRecipe(v) => v[i].name().to_string(),
            SweepAxis::AdapterKind(v) => v[i].to_string(),
            SweepAxis::AdapterDim(v) => v[i].to_string(),
            SweepAxis::AdapterPosition(v) => v[i].to_string(),
            SweepAxis::MaskRatio(v) => format!("{}", v[i]),
            SweepAxis::DecoderDepth(v) => v[i].to_string(),
            SweepAxis::PretrainEpochs(v) => v[i].to_string(),
            SweepAxis::FreezePolicy(v) => v[i].to_string(),
            SweepAxis::ModalitySubset(v) => v[i]
                .iter()
                .map(|m| m.name())
                .collect::<Vec<_>>()
                .join("+"),
        }
    }
}

/// The seven modality settings: each sensor alone, each pair, and all
/// three.
pub fn modality_subset_grid() -> Vec<Vec<Modality>> {
    vec![
        vec![Modality::Rgb],
        vec![Modality::Ir],
        vec![Modality::Depth],
        vec![Modality::Rgb, Modality::Ir],
        vec![Modality::Rgb, Modality::Depth],
        vec![Modality::Ir, Modality::Depth],
        vec![Modality::Rgb, Modality::Ir, Modality::Depth],
    ]
}

/// Shared base configuration a sweep perturbs one axis of.
#[derive(Debug, Clone)]
pub struct SweepBase {
    pub vit: ViTConfig,
    pub adapter: Option<AdapterConfig>,
    pub finetune: FinetuneConfig,
    pub descriptors: DescriptorConfig,
    /// Pretraining stage configuration; `None` trains from random init.
    /// The mask-ratio / decoder-depth / pretrain-epochs axes require it.
    pub pretrain: Option<M2a2eConfig>,
}

/// The base configuration with grid point `i` of `axis` applied, as used
/// for one sweep run. Public so external drivers (e.g. a multi-process
/// sweep) can reproduce individual points exactly.
pub fn apply_axis_point(
    base: &SweepBase,
    axis: &SweepAxis,
    i: usize,
) -> Result<SweepBase, TensorError> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::DescriptorRecipe(v) => {
            cfg.finetune.input_policy = ModalityInputPolicy::uniform(v[i]);
        }
        SweepAxis::AdapterKind(v) => match cfg.adapter.as_mut() {
            Some(a) => a.kind = v[i],
            None => {
                return Err(TensorError::InvalidArgument(
                    "adapter-kind sweep needs a base adapter config".into(),
                ))
            }
        },
        SweepAxis::AdapterDim(v) => match cfg.adapter.as_mut() {
            Some(a) => a.hidden_dim = v[i],
            None => {
                return Err(TensorError::InvalidArgument(
                    "adapter-dim sweep needs a base adapter config".into(),
                ))
            }
        },
        SweepAxis::AdapterPosition(v) => match cfg.adapter.as_mut() {
            Some(a) => a.position = v[i],
            None => {
                return Err(TensorError::InvalidArgument(
                    "adapter-position sweep needs a base adapter config".into(),
                ))
            }
        },
        SweepAxis::MaskRatio(v) => match cfg.pretrain.as_mut() {
            Some(p) => p.mask_ratio = v[i],
            None => {
                return Err(TensorError::InvalidArgument(
                    "mask-ratio sweep needs a base pretrain config".into(),
                ))
            }
        },
        SweepAxis::DecoderDepth(v) => match cfg.pretrain.as_mut() {
            Some(p) => p.decoder_depth = v[i],
            None => {
                return Err(TensorError::InvalidArgument(
                    "decoder-depth sweep needs a base pretrain config".into(),
                ))
            }
        },
        SweepAxis::PretrainEpochs(v) => match cfg.pretrain.as_mut() {
            Some(p) => {
                if v[i] == 0 {
                    cfg.pretrain = None; // explicit no-pretraining baseline
                } else {
                    p.epochs = v[i];
                }
            }
            None => {
                return Err(TensorError::InvalidArgument(
                    "pretrain-epochs sweep needs a base pretrain config".into(),
                ))
            }
        },
        SweepAxis::FreezePolicy(v) => cfg.finetune.freeze = v[i],
        SweepAxis::ModalitySubset(v) => {
            cfg.finetune.modalities = v[i].clone();
            cfg.vit.modalities = v[i].len();
        }
    }
    Ok(cfg)
}

/// Validate every grid point before any run starts.
pub fn validate_axis(base: &SweepBase, axis: &SweepAxis) -> Result<(), TensorError> {
    if axis.is_empty() {
        return Err(TensorError::InvalidArgument("sweep grid is empty".into()));
    }
    for i in 0..axis.len() {
        let cfg = apply_axis_point(base, axis, i)?;
        cfg.vit.validate()?;
        cfg.finetune.validate()?;
        if let Some(a) = &cfg.adapter {
            a.validate(&cfg.vit)?;
        } else if cfg.finetune.freeze == FreezePolicy::AdaptersOnly {
            return Err(TensorError::InvalidArgument(
                "adapters_only freeze policy needs an adapter config".into(),
            ));
        }
        if let Some(p) = &cfg.pretrain {
            p.validate(&cfg.vit)?;
        }
        if cfg.finetune.modalities.len() != cfg.vit.modalities {
            return Err(TensorError::InvalidArgument(
                "modality subset and model modality count disagree".into(),
            ));
        }
    }
    Ok(())
}

/// Run one grid point end to end (optional pretrain stage, then finetune).
pub fn run_point(
    cfg: &SweepBase,
    ds: &Dataset,
    config_echo: &str,
    out_dir: Option<&Path>,
) -> Result<RunRecord, TensorError> {
    let mut model =
        ViTModel::<f32>::new(cfg.vit.clone(), cfg.adapter.clone(), cfg.finetune.seed)?;
    let provenance = match &cfg.pretrain {
        Some(pcfg) => {
            let outcome = pretrain::<f32>(&cfg.vit, pcfg, ds, cfg.finetune.seed)?;
            model.load_matching(&outcome.params)?;
            Provenance::Pretrained
        }
        None => Provenance::Random,
    };
    finetune(
        &mut model,
        ds,
        &cfg.descriptors,
        &cfg.finetune,
        config_echo,
        provenance,
        out_dir,
    )
}

/// Run every grid point and write `summary.csv` (plus one record directory
/// per point when `out_dir` is given). Returns `(value label, record)`
/// pairs in grid order.
pub fn sweep(
    base: &SweepBase,
    axis: &SweepAxis,
    ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<Vec<(String, RunRecord)>, TensorError> {
    validate_axis(base, axis)?;
    let mut results = Vec::with_capacity(axis.len());
    for i in 0..axis.len() {
        let cfg = apply_axis_point(base, axis, i)?;
        let label = axis.value_label(i);
        let run_dir = out_dir.map(|d| d.join(format!("{}_{}", axis.name(), label)));
        let echo = format!("# sweep point: {} = {}\n", axis.name(), label);
        let record = run_point(&cfg, ds, &echo, run_dir.as_deref())?;
        results.push((label, record));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut csv = String::from(
            "axis,value,selected_epoch,dev_eer,test_apcer,test_bpcer,test_acer,test_hter,tpr\n",
        );
        for (label, r) in &results {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                axis.name(),
                label,
                r.selected_epoch,
                r.report.dev_eer,
                r.report.apcer,
                r.report.bpcer,
                r.report.acer,
                r.report.hter,
                r.report.tpr
            ));
        }
        std::fs::write(dir.join("summary.csv"), csv)?;
    }
    Ok(results)
}
