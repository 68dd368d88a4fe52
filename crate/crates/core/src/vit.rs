//! Multimodal vision-transformer backbone.
//!
//! The model is a pre-norm ViT operating on a token sequence laid out as
//! `[class token, modality-1 patches, ..., modality-K patches]`. All
//! modalities share one patch tokenizer (single-channel inputs are aligned
//! to three channels upstream), one class token, and - by default - one
//! positional-embedding table indexed by spatial patch position, so patch
//! `i` of every modality receives the same positional row. A config toggle
//! switches to per-modality positional tables.
//!
//! Parameters live in a name-indexed map so that freeze policies,
//! checkpoints, and the optimizer all speak the same naming scheme:
//!
//! ```text
//! embed.proj.{weight,bias}   patch tokenizer (weight is in x out)
//! embed.cls                  class token, 1 x D
//! embed.pos                  positional table, (1 + n_p) x D (shared)
//! block.{i}.ln1.{weight,bias}
//! block.{i}.attn.{wq,wk,wv,wo}.{weight,bias}
//! block.{i}.ln2.{weight,bias}
//! block.{i}.ffn.{fc1,fc2}.{weight,bias}
//! head.{weight,bias}         binary classification head on the class token
//! adapter.{i}.{site}.*       optional adapter branches (see `adapters`)
//! ```
//!
//! The classification head reads the class token directly after the last
//! block; the model has exactly the parts listed above and no extra closing
//! norm, which keeps the freeze-policy manifests literal ("last block plus
//! head" means exactly those names).

use crate::adapters::{self, AdapterConfig, AdapterPosition, AdapterTrace};
use crate::rng::{stream_rng, STREAM_INIT};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{fmt_shape, Tensor, TensorError};
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Index of the "live" class in the two-logit head output.
pub const LIVE_CLASS: usize = 1;

/// Number of input channels the shared tokenizer expects per modality.
pub const TOKENIZER_CHANNELS: usize = 3;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Square patch side in pixels; must divide `image_size`.
    pub patch_size: usize,
    /// Token width D; must be divisible by `heads`.
    pub embed_dim: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    /// Attention heads per block.
    pub heads: usize,
    /// FFN hidden width as a multiple of `embed_dim`.
    pub ffn_ratio: usize,
    /// Modality count K (1..=3).
    pub modalities: usize,
    /// When true each modality gets its own positional rows instead of
    /// sharing the spatially-indexed table.
    pub per_modality_pos: bool,
    /// Output classes (2: attack / live).
    pub n_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            ffn_ratio: 4,
            modalities: 3,
            per_modality_pos: false,
            n_classes: 2,
        }
    }
}

impl ViTConfig {
    /// Full-scale dimensions (ViT-Base on 224 px inputs).
    pub fn paper_scale() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            ffn_ratio: 4,
            modalities: 3,
            per_modality_pos: false,
            n_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "embed dim {} must be a positive multiple of head count {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(TensorError::InvalidArgument("depth must be >= 1".into()));
        }
        if self.ffn_ratio == 0 {
            return Err(TensorError::InvalidArgument("ffn ratio must be >= 1".into()));
        }
        if self.modalities == 0 || self.modalities > 3 {
            return Err(TensorError::InvalidArgument(format!(
                "modality count {} outside 1..=3",
                self.modalities
            )));
        }
        if self.n_classes < 2 {
            return Err(TensorError::InvalidArgument(
                "need at least two classes".into(),
            ));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patches per modality.
    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Flattened patch vector length fed to the tokenizer.
    pub fn patch_dim(&self) -> usize {
        TOKENIZER_CHANNELS * self.patch_size * self.patch_size
    }

    /// Rows in the positional table.
    pub fn n_pos(&self) -> usize {
        if self.per_modality_pos {
            1 + self.modalities * self.n_patches()
        } else {
            1 + self.n_patches()
        }
    }

    /// Full sequence length 1 + K * n_p.
    pub fn seq_len(&self) -> usize {
        1 + self.modalities * self.n_patches()
    }

    /// Positional row for patch `patch` of modality `modality`.
    pub fn pos_index(&self, modality: usize, patch: usize) -> usize {
        if self.per_modality_pos {
            1 + modality * self.n_patches() + patch
        } else {
            1 + patch
        }
    }
}

/// Which parameters an optimizer may touch. Every policy also trains the
/// classification head; the tokenizer, class token, and positional table
/// are frozen under all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    AllBlocks,
    Last8Blocks,
    Last4Blocks,
    LastBlock,
    HeadOnly,
    AdaptersOnly,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 6] = [
        FreezePolicy::AllBlocks,
        FreezePolicy::Last8Blocks,
        FreezePolicy::Last4Blocks,
        FreezePolicy::LastBlock,
        FreezePolicy::HeadOnly,
        FreezePolicy::AdaptersOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FreezePolicy::AllBlocks => "all_blocks",
            FreezePolicy::Last8Blocks => "last_8_blocks",
            FreezePolicy::Last4Blocks => "last_4_blocks",
            FreezePolicy::LastBlock => "last_block",
            FreezePolicy::HeadOnly => "head_only",
            FreezePolicy::AdaptersOnly => "adapters_only",
        }
    }

    /// How many trailing blocks the policy unfreezes (`None` = not a
    /// block-scoped policy).
    fn trailing_blocks(&self) -> Option<usize> {
        match self {
            FreezePolicy::AllBlocks => Some(usize::MAX),
            FreezePolicy::Last8Blocks => Some(8),
            FreezePolicy::Last4Blocks => Some(4),
            FreezePolicy::LastBlock => Some(1),
            FreezePolicy::HeadOnly | FreezePolicy::AdaptersOnly => None,
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FreezePolicy {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "all_blocks" | "all" => Ok(FreezePolicy::AllBlocks),
            "last_8_blocks" | "last8" => Ok(FreezePolicy::Last8Blocks),
            "last_4_blocks" | "last4" => Ok(FreezePolicy::Last4Blocks),
            "last_block" | "last" => Ok(FreezePolicy::LastBlock),
            "head_only" | "head" => Ok(FreezePolicy::HeadOnly),
            "adapters_only" | "adapters" => Ok(FreezePolicy::AdaptersOnly),
            other => Err(TensorError::InvalidArgument(format!(
                "unknown freeze policy '{other}'"
            ))),
        }
    }
}

/// Tape handles for every model parameter, keyed by parameter name.
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    /// Handle for a parameter that must exist.
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

/// One sample's model-ready input: per modality, a channel-major
/// `3 x H x W` pixel buffer.
#[derive(Debug, Clone)]
pub struct SampleInput<T: Scalar> {
    pub per_modality: Vec<Vec<T>>,
}

/// The backbone plus optional adapters, owning all parameters by name.
#[derive(Debug, Clone)]
pub struct ViTModel<T: Scalar> {
    pub cfg: ViTConfig,
    pub adapter_cfg: Option<AdapterConfig>,
    pub params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ViTModel<T> {
    /// Build a randomly initialized model. Adapter attachment is part of
    /// construction when `adapter` is given, drawing from the same seeded
    /// stream so a config + seed pair pins every parameter bit.
    pub fn new(cfg: ViTConfig, adapter: Option<AdapterConfig>, seed: u64) -> Result<Self, TensorError> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, STREAM_INIT, 0);
        let mut model = ViTModel {
            cfg,
            adapter_cfg: None,
            params: IndexMap::new(),
        };
        model.init_backbone(&mut rng);
        if let Some(acfg) = adapter {
            model.attach_adapters(acfg, &mut rng)?;
        }
        Ok(model)
    }

    fn init_backbone<R: Rng>(&mut self, rng: &mut R) {
        let d = self.cfg.embed_dim;
        let pd = self.cfg.patch_dim();
        let hidden = d * self.cfg.ffn_ratio;
        self.push(
            "embed.proj.weight",
            Tensor::kaiming_uniform(vec![pd, d], pd, rng),
        );
        self.push("embed.proj.bias", Tensor::zeros(vec![d]));
        self.push("embed.cls", Tensor::uniform(vec![1, d], 0.02, rng));
        self.push(
            "embed.pos",
            Tensor::uniform(vec![self.cfg.n_pos(), d], 0.02, rng),
        );
        for i in 0..self.cfg.depth {
            let p = format!("block.{i}");
            self.push(&format!("{p}.ln1.weight"), Tensor::full(vec![d], T::ONE));
            self.push(&format!("{p}.ln1.bias"), Tensor::zeros(vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                self.push(
                    &format!("{p}.attn.{w}.weight"),
                    Tensor::kaiming_uniform(vec![d, d], d, rng),
                );
                self.push(&format!("{p}.attn.{w}.bias"), Tensor::zeros(vec![d]));
            }
            self.push(&format!("{p}.ln2.weight"), Tensor::full(vec![d], T::ONE));
            self.push(&format!("{p}.ln2.bias"), Tensor::zeros(vec![d]));
            self.push(
                &format!("{p}.ffn.fc1.weight"),
                Tensor::kaiming_uniform(vec![d, hidden], d, rng),
            );
            self.push(&format!("{p}.ffn.fc1.bias"), Tensor::zeros(vec![hidden]));
            self.push(
                &format!("{p}.ffn.fc2.weight"),
                Tensor::kaiming_uniform(vec![hidden, d], hidden, rng),
            );
            self.push(&format!("{p}.ffn.fc2.bias"), Tensor::zeros(vec![d]));
        }
        self.push(
            "head.weight",
            Tensor::kaiming_uniform(vec![d, self.cfg.n_classes], d, rng),
        );
        self.push("head.bias", Tensor::zeros(vec![self.cfg.n_classes]));
    }

    /// Register a parameter; construction order fixes serialization order.
    pub(crate) fn push(&mut self, name: &str, t: Tensor<T>) {
        let prev = self.params.insert(name.to_string(), t.requires_grad(true));
        debug_assert!(prev.is_none(), "duplicate parameter '{name}'");
    }

    /// Add adapter branches to every block at the configured sites.
    /// Rejected when the model already has adapters.
    pub fn attach_adapters<R: Rng>(
        &mut self,
        acfg: AdapterConfig,
        rng: &mut R,
    ) -> Result<(), TensorError> {
        if self.adapter_cfg.is_some() {
            return Err(TensorError::InvalidArgument(
                "model already has adapters attached".into(),
            ));
        }
        acfg.validate(&self.cfg)?;
        adapters::init_params(self, &acfg, rng);
        self.adapter_cfg = Some(acfg);
        Ok(())
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Register every parameter on a tape. Parameters whose stored
    /// `requires_grad` flag is off enter as constants, so `named_grads`
    /// reports exactly the trainable set.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        let mut vars = IndexMap::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let v = if t.requires_grad {
                tape.param(name, t)
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Bindings { vars }
    }

    /// The exact set of parameter names a policy allows the optimizer to
    /// update. Block-scoped policies clamp at the model's actual depth.
    pub fn trainable_manifest(&self, policy: FreezePolicy) -> Result<Vec<String>, TensorError> {
        if policy == FreezePolicy::AdaptersOnly && self.adapter_cfg.is_none() {
            return Err(TensorError::InvalidArgument(
                "adapters_only freeze policy requires a model with adapters".into(),
            ));
        }
        let first_block = policy
            .trailing_blocks()
            .map(|k| self.cfg.depth.saturating_sub(k));
        let mut names = Vec::new();
        for name in self.params.keys() {
            let trainable = if name.starts_with("head.") {
                true
            } else if let Some(rest) = name.strip_prefix("block.") {
                match first_block {
                    Some(first) => {
                        let idx: usize = rest
                            .split('.')
                            .next()
                            .and_then(|s| s.parse().ok())
                            .expect("block parameter names carry an index");
                        idx >= first
                    }
                    None => false,
                }
            } else if name.starts_with("adapter.") {
                policy == FreezePolicy::AdaptersOnly
            } else {
                // embed.* stays frozen under every policy.
                false
            };
            if trainable {
                names.push(name.clone());
            }
        }
        Ok(names)
    }

    /// Flip `requires_grad` so only the policy's manifest is trainable.
    /// Returns the manifest.
    pub fn apply_freeze(&mut self, policy: FreezePolicy) -> Result<Vec<String>, TensorError> {
        let manifest = self.trainable_manifest(policy)?;
        for t in self.params.values_mut() {
            t.requires_grad = false;
        }
        for name in &manifest {
            self.params
                .get_mut(name)
                .expect("manifest names come from the parameter map")
                .requires_grad = true;
        }
        Ok(manifest)
    }

    /// Count of parameters trainable under a policy.
    pub fn trainable_param_count(&self, policy: FreezePolicy) -> Result<usize, TensorError> {
        Ok(self
            .trainable_manifest(policy)?
            .iter()
            .map(|n| self.params[n].numel())
            .sum())
    }

    /// Copy every same-named, same-shaped tensor from `source` into this
    /// model. Names missing from `source` keep their current values;
    /// extra names in `source` are ignored. A shape clash is an error.
    pub fn load_matching(
        &mut self,
        source: &IndexMap<String, Tensor<T>>,
    ) -> Result<usize, TensorError> {
        let mut loaded = 0;
        for (name, t) in self.params.iter_mut() {
            if let Some(src) = source.get(name) {
                if src.shape != t.shape {
                    return Err(TensorError::Shape(format!(
                        "parameter '{}' has shape {}, stored tensor has {}",
                        name,
                        fmt_shape(&t.shape),
                        fmt_shape(&src.shape)
                    )));
                }
                t.data.clone_from(&src.data);
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// Extract flattened patch rows for one modality image.
    ///
    /// `pixels` is channel-major `3 x H x W`; `patches` lists patch indices
    /// (row-major over the patch grid) selecting and ordering the rows.
    /// Each row is the patch's pixels, channel-major then row-major within
    /// the patch.
    pub fn patch_rows(&self, pixels: &[T], patches: &[usize]) -> Result<Tensor<T>, TensorError> {
        let (s, p, g) = (self.cfg.image_size, self.cfg.patch_size, self.cfg.grid_side());
        let expect = TOKENIZER_CHANNELS * s * s;
        if pixels.len() != expect {
            return Err(TensorError::Shape(format!(
                "modality input has {} values, expected {} (3 x {s} x {s})",
                pixels.len(),
                expect
            )));
        }
        let pd = self.cfg.patch_dim();
        let mut data = Vec::with_capacity(patches.len() * pd);
        for &pi in patches {
            if pi >= g * g {
                return Err(TensorError::InvalidArgument(format!(
                    "patch index {pi} outside grid of {} patches",
                    g * g
                )));
            }
            let (py, px) = (pi / g, pi % g);
            for c in 0..TOKENIZER_CHANNELS {
                for dy in 0..p {
                    let row = py * p + dy;
                    let base = c * s * s + row * s + px * p;
                    data.extend_from_slice(&pixels[base..base + p]);
                }
            }
        }
        Tensor::new(vec![patches.len(), pd], data)
    }

    /// Tokenize all modalities and run the blocks; returns the full
    /// post-block sequence `(1 + K * n_p) x D`.
    ///
    /// `orders`, when given, supplies one permutation of `0..n_p` per
    /// modality: token rows and their positional rows are reordered
    /// together (used by layout-invariance checks).
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        input: &SampleInput<T>,
        orders: Option<&[Vec<usize>]>,
        mut trace: Option<&mut AdapterTrace<T>>,
    ) -> Result<Var, TensorError> {
        let k = self.cfg.modalities;
        if input.per_modality.len() != k {
            return Err(TensorError::Shape(format!(
                "sample has {} modalities, model expects {k}",
                input.per_modality.len()
            )));
        }
        let n_p = self.cfg.n_patches();
        let identity: Vec<usize> = (0..n_p).collect();
        let proj_w = binds.get("embed.proj.weight");
        let proj_b = binds.get("embed.proj.bias");
        let pos = binds.get("embed.pos");

        // Class token plus its positional row.
        let cls = binds.get("embed.cls");
        let pos0 = tape.gather_rows(pos, &[0])?;
        let cls_tok = tape.add(cls, pos0)?;

        let mut parts = vec![cls_tok];
        for (m, pixels) in input.per_modality.iter().enumerate() {
            let order: &[usize] = match orders {
                Some(os) => {
                    let o = &os[m];
                    if o.len() != n_p {
                        return Err(TensorError::InvalidArgument(format!(
                            "modality {m} order lists {} patches, expected {n_p}",
                            o.len()
                        )));
                    }
                    o
                }
                None => &identity,
            };
            let rows = self.patch_rows(pixels, order)?;
            let x = tape.constant(rows);
            let tok = tape.matmul(x, proj_w)?;
            let tok = tape.add_last_axis_bias(tok, proj_b)?;
            let pos_idx: Vec<usize> = order.iter().map(|&pi| self.cfg.pos_index(m, pi)).collect();
            let pos_rows = tape.gather_rows(pos, &pos_idx)?;
            let tok = tape.add(tok, pos_rows)?;
            parts.push(tok);
        }
        let mut x = tape.concat(&parts, 0)?;
        for i in 0..self.cfg.depth {
            x = self.block_forward(tape, binds, i, x, trace.as_deref_mut())?;
        }
        Ok(x)
    }

    /// One pre-norm transformer block, with adapter branches when attached:
    /// `x <- x + MHSA(LN1(x)) [+ A(LN1(x))]`, then
    /// `x <- x + FFN(LN2(x)) [+ A(LN2(x))]`.
    pub(crate) fn block_forward(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        i: usize,
        x: Var,
        mut trace: Option<&mut AdapterTrace<T>>,
    ) -> Result<Var, TensorError> {
        let p = format!("block.{i}");
        let h1 = tape.layer_norm(
            x,
            binds.get(&format!("{p}.ln1.weight")),
            binds.get(&format!("{p}.ln1.bias")),
        )?;
        let attn = mhsa(tape, binds, &p, h1, self.cfg.heads)?;
        let mut x = tape.add(x, attn)?;
        if let Some(acfg) = self.adapter_site(AdapterPosition::Mhsa) {
            let branch =
                adapters::branch_forward(tape, binds, &self.cfg, acfg, i, "mhsa", h1, trace.as_deref_mut())?;
            x = tape.add(x, branch)?;
        }
        let h2 = tape.layer_norm(
            x,
            binds.get(&format!("{p}.ln2.weight")),
            binds.get(&format!("{p}.ln2.bias")),
        )?;
        let f = tape.matmul(h2, binds.get(&format!("{p}.ffn.fc1.weight")))?;
        let f = tape.add_last_axis_bias(f, binds.get(&format!("{p}.ffn.fc1.bias")))?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, binds.get(&format!("{p}.ffn.fc2.weight")))?;
        let f = tape.add_last_axis_bias(f, binds.get(&format!("{p}.ffn.fc2.bias")))?;
        x = tape.add(x, f)?;
        if let Some(acfg) = self.adapter_site(AdapterPosition::Ffn) {
            let branch =
                adapters::branch_forward(tape, binds, &self.cfg, acfg, i, "ffn", h2, trace)?;
            x = tape.add(x, branch)?;
        }
        Ok(x)
    }

    /// The adapter config if an adapter sits at `site`.
    fn adapter_site(&self, site: AdapterPosition) -> Option<&AdapterConfig> {
        self.adapter_cfg
            .as_ref()
            .filter(|c| c.position.covers(site))
    }

    /// Linear head on the class token only.
    pub fn classify(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        sequence: Var,
    ) -> Result<Var, TensorError> {
        let cls = tape.slice(sequence, 0, 0, 1)?;
        let logits = tape.matmul(cls, binds.get("head.weight"))?;
        tape.add_last_axis_bias(logits, binds.get("head.bias"))
    }

    /// Tokenize, encode, classify: one sample to a `1 x n_classes` logit row.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        input: &SampleInput<T>,
        trace: Option<&mut AdapterTrace<T>>,
    ) -> Result<Var, TensorError> {
        let seq = self.encode(tape, binds, input, None, trace)?;
        self.classify(tape, binds, seq)
    }
}

/// Softmax live-class probability of a single logit row, in f64.
pub fn live_score<T: Scalar>(logits: &[T]) -> f64 {
    let vals: Vec<f64> = logits.iter().map(|v| v.to_f64()).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps[LIVE_CLASS] / sum
}

/// Multi-head self-attention for one sequence `L x D`.
pub(crate) fn mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var, TensorError> {
    let d = tape.shape(x)[1];
    let dh = d / heads;
    let q = proj(tape, binds, prefix, "wq", x)?;
    let k = proj(tape, binds, prefix, "wk", x)?;
    let v = proj(tape, binds, prefix, "wv", x)?;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax(scores, 1)?;
        head_outs.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat(&head_outs, 1)?;
    proj(tape, binds, prefix, "wo", merged)
}

fn proj<T: Scalar>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    prefix: &str,
    name: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let y = tape.matmul(x, binds.get(&format!("{prefix}.attn.{name}.weight")))?;
    tape.add_last_axis_bias(y, binds.get(&format!("{prefix}.attn.{name}.bias")))
}
