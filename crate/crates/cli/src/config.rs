//! Run configuration: built-in defaults, optional TOML file, then
//! command-line flags, merged key by key in that order. Every resolved
//! run can be echoed back out as a TOML document that reproduces the
//! same configuration when loaded again.

use std::path::PathBuf;
use std::str::FromStr;

use mmfas_core::adapters::AdapterConfig;
use mmfas_core::descriptors::{DescriptorConfig, Modality, ModalityInputPolicy, Recipe};
use mmfas_core::m2a2e::M2a2eConfig;
use mmfas_core::tensor::TensorError;
use mmfas_core::training::{FinetuneConfig, ThresholdRule};
use mmfas_core::vit::{FreezePolicy, ViTConfig};
use serde::{Deserialize, Serialize};

/// Environment variable consulted for the default dataset root.
pub const DATA_ROOT_ENV: &str = "MMFAS_DATA_ROOT";

// ---------------------------------------------------------------------------
// File schema: every key optional so merging is per key, not per section.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub descriptors: Option<DescriptorSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsSection>,
}

macro_rules! optional_section {
    ($name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Debug, Clone, Default, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(
                #[serde(skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }
    };
}

optional_section!(ModelSection {
    image_size: usize,
    patch_size: usize,
    embed_dim: usize,
    depth: usize,
    heads: usize,
    ffn_ratio: usize,
    modalities: Vec<String>,
    per_modality_pos: bool,
    n_classes: usize,
});

optional_section!(AdapterSection {
    enabled: bool,
    kind: String,
    hidden_dim: usize,
    position: String,
    per_modality_down: bool,
});

optional_section!(DescriptorSection {
    hog_cell_size: usize,
    hog_bins: usize,
    hog_block_cells: usize,
    plgf_radius: usize,
    plgf_denom_floor: f64,
});

optional_section!(PretrainSection {
    mask_ratio: f64,
    decoder_depth: usize,
    decoder_width: usize,
    decoder_heads: usize,
    epochs: usize,
    warmup_epochs: usize,
    lr: f64,
    weight_decay: f64,
    batch_size: usize,
    masked_weight: f64,
    cross_weight: f64,
    per_patch_norm: bool,
    symmetric: bool,
});

optional_section!(FinetuneSection {
    optimizer: String,
    lr: f64,
    weight_decay: f64,
    batch_size: usize,
    max_epochs: usize,
    warmup_epochs: usize,
    patience: usize,
    freeze: String,
    recipe_rgb: String,
    recipe_ir: String,
    recipe_depth: String,
    selection: String,
    bpcer_target: f64,
    keep_last: bool,
    grad_clip: f64,
});

optional_section!(DataSection {
    root: String,
    n_per_class: usize,
    image_size: usize,
});

optional_section!(MetricsSection {
    fpr_target: f64,
});

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, TensorError> {
        toml::from_str(text)
            .map_err(|e| TensorError::InvalidArgument(format!("config file: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TensorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

// ---------------------------------------------------------------------------
// Command-line overrides (one flag per file key).
// ---------------------------------------------------------------------------

/// Configuration flags shared by every training-flavoured subcommand.
/// Each one overrides the same-named file key; scale presets apply first.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Start from the full-scale preset instead of desk defaults.
    #[arg(long, default_value_t = false)]
    pub paper_defaults: bool,
    /// Shrink model, data and run lengths back to desk size (applied
    /// after --paper-defaults; hyperparameters such as learning rates,
    /// the mask ratio and the adapter width are kept).
    #[arg(long, default_value_t = false)]
    pub desk_scale: bool,

    /// Master seed; all randomness derives from it.
    #[arg(long)]
    pub seed: Option<u64>,

    // model
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_ratio: Option<usize>,
    /// Comma-separated modality list in slot order, e.g. "rgb,ir,depth".
    #[arg(long)]
    pub modalities: Option<String>,
    #[arg(long)]
    pub per_modality_pos: Option<bool>,
    #[arg(long)]
    pub n_classes: Option<usize>,

    // adapter
    /// Build the plain backbone without any adapter.
    #[arg(long, default_value_t = false)]
    pub no_adapter: bool,
    #[arg(long)]
    pub adapter_kind: Option<String>,
    #[arg(long)]
    pub adapter_dim: Option<usize>,
    #[arg(long)]
    pub adapter_position: Option<String>,
    #[arg(long)]
    pub per_modality_down: Option<bool>,

    // descriptors
    #[arg(long)]
    pub hog_cell_size: Option<usize>,
    #[arg(long)]
    pub hog_bins: Option<usize>,
    #[arg(long)]
    pub hog_block_cells: Option<usize>,
    #[arg(long)]
    pub plgf_radius: Option<usize>,
    #[arg(long)]
    pub plgf_denom_floor: Option<f64>,

    // pretrain
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub decoder_depth: Option<usize>,
    #[arg(long)]
    pub decoder_width: Option<usize>,
    #[arg(long)]
    pub decoder_heads: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_warmup_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_lr: Option<f64>,
    #[arg(long)]
    pub pretrain_weight_decay: Option<f64>,
    #[arg(long)]
    pub pretrain_batch_size: Option<usize>,
    #[arg(long)]
    pub masked_weight: Option<f64>,
    #[arg(long)]
    pub cross_weight: Option<f64>,
    #[arg(long)]
    pub per_patch_norm: Option<bool>,
    #[arg(long)]
    pub symmetric: Option<bool>,

    // finetune
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub freeze: Option<String>,
    /// One recipe for every modality (shorthand for the three below).
    #[arg(long)]
    pub recipe_all: Option<String>,
    #[arg(long)]
    pub recipe_rgb: Option<String>,
    #[arg(long)]
    pub recipe_ir: Option<String>,
    #[arg(long)]
    pub recipe_depth: Option<String>,
    /// Dev threshold rule: "eer" or "bpcer_target".
    #[arg(long)]
    pub selection: Option<String>,
    #[arg(long)]
    pub bpcer_target: Option<f64>,
    #[arg(long)]
    pub keep_last: Option<bool>,
    /// Global-norm gradient clip; zero or negative disables clipping.
    #[arg(long)]
    pub grad_clip: Option<f64>,

    // data
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub data_image_size: Option<usize>,

    // metrics
    #[arg(long)]
    pub fpr_target: Option<f64>,
}

// ---------------------------------------------------------------------------
// Resolved configuration
// ---------------------------------------------------------------------------

/// Fully resolved run configuration. `finalize` has already propagated
/// the modality list and master seed into every sub-config and validated
/// the whole document.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub vit: ViTConfig,
    pub adapter_enabled: bool,
    pub adapter: AdapterConfig,
    pub descriptors: DescriptorConfig,
    pub pretrain: M2a2eConfig,
    pub finetune: FinetuneConfig,
    pub modalities: Vec<Modality>,
    pub data_root: Option<PathBuf>,
    pub n_per_class: usize,
    pub data_image_size: Option<usize>,
    pub fpr_target: f64,
}

impl Resolved {
    /// Desk-scale built-in defaults: a toy backbone that trains in
    /// seconds on a single core.
    pub fn desk_defaults() -> Self {
        let mut adapter = AdapterConfig::default();
        adapter.hidden_dim = 16;
        let mut finetune = FinetuneConfig::default();
        finetune.freeze = FreezePolicy::AdaptersOnly;
        Resolved {
            seed: 42,
            vit: ViTConfig {
                image_size: 64,
                patch_size: 16,
                embed_dim: 64,
                depth: 2,
                heads: 4,
                ffn_ratio: 4,
                modalities: 3,
                per_modality_pos: true,
                n_classes: 2,
            },
            adapter_enabled: true,
            adapter,
            descriptors: DescriptorConfig::default(),
            pretrain: M2a2eConfig::default(),
            finetune,
            modalities: Modality::ALL.to_vec(),
            data_root: None,
            n_per_class: 25,
            data_image_size: None,
            fpr_target: mmfas_core::metrics::DESK_FPR_TARGET,
        }
    }

    /// Replace hyperparameters with the published full-scale values.
    fn apply_paper_defaults(&mut self) {
        self.vit = ViTConfig::paper_scale();
        self.adapter = AdapterConfig::paper_scale();
        self.pretrain = M2a2eConfig::paper_scale();
        self.finetune = FinetuneConfig::paper_scale();
        self.finetune.freeze = FreezePolicy::AdaptersOnly;
    }

    /// Shrink sizes and run lengths back to desk scale while keeping
    /// learning rates, decay, mask ratio, decoder depth, adapter width
    /// and freeze policy as they are.
    fn apply_desk_scale(&mut self) {
        let desk = Resolved::desk_defaults();
        self.vit.image_size = desk.vit.image_size;
        self.vit.patch_size = desk.vit.patch_size;
        self.vit.embed_dim = desk.vit.embed_dim;
        self.vit.depth = desk.vit.depth;
        self.vit.heads = desk.vit.heads;
        self.vit.ffn_ratio = desk.vit.ffn_ratio;
        self.vit.per_modality_pos = desk.vit.per_modality_pos;
        self.pretrain.decoder_width = desk.pretrain.decoder_width;
        self.pretrain.epochs = desk.pretrain.epochs;
        self.pretrain.warmup_epochs = desk.pretrain.warmup_epochs;
        self.pretrain.batch_size = desk.pretrain.batch_size;
        self.finetune.max_epochs = desk.finetune.max_epochs;
        self.finetune.batch_size = desk.finetune.batch_size;
        self.n_per_class = desk.n_per_class;
        self.data_image_size = None;
        // A 64-wide desk model cannot hold a 64-wide bottleneck.
        if self.adapter.hidden_dim >= self.vit.embed_dim {
            self.adapter.hidden_dim = desk.adapter.hidden_dim;
        }
    }

    pub fn apply_file(&mut self, file: &FileConfig) -> Result<(), TensorError> {
        if let Some(seed) = file.seed {
            self.seed = seed;
        }
        if let Some(m) = &file.model {
            set(&mut self.vit.image_size, m.image_size);
            set(&mut self.vit.patch_size, m.patch_size);
            set(&mut self.vit.embed_dim, m.embed_dim);
            set(&mut self.vit.depth, m.depth);
            set(&mut self.vit.heads, m.heads);
            set(&mut self.vit.ffn_ratio, m.ffn_ratio);
            set(&mut self.vit.per_modality_pos, m.per_modality_pos);
            set(&mut self.vit.n_classes, m.n_classes);
            if let Some(names) = &m.modalities {
                self.modalities = parse_modalities_list(names)?;
            }
        }
        if let Some(a) = &file.adapter {
            set(&mut self.adapter_enabled, a.enabled);
            parse_into(&mut self.adapter.kind, a.kind.as_deref())?;
            set(&mut self.adapter.hidden_dim, a.hidden_dim);
            parse_into(&mut self.adapter.position, a.position.as_deref())?;
            set(&mut self.adapter.per_modality_down, a.per_modality_down);
        }
        if let Some(d) = &file.descriptors {
            set(&mut self.descriptors.hog.cell_size, d.hog_cell_size);
            set(&mut self.descriptors.hog.n_bins, d.hog_bins);
            set(&mut self.descriptors.hog.block_cells, d.hog_block_cells);
            set(&mut self.descriptors.plgf.mask_radius, d.plgf_radius);
            set(&mut self.descriptors.plgf.denom_floor, d.plgf_denom_floor);
        }
        if let Some(p) = &file.pretrain {
            set(&mut self.pretrain.mask_ratio, p.mask_ratio);
            set(&mut self.pretrain.decoder_depth, p.decoder_depth);
            set(&mut self.pretrain.decoder_width, p.decoder_width);
            set(&mut self.pretrain.decoder_heads, p.decoder_heads);
            set(&mut self.pretrain.epochs, p.epochs);
            set(&mut self.pretrain.warmup_epochs, p.warmup_epochs);
            set(&mut self.pretrain.lr, p.lr);
            set(&mut self.pretrain.weight_decay, p.weight_decay);
            set(&mut self.pretrain.batch_size, p.batch_size);
            set(&mut self.pretrain.masked_weight, p.masked_weight);
            set(&mut self.pretrain.cross_weight, p.cross_weight);
            set(&mut self.pretrain.per_patch_norm, p.per_patch_norm);
            set(&mut self.pretrain.symmetric, p.symmetric);
        }
        if let Some(f) = &file.finetune {
            parse_into(&mut self.finetune.optimizer, f.optimizer.as_deref())?;
            set(&mut self.finetune.lr, f.lr);
            set(&mut self.finetune.weight_decay, f.weight_decay);
            set(&mut self.finetune.batch_size, f.batch_size);
            set(&mut self.finetune.max_epochs, f.max_epochs);
            set(&mut self.finetune.warmup_epochs, f.warmup_epochs);
            set(&mut self.finetune.patience, f.patience);
            parse_into(&mut self.finetune.freeze, f.freeze.as_deref())?;
            parse_into(&mut self.finetune.input_policy.rgb, f.recipe_rgb.as_deref())?;
            parse_into(&mut self.finetune.input_policy.ir, f.recipe_ir.as_deref())?;
            parse_into(&mut self.finetune.input_policy.depth, f.recipe_depth.as_deref())?;
            self.apply_selection(f.selection.as_deref(), f.bpcer_target)?;
            set(&mut self.finetune.keep_last, f.keep_last);
            if let Some(c) = f.grad_clip {
                self.finetune.grad_clip = (c > 0.0).then_some(c);
            }
        }
        if let Some(d) = &file.data {
            if let Some(root) = &d.root {
                self.data_root = Some(PathBuf::from(root));
            }
            set(&mut self.n_per_class, d.n_per_class);
            if let Some(s) = d.image_size {
                self.data_image_size = Some(s);
            }
        }
        if let Some(m) = &file.metrics {
            set(&mut self.fpr_target, m.fpr_target);
        }
        Ok(())
    }

    pub fn apply_flags(&mut self, o: &Overrides) -> Result<(), TensorError> {
        set(&mut self.seed, o.seed);
        set(&mut self.vit.image_size, o.image_size);
        set(&mut self.vit.patch_size, o.patch_size);
        set(&mut self.vit.embed_dim, o.embed_dim);
        set(&mut self.vit.depth, o.depth);
        set(&mut self.vit.heads, o.heads);
        set(&mut self.vit.ffn_ratio, o.ffn_ratio);
        set(&mut self.vit.per_modality_pos, o.per_modality_pos);
        set(&mut self.vit.n_classes, o.n_classes);
        if let Some(names) = &o.modalities {
            let parts: Vec<String> = names.split(',').map(|s| s.trim().to_string()).collect();
            self.modalities = parse_modalities_list(&parts)?;
        }
        if o.no_adapter {
            self.adapter_enabled = false;
        }
        parse_into(&mut self.adapter.kind, o.adapter_kind.as_deref())?;
        set(&mut self.adapter.hidden_dim, o.adapter_dim);
        parse_into(&mut self.adapter.position, o.adapter_position.as_deref())?;
        set(&mut self.adapter.per_modality_down, o.per_modality_down);
        set(&mut self.descriptors.hog.cell_size, o.hog_cell_size);
        set(&mut self.descriptors.hog.n_bins, o.hog_bins);
        set(&mut self.descriptors.hog.block_cells, o.hog_block_cells);
        set(&mut self.descriptors.plgf.mask_radius, o.plgf_radius);
        set(&mut self.descriptors.plgf.denom_floor, o.plgf_denom_floor);
        set(&mut self.pretrain.mask_ratio, o.mask_ratio);
        set(&mut self.pretrain.decoder_depth, o.decoder_depth);
        set(&mut self.pretrain.decoder_width, o.decoder_width);
        set(&mut self.pretrain.decoder_heads, o.decoder_heads);
        set(&mut self.pretrain.epochs, o.pretrain_epochs);
        set(&mut self.pretrain.warmup_epochs, o.pretrain_warmup_epochs);
        set(&mut self.pretrain.lr, o.pretrain_lr);
        set(&mut self.pretrain.weight_decay, o.pretrain_weight_decay);
        set(&mut self.pretrain.batch_size, o.pretrain_batch_size);
        set(&mut self.pretrain.masked_weight, o.masked_weight);
        set(&mut self.pretrain.cross_weight, o.cross_weight);
        set(&mut self.pretrain.per_patch_norm, o.per_patch_norm);
        set(&mut self.pretrain.symmetric, o.symmetric);
        parse_into(&mut self.finetune.optimizer, o.optimizer.as_deref())?;
        set(&mut self.finetune.lr, o.lr);
        set(&mut self.finetune.weight_decay, o.weight_decay);
        set(&mut self.finetune.batch_size, o.batch_size);
        set(&mut self.finetune.max_epochs, o.max_epochs);
        set(&mut self.finetune.warmup_epochs, o.warmup_epochs);
        set(&mut self.finetune.patience, o.patience);
        parse_into(&mut self.finetune.freeze, o.freeze.as_deref())?;
        if let Some(r) = o.recipe_all.as_deref() {
            let recipe: Recipe = r.parse()?;
            self.finetune.input_policy = ModalityInputPolicy::uniform(recipe);
        }
        parse_into(&mut self.finetune.input_policy.rgb, o.recipe_rgb.as_deref())?;
        parse_into(&mut self.finetune.input_policy.ir, o.recipe_ir.as_deref())?;
        parse_into(&mut self.finetune.input_policy.depth, o.recipe_depth.as_deref())?;
        self.apply_selection(o.selection.as_deref(), o.bpcer_target)?;
        set(&mut self.finetune.keep_last, o.keep_last);
        if let Some(c) = o.grad_clip {
            self.finetune.grad_clip = (c > 0.0).then_some(c);
        }
        if let Some(root) = &o.data_root {
            self.data_root = Some(root.clone());
        }
        set(&mut self.n_per_class, o.n_per_class);
        if let Some(s) = o.data_image_size {
            self.data_image_size = Some(s);
        }
        set(&mut self.fpr_target, o.fpr_target);
        Ok(())
    }

    fn apply_selection(
        &mut self,
        selection: Option<&str>,
        bpcer_target: Option<f64>,
    ) -> Result<(), TensorError> {
        match selection {
            Some("eer") => self.finetune.selection = ThresholdRule::Eer,
            Some("bpcer_target") => {
                let target = bpcer_target
                    .or(match self.finetune.selection {
                        ThresholdRule::BpcerTarget { target } => Some(target),
                        ThresholdRule::Eer => None,
                    })
                    .ok_or_else(|| {
                        TensorError::InvalidArgument(
                            "selection bpcer_target needs a bpcer_target value".into(),
                        )
                    })?;
                self.finetune.selection = ThresholdRule::BpcerTarget { target };
            }
            Some(other) => {
                return Err(TensorError::InvalidArgument(format!(
                    "unknown selection rule {other:?} (expected eer or bpcer_target)"
                )))
            }
            None => {
                if let Some(target) = bpcer_target {
                    if let ThresholdRule::BpcerTarget { .. } = self.finetune.selection {
                        self.finetune.selection = ThresholdRule::BpcerTarget { target };
                    } else {
                        return Err(TensorError::InvalidArgument(
                            "bpcer_target given but the selection rule is eer".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Propagate cross-section values and validate everything.
    pub fn finalize(&mut self) -> Result<(), TensorError> {
        if self.modalities.is_empty() {
            return Err(TensorError::InvalidArgument(
                "modality list must not be empty".into(),
            ));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].contains(m) {
                return Err(TensorError::InvalidArgument(format!(
                    "duplicate modality {}",
                    m.name()
                )));
            }
        }
        self.vit.modalities = self.modalities.len();
        self.finetune.modalities = self.modalities.clone();
        self.pretrain.modalities = self.modalities.clone();
        self.finetune.seed = self.seed;
        self.finetune.fpr_target = self.fpr_target;
        self.vit.validate()?;
        if self.adapter_enabled {
            self.adapter.validate(&self.vit)?;
        }
        self.finetune.validate()?;
        if !self.fpr_target.is_finite() || !(0.0..=1.0).contains(&self.fpr_target) {
            return Err(TensorError::InvalidArgument(format!(
                "fpr_target must be a fraction in [0, 1], got {}",
                self.fpr_target
            )));
        }
        if self.n_per_class == 0 {
            return Err(TensorError::InvalidArgument(
                "n_per_class must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn adapter_opt(&self) -> Option<AdapterConfig> {
        self.adapter_enabled.then(|| self.adapter.clone())
    }

    /// Image side used when generating data (defaults to the model's).
    pub fn gen_image_size(&self) -> usize {
        self.data_image_size.unwrap_or(self.vit.image_size)
    }

    /// The document that reproduces this configuration: loading it as a
    /// config file with no extra flags resolves to the same values.
    pub fn echo(&self) -> String {
        let file = FileConfig {
            seed: Some(self.seed),
            model: Some(ModelSection {
                image_size: Some(self.vit.image_size),
                patch_size: Some(self.vit.patch_size),
                embed_dim: Some(self.vit.embed_dim),
                depth: Some(self.vit.depth),
                heads: Some(self.vit.heads),
                ffn_ratio: Some(self.vit.ffn_ratio),
                modalities: Some(self.modalities.iter().map(|m| m.name().into()).collect()),
                per_modality_pos: Some(self.vit.per_modality_pos),
                n_classes: Some(self.vit.n_classes),
            }),
            adapter: Some(AdapterSection {
                enabled: Some(self.adapter_enabled),
                kind: Some(self.adapter.kind.as_str().into()),
                hidden_dim: Some(self.adapter.hidden_dim),
                position: Some(self.adapter.position.as_str().into()),
                per_modality_down: Some(self.adapter.per_modality_down),
            }),
            descriptors: Some(DescriptorSection {
                hog_cell_size: Some(self.descriptors.hog.cell_size),
                hog_bins: Some(self.descriptors.hog.n_bins),
                hog_block_cells: Some(self.descriptors.hog.block_cells),
                plgf_radius: Some(self.descriptors.plgf.mask_radius),
                plgf_denom_floor: Some(self.descriptors.plgf.denom_floor),
            }),
            pretrain: Some(PretrainSection {
                mask_ratio: Some(self.pretrain.mask_ratio),
                decoder_depth: Some(self.pretrain.decoder_depth),
                decoder_width: Some(self.pretrain.decoder_width),
                decoder_heads: Some(self.pretrain.decoder_heads),
                epochs: Some(self.pretrain.epochs),
                warmup_epochs: Some(self.pretrain.warmup_epochs),
                lr: Some(self.pretrain.lr),
                weight_decay: Some(self.pretrain.weight_decay),
                batch_size: Some(self.pretrain.batch_size),
                masked_weight: Some(self.pretrain.masked_weight),
                cross_weight: Some(self.pretrain.cross_weight),
                per_patch_norm: Some(self.pretrain.per_patch_norm),
                symmetric: Some(self.pretrain.symmetric),
            }),
            finetune: Some(FinetuneSection {
                optimizer: Some(self.finetune.optimizer.as_str().into()),
                lr: Some(self.finetune.lr),
                weight_decay: Some(self.finetune.weight_decay),
                batch_size: Some(self.finetune.batch_size),
                max_epochs: Some(self.finetune.max_epochs),
                warmup_epochs: Some(self.finetune.warmup_epochs),
                patience: Some(self.finetune.patience),
                freeze: Some(self.finetune.freeze.as_str().into()),
                recipe_rgb: Some(self.finetune.input_policy.rgb.name().into()),
                recipe_ir: Some(self.finetune.input_policy.ir.name().into()),
                recipe_depth: Some(self.finetune.input_policy.depth.name().into()),
                selection: Some(
                    match self.finetune.selection {
                        ThresholdRule::Eer => "eer",
                        ThresholdRule::BpcerTarget { .. } => "bpcer_target",
                    }
                    .into(),
                ),
                bpcer_target: match self.finetune.selection {
                    ThresholdRule::BpcerTarget { target } => Some(target),
                    ThresholdRule::Eer => None,
                },
                keep_last: Some(self.finetune.keep_last),
                grad_clip: self.finetune.grad_clip,
            }),
            data: Some(DataSection {
                root: self
                    .data_root
                    .as_ref()
                    .map(|p| p.display().to_string()),
                n_per_class: Some(self.n_per_class),
                image_size: self.data_image_size,
            }),
            metrics: Some(MetricsSection {
                fpr_target: Some(self.fpr_target),
            }),
        };
        toml::to_string(&file).expect("resolved config serializes")
    }
}

fn set<T: Clone>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn parse_into<T>(slot: &mut T, v: Option<&str>) -> Result<(), TensorError>
where
    T: FromStr<Err = TensorError>,
{
    if let Some(s) = v {
        *slot = s.parse()?;
    }
    Ok(())
}

fn parse_modalities_list(names: &[String]) -> Result<Vec<Modality>, TensorError> {
    names.iter().map(|n| n.parse::<Modality>()).collect()
}

/// Resolve a full configuration: defaults (with optional scale presets),
/// then the config file, then flags — later stages win key by key. The
/// dataset-root environment variable fills in only when nothing else
/// names a root.
pub fn resolve(
    config_path: Option<&std::path::Path>,
    overrides: &Overrides,
) -> Result<Resolved, TensorError> {
    let file = match config_path {
        Some(path) => Some(FileConfig::load(path)?),
        None => None,
    };
    resolve_from(file.as_ref(), overrides)
}

/// Same pipeline as [`resolve`] for an already-parsed document (e.g. the
/// config echo a checkpoint carries).
pub fn resolve_from(
    file: Option<&FileConfig>,
    overrides: &Overrides,
) -> Result<Resolved, TensorError> {
    let mut r = Resolved::desk_defaults();
    if overrides.paper_defaults {
        r.apply_paper_defaults();
    }
    if overrides.desk_scale {
        r.apply_desk_scale();
    }
    if let Some(file) = file {
        r.apply_file(file)?;
    }
    r.apply_flags(overrides)?;
    if r.data_root.is_none() {
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                r.data_root = Some(PathBuf::from(root));
            }
        }
    }
    r.finalize()?;
    Ok(r)
}
