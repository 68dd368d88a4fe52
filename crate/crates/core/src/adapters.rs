//! Adapter branches for parameter-efficient finetuning.
//!
//! An adapter is a small trainable module added in parallel to a frozen
//! block sublayer: the branch reads the sublayer's normalized input and its
//! output is added to the residual stream. Five kinds are implemented:
//!
//! * `VanillaFc` - per-token bottleneck: down-project, GELU, up-project.
//!   No spatial or cross-modal mixing.
//! * `Conv` - each modality's tokens are restored to their 2-D patch grid,
//!   squeezed `D -> D'` by a 1x1 conv + GELU, mixed spatially by a 3x3
//!   conv `D' -> D'`, and expanded back `D' -> D` by a 1x1 conv + GELU.
//!   One parameter set shared by (applied independently to) every modality.
//! * `MultimodalConv` - like `Conv` but the squeezed grids of all K
//!   modalities are stacked channel-wise and the 3x3 conv maps
//!   `D'*K -> D'`; the shared output map is expanded once per modality.
//! * `MultimodalConvHuge` - the 3x3 conv maps `D'*K -> D'*K` and modality
//!   `k` expands its own `D'` channel slice.
//! * `Ama` - `MultimodalConv` plus an adaptive gate: global average pooling
//!   of the stacked `D'*K` map feeds a linear layer producing K logits,
//!   and `sigmoid` of logit `k` scales the shared map for modality `k`.
//!   With K = 1 no gate is constructed, making the module structurally
//!   identical to `Conv`.
//!
//! The class token bypasses the spatial path everywhere in the conv
//! family: it is squeezed and expanded only (1x1 convs on a 1x1 grid).
//! GELU follows both the squeeze and the expansion.
//!
//! Up-projections initialize to zero (weight and bias), so a freshly
//! attached adapter leaves the model's forward pass exactly unchanged.
//!
//! Parameter names: `adapter.{block}.{site}.{layer}.{weight,bias}` with
//! `site` in `{mhsa, ffn}` and `layer` in `{down, conv2d, ada, up}`
//! (`down.{k}.*` when per-modality squeezes are enabled).

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::vit::{Bindings, ViTConfig, ViTModel};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    VanillaFc,
    Conv,
    MultimodalConv,
    MultimodalConvHuge,
    Ama,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [
        AdapterKind::VanillaFc,
        AdapterKind::Conv,
        AdapterKind::MultimodalConv,
        AdapterKind::MultimodalConvHuge,
        AdapterKind::Ama,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterKind::VanillaFc => "vanilla_fc",
            AdapterKind::Conv => "conv",
            AdapterKind::MultimodalConv => "multimodal_conv",
            AdapterKind::MultimodalConvHuge => "multimodal_conv_huge",
            AdapterKind::Ama => "ama",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla_fc" | "fc" => Ok(AdapterKind::VanillaFc),
            "conv" => Ok(AdapterKind::Conv),
            "multimodal_conv" | "mm_conv" => Ok(AdapterKind::MultimodalConv),
            "multimodal_conv_huge" | "mm_conv_huge" | "huge" => Ok(AdapterKind::MultimodalConvHuge),
            "ama" => Ok(AdapterKind::Ama),
            other => Err(TensorError::InvalidArgument(format!(
                "unknown adapter kind '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPosition {
    Mhsa,
    Ffn,
    MhsaAndFfn,
}

impl AdapterPosition {
    pub const ALL: [AdapterPosition; 3] = [
        AdapterPosition::Mhsa,
        AdapterPosition::Ffn,
        AdapterPosition::MhsaAndFfn,
    ];

    /// Site names this position places adapters at, in block order.
    pub fn sites(&self) -> &'static [&'static str] {
        match self {
            AdapterPosition::Mhsa => &["mhsa"],
            AdapterPosition::Ffn => &["ffn"],
            AdapterPosition::MhsaAndFfn => &["mhsa", "ffn"],
        }
    }

    /// Whether this position includes the given single-site position.
    pub fn covers(&self, single: AdapterPosition) -> bool {
        match self {
            AdapterPosition::MhsaAndFfn => {
                matches!(single, AdapterPosition::Mhsa | AdapterPosition::Ffn)
            }
            p => *p == single,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterPosition::Mhsa => "mhsa",
            AdapterPosition::Ffn => "ffn",
            AdapterPosition::MhsaAndFfn => "mhsa_and_ffn",
        }
    }
}

impl fmt::Display for AdapterPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterPosition {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mhsa" => Ok(AdapterPosition::Mhsa),
            "ffn" => Ok(AdapterPosition::Ffn),
            "mhsa_and_ffn" | "both" => Ok(AdapterPosition::MhsaAndFfn),
            other => Err(TensorError::InvalidArgument(format!(
                "unknown adapter position '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    /// Bottleneck width D'; must stay below the model's embed dim.
    pub hidden_dim: usize,
    pub position: AdapterPosition,
    /// Give each modality its own squeeze parameters instead of sharing
    /// one set (conv family only; the class token uses modality 0's).
    pub per_modality_down: bool,
    /// Test hook: run `Ama` with every modality gate pinned to one, which
    /// reduces it to `MultimodalConv` over the same remaining parameters.
    #[serde(skip)]
    pub(crate) force_unit_weights: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            kind: AdapterKind::Ama,
            hidden_dim: 16,
            position: AdapterPosition::MhsaAndFfn,
            per_modality_down: false,
            force_unit_weights: false,
        }
    }
}

impl AdapterConfig {
    /// Full-scale bottleneck width.
    pub fn paper_scale() -> Self {
        AdapterConfig {
            hidden_dim: 64,
            ..AdapterConfig::default()
        }
    }

    pub fn validate(&self, vit: &ViTConfig) -> Result<(), TensorError> {
        if self.hidden_dim == 0 || self.hidden_dim >= vit.embed_dim {
            return Err(TensorError::InvalidArgument(format!(
                "adapter hidden dim {} must be in 1..{}",
                self.hidden_dim, vit.embed_dim
            )));
        }
        Ok(())
    }
}

/// Per-call records captured during adapter forwards: one row of K gate
/// values for every `Ama` branch evaluated (K >= 2 only).
#[derive(Debug, Default, Clone)]
pub struct AdapterTrace<T: Scalar> {
    pub weights: Vec<Vec<T>>,
}

fn down_name(prefix: &str, per_modality: bool, m: usize) -> String {
    if per_modality {
        format!("{prefix}.down.{m}")
    } else {
        format!("{prefix}.down")
    }
}

/// Create the parameter tensors for every adapter instance of `acfg`.
/// Squeeze/mixing layers draw Kaiming-uniform values; expansions start at
/// zero so attachment is forward-neutral.
pub(crate) fn init_params<T: Scalar, R: Rng>(
    model: &mut ViTModel<T>,
    acfg: &AdapterConfig,
    rng: &mut R,
) {
    let d = model.cfg.embed_dim;
    let dp = acfg.hidden_dim;
    let k = model.cfg.modalities;
    for block in 0..model.cfg.depth {
        for site in acfg.position.sites() {
            let prefix = format!("adapter.{block}.{site}");
            match acfg.kind {
                AdapterKind::VanillaFc => {
                    model.push(
                        &format!("{prefix}.down.weight"),
                        Tensor::kaiming_uniform(vec![d, dp], d, rng),
                    );
                    model.push(&format!("{prefix}.down.bias"), Tensor::zeros(vec![dp]));
                    model.push(&format!("{prefix}.up.weight"), Tensor::zeros(vec![dp, d]));
                    model.push(&format!("{prefix}.up.bias"), Tensor::zeros(vec![d]));
                }
                _ => {
                    let downs = if acfg.per_modality_down { k } else { 1 };
                    for m in 0..downs {
                        let dn = down_name(&prefix, acfg.per_modality_down, m);
                        model.push(
                            &format!("{dn}.weight"),
                            Tensor::kaiming_uniform(vec![dp, d, 1, 1], d, rng),
                        );
                        model.push(&format!("{dn}.bias"), Tensor::zeros(vec![dp]));
                    }
                    let (in_c, out_c) = match acfg.kind {
                        AdapterKind::Conv => (dp, dp),
                        AdapterKind::MultimodalConv | AdapterKind::Ama => (dp * k, dp),
                        AdapterKind::MultimodalConvHuge => (dp * k, dp * k),
                        AdapterKind::VanillaFc => unreachable!(),
                    };
                    model.push(
                        &format!("{prefix}.conv2d.weight"),
                        Tensor::kaiming_uniform(vec![out_c, in_c, 3, 3], in_c * 9, rng),
                    );
                    model.push(&format!("{prefix}.conv2d.bias"), Tensor::zeros(vec![out_c]));
                    if acfg.kind == AdapterKind::Ama && k >= 2 {
                        model.push(
                            &format!("{prefix}.ada.weight"),
                            Tensor::kaiming_uniform(vec![dp * k, k], dp * k, rng),
                        );
                        model.push(&format!("{prefix}.ada.bias"), Tensor::zeros(vec![k]));
                    }
                    model.push(
                        &format!("{prefix}.up.weight"),
                        Tensor::zeros(vec![d, dp, 1, 1]),
                    );
                    model.push(&format!("{prefix}.up.bias"), Tensor::zeros(vec![d]));
                }
            }
        }
    }
}

/// Parameters in one adapter instance, from the declared layer shapes.
pub fn instance_param_count(acfg: &AdapterConfig, vit: &ViTConfig) -> usize {
    let d = vit.embed_dim;
    let dp = acfg.hidden_dim;
    let k = vit.modalities;
    let downs = if acfg.per_modality_down && acfg.kind != AdapterKind::VanillaFc {
        k
    } else {
        1
    };
    match acfg.kind {
        AdapterKind::VanillaFc => d * dp + dp + dp * d + d,
        AdapterKind::Conv => downs * (dp * d + dp) + (dp * dp * 9 + dp) + (d * dp + d),
        AdapterKind::MultimodalConv => {
            downs * (dp * d + dp) + (dp * (dp * k) * 9 + dp) + (d * dp + d)
        }
        AdapterKind::Ama => {
            let gate = if k >= 2 { (dp * k) * k + k } else { 0 };
            downs * (dp * d + dp) + (dp * (dp * k) * 9 + dp) + gate + (d * dp + d)
        }
        AdapterKind::MultimodalConvHuge => {
            downs * (dp * d + dp) + ((dp * k) * (dp * k) * 9 + dp * k) + (d * dp + d)
        }
    }
}

/// Adapter parameters across the whole model (instances x per-instance).
pub fn total_param_count(acfg: &AdapterConfig, vit: &ViTConfig) -> usize {
    vit.depth * acfg.position.sites().len() * instance_param_count(acfg, vit)
}

/// Evaluate one adapter branch on the sublayer's normalized input
/// (`x`: `(1 + K * n_p) x D`), returning a same-shaped residual branch.
#[allow(clippy::too_many_arguments)]
pub fn branch_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    vit: &ViTConfig,
    acfg: &AdapterConfig,
    block: usize,
    site: &str,
    x: Var,
    trace: Option<&mut AdapterTrace<T>>,
) -> Result<Var, TensorError> {
    let prefix = format!("adapter.{block}.{site}");
    match acfg.kind {
        AdapterKind::VanillaFc => {
            let h = tape.matmul(x, binds.get(&format!("{prefix}.down.weight")))?;
            let h = tape.add_last_axis_bias(h, binds.get(&format!("{prefix}.down.bias")))?;
            let h = tape.gelu(h);
            let y = tape.matmul(h, binds.get(&format!("{prefix}.up.weight")))?;
            tape.add_last_axis_bias(y, binds.get(&format!("{prefix}.up.bias")))
        }
        _ => conv_family_forward(tape, binds, vit, acfg, &prefix, x, trace),
    }
}

fn conv_family_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    vit: &ViTConfig,
    acfg: &AdapterConfig,
    prefix: &str,
    x: Var,
    trace: Option<&mut AdapterTrace<T>>,
) -> Result<Var, TensorError> {
    let (d, dp, k) = (vit.embed_dim, acfg.hidden_dim, vit.modalities);
    let (n_p, g) = (vit.n_patches(), vit.grid_side());
    let expect_len = 1 + k * n_p;
    if tape.shape(x) != [expect_len, d] {
        return Err(TensorError::Shape(format!(
            "adapter expects a {expect_len} x {d} token sequence, got {}",
            crate::tensor::fmt_shape(tape.shape(x))
        )));
    }
    let up_w = binds.get(&format!("{prefix}.up.weight"));
    let up_b = binds.get(&format!("{prefix}.up.bias"));

    // Squeeze every modality's restored grid to D' channels.
    let mut squeezed = Vec::with_capacity(k);
    for m in 0..k {
        let dn = down_name(prefix, acfg.per_modality_down, m);
        let grp = tape.slice(x, 0, 1 + m * n_p, n_p)?;
        let grid = tape.transpose(grp)?;
        let grid = tape.reshape(grid, &[d, g, g])?;
        let s = tape.conv2d(grid, binds.get(&format!("{dn}.weight")), 1, 0)?;
        let s = tape.add_channel_bias(s, binds.get(&format!("{dn}.bias")))?;
        squeezed.push(tape.gelu(s));
    }

    // Spatial (and cross-modal) mixing to one D'-channel map per modality.
    let w2d = binds.get(&format!("{prefix}.conv2d.weight"));
    let b2d = binds.get(&format!("{prefix}.conv2d.bias"));
    let maps: Vec<Var> = match acfg.kind {
        AdapterKind::Conv => {
            let mut out = Vec::with_capacity(k);
            for &s in &squeezed {
                let c = tape.conv2d(s, w2d, 1, 1)?;
                out.push(tape.add_channel_bias(c, b2d)?);
            }
            out
        }
        AdapterKind::MultimodalConv | AdapterKind::Ama | AdapterKind::MultimodalConvHuge => {
            let stacked = if k == 1 {
                squeezed[0]
            } else {
                tape.concat(&squeezed, 0)?
            };
            // The gates are a function of the pre-mixing stacked map.
            let gates = if acfg.kind == AdapterKind::Ama && k >= 2 && !acfg.force_unit_weights {
                let pooled = tape.gap2d(stacked)?;
                let pooled = tape.reshape(pooled, &[1, dp * k])?;
                let lg = tape.matmul(pooled, binds.get(&format!("{prefix}.ada.weight")))?;
                let lg = tape.add_last_axis_bias(lg, binds.get(&format!("{prefix}.ada.bias")))?;
                let w = tape.sigmoid(lg);
                if let Some(tr) = trace {
                    tr.weights.push(tape.data(w).to_vec());
                }
                Some(w)
            } else {
                None
            };
            let mixed = tape.conv2d(stacked, w2d, 1, 1)?;
            let mixed = tape.add_channel_bias(mixed, b2d)?;
            let mut out = Vec::with_capacity(k);
            for m in 0..k {
                let map = match acfg.kind {
                    AdapterKind::MultimodalConvHuge => tape.slice(mixed, 0, m * dp, dp)?,
                    AdapterKind::Ama => match gates {
                        Some(w) => {
                            let wm = tape.slice(w, 1, m, 1)?;
                            tape.scale_by(mixed, wm)?
                        }
                        None => mixed,
                    },
                    _ => mixed,
                };
                out.push(map);
            }
            out
        }
        AdapterKind::VanillaFc => unreachable!(),
    };

    // Class token: squeeze and expand only, on a 1x1 grid.
    let cls = tape.slice(x, 0, 0, 1)?;
    let cls_grid = tape.reshape(cls, &[d, 1, 1])?;
    let dn0 = down_name(prefix, acfg.per_modality_down, 0);
    let c = tape.conv2d(cls_grid, binds.get(&format!("{dn0}.weight")), 1, 0)?;
    let c = tape.add_channel_bias(c, binds.get(&format!("{dn0}.bias")))?;
    let c = tape.gelu(c);
    let c = tape.conv2d(c, up_w, 1, 0)?;
    let c = tape.add_channel_bias(c, up_b)?;
    let c = tape.gelu(c);
    let cls_out = tape.reshape(c, &[1, d])?;

    let mut parts = Vec::with_capacity(1 + k);
    parts.push(cls_out);
    for map in maps {
        let u = tape.conv2d(map, up_w, 1, 0)?;
        let u = tape.add_channel_bias(u, up_b)?;
        let u = tape.gelu(u);
        let u = tape.reshape(u, &[d, n_p])?;
        parts.push(tape.transpose(u)?);
    }
    tape.concat(&parts, 0)
}
