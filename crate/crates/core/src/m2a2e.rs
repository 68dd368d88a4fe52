//! Modality-asymmetric masked-autoencoder pretraining.
//!
//! Each step samples one modality, hides a fraction of its patches, and
//! feeds only the class token plus the visible tokens of that modality to
//! the encoder. One unshared decoder per modality then predicts pixel
//! patches, and the loss sums (a) the mean-squared error on the hidden
//! patches of the sampled modality with (b) the mean-squared error on the
//! full images of every other modality — so the encoder is pushed to carry
//! cross-modal structure in its latent.
//!
//! Decoders are throwaway: a linear projection to `decoder_width`, a
//! learned mask token spliced in at hidden positions, fixed sinusoidal
//! positional rows, `decoder_depth` pre-norm transformer blocks, and a
//! linear head back to `patch_size² · channels` pixels. The class token is
//! dropped before decoding. Targets are raw pixels (optionally normalized
//! per patch), with the original channel count per sensor.
//!
//! A `symmetric` flag degenerates the scheme into a joint-masking
//! baseline: the same patch positions are hidden in every modality, the
//! encoder sees all modalities' visible tokens, and each decoder is
//! scored on its own hidden patches only.

use crate::data::{raw_input, Dataset, MultimodalSample};
use crate::descriptors::Modality;
use crate::image::PlanarImage;
use crate::rng::{stream_rng, STREAM_DECODER_INIT, STREAM_MASK, STREAM_PRETRAIN_SHUFFLE};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::training::{adamw_step, lr_schedule, AdamState};
use crate::vit::{mhsa, Bindings, SampleInput, ViTConfig, ViTModel};
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Decoder MLPs use the standard 4x expansion.
const DECODER_FFN_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct M2a2eConfig {
    /// Fraction of patches hidden in the sampled modality.
    pub mask_ratio: f64,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub modalities: Vec<Modality>,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Weight on the hidden-patch term (1.0 keeps the plain sum).
    pub masked_weight: f64,
    /// Weight on each cross-modal full-image term.
    pub cross_weight: f64,
    /// Normalize each target patch to zero mean / unit variance.
    pub per_patch_norm: bool,
    /// Joint-masking baseline: same hidden positions in every modality,
    /// all modalities encoded, each scored on its own hidden patches.
    pub symmetric: bool,
}

impl Default for M2a2eConfig {
    fn default() -> Self {
        M2a2eConfig {
            mask_ratio: 0.40,
            decoder_depth: 4,
            decoder_width: 64,
            decoder_heads: 4,
            modalities: Modality::ALL.to_vec(),
            epochs: 20,
            warmup_epochs: 2,
            lr: 1.5e-4,
            weight_decay: 0.05,
            batch_size: 16,
            masked_weight: 1.0,
            cross_weight: 1.0,
            per_patch_norm: false,
            symmetric: false,
        }
    }
}

impl M2a2eConfig {
    /// Full-scale recipe: wide decoder, 400 epochs with a 40-epoch warmup,
    /// batch 64.
    pub fn paper_scale() -> Self {
        M2a2eConfig {
            decoder_width: 512,
            epochs: 400,
            warmup_epochs: 40,
            batch_size: 64,
            ..M2a2eConfig::default()
        }
    }

    pub fn validate(&self, vit: &ViTConfig) -> Result<(), TensorError> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(TensorError::InvalidArgument(format!(
                "mask ratio must lie strictly between 0 and 1, got {}",
                self.mask_ratio
            )));
        }
        if self.decoder_depth == 0 {
            return Err(TensorError::InvalidArgument(
                "decoder depth must be >= 1".into(),
            ));
        }
        if self.decoder_heads == 0 || self.decoder_width % self.decoder_heads != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "decoder width {} must be a positive multiple of its {} heads",
                self.decoder_width, self.decoder_heads
            )));
        }
        if self.decoder_width % 2 != 0 {
            return Err(TensorError::InvalidArgument(
                "decoder width must be even (sinusoidal rows come in sin/cos pairs)".into(),
            ));
        }
        let mut mods = self.modalities.clone();
        mods.sort();
        mods.dedup();
        if mods.len() != self.modalities.len() {
            return Err(TensorError::InvalidArgument(
                "modality set contains duplicates".into(),
            ));
        }
        if self.modalities.len() < 2 {
            return Err(TensorError::InvalidArgument(
                "reconstruction pretraining needs at least two modalities".into(),
            ));
        }
        if self.modalities.len() != vit.modalities {
            return Err(TensorError::InvalidArgument(format!(
                "config lists {} modalities but the encoder expects {}",
                self.modalities.len(),
                vit.modalities
            )));
        }
        if self.epochs == 0 {
            return Err(TensorError::InvalidArgument("need at least one epoch".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(TensorError::InvalidArgument(format!(
                "warmup of {} epochs exceeds the {} total",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(TensorError::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TensorError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, w) in [("masked", self.masked_weight), ("cross", self.cross_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(TensorError::InvalidArgument(format!(
                    "{name} term weight must be finite and non-negative, got {w}"
                )));
            }
        }
        // Fail fast on a degenerate plan instead of erroring mid-epoch.
        let m = mask_count(self.mask_ratio, vit.n_patches());
        if m == 0 || m == vit.n_patches() {
            return Err(TensorError::InvalidArgument(format!(
                "mask ratio {} hides {m} of {} patches — nothing to reconstruct or nothing to see",
                self.mask_ratio,
                vit.n_patches()
            )));
        }
        Ok(())
    }
}

/// Hidden-patch count: round half up.
pub fn mask_count(ratio: f64, n_patches: usize) -> usize {
    (ratio * n_patches as f64 + 0.5).floor() as usize
}

/// One sampled masking: which modality, which patch positions are hidden,
/// which stay visible. Both index lists are sorted ascending and disjoint,
/// together covering `0..n_p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Index into the configured modality set.
    pub modality: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.masked.len() + self.visible.len()
    }
}

/// Sample a plan: modality uniform over the configured set, then a uniform
/// size-`round(ratio·n_p)` subset of patch positions without replacement.
/// Degenerate plans (0 or all patches hidden) are rejected.
pub fn plan_mask<R: Rng>(
    cfg: &M2a2eConfig,
    n_patches: usize,
    rng: &mut R,
) -> Result<MaskPlan, TensorError> {
    if n_patches < 2 {
        return Err(TensorError::InvalidArgument(format!(
            "need at least two patches to split, got {n_patches}"
        )));
    }
    let m = mask_count(cfg.mask_ratio, n_patches);
    if m == 0 || m == n_patches {
        return Err(TensorError::InvalidArgument(format!(
            "mask ratio {} hides {m} of {n_patches} patches (degenerate plan)",
            cfg.mask_ratio
        )));
    }
    let modality = rng.gen_range(0..cfg.modalities.len());
    // Partial Fisher-Yates: the first m slots end up a uniform subset.
    let mut idx: Vec<usize> = (0..n_patches).collect();
    for i in 0..m {
        let j = rng.gen_range(i..n_patches);
        idx.swap(i, j);
    }
    let mut masked = idx[..m].to_vec();
    let mut visible = idx[m..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        modality,
        masked,
        visible,
    })
}

fn check_plan(plan: &MaskPlan, vit: &ViTConfig, k: usize) -> Result<(), TensorError> {
    if plan.n_patches() != vit.n_patches() {
        return Err(TensorError::Shape(format!(
            "plan covers {} patches, grid has {}",
            plan.n_patches(),
            vit.n_patches()
        )));
    }
    if plan.masked.is_empty() {
        return Err(TensorError::InvalidArgument(
            "plan hides no patches".into(),
        ));
    }
    if plan.visible.is_empty() {
        return Err(TensorError::InvalidArgument(
            "plan leaves no visible patches".into(),
        ));
    }
    if plan.modality >= k {
        return Err(TensorError::InvalidArgument(format!(
            "plan selects modality {} of {k}",
            plan.modality
        )));
    }
    Ok(())
}

/// Run the encoder over the class token plus visible tokens only.
///
/// Positional rows are indexed by each patch's original grid position, so
/// the latent is bitwise independent of the pixels inside hidden patches.
/// Asymmetric mode encodes only the sampled modality; symmetric mode
/// encodes every modality's visible tokens. The model must be
/// adapter-free (pretraining precedes adapter attachment).
pub fn encode_visible<T: Scalar>(
    model: &ViTModel<T>,
    tape: &mut Tape<T>,
    binds: &Bindings,
    input: &SampleInput<T>,
    plan: &MaskPlan,
    symmetric: bool,
) -> Result<Var, TensorError> {
    if model.adapter_cfg.is_some() {
        return Err(TensorError::InvalidArgument(
            "reconstruction pretraining runs on an adapter-free encoder".into(),
        ));
    }
    let k = model.cfg.modalities;
    if input.per_modality.len() != k {
        return Err(TensorError::Shape(format!(
            "sample has {} modalities, model expects {k}",
            input.per_modality.len()
        )));
    }
    check_plan(plan, &model.cfg, k)?;

    let proj_w = binds.get("embed.proj.weight");
    let proj_b = binds.get("embed.proj.bias");
    let pos = binds.get("embed.pos");
    let cls = binds.get("embed.cls");
    let pos0 = tape.gather_rows(pos, &[0])?;
    let cls_tok = tape.add(cls, pos0)?;

    let mut parts = vec![cls_tok];
    let encoded: Vec<usize> = if symmetric {
        (0..k).collect()
    } else {
        vec![plan.modality]
    };
    for m in encoded {
        let rows = model.patch_rows(&input.per_modality[m], &plan.visible)?;
        let x = tape.constant(rows);
        let tok = tape.matmul(x, proj_w)?;
        let tok = tape.add_last_axis_bias(tok, proj_b)?;
        let pos_idx: Vec<usize> = plan
            .visible
            .iter()
            .map(|&pi| model.cfg.pos_index(m, pi))
            .collect();
        let pos_rows = tape.gather_rows(pos, &pos_idx)?;
        parts.push(tape.add(tok, pos_rows)?);
    }
    let mut x = tape.concat(&parts, 0)?;
    for i in 0..model.cfg.depth {
        x = model.block_forward(tape, binds, i, x, None)?;
    }
    Ok(x)
}

fn decoder_prefix(m: Modality) -> String {
    format!("decoder.{}", m.name())
}

/// Register one fresh decoder per configured modality on `model`.
/// Drawn from its own stream so encoder bits never depend on whether
/// decoders exist.
pub fn init_decoders<T: Scalar>(model: &mut ViTModel<T>, cfg: &M2a2eConfig, seed: u64) {
    let rng = &mut stream_rng(seed, STREAM_DECODER_INIT, 0);
    let d = model.cfg.embed_dim;
    let w = cfg.decoder_width;
    let hidden = w * DECODER_FFN_RATIO;
    let p2 = model.cfg.patch_size * model.cfg.patch_size;
    for &m in &cfg.modalities {
        let pre = decoder_prefix(m);
        model.push(
            &format!("{pre}.proj.weight"),
            Tensor::kaiming_uniform(vec![d, w], d, rng),
        );
        model.push(&format!("{pre}.proj.bias"), Tensor::zeros(vec![w]));
        model.push(&format!("{pre}.mask_token"), Tensor::uniform(vec![1, w], 0.02, rng));
        for b in 0..cfg.decoder_depth {
            let bp = format!("{pre}.block.{b}");
            model.push(&format!("{bp}.ln1.weight"), Tensor::full(vec![w], T::ONE));
            model.push(&format!("{bp}.ln1.bias"), Tensor::zeros(vec![w]));
            for name in ["wq", "wk", "wv", "wo"] {
                model.push(
                    &format!("{bp}.attn.{name}.weight"),
                    Tensor::kaiming_uniform(vec![w, w], w, rng),
                );
                model.push(&format!("{bp}.attn.{name}.bias"), Tensor::zeros(vec![w]));
            }
            model.push(&format!("{bp}.ln2.weight"), Tensor::full(vec![w], T::ONE));
            model.push(&format!("{bp}.ln2.bias"), Tensor::zeros(vec![w]));
            model.push(
                &format!("{bp}.ffn.fc1.weight"),
                Tensor::kaiming_uniform(vec![w, hidden], w, rng),
            );
            model.push(&format!("{bp}.ffn.fc1.bias"), Tensor::zeros(vec![hidden]));
            model.push(
                &format!("{bp}.ffn.fc2.weight"),
                Tensor::kaiming_uniform(vec![hidden, w], hidden, rng),
            );
            model.push(&format!("{bp}.ffn.fc2.bias"), Tensor::zeros(vec![w]));
        }
        let out = p2 * m.raw_channels();
        model.push(
            &format!("{pre}.head.weight"),
            Tensor::kaiming_uniform(vec![w, out], w, rng),
        );
        model.push(&format!("{pre}.head.bias"), Tensor::zeros(vec![out]));
    }
}

/// Fixed sinusoidal positional rows `n x width` (sin/cos pairs).
pub fn sinusoidal_positions<T: Scalar>(n: usize, width: usize) -> Tensor<T> {
    assert!(width % 2 == 0, "sinusoidal width must be even");
    let mut data = Vec::with_capacity(n * width);
    for pos in 0..n {
        for i in 0..width / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / width as f64);
            data.push(T::from_f64(angle.sin()));
            data.push(T::from_f64(angle.cos()));
        }
    }
    Tensor::new(vec![n, width], data).expect("shape matches construction")
}

/// One pre-norm decoder block at decoder width.
fn decoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var, TensorError> {
    let h1 = tape.layer_norm(
        x,
        binds.get(&format!("{prefix}.ln1.weight")),
        binds.get(&format!("{prefix}.ln1.bias")),
    )?;
    let attn = mhsa(tape, binds, prefix, h1, heads)?;
    let x = tape.add(x, attn)?;
    let h2 = tape.layer_norm(
        x,
        binds.get(&format!("{prefix}.ln2.weight")),
        binds.get(&format!("{prefix}.ln2.bias")),
    )?;
    let f = tape.matmul(h2, binds.get(&format!("{prefix}.ffn.fc1.weight")))?;
    let f = tape.add_last_axis_bias(f, binds.get(&format!("{prefix}.ffn.fc1.bias")))?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, binds.get(&format!("{prefix}.ffn.fc2.weight")))?;
    let f = tape.add_last_axis_bias(f, binds.get(&format!("{prefix}.ffn.fc2.bias")))?;
    tape.add(x, f)
}

/// Decode the latent into one full patch-grid prediction per modality,
/// `n_p x (patch_size² · channels)` each, in configured-modality order.
///
/// The class token is dropped; visible rows are projected to decoder
/// width; the learned mask token fills hidden positions; fixed sinusoidal
/// positional rows are added before the decoder blocks and pixel head.
pub fn decode_multimodal<T: Scalar>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    vit: &ViTConfig,
    cfg: &M2a2eConfig,
    latent: Var,
    plan: &MaskPlan,
) -> Result<Vec<Var>, TensorError> {
    check_plan(plan, vit, cfg.modalities.len())?;
    let v = plan.visible.len();
    let n_p = vit.n_patches();
    let k = cfg.modalities.len();
    let expect_rows = if cfg.symmetric { 1 + k * v } else { 1 + v };
    let got = tape.shape(latent)[0];
    if got != expect_rows {
        return Err(TensorError::Shape(format!(
            "latent has {got} rows, plan expects {expect_rows}"
        )));
    }

    // Row r of [projected visible; mask token] for each grid position.
    let mut gather_idx = vec![v; n_p];
    for (r, &pos) in plan.visible.iter().enumerate() {
        gather_idx[pos] = r;
    }
    let sin_pos = tape.constant(sinusoidal_positions::<T>(n_p, cfg.decoder_width));

    let mut preds = Vec::with_capacity(k);
    for (mi, &m) in cfg.modalities.iter().enumerate() {
        let pre = decoder_prefix(m);
        if !binds.contains(&format!("{pre}.proj.weight")) {
            return Err(TensorError::InvalidArgument(format!(
                "no decoder parameters for modality {}",
                m.name()
            )));
        }
        let start = if cfg.symmetric { 1 + mi * v } else { 1 };
        let vis = tape.slice(latent, 0, start, v)?;
        let proj = tape.matmul(vis, binds.get(&format!("{pre}.proj.weight")))?;
        let proj = tape.add_last_axis_bias(proj, binds.get(&format!("{pre}.proj.bias")))?;
        let base = tape.concat(&[proj, binds.get(&format!("{pre}.mask_token"))], 0)?;
        let seq = tape.gather_rows(base, &gather_idx)?;
        let mut x = tape.add(seq, sin_pos)?;
        for b in 0..cfg.decoder_depth {
            x = decoder_block(tape, binds, &format!("{pre}.block.{b}"), x, cfg.decoder_heads)?;
        }
        let out = tape.matmul(x, binds.get(&format!("{pre}.head.weight")))?;
        preds.push(tape.add_last_axis_bias(out, binds.get(&format!("{pre}.head.bias")))?);
    }
    Ok(preds)
}

/// Flatten an image into patch rows `n_p x (patch² · channels)`, ordered
/// row-major over the grid, channel-major within a row — the pixel-side
/// mirror of the tokenizer's patch layout.
pub fn target_rows<T: Scalar>(img: &PlanarImage, patch: usize) -> Result<Tensor<T>, TensorError> {
    let s = img.height;
    if img.width != s {
        return Err(TensorError::Shape(format!(
            "expected a square image, got {}x{}",
            img.height, img.width
        )));
    }
    if patch == 0 || s % patch != 0 {
        return Err(TensorError::InvalidArgument(format!(
            "patch size {patch} does not tile a {s}-pixel side"
        )));
    }
    let g = s / patch;
    let row_len = img.channels * patch * patch;
    let mut data = Vec::with_capacity(g * g * row_len);
    for pi in 0..g * g {
        let (py, px) = (pi / g, pi % g);
        for c in 0..img.channels {
            for dy in 0..patch {
                let row = py * patch + dy;
                let base = c * s * s + row * s + px * patch;
                data.extend(img.data[base..base + patch].iter().map(|&v| T::from_f64(v)));
            }
        }
    }
    Tensor::new(vec![g * g, row_len], data)
}

/// Inverse of `target_rows`: reassemble patch rows into a planar image.
pub fn rows_to_image<T: Scalar>(
    rows: &[T],
    channels: usize,
    side: usize,
    patch: usize,
) -> Result<PlanarImage, TensorError> {
    let g = side / patch;
    let row_len = channels * patch * patch;
    if patch == 0 || side % patch != 0 || rows.len() != g * g * row_len {
        return Err(TensorError::Shape(format!(
            "{} values cannot tile a {channels}x{side}x{side} image with {patch}-pixel patches",
            rows.len()
        )));
    }
    let mut data = vec![0.0f64; channels * side * side];
    for pi in 0..g * g {
        let (py, px) = (pi / g, pi % g);
        let mut r = pi * row_len;
        for c in 0..channels {
            for dy in 0..patch {
                let row = py * patch + dy;
                let base = c * side * side + row * side + px * patch;
                for dx in 0..patch {
                    data[base + dx] = rows[r].to_f64();
                    r += 1;
                }
            }
        }
    }
    PlanarImage::new(channels, side, side, data)
}

/// Normalize each row to zero mean and unit variance (population, eps
/// 1e-6) — the optional per-patch target transform.
pub fn normalize_rows<T: Scalar>(t: &mut Tensor<T>) {
    let cols = *t.shape.last().expect("rows have a width");
    for row in t.data.chunks_mut(cols) {
        let n = T::from_f64(cols as f64);
        let mut mean = T::ZERO;
        for v in row.iter() {
            mean += *v;
        }
        mean /= n;
        let mut var = T::ZERO;
        for v in row.iter() {
            let d = *v - mean;
            var += d * d;
        }
        var /= n;
        let std = (var + T::from_f64(1e-6)).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
}

/// Per-modality reconstruction targets for one sample, in configured
/// order, each `n_p x (patch² · raw channels)`.
pub fn sample_targets<T: Scalar>(
    sample: &MultimodalSample,
    vit: &ViTConfig,
    cfg: &M2a2eConfig,
) -> Result<Vec<Tensor<T>>, TensorError> {
    cfg.modalities
        .iter()
        .map(|&m| {
            let img = sample.modality(m);
            if img.height != vit.image_size {
                return Err(TensorError::Shape(format!(
                    "sample {:?} is {} pixels per side, model expects {}",
                    sample.id, img.height, vit.image_size
                )));
            }
            let mut rows = target_rows::<T>(img, vit.patch_size)?;
            if cfg.per_patch_norm {
                normalize_rows(&mut rows);
            }
            Ok(rows)
        })
        .collect()
}

/// The reconstruction objective for one sample.
///
/// Asymmetric: `masked_weight · MSE(hidden patches of the sampled
/// modality) + cross_weight · Σ_{other} MSE(all patches)`. Symmetric:
/// `masked_weight · Σ_modalities MSE(hidden patches)`. Each term is a
/// mean over its own elements; with unit weights the terms sum plainly.
pub fn reconstruction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &M2a2eConfig,
    plan: &MaskPlan,
    preds: &[Var],
    targets: &[Tensor<T>],
) -> Result<Var, TensorError> {
    let k = cfg.modalities.len();
    if preds.len() != k || targets.len() != k {
        return Err(TensorError::Shape(format!(
            "{} predictions and {} targets for {k} modalities",
            preds.len(),
            targets.len()
        )));
    }
    if plan.masked.is_empty() {
        return Err(TensorError::InvalidArgument(
            "reconstruction needs at least one hidden patch".into(),
        ));
    }
    let masked_rows = |tape: &mut Tape<T>, t: &Tensor<T>| -> Result<Var, TensorError> {
        let cols = t.shape[1];
        let mut data = Vec::with_capacity(plan.masked.len() * cols);
        for &pi in &plan.masked {
            if pi >= t.shape[0] {
                return Err(TensorError::InvalidArgument(format!(
                    "hidden patch {pi} outside a {}-row target",
                    t.shape[0]
                )));
            }
            data.extend_from_slice(&t.data[pi * cols..(pi + 1) * cols]);
        }
        Ok(tape.constant(Tensor::new(vec![plan.masked.len(), cols], data)?))
    };

    let mut terms = Vec::with_capacity(k);
    if cfg.symmetric {
        for m in 0..k {
            let pred_m = tape.gather_rows(preds[m], &plan.masked)?;
            let tgt_m = masked_rows(tape, &targets[m])?;
            let mse = tape.mse(pred_m, tgt_m)?;
            terms.push(tape.scale(mse, T::from_f64(cfg.masked_weight)));
        }
    } else {
        let i = plan.modality;
        let pred_i = tape.gather_rows(preds[i], &plan.masked)?;
        let tgt_i = masked_rows(tape, &targets[i])?;
        let mse_i = tape.mse(pred_i, tgt_i)?;
        terms.push(tape.scale(mse_i, T::from_f64(cfg.masked_weight)));
        for j in 0..k {
            if j == i {
                continue;
            }
            let tgt_j = tape.constant(targets[j].clone());
            let mse_j = tape.mse(preds[j], tgt_j)?;
            terms.push(tape.scale(mse_j, T::from_f64(cfg.cross_weight)));
        }
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}

/// Everything a pretraining run produced: the final parameter set
/// (encoder plus decoders) and the per-epoch mean loss trace.
#[derive(Debug, Clone)]
pub struct PretrainOutcome<T: Scalar> {
    pub params: IndexMap<String, Tensor<T>>,
    pub epoch_losses: Vec<f64>,
}

/// Self-supervised pretraining on the train split: AdamW under a linear
/// warmup + cosine decay, one fresh mask plan per sample visit, batched
/// mean loss. Deterministic given `(configs, seed)`.
pub fn pretrain<T: Scalar>(
    vit: &ViTConfig,
    cfg: &M2a2eConfig,
    ds: &Dataset,
    seed: u64,
) -> Result<PretrainOutcome<T>, TensorError> {
    vit.validate()?;
    cfg.validate(vit)?;
    if ds.train.is_empty() {
        return Err(TensorError::InvalidArgument(
            "pretraining needs a non-empty train split".into(),
        ));
    }
    let mut model = ViTModel::<T>::new(vit.clone(), None, seed)?;
    init_decoders(&mut model, cfg, seed);

    let mut inputs = Vec::with_capacity(ds.train.len());
    for s in &ds.train {
        inputs.push((
            raw_input::<T>(s, &cfg.modalities)?,
            sample_targets::<T>(s, vit, cfg)?,
        ));
    }

    let n = inputs.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs as u64;
    let mut mask_rng = stream_rng(seed, STREAM_MASK, 0);
    let mut state = AdamState::<T>::default();
    let mut step: u64 = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(seed, STREAM_PRETRAIN_SHUFFLE, epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let binds = model.bind(&mut tape);
            let mut sample_losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let (input, targets) = &inputs[idx];
                let plan = plan_mask(cfg, vit.n_patches(), &mut mask_rng)?;
                let latent = encode_visible(&model, &mut tape, &binds, input, &plan, cfg.symmetric)?;
                let preds = decode_multimodal(&mut tape, &binds, vit, cfg, latent, &plan)?;
                sample_losses.push(reconstruction_loss(&mut tape, cfg, &plan, &preds, targets)?);
            }
            let mut batch_loss = sample_losses[0];
            for &l in &sample_losses[1..] {
                batch_loss = tape.add(batch_loss, l)?;
            }
            let batch_loss = tape.scale(batch_loss, T::from_f64(1.0 / chunk.len() as f64));
            let loss_val = tape.data(batch_loss)[0].to_f64();
            if !loss_val.is_finite() {
                return Err(TensorError::Numeric(format!(
                    "non-finite reconstruction loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss_val * chunk.len() as f64;
            tape.backward(batch_loss)?;
            let grads = tape.named_grads();
            let lr = lr_schedule(step, total_steps, warmup_steps, cfg.lr)?;
            adamw_step(&mut model.params, &grads, &mut state, lr, cfg.weight_decay)?;
            step += 1;
        }
        epoch_losses.push(epoch_loss / n as f64);
    }

    Ok(PretrainOutcome {
        params: model.params,
        epoch_losses,
    })
}

/// Input / hidden-rendered / reconstructed images for one modality.
#[derive(Debug, Clone)]
pub struct ReconstructionTriptych {
    pub modality: Modality,
    pub input: PlanarImage,
    pub masked: PlanarImage,
    pub recon: PlanarImage,
}

fn paint_patch_gray(img: &mut PlanarImage, patch: usize, pi: usize) {
    let s = img.width;
    let g = s / patch;
    let (py, px) = (pi / g, pi % g);
    for c in 0..img.channels {
        for dy in 0..patch {
            let base = c * s * s + (py * patch + dy) * s + px * patch;
            for v in &mut img.data[base..base + patch] {
                *v = 0.5;
            }
        }
    }
}

/// Render one sample through a pretrained model: per modality, the raw
/// input, the input with hidden patches painted mid-gray (only the
/// sampled modality is hidden in asymmetric mode), and the decoder's full
/// prediction clamped to [0,1]. `model` must hold decoder parameters.
pub fn reconstruct_sample<T: Scalar, R: Rng>(
    model: &ViTModel<T>,
    cfg: &M2a2eConfig,
    sample: &MultimodalSample,
    rng: &mut R,
) -> Result<(MaskPlan, Vec<ReconstructionTriptych>), TensorError> {
    cfg.validate(&model.cfg)?;
    let plan = plan_mask(cfg, model.cfg.n_patches(), rng)?;
    let input = raw_input::<T>(sample, &cfg.modalities)?;
    let mut tape = Tape::new();
    let binds = model.bind(&mut tape);
    let latent = encode_visible(model, &mut tape, &binds, &input, &plan, cfg.symmetric)?;
    let preds = decode_multimodal(&mut tape, &binds, &model.cfg, cfg, latent, &plan)?;

    let mut out = Vec::with_capacity(cfg.modalities.len());
    for (mi, &m) in cfg.modalities.iter().enumerate() {
        let img = sample.modality(m).clone();
        let mut masked = img.clone();
        if cfg.symmetric || mi == plan.modality {
            for &pi in &plan.masked {
                paint_patch_gray(&mut masked, model.cfg.patch_size, pi);
            }
        }
        let mut recon = rows_to_image(
            tape.data(preds[mi]),
            m.raw_channels(),
            model.cfg.image_size,
            model.cfg.patch_size,
        )?;
        for v in &mut recon.data {
            *v = v.clamp(0.0, 1.0);
        }
        out.push(ReconstructionTriptych {
            modality: m,
            input: img,
            masked,
            recon,
        });
    }
    Ok((plan, out))
}
