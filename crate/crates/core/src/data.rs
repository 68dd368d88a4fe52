//! Synthetic multimodal dataset: generation, on-disk layout, and loading.
//!
//! Every sample carries three aligned images (RGB 3-channel, IR and depth
//! 1-channel) plus a label. Four sample families are generated:
//!
//! * bona fide - radially decaying depth blob, IR correlated with depth,
//!   RGB with low-frequency texture;
//! * `print` - flat depth, desaturated RGB, uniform IR;
//! * `replay` - flat depth, RGB with an additive high-frequency grid,
//!   dim IR;
//! * `flat_mask` - piecewise-constant depth at nearby levels, IR with a
//!   hotspot anomaly, ordinary RGB.
//!
//! By construction every bona fide depth map has strictly more spatial
//! variance than every attack depth map; generation fails loudly if that
//! gap ever closes. Pixels are quantized to the 8-bit grid before use, so
//! the in-memory dataset equals its on-disk round trip bitwise.
//!
//! Layout: `<root>/{train,dev,test}/manifest.csv` plus one PPM and two
//! PGMs per sample; manifest columns are
//! `id,rgb_path,ir_path,depth_path,label,attack_type` with paths relative
//! to the manifest's directory. The train split holds `2n` samples per
//! family, dev and test hold `n` each.
//!
//! Determinism: sample `i` in a canonical enumeration order draws from its
//! own RNG stream derived from the master seed, so the same seed yields a
//! bitwise-identical dataset.

use crate::descriptors::{align_channels, DescriptorConfig, Modality, ModalityInputPolicy};
use crate::image::{read_pgm, read_ppm, write_pgm, write_ppm, GrayImage, PlanarImage};
use crate::rng::{stream_rng, STREAM_DATA};
use crate::scalar::Scalar;
use crate::tensor::TensorError;
use crate::vit::SampleInput;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(TensorError::InvalidArgument(format!(
                "unknown split {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    BonaFide,
    Attack,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::BonaFide => "bona_fide",
            Label::Attack => "attack",
        }
    }

    /// Class index used by the two-logit head (live class is 1).
    pub fn class_index(&self) -> usize {
        match self {
            Label::BonaFide => 1,
            Label::Attack => 0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bona_fide" => Ok(Label::BonaFide),
            "attack" => Ok(Label::Attack),
            other => Err(TensorError::InvalidArgument(format!(
                "unknown label {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackType {
    None,
    Print,
    Replay,
    FlatMask,
}

impl AttackType {
    pub const ALL: [AttackType; 4] = [
        AttackType::None,
        AttackType::Print,
        AttackType::Replay,
        AttackType::FlatMask,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackType::None => "none",
            AttackType::Print => "print",
            AttackType::Replay => "replay",
            AttackType::FlatMask => "flat_mask",
        }
    }

    pub fn label(&self) -> Label {
        match self {
            AttackType::None => Label::BonaFide,
            _ => Label::Attack,
        }
    }
}

impl fmt::Display for AttackType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackType {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(AttackType::None),
            "print" => Ok(AttackType::Print),
            "replay" => Ok(AttackType::Replay),
            "flat_mask" => Ok(AttackType::FlatMask),
            other => Err(TensorError::InvalidArgument(format!(
                "unknown attack type {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    pub rgb: PlanarImage,
    pub ir: PlanarImage,
    pub depth: PlanarImage,
    pub label: Label,
    pub attack_type: AttackType,
}

impl MultimodalSample {
    /// The label is derived from the attack type, keeping
    /// `label == BonaFide <=> attack_type == None` true by construction.
    pub fn new(
        id: impl Into<String>,
        rgb: PlanarImage,
        ir: PlanarImage,
        depth: PlanarImage,
        attack_type: AttackType,
    ) -> Result<Self, TensorError> {
        if rgb.channels != 3 || ir.channels != 1 || depth.channels != 1 {
            return Err(TensorError::Shape(format!(
                "modalities must be 3/1/1 channels, got {}/{}/{}",
                rgb.channels, ir.channels, depth.channels
            )));
        }
        if rgb.height != ir.height
            || rgb.width != ir.width
            || rgb.height != depth.height
            || rgb.width != depth.width
        {
            return Err(TensorError::Shape(
                "modalities must share the same height and width".into(),
            ));
        }
        Ok(MultimodalSample {
            id: id.into(),
            rgb,
            ir,
            depth,
            label: attack_type.label(),
            attack_type,
        })
    }

    pub fn modality(&self, m: Modality) -> &PlanarImage {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Ir => &self.ir,
            Modality::Depth => &self.depth,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<MultimodalSample>,
    pub dev: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[MultimodalSample] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Population variance of a 1-channel image's pixels.
pub fn depth_variance(img: &PlanarImage) -> f64 {
    let n = img.data.len() as f64;
    let mean = img.data.iter().sum::<f64>() / n;
    img.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Generate the full three-split dataset: `2n` train samples per family
/// plus `n` each for dev and test (families: bona fide + three attacks).
pub fn generate_dataset(
    master_seed: u64,
    n_per_class: usize,
    image_size: usize,
) -> Result<Dataset, TensorError> {
    if n_per_class == 0 {
        return Err(TensorError::InvalidArgument(
            "need at least one sample per class".into(),
        ));
    }
    if image_size < 8 {
        return Err(TensorError::InvalidArgument(
            "image size must be at least 8".into(),
        ));
    }
    let mut ds = Dataset::default();
    let mut global = 0u64;
    for split in Split::ALL {
        let per_type = match split {
            Split::Train => 2 * n_per_class,
            _ => n_per_class,
        };
        let out = match split {
            Split::Train => &mut ds.train,
            Split::Dev => &mut ds.dev,
            Split::Test => &mut ds.test,
        };
        for ty in AttackType::ALL {
            for i in 0..per_type {
                let mut rng = stream_rng(master_seed, STREAM_DATA, global);
                global += 1;
                let id = format!("{split}_{ty}_{i:04}");
                out.push(synth_sample(&mut rng, &id, ty, image_size)?);
            }
        }
    }
    // Construction guarantee: every bona fide depth map is strictly more
    // varied than every attack depth map.
    let all = ds.train.iter().chain(&ds.dev).chain(&ds.test);
    let mut min_bona = f64::INFINITY;
    let mut max_attack = f64::NEG_INFINITY;
    for s in all {
        let v = depth_variance(&s.depth);
        match s.label {
            Label::BonaFide => min_bona = min_bona.min(v),
            Label::Attack => max_attack = max_attack.max(v),
        }
    }
    if min_bona <= max_attack {
        return Err(TensorError::Numeric(format!(
            "depth variance gap violated: min bona {min_bona} <= max attack {max_attack}"
        )));
    }
    Ok(ds)
}

fn synth_sample<R: Rng>(
    rng: &mut R,
    id: &str,
    ty: AttackType,
    s: usize,
) -> Result<MultimodalSample, TensorError> {
    let (rgb, ir, depth) = match ty {
        AttackType::None => bona_fide_images(rng, s),
        AttackType::Print => print_images(rng, s),
        AttackType::Replay => replay_images(rng, s),
        AttackType::FlatMask => flat_mask_images(rng, s),
    };
    let mut rgb = rgb;
    let mut ir = PlanarImage::from_channels(&[ir])?;
    let mut depth = PlanarImage::from_channels(&[depth])?;
    rgb.quantize8();
    ir.quantize8();
    depth.quantize8();
    MultimodalSample::new(id, rgb, ir, depth, ty)
}

/// Sum of a few random low-frequency sinusoids, zero-mean-ish.
fn low_freq_field<R: Rng>(rng: &mut R, s: usize, components: usize, amp: f64) -> GrayImage {
    let terms: Vec<(f64, f64, f64, f64)> = (0..components)
        .map(|_| {
            (
                rng.gen_range(1..=3) as f64,
                rng.gen_range(1..=3) as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                amp * rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let mut img = GrayImage::zeros(s, s);
    for y in 0..s {
        for x in 0..s {
            let mut v = 0.0;
            for &(fx, fy, phase, w) in &terms {
                v += w
                    * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / s as f64 + phase)
                        .sin();
            }
            img.set(y, x, v);
        }
    }
    img
}

fn add_noise<R: Rng>(rng: &mut R, img: &mut GrayImage, amp: f64) {
    for v in img.pixels.iter_mut() {
        *v += rng.gen_range(-amp..amp);
    }
}

fn clamp01(img: &mut GrayImage) {
    for v in img.pixels.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn gaussian_bump(s: usize, cx: f64, cy: f64, sigma: f64, amp: f64) -> GrayImage {
    let mut img = GrayImage::zeros(s, s);
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            img.set(y, x, amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    img
}

fn textured_rgb<R: Rng>(rng: &mut R, s: usize) -> PlanarImage {
    let base = [0.62, 0.50, 0.42];
    let shared = low_freq_field(rng, s, 3, 0.12);
    let chans: Vec<GrayImage> = base
        .iter()
        .map(|&b| {
            let own = low_freq_field(rng, s, 2, 0.05);
            let mut c = GrayImage::constant(s, s, b);
            for i in 0..c.pixels.len() {
                c.pixels[i] += shared.pixels[i] + own.pixels[i];
            }
            add_noise(rng, &mut c, 0.02);
            clamp01(&mut c);
            c
        })
        .collect();
    PlanarImage::from_channels(&chans).expect("equal-sized channels")
}

fn bona_fide_images<R: Rng>(rng: &mut R, s: usize) -> (PlanarImage, GrayImage, GrayImage) {
    let sf = s as f64;
    let cx = sf / 2.0 + rng.gen_range(-0.1..0.1) * sf;
    let cy = sf / 2.0 + rng.gen_range(-0.1..0.1) * sf;
    let sigma = rng.gen_range(0.22..0.32) * sf;
    let amp = rng.gen_range(0.75..0.95);
    let blob = gaussian_bump(s, cx, cy, sigma, amp);

    let mut depth = blob.clone();
    add_noise(rng, &mut depth, 0.01);
    clamp01(&mut depth);

    let mut ir = GrayImage::constant(s, s, 0.25);
    for i in 0..ir.pixels.len() {
        ir.pixels[i] += 0.55 * blob.pixels[i];
    }
    add_noise(rng, &mut ir, 0.03);
    clamp01(&mut ir);

    (textured_rgb(rng, s), ir, depth)
}

fn flat_depth<R: Rng>(rng: &mut R, s: usize) -> GrayImage {
    let mut depth = GrayImage::constant(s, s, rng.gen_range(0.4..0.6));
    add_noise(rng, &mut depth, 0.003);
    clamp01(&mut depth);
    depth
}

fn print_images<R: Rng>(rng: &mut R, s: usize) -> (PlanarImage, GrayImage, GrayImage) {
    let depth = flat_depth(rng, s);

    let mut ir = GrayImage::constant(s, s, 0.35);
    add_noise(rng, &mut ir, 0.02);
    clamp01(&mut ir);

    // Desaturated RGB: one gray texture with tiny constant channel offsets.
    let gray = low_freq_field(rng, s, 3, 0.10);
    let chans: Vec<GrayImage> = (0..3)
        .map(|_| {
            let offset = rng.gen_range(-0.02..0.02);
            let mut c = GrayImage::constant(s, s, 0.5 + offset);
            for i in 0..c.pixels.len() {
                c.pixels[i] += gray.pixels[i];
            }
            add_noise(rng, &mut c, 0.01);
            clamp01(&mut c);
            c
        })
        .collect();
    (
        PlanarImage::from_channels(&chans).expect("equal-sized channels"),
        ir,
        depth,
    )
}

fn replay_images<R: Rng>(rng: &mut R, s: usize) -> (PlanarImage, GrayImage, GrayImage) {
    let depth = flat_depth(rng, s);

    let mut ir = GrayImage::constant(s, s, 0.18);
    add_noise(rng, &mut ir, 0.02);
    clamp01(&mut ir);

    // Screen texture plus an additive high-frequency grid.
    let mut rgb = textured_rgb(rng, s);
    let sf = s as f64;
    let f = rng.gen_range(s / 6..s / 3).max(4) as f64;
    let phx = rng.gen_range(0.0..std::f64::consts::TAU);
    let phy = rng.gen_range(0.0..std::f64::consts::TAU);
    let a = rng.gen_range(0.08..0.15);
    let hw = s * s;
    for y in 0..s {
        for x in 0..s {
            let g = a
                * (std::f64::consts::TAU * f * x as f64 / sf + phx).sin()
                * (std::f64::consts::TAU * f * y as f64 / sf + phy).sin();
            for c in 0..3 {
                let p = &mut rgb.data[c * hw + y * s + x];
                *p = (*p + g).clamp(0.0, 1.0);
            }
        }
    }
    (rgb, ir, depth)
}

fn flat_mask_images<R: Rng>(rng: &mut R, s: usize) -> (PlanarImage, GrayImage, GrayImage) {
    // Piecewise-constant depth: a base level plus a few rectangles at
    // nearby levels.
    let mut depth = GrayImage::constant(s, s, rng.gen_range(0.45..0.55));
    for _ in 0..3 {
        let x0 = rng.gen_range(0..s / 2);
        let y0 = rng.gen_range(0..s / 2);
        let w = rng.gen_range(s / 4..s / 2);
        let h = rng.gen_range(s / 4..s / 2);
        let delta = rng.gen_range(0.02..0.045) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        for y in y0..(y0 + h).min(s) {
            for x in x0..(x0 + w).min(s) {
                let v = depth.get(y, x);
                depth.set(y, x, v + delta);
            }
        }
    }
    add_noise(rng, &mut depth, 0.002);
    clamp01(&mut depth);

    // IR hotspot anomaly on a moderate background.
    let sf = s as f64;
    let bump = gaussian_bump(
        s,
        rng.gen_range(0.2..0.8) * sf,
        rng.gen_range(0.2..0.8) * sf,
        rng.gen_range(0.08..0.12) * sf,
        rng.gen_range(0.45..0.6),
    );
    let mut ir = GrayImage::constant(s, s, 0.35);
    for i in 0..ir.pixels.len() {
        ir.pixels[i] += bump.pixels[i];
    }
    add_noise(rng, &mut ir, 0.02);
    clamp01(&mut ir);

    (textured_rgb(rng, s), ir, depth)
}

// ---------------------------------------------------------------------------
// On-disk layout
// ---------------------------------------------------------------------------

pub const MANIFEST_HEADER: &str = "id,rgb_path,ir_path,depth_path,label,attack_type";

/// Write all three splits under `root` (created if missing).
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<(), TensorError> {
    for split in Split::ALL {
        let dir = root.join(split.as_str());
        fs::create_dir_all(&dir)?;
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for sample in ds.split(split) {
            let rgb = format!("{}_rgb.ppm", sample.id);
            let ir = format!("{}_ir.pgm", sample.id);
            let depth = format!("{}_depth.pgm", sample.id);
            write_ppm(&dir.join(&rgb), &sample.rgb)?;
            write_pgm(&dir.join(&ir), &sample.ir.channel(0))?;
            write_pgm(&dir.join(&depth), &sample.depth.channel(0))?;
            manifest.push_str(&format!(
                "{},{},{},{},{},{}\n",
                sample.id, rgb, ir, depth, sample.label, sample.attack_type
            ));
        }
        fs::write(dir.join("manifest.csv"), manifest)?;
    }
    Ok(())
}

/// Load one split from `root/<split>/manifest.csv`.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<MultimodalSample>, TensorError> {
    let dir = root.join(split.as_str());
    let path = dir.join("manifest.csv");
    let text = fs::read_to_string(&path)
        .map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == MANIFEST_HEADER => {}
        other => {
            return Err(TensorError::Format(format!(
                "bad manifest header {other:?}"
            )))
        }
    }
    let mut samples = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(TensorError::Format(format!(
                "manifest line {}: expected 6 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(TensorError::Format(format!("duplicate id {id:?}")));
        }
        let rgb = read_ppm(&dir.join(fields[1]))?;
        let ir = PlanarImage::from_channels(&[read_pgm(&dir.join(fields[2]))?])?;
        let depth = PlanarImage::from_channels(&[read_pgm(&dir.join(fields[3]))?])?;
        let label = Label::from_str(fields[4])?;
        let attack_type = AttackType::from_str(fields[5])?;
        if attack_type.label() != label {
            return Err(TensorError::Format(format!(
                "id {id:?}: label {label} inconsistent with attack type {attack_type}"
            )));
        }
        samples.push(MultimodalSample::new(id, rgb, ir, depth, attack_type)?);
    }
    Ok(samples)
}

pub fn load_dataset(root: &Path) -> Result<Dataset, TensorError> {
    Ok(Dataset {
        train: load_split(root, Split::Train)?,
        dev: load_split(root, Split::Dev)?,
        test: load_split(root, Split::Test)?,
    })
}

// ---------------------------------------------------------------------------
// Model input preparation
// ---------------------------------------------------------------------------

/// Build the tokenizer input for `sample`: apply each selected modality's
/// recipe, cycle-align the result to 3 channels, and flatten channel-major.
pub fn prepare_input<T: Scalar>(
    sample: &MultimodalSample,
    mods: &[Modality],
    policy: &ModalityInputPolicy,
    dcfg: &DescriptorConfig,
) -> Result<SampleInput<T>, TensorError> {
    if mods.is_empty() {
        return Err(TensorError::InvalidArgument(
            "need at least one modality".into(),
        ));
    }
    let mut per_modality = Vec::with_capacity(mods.len());
    for &m in mods {
        let img = policy.recipe(m).apply(sample.modality(m), dcfg)?;
        let img = align_channels(&img, 3);
        per_modality.push(img.data.iter().map(|&v| T::from_f64(v)).collect());
    }
    Ok(SampleInput { per_modality })
}

/// Raw (descriptor-free) aligned input, as used for reconstruction
/// pretraining.
pub fn raw_input<T: Scalar>(
    sample: &MultimodalSample,
    mods: &[Modality],
) -> Result<SampleInput<T>, TensorError> {
    prepare_input(
        sample,
        mods,
        &ModalityInputPolicy::uniform(crate::descriptors::Recipe::Raw),
        &DescriptorConfig::default(),
    )
}
