//! Finite-difference gradient battery behind the `gradcheck` subcommand.
//!
//! Every differentiable part of the stack is probed in double precision
//! against central differences: the patch tokenizer, the transformer
//! block, each adapter kind, the reconstruction decoders, and both loss
//! heads. Each target runs across many seeds and reports its worst
//! relative error.

use mmfas_core::adapters::{AdapterConfig, AdapterKind, AdapterPosition};
use mmfas_core::data::{generate_dataset, raw_input};
use mmfas_core::descriptors::Modality;
use mmfas_core::gradcheck::{finite_diff_grad, max_rel_err, DEFAULT_H, DEFAULT_TOL};
use mmfas_core::m2a2e::{
    decode_multimodal, encode_visible, init_decoders, plan_mask, reconstruction_loss,
    sample_targets, M2a2eConfig,
};
use mmfas_core::tape::Tape;
use mmfas_core::tensor::{Tensor, TensorError};
use mmfas_core::vit::{SampleInput, ViTConfig, ViTModel};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Seeded repetitions per probe target.
pub const SEEDS: u64 = 20;
/// Coordinates probed per parameter tensor per seed.
const COORDS_PER_TENSOR: usize = 3;

/// One battery line: a named differentiable target and the largest
/// relative error any probed coordinate reached.
#[derive(Debug, Clone)]
pub struct BatteryLine {
    pub target: String,
    pub max_rel_err: f64,
    pub probes: usize,
}

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        ffn_ratio: 2,
        modalities: 3,
        per_modality_pos: true,
        n_classes: 2,
    }
}

fn tiny_m2a2e() -> M2a2eConfig {
    M2a2eConfig {
        decoder_depth: 1,
        decoder_width: 8,
        decoder_heads: 2,
        mask_ratio: 0.5,
        ..M2a2eConfig::default()
    }
}

/// Probe `model`'s parameters whose names pass `filter` under `loss`,
/// comparing one taped backward against central differences. Returns the
/// worst relative error and the probe count.
fn probe_params<L, F>(
    model: &mut ViTModel<f64>,
    loss: L,
    filter: F,
    analytic: &indexmap::IndexMap<String, Vec<f64>>,
    seed: u64,
) -> (f64, usize)
where
    L: Fn(&ViTModel<f64>) -> f64,
    F: Fn(&str) -> bool,
{
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let names: Vec<String> = model
        .params
        .keys()
        .filter(|n| filter(n))
        .cloned()
        .collect();
    let mut worst = 0.0f64;
    let mut probes = 0usize;
    for name in names {
        let numel = model.params[&name].numel();
        let take = COORDS_PER_TENSOR.min(numel);
        let mut coords: Vec<usize> = (0..numel).collect();
        for i in 0..take {
            let j = rng.gen_range(i..numel);
            coords.swap(i, j);
        }
        for &c in coords.iter().take(take) {
            let orig = model.params[&name].data[c];
            model.params[&name].data[c] = orig + DEFAULT_H;
            let fp = loss(model);
            model.params[&name].data[c] = orig - DEFAULT_H;
            let fm = loss(model);
            model.params[&name].data[c] = orig;
            let numeric = (fp - fm) / (2.0 * DEFAULT_H);
            let a = analytic[&name][c];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
            probes += 1;
        }
    }
    (worst, probes)
}

fn classification_setup(
    adapter: Option<AdapterConfig>,
    seed: u64,
) -> Result<(ViTModel<f64>, SampleInput<f64>), TensorError> {
    let ds = generate_dataset(900 + seed, 1, 16)?;
    let model = ViTModel::<f64>::new(tiny_vit(), adapter, seed)?;
    let input = raw_input::<f64>(&ds.train[0], &Modality::ALL)?;
    Ok((model, input))
}

fn classification_loss(model: &ViTModel<f64>, input: &SampleInput<f64>) -> f64 {
    let mut tape = Tape::new();
    let binds = model.bind(&mut tape);
    let logits = model
        .forward_logits(&mut tape, &binds, input, None)
        .expect("forward");
    let loss = tape.cross_entropy(logits, &[1]).expect("loss");
    tape.data(loss)[0]
}

fn classification_grads(
    model: &ViTModel<f64>,
    input: &SampleInput<f64>,
) -> indexmap::IndexMap<String, Vec<f64>> {
    let mut tape = Tape::new();
    let binds = model.bind(&mut tape);
    let logits = model
        .forward_logits(&mut tape, &binds, input, None)
        .expect("forward");
    let loss = tape.cross_entropy(logits, &[1]).expect("loss");
    tape.backward(loss).expect("backward");
    tape.named_grads()
}

/// Probe the classification path, keeping only parameters that pass
/// `filter` (e.g. only the tokenizer's, only one adapter kind's).
fn classification_target<F>(
    adapter: Option<AdapterConfig>,
    filter: F,
) -> Result<(f64, usize), TensorError>
where
    F: Fn(&str) -> bool + Copy,
{
    let mut worst = 0.0f64;
    let mut probes = 0usize;
    for seed in 0..SEEDS {
        let (mut model, input) = classification_setup(adapter.clone(), seed)?;
        let analytic = classification_grads(&model, &input);
        let (w, p) = probe_params(
            &mut model,
            |m| classification_loss(m, &input),
            filter,
            &analytic,
            7000 + seed,
        );
        worst = worst.max(w);
        probes += p;
    }
    Ok((worst, probes))
}

fn adapter_cfg(kind: AdapterKind) -> AdapterConfig {
    let mut cfg = AdapterConfig::default();
    cfg.kind = kind;
    cfg.hidden_dim = 4;
    cfg.position = AdapterPosition::MhsaAndFfn;
    cfg
}

/// Probe the reconstruction path (visible-token encoder, per-modality
/// decoders, two-term pixel loss), keeping parameters that pass `filter`.
fn reconstruction_target<F>(filter: F) -> Result<(f64, usize), TensorError>
where
    F: Fn(&str) -> bool + Copy,
{
    let vit = tiny_vit();
    let cfg = tiny_m2a2e();
    let mut worst = 0.0f64;
    let mut probes = 0usize;
    for seed in 0..SEEDS {
        let ds = generate_dataset(950 + seed, 1, 16)?;
        let mut model = ViTModel::<f64>::new(vit.clone(), None, seed)?;
        init_decoders(&mut model, &cfg, seed);
        let input = raw_input::<f64>(&ds.train[0], &cfg.modalities)?;
        let targets = sample_targets::<f64>(&ds.train[0], &vit, &cfg)?;
        let mut prng = ChaCha12Rng::seed_from_u64(8000 + seed);
        let plan = plan_mask(&cfg, vit.n_patches(), &mut prng)?;
        let loss_of = |m: &ViTModel<f64>| {
            let mut tape = Tape::new();
            let binds = m.bind(&mut tape);
            let latent =
                encode_visible(m, &mut tape, &binds, &input, &plan, false).expect("encode");
            let preds = decode_multimodal(&mut tape, &binds, &m.cfg, &cfg, latent, &plan)
                .expect("decode");
            let loss =
                reconstruction_loss(&mut tape, &cfg, &plan, &preds, &targets).expect("loss");
            tape.data(loss)[0]
        };
        let analytic = {
            let mut tape = Tape::new();
            let binds = model.bind(&mut tape);
            let latent = encode_visible(&model, &mut tape, &binds, &input, &plan, false)?;
            let preds = decode_multimodal(&mut tape, &binds, &model.cfg, &cfg, latent, &plan)?;
            let loss = reconstruction_loss(&mut tape, &cfg, &plan, &preds, &targets)?;
            tape.backward(loss)?;
            tape.named_grads()
        };
        let (w, p) = probe_params(&mut model, loss_of, filter, &analytic, 9000 + seed);
        worst = worst.max(w);
        probes += p;
    }
    Ok((worst, probes))
}

/// Input-gradient check of the cross-entropy head on random logits.
fn cross_entropy_target() -> Result<(f64, usize), TensorError> {
    let mut worst = 0.0f64;
    let mut probes = 0usize;
    for seed in 0..SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(100 + seed);
        let n = 4;
        let data: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let mut at = Tensor::new(vec![n, 2], data)?;
        at.requires_grad = true;
        let mut tape = Tape::new();
        let x = tape.leaf(at.clone());
        let loss = tape.cross_entropy(x, &labels)?;
        tape.backward(loss)?;
        let analytic = tape.grad(x).expect("input gradient").to_vec();
        let numeric = finite_diff_grad(
            |v| {
                let mut t = Tape::new();
                let x = t.leaf(v.clone());
                let l = t.cross_entropy(x, &labels)?;
                Ok(t.data(l)[0])
            },
            &at,
            DEFAULT_H,
        )?;
        worst = worst.max(max_rel_err(&analytic, &numeric.data));
        probes += at.numel();
    }
    Ok((worst, probes))
}

/// Input-gradient check of mean squared error on random pairs.
fn mse_target() -> Result<(f64, usize), TensorError> {
    let mut worst = 0.0f64;
    let mut probes = 0usize;
    for seed in 0..SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(200 + seed);
        let n = 12;
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut at = Tensor::new(vec![3, 4], pred)?;
        at.requires_grad = true;
        let tgt = Tensor::new(vec![3, 4], target)?;
        let mut tape = Tape::new();
        let x = tape.leaf(at.clone());
        let t = tape.constant(tgt.clone());
        let loss = tape.mse(x, t)?;
        tape.backward(loss)?;
        let analytic = tape.grad(x).expect("input gradient").to_vec();
        let numeric = finite_diff_grad(
            |v| {
                let mut tp = Tape::new();
                let x = tp.leaf(v.clone());
                let c = tp.constant(tgt.clone());
                let l = tp.mse(x, c)?;
                Ok(tp.data(l)[0])
            },
            &at,
            DEFAULT_H,
        )?;
        worst = worst.max(max_rel_err(&analytic, &numeric.data));
        probes += at.numel();
    }
    Ok((worst, probes))
}

/// Run the whole battery (or one named target) and collect its lines.
pub fn run(only: Option<&str>) -> Result<Vec<BatteryLine>, TensorError> {
    let mut lines = Vec::new();
    let mut add = |target: &str,
                   result: Result<(f64, usize), TensorError>|
     -> Result<(), TensorError> {
        let (max_rel_err, probes) = result?;
        lines.push(BatteryLine {
            target: target.to_string(),
            max_rel_err,
            probes,
        });
        Ok(())
    };
    let wanted = |name: &str| only.map_or(true, |o| o == name);

    if wanted("tokenizer") {
        add(
            "tokenizer",
            classification_target(None, |n| n.starts_with("embed.")),
        )?;
    }
    if wanted("transformer_block") {
        add(
            "transformer_block",
            classification_target(None, |n| n.starts_with("block.")),
        )?;
    }
    if wanted("classifier_head") {
        add(
            "classifier_head",
            classification_target(None, |n| n.starts_with("head.")),
        )?;
    }
    for kind in AdapterKind::ALL {
        let name = format!("adapter_{kind}");
        if wanted(&name) {
            add(
                &name,
                classification_target(Some(adapter_cfg(kind)), |n| n.starts_with("adapter.")),
            )?;
        }
    }
    if wanted("decoder") {
        add(
            "decoder",
            reconstruction_target(|n| n.starts_with("decoder.")),
        )?;
    }
    if wanted("reconstruction_encoder") {
        add(
            "reconstruction_encoder",
            reconstruction_target(|n| n.starts_with("embed.") || n.starts_with("block.")),
        )?;
    }
    if wanted("cross_entropy") {
        add("cross_entropy", cross_entropy_target())?;
    }
    if wanted("mse") {
        add("mse", mse_target())?;
    }
    if lines.is_empty() {
        return Err(TensorError::InvalidArgument(format!(
            "unknown gradcheck target {:?}",
            only.unwrap_or("")
        )));
    }
    Ok(lines)
}

/// True when every line is inside the double-precision tolerance.
pub fn all_pass(lines: &[BatteryLine]) -> bool {
    lines.iter().all(|l| l.max_rel_err < DEFAULT_TOL)
}
