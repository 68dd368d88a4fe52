//! Finite-difference verification of whole-model gradients.
//!
//! The op-level checks pin each tape operation; these pin their
//! composition: the full classification path (tokenizer, positional rows,
//! transformer blocks, every adapter variant, head, cross-entropy) and
//! the full reconstruction path (visible-token encoding, per-modality
//! decoders, the two-term pixel loss). Every named parameter is probed at
//! a seeded sample of coordinates against central differences in f64.

use indexmap::IndexMap;
use mmfas_core::adapters::{AdapterConfig, AdapterKind, AdapterPosition};
use mmfas_core::data::{generate_dataset, raw_input, Dataset};
use mmfas_core::descriptors::Modality;
use mmfas_core::gradcheck::{DEFAULT_H, DEFAULT_TOL};
use mmfas_core::m2a2e::{
    decode_multimodal, encode_visible, plan_mask, reconstruction_loss, sample_targets,
    M2a2eConfig,
};
use mmfas_core::tape::Tape;
use mmfas_core::vit::{SampleInput, ViTConfig, ViTModel};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Coordinates probed per parameter tensor.
const COORDS_PER_TENSOR: usize = 6;

fn tiny_vit(k: usize) -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        ffn_ratio: 2,
        modalities: k,
        per_modality_pos: true,
        n_classes: 2,
    }
}

fn first_sample_input(ds: &Dataset, mods: &[Modality]) -> SampleInput<f64> {
    raw_input::<f64>(&ds.train[0], mods).unwrap()
}

fn classification_loss(model: &ViTModel<f64>, input: &SampleInput<f64>, label: usize) -> f64 {
    let mut tape = Tape::new();
    let binds = model.bind(&mut tape);
    let logits = model.forward_logits(&mut tape, &binds, input, None).unwrap();
    let loss = tape.cross_entropy(logits, &[label]).unwrap();
    tape.data(loss)[0]
}

fn classification_grads(
    model: &ViTModel<f64>,
    input: &SampleInput<f64>,
    label: usize,
) -> IndexMap<String, Vec<f64>> {
    let mut tape = Tape::new();
    let binds = model.bind(&mut tape);
    let logits = model.forward_logits(&mut tape, &binds, input, None).unwrap();
    let loss = tape.cross_entropy(logits, &[label]).unwrap();
    tape.backward(loss).unwrap();
    tape.named_grads()
}

#[test]
fn backbone_classification_gradients() {
    let ds = generate_dataset(500, 1, 16).unwrap();
    for seed in 0..4u64 {
        let mut model = ViTModel::<f64>::new(tiny_vit(3), None, 100 + seed).unwrap();
        let input = first_sample_input(&ds, &Modality::ALL);
        let analytic = classification_grads(&model, &input, 1);
        check_coords(
            "backbone",
            &mut model,
            |m| classification_loss(m, &input, 1),
            analytic,
            seed,
        );
    }
}

#[test]
fn adapter_classification_gradients_cover_every_kind() {
    let ds = generate_dataset(501, 1, 16).unwrap();
    for (ki, kind) in AdapterKind::ALL.into_iter().enumerate() {
        for seed in 0..3u64 {
            let mut acfg = AdapterConfig::default();
            acfg.kind = kind;
            acfg.hidden_dim = 4;
            acfg.position = AdapterPosition::MhsaAndFfn;
            acfg.per_modality_down = seed == 2;
            let mut model =
                ViTModel::<f64>::new(tiny_vit(3), Some(acfg), 200 + seed).unwrap();
            let input = first_sample_input(&ds, &Modality::ALL);
            let analytic = classification_grads(&model, &input, 0);
            check_coords(
                &format!("adapter-{kind}"),
                &mut model,
                |m| classification_loss(m, &input, 0),
                analytic,
                300 + (ki as u64) * 10 + seed,
            );
        }
    }
}

#[test]
fn reconstruction_gradients_reach_encoder_and_decoders() {
    let ds = generate_dataset(502, 1, 16).unwrap();
    let vit = tiny_vit(3);
    let cfg = M2a2eConfig {
        decoder_depth: 1,
        decoder_width: 8,
        decoder_heads: 2,
        mask_ratio: 0.5,
        ..M2a2eConfig::default()
    };
    for seed in 0..4u64 {
        let mut model = ViTModel::<f64>::new(vit.clone(), None, 400 + seed).unwrap();
        mmfas_core::m2a2e::init_decoders(&mut model, &cfg, 400 + seed);
        let input = first_sample_input(&ds, &cfg.modalities);
        let targets = sample_targets::<f64>(&ds.train[0], &vit, &cfg).unwrap();
        let mut prng = ChaCha12Rng::seed_from_u64(50 + seed);
        let plan = plan_mask(&cfg, vit.n_patches(), &mut prng).unwrap();

        let loss_of = |m: &ViTModel<f64>| {
            let mut tape = Tape::new();
            let binds = m.bind(&mut tape);
            let latent = encode_visible(m, &mut tape, &binds, &input, &plan, false).unwrap();
            let preds =
                decode_multimodal(&mut tape, &binds, &m.cfg, &cfg, latent, &plan).unwrap();
            let loss = reconstruction_loss(&mut tape, &cfg, &plan, &preds, &targets).unwrap();
            tape.data(loss)[0]
        };
        let analytic = {
            let mut tape = Tape::new();
            let binds = model.bind(&mut tape);
            let latent =
                encode_visible(&model, &mut tape, &binds, &input, &plan, false).unwrap();
            let preds =
                decode_multimodal(&mut tape, &binds, &model.cfg, &cfg, latent, &plan).unwrap();
            let loss =
                reconstruction_loss(&mut tape, &cfg, &plan, &preds, &targets).unwrap();
            tape.backward(loss).unwrap();
            tape.named_grads()
        };
        // The decoders must receive nonzero signal somewhere.
        let decoder_mag: f64 = analytic
            .iter()
            .filter(|(n, _)| n.starts_with("decoder."))
            .flat_map(|(_, g)| g.iter())
            .map(|v| v.abs())
            .sum();
        assert!(decoder_mag > 0.0, "decoders got no gradient");
        let encoder_mag: f64 = analytic
            .iter()
            .filter(|(n, _)| n.starts_with("block.") || n.starts_with("embed."))
            .flat_map(|(_, g)| g.iter())
            .map(|v| v.abs())
            .sum();
        assert!(encoder_mag > 0.0, "encoder got no gradient");
        check_coords(
            "reconstruction",
            &mut model,
            loss_of,
            analytic,
            600 + seed,
        );
    }
}

/// Shared probe loop: `analytic` from one taped backward, coordinates
/// re-derived numerically with the model mutated in place.
fn check_coords<L>(
    tag: &str,
    model: &mut ViTModel<f64>,
    loss: L,
    analytic: IndexMap<String, Vec<f64>>,
    seed: u64,
) where
    L: Fn(&ViTModel<f64>) -> f64,
{
    assert_eq!(
        analytic.keys().collect::<Vec<_>>(),
        model.params.keys().collect::<Vec<_>>(),
        "{tag}: gradient table must cover every parameter"
    );
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.keys().cloned().collect();
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
            assert!(
                err < DEFAULT_TOL,
                "{tag}: {name}[{c}] analytic {a:.6e} vs numeric {numeric:.6e} (rel {err:.3e})"
            );
        }
    }
}
