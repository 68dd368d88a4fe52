//! Bitwise equivalence of the optimized descriptors against their naive
//! per-pixel references, plus the pinned hand cases.

use mmfas_core::descriptors::{
    hog_features, hog_map, lbp_map, plgf_map, reference, HogConfig, PlgfConfig,
};
use mmfas_core::image::GrayImage;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn random_image(rng: &mut ChaCha12Rng, h: usize, w: usize) -> GrayImage {
    GrayImage::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn assert_bitwise(name: &str, seed: u64, a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len(), "{name} (seed {seed}): length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            x.to_bits() == y.to_bits(),
            "{name} (seed {seed}): index {i} differs: {x:e} vs {y:e}"
        );
    }
}

#[test]
fn optimized_matches_naive_on_random_images() {
    let hog_cfg = HogConfig::default();
    let plgf_cfg = PlgfConfig::default();
    for seed in 0..50u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 64, 64);

        let lbp_fast = lbp_map(&img);
        let lbp_ref = reference::lbp_map_naive(&img);
        assert_bitwise("lbp", seed, &lbp_fast.pixels, &lbp_ref.pixels);

        let hogf_fast = hog_features(&img, &hog_cfg).unwrap();
        let hogf_ref = reference::hog_features_naive(&img, &hog_cfg).unwrap();
        assert_bitwise("hog_features", seed, &hogf_fast, &hogf_ref);

        let hog_fast = hog_map(&img, &hog_cfg).unwrap();
        let hog_ref = reference::hog_map_naive(&img, &hog_cfg).unwrap();
        assert_bitwise("hog_map", seed, &hog_fast.pixels, &hog_ref.pixels);

        let plgf_fast = plgf_map(&img, &plgf_cfg).unwrap();
        let plgf_ref = reference::plgf_map_naive(&img, &plgf_cfg).unwrap();
        assert_bitwise("plgf", seed, &plgf_fast.pixels, &plgf_ref.pixels);
    }
}

#[test]
fn oracle_agreement_is_not_size_specific() {
    // A non-square extent and a different seed range guard against oracle
    // code accidentally assuming 64x64.
    let hog_cfg = HogConfig::default();
    let plgf_cfg = PlgfConfig::default();
    for seed in 100..105u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 32, 48);
        assert_bitwise(
            "lbp",
            seed,
            &lbp_map(&img).pixels,
            &reference::lbp_map_naive(&img).pixels,
        );
        assert_bitwise(
            "hog_map",
            seed,
            &hog_map(&img, &hog_cfg).unwrap().pixels,
            &reference::hog_map_naive(&img, &hog_cfg).unwrap().pixels,
        );
        assert_bitwise(
            "plgf",
            seed,
            &plgf_map(&img, &plgf_cfg).unwrap().pixels,
            &reference::plgf_map_naive(&img, &plgf_cfg).unwrap().pixels,
        );
    }
}
