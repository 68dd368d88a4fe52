//! Metric oracles: hand-enumerated pins on small score sets, exact
//! identities, and agreement with an independently written exhaustive
//! sweep on random sets.

use mmfas_core::data::{Label, Split};
use mmfas_core::metrics::{
    acer, apcer_bpcer, bpcer_target_threshold, candidate_thresholds, eer_threshold, evaluate,
    hter, tpr_at_fpr, ScoreRow, ScoreSet,
};
use mmfas_core::rng::stream_rng;
use rand::Rng;

fn set_of(bona: &[f64], attacks: &[f64]) -> ScoreSet {
    let mut rows = Vec::new();
    for (i, &s) in bona.iter().enumerate() {
        rows.push(ScoreRow { id: format!("b{i}"), label: Label::BonaFide, score: s });
    }
    for (i, &s) in attacks.iter().enumerate() {
        rows.push(ScoreRow { id: format!("a{i}"), label: Label::Attack, score: s });
    }
    ScoreSet::new(Split::Dev, rows).unwrap()
}

/// The six-sample reference set enumerable by hand.
fn six() -> ScoreSet {
    set_of(&[0.2, 0.7, 0.9], &[0.1, 0.4, 0.6])
}

fn random_set(seed: u64) -> ScoreSet {
    let mut rng = stream_rng(seed, 71, 0);
    let nb = rng.gen_range(2..40);
    let na = rng.gen_range(2..40);
    // Quantize some sets coarsely to force ties and duplicate scores.
    let quant = if rng.gen_bool(0.5) { Some(rng.gen_range(2..8)) } else { None };
    let mut draw = |center: f64| -> f64 {
        let raw: f64 = (rng.gen_range(0.0..1.0f64) * 0.7 + center * 0.3).clamp(0.0, 1.0);
        match quant {
            Some(q) => (raw * q as f64).round() / q as f64,
            None => raw,
        }
    };
    let bona: Vec<f64> = (0..nb).map(|_| draw(0.8)).collect();
    let attacks: Vec<f64> = (0..na).map(|_| draw(0.2)).collect();
    set_of(&bona, &attacks)
}

// --- independent reference implementations -------------------------------

/// Error rates at `t` computed via sorting and counting rather than
/// filtering, as a structurally different second route.
fn naive_rates(set: &ScoreSet, t: f64) -> (f64, f64) {
    let mut bona: Vec<f64> = Vec::new();
    let mut attacks: Vec<f64> = Vec::new();
    for r in &set.rows {
        match r.label {
            Label::BonaFide => bona.push(r.score),
            Label::Attack => attacks.push(r.score),
        }
    }
    bona.sort_by(|a, b| a.partial_cmp(b).unwrap());
    attacks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let live_attacks = attacks.len() - attacks.partition_point(|&s| s < t);
    let rejected_bona = bona.partition_point(|&s| s < t);
    (
        live_attacks as f64 / attacks.len() as f64,
        rejected_bona as f64 / bona.len() as f64,
    )
}

fn naive_candidates(set: &ScoreSet) -> Vec<f64> {
    let mut scores: Vec<f64> = set.rows.iter().map(|r| r.score).collect();
    scores.push(0.0);
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scores.dedup();
    let mids: Vec<f64> = scores.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    scores.extend(mids);
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scores.dedup();
    scores
}

fn naive_eer(set: &ScoreSet) -> (f64, f64) {
    let mut best: Option<(f64, f64, f64)> = None;
    for t in naive_candidates(set) {
        let (apcer, bpcer) = naive_rates(set, t);
        let key = ((apcer - bpcer).abs(), bpcer, t);
        if best.map_or(true, |(d, b, tt)| key < (d, b, tt)) {
            best = Some(key);
        }
    }
    let (_, _, t) = best.unwrap();
    let (apcer, bpcer) = naive_rates(set, t);
    (t, (apcer + bpcer) / 2.0)
}

fn naive_tpr_at_fpr(set: &ScoreSet, target: f64) -> (f64, f64) {
    let mut cands = naive_candidates(set);
    cands.push(cands.last().unwrap() + 1.0); // reject-everything sentinel
    let mut feasible: Vec<(f64, f64)> = cands
        .into_iter()
        .filter_map(|t| {
            let mut live_bona = 0usize;
            let mut live_attacks = 0usize;
            let (mut nb, mut na) = (0usize, 0usize);
            for r in &set.rows {
                match r.label {
                    Label::BonaFide => {
                        nb += 1;
                        live_bona += usize::from(r.score >= t);
                    }
                    Label::Attack => {
                        na += 1;
                        live_attacks += usize::from(r.score >= t);
                    }
                }
            }
            let fpr = live_attacks as f64 / na as f64;
            (fpr <= target).then(|| (t, live_bona as f64 / nb as f64))
        })
        .collect();
    feasible.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    feasible[0]
}

// --- hand-enumerated pins --------------------------------------------------

#[test]
fn six_sample_rates_at_half() {
    let s = six();
    let (apcer, bpcer) = apcer_bpcer(&s, 0.5).unwrap();
    assert_eq!(apcer, 1.0 / 3.0);
    assert_eq!(bpcer, 1.0 / 3.0);
    assert_eq!(acer(&s, 0.5).unwrap(), 1.0 / 3.0);
    assert_eq!(hter(&s, 0.5).unwrap(), 1.0 / 3.0);
}

#[test]
fn threshold_zero_accepts_everything() {
    let (apcer, bpcer) = apcer_bpcer(&six(), 0.0).unwrap();
    assert_eq!((apcer, bpcer), (1.0, 0.0));
}

#[test]
fn perfect_separation_is_errorless() {
    let s = set_of(&[0.9, 0.9, 0.9], &[0.1, 0.1]);
    assert_eq!(apcer_bpcer(&s, 0.5).unwrap(), (0.0, 0.0));
    assert_eq!(hter(&s, 0.5).unwrap(), 0.0);
    let (t, eer) = eer_threshold(&s).unwrap();
    assert_eq!(t, 0.5, "gap midpoint");
    assert_eq!(eer, 0.0);
    let (_, tpr) = tpr_at_fpr(&s, 0.0).unwrap();
    assert_eq!(tpr, 1.0);
}

#[test]
fn six_sample_eer_is_one_third_at_half() {
    let (t, eer) = eer_threshold(&six()).unwrap();
    assert_eq!(t, 0.5);
    assert_eq!(eer, 1.0 / 3.0);
    let (apcer, bpcer) = apcer_bpcer(&six(), t).unwrap();
    assert_eq!(apcer, bpcer);
}

#[test]
fn dev_threshold_on_identical_test_set_reproduces_dev_acer() {
    let dev = six();
    let test = ScoreSet::new(Split::Test, dev.rows.clone()).unwrap();
    let (t, eer) = eer_threshold(&dev).unwrap();
    assert_eq!(acer(&test, t).unwrap(), eer);
}

#[test]
fn six_sample_tpr_at_zero_fpr_is_two_thirds() {
    let (t, tpr) = tpr_at_fpr(&six(), 0.0).unwrap();
    assert!(t > 0.6, "must reject every attack, got threshold {t}");
    assert_eq!(tpr, 2.0 / 3.0);
    let (_, tpr) = tpr_at_fpr(&six(), 1.0).unwrap();
    assert_eq!(tpr, 1.0);
}

#[test]
fn identical_scores_give_half_hter_everywhere() {
    let s = set_of(&[0.5, 0.5], &[0.5, 0.5, 0.5]);
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        assert_eq!(hter(&s, t).unwrap(), 0.5);
    }
}

#[test]
fn bpcer_target_pins() {
    let s = set_of(&[0.2, 0.7, 0.9], &[0.1, 0.4]);
    // target 1/3 allows one rejection; the smallest candidate rejecting
    // exactly one bona fide sample sits just above 0.2.
    let (t, warn) = bpcer_target_threshold(&s, 1.0 / 3.0).unwrap();
    assert_eq!(t, (0.2 + 0.7) / 2.0);
    assert!(!warn);
    // A vacuous target returns the trivial threshold.
    let (t, warn) = bpcer_target_threshold(&s, 1.0).unwrap();
    assert_eq!((t, warn), (0.0, false));
    // Granularity of three samples cannot realize BPCER in (0, 1/3).
    let (t, warn) = bpcer_target_threshold(&s, 0.2).unwrap();
    assert_eq!(t, 0.0);
    assert!(warn);
    // Target zero is exactly achievable: no warning.
    let (t, warn) = bpcer_target_threshold(&s, 0.0).unwrap();
    assert_eq!((t, warn), (0.0, false));
    assert!(bpcer_target_threshold(&s, -0.1).is_err());
}

#[test]
fn bpcer_target_threshold_is_monotone_below_one() {
    for seed in 0..20u64 {
        let s = random_set(seed);
        let mut last = -1.0;
        for i in 0..100 {
            let target = i as f64 / 100.0; // [0, 1)
            let (t, _) = bpcer_target_threshold(&s, target).unwrap();
            assert!(
                t >= last,
                "seed {seed}: threshold dropped from {last} to {t} at target {target}"
            );
            last = t;
        }
    }
}

// --- exact identities -------------------------------------------------------

#[test]
fn acer_is_exactly_the_mean_of_the_rates() {
    for seed in 0..50u64 {
        let s = random_set(seed);
        for t in candidate_thresholds(&s.rows.iter().map(|r| r.score).collect::<Vec<_>>()) {
            let (apcer, bpcer) = apcer_bpcer(&s, t).unwrap();
            assert_eq!(acer(&s, t).unwrap(), (apcer + bpcer) / 2.0);
        }
    }
}

#[test]
fn hter_at_the_eer_threshold_equals_eer() {
    for seed in 0..100u64 {
        let s = random_set(seed);
        let (t, eer) = eer_threshold(&s).unwrap();
        let h = hter(&s, t).unwrap();
        assert!((h - eer).abs() < 1e-12, "seed {seed}: {h} vs {eer}");
    }
}

#[test]
fn rate_monotonicity_in_the_threshold() {
    for seed in 0..30u64 {
        let s = random_set(seed);
        let cands = candidate_thresholds(&s.rows.iter().map(|r| r.score).collect::<Vec<_>>());
        let mut last = (1.0f64, 0.0f64);
        for t in cands {
            let (apcer, bpcer) = apcer_bpcer(&s, t).unwrap();
            assert!(apcer <= last.0, "APCER rose at t={t}");
            assert!(bpcer >= last.1, "BPCER fell at t={t}");
            last = (apcer, bpcer);
        }
    }
}

#[test]
fn metrics_are_invariant_under_row_permutation() {
    for seed in 0..20u64 {
        let s = random_set(seed);
        let mut rows = s.rows.clone();
        rows.reverse();
        let mut rng = stream_rng(seed, 72, 0);
        for i in (1..rows.len()).rev() {
            rows.swap(i, rng.gen_range(0..=i));
        }
        let p = ScoreSet::new(Split::Dev, rows).unwrap();
        assert_eq!(eer_threshold(&s).unwrap(), eer_threshold(&p).unwrap());
        assert_eq!(apcer_bpcer(&s, 0.37).unwrap(), apcer_bpcer(&p, 0.37).unwrap());
        assert_eq!(tpr_at_fpr(&s, 0.1).unwrap(), tpr_at_fpr(&p, 0.1).unwrap());
        assert_eq!(
            bpcer_target_threshold(&s, 0.25).unwrap(),
            bpcer_target_threshold(&p, 0.25).unwrap()
        );
    }
}

// --- brute-force equivalence -------------------------------------------------

#[test]
fn eer_and_tpr_agree_with_the_exhaustive_sweep_on_100_random_sets() {
    for seed in 0..100u64 {
        let s = random_set(seed);
        let (t, eer) = eer_threshold(&s).unwrap();
        let (nt, neer) = naive_eer(&s);
        assert_eq!(t, nt, "seed {seed}: EER threshold");
        assert_eq!(eer, neer, "seed {seed}: EER value");
        for target in [0.0, 0.05, 0.1, 0.5] {
            let (tt, tpr) = tpr_at_fpr(&s, target).unwrap();
            let (ntt, ntpr) = naive_tpr_at_fpr(&s, target);
            assert_eq!(tt, ntt, "seed {seed}, target {target}: threshold");
            assert_eq!(tpr, ntpr, "seed {seed}, target {target}: TPR");
        }
    }
}

#[test]
fn rates_agree_with_sorted_counting() {
    for seed in 0..50u64 {
        let s = random_set(seed);
        for t in naive_candidates(&s) {
            assert_eq!(apcer_bpcer(&s, t).unwrap(), naive_rates(&s, t), "seed {seed} t {t}");
        }
    }
}

#[test]
fn full_evaluation_report_is_consistent() {
    let dev = random_set(1234);
    let test = ScoreSet::new(Split::Test, random_set(5678).rows).unwrap();
    let r = evaluate(&dev, &test, 0.1).unwrap();
    assert_eq!(r.acer, (r.apcer + r.bpcer) / 2.0);
    assert_eq!(r.hter, r.acer);
    assert_eq!(r.threshold, eer_threshold(&dev).unwrap().0);
    assert_eq!(r.tpr, tpr_at_fpr(&test, 0.1).unwrap().1);
    for v in [r.apcer, r.bpcer, r.acer, r.hter, r.dev_eer, r.tpr] {
        assert!((0.0..=1.0).contains(&v));
    }
}
