//! Presentation-attack evaluation metrics.
//!
//! Conventions, declared once and used everywhere:
//!
//! * live (bona fide) is the positive class; a sample is classified live
//!   iff `score >= threshold`;
//! * APCER = attacks classified live / attacks (= FAR = FPR);
//! * BPCER = bona fide classified attack / bona fide (= FRR);
//! * ACER and HTER are the mean of the two (ACER names the dev/test
//!   protocol quantity, HTER the fixed-threshold cross-set one);
//! * candidate thresholds are `{0}`, every observed score, and the
//!   midpoint of every adjacent pair of distinct observed scores - score
//!   sets are finite so the ROC is stepwise and these candidates cover
//!   every achievable operating point deterministically.
//!
//! The equal-error threshold minimizes `|APCER - BPCER|` over the
//! candidates, breaking ties toward lower BPCER and then lower threshold
//! (so a perfectly separated set returns the midpoint of the gap). The
//! reported EER is the mean of the two error rates at that threshold,
//! which makes "HTER at the EER threshold on the same set equals EER" an
//! exact identity between the two code paths.
//!
//! `bpcer_target_threshold` picks the operating point with the largest
//! achievable BPCER not exceeding the target (rejecting as many attacks
//! as the budget allows) and returns the smallest threshold achieving it;
//! thresholds of finite sets are quantized, so a positive target can
//! degenerate to the zero-BPCER boundary - that case sets a warning flag.
//! Targets >= 1 are vacuous and return threshold 0. `tpr_at_fpr` returns
//! the true-positive rate at the smallest candidate whose FPR meets the
//! target, the highest-TPR point the constraint admits.

use crate::data::{Label, Split};
use crate::tensor::TensorError;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Default FPR operating point: 1e-4 needs at least ten thousand attacks
/// to be meaningful, far beyond small synthetic sets.
pub const DESK_FPR_TARGET: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub split: Split,
    pub rows: Vec<ScoreRow>,
}

impl ScoreSet {
    pub fn new(split: Split, rows: Vec<ScoreRow>) -> Result<Self, TensorError> {
        let mut seen = std::collections::HashSet::new();
        for r in &rows {
            if !r.score.is_finite() || !(0.0..=1.0).contains(&r.score) {
                return Err(TensorError::Numeric(format!(
                    "score {} for id {:?} is outside [0, 1]",
                    r.score, r.id
                )));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(TensorError::Format(format!("duplicate id {:?}", r.id)));
            }
        }
        Ok(ScoreSet { split, rows })
    }

    fn scores_of(&self, label: Label) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.score)
            .collect()
    }

    fn both_classes(&self) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
        let bona = self.scores_of(Label::BonaFide);
        let attacks = self.scores_of(Label::Attack);
        if bona.is_empty() || attacks.is_empty() {
            return Err(TensorError::InvalidArgument(format!(
                "score set needs both classes ({} bona fide, {} attacks)",
                bona.len(),
                attacks.len()
            )));
        }
        Ok((bona, attacks))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TensorError> {
        let mut out = String::from("id,label,score\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.id, r.label, r.score));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path, split: Split) -> Result<Self, TensorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
        let mut lines = text.lines();
        match lines.next() {
            Some("id,label,score") => {}
            other => {
                return Err(TensorError::Format(format!(
                    "bad score header {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(TensorError::Format(format!(
                    "score line {}: expected 3 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let score: f64 = fields[2].parse().map_err(|_| {
                TensorError::Format(format!("score line {}: bad number", lineno + 2))
            })?;
            rows.push(ScoreRow {
                id: fields[0].to_string(),
                label: Label::from_str(fields[1])?,
                score,
            });
        }
        ScoreSet::new(split, rows)
    }
}

/// `{0}`, the observed scores, and midpoints of adjacent distinct
/// observed scores; sorted, deduplicated.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    let mut cands = vec![0.0];
    for (i, &s) in sorted.iter().enumerate() {
        cands.push(s);
        if i + 1 < sorted.len() {
            cands.push((s + sorted[i + 1]) / 2.0);
        }
    }
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands.dedup();
    cands
}

fn rates(bona: &[f64], attacks: &[f64], t: f64) -> (f64, f64) {
    let apcer = attacks.iter().filter(|&&s| s >= t).count() as f64 / attacks.len() as f64;
    let bpcer = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
    (apcer, bpcer)
}

/// (APCER, BPCER) of `set` at a fixed threshold.
pub fn apcer_bpcer(set: &ScoreSet, threshold: f64) -> Result<(f64, f64), TensorError> {
    let (bona, attacks) = set.both_classes()?;
    Ok(rates(&bona, &attacks, threshold))
}

pub fn acer(set: &ScoreSet, threshold: f64) -> Result<f64, TensorError> {
    let (apcer, bpcer) = apcer_bpcer(set, threshold)?;
    Ok((apcer + bpcer) / 2.0)
}

/// Half total error rate at a threshold fixed elsewhere (same formula as
/// ACER; the name marks the cross-set protocol).
pub fn hter(set: &ScoreSet, threshold: f64) -> Result<f64, TensorError> {
    acer(set, threshold)
}

/// Equal-error operating point: `(threshold, eer)`.
pub fn eer_threshold(set: &ScoreSet) -> Result<(f64, f64), TensorError> {
    let (bona, attacks) = set.both_classes()?;
    let all: Vec<f64> = set.rows.iter().map(|r| r.score).collect();
    let mut best: Option<(f64, f64, f64)> = None; // (threshold, |diff|, bpcer)
    for t in candidate_thresholds(&all) {
        let (apcer, bpcer) = rates(&bona, &attacks, t);
        let diff = (apcer - bpcer).abs();
        let better = match best {
            None => true,
            Some((bt, bdiff, bbpcer)) => {
                diff < bdiff
                    || (diff == bdiff && bpcer < bbpcer)
                    || (diff == bdiff && bpcer == bbpcer && t < bt)
            }
        };
        if better {
            best = Some((t, diff, bpcer));
        }
    }
    let (t, _, _) = best.expect("candidate set is never empty");
    let (apcer, bpcer) = rates(&bona, &attacks, t);
    Ok((t, (apcer + bpcer) / 2.0))
}

/// Smallest threshold attaining the largest achievable BPCER that stays
/// within `target`; the flag warns when a positive target degenerated to
/// the zero-BPCER boundary.
pub fn bpcer_target_threshold(
    set: &ScoreSet,
    target: f64,
) -> Result<(f64, bool), TensorError> {
    if !target.is_finite() || target < 0.0 {
        return Err(TensorError::InvalidArgument(format!(
            "BPCER target must be a fraction in [0, 1], got {target}"
        )));
    }
    let (bona, attacks) = set.both_classes()?;
    let _ = attacks;
    if target >= 1.0 {
        return Ok((0.0, false));
    }
    let mut best_bpcer = 0.0;
    let mut best_t = 0.0;
    // Candidates ascend and BPCER is non-decreasing in the threshold, so
    // the first candidate reaching a new feasible BPCER level is the
    // smallest threshold achieving it.
    for t in candidate_thresholds(&bona) {
        let bpcer = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
        if bpcer <= target && bpcer > best_bpcer {
            best_bpcer = bpcer;
            best_t = t;
        }
    }
    Ok((best_t, best_bpcer == 0.0 && target > 0.0))
}

/// `(threshold, TPR)` at the smallest candidate threshold whose FPR does
/// not exceed `target`.
///
/// When an attack holds the globally maximal score, no threshold at or
/// below a score reaches FPR 0; a sentinel one unit above the maximum
/// represents the reject-everything operating point, so a feasible
/// threshold always exists (its TPR is then 0).
pub fn tpr_at_fpr(set: &ScoreSet, target: f64) -> Result<(f64, f64), TensorError> {
    if !target.is_finite() || target < 0.0 {
        return Err(TensorError::InvalidArgument(format!(
            "FPR target must be a fraction in [0, 1], got {target}"
        )));
    }
    let (bona, attacks) = set.both_classes()?;
    let all: Vec<f64> = set.rows.iter().map(|r| r.score).collect();
    let mut cands = candidate_thresholds(&all);
    cands.push(cands.last().unwrap() + 1.0);
    for t in cands {
        let fpr = attacks.iter().filter(|&&s| s >= t).count() as f64 / attacks.len() as f64;
        if fpr <= target {
            let tpr = bona.iter().filter(|&&s| s >= t).count() as f64 / bona.len() as f64;
            return Ok((t, tpr));
        }
    }
    unreachable!("the sentinel threshold always satisfies FPR = 0");
}

/// The full protocol: thresholds from `dev`, errors on `test`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// EER threshold determined on the dev split.
    pub threshold: f64,
    /// Dev-split equal error rate.
    pub dev_eer: f64,
    /// Test-split rates at the dev threshold.
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
    /// FPR operating point and the TPR the test split reaches there.
    pub fpr_target: f64,
    pub tpr: f64,
}

pub fn evaluate(
    dev: &ScoreSet,
    test: &ScoreSet,
    fpr_target: f64,
) -> Result<MetricReport, TensorError> {
    let (threshold, dev_eer) = eer_threshold(dev)?;
    let (apcer, bpcer) = apcer_bpcer(test, threshold)?;
    let (_, tpr) = tpr_at_fpr(test, fpr_target)?;
    Ok(MetricReport {
        threshold,
        dev_eer,
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
        hter: (apcer + bpcer) / 2.0,
        fpr_target,
        tpr,
    })
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "threshold (dev EER): {:.6}", self.threshold)?;
        writeln!(f, "dev EER:   {:6.2}%", self.dev_eer * 100.0)?;
        writeln!(f, "APCER:     {:6.2}%", self.apcer * 100.0)?;
        writeln!(f, "BPCER:     {:6.2}%", self.bpcer * 100.0)?;
        writeln!(f, "ACER:      {:6.2}%", self.acer * 100.0)?;
        writeln!(f, "HTER:      {:6.2}%", self.hter * 100.0)?;
        write!(
            f,
            "TPR@FPR={:.0e}: {:5.2}%",
            self.fpr_target,
            self.tpr * 100.0
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn set_of(bona: &[f64], attacks: &[f64]) -> ScoreSet {
        let mut rows = Vec::new();
        for (i, &s) in bona.iter().enumerate() {
            rows.push(ScoreRow {
                id: format!("b{i}"),
                label: Label::BonaFide,
                score: s,
            });
        }
        for (i, &s) in attacks.iter().enumerate() {
            rows.push(ScoreRow {
                id: format!("a{i}"),
                label: Label::Attack,
                score: s,
            });
        }
        ScoreSet::new(Split::Dev, rows).unwrap()
    }

    #[test]
    fn candidates_are_zero_observed_and_midpoints() {
        let c = candidate_thresholds(&[0.9, 0.1, 0.5, 0.5]);
        assert_eq!(c, vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9]);
        assert_eq!(candidate_thresholds(&[0.4]), vec![0.0, 0.4]);
    }

    #[test]
    fn duplicate_ids_and_bad_scores_are_rejected() {
        let rows = vec![
            ScoreRow { id: "x".into(), label: Label::Attack, score: 0.2 },
            ScoreRow { id: "x".into(), label: Label::BonaFide, score: 0.4 },
        ];
        assert!(ScoreSet::new(Split::Dev, rows).is_err());
        let rows = vec![ScoreRow { id: "x".into(), label: Label::Attack, score: 1.2 }];
        assert!(ScoreSet::new(Split::Dev, rows).is_err());
    }

    #[test]
    fn single_class_sets_are_rejected_everywhere() {
        let only_attacks = set_of(&[], &[0.1, 0.2]);
        assert!(apcer_bpcer(&only_attacks, 0.5).is_err());
        assert!(eer_threshold(&only_attacks).is_err());
        assert!(bpcer_target_threshold(&only_attacks, 0.1).is_err());
        assert!(tpr_at_fpr(&only_attacks, 0.1).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_scores_bitwise() {
        let set = set_of(&[0.1234567890123, 1.0 / 3.0, 1.0], &[0.0, 1e-17]);
        let dir = std::env::temp_dir().join(format!("mmfas-scores-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.csv");
        set.write_csv(&path).unwrap();
        let back = ScoreSet::read_csv(&path, Split::Dev).unwrap();
        assert_eq!(back, set);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn malformed_csvs_are_rejected() {
        let dir = std::env::temp_dir().join(format!("mmfas-badcsv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        for (name, text) in [
            ("h.csv", "id,score\nx,0.5\n"),
            ("f.csv", "id,label,score\nx,attack\n"),
            ("l.csv", "id,label,score\nx,spoof,0.5\n"),
            ("n.csv", "id,label,score\nx,attack,zero\n"),
            ("r.csv", "id,label,score\nx,attack,1.5\n"),
            ("d.csv", "id,label,score\nx,attack,0.5\nx,bona_fide,0.6\n"),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, text).unwrap();
            assert!(ScoreSet::read_csv(&p, Split::Dev).is_err(), "{name}");
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
