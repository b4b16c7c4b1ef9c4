//! Frame-level ROC/AUC evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Broadcasts `T` snippet scores to `num_frames` frames. Frames fall into
/// contiguous blocks of `ceil(num_frames / T)`; the final block takes
/// whatever remains.
pub fn snippet_to_frame_scores(scores: &[f64], num_frames: usize) -> Result<Vec<f64>> {
    let t = scores.len();
    if t == 0 || num_frames < t {
        return Err(Error::invalid(
            "snippet_to_frame_scores",
            format!("{num_frames} frames cannot cover {t} snippets"),
        ));
    }
    let block = num_frames.div_ceil(t);
    Ok((0..num_frames).map(|f| scores[(f / block).min(t - 1)]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    #[serde(serialize_with = "threshold_json")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn threshold_json<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

/// ROC points for "positive iff score ≥ threshold", at every distinct score
/// in descending order, bracketed by `+inf` (0, 0) and `-inf` (1, 1)
/// sentinels.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_curve", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid("roc_curve", format!("label {l} is not 0/1")));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid("roc_curve", format!("score {s} is not finite")));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass(format!("{positives} positive and {negatives} negative frames")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    Ok(points)
}

/// Trapezoidal area under ROC points ordered by increasing FPR.
pub fn auc(points: &[RocPoint]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("auc", "need at least two ROC points"));
    }
    let mut area = 0.0;
    for w in points.windows(2) {
        let dx = w[1].fpr - w[0].fpr;
        if dx < 0.0 || w[1].tpr < w[0].tpr {
            return Err(Error::invalid("auc", "ROC points are not monotone"));
        }
        area += dx * (w[0].tpr + w[1].tpr) / 2.0;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VideoSummary {
    pub mean_score: f64,
    pub max_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub auc: f64,
    pub frames: usize,
    pub positive_frames: usize,
    pub per_video: BTreeMap<String, VideoSummary>,
    pub roc: Vec<RocPoint>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `threshold,fpr,tpr` rows with a header.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.roc {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        out
    }
}

/// Scores every test video in inference mode and computes one ROC over all
/// frames pooled together.
pub fn evaluate(model: &ModelParams, dataset: &Dataset) -> Result<EvalReport> {
    let mut frame_scores = Vec::new();
    let mut frame_labels = Vec::new();
    let mut per_video = BTreeMap::new();
    for v in &dataset.videos {
        let labels = v.frame_labels.as_ref().ok_or_else(|| Error::Entry {
            id: v.id.clone(),
            detail: "no frame labels; evaluation needs a labeled test split".into(),
        })?;
        let bag = model.score(&v.features, v.label).map_err(|e| Error::Entry {
            id: v.id.clone(),
            detail: e.to_string(),
        })?;
        let frames = snippet_to_frame_scores(&bag.scores, v.num_frames).map_err(|e| Error::Entry {
            id: v.id.clone(),
            detail: e.to_string(),
        })?;
        if labels.len() != frames.len() {
            return Err(Error::Entry {
                id: v.id.clone(),
                detail: format!("{} frame labels for {} frames", labels.len(), frames.len()),
            });
        }
        let mean_score = bag.scores.iter().sum::<f64>() / bag.scores.len() as f64;
        let max_score = bag.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        per_video.insert(v.id.clone(), VideoSummary { mean_score, max_score });
        frame_scores.extend(frames);
        frame_labels.extend_from_slice(labels);
    }
    let roc = roc_curve(&frame_scores, &frame_labels)?;
    Ok(EvalReport {
        auc: auc(&roc)?,
        frames: frame_scores.len(),
        positive_frames: frame_labels.iter().filter(|&&l| l == 1).count(),
        per_video,
        roc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n²) pair counting with ties credited one half.
    fn mann_whitney(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    fn auc_of(scores: &[f64], labels: &[u8]) -> f64 {
        auc(&roc_curve(scores, labels).unwrap()).unwrap()
    }

    #[test]
    fn frame_expansion() {
        assert_eq!(snippet_to_frame_scores(&[0.2, 0.8], 4).unwrap(), vec![0.2, 0.2, 0.8, 0.8]);
        assert_eq!(snippet_to_frame_scores(&[0.2, 0.8], 5).unwrap(), vec![0.2, 0.2, 0.2, 0.8, 0.8]);
        assert_eq!(snippet_to_frame_scores(&[0.1, 0.5, 0.9], 3).unwrap(), vec![0.1, 0.5, 0.9]);
        assert!(snippet_to_frame_scores(&[0.1, 0.5, 0.9], 2).is_err());
    }

    #[test]
    fn perfect_separation() {
        let roc = roc_curve(&[0.9, 0.1], &[1, 0]).unwrap();
        assert!(roc.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&roc).unwrap(), 1.0);
    }

    #[test]
    fn constant_scores() {
        let roc = roc_curve(&[0.5; 6], &[1, 0, 0, 1, 0, 0]).unwrap();
        assert_eq!(roc.len(), 3);
        assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        assert_eq!((roc[1].fpr, roc[1].tpr), (1.0, 1.0));
        assert_eq!(auc(&roc).unwrap(), 0.5);
    }

    #[test]
    fn hand_case() {
        assert_eq!(auc_of(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]), 0.75);
        assert_eq!(mann_whitney(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]), 0.75);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(roc_curve(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass(_))));
        assert!(matches!(roc_curve(&[0.1, 0.2], &[0, 0]), Err(Error::SingleClass(_))));
    }

    #[test]
    fn curve_invariants_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.random_range(2..=200);
            // Coarse grid so ties are common.
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..20u8)) / 20.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let roc = roc_curve(&scores, &labels).unwrap();
            assert!(roc.windows(2).all(|w| w[0].threshold > w[1].threshold || w[1].threshold == f64::NEG_INFINITY));
            assert!(roc.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
            assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
            assert_eq!((roc.last().unwrap().fpr, roc.last().unwrap().tpr), (1.0, 1.0));
            let a = auc(&roc).unwrap();
            assert!((a - mann_whitney(&scores, &labels)).abs() < 1e-12);

            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            assert!((auc_of(&scores, &flipped) - (1.0 - a)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn monotone_transform_and_order_invariance(
            pairs in prop::collection::vec((0.0f64..1.0, 0u8..2), 2..60),
            seed in any::<u64>(),
        ) {
            let mut scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let mut labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            labels[0] = 0;
            labels[1] = 1;
            let base = auc_of(&scores, &labels);
            prop_assert!((0.0..=1.0).contains(&base));

            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((auc_of(&transformed, &labels) - base).abs() < 1e-12);

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..scores.len()).rev() {
                let j = rng.random_range(0..=i);
                scores.swap(i, j);
                labels.swap(i, j);
            }
            prop_assert!((auc_of(&scores, &labels) - base).abs() < 1e-12);
        }
    }
}
