use crate::error::{Error, Result};
use crate::faces::{FrameLabel, N_LANDMARKS};

/// Mean landmark distance in percent of the ground-truth inter-ocular distance.
pub fn landmark_error(pred: &[[f64; 2]; N_LANDMARKS], gt: &FrameLabel) -> Result<f64> {
    let [l, r] = [gt.landmarks[0], gt.landmarks[1]];
    let iod = (l[0] - r[0]).hypot(l[1] - r[1]);
    if iod <= 0.0 || !iod.is_finite() {
        return Err(Error::DegenerateLabel("eye landmarks coincide".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(&gt.landmarks)
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
        .sum();
    Ok(total / N_LANDMARKS as f64 / iod * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMae {
    /// Yaw, pitch, roll.
    pub per_angle: [f64; 3],
    pub overall: f64,
}

/// Mean absolute error per angle over `(yaw, pitch, roll)` triples, in degrees.
pub fn pose_mae(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<PoseMae> {
    if pred.len() != gt.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::arg("pose MAE of zero samples"));
    }
    let mut per_angle = [0.0; 3];
    for (p, g) in pred.iter().zip(gt) {
        for k in 0..3 {
            per_angle[k] += (p[k] - g[k]).abs();
        }
    }
    let n = pred.len() as f64;
    per_angle.iter_mut().for_each(|v| *v /= n);
    Ok(PoseMae {
        per_angle,
        overall: per_angle.iter().sum::<f64>() / 3.0,
    })
}

/// Area under the ROC curve as the Mann-Whitney statistic, with tied
/// positive/negative pairs counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk tie groups; each group contributes its negatives below and half its own.
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        let neg = (j - i) as u64 - pos;
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 * 0.5 / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroAuc {
    /// `None` where a class has a single label value in the evaluation set.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub skipped: Vec<usize>,
}

/// One-vs-rest AUC per class averaged over the classes where it is defined.
/// `scores[c]` and `labels[c]` hold the column for class `c`.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MacroAuc> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::arg(
            "macro AUC needs matching, non-empty score and label columns",
        ));
    }
    let mut per_class = Vec::with_capacity(scores.len());
    let mut skipped = Vec::new();
    for (c, (s, l)) in scores.iter().zip(labels).enumerate() {
        match auc(s, l) {
            Ok(v) => per_class.push(Some(v)),
            Err(Error::UndefinedAuc) => {
                skipped.push(c);
                per_class.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedAuc);
    }
    Ok(MacroAuc {
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
        skipped,
    })
}

/// Inverse-frequency class weights normalized to mean 1. Equal counts give
/// exactly 1 for every class.
pub fn class_weights(label_counts: &[usize]) -> Result<Vec<f64>> {
    if label_counts.is_empty() {
        return Err(Error::arg("class weights of zero classes"));
    }
    if let Some(c) = label_counts.iter().position(|&n| n == 0) {
        return Err(Error::arg(format!("class {c} has no samples")));
    }
    if label_counts.iter().all(|&n| n == label_counts[0]) {
        return Ok(vec![1.0; label_counts.len()]);
    }
    let inv: Vec<f64> = label_counts.iter().map(|&n| 1.0 / n as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.iter().map(|v| v / mean).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::faces::{Expression, Pose};

    fn label(landmarks: [[f64; 2]; 5]) -> FrameLabel {
        FrameLabel {
            pose: Pose::default(),
            landmarks,
            expression: Expression::default(),
        }
    }

    #[test]
    fn landmark_examples() {
        let gt = label([[0.0, 0.0], [10.0, 0.0], [5.0, 5.0], [2.0, 8.0], [8.0, 8.0]]);
        assert_eq!(landmark_error(&gt.landmarks, &gt).unwrap(), 0.0);
        let mut pred = gt.landmarks;
        pred[2] = [8.0, 9.0];
        assert!((landmark_error(&pred, &gt).unwrap() - 10.0).abs() < 1e-9);
        let coincident = label([[1.0, 1.0], [1.0, 1.0], [0.0; 2], [0.0; 2], [0.0; 2]]);
        assert!(matches!(
            landmark_error(&pred, &coincident),
            Err(Error::DegenerateLabel(_))
        ));
    }

    #[test]
    fn pose_examples() {
        let r = pose_mae(&[[10.0, 0.0, -5.0]], &[[12.0, -1.0, -5.0]]).unwrap();
        assert_eq!(r.per_angle, [2.0, 1.0, 0.0]);
        assert!((r.overall - 1.0).abs() < 1e-9);
        let same = pose_mae(&[[1.0, 2.0, 3.0]], &[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(same.overall, 0.0);
        assert!(pose_mae(&[], &[]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap(),
            0.75
        );
        assert_eq!(auc(&[3.0, 2.0, 1.0], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(
            auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(),
            0.5
        );
        assert!(matches!(
            auc(&[1.0, 2.0], &[true, true]),
            Err(Error::UndefinedAuc)
        ));
    }

    #[test]
    fn macro_auc_skips_single_class_columns() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.4]];
        let labels = vec![vec![true, false], vec![true, true]];
        let m = macro_auc(&scores, &labels).unwrap();
        assert_eq!(m.per_class, vec![Some(1.0), None]);
        assert_eq!(m.skipped, vec![1]);
        assert_eq!(m.mean, 1.0);
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights(&[7, 7, 7]).unwrap(), vec![1.0; 3]);
        let w = class_weights(&[10, 40]).unwrap();
        assert!((w[0] - 1.6).abs() < 1e-12 && (w[1] - 0.4).abs() < 1e-12);
        assert!(class_weights(&[3, 0]).is_err());
    }

    fn pair_count(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn auc_equals_pair_counting(
            data in prop::collection::vec(((0u8..12).prop_map(|v| v as f64 / 4.0), any::<bool>()), 2..=100)
        ) {
            let (scores, labels): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
            let pos = labels.iter().filter(|&&l| l).count();
            prop_assume!(pos > 0 && pos < labels.len());
            prop_assert_eq!(auc(&scores, &labels).unwrap(), pair_count(&scores, &labels));
        }

        #[test]
        fn auc_invariant_to_increasing_transforms(
            data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..=60)
        ) {
            let (scores, labels): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
            let pos = labels.iter().filter(|&&l| l).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let moved: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&moved, &labels).unwrap());
        }

        #[test]
        fn landmark_error_is_similarity_invariant(
            pts in prop::array::uniform5((0.0f64..60.0, 0.0f64..60.0)),
            noise in prop::array::uniform5((-3.0f64..3.0, -3.0f64..3.0)),
            scale in 0.2f64..5.0,
            shift in (-20.0f64..20.0, -20.0f64..20.0),
        ) {
            let gt_pts = pts.map(|(x, y)| [x, y]);
            prop_assume!((gt_pts[0][0] - gt_pts[1][0]).hypot(gt_pts[0][1] - gt_pts[1][1]) > 1.0);
            let mut pred = gt_pts;
            for (p, n) in pred.iter_mut().zip(noise) {
                p[0] += n.0;
                p[1] += n.1;
            }
            let base = landmark_error(&pred, &label(gt_pts)).unwrap();
            let tf = |p: [f64; 2]| [p[0] * scale + shift.0, p[1] * scale + shift.1];
            let moved = landmark_error(&pred.map(tf), &label(gt_pts.map(tf))).unwrap();
            prop_assert!((base - moved).abs() <= 1e-9 * base.max(1.0));
        }

        #[test]
        fn pose_mae_is_order_invariant(
            rows in prop::collection::vec((prop::array::uniform3(-45.0f64..45.0), prop::array::uniform3(-45.0f64..45.0)), 1..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut crate::rng::stream(seed, 0));
            let split = |r: &[([f64; 3], [f64; 3])]| -> (Vec<[f64; 3]>, Vec<[f64; 3]>) { r.iter().copied().unzip() };
            let (p, g) = split(&rows);
            let (ps, gs) = split(&shuffled);
            let a = pose_mae(&p, &g).unwrap();
            let b = pose_mae(&ps, &gs).unwrap();
            for k in 0..3 {
                prop_assert!((a.per_angle[k] - b.per_angle[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn weights_decrease_with_count(counts in prop::collection::vec(1usize..500, 2..10)) {
            let w = class_weights(&counts).unwrap();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9);
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    if counts[i] < counts[j] {
                        prop_assert!(w[i] > w[j]);
                    }
                }
            }
        }
    }
}
