//! Ranking AUC, Dice overlap and IoU-swept mean average precision.

use super::{BBox, DataError};

/// IoU thresholds 0.40, 0.45, ..., 0.75.
pub const MAP_THRESHOLDS: [f64; 8] = [0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75];

/// Mann-Whitney AUC with half credit for ties; `None` if either class is absent.
pub fn auc_binary(scores: &[f32], positive: &[bool]) -> Option<f64> {
    assert_eq!(
        scores.len(),
        positive.len(),
        "scores and labels differ in length"
    );
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum, so tied ranks stay integral.
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u64;
        rank2_pos += rank2 * order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        i = j + 1;
    }
    let np = n_pos as u64;
    let u2 = rank2_pos - np * (np + 1);
    Some(u2 as f64 / (2 * np * n_neg as u64) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroAuc {
    pub per_class: Vec<Option<f64>>,
    pub macro_avg: f64,
}

/// One-vs-rest AUC per class, macro-averaged over classes present with both labels.
pub fn metric_auc(scores: &[Vec<f32>], labels: &[usize]) -> Result<MacroAuc, DataError> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(DataError::Metric(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let classes = scores[0].len();
    if scores.iter().any(|s| s.len() != classes) {
        return Err(DataError::Metric("ragged score rows".into()));
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|k| {
            let s: Vec<f32> = scores.iter().map(|r| r[k]).collect();
            let p: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            auc_binary(&s, &p)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(DataError::Metric(
            "no class has both positive and negative samples".into(),
        ));
    }
    let macro_avg = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MacroAuc {
        per_class,
        macro_avg,
    })
}

/// `2|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn metric_dice(pred: &[u8], gt: &[u8]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mask lengths differ");
    let a = pred.iter().filter(|&&v| v != 0).count();
    let b = gt.iter().filter(|&&v| v != 0).count();
    if a + b == 0 {
        return 1.0;
    }
    let inter = pred
        .iter()
        .zip(gt)
        .filter(|(&p, &g)| p != 0 && g != 0)
        .count();
    2.0 * inter as f64 / (a + b) as f64
}

/// Intersection over union of two `(x, y, w, h)` boxes; negative extents count as empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let span = |lo: f32, len: f32| (f64::from(lo), f64::from(lo) + f64::from(len.max(0.0)));
    let (ax0, ax1) = span(a[0], a[2]);
    let (ay0, ay1) = span(a[1], a[3]);
    let (bx0, bx1) = span(b[0], b[2]);
    let (by0, by1) = span(b[1], b[3]);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub bbox: BBox,
    pub score: f32,
}

/// Average precision at one IoU threshold with greedy score-ordered matching.
pub fn metric_map_at(dets: &[Detection], gts: &[Vec<BBox>], threshold: f64) -> f64 {
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(dets.len());
    for &d in &order {
        let det = &dets[d];
        let Some(boxes) = gts.get(det.image) else {
            hits.push(false);
            continue;
        };
        let best = boxes
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[det.image][*j])
            .map(|(j, g)| (j, iou(&det.bbox, g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        match best {
            Some((j, v)) if v >= threshold => {
                used[det.image][j] = true;
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    hits.iter()
        .zip(&precision)
        .filter(|(&h, _)| h)
        .map(|(_, &p)| p)
        .sum::<f64>()
        / total_gt as f64
}

/// Mean of [`metric_map_at`] over [`MAP_THRESHOLDS`].
pub fn metric_map(dets: &[Detection], gts: &[Vec<BBox>]) -> f64 {
    MAP_THRESHOLDS
        .iter()
        .map(|&t| metric_map_at(dets, gts, t))
        .sum::<f64>()
        / MAP_THRESHOLDS.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_extremes_and_ties() {
        let labels = [false, false, true, true];
        assert_eq!(auc_binary(&[0.1, 0.2, 0.3, 0.4], &labels), Some(1.0));
        assert_eq!(auc_binary(&[0.4, 0.3, 0.2, 0.1], &labels), Some(0.0));
        assert_eq!(auc_binary(&[0.5; 4], &labels), Some(0.5));
        assert_eq!(auc_binary(&[0.5; 2], &[true, true]), None);
    }

    #[test]
    fn macro_auc_skips_absent_classes() {
        let scores = vec![
            vec![0.9, 0.1, 0.0],
            vec![0.2, 0.8, 0.0],
            vec![0.7, 0.3, 0.0],
        ];
        let m = metric_auc(&scores, &[0, 1, 0]).unwrap();
        assert_eq!(m.per_class[2], None);
        assert_eq!(m.macro_avg, 1.0);
        assert!(metric_auc(&[], &[]).is_err());
    }

    #[test]
    fn dice_fixtures() {
        assert_eq!(metric_dice(&[1, 1, 0, 0], &[1, 1, 0, 0]), 1.0);
        assert_eq!(metric_dice(&[1, 1, 0, 0], &[0, 0, 1, 1]), 0.0);
        assert_eq!(metric_dice(&[0; 4], &[0; 4]), 1.0);
        assert_eq!(metric_dice(&[1, 1, 1, 1, 0, 0], &[0, 0, 1, 1, 1, 1]), 0.5);
    }

    #[test]
    fn map_fixtures() {
        let gt = vec![vec![[0.0, 0.0, 0.5, 0.5]]];
        let exact = [Detection {
            image: 0,
            bbox: [0.0, 0.0, 0.5, 0.5],
            score: 0.01,
        }];
        assert_eq!(metric_map(&exact, &gt), 1.0);
        assert_eq!(metric_map(&[], &gt), 0.0);
        let iou_half = [Detection {
            image: 0,
            bbox: [0.0, 0.0, 0.5, 0.25],
            score: 0.9,
        }];
        assert_eq!(iou(&iou_half[0].bbox, &gt[0][0]), 0.5);
        assert_eq!(metric_map(&iou_half, &gt), 3.0 / 8.0);
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let a = [0.0, 0.0, 0.5, 0.5];
        let b = [0.25, 0.25, 0.5, 0.5];
        assert_eq!(iou(&a, &b), iou(&b, &a));
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-9);
        assert_eq!(iou(&a, &[0.0, 0.0, -1.0, 0.5]), 0.0);
    }
}
