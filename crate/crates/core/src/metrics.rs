//! Evaluation metrics: temporal IoU of intervals, volumetric IoU of
//! predicted tubes, vIoU@R, and corpus means.
//!
//! Frames are integers; a frame t belongs to the half-open interval
//! [start, end) iff start <= t < end. vIoU averages per-frame box IoU over
//! the frame intersection, normalized by the size of the frame union.

use crate::error::{Error, Result};
use crate::spatial::BoundingBox;
use crate::temporal::TemporalInterval;
use serde::Serialize;
use std::collections::BTreeMap;

/// One video's predicted tube paired with its ground truth.
#[derive(Clone, Debug)]
pub struct GroundingResult {
    pub gt_interval: TemporalInterval,
    pub pred_interval: TemporalInterval,
    pub gt_boxes: BTreeMap<usize, BoundingBox>,
    pub pred_boxes: BTreeMap<usize, BoundingBox>,
}

/// Integer frames t with start <= t < end.
pub fn frames_of(interval: &TemporalInterval) -> Vec<usize> {
    let lo = interval.start.ceil().max(0.0) as usize;
    let hi = interval.end.ceil() as usize;
    (lo..hi).collect()
}

/// Temporal IoU of two intervals on the real line.
pub fn tiou(a: &TemporalInterval, b: &TemporalInterval) -> f64 {
    a.iou(b)
}

/// Volumetric IoU: mean per-frame box IoU over the frame intersection,
/// divided by the frame union size. Frames missing a box on either side
/// contribute zero overlap.
pub fn viou(result: &GroundingResult) -> Result<f64> {
    let gt_frames = frames_of(&result.gt_interval);
    let pred_frames = frames_of(&result.pred_interval);
    let union: std::collections::BTreeSet<usize> =
        gt_frames.iter().chain(pred_frames.iter()).copied().collect();
    if union.is_empty() {
        return Err(Error::EmptyFrameUnion);
    }
    let mut acc = 0.0;
    for t in gt_frames.iter().filter(|t| pred_frames.contains(t)) {
        if let (Some(g), Some(p)) = (result.gt_boxes.get(t), result.pred_boxes.get(t)) {
            acc += g.iou(p);
        }
    }
    Ok(acc / union.len() as f64)
}

/// Fraction of results whose vIoU strictly exceeds R.
pub fn viou_at_r(results: &[GroundingResult], r: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let mut hits = 0usize;
    for res in results {
        if viou(res)? > r {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Corpus-level metric report.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub m_tiou: f64,
    pub m_viou: f64,
    pub viou_at: BTreeMap<String, f64>,
    pub n_videos: usize,
}

/// Arithmetic means of tIoU and vIoU over the corpus, plus vIoU@R for the
/// given thresholds (0.3 and 0.5 by default).
pub fn aggregate(results: &[GroundingResult], thresholds: &[f64]) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let n = results.len() as f64;
    let mut sum_t = 0.0;
    let mut sum_v = 0.0;
    for r in results {
        sum_t += tiou(&r.gt_interval, &r.pred_interval);
        sum_v += viou(r)?;
    }
    let mut viou_at = BTreeMap::new();
    for &r in thresholds {
        viou_at.insert(format!("{r}"), viou_at_r(results, r)?);
    }
    Ok(MetricsReport {
        m_tiou: sum_t / n,
        m_viou: sum_v / n,
        viou_at,
        n_videos: results.len(),
    })
}

/// The default vIoU@R thresholds.
pub const DEFAULT_VIOU_THRESHOLDS: [f64; 2] = [0.3, 0.5];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> BoundingBox {
        BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap()
    }

    fn result_with(
        gt: (f64, f64),
        pred: (f64, f64),
        gt_box: BoundingBox,
        pred_box: BoundingBox,
    ) -> GroundingResult {
        let gt_interval = TemporalInterval::new(gt.0, gt.1).unwrap();
        let pred_interval = TemporalInterval::new(pred.0, pred.1).unwrap();
        let gt_boxes = frames_of(&gt_interval).into_iter().map(|t| (t, gt_box)).collect();
        let pred_boxes = frames_of(&pred_interval)
            .into_iter()
            .map(|t| (t, pred_box))
            .collect();
        GroundingResult {
            gt_interval,
            pred_interval,
            gt_boxes,
            pred_boxes,
        }
    }

    #[test]
    fn tiou_hand_cases() {
        let a = TemporalInterval::new(2.0, 6.0).unwrap();
        assert_eq!(tiou(&a, &a), 1.0);
        let b = TemporalInterval::new(8.0, 10.0).unwrap();
        assert_eq!(tiou(&a, &b), 0.0);
        let c = TemporalInterval::new(4.0, 8.0).unwrap();
        assert_relative_eq!(tiou(&a, &c), 1.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(tiou(&c, &a), 1.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn viou_hand_cases() {
        // Identical intervals and boxes.
        let r = result_with((0.0, 4.0), (0.0, 4.0), unit_box(), unit_box());
        assert_eq!(viou(&r).unwrap(), 1.0);

        // gt frames {0..3}, pred frames {2..5}, identical boxes: 2/6.
        let r = result_with((0.0, 4.0), (2.0, 6.0), unit_box(), unit_box());
        assert_relative_eq!(viou(&r).unwrap(), 2.0 / 6.0, max_relative = 1e-12);

        // Disjoint intervals: empty frame intersection.
        let r = result_with((0.0, 3.0), (5.0, 8.0), unit_box(), unit_box());
        assert_eq!(viou(&r).unwrap(), 0.0);
    }

    #[test]
    fn viou_is_bounded_by_frame_overlap_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let g0 = rng.gen_range(0.0..10.0);
            let g1 = g0 + rng.gen_range(1.0..8.0);
            let p0 = rng.gen_range(0.0..10.0);
            let p1 = p0 + rng.gen_range(1.0..8.0);
            let bb = |rng: &mut ChaCha8Rng| {
                let x1 = rng.gen_range(0.0..20.0);
                let y1 = rng.gen_range(0.0..20.0);
                BoundingBox::new(x1, y1, x1 + rng.gen_range(1.0..10.0), y1 + rng.gen_range(1.0..10.0))
                    .unwrap()
            };
            let r = result_with((g0, g1), (p0, p1), bb(&mut rng), bb(&mut rng));
            let gt_f = frames_of(&r.gt_interval);
            let pr_f = frames_of(&r.pred_interval);
            if gt_f.is_empty() && pr_f.is_empty() {
                continue;
            }
            let inter = gt_f.iter().filter(|t| pr_f.contains(t)).count() as f64;
            let union: std::collections::BTreeSet<_> =
                gt_f.iter().chain(pr_f.iter()).collect();
            let v = viou(&r).unwrap();
            assert!((0.0..=1.0).contains(&v));
            assert!(v <= inter / union.len() as f64 + 1e-12);
        }
    }

    #[test]
    fn viou_at_r_counts_strictly() {
        let perfect = result_with((0.0, 4.0), (0.0, 4.0), unit_box(), unit_box());
        assert_eq!(viou_at_r(&[perfect.clone()], 0.5).unwrap(), 1.0);
        // Strict comparison: vIoU exactly 1.0 does not clear R = 1.0.
        assert_eq!(viou_at_r(&[perfect.clone()], 1.0).unwrap(), 0.0);

        // vIoUs {1/3, 1, 0} against R = 0.3: two out of three clear it.
        let third = result_with((0.0, 4.0), (2.0, 6.0), unit_box(), unit_box());
        let zero = result_with((0.0, 3.0), (5.0, 8.0), unit_box(), unit_box());
        let all = vec![third, perfect, zero];
        assert_relative_eq!(
            viou_at_r(&all, 0.3).unwrap(),
            2.0 / 3.0,
            max_relative = 1e-12
        );

        // Monotone non-increasing in R.
        let mut prev = 1.0;
        for k in 0..=10 {
            let r = k as f64 / 10.0;
            let v = viou_at_r(&all, r).unwrap();
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn aggregate_means_and_report_shape() {
        let perfect = result_with((0.0, 4.0), (0.0, 4.0), unit_box(), unit_box());
        let miss = result_with((0.0, 4.0), (8.0, 12.0), unit_box(), unit_box());
        let report = aggregate(&[perfect, miss], &DEFAULT_VIOU_THRESHOLDS).unwrap();
        assert_relative_eq!(report.m_tiou, 0.5, max_relative = 1e-12);
        assert_relative_eq!(report.m_viou, 0.5, max_relative = 1e-12);
        assert_eq!(report.n_videos, 2);
        assert_eq!(report.viou_at.len(), 2);
        assert_relative_eq!(report.viou_at["0.3"], 0.5, max_relative = 1e-12);

        assert!(matches!(aggregate(&[], &[0.3]), Err(Error::EmptyResults)));
    }

    #[test]
    fn single_perfect_result_scores_all_ones() {
        let perfect = result_with((1.0, 9.0), (1.0, 9.0), unit_box(), unit_box());
        let report = aggregate(&[perfect], &DEFAULT_VIOU_THRESHOLDS).unwrap();
        assert_eq!(report.m_tiou, 1.0);
        assert_eq!(report.m_viou, 1.0);
        assert_eq!(report.viou_at["0.3"], 1.0);
        assert_eq!(report.viou_at["0.5"], 1.0);
    }
}
