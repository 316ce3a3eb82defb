//! Evaluation metrics: AUC, Dist, MDist, Ang, MAng and accumulative error curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ray_direction, NormalizedPoint};
use crate::heatmap::Heatmap;

/// Ground-truth annotations for one person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub head: NormalizedPoint,
    pub annotations: Vec<NormalizedPoint>,
}

impl GroundTruthSet {
    pub fn new(head: NormalizedPoint, annotations: Vec<NormalizedPoint>) -> Result<Self> {
        if annotations.is_empty() {
            return Err(Error::invalid("ground truth needs at least one annotation"));
        }
        if let Some(p) = std::iter::once(&head).chain(&annotations).find(|p| !p.in_unit_square()) {
            return Err(Error::Range(format!("({}, {}) outside the image", p.x, p.y)));
        }
        Ok(GroundTruthSet { head, annotations })
    }

    pub fn mean(&self) -> NormalizedPoint {
        NormalizedPoint::mean(&self.annotations).expect("non-empty")
    }
}

/// Distance from `pred` to the mean annotation.
pub fn dist(pred: NormalizedPoint, gts: &GroundTruthSet) -> f64 {
    pred.distance(&gts.mean())
}

/// Distance from `pred` to the nearest annotation.
pub fn mdist(pred: NormalizedPoint, gts: &GroundTruthSet) -> f64 {
    gts.annotations
        .iter()
        .map(|g| pred.distance(g))
        .fold(f64::INFINITY, f64::min)
}

fn angle_deg(head: NormalizedPoint, a: NormalizedPoint, b: NormalizedPoint) -> Option<f64> {
    ray_direction(head, a)
        .angle_to(&ray_direction(head, b))
        .map(f64::to_degrees)
}

/// Angle in degrees between `pred - head` and `mean - head`.
/// `None` when either point coincides with the head.
pub fn ang(pred: NormalizedPoint, gts: &GroundTruthSet) -> Option<f64> {
    angle_deg(gts.head, pred, gts.mean())
}

/// Smallest angle in degrees over all annotations that do not coincide with the head.
pub fn mang(pred: NormalizedPoint, gts: &GroundTruthSet) -> Option<f64> {
    gts.annotations
        .iter()
        .filter_map(|g| angle_deg(gts.head, pred, *g))
        .reduce(f64::min)
}

/// ROC area with heatmap values as scores, annotated cells as positives and every
/// other cell as a negative. Tied scores count one half.
pub fn auc(pred: &Heatmap, gts: &GroundTruthSet) -> Result<f64> {
    let mut positive = vec![false; pred.values.len()];
    for g in &gts.annotations {
        let (r, c) = pred.cell_of(*g);
        positive[r * pred.width + c] = true;
    }
    auc_from_labels(&pred.values, &positive)
}

/// Mann-Whitney form of the ROC area using mid-ranks for ties.
pub fn auc_from_labels(scores: &[f64], positive: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both positive and negative cells"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fraction: f64,
}

/// Fraction of errors `<= t` for each threshold.
pub fn accumulative_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<CurvePoint>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("curve thresholds must be sorted ascending"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = sorted.partition_point(|&e| e <= t);
            CurvePoint {
                threshold: t,
                fraction: if sorted.is_empty() { 0.0 } else { hits as f64 / sorted.len() as f64 },
            }
        })
        .collect())
}

/// 101 evenly spaced distance thresholds over `[0, 0.5]`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 200.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub id: String,
    pub pred_x: f64,
    pub pred_y: f64,
    pub auc: f64,
    pub dist: f64,
    pub mdist: f64,
    pub ang: Option<f64>,
    pub mang: Option<f64>,
}

impl SampleMetrics {
    pub fn compute(index: usize, id: impl Into<String>, heatmap: &Heatmap, pred: NormalizedPoint, gts: &GroundTruthSet) -> Result<Self> {
        Ok(SampleMetrics {
            index,
            id: id.into(),
            pred_x: pred.x,
            pred_y: pred.y,
            auc: auc(heatmap, gts)?,
            dist: dist(pred, gts),
            mdist: mdist(pred, gts),
            ang: ang(pred, gts),
            mang: mang(pred, gts),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub samples: usize,
    pub auc: f64,
    pub dist: f64,
    pub mdist: f64,
    pub ang: f64,
    pub mang: f64,
    /// Samples left out of the angular means because a point coincided with the head.
    pub degenerate_angles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
    pub curve: Vec<CurvePoint>,
}

impl MetricReport {
    /// Fold per-sample records in the given order.
    pub fn from_samples(per_sample: Vec<SampleMetrics>, thresholds: &[f64]) -> Result<Self> {
        let n = per_sample.len();
        let mean = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| -> (f64, usize) {
            let vals: Vec<f64> = per_sample.iter().filter_map(f).collect();
            let m = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
            (m, n - vals.len())
        };
        let (auc, _) = mean(&|s| Some(s.auc));
        let (dist, _) = mean(&|s| Some(s.dist));
        let (mdist, _) = mean(&|s| Some(s.mdist));
        let (ang, degenerate) = mean(&|s| s.ang);
        let (mang, _) = mean(&|s| s.mang);
        let dists: Vec<f64> = per_sample.iter().map(|s| s.dist).collect();
        let curve = accumulative_curve(&dists, thresholds)?;
        Ok(MetricReport {
            per_sample,
            aggregate: Aggregate {
                samples: n,
                auc,
                dist,
                mdist,
                ang,
                mang,
                degenerate_angles: degenerate,
            },
            curve,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, y: f64) -> NormalizedPoint {
        NormalizedPoint { x, y }
    }

    fn gts(head: NormalizedPoint, pts: &[(f64, f64)]) -> GroundTruthSet {
        GroundTruthSet::new(head, pts.iter().map(|&(x, y)| pt(x, y)).collect()).unwrap()
    }

    #[test]
    fn dist_examples() {
        let g = gts(pt(0.5, 0.5), &[(0.0, 0.0)]);
        assert!((dist(pt(0.3, 0.4), &g) - 0.5).abs() < 1e-15);
        assert_eq!(dist(pt(0.0, 0.0), &g), 0.0);
        let g2 = gts(pt(0.5, 0.1), &[(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(dist(pt(0.5, 0.5), &g2), 0.0);
    }

    #[test]
    fn mdist_examples() {
        let g = gts(pt(0.5, 0.5), &[(0.1, 0.1), (0.9, 0.9)]);
        assert!((mdist(pt(0.2, 0.1), &g) - 0.1).abs() < 1e-15);
        let single = gts(pt(0.5, 0.5), &[(0.2, 0.7)]);
        assert_eq!(mdist(pt(0.9, 0.1), &single), dist(pt(0.9, 0.1), &single));
    }

    #[test]
    fn angle_examples() {
        let g = gts(pt(0.5, 0.5), &[(1.0, 0.5)]);
        assert!((ang(pt(0.5, 1.0), &g).unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(ang(pt(0.75, 0.5), &g).unwrap(), 0.0);
        assert!((ang(pt(0.0, 0.5), &g).unwrap() - 180.0).abs() < 1e-12);
        assert_eq!(ang(pt(0.5, 0.5), &g), None);
        assert_eq!(mang(pt(0.5, 1.0), &g), ang(pt(0.5, 1.0), &g));

        let multi = gts(pt(0.5, 0.5), &[(1.0, 0.5), (0.5, 0.0)]);
        assert_eq!(mang(pt(0.5, 0.2), &multi).unwrap(), 0.0);
    }

    #[test]
    fn auc_extremes() {
        let g = gts(pt(0.5, 0.5), &[(0.6, 0.1)]);
        let mut v = vec![0.1; 16];
        let h0 = Heatmap::new(4, 4, v.clone()).unwrap();
        assert_eq!(auc(&h0, &g).unwrap(), 0.5);
        let (r, c) = h0.cell_of(pt(0.6, 0.1));
        v[r * 4 + c] = 0.9;
        assert_eq!(auc(&Heatmap::new(4, 4, v).unwrap(), &g).unwrap(), 1.0);
        let everywhere = Heatmap::new(1, 1, vec![0.3]).unwrap();
        assert!(auc(&everywhere, &g).is_err());
    }

    #[test]
    fn curve_examples() {
        let c = accumulative_curve(&[0.0, 0.0], &[0.0, 0.1, 0.5]).unwrap();
        assert!(c.iter().all(|p| p.fraction == 1.0));
        let c = accumulative_curve(&[0.05, 0.15], &[0.1]).unwrap();
        assert_eq!(c[0].fraction, 0.5);
        assert!(accumulative_curve(&[0.1], &[0.2, 0.1]).is_err());
    }

    #[test]
    fn degenerate_angles_are_counted_not_averaged() {
        let g = gts(pt(0.5, 0.5), &[(1.0, 0.5)]);
        let h = Heatmap::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = SampleMetrics::compute(0, "a", &h, pt(0.5, 0.5), &g).unwrap();
        let b = SampleMetrics::compute(1, "b", &h, pt(0.5, 1.0), &g).unwrap();
        let r = MetricReport::from_samples(vec![a, b], &[0.1]).unwrap();
        assert_eq!(r.aggregate.degenerate_angles, 1);
        assert!((r.aggregate.ang - 90.0).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_validation() {
        assert!(GroundTruthSet::new(pt(0.5, 0.5), vec![]).is_err());
        assert!(GroundTruthSet::new(pt(0.5, 0.5), vec![pt(1.5, 0.0)]).is_err());
    }
}
