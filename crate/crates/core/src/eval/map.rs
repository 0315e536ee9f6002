use crate::geometry::{chamfer_distance, Point};
use crate::model::ModelOutput;
use crate::scene::Polyline;
use crate::train::hungarian;

/// Chamfer thresholds (m) at which map AP is computed.
pub const AP_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];
/// Class probability a map prediction needs to count as a detection.
pub const CLASS_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct MapDetection {
    pub class: usize,
    pub score: f64,
    pub points: Vec<Point<f64>>,
}

/// Predictions whose most likely real class has probability at least
/// [`CLASS_THRESHOLD`] under the softmax over all classes and no-object.
pub fn detections(points: &[Vec<Point<f64>>], class_logits: &[Vec<f64>]) -> Vec<MapDetection> {
    points
        .iter()
        .zip(class_logits)
        .filter_map(|(pts, logits)| {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let real = &logits[..logits.len() - 1];
            let (class, best) =
                real.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bc, bl), (c, &l)| {
                        if l > bl {
                            (c, l)
                        } else {
                            (bc, bl)
                        }
                    });
            let score = (best - max).exp() / z;
            (score >= CLASS_THRESHOLD).then(|| MapDetection {
                class,
                score,
                points: pts.clone(),
            })
        })
        .collect()
}

/// All-point interpolated average precision of score-ranked hits.
pub fn average_precision(hits: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut ranked = hits.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let curve: Vec<(f64, f64)> = ranked
        .iter()
        .enumerate()
        .map(|(i, &(_, hit))| {
            tp += usize::from(hit);
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let (recall, _) = curve[i];
        if recall > prev_recall {
            let envelope = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    ap
}

/// Dataset-wide map detection statistics.
#[derive(Clone, Debug)]
pub struct MapAccumulator {
    gt_counts: Vec<usize>,
    /// Per class and threshold: (score, true positive).
    hits: Vec<[Vec<(f64, bool)>; 3]>,
    chamfer_sum: f64,
    chamfer_pairs: usize,
}

impl MapAccumulator {
    pub fn new(n_classes: usize) -> Self {
        Self {
            gt_counts: vec![0; n_classes],
            hits: vec![Default::default(); n_classes],
            chamfer_sum: 0.0,
            chamfer_pairs: 0,
        }
    }

    pub fn add_scene(&mut self, dets: &[MapDetection], gt: &[Polyline]) {
        for class in 0..self.gt_counts.len() {
            let gt_c: Vec<&[Point<f64>]> = gt
                .iter()
                .filter(|g| g.class.index() == class)
                .map(|g| g.points.as_slice())
                .collect();
            let mut det_c: Vec<&MapDetection> = dets.iter().filter(|d| d.class == class).collect();
            det_c.sort_by(|a, b| b.score.total_cmp(&a.score));
            self.gt_counts[class] += gt_c.len();
            let cost: Vec<Vec<f64>> = det_c
                .iter()
                .map(|d| {
                    gt_c.iter()
                        .map(|g| chamfer_distance(&d.points, g))
                        .collect()
                })
                .collect();

            if !det_c.is_empty() && !gt_c.is_empty() {
                let m = hungarian(&cost).expect("finite chamfer costs");
                self.chamfer_sum += m.total_cost;
                self.chamfer_pairs += m.pairs.len();
            }

            for (k, &tau) in AP_THRESHOLDS.iter().enumerate() {
                let mut taken = vec![false; gt_c.len()];
                for (d, row) in det_c.iter().zip(&cost) {
                    let best =
                        (0..gt_c.len())
                            .filter(|&g| !taken[g])
                            .fold(None, |b: Option<usize>, g| match b {
                                Some(bg) if row[bg] <= row[g] => Some(bg),
                                _ => Some(g),
                            });
                    let hit = best.filter(|&g| row[g] <= tau);
                    if let Some(g) = hit {
                        taken[g] = true;
                    }
                    self.hits[class][k].push((d.score, hit.is_some()));
                }
            }
        }
    }

    /// Mean chamfer distance over matched pairs, `None` without pairs.
    pub fn chamfer(&self) -> Option<f64> {
        (self.chamfer_pairs > 0).then(|| self.chamfer_sum / self.chamfer_pairs as f64)
    }

    /// AP averaged over thresholds and over classes that have ground truth.
    pub fn ap(&self) -> Option<f64> {
        let mut aps = Vec::new();
        for (class, &n_gt) in self.gt_counts.iter().enumerate() {
            if n_gt == 0 {
                continue;
            }
            let per: f64 = self.hits[class]
                .iter()
                .map(|h| average_precision(h, n_gt))
                .sum();
            aps.push(per / AP_THRESHOLDS.len() as f64);
        }
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

/// Chamfer and AP of one scene's map predictions.
pub fn map_metrics(output: &ModelOutput<f64>, gt: &[Polyline]) -> (Option<f64>, Option<f64>) {
    let n_classes = output.map_class_logits.first().map_or(1, Vec::len) - 1;
    let mut acc = MapAccumulator::new(n_classes);
    acc.add_scene(
        &detections(&output.map_points, &output.map_class_logits),
        gt,
    );
    (acc.chamfer(), acc.ap())
}
