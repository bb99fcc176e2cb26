//! Identification and verification metrics: accuracy, ROC with VAL@FAR and
//! AUC, rank-k gallery identification, and fold aggregation.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("accuracy of zero samples".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, c) = logits.dims2("predict")?;
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` are accepted.
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Accepted positives and negatives at this threshold.
    pub tp: usize,
    pub fp: usize,
}

/// Empirical ROC, from the reject-all point (0,0) to the accept-all point (1,1).
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
}

pub fn roc_curve(scores: &[f64], flags: &[bool]) -> Result<RocCurve> {
    if scores.len() != flags.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} flags",
            scores.len(),
            flags.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s} in ROC input")));
    }
    let pos = flags.iter().filter(|&&f| f).count();
    let neg = flags.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Argument(
            "ROC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
        tp: 0,
        fp: 0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if flags[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
            tp,
            fp,
        });
    }
    Ok(RocCurve {
        points,
        positives: pos,
        negatives: neg,
    })
}

/// Highest true-positive rate among operating points with FPR ≤ `far`. No interpolation.
pub fn val_at_far(curve: &RocCurve, far: f64) -> Result<f64> {
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::Argument(format!("target FAR {far} outside (0,1)")));
    }
    let val = curve
        .points
        .iter()
        .filter(|p| p.fpr <= far)
        .map(|p| p.tpr)
        .fold(0.0, f64::max);
    if val == 0.0 {
        warn!("no operating point with FAR <= {far} accepts any genuine pair");
    }
    Ok(val)
}

/// Trapezoidal area under the curve, accumulated in integer counts so the
/// only rounding is the final division.
pub fn auc(curve: &RocCurve) -> f64 {
    let twice_area: u128 = curve
        .points
        .windows(2)
        .map(|w| (w[1].fp - w[0].fp) as u128 * (w[1].tp + w[0].tp) as u128)
        .sum();
    twice_area as f64 / (2 * curve.positives as u128 * curve.negatives as u128) as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Euclidean,
}

impl Similarity {
    /// Higher means more alike. Cosine with a zero vector is 0.
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb)
                }
            }
            Similarity::Euclidean => -a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Lower means more alike.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Cosine => 1.0 - self.score(a, b),
            Similarity::Euclidean => -self.score(a, b),
        }
    }
}

/// Fraction of probes whose `k` nearest gallery rows (ties broken by gallery
/// index) include one with the probe's label.
pub fn rank_k_identification(
    probes: &Tensor,
    probe_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
    k: usize,
    similarity: Similarity,
) -> Result<f64> {
    let (np, dp) = probes.dims2("rank_k")?;
    let (ng, dg) = gallery.dims2("rank_k")?;
    if dp != dg {
        return Err(Error::dim("rank_k", probes.shape(), gallery.shape()));
    }
    if np != probe_labels.len() || ng != gallery_labels.len() {
        return Err(Error::Argument(
            "label count does not match row count".into(),
        ));
    }
    if ng == 0 || np == 0 {
        return Err(Error::Argument(
            "rank-k needs non-empty probe and gallery sets".into(),
        ));
    }
    if k == 0 || k > ng {
        return Err(Error::Argument(format!("k = {k} outside 1..={ng}")));
    }
    let mut hits = 0;
    let mut dist = vec![0.0; ng];
    for (p, &label) in probe_labels.iter().enumerate().take(np) {
        for (g, d) in dist.iter_mut().enumerate() {
            *d = similarity.distance(probes.row(p), gallery.row(g));
        }
        // The probe hits iff the best-placed same-label item ranks within k.
        let best = (0..ng)
            .filter(|&g| gallery_labels[g] == label)
            .min_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        if let Some(j) = best {
            let ahead = (0..ng)
                .filter(|&g| dist[g].total_cmp(&dist[j]).then(g.cmp(&j)).is_lt())
                .count();
            if ahead < k {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / np as f64)
}

/// Mean and (k−1)-denominator standard deviation of per-fold values.
pub fn aggregate_folds(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Argument(format!(
            "fold aggregation needs k >= 2, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}
