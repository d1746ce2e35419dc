//! Closed-set attribute metrics and retrieval recall.

/// Label-based and instance-based metrics over binary decisions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClosedMetrics {
    pub ma: f64,
    pub acc: f64,
    pub prec: f64,
    pub recall: f64,
    pub f1: f64,
    /// Balanced accuracy per attribute; `None` where the attribute was
    /// excluded from mA.
    pub per_attr: Vec<Option<f64>>,
}

/// Metrics of `pred` against `labels` (both `N x Z`, entries 0/1).
///
/// Attributes lacking positives or lacking negatives have an undefined
/// balanced accuracy and are left out of mA (with a warning). Instance
/// precision and recall use 0/0 := 1.
pub fn closed_metrics(pred: &[Vec<u8>], labels: &[Vec<u8>]) -> ClosedMetrics {
    assert_eq!(pred.len(), labels.len(), "prediction and label counts differ");
    let n = labels.len();
    if n == 0 {
        return ClosedMetrics::default();
    }
    let z = labels[0].len();
    let mut per_attr = Vec::with_capacity(z);
    for j in 0..z {
        let (mut tp, mut tn, mut p, mut ng) = (0usize, 0usize, 0usize, 0usize);
        for (pr, y) in pred.iter().zip(labels) {
            if y[j] == 1 {
                p += 1;
                tp += usize::from(pr[j] == 1);
            } else {
                ng += 1;
                tn += usize::from(pr[j] == 0);
            }
        }
        if p == 0 || ng == 0 {
            log::warn!("attribute {j} has {p} positives and {ng} negatives in this split; left out of mA");
            per_attr.push(None);
        } else {
            per_attr.push(Some(0.5 * (tp as f64 / p as f64 + tn as f64 / ng as f64)));
        }
    }
    let valid: Vec<f64> = per_attr.iter().flatten().copied().collect();
    let ma = if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 };
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for (pr, y) in pred.iter().zip(labels) {
        let inter = pr.iter().zip(y).filter(|(&a, &b)| a == 1 && b == 1).count();
        let npred = pr.iter().filter(|&&a| a == 1).count();
        let ntrue = y.iter().filter(|&&b| b == 1).count();
        acc += ratio(inter, npred + ntrue - inter);
        prec += ratio(inter, npred);
        rec += ratio(inter, ntrue);
    }
    let (acc, prec, recall) = (acc / n as f64, prec / n as f64, rec / n as f64);
    let f1 = if prec + recall > 0.0 { 2.0 * prec * recall / (prec + recall) } else { 0.0 };
    ClosedMetrics { ma, acc, prec, recall, f1, per_attr }
}

/// Binary decisions `score > threshold[j]`.
pub fn decide(scores: &[Vec<f64>], thresholds: &[f64]) -> Vec<Vec<u8>> {
    scores.iter().map(|row| row.iter().zip(thresholds).map(|(&s, &t)| u8::from(s > t)).collect()).collect()
}

/// Recall@K over (image, positive attribute) pairs.
///
/// `scores` and `labels` are `N x Z` over attribute ids. Each pair is ranked
/// within the candidate group holding that attribute (ties go to the lower
/// id); only attributes listed in `targets` form pairs. A pair is recalled at
/// `K` when fewer than `K` candidates rank above it. Returns one value per
/// entry of `ks`; 0 when there are no pairs.
pub fn recall_at_k(scores: &[Vec<f64>], labels: &[Vec<u8>], groups: &[Vec<usize>], targets: &[usize], ks: &[usize]) -> Vec<f64> {
    let mut hits = vec![0usize; ks.len()];
    let mut pairs = 0usize;
    for (s, y) in scores.iter().zip(labels) {
        for group in groups {
            let mut order = group.clone();
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            for (rank, &a) in order.iter().enumerate() {
                if y[a] == 1 && targets.contains(&a) {
                    pairs += 1;
                    for (h, &k) in hits.iter_mut().zip(ks) {
                        *h += usize::from(rank < k);
                    }
                }
            }
        }
    }
    hits.iter().map(|&h| if pairs == 0 { 0.0 } else { h as f64 / pairs as f64 }).collect()
}

/// Per-attribute threshold maximizing balanced accuracy on a calibration
/// split. Candidates are midpoints between consecutive distinct scores plus
/// `default`; ties keep the candidate closest to `default`.
pub fn calibrate_thresholds(scores: &[Vec<f64>], labels: &[Vec<u8>], default: f64) -> Vec<f64> {
    let z = labels.first().map_or(0, Vec::len);
    (0..z)
        .map(|j| {
            let col: Vec<(f64, u8)> = scores.iter().zip(labels).map(|(s, y)| (s[j], y[j])).collect();
            let p = col.iter().filter(|c| c.1 == 1).count();
            let n = col.len() - p;
            if p == 0 || n == 0 {
                return default;
            }
            let mut vals: Vec<f64> = col.iter().map(|c| c.0).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            let mut cands = vec![default];
            cands.extend(vals.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            let bal = |t: f64| {
                let tp = col.iter().filter(|c| c.1 == 1 && c.0 > t).count();
                let tn = col.iter().filter(|c| c.1 == 0 && c.0 <= t).count();
                0.5 * (tp as f64 / p as f64 + tn as f64 / n as f64)
            };
            let mut best = (bal(default), default);
            for &t in &cands[1..] {
                let b = bal(t);
                if b > best.0 || (b == best.0 && (t - default).abs() < (best.1 - default).abs()) {
                    best = (b, t);
                }
            }
            best.1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_inverted() {
        let y = vec![vec![1, 0, 1], vec![0, 1, 0]];
        let m = closed_metrics(&y, &y);
        assert_eq!((m.ma, m.acc, m.prec, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0, 1.0));
        let inv: Vec<Vec<u8>> = y.iter().map(|r| r.iter().map(|&x| 1 - x).collect()).collect();
        let m = closed_metrics(&inv, &y);
        assert_eq!(m.ma, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn all_positive_predictor_has_half_ma() {
        let y = vec![vec![1, 0], vec![0, 1], vec![1, 1]];
        let all = vec![vec![1, 1]; 3];
        assert_eq!(closed_metrics(&all, &y).ma, 0.5);
    }

    #[test]
    fn degenerate_attribute_is_excluded() {
        let y = vec![vec![1, 1], vec![0, 1]];
        let m = closed_metrics(&y, &y);
        assert_eq!(m.per_attr, vec![Some(1.0), None]);
    }

    #[test]
    fn recall_extremes() {
        let s = vec![vec![0.1, 0.9, 0.5, 0.3]];
        let y = vec![vec![0, 0, 1, 1]];
        let all = vec![vec![0, 1, 2, 3]];
        let t = [0, 1, 2, 3];
        assert_eq!(recall_at_k(&s, &y, &all, &t, &[1, 2, 3, 4]), vec![0.0, 0.5, 1.0, 1.0]);
        // a tie goes to the lower id
        let s = vec![vec![0.5, 0.5]];
        let y = vec![vec![0, 1]];
        assert_eq!(recall_at_k(&s, &y, &[vec![0, 1]], &[0, 1], &[1]), vec![0.0]);
    }

    #[test]
    fn calibration_separates_when_possible() {
        let s = vec![vec![-0.2], vec![-0.1], vec![-0.4]];
        let y = vec![vec![1], vec![1], vec![0]];
        let t = calibrate_thresholds(&s, &y, 0.0);
        assert!((t[0] - (-0.3)).abs() < 1e-12);
        assert_eq!(closed_metrics(&decide(&s, &t), &y).ma, 1.0);
    }
}
