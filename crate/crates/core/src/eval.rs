//! Point matching and the detection, counting and patch-classification
//! metrics.
//!
//! Ratios (precision, recall, F1, AP) are fractions in `[0, 1]` inside this
//! module; [`MetricsReport`] carries them as percentages.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::PointAnnotation;

/// Default true-positive radius in pixels.
pub const TP_RADIUS: f64 = 4.0;

pub trait Located {
    fn xy(&self) -> (f64, f64);
}

pub trait Scored: Located {
    fn confidence(&self) -> f64;
}

impl Located for (f64, f64) {
    fn xy(&self) -> (f64, f64) {
        *self
    }
}

impl Located for (f64, f64, f64) {
    fn xy(&self) -> (f64, f64) {
        (self.0, self.1)
    }
}

impl Scored for (f64, f64, f64) {
    fn confidence(&self) -> f64 {
        self.2
    }
}

impl Located for PointAnnotation {
    fn xy(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

impl<T: Located> Located for &T {
    fn xy(&self) -> (f64, f64) {
        (*self).xy()
    }
}

impl<T: Scored> Scored for &T {
    fn confidence(&self) -> f64 {
        (*self).confidence()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpPair {
    pub detection: usize,
    pub gt: usize,
    pub distance: f64,
}

/// One-to-one matching between detections and ground truth. Entries are
/// indices into the input slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp_pairs: Vec<TpPair>,
    pub fp: Vec<usize>,
    #[serde(rename = "fn")]
    pub fn_: Vec<usize>,
    pub radius: f64,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.tp_pairs.len()
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp_pairs.len(),
            fp: self.fp.len(),
            fn_: self.fn_.len(),
        }
    }
}

/// Detection order used everywhere: confidence descending, then `(x, y)`
/// ascending.
pub fn confidence_order<D: Scored>(dets: &[D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.confidence()
            .total_cmp(&da.confidence())
            .then(da.xy().0.total_cmp(&db.xy().0))
            .then(da.xy().1.total_cmp(&db.xy().1))
    });
    order
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Greedy one-to-one matching: detections in confidence order each claim the
/// nearest unmatched ground-truth point within `radius` (inclusive).
pub fn match_points<D: Scored, G: Located>(dets: &[D], gt: &[G], radius: f64) -> MatchResult {
    let mut taken = vec![false; gt.len()];
    let mut tp_pairs = Vec::new();
    let mut fp = Vec::new();
    for i in confidence_order(dets) {
        let p = dets[i].xy();
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = dist(p, g.xy());
            if d <= radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        match best {
            Some((j, d)) => {
                taken[j] = true;
                tp_pairs.push(TpPair {
                    detection: i,
                    gt: j,
                    distance: d,
                });
            }
            None => fp.push(i),
        }
    }
    let fn_ = (0..gt.len()).filter(|&j| !taken[j]).collect();
    MatchResult {
        tp_pairs,
        fp,
        fn_,
        radius,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean, zero when both inputs are zero. Works in any unit
/// (fractions or percentages).
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn compute_prf(c: Counts) -> Prf {
    let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub predicted: usize,
}

/// Precision/recall at every unique score threshold, from a list of
/// `(score, is_true_positive)` and the number of positives.
pub(crate) fn pr_sweep(mut scored: Vec<(f64, bool)>, positives: usize) -> Vec<PrPoint> {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            seen += 1;
            tp += usize::from(scored[i].1);
            i += 1;
        }
        out.push(PrPoint {
            threshold: t,
            precision: tp as f64 / seen as f64,
            recall: if positives > 0 {
                tp as f64 / positives as f64
            } else {
                0.0
            },
            tp,
            predicted: seen,
        });
    }
    out
}

/// Area under the precision envelope (all-point interpolation).
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut recalls = vec![0.0];
    let mut precisions = vec![0.0];
    for p in curve {
        recalls.push(p.recall);
        precisions.push(p.precision);
    }
    for i in (0..precisions.len() - 1).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    (1..recalls.len())
        .map(|i| (recalls[i] - recalls[i - 1]) * precisions[i])
        .sum()
}

/// Detections and ground truth of one evaluation unit (a patch or an image).
#[derive(Debug, Clone, Copy)]
pub struct Unit<'a, D, G> {
    pub detections: &'a [D],
    pub gt: &'a [G],
}

/// Precision-recall curve over a dataset.
///
/// Greedy matching in confidence order is prefix-consistent: the matches of
/// detections above a threshold do not depend on detections below it, so one
/// matching per unit yields the curve for every threshold.
pub fn pr_curve<D: Scored, G: Located>(units: &[Unit<'_, D, G>], radius: f64) -> (Vec<PrPoint>, usize) {
    let mut scored = Vec::new();
    let mut positives = 0;
    for u in units {
        positives += u.gt.len();
        let m = match_points(u.detections, u.gt, radius);
        let mut is_tp = vec![false; u.detections.len()];
        for p in &m.tp_pairs {
            is_tp[p.detection] = true;
        }
        scored.extend(u.detections.iter().zip(is_tp).map(|(d, t)| (d.confidence(), t)));
    }
    (pr_sweep(scored, positives), positives)
}

/// Average precision over a dataset; `None` without ground truth.
pub fn compute_ap<D: Scored, G: Located>(units: &[Unit<'_, D, G>], radius: f64) -> Option<f64> {
    let (curve, positives) = pr_curve(units, radius);
    (positives > 0).then(|| average_precision(&curve))
}

pub fn compute_mae(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("mean absolute error needs at least one unit"));
    }
    Ok(pairs.iter().map(|(p, a)| (p - a).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Signed total counting error in percent; `None` when the true total is zero.
pub fn compute_tce(total_predicted: f64, total_actual: f64) -> Option<f64> {
    (total_actual > 0.0).then(|| 100.0 * (total_predicted - total_actual) / total_actual)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: Option<f64>,
}

pub fn patch_classification_metrics(probabilities: &[f64], labels: &[bool], tau: f64) -> Result<PatchMetrics> {
    if probabilities.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} probabilities for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let mut c = Counts::default();
    for (&p, &l) in probabilities.iter().zip(labels) {
        match (p >= tau, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    let prf = compute_prf(c);
    let positives = labels.iter().filter(|&&l| l).count();
    let ap = (positives > 0 && positives < labels.len()).then(|| {
        let scored = probabilities.iter().copied().zip(labels.iter().copied()).collect();
        average_precision(&pr_sweep(scored, positives))
    });
    Ok(PatchMetrics {
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        ap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Mode {
    /// Residuals against the identity line `pred = gt`.
    #[default]
    Identity,
    /// Squared correlation of a least-squares fit.
    Fitted,
}

/// R² of per-unit `(gt, pred)` counts; `None` with fewer than two units or no
/// ground-truth variance.
pub fn count_scatter_r2(pairs: &[(f64, f64)], mode: R2Mode) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mean_gt = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let ss_tot: f64 = pairs.iter().map(|p| (p.0 - mean_gt).powi(2)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    match mode {
        R2Mode::Identity => {
            let ss_res: f64 = pairs.iter().map(|p| (p.1 - p.0).powi(2)).sum();
            Some(1.0 - ss_res / ss_tot)
        }
        R2Mode::Fitted => {
            let mean_pred = pairs.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = pairs.iter().map(|p| (p.0 - mean_gt) * (p.1 - mean_pred)).sum();
            let syy: f64 = pairs.iter().map(|p| (p.1 - mean_pred).powi(2)).sum();
            if syy == 0.0 {
                return Some(0.0);
            }
            Some(sxy * sxy / (ss_tot * syy))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    #[default]
    Mean,
    Median,
}

impl Statistic {
    fn apply(&self, values: &mut [f64]) -> f64 {
        match self {
            Statistic::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Statistic::Median => {
                values.sort_by(f64::total_cmp);
                quantile_sorted(values, 0.5)
            }
        }
    }
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub statistic: Statistic,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 10_000,
            level: 0.95,
            statistic: Statistic::Mean,
            seed: 0,
        }
    }
}

/// Percentile bootstrap interval. Replicate `i` draws from its own stream
/// seeded by `(seed, i)`, so the result does not depend on thread scheduling.
pub fn bootstrap_ci(values: &[f64], cfg: &BootstrapConfig) -> Result<(f64, f64)> {
    use rand::Rng;
    if values.len() < 2 {
        return Err(Error::EmptyInput("bootstrap needs at least two units"));
    }
    if cfg.replicates == 0 || !(0.0..1.0).contains(&cfg.level) || cfg.level <= 0.0 {
        return Err(Error::Config("bootstrap needs replicates > 0 and 0 < level < 1".into()));
    }
    let n = values.len();
    let mut stats: Vec<f64> = (0..cfg.replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::seed::rng(crate::seed::derive_seed_index(cfg.seed, i as u64));
            let mut sample: Vec<f64> = (0..n).map(|_| values[rng.gen_range(0..n)]).collect();
            cfg.statistic.apply(&mut sample)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - cfg.level;
    Ok((
        quantile_sorted(&stats, alpha / 2.0),
        quantile_sorted(&stats, 1.0 - alpha / 2.0),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    #[default]
    AllPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: Option<f64>,
    pub mae: Option<f64>,
    pub tce: Option<f64>,
    pub r2: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ci95: BTreeMap<String, (f64, f64)>,
    pub counts: Counts,
    pub units: usize,
    pub radius: f64,
    pub ap_interpolation: ApInterpolation,
    pub r2_mode: R2Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub radius: f64,
    pub r2_mode: R2Mode,
    /// Bootstrap settings for the MAE interval; `None` skips it.
    pub bootstrap: Option<BootstrapConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            radius: TP_RADIUS,
            r2_mode: R2Mode::Identity,
            bootstrap: Some(BootstrapConfig::default()),
        }
    }
}

/// Full detection/counting report over a set of units.
pub fn evaluate<D: Scored + Sync, G: Located + Sync>(units: &[Unit<'_, D, G>], cfg: &EvalConfig) -> MetricsReport {
    let counts = units
        .iter()
        .map(|u| match_points(u.detections, u.gt, cfg.radius).counts())
        .fold(Counts::default(), |a, b| a + b);
    let prf = compute_prf(counts);
    let pairs: Vec<(f64, f64)> = units
        .iter()
        .map(|u| (u.detections.len() as f64, u.gt.len() as f64))
        .collect();
    let total_pred: f64 = pairs.iter().map(|p| p.0).sum();
    let total_gt: f64 = pairs.iter().map(|p| p.1).sum();
    let scatter: Vec<(f64, f64)> = pairs.iter().map(|&(p, g)| (g, p)).collect();
    let mut ci95 = BTreeMap::new();
    if let Some(bs) = &cfg.bootstrap {
        let abs: Vec<f64> = pairs.iter().map(|(p, g)| (p - g).abs()).collect();
        if let Ok(ci) = bootstrap_ci(&abs, bs) {
            ci95.insert("mae".to_string(), ci);
        }
    }
    MetricsReport {
        precision: 100.0 * prf.precision,
        recall: 100.0 * prf.recall,
        f1: 100.0 * prf.f1,
        ap: compute_ap(units, cfg.radius).map(|a| 100.0 * a),
        mae: compute_mae(&pairs).ok(),
        tce: compute_tce(total_pred, total_gt),
        r2: count_scatter_r2(&scatter, cfg.r2_mode),
        ci95,
        counts,
        units: units.len(),
        radius: cfg.radius,
        ap_interpolation: ApInterpolation::AllPoint,
        r2_mode: cfg.r2_mode,
    }
}

/// One row of the model × test-set results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub test_set: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mae: Option<f64>,
    pub ap: Option<f64>,
    pub tce: Option<f64>,
}

impl TableRow {
    pub fn from_report(model: &str, test_set: &str, r: &MetricsReport) -> Self {
        TableRow {
            model: model.into(),
            test_set: test_set.into(),
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            mae: r.mae,
            ap: r.ap,
            tce: r.tce,
        }
    }
}

pub fn write_table_csv<W: Write>(writer: W, rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<table>", e))?;
    Ok(())
}

/// `unit_id,gt,pred` rows for external scatter plotting.
pub fn write_scatter_csv<W: Write>(writer: W, rows: &[(String, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit_id", "gt", "pred"])?;
    for (id, g, p) in rows {
        w.write_record([id.as_str(), &g.to_string(), &p.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<scatter>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type Det = (f64, f64, f64);

    #[test]
    fn exact_hit_and_radius_miss() {
        let m = match_points(&[(10.0, 10.0, 0.9)], &[(10.0, 10.0)], 4.0);
        assert_eq!(m.counts(), Counts { tp: 1, fp: 0, fn_: 0 });
        let m = match_points(&[(15.0, 10.0, 0.9)], &[(10.0, 10.0)], 4.0);
        assert_eq!(m.counts(), Counts { tp: 0, fp: 1, fn_: 1 });
        let m = match_points(&[(14.0, 10.0, 0.9)], &[(10.0, 10.0)], 4.0);
        assert_eq!(m.tp(), 1, "radius is inclusive");
    }

    #[test]
    fn confident_detection_claims_first() {
        let dets: Vec<Det> = vec![(13.0, 10.0, 0.9), (8.0, 10.0, 0.8)];
        let m = match_points(&dets, &[(10.0, 10.0)], 4.0);
        assert_eq!(m.tp_pairs[0].detection, 0);
        assert_eq!(m.fp, vec![1]);
    }

    #[test]
    fn table_f1_consistency() {
        for (p, r, f) in [(92.2, 95.3, 93.7), (94.0, 97.2, 95.5)] {
            assert!((f1_score(p, r) - f).abs() <= 0.1);
        }
        assert_eq!(
            compute_prf(Counts::default()),
            Prf {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0
            }
        );
    }

    #[test]
    fn perfect_detector_ap() {
        let gt = vec![(1.0, 1.0), (20.0, 20.0)];
        let dets: Vec<Det> = vec![(1.0, 1.0, 0.7), (20.0, 20.0, 0.9)];
        let u = [Unit {
            detections: &dets[..],
            gt: &gt[..],
        }];
        assert_eq!(compute_ap(&u, 4.0), Some(1.0));
    }

    #[test]
    fn tp_fp_tp_envelope() {
        let gt = vec![(0.0, 0.0), (50.0, 50.0)];
        let dets: Vec<Det> = vec![(0.0, 0.0, 0.9), (100.0, 100.0, 0.8), (50.0, 50.0, 0.7)];
        let u = [Unit {
            detections: &dets[..],
            gt: &gt[..],
        }];
        let ap = compute_ap(&u, 4.0).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let mut shuffled = dets.clone();
        shuffled.reverse();
        let u2 = [Unit {
            detections: &shuffled[..],
            gt: &gt[..],
        }];
        assert_eq!(compute_ap(&u2, 4.0).unwrap(), ap);
        let none: [Unit<'_, Det, (f64, f64)>; 1] = [Unit {
            detections: &dets[..],
            gt: &[],
        }];
        assert_eq!(compute_ap(&none, 4.0), None);
    }

    #[test]
    fn mae_fixtures() {
        assert_eq!(compute_mae(&[(5.0, 5.0), (3.0, 4.0)]).unwrap(), 0.5);
        assert_eq!(compute_mae(&[(2.0, 2.0), (7.0, 7.0)]).unwrap(), 0.0);
        assert_eq!(compute_mae(&[(10.0, 7.0), (0.0, 2.0), (6.0, 6.0)]).unwrap(), 5.0 / 3.0);
        assert!(compute_mae(&[]).is_err());
    }

    #[test]
    fn tce_fixtures() {
        assert_eq!(compute_tce(100.0, 100.0), Some(0.0));
        assert_eq!(compute_tce(106.0, 100.0), Some(6.0));
        assert!((compute_tce(961.0, 1000.0).unwrap() + 3.9).abs() < 1e-12);
        assert_eq!(compute_tce(5.0, 0.0), None);
    }

    #[test]
    fn patch_metrics_fixtures() {
        let m = patch_classification_metrics(&[0.9, 0.4], &[true, false], 0.5).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.ap), (1.0, 1.0, 1.0, Some(1.0)));
        let m = patch_classification_metrics(&[0.9, 0.8, 0.3], &[true, false, true], 0.5).unwrap();
        assert_eq!((m.precision, m.recall), (0.5, 0.5));
        // curve: (R=.5, P=1), (R=.5, P=.5), (R=1, P=2/3) -> envelope area 0.5 + 0.5 * 2/3
        assert!((m.ap.unwrap() - 5.0 / 6.0).abs() < 1e-12);
        let single = patch_classification_metrics(&[0.9, 0.8], &[true, true], 0.5).unwrap();
        assert_eq!(single.ap, None);
        assert!(patch_classification_metrics(&[0.9], &[true, false], 0.5).is_err());
    }

    #[test]
    fn r2_fixtures() {
        let exact = [(1.0, 1.0), (4.0, 4.0), (9.0, 9.0)];
        assert_eq!(count_scatter_r2(&exact, R2Mode::Identity), Some(1.0));
        let shifted = [(0.0, 2.0), (10.0, 12.0)];
        assert!((count_scatter_r2(&shifted, R2Mode::Identity).unwrap() - 0.84).abs() < 1e-12);
        assert_eq!(count_scatter_r2(&shifted, R2Mode::Fitted), Some(1.0));
        let flat = [(0.0, 5.0), (10.0, 5.0)];
        assert_eq!(count_scatter_r2(&flat, R2Mode::Identity), Some(0.0));
        assert_eq!(count_scatter_r2(&[(3.0, 1.0), (3.0, 2.0)], R2Mode::Identity), None);
    }

    #[test]
    fn bootstrap_fixtures() {
        let cfg = BootstrapConfig {
            seed: 17,
            ..Default::default()
        };
        assert_eq!(bootstrap_ci(&[4.0, 4.0, 4.0], &cfg).unwrap(), (4.0, 4.0));
        let (lo, hi) = bootstrap_ci(&[0.0, 10.0], &cfg).unwrap();
        assert!((0.0..=5.0).contains(&lo) && (5.0..=10.0).contains(&hi));
        assert!(bootstrap_ci(&[1.0], &cfg).is_err());
        let a = bootstrap_ci(&[1.0, 2.0, 3.0, 4.0, 5.0], &cfg).unwrap();
        assert_eq!(a, bootstrap_ci(&[1.0, 2.0, 3.0, 4.0, 5.0], &cfg).unwrap());
    }

    #[test]
    fn report_combines_units() {
        let gt_a = vec![(5.0, 5.0), (30.0, 30.0)];
        let det_a: Vec<Det> = vec![(5.5, 5.0, 0.9), (60.0, 60.0, 0.4)];
        let gt_b = vec![(1.0, 1.0)];
        let det_b: Vec<Det> = vec![(1.0, 2.0, 0.8)];
        let units = [
            Unit {
                detections: &det_a[..],
                gt: &gt_a[..],
            },
            Unit {
                detections: &det_b[..],
                gt: &gt_b[..],
            },
        ];
        let r = evaluate(
            &units,
            &EvalConfig {
                bootstrap: Some(BootstrapConfig {
                    replicates: 200,
                    ..Default::default()
                }),
                ..Default::default()
            },
        );
        assert_eq!(r.counts, Counts { tp: 2, fp: 1, fn_: 1 });
        assert!((r.precision - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.mae, Some(0.0));
        assert_eq!(r.tce, Some(0.0));
        assert!(r.ci95.contains_key("mae"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"ap_interpolation\":\"all_point\""));
    }

    fn brute_force_max_matching(dets: &[Det], gt: &[(f64, f64)], radius: f64) -> usize {
        fn go(i: usize, dets: &[Det], gt: &[(f64, f64)], used: &mut Vec<bool>, r: f64) -> usize {
            if i == dets.len() {
                return 0;
            }
            let mut best = go(i + 1, dets, gt, used, r);
            for j in 0..gt.len() {
                if !used[j] && dist(dets[i].xy(), gt[j]) <= r {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, dets, gt, used, r));
                    used[j] = false;
                }
            }
            best
        }
        go(0, dets, gt, &mut vec![false; gt.len()], radius)
    }

    fn points_strategy() -> impl Strategy<Value = (Vec<Det>, Vec<(f64, f64)>)> {
        (
            proptest::collection::vec((0.0f64..24.0, 0.0f64..24.0, 0.0f64..1.0), 0..=8),
            proptest::collection::vec((0.0f64..24.0, 0.0f64..24.0), 0..=8),
        )
    }

    proptest! {
        #[test]
        fn matching_conserves_counts((dets, gt) in points_strategy()) {
            let m = match_points(&dets, &gt, 4.0);
            prop_assert_eq!(m.tp() + m.fp.len(), dets.len());
            prop_assert_eq!(m.tp() + m.fn_.len(), gt.len());
            for p in &m.tp_pairs {
                prop_assert!(p.distance <= 4.0);
            }
            prop_assert!(m.tp() <= brute_force_max_matching(&dets, &gt, 4.0));
        }

        #[test]
        fn far_false_positive_only_hurts_precision((dets, gt) in points_strategy()) {
            let base = compute_prf(match_points(&dets, &gt, 4.0).counts());
            let mut more = dets.clone();
            more.push((1000.0, 1000.0, 0.5));
            let after = compute_prf(match_points(&more, &gt, 4.0).counts());
            prop_assert_eq!(after.recall, base.recall);
            if base.precision > 0.0 {
                prop_assert!(after.precision < base.precision);
            }
        }

        #[test]
        fn single_pass_curve_equals_rematching((dets, gt) in points_strategy()) {
            let u = [Unit { detections: &dets[..], gt: &gt[..] }];
            let (curve, _) = pr_curve(&u, 4.0);
            for p in curve {
                let kept: Vec<Det> = dets.iter().copied().filter(|d| d.2 >= p.threshold).collect();
                let c = match_points(&kept, &gt, 4.0).counts();
                let prf = compute_prf(c);
                prop_assert!((prf.precision - p.precision).abs() < 1e-12);
                if !gt.is_empty() {
                    prop_assert!((prf.recall - p.recall).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn ap_bounded((dets, gt) in points_strategy()) {
            let u = [Unit { detections: &dets[..], gt: &gt[..] }];
            if let Some(ap) = compute_ap(&u, 4.0) {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
                let (curve, _) = pr_curve(&u, 4.0);
                let perfect = curve.iter().any(|p| p.precision == 1.0 && p.recall == 1.0);
                prop_assert_eq!(perfect, (ap - 1.0).abs() < 1e-12);
            }
        }
    }
}
