use serde::{Deserialize, Serialize};

use super::Split;
use crate::geo::{PatchLabel, PatchRecord};

/// Largest tolerated gap, in percentage points, between the train and
/// validation non-empty shares.
pub const STRATIFICATION_GAP_PP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub split: Split,
    pub empty: usize,
    pub non_empty: usize,
    /// `None` when the split holds no patches.
    pub non_empty_percent: Option<f64>,
}

impl SplitRatio {
    pub fn from_counts(split: Split, empty: usize, non_empty: usize) -> Self {
        let total = empty + non_empty;
        SplitRatio {
            split,
            empty,
            non_empty,
            non_empty_percent: (total > 0).then(|| 100.0 * non_empty as f64 / total as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratificationReport {
    pub splits: Vec<SplitRatio>,
    pub train_val_gap: Option<f64>,
    pub flagged: bool,
}

pub fn stratify_ratio_report<'a, I>(splits: I) -> StratificationReport
where
    I: IntoIterator<Item = (Split, &'a [PatchRecord])>,
{
    let splits: Vec<SplitRatio> = splits
        .into_iter()
        .map(|(split, patches)| {
            let non_empty = patches.iter().filter(|p| p.label == PatchLabel::NonEmpty).count();
            SplitRatio::from_counts(split, patches.len() - non_empty, non_empty)
        })
        .collect();
    report_from_ratios(splits)
}

pub(crate) fn report_from_ratios(splits: Vec<SplitRatio>) -> StratificationReport {
    let pct = |s: Split| splits.iter().find(|r| r.split == s).and_then(|r| r.non_empty_percent);
    let train_val_gap = match (pct(Split::Train), pct(Split::Val)) {
        (Some(t), Some(v)) => Some((t - v).abs()),
        _ => None,
    };
    StratificationReport {
        flagged: train_val_gap.is_some_and(|g| g > STRATIFICATION_GAP_PP),
        train_val_gap,
        splits,
    }
}

impl StratificationReport {
    pub fn from_counts(counts: &[(Split, usize, usize)]) -> Self {
        report_from_ratios(
            counts
                .iter()
                .map(|&(s, e, n)| SplitRatio::from_counts(s, e, n))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityBin {
    pub count: usize,
    pub patches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Per-patch point-count distribution. `bins` covers counts `1..=max`; empty
/// patches are reported only in `zero_bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityStats {
    pub total_patches: usize,
    pub zero_bin: usize,
    pub bins: Vec<DensityBin>,
    pub min: Option<usize>,
    pub max: Option<usize>,
    /// Box statistics over non-empty patches.
    pub quartiles: Option<Quartiles>,
}

/// Linear-interpolated quantile of sorted data (the `(n-1)p` rule).
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn density_histogram<I: IntoIterator<Item = usize>>(counts: I) -> DensityStats {
    let counts: Vec<usize> = counts.into_iter().collect();
    let zero_bin = counts.iter().filter(|&&c| c == 0).count();
    let mut positive: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    positive.sort_unstable();
    let max = positive.last().copied();
    let mut bins: Vec<DensityBin> = (1..=max.unwrap_or(0))
        .map(|count| DensityBin { count, patches: 0 })
        .collect();
    for &c in &positive {
        bins[c - 1].patches += 1;
    }
    let quartiles = (!positive.is_empty()).then(|| {
        let s: Vec<f64> = positive.iter().map(|&c| c as f64).collect();
        Quartiles {
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
        }
    });
    DensityStats {
        total_patches: counts.len(),
        zero_bin,
        bins,
        min: positive.first().copied(),
        max,
        quartiles,
    }
}

impl DensityStats {
    pub fn from_patches(patches: &[PatchRecord]) -> Self {
        density_histogram(patches.iter().map(|p| p.points.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_split_ratio() {
        let r = SplitRatio::from_counts(Split::Train, 18_502, 3_549);
        assert!((r.non_empty_percent.unwrap() - 16.1).abs() < 0.05);
        let r = SplitRatio::from_counts(Split::Test2019, 3_650, 1_025);
        assert!((r.non_empty_percent.unwrap() - 21.9).abs() < 0.05);
        let r = SplitRatio::from_counts(Split::Test2017, 9_294, 1_181);
        assert!((r.non_empty_percent.unwrap() - 11.3).abs() < 0.05);
        assert_eq!(SplitRatio::from_counts(Split::Val, 10, 0).non_empty_percent, Some(0.0));
        assert_eq!(SplitRatio::from_counts(Split::Val, 0, 0).non_empty_percent, None);
    }

    #[test]
    fn gap_flag() {
        let ok = StratificationReport::from_counts(&[(Split::Train, 84, 16), (Split::Val, 83, 17)]);
        assert!(!ok.flagged);
        let bad = StratificationReport::from_counts(&[(Split::Train, 84, 16), (Split::Val, 80, 20)]);
        assert!(bad.flagged);
        assert_eq!(bad.train_val_gap, Some(4.0));
        let missing = StratificationReport::from_counts(&[(Split::Train, 84, 16), (Split::Val, 0, 0)]);
        assert_eq!(missing.train_val_gap, None);
        assert!(!missing.flagged);
    }

    #[test]
    fn all_empty_has_only_zero_bin() {
        let s = density_histogram(vec![0, 0, 0]);
        assert_eq!(s.zero_bin, 3);
        assert!(s.bins.is_empty());
        assert_eq!(s.quartiles, None);
        assert_eq!(s.max, None);
    }

    #[test]
    fn dense_tail_box_stats() {
        let s = density_histogram(vec![1, 1, 2, 250]);
        assert_eq!(s.max, Some(250));
        assert_eq!(s.bins.len(), 250);
        assert_eq!(s.bins[249], DensityBin { count: 250, patches: 1 });
        assert_eq!(s.bins[0].patches, 2);
        assert_eq!(s.quartiles.unwrap().median, 1.5);
    }

    #[test]
    fn histogram_conserves_patches() {
        let mut rng = crate::seed::rng(5);
        use rand::Rng;
        let counts: Vec<usize> = (0..1000)
            .map(|_| if rng.gen_bool(0.8) { 0 } else { rng.gen_range(1..60) })
            .collect();
        let s = density_histogram(counts);
        let binned: usize = s.bins.iter().map(|b| b.patches).sum();
        assert_eq!(binned + s.zero_bin, 1000);
        assert_eq!(s.total_patches, 1000);
    }
}
