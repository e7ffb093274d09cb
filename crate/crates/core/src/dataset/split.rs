use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    #[serde(rename = "test_2017")]
    Test2017,
    #[serde(rename = "test_2019")]
    Test2019,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test2017 => "test_2017",
            Split::Test2019 => "test_2019",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test_2017" | "test" => Ok(Split::Test2017),
            "test_2019" => Ok(Split::Test2019),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: String,
    pub point_count: u64,
    pub herd: String,
    /// Images pinned to a split (e.g. a later survey year held out for testing)
    /// bypass assignment.
    #[serde(default)]
    pub fixed_split: Option<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            val: 0.10,
            test: 0.20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub ratios: SplitRatios,
    /// Split that receives the test share.
    pub test_split: Split,
    pub seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            ratios: SplitRatios::default(),
            test_split: Split::Test2017,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<String, Split>,
    pub point_counts: BTreeMap<Split, u64>,
    /// Percentage of each split's points contributed by each herd.
    pub herd_proportions: BTreeMap<Split, BTreeMap<String, f64>>,
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn images_in(&self, split: Split) -> BTreeSet<&str> {
        self.assignments
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Point shares of the three assigned roles (train, val, test split).
    pub fn shares(&self, test_split: Split) -> Option<[f64; 3]> {
        let get = |s| *self.point_counts.get(&s).unwrap_or(&0) as f64;
        let c = [get(Split::Train), get(Split::Val), get(test_split)];
        let total: f64 = c.iter().sum();
        (total > 0.0).then(|| [c[0] / total, c[1] / total, c[2] / total])
    }

    pub fn max_share_deviation(&self, opts: &SplitOptions) -> Option<f64> {
        let s = self.shares(opts.test_split)?;
        let r = [opts.ratios.train, opts.ratios.val, opts.ratios.test];
        Some(s.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// The mapping written to the split file.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.assignments).expect("split map serializes")
    }
}

const ROLES: usize = 3;

struct Work<'a> {
    images: Vec<&'a ImageInfo>,
    role: Vec<usize>,
    targets: [f64; ROLES],
    total_points: f64,
}

impl Work<'_> {
    fn counts(&self) -> [f64; ROLES] {
        let mut c = [0.0; ROLES];
        for (img, &r) in self.images.iter().zip(&self.role) {
            c[r] += img.point_count as f64;
        }
        c
    }

    fn deviation(&self) -> f64 {
        if self.total_points == 0.0 {
            return 0.0;
        }
        let c = self.counts();
        (0..ROLES)
            .map(|r| (c[r] / self.total_points - self.targets[r]).abs())
            .fold(0.0, f64::max)
    }

    fn herd_roles(&self, herd: &str) -> [usize; ROLES] {
        let mut n = [0; ROLES];
        for (img, &r) in self.images.iter().zip(&self.role) {
            if img.herd == herd {
                n[r] += 1;
            }
        }
        n
    }

    fn herd_covered(&self, herd: &str, n_images: usize) -> bool {
        let n = self.herd_roles(herd);
        match n_images {
            0 | 1 => n[0] > 0,
            2 => n[0] > 0 && (n[1] > 0 || n[2] > 0),
            _ => n.iter().all(|&k| k > 0),
        }
    }
}

/// Assigns images to train/val/test by point-count share, keeping every herd
/// represented in each split.
///
/// Greedy largest-first: images are visited in decreasing point count and
/// each goes to the role with the largest remaining point deficit (empty
/// images balance image counts instead). A repair pass then moves images
/// until each herd with three or more images appears in every role, and a
/// herd with two images appears in train and one evaluation role. A final
/// local search moves single images while that lowers the worst share
/// deviation without breaking herd coverage.
pub fn split_images(images: &[ImageInfo], opts: &SplitOptions) -> Result<SplitAssignment> {
    let r = opts.ratios;
    let sum = r.train + r.val + r.test;
    if [r.train, r.val, r.test].iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be in [0,1] and sum to 1, got {sum}"
        )));
    }
    if matches!(opts.test_split, Split::Train | Split::Val) {
        return Err(Error::Config("test_split must be a test split".into()));
    }
    let role_split = [Split::Train, Split::Val, opts.test_split];

    let mut seen = BTreeSet::new();
    for img in images {
        if !seen.insert(img.image_id.as_str()) {
            return Err(Error::Config(format!("duplicate image id `{}`", img.image_id)));
        }
    }

    let mut free: Vec<&ImageInfo> = images.iter().filter(|i| i.fixed_split.is_none()).collect();
    let mut herds: BTreeMap<&str, usize> = BTreeMap::new();
    for img in images {
        herds.entry(img.herd.as_str()).or_insert(0);
    }
    for img in &free {
        *herds.get_mut(img.herd.as_str()).unwrap() += 1;
    }
    for (herd, n) in &herds {
        if *n == 0 {
            return Err(Error::InfeasibleSplit {
                herd: herd.to_string(),
                reason: "every image of the herd is pinned to a fixed split".into(),
            });
        }
    }

    let mut rng = crate::seed::rng(opts.seed);
    free.shuffle(&mut rng);
    free.sort_by(|a, b| b.point_count.cmp(&a.point_count));

    let targets = [r.train, r.val, r.test];
    let total_points: f64 = free.iter().map(|i| i.point_count as f64).sum();
    let n_free = free.len() as f64;
    let mut work = Work {
        images: free,
        role: Vec::new(),
        targets,
        total_points,
    };

    let mut points = [0.0; ROLES];
    let mut counts = [0.0; ROLES];
    for img in &work.images {
        let (assigned, total, weight) = if img.point_count > 0 {
            (&points, total_points, img.point_count as f64)
        } else {
            (&counts, n_free, 1.0)
        };
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for k in 0..ROLES {
            let deficit = targets[k] * total - assigned[k];
            if deficit > best_deficit + 1e-12 {
                best = k;
                best_deficit = deficit;
            }
        }
        if img.point_count > 0 {
            points[best] += weight;
        }
        counts[best] += 1.0;
        work.role.push(best);
    }

    // Herd coverage repair.
    for (herd, &n) in &herds {
        let required: Vec<usize> = match n {
            1 => vec![0],
            2 => vec![0, usize::MAX],
            _ => vec![0, 1, 2],
        };
        for want in required {
            let roles_have = work.herd_roles(herd);
            let missing = match want {
                usize::MAX => {
                    if roles_have[1] > 0 || roles_have[2] > 0 {
                        continue;
                    }
                    // whichever evaluation role is further below its target
                    let c = work.counts();
                    if targets[1] * total_points - c[1] >= targets[2] * total_points - c[2] {
                        1
                    } else {
                        2
                    }
                }
                k if roles_have[k] > 0 => continue,
                k => k,
            };
            let mut best: Option<(usize, f64)> = None;
            for i in 0..work.images.len() {
                if work.images[i].herd != *herd || work.herd_roles(herd)[work.role[i]] < 2 {
                    continue;
                }
                let old = work.role[i];
                work.role[i] = missing;
                let dev = work.deviation();
                work.role[i] = old;
                if best.map_or(true, |(_, d)| dev < d - 1e-12) {
                    best = Some((i, dev));
                }
            }
            match best {
                Some((i, _)) => work.role[i] = missing,
                None => {
                    return Err(Error::InfeasibleSplit {
                        herd: herd.to_string(),
                        reason: format!("no image can be moved into {}", role_split[missing]),
                    })
                }
            }
        }
    }

    // Local search on single moves.
    for _ in 0..4 * work.images.len().max(1) {
        let current = work.deviation();
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..work.images.len() {
            if work.images[i].point_count == 0 {
                continue;
            }
            let old = work.role[i];
            let herd = work.images[i].herd.as_str();
            let n = herds[herd];
            for k in 0..ROLES {
                if k == old {
                    continue;
                }
                work.role[i] = k;
                if work.herd_covered(herd, n) {
                    let dev = work.deviation();
                    if dev < current - 1e-12 && best.map_or(true, |(_, _, d)| dev < d) {
                        best = Some((i, k, dev));
                    }
                }
                work.role[i] = old;
            }
        }
        match best {
            Some((i, k, _)) => work.role[i] = k,
            None => break,
        }
    }

    let mut assignments = BTreeMap::new();
    for (img, &role) in work.images.iter().zip(&work.role) {
        assignments.insert(img.image_id.clone(), role_split[role]);
    }
    for img in images {
        if let Some(s) = img.fixed_split {
            assignments.insert(img.image_id.clone(), s);
        }
    }

    let by_id: BTreeMap<&str, &ImageInfo> = images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let mut point_counts: BTreeMap<Split, u64> = BTreeMap::new();
    let mut herd_points: BTreeMap<Split, BTreeMap<String, u64>> = BTreeMap::new();
    for (id, split) in &assignments {
        let img = by_id[id.as_str()];
        *point_counts.entry(*split).or_default() += img.point_count;
        *herd_points
            .entry(*split)
            .or_default()
            .entry(img.herd.clone())
            .or_default() += img.point_count;
    }
    for s in role_split {
        point_counts.entry(s).or_insert(0);
    }
    let herd_proportions = herd_points
        .into_iter()
        .map(|(split, herds)| {
            let total: u64 = herds.values().sum();
            let props = herds
                .into_iter()
                .map(|(h, c)| {
                    (
                        h,
                        if total > 0 {
                            100.0 * c as f64 / total as f64
                        } else {
                            0.0
                        },
                    )
                })
                .collect();
            (split, props)
        })
        .collect();

    let mut warnings = Vec::new();
    for s in &role_split[1..] {
        if !assignments.values().any(|v| v == s) {
            warnings.push(format!("split {s} received no images"));
        }
    }
    for (herd, &n) in &herds {
        if n == 1 {
            warnings.push(format!("herd {herd} has a single image; it appears in train only"));
        }
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }

    Ok(SplitAssignment {
        assignments,
        point_counts,
        herd_proportions,
        warnings,
    })
}
