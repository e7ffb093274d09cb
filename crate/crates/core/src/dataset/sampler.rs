use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::PatchLabel;
use crate::seed::{derive_seed_index, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    /// Drop the final partial batch instead of keeping it.
    pub drop_last: bool,
}

impl SamplerConfig {
    pub fn new(batch_size: usize) -> Self {
        SamplerConfig {
            batch_size,
            drop_last: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch<T> {
    pub items: Vec<(T, PatchLabel)>,
}

impl<T> Batch<T> {
    pub fn count(&self, label: PatchLabel) -> usize {
        self.items.iter().filter(|(_, l)| *l == label).count()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan<T> {
    pub epoch: u64,
    pub batches: Vec<Batch<T>>,
}

/// Balanced batches for one epoch: every non-empty id exactly once, paired
/// with an equal number of empty ids drawn without replacement.
///
/// Empty ids are only repeated when there are fewer of them than non-empty
/// ids; then whole shuffled passes are concatenated. The plan depends only on
/// `(seed, epoch)`.
pub fn binary_batch_sampler<T: Clone>(
    empty: &[T],
    non_empty: &[T],
    cfg: &SamplerConfig,
    seed: u64,
    epoch: u64,
) -> Result<BatchPlan<T>> {
    if cfg.batch_size < 2 || cfg.batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "binary batch sampler needs an even batch size >= 2, got {}",
            cfg.batch_size
        )));
    }
    if non_empty.is_empty() {
        return Err(Error::Config("binary batch sampler needs non-empty patches".into()));
    }
    if empty.is_empty() {
        return Err(Error::Config("binary batch sampler needs empty patches".into()));
    }
    let mut rng = rng(derive_seed_index(seed, epoch));
    let half = cfg.batch_size / 2;
    let needed = non_empty.len();

    let mut pos: Vec<usize> = (0..non_empty.len()).collect();
    pos.shuffle(&mut rng);

    let neg: Vec<usize> = if empty.len() >= needed {
        index::sample(&mut rng, empty.len(), needed).into_vec()
    } else {
        let mut out = Vec::with_capacity(needed);
        while out.len() < needed {
            let mut pass: Vec<usize> = (0..empty.len()).collect();
            pass.shuffle(&mut rng);
            out.extend(pass.into_iter().take(needed - out.len()));
        }
        out
    };

    let mut batches = Vec::with_capacity(needed.div_ceil(half));
    for (p, n) in pos.chunks(half).zip(neg.chunks(half)) {
        if p.len() < half && cfg.drop_last {
            break;
        }
        let mut items: Vec<(T, PatchLabel)> = p
            .iter()
            .map(|&i| (non_empty[i].clone(), PatchLabel::NonEmpty))
            .chain(n.iter().map(|&i| (empty[i].clone(), PatchLabel::Empty)))
            .collect();
        items.shuffle(&mut rng);
        batches.push(Batch { items });
    }
    Ok(BatchPlan { epoch, batches })
}
