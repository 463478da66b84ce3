//! Subject-disjoint K-fold planning. One video per subject, so assigning
//! videos to folds assigns subjects.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Videos per fold used for every theme.
pub const DEFAULT_VIDEOS_PER_FOLD: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub l_fold: usize,
    /// Fold index for each video (subject) index.
    pub assignment: Vec<usize>,
}

/// `K = floor(n_video / l_fold)`.
pub fn fold_count(n_video: usize, l_fold: usize) -> Result<usize> {
    if l_fold == 0 || n_video < l_fold {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n_video} videos into folds of {l_fold}"
        )));
    }
    Ok(n_video / l_fold)
}

/// Shuffles video indices with `seed` and cuts them into contiguous blocks of
/// `l_fold`; videos left over after `K * l_fold` join the last fold.
pub fn plan_folds(n_video: usize, l_fold: usize, seed: u64) -> Result<FoldPlan> {
    let k = fold_count(n_video, l_fold)?;
    let mut order: Vec<usize> = (0..n_video).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n_video];
    for (pos, &video) in order.iter().enumerate() {
        assignment[video] = (pos / l_fold).min(k - 1);
    }
    Ok(FoldPlan {
        k,
        l_fold,
        assignment,
    })
}

impl FoldPlan {
    pub fn n_video(&self) -> usize {
        self.assignment.len()
    }

    /// Video indices evaluated in `fold`.
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&v| self.assignment[v] == fold)
            .collect()
    }

    /// Video indices trained on when `fold` is held out.
    pub fn train_members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&v| self.assignment[v] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}
