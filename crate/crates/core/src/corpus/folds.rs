use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

/// Fold index for every example of a corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        self.indices(|f| f == fold)
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        self.indices(|f| f != fold)
    }

    fn indices(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &f)| keep(f))
            .map(|(i, _)| i)
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

/// Stratified `k`-fold assignment. Each class is shuffled, the classes are
/// laid end to end, and positions are dealt to folds round-robin, so fold
/// sizes differ by at most one overall and per class.
pub fn make_folds(corpus: &Corpus, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    if k > corpus.len() {
        return Err(Error::invalid(format!(
            "{k} folds for {} examples",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; corpus.len()];
    let mut position = 0;
    for label in 0..corpus.num_classes() {
        let mut members: Vec<usize> = corpus
            .examples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == label)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = position % k;
            position += 1;
        }
    }
    Ok(FoldPlan { k, seed, assignment })
}
