use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Split label per region position in the bundle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub labels: Vec<Split>,
}

impl SplitAssignment {
    /// Region positions assigned to `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.labels.iter().filter(|&&s| s == split).count()
    }
}

/// Seeded shuffle followed by contiguous train/validation/test assignment.
pub fn split_regions(n_regions: usize, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if n_regions < 3 {
        return Err(Error::contract(format!("need at least 3 regions to split, got {n_regions}")));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n_train = (n_regions as f64 * ratios[0]).round() as usize;
    let n_val = ((n_regions as f64 * ratios[1]).round() as usize).min(n_regions - n_train);

    let mut order: Vec<usize> = (0..n_regions).collect();
    order.shuffle(&mut rng::rng(seed));
    let mut labels = vec![Split::Test; n_regions];
    for (pos, &region) in order.iter().enumerate() {
        labels[region] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(SplitAssignment { labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    const RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

    fn counts(s: &SplitAssignment) -> [usize; 3] {
        [s.count(Split::Train), s.count(Split::Validation), s.count(Split::Test)]
    }

    #[test]
    fn proportions() {
        assert_eq!(counts(&split_regions(10, RATIOS, 1).unwrap()), [6, 2, 2]);
        assert_eq!(counts(&split_regions(100, RATIOS, 1).unwrap()), [60, 20, 20]);
        assert_eq!(counts(&split_regions(150, RATIOS, 1).unwrap()), [90, 30, 30]);
    }

    #[test]
    fn seeds_change_assignment_not_counts() {
        let a = split_regions(40, RATIOS, 1).unwrap();
        let b = split_regions(40, RATIOS, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(counts(&a), counts(&b));
        assert_eq!(a, split_regions(40, RATIOS, 1).unwrap());
    }

    #[test]
    fn rejects_tiny_or_bad_ratios() {
        assert!(split_regions(2, RATIOS, 0).is_err());
        assert!(split_regions(10, [0.5, 0.2, 0.2], 0).is_err());
    }
}
