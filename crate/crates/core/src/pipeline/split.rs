use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::RngState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitBy {
    #[default]
    Subject,
    Trial,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    /// Sample indices, ascending.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random partition of `0..n` into `round(ratio · n)` and the remainder.
pub fn split_units(n: usize, ratio: f64, rng: &mut RngState) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::Data(format!("cannot split {n} units; at least 5 needed")));
    }
    let k = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let (mut a, mut b) = (order[..k].to_vec(), order[k..].to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

/// Splits samples so that every subject (or trial) lands on one side.
pub fn split(ds: &Dataset, ratio: f64, by: SplitBy, seed: u64) -> Result<Split> {
    let key = |i: usize| {
        let s = &ds.samples[i];
        match by {
            SplitBy::Subject => (s.subject as u64, 0, 0),
            SplitBy::Trial => (s.subject as u64, s.trial as u64, 0),
            SplitBy::Sample => (0, 0, i as u64),
        }
    };
    let units: Vec<_> = (0..ds.samples.len()).map(key).collect::<BTreeSet<_>>().into_iter().collect();
    let (tr, _) = split_units(units.len(), ratio, &mut RngState::new(seed))?;
    let train_units: BTreeSet<_> = tr.iter().map(|&i| units[i]).collect();
    let (train, test) = (0..ds.samples.len()).partition(|&i| train_units.contains(&key(i)));
    Ok(Split { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_sizes() {
        let mut rng = RngState::new(1);
        let (a, b) = split_units(45, 0.8, &mut rng).unwrap();
        assert_eq!((a.len(), b.len()), (36, 9));
        let (a, b) = split_units(5, 0.8, &mut rng).unwrap();
        assert_eq!((a.len(), b.len()), (4, 1));
        assert!(split_units(4, 0.8, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_exhaustive(n in 5usize..200, seed in any::<u64>()) {
            let (a, b) = split_units(n, 0.8, &mut RngState::new(seed)).unwrap();
            let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
