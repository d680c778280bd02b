use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Manifest, Result, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::Split(format!(
                "ratios {}/{}/{} must be non-negative and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Label-stratified shuffle split. Within each label, `round(n·val)` clips go
/// to validation, `round(n·test)` to test and the rest to training.
pub fn split_labels(labels: &[u8], ratios: SplitRatios, seed: u64) -> Result<Vec<Split>> {
    ratios.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Train; labels.len()];
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let n_val = (n * ratios.val).round() as usize;
        let n_test = ((n * ratios.test).round() as usize).min(members.len() - n_val.min(members.len()));
        for (k, &i) in members.iter().enumerate() {
            out[i] = if k < n_val {
                Split::Val
            } else if k < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    let ratio_of = |s: Split| match s {
        Split::Train => ratios.train,
        Split::Val => ratios.val,
        Split::Test => ratios.test,
    };
    for s in Split::ALL {
        if ratio_of(s) > 0.0 && !out.contains(&s) {
            return Err(DataError::Split(format!(
                "{} clips are too few to give the {s} split a stratified share",
                labels.len()
            )));
        }
    }
    Ok(out)
}

pub fn split_dataset(manifest: &Manifest, ratios: SplitRatios, seed: u64) -> Result<Manifest> {
    let splits = split_labels(&manifest.labels(), ratios, seed)?;
    let mut out = manifest.clone();
    for (e, s) in out.entries.iter_mut().zip(splits) {
        e.split = s;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn count(splits: &[Split], s: Split) -> usize {
        splits.iter().filter(|&&x| x == s).count()
    }

    #[test]
    fn dftimit_sized_split() {
        let labels: Vec<u8> = (0..320).map(|i| (i % 2) as u8).collect();
        let s = split_labels(&labels, SplitRatios::default(), 3).unwrap();
        assert_eq!(
            [count(&s, Split::Train), count(&s, Split::Val), count(&s, Split::Test)],
            [256, 32, 32]
        );
        assert_eq!(s, split_labels(&labels, SplitRatios::default(), 3).unwrap());
        assert_ne!(s, split_labels(&labels, SplitRatios::default(), 4).unwrap());
    }

    #[test]
    fn too_few_clips() {
        assert!(matches!(
            split_labels(&[0, 1, 1], SplitRatios::default(), 0),
            Err(DataError::Split(_))
        ));
        let bad = SplitRatios {
            train: 0.9,
            val: 0.2,
            test: 0.1,
        };
        assert!(split_labels(&[0; 20], bad, 0).is_err());
    }

    proptest! {
        #[test]
        fn splits_are_stratified(n_real in 10usize..200, n_fake in 10usize..200, seed in 0u64..1000) {
            let labels: Vec<u8> = std::iter::repeat(0).take(n_real).chain(std::iter::repeat(1).take(n_fake)).collect();
            let s = split_labels(&labels, SplitRatios::default(), seed).unwrap();
            let global = n_fake as f64 / labels.len() as f64;
            for split in Split::ALL {
                let members: Vec<usize> = (0..labels.len()).filter(|&i| s[i] == split).collect();
                let fakes = members.iter().filter(|&&i| labels[i] == 1).count() as f64;
                prop_assert!(!members.is_empty());
                prop_assert!((fakes - global * members.len() as f64).abs() <= 1.0);
            }
        }
    }
}
