use super::DataError;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_YAW_THRESHOLD: f64 = 0.1;
pub const DEFAULT_BOOST: f64 = 4.0;

/// Deterministic partition of `0..n` into (train, test) index lists; the
/// training side receives `round(ratio * n)` items. Both lists are sorted.
pub fn split(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::Invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * n as f64).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// `w_i = 1 + boost * [|yaw_i| > threshold]`.
pub fn oversample_weights(yaw_actions: &[f32], threshold: f64, boost: f64) -> Result<Vec<f64>, DataError> {
    if yaw_actions.is_empty() {
        return Err(DataError::Empty);
    }
    if !(boost >= 0.0 && boost.is_finite()) {
        return Err(DataError::Invalid(format!("boost {boost} must be finite and non-negative")));
    }
    Ok(yaw_actions.iter().map(|&y| if y.abs() > threshold as f32 { 1.0 + boost } else { 1.0 }).collect())
}

/// Batches needed to draw one dataset's worth of samples.
pub fn batches_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

/// Weighted sampling with replacement, deterministic under its seed.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    pub batch_size: usize,
}

impl BatchSampler {
    pub fn new(weights: &[f64], batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if weights.is_empty() {
            return Err(DataError::Empty);
        }
        if batch_size == 0 {
            return Err(DataError::Invalid("batch size must be positive".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(DataError::Invalid(format!("sampling weight {w} must be finite and positive")));
        }
        let dist = WeightedIndex::new(weights).map_err(|e| DataError::Invalid(e.to_string()))?;
        Ok(Self { dist, rng: ChaCha8Rng::seed_from_u64(seed), batch_size })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch_size).map(|_| self.dist.sample(&mut self.rng)).collect()
    }
}

impl Iterator for BatchSampler {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_split_sizes() {
        let (tr, te) = split(200, 0.9, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (180, 20));
        assert_eq!(split(200, 0.9, 3).unwrap(), (tr, te));
        assert!(split(10, 1.0, 0).is_err());
    }

    #[test]
    fn weights_examples() {
        assert_eq!(oversample_weights(&[0.0, 0.1, -0.05], 0.1, 4.0).unwrap(), vec![1.0; 3]);
        let w = oversample_weights(&[0.0, 0.0, 0.5, 0.0], 0.1, 4.0).unwrap();
        let total: f64 = w.iter().sum();
        assert!((w[2] / total - 5.0 / 8.0).abs() < 1e-15);
        assert!(oversample_weights(&[], 0.1, 4.0).is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_sized() {
        let w = vec![1.0; 10];
        let a: Vec<_> = BatchSampler::new(&w, 128, 5).unwrap().take(3).collect();
        let b: Vec<_> = BatchSampler::new(&w, 128, 5).unwrap().take(3).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.len() == 128));
        assert!(BatchSampler::new(&[1.0, 0.0], 4, 0).is_err());
        assert_eq!(batches_per_epoch(27_000, 128), 211);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..400, seed in any::<u64>()) {
            let (tr, te) = split(n, 0.9, seed).unwrap();
            let mut all: Vec<_> = tr.iter().chain(&te).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn weights_are_positive(yaws in proptest::collection::vec(-1.0f32..=1.0, 1..100), boost in 0.0f64..10.0) {
            let w = oversample_weights(&yaws, 0.1, boost).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 1.0 && x.is_finite()));
        }
    }
}
