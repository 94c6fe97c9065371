//! Synthetic classification task: standard-normal inputs labeled by a fixed
//! random teacher MLP, with a small fraction of labels resampled uniformly.
//! Everything is derived from one seed, so the dataset is regenerated on
//! demand and never shipped.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{IoDims, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    /// train / valid / test example counts.
    pub sizes: [usize; 3],
    pub input_dim: usize,
    pub classes: usize,
    /// Fraction of labels replaced by a uniform class draw.
    pub label_noise: f64,
    pub teacher_hidden: usize,
}

impl Default for DatasetConfig {
    /// The default seed fixes the benchmark instance. It was picked by
    /// scanning candidate seeds for a task whose 125-arch oracle landscape
    /// has tied optima with strong near-optimal neighbors; evolutionary
    /// search demos need that locality, and some seeds (0, 11) produce an
    /// isolated single-sample optimum that no mutation walk can reach.
    fn default() -> Self {
        Self {
            seed: 8,
            sizes: [2048, 512, 512],
            input_dim: 8,
            classes: 4,
            label_noise: 0.05,
            teacher_hidden: 32,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.contains(&0) {
            return Err(Error::InvalidConfig(
                "every split size must be positive".into(),
            ));
        }
        if self.input_dim == 0 || self.teacher_hidden == 0 {
            return Err(Error::InvalidConfig(
                "input_dim and teacher_hidden must be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::InvalidConfig(format!(
                "label_noise must lie in [0, 1], got {}",
                self.label_noise
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> IoDims {
        IoDims {
            input: self.input_dim,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitId {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Empirical class distribution.
    pub fn class_frequencies(&self, classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
            .into_iter()
            .map(|c| c as f64 / self.labels.len() as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

impl Dataset {
    /// Generate the full dataset from its config. Streams: "data" for
    /// inputs (train, valid, test order), "teacher" for the labeling MLP,
    /// "label-noise" for the resampling pass.
    pub fn generate(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim;
        let h = config.teacher_hidden;
        let c = config.classes;
        let total: usize = config.sizes.iter().sum();

        let mut data_rng = rng::stream(config.seed, "data");
        let mut all = Matrix::zeros(total, d);
        for v in all.data_mut().iter_mut() {
            let z: f64 = data_rng.sample(StandardNormal);
            *v = z as f32;
        }

        // Teacher MLP d -> h -> c, tanh, no biases; weights N(0, 1/fan_in),
        // w1 then w2 row-major.
        let mut teacher_rng = rng::stream(config.seed, "teacher");
        let std1 = (1.0 / d as f64).sqrt();
        let mut w1 = vec![0.0f32; h * d];
        for v in w1.iter_mut() {
            let z: f64 = teacher_rng.sample(StandardNormal);
            *v = (z * std1) as f32;
        }
        let std2 = (1.0 / h as f64).sqrt();
        let mut w2 = vec![0.0f32; c * h];
        for v in w2.iter_mut() {
            let z: f64 = teacher_rng.sample(StandardNormal);
            *v = (z * std2) as f32;
        }

        let mut labels = Vec::with_capacity(total);
        let mut hidden = vec![0.0f32; h];
        for r in 0..total {
            let x = all.row(r);
            for (p, hv) in hidden.iter_mut().enumerate() {
                let wrow = &w1[p * d..(p + 1) * d];
                let mut acc = 0.0f32;
                for (w, xv) in wrow.iter().zip(x) {
                    acc += w * xv;
                }
                *hv = acc.tanh();
            }
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for cls in 0..c {
                let wrow = &w2[cls * h..(cls + 1) * h];
                let mut acc = 0.0f32;
                for (w, hv) in wrow.iter().zip(&hidden) {
                    acc += w * hv;
                }
                if acc > best_v {
                    best_v = acc;
                    best = cls;
                }
            }
            labels.push(best);
        }

        let mut noise_rng = rng::stream(config.seed, "label-noise");
        if config.label_noise > 0.0 {
            for l in labels.iter_mut() {
                let u: f64 = noise_rng.random();
                if u < config.label_noise {
                    *l = noise_rng.random_range(0..c);
                }
            }
        }

        let [ntr, nva, nte] = config.sizes;
        let slice = |lo: usize, hi: usize| Split {
            inputs: all.gather_rows(&(lo..hi).collect::<Vec<_>>()),
            labels: labels[lo..hi].to_vec(),
        };
        let ds = Self {
            config,
            train: slice(0, ntr),
            valid: slice(ntr, ntr + nva),
            test: slice(ntr + nva, ntr + nva + nte),
        };
        for (name, split) in [
            ("train", &ds.train),
            ("valid", &ds.valid),
            ("test", &ds.test),
        ] {
            let distinct = split
                .class_frequencies(c)
                .iter()
                .filter(|&&f| f > 0.0)
                .count();
            if distinct < 2 {
                return Err(Error::InvalidConfig(format!(
                    "{name} split covers {distinct} classes; need at least 2 \
                     (choose another seed or larger sizes)"
                )));
            }
        }
        Ok(ds)
    }

    pub fn split(&self, id: SplitId) -> &Split {
        match id {
            SplitId::Train => &self.train,
            SplitId::Valid => &self.valid,
            SplitId::Test => &self.test,
        }
    }

    pub fn dims(&self) -> IoDims {
        self.config.dims()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        let a = Dataset::generate(DatasetConfig::default()).unwrap();
        let b = Dataset::generate(DatasetConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_sizes_and_dims() {
        let ds = Dataset::generate(DatasetConfig::default()).unwrap();
        assert_eq!(ds.train.len(), 2048);
        assert_eq!(ds.valid.len(), 512);
        assert_eq!(ds.test.len(), 512);
        assert_eq!(ds.train.inputs.cols(), 8);
        assert_eq!(
            ds.dims(),
            IoDims {
                input: 8,
                classes: 4
            }
        );
        assert!(ds.train.labels.iter().all(|&l| l < 4));
    }

    #[test]
    fn every_split_covers_at_least_two_classes() {
        let ds = Dataset::generate(DatasetConfig::default()).unwrap();
        for id in [SplitId::Train, SplitId::Valid, SplitId::Test] {
            let distinct = ds
                .split(id)
                .class_frequencies(4)
                .iter()
                .filter(|&&f| f > 0.0)
                .count();
            assert!(distinct >= 2);
        }
    }

    #[test]
    fn zero_noise_matches_teacher_exactly_and_noise_flips_a_few() {
        let clean_cfg = DatasetConfig {
            label_noise: 0.0,
            ..DatasetConfig::default()
        };
        let clean = Dataset::generate(clean_cfg).unwrap();
        let noisy = Dataset::generate(DatasetConfig::default()).unwrap();
        // Same seed: identical inputs, labels differ only where noise hit.
        assert_eq!(clean.train.inputs, noisy.train.inputs);
        let total = 2048 + 512 + 512;
        let flips: usize = [
            (&clean.train, &noisy.train),
            (&clean.valid, &noisy.valid),
            (&clean.test, &noisy.test),
        ]
        .iter()
        .map(|(a, b)| {
            a.labels
                .iter()
                .zip(&b.labels)
                .filter(|(x, y)| x != y)
                .count()
        })
        .sum();
        // Expect about 5% * (3/4) of examples flipped.
        let frac = flips as f64 / total as f64;
        assert!(
            (0.02..0.06).contains(&frac),
            "flip fraction {frac:.4} out of expected band"
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = DatasetConfig {
            sizes: [0, 512, 512],
            ..DatasetConfig::default()
        };
        assert!(Dataset::generate(cfg).is_err());
        cfg = DatasetConfig {
            label_noise: 1.5,
            ..DatasetConfig::default()
        };
        assert!(Dataset::generate(cfg).is_err());
        cfg = DatasetConfig {
            classes: 1,
            ..DatasetConfig::default()
        };
        assert!(Dataset::generate(cfg).is_err());
    }

    #[test]
    fn different_seeds_differ() {
        let a = Dataset::generate(DatasetConfig::default()).unwrap();
        let b = Dataset::generate(DatasetConfig {
            seed: 1,
            ..DatasetConfig::default()
        })
        .unwrap();
        assert_ne!(a.train.inputs, b.train.inputs);
    }
}
