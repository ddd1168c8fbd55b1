//! Synthetic MIL datasets with known instance labels.
//!
//! Each class is an isotropic Gaussian cluster. A bag of a non-background
//! class holds a random fraction of instances from its class and fills the
//! rest from the background (lowest-priority) class; background bags hold
//! background instances only.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bagcore::{Bag, ClassPriority, Dataset, Split};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub train_bags: usize,
    pub val_bags: usize,
    pub test_bags: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub dim: usize,
    /// Class names, indexed by class.
    pub classes: Vec<String>,
    /// Rank per class; lowest-first order when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<Vec<usize>>,
    pub positive_ratio_min: f64,
    pub positive_ratio_max: f64,
    /// One mean per class, each of length `dim`.
    pub class_means: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Class means on a scaled simplex: every pair is exactly `separation` apart.
pub fn simplex_means(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let scale = separation / std::f64::consts::SQRT_2;
    (0..classes)
        .map(|c| {
            let mut mean = vec![0.0; dim];
            mean[c] = scale;
            mean
        })
        .collect()
}

impl SynthSpec {
    pub fn priority(&self) -> Result<ClassPriority> {
        match &self.priority {
            Some(rank) => ClassPriority::new(self.classes.clone(), rank.clone()),
            None => ClassPriority::ascending(self.classes.clone()),
        }
    }

    /// Re-spaces the class means to `separation` noise standard deviations.
    pub fn with_separation(mut self, separation_in_sigmas: f64) -> Self {
        self.class_means = simplex_means(self.classes.len(), self.dim, separation_in_sigmas * self.noise_sigma);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        self.priority()?;
        if self.dim == 0 {
            return Err(Error::Domain("dim must be positive".into()));
        }
        if self.train_bags + self.val_bags + self.test_bags == 0 {
            return Err(Error::Domain("spec generates no bags".into()));
        }
        if self.min_instances == 0 || self.max_instances < self.min_instances {
            return Err(Error::Domain(format!(
                "instance range [{}, {}] is invalid",
                self.min_instances, self.max_instances
            )));
        }
        let (lo, hi) = (self.positive_ratio_min, self.positive_ratio_max);
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Domain(format!("positive ratio range [{lo}, {hi}] must lie in (0, 1]")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Domain(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        if self.class_means.len() != c || self.class_means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::Domain(format!("need {c} class means of length {}", self.dim)));
        }
        if self.class_means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("class means must be finite".into()));
        }
        for a in 0..c {
            for b in a + 1..c {
                if self.class_means[a] == self.class_means[b] {
                    return Err(Error::Domain(format!("classes {a} and {b} share a mean")));
                }
            }
        }
        Ok(())
    }

    /// Integer range of positive counts for a bag of `n` instances.
    fn positive_count_range(&self, n: usize) -> (usize, usize) {
        let lo = (self.positive_ratio_min * n as f64 - 1e-9).ceil().max(1.0) as usize;
        let hi = ((self.positive_ratio_max * n as f64 + 1e-9).floor() as usize).min(n);
        if lo <= hi {
            (lo, hi)
        } else {
            let mid = ((self.positive_ratio_min + self.positive_ratio_max) / 2.0 * n as f64).round();
            let k = (mid as usize).clamp(1, n);
            (k, k)
        }
    }
}

/// Desk-scale binary benchmark: 200/50/50 bags of 30–80 instances, `d = 16`,
/// class means 4σ apart, 5–20% positive instances, seed 42.
pub fn default_benchmark() -> SynthSpec {
    SynthSpec {
        train_bags: 200,
        val_bags: 50,
        test_bags: 50,
        min_instances: 30,
        max_instances: 80,
        dim: 16,
        classes: vec!["normal".into(), "tumor".into()],
        priority: None,
        positive_ratio_min: 0.05,
        positive_ratio_max: 0.20,
        class_means: simplex_means(2, 16, 4.0),
        noise_sigma: 1.0,
        seed: 42,
    }
}

/// Three classes ordered benign < atypical < malignant.
pub fn default_benchmark_3class() -> SynthSpec {
    SynthSpec {
        classes: vec!["benign".into(), "atypical".into(), "malignant".into()],
        class_means: simplex_means(3, 16, 4.0),
        ..default_benchmark()
    }
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let priority = spec.priority()?;
    let c = priority.num_classes();
    let background = priority.lowest();
    let mut rng = seed::sub_rng(spec.seed, "synthgen", 0);
    let mut bags = Vec::new();
    let mut split = BTreeMap::new();
    for (which, count) in [
        (Split::Train, spec.train_bags),
        (Split::Val, spec.val_bags),
        (Split::Test, spec.test_bags),
    ] {
        for k in 0..count {
            // background first, then the other classes in index order
            let label = (background + k) % c;
            let n = rng.random_range(spec.min_instances..=spec.max_instances);
            let mut labels = vec![background; n];
            if label != background {
                let (lo, hi) = spec.positive_count_range(n);
                let positives = rng.random_range(lo..=hi);
                labels[..positives].fill(label);
                labels.shuffle(&mut rng);
            }
            let mut features = Vec::with_capacity(n * spec.dim);
            for &l in &labels {
                for &mu in &spec.class_means[l] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features.push((mu + spec.noise_sigma * z) as f32);
                }
            }
            let id = format!("{}_{k:04}", which.as_str());
            split.insert(id.clone(), which);
            bags.push(Bag::new(id, n, spec.dim, features, label, Some(labels))?);
        }
    }
    Dataset::new(bags, priority, split)
}
