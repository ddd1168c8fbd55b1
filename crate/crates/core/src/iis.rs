//! Instance importance scores and the descending instance order used to
//! interleave pseudo bags.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bagcore::Bag;
use crate::error::{Error, Result};
use crate::milmodel::MilParams;
use crate::seed;
use crate::tensor::Matrix;

/// Largest bag accepted by [`shapley_exact`].
pub const EXACT_SHAPLEY_MAX: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IisVector {
    pub parent_id: String,
    pub scores: Vec<f64>,
    /// Instance indices sorted by descending score.
    pub order: Vec<usize>,
}

impl IisVector {
    pub fn new(parent_id: impl Into<String>, scores: Vec<f64>) -> Self {
        let order = sort_descending(&scores);
        IisVector {
            parent_id: parent_id.into(),
            scores,
            order,
        }
    }

    /// `rank[j]` is the position of instance `j` in `order`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut rank = vec![0; self.order.len()];
        for (pos, &j) in self.order.iter().enumerate() {
            rank[j] = pos;
        }
        rank
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IisMode {
    #[default]
    Attention,
    Shapley,
}

/// Stable descending sort; ties keep ascending index order.
pub fn sort_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn iis_attention(model: &MilParams, bag: &Bag) -> Result<IisVector> {
    let pred = model.forward(&bag.features())?;
    Ok(IisVector::new(bag.id(), pred.attention))
}

/// Coalition value function for one bag: the model's probability of `class`
/// on any subset of the bag's instances, evaluated incrementally.
///
/// Adding instance `j` to a coalition adds `e^{s_j} x_j` to the pooled
/// numerator and `e^{s_j}` to the denominator, so a marginal contribution
/// costs one classifier evaluation instead of a full forward pass.
struct CoalitionGame<'a> {
    model: &'a MilParams,
    features: Matrix,
    weights: Vec<f64>,
    class: usize,
    baseline: f64,
}

impl<'a> CoalitionGame<'a> {
    fn new(model: &'a MilParams, bag: &Bag, class: usize) -> Result<Self> {
        let features = bag.features();
        let logits = model.attention_logits(&features)?;
        let shift = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights = logits.iter().map(|s| (s - shift).exp()).collect();
        let zero_bag = Matrix::zeros(1, bag.dim());
        let baseline = model.forward(&zero_bag)?.probs[class];
        Ok(CoalitionGame {
            model,
            features,
            weights,
            class,
            baseline,
        })
    }

    fn n(&self) -> usize {
        self.features.rows()
    }

    fn value_of_sums(&self, numerator: &[f64], denominator: f64) -> Result<f64> {
        if denominator == 0.0 {
            return Ok(self.baseline);
        }
        let z: Vec<f64> = numerator.iter().map(|v| v / denominator).collect();
        Ok(self.model.classify_embedding(&z)?[self.class])
    }

    fn add(&self, j: usize, numerator: &mut [f64], denominator: &mut f64) {
        let w = self.weights[j];
        for (acc, x) in numerator.iter_mut().zip(self.features.row(j)) {
            *acc += w * x;
        }
        *denominator += w;
    }

    /// Value of the coalition encoded by bitmask `mask`.
    fn value_of_mask(&self, mask: u32) -> Result<f64> {
        let mut num = vec![0.0; self.features.cols()];
        let mut den = 0.0;
        for j in 0..self.n() {
            if mask & (1 << j) != 0 {
                self.add(j, &mut num, &mut den);
            }
        }
        self.value_of_sums(&num, den)
    }
}

/// Monte-Carlo Shapley values of every instance for the model's probability
/// of the bag's own class, averaged over `samples` random permutations.
pub fn iis_shapley(model: &MilParams, bag: &Bag, samples: usize, seed: u64) -> Result<IisVector> {
    if samples == 0 {
        return Err(Error::Domain("Shapley estimation needs at least one sample".into()));
    }
    let game = CoalitionGame::new(model, bag, bag.label())?;
    let n = game.n();
    let mut rng = seed::rng(seed);
    let mut totals = vec![0.0; n];
    let mut perm: Vec<usize> = (0..n).collect();
    let mut num = vec![0.0; bag.dim()];
    for _ in 0..samples {
        perm.shuffle(&mut rng);
        num.fill(0.0);
        let mut den = 0.0;
        let mut prev = game.baseline;
        for &j in &perm {
            game.add(j, &mut num, &mut den);
            let v = game.value_of_sums(&num, den)?;
            totals[j] += v - prev;
            prev = v;
        }
    }
    let scores = totals.into_iter().map(|t| t / samples as f64).collect();
    Ok(IisVector::new(bag.id(), scores))
}

/// Exact Shapley values by weighted enumeration of all coalitions.
pub fn shapley_exact(model: &MilParams, bag: &Bag) -> Result<IisVector> {
    let n = bag.num_instances();
    if n > EXACT_SHAPLEY_MAX {
        return Err(Error::Domain(format!(
            "exact Shapley limited to {EXACT_SHAPLEY_MAX} instances, bag has {n}"
        )));
    }
    let game = CoalitionGame::new(model, bag, bag.label())?;
    let values = (0..1u32 << n)
        .map(|mask| game.value_of_mask(mask))
        .collect::<Result<Vec<f64>>>()?;
    // weight[s] = s!(n-s-1)!/n!
    let mut fact = vec![1.0f64; n + 1];
    for i in 1..=n {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect();
    let mut scores = vec![0.0; n];
    for (j, score) in scores.iter_mut().enumerate() {
        let bit = 1u32 << j;
        for mask in 0..1u32 << n {
            if mask & bit == 0 {
                let s = mask.count_ones() as usize;
                *score += weight[s] * (values[(mask | bit) as usize] - values[mask as usize]);
            }
        }
    }
    Ok(IisVector::new(bag.id(), scores))
}

/// Coalition value `p(class | members)`, with the zero-vector bag standing in
/// for the empty coalition. Exposed for oracles.
pub fn coalition_value(model: &MilParams, bag: &Bag, class: usize, members: &[usize]) -> Result<f64> {
    if members.is_empty() {
        return Ok(model.forward(&Matrix::zeros(1, bag.dim()))?.probs[class]);
    }
    Ok(model.forward(&bag.gather(members)?)?.probs[class])
}

/// Scores a bag with the configured estimator.
pub fn estimate(model: &MilParams, bag: &Bag, mode: IisMode, shapley_samples: usize, seed: u64) -> Result<IisVector> {
    match mode {
        IisMode::Attention => iis_attention(model, bag),
        IisMode::Shapley => {
            let samples = if shapley_samples == 0 {
                200 * bag.num_instances()
            } else {
                shapley_samples
            };
            iis_shapley(model, bag, samples, seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milmodel::init_params;
    use rand::Rng;

    fn bag(rng: &mut seed::Rng, n: usize, d: usize, label: usize) -> Bag {
        let data = (0..n * d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        Bag::new("b", n, d, data, label, None).unwrap()
    }

    #[test]
    fn sort_examples() {
        assert_eq!(sort_descending(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(sort_descending(&[0.3; 5]), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sort_matches_reference_order() {
        let mut rng = seed::rng(1);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            // coarse values force ties
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8))).collect();
            let order = sort_descending(&scores);
            let mut reference: Vec<(i64, usize)> =
                scores.iter().enumerate().map(|(i, s)| (-(*s as i64), i)).collect();
            reference.sort();
            assert_eq!(order, reference.iter().map(|(_, i)| *i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn attention_iis_on_singleton_and_identical_instances() {
        let model = init_params(3, 5, 2, 4).unwrap();
        let single = Bag::new("s", 1, 3, vec![0.5, -1.0, 2.0], 0, None).unwrap();
        let v = iis_attention(&model, &single).unwrap();
        assert_eq!(v.scores, vec![1.0]);
        assert_eq!(v.order, vec![0]);

        let same = Bag::new("s", 4, 3, [0.5f32, -1.0, 2.0].repeat(4), 0, None).unwrap();
        let v = iis_attention(&model, &same).unwrap();
        assert!(v.scores.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(v.order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn attention_order_is_argsort_of_recomputed_attention() {
        let mut rng = seed::rng(2);
        let model = init_params(4, 8, 2, 6).unwrap();
        for _ in 0..20 {
            let b = bag(&mut rng, 12, 4, 1);
            let v = iis_attention(&model, &b).unwrap();
            let att = model.forward(&b.features()).unwrap().attention;
            let mut idx: Vec<usize> = (0..att.len()).collect();
            idx.sort_by(|a, c| att[*c].partial_cmp(&att[*a]).unwrap().then(a.cmp(c)));
            assert_eq!(v.order, idx);
        }
    }

    #[test]
    fn single_player_shapley() {
        let model = init_params(3, 4, 2, 1).unwrap();
        let b = Bag::new("s", 1, 3, vec![1.0, 2.0, -1.0], 1, None).unwrap();
        let full = model.forward(&b.features()).unwrap().probs[1];
        let base = model.forward(&Matrix::zeros(1, 3)).unwrap().probs[1];
        let v = iis_shapley(&model, &b, 3, 0).unwrap();
        assert!((v.scores[0] - (full - base)).abs() < 1e-12);
    }

    #[test]
    fn incremental_value_matches_forward_on_subsets() {
        let mut rng = seed::rng(8);
        let model = init_params(4, 6, 3, 2).unwrap();
        let b = bag(&mut rng, 5, 4, 2);
        let game = CoalitionGame::new(&model, &b, 2).unwrap();
        for mask in 0u32..32 {
            let members: Vec<usize> = (0..5).filter(|j| mask & (1 << j) != 0).collect();
            let direct = coalition_value(&model, &b, 2, &members).unwrap();
            assert!((game.value_of_mask(mask).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_shapley_efficiency() {
        let mut rng = seed::rng(5);
        let model = init_params(4, 6, 2, 3).unwrap();
        for n in 1..=8 {
            let b = bag(&mut rng, n, 4, 1);
            let v = shapley_exact(&model, &b).unwrap();
            let full = model.forward(&b.features()).unwrap().probs[1];
            let base = coalition_value(&model, &b, 1, &[]).unwrap();
            assert!((v.scores.iter().sum::<f64>() - (full - base)).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_instances_get_equal_shapley() {
        let model = init_params(3, 5, 2, 7).unwrap();
        let b = Bag::new("s", 5, 3, [0.3f32, 1.0, -0.4].repeat(5), 1, None).unwrap();
        let exact = shapley_exact(&model, &b).unwrap();
        let mc = iis_shapley(&model, &b, 500, 1).unwrap();
        let mean = exact.scores[0];
        // only the first instance of a permutation has a nonzero marginal, so
        // each estimate is Δ·Binomial(500, 1/5)/500
        let delta = 5.0 * mean;
        let sd = delta.abs() * (0.2f64 * 0.8 / 500.0).sqrt();
        for j in 0..5 {
            assert!((exact.scores[j] - mean).abs() < 1e-12);
            assert!((mc.scores[j] - mean).abs() < 4.0 * sd + 1e-12);
        }
        assert!((mc.scores.iter().sum::<f64>() - delta).abs() < 1e-9);
    }

    #[test]
    fn shapley_needs_samples() {
        let model = init_params(3, 5, 2, 7).unwrap();
        let b = Bag::new("s", 1, 3, vec![0.0; 3], 1, None).unwrap();
        assert!(iis_shapley(&model, &b, 0, 0).is_err());
    }
}
