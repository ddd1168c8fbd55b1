//! MergeUp: union a pseudo bag with a partner of no higher priority and keep
//! the dominant label.

use log::debug;
use rand::Rng;

use crate::bagcore::{max_priority_label, Bag, ClassPriority, PseudoBag};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MergedSample {
    /// Rows of `a` followed by rows of `b`.
    pub features: Matrix,
    pub label: usize,
    pub sources: (usize, usize),
}

/// Concatenates two feature matrices row-wise.
pub fn concat_rows(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!("merging dim {} with dim {}", a.cols(), b.cols())));
    }
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Matrix::new(a.rows() + b.rows(), a.cols(), data)
}

/// Merges pseudo bags `a` and `b` (indices into `pool`). The label is the
/// higher-priority of their effective classes.
pub fn merge(bags: &[Bag], pool: &[PseudoBag], a: usize, b: usize, priority: &ClassPriority) -> Result<MergedSample> {
    let pa = &pool[a];
    let pb = &pool[b];
    let features = concat_rows(&pa.features(&bags[pa.parent])?, &pb.features(&bags[pb.parent])?)?;
    let label = max_priority_label(pa.effective_class(), pb.effective_class(), priority)?;
    Ok(MergedSample {
        features,
        label,
        sources: (a, b),
    })
}

/// Picks a partner for `pool[target]` uniformly among candidates from other
/// parents whose effective class ranks no higher than the target's. Falls
/// back to candidates of the lowest-priority class present; returns `None`
/// when no other parent contributes to the pool.
pub fn select_partner<R: Rng + ?Sized>(
    target: usize,
    pool: &[PseudoBag],
    candidates: &[usize],
    priority: &ClassPriority,
    rng: &mut R,
) -> Option<usize> {
    let t = &pool[target];
    let target_rank = priority.rank(t.effective_class());
    let foreign: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|i| pool[*i].parent != t.parent)
        .collect();
    if foreign.is_empty() {
        debug!("no merge partner for pseudo bag of {}", t.parent_id);
        return None;
    }
    let eligible: Vec<usize> = foreign
        .iter()
        .copied()
        .filter(|i| priority.rank(pool[*i].effective_class()) <= target_rank)
        .collect();
    let eligible = if eligible.is_empty() {
        let lowest = foreign
            .iter()
            .map(|i| priority.rank(pool[*i].effective_class()))
            .min()
            .expect("non-empty");
        foreign
            .into_iter()
            .filter(|i| priority.rank(pool[*i].effective_class()) == lowest)
            .collect()
    } else {
        eligible
    };
    Some(eligible[rng.random_range(0..eligible.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagcore::Status;
    use crate::seed;

    fn parent(id: &str, label: usize, n: usize) -> Bag {
        Bag::new(id, n, 2, vec![label as f32; n * 2], label, None).unwrap()
    }

    fn labeled(parent_idx: usize, bag: &Bag) -> PseudoBag {
        let mut pb = PseudoBag::new(parent_idx, bag, (0..bag.num_instances()).collect()).unwrap();
        pb.prediction = Some(bag.label());
        pb.confidence = Some(0.99);
        pb.set_status(Status::Labeled).unwrap();
        pb
    }

    fn binary() -> ClassPriority {
        ClassPriority::ascending(vec!["normal".into(), "tumor".into()]).unwrap()
    }

    #[test]
    fn tumor_with_normal_stays_tumor() {
        let bags = vec![parent("t", 1, 3), parent("n", 0, 2)];
        let pool = vec![labeled(0, &bags[0]), labeled(1, &bags[1])];
        let m = merge(&bags, &pool, 0, 1, &binary()).unwrap();
        assert_eq!(m.label, 1);
        assert_eq!(m.features.rows(), 5);
        assert_eq!(m.features.row(0), &[1.0, 1.0]);
        assert_eq!(m.features.row(4), &[0.0, 0.0]);
        let same = merge(&bags, &pool, 0, 0, &binary()).unwrap();
        assert_eq!(same.label, 1);
    }

    #[test]
    fn merge_rejects_dim_mismatch() {
        let a = Bag::new("a", 1, 2, vec![0.0; 2], 0, None).unwrap();
        let b = Bag::new("b", 1, 3, vec![0.0; 3], 0, None).unwrap();
        let pool = vec![labeled(0, &a), labeled(1, &b)];
        assert!(matches!(merge(&[a, b], &pool, 0, 1, &binary()), Err(Error::Dimension(_))));
    }

    #[test]
    fn partner_filter_semantics() {
        let bags = [parent("t", 1, 1), parent("n1", 0, 1), parent("n2", 0, 1), parent("t2", 1, 1)];
        let pool: Vec<PseudoBag> = bags.iter().enumerate().map(|(i, b)| labeled(i, b)).collect();
        let all: Vec<usize> = (0..4).collect();
        let mut rng = seed::rng(0);
        // a tumor target may draw any class; a normal target only normals
        for _ in 0..200 {
            let p = select_partner(1, &pool, &all, &binary(), &mut rng).unwrap();
            assert_eq!(p, 2);
            let q = select_partner(0, &pool, &all, &binary(), &mut rng).unwrap();
            assert_ne!(q, 0);
        }
        // only same-parent candidates: identity
        assert_eq!(select_partner(0, &pool, &[0], &binary(), &mut rng), None);
        // normal target with only tumor partners falls back to lowest present
        assert_eq!(select_partner(1, &pool, &[1, 3], &binary(), &mut rng), Some(3));
    }

    #[test]
    fn partner_draws_are_uniform() {
        let bags = [parent("t", 1, 1), parent("a", 0, 1), parent("b", 0, 1), parent("c", 1, 1)];
        let pool: Vec<PseudoBag> = bags.iter().enumerate().map(|(i, b)| labeled(i, b)).collect();
        let all: Vec<usize> = (0..4).collect();
        let mut rng = seed::rng(11);
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[select_partner(0, &pool, &all, &binary(), &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0);
        let p = 1.0 / 3.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in &counts[1..] {
            assert!((*c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }
}
