//! Slide-level metrics and pseudo-label accuracy.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::adapse::RoundPlan;
use crate::bagcore::{Dataset, PseudoBag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub truth: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub num_classes: usize,
    pub samples: Vec<DumpEntry>,
}

impl PredictionDump {
    pub fn new(num_classes: usize, samples: Vec<DumpEntry>) -> Result<Self> {
        for s in &samples {
            if s.truth >= num_classes || s.predicted >= num_classes || s.probs.len() != num_classes {
                return Err(Error::Data(format!("dump entry inconsistent with {num_classes} classes")));
            }
        }
        Ok(PredictionDump { num_classes, samples })
    }

    fn require_samples(&self) -> Result<()> {
        if self.samples.is_empty() {
            Err(Error::Data("empty prediction dump".into()))
        } else {
            Ok(())
        }
    }
}

/// `confusion[truth][predicted]` counts.
pub fn confusion(dump: &PredictionDump) -> Vec<Vec<usize>> {
    let c = dump.num_classes;
    let mut m = vec![vec![0; c]; c];
    for s in &dump.samples {
        m[s.truth][s.predicted] += 1;
    }
    m
}

pub fn accuracy(dump: &PredictionDump) -> Result<f64> {
    dump.require_samples()?;
    let hits = dump.samples.iter().filter(|s| s.truth == s.predicted).count();
    Ok(hits as f64 / dump.samples.len() as f64)
}

/// Mann–Whitney AUC of `scores` for positives vs negatives, ties counted ½.
/// `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    // midranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = idx[i..j].iter().filter(|k| positive[**k]).count();
        rank_sum_pos += mid * pos_in_group as f64;
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-others AUC for class `c`.
pub fn class_auc(dump: &PredictionDump, c: usize) -> Option<f64> {
    let scores: Vec<f64> = dump.samples.iter().map(|s| s.probs[c]).collect();
    let positive: Vec<bool> = dump.samples.iter().map(|s| s.truth == c).collect();
    binary_auc(&scores, &positive)
}

/// Macro one-vs-others AUC; for two classes, the AUC of class 1. Degenerate
/// classes are skipped with a warning.
pub fn auc_ovr(dump: &PredictionDump) -> Result<f64> {
    dump.require_samples()?;
    if dump.num_classes == 2 {
        return class_auc(dump, 1).ok_or_else(|| Error::Data("AUC undefined: only one class present".into()));
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..dump.num_classes {
        match class_auc(dump, c) {
            Some(a) => {
                total += a;
                used += 1;
            }
            None => warn!("AUC: class {c} has no positive or no negative samples; skipped"),
        }
    }
    if used == 0 {
        return Err(Error::Data("AUC undefined for every class".into()));
    }
    Ok(total / used as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn per_class_scores(dump: &PredictionDump) -> Vec<ClassScores> {
    let m = confusion(dump);
    (0..dump.num_classes)
        .map(|c| {
            let tp = m[c][c] as f64;
            let predicted: usize = (0..dump.num_classes).map(|t| m[t][c]).sum();
            let actual: usize = m[c].iter().sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores { precision, recall, f1 }
        })
        .collect()
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(dump: &PredictionDump) -> Result<f64> {
    dump.require_samples()?;
    let scores = per_class_scores(dump);
    Ok(scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub acc: f64,
    pub auc: Option<f64>,
    pub f1: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub confusion: Vec<Vec<usize>>,
}

/// ACC, AUC and macro F1 with per-class detail. AUC is `None` when it is
/// undefined for the dump.
pub fn bundle(dump: &PredictionDump, class_names: &[String]) -> Result<MetricsBundle> {
    let acc = accuracy(dump)?;
    let f1 = macro_f1(dump)?;
    let auc = if dump.samples.iter().any(|s| s.truth != dump.samples[0].truth) {
        Some(auc_ovr(dump)?)
    } else {
        None
    };
    let per_class = per_class_scores(dump)
        .into_iter()
        .enumerate()
        .map(|(c, s)| {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            (
                name,
                ClassMetrics {
                    precision: s.precision,
                    recall: s.recall,
                    f1: s.f1,
                    auc: class_auc(dump, c),
                },
            )
        })
        .collect();
    Ok(MetricsBundle {
        acc,
        auc,
        f1,
        per_class,
        confusion: confusion(dump),
    })
}

/// True label of a pseudo bag: the highest-priority oracle label among its
/// members.
pub fn pseudo_bag_truth(ds: &Dataset, pb: &PseudoBag) -> Result<usize> {
    let parent = &ds.bags()[pb.parent];
    let labels = parent
        .oracle_instance_labels()
        .ok_or_else(|| Error::Oracle(format!("bag {} has no instance labels", parent.id())))?;
    Ok(ds
        .priority()
        .max_of(pb.members().iter().map(|j| labels[*j]))
        .expect("non-empty pseudo bag"))
}

/// Fraction of the given pseudo bags whose inherited label matches the
/// oracle truth; `None` for an empty set.
pub fn pse_acc_inherited<'a>(ds: &Dataset, pseudo: impl IntoIterator<Item = &'a PseudoBag>) -> Result<Option<f64>> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for pb in pseudo {
        total += 1;
        if pseudo_bag_truth(ds, pb)? == pb.inherited_label {
            hits += 1;
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseAcc {
    /// Over labeled pseudo bags only.
    pub labeled: Option<f64>,
    /// Over every surviving pseudo bag, scoring its inherited label.
    pub all: Option<f64>,
}

pub fn pse_acc(plan: &RoundPlan, ds: &Dataset) -> Result<PseAcc> {
    let labeled = pse_acc_inherited(ds, plan.labeled.iter().map(|i| &plan.pseudo_bags[*i]))?;
    let all = pse_acc_inherited(ds, plan.surviving())?;
    Ok(PseAcc { labeled, all })
}
