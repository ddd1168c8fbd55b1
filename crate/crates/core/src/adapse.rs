//! Adaptive pseudo-bag assignment.
//!
//! Per parent bag and round:
//!
//! 1. order instances by importance and interleave them into `M` pseudo bags;
//! 2. let the frozen teacher classify every pseudo bag;
//! 3. discard pseudo bags predicted as another class with confidence at or
//!    above `gamma_fix`;
//! 4. deal the discarded instances round-robin onto the remaining pseudo bags;
//! 5. re-classify, then label the confidently consistent pseudo bags
//!    (`gamma_ada`, at most `L_max` per parent) and leave the rest unlabeled.

use std::collections::BTreeMap;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bagcore::{Bag, Dataset, PseudoBag, Status};
use crate::error::{Error, Result};
use crate::iis::IisVector;
use crate::milmodel::MilParams;
use crate::seed;

/// Splits `bag` into `m` pseudo bags: the instance at sorted position `p`
/// goes to pseudo bag `p mod m`.
pub fn split_interleaved(parent: usize, bag: &Bag, order: &[usize], m: usize) -> Result<Vec<PseudoBag>> {
    let n = bag.num_instances();
    if m == 0 || m > n {
        return Err(Error::Split(format!("cannot split {n} instances into {m} pseudo bags")));
    }
    if order.len() != n {
        return Err(Error::Split(format!("order of length {} for {n} instances", order.len())));
    }
    let mut groups = vec![Vec::with_capacity(n / m + 1); m];
    for (pos, &j) in order.iter().enumerate() {
        groups[pos % m].push(j);
    }
    groups.into_iter().map(|g| PseudoBag::new(parent, bag, g)).collect()
}

/// Random inherit-all split: a shuffled order interleaved into `m` pseudo bags.
pub fn random_split(parent: usize, bag: &Bag, m: usize, rng: &mut seed::Rng) -> Result<Vec<PseudoBag>> {
    let mut order: Vec<usize> = (0..bag.num_instances()).collect();
    order.shuffle(rng);
    split_interleaved(parent, bag, &order, m.min(bag.num_instances()))
}

/// Annotates each pseudo bag with the teacher's label and confidence.
pub fn classify_pseudo_bags(teacher: &MilParams, bags: &[Bag], pseudo: &mut [PseudoBag]) -> Result<()> {
    for pb in pseudo.iter_mut() {
        classify_one(teacher, bags, pb)?;
    }
    Ok(())
}

fn classify_one(teacher: &MilParams, bags: &[Bag], pb: &mut PseudoBag) -> Result<()> {
    if pb.is_empty() {
        return Err(Error::Contract("cannot classify an empty pseudo bag".into()));
    }
    let pred = teacher.forward(&pb.features(&bags[pb.parent])?)?;
    pb.prediction = Some(pred.label);
    pb.confidence = Some(pred.confidence);
    Ok(())
}

fn classified(pb: &PseudoBag) -> Result<(usize, f64)> {
    match (pb.prediction, pb.confidence) {
        (Some(p), Some(c)) => Ok((p, c)),
        _ => Err(Error::Contract(format!("pseudo bag of {} is not classified", pb.parent_id))),
    }
}

fn group_by_parent(indices: impl IntoIterator<Item = usize>, pseudo: &[PseudoBag]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in indices {
        groups.entry(pseudo[i].parent).or_default().push(i);
    }
    groups
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiscardOutcome {
    pub discarded: Vec<usize>,
    pub remaining: Vec<usize>,
    /// Pseudo bags kept only because every sibling would otherwise go.
    pub retained: Vec<usize>,
}

/// Marks pseudo bags with `prediction ≠ inherited` and `confidence ≥ gamma_fix`
/// as discarded. Every parent keeps at least one pseudo bag: if all would be
/// discarded, the least confident one stays.
pub fn discard_mislabeled(pseudo: &mut [PseudoBag], gamma_fix: f64) -> Result<DiscardOutcome> {
    let mut out = DiscardOutcome::default();
    for (_, members) in group_by_parent(0..pseudo.len(), pseudo) {
        let mut doomed = Vec::new();
        let mut kept = Vec::new();
        for &i in &members {
            let (pred, conf) = classified(&pseudo[i])?;
            if pred != pseudo[i].inherited_label && conf >= gamma_fix {
                doomed.push(i);
            } else {
                kept.push(i);
            }
        }
        if kept.is_empty() {
            // every candidate is mislabeled here, so keep the least confident
            let keep = *doomed
                .iter()
                .min_by(|a, b| {
                    let ca = pseudo[**a].confidence.unwrap_or(0.0);
                    let cb = pseudo[**b].confidence.unwrap_or(0.0);
                    ca.total_cmp(&cb).then(a.cmp(b))
                })
                .expect("parent has pseudo bags");
            debug!("all pseudo bags of {} mislabeled; retaining one", pseudo[keep].parent_id);
            doomed.retain(|i| *i != keep);
            kept.push(keep);
            out.retained.push(keep);
        }
        for &i in &doomed {
            pseudo[i].set_status(Status::Discarded)?;
        }
        out.discarded.extend(doomed);
        out.remaining.extend(kept);
    }
    out.discarded.sort_unstable();
    out.remaining.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecycleEntry {
    pub parent_id: String,
    /// Index of the discarded pseudo bag.
    pub discarded: usize,
    /// `(instance, destination pseudo bag)` pairs.
    pub assignments: Vec<(usize, usize)>,
}

/// Deals the instances of each discarded pseudo bag, in importance order,
/// round-robin onto the remaining pseudo bags of the same parent. The cursor
/// starts at the first remaining pseudo bag and carries over between
/// discarded pseudo bags.
///
/// `ranks[j]` is instance `j`'s position in the parent's importance order.
pub fn recycle(pseudo: &mut [PseudoBag], discarded: &[usize], remaining: &[usize], ranks: &[usize]) -> Result<Vec<RecycleEntry>> {
    if discarded.is_empty() {
        return Ok(Vec::new());
    }
    if remaining.is_empty() {
        return Err(Error::Recycle("no remaining pseudo bag to receive instances".into()));
    }
    let parent = pseudo[remaining[0]].parent;
    if discarded.iter().chain(remaining).any(|i| pseudo[*i].parent != parent) {
        return Err(Error::Recycle("recycling across parents".into()));
    }
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); remaining.len()];
    let mut log = Vec::with_capacity(discarded.len());
    let mut cursor = 0;
    for &d in discarded {
        let mut members = pseudo[d].members().to_vec();
        members.sort_by_key(|j| ranks[*j]);
        let mut assignments = Vec::with_capacity(members.len());
        for j in members {
            incoming[cursor].push(j);
            assignments.push((j, remaining[cursor]));
            cursor = (cursor + 1) % remaining.len();
        }
        log.push(RecycleEntry {
            parent_id: pseudo[d].parent_id.clone(),
            discarded: d,
            assignments,
        });
    }
    for (slot, extra) in remaining.iter().zip(incoming) {
        if !extra.is_empty() {
            pseudo[*slot].absorb(&extra)?;
        }
    }
    Ok(log)
}

/// Labels remaining pseudo bags whose prediction matches the inherited label
/// with confidence `≥ gamma_ada`, keeping at most `l_max` per parent (most
/// confident first). Everything else remaining becomes unlabeled.
pub fn assign_labels(pseudo: &mut [PseudoBag], remaining: &[usize], gamma_ada: f64, l_max: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (_, members) in group_by_parent(remaining.iter().copied(), pseudo) {
        let mut qualifying = Vec::new();
        for &i in &members {
            let (pred, conf) = classified(&pseudo[i])?;
            if pred == pseudo[i].inherited_label && conf >= gamma_ada {
                qualifying.push(i);
            }
        }
        qualifying.sort_by(|a, b| {
            let ca = pseudo[*a].confidence.unwrap_or(0.0);
            let cb = pseudo[*b].confidence.unwrap_or(0.0);
            cb.total_cmp(&ca).then(a.cmp(b))
        });
        qualifying.truncate(l_max);
        for &i in &members {
            if qualifying.contains(&i) {
                pseudo[i].set_status(Status::Labeled)?;
                labeled.push(i);
            } else {
                pseudo[i].set_status(Status::Unlabeled)?;
                unlabeled.push(i);
            }
        }
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok((labeled, unlabeled))
}

/// Linear ramp from `gamma_0` at round 1 to `gamma_max` at round `total`.
pub fn gamma_ada_schedule(round: usize, total: usize, gamma_0: f64, gamma_max: f64) -> f64 {
    if total <= 1 {
        return gamma_0;
    }
    let r = round.clamp(1, total);
    gamma_0 + (gamma_max - gamma_0) * (r - 1) as f64 / (total - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaPseParams {
    pub pseudo_bags: usize,
    pub max_labels: usize,
    pub gamma_fix: f64,
    pub gamma_ada: f64,
}

/// One round of pseudo-bag assignment over the training bags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    pub gamma_fix: f64,
    pub gamma_ada: f64,
    /// Every pseudo bag of the round, discarded ones included.
    pub pseudo_bags: Vec<PseudoBag>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub recycle_log: Vec<RecycleEntry>,
    /// Pseudo bags saved by the keep-at-least-one rule.
    pub retained: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCounts {
    pub pseudo_bags: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub discarded: usize,
    pub recycled_instances: usize,
    pub retained: usize,
}

impl RoundPlan {
    /// Surviving pseudo bags: labeled then unlabeled.
    pub fn surviving(&self) -> impl Iterator<Item = &PseudoBag> {
        self.labeled.iter().chain(&self.unlabeled).map(|i| &self.pseudo_bags[*i])
    }

    pub fn counts(&self) -> PlanCounts {
        PlanCounts {
            pseudo_bags: self.pseudo_bags.len(),
            labeled: self.labeled.len(),
            unlabeled: self.unlabeled.len(),
            discarded: self
                .pseudo_bags
                .iter()
                .filter(|p| p.status() == Status::Discarded)
                .count(),
            recycled_instances: self.recycle_log.iter().map(|e| e.assignments.len()).sum(),
            retained: self.retained.len(),
        }
    }

    /// Checks that labeled and unlabeled are disjoint, cover every surviving
    /// pseudo bag, and that each listed parent's surviving members partition
    /// its instances exactly.
    pub fn check_partition(&self, bags: &[Bag], parents: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.pseudo_bags.len()];
        for &i in self.labeled.iter().chain(&self.unlabeled) {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("pseudo bag {i} listed twice")));
            }
        }
        for (i, pb) in self.pseudo_bags.iter().enumerate() {
            let alive = matches!(pb.status(), Status::Labeled | Status::Unlabeled);
            if alive != seen[i] {
                return Err(Error::Contract(format!("pseudo bag {i} status {:?} disagrees with sets", pb.status())));
            }
        }
        let mut cover: BTreeMap<usize, Vec<usize>> = parents.iter().map(|p| (*p, Vec::new())).collect();
        for pb in self.surviving() {
            cover
                .get_mut(&pb.parent)
                .ok_or_else(|| Error::Contract(format!("unexpected parent {}", pb.parent_id)))?
                .extend_from_slice(pb.members());
        }
        for (parent, mut members) in cover {
            members.sort_unstable();
            let n = bags[parent].num_instances();
            if members.len() != n || members.iter().enumerate().any(|(k, j)| k != *j) {
                return Err(Error::Contract(format!(
                    "surviving pseudo bags of {} do not partition its instances",
                    bags[parent].id()
                )));
            }
        }
        Ok(())
    }
}

/// Runs the full assignment for one parent and returns its pseudo bags along
/// with local discard/recycle bookkeeping.
struct ParentPlan {
    pseudo: Vec<PseudoBag>,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    recycle: Vec<RecycleEntry>,
    retained: Vec<usize>,
}

fn plan_parent(teacher: &MilParams, bags: &[Bag], parent: usize, iis: &IisVector, params: &AdaPseParams) -> Result<ParentPlan> {
    let bag = &bags[parent];
    let m = params.pseudo_bags.min(bag.num_instances());
    let mut pseudo = split_interleaved(parent, bag, &iis.order, m)?;
    classify_pseudo_bags(teacher, bags, &mut pseudo)?;
    let outcome = discard_mislabeled(&mut pseudo, params.gamma_fix)?;
    let recycle_log = recycle(&mut pseudo, &outcome.discarded, &outcome.remaining, &iis.ranks())?;
    let grown: Vec<usize> = {
        let mut g: Vec<usize> = recycle_log
            .iter()
            .flat_map(|e| e.assignments.iter().map(|(_, dest)| *dest))
            .collect();
        g.sort_unstable();
        g.dedup();
        g
    };
    for i in grown {
        classify_one(teacher, bags, &mut pseudo[i])?;
    }
    let (labeled, unlabeled) = assign_labels(&mut pseudo, &outcome.remaining, params.gamma_ada, params.max_labels)?;
    Ok(ParentPlan {
        pseudo,
        labeled,
        unlabeled,
        recycle: recycle_log,
        retained: outcome.retained,
    })
}

/// Builds a round plan for the bags at `parents`, using one importance vector
/// per parent (same order).
pub fn build_round_plan(
    round: usize,
    teacher: &MilParams,
    ds: &Dataset,
    parents: &[usize],
    iis: &[IisVector],
    params: &AdaPseParams,
) -> Result<RoundPlan> {
    if parents.len() != iis.len() {
        return Err(Error::Contract(format!("{} importance vectors for {} parents", iis.len(), parents.len())));
    }
    if params.pseudo_bags == 0 || params.max_labels == 0 {
        return Err(Error::Config("pseudo bag and label counts must be positive".into()));
    }
    let mut plan = RoundPlan {
        round,
        gamma_fix: params.gamma_fix,
        gamma_ada: params.gamma_ada,
        pseudo_bags: Vec::new(),
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        recycle_log: Vec::new(),
        retained: Vec::new(),
    };
    for (&parent, vector) in parents.iter().zip(iis) {
        let local = plan_parent(teacher, ds.bags(), parent, vector, params)?;
        let base = plan.pseudo_bags.len();
        plan.labeled.extend(local.labeled.iter().map(|i| i + base));
        plan.unlabeled.extend(local.unlabeled.iter().map(|i| i + base));
        plan.retained.extend(local.retained.iter().map(|i| i + base));
        plan.recycle_log.extend(local.recycle.into_iter().map(|mut e| {
            e.discarded += base;
            for a in &mut e.assignments {
                a.1 += base;
            }
            e
        }));
        plan.pseudo_bags.extend(local.pseudo);
    }
    Ok(plan)
}
