//! Student–teacher training over adaptive pseudo bags.
//!
//! A warm-up round fits the student on whole bags. Each following round
//! rebuilds the pseudo-bag plan with the frozen teacher, then takes one Adam
//! step per surviving pseudo bag:
//!
//! * labeled: cross-entropy of the student on the (merged) pseudo bag;
//! * unlabeled: squared distance between the teacher's probabilities on the
//!   plain pseudo bag and the student's on the merged one.
//!
//! The per-step objective is `½·L_con + ½·L_sup` with the absent term zero.
//! After every step the teacher follows the student by EMA.

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapse::{self, AdaPseParams, PlanCounts, RoundPlan};
use crate::bagcore::{Dataset, Split, Status};
use crate::error::{Error, Result};
use crate::iis::{self, IisMode, IisVector};
use crate::mergeup;
use crate::metrics::{self, DumpEntry, MetricsBundle, PredictionDump};
use crate::milmodel::{ema_update, MilParams, DEFAULT_HIDDEN_DIM};
use crate::seed;
use crate::tensor::{Matrix, Tape};

/// Probability floor applied before the logarithm in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IisSource {
    #[default]
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rounds: usize,
    /// Whole-bag epochs before the first round; no early stopping here.
    pub warmup_epochs: usize,
    pub epochs_per_round: usize,
    pub patience: usize,
    pub lr_initial: f64,
    pub lr_reduced: f64,
    /// Pseudo bags per parent (`M`).
    #[serde(alias = "m")]
    pub pseudo_bags: usize,
    /// Labeled pseudo bags allowed per parent (`L_max`).
    #[serde(alias = "l_max")]
    pub pseudo_labels: usize,
    pub gamma_fix: f64,
    pub gamma_0: f64,
    pub gamma_max: f64,
    pub ema_decay: f64,
    pub iis_mode: IisMode,
    /// Permutations per bag for Shapley scores; 0 means `200·N`.
    pub shapley_samples: usize,
    pub iis_source: IisSource,
    pub merge_supervised: bool,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 10,
            warmup_epochs: 40,
            epochs_per_round: 20,
            patience: 10,
            lr_initial: 3e-4,
            lr_reduced: 1e-4,
            pseudo_bags: 8,
            pseudo_labels: 4,
            gamma_fix: 0.95,
            gamma_0: 0.5,
            gamma_max: 0.95,
            ema_decay: 0.99,
            iis_mode: IisMode::Attention,
            shapley_samples: 0,
            iis_source: IisSource::Teacher,
            merge_supervised: true,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.rounds == 0 {
            return fail("rounds must be >= 1");
        }
        if self.warmup_epochs == 0 || self.epochs_per_round == 0 {
            return fail("warmup_epochs and epochs_per_round must be >= 1");
        }
        if self.patience == 0 {
            return fail("patience must be >= 1");
        }
        if !(self.lr_initial > 0.0 && self.lr_reduced > 0.0) {
            return fail("learning rates must be positive");
        }
        if self.pseudo_bags == 0 || self.pseudo_labels == 0 {
            return fail("pseudo_bags and pseudo_labels must be >= 1");
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be >= 1");
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.gamma_fix) && unit(self.gamma_0) && unit(self.gamma_max) && self.gamma_0 <= self.gamma_max) {
            return fail("thresholds must satisfy 0 <= gamma_0 <= gamma_max <= 1 and gamma_fix in [0, 1]");
        }
        if !unit(self.ema_decay) {
            return fail("ema_decay must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Squared Euclidean distance between two probability vectors.
pub fn consistency_loss(teacher_probs: &[f64], student_probs: &[f64]) -> Result<f64> {
    if teacher_probs.len() != student_probs.len() {
        return Err(Error::Dimension(format!(
            "consistency between {} and {} classes",
            teacher_probs.len(),
            student_probs.len()
        )));
    }
    Ok(teacher_probs.iter().zip(student_probs).map(|(t, s)| (t - s) * (t - s)).sum())
}

/// `−ln p[label]`, with `p[label]` floored at [`PROB_FLOOR`].
pub fn supervised_loss(student_probs: &[f64], label: usize) -> Result<f64> {
    let p = *student_probs
        .get(label)
        .ok_or_else(|| Error::Domain(format!("label {label} out of range")))?;
    if p < PROB_FLOOR {
        warn!("probability {p:e} at label {label} clamped to {PROB_FLOOR:e}");
    }
    Ok(-p.max(PROB_FLOOR).ln())
}

pub fn total_loss(l_con: f64, l_sup: f64) -> f64 {
    0.5 * l_con + 0.5 * l_sup
}

/// One pseudo bag's contribution to a training batch.
#[derive(Debug, Clone)]
pub enum TrainSample {
    /// Student input and its target class.
    Labeled { features: Matrix, label: usize },
    /// Student input and the teacher's probabilities on the plain pseudo bag.
    Unlabeled { features: Matrix, teacher_probs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub supervised: f64,
    pub consistency: f64,
    /// Gradient of `total` for every parameter, in declared order.
    pub gradient: Vec<f64>,
}

/// `½·mean(L_con) + ½·mean(L_sup)` over a batch and its gradient with respect
/// to the student's parameters. An empty half contributes zero.
///
/// Only the student is recorded on the tape; teacher probabilities enter as
/// constants.
pub fn loss_and_gradient(student: &MilParams, batch: &[TrainSample]) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let params = student.leaves(&mut tape);
    let mut sup_terms = Vec::new();
    let mut con_terms = Vec::new();
    for sample in batch {
        match sample {
            TrainSample::Labeled { features, label } => {
                let out = student.forward_with(&mut tape, params, features)?;
                let p = tape.pick(out.probs, 0, *label)?;
                if tape.value(p).data()[0] < PROB_FLOOR {
                    warn!("probability at label {label} clamped to {PROB_FLOOR:e}");
                }
                let p = tape.clamp_min(p, PROB_FLOOR);
                let lp = tape.log(p)?;
                sup_terms.push(tape.scale(lp, -1.0)?);
            }
            TrainSample::Unlabeled { features, teacher_probs } => {
                let out = student.forward_with(&mut tape, params, features)?;
                let target = tape.leaf(Matrix::row_vector(teacher_probs.clone())?);
                let diff = tape.sub(out.probs, target)?;
                let sq = tape.elementwise_mul(diff, diff)?;
                con_terms.push(tape.sum(sq)?);
            }
        }
    }
    let mean = |tape: &mut Tape, terms: &[crate::tensor::NodeId]| -> Result<Option<crate::tensor::NodeId>> {
        let Some((first, rest)) = terms.split_first() else {
            return Ok(None);
        };
        let mut acc = *first;
        for t in rest {
            acc = tape.add(acc, *t)?;
        }
        Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)?))
    };
    let sup = mean(&mut tape, &sup_terms)?;
    let con = mean(&mut tape, &con_terms)?;
    let scalar = |tape: &Tape, n: Option<crate::tensor::NodeId>| n.map_or(0.0, |n| tape.value(n).data()[0]);
    let supervised = scalar(&tape, sup);
    let consistency = scalar(&tape, con);
    let loss = match (sup, con) {
        (Some(s), Some(c)) => {
            let both = tape.add(s, c)?;
            tape.scale(both, 0.5)?
        }
        (Some(x), None) | (None, Some(x)) => tape.scale(x, 0.5)?,
        (None, None) => return Err(Error::Contract("empty training batch".into())),
    };
    let total = tape.value(loss).data()[0];
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss is {total}")));
    }
    let mut grads = tape.backward(loss)?;
    let mut gradient = Vec::with_capacity(student.num_parameters());
    for (node, m) in params.iter().zip(student.tensors()) {
        match grads.take(*node) {
            Some(g) => gradient.extend_from_slice(g.data()),
            None => gradient.extend(std::iter::repeat_n(0.0, m.data().len())),
        }
    }
    Ok(LossBreakdown {
        total,
        supervised,
        consistency,
        gradient,
    })
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(num_parameters: usize) -> Self {
        Adam {
            m: vec![0.0; num_parameters],
            v: vec![0.0; num_parameters],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut MilParams, gradient: &[f64], lr: f64) -> Result<()> {
        if gradient.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for {} parameters",
                gradient.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut k = 0;
        for tensor in params.tensors_mut() {
            for p in tensor.data_mut() {
                let g = gradient[k];
                self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * g;
                self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * g * g;
                *p -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
                if !p.is_finite() {
                    return Err(Error::Numeric(format!("parameter {k} diverged")));
                }
                k += 1;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagPrediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsBundle,
    pub predictions: Vec<BagPrediction>,
}

/// Whole-bag predictions and metrics for one split. Never mutates `model`.
pub fn evaluate(model: &MilParams, ds: &Dataset, split: Split) -> Result<Evaluation> {
    let indices = ds.indices(split);
    if indices.is_empty() {
        return Err(Error::Data(format!("split {} is empty", split.as_str())));
    }
    let mut predictions = Vec::with_capacity(indices.len());
    for i in indices {
        let bag = ds.bag(i);
        let pred = model.forward(&bag.features())?;
        predictions.push(BagPrediction {
            id: bag.id().to_string(),
            label: bag.label(),
            predicted: pred.label,
            probs: pred.probs,
        });
    }
    let dump = PredictionDump::new(
        ds.num_classes(),
        predictions
            .iter()
            .map(|p| DumpEntry {
                truth: p.label,
                predicted: p.predicted,
                probs: p.probs.clone(),
            })
            .collect(),
    )?;
    Ok(Evaluation {
        metrics: metrics::bundle(&dump, ds.priority().names())?,
        predictions,
    })
}

/// Mean whole-bag cross-entropy over a split.
pub fn split_loss(model: &MilParams, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in indices {
        let bag = ds.bag(i);
        let pred = model.forward(&bag.features())?;
        total += supervised_loss(&pred.probs, bag.label())?;
    }
    Ok(total / indices.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean `L_sup` over labeled steps.
    pub sup_loss: f64,
    /// Mean `L_con` over unlabeled steps.
    pub con_loss: f64,
    pub sup_steps: usize,
    pub con_steps: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupRecord {
    pub epochs: Vec<EpochRecord>,
    pub restored_epoch: usize,
    pub val_metrics: MetricsBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub gamma_fix: f64,
    pub gamma_ada: f64,
    pub plan: PlanCounts,
    /// Pseudo-label accuracy of the labeled set; needs oracle labels.
    pub pse_acc: Option<f64>,
    /// Same, over every surviving pseudo bag's inherited label.
    pub pse_acc_all: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Epoch whose weights the round ended with (best validation loss).
    pub restored_epoch: usize,
    pub val_metrics: MetricsBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub warmup: WarmupRecord,
    pub rounds: Vec<RoundRecord>,
    pub best_round: usize,
    pub best_val_auc: Option<f64>,
    pub best_checkpoint: String,
    pub final_test: Option<MetricsBundle>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub plans: Vec<RoundPlan>,
    /// Teacher snapshot of the best round, at checkpoint precision.
    pub best: MilParams,
    /// Final teacher.
    pub last: MilParams,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Early stopping and the one-time learning-rate drop.
struct Schedule {
    lr: f64,
    reduced: bool,
    lr_reduced: f64,
    patience: usize,
}

impl Schedule {
    /// Updates state after an epoch; returns true when training should stop.
    fn after_epoch(&mut self, since_best: usize) -> bool {
        if !self.reduced && since_best >= (self.patience / 2).max(1) {
            info!("validation plateau: learning rate {} -> {}", self.lr, self.lr_reduced);
            self.lr = self.lr_reduced;
            self.reduced = true;
        }
        since_best >= self.patience
    }
}

struct Trainer<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    student: MilParams,
    teacher: Option<MilParams>,
    adam: Adam,
    schedule: Schedule,
}

struct EpochRun {
    records: Vec<EpochRecord>,
    stopped_early: bool,
    best_epoch: usize,
}

/// One step of the epoch loop: the plan index of a pseudo bag.
#[derive(Debug, Clone, Copy)]
enum Step {
    Whole(usize),
    Pseudo(usize),
}

impl<'a> Trainer<'a> {
    fn validation_model(&self) -> &MilParams {
        self.teacher.as_ref().unwrap_or(&self.student)
    }

    fn apply(&mut self, sample: TrainSample) -> Result<(f64, f64, f64)> {
        let out = loss_and_gradient(&self.student, std::slice::from_ref(&sample))?;
        self.adam.step(&mut self.student, &out.gradient, self.schedule.lr)?;
        if let Some(teacher) = &self.teacher {
            self.teacher = Some(ema_update(teacher, &self.student, self.cfg.ema_decay)?);
        }
        Ok((out.total, out.supervised, out.consistency))
    }

    fn sample_for(&self, step: Step, plan: Option<&RoundPlan>, rng: &mut seed::Rng) -> Result<TrainSample> {
        let ds = self.ds;
        let (plan, idx) = match (step, plan) {
            (Step::Whole(i), _) => {
                let bag = ds.bag(i);
                return Ok(TrainSample::Labeled {
                    features: bag.features(),
                    label: bag.label(),
                });
            }
            (Step::Pseudo(idx), Some(plan)) => (plan, idx),
            (Step::Pseudo(_), None) => return Err(Error::Contract("pseudo step without a plan".into())),
        };
        let pool = &plan.pseudo_bags;
        let pb = &pool[idx];
        let own = pb.features(&ds.bags()[pb.parent])?;
        let candidates: Vec<usize> = plan.labeled.iter().chain(&plan.unlabeled).copied().collect();
        let merge_wanted = pb.status() == Status::Unlabeled || self.cfg.merge_supervised;
        let partner = if merge_wanted {
            mergeup::select_partner(idx, pool, &candidates, ds.priority(), rng)
        } else {
            None
        };
        match pb.status() {
            Status::Labeled => match partner {
                Some(b) => {
                    let merged = mergeup::merge(ds.bags(), pool, idx, b, ds.priority())?;
                    Ok(TrainSample::Labeled {
                        features: merged.features,
                        label: merged.label,
                    })
                }
                None => Ok(TrainSample::Labeled {
                    features: own,
                    label: pb.inherited_label,
                }),
            },
            Status::Unlabeled => {
                let teacher = self.teacher.as_ref().ok_or_else(|| Error::Contract("no teacher".into()))?;
                let teacher_probs = teacher.forward(&own)?.probs;
                let features = match partner {
                    Some(b) => mergeup::merge(ds.bags(), pool, idx, b, ds.priority())?.features,
                    None => own,
                };
                Ok(TrainSample::Unlabeled { features, teacher_probs })
            }
            other => Err(Error::Contract(format!("training on a {other:?} pseudo bag"))),
        }
    }

    /// Runs up to `budget` epochs, then rolls student and teacher back to the
    /// best-validation epoch. With `early_stop`, also stops once validation
    /// stalls for `patience` epochs.
    fn run_epochs(
        &mut self,
        stream: u64,
        steps: &[Step],
        plan: Option<&RoundPlan>,
        budget: usize,
        early_stop: bool,
    ) -> Result<EpochRun> {
        let mut records = Vec::new();
        let mut best = f64::INFINITY;
        let mut best_epoch = 0;
        let mut snapshot = None;
        let mut since_best = 0;
        let mut stopped_early = false;
        for epoch in 1..=budget {
            let epoch_key = stream * 10_000 + epoch as u64;
            let mut order = steps.to_vec();
            order.shuffle(&mut seed::sub_rng(self.cfg.seed, "shuffle", epoch_key));
            let mut merge_rng = seed::sub_rng(self.cfg.seed, "merge-partner", epoch_key);
            let lr = self.schedule.lr;
            let (mut total, mut sup, mut con) = (0.0, 0.0, 0.0);
            let (mut sup_steps, mut con_steps) = (0, 0);
            for step in order {
                let sample = self.sample_for(step, plan, &mut merge_rng)?;
                let labeled = matches!(sample, TrainSample::Labeled { .. });
                let (t, s, c) = self.apply(sample)?;
                total += t;
                if labeled {
                    sup += s;
                    sup_steps += 1;
                } else {
                    con += c;
                    con_steps += 1;
                }
            }
            let val_loss = split_loss(self.validation_model(), self.ds, &self.val_idx)?;
            records.push(EpochRecord {
                epoch,
                lr,
                train_loss: total / steps.len().max(1) as f64,
                sup_loss: if sup_steps > 0 { sup / sup_steps as f64 } else { 0.0 },
                con_loss: if con_steps > 0 { con / con_steps as f64 } else { 0.0 },
                sup_steps,
                con_steps,
                val_loss,
            });
            if val_loss < best {
                best = val_loss;
                best_epoch = epoch;
                since_best = 0;
                snapshot = Some((self.student.clone(), self.teacher.clone()));
            } else {
                since_best += 1;
            }
            if early_stop && self.schedule.after_epoch(since_best) {
                stopped_early = true;
                break;
            }
        }
        if let Some((student, teacher)) = snapshot {
            self.student = student;
            self.teacher = teacher;
        }
        Ok(EpochRun {
            records,
            stopped_early,
            best_epoch,
        })
    }

    fn importance(&self, round: usize) -> Result<Vec<IisVector>> {
        let model = match self.cfg.iis_source {
            IisSource::Teacher => self.validation_model(),
            IisSource::Student => &self.student,
        };
        self.train_idx
            .iter()
            .map(|&i| {
                let bag = self.ds.bag(i);
                let s = seed::sub_seed(self.cfg.seed, "shapley", (round as u64) << 32 | i as u64);
                iis::estimate(model, bag, self.cfg.iis_mode, self.cfg.shapley_samples, s)
            })
            .collect()
    }
}

fn better(candidate: (Option<f64>, f64), incumbent: (Option<f64>, f64)) -> bool {
    let key = |(auc, loss): (Option<f64>, f64)| (auc.unwrap_or(f64::NEG_INFINITY), -loss);
    let (ca, cl) = key(candidate);
    let (ia, il) = key(incumbent);
    ca > ia || (ca == ia && cl > il)
}

/// Trains a student/teacher pair on the dataset's train split, validating on
/// the val split and reporting the best round's teacher on the test split.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    let student = MilParams::init(
        ds.dim(),
        cfg.hidden_dim,
        ds.num_classes(),
        seed::sub_seed(cfg.seed, "init", 0),
    )?;
    let mut t = Trainer {
        ds,
        cfg,
        adam: Adam::new(student.num_parameters()),
        student,
        teacher: None,
        schedule: Schedule {
            lr: cfg.lr_initial,
            reduced: false,
            lr_reduced: cfg.lr_reduced,
            patience: cfg.patience,
        },
        train_idx,
        val_idx,
    };

    info!("warm-up on {} whole bags", t.train_idx.len());
    let whole: Vec<Step> = t.train_idx.iter().map(|i| Step::Whole(*i)).collect();
    let run = t.run_epochs(0, &whole, None, cfg.warmup_epochs, false)?;
    let warmup = WarmupRecord {
        epochs: run.records,
        restored_epoch: run.best_epoch,
        val_metrics: evaluate(&t.student, ds, Split::Val)?.metrics,
    };

    t.teacher = Some(t.student.clone());
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut plans = Vec::with_capacity(cfg.rounds);
    let mut best: Option<(usize, MilParams, (Option<f64>, f64))> = None;
    for round in 1..=cfg.rounds {
        let gamma_ada = adapse::gamma_ada_schedule(round, cfg.rounds, cfg.gamma_0, cfg.gamma_max);
        let iis = t.importance(round)?;
        let params = AdaPseParams {
            pseudo_bags: cfg.pseudo_bags,
            max_labels: cfg.pseudo_labels,
            gamma_fix: cfg.gamma_fix,
            gamma_ada,
        };
        let teacher = t.teacher.clone().expect("teacher initialized");
        let plan = adapse::build_round_plan(round, &teacher, ds, &t.train_idx, &iis, &params)?;
        if plan.labeled.is_empty() && plan.unlabeled.is_empty() {
            return Err(Error::Config(format!("round {round} produced no trainable pseudo bags")));
        }
        let counts = plan.counts();
        info!(
            "round {round}: gamma_ada {gamma_ada:.3}, {} labeled, {} unlabeled, {} discarded",
            counts.labeled, counts.unlabeled, counts.discarded
        );
        let pse = if ds.has_oracle() {
            Some(metrics::pse_acc(&plan, ds)?)
        } else {
            None
        };
        let steps: Vec<Step> = plan.labeled.iter().chain(&plan.unlabeled).map(|i| Step::Pseudo(*i)).collect();
        let run = t.run_epochs(round as u64, &steps, Some(&plan), cfg.epochs_per_round, true)?;

        let teacher = t.teacher.as_ref().expect("teacher initialized");
        let val = evaluate(teacher, ds, Split::Val)?;
        let val_loss = split_loss(teacher, ds, &t.val_idx)?;
        let key = (val.metrics.auc, val_loss);
        if best.as_ref().is_none_or(|(_, _, k)| better(key, *k)) {
            best = Some((round, teacher.to_storage_precision(), key));
        }
        rounds.push(RoundRecord {
            round,
            gamma_fix: cfg.gamma_fix,
            gamma_ada,
            plan: counts,
            pse_acc: pse.and_then(|p| p.labeled),
            pse_acc_all: pse.and_then(|p| p.all),
            epochs: run.records,
            stopped_early: run.stopped_early,
            restored_epoch: run.best_epoch,
            val_metrics: val.metrics,
        });
        plans.push(plan);
    }

    let (best_round, best_params, (best_val_auc, _)) = best.expect("at least one round");
    let final_test = if ds.indices(Split::Test).is_empty() {
        None
    } else {
        Some(evaluate(&best_params, ds, Split::Test)?.metrics)
    };
    let last = t.teacher.take().expect("teacher initialized");
    Ok(TrainOutcome {
        report: TrainReport {
            config: cfg.clone(),
            warmup,
            rounds,
            best_round,
            best_val_auc,
            best_checkpoint: BEST_CHECKPOINT.into(),
            final_test,
        },
        plans,
        best: best_params,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milmodel::init_params;
    use rand::Rng;

    #[test]
    fn consistency_examples() {
        assert_eq!(consistency_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(consistency_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert!(consistency_loss(&[1.0], &[0.5, 0.5]).is_err());
        let mut rng = seed::rng(1);
        for _ in 0..100 {
            let p: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut direct = 0.0;
            for k in 0..4 {
                direct += (p[k] - q[k]).powi(2);
            }
            assert!((consistency_loss(&p, &q).unwrap() - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn supervised_examples() {
        assert!(supervised_loss(&[1.0, 1e-300], 0).unwrap().abs() < 1e-15);
        assert!((supervised_loss(&[0.5, 0.5], 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(supervised_loss(&[1.0, 0.0], 1).unwrap(), -(1e-12f64).ln());
        let mut rng = seed::rng(2);
        for _ in 0..100 {
            let p: f64 = rng.random_range(0.01..0.99);
            assert_eq!(supervised_loss(&[p, 1.0 - p], 0).unwrap(), -p.ln());
        }
    }

    #[test]
    fn total_loss_is_equal_weighted() {
        assert_eq!(total_loss(0.2, 0.4), 0.30000000000000004);
        assert_eq!(total_loss(0.2, 0.4), 0.5 * 0.2 + 0.5 * 0.4);
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        let mut rng = seed::rng(3);
        for _ in 0..100 {
            let x: f64 = rng.random_range(0.0..10.0);
            assert_eq!(total_loss(x, x), x);
        }
    }

    #[test]
    fn batch_loss_matches_plain_losses() {
        let p = init_params(3, 5, 2, 4).unwrap();
        let mut rng = seed::rng(5);
        let mut bag = |n: usize| {
            Matrix::new(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (a, b, c) = (bag(4), bag(3), bag(5));
        let teacher = vec![0.8, 0.2];
        let batch = vec![
            TrainSample::Labeled { features: a.clone(), label: 1 },
            TrainSample::Labeled { features: b.clone(), label: 0 },
            TrainSample::Unlabeled { features: c.clone(), teacher_probs: teacher.clone() },
        ];
        let out = loss_and_gradient(&p, &batch).unwrap();
        let sup = (supervised_loss(&p.forward(&a).unwrap().probs, 1).unwrap()
            + supervised_loss(&p.forward(&b).unwrap().probs, 0).unwrap())
            / 2.0;
        let con = consistency_loss(&teacher, &p.forward(&c).unwrap().probs).unwrap();
        assert!((out.supervised - sup).abs() < 1e-12);
        assert!((out.consistency - con).abs() < 1e-12);
        assert!((out.total - total_loss(con, sup)).abs() < 1e-12);
        assert_eq!(out.gradient.len(), p.num_parameters());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { rounds: 0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { lr_initial: 0.0, ..Default::default() },
            TrainConfig { pseudo_bags: 0, ..Default::default() },
            TrainConfig { gamma_0: 0.9, gamma_max: 0.5, ..Default::default() },
            TrainConfig { ema_decay: 1.2, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn config_json_uses_snake_case_keys() {
        let v = serde_json::to_value(TrainConfig::default()).unwrap();
        assert_eq!(v["rounds"], 10);
        assert_eq!(v["patience"], 10);
        assert_eq!(v["lr_initial"], 3e-4);
        assert_eq!(v["iis_mode"], "attention");
        let cfg: TrainConfig = serde_json::from_str(r#"{"m": 3, "l_max": 2}"#).unwrap();
        assert_eq!((cfg.pseudo_bags, cfg.pseudo_labels), (3, 2));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn schedule_halves_patience_for_lr_and_stops_at_patience() {
        let mut s = Schedule { lr: 3e-4, reduced: false, lr_reduced: 1e-4, patience: 10 };
        assert!(!s.after_epoch(4));
        assert_eq!(s.lr, 3e-4);
        assert!(!s.after_epoch(5));
        assert_eq!(s.lr, 1e-4);
        assert!(s.after_epoch(10));
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut p = init_params(2, 2, 2, 0).unwrap();
        let before = p.flatten();
        let mut adam = Adam::new(p.num_parameters());
        let g = vec![1.0; p.num_parameters()];
        adam.step(&mut p, &g, 0.1).unwrap();
        for (a, b) in p.flatten().iter().zip(&before) {
            assert!((b - a - 0.1).abs() < 1e-6);
        }
    }
}
