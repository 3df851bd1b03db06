//! Branch BatchNorm/classifier heads, the classification and batch-hard
//! soft-margin triplet objectives, and SGD with cosine annealing and a
//! warm-up freeze.
//!
//! The triplet term sees the fused pyramid features before BatchNorm; the
//! classifier sees them after.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{PkSampler, VideoSample};
use crate::error::{Error, Result};
use crate::init::Sampler;
use crate::model::{BoundModel, PitModel};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// BatchNorm affine parameters and the linear classifier of one branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchHeadParams<T> {
    /// `[c]`
    pub bn_gain: T,
    /// `[c]`
    pub bn_bias: T,
    /// `[N_c, c]`
    pub classifier_weight: T,
    /// `[N_c]`
    pub classifier_bias: T,
}

impl<T: Copy> BranchHeadParams<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> BranchHeadParams<U> {
        BranchHeadParams {
            bn_gain: f(self.bn_gain),
            bn_bias: f(self.bn_bias),
            classifier_weight: f(self.classifier_weight),
            classifier_bias: f(self.classifier_bias),
        }
    }
}

impl BranchHeadParams<ParamId> {
    /// Unit gain, zero biases, classifier weights `N(0, 0.001^2)`.
    pub fn init(
        store: &mut ParamStore,
        sampler: &mut Sampler,
        branch: usize,
        c: usize,
        num_classes: usize,
    ) -> Self {
        let g = ParamGroup::Head;
        Self {
            bn_gain: store.add(format!("branch.{branch}.bn.gain"), Tensor::full(&[c], 1.0), g),
            bn_bias: store.add(format!("branch.{branch}.bn.bias"), Tensor::zeros(&[c]), g),
            classifier_weight: store.add(
                format!("branch.{branch}.classifier.weight"),
                sampler.normal_tensor(&[num_classes, c], 0.001),
                g,
            ),
            classifier_bias: store.add(
                format!("branch.{branch}.classifier.bias"),
                Tensor::zeros(&[num_classes]),
                g,
            ),
        }
    }
}

/// Running BatchNorm statistics of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(c: usize) -> Self {
        Self {
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    /// Folds in one batch's mean and biased variance; the running variance
    /// tracks the unbiased estimate.
    pub fn update(&mut self, mean: &[f64], biased_var: &[f64], batch: usize, momentum: f64) {
        let correction = if batch > 1 {
            batch as f64 / (batch - 1) as f64
        } else {
            1.0
        };
        for (r, &m) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(biased_var) {
            *r = (1.0 - momentum) * *r + momentum * v * correction;
        }
    }

    /// Evaluation-mode normalisation with the running statistics.
    pub fn normalize(&self, x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                (v - self.running_mean[j]) / libm::sqrt(self.running_var[j] + eps) * gain[j]
                    + bias[j]
            })
            .collect()
    }
}

/// Checks the batch-hard requirements: at least two identities and every
/// identity present at least twice.
pub fn validate_batch(labels: &[usize]) -> Result<()> {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let mut distinct = 0;
    for run in sorted.chunk_by(|a, b| a == b) {
        if run.len() < 2 {
            return Err(Error::InvalidBatch(format!(
                "label {} appears once; every anchor needs a positive",
                run[0]
            )));
        }
        distinct += 1;
    }
    if distinct < 2 {
        return Err(Error::InvalidBatch(
            "a batch needs at least two identities".into(),
        ));
    }
    Ok(())
}

/// Cross-entropy of every branch's logits `[B, N_c]` against the labels,
/// summed over branches and samples and scaled by `1 / (B * T * N_c)`.
pub fn classification_loss(tape: &mut Tape<'_>, logits: &[Var], labels: &[usize]) -> Result<Var> {
    let first = *logits.first().ok_or(Error::StructureMismatch)?;
    let shape = tape.shape(first).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "classification_loss",
            left: shape,
            right: vec![labels.len()],
        });
    }
    let (b, nc) = (shape[0], shape[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= nc) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: nc,
        });
    }
    let picks: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * nc + y).collect();
    let mut total: Option<Var> = None;
    for &z in logits {
        if tape.shape(z) != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "classification_loss",
                left: shape,
                right: tape.shape(z).to_vec(),
            });
        }
        let log_p = tape.log_softmax(z, 1)?;
        let picked = tape.gather(log_p, &picks)?;
        let s = tape.sum(picked);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let scale = -1.0 / (b * logits.len() * nc) as f64;
    Ok(tape.scale(total.expect("non-empty"), scale))
}

/// Hardest positive and hardest negative (flat indices into the `[B, B]`
/// distance matrix) for every anchor. Ties go to the lower index.
pub fn mine_hard(dist: &[f64], labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let b = labels.len();
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(b);
    for a in 0..b {
        let row = &dist[a * b..(a + 1) * b];
        let mut best_p: Option<usize> = None;
        let mut best_n: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if best_p.map_or(true, |p| row[j] > row[p]) {
                    best_p = Some(j);
                }
            } else if best_n.map_or(true, |n| row[j] < row[n]) {
                best_n = Some(j);
            }
        }
        pos.push(a * b + best_p.expect("validated batch"));
        neg.push(a * b + best_n.expect("validated batch"));
    }
    (pos, neg)
}

/// Batch-hard soft-margin triplet loss over branch features `[B, c]`,
/// `ln(1 + exp(d_ap - d_an))` averaged over anchors and branches.
pub fn triplet_loss(tape: &mut Tape<'_>, features: &[Var], labels: &[usize]) -> Result<Var> {
    validate_batch(labels)?;
    if features.is_empty() {
        return Err(Error::StructureMismatch);
    }
    let b = labels.len();
    let mut total: Option<Var> = None;
    for &x in features {
        if tape.shape(x).first() != Some(&b) {
            return Err(Error::ShapeMismatch {
                op: "triplet_loss",
                left: tape.shape(x).to_vec(),
                right: vec![b],
            });
        }
        let d = tape.pairwise_distance(x)?;
        let (pos, neg) = mine_hard(tape.data(d), labels);
        let dp = tape.gather(d, &pos)?;
        let dn = tape.gather(d, &neg)?;
        let gap = tape.sub(dp, dn)?;
        let terms = tape.softplus(gap);
        let s = tape.sum(terms);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let scale = 1.0 / (b * features.len()) as f64;
    Ok(tape.scale(total.expect("non-empty"), scale))
}

/// `L = L_cls + L_tri`.
pub fn total_loss(tape: &mut Tape<'_>, classification: Var, triplet: Var) -> Result<Var> {
    tape.add(classification, triplet)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub classification: f64,
    pub triplet: f64,
    pub total: f64,
}

/// Loss nodes of one training batch, plus each branch's batch statistics.
pub struct BatchGraph {
    pub classification: Var,
    pub triplet: Var,
    pub total: Var,
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

impl BatchGraph {
    pub fn values(&self, tape: &Tape<'_>) -> LossBreakdown {
        LossBreakdown {
            classification: tape.value(self.classification).item(),
            triplet: tape.value(self.triplet).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// Records the full training-mode forward pass of a batch.
pub fn batch_graph(
    tape: &mut Tape<'_>,
    model: &PitModel,
    bound: &BoundModel,
    batch: &[&VideoSample],
    labels: &[usize],
) -> Result<BatchGraph> {
    if batch.len() != labels.len() {
        return Err(Error::InvalidBatch(format!(
            "{} videos but {} labels",
            batch.len(),
            labels.len()
        )));
    }
    validate_batch(labels)?;
    let pyramids = batch
        .iter()
        .map(|v| model.forward_video(tape, bound, v))
        .collect::<Result<Vec<_>>>()?;
    let num_branches = model.num_branches();
    let mut features = Vec::with_capacity(num_branches);
    for t in 0..num_branches {
        let rows: Vec<Var> = pyramids.iter().map(|p| p.entries[t].1).collect();
        features.push(tape.concat_rows(&rows)?);
    }
    let triplet = triplet_loss(tape, &features, labels)?;
    let mut logits = Vec::with_capacity(num_branches);
    let mut batch_stats = Vec::with_capacity(num_branches);
    for (&x, head) in features.iter().zip(&bound.branches) {
        let (normed, mean, var) =
            tape.batch_norm(x, head.bn_gain, head.bn_bias, model.config.bn_eps)?;
        batch_stats.push((mean, var));
        let w = tape.transpose(head.classifier_weight)?;
        let z = tape.matmul(normed, w)?;
        logits.push(tape.add_row(z, head.classifier_bias)?);
    }
    let classification = classification_loss(tape, &logits, labels)?;
    let total = total_loss(tape, classification, triplet)?;
    Ok(BatchGraph {
        classification,
        triplet,
        total,
        batch_stats,
    })
}

/// Training-mode loss of a batch without gradients or state updates.
pub fn batch_loss(model: &PitModel, batch: &[&VideoSample], labels: &[usize]) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |_| false);
    Ok(batch_graph(&mut tape, model, &bound, batch, labels)?.values(&tape))
}

/// Loss and gradient of every parameter accepted by `trainable` (others
/// get `None`).
pub fn loss_and_gradients(
    model: &PitModel,
    batch: &[&VideoSample],
    labels: &[usize],
    trainable: impl Fn(&crate::params::Param) -> bool,
) -> Result<(LossBreakdown, Vec<Option<Vec<f64>>>, Vec<(Vec<f64>, Vec<f64>)>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable);
    let graph = batch_graph(&mut tape, model, &bound, batch, labels)?;
    let losses = graph.values(&tape);
    let grads = if tape.requires_grad(graph.total) {
        tape.backward(graph.total)?;
        bound.params.vars().iter().map(|&v| tape.take_grad(v)).collect()
    } else {
        vec![None; bound.params.vars().len()]
    };
    Ok((losses, grads, graph.batch_stats))
}

/// SGD with momentum (`v = mu v + g; p -= lr v`), cosine-annealed learning
/// rate and a warm-up phase in which only the branch heads train.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub base_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub freeze_epochs: usize,
    /// One velocity buffer per parameter, allocated on first update.
    pub velocity: Vec<Option<Vec<f64>>>,
    pub steps: u64,
}

impl Sgd {
    pub fn new(base_lr: f64, momentum: f64, epochs: usize, freeze_epochs: usize) -> Self {
        Self {
            base_lr,
            momentum,
            epochs,
            freeze_epochs,
            velocity: Vec::new(),
            steps: 0,
        }
    }

    /// `lr0 * (1 + cos(pi * epoch / epochs)) / 2`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.base_lr;
        }
        let t = epoch.min(self.epochs) as f64 / self.epochs as f64;
        self.base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
    }

    /// Whether parameters of `group` are updated during `epoch`.
    pub fn trains(&self, group: ParamGroup, epoch: usize) -> bool {
        epoch >= self.freeze_epochs || group == ParamGroup::Head
    }

    /// Applies one update. Parameters without a gradient, or frozen this
    /// epoch, are left untouched along with their velocity.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], epoch: usize) {
        let lr = self.lr_at(epoch);
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for (id, grad) in ids.into_iter().zip(grads) {
            let Some(g) = grad else { continue };
            if !self.trains(store.param(id).group, epoch) {
                continue;
            }
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
            let p = store.get_mut(id).data_mut();
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        self.steps += 1;
    }
}

/// One optimisation step on a batch, including running BatchNorm updates.
pub fn train_step(
    model: &mut PitModel,
    sgd: &mut Sgd,
    batch: &[&VideoSample],
    labels: &[usize],
    epoch: usize,
) -> Result<LossBreakdown> {
    let (losses, grads, stats) = {
        let sgd_ref = &*sgd;
        loss_and_gradients(model, batch, labels, |p| sgd_ref.trains(p.group, epoch))?
    };
    sgd.step(&mut model.store, &grads, epoch);
    let momentum = model.config.bn_momentum;
    for (bn, (mean, var)) in model.bn.iter_mut().zip(&stats) {
        bn.update(mean, var, batch.len(), momentum);
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub steps: Vec<LossBreakdown>,
}

impl EpochMetrics {
    pub fn mean_loss(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.total).sum::<f64>() / self.steps.len() as f64
    }
}

/// Runs one epoch of PK batches. `labels[i]` is the class label of
/// `videos[i]`.
pub fn train_epoch(
    model: &mut PitModel,
    videos: &[VideoSample],
    labels: &[usize],
    sampler: &mut PkSampler,
    sgd: &mut Sgd,
    epoch: usize,
) -> Result<EpochMetrics> {
    let mut steps = Vec::new();
    for batch in sampler.epoch() {
        let samples: Vec<&VideoSample> = batch.iter().map(|&i| &videos[i]).collect();
        let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        steps.push(train_step(model, sgd, &samples, &ys, epoch)?);
    }
    Ok(EpochMetrics {
        epoch,
        lr: sgd.lr_at(epoch),
        steps,
    })
}
