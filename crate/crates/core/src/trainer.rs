//! Source pretraining and the alternating adapt/refine loop.
//!
//! One adaptation epoch trains the encoder (and trainable prototypes) on
//! PK-sampled target batches against the current soft pseudo labels, then
//! re-extracts all target features and re-solves the transport problem for
//! every group. Clustering is redone every `recluster_every` epochs.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{make_groups, GroupSpec, HardLabeling};
use crate::data::{IdentityDataset, Split};
use crate::encoder::{backward, encode, forward, EncoderParams, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::eval::{cluster_metrics, retrieval_metrics, EvalReport, RetrievalSet};
use crate::label_transfer::{
    harden, log_joint_probs, sinkhorn_log, uniform_polytope, SinkhornConfig, TransportPolytope,
};
use crate::losses::{
    source_supervised_loss, total_loss, triplet_batch_hard, weighted_contrastive, LinearHead, LossParts, LossWeights,
};
use crate::memory_bank::{BankEntry, MemoryBank};
use crate::numerics::{dot, Matrix};
use crate::prototypes::{PrototypeGroup, PrototypeMode};

/// All hyperparameters of pretraining and adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Learning rate is multiplied by `lr_gamma` every `lr_step_epochs`.
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub epochs_pretrain: usize,
    pub pretrain_iters_per_epoch: usize,
    pub adapt_epochs: usize,
    pub iters_per_epoch: usize,
    pub adapt_lr: f64,
    /// P identities per batch.
    pub identities_per_batch: usize,
    /// K instances per identity.
    pub instances_per_identity: usize,
    pub weights: LossWeights,
    pub sinkhorn: SinkhornConfig,
    pub tau: f64,
    pub groups: GroupSpec,
    pub prototype_mode: PrototypeMode,
    pub prototype_lr: f64,
    /// Whether soft labels are refined by optimal transport at all.
    pub refine: bool,
    /// Iterations between refinements; 0 means once per epoch.
    pub refresh_every: usize,
    /// Epochs between re-clusterings; 0 disables re-clustering.
    pub recluster_every: usize,
    /// 0 means 8x the batch size.
    pub bank_capacity: usize,
    /// Group whose labels split bank pairs.
    pub bank_group: usize,
    /// Alternate a source-supervised step with every target step.
    pub interleave_source: bool,
    /// Optional per-class row marginal for refinement (applied to groups
    /// with a matching class count). Empty means equipartition.
    pub row_marginal: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hidden_dim: 64,
            embed_dim: 32,
            optimizer: OptimizerKind::Adam,
            lr: 0.00035,
            lr_step_epochs: 10,
            lr_gamma: 0.1,
            epochs_pretrain: 30,
            pretrain_iters_per_epoch: 20,
            adapt_epochs: 10,
            iters_per_epoch: 40,
            adapt_lr: 0.00035,
            identities_per_batch: 4,
            instances_per_identity: 4,
            weights: LossWeights::default(),
            sinkhorn: SinkhornConfig::default(),
            tau: 0.05,
            groups: GroupSpec::kmeans(Vec::new()),
            prototype_mode: PrototypeMode::Hybrid,
            prototype_lr: 0.00035,
            refine: true,
            refresh_every: 0,
            recluster_every: 5,
            bank_capacity: 0,
            bank_group: 0,
            interleave_source: true,
            row_marginal: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.instances_per_identity
    }

    pub fn effective_bank_capacity(&self) -> usize {
        if self.bank_capacity == 0 {
            8 * self.batch_size()
        } else {
            self.bank_capacity
        }
    }

    pub fn effective_refresh_every(&self) -> usize {
        if self.refresh_every == 0 {
            self.iters_per_epoch.max(1)
        } else {
            self.refresh_every
        }
    }

    /// Learning rate for `epoch` under the step schedule.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        if self.lr_step_epochs == 0 {
            return base;
        }
        base * self.lr_gamma.powi((epoch / self.lr_step_epochs) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities_per_batch == 0 || self.instances_per_identity == 0 {
            return Err(Error::InvalidConfig("batch counts must be positive".into()));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("encoder dims must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        if self.effective_bank_capacity() < self.batch_size() {
            return Err(Error::InvalidConfig("bank capacity smaller than a batch".into()));
        }
        self.weights.validate()?;
        self.sinkhorn.validate()?;
        self.groups.validate()
    }

    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        vec![input_dim, self.hidden_dim, self.embed_dim]
    }
}

/// `P` distinct identities with `K` samples each, identity-major. Identities
/// with fewer than `K` samples are sampled with replacement.
pub fn pk_sample(labels: &[usize], p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::TooFewIdentities {
            needed: p,
            got: by_id.len(),
        });
    }
    let ids: Vec<&Vec<usize>> = by_id.values().collect();
    let mut batch = Vec::with_capacity(p * k);
    for pick in sample_indices(rng, ids.len(), p).into_iter() {
        let members = ids[pick];
        if members.len() >= k {
            batch.extend(sample_indices(rng, members.len(), k).into_iter().map(|j| members[j]));
        } else {
            batch.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub encoder: EncoderParams,
    pub head: LinearHead,
}

/// Supervised source training: cross-entropy over a linear head plus
/// batch-hard triplet, on PK batches.
pub fn pretrain_source(source: &IdentityDataset, cfg: &TrainConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    let (labels, n_classes) = source.dense_ids();
    let mut counts = vec![0usize; n_classes];
    for &l in &labels {
        counts[l] += 1;
    }
    if n_classes < cfg.identities_per_batch {
        return Err(Error::InsufficientData(format!(
            "{n_classes} source identities, batch needs {}",
            cfg.identities_per_batch
        )));
    }
    if counts.iter().any(|&c| c < 2) {
        return Err(Error::InsufficientData(
            "every source identity needs >= 2 samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = EncoderParams::xavier(&cfg.encoder_dims(source.dim()), &mut rng)?;
    let head = LinearHead::new(n_classes, cfg.embed_dim, &mut rng);
    let mut trainer = SourceStepper::new(encoder, head, cfg.optimizer);
    for epoch in 0..cfg.epochs_pretrain {
        let lr = cfg.lr_at(cfg.lr, epoch);
        for _ in 0..cfg.pretrain_iters_per_epoch {
            let idx = pk_sample(&labels, cfg.identities_per_batch, cfg.instances_per_identity, &mut rng)?;
            trainer.step(source, &labels, &idx, lr, cfg.weights.triplet_margin)?;
        }
    }
    Ok(PretrainOutput {
        encoder: trainer.encoder,
        head: trainer.head,
    })
}

/// Encoder + source head with their optimizer states.
struct SourceStepper {
    encoder: EncoderParams,
    head: LinearHead,
    enc_opt: Optimizer,
    head_opt: Optimizer,
}

impl SourceStepper {
    fn new(encoder: EncoderParams, head: LinearHead, kind: OptimizerKind) -> Self {
        let enc_opt = Optimizer::new(kind, encoder.len());
        let head_opt = Optimizer::new(kind, head.flat_len());
        Self {
            encoder,
            head,
            enc_opt,
            head_opt,
        }
    }

    /// One source-supervised step. Returns the loss.
    fn step(&mut self, data: &IdentityDataset, labels: &[usize], idx: &[usize], lr: f64, margin: f64) -> Result<f64> {
        let x = data.inputs.select_rows(idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (f, tape) = forward(&self.encoder, &x)?;
        let logits = self.head.logits(&f)?;
        let out = source_supervised_loss(&f, &logits, &y, margin)?;
        let (gw, gb, gf_head) = self.head.backward(&f, &out.grad_logits);
        let mut gf = out.grad_features;
        gf.add_scaled(&gf_head, 1.0)?;
        let grads = backward(&tape, &gf)?;
        self.enc_opt.step(self.encoder.values_mut(), grads.values(), lr);
        let flat = LinearHead::flatten_grads(&gw, &gb);
        let opt = &mut self.head_opt;
        self.head.apply(|p| opt.step(p, &flat, lr));
        Ok(out.loss)
    }
}

/// Soft labels of one group over the target training set.
#[derive(Debug, Clone)]
pub struct GroupAssignment {
    /// `K x N_active` joint assignment; columns sum to `1/N_active`.
    pub q: Matrix,
    /// Target sample index of each column (noise samples have no column).
    pub members: Vec<usize>,
    /// Column of each target sample, if any.
    pub column_of: Vec<Option<usize>>,
}

impl GroupAssignment {
    fn from_hard(lab: &HardLabeling) -> Self {
        let members: Vec<usize> = (0..lab.labels.len()).filter(|&i| lab.labels[i].is_some()).collect();
        let mut column_of = vec![None; lab.labels.len()];
        let n = members.len();
        let mut q = Matrix::zeros(lab.k, n);
        for (c, &i) in members.iter().enumerate() {
            column_of[i] = Some(c);
            q[(lab.labels[i].unwrap(), c)] = 1.0 / n as f64;
        }
        Self { q, members, column_of }
    }

    /// Hard label per target sample (`None` for noise).
    pub fn hard_labels(&self) -> Vec<Option<usize>> {
        let hard = harden(&self.q);
        self.column_of.iter().map(|c| c.map(|c| hard[c])).collect()
    }

    /// Target distribution for sample `i` (column rescaled to sum 1).
    fn distribution(&self, i: usize) -> Option<Vec<f64>> {
        let c = self.column_of[i]?;
        let col = self.q.column(c);
        let s: f64 = col.iter().sum();
        Some(col.iter().map(|v| v / s).collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineStats {
    pub iters: usize,
    pub newton_steps: usize,
    pub marginal_err: f64,
    pub converged: bool,
}

/// Everything that evolves during adaptation.
#[derive(Debug, Clone)]
pub struct AdaptState {
    pub encoder: EncoderParams,
    pub source_head: Option<LinearHead>,
    pub groups: Vec<PrototypeGroup>,
    pub assignments: Vec<GroupAssignment>,
    pub bank: MemoryBank,
    pub epoch: usize,
    pub iter: usize,
    rng: ChaCha8Rng,
    enc_opt: Optimizer,
    head_opt: Option<Optimizer>,
    proto_opts: Vec<Optimizer>,
}

impl AdaptState {
    /// Hard labels of group `m` per target training sample.
    pub fn hard_labels(&self, m: usize) -> Vec<Option<usize>> {
        self.assignments[m].hard_labels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub iter: usize,
    pub l_tri: f64,
    pub l_g: f64,
    pub l_wcl: f64,
    pub total: f64,
}

/// Per-epoch summary. Epoch 0 is the state right after the initial
/// clustering, before any target training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub nmi: f64,
    pub ari: f64,
    pub purity: f64,
    pub noise_rate: f64,
    pub mean_loss: f64,
    pub refine_iters: usize,
    pub newton_steps: usize,
    pub marginal_err: f64,
}

impl EpochMetrics {
    pub fn report(&self) -> EvalReport {
        EvalReport {
            map: self.map,
            top1: self.top1,
            top5: self.top5,
            top10: self.top10,
            nmi: self.nmi,
            ari: self.ari,
            purity: self.purity,
            noise_rate: self.noise_rate,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdaptHistory {
    pub epochs: Vec<EpochMetrics>,
    pub losses: Vec<LossRecord>,
    pub refinements: Vec<RefineStats>,
}

/// Pretrains on the source split (if `pretrained` is `None`) and adapts to
/// the target training split.
pub fn adapt(
    source: &IdentityDataset,
    target: &IdentityDataset,
    cfg: &TrainConfig,
    pretrained: Option<&PretrainOutput>,
) -> Result<(AdaptState, AdaptHistory)> {
    cfg.validate()?;
    let owned;
    let pre = match pretrained {
        Some(p) => p,
        None => {
            owned = pretrain_source(source, cfg)?;
            &owned
        }
    };
    Adapter::new(source, target, cfg, pre)?.run()
}

/// Evaluates an encoder on a target dataset: retrieval on query/gallery,
/// clustering metrics of `pseudo_labels` (or a fresh k-means with the true
/// identity count when `None`) on the training split.
pub fn evaluate(
    encoder: &EncoderParams,
    target: &IdentityDataset,
    pseudo_labels: Option<&[Option<usize>]>,
    seed: u64,
) -> Result<EvalReport> {
    let query = target.subset(Split::TargetQuery);
    let gallery = target.subset(Split::TargetGallery);
    let train = target.subset(Split::TargetTrain);
    let qf = encode(encoder, &query.inputs)?;
    let gf = encode(encoder, &gallery.inputs)?;
    let r = retrieval_metrics(
        RetrievalSet {
            features: &qf,
            ids: &query.ids,
            cameras: &query.cameras,
        },
        RetrievalSet {
            features: &gf,
            ids: &gallery.ids,
            cameras: &gallery.cameras,
        },
    )?;
    let c = match pseudo_labels {
        Some(l) => cluster_metrics(l, &train.ids)?,
        None => {
            let (_, n_ids) = train.dense_ids();
            let f = encode(encoder, &train.inputs)?;
            let lab = crate::clustering::kmeans(&f, n_ids, seed, 100)?;
            cluster_metrics(&lab.labels, &train.ids)?
        }
    };
    Ok(EvalReport::new(r, c))
}

struct Adapter<'a> {
    cfg: &'a TrainConfig,
    source: &'a IdentityDataset,
    source_labels: Vec<usize>,
    target_full: &'a IdentityDataset,
    target: IdentityDataset,
    state: AdaptState,
    history: AdaptHistory,
}

impl<'a> Adapter<'a> {
    fn new(
        source: &'a IdentityDataset,
        target_full: &'a IdentityDataset,
        cfg: &'a TrainConfig,
        pre: &PretrainOutput,
    ) -> Result<Self> {
        let target = target_full.subset(Split::TargetTrain);
        if target.is_empty() {
            return Err(Error::InsufficientData("no target_train samples".into()));
        }
        if cfg.bank_group
            >= cfg
                .groups
                .resolved_k_list(target.len())
                .len()
                .max(cfg.groups.dbscan_eps_list.len())
        {
            return Err(Error::InvalidConfig("bank_group out of range".into()));
        }
        let (source_labels, _) = source.dense_ids();
        let encoder = pre.encoder.clone();
        let enc_opt = Optimizer::new(cfg.optimizer, encoder.len());
        let head_opt = cfg
            .interleave_source
            .then(|| Optimizer::new(cfg.optimizer, pre.head.flat_len()));
        let state = AdaptState {
            encoder,
            source_head: cfg.interleave_source.then(|| pre.head.clone()),
            groups: Vec::new(),
            assignments: Vec::new(),
            bank: MemoryBank::new(cfg.effective_bank_capacity()),
            epoch: 0,
            iter: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9)),
            enc_opt,
            head_opt,
            proto_opts: Vec::new(),
        };
        Ok(Self {
            cfg,
            source,
            source_labels,
            target_full,
            target,
            state,
            history: AdaptHistory::default(),
        })
    }

    fn run(mut self) -> Result<(AdaptState, AdaptHistory)> {
        self.recluster()?;
        self.record_epoch(0, f64::NAN, RefineStats::default())?;
        let refresh = self.cfg.effective_refresh_every();
        for epoch in 1..=self.cfg.adapt_epochs {
            self.state.epoch = epoch;
            if self.cfg.recluster_every > 0 && epoch > 1 && (epoch - 1) % self.cfg.recluster_every == 0 {
                self.recluster()?;
            }
            let lr = self.cfg.lr_at(self.cfg.adapt_lr, epoch - 1);
            let proto_lr = self.cfg.lr_at(self.cfg.prototype_lr, epoch - 1);
            let mut loss_sum = 0.0;
            let mut last_refine = RefineStats::default();
            for it in 0..self.cfg.iters_per_epoch {
                if self.cfg.interleave_source {
                    self.source_step(lr)?;
                }
                let rec = self.target_step(epoch, it, lr, proto_lr)?;
                loss_sum += rec.total;
                self.history.losses.push(rec);
                self.state.iter += 1;
                if self.cfg.refine && self.state.iter.is_multiple_of(refresh) {
                    last_refine = self.refine_all()?;
                    self.history.refinements.push(last_refine);
                }
            }
            let mean = loss_sum / self.cfg.iters_per_epoch.max(1) as f64;
            self.record_epoch(epoch, mean, last_refine)?;
        }
        Ok((self.state, self.history))
    }

    fn target_features(&self) -> Result<Matrix> {
        encode(&self.state.encoder, &self.target.inputs)
    }

    /// Clusters current target features and resets prototypes and soft labels.
    fn recluster(&mut self) -> Result<()> {
        let f = self.target_features()?;
        let seed = self.cfg.seed.wrapping_add(1000 * self.state.epoch as u64);
        let labelings = make_groups(&f, &self.cfg.groups, seed)?;
        let mut groups = Vec::with_capacity(labelings.len());
        for (m, lab) in labelings.iter().enumerate() {
            if lab.k == 0 {
                return Err(Error::InsufficientData(format!(
                    "group {m} clustering produced no clusters"
                )));
            }
            groups.push(PrototypeGroup::new(
                lab.centroids.clone(),
                self.cfg.tau,
                self.cfg.prototype_mode,
                m,
            )?);
        }
        self.state.proto_opts = groups
            .iter()
            .map(|g| Optimizer::new(self.cfg.optimizer, g.centers.as_slice().len()))
            .collect();
        self.state.groups = groups;
        self.state.assignments = labelings.iter().map(GroupAssignment::from_hard).collect();
        self.relabel_bank();
        Ok(())
    }

    fn relabel_bank(&mut self) {
        let per_group: Vec<Vec<Option<usize>>> = self.state.assignments.iter().map(|a| a.hard_labels()).collect();
        let ids: HashMap<usize, Vec<Option<usize>>> = (0..self.target.len())
            .map(|i| (i, per_group.iter().map(|g| g[i]).collect()))
            .collect();
        self.state.bank.relabel(&ids);
    }

    /// Re-solves the transport problem for every group on fresh features.
    fn refine_all(&mut self) -> Result<RefineStats> {
        let f = self.target_features()?;
        let mut stats = RefineStats {
            converged: true,
            ..Default::default()
        };
        for m in 0..self.state.groups.len() {
            let members = self.state.assignments[m].members.clone();
            let fm = f.select_rows(&members);
            if self.cfg.prototype_mode == PrototypeMode::Nonparametric {
                let labels: Vec<Option<usize>> = {
                    let hard = harden(&self.state.assignments[m].q);
                    hard.into_iter().map(Some).collect()
                };
                self.state.groups[m] = self.state.groups[m].update_nonparametric(&fm, &labels)?;
            }
            let group = &self.state.groups[m];
            let poly = self.polytope(group.k(), members.len())?;
            let log_p = log_joint_probs(&fm, &group.centers, group.tau)?;
            let out = sinkhorn_log(&log_p, &poly, &self.cfg.sinkhorn)?;
            if let Err(e) = out.check() {
                log::warn!("group {m}: {e}");
            }
            stats.iters = stats.iters.max(out.iters);
            stats.newton_steps = stats.newton_steps.max(out.newton_steps);
            stats.marginal_err = stats.marginal_err.max(out.marginal_err);
            stats.converged &= out.converged;
            self.state.assignments[m].q = out.q;
        }
        self.relabel_bank();
        Ok(stats)
    }

    fn polytope(&self, k: usize, n: usize) -> Result<TransportPolytope> {
        if self.cfg.row_marginal.len() == k {
            TransportPolytope::with_row_weights(&self.cfg.row_marginal, n)
        } else {
            Ok(uniform_polytope(k, n))
        }
    }

    fn source_step(&mut self, lr: f64) -> Result<()> {
        let idx = pk_sample(
            &self.source_labels,
            self.cfg.identities_per_batch,
            self.cfg.instances_per_identity,
            &mut self.state.rng,
        )?;
        let mut stepper = SourceStepper {
            encoder: std::mem::replace(&mut self.state.encoder, EncoderParams::zeros(&[1, 1])?),
            head: self.state.source_head.take().expect("source head"),
            enc_opt: std::mem::replace(&mut self.state.enc_opt, Optimizer::Sgd),
            head_opt: self.state.head_opt.take().expect("head optimizer"),
        };
        let res = stepper.step(
            self.source,
            &self.source_labels,
            &idx,
            lr,
            self.cfg.weights.triplet_margin,
        );
        self.state.encoder = stepper.encoder;
        self.state.source_head = Some(stepper.head);
        self.state.enc_opt = stepper.enc_opt;
        self.state.head_opt = Some(stepper.head_opt);
        res.map(|_| ())
    }

    fn target_step(&mut self, epoch: usize, it: usize, lr: f64, proto_lr: f64) -> Result<LossRecord> {
        let cfg = self.cfg;
        let primary = self.state.hard_labels(0);
        let labeled: Vec<usize> = (0..primary.len()).filter(|&i| primary[i].is_some()).collect();
        let labels: Vec<usize> = labeled.iter().map(|&i| primary[i].unwrap()).collect();
        let picks = pk_sample(
            &labels,
            cfg.identities_per_batch,
            cfg.instances_per_identity,
            &mut self.state.rng,
        )?;
        let idx: Vec<usize> = picks.iter().map(|&j| labeled[j]).collect();
        let b = idx.len();

        let x = self.target.inputs.select_rows(&idx);
        let (f, tape) = forward(&self.state.encoder, &x)?;
        let mut grad = Matrix::zeros(b, f.cols());
        let mut parts = LossParts::default();

        // multi-group soft cross-entropy
        let mut proto_grads = Vec::with_capacity(self.state.groups.len());
        if cfg.weights.group > 0.0 {
            for (m, group) in self.state.groups.iter().enumerate() {
                let asg = &self.state.assignments[m];
                let rows: Vec<usize> = (0..b).filter(|&r| asg.column_of[idx[r]].is_some()).collect();
                if rows.is_empty() {
                    proto_grads.push(None);
                    continue;
                }
                let mut q = Matrix::zeros(group.k(), rows.len());
                for (c, &r) in rows.iter().enumerate() {
                    for (k, v) in asg.distribution(idx[r]).unwrap().into_iter().enumerate() {
                        q[(k, c)] = v;
                    }
                }
                let fm = f.select_rows(&rows);
                let (loss, gc, gf) = group.grad_parametric(&fm, &q)?;
                parts.group += loss;
                for (c, &r) in rows.iter().enumerate() {
                    for (g, v) in grad.row_mut(r).iter_mut().zip(gf.row(c)) {
                        *g += cfg.weights.group * v;
                    }
                }
                proto_grads.push(Some(gc));
            }
        }

        // batch-hard triplet on primary hard labels
        if cfg.weights.triplet > 0.0 {
            let batch_labels: Vec<usize> = idx.iter().map(|&i| primary[i].unwrap()).collect();
            let tri = triplet_batch_hard(&f, &batch_labels, cfg.weights.triplet_margin)?;
            parts.triplet = tri.loss;
            grad.add_scaled(&tri.grad_features, cfg.weights.triplet)?;
        }

        // weighted contrastive against the memory bank
        let bank_labels = self.state.hard_labels(cfg.bank_group);
        if cfg.weights.wcl > 0.0 && !self.state.bank.is_empty() {
            let scale = cfg.weights.wcl / b as f64;
            for r in 0..b {
                let Some(label) = bank_labels[idx[r]] else { continue };
                let (split, pf, nf) = self
                    .state
                    .bank
                    .split_with_features(f.row(r), label, idx[r], cfg.bank_group);
                let out = weighted_contrastive(&split, cfg.weights.wcl_margin, cfg.weights.wcl_scale);
                parts.wcl += out.loss / b as f64;
                let row = grad.row_mut(r);
                for (g, feat) in out.grad_pos.iter().zip(&pf).chain(out.grad_neg.iter().zip(&nf)) {
                    for (acc, v) in row.iter_mut().zip(feat.iter()) {
                        *acc += scale * g * v;
                    }
                }
            }
        }

        let total = total_loss(&parts, &cfg.weights);
        if !total.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "non-finite loss at epoch {epoch} iter {it}"
            )));
        }
        let grads = backward(&tape, &grad)?;
        self.state
            .enc_opt
            .step(self.state.encoder.values_mut(), grads.values(), lr);

        if cfg.prototype_mode.trains() {
            for (m, gc) in proto_grads.into_iter().enumerate() {
                let Some(gc) = gc else { continue };
                let g: Vec<f64> = gc.as_slice().iter().map(|v| v * cfg.weights.group).collect();
                let opt = &mut self.state.proto_opts[m];
                self.state.groups[m].apply_step(|p| opt.step(p, &g, proto_lr))?;
            }
        }

        let entries = (0..b)
            .map(|r| BankEntry {
                feature: f.row(r).to_vec(),
                labels: self.state.assignments.iter().map(|_| None).collect(),
                instance_id: idx[r],
            })
            .collect::<Vec<_>>();
        let mut entries = entries;
        for (m, a) in self.state.assignments.iter().enumerate() {
            let hard = a.hard_labels();
            for (e, &i) in entries.iter_mut().zip(&idx) {
                e.labels[m] = hard[i];
            }
        }
        self.state.bank.enqueue_batch(entries)?;

        Ok(LossRecord {
            epoch,
            iter: it,
            l_tri: parts.triplet,
            l_g: parts.group,
            l_wcl: parts.wcl,
            total,
        })
    }

    fn record_epoch(&mut self, epoch: usize, mean_loss: f64, refine: RefineStats) -> Result<()> {
        let labels = self.state.hard_labels(0);
        let report = evaluate(&self.state.encoder, self.target_full, Some(&labels), self.cfg.seed)?;
        self.history.epochs.push(EpochMetrics {
            epoch,
            map: report.map,
            top1: report.top1,
            top5: report.top5,
            top10: report.top10,
            nmi: report.nmi,
            ari: report.ari,
            purity: report.purity,
            noise_rate: report.noise_rate,
            mean_loss,
            refine_iters: refine.iters,
            newton_steps: refine.newton_steps,
            marginal_err: refine.marginal_err,
        });
        log::info!(
            "epoch {epoch}: mAP {:.4} top1 {:.4} NMI {:.4} noise {:.4} loss {:.4}",
            report.map,
            report.top1,
            report.nmi,
            report.noise_rate,
            mean_loss
        );
        Ok(())
    }
}

/// Cosine similarity statistics between samples of the same and of
/// different identities.
pub fn intra_inter_similarity(features: &Matrix, ids: &[usize]) -> (f64, f64) {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..features.rows() {
        for j in i + 1..features.rows() {
            let s = dot(features.row(i), features.row(j));
            if ids[i] == ids[j] {
                intra += s;
                ni += 1;
            } else {
                inter += s;
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}
