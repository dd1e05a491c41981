use ndarray::Axis;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DistillConfig, EncoderMode, Objective};
use super::kd::{cross_entropy_with_grad, total_loss, vanilla_kd_with_grad};
use super::optim::Sgd;
use crate::contrastive::{self, BankOwner, BankSide, MemoryBank, PairGrads};
use crate::data::{epoch_order, full_batches, Dataset};
use crate::encoder::{self, EncoderWeights, HolisticEmbedding, PoolingCache, PoolingMode, ProjectionCache, TagcnCache};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::graph::{self, AblationGraph, GraphMode};
use crate::linalg::Matrix;
use crate::models::{build_backbone, Backbone};
use crate::seed;

const EVAL_CHUNK: usize = 256;

/// Everything that changes during distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub student: Backbone,
    pub theta_teacher: EncoderWeights,
    pub theta_student: EncoderWeights,
    pub teacher_bank: Option<MemoryBank>,
    pub student_bank: Option<MemoryBank>,
    pub optimizer: Sgd,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub negatives_rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub kd: f64,
    pub hol: f64,
    pub total: f64,
    pub lr: f64,
    pub batch_acc: f64,
    pub student_grad_norm: f64,
    pub theta_teacher_grad_norm: f64,
    pub theta_student_grad_norm: f64,
    pub mi_estimate: Option<f64>,
    pub mean_positive_similarity: Option<f64>,
    pub max_anchor_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub kd: f64,
    pub hol: f64,
    pub total: f64,
    pub lr: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Teacher outputs over the training split, computed once since the teacher
/// is frozen and inputs are not augmented.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    pub features: Matrix,
    pub logits: Matrix,
}

enum EmbedCache {
    Gnn { cache: TagcnCache, adjacency: Matrix },
    Pool { pool: PoolingCache, proj: ProjectionCache, adjacency: Matrix },
}

impl EmbedCache {
    fn output(&self) -> &HolisticEmbedding {
        match self {
            EmbedCache::Gnn { cache, .. } => &cache.output,
            EmbedCache::Pool { proj, .. } => &proj.output,
        }
    }

    /// `(per-hop weight gradients, feature gradient)`.
    fn backward(&self, weights: &EncoderWeights, grad: &Matrix) -> (Vec<Matrix>, Matrix) {
        match self {
            EmbedCache::Gnn { cache, adjacency } => {
                let g = cache.backward(adjacency, weights, grad);
                (g.hops, g.features)
            }
            EmbedCache::Pool { pool, proj, adjacency } => {
                let (d_theta0, d_pooled) = proj.backward(weights, grad);
                let mut hops = weights.zeros_like();
                hops[0] = d_theta0;
                (hops, pool.backward(adjacency, &d_pooled))
            }
        }
    }
}

struct HolisticOutput {
    loss: f64,
    theta_teacher: Vec<Matrix>,
    theta_student: Vec<Matrix>,
    student_features: Matrix,
    mi_estimate: Option<f64>,
    mean_positive_similarity: f64,
    max_anchor_bound: Option<f64>,
    bank_rows: Option<(Matrix, Matrix)>,
}

fn l2(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn flatten_hops(hops: &[Matrix], scale: f64) -> Vec<Vec<f64>> {
    hops.iter()
        .map(|m| m.as_standard_layout().iter().map(|v| v * scale).collect())
        .collect()
}

/// Runs distillation of one student against a frozen teacher.
pub struct Trainer<'a> {
    config: &'a DistillConfig,
    data: &'a Dataset,
    teacher: &'a Backbone,
    teacher_train: TeacherOutputs,
    base_lr: f64,
    n_negatives: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a DistillConfig, data: &'a Dataset, teacher: &'a Backbone) -> Result<Self> {
        let n = data.train.len();
        config.validate(Some(n))?;
        if teacher.arch != config.teacher_arch {
            return Err(Error::Config(format!(
                "teacher checkpoint is a {} but the config names {}",
                teacher.arch, config.teacher_arch
            )));
        }
        if teacher.num_classes() != data.train.num_classes || teacher.in_channels != data.train.images.dim().1 {
            return Err(Error::Config(format!(
                "teacher expects {} channels / {} classes, data has {} / {}",
                teacher.in_channels,
                teacher.num_classes(),
                data.train.images.dim().1,
                data.train.num_classes
            )));
        }
        let out = teacher.forward_chunked(&data.train.images, EVAL_CHUNK);
        Ok(Self {
            config,
            data,
            teacher,
            teacher_train: TeacherOutputs {
                features: out.features,
                logits: out.logits,
            },
            base_lr: config.schedule.base_lr(&config.student_arch)?,
            n_negatives: config.negatives_for(n),
        })
    }

    pub fn config(&self) -> &DistillConfig {
        self.config
    }

    pub fn teacher(&self) -> &Backbone {
        self.teacher
    }

    pub fn teacher_outputs(&self) -> &TeacherOutputs {
        &self.teacher_train
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.train.len() / self.config.batch_size
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let c = self.config;
        let classes = self.data.train.num_classes;
        let channels = self.data.train.images.dim().1;
        let student = build_backbone(&c.student_arch, classes, channels, c.seed)?;
        let (dt, ds) = (self.teacher.feature_dim(), student.feature_dim());
        let theta_teacher = EncoderWeights::random(dt, c.embed_dim, c.hops, &mut seed::stream(c.seed, seed::INIT, 1));
        let theta_student = EncoderWeights::random(ds, c.embed_dim, c.hops, &mut seed::stream(c.seed, seed::INIT, 2));
        let n = self.data.train.len();
        let (teacher_bank, student_bank) = match c.objective {
            Objective::InfonceBank | Objective::GraphBank => {
                let (bt, bs) = if c.objective == Objective::InfonceBank {
                    (dt, ds)
                } else {
                    (c.embed_dim, c.embed_dim)
                };
                let tb = MemoryBank::random(n, bt, c.bank_momentum, BankOwner::Teacher, &mut seed::stream(c.seed, seed::BANK, 0))?;
                let sb = MemoryBank::random(n, bs, c.bank_momentum, BankOwner::Student, &mut seed::stream(c.seed, seed::BANK, 1))?;
                (Some(tb), Some(sb))
            }
            _ => (None, None),
        };
        let mut sizes: Vec<usize> = student.params().iter().map(|p| p.len()).collect();
        sizes.extend(theta_teacher.hops.iter().map(|m| m.len()));
        sizes.extend(theta_student.hops.iter().map(|m| m.len()));
        let optimizer = Sgd::new(c.schedule.momentum, c.schedule.weight_decay, &sizes);
        Ok(TrainState {
            student,
            theta_teacher,
            theta_student,
            teacher_bank,
            student_bank,
            optimizer,
            epoch: 0,
            step: 0,
            negatives_rng: seed::stream(c.seed, seed::NEGATIVES, 0),
        })
    }

    fn adjacency(&self, logits: &Matrix, stream_index: u64) -> Result<Matrix> {
        let b = logits.nrows();
        let c = self.config;
        match c.graph_mode {
            GraphMode::Knn => {
                let p = graph::softmax_with_temperature(&logits.view(), 1.0)?;
                graph::build_knn_adjacency(&p.view(), c.k)
            }
            GraphMode::Random => graph::build_ablation_adjacency(
                b,
                AblationGraph::Random,
                c.k,
                seed::derive(c.seed, seed::GRAPH, stream_index),
            ),
            GraphMode::FullyConnected => graph::build_ablation_adjacency(b, AblationGraph::FullyConnected, c.k, 0),
        }
    }

    fn embed(&self, adjacency: Matrix, features: &Matrix, weights: &EncoderWeights) -> Result<EmbedCache> {
        match self.config.encoder_mode {
            EncoderMode::Gnn => {
                let adjacency = graph::normalize_adjacency(&adjacency)?;
                let cache = encoder::tagcn_forward_cached(&adjacency, features, weights, self.config.hops)?;
                Ok(EmbedCache::Gnn { cache, adjacency })
            }
            mode => {
                let pm = if mode == EncoderMode::Sum {
                    PoolingMode::Sum
                } else {
                    PoolingMode::Mean
                };
                let pool = encoder::pooling_forward_cached(&adjacency, features, pm)?;
                let proj = encoder::project_features_cached(&pool.output.vectors, weights)?;
                Ok(EmbedCache::Pool { pool, proj, adjacency })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn holistic(
        &self,
        state: &mut TrainState,
        teacher_features: &Matrix,
        teacher_logits: &Matrix,
        student_features: &Matrix,
        student_logits: &Matrix,
        indices: &[usize],
    ) -> Result<HolisticOutput> {
        let c = self.config;
        let step = state.step as u64;
        let t_embed = self.embed(self.adjacency(teacher_logits, 2 * step)?, teacher_features, &state.theta_teacher)?;
        let s_embed = self.embed(self.adjacency(student_logits, 2 * step + 1)?, student_features, &state.theta_student)?;
        let (ht, hs) = (t_embed.output(), s_embed.output());

        let mut projector_grads = (None, None);
        let mut mi = None;
        let mut max_bound = None;
        let (loss, grads): (f64, PairGrads) = match c.objective {
            Objective::InfonceBatch => {
                let (r, g) = contrastive::infonce_in_batch_with_grad(ht, hs, c.tau_c)?;
                mi = Some(r.mi_lower_bound_estimate);
                max_bound = r.per_anchor_bounds.iter().copied().reduce(f64::max);
                (r.loss, g)
            }
            Objective::Mse => contrastive::mse_alignment_with_grad(&ht.vectors, &hs.vectors)?,
            Objective::Jsd => contrastive::jsd_in_batch_with_grad(ht, hs, c.tau_c)?,
            Objective::InfonceBank | Objective::GraphBank => {
                let n = self.data.train.len();
                let negatives = contrastive::sample_negatives(n, indices, self.n_negatives, &mut state.negatives_rng)?;
                let (tb, sb) = match (&state.teacher_bank, &state.student_bank) {
                    (Some(t), Some(s)) => (t, s),
                    _ => return Err(Error::Config("bank objective without memory banks".into())),
                };
                let out = if c.objective == Objective::InfonceBank {
                    contrastive::infonce_with_bank(
                        ht,
                        hs,
                        BankSide {
                            bank: tb,
                            projector: Some(&state.theta_teacher),
                        },
                        BankSide {
                            bank: sb,
                            projector: Some(&state.theta_student),
                        },
                        indices,
                        &negatives,
                        c.tau_c,
                    )?
                } else {
                    contrastive::graph_bank_variant(ht, hs, tb, sb, indices, &negatives, c.tau_c)?
                };
                mi = Some(out.result.mi_lower_bound_estimate);
                max_bound = out.result.per_anchor_bounds.iter().copied().reduce(f64::max);
                projector_grads = (out.teacher_projector, out.student_projector);
                (out.result.loss, out.grads)
            }
        };
        let mean_pos = ht
            .vectors
            .outer_iter()
            .zip(hs.vectors.outer_iter())
            .map(|(a, b)| a.dot(&b))
            .sum::<f64>()
            / ht.rows() as f64;

        let (mut theta_teacher, _) = t_embed.backward(&state.theta_teacher, &grads.teacher);
        let (mut theta_student, student_feature_grad) = s_embed.backward(&state.theta_student, &grads.student);
        if let Some(g) = projector_grads.0 {
            theta_teacher[0] += &g;
        }
        if let Some(g) = projector_grads.1 {
            theta_student[0] += &g;
        }
        let bank_rows = match c.objective {
            Objective::InfonceBank => Some((teacher_features.clone(), student_features.clone())),
            Objective::GraphBank => Some((ht.vectors.clone(), hs.vectors.clone())),
            _ => None,
        };
        Ok(HolisticOutput {
            loss,
            theta_teacher,
            theta_student,
            student_features: student_feature_grad,
            mi_estimate: mi,
            mean_positive_similarity: mean_pos,
            max_anchor_bound: max_bound,
            bank_rows,
        })
    }

    /// One optimizer step on the training items `indices` (a full batch).
    pub fn train_step(&self, state: &mut TrainState, indices: &[usize]) -> Result<StepMetrics> {
        let c = self.config;
        if indices.len() != c.batch_size {
            return Err(Error::InvalidArgument(format!(
                "batch of {} items, configured batch size is {}",
                indices.len(),
                c.batch_size
            )));
        }
        let lr = c.schedule.lr_at(self.base_lr, state.epoch);
        let (images, labels) = self.data.train.batch(indices);
        let (out, trace) = state.student.forward_trace(&images);
        if !out.features.iter().chain(out.logits.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "student outputs became non-finite at epoch {} step {} (learning rate {lr}); batch indices {:?}",
                state.epoch, state.step, indices
            )));
        }
        let t_features = self.teacher_train.features.select(Axis(0), indices);
        let t_logits = self.teacher_train.logits.select(Axis(0), indices);

        let (ce, g_ce) = cross_entropy_with_grad(&out.logits, &labels)?;
        let sp = graph::PredictionBatch::new(out.logits.clone(), c.tau_kd)?;
        let tp = graph::PredictionBatch::new(t_logits.clone(), c.tau_kd)?;
        let (kd, g_kd) = vanilla_kd_with_grad(&sp, &tp)?;
        let grad_logits = g_ce + &(g_kd * c.lambda);

        let hol_out = if c.beta > 0.0 {
            Some(self.holistic(state, &t_features, &t_logits, &out.features, &out.logits, indices)?)
        } else {
            None
        };
        let hol = hol_out.as_ref().map_or(0.0, |h| h.loss);
        let total = total_loss(ce, kd, hol, c.lambda, c.beta);
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at epoch {} step {} (ce {ce}, kd {kd}, hol {hol}); batch indices {:?}",
                state.epoch, state.step, indices
            )));
        }

        let feature_grad = hol_out.as_ref().map(|h| &h.student_features * c.beta);
        let mut grads = state.student.backward(&trace, &grad_logits, feature_grad.as_ref());
        let student_grad_norm = l2(grads.iter().flatten().copied());
        let (gt, gs) = match &hol_out {
            Some(h) => (flatten_hops(&h.theta_teacher, c.beta), flatten_hops(&h.theta_student, c.beta)),
            None => (
                flatten_hops(&state.theta_teacher.zeros_like(), 0.0),
                flatten_hops(&state.theta_student.zeros_like(), 0.0),
            ),
        };
        let theta_teacher_grad_norm = l2(gt.iter().flatten().copied());
        let theta_student_grad_norm = l2(gs.iter().flatten().copied());
        grads.extend(gt);
        grads.extend(gs);

        let mut params = state.student.params_mut();
        for m in state.theta_teacher.hops.iter_mut().chain(state.theta_student.hops.iter_mut()) {
            params.push(m.as_slice_mut().expect("standard layout"));
        }
        state.optimizer.step(lr, params, &grads);

        if let Some((t_rows, s_rows)) = hol_out.as_ref().and_then(|h| h.bank_rows.as_ref()) {
            if let Some(b) = state.teacher_bank.as_mut() {
                b.update(indices, t_rows)?;
            }
            if let Some(b) = state.student_bank.as_mut() {
                b.update(indices, s_rows)?;
            }
        }

        let correct = accuracy(&out.logits, &labels)?;
        let metrics = StepMetrics {
            epoch: state.epoch,
            step: state.step,
            ce,
            kd,
            hol,
            total,
            lr,
            batch_acc: correct,
            student_grad_norm,
            theta_teacher_grad_norm,
            theta_student_grad_norm,
            mi_estimate: hol_out.as_ref().and_then(|h| h.mi_estimate),
            mean_positive_similarity: hol_out.as_ref().map(|h| h.mean_positive_similarity),
            max_anchor_bound: hol_out.as_ref().and_then(|h| h.max_anchor_bound),
        };
        state.step += 1;
        Ok(metrics)
    }

    /// One pass over the shuffled training split followed by test evaluation.
    pub fn run_epoch(&self, state: &mut TrainState, on_step: &mut dyn FnMut(&StepMetrics)) -> Result<EpochMetrics> {
        let order = epoch_order(self.data.train.len(), self.config.seed, state.epoch);
        let batches = full_batches(&order, self.config.batch_size);
        let lr = self.config.schedule.lr_at(self.base_lr, state.epoch);
        let (mut ce, mut kd, mut hol, mut total, mut acc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for batch in &batches {
            let m = self.train_step(state, batch)?;
            ce += m.ce;
            kd += m.kd;
            hol += m.hol;
            total += m.total;
            acc += m.batch_acc;
            on_step(&m);
        }
        let n = batches.len().max(1) as f64;
        let epoch = state.epoch;
        state.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            step: state.step,
            ce: ce / n,
            kd: kd / n,
            hol: hol / n,
            total: total / n,
            lr,
            train_acc: acc / n,
            test_acc: evaluate(&state.student, &self.data.test.images, &self.data.test.labels)?,
        })
    }

    /// Trains until the configured epoch budget is spent. `on_epoch` sees the
    /// state after every epoch (for checkpointing); its error aborts training.
    pub fn train(
        &self,
        state: &mut TrainState,
        on_step: &mut dyn FnMut(&StepMetrics),
        on_epoch: &mut dyn FnMut(&TrainState, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut log = Vec::new();
        while state.epoch < self.config.schedule.epochs {
            let m = self.run_epoch(state, on_step)?;
            on_epoch(state, &m)?;
            log.push(m);
        }
        Ok(log)
    }
}

/// Test accuracy (percent) of a network on a labelled image set.
pub fn evaluate(net: &Backbone, images: &ndarray::Array4<f64>, labels: &[usize]) -> Result<f64> {
    accuracy(&net.logits(images, EVAL_CHUNK), labels)
}

/// Plain cross-entropy training of the teacher architecture.
pub fn pretrain_teacher(
    config: &DistillConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&Backbone, &EpochMetrics) -> Result<()>,
) -> Result<(Backbone, Vec<EpochMetrics>)> {
    let sched = &config.teacher_schedule;
    let n = data.train.len();
    if config.batch_size < 2 || config.batch_size > n {
        return Err(Error::Config(format!(
            "batch_size {} must lie in [2, {n}]",
            config.batch_size
        )));
    }
    let mut net = build_backbone(
        &config.teacher_arch,
        data.train.num_classes,
        data.train.images.dim().1,
        config.teacher_seed,
    )?;
    let base = sched.base_lr(&config.teacher_arch)?;
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut opt = Sgd::new(sched.momentum, sched.weight_decay, &sizes);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..sched.epochs {
        let lr = sched.lr_at(base, epoch);
        let order = epoch_order(n, config.teacher_seed, epoch);
        let batches = full_batches(&order, config.batch_size);
        let (mut ce_sum, mut acc_sum) = (0.0, 0.0);
        for batch in &batches {
            let (images, labels) = data.train.batch(batch);
            let (out, trace) = net.forward_trace(&images);
            let (ce, g) = cross_entropy_with_grad(&out.logits, &labels)?;
            if !ce.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite teacher loss at epoch {epoch} step {step}; batch indices {batch:?}"
                )));
            }
            let grads = net.backward(&trace, &g, None);
            opt.step(lr, net.params_mut(), &grads);
            ce_sum += ce;
            acc_sum += accuracy(&out.logits, &labels)?;
            step += 1;
        }
        let nb = batches.len().max(1) as f64;
        let m = EpochMetrics {
            epoch,
            step,
            ce: ce_sum / nb,
            kd: 0.0,
            hol: 0.0,
            total: ce_sum / nb,
            lr,
            train_acc: acc_sum / nb,
            test_acc: evaluate(&net, &data.test.images, &data.test.labels)?,
        };
        on_epoch(&net, &m)?;
        log.push(m);
    }
    Ok((net, log))
}
