//! Dual-objective training loop.
//!
//! Each step runs one shared forward pass, derives per-sample weights
//! from the detached loss values, then backs a single combined scalar
//! through the graph: the weighted task loss reaches only the encoder
//! and task head (the branch hangs off a stop-gradient), and the
//! weighted SVAE loss reaches only the branch. One Adam instance per
//! parameter set applies the updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ExperimentConfig, Method};
use crate::datagen::{Dataset, Labels, TaskKind, TrainView};
use crate::losses::{
    bce_multilabel, ce_pixelwise, focal_multilabel, kl_gaussian, mse_features, svae_loss,
    SvaeLossWeights,
};
use crate::metrics::{multilabel_f1, overall_accuracy};
use crate::model::{ModelDims, SvaeModel};
use crate::reweight::{AlphaSchedule, BatchWeights, DecayGranularity, ReweightError};
use crate::tensor::{AdamState, NodeId, Tape, Tensor, TensorError};

// Independent deterministic streams derived from the run seed.
const SHUFFLE_STREAM: u64 = 0xD1B5_4A32_D192_ED03;
const EPSILON_STREAM: u64 = 0xA076_1D64_78BD_642F;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Reweight(#[from] ReweightError),
    #[error("numerical failure at epoch {epoch}, batch {batch}: {source}")]
    Aborted {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<TrainError>,
        /// Text dump of the failing step for post-mortem.
        diagnostics: String,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One row of the per-batch weight audit trail.
#[derive(Debug, Clone)]
pub struct AuditRow {
    pub epoch: usize,
    pub batch: usize,
    pub sample_id: usize,
    pub main_loss: f64,
    pub svae_loss: f64,
    pub gap: f64,
    pub weight: f64,
    pub is_noisy: Option<bool>,
}

/// Per-epoch summary; validation never feeds back into updates.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub alpha: f64,
    pub weighted_main: f64,
    pub unweighted_main: f64,
    pub weighted_svae: Option<f64>,
    pub unweighted_svae: Option<f64>,
    pub val_metric: f64,
    pub mean_weight_noisy: Option<f64>,
    pub mean_weight_clean: Option<f64>,
}

/// Evaluation scores; `primary` is macro-F1 for multilabel and overall
/// accuracy for segmentation.
#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub primary: f64,
    pub micro_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub overall_accuracy: Option<f64>,
}

/// Everything a finished run hands back to the harness.
#[derive(Debug)]
pub struct RunOutcome {
    pub reports: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub test: EvalMetrics,
    pub checkpoint: Vec<(String, Tensor)>,
    pub audit: Vec<AuditRow>,
}

/// What one training step produced.
pub struct StepRecord {
    pub sample_ids: Vec<usize>,
    pub weights: Vec<f64>,
    pub batch_weights: Option<BatchWeights>,
    pub objective_main: f64,
    pub objective_svae: Option<f64>,
    pub unweighted_main: f64,
    pub unweighted_svae: Option<f64>,
}

pub struct Trainer {
    pub model: SvaeModel,
    cfg: ExperimentConfig,
    adam_main: AdamState,
    adam_svae: AdamState,
    schedule: AlphaSchedule,
    shuffle_rng: ChaCha8Rng,
    epsilon_rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, task: TaskKind, input_dim: usize) -> Result<Self> {
        let dims = ModelDims {
            input_dim,
            hidden_dims: cfg.model.hidden_dims.clone(),
            feature_dim: cfg.model.feature_dim,
            latent_dim: cfg.model.latent_dim,
            num_classes: match task {
                TaskKind::Multilabel => cfg.dataset.multilabel.num_classes,
                TaskKind::Segmentation => cfg.dataset.segmentation.num_classes,
            },
        };
        let model = SvaeModel::init(task, dims, cfg.method.uses_branch(), cfg.seed)?;
        let adam = AdamState::new(cfg.train.learning_rate).with_betas(
            cfg.train.beta1,
            cfg.train.beta2,
            cfg.train.adam_epsilon,
        );
        let schedule = AlphaSchedule::new(cfg.reweight.alpha_floor, cfg.train.epochs)?;
        Ok(Trainer {
            model,
            cfg: cfg.clone(),
            adam_main: adam.clone(),
            adam_svae: adam,
            schedule,
            shuffle_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM),
            epsilon_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ EPSILON_STREAM),
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn alpha_for(&self, batch: usize, batches_per_epoch: usize) -> Result<f64> {
        if let Some(a) = self.cfg.reweight.alpha_override {
            return Ok(a);
        }
        let a = match self.cfg.reweight.decay {
            DecayGranularity::PerEpoch => self.schedule.alpha_at(self.epoch)?,
            DecayGranularity::PerStep => {
                let progress = self.epoch as f64 + batch as f64 / batches_per_epoch.max(1) as f64;
                self.schedule.alpha_at_progress(progress)?
            }
        };
        Ok(a)
    }

    /// Builds the batch input node: `[B, F]` or `[B, P, F]`.
    fn batch_input(&self, tape: &mut Tape, view: &TrainView, indices: &[usize]) -> Result<NodeId> {
        let per_sample: usize = view.feature_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per_sample);
        for &i in indices {
            data.extend_from_slice(view.features(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(view.feature_shape());
        Ok(tape.constant_from(data, shape)?)
    }

    /// Per-sample task loss for the configured method and task.
    fn task_loss(
        &self,
        tape: &mut Tape,
        logits: NodeId,
        view: &TrainView,
        indices: &[usize],
        focal: bool,
    ) -> Result<NodeId> {
        match view.labels() {
            Labels::Multilabel(rows) => {
                let c = view.num_classes();
                let mut data = Vec::with_capacity(indices.len() * c);
                for &i in indices {
                    data.extend(rows[i].iter().map(|&b| b as f64));
                }
                let targets = tape.constant_from(data, vec![indices.len(), c])?;
                if focal {
                    Ok(focal_multilabel(
                        tape,
                        logits,
                        targets,
                        self.cfg.train.focal_gamma,
                    )?)
                } else {
                    Ok(bce_multilabel(tape, logits, targets)?)
                }
            }
            Labels::Pixel(rows) => {
                let mut targets = Vec::new();
                for &i in indices {
                    targets.extend(rows[i].iter().map(|&p| p as usize));
                }
                Ok(ce_pixelwise(tape, logits, &targets)?)
            }
        }
    }

    /// One optimization step over `indices`. Returns the audit record;
    /// parameters and optimizer state advance in place.
    pub fn train_step(
        &mut self,
        view: &TrainView,
        indices: &[usize],
        alpha: f64,
    ) -> Result<StepRecord> {
        debug_assert!(!indices.is_empty());
        let mut tape = Tape::new();
        let input = self.batch_input(&mut tape, view, indices)?;
        let main = self.model.forward_main(&mut tape, input)?;
        let focal = self.cfg.method == Method::FocalBaseline;
        let main_loss = self.task_loss(&mut tape, main.logits, view, indices, focal)?;

        let (svae_parts, batch_weights) = if self.cfg.method == Method::SvaeReweight {
            let svae = self
                .model
                .forward_svae(&mut tape, &main, &mut self.epsilon_rng)?;
            let mse = mse_features(&mut tape, svae.reconstructed, svae.features_detached)?;
            let task = self.task_loss(&mut tape, svae.logits, view, indices, false)?;
            let kl = kl_gaussian(&mut tape, svae.mu, svae.logvar)?;
            let weights = SvaeLossWeights {
                mse: self.cfg.reweight.mse_weight,
                task: self.cfg.reweight.task_weight,
                kl: self.cfg.reweight.kl_weight,
            };
            let composite = svae_loss(
                &mut tape,
                mse,
                task,
                kl,
                &weights,
                self.cfg.reweight.kl_sign,
            )?;
            // Loss values leave the graph here: weights are constants.
            let bw = BatchWeights::compute(
                tape.value(main_loss),
                tape.value(composite),
                alpha,
            )?;
            (Some((svae, composite)), Some(bw))
        } else {
            (None, None)
        };

        let unweighted_main = mean_of(tape.value(main_loss));
        let weight_values = batch_weights
            .as_ref()
            .map(|bw| bw.weights.clone())
            .unwrap_or_else(|| vec![1.0; indices.len()]);

        // Weighted mean objectives; a single backward pass serves both
        // parameter sets because the graphs only meet below the
        // stop-gradient.
        let w_node = tape.constant_from(weight_values.clone(), vec![indices.len()])?;
        let weighted_main = tape.mul(main_loss, w_node)?;
        let objective_main = tape.mean(weighted_main, None)?;

        let (total, objective_svae_val, unweighted_svae) = match &svae_parts {
            None => (objective_main, None, None),
            Some((_, composite)) => {
                let unweighted_svae = mean_of(tape.value(*composite));
                let weighted_svae = tape.mul(*composite, w_node)?;
                let objective_svae = tape.mean(weighted_svae, None)?;
                let total = tape.add(objective_main, objective_svae)?;
                (
                    total,
                    Some(tape.value(objective_svae)[0]),
                    Some(unweighted_svae),
                )
            }
        };
        let objective_main_val = tape.value(objective_main)[0];

        tape.backward(total)?;
        SvaeModel::accumulate_grads(&tape, &main.param_nodes, self.model.main_params_mut())?;
        if let Some((svae, _)) = &svae_parts {
            SvaeModel::accumulate_grads(&tape, &svae.param_nodes, self.model.svae_params_mut())?;
        }
        self.adam_main.step(&mut self.model.main_params_mut())?;
        if svae_parts.is_some() {
            self.adam_svae.step(&mut self.model.svae_params_mut())?;
        }

        Ok(StepRecord {
            sample_ids: indices.to_vec(),
            weights: weight_values,
            batch_weights,
            objective_main: objective_main_val,
            objective_svae: objective_svae_val,
            unweighted_main,
            unweighted_svae,
        })
    }

    /// Runs one epoch over `train_data` and evaluates on `val`.
    pub fn run_epoch(&mut self, train_data: &Dataset, val: &Dataset) -> Result<EpochOutcome> {
        let view = train_data.train_view();
        let n = view.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle_rng);
        let batch_size = self.cfg.train.batch_size;
        let num_batches = n.div_ceil(batch_size);

        let mut audit = Vec::new();
        let mut sum_weighted_main = 0.0;
        let mut sum_main = 0.0;
        let mut sum_weighted_svae = 0.0;
        let mut sum_svae = 0.0;
        let mut svae_steps = 0usize;
        let mut alpha_logged = 0.0;

        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            let alpha = self.alpha_for(batch_idx, num_batches)?;
            alpha_logged = alpha;
            let record = self
                .train_step(&view, chunk, alpha)
                .map_err(|e| self.abort(batch_idx, chunk, alpha, e))?;
            sum_weighted_main += record.objective_main;
            sum_main += record.unweighted_main;
            if let (Some(ws), Some(us)) = (record.objective_svae, record.unweighted_svae) {
                sum_weighted_svae += ws;
                sum_svae += us;
                svae_steps += 1;
            }
            for (pos, &sample_id) in record.sample_ids.iter().enumerate() {
                let (main_l, svae_l, gap) = match &record.batch_weights {
                    Some(bw) => (bw.main_losses[pos], bw.svae_losses[pos], bw.gaps[pos]),
                    None => (f64::NAN, f64::NAN, 0.0),
                };
                audit.push(AuditRow {
                    epoch: self.epoch,
                    batch: batch_idx,
                    sample_id,
                    main_loss: main_l,
                    svae_loss: svae_l,
                    gap,
                    weight: record.weights[pos],
                    is_noisy: Some(train_data.noise_flags()[sample_id]),
                });
            }
        }

        let steps = num_batches as f64;
        let val_metrics = evaluate(&self.model, val, self.cfg.train.eval_threshold)?;

        // Noisy-vs-clean mean weights come from this epoch's audit rows;
        // the flags never entered the steps above.
        let (mut noisy_sum, mut noisy_n, mut clean_sum, mut clean_n) = (0.0, 0usize, 0.0, 0usize);
        for row in &audit {
            match row.is_noisy {
                Some(true) => {
                    noisy_sum += row.weight;
                    noisy_n += 1;
                }
                Some(false) => {
                    clean_sum += row.weight;
                    clean_n += 1;
                }
                None => {}
            }
        }
        let report = EpochReport {
            epoch: self.epoch,
            alpha: alpha_logged,
            weighted_main: sum_weighted_main / steps,
            unweighted_main: sum_main / steps,
            weighted_svae: (svae_steps > 0).then(|| sum_weighted_svae / svae_steps as f64),
            unweighted_svae: (svae_steps > 0).then(|| sum_svae / svae_steps as f64),
            val_metric: val_metrics.primary,
            mean_weight_noisy: (noisy_n > 0).then(|| noisy_sum / noisy_n as f64),
            mean_weight_clean: (clean_n > 0).then(|| clean_sum / clean_n as f64),
        };
        self.epoch += 1;
        if !self.cfg.train.audit_log {
            audit.clear();
        }
        Ok(EpochOutcome { report, audit })
    }

    fn abort(&self, batch: usize, chunk: &[usize], alpha: f64, err: TrainError) -> TrainError {
        let diagnostics = format!(
            "task={} method={} epoch={} batch={} alpha={alpha}\nbatch sample ids: {chunk:?}\n\
             adam steps: main={} svae={}",
            self.cfg.task,
            self.cfg.method,
            self.epoch,
            batch,
            self.adam_main.step_count(),
            self.adam_svae.step_count(),
        );
        TrainError::Aborted {
            epoch: self.epoch,
            batch,
            source: Box::new(err),
            diagnostics,
        }
    }
}

pub struct EpochOutcome {
    pub report: EpochReport,
    pub audit: Vec<AuditRow>,
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Forward-only evaluation; no randomness, no gradients.
pub fn evaluate(model: &SvaeModel, data: &Dataset, threshold: f64) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut tape = Tape::new();
    let per_sample: usize = data.feature_shape.iter().product();
    let mut flat = Vec::with_capacity(data.len() * per_sample);
    for row in &data.features {
        flat.extend_from_slice(row);
    }
    let mut shape = vec![data.len()];
    shape.extend_from_slice(&data.feature_shape);
    let input = tape.constant_from(flat, shape)?;
    let fwd = model.forward_main(&mut tape, input)?;
    match &data.labels {
        Labels::Multilabel(rows) => {
            let probs = tape.sigmoid(fwd.logits)?;
            let targets: Vec<u8> = rows.iter().flatten().copied().collect();
            let (micro, macro_f1) =
                multilabel_f1(tape.value(probs), &targets, data.num_classes, threshold);
            Ok(EvalMetrics {
                primary: macro_f1,
                micro_f1: Some(micro),
                macro_f1: Some(macro_f1),
                overall_accuracy: None,
            })
        }
        Labels::Pixel(rows) => {
            let targets: Vec<u16> = rows.iter().flatten().copied().collect();
            let oa = overall_accuracy(tape.value(fwd.logits), &targets, data.num_classes);
            Ok(EvalMetrics {
                primary: oa,
                micro_f1: None,
                macro_f1: None,
                overall_accuracy: Some(oa),
            })
        }
    }
}

/// Full training run: per-epoch reports, best-validation checkpoint
/// selection, one final test evaluation of the selected checkpoint.
pub fn train(
    cfg: &ExperimentConfig,
    train_data: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> Result<RunOutcome> {
    if train_data.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    if test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let input_dim = *train_data.feature_shape.last().unwrap();
    let mut trainer = Trainer::new(cfg, train_data.task, input_dim)?;

    let mut reports = Vec::with_capacity(cfg.train.epochs);
    let mut audit = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_snapshot = trainer.model.snapshot();

    if cfg.train.epochs == 0 {
        best_val = evaluate(&trainer.model, val, cfg.train.eval_threshold)?.primary;
    }
    for _ in 0..cfg.train.epochs {
        let outcome = trainer.run_epoch(train_data, val)?;
        if outcome.report.val_metric > best_val {
            best_val = outcome.report.val_metric;
            best_epoch = outcome.report.epoch;
            best_snapshot = trainer.model.snapshot();
        }
        reports.push(outcome.report);
        audit.extend(outcome.audit);
    }

    trainer.model.restore(&best_snapshot)?;
    let test_metrics = evaluate(&trainer.model, test, cfg.train.eval_threshold)?;
    Ok(RunOutcome {
        reports,
        best_epoch,
        best_val_metric: best_val,
        test: test_metrics,
        checkpoint: best_snapshot,
        audit,
    })
}
