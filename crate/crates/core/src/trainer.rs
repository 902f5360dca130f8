//! The end-to-end training loop. Each minibatch iteration runs three
//! steps:
//!
//! 1. fix θ, solve the CVaR threshold λ* on the batch's per-sample
//!    losses (binary search) and take the induced active-set weights;
//! 2. fix λ*, backpropagate the weighted logit gradient and form the
//!    sign perturbation ε* = γ·sign(∇);
//! 3. recompute the weighted gradient at θ+ε* — same batch, same dropout
//!    mask, fresh batch statistics, λ* and active set frozen from step 1
//!    — and apply the Adam update to θ.
//!
//! With γ = 0 steps 2–3 collapse to a single backward pass. Batch-norm
//! running statistics are folded in once per iteration, from the pass
//! whose gradient trains the model. The learning rate follows a cosine
//! schedule per optimizer step.
//!
//! Everything is deterministic in (bank, config): epoch shuffles,
//! dropout masks, and the validation split are derived from the three
//! user seeds via fixed streams, and gradient reductions run in
//! sample-index order.

use std::borrow::Cow;

use thiserror::Error;

use crate::feature_bank::{
    plan_batches, split_indices, subset_bank, BankError, BatchPlan, FeatureBank, Labels, TaskKind,
};
use crate::loss::{
    binary_cross_entropy, cross_entropy, cvar_lambda_search, cvar_weights_to_logit_grad,
    CvarConfig, LossError,
};
use crate::metrics::{macro_f1_multiclass, macro_f1_multilabel, EvalReport, MetricsError};
use crate::mlp::{decide, Mlp, MlpConfig, MlpError};
use crate::optim::{
    adam_step, cosine_lr, sam_perturbation, AdamState, LrSchedule, OptimError, SamConfig,
};
use crate::rng::derive_seed;

/// Evaluation chunk size; results are independent of it (eval-mode
/// forwards have no batch coupling).
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("task mismatch: {0}")]
    TaskMismatch(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// The three independent seed streams behind one training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
}

impl Seeds {
    /// Fans a single user seed out into the three streams.
    pub fn from_single(seed: u64) -> Self {
        Self {
            init: derive_seed(seed, 0),
            shuffle: derive_seed(seed, 1),
            dropout: derive_seed(seed, 2),
        }
    }
}

/// Where validation samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Validation {
    /// No validation; training returns the final-epoch parameters.
    None,
    /// Hold out this fraction of the training bank (seeded split).
    Fraction(f64),
    /// Evaluate against an explicit bank.
    Bank(FeatureBank),
}

/// Full training recipe. Defaults are batch 32, 32 epochs, Adam at
/// 1e-3 with cosine annealing to 0, α = 0.3, γ = 0.05.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mlp: MlpConfig,
    pub cvar: CvarConfig,
    pub sam: SamConfig,
    pub lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Seeds,
    pub validation: Validation,
}

impl TrainConfig {
    pub fn new(mlp: MlpConfig) -> Self {
        Self {
            mlp,
            cvar: CvarConfig::default(),
            sam: SamConfig::default(),
            lr: 1e-3,
            lr_min: 0.0,
            batch_size: 32,
            epochs: 32,
            seeds: Seeds::from_single(42),
            validation: Validation::None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.mlp.validate()?;
        self.cvar.validate()?;
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "batch size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("need at least 1 epoch".into()));
        }
        if self.sam.gamma.is_nan() || self.sam.gamma < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "gamma must be nonnegative, got {}",
                self.sam.gamma
            )));
        }
        if let Validation::Fraction(f) = self.validation {
            if !(0.0..1.0).contains(&f) {
                return Err(TrainError::InvalidConfig(format!(
                    "validation fraction must lie in [0, 1), got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// One optimizer step's log entry.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lambda: f64,
    pub cvar_obj: f64,
    pub lr: f64,
    pub grad_l1: f64,
    /// Validation macro F1, present on the last step of each epoch when
    /// validation is configured.
    pub val_macro_f1: Option<f64>,
}

/// Per-step records plus best-epoch bookkeeping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_macro_f1: Option<f64>,
}

impl TrainLog {
    /// CSV export: `epoch,step,lambda,cvar_obj,lr,grad_l1,val_macro_f1`,
    /// the validation column empty off epoch boundaries.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "epoch,step,lambda,cvar_obj,lr,grad_l1,val_macro_f1")?;
        for r in &self.steps {
            let val = r.val_macro_f1.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.epoch, r.step, r.lambda, r.cvar_obj, r.lr, r.grad_l1, val
            )?;
        }
        Ok(())
    }

    /// Mean CVaR objective over one epoch's steps.
    pub fn epoch_mean_objective(&self, epoch: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .steps
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.cvar_obj)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

fn check_task(mlp_config: &MlpConfig, bank: &FeatureBank) -> Result<(), TrainError> {
    if bank.d() != mlp_config.input_dim {
        return Err(TrainError::TaskMismatch(format!(
            "bank dimension {} vs model input {}",
            bank.d(),
            mlp_config.input_dim
        )));
    }
    if bank.task().width() != mlp_config.output_dim {
        return Err(TrainError::TaskMismatch(format!(
            "bank label width {} vs model output {}",
            bank.task().width(),
            mlp_config.output_dim
        )));
    }
    Ok(())
}

/// Per-sample individual losses and their logit gradients for the batch.
fn per_sample_loss(
    logits: ndarray::ArrayView2<'_, f64>,
    labels: &Labels,
) -> Result<(Vec<f64>, ndarray::Array2<f64>), LossError> {
    match labels {
        Labels::Multiclass(ls) => cross_entropy(logits, ls),
        Labels::Multilabel(ls) => binary_cross_entropy(logits, ls.view()),
    }
}

/// Trains a head on `bank`. Returns the best-epoch parameters by
/// validation macro F1 (ties to the earlier epoch) when validation is
/// configured, otherwise the final parameters, together with the log.
pub fn train(bank: &FeatureBank, config: &TrainConfig) -> Result<(Mlp, TrainLog), TrainError> {
    config.validate()?;
    check_task(&config.mlp, bank)?;
    let task = bank.task();

    // Resolve the training/validation pair.
    let (train_bank, val_bank): (Cow<'_, FeatureBank>, Option<Cow<'_, FeatureBank>>) =
        match &config.validation {
            Validation::None => (Cow::Borrowed(bank), None),
            Validation::Fraction(f) => {
                if *f == 0.0 {
                    (Cow::Borrowed(bank), None)
                } else {
                    let split_seed = derive_seed(config.seeds.shuffle, u64::MAX);
                    let (train_idx, val_idx) = split_indices(bank.n(), *f, split_seed);
                    if train_idx.is_empty() || val_idx.is_empty() {
                        return Err(TrainError::InvalidConfig(format!(
                            "validation fraction {f} leaves an empty split for n = {}",
                            bank.n()
                        )));
                    }
                    (
                        Cow::Owned(subset_bank(bank, &train_idx)?),
                        Some(Cow::Owned(subset_bank(bank, &val_idx)?)),
                    )
                }
            }
            Validation::Bank(vb) => {
                check_task(&config.mlp, vb)?;
                if vb.task() != task {
                    return Err(TrainError::TaskMismatch(
                        "validation bank task differs from training bank".into(),
                    ));
                }
                (Cow::Borrowed(bank), Some(Cow::Borrowed(vb)))
            }
        };

    let mut mlp = Mlp::init(config.mlp, config.seeds.init)?;
    let mut adam = AdamState::new(&config.mlp);

    // Fixed batch count per epoch (drop-last), so the schedule length is
    // known up front.
    let steps_per_epoch = plan_batches(
        train_bank.n(),
        &BatchPlan {
            batch_size: config.batch_size,
            seed: derive_seed(config.seeds.shuffle, 0),
            drop_last: true,
        },
    )?
    .len() as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;
    let schedule = LrSchedule::new(config.lr, config.lr_min, total_steps)?;

    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Mlp)> = None;
    let mut global_step: u64 = 0;

    for epoch in 0..config.epochs {
        let plan = plan_batches(
            train_bank.n(),
            &BatchPlan {
                batch_size: config.batch_size,
                seed: derive_seed(config.seeds.shuffle, epoch as u64),
                drop_last: true,
            },
        )?;
        for indices in &plan {
            let x = train_bank.gather_features(indices);
            let labels = train_bank.gather_labels(indices);
            let lr = cosine_lr(&schedule, global_step)?;
            let iter_seed = derive_seed(config.seeds.dropout, global_step);

            // Step 1: clean pass, solve λ on this batch's losses.
            let (logits, cache) = mlp.forward_train(x.view(), iter_seed)?;
            let (losses, dper) = per_sample_loss(logits.view(), &labels)?;
            let solution = cvar_lambda_search(&losses, &config.cvar)?;
            let weighted = cvar_weights_to_logit_grad(&solution, dper.view())?;

            // Step 2: CVaR gradient at θ and the sign perturbation.
            let clean_grads = mlp.backward(&cache, weighted.view())?;
            let grad_l1 = clean_grads.l1_norm();

            // Step 3: gradient at θ+ε* (same mask, fresh batch stats,
            // λ* and active set frozen), Adam update at θ. With γ = 0
            // the perturbed pass collapses onto the clean one.
            let (grads, update_cache) = if config.sam.gamma > 0.0 {
                let eps = sam_perturbation(&clean_grads, &config.sam);
                let perturbed = mlp.perturbed(&eps);
                let (p_logits, p_cache) = perturbed.forward_train(x.view(), iter_seed)?;
                let (_, p_dper) = per_sample_loss(p_logits.view(), &labels)?;
                let p_weighted = cvar_weights_to_logit_grad(&solution, p_dper.view())?;
                (perturbed.backward(&p_cache, p_weighted.view())?, p_cache)
            } else {
                (clean_grads, cache)
            };
            adam_step(&mut mlp.params, &grads, &mut adam, lr)?;
            mlp.update_running_stats(&update_cache);

            log.steps.push(StepRecord {
                epoch,
                step: global_step,
                lambda: solution.lambda,
                cvar_obj: solution.objective,
                lr,
                grad_l1,
                val_macro_f1: None,
            });
            global_step += 1;
        }

        if let Some(vb) = &val_bank {
            let report = evaluate(&mlp, task, vb)?;
            if let Some(last) = log.steps.last_mut() {
                last.val_macro_f1 = Some(report.macro_f1);
            }
            let improved = match &best {
                Some((best_f1, _, _)) => report.macro_f1 > *best_f1,
                None => true,
            };
            if improved {
                best = Some((report.macro_f1, epoch, mlp.clone()));
            }
        }
    }

    match best {
        Some((f1, epoch, best_mlp)) => {
            log.best_epoch = Some(epoch);
            log.best_val_macro_f1 = Some(f1);
            Ok((best_mlp, log))
        }
        None => Ok((mlp, log)),
    }
}

/// Eval-mode forward over the full bank in deterministic chunks, hard
/// decisions, and a macro-F1 report. The chunk size does not influence
/// the result.
pub fn evaluate(mlp: &Mlp, task: TaskKind, bank: &FeatureBank) -> Result<EvalReport, TrainError> {
    evaluate_chunked(mlp, task, bank, EVAL_CHUNK)
}

/// [`evaluate`] with an explicit chunk size (exposed for the
/// batch-size-invariance check).
pub fn evaluate_chunked(
    mlp: &Mlp,
    task: TaskKind,
    bank: &FeatureBank,
    chunk: usize,
) -> Result<EvalReport, TrainError> {
    check_task(&mlp.config, bank)?;
    if bank.task() != task {
        return Err(TrainError::TaskMismatch(format!(
            "bank task {:?} vs expected {:?}",
            bank.task(),
            task
        )));
    }
    let n = bank.n();
    let mut mc_preds: Vec<u16> = Vec::new();
    let mut ml_preds: Option<ndarray::Array2<u8>> = None;
    let mut row = 0;
    while row < n {
        let hi = (row + chunk).min(n);
        let indices: Vec<usize> = (row..hi).collect();
        let x = bank.gather_features(&indices);
        let logits = mlp.forward_eval(x.view())?;
        match decide(logits.view(), task) {
            Labels::Multiclass(ls) => mc_preds.extend(ls),
            Labels::Multilabel(ls) => match &mut ml_preds {
                Some(acc) => {
                    *acc = ndarray::concatenate(ndarray::Axis(0), &[acc.view(), ls.view()])
                        .expect("congruent widths");
                }
                None => ml_preds = Some(ls),
            },
        }
        row = hi;
    }
    let report = match bank.labels() {
        Labels::Multiclass(truth) => macro_f1_multiclass(&mc_preds, truth, task.width())?,
        Labels::Multilabel(truth) => {
            let preds = ml_preds.expect("multilabel predictions collected");
            macro_f1_multilabel(preds.view(), truth.view())?
        }
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_bank::{gen_synthetic, SyntheticLabels, SyntheticSpec};
    use crate::mlp::Gradients;
    use ndarray::{array, Array2};

    fn separable_bank(seed: u64) -> FeatureBank {
        gen_synthetic(&SyntheticSpec {
            dim: 4,
            labels: SyntheticLabels::ClassCounts(vec![32, 32]),
            separation: 10.0,
            noise: 0.5,
            seed,
        })
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        let mut mlp = MlpConfig::new(4, 5, 4, 2);
        mlp.dropout = 0.3;
        let mut config = TrainConfig::new(mlp);
        config.batch_size = 8;
        config.epochs = 2;
        config
    }

    #[test]
    fn training_is_deterministic() {
        let bank = separable_bank(1);
        let config = small_config();
        let (mlp_a, log_a) = train(&bank, &config).unwrap();
        let (mlp_b, log_b) = train(&bank, &config).unwrap();
        assert_eq!(mlp_a.params, mlp_b.params);
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn logged_lambdas_are_plausible() {
        let bank = separable_bank(2);
        let config = small_config();
        let (_, log) = train(&bank, &config).unwrap();
        assert_eq!(log.steps.len(), 2 * (64 / 8));
        let mut prev_step = None;
        for r in &log.steps {
            assert!(r.lambda.is_finite() && r.lambda >= 0.0);
            assert!(r.cvar_obj >= r.lambda - 1e-12);
            assert!(r.grad_l1.is_finite());
            if let Some(p) = prev_step {
                assert_eq!(r.step, p + 1, "monotone step counter");
            }
            prev_step = Some(r.step);
        }
    }

    /// Independent mean-loss Adam trainer: plain averaged cross-entropy
    /// gradients, its own Adam arithmetic, no λ search, no perturbation.
    /// The trainer at γ = 0 and α = 1 must reproduce it bit for bit.
    fn mean_loss_adam_oracle(bank: &FeatureBank, config: &TrainConfig) -> (Mlp, Vec<f64>) {
        let mut mlp = Mlp::init(config.mlp, config.seeds.init).unwrap();
        let mut m = Gradients::zeros(&config.mlp);
        let mut v = Gradients::zeros(&config.mlp);
        let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let steps_per_epoch = plan_batches(
            bank.n(),
            &BatchPlan {
                batch_size: config.batch_size,
                seed: derive_seed(config.seeds.shuffle, 0),
                drop_last: true,
            },
        )
        .unwrap()
        .len() as u64;
        let total = steps_per_epoch * config.epochs as u64;
        let mut objectives = Vec::new();
        let mut t: u64 = 0;
        for epoch in 0..config.epochs {
            let plan = plan_batches(
                bank.n(),
                &BatchPlan {
                    batch_size: config.batch_size,
                    seed: derive_seed(config.seeds.shuffle, epoch as u64),
                    drop_last: true,
                },
            )
            .unwrap();
            for indices in &plan {
                let x = bank.gather_features(indices);
                let labels = bank.gather_labels(indices);
                let lr = 0.0
                    + 0.5
                        * (config.lr - 0.0)
                        * (1.0 + (std::f64::consts::PI * (t as f64 / total as f64)).cos());
                let iter_seed = derive_seed(config.seeds.dropout, t);
                let (logits, cache) = mlp.forward_train(x.view(), iter_seed).unwrap();
                let (losses, dper) = per_sample_loss(logits.view(), &labels).unwrap();
                let b = losses.len() as f64;
                objectives.push(losses.iter().sum::<f64>() / b);
                let w = 1.0 / b;
                let dlogits = dper.mapv(|g| w * g);
                let grads = mlp.backward(&cache, dlogits.view()).unwrap();
                // Textbook Adam with bias correction.
                t += 1;
                let c1 = 1.0 - beta1.powi(t as i32);
                let c2 = 1.0 - beta2.powi(t as i32);
                for (((p, g), mt), vt) in mlp
                    .params
                    .trainable_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut())
                {
                    for (((pj, &gj), mj), vj) in p
                        .iter_mut()
                        .zip(g.iter())
                        .zip(mt.iter_mut())
                        .zip(vt.iter_mut())
                    {
                        *mj = beta1 * *mj + (1.0 - beta1) * gj;
                        *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                        *pj -= lr * (*mj / c1) / ((*vj / c2).sqrt() + eps);
                    }
                }
                mlp.update_running_stats(&cache);
            }
        }
        (mlp, objectives)
    }

    #[test]
    fn no_sam_full_tail_trainer_equals_mean_loss_oracle() {
        let bank = separable_bank(3);
        let mut config = small_config();
        config.sam.gamma = 0.0;
        config.cvar.alpha = 1.0;
        let (mlp, log) = train(&bank, &config).unwrap();
        let (oracle_mlp, oracle_objs) = mean_loss_adam_oracle(&bank, &config);
        assert_eq!(mlp.params, oracle_mlp.params, "trajectories diverged");
        assert_eq!(log.steps.len(), oracle_objs.len());
        for (r, o) in log.steps.iter().zip(oracle_objs.iter()) {
            assert!(
                (r.cvar_obj - o).abs() <= 1e-12 * o.abs().max(1.0),
                "objective {} vs mean loss {o}",
                r.cvar_obj
            );
        }
    }

    #[test]
    fn objective_decreases_on_separable_data() {
        let bank = separable_bank(4);
        let mut config = small_config();
        config.epochs = 4;
        let (_, log) = train(&bank, &config).unwrap();
        let first = log.epoch_mean_objective(0).unwrap();
        let last = log.epoch_mean_objective(3).unwrap();
        assert!(
            last < first,
            "objective did not decrease: {first} -> {last}"
        );
    }

    #[test]
    fn validation_split_selects_best_epoch() {
        let bank = separable_bank(5);
        let mut config = small_config();
        config.epochs = 3;
        config.validation = Validation::Fraction(0.25);
        let (_, log) = train(&bank, &config).unwrap();
        assert!(log.best_epoch.is_some());
        assert!(log.best_val_macro_f1.unwrap() >= 0.0);
        // One validation entry per epoch, on the epoch's last step.
        let val_entries: Vec<&StepRecord> = log
            .steps
            .iter()
            .filter(|r| r.val_macro_f1.is_some())
            .collect();
        assert_eq!(val_entries.len(), 3);
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let bank = separable_bank(6);
        // Wrong output width.
        let mut config = small_config();
        config.mlp.output_dim = 5;
        assert!(matches!(
            train(&bank, &config),
            Err(TrainError::TaskMismatch(_))
        ));
        // Wrong input dimension.
        let mut config = small_config();
        config.mlp.input_dim = 9;
        assert!(matches!(
            train(&bank, &config),
            Err(TrainError::TaskMismatch(_))
        ));
        // Evaluate against a bank of a different kind.
        let config = small_config();
        let (mlp, _) = train(&bank, &config).unwrap();
        let ml_bank = gen_synthetic(&SyntheticSpec {
            dim: 4,
            labels: SyntheticLabels::UnitRates {
                samples: 16,
                rates: vec![0.5, 0.5],
            },
            separation: 1.0,
            noise: 1.0,
            seed: 0,
        })
        .unwrap();
        // The model was trained multiclass; its task must not pass for a
        // multilabel bank of the same width.
        assert!(matches!(
            evaluate(&mlp, bank.task(), &ml_bank),
            Err(TrainError::TaskMismatch(_))
        ));
    }

    /// Hand-built parameters that route class 0 to logit 0 and class 1 to
    /// logit 1 through both hidden blocks (identity-ish weights, default
    /// running stats).
    fn perfect_two_class_setup() -> (Mlp, FeatureBank) {
        let mut config = MlpConfig::new(2, 2, 2, 2);
        config.dropout = 0.0;
        let mut mlp = Mlp::init(config, 0).unwrap();
        mlp.params.w1 = array![[1.0, 0.0], [-1.0, 0.0]];
        mlp.params.b1 = array![0.0, 0.0];
        mlp.params.w2 = Array2::eye(2);
        mlp.params.b2 = array![0.0, 0.0];
        mlp.params.w3 = Array2::eye(2);
        mlp.params.b3 = array![0.0, 0.0];
        let features = array![
            [10.0f32, 0.0],
            [10.0, 0.0],
            [-10.0, 0.0],
            [10.0, 0.0],
            [-10.0, 0.0]
        ];
        let bank = FeatureBank::new(
            TaskKind::Multiclass { classes: 2 },
            features,
            Labels::Multiclass(vec![0, 0, 1, 0, 1]),
        )
        .unwrap();
        (mlp, bank)
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let (mlp, bank) = perfect_two_class_setup();
        let report = evaluate(&mlp, bank.task(), &bank).unwrap();
        assert_eq!(report.macro_f1, 1.0);
    }

    #[test]
    fn constant_prediction_closed_form() {
        // Zero weights, b3 = [1, 0]: always predicts class 0. On a 3/1
        // bank: class-0 F1 = 2·(3/4)·1 / (3/4 + 1) = 6/7, class-1 F1 = 0,
        // macro = 3/7.
        let (mut mlp, _) = perfect_two_class_setup();
        for t in mlp.params.trainable_mut() {
            for v in t.iter_mut() {
                *v = 0.0;
            }
        }
        mlp.params.b3 = array![1.0, 0.0];
        mlp.params.bn1.scale = array![1.0, 1.0];
        mlp.params.bn2.scale = array![1.0, 1.0];
        let bank = FeatureBank::new(
            TaskKind::Multiclass { classes: 2 },
            array![[1.0f32, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]],
            Labels::Multiclass(vec![0, 0, 0, 1]),
        )
        .unwrap();
        let report = evaluate(&mlp, bank.task(), &bank).unwrap();
        assert!((report.macro_f1 - 3.0 / 7.0).abs() < 1e-12);
        assert!(report.macro_f1 < 1.0);
    }

    #[test]
    fn evaluation_is_chunk_size_invariant() {
        let bank = separable_bank(7);
        let config = small_config();
        let (mlp, _) = train(&bank, &config).unwrap();
        let at_8 = evaluate_chunked(&mlp, bank.task(), &bank, 8).unwrap();
        let at_64 = evaluate_chunked(&mlp, bank.task(), &bank, 64).unwrap();
        assert_eq!(at_8, at_64);
    }

    #[test]
    fn log_csv_layout() {
        let bank = separable_bank(8);
        let mut config = small_config();
        config.validation = Validation::Fraction(0.25);
        let (_, log) = train(&bank, &config).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "epoch,step,lambda,cvar_obj,lr,grad_l1,val_macro_f1"
        );
        assert_eq!(lines.len(), 1 + log.steps.len());
        // Off-boundary rows leave the validation column empty.
        assert!(lines[1].ends_with(','));
        assert!(!lines[lines.len() - 1].ends_with(','));
    }

    #[test]
    fn multilabel_training_runs() {
        let bank = gen_synthetic(&SyntheticSpec {
            dim: 4,
            labels: SyntheticLabels::UnitRates {
                samples: 48,
                rates: vec![0.3, 0.6, 0.5],
            },
            separation: 3.0,
            noise: 0.5,
            seed: 9,
        })
        .unwrap();
        let mut mlp = MlpConfig::new(4, 5, 4, 3);
        mlp.dropout = 0.2;
        let mut config = TrainConfig::new(mlp);
        config.batch_size = 8;
        config.epochs = 2;
        config.validation = Validation::Fraction(0.25);
        let (trained, log) = train(&bank, &config).unwrap();
        assert_eq!(log.steps.len(), 2 * (36 / 8));
        let report = evaluate(&trained, bank.task(), &bank).unwrap();
        assert!(report.macro_f1 >= 0.0 && report.macro_f1 <= 1.0);
    }
}
