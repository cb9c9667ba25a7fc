//! Full-batch training driver: per-seed split construction, the epoch
//! loop combining cross entropy with the separation constraints, momentum
//! gradient descent, early stopping on validation AUC, and multi-seed
//! aggregation into a run report.

use std::borrow::Cow;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{RunConfig, ThresholdMode};
use crate::gdn::{
    class_constraint, class_feature_distributions, gradient_scores, init_prototypes,
    prototype_update, select_top_k, separation_schedule, surrounding_constraint, total_loss,
    FeatureMask, GdnError, Prototype, ScheduleAction,
};
use crate::graph::{GraphError, MultiRelationGraph, RelationSelector};
use crate::metrics::{
    aggregate_runs, auc, best_f1_threshold, evaluate, AggregateReport, MetricsError,
    MetricsReport,
};
use crate::models::{
    cross_entropy, forward, init_params, BackboneConfig, BackboneKind, ModelError, ModelParams,
};
use crate::splits::{
    biased_split, sds_report, stratified_split, SdsReport, SplitAssignment, SplitError,
    SplitMode,
};
use crate::tape::{Gradients, Tape, TapeError, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gdn(#[from] GdnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("seed {seed}: non-finite loss at epoch {epoch}")]
    NumericFailure { seed: u64, epoch: usize },
    #[error("split produced an empty {0} set")]
    EmptyRole(&'static str),
    #[error("every seed failed; nothing to report")]
    NoSuccessfulSeeds,
}

/// Serializable per-seed outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub metrics: MetricsReport,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub epochs_run: usize,
    pub threshold: f64,
    pub mask: Option<FeatureMask>,
    pub loss_trace: Vec<f64>,
    pub val_auc_trace: Vec<f64>,
    pub exp_clamp_engaged: bool,
    pub split_warnings: Vec<String>,
}

/// Per-seed outcome plus the non-serialized artifacts (weights, split)
/// that the command layer persists separately.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub report: SeedReport,
    pub params: ModelParams,
    pub backbone: BackboneConfig,
    pub split: SplitAssignment,
    pub prototypes: Option<Prototype>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: Vec<SeedReport>,
    pub failures: Vec<SeedFailure>,
    pub aggregate: Option<AggregateReport>,
    pub sds: Option<SdsReport>,
    pub wall_clock_secs: f64,
}

#[derive(Debug)]
pub struct TrainRun {
    pub report: RunReport,
    pub seed_runs: Vec<SeedRun>,
}

fn mix_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch as u64)
}

pub fn build_split(
    g: &MultiRelationGraph,
    config: &RunConfig,
    run_seed: u64,
) -> Result<SplitAssignment, SplitError> {
    let seed = config.split_seed.unwrap_or(run_seed);
    match config.split_mode {
        SplitMode::Normal => stratified_split(g, config.ratios, seed),
        SplitMode::Biased => biased_split(g, config.ratios, seed, RelationSelector::Merged),
    }
}

/// Anomaly probability per node under the given parameters.
pub fn anomaly_scores(
    g: &MultiRelationGraph,
    params: &ModelParams,
    backbone: &BackboneConfig,
) -> Result<Vec<f64>, TrainError> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let pass = forward(&mut tape, g, &ids, backbone)?;
    let probs = tape.value(pass.probs);
    Ok((0..g.n_nodes()).map(|v| probs.get(v, 1)).collect())
}

fn momentum_step(
    params: &mut ModelParams,
    ids: &[TensorId],
    grads: &Gradients,
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
) {
    for ((tensor, &id), vel) in params.tensors_mut().into_iter().zip(ids).zip(velocity) {
        let g = grads.dense(id, tensor.rows(), tensor.cols());
        for ((p, v), gv) in tensor
            .data_mut()
            .iter_mut()
            .zip(vel.data_mut())
            .zip(g.data())
        {
            *v = momentum * *v + gv;
            *p -= lr * *v;
        }
    }
}

/// Train one seed end to end and evaluate the best-validation parameters
/// on the test set.
pub fn train_single(
    g: &MultiRelationGraph,
    config: &RunConfig,
    seed: u64,
) -> Result<SeedRun, TrainError> {
    let split = build_split(g, config, seed)?;
    let train_mask = split.train();
    let valid_mask = split.valid();
    let test_mask = split.test();
    if train_mask.is_empty() {
        return Err(TrainError::EmptyRole("train"));
    }
    if valid_mask.is_empty() {
        return Err(TrainError::EmptyRole("valid"));
    }
    if test_mask.is_empty() {
        return Err(TrainError::EmptyRole("test"));
    }

    let model_graph: Cow<MultiRelationGraph> = match config.backbone {
        BackboneKind::Gcn => Cow::Owned(g.merge_relations()),
        BackboneKind::Rgcn => Cow::Borrowed(g),
    };
    let labels = g.labels();
    let d = g.feature_dim();
    let k = config.resolve_k(d);
    let backbone = BackboneConfig {
        kind: config.backbone,
        hidden_dim: config.hidden_dim,
        n_layers: config.n_layers,
        input_dim: d,
        n_relations: model_graph.n_relations(),
    };
    let merged_adj = model_graph.merged_adjacency();

    let mut params = init_params(&backbone, seed);
    let mut velocity: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.rows(), t.cols()))
        .collect();

    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut mask: Option<FeatureMask> = None;
    let mut proto: Option<Prototype> = None;
    let mut loss_trace = Vec::new();
    let mut val_trace = Vec::new();
    let mut clamp_engaged = false;
    let mut epochs_run = 0usize;

    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let id_list = ids.all();
        let pass = forward(&mut tape, &model_graph, &ids, &backbone)?;

        // validation with the pre-step parameters; the snapshot below is
        // exactly what this score measured
        let probs = tape.value(pass.probs);
        let scores: Vec<f64> = (0..g.n_nodes()).map(|v| probs.get(v, 1)).collect();
        let val_auc = auc(&scores, labels, &valid_mask)?;
        val_trace.push(val_auc);
        let improved = best.as_ref().map_or(true, |(b, _, _)| val_auc > *b);
        if improved {
            best = Some((val_auc, epoch, params.clone()));
        } else if let Some((_, best_epoch, _)) = &best {
            if epoch - best_epoch >= config.patience {
                break;
            }
        }
        epochs_run = epoch + 1;

        if separation_schedule(epoch, config.warmup, config.refresh_every)
            == ScheduleAction::RecomputeMask
        {
            let alpha = gradient_scores(&mut tape, pass.x_refined, pass.probs, labels, &train_mask)?;
            let new_mask = select_top_k(&alpha, k)?;
            let changed = mask
                .as_ref()
                .map_or(true, |m| m.class_idx != new_mask.class_idx);
            if changed {
                proto = None; // dims changed; prototypes restart from pooling
            }
            mask = Some(new_mask);
        }

        let ce = cross_entropy(&mut tape, pass.probs, labels, &train_mask)?;
        let mut c_values_for_update: Option<Tensor> = None;
        let loss_id = if config.lambda > 0.0 && mask.is_some() {
            let fm = mask.as_ref().expect("mask present");
            let (c_dist, s_dist) = class_feature_distributions(&mut tape, pass.x_refined, fm)?;
            let c_values = tape.value(c_dist).clone();
            if proto.is_none() {
                proto = Some(init_prototypes(&c_values, labels, &train_mask, config.tau)?);
            }
            let l_cla = class_constraint(
                &mut tape,
                c_dist,
                labels,
                &train_mask,
                proto.as_ref().expect("prototype present"),
                config.constrain_both_classes,
            )?;
            let l_sur = match s_dist {
                Some(_) => Some(surrounding_constraint(
                    &mut tape,
                    s_dist,
                    &merged_adj,
                    &train_mask,
                    mix_seed(seed, epoch),
                    config.neighbor_cap,
                    config.negatives,
                )?),
                None => None, // k = d: no surround dims, constraint skipped
            };
            let (total, flagged) = total_loss(&mut tape, ce, Some(l_cla), l_sur, config.lambda)?;
            clamp_engaged |= flagged;
            c_values_for_update = Some(c_values);
            total
        } else {
            ce
        };

        let loss_value = tape.value(loss_id).item();
        if !loss_value.is_finite() {
            return Err(TrainError::NumericFailure { seed, epoch });
        }
        loss_trace.push(loss_value);

        let grads = tape.backward(loss_id)?;
        momentum_step(
            &mut params,
            &id_list,
            &grads,
            &mut velocity,
            config.lr,
            config.momentum,
        );
        if !params.all_finite() {
            return Err(TrainError::NumericFailure { seed, epoch });
        }

        if let Some(c_values) = c_values_for_update {
            let prev = proto.take().expect("prototype present");
            proto = Some(prototype_update(&c_values, labels, &train_mask, &prev)?);
        }
    }

    let (best_val_auc, best_epoch, best_params) = best.expect("at least one epoch evaluated");
    let final_scores = anomaly_scores(&model_graph, &best_params, &backbone)?;
    let threshold = match config.threshold_mode {
        ThresholdMode::Fixed => config.threshold,
        ThresholdMode::TuneF1 => best_f1_threshold(&final_scores, labels, &valid_mask)?,
    };
    let metrics = evaluate(&final_scores, labels, &test_mask, threshold)?;

    Ok(SeedRun {
        report: SeedReport {
            seed,
            metrics,
            best_epoch,
            best_val_auc,
            epochs_run,
            threshold,
            mask,
            loss_trace,
            val_auc_trace: val_trace,
            exp_clamp_engaged: clamp_engaged,
            split_warnings: split.warnings.clone(),
        },
        params: best_params,
        backbone,
        split,
        prototypes: proto,
    })
}

/// Train every configured seed. Numeric failures are recorded per seed;
/// structural errors abort the whole run.
pub fn train_run(g: &MultiRelationGraph, config: &RunConfig) -> Result<TrainRun, TrainError> {
    let started = Instant::now();
    let mut seed_runs = Vec::new();
    let mut failures = Vec::new();
    for &seed in &config.seeds {
        match train_single(g, config, seed) {
            Ok(run) => seed_runs.push(run),
            Err(err @ TrainError::NumericFailure { .. }) => failures.push(SeedFailure {
                seed,
                error: err.to_string(),
            }),
            Err(err) => return Err(err),
        }
    }
    if seed_runs.is_empty() {
        return Err(TrainError::NoSuccessfulSeeds);
    }
    let reports: Vec<MetricsReport> = seed_runs
        .iter()
        .map(|r| r.report.metrics.clone())
        .collect();
    let aggregate = if reports.len() >= 2 {
        Some(aggregate_runs(&reports)?)
    } else {
        None
    };
    let sds = sds_report(g, &seed_runs[0].split).ok();
    let report = RunReport {
        config: config.clone(),
        config_hash: config.hash(),
        seeds: seed_runs.iter().map(|r| r.report.clone()).collect(),
        failures,
        aggregate,
        sds,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainRun { report, seed_runs })
}
