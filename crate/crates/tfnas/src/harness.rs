//! Experiment orchestration: per-epoch metrics logging and CSV export,
//! operation-collapse statistics, the ranking-stability early-stopping
//! baseline, ablation grids over the search's knobs, and the rigged
//! collapse comparison experiment. All output is file-based.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::generate;
use crate::derive::train_concrete;
use crate::error::{Error, Result};
use crate::latmodel::LatencyTable;
use crate::optimizer::{
    default_data_spec, LatencyObjective, ObjectiveKind, Schedule, SearchFlags, SearchRun, TauMode,
};
use crate::relax::{DepthMode, SecondPathMode};
use crate::space::SupernetConfig;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub tau: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub expected_latency_ms: f64,
    pub derived_latency_ms: f64,
    pub stage_depths: Vec<usize>,
    pub layer_argmax_ops: Vec<usize>,
    pub elastic: bool,
    pub infeasible: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub warmup_epochs: usize,
}

impl MetricsLog {
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.epoch != i {
                return Err(Error::InvalidArgument(format!(
                    "metrics rows must be contiguous from 0, found epoch {} at row {i}",
                    row.epoch
                )));
            }
        }
        Ok(())
    }
}

/// CSV export. The single header line documents the column order; numeric
/// fields are written in shortest-round-trip decimal so a parse-back
/// reproduces them exactly.
pub fn export_metrics(log: &MetricsLog, path: &std::path::Path) -> Result<()> {
    log.validate()?;
    let stages = log.rows.first().map(|r| r.stage_depths.len()).unwrap_or(0);
    let layers = log
        .rows
        .first()
        .map(|r| r.layer_argmax_ops.len())
        .unwrap_or(0);
    let mut text = String::from("# epoch,tau,train_loss,val_loss,expected_latency_ms,derived_latency_ms");
    for s in 1..=stages {
        text.push_str(&format!(",depth_s{s}"));
    }
    for l in 1..=layers {
        text.push_str(&format!(",argmax_l{l}"));
    }
    text.push_str(",elastic,infeasible\n");
    for row in &log.rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}",
            row.epoch,
            row.tau,
            row.train_loss,
            row.val_loss,
            row.expected_latency_ms,
            row.derived_latency_ms
        ));
        for d in &row.stage_depths {
            text.push_str(&format!(",{d}"));
        }
        for a in &row.layer_argmax_ops {
            text.push_str(&format!(",{a}"));
        }
        text.push_str(&format!(
            ",{},{}\n",
            u8::from(row.elastic),
            u8::from(row.infeasible)
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Histogram of the argmax operation at one layer over the post-warmup
/// epochs, plus the max-share fraction.
pub fn collapse_stats(log: &MetricsLog, layer: usize) -> Result<(Vec<usize>, f64)> {
    let rows: Vec<&MetricsRow> = log
        .rows
        .iter()
        .filter(|r| r.epoch >= log.warmup_epochs)
        .collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument(
            "metrics log has no post-warmup rows".into(),
        ));
    }
    if layer >= rows[0].layer_argmax_ops.len() {
        return Err(Error::Index(format!(
            "layer {layer} out of range ({} layers)",
            rows[0].layer_argmax_ops.len()
        )));
    }
    let max_op = rows
        .iter()
        .map(|r| r.layer_argmax_ops[layer])
        .max()
        .unwrap_or(0);
    let mut hist = vec![0usize; max_op + 1];
    for r in &rows {
        hist[r.layer_argmax_ops[layer]] += 1;
    }
    let max_share = hist.iter().cloned().max().unwrap_or(0) as f64 / rows.len() as f64;
    Ok((hist, max_share))
}

// ---------------------------------------------------------------------------
// Ranking-stability early stopping
// ---------------------------------------------------------------------------

fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// First epoch at which the full alpha ranking of at least `fraction` of the
/// layers has been unchanged for `window` consecutive epochs. `history[e]`
/// is the flattened alpha matrix after epoch e.
pub fn ranking_stability_stop(
    history: &[Vec<f64>],
    layers: usize,
    ops: usize,
    fraction: f64,
    window: usize,
) -> Result<Option<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    if window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    if history.len() < window {
        return Err(Error::InvalidArgument(format!(
            "history length {} shorter than window {window}",
            history.len()
        )));
    }
    let rankings: Vec<Vec<Vec<usize>>> = history
        .iter()
        .map(|alpha| {
            (0..layers)
                .map(|l| ranking(&alpha[l * ops..(l + 1) * ops]))
                .collect()
        })
        .collect();
    let needed = (fraction * layers as f64).ceil() as usize;
    for e in (window - 1)..history.len() {
        let mut stable = 0;
        for (l, base) in rankings[e].iter().enumerate() {
            if (e + 1 - window..e).all(|k| &rankings[k][l] == base) {
                stable += 1;
            }
        }
        if stable >= needed {
            return Ok(Some(e));
        }
    }
    Ok(None)
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    SecondPath,
    DepthSpace,
    Objective,
    Lambda1,
    ElasticOnOff,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "second_path" | "second-path" => Ok(AblationAxis::SecondPath),
            "depth_space" | "depth-space" => Ok(AblationAxis::DepthSpace),
            "objective" => Ok(AblationAxis::Objective),
            "lambda1" => Ok(AblationAxis::Lambda1),
            "elastic_on_off" | "elastic" => Ok(AblationAxis::ElasticOnOff),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation axis `{other}`"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::SecondPath => "second_path",
            AblationAxis::DepthSpace => "depth_space",
            AblationAxis::Objective => "objective",
            AblationAxis::Lambda1 => "lambda1",
            AblationAxis::ElasticOnOff => "elastic_on_off",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationBase {
    pub config: SupernetConfig,
    pub lut: LatencyTable,
    pub objective: LatencyObjective,
    pub schedule: Schedule,
    pub flags: SearchFlags,
    /// From-scratch budget for the accuracy proxy.
    pub eval_epochs: usize,
}

#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub base: AblationBase,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "ablation needs at least one value and one seed".into(),
            ));
        }
        if self.values.len() < 2 && self.seeds.len() < 2 {
            return Err(Error::InvalidArgument(
                "ablation needs >= 2 values or >= 2 seeds".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub accuracy_proxy: f64,
    pub derived_latency_ms: f64,
    pub search_wall_time_ms: f64,
    pub flags: String,
    pub status: String,
}

fn apply_axis_value(
    axis: AblationAxis,
    value: &str,
    objective: &mut LatencyObjective,
    flags: &mut SearchFlags,
) -> Result<()> {
    match axis {
        AblationAxis::SecondPath => {
            flags.second_path = SecondPathMode::parse(value)?;
        }
        AblationAxis::DepthSpace => {
            flags.depth_mode = DepthMode::parse(value)?;
        }
        AblationAxis::Objective => {
            objective.kind = ObjectiveKind::parse(value)?;
            if objective.kind == ObjectiveKind::C1 && objective.lambda2.is_none() {
                objective.lambda2 = Some(1.0);
            }
        }
        AblationAxis::Lambda1 => {
            objective.lambda1 = value.parse::<f64>().map_err(|e| {
                Error::InvalidArgument(format!("lambda1 value `{value}`: {e}"))
            })?;
        }
        AblationAxis::ElasticOnOff => {
            flags.elastic = match value {
                "on" => true,
                "off" => false,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "elastic axis value must be on|off, got `{other}`"
                    )))
                }
            };
        }
    }
    Ok(())
}

fn flags_summary(objective: &LatencyObjective, flags: &SearchFlags) -> String {
    format!(
        "objective={:?};lambda1={};second={:?};depth={:?};elastic={}",
        objective.kind, objective.lambda1, flags.second_path, flags.depth_mode, flags.elastic
    )
}

/// Run every (value, seed) cell end-to-end: search, derive, and a short
/// from-scratch training whose validation accuracy is the proxy score.
/// Failures are recorded per row and the grid continues.
pub fn run_ablation(spec: &AblationSpec) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for value in &spec.values {
        for &seed in &spec.seeds {
            let mut objective = spec.base.objective.clone();
            let mut flags = spec.base.flags.clone();
            if let Err(e) = apply_axis_value(spec.axis, value, &mut objective, &mut flags) {
                rows.push(AblationRow {
                    axis: spec.axis.name().into(),
                    value: value.clone(),
                    seed,
                    accuracy_proxy: f64::NAN,
                    derived_latency_ms: f64::NAN,
                    search_wall_time_ms: 0.0,
                    flags: String::new(),
                    status: format!("error: {e}"),
                });
                continue;
            }
            let summary = flags_summary(&objective, &flags);
            let started = Instant::now();
            let outcome = (|| -> Result<(f64, f64)> {
                let mut run = SearchRun::new(
                    &spec.base.config,
                    spec.base.lut.clone(),
                    objective.clone(),
                    spec.base.schedule.clone(),
                    flags.clone(),
                    seed,
                )?;
                let (arch, _) = run.run()?;
                let latency = crate::latmodel::arch_latency(&arch, &spec.base.lut)?;
                let data_spec = flags
                    .data
                    .clone()
                    .unwrap_or_else(|| default_data_spec(&spec.base.config));
                let ds = generate(&data_spec)?;
                let (net, _) = train_concrete(
                    &arch,
                    &ds,
                    spec.base.eval_epochs,
                    seed,
                    &crate::derive::TrainOptions::default(),
                )?;
                let acc = net.accuracy(&ds, &ds.val)?;
                Ok((acc, latency))
            })();
            let wall = started.elapsed().as_secs_f64() * 1e3;
            match outcome {
                Ok((acc, latency)) => rows.push(AblationRow {
                    axis: spec.axis.name().into(),
                    value: value.clone(),
                    seed,
                    accuracy_proxy: acc,
                    derived_latency_ms: latency,
                    search_wall_time_ms: wall,
                    flags: summary,
                    status: "ok".into(),
                }),
                Err(e) => rows.push(AblationRow {
                    axis: spec.axis.name().into(),
                    value: value.clone(),
                    seed,
                    accuracy_proxy: f64::NAN,
                    derived_latency_ms: f64::NAN,
                    search_wall_time_ms: wall,
                    flags: summary,
                    status: format!("error: {e}"),
                }),
            }
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &std::path::Path) -> Result<()> {
    let mut text = String::from(
        "# axis,value,seed,accuracy_proxy,derived_latency_ms,search_wall_time_ms,flags,status\n",
    );
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.value,
            r.seed,
            r.accuracy_proxy,
            r.derived_latency_ms,
            r.search_wall_time_ms,
            r.flags,
            r.status
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Rigged collapse experiment
// ---------------------------------------------------------------------------

/// A four-candidate single-stage space where op 0 starts with a trained
/// advantage (every other candidate's main weights are scaled down). The
/// candidates are identical in capability, so with even training the argmax
/// has no reason to stick; one-path sampling starves the rigged ops and
/// locks in op 0. Searched once with gumbel-only sampling and once with
/// bi-sampling under the same seed; returns the post-warmup argmax
/// max-share at the rigged layer for both.
pub const RIG_FACTOR: f64 = 0.05;
pub const RIG_LR_ARCH: f64 = 0.02;

pub fn collapse_experiment(seed: u64, epochs: usize) -> Result<(f64, f64)> {
    let config = collapse_config();
    let lut = crate::latmodel::build_lut_synthetic(
        &config,
        &crate::latmodel::CostModelSpec::default(),
        1,
    )?;
    let share = |second: Option<SecondPathMode>| -> Result<f64> {
        let schedule = Schedule {
            epochs,
            warmup_epochs: 3,
            tau_mode: TauMode::Linear,
            lr_w0: 0.1,
            lr_arch: RIG_LR_ARCH,
            batch_size: 16,
            ..Schedule::default()
        };
        let flags = SearchFlags {
            second_path: second,
            elastic: false,
            ..SearchFlags::default()
        };
        // lambda 0: operation choice is driven purely by the task loss
        let objective = LatencyObjective::ours(0.0, 1.0);
        let mut run = SearchRun::new(&config, lut.clone(), objective, schedule, flags, seed)?;
        for op in 1..config.ops.len() {
            rig_weak_op(&mut run, op, RIG_FACTOR);
        }
        run.run()?;
        let (_, max_share) = collapse_stats(&run.metrics, 0)?;
        Ok(max_share)
    };
    let gumbel_only = share(None)?;
    let bi_sampling = share(Some(SecondPathMode::Random))?;
    Ok((gumbel_only, bi_sampling))
}

fn collapse_config() -> SupernetConfig {
    use crate::space::{Activation, CandidateOpSpec, StageSpec};
    let op = |name: &str, tag: u32| CandidateOpSpec {
        name: name.into(),
        kernel_tag: tag,
        expansion_init: 3.0,
        expansion_interval: (2.0, 4.0),
        se_expansion: 0.0,
    };
    SupernetConfig {
        stages: vec![StageSpec {
            index: 1,
            channels_in: 8,
            channels_out: 10,
            max_layers: 1,
            min_layers: 1,
            activation: Activation::Swish,
            searchable: true,
            resolution_factor: 1.0,
        }],
        ops: vec![op("a", 3), op("b", 3), op("c", 3), op("d", 3)],
        class_count: 4,
        input_dim: 8,
        seed: 1234,
    }
}

/// Scale one candidate's main-path weights down at every searchable layer,
/// giving the other candidates an initial loss advantage.
pub fn rig_weak_op(run: &mut SearchRun, op_index: usize, factor: f64) {
    for (_, si, _, l) in run.net.searchable_layers() {
        let block = run.net.stages[si].layers[l][op_index].clone();
        for p in [block.w1, block.w2] {
            for v in run.net.store.get_mut(p).values_mut() {
                *v *= factor;
            }
        }
    }
}
