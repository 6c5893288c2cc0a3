//! Latency lookup table: synthetic and measured builds, interpolating
//! lookups, and the differentiable expected-latency node.
//!
//! Per signature the table stores a sorted `(width, ms)` list; lookups are
//! exact at grid points and linearly interpolated between them. Measured
//! tables are monotonized by running maximum because timing noise can invert
//! neighboring entries and break the width refinement's binary search.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::derive::DerivedArch;
use crate::error::{Error, Result};
use crate::gradcore::{Graph, NodeId};
use crate::space::{
    base_signature, bind_block, fixed_stage_op, op_forward, round_width, OpBlock, StageSpec,
    Supernet, SupernetConfig,
};

/// Closed-form per-op cost model standing in for hardware measurement.
/// Latency in ms:
/// `c0 + c1*rf*C_in*H + c2*rf*H*C_out + c_dw*rf*H*k^2 + c_se*H*S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModelSpec {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c_dw: f64,
    pub c_se: f64,
}

impl Default for CostModelSpec {
    fn default() -> Self {
        CostModelSpec {
            c0: 0.05,
            c1: 4e-4,
            c2: 4e-4,
            c_dw: 2e-4,
            c_se: 2e-4,
        }
    }
}

impl CostModelSpec {
    pub fn validate(&self) -> Result<()> {
        let cs = [self.c0, self.c1, self.c2, self.c_dw, self.c_se];
        if cs.iter().any(|c| *c < 0.0) {
            return Err(Error::Config("cost coefficients must be >= 0".into()));
        }
        if cs.iter().all(|c| *c == 0.0) {
            return Err(Error::Config(
                "at least one cost coefficient must be positive".into(),
            ));
        }
        Ok(())
    }

    fn kernel_weight(tag: u32) -> f64 {
        (tag * tag) as f64
    }

    pub fn op_cost(
        &self,
        rf: f64,
        c_in: usize,
        c_out: usize,
        width: usize,
        se_width: usize,
        kernel_tag: u32,
    ) -> f64 {
        let (h, s) = (width as f64, se_width as f64);
        self.c0
            + self.c1 * rf * c_in as f64 * h
            + self.c2 * rf * h * c_out as f64
            + self.c_dw * rf * h * Self::kernel_weight(kernel_tag)
            + self.c_se * h * s
    }
}

/// Host micro-benchmark parameters for measured tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub repeats: usize,
    pub warmup: usize,
    pub batch: usize,
    pub reducer: String,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            repeats: 9,
            warmup: 2,
            batch: 32,
            reducer: "median".into(),
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 5 {
            return Err(Error::Config("bench repeats must be >= 5".into()));
        }
        if self.warmup < 1 {
            return Err(Error::Config("bench warmup must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("bench batch must be >= 1".into()));
        }
        if self.reducer != "median" {
            return Err(Error::Config("only the median reducer is supported".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LutMeta {
    pub source: String,
    pub host: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_model: Option<CostModelSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSpec>,
}

/// Latency lookup table: per width-independent signature, a strictly
/// width-increasing list of positive, non-decreasing latencies, plus the
/// fixed stem + head cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub meta: LutMeta,
    pub fixed_cost_ms: f64,
    pub entries: BTreeMap<String, Vec<(u32, f64)>>,
}

impl LatencyTable {
    pub fn validate(&self) -> Result<()> {
        if self.fixed_cost_ms < 0.0 {
            return Err(Error::Parse {
                context: "fixed_cost_ms".into(),
                message: "must be nonnegative".into(),
            });
        }
        for (sig, list) in &self.entries {
            if list.is_empty() {
                return Err(Error::Parse {
                    context: format!("entries.{sig}"),
                    message: "empty width list".into(),
                });
            }
            for pair in list.windows(2) {
                if pair[1].0 <= pair[0].0 {
                    return Err(Error::Parse {
                        context: format!("entries.{sig}"),
                        message: format!(
                            "widths must be strictly increasing, got {} then {}",
                            pair[0].0, pair[1].0
                        ),
                    });
                }
                if pair[1].1 < pair[0].1 {
                    return Err(Error::Parse {
                        context: format!("entries.{sig}"),
                        message: "latencies must be non-decreasing in width".into(),
                    });
                }
            }
            if list.iter().any(|&(_, ms)| !(ms > 0.0)) {
                return Err(Error::Parse {
                    context: format!("entries.{sig}"),
                    message: "latencies must be positive".into(),
                });
            }
        }
        Ok(())
    }

    pub fn grid_bounds(&self, signature: &str) -> Result<(u32, u32)> {
        let list = self.entries.get(signature).ok_or_else(|| Error::MissingEntry {
            signature: signature.to_string(),
        })?;
        Ok((list[0].0, list[list.len() - 1].0))
    }
}

/// Exact at grid points, linear between them.
pub fn lut_lookup(table: &LatencyTable, signature: &str, width: usize) -> Result<f64> {
    let list = table
        .entries
        .get(signature)
        .ok_or_else(|| Error::MissingEntry {
            signature: signature.to_string(),
        })?;
    let w = width as u32;
    let (lo, hi) = (list[0].0, list[list.len() - 1].0);
    if w < lo || w > hi {
        return Err(Error::GridRange {
            signature: signature.to_string(),
            width,
            min: lo as usize,
            max: hi as usize,
        });
    }
    match list.binary_search_by_key(&w, |&(gw, _)| gw) {
        Ok(i) => Ok(list[i].1),
        Err(i) => {
            let (w0, l0) = list[i - 1];
            let (w1, l1) = list[i];
            let t = (w - w0) as f64 / (w1 - w0) as f64;
            Ok(l0 + t * (l1 - l0))
        }
    }
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn monotonize(list: &mut [(u32, f64)]) {
    let mut running = 0.0_f64;
    for entry in list.iter_mut() {
        running = running.max(entry.1);
        entry.1 = running;
    }
}

/// Width grid for one block: `{h_min, h_min+stride, ..} ∪ {h_max}`.
/// A stride of zero selects the per-signature default `max(1, C_in/8)`.
fn width_grid(h_min: usize, h_max: usize, c_in: usize, stride: u32) -> Vec<u32> {
    let step = if stride == 0 {
        (c_in / 8).max(1)
    } else {
        stride as usize
    };
    let mut grid: Vec<u32> = (h_min..=h_max).step_by(step).map(|w| w as u32).collect();
    if *grid.last().unwrap() != h_max as u32 {
        grid.push(h_max as u32);
    }
    grid
}

/// Every distinct (signature, block geometry) the config induces, including
/// the fixed blocks of non-searchable stages.
fn config_block_geometries(
    config: &SupernetConfig,
) -> Vec<(String, StageSpec, crate::space::CandidateOpSpec, usize, usize)> {
    let mut out = Vec::new();
    for st in &config.stages {
        let specs = if st.searchable {
            config.ops.clone()
        } else {
            vec![fixed_stage_op()]
        };
        for l in 0..st.max_layers {
            let (c_in, c_out) = if l == 0 {
                (st.channels_in, st.channels_out)
            } else {
                (st.channels_out, st.channels_out)
            };
            for spec in &specs {
                let sig = base_signature(
                    spec.kernel_tag,
                    spec.has_se(),
                    c_in,
                    c_out,
                    st.resolution_factor,
                );
                out.push((sig, st.clone(), spec.clone(), c_in, c_out));
            }
        }
    }
    out
}

fn se_width_for(spec: &crate::space::CandidateOpSpec, width: usize, s_max: usize) -> usize {
    if !spec.has_se() {
        return 0;
    }
    let ratio = spec.se_expansion / spec.expansion_init;
    round_width(ratio * width as f64).clamp(1, s_max)
}

/// Build a table from the closed-form cost model. Monotone by construction
/// since every coefficient is nonnegative.
pub fn build_lut_synthetic(
    config: &SupernetConfig,
    model: &CostModelSpec,
    stride: u32,
) -> Result<LatencyTable> {
    config.validate()?;
    model.validate()?;
    let mut entries: BTreeMap<String, Vec<(u32, f64)>> = BTreeMap::new();
    for (sig, st, spec, c_in, c_out) in config_block_geometries(config) {
        let (lo, hi) = spec.expansion_interval;
        let h_max = round_width(hi * c_in as f64).max(1);
        let h_min = round_width(lo * c_in as f64).max(1).min(h_max);
        let s_max = if spec.has_se() {
            round_width(spec.se_expansion * c_in as f64 * hi / spec.expansion_init).max(1)
        } else {
            0
        };
        let grid = width_grid(h_min, h_max, c_in, stride);
        if grid.is_empty() {
            return Err(Error::Config(format!("empty width grid for `{sig}`")));
        }
        let slot = entries.entry(sig).or_default();
        for w in grid {
            let s = se_width_for(&spec, w as usize, s_max);
            let ms = model.op_cost(
                st.resolution_factor,
                c_in,
                c_out,
                w as usize,
                s,
                spec.kernel_tag,
            );
            match slot.binary_search_by_key(&w, |&(gw, _)| gw) {
                Ok(_) => {}
                Err(i) => slot.insert(i, (w, ms)),
            }
        }
    }
    for list in entries.values_mut() {
        monotonize(list);
    }

    // Stem and head folded into the fixed cost: one matvec each.
    let rf0 = config.stages[0].resolution_factor;
    let c0 = config.stages[0].channels_in;
    let c_last = config.stages[config.stages.len() - 1].channels_out;
    let fixed_cost_ms = model.c0
        + model.c1 * rf0 * config.input_dim as f64 * c0 as f64
        + model.c0
        + model.c2 * c_last as f64 * config.class_count as f64;

    let table = LatencyTable {
        meta: LutMeta {
            source: "synthetic".into(),
            host: "cost-model".into(),
            cost_model: Some(model.clone()),
            bench: None,
        },
        fixed_cost_ms,
        entries,
    };
    table.validate()?;
    Ok(table)
}

/// Build a table by timing block forwards on the host: per grid point the
/// median of `repeats` timed runs of `batch` forward passes, after `warmup`
/// untimed runs, monotonized over widths.
pub fn build_lut_measured(
    config: &SupernetConfig,
    bench: &BenchSpec,
    stride: u32,
) -> Result<LatencyTable> {
    config.validate()?;
    bench.validate()?;
    let net = crate::space::build_supernet(config)?;

    let time_block = |block: &OpBlock, activation: crate::space::Activation| -> Result<f64> {
        let input: Vec<f64> = (0..block.c_in)
            .map(|i| ((i as f64) * 0.37).sin() * 0.5)
            .collect();
        let run_once = || -> Result<()> {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let mut binds = Vec::new();
            let leaves = bind_block(&mut g, &net.store, block, false, &mut binds)?;
            op_forward(&mut g, block, &leaves, x, activation)?;
            Ok(())
        };
        for _ in 0..bench.warmup {
            run_once()?;
        }
        let mut samples = Vec::with_capacity(bench.repeats);
        for _ in 0..bench.repeats {
            let start = Instant::now();
            for _ in 0..bench.batch {
                run_once()?;
            }
            let elapsed = start.elapsed();
            samples.push(elapsed.as_secs_f64() * 1e3);
        }
        let ms = median(&mut samples);
        if !(ms > 0.0) {
            return Err(Error::Bench(
                "timer resolution too coarse for this op".into(),
            ));
        }
        Ok(ms)
    };

    let mut entries: BTreeMap<String, Vec<(u32, f64)>> = BTreeMap::new();
    for st in &net.stages {
        for layer in &st.layers {
            for block in layer {
                let sig = base_signature(
                    block.spec.kernel_tag,
                    block.spec.has_se(),
                    block.c_in,
                    block.c_out,
                    st.spec.resolution_factor,
                );
                if entries.contains_key(&sig) {
                    continue;
                }
                let grid = width_grid(block.h_min, block.h_max, block.c_in, stride);
                let mut list = Vec::with_capacity(grid.len());
                for w in grid {
                    let mut probe = block.clone();
                    probe.active_width = w as usize;
                    list.push((w, time_block(&probe, st.spec.activation)?));
                }
                monotonize(&mut list);
                entries.insert(sig, list);
            }
        }
    }

    // stem + head timing
    let fixed_cost_ms = {
        let input: Vec<f64> = (0..config.input_dim)
            .map(|i| ((i as f64) * 0.53).cos() * 0.5)
            .collect();
        let run_once = || -> Result<()> {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let sw = g.leaf(net.store.get(net.stem_w).clone());
            let sb = g.leaf(net.store.get(net.stem_b).clone());
            let h = g.matvec(sw, x)?;
            let h = g.add(h, sb)?;
            let h = g.relu(h)?;
            // head operates on the last stage's output size; use a zero pad
            let c_last = config.stages[config.stages.len() - 1].channels_out;
            let feat = g.constant(vec![0.1; c_last]);
            let hw = g.leaf(net.store.get(net.head_w).clone());
            let hb = g.leaf(net.store.get(net.head_b).clone());
            let logits = g.matvec(hw, feat)?;
            g.add(logits, hb)?;
            let _ = h;
            Ok(())
        };
        for _ in 0..bench.warmup {
            run_once()?;
        }
        let mut samples = Vec::with_capacity(bench.repeats);
        for _ in 0..bench.repeats {
            let start = Instant::now();
            for _ in 0..bench.batch {
                run_once()?;
            }
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
        median(&mut samples)
    };

    let table = LatencyTable {
        meta: LutMeta {
            source: "measured".into(),
            host: format!("{} {}", std::env::consts::OS, std::env::consts::ARCH),
            cost_model: None,
            bench: Some(bench.clone()),
        },
        fixed_cost_ms,
        entries,
    };
    table.validate()?;
    Ok(table)
}

pub fn lut_save(table: &LatencyTable, path: &std::path::Path) -> Result<()> {
    let text = serde_json::to_string_pretty(table)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn lut_load(path: &std::path::Path) -> Result<LatencyTable> {
    let text = std::fs::read_to_string(path)?;
    let table: LatencyTable = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("{} line {} column {}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    table.validate()?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Expected latency (differentiable) and discrete architecture latency
// ---------------------------------------------------------------------------

/// How per-layer latencies are weighted by the depth distribution inside a
/// stage. `Suffix` weights layer l by `sum_{k>=l} v_k` (a layer runs whenever
/// the sink picks it or any deeper layer); `Eq6` weights layer l by `v_l`
/// alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatWeighting {
    Eq6,
    #[default]
    Suffix,
}

/// Per-stage constants for the expected-latency graph: one latency vector
/// per layer (entry i = current latency of candidate op i at its active
/// width).
#[derive(Debug, Clone)]
pub struct StageLatencyPlan {
    pub layer_op_ms: Vec<Vec<f64>>,
}

/// Resolve per-op latencies at current active widths for every searchable
/// stage, plus the summed latency of fixed (non-searchable) stage blocks.
pub fn supernet_latency_plan(
    net: &Supernet,
    table: &LatencyTable,
) -> Result<(Vec<StageLatencyPlan>, f64)> {
    let mut plans = Vec::new();
    let mut fixed_ms = 0.0;
    for st in &net.stages {
        if st.searchable_index.is_some() {
            let mut layer_op_ms = Vec::new();
            for layer in &st.layers {
                let mut per_op = Vec::with_capacity(layer.len());
                for block in layer {
                    let sig = base_signature(
                        block.spec.kernel_tag,
                        block.spec.has_se(),
                        block.c_in,
                        block.c_out,
                        st.spec.resolution_factor,
                    );
                    per_op.push(lut_lookup(table, &sig, block.active_width)?);
                }
                layer_op_ms.push(per_op);
            }
            plans.push(StageLatencyPlan { layer_op_ms });
        } else {
            for layer in &st.layers {
                let block = &layer[0];
                let sig = base_signature(
                    block.spec.kernel_tag,
                    block.spec.has_se(),
                    block.c_in,
                    block.c_out,
                    st.spec.resolution_factor,
                );
                fixed_ms += lut_lookup(table, &sig, block.active_width)?;
            }
        }
    }
    Ok((plans, fixed_ms))
}

/// Per-layer depth coefficients for one stage from its depth-weight node.
pub fn depth_coefficients(
    g: &mut Graph,
    v: NodeId,
    layers: usize,
    weighting: LatWeighting,
) -> Result<Vec<NodeId>> {
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let mask: Vec<NodeId> = (0..layers)
            .map(|k| {
                let on = match weighting {
                    LatWeighting::Eq6 => k == l,
                    LatWeighting::Suffix => k >= l,
                };
                g.constant_scalar(if on { 1.0 } else { 0.0 })
            })
            .collect();
        out.push(g.weighted_sum(v, &mask)?);
    }
    Ok(out)
}

/// Differentiable expected latency: `fixed costs + sum_s sum_l c_l * sum_i
/// u_i * ms[l][i]`, where `c_l` comes from the stage's depth weights. The
/// result participates in the gradient graph, so latency gradients flow to
/// whatever produced `u` and `v`.
pub fn expected_latency(
    g: &mut Graph,
    u_per_layer: &[NodeId],
    v_per_stage: &[NodeId],
    plans: &[StageLatencyPlan],
    fixed_block_ms: f64,
    table: &LatencyTable,
    weighting: LatWeighting,
) -> Result<NodeId> {
    if v_per_stage.len() != plans.len() {
        return Err(Error::InvalidShape(format!(
            "{} depth-weight vectors for {} stages",
            v_per_stage.len(),
            plans.len()
        )));
    }
    let total_layers: usize = plans.iter().map(|p| p.layer_op_ms.len()).sum();
    if total_layers != u_per_layer.len() {
        return Err(Error::InvalidShape(format!(
            "{} op-weight vectors for {} layers",
            u_per_layer.len(),
            total_layers
        )));
    }

    let mut acc = g.constant_scalar(fixed_block_ms + table.fixed_cost_ms);
    let mut layer_cursor = 0;
    for (si, plan) in plans.iter().enumerate() {
        let layers = plan.layer_op_ms.len();
        let coeffs = depth_coefficients(g, v_per_stage[si], layers, weighting)?;
        for (l, coeff) in coeffs.iter().enumerate() {
            let u = u_per_layer[layer_cursor + l];
            let ms = &plan.layer_op_ms[l];
            if g.value(u).len() != ms.len() {
                return Err(Error::InvalidShape(format!(
                    "op-weight length {} != op count {} at stage {si} layer {l}",
                    g.value(u).len(),
                    ms.len()
                )));
            }
            let consts: Vec<NodeId> = ms.iter().map(|&m| g.constant_scalar(m)).collect();
            let layer_ms = g.weighted_sum(u, &consts)?;
            let term = g.mul(*coeff, layer_ms)?;
            acc = g.add(acc, term)?;
        }
        layer_cursor += layers;
    }
    Ok(acc)
}

/// Latency of a discrete architecture: fixed cost plus the sum over kept
/// layers of interpolated lookups.
pub fn arch_latency(arch: &DerivedArch, table: &LatencyTable) -> Result<f64> {
    let mut total = table.fixed_cost_ms;
    for stage in &arch.stages {
        for layer in stage.layers.iter().take(stage.depth) {
            let sig = base_signature(
                layer.kernel_tag,
                layer.se_width > 0,
                layer.c_in,
                layer.c_out,
                stage.resolution_factor,
            );
            total += lut_lookup(table, &sig, layer.width)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::default_config;

    fn flat_model() -> CostModelSpec {
        CostModelSpec {
            c0: 1.0,
            c1: 0.0,
            c2: 0.0,
            c_dw: 0.0,
            c_se: 0.0,
        }
    }

    #[test]
    fn constant_model_gives_unit_entries() {
        let cfg = default_config();
        let table = build_lut_synthetic(&cfg, &flat_model(), 0).unwrap();
        for list in table.entries.values() {
            for &(_, ms) in list {
                assert_eq!(ms, 1.0);
            }
        }
    }

    #[test]
    fn c1_term_is_linear_in_width() {
        let model = CostModelSpec {
            c0: 0.0,
            c1: 1e-3,
            c2: 0.0,
            c_dw: 0.0,
            c_se: 0.0,
        };
        let a = model.op_cost(2.0, 8, 10, 16, 0, 3);
        let b = model.op_cost(2.0, 8, 10, 32, 0, 3);
        assert!((b - 2.0 * a).abs() < 1e-15);
    }

    #[test]
    fn synthetic_entries_match_hand_evaluation() {
        let cfg = default_config();
        let model = CostModelSpec::default();
        let table = build_lut_synthetic(&cfg, &model, 0).unwrap();
        // spot-check five signatures against an independent evaluation of
        // the cost formula
        let cases = [
            // (stage idx, op idx, width)
            (1usize, 0usize, 10usize),
            (2, 4, 30),
            (3, 1, 20),
            (5, 5, 70),
            (6, 7, 100),
        ];
        for (si, oi, w) in cases {
            let st = &cfg.stages[si];
            let op = &cfg.ops[oi];
            let c_in = st.channels_in;
            let c_out = st.channels_out;
            let sig = base_signature(op.kernel_tag, op.has_se(), c_in, c_out, st.resolution_factor);
            let s = if op.has_se() {
                let s_max = round_width(
                    op.se_expansion * c_in as f64 * op.expansion_interval.1 / op.expansion_init,
                )
                .max(1);
                round_width(op.se_expansion / op.expansion_init * w as f64).clamp(1, s_max)
            } else {
                0
            };
            let expect = model.c0
                + model.c1 * st.resolution_factor * c_in as f64 * w as f64
                + model.c2 * st.resolution_factor * w as f64 * c_out as f64
                + model.c_dw * st.resolution_factor * w as f64 * (op.kernel_tag * op.kernel_tag) as f64
                + model.c_se * w as f64 * s as f64;
            let got = lut_lookup(&table, &sig, w).unwrap();
            assert!((got - expect).abs() < 1e-12, "{sig} w={w}: {got} vs {expect}");
        }
    }

    #[test]
    fn lookup_exact_at_knots_and_linear_between() {
        let mut entries = BTreeMap::new();
        entries.insert("sig".to_string(), vec![(8u32, 2.0), (16u32, 4.0)]);
        let table = LatencyTable {
            meta: LutMeta {
                source: "synthetic".into(),
                host: "test".into(),
                cost_model: None,
                bench: None,
            },
            fixed_cost_ms: 0.0,
            entries,
        };
        assert_eq!(lut_lookup(&table, "sig", 8).unwrap(), 2.0);
        assert_eq!(lut_lookup(&table, "sig", 16).unwrap(), 4.0);
        assert_eq!(lut_lookup(&table, "sig", 12).unwrap(), 3.0);
        assert!(matches!(
            lut_lookup(&table, "sig", 4),
            Err(Error::GridRange { .. })
        ));
        assert!(matches!(
            lut_lookup(&table, "nope", 8),
            Err(Error::MissingEntry { .. })
        ));
    }

    #[test]
    fn random_queries_stay_within_bracketing_knots() {
        use rand::{Rng, SeedableRng};
        let cfg = default_config();
        let table = build_lut_synthetic(&cfg, &CostModelSpec::default(), 0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sigs: Vec<&String> = table.entries.keys().collect();
        for _ in 0..100 {
            let sig = sigs[rng.random_range(0..sigs.len())];
            let list = &table.entries[sig];
            let (lo, hi) = (list[0].0 as usize, list[list.len() - 1].0 as usize);
            let w = rng.random_range(lo..=hi);
            let v = lut_lookup(&table, sig, w).unwrap();
            let i = list.partition_point(|&(gw, _)| (gw as usize) <= w);
            let below = list[i.saturating_sub(1)].1;
            let above = list[i.min(list.len() - 1)].1;
            assert!(v >= below.min(above) - 1e-12 && v <= below.max(above) + 1e-12);
        }
    }

    #[test]
    fn lookup_is_monotone_in_width() {
        let cfg = default_config();
        let table = build_lut_synthetic(&cfg, &CostModelSpec::default(), 0).unwrap();
        for (sig, list) in &table.entries {
            let (lo, hi) = (list[0].0 as usize, list[list.len() - 1].0 as usize);
            let mut prev = 0.0;
            for w in lo..=hi {
                let v = lut_lookup(&table, sig, w).unwrap();
                assert!(v >= prev - 1e-12, "{sig} at {w}");
                prev = v;
            }
        }
    }

    #[test]
    fn monotonize_applies_running_maximum() {
        let mut list = vec![(8u32, 1.2), (16u32, 1.1)];
        monotonize(&mut list);
        assert_eq!(list, vec![(8, 1.2), (16, 1.2)]);
    }

    #[test]
    fn median_reducer_definition() {
        let mut odd = [3.0, 1.0, 2.0, 9.0, 4.0];
        assert_eq!(median(&mut odd), 3.0);
        let mut even = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&mut even), 2.5);
    }

    #[test]
    fn save_load_round_trip_is_lossless() {
        let cfg = default_config();
        let table = build_lut_synthetic(&cfg, &CostModelSpec::default(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lut.json");
        lut_save(&table, &path).unwrap();
        let loaded = lut_load(&path).unwrap();
        assert_eq!(table, loaded);
    }

    #[test]
    fn load_rejects_non_monotone_widths_and_missing_fields() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(
            &bad,
            r#"{"meta":{"source":"synthetic","host":"t"},"fixed_cost_ms":0.1,
               "entries":{"s":[[16,1.0],[8,2.0]]}}"#,
        )
        .unwrap();
        match lut_load(&bad) {
            Err(Error::Parse { context, .. }) => assert!(context.contains("s")),
            other => panic!("expected parse error, got {other:?}"),
        }

        let missing = dir.path().join("missing.json");
        std::fs::write(
            &missing,
            r#"{"meta":{"source":"synthetic","host":"t"},"entries":{}}"#,
        )
        .unwrap();
        match lut_load(&missing) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("fixed_cost_ms")),
            other => panic!("expected parse error naming the key, got {other:?}"),
        }
    }

    #[test]
    fn expected_latency_gradient_matches_finite_differences() {
        use crate::gradcore::Array;
        use rand::{Rng, SeedableRng};
        // two stages (2 + 1 layers), soft weights from alpha/beta rows
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let plans = vec![
            StageLatencyPlan {
                layer_op_ms: vec![vec![1.0, 3.0, 2.0], vec![0.5, 1.5, 2.5]],
            },
            StageLatencyPlan {
                layer_op_ms: vec![vec![4.0, 1.0, 0.25]],
            },
        ];
        let table = LatencyTable {
            meta: LutMeta {
                source: "synthetic".into(),
                host: "test".into(),
                cost_model: None,
                bench: None,
            },
            fixed_cost_ms: 0.3,
            entries: BTreeMap::new(),
        };
        let alpha: Vec<f64> = (0..9).map(|_| rng.random::<f64>() - 0.5).collect();
        let beta: Vec<f64> = (0..3).map(|_| rng.random::<f64>() - 0.5).collect();
        let eval_and_grad = |alpha: &[f64], beta: &[f64], want_grad: bool| {
            let mut g = crate::gradcore::Graph::new();
            let mut u_nodes = Vec::new();
            let mut a_leaves = Vec::new();
            for l in 0..3 {
                let leaf = g.leaf(
                    Array::from_vec(alpha[l * 3..(l + 1) * 3].to_vec()).with_requires_grad(true),
                );
                a_leaves.push(leaf);
                u_nodes.push(g.softmax(leaf, 0.8).unwrap());
            }
            let b1 = g.leaf(Array::from_vec(beta[..2].to_vec()).with_requires_grad(true));
            let b2 = g.leaf(Array::from_vec(beta[2..].to_vec()).with_requires_grad(true));
            let v_nodes = vec![g.softmax(b1, 1.0).unwrap(), g.softmax(b2, 1.0).unwrap()];
            let lat = expected_latency(
                &mut g,
                &u_nodes,
                &v_nodes,
                &plans,
                0.1,
                &table,
                LatWeighting::Suffix,
            )
            .unwrap();
            let value = g.value(lat).item();
            if !want_grad {
                return (value, Vec::new());
            }
            let grads = g.backward(lat).unwrap();
            let mut flat = Vec::new();
            for leaf in a_leaves.iter().chain([&b1, &b2]) {
                flat.extend_from_slice(grads.get(*leaf).unwrap().values());
            }
            (value, flat)
        };
        let (_, analytic) = eval_and_grad(&alpha, &beta, true);
        let mut params: Vec<f64> = alpha.iter().chain(beta.iter()).cloned().collect();
        let h = 1e-5;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params[i];
            params[i] = orig + h;
            let (plus, _) = eval_and_grad(&params[..9], &params[9..], false);
            params[i] = orig - h;
            let (minus, _) = eval_and_grad(&params[..9], &params[9..], false);
            params[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            assert!(
                (a - numeric).abs() / numeric.abs().max(1.0) <= 1e-4,
                "param {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn eq6_weighting_weights_each_layer_by_its_own_v() {
        let plans = vec![StageLatencyPlan {
            layer_op_ms: vec![vec![2.0], vec![4.0]],
        }];
        let table = LatencyTable {
            meta: LutMeta {
                source: "synthetic".into(),
                host: "test".into(),
                cost_model: None,
                bench: None,
            },
            fixed_cost_ms: 0.0,
            entries: BTreeMap::new(),
        };
        let mut g = crate::gradcore::Graph::new();
        let u = vec![g.constant(vec![1.0]), g.constant(vec![1.0])];
        let v = vec![g.constant(vec![0.5, 0.5])];
        // suffix: layer 1 coefficient 1.0, layer 2 coefficient 0.5
        let suffix =
            expected_latency(&mut g, &u, &v, &plans, 0.0, &table, LatWeighting::Suffix).unwrap();
        assert!((g.value(suffix).item() - (2.0 + 0.5 * 4.0)).abs() < 1e-12);
        // literal per-layer weighting: both coefficients 0.5
        let eq6 =
            expected_latency(&mut g, &u, &v, &plans, 0.0, &table, LatWeighting::Eq6).unwrap();
        assert!((g.value(eq6).item() - (0.5 * 2.0 + 0.5 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn measured_table_median_and_repeatability() {
        // tiny config to keep bench time low
        let cfg = crate::space::SupernetConfig {
            stages: vec![crate::space::StageSpec {
                index: 0,
                channels_in: 8,
                channels_out: 8,
                max_layers: 1,
                min_layers: 1,
                activation: crate::space::Activation::Relu,
                searchable: true,
                resolution_factor: 1.0,
            }],
            ops: vec![crate::space::CandidateOpSpec {
                name: "k3_e4".into(),
                kernel_tag: 3,
                expansion_init: 4.0,
                expansion_interval: (4.0, 4.0),
                se_expansion: 0.0,
            }],
            class_count: 2,
            input_dim: 4,
            seed: 1,
        };
        let bench = BenchSpec {
            repeats: 9,
            warmup: 2,
            batch: 64,
            reducer: "median".into(),
        };
        let a = build_lut_measured(&cfg, &bench, 0).unwrap();
        let b = build_lut_measured(&cfg, &bench, 0).unwrap();
        for (sig, list_a) in &a.entries {
            let list_b = &b.entries[sig];
            for (&(w, ms_a), &(_, ms_b)) in list_a.iter().zip(list_b) {
                let rel = (ms_a - ms_b).abs() / ms_a.max(ms_b);
                assert!(
                    rel <= 0.20,
                    "entry {sig} w={w}: {ms_a} vs {ms_b} differ by {rel:.3}"
                );
            }
        }
    }
}
