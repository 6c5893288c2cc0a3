//! Elasticity-scaling: derive a discrete seed network from the current
//! architecture parameters, then repeatedly find the largest width-scaling
//! factor gamma that keeps the seed's latency at or under the target —
//! first globally, then over progressively finer stage suffixes — and write
//! the resulting widths back into the shared supernet.

use serde::{Deserialize, Serialize};

use crate::derive::{argmax_selection, DerivedArch};
use crate::error::Result;
use crate::latmodel::{lut_lookup, LatencyTable};
use crate::relax::DepthMode;
use crate::space::{base_signature, round_width, Supernet};

/// One seed layer: the chosen op at its current width, with the width
/// bounds its expansion interval allows.
#[derive(Debug, Clone)]
pub struct SeedLayer {
    /// Global searchable-layer index (for supernet write-back).
    pub global_layer: usize,
    /// Index among searchable stages.
    pub stage: usize,
    pub op_index: usize,
    pub signature: String,
    pub width: usize,
    pub floor: usize,
    pub cap: usize,
}

/// The discrete network elasticity-scaling operates on: kept searchable
/// layers in execution order plus the constant latency of everything else.
#[derive(Debug, Clone)]
pub struct SeedNetwork {
    pub layers: Vec<SeedLayer>,
    /// (signature, width) of fixed-stage blocks, looked up per evaluation.
    pub fixed_entries: Vec<(String, usize)>,
    pub stage_depths: Vec<usize>,
}

impl SeedNetwork {
    pub fn latency(&self, table: &LatencyTable) -> Result<f64> {
        let mut total = table.fixed_cost_ms;
        for (sig, w) in &self.fixed_entries {
            total += lut_lookup(table, sig, *w)?;
        }
        for layer in &self.layers {
            total += lut_lookup(table, &layer.signature, layer.width)?;
        }
        Ok(total)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.width).collect()
    }
}

/// Derive the seed: strongest op per layer, strongest depth per stage, at
/// the blocks' current active widths.
pub fn derive_seed(net: &Supernet, depth_mode: DepthMode) -> SeedNetwork {
    let sel = argmax_selection(net, depth_mode);
    let mut layers = Vec::new();
    let mut fixed_entries = Vec::new();
    for st in &net.stages {
        if st.searchable_index.is_none() {
            for layer in &st.layers {
                let block = &layer[0];
                fixed_entries.push((
                    base_signature(
                        block.spec.kernel_tag,
                        block.spec.has_se(),
                        block.c_in,
                        block.c_out,
                        st.spec.resolution_factor,
                    ),
                    block.active_width,
                ));
            }
        }
    }
    for (global, si, ssi, l) in net.searchable_layers() {
        if !sel.kept[global] {
            continue;
        }
        let block = &net.stages[si].layers[l][sel.layer_ops[global]];
        layers.push(SeedLayer {
            global_layer: global,
            stage: ssi,
            op_index: sel.layer_ops[global],
            signature: base_signature(
                block.spec.kernel_tag,
                block.spec.has_se(),
                block.c_in,
                block.c_out,
                net.stages[si].spec.resolution_factor,
            ),
            width: block.active_width,
            floor: block.h_min,
            cap: block.h_max,
        });
    }
    SeedNetwork {
        layers,
        fixed_entries,
        stage_depths: sel.stage_depths,
    }
}

/// Candidate widths after scaling stages >= `from_stage` by gamma:
/// `clamp(round(gamma * w), floor, cap)` per layer, earlier stages
/// untouched.
pub fn scale_widths(seed: &SeedNetwork, gamma: f64, from_stage: usize) -> Vec<usize> {
    seed.layers
        .iter()
        .map(|l| {
            if l.stage >= from_stage {
                round_width(gamma * l.width as f64).clamp(l.floor, l.cap)
            } else {
                l.width
            }
        })
        .collect()
}

fn latency_with_widths(
    seed: &SeedNetwork,
    widths: &[usize],
    table: &LatencyTable,
) -> Result<f64> {
    let mut total = table.fixed_cost_ms;
    for (sig, w) in &seed.fixed_entries {
        total += lut_lookup(table, sig, *w)?;
    }
    for (layer, &w) in seed.layers.iter().zip(widths) {
        total += lut_lookup(table, &layer.signature, w)?;
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct GammaResult {
    pub gamma: f64,
    pub widths: Vec<usize>,
    pub latency_ms: f64,
    pub infeasible: bool,
}

/// Largest gamma whose scaled widths keep the seed at or under the target.
/// Binary search over gamma, valid because widths are non-decreasing step
/// functions of gamma and the table is monotone in width. When even the
/// floors exceed the target, returns the floor configuration flagged
/// infeasible.
pub fn find_max_gamma(
    seed: &SeedNetwork,
    from_stage: usize,
    target_ms: f64,
    table: &LatencyTable,
) -> Result<GammaResult> {
    if seed.layers.is_empty() {
        let lat = seed.latency(table)?;
        return Ok(GammaResult {
            gamma: 1.0,
            widths: Vec::new(),
            latency_ms: lat,
            infeasible: lat > target_ms,
        });
    }
    let gamma_floor = 1e-9;
    let floor_widths = scale_widths(seed, gamma_floor, from_stage);
    let floor_lat = latency_with_widths(seed, &floor_widths, table)?;
    if floor_lat > target_ms {
        return Ok(GammaResult {
            gamma: gamma_floor,
            widths: floor_widths,
            latency_ms: floor_lat,
            infeasible: true,
        });
    }

    let gamma_hi = seed
        .layers
        .iter()
        .filter(|l| l.stage >= from_stage)
        .map(|l| (l.cap as f64 + 0.5) / l.width.max(1) as f64)
        .fold(1.0_f64, f64::max);
    let cap_widths = scale_widths(seed, gamma_hi, from_stage);
    let cap_lat = latency_with_widths(seed, &cap_widths, table)?;
    if cap_lat <= target_ms {
        return Ok(GammaResult {
            gamma: gamma_hi,
            widths: cap_widths,
            latency_ms: cap_lat,
            infeasible: false,
        });
    }

    let mut lo = gamma_floor;
    let mut hi = gamma_hi;
    for _ in 0..200 {
        let lo_w = scale_widths(seed, lo, from_stage);
        let hi_w = scale_widths(seed, hi, from_stage);
        if lo_w == hi_w {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let mid_w = scale_widths(seed, mid, from_stage);
        if latency_with_widths(seed, &mid_w, table)? <= target_ms {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * gamma_hi.max(1.0) {
            break;
        }
    }
    let widths = scale_widths(seed, lo, from_stage);
    let latency_ms = latency_with_widths(seed, &widths, table)?;
    Ok(GammaResult {
        gamma: lo,
        widths,
        latency_ms,
        infeasible: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthChange {
    pub layer: usize,
    pub old_width: usize,
    pub new_width: usize,
}

/// Record of one scaling pass: the suffix it scaled, the gamma it found,
/// the widths it changed, and the seed latency afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPlan {
    pub from_stage: usize,
    pub gamma: f64,
    pub changes: Vec<WidthChange>,
    pub latency_ms: f64,
    pub infeasible: bool,
}

#[derive(Debug, Clone)]
pub struct ElasticOutcome {
    pub plans: Vec<ScalingPlan>,
    pub final_latency_ms: f64,
    pub infeasible: bool,
}

/// Full strategy on a seed: one global pass then progressively finer
/// suffixes. Mutates the seed's widths in place and returns the per-pass
/// plans.
pub fn scale_seed(
    seed: &mut SeedNetwork,
    target_ms: f64,
    table: &LatencyTable,
    stage_count: usize,
) -> Result<ElasticOutcome> {
    let mut plans = Vec::new();
    let mut infeasible = false;
    for from_stage in 0..stage_count.max(1) {
        let result = find_max_gamma(seed, from_stage, target_ms, table)?;
        let mut changes = Vec::new();
        for (layer, &w) in seed.layers.iter_mut().zip(&result.widths) {
            if layer.width != w {
                changes.push(WidthChange {
                    layer: layer.global_layer,
                    old_width: layer.width,
                    new_width: w,
                });
                layer.width = w;
            }
        }
        infeasible |= result.infeasible;
        plans.push(ScalingPlan {
            from_stage,
            gamma: result.gamma,
            changes,
            latency_ms: result.latency_ms,
            infeasible: result.infeasible,
        });
    }
    let final_latency_ms = seed.latency(table)?;
    Ok(ElasticOutcome {
        plans,
        final_latency_ms,
        infeasible,
    })
}

/// Derive a seed from the supernet, scale it to the target, and write the
/// resulting widths back into the chosen blocks via `set_active_width`
/// (shared weights preserved).
pub fn elasticity_scale(
    net: &mut Supernet,
    depth_mode: DepthMode,
    target_ms: f64,
    table: &LatencyTable,
) -> Result<ElasticOutcome> {
    let mut seed = derive_seed(net, depth_mode);
    let stage_count = net.config.searchable_stage_count();
    let outcome = scale_seed(&mut seed, target_ms, table, stage_count)?;

    let layer_map = net.searchable_layers();
    let store = net.store.clone();
    for layer in &seed.layers {
        let (_, si, _, l) = layer_map[layer.global_layer];
        let block = &mut net.stages[si].layers[l][layer.op_index];
        block.set_active_width(&store, layer.width)?;
    }
    Ok(outcome)
}

/// Standalone planning on an exported architecture: scale the searchable
/// stages of `arch` to the target and return both the per-pass plans and the
/// rescaled architecture.
pub fn plan_for_arch(
    arch: &DerivedArch,
    target_ms: f64,
    table: &LatencyTable,
) -> Result<(Vec<ScalingPlan>, DerivedArch, bool)> {
    arch.validate()?;
    let mut layers = Vec::new();
    let mut fixed_entries = Vec::new();
    let mut searchable_stage = 0usize;
    let mut global = 0usize;
    let mut stage_depths = Vec::new();
    for st in &arch.stages {
        if st.searchable {
            stage_depths.push(st.depth);
            for layer in st.layers.iter().take(st.depth) {
                let (lo, hi) = layer.expansion_interval;
                layers.push(SeedLayer {
                    global_layer: global,
                    stage: searchable_stage,
                    op_index: 0,
                    signature: base_signature(
                        layer.kernel_tag,
                        layer.se_width > 0,
                        layer.c_in,
                        layer.c_out,
                        st.resolution_factor,
                    ),
                    width: layer.width,
                    floor: round_width(lo * layer.c_in as f64).max(1),
                    cap: round_width(hi * layer.c_in as f64).max(1),
                });
                global += 1;
            }
            searchable_stage += 1;
        } else {
            for layer in st.layers.iter().take(st.depth) {
                fixed_entries.push((
                    base_signature(
                        layer.kernel_tag,
                        layer.se_width > 0,
                        layer.c_in,
                        layer.c_out,
                        st.resolution_factor,
                    ),
                    layer.width,
                ));
            }
        }
    }
    let mut seed = SeedNetwork {
        layers,
        fixed_entries,
        stage_depths,
    };
    let outcome = scale_seed(&mut seed, target_ms, table, searchable_stage)?;

    let mut scaled = arch.clone();
    let mut cursor = 0usize;
    for st in scaled.stages.iter_mut().filter(|s| s.searchable) {
        for layer in st.layers.iter_mut().take(st.depth) {
            let new_w = seed.layers[cursor].width;
            if layer.se_width > 0 && layer.width > 0 {
                let ratio = layer.se_width as f64 / layer.width as f64;
                layer.se_width = round_width(ratio * new_w as f64).max(1);
            }
            layer.width = new_w;
            cursor += 1;
        }
    }
    Ok((outcome.plans, scaled, outcome.infeasible))
}

/// Brute-force reference: sweep gamma over a fixed grid instead of
/// bisecting. Used by tests as the independent oracle for `find_max_gamma`
/// and the full strategy.
pub fn scale_seed_sweep(
    seed: &mut SeedNetwork,
    target_ms: f64,
    table: &LatencyTable,
    stage_count: usize,
    step: f64,
) -> Result<ElasticOutcome> {
    let mut plans = Vec::new();
    let mut infeasible = false;
    for from_stage in 0..stage_count.max(1) {
        let gamma_hi = seed
            .layers
            .iter()
            .filter(|l| l.stage >= from_stage)
            .map(|l| (l.cap as f64 + 0.5) / l.width.max(1) as f64)
            .fold(1.0_f64, f64::max);
        let mut best: Option<(f64, Vec<usize>, f64)> = None;
        let mut gamma = step;
        while gamma <= gamma_hi + step {
            let widths = scale_widths(seed, gamma, from_stage);
            let lat = latency_with_widths(seed, &widths, table)?;
            if lat <= target_ms {
                best = Some((gamma, widths, lat));
            }
            gamma += step;
        }
        match best {
            Some((gamma, widths, lat)) => {
                let mut changes = Vec::new();
                for (layer, &w) in seed.layers.iter_mut().zip(&widths) {
                    if layer.width != w {
                        changes.push(WidthChange {
                            layer: layer.global_layer,
                            old_width: layer.width,
                            new_width: w,
                        });
                        layer.width = w;
                    }
                }
                plans.push(ScalingPlan {
                    from_stage,
                    gamma,
                    changes,
                    latency_ms: lat,
                    infeasible: false,
                });
            }
            None => {
                let widths = scale_widths(seed, 1e-9, from_stage);
                let lat = latency_with_widths(seed, &widths, table)?;
                for (layer, &w) in seed.layers.iter_mut().zip(&widths) {
                    layer.width = w;
                }
                infeasible = true;
                plans.push(ScalingPlan {
                    from_stage,
                    gamma: 1e-9,
                    changes: Vec::new(),
                    latency_ms: lat,
                    infeasible: true,
                });
            }
        }
    }
    let final_latency_ms = seed.latency(table)?;
    Ok(ElasticOutcome {
        plans,
        final_latency_ms,
        infeasible,
    })
}
