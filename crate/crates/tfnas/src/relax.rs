//! Continuous relaxations and sampling: Gumbel-Softmax operation sampling
//! with straight-through hard forward, bi-sampling second paths, and the
//! three depth-level spaces (sink-connecting plus the skip-in/skip-out
//! baselines).

use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcore::{argmax, softmax_values, Graph, NodeId};
use crate::latmodel::{depth_coefficients, LatWeighting};
use crate::space::{op_forward, Activation, BlockLeaves, OpBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelaxMode {
    /// Mix with the soft Gumbel weights (differentiable everywhere; used by
    /// gradient checks).
    Soft,
    /// Forward mixes with a one-hot at the argmax while gradients propagate
    /// through the soft weights (straight-through).
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMode {
    SinkConnect,
    SkipIn,
    SkipOut,
}

impl DepthMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sink" => Ok(DepthMode::SinkConnect),
            "skip-in" => Ok(DepthMode::SkipIn),
            "skip-out" => Ok(DepthMode::SkipOut),
            other => Err(Error::InvalidArgument(format!(
                "unknown depth space `{other}` (expected sink|skip-in|skip-out)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondPathMode {
    Random,
    Gumbel,
    MinAlpha,
    MaxAlpha,
}

impl SecondPathMode {
    pub fn parse(s: &str) -> Result<Option<Self>> {
        match s {
            "random" => Ok(Some(SecondPathMode::Random)),
            "gumbel" => Ok(Some(SecondPathMode::Gumbel)),
            "min-alpha" => Ok(Some(SecondPathMode::MinAlpha)),
            "max-alpha" => Ok(Some(SecondPathMode::MaxAlpha)),
            "none" => Ok(None),
            other => Err(Error::InvalidArgument(format!(
                "unknown second-path mode `{other}`"
            ))),
        }
    }
}

/// One categorical draw: noise, temperature, the soft weight vector, and the
/// hard argmax index (lowest index wins ties).
#[derive(Debug, Clone)]
pub struct GumbelDraw {
    pub noise: Vec<f64>,
    pub tau: f64,
    pub soft_weights: Vec<f64>,
    pub hard_index: usize,
}

/// i.i.d. Gumbel(0,1) noise: `-log(-log U)` with U clamped away from both
/// endpoints.
pub fn sample_gumbel<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Plain-value draw over `logits + noise` at temperature tau. The graph
/// reconstruction in `gumbel_weights` reproduces these values bitwise.
pub fn gumbel_draw(logits: &[f64], noise: &[f64], tau: f64) -> GumbelDraw {
    debug_assert_eq!(logits.len(), noise.len());
    let z: Vec<f64> = logits.iter().zip(noise).map(|(a, g)| a + g).collect();
    let soft = softmax_values(&z, tau);
    let hard = argmax(&soft);
    GumbelDraw {
        noise: noise.to_vec(),
        tau,
        soft_weights: soft,
        hard_index: hard,
    }
}

/// In-graph relaxation weights from a logits node plus fixed noise. Returns
/// the node to mix with (soft weights, or their straight-through hardening)
/// and the soft-weights node itself.
pub fn gumbel_weights(
    g: &mut Graph,
    logits: NodeId,
    noise: &[f64],
    tau: f64,
    mode: RelaxMode,
) -> Result<(NodeId, NodeId)> {
    if g.value(logits).len() != noise.len() {
        return Err(Error::InvalidShape(format!(
            "noise length {} != logits length {}",
            noise.len(),
            g.value(logits).len()
        )));
    }
    let noise_node = g.constant(noise.to_vec());
    let z = g.add(logits, noise_node)?;
    let soft = g.softmax(z, tau)?;
    let mix = match mode {
        RelaxMode::Soft => soft,
        RelaxMode::Hard => g.hard_max(soft)?,
    };
    Ok((mix, soft))
}

/// Second-path selection for bi-sampling. `alpha_row` covers the real ops;
/// `gumbel` draws over the same logits as the primary (so in a skip-in layer
/// it may return the skip index = `alpha_row.len()`).
pub fn second_path<R: Rng>(
    mode: SecondPathMode,
    alpha_row: &[f64],
    primary_index: usize,
    tau: f64,
    rng: &mut R,
) -> Result<usize> {
    let n = alpha_row.len();
    match mode {
        SecondPathMode::Random => {
            if n < 2 {
                return Err(Error::Sampling(
                    "random second path needs at least two candidate ops".into(),
                ));
            }
            // uniform over real ops != primary
            let mut pool: Vec<usize> = (0..n).filter(|&i| i != primary_index).collect();
            let k = rng.random_range(0..pool.len());
            Ok(pool.swap_remove(k))
        }
        SecondPathMode::Gumbel => {
            let noise = sample_gumbel(n, rng);
            Ok(gumbel_draw(alpha_row, &noise, tau).hard_index)
        }
        SecondPathMode::MinAlpha => {
            let mut best = 0;
            for (i, &v) in alpha_row.iter().enumerate().skip(1) {
                if v < alpha_row[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        SecondPathMode::MaxAlpha => Ok(argmax(alpha_row)),
    }
}

/// Per-step sampling state: one primary draw per layer, plus the second-path
/// indices when bi-sampling is on.
#[derive(Debug, Clone)]
pub struct PathPair {
    pub primary: Vec<GumbelDraw>,
    pub secondary: Option<(SecondPathMode, Vec<usize>)>,
}

/// Draw a path pair. `layer_logits[l]` is the full logit vector the primary
/// draw runs over (alpha row, plus the skip logit appended for skip-in
/// layers); `real_ops` is the candidate-op count without skip.
pub fn sample_path_pair<R: Rng>(
    layer_logits: &[Vec<f64>],
    real_ops: usize,
    tau: f64,
    second: Option<SecondPathMode>,
    rng: &mut R,
) -> Result<PathPair> {
    let mut primary = Vec::with_capacity(layer_logits.len());
    for logits in layer_logits {
        let noise = sample_gumbel(logits.len(), rng);
        primary.push(gumbel_draw(logits, &noise, tau));
    }
    let secondary = match second {
        None => None,
        Some(mode) => {
            let mut picks = Vec::with_capacity(layer_logits.len());
            for (l, logits) in layer_logits.iter().enumerate() {
                let row = &logits[..real_ops.min(logits.len())];
                let idx = match mode {
                    // a gumbel second draw runs over the same full logits as
                    // the primary
                    SecondPathMode::Gumbel => {
                        let noise = sample_gumbel(logits.len(), rng);
                        gumbel_draw(logits, &noise, tau).hard_index
                    }
                    _ => second_path(mode, row, primary[l].hard_index, tau, rng)?,
                };
                picks.push(idx);
            }
            Some((mode, picks))
        }
    };
    Ok(PathPair { primary, secondary })
}

// ---------------------------------------------------------------------------
// Stage forward
// ---------------------------------------------------------------------------

/// One searchable layer's inputs for `stage_forward`. `leaves[i]` is `None`
/// for blocks that are not executed this step (hard weight steps bind only
/// the selected paths). `direct` forces plain execution of one op
/// (second-path passes); the value `blocks.len()` means the skip branch.
pub struct StageLayerInput<'a> {
    pub blocks: &'a [OpBlock],
    pub leaves: &'a [Option<BlockLeaves>],
    pub alpha_leaf: Option<NodeId>,
    pub skip_leaf: Option<NodeId>,
    /// Current sigmoid of the skip logit, for skip-out passes that treat the
    /// gate as a constant (weight steps and second paths).
    pub skip_gate_value: Option<f64>,
    pub draw: &'a GumbelDraw,
    pub direct: Option<usize>,
}

pub struct StageForwardInput<'a> {
    pub depth_mode: DepthMode,
    pub activation: Activation,
    pub mode: RelaxMode,
    /// Build every branch and mix through the relaxation weights. When
    /// false (hard weight steps) only the selected branch executes.
    pub mix_all: bool,
    pub layers: Vec<StageLayerInput<'a>>,
    /// softmax(beta) node, shared across a bi-sampling pair (sink mode).
    pub depth_weights: Option<NodeId>,
    /// Per layer, per real op: current latency constants (ms). When present,
    /// per-layer latency terms are emitted.
    pub latencies: Option<&'a [Vec<f64>]>,
    pub weighting: LatWeighting,
}

pub struct StageForwardOutput {
    pub x_out: NodeId,
    /// Mixing-weight node per layer (includes the skip entry for skip-in
    /// layers); `None` for layers executed directly.
    pub u_nodes: Vec<Option<NodeId>>,
    pub latency_terms: Option<Vec<NodeId>>,
}

fn one_minus(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    let one = g.constant_scalar(1.0);
    let neg = g.scale(p, -1.0)?;
    g.add(one, neg)
}

/// Run one searchable stage from the feature node `x_in`. Sink mode feeds
/// every layer to the next and mixes all layer outputs at the sink with the
/// depth weights; skip modes are sequential with an extra identity branch
/// per layer (skip-in) or a sigmoid-gated blend (skip-out). The first layer
/// of a stage never has a skip branch (it changes the channel count).
pub fn stage_forward(
    g: &mut Graph,
    x_in: NodeId,
    input: StageForwardInput<'_>,
) -> Result<StageForwardOutput> {
    let StageForwardInput {
        depth_mode,
        activation,
        mode,
        mix_all,
        layers,
        depth_weights,
        latencies,
        weighting,
    } = input;
    if layers.is_empty() {
        return Err(Error::InvalidArgument("stage with no layers".into()));
    }
    if depth_mode == DepthMode::SinkConnect {
        let v = depth_weights.ok_or_else(|| {
            Error::InvalidShape("sink-connecting stage needs depth weights".into())
        })?;
        if g.value(v).len() != layers.len() {
            return Err(Error::InvalidShape(format!(
                "depth weights length {} != stage layers {}",
                g.value(v).len(),
                layers.len()
            )));
        }
    }

    let mut u_nodes: Vec<Option<NodeId>> = Vec::with_capacity(layers.len());
    let mut layer_lat_inputs: Vec<LayerLatInput> = Vec::with_capacity(layers.len());
    let mut outs: Vec<NodeId> = Vec::with_capacity(layers.len());
    let mut x_cur = x_in;

    for (l, layer) in layers.iter().enumerate() {
        let n_ops = layer.blocks.len();
        let skip_allowed = depth_mode != DepthMode::SinkConnect && l > 0;

        let run_block = |g: &mut Graph, i: usize, x: NodeId| -> Result<NodeId> {
            let leaves = layer.leaves[i].as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("op {i} executed without bound leaves"))
            })?;
            op_forward(g, &layer.blocks[i], leaves, x, activation)
        };

        // skip-out layers blend the op output with the identity through the
        // sigmoid gate even when the op choice is executed directly
        let gate_blend = |g: &mut Graph, op_out: NodeId, x: NodeId| -> Result<NodeId> {
            let p = layer.skip_gate_value.ok_or_else(|| {
                Error::InvalidArgument("skip-out layer missing gate value".into())
            })?;
            let px = g.scale(x, p)?;
            let py = g.scale(op_out, 1.0 - p)?;
            g.add(px, py)
        };

        let (next, u_node, lat_input) = if let Some(direct) = layer.direct {
            // second path: plain execution, no mixing weights
            let y = if direct == n_ops {
                if !skip_allowed {
                    return Err(Error::Sampling(
                        "skip selected at a layer without a skip branch".into(),
                    ));
                }
                x_cur
            } else {
                let out = run_block(g, direct, x_cur)?;
                if depth_mode == DepthMode::SkipOut && skip_allowed {
                    gate_blend(g, out, x_cur)?
                } else {
                    out
                }
            };
            (y, None, LayerLatInput::Constant(direct))
        } else if !mix_all && mode == RelaxMode::Hard {
            // primary path in a weight step: only the sampled branch runs
            let hard = layer.draw.hard_index;
            let y = if hard == n_ops && skip_allowed {
                x_cur
            } else if hard < n_ops {
                let out = run_block(g, hard, x_cur)?;
                if depth_mode == DepthMode::SkipOut && skip_allowed {
                    gate_blend(g, out, x_cur)?
                } else {
                    out
                }
            } else {
                return Err(Error::Sampling(
                    "draw index exceeds candidate count".into(),
                ));
            };
            (y, None, LayerLatInput::Constant(hard))
        } else {
            // full mixing through the relaxation weights
            let alpha_leaf = layer.alpha_leaf.ok_or_else(|| {
                Error::InvalidArgument("mixing requires an alpha leaf".into())
            })?;
            match depth_mode {
                DepthMode::SkipOut => {
                    let (mix_w, _soft) =
                        gumbel_weights(g, alpha_leaf, &layer.draw.noise, layer.draw.tau, mode)?;
                    let mut terms = Vec::with_capacity(n_ops);
                    for i in 0..n_ops {
                        terms.push(run_block(g, i, x_cur)?);
                    }
                    let op_mix = g.weighted_sum(mix_w, &terms)?;
                    if skip_allowed {
                        let gate_logit = layer.skip_leaf.ok_or_else(|| {
                            Error::InvalidArgument("skip-out layer missing gate logit".into())
                        })?;
                        let p = g.sigmoid(gate_logit)?;
                        let not_p = one_minus(g, p)?;
                        let blend_w = g.concat(&[p, not_p])?;
                        let y = g.weighted_sum(blend_w, &[x_cur, op_mix])?;
                        (y, Some(mix_w), LayerLatInput::Gated { u: mix_w, p })
                    } else {
                        (op_mix, Some(mix_w), LayerLatInput::Mixed(mix_w))
                    }
                }
                _ => {
                    // sink and skip-in mix a single categorical; skip-in
                    // appends the skip logit and an identity branch
                    let logits = if skip_allowed {
                        let skip_leaf = layer.skip_leaf.ok_or_else(|| {
                            Error::InvalidArgument("skip-in layer missing skip logit".into())
                        })?;
                        g.concat(&[alpha_leaf, skip_leaf])?
                    } else {
                        alpha_leaf
                    };
                    let (mix_w, _soft) =
                        gumbel_weights(g, logits, &layer.draw.noise, layer.draw.tau, mode)?;
                    let mut terms = Vec::with_capacity(n_ops + 1);
                    for i in 0..n_ops {
                        terms.push(run_block(g, i, x_cur)?);
                    }
                    if skip_allowed {
                        terms.push(x_cur);
                    }
                    let y = g.weighted_sum(mix_w, &terms)?;
                    (y, Some(mix_w), LayerLatInput::Mixed(mix_w))
                }
            }
        };

        x_cur = next;
        outs.push(next);
        u_nodes.push(u_node);
        layer_lat_inputs.push(lat_input);
    }

    let x_out = match depth_mode {
        DepthMode::SinkConnect => g.weighted_sum(depth_weights.unwrap(), &outs)?,
        _ => x_cur,
    };

    let latency_terms = match latencies {
        None => None,
        Some(per_layer_ms) => {
            if per_layer_ms.len() != layers.len() {
                return Err(Error::InvalidShape(format!(
                    "{} latency rows for {} layers",
                    per_layer_ms.len(),
                    layers.len()
                )));
            }
            let coeffs = match depth_mode {
                DepthMode::SinkConnect => Some(depth_coefficients(
                    g,
                    depth_weights.unwrap(),
                    layers.len(),
                    weighting,
                )?),
                _ => None,
            };
            let mut terms = Vec::with_capacity(layers.len());
            for (l, lat_input) in layer_lat_inputs.iter().enumerate() {
                let ms = &per_layer_ms[l];
                let n_ops = layers[l].blocks.len();
                let skip_allowed = depth_mode != DepthMode::SinkConnect && l > 0;
                let base = match lat_input {
                    LayerLatInput::Constant(i) => {
                        let v = if *i >= n_ops { 0.0 } else { ms[*i] };
                        g.constant_scalar(v)
                    }
                    LayerLatInput::Mixed(u) => {
                        let mut consts: Vec<NodeId> =
                            ms.iter().map(|&m| g.constant_scalar(m)).collect();
                        if skip_allowed && g.value(*u).len() == n_ops + 1 {
                            consts.push(g.constant_scalar(0.0));
                        }
                        g.weighted_sum(*u, &consts)?
                    }
                    LayerLatInput::Gated { u, p } => {
                        let consts: Vec<NodeId> =
                            ms.iter().map(|&m| g.constant_scalar(m)).collect();
                        let mix = g.weighted_sum(*u, &consts)?;
                        let not_p = one_minus(g, *p)?;
                        g.mul(not_p, mix)?
                    }
                };
                let term = match &coeffs {
                    Some(cs) => g.mul(cs[l], base)?,
                    None => base,
                };
                terms.push(term);
            }
            Some(terms)
        }
    };

    Ok(StageForwardOutput {
        x_out,
        u_nodes,
        latency_terms,
    })
}

enum LayerLatInput {
    Constant(usize),
    Mixed(NodeId),
    Gated { u: NodeId, p: NodeId },
}

// ---------------------------------------------------------------------------
// Redundancy enumeration
// ---------------------------------------------------------------------------

/// Exhaustively enumerate hard decision combinations for one stage and map
/// each to its derived architecture. Returns (distinct architectures, raw
/// decision combinations). Sink-connecting decisions are (depth, ops of the
/// executed prefix); skip decisions assign each layer an op or skip, and the
/// derived architecture is the subsequence of non-skip ops.
pub fn count_depth_redundancy(
    mode: DepthMode,
    layers: usize,
    ops: usize,
) -> Result<(usize, usize)> {
    if layers == 0 || ops == 0 {
        return Err(Error::InvalidArgument(
            "enumeration needs at least one layer and one op".into(),
        ));
    }
    if layers > 4 || ops > 4 {
        return Err(Error::InvalidArgument(
            "enumeration is restricted to layers <= 4, ops <= 4".into(),
        ));
    }
    let mut archs: std::collections::BTreeSet<Vec<usize>> = std::collections::BTreeSet::new();
    let mut raw = 0usize;
    match mode {
        DepthMode::SinkConnect => {
            for depth in 1..=layers {
                let mut assignment = vec![0usize; depth];
                loop {
                    raw += 1;
                    archs.insert(assignment.clone());
                    if !increment(&mut assignment, ops) {
                        break;
                    }
                }
            }
        }
        DepthMode::SkipIn | DepthMode::SkipOut => {
            // per layer: 0..ops = real op, ops = skip
            let mut assignment = vec![0usize; layers];
            loop {
                raw += 1;
                let derived: Vec<usize> =
                    assignment.iter().cloned().filter(|&x| x < ops).collect();
                archs.insert(derived);
                if !increment(&mut assignment, ops + 1) {
                    break;
                }
            }
        }
    }
    Ok((archs.len(), raw))
}

fn increment(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}
