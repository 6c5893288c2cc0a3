//! Architecture derivation, JSON export, analytic cost accounting, and
//! from-scratch training of derived architectures on the synthetic task.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradcore::{argmax, Graph, NodeId};
use crate::relax::DepthMode;
use crate::space::{
    bind_block, op_forward, round_width, Activation, CandidateOpSpec, OpBlock, ParamId,
    ParamKind, ParamStore, Supernet,
};

// ---------------------------------------------------------------------------
// Derived architecture
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedLayer {
    pub op_name: String,
    pub kernel_tag: u32,
    pub width: usize,
    pub se_width: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub activation: Activation,
    pub expansion_interval: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedStage {
    pub index: usize,
    pub depth: usize,
    pub searchable: bool,
    pub resolution_factor: f64,
    pub layers: Vec<DerivedLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemDesc {
    pub input_dim: usize,
    pub channels_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDesc {
    pub channels_in: usize,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
}

/// A discrete architecture: kept layers per stage with integer widths,
/// exportable to JSON and consumable by the trainer and the latency model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedArch {
    pub stages: Vec<DerivedStage>,
    pub stem: StemDesc,
    pub head: HeadDesc,
    pub provenance: Provenance,
}

impl DerivedArch {
    /// Channel chaining and width-interval checks.
    pub fn validate(&self) -> Result<()> {
        let mut prev_out = self.stem.channels_out;
        for st in &self.stages {
            if st.depth != st.layers.len() || st.depth == 0 {
                return Err(Error::Arch(format!(
                    "stage {}: depth {} does not match {} kept layers",
                    st.index,
                    st.depth,
                    st.layers.len()
                )));
            }
            for (l, layer) in st.layers.iter().enumerate() {
                if layer.c_in != if l == 0 { prev_out } else { st.layers[l - 1].c_out } {
                    return Err(Error::Arch(format!(
                        "stage {} layer {l}: channel chain broken (c_in {})",
                        st.index, layer.c_in
                    )));
                }
                let (lo, hi) = layer.expansion_interval;
                let min_w = round_width(lo * layer.c_in as f64).max(1);
                let max_w = round_width(hi * layer.c_in as f64).max(1);
                if layer.width < min_w || layer.width > max_w {
                    return Err(Error::Arch(format!(
                        "stage {} layer {l}: width {} outside [{min_w}, {max_w}]",
                        st.index, layer.width
                    )));
                }
                if layer.se_width > layer.width {
                    return Err(Error::Arch(format!(
                        "stage {} layer {l}: se_width {} exceeds width {}",
                        st.index, layer.se_width, layer.width
                    )));
                }
            }
            prev_out = st.layers[st.depth - 1].c_out;
        }
        if prev_out != self.head.channels_in {
            return Err(Error::Arch(format!(
                "last stage output {} does not match head input {}",
                prev_out, self.head.channels_in
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Selection from architecture parameters
// ---------------------------------------------------------------------------

/// Argmax decisions read off the current alpha/beta (and skip logits for the
/// baseline depth spaces). Ties break to the lowest index.
#[derive(Debug, Clone)]
pub struct Selection {
    /// Per searchable layer (global index): chosen op.
    pub layer_ops: Vec<usize>,
    /// Per searchable layer: does the layer appear in the derived network?
    pub kept: Vec<bool>,
    /// Per searchable stage: number of kept layers.
    pub stage_depths: Vec<usize>,
}

pub fn argmax_selection(net: &Supernet, depth_mode: DepthMode) -> Selection {
    let n_layers = net.num_searchable_layers();
    let mut layer_ops = Vec::with_capacity(n_layers);
    let mut kept = vec![false; n_layers];
    let mut stage_depths = vec![0usize; net.config.searchable_stage_count()];

    for (layer, _si, ssi, l_in_stage) in net.searchable_layers() {
        let row = net.alpha_row(layer);
        // operation strength is the softmax of alpha; its argmax equals the
        // argmax of alpha itself
        layer_ops.push(argmax(row));
        match depth_mode {
            DepthMode::SinkConnect => {
                let depth = argmax(net.beta_values(ssi)) + 1;
                stage_depths[ssi] = depth;
                kept[layer] = l_in_stage < depth;
            }
            DepthMode::SkipIn => {
                // skip participates as one extra logit; layer 0 of a stage
                // has no skip option
                let keep = if l_in_stage == 0 {
                    true
                } else {
                    let skip = net.skip_logit(layer);
                    let best_op = row[argmax(row)];
                    best_op >= skip
                };
                kept[layer] = keep;
                if keep {
                    stage_depths[ssi] += 1;
                }
            }
            DepthMode::SkipOut => {
                let keep = l_in_stage == 0 || net.skip_logit(layer) <= 0.0;
                kept[layer] = keep;
                if keep {
                    stage_depths[ssi] += 1;
                }
            }
        }
    }
    Selection {
        layer_ops,
        kept,
        stage_depths,
    }
}

/// Materialize the argmax selection as a standalone architecture, carrying
/// the current active widths of the chosen blocks.
pub fn derive_architecture(net: &Supernet, depth_mode: DepthMode, epoch: usize) -> DerivedArch {
    let sel = argmax_selection(net, depth_mode);
    let mut stages = Vec::new();
    let mut global = 0usize;
    for st in &net.stages {
        if st.searchable_index.is_some() {
            let mut layers = Vec::new();
            for (l, layer_blocks) in st.layers.iter().enumerate() {
                let layer_idx = global + l;
                if !sel.kept[layer_idx] {
                    continue;
                }
                let block = &layer_blocks[sel.layer_ops[layer_idx]];
                layers.push(derived_layer(block, st.spec.activation, layers.len()));
            }
            // re-chain c_in across kept layers (dropping a middle layer in
            // the skip baselines splices its neighbors together)
            rechain(&mut layers, st.spec.channels_in);
            stages.push(DerivedStage {
                index: st.spec.index,
                depth: layers.len(),
                searchable: true,
                resolution_factor: st.spec.resolution_factor,
                layers,
            });
            global += st.layers.len();
        } else {
            let mut layers = Vec::new();
            for layer_blocks in &st.layers {
                let block = &layer_blocks[0];
                layers.push(derived_layer(block, st.spec.activation, layers.len()));
            }
            rechain(&mut layers, st.spec.channels_in);
            stages.push(DerivedStage {
                index: st.spec.index,
                depth: layers.len(),
                searchable: false,
                resolution_factor: st.spec.resolution_factor,
                layers,
            });
        }
    }
    DerivedArch {
        stages,
        stem: StemDesc {
            input_dim: net.config.input_dim,
            channels_out: net.config.stages[0].channels_in,
        },
        head: HeadDesc {
            channels_in: net.config.stages[net.config.stages.len() - 1].channels_out,
            class_count: net.config.class_count,
        },
        provenance: Provenance {
            config_hash: net.config.content_hash(),
            seed: net.config.seed,
            epoch,
        },
    }
}

fn derived_layer(block: &OpBlock, activation: Activation, _position: usize) -> DerivedLayer {
    DerivedLayer {
        op_name: block.spec.name.clone(),
        kernel_tag: block.spec.kernel_tag,
        width: block.active_width,
        se_width: block.se_active_width(block.active_width),
        c_in: block.c_in,
        c_out: block.c_out,
        activation,
        expansion_interval: block.spec.expansion_interval,
    }
}

fn rechain(layers: &mut [DerivedLayer], stage_c_in: usize) {
    let mut prev = stage_c_in;
    for layer in layers.iter_mut() {
        layer.c_in = prev;
        prev = layer.c_out;
    }
}

// ---------------------------------------------------------------------------
// Export / import and accounting
// ---------------------------------------------------------------------------

pub fn export_arch(arch: &DerivedArch, path: &std::path::Path) -> Result<()> {
    arch.validate()?;
    std::fs::write(path, serde_json::to_string_pretty(arch)?)?;
    Ok(())
}

pub fn import_arch(path: &std::path::Path) -> Result<DerivedArch> {
    let text = std::fs::read_to_string(path)?;
    let arch: DerivedArch = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("{} line {} column {}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    arch.validate()?;
    Ok(arch)
}

/// Multiply-accumulate count of the blocks: per layer
/// `rf * (C_in*H + H + H*C_out + 2*H*S)`. Stem and head matvecs are not
/// blocks and are excluded.
pub fn analytic_cost(arch: &DerivedArch) -> f64 {
    let mut total = 0.0;
    for st in &arch.stages {
        for layer in st.layers.iter().take(st.depth) {
            let h = layer.width as f64;
            let mut macs = layer.c_in as f64 * h + h + h * layer.c_out as f64;
            if layer.se_width > 0 {
                macs += 2.0 * h * layer.se_width as f64;
            }
            total += macs * st.resolution_factor;
        }
    }
    total
}

/// Trainable parameter count of the concrete network the arch describes.
pub fn param_count(arch: &DerivedArch) -> usize {
    let mut total = arch.stem.input_dim * arch.stem.channels_out + arch.stem.channels_out;
    for st in &arch.stages {
        for layer in st.layers.iter().take(st.depth) {
            let (h, s) = (layer.width, layer.se_width);
            total += h * layer.c_in + h; // W1, b1
            total += h; // w_d
            total += layer.c_out * h + layer.c_out; // W2, b2
            if s > 0 {
                total += s * h + h * s; // se_W1, se_W2
            }
        }
    }
    total += arch.head.channels_in * arch.head.class_count + arch.head.class_count;
    total
}

// ---------------------------------------------------------------------------
// From-scratch training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measured_ms: Option<f64>,
    pub param_count: usize,
    pub analytic_cost: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub head_dropout: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 32,
            label_smoothing: 0.1,
            head_dropout: 0.2,
        }
    }
}

/// A derived architecture instantiated with fresh exact-width parameters.
pub struct ConcreteNet {
    pub store: ParamStore,
    pub stem_w: ParamId,
    pub stem_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Blocks in execution order with their stage activation.
    pub blocks: Vec<(OpBlock, Activation)>,
    pub class_count: usize,
    pub input_dim: usize,
}

impl ConcreteNet {
    pub fn from_arch(arch: &DerivedArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        use crate::gradcore::{array_init, InitSpec};
        let mut store = ParamStore::default();
        let mut counter = 0u64;
        let mut next_seed = || {
            counter += 1;
            seed.wrapping_add(counter.wrapping_mul(0x9E3779B97F4A7C15))
        };

        let stem_w = store.alloc(
            array_init(
                &[arch.stem.channels_out, arch.stem.input_dim],
                InitSpec::ScaledNormalFanIn,
                next_seed(),
            )?,
            ParamKind::Weight,
        );
        let stem_b = store.alloc(
            array_init(&[arch.stem.channels_out], InitSpec::Zeros, 0)?,
            ParamKind::Weight,
        );
        let head_w = store.alloc(
            array_init(
                &[arch.head.class_count, arch.head.channels_in],
                InitSpec::Normal((1.0 / arch.head.channels_in as f64).sqrt()),
                next_seed(),
            )?,
            ParamKind::Weight,
        );
        let head_b = store.alloc(
            array_init(&[arch.head.class_count], InitSpec::Zeros, 0)?,
            ParamKind::Weight,
        );

        let mut blocks = Vec::new();
        for st in &arch.stages {
            for layer in st.layers.iter().take(st.depth) {
                let (h, s) = (layer.width, layer.se_width);
                let w1 = store.alloc(
                    array_init(&[h, layer.c_in], InitSpec::ScaledNormalFanIn, next_seed())?,
                    ParamKind::Weight,
                );
                let b1 = store.alloc(array_init(&[h], InitSpec::Zeros, 0)?, ParamKind::Weight);
                let wd = store.alloc(
                    array_init(&[h], InitSpec::Constant(1.0), 0)?,
                    ParamKind::Weight,
                );
                let w2 = store.alloc(
                    array_init(
                        &[layer.c_out, h],
                        InitSpec::Normal(0.5 * (1.0 / h as f64).sqrt()),
                        next_seed(),
                    )?,
                    ParamKind::Weight,
                );
                let b2 = store.alloc(
                    array_init(&[layer.c_out], InitSpec::Zeros, 0)?,
                    ParamKind::Weight,
                );
                let (se_w1, se_w2) = if s > 0 {
                    (
                        Some(store.alloc(
                            array_init(&[s, h], InitSpec::ScaledNormalFanIn, next_seed())?,
                            ParamKind::Weight,
                        )),
                        Some(store.alloc(
                            array_init(&[h, s], InitSpec::ScaledNormalFanIn, next_seed())?,
                            ParamKind::Weight,
                        )),
                    )
                } else {
                    (None, None)
                };
                // exact-width block: the implied expansion pins the active
                // and SE widths to the arch's integers
                let e_implied = h as f64 / layer.c_in as f64;
                let se_implied = if s > 0 {
                    e_implied * s as f64 / h as f64
                } else {
                    0.0
                };
                let spec = CandidateOpSpec {
                    name: layer.op_name.clone(),
                    kernel_tag: layer.kernel_tag,
                    expansion_init: e_implied,
                    expansion_interval: (e_implied, e_implied),
                    se_expansion: se_implied,
                };
                blocks.push((
                    OpBlock {
                        spec,
                        c_in: layer.c_in,
                        c_out: layer.c_out,
                        h_max: h,
                        h_min: h,
                        s_max: s,
                        w1,
                        b1,
                        wd,
                        w2,
                        b2,
                        se_w1,
                        se_w2,
                        active_width: h,
                        channel_order: (0..h).collect(),
                    },
                    layer.activation,
                ));
            }
        }
        Ok(ConcreteNet {
            store,
            stem_w,
            stem_b,
            head_w,
            head_b,
            blocks,
            class_count: arch.head.class_count,
            input_dim: arch.stem.input_dim,
        })
    }

    /// Logits for one input, optionally applying a precomputed head dropout
    /// mask (training only).
    fn forward(
        &self,
        g: &mut Graph,
        leaves: &NetLeaves,
        x: &[f64],
        dropout_mask: Option<&[f64]>,
    ) -> Result<NodeId> {
        let xn = g.constant(x.to_vec());
        let h = g.matvec(leaves.stem_w, xn)?;
        let h = g.add(h, leaves.stem_b)?;
        let mut feat = g.relu(h)?;
        for ((block, act), bl) in self.blocks.iter().zip(&leaves.blocks) {
            feat = op_forward(g, block, bl, feat, *act)?;
        }
        if let Some(mask) = dropout_mask {
            let m = g.constant(mask.to_vec());
            feat = g.mul(feat, m)?;
        }
        let logits = g.matvec(leaves.head_w, feat)?;
        g.add(logits, leaves.head_b)
    }

    fn bind(
        &self,
        g: &mut Graph,
        requires_grad: bool,
    ) -> Result<(NetLeaves, Vec<crate::space::SliceBinding>)> {
        let mut binds = Vec::new();
        let mut bind_full = |g: &mut Graph, p: ParamId| -> NodeId {
            let arr = self.store.get(p).clone().with_requires_grad(requires_grad);
            let leaf = g.leaf(arr);
            if requires_grad {
                binds.push(crate::space::SliceBinding {
                    param: p,
                    flat: (0..self.store.get(p).len()).collect(),
                    leaf,
                });
            }
            leaf
        };
        let stem_w = bind_full(g, self.stem_w);
        let stem_b = bind_full(g, self.stem_b);
        let head_w = bind_full(g, self.head_w);
        let head_b = bind_full(g, self.head_b);
        let mut blocks = Vec::new();
        for (block, _) in &self.blocks {
            blocks.push(bind_block(g, &self.store, block, requires_grad, &mut binds)?);
        }
        Ok((
            NetLeaves {
                stem_w,
                stem_b,
                head_w,
                head_b,
                blocks,
            },
            binds,
        ))
    }

    /// Accuracy over the given sample indices (no dropout).
    pub fn accuracy(&self, ds: &Dataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::Data("empty evaluation split".into()));
        }
        let mut correct = 0usize;
        for &i in indices {
            let mut g = Graph::new();
            let (leaves, _) = self.bind(&mut g, false)?;
            let logits = self.forward(&mut g, &leaves, &ds.features[i], None)?;
            if argmax(g.value(logits).values()) == ds.labels[i] {
                correct += 1;
            }
        }
        Ok(correct as f64 / indices.len() as f64)
    }
}

struct NetLeaves {
    stem_w: NodeId,
    stem_b: NodeId,
    head_w: NodeId,
    head_b: NodeId,
    blocks: Vec<crate::space::BlockLeaves>,
}

/// Train the architecture from scratch with momentum-SGD, cosine learning
/// rate, label smoothing, and head dropout; report test accuracy, parameter
/// count, and analytic cost. Deterministic per (arch, dataset, seed).
pub fn train_from_scratch(
    arch: &DerivedArch,
    ds: &Dataset,
    epochs: usize,
    seed: u64,
) -> Result<EvalReport> {
    let (net, _) = train_concrete(arch, ds, epochs, seed, &TrainOptions::default())?;
    let accuracy = net.accuracy(ds, &ds.test)?;
    Ok(EvalReport {
        accuracy,
        latency_ms: None,
        measured_ms: None,
        param_count: param_count(arch),
        analytic_cost: analytic_cost(arch),
    })
}

/// Training loop shared by `train_from_scratch` and the ablation harness,
/// which evaluates on the validation split instead.
pub fn train_concrete(
    arch: &DerivedArch,
    ds: &Dataset,
    epochs: usize,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(ConcreteNet, Vec<f64>)> {
    use rand::{Rng, SeedableRng};
    if ds.input_dim() != arch.stem.input_dim || ds.class_count() != arch.head.class_count {
        return Err(Error::Arch(format!(
            "arch expects input {} / classes {}, dataset has {} / {}",
            arch.stem.input_dim,
            arch.head.class_count,
            ds.input_dim(),
            ds.class_count()
        )));
    }
    let mut net = ConcreteNet::from_arch(arch, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x7a41_0e11);
    let mut sgd = crate::optimizer::SgdState::new();
    let mut epoch_losses = Vec::with_capacity(epochs);

    let keep = 1.0 - opts.head_dropout;
    for epoch in 0..epochs {
        let lr = opts.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos());
        let batches = crate::data::epoch_batches(&ds.train, opts.batch_size, &mut rng);
        if batches.is_empty() {
            return Err(Error::Data("training split smaller than one batch".into()));
        }
        let mut loss_sum = 0.0;
        for batch in &batches {
            let mut g = Graph::new();
            let (leaves, binds) = net.bind(&mut g, true)?;
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let mask: Option<Vec<f64>> = if opts.head_dropout > 0.0 {
                    Some(
                        (0..arch.head.channels_in)
                            .map(|_| {
                                if rng.random::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    )
                } else {
                    None
                };
                let logits = net.forward(&mut g, &leaves, &ds.features[i], mask.as_deref())?;
                losses.push(g.cross_entropy_smoothed(
                    logits,
                    ds.labels[i],
                    opts.label_smoothing,
                )?);
            }
            let loss = g.mean(&losses)?;
            loss_sum += g.value(loss).item();
            let grads = g.backward(loss)?;
            for b in &binds {
                let grad = grads.get(b.leaf).expect("bound leaf has gradient");
                sgd.update(
                    &mut net.store,
                    b.param,
                    &b.flat,
                    grad.values(),
                    lr,
                    opts.momentum,
                    opts.weight_decay,
                );
            }
        }
        epoch_losses.push(loss_sum / batches.len() as f64);
    }
    Ok((net, epoch_losses))
}
