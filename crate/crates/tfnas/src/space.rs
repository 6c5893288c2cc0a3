//! Layer-wise search space and supernet.
//!
//! The supernet is a structural analog of a mobile inverted-bottleneck stack:
//! features are plain vectors, each candidate operation expands the channel
//! count by a continuous ratio through a shared full-width weight store, and
//! spatial resolution survives only as a per-stage latency cost factor.
//! Kernel size has no vector analog, so `kernel_tag` differentiates
//! candidates through the latency model alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{array_init, Array, Graph, InitSpec, NodeId};

/// Round half away from zero, which for the positive quantities used here is
/// round-half-up.
pub fn round_width(x: f64) -> usize {
    x.round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Swish,
}

/// One candidate operation. `expansion_interval` is the continuous range of
/// the hidden-width ratio; `se_expansion` of zero means no SE gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOpSpec {
    pub name: String,
    pub kernel_tag: u32,
    pub expansion_init: f64,
    pub expansion_interval: (f64, f64),
    pub se_expansion: f64,
}

impl CandidateOpSpec {
    pub fn has_se(&self) -> bool {
        self.se_expansion > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.expansion_interval;
        if !(lo >= 1.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "op `{}`: expansion interval [{lo}, {hi}] must satisfy 1 <= lo <= hi",
                self.name
            )));
        }
        if !(lo <= self.expansion_init && self.expansion_init <= hi) {
            return Err(Error::Config(format!(
                "op `{}`: expansion_init {} outside [{lo}, {hi}]",
                self.name, self.expansion_init
            )));
        }
        if self.se_expansion < 0.0 {
            return Err(Error::Config(format!(
                "op `{}`: se_expansion must be nonnegative",
                self.name
            )));
        }
        if self.has_se() {
            let ratio = self.se_expansion / self.expansion_init;
            if !(0.0..=0.5).contains(&ratio) {
                return Err(Error::Config(format!(
                    "op `{}`: se/expansion ratio {ratio} outside [0, 0.5]",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub index: usize,
    pub channels_in: usize,
    pub channels_out: usize,
    pub max_layers: usize,
    pub min_layers: usize,
    pub activation: Activation,
    pub searchable: bool,
    /// Latency cost multiplier standing in for spatial resolution.
    pub resolution_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub stages: Vec<StageSpec>,
    pub ops: Vec<CandidateOpSpec>,
    pub class_count: usize,
    pub input_dim: usize,
    pub seed: u64,
}

/// Fixed block used by non-searchable stages: the analog of the fixed
/// expansion-1 bottleneck with a quarter-width SE gate.
pub fn fixed_stage_op() -> CandidateOpSpec {
    CandidateOpSpec {
        name: "k3_e1_se0.25".into(),
        kernel_tag: 3,
        expansion_init: 1.0,
        expansion_interval: (1.0, 1.0),
        se_expansion: 0.25,
    }
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage required".into()));
        }
        if self.ops.is_empty() {
            return Err(Error::Config("at least one candidate op required".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be >= 2".into()));
        }
        if self.input_dim < 1 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        for op in &self.ops {
            op.validate()?;
        }
        let mut any_searchable = false;
        for (i, st) in self.stages.iter().enumerate() {
            if st.min_layers < 1 || st.max_layers < st.min_layers {
                return Err(Error::Config(format!(
                    "stage {i}: need 1 <= min_layers <= max_layers"
                )));
            }
            if st.channels_in < 1 || st.channels_out < 1 {
                return Err(Error::Config(format!("stage {i}: channels must be >= 1")));
            }
            if !(st.resolution_factor > 0.0) {
                return Err(Error::Config(format!(
                    "stage {i}: resolution_factor must be positive"
                )));
            }
            if !st.searchable && st.max_layers != st.min_layers {
                return Err(Error::Config(format!(
                    "stage {i}: non-searchable stages have a fixed layer count"
                )));
            }
            if i > 0 && self.stages[i - 1].channels_out != st.channels_in {
                return Err(Error::Config(format!(
                    "stage {} channels_out {} does not match stage {i} channels_in {}",
                    i - 1,
                    self.stages[i - 1].channels_out,
                    st.channels_in
                )));
            }
            any_searchable |= st.searchable;
        }
        if !any_searchable {
            return Err(Error::Config(
                "at least one searchable stage required".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SupernetConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: format!("supernet config line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Total searchable layers = sum of max_layers over searchable stages.
    pub fn searchable_layer_count(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| s.searchable)
            .map(|s| s.max_layers)
            .sum()
    }

    pub fn searchable_stage_count(&self) -> usize {
        self.stages.iter().filter(|s| s.searchable).count()
    }

    /// Stable short hash of the canonical JSON form, for provenance records.
    pub fn content_hash(&self) -> String {
        let text = serde_json::to_string(self).unwrap_or_default();
        // FNV-1a, hex; provenance only, no cryptographic intent.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

/// The bundled default search space: six searchable stages with layer
/// intervals [2,3,4,4,4,1] over eight candidates, ReLU in the early stages
/// and Swish later, channels scaled to desk size.
pub fn default_config() -> SupernetConfig {
    serde_json::from_str(DEFAULT_CONFIG_JSON).expect("bundled default config parses")
}

pub const DEFAULT_CONFIG_JSON: &str = include_str!("../assets/default-tfnas.json");

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Supernet weights (omega).
    Weight,
    /// Architecture distribution parameters (alpha, beta, skip logits).
    Arch,
}

/// Flat store holding every trainable array of the supernet. Blocks refer to
/// entries by id so the update rules can address parameters uniformly.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    arrays: Vec<Array>,
    kinds: Vec<ParamKind>,
}

impl ParamStore {
    pub fn alloc(&mut self, array: Array, kind: ParamKind) -> ParamId {
        let id = ParamId(self.arrays.len());
        self.arrays.push(array);
        self.kinds.push(kind);
        id
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.arrays[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Op blocks
// ---------------------------------------------------------------------------

/// One candidate operation instance at one layer, backed by full-width
/// parameters in the shared store. `active_width` selects how many hidden
/// channels participate; `channel_order` ranks channels so that the active
/// set is always its prefix.
#[derive(Debug, Clone)]
pub struct OpBlock {
    pub spec: CandidateOpSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub h_max: usize,
    pub h_min: usize,
    pub s_max: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub wd: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub se_w1: Option<ParamId>,
    pub se_w2: Option<ParamId>,
    pub active_width: usize,
    pub channel_order: Vec<usize>,
}

impl OpBlock {
    /// SE width derived from the active hidden width so the se/e ratio stays
    /// at its configured value as widths scale; zero when no SE gate.
    pub fn se_active_width(&self, width: usize) -> usize {
        if !self.spec.has_se() {
            return 0;
        }
        let ratio = self.spec.se_expansion / self.spec.expansion_init;
        round_width(ratio * width as f64).clamp(1, self.s_max)
    }

    /// Residual branch exists exactly when input and output channel counts
    /// match.
    pub fn has_residual(&self) -> bool {
        self.c_in == self.c_out
    }

    /// Active hidden channels in ascending index order. Only membership in
    /// the prefix of `channel_order` matters for the computation, so sorting
    /// keeps forward arithmetic independent of ranking permutations.
    pub fn active_channels(&self) -> Vec<usize> {
        let mut sel: Vec<usize> = self.channel_order[..self.active_width].to_vec();
        sel.sort_unstable();
        sel
    }

    /// Importance of hidden channel j: sum of |W1[j,:]|, |b1[j]|, |w_d[j]|,
    /// |W2[:,j]| and any SE weights touching j. Returns the descending
    /// ranking with ties broken by lower index.
    pub fn channel_l1_importance(&self, store: &ParamStore) -> Vec<usize> {
        let scores = self.channel_importance_scores(store);
        let mut order: Vec<usize> = (0..self.h_max).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order
    }

    pub fn channel_importance_scores(&self, store: &ParamStore) -> Vec<f64> {
        let w1 = store.get(self.w1).values();
        let b1 = store.get(self.b1).values();
        let wd = store.get(self.wd).values();
        let w2 = store.get(self.w2).values();
        let mut scores = vec![0.0; self.h_max];
        for (j, s) in scores.iter_mut().enumerate() {
            for v in &w1[j * self.c_in..(j + 1) * self.c_in] {
                *s += v.abs();
            }
            *s += b1[j].abs() + wd[j].abs();
            for i in 0..self.c_out {
                *s += w2[i * self.h_max + j].abs();
            }
        }
        if let (Some(se1), Some(se2)) = (self.se_w1, self.se_w2) {
            let se1 = store.get(se1).values();
            let se2 = store.get(se2).values();
            for (j, s) in scores.iter_mut().enumerate() {
                for r in 0..self.s_max {
                    *s += se1[r * self.h_max + j].abs(); // column j of se_W1
                    *s += se2[j * self.s_max + r].abs(); // row j of se_W2
                }
            }
        }
        scores
    }

    /// Re-rank channels by importance and set the active width. Weight
    /// values are never modified: a shrink followed by an expand restores the
    /// previous computation exactly.
    pub fn set_active_width(&mut self, store: &ParamStore, width: usize) -> Result<()> {
        if width < self.h_min || width > self.h_max {
            return Err(Error::WidthRange {
                width,
                min: self.h_min,
                max: self.h_max,
            });
        }
        self.channel_order = self.channel_l1_importance(store);
        self.active_width = width;
        Ok(())
    }
}

/// Graph leaves for one block's active slices, ready for `op_forward`.
#[derive(Debug, Clone)]
pub struct BlockLeaves {
    pub w1: NodeId,
    pub b1: NodeId,
    pub wd: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub se: Option<(NodeId, NodeId)>,
    pub width: usize,
    pub se_width: usize,
}

/// One bound slice: a leaf plus the flat indices of the store array it was
/// gathered from, so gradients can be scattered back.
#[derive(Debug, Clone)]
pub struct SliceBinding {
    pub param: ParamId,
    pub flat: Vec<usize>,
    pub leaf: NodeId,
}

/// Gather the active slices of one block into graph leaves.
pub fn bind_block(
    g: &mut Graph,
    store: &ParamStore,
    block: &OpBlock,
    requires_grad: bool,
    out: &mut Vec<SliceBinding>,
) -> Result<BlockLeaves> {
    let sel = block.active_channels();
    let h = sel.len();
    let (c_in, c_out, h_max) = (block.c_in, block.c_out, block.h_max);

    let mut gather = |g: &mut Graph,
                      param: ParamId,
                      shape: Vec<usize>,
                      flat: Vec<usize>|
     -> Result<NodeId> {
        let src = store.get(param).values();
        let vals: Vec<f64> = flat.iter().map(|&i| src[i]).collect();
        let leaf = g.leaf(Array::new(shape, vals)?.with_requires_grad(requires_grad));
        if requires_grad {
            out.push(SliceBinding { param, flat, leaf });
        }
        Ok(leaf)
    };

    let w1_flat: Vec<usize> = sel
        .iter()
        .flat_map(|&j| (0..c_in).map(move |k| j * c_in + k))
        .collect();
    let w1 = gather(g, block.w1, vec![h, c_in], w1_flat)?;
    let b1 = gather(g, block.b1, vec![h], sel.clone())?;
    let wd = gather(g, block.wd, vec![h], sel.clone())?;
    let w2_flat: Vec<usize> = (0..c_out)
        .flat_map(|i| sel.iter().map(move |&j| i * h_max + j))
        .collect();
    let w2 = gather(g, block.w2, vec![c_out, h], w2_flat)?;
    let b2 = gather(g, block.b2, vec![c_out], (0..c_out).collect())?;

    let se_width = block.se_active_width(block.active_width);
    let se = match (block.se_w1, block.se_w2) {
        (Some(se1), Some(se2)) if se_width > 0 => {
            let s_max = block.s_max;
            let se1_flat: Vec<usize> = (0..se_width)
                .flat_map(|r| sel.iter().map(move |&j| r * h_max + j))
                .collect();
            let se1_leaf = gather(g, se1, vec![se_width, h], se1_flat)?;
            let se2_flat: Vec<usize> = sel
                .iter()
                .flat_map(|&j| (0..se_width).map(move |r| j * s_max + r))
                .collect();
            let se2_leaf = gather(g, se2, vec![h, se_width], se2_flat)?;
            Some((se1_leaf, se2_leaf))
        }
        _ => None,
    };

    Ok(BlockLeaves {
        w1,
        b1,
        wd,
        w2,
        b2,
        se,
        width: h,
        se_width,
    })
}

/// Forward pass of one block on a feature vector node:
/// `h = act(W1 x + b1)`, `d = act(w_d * h)`, optional SE gate
/// `d *= sigmoid(se_W2 act(se_W1 h))`, `y = W2 d + b2`, plus the residual
/// when channel counts match.
pub fn op_forward(
    g: &mut Graph,
    block: &OpBlock,
    leaves: &BlockLeaves,
    x: NodeId,
    activation: Activation,
) -> Result<NodeId> {
    if g.value(x).len() != block.c_in {
        return Err(Error::InvalidShape(format!(
            "op_forward input length {} != c_in {}",
            g.value(x).len(),
            block.c_in
        )));
    }
    if block.active_width > block.h_max {
        return Err(Error::WidthRange {
            width: block.active_width,
            min: block.h_min,
            max: block.h_max,
        });
    }
    let act = |g: &mut Graph, n: NodeId| -> Result<NodeId> {
        match activation {
            Activation::Relu => g.relu(n),
            Activation::Swish => g.swish(n),
        }
    };

    let pre = g.matvec(leaves.w1, x)?;
    let pre = g.add(pre, leaves.b1)?;
    let h = act(g, pre)?;
    let d_pre = g.mul(leaves.wd, h)?;
    let mut d = act(g, d_pre)?;
    if let Some((se1, se2)) = leaves.se {
        let squeezed = g.matvec(se1, h)?;
        let squeezed = act(g, squeezed)?;
        let gate_pre = g.matvec(se2, squeezed)?;
        let gate = g.sigmoid(gate_pre)?;
        d = g.mul(d, gate)?;
    }
    let y = g.matvec(leaves.w2, d)?;
    let mut y = g.add(y, leaves.b2)?;
    if block.has_residual() {
        y = g.add(y, x)?;
    }
    Ok(y)
}

/// Width-independent latency signature prefix; the lookup table keys on this
/// and stores a per-width list under it.
pub fn base_signature(
    kernel_tag: u32,
    has_se: bool,
    c_in: usize,
    c_out: usize,
    resolution_factor: f64,
) -> String {
    format!(
        "k{kernel_tag}-se{}-{c_in}-{c_out}-r{resolution_factor:?}",
        if has_se { 1 } else { 0 }
    )
}

/// Full signature including the width, injective over
/// (kernel_tag, se-present, c_in, c_out, resolution_factor, width).
pub fn op_signature(
    spec: &CandidateOpSpec,
    stage: &StageSpec,
    c_in: usize,
    width: usize,
) -> String {
    format!(
        "{}-w{width}",
        base_signature(
            spec.kernel_tag,
            spec.has_se(),
            c_in,
            stage.channels_out,
            stage.resolution_factor
        )
    )
}

// ---------------------------------------------------------------------------
// Supernet
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StageBlocks {
    pub spec: StageSpec,
    /// layers[l][op] — non-searchable stages have exactly one op per layer.
    pub layers: Vec<Vec<OpBlock>>,
    /// Index among searchable stages, when searchable.
    pub searchable_index: Option<usize>,
}

/// The over-parameterized network plus its architecture distribution
/// parameters: alpha (per searchable layer, per op), beta (per searchable
/// stage, over depths), and per-layer skip logits used only by the
/// skip-in/skip-out baselines.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub config: SupernetConfig,
    pub store: ParamStore,
    pub stages: Vec<StageBlocks>,
    pub stem_w: ParamId,
    pub stem_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub alpha: ParamId,
    pub betas: Vec<ParamId>,
    pub skip_logits: ParamId,
}

impl Supernet {
    pub fn num_ops(&self) -> usize {
        self.config.ops.len()
    }

    pub fn num_searchable_layers(&self) -> usize {
        self.config.searchable_layer_count()
    }

    pub fn alpha_row(&self, layer: usize) -> &[f64] {
        let n = self.num_ops();
        &self.store.get(self.alpha).values()[layer * n..(layer + 1) * n]
    }

    pub fn beta_values(&self, searchable_stage: usize) -> &[f64] {
        self.store.get(self.betas[searchable_stage]).values()
    }

    pub fn skip_logit(&self, layer: usize) -> f64 {
        self.store.get(self.skip_logits).values()[layer]
    }

    /// Searchable layers as (global layer index, stage index, searchable
    /// stage index, layer index within the stage).
    pub fn searchable_layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut layer = 0;
        for (si, st) in self.stages.iter().enumerate() {
            if let Some(ssi) = st.searchable_index {
                for l in 0..st.layers.len() {
                    out.push((layer, si, ssi, l));
                    layer += 1;
                }
            }
        }
        out
    }

    pub fn blocks_at(&self, stage: usize, layer: usize) -> &[OpBlock] {
        &self.stages[stage].layers[layer]
    }

    /// Every weight parameter id (omega), in allocation order.
    pub fn weight_params(&self) -> Vec<ParamId> {
        (0..self.store.len())
            .map(ParamId)
            .filter(|&p| self.store.kind(p) == ParamKind::Weight)
            .collect()
    }

    pub fn arch_params(&self) -> Vec<ParamId> {
        (0..self.store.len())
            .map(ParamId)
            .filter(|&p| self.store.kind(p) == ParamKind::Arch)
            .collect()
    }
}

/// Allocate the supernet: all blocks at full width, alpha/beta/skip logits
/// at zero (uniform after softmax), active widths at round(e_init * C_in),
/// channel order identity.
pub fn build_supernet(config: &SupernetConfig) -> Result<Supernet> {
    config.validate()?;
    let mut store = ParamStore::default();
    let mut seed_counter: u64 = 0;
    let mut next_seed = || {
        seed_counter += 1;
        config
            .seed
            .wrapping_add(seed_counter.wrapping_mul(0x9E3779B97F4A7C15))
    };

    let first_c = config.stages[0].channels_in;
    let last_c = config.stages[config.stages.len() - 1].channels_out;
    let stem_w = store.alloc(
        array_init(
            &[first_c, config.input_dim],
            InitSpec::ScaledNormalFanIn,
            next_seed(),
        )?,
        ParamKind::Weight,
    );
    let stem_b = store.alloc(array_init(&[first_c], InitSpec::Zeros, 0)?, ParamKind::Weight);
    let head_w = store.alloc(
        array_init(
            &[config.class_count, last_c],
            InitSpec::Normal((1.0 / last_c as f64).sqrt()),
            next_seed(),
        )?,
        ParamKind::Weight,
    );
    let head_b = store.alloc(
        array_init(&[config.class_count], InitSpec::Zeros, 0)?,
        ParamKind::Weight,
    );

    let build_block = |store: &mut ParamStore,
                           spec: &CandidateOpSpec,
                           c_in: usize,
                           c_out: usize,
                           seeds: [u64; 4]|
     -> Result<OpBlock> {
        let (lo, hi) = spec.expansion_interval;
        let h_max = round_width(hi * c_in as f64).max(1);
        let h_min = round_width(lo * c_in as f64).max(1).min(h_max);
        let s_max = if spec.has_se() {
            round_width(spec.se_expansion * c_in as f64 * hi / spec.expansion_init).max(1)
        } else {
            0
        };
        let w1 = store.alloc(
            array_init(&[h_max, c_in], InitSpec::ScaledNormalFanIn, seeds[0])?,
            ParamKind::Weight,
        );
        let b1 = store.alloc(array_init(&[h_max], InitSpec::Zeros, 0)?, ParamKind::Weight);
        let wd = store.alloc(
            array_init(&[h_max], InitSpec::Constant(1.0), 0)?,
            ParamKind::Weight,
        );
        // output projection has no following activation; keep the residual
        // stack's variance growth gentle
        let w2 = store.alloc(
            array_init(
                &[c_out, h_max],
                InitSpec::Normal(0.5 * (1.0 / h_max as f64).sqrt()),
                seeds[1],
            )?,
            ParamKind::Weight,
        );
        let b2 = store.alloc(array_init(&[c_out], InitSpec::Zeros, 0)?, ParamKind::Weight);
        let (se_w1, se_w2) = if spec.has_se() {
            (
                Some(store.alloc(
                    array_init(&[s_max, h_max], InitSpec::ScaledNormalFanIn, seeds[2])?,
                    ParamKind::Weight,
                )),
                Some(store.alloc(
                    array_init(&[h_max, s_max], InitSpec::ScaledNormalFanIn, seeds[3])?,
                    ParamKind::Weight,
                )),
            )
        } else {
            (None, None)
        };
        Ok(OpBlock {
            spec: spec.clone(),
            c_in,
            c_out,
            h_max,
            h_min,
            s_max,
            w1,
            b1,
            wd,
            w2,
            b2,
            se_w1,
            se_w2,
            active_width: round_width(spec.expansion_init * c_in as f64).clamp(h_min, h_max),
            channel_order: (0..h_max).collect(),
        })
    };

    let mut stages = Vec::new();
    let mut searchable_index = 0;
    for st in &config.stages {
        let mut layers = Vec::new();
        for l in 0..st.max_layers {
            let (c_in, c_out) = if l == 0 {
                (st.channels_in, st.channels_out)
            } else {
                (st.channels_out, st.channels_out)
            };
            let specs: Vec<CandidateOpSpec> = if st.searchable {
                config.ops.clone()
            } else {
                vec![fixed_stage_op()]
            };
            let mut ops = Vec::new();
            for spec in &specs {
                let seeds = [next_seed(), next_seed(), next_seed(), next_seed()];
                ops.push(build_block(&mut store, spec, c_in, c_out, seeds)?);
            }
            layers.push(ops);
        }
        let si = if st.searchable {
            searchable_index += 1;
            Some(searchable_index - 1)
        } else {
            None
        };
        stages.push(StageBlocks {
            spec: st.clone(),
            layers,
            searchable_index: si,
        });
    }

    let n_layers = config.searchable_layer_count();
    let n_ops = config.ops.len();
    let alpha = store.alloc(
        array_init(&[n_layers, n_ops], InitSpec::Zeros, 0)?,
        ParamKind::Arch,
    );
    let mut betas = Vec::new();
    for st in config.stages.iter().filter(|s| s.searchable) {
        betas.push(store.alloc(
            array_init(&[st.max_layers], InitSpec::Zeros, 0)?,
            ParamKind::Arch,
        ));
    }
    let skip_logits = store.alloc(
        array_init(&[n_layers], InitSpec::Zeros, 0)?,
        ParamKind::Arch,
    );

    Ok(Supernet {
        config: config.clone(),
        store,
        stages,
        stem_w,
        stem_b,
        head_w,
        head_b,
        alpha,
        betas,
        skip_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Graph;

    fn toy_config(ops: Vec<CandidateOpSpec>, stages: Vec<StageSpec>) -> SupernetConfig {
        SupernetConfig {
            stages,
            ops,
            class_count: 3,
            input_dim: 4,
            seed: 7,
        }
    }

    fn simple_op(name: &str, tag: u32, init: f64, lo: f64, hi: f64, se: f64) -> CandidateOpSpec {
        CandidateOpSpec {
            name: name.into(),
            kernel_tag: tag,
            expansion_init: init,
            expansion_interval: (lo, hi),
            se_expansion: se,
        }
    }

    fn one_stage(searchable: bool, c_in: usize, c_out: usize, max_layers: usize) -> StageSpec {
        StageSpec {
            index: 0,
            channels_in: c_in,
            channels_out: c_out,
            max_layers,
            min_layers: 1,
            activation: Activation::Relu,
            searchable,
            resolution_factor: 1.0,
        }
    }

    #[test]
    fn default_config_shapes_match_the_layout() {
        let cfg = default_config();
        cfg.validate().unwrap();
        assert_eq!(cfg.ops.len(), 8);
        let searchable: Vec<usize> = cfg
            .stages
            .iter()
            .filter(|s| s.searchable)
            .map(|s| s.max_layers)
            .collect();
        assert_eq!(searchable, vec![2, 3, 4, 4, 4, 1]);
        assert_eq!(cfg.searchable_layer_count(), 18);
        let net = build_supernet(&cfg).unwrap();
        assert_eq!(net.store.get(net.alpha).shape(), &[18, 8]);
        assert_eq!(net.betas.len(), 6);
    }

    #[test]
    fn minimal_space_shapes() {
        let cfg = toy_config(
            vec![
                simple_op("a", 3, 2.0, 1.0, 3.0, 0.0),
                simple_op("b", 5, 2.0, 1.0, 3.0, 0.0),
            ],
            vec![one_stage(true, 4, 4, 1)],
        );
        let net = build_supernet(&cfg).unwrap();
        assert_eq!(net.store.get(net.alpha).shape(), &[1, 2]);
        assert_eq!(net.store.get(net.betas[0]).len(), 1);
    }

    #[test]
    fn width_bounds_follow_the_rounding_rule() {
        // e in [4,8], C_in=16: cap 128, init width 96 for e6
        let cfg = toy_config(
            vec![simple_op("k3_e6", 3, 6.0, 4.0, 8.0, 0.0)],
            vec![one_stage(true, 16, 16, 1)],
        );
        let net = build_supernet(&cfg).unwrap();
        let b = &net.stages[0].layers[0][0];
        assert_eq!(b.h_max, 128);
        assert_eq!(b.h_min, 64);
        assert_eq!(b.active_width, 96);
        assert!(b.channel_order.iter().enumerate().all(|(i, &c)| i == c));
    }

    #[test]
    fn config_rejects_channel_mismatch() {
        let mut s1 = one_stage(true, 4, 6, 1);
        s1.index = 0;
        let mut s2 = one_stage(true, 5, 8, 1);
        s2.index = 1;
        let cfg = toy_config(vec![simple_op("a", 3, 2.0, 1.0, 3.0, 0.0)], vec![s1, s2]);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_block_with_residual_is_identity() {
        let cfg = toy_config(
            vec![simple_op("a", 3, 2.0, 1.0, 3.0, 0.0)],
            vec![one_stage(true, 4, 4, 1)],
        );
        let mut net = build_supernet(&cfg).unwrap();
        let block = net.stages[0].layers[0][0].clone();
        for p in [block.w1, block.b1, block.wd, block.w2, block.b2] {
            for v in net.store.get_mut(p).values_mut() {
                *v = 0.0;
            }
        }
        let block = &net.stages[0].layers[0][0];
        let mut g = Graph::new();
        let x = g.constant(vec![0.5, -1.0, 2.0, 0.25]);
        let mut binds = Vec::new();
        let leaves = bind_block(&mut g, &net.store, block, false, &mut binds).unwrap();
        let y = op_forward(&mut g, block, &leaves, x, Activation::Relu).unwrap();
        assert_eq!(g.value(y).values(), &[0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn hand_constructed_block_matches_manual_forward() {
        // 3-dim input, identity-like W1/W2 slices, no SE
        let cfg = toy_config(
            vec![simple_op("a", 3, 1.0, 1.0, 1.0, 0.0)],
            vec![StageSpec {
                index: 0,
                channels_in: 3,
                channels_out: 3,
                max_layers: 1,
                min_layers: 1,
                activation: Activation::Relu,
                searchable: true,
                resolution_factor: 1.0,
            }],
        );
        let mut net = build_supernet(&cfg).unwrap();
        let block = net.stages[0].layers[0][0].clone();
        assert_eq!(block.h_max, 3);
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        net.store
            .get_mut(block.w1)
            .values_mut()
            .copy_from_slice(&eye);
        net.store
            .get_mut(block.w2)
            .values_mut()
            .copy_from_slice(&eye);
        // wd stays 1, biases stay 0: y = relu(relu(x)) + x
        let x = vec![0.5, -2.0, 1.5];
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let mut binds = Vec::new();
        let leaves = bind_block(&mut g, &net.store, &block, false, &mut binds).unwrap();
        let y = op_forward(&mut g, &block, &leaves, xn, Activation::Relu).unwrap();
        let manual: Vec<f64> = x.iter().map(|&v| v.max(0.0) + v).collect();
        assert_eq!(g.value(y).values(), manual.as_slice());
    }

    #[test]
    fn se_gate_forced_open_matches_no_se_block() {
        let cfg = toy_config(
            vec![
                simple_op("se", 3, 2.0, 2.0, 2.0, 1.0),
                simple_op("plain", 3, 2.0, 2.0, 2.0, 0.0),
            ],
            vec![one_stage(true, 4, 4, 1)],
        );
        let mut net = build_supernet(&cfg).unwrap();
        let se_block = net.stages[0].layers[0][0].clone();
        let plain = net.stages[0].layers[0][1].clone();
        // copy the main path of the SE block onto the plain block
        for (a, b) in [
            (se_block.w1, plain.w1),
            (se_block.b1, plain.b1),
            (se_block.wd, plain.wd),
            (se_block.w2, plain.w2),
            (se_block.b2, plain.b2),
        ] {
            let vals = net.store.get(a).values().to_vec();
            net.store.get_mut(b).values_mut().copy_from_slice(&vals);
        }
        // drive the sigmoid to ~1: huge positive se weights on both FC maps
        for p in [se_block.se_w1.unwrap(), se_block.se_w2.unwrap()] {
            for v in net.store.get_mut(p).values_mut() {
                *v = 60.0;
            }
        }
        let x = vec![0.9, 0.4, 0.2, 0.7];
        let run = |block: &OpBlock| -> Vec<f64> {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let mut binds = Vec::new();
            let leaves = bind_block(&mut g, &net.store, block, false, &mut binds).unwrap();
            let y = op_forward(&mut g, block, &leaves, xn, Activation::Relu).unwrap();
            g.value(y).values().to_vec()
        };
        let with_se = run(&se_block);
        let without = run(&plain);
        for (a, b) in with_se.iter().zip(&without) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn signatures_are_deterministic_and_injective() {
        let stage = StageSpec {
            index: 2,
            channels_in: 16,
            channels_out: 24,
            max_layers: 2,
            min_layers: 1,
            activation: Activation::Relu,
            searchable: true,
            resolution_factor: 4.0,
        };
        let k3 = simple_op("k3", 3, 6.0, 4.0, 8.0, 0.0);
        let k5 = simple_op("k5", 5, 6.0, 4.0, 8.0, 0.0);
        assert_eq!(op_signature(&k3, &stage, 16, 48), "k3-se0-16-24-r4.0-w48");
        assert_ne!(
            op_signature(&k3, &stage, 16, 48),
            op_signature(&k3, &stage, 16, 64)
        );
        assert_ne!(
            op_signature(&k3, &stage, 16, 48),
            op_signature(&k5, &stage, 16, 48)
        );
    }

    #[test]
    fn l1_importance_ranks_by_row_norm() {
        let cfg = toy_config(
            vec![simple_op("a", 3, 1.0, 1.0, 1.0, 0.0)],
            vec![StageSpec {
                index: 0,
                channels_in: 3,
                channels_out: 3,
                max_layers: 1,
                min_layers: 1,
                activation: Activation::Relu,
                searchable: true,
                resolution_factor: 1.0,
            }],
        );
        let mut net = build_supernet(&cfg).unwrap();
        let block = net.stages[0].layers[0][0].clone();
        // zero everything, then set W1 row norms to [3,1,2]
        for p in [block.w1, block.b1, block.wd, block.w2, block.b2] {
            for v in net.store.get_mut(p).values_mut() {
                *v = 0.0;
            }
        }
        let w1 = net.store.get_mut(block.w1).values_mut();
        w1[0] = 3.0;
        w1[3] = 1.0;
        w1[6] = 2.0;
        assert_eq!(block.channel_l1_importance(&net.store), vec![0, 2, 1]);

        // all-equal weights tie-break to identity
        for v in net.store.get_mut(block.w1).values_mut() {
            *v = 1.0;
        }
        assert_eq!(block.channel_l1_importance(&net.store), vec![0, 1, 2]);
    }

    #[test]
    fn importance_matches_independent_recomputation() {
        let cfg = toy_config(
            vec![simple_op("se", 3, 2.0, 1.0, 2.5, 1.0)],
            vec![one_stage(true, 4, 5, 1)],
        );
        let net = build_supernet(&cfg).unwrap();
        let block = &net.stages[0].layers[0][0];
        let scores = block.channel_importance_scores(&net.store);
        // second straightforward pass
        let w1 = net.store.get(block.w1).values();
        let b1 = net.store.get(block.b1).values();
        let wd = net.store.get(block.wd).values();
        let w2 = net.store.get(block.w2).values();
        let se1 = net.store.get(block.se_w1.unwrap()).values();
        let se2 = net.store.get(block.se_w2.unwrap()).values();
        for j in 0..block.h_max {
            let mut s = 0.0;
            s += w1[j * block.c_in..(j + 1) * block.c_in]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>();
            s += b1[j].abs() + wd[j].abs();
            s += (0..block.c_out)
                .map(|i| w2[i * block.h_max + j].abs())
                .sum::<f64>();
            s += (0..block.s_max)
                .map(|r| se1[r * block.h_max + j].abs())
                .sum::<f64>();
            s += (0..block.s_max)
                .map(|r| se2[j * block.s_max + r].abs())
                .sum::<f64>();
            assert!((s - scores[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn shrink_expand_round_trip_preserves_forward() {
        let cfg = toy_config(
            vec![simple_op("se", 3, 2.0, 1.0, 3.0, 1.0)],
            vec![one_stage(true, 4, 4, 1)],
        );
        let mut net = build_supernet(&cfg).unwrap();
        let store_snapshot: Vec<Vec<f64>> = (0..net.store.len())
            .map(|i| net.store.get(ParamId(i)).values().to_vec())
            .collect();
        let x = vec![0.3, -0.8, 1.1, 0.05];
        let forward = |net: &Supernet| -> Vec<f64> {
            let block = &net.stages[0].layers[0][0];
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let mut binds = Vec::new();
            let leaves = bind_block(&mut g, &net.store, block, false, &mut binds).unwrap();
            let y = op_forward(&mut g, block, &leaves, xn, Activation::Swish).unwrap();
            g.value(y).values().to_vec()
        };

        let h0 = net.stages[0].layers[0][0].active_width;
        let h_min = net.stages[0].layers[0][0].h_min;
        // canonicalize ranking once at the starting width
        let store = net.store.clone();
        net.stages[0].layers[0][0]
            .set_active_width(&store, h0)
            .unwrap();
        let before = forward(&net);
        net.stages[0].layers[0][0]
            .set_active_width(&store, h_min)
            .unwrap();
        net.stages[0].layers[0][0]
            .set_active_width(&store, h0)
            .unwrap();
        let after = forward(&net);
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // weight values untouched
        for (i, snap) in store_snapshot.iter().enumerate() {
            assert_eq!(net.store.get(ParamId(i)).values(), snap.as_slice());
        }
    }

    #[test]
    fn full_width_reset_is_a_bitwise_noop() {
        let cfg = toy_config(
            vec![simple_op("a", 3, 3.0, 1.0, 3.0, 0.0)],
            vec![one_stage(true, 4, 4, 1)],
        );
        let mut net = build_supernet(&cfg).unwrap();
        let x = vec![0.4, 0.1, -0.2, 0.8];
        let forward = |net: &Supernet| -> Vec<f64> {
            let block = &net.stages[0].layers[0][0];
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let mut binds = Vec::new();
            let leaves = bind_block(&mut g, &net.store, block, false, &mut binds).unwrap();
            let y = op_forward(&mut g, block, &leaves, xn, Activation::Relu).unwrap();
            g.value(y).values().to_vec()
        };
        // init active width == h_max here (e_init == hi)
        assert_eq!(
            net.stages[0].layers[0][0].active_width,
            net.stages[0].layers[0][0].h_max
        );
        let before = forward(&net);
        let store = net.store.clone();
        let h_max = net.stages[0].layers[0][0].h_max;
        net.stages[0].layers[0][0]
            .set_active_width(&store, h_max)
            .unwrap();
        let after = forward(&net);
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn shrink_keeps_top_channels_and_matches_masked_forward() {
        let cfg = toy_config(
            vec![simple_op("a", 3, 2.0, 1.0, 3.0, 0.0)],
            vec![one_stage(true, 4, 4, 1)],
        );
        let mut net = build_supernet(&cfg).unwrap();
        let x = vec![0.2, 0.9, -0.4, 0.6];
        let w = 6;
        let order = net.stages[0].layers[0][0].channel_l1_importance(&net.store);
        let store = net.store.clone();
        net.stages[0].layers[0][0]
            .set_active_width(&store, w)
            .unwrap();
        let block = net.stages[0].layers[0][0].clone();
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let mut binds = Vec::new();
        let leaves = bind_block(&mut g, &net.store, &block, false, &mut binds).unwrap();
        let y = op_forward(&mut g, &block, &leaves, xn, Activation::Relu).unwrap();

        // manual masked computation over the full width
        let keep: std::collections::BTreeSet<usize> = order[..w].iter().cloned().collect();
        let store = &net.store;
        let w1 = store.get(block.w1).values();
        let b1 = store.get(block.b1).values();
        let wd = store.get(block.wd).values();
        let w2 = store.get(block.w2).values();
        let b2 = store.get(block.b2).values();
        let mut manual = b2.to_vec();
        for j in 0..block.h_max {
            if !keep.contains(&j) {
                continue;
            }
            let mut pre = b1[j];
            for (k, &xv) in x.iter().enumerate() {
                pre += w1[j * block.c_in + k] * xv;
            }
            let h = pre.max(0.0);
            let d = (wd[j] * h).max(0.0);
            for i in 0..block.c_out {
                manual[i] += w2[i * block.h_max + j] * d;
            }
        }
        for (m, &xv) in manual.iter_mut().zip(&x) {
            *m += xv; // residual
        }
        for (a, b) in g.value(y).values().iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn set_active_width_rejects_out_of_range() {
        let cfg = toy_config(
            vec![simple_op("a", 3, 2.0, 1.0, 3.0, 0.0)],
            vec![one_stage(true, 4, 4, 1)],
        );
        let mut net = build_supernet(&cfg).unwrap();
        let store = net.store.clone();
        let block = &mut net.stages[0].layers[0][0];
        let too_big = block.h_max + 1;
        assert!(matches!(
            block.set_active_width(&store, too_big),
            Err(Error::WidthRange { .. })
        ));
        assert!(matches!(
            block.set_active_width(&store, 1),
            Err(Error::WidthRange { .. })
        ));
    }

    #[test]
    fn residual_rule_matches_stage_transitions_in_default_config() {
        let cfg = default_config();
        let net = build_supernet(&cfg).unwrap();
        for st in &net.stages {
            for (l, layer) in st.layers.iter().enumerate() {
                for block in layer {
                    let expect = if l == 0 {
                        st.spec.channels_in == st.spec.channels_out
                    } else {
                        true
                    };
                    assert_eq!(block.has_residual(), expect);
                }
            }
        }
    }
}
