//! Minimal reverse-mode gradient engine over dense 64-bit arrays.
//!
//! The engine is a flat tape: nodes are appended in forward order, so the
//! reverse of the insertion order is a valid reverse-topological order for
//! backpropagation. A graph lives for exactly one step and is rebuilt from
//! the parameter store on the next one; arrays are immutable once written by
//! their creating operation.
//!
//! Every operation validates shapes on entry and finiteness on exit, so a
//! diverging run fails loudly at the op that produced the first non-finite
//! value instead of propagating NaNs into the update rules.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Array
// ---------------------------------------------------------------------------

/// Dense row-major f64 array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

impl Array {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "shape must be nonempty with all dims >= 1, got {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::InvalidShape(format!(
                "value count {} does not match shape {:?} (expected {})",
                values.len(),
                shape,
                expect
            )));
        }
        Ok(Array {
            shape,
            values,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Array::new(shape, vec![0.0; n])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        let n = values.len().max(1);
        Array {
            shape: vec![n],
            values: if values.is_empty() { vec![0.0] } else { values },
            requires_grad: false,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Array {
            shape: vec![1],
            values: vec![x],
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty() // unreachable: zero dims are rejected
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Value of a scalar array.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Initialization schemes for `array_init`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitSpec {
    Zeros,
    Constant(f64),
    Uniform(f64, f64),
    /// Normal with std sqrt(2 / fan_in); fan_in is the trailing dim for
    /// matrices and the length for vectors.
    ScaledNormalFanIn,
    /// Normal with an explicit standard deviation. Used for projections not
    /// followed by an activation, where fan-in He scaling would compound
    /// variance across a residual stack.
    Normal(f64),
}

/// Deterministic array construction: a fixed seed yields a bitwise-identical
/// array on every call.
pub fn array_init(shape: &[usize], init: InitSpec, seed: u64) -> Result<Array> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(format!(
            "shape must be nonempty with all dims >= 1, got {shape:?}"
        )));
    }
    let n: usize = shape.iter().product();
    let values = match init {
        InitSpec::Zeros => vec![0.0; n],
        InitSpec::Constant(c) => vec![c; n],
        InitSpec::Uniform(a, b) => {
            if !(a < b) {
                return Err(Error::InvalidArgument(format!(
                    "uniform bounds must satisfy a < b, got ({a}, {b})"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Uniform::new(a, b)
                .map_err(|e| Error::InvalidArgument(format!("uniform: {e}")))?;
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        InitSpec::ScaledNormalFanIn => {
            let fan_in = if shape.len() >= 2 {
                shape[shape.len() - 1]
            } else {
                shape[0]
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect()
        }
        InitSpec::Normal(std) => {
            if !(std >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "normal std must be nonnegative, got {std}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect()
        }
    };
    Array::new(shape.to_vec(), values)
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Primitive tags exposed through `forward_primitive`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimitiveTag {
    /// `[m,n] x [n] -> [m]`
    MatVec,
    Add,
    MulElementwise,
    Relu,
    Swish,
    Sigmoid,
    /// Elementwise average of n same-shape inputs.
    Mean,
    Scale(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec,
    Add,
    MulElementwise,
    Relu,
    Swish,
    Sigmoid,
    Mean,
    Scale(f64),
    Ln,
    Softmax { temperature: f64 },
    WeightedSum,
    CrossEntropySmoothed { label: usize, epsilon: f64 },
    /// Straight-through hard selection: forward is a one-hot at the argmax,
    /// backward passes the upstream gradient through unchanged.
    HardMax,
    Concat,
}

#[derive(Debug)]
struct NodeRec {
    op: Op,
    inputs: Vec<NodeId>,
    value: Array,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to requires-grad leaf nodes.
/// Leaves not reachable from the root carry zero gradients.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Array>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Array)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// One-step computation graph. Rebuilt per search step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<NodeRec>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Lowest-index argmax.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Array) -> NodeId {
        let requires_grad = value.requires_grad();
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        self.leaf(Array::from_vec(values))
    }

    pub fn constant_scalar(&mut self, x: f64) -> NodeId {
        self.leaf(Array::scalar(x))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Array, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeRec {
            op,
            inputs,
            value,
            requires_grad,
        });
        id
    }

    fn any_requires(&self, inputs: &[NodeId]) -> bool {
        inputs.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn finish(&mut self, op: Op, inputs: Vec<NodeId>, value: Array) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {op:?}"
            )));
        }
        let rg = self.any_requires(&inputs);
        Ok(self.push(op, inputs, value, rg))
    }

    /// Dispatch for the primitive op set.
    pub fn forward_primitive(&mut self, tag: PrimitiveTag, inputs: &[NodeId]) -> Result<NodeId> {
        match tag {
            PrimitiveTag::MatVec => {
                self.expect_arity(inputs, 2, "matvec")?;
                self.matvec(inputs[0], inputs[1])
            }
            PrimitiveTag::Add => {
                self.expect_arity(inputs, 2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            PrimitiveTag::MulElementwise => {
                self.expect_arity(inputs, 2, "mul_elementwise")?;
                self.mul(inputs[0], inputs[1])
            }
            PrimitiveTag::Relu => {
                self.expect_arity(inputs, 1, "relu")?;
                self.relu(inputs[0])
            }
            PrimitiveTag::Swish => {
                self.expect_arity(inputs, 1, "swish")?;
                self.swish(inputs[0])
            }
            PrimitiveTag::Sigmoid => {
                self.expect_arity(inputs, 1, "sigmoid")?;
                self.sigmoid(inputs[0])
            }
            PrimitiveTag::Mean => self.mean(inputs),
            PrimitiveTag::Scale(c) => {
                self.expect_arity(inputs, 1, "scale")?;
                self.scale(inputs[0], c)
            }
        }
    }

    fn expect_arity(&self, inputs: &[NodeId], n: usize, what: &str) -> Result<()> {
        if inputs.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{what} expects {n} inputs, got {}",
                inputs.len()
            )));
        }
        Ok(())
    }

    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> Result<NodeId> {
        let (ms, xs) = (self.value(m).shape().to_vec(), self.value(x).shape().to_vec());
        if ms.len() != 2 || xs.len() != 1 || ms[1] != xs[0] {
            return Err(Error::InvalidShape(format!(
                "matvec expects [m,n] x [n], got {ms:?} x {xs:?}"
            )));
        }
        let (rows, cols) = (ms[0], ms[1]);
        let mv = self.value(m).values();
        let xv = self.value(x).values();
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let row = &mv[i * cols..(i + 1) * cols];
            let mut acc = 0.0;
            for j in 0..cols {
                acc += row[j] * xv[j];
            }
            out[i] = acc;
        }
        let value = Array::new(vec![rows], out)?;
        self.finish(Op::MatVec, vec![m, x], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let value = Array::new(self.value(a).shape().to_vec(), out)?;
        self.finish(Op::Add, vec![a, b], value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul_elementwise")?;
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let value = Array::new(self.value(a).shape().to_vec(), out)?;
        self.finish(Op::MulElementwise, vec![a, b], value)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::InvalidShape(format!(
                "{what} expects equal shapes, got {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).values().iter().map(|&v| v.max(0.0)).collect();
        let value = Array::new(self.value(x).shape().to_vec(), out)?;
        self.finish(Op::Relu, vec![x], value)
    }

    pub fn swish(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self
            .value(x)
            .values()
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let value = Array::new(self.value(x).shape().to_vec(), out)?;
        self.finish(Op::Swish, vec![x], value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).values().iter().map(|&v| sigmoid(v)).collect();
        let value = Array::new(self.value(x).shape().to_vec(), out)?;
        self.finish(Op::Sigmoid, vec![x], value)
    }

    /// Elementwise average of `inputs` (all the same shape).
    pub fn mean(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("mean of zero inputs".into()));
        }
        for &i in &inputs[1..] {
            self.same_shape(inputs[0], i, "mean")?;
        }
        let n = inputs.len() as f64;
        let len = self.value(inputs[0]).len();
        let mut out = vec![0.0; len];
        for &i in inputs {
            for (o, v) in out.iter_mut().zip(self.value(i).values()) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= n;
        }
        let value = Array::new(self.value(inputs[0]).shape().to_vec(), out)?;
        self.finish(Op::Mean, inputs.to_vec(), value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).values().iter().map(|&v| v * c).collect();
        let value = Array::new(self.value(x).shape().to_vec(), out)?;
        self.finish(Op::Scale(c), vec![x], value)
    }

    /// Natural log, elementwise. All entries must be strictly positive.
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).values().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric(
                "ln requires strictly positive inputs".into(),
            ));
        }
        let out: Vec<f64> = self.value(x).values().iter().map(|&v| v.ln()).collect();
        let value = Array::new(self.value(x).shape().to_vec(), out)?;
        self.finish(Op::Ln, vec![x], value)
    }

    /// Temperature softmax with max-subtraction. Output entries are positive
    /// and sum to one within 1e-12.
    pub fn softmax(&mut self, v: NodeId, temperature: f64) -> Result<NodeId> {
        if self.value(v).shape().len() != 1 {
            return Err(Error::InvalidShape("softmax expects a rank-1 input".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let out = softmax_values(self.value(v).values(), temperature);
        let value = Array::new(self.value(v).shape().to_vec(), out)?;
        self.finish(Op::Softmax { temperature }, vec![v], value)
    }

    /// `out = sum_i weights[i] * terms[i]`, linear in both factors. The
    /// gradient to weight i is the inner product of term i with the upstream
    /// gradient.
    pub fn weighted_sum(&mut self, weights: NodeId, terms: &[NodeId]) -> Result<NodeId> {
        let n = self.value(weights).len();
        if self.value(weights).shape().len() != 1 || n != terms.len() {
            return Err(Error::InvalidShape(format!(
                "weighted_sum expects rank-1 weights of length {} to match term count",
                terms.len()
            )));
        }
        if terms.is_empty() {
            return Err(Error::InvalidArgument("weighted_sum of zero terms".into()));
        }
        for &t in &terms[1..] {
            self.same_shape(terms[0], t, "weighted_sum terms")?;
        }
        let len = self.value(terms[0]).len();
        let mut out = vec![0.0; len];
        for (i, &t) in terms.iter().enumerate() {
            let w = self.value(weights).values()[i];
            for (o, v) in out.iter_mut().zip(self.value(t).values()) {
                *o += w * v;
            }
        }
        let value = Array::new(self.value(terms[0]).shape().to_vec(), out)?;
        let mut inputs = Vec::with_capacity(terms.len() + 1);
        inputs.push(weights);
        inputs.extend_from_slice(terms);
        self.finish(Op::WeightedSum, inputs, value)
    }

    /// Label-smoothed cross entropy: `-sum_c q_c log p_c` with
    /// `q = (1 - eps) * onehot(label) + eps / K`.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: NodeId,
        label: usize,
        epsilon: f64,
    ) -> Result<NodeId> {
        let k = self.value(logits).len();
        if self.value(logits).shape().len() != 1 {
            return Err(Error::InvalidShape(
                "cross_entropy expects rank-1 logits".into(),
            ));
        }
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be in [0, 1), got {epsilon}"
            )));
        }
        let z = self.value(logits).values();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let kf = k as f64;
        // loss = lse - sum_c q_c z_c
        let mut dot = 0.0;
        for (c, &v) in z.iter().enumerate() {
            let q = if c == label { 1.0 - epsilon + epsilon / kf } else { epsilon / kf };
            dot += q * v;
        }
        let value = Array::scalar(lse - dot);
        self.finish(
            Op::CrossEntropySmoothed { label, epsilon },
            vec![logits],
            value,
        )
    }

    /// Straight-through hard selection over a rank-1 probability vector:
    /// forward emits a one-hot at the argmax (lowest index wins ties),
    /// backward passes the upstream gradient through unchanged.
    pub fn hard_max(&mut self, u: NodeId) -> Result<NodeId> {
        if self.value(u).shape().len() != 1 {
            return Err(Error::InvalidShape("hard_max expects a rank-1 input".into()));
        }
        let vals = self.value(u).values();
        let idx = argmax(vals);
        let mut out = vec![0.0; vals.len()];
        out[idx] = 1.0;
        let value = Array::new(self.value(u).shape().to_vec(), out)?;
        self.finish(Op::HardMax, vec![u], value)
    }

    /// Concatenate rank-1 nodes.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero inputs".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).shape().len() != 1 {
                return Err(Error::InvalidShape("concat expects rank-1 inputs".into()));
            }
            out.extend_from_slice(self.value(p).values());
        }
        let value = Array::new(vec![out.len()], out)?;
        self.finish(Op::Concat, parts.to_vec(), value)
    }

    // -----------------------------------------------------------------------
    // Backward
    // -----------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Returns gradients for every
    /// requires-grad leaf; leaves the root does not reach get zeros.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap> {
        if !self.value(root).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(up) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(up);
                continue;
            }
            self.accumulate(node, &up, &mut grads);
        }

        let mut map = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                map.insert(NodeId(i), Array::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(GradientMap { grads: map })
    }

    fn accumulate(&self, node: &NodeRec, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut add_to = |target: NodeId, contrib: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[target.0].requires_grad {
                return;
            }
            let slot = &mut grads[target.0];
            if slot.is_none() {
                *slot = Some(vec![0.0; self.nodes[target.0].value.len()]);
            }
            contrib(slot.as_mut().unwrap());
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatVec => {
                let (m, x) = (node.inputs[0], node.inputs[1]);
                let mv = self.value(m).values();
                let xv = self.value(x).values();
                let cols = self.value(x).len();
                add_to(m, &mut |g| {
                    for (i, &u) in up.iter().enumerate() {
                        for j in 0..cols {
                            g[i * cols + j] += u * xv[j];
                        }
                    }
                });
                add_to(x, &mut |g| {
                    for (i, &u) in up.iter().enumerate() {
                        for j in 0..cols {
                            g[j] += mv[i * cols + j] * u;
                        }
                    }
                });
            }
            Op::Add => {
                for &inp in &node.inputs {
                    add_to(inp, &mut |g| {
                        for (gv, &u) in g.iter_mut().zip(up) {
                            *gv += u;
                        }
                    });
                }
            }
            Op::MulElementwise => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let av = self.value(a).values();
                let bv = self.value(b).values();
                add_to(a, &mut |g| {
                    for ((gv, &u), &y) in g.iter_mut().zip(up).zip(bv) {
                        *gv += u * y;
                    }
                });
                add_to(b, &mut |g| {
                    for ((gv, &u), &x) in g.iter_mut().zip(up).zip(av) {
                        *gv += u * x;
                    }
                });
            }
            Op::Relu => {
                // Subgradient at exactly zero is zero.
                let xv = self.value(node.inputs[0]).values();
                add_to(node.inputs[0], &mut |g| {
                    for ((gv, &u), &x) in g.iter_mut().zip(up).zip(xv) {
                        if x > 0.0 {
                            *gv += u;
                        }
                    }
                });
            }
            Op::Swish => {
                let xv = self.value(node.inputs[0]).values();
                add_to(node.inputs[0], &mut |g| {
                    for ((gv, &u), &x) in g.iter_mut().zip(up).zip(xv) {
                        let s = sigmoid(x);
                        *gv += u * (s + x * s * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid => {
                let yv = node.value.values();
                add_to(node.inputs[0], &mut |g| {
                    for ((gv, &u), &y) in g.iter_mut().zip(up).zip(yv) {
                        *gv += u * y * (1.0 - y);
                    }
                });
            }
            Op::Mean => {
                let n = node.inputs.len() as f64;
                for &inp in &node.inputs {
                    add_to(inp, &mut |g| {
                        for (gv, &u) in g.iter_mut().zip(up) {
                            *gv += u / n;
                        }
                    });
                }
            }
            Op::Scale(c) => {
                let c = *c;
                add_to(node.inputs[0], &mut |g| {
                    for (gv, &u) in g.iter_mut().zip(up) {
                        *gv += c * u;
                    }
                });
            }
            Op::Ln => {
                let xv = self.value(node.inputs[0]).values();
                add_to(node.inputs[0], &mut |g| {
                    for ((gv, &u), &x) in g.iter_mut().zip(up).zip(xv) {
                        *gv += u / x;
                    }
                });
            }
            Op::Softmax { temperature } => {
                let y = node.value.values();
                let tau = *temperature;
                let dot: f64 = up.iter().zip(y).map(|(&u, &yi)| u * yi).sum();
                add_to(node.inputs[0], &mut |g| {
                    for ((gv, &u), &yi) in g.iter_mut().zip(up).zip(y) {
                        *gv += yi * (u - dot) / tau;
                    }
                });
            }
            Op::WeightedSum => {
                let weights = node.inputs[0];
                let wv = self.value(weights).values().to_vec();
                for (i, &term) in node.inputs[1..].iter().enumerate() {
                    let tv = self.value(term).values();
                    add_to(weights, &mut |g| {
                        let mut dot = 0.0;
                        for (&u, &t) in up.iter().zip(tv) {
                            dot += u * t;
                        }
                        g[i] += dot;
                    });
                    let wi = wv[i];
                    add_to(term, &mut |g| {
                        for (gv, &u) in g.iter_mut().zip(up) {
                            *gv += wi * u;
                        }
                    });
                }
            }
            Op::CrossEntropySmoothed { label, epsilon } => {
                // d loss / d z_c = p_c - q_c
                let z = self.value(node.inputs[0]).values();
                let p = softmax_values(z, 1.0);
                let k = z.len() as f64;
                let (label, eps) = (*label, *epsilon);
                let u = up[0];
                add_to(node.inputs[0], &mut |g| {
                    for (c, gv) in g.iter_mut().enumerate() {
                        let q = if c == label { 1.0 - eps + eps / k } else { eps / k };
                        *gv += u * (p[c] - q);
                    }
                });
            }
            Op::HardMax => {
                add_to(node.inputs[0], &mut |g| {
                    for (gv, &u) in g.iter_mut().zip(up) {
                        *gv += u;
                    }
                });
            }
            Op::Concat => {
                let mut offset = 0;
                for &inp in &node.inputs {
                    let len = self.value(inp).len();
                    let piece = &up[offset..offset + len];
                    add_to(inp, &mut |g| {
                        for (gv, &u) in g.iter_mut().zip(piece) {
                            *gv += u;
                        }
                    });
                    offset += len;
                }
            }
        }
    }
}

/// Stable softmax on plain values; the graph op and plain-value samplers
/// share this so their outputs match bitwise.
pub fn softmax_values(z: &[f64], temperature: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` receives a fresh graph plus leaf ids for `params` (in order) and must
/// return a scalar root. It is evaluated twice up front; differing values
/// mean the oracle is invalid (hidden randomness) and an error is returned.
/// The result is the max over all parameter coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Array], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let eval = |arrays: &[Array]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = arrays
            .iter()
            .map(|a| g.leaf(a.clone().with_requires_grad(true)))
            .collect();
        let root = f(&mut g, &ids)?;
        if !g.value(root).is_scalar() {
            return Err(Error::InvalidArgument("grad_check f must be scalar".into()));
        }
        Ok(g.value(root).item())
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "two evaluations differ ({base} vs {again}); f must be deterministic"
        )));
    }

    // Analytic gradients at the base point.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|a| g.leaf(a.clone().with_requires_grad(true)))
        .collect();
    let root = f(&mut g, &ids)?;
    let grads = g.backward(root)?;

    let mut max_err: f64 = 0.0;
    let mut work: Vec<Array> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .ok_or_else(|| Error::OracleInvalid("missing analytic gradient".into()))?
            .values()
            .to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = work[pi].values()[k];
            work[pi].values_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[pi].values_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[pi].values_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
