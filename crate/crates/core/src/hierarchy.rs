//! Depth-`N` option hierarchies.
//!
//! Level 0 holds the single super-option `o⁰`, which never terminates
//! (`β⁰ ≡ 0`). Levels `1..N-1` hold options and level `N` holds primitive
//! actions, which always terminate (`β^N ≡ 1`). Intra-option policies are
//! softmax and terminations are logistic, both over linear scores of a
//! [`FeatureMap`].
//!
//! Option prefixes passed to this module exclude the root: a prefix of
//! length `m` is `o^{1:m}`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::mdp::sample_index;

pub const DEFAULT_BOUND: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchySpec {
    depth: usize,
    options_per_level: Vec<usize>,
    n_actions: usize,
}

impl HierarchySpec {
    /// `options_per_level` lists the option counts of levels `1..depth-1`.
    pub fn new(depth: usize, options_per_level: Vec<usize>, n_actions: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidHierarchy("depth must be at least 1".into()));
        }
        if options_per_level.len() != depth - 1 {
            return Err(Error::InvalidHierarchy(format!(
                "depth {depth} needs {} option counts, got {}",
                depth - 1,
                options_per_level.len()
            )));
        }
        if n_actions == 0 || options_per_level.contains(&0) {
            return Err(Error::InvalidHierarchy("every level needs at least one choice".into()));
        }
        Ok(HierarchySpec {
            depth,
            options_per_level,
            n_actions,
        })
    }

    /// `N = 1`: a flat state-conditioned policy.
    pub fn flat(n_actions: usize) -> Result<Self> {
        Self::new(1, vec![], n_actions)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn options_per_level(&self) -> &[usize] {
        &self.options_per_level
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Number of choices at `level ∈ 1..=N`.
    pub fn choices(&self, level: usize) -> usize {
        if level == self.depth {
            self.n_actions
        } else {
            self.options_per_level[level - 1]
        }
    }

    /// Number of distinct prefixes `o^{1:len}`.
    pub fn prefix_count(&self, len: usize) -> usize {
        self.options_per_level[..len].iter().product()
    }

    /// Number of full option stacks `o^{0:N-1}`.
    pub fn stack_count(&self) -> usize {
        self.prefix_count(self.depth - 1)
    }

    /// Mixed-radix index of a prefix, most significant level first.
    pub fn prefix_index(&self, prefix: &[usize]) -> usize {
        prefix
            .iter()
            .zip(&self.options_per_level)
            .fold(0, |acc, (o, k)| acc * k + o)
    }

    pub fn prefix_from_index(&self, len: usize, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; len];
        for l in (0..len).rev() {
            let k = self.options_per_level[l];
            out[l] = index % k;
            index /= k;
        }
        out
    }
}

/// Active options `o⁰..o^{N-1}`; `ids[0]` is the super-option and always 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OptionStack {
    ids: Vec<usize>,
}

impl OptionStack {
    pub fn root(depth: usize) -> Self {
        OptionStack { ids: vec![0; depth] }
    }

    pub fn from_prefix(spec: &HierarchySpec, prefix: &[usize]) -> Result<Self> {
        if prefix.len() != spec.depth - 1 {
            return Err(Error::InvalidHierarchy(format!(
                "stack needs {} options below the root, got {}",
                spec.depth - 1,
                prefix.len()
            )));
        }
        for (l, (o, k)) in prefix.iter().zip(spec.options_per_level()).enumerate() {
            if o >= k {
                return Err(Error::InvalidHierarchy(format!(
                    "option {o} at level {} exceeds count {k}",
                    l + 1
                )));
            }
        }
        let mut ids = Vec::with_capacity(spec.depth);
        ids.push(0);
        ids.extend_from_slice(prefix);
        Ok(OptionStack { ids })
    }

    pub fn from_index(spec: &HierarchySpec, index: usize) -> Self {
        let mut ids = vec![0];
        ids.extend(spec.prefix_from_index(spec.depth - 1, index));
        OptionStack { ids }
    }

    pub fn index(&self, spec: &HierarchySpec) -> usize {
        spec.prefix_index(self.prefix(self.ids.len() - 1))
    }

    /// Option at `level ∈ 0..N`.
    pub fn level(&self, level: usize) -> usize {
        self.ids[level]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// `o^{1:len}`.
    pub fn prefix(&self, len: usize) -> &[usize] {
        &self.ids[1..=len]
    }
}

/// Linear features for one prefix length: a dense row per `(s, prefix)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub dim: usize,
    /// Row-major, `n_states * prefix_count(len)` rows of `dim` entries,
    /// ordered by `s * prefix_count(len) + prefix_index`.
    pub rows: Vec<f64>,
}

/// Context features shared by policies, terminations and the critic.
///
/// The context `(s, o^{1:m})` conditions `π^{m+1}`, `β^m` and `Q_Ω` at level
/// `m`, so one table per prefix length `m ∈ 0..N` covers all three.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureMap {
    /// One indicator per `(s, prefix)` context.
    Tabular,
    /// User-supplied tables, one per prefix length.
    Linear(Vec<FeatureTable>),
}

/// A borrowed feature vector.
#[derive(Clone, Copy, Debug)]
pub enum FeatureRef<'a> {
    OneHot(usize),
    Dense(&'a [f64]),
}

impl FeatureRef<'_> {
    pub fn dot(&self, weights: &[f64]) -> f64 {
        match self {
            FeatureRef::OneHot(j) => weights[*j],
            FeatureRef::Dense(f) => f.iter().zip(weights).map(|(x, w)| x * w).sum(),
        }
    }

    /// `sink[offset + j] += scale * f_j` for every feature `j`.
    pub fn scatter<S: GradSink + ?Sized>(&self, offset: usize, scale: f64, sink: &mut S) {
        match self {
            FeatureRef::OneHot(j) => sink.add(offset + j, scale),
            FeatureRef::Dense(f) => {
                for (j, x) in f.iter().enumerate() {
                    if *x != 0.0 {
                        sink.add(offset + j, scale * x);
                    }
                }
            }
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        match self {
            FeatureRef::OneHot(j) => {
                let mut v = vec![0.0; dim];
                v[*j] = 1.0;
                v
            }
            FeatureRef::Dense(f) => f.to_vec(),
        }
    }
}

/// Destination for gradient contributions.
pub trait GradSink {
    fn add(&mut self, index: usize, value: f64);
}

impl GradSink for [f64] {
    fn add(&mut self, index: usize, value: f64) {
        self[index] += value;
    }
}

impl GradSink for Vec<f64> {
    fn add(&mut self, index: usize, value: f64) {
        self[index] += value;
    }
}

/// Sparse `(index, value)` accumulator; duplicates are allowed.
#[derive(Clone, Debug, Default)]
pub struct SparseGrad(pub Vec<(usize, f64)>);

impl GradSink for SparseGrad {
    fn add(&mut self, index: usize, value: f64) {
        self.0.push((index, value));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub offset: usize,
    /// Choices for a policy block, 1 for a termination block.
    pub rows: usize,
    /// Feature dimension of the conditioning context.
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Where each level's weights live in the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    /// `policy[ℓ-1]` for `ℓ ∈ 1..=N`.
    pub policy: Vec<Block>,
    /// `termination[ℓ-1]` for `ℓ ∈ 1..N`.
    pub termination: Vec<Block>,
    pub total: usize,
}

impl ParamLayout {
    pub fn policy_block(&self, level: usize) -> Block {
        self.policy[level - 1]
    }

    pub fn termination_block(&self, level: usize) -> Block {
        self.termination[level - 1]
    }

    /// Human-readable name of the block holding coordinate `index`.
    pub fn block_name(&self, index: usize) -> String {
        for (l, b) in self.policy.iter().enumerate() {
            if b.range().contains(&index) {
                return format!("policy{}", l + 1);
            }
        }
        for (l, b) in self.termination.iter().enumerate() {
            if b.range().contains(&index) {
                return format!("termination{}", l + 1);
            }
        }
        "unknown".into()
    }

    /// All blocks with their names, policies first.
    pub fn named_blocks(&self) -> Vec<(String, Block)> {
        let mut out: Vec<_> = self
            .policy
            .iter()
            .enumerate()
            .map(|(l, b)| (format!("policy{}", l + 1), *b))
            .collect();
        out.extend(
            self.termination
                .iter()
                .enumerate()
                .map(|(l, b)| (format!("termination{}", l + 1), *b)),
        );
        out
    }
}

/// Actor parameters θ: policy weights for levels `1..=N` and termination
/// weights for levels `1..N`, all kept inside `[-bound, bound]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorParams {
    pub layout: ParamLayout,
    weights: Vec<f64>,
    bound: f64,
}

impl ActorParams {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.weights[index]
    }

    /// Sets a coordinate, clamped into the box.
    pub fn set(&mut self, index: usize, value: f64) {
        self.weights[index] = value.clamp(-self.bound, self.bound);
    }

    /// Replaces all weights, clamping each into the box.
    pub fn set_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for a {}-dimensional actor",
                weights.len(),
                self.weights.len()
            )));
        }
        for (w, v) in self.weights.iter_mut().zip(weights) {
            *w = v.clamp(-self.bound, self.bound);
        }
        Ok(())
    }

    /// Unclamped view for finite-difference probes that may step past the box.
    pub(crate) fn weights_mut_unchecked(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// `θ ← Γ[θ + step·g]`: adds every sparse entry, then clamps the touched
    /// coordinates.
    pub fn apply_projected(&mut self, grad: &SparseGrad, step: f64) {
        for &(i, g) in &grad.0 {
            self.weights[i] += step * g;
        }
        for &(i, _) in &grad.0 {
            self.weights[i] = self.weights[i].clamp(-self.bound, self.bound);
        }
    }

    /// Snapshot keyed by level, as written to `final_params.json`.
    pub fn snapshot_json(&self) -> serde_json::Value {
        let block = |b: &Block| {
            self.weights[b.range()]
                .chunks(b.cols.max(1))
                .map(<[f64]>::to_vec)
                .collect::<Vec<_>>()
        };
        let policy: serde_json::Map<String, serde_json::Value> = self
            .layout
            .policy
            .iter()
            .enumerate()
            .map(|(l, b)| ((l + 1).to_string(), json!(block(b))))
            .collect();
        let termination: serde_json::Map<String, serde_json::Value> = self
            .layout
            .termination
            .iter()
            .enumerate()
            .map(|(l, b)| ((l + 1).to_string(), json!(block(b)[0])))
            .collect();
        json!({
            "bound": self.bound,
            "policy": policy,
            "termination": termination,
        })
    }

    /// Inverse of [`ActorParams::snapshot_json`], validated against `layout`.
    pub fn from_snapshot_json(layout: &ParamLayout, value: &serde_json::Value) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("parameter snapshot: {msg}"));
        let bound = value["bound"].as_f64().ok_or_else(|| bad("missing bound"))?;
        let mut weights = vec![0.0; layout.total];
        let read = |v: &serde_json::Value, out: &mut [f64]| -> Result<()> {
            let flat: Vec<f64> = match v {
                serde_json::Value::Array(rows) if rows.first().is_some_and(|r| r.is_array()) => rows
                    .iter()
                    .flat_map(|r| r.as_array().cloned().unwrap_or_default())
                    .map(|x| x.as_f64().ok_or_else(|| bad("non-numeric weight")))
                    .collect::<Result<_>>()?,
                serde_json::Value::Array(xs) => xs
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| bad("non-numeric weight")))
                    .collect::<Result<_>>()?,
                _ => return Err(bad("expected an array")),
            };
            if flat.len() != out.len() {
                return Err(bad("block size mismatch"));
            }
            out.copy_from_slice(&flat);
            Ok(())
        };
        for (l, b) in layout.policy.iter().enumerate() {
            read(&value["policy"][(l + 1).to_string()], &mut weights[b.range()])?;
        }
        for (l, b) in layout.termination.iter().enumerate() {
            read(&value["termination"][(l + 1).to_string()], &mut weights[b.range()])?;
        }
        let mut params = ActorParams {
            layout: layout.clone(),
            weights: vec![0.0; layout.total],
            bound,
        };
        params.set_weights(&weights)?;
        Ok(params)
    }
}

/// Log-probability gradients ψ for one augmented transition, each in the
/// full actor dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct LogGradFeatures {
    /// `∇ log π^N(a | s, o^{0:N-1})`.
    pub psi_action: Vec<f64>,
    /// `psi_option[ℓ-1] = ∇ log π^ℓ(o^ℓ | s, o^{0:ℓ-1})` for `ℓ ∈ 1..N`.
    pub psi_option: Vec<Vec<f64>>,
    /// `psi_beta[ℓ-1] = ∇ log β^ℓ(s', o^{0:ℓ})` for `ℓ ∈ 1..N`.
    pub psi_beta: Vec<Vec<f64>>,
}

/// An option hierarchy bound to a state space and feature map.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    spec: HierarchySpec,
    n_states: usize,
    features: FeatureMap,
    dims: Vec<usize>,
    layout: ParamLayout,
}

impl Hierarchy {
    pub fn tabular(spec: HierarchySpec, n_states: usize) -> Result<Self> {
        Self::with_features(spec, n_states, FeatureMap::Tabular)
    }

    pub fn with_features(spec: HierarchySpec, n_states: usize, features: FeatureMap) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::InvalidHierarchy("need at least one state".into()));
        }
        let n = spec.depth();
        let dims: Vec<usize> = match &features {
            FeatureMap::Tabular => (0..n).map(|m| n_states * spec.prefix_count(m)).collect(),
            FeatureMap::Linear(tables) => {
                if tables.len() != n {
                    return Err(Error::InvalidHierarchy(format!(
                        "need {n} feature tables, got {}",
                        tables.len()
                    )));
                }
                for (m, t) in tables.iter().enumerate() {
                    let contexts = n_states * spec.prefix_count(m);
                    if t.dim == 0 || t.rows.len() != contexts * t.dim {
                        return Err(Error::InvalidHierarchy(format!(
                            "feature table {m} has {} entries, expected {contexts} x {}",
                            t.rows.len(),
                            t.dim
                        )));
                    }
                    if t.rows.iter().any(|x| !x.is_finite()) {
                        return Err(Error::InvalidHierarchy(format!("feature table {m} has non-finite entries")));
                    }
                }
                tables.iter().map(|t| t.dim).collect()
            }
        };
        let mut offset = 0;
        let mut policy = Vec::with_capacity(n);
        for level in 1..=n {
            let b = Block {
                offset,
                rows: spec.choices(level),
                cols: dims[level - 1],
            };
            offset += b.len();
            policy.push(b);
        }
        let mut termination = Vec::with_capacity(n.saturating_sub(1));
        for level in 1..n {
            let b = Block {
                offset,
                rows: 1,
                cols: dims[level],
            };
            offset += b.len();
            termination.push(b);
        }
        Ok(Hierarchy {
            spec,
            n_states,
            features,
            dims,
            layout: ParamLayout {
                policy,
                termination,
                total: offset,
            },
        })
    }

    pub fn spec(&self) -> &HierarchySpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.spec.depth()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.features
    }

    /// Feature dimension of contexts with prefix length `len`.
    pub fn feature_dim(&self, len: usize) -> usize {
        self.dims[len]
    }

    /// Number of augmented states `(s, o^{0:N-1})`.
    pub fn augmented_count(&self) -> usize {
        self.n_states * self.spec.stack_count()
    }

    /// All-zero parameters: uniform policies and `β = 0.5`.
    pub fn init_params(&self, bound: f64) -> ActorParams {
        ActorParams {
            layout: self.layout.clone(),
            weights: vec![0.0; self.layout.total],
            bound,
        }
    }

    pub fn features(&self, s: usize, prefix: &[usize]) -> FeatureRef<'_> {
        let m = prefix.len();
        let context = s * self.spec.prefix_count(m) + self.spec.prefix_index(prefix);
        match &self.features {
            FeatureMap::Tabular => FeatureRef::OneHot(context),
            FeatureMap::Linear(tables) => {
                let t = &tables[m];
                FeatureRef::Dense(&t.rows[context * t.dim..(context + 1) * t.dim])
            }
        }
    }

    fn check_params(&self, params: &ActorParams) -> Result<()> {
        if params.layout != self.layout {
            return Err(Error::DimensionMismatch("parameters were built for a different hierarchy".into()));
        }
        Ok(())
    }

    fn check_context(&self, level: usize, s: usize, prefix: &[usize], expected_len: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::InvalidIndex(format!("state {s} of {}", self.n_states)));
        }
        if prefix.len() != expected_len {
            return Err(Error::InvalidHierarchy(format!(
                "level {level} needs a prefix of length {expected_len}, got {}",
                prefix.len()
            )));
        }
        for (l, (o, k)) in prefix.iter().zip(self.spec.options_per_level()).enumerate() {
            if o >= k {
                return Err(Error::InvalidHierarchy(format!(
                    "option {o} at level {} exceeds count {k}",
                    l + 1
                )));
            }
        }
        Ok(())
    }

    /// `π^ℓ(· | s, o^{0:ℓ-1})` over the level's choices.
    pub fn policy_prob(&self, params: &ActorParams, level: usize, s: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if level == 0 || level > self.depth() {
            return Err(Error::InvalidHierarchy(format!(
                "policy level {level} outside 1..={}",
                self.depth()
            )));
        }
        self.check_context(level, s, prefix, level - 1)?;
        let mut out = vec![0.0; self.spec.choices(level)];
        self.policy_into(params, level, s, prefix, &mut out);
        Ok(out)
    }

    /// Unchecked softmax into `out`.
    pub(crate) fn policy_into(&self, params: &ActorParams, level: usize, s: usize, prefix: &[usize], out: &mut [f64]) {
        let block = self.layout.policy_block(level);
        let f = self.features(s, prefix);
        let w = &params.weights;
        for (c, o) in out.iter_mut().enumerate() {
            let start = block.offset + c * block.cols;
            *o = f.dot(&w[start..start + block.cols]);
        }
        softmax_in_place(out);
    }

    /// `β^ℓ(s, o^{0:ℓ})`: exactly 0 at level 0, exactly 1 at level `N`.
    pub fn termination_prob(&self, params: &ActorParams, level: usize, s: usize, prefix: &[usize]) -> f64 {
        if level == 0 {
            return 0.0;
        }
        if level >= self.depth() {
            return 1.0;
        }
        let block = self.layout.termination_block(level);
        let f = self.features(s, &prefix[..level]);
        sigmoid(f.dot(&params.weights[block.range()]))
    }

    /// Samples which levels terminate on arrival at `next_state` and
    /// re-selects the terminated ones.
    ///
    /// Termination cascades from level `N-1` upward and stops at the first
    /// level `i` that survives. Levels `≤ i` keep their options, levels `> i`
    /// are re-drawn top-down. Returns `(i, new stack)`.
    pub fn sample_arrival<R: Rng + ?Sized>(
        &self,
        params: &ActorParams,
        next_state: usize,
        stack: &OptionStack,
        rng: &mut R,
    ) -> (usize, OptionStack) {
        let n = self.depth();
        let mut level = n - 1;
        while level > 0 {
            let b = self.termination_prob(params, level, next_state, stack.prefix(level));
            if rng.random::<f64>() < b {
                level -= 1;
            } else {
                break;
            }
        }
        let mut out = stack.clone();
        self.reselect_below(params, next_state, &mut out, level, rng);
        (level, out)
    }

    /// Draws fresh options for every level strictly below `keep` (i.e.
    /// levels `keep+1..N`), top-down.
    pub fn reselect_below<R: Rng + ?Sized>(
        &self,
        params: &ActorParams,
        s: usize,
        stack: &mut OptionStack,
        keep: usize,
        rng: &mut R,
    ) {
        let mut probs = Vec::new();
        for level in keep + 1..self.depth() {
            probs.resize(self.spec.choices(level), 0.0);
            self.policy_into(params, level, s, stack.prefix(level - 1), &mut probs);
            stack.ids[level] = sample_index(&probs, rng);
        }
    }

    /// Stack drawn from scratch at `s`, as if every option had terminated.
    pub fn initial_stack<R: Rng + ?Sized>(&self, params: &ActorParams, s: usize, rng: &mut R) -> OptionStack {
        let mut stack = OptionStack::root(self.depth());
        self.reselect_below(params, s, &mut stack, 0, rng);
        stack
    }

    /// Samples a primitive action from `π^N(· | s, stack)`.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        params: &ActorParams,
        s: usize,
        stack: &OptionStack,
        rng: &mut R,
    ) -> usize {
        let mut probs = vec![0.0; self.spec.n_actions()];
        self.policy_into(params, self.depth(), s, stack.prefix(self.depth() - 1), &mut probs);
        sample_index(&probs, rng)
    }

    /// Exact distribution `P_{π,β}(o'^{0:ℓ-1} | s', o^{0:ℓ-1})` over new
    /// prefixes of length `ℓ-1`, given that level `ℓ` has terminated.
    ///
    /// With `ℓ = N` the condition is vacuous (`β^N ≡ 1`) and the result is the
    /// full arrival distribution over option stacks. Entries are indexed by
    /// [`HierarchySpec::prefix_index`].
    pub fn next_option_distribution(
        &self,
        params: &ActorParams,
        next_state: usize,
        level: usize,
        prefix: &[usize],
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if level == 0 || level > self.depth() {
            return Err(Error::InvalidHierarchy(format!(
                "arrival level {level} outside 1..={}",
                self.depth()
            )));
        }
        self.check_context(level, next_state, prefix, level - 1)?;
        let mut out = vec![0.0; self.spec.prefix_count(level - 1)];
        self.next_option_into(params, next_state, level, prefix, &mut out);
        Ok(out)
    }

    pub(crate) fn next_option_into(
        &self,
        params: &ActorParams,
        next_state: usize,
        level: usize,
        prefix: &[usize],
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let target = level - 1;
        // Probability that the cascade, having passed level ℓ, stops at i.
        let mut survive_above = 1.0;
        for i in (0..level).rev() {
            let b = self.termination_prob(params, i, next_state, &prefix[..i]);
            let stop_here = survive_above * (1.0 - b);
            if stop_here > 0.0 {
                let mut buf = prefix[..i].to_vec();
                self.spread_completions(params, next_state, &mut buf, target, stop_here, out);
            }
            survive_above *= b;
            if survive_above == 0.0 {
                break;
            }
        }
    }

    /// Adds `weight · ∏ π` for every completion of `prefix` up to `target`.
    fn spread_completions(
        &self,
        params: &ActorParams,
        s: usize,
        prefix: &mut Vec<usize>,
        target: usize,
        weight: f64,
        out: &mut [f64],
    ) {
        if prefix.len() == target {
            out[self.spec.prefix_index(prefix)] += weight;
            return;
        }
        let level = prefix.len() + 1;
        let mut probs = vec![0.0; self.spec.choices(level)];
        self.policy_into(params, level, s, prefix, &mut probs);
        for (c, p) in probs.into_iter().enumerate() {
            prefix.push(c);
            self.spread_completions(params, s, prefix, target, weight * p, out);
            prefix.pop();
        }
    }

    /// Adds `scale · ∇ log π^ℓ(choice | s, prefix)` to `sink`.
    pub fn add_policy_log_grad<S: GradSink + ?Sized>(
        &self,
        params: &ActorParams,
        level: usize,
        s: usize,
        prefix: &[usize],
        choice: usize,
        scale: f64,
        sink: &mut S,
    ) {
        let block = self.layout.policy_block(level);
        let mut probs = vec![0.0; block.rows];
        self.policy_into(params, level, s, prefix, &mut probs);
        let f = self.features(s, prefix);
        for (c, p) in probs.iter().enumerate() {
            let coef = if c == choice { 1.0 - p } else { -p };
            f.scatter(block.offset + c * block.cols, scale * coef, sink);
        }
    }

    /// Adds `scale · Σ_c ∇π^ℓ(c | s, prefix) · values[c]` to `sink`.
    pub fn add_policy_expectation_grad<S: GradSink + ?Sized>(
        &self,
        params: &ActorParams,
        level: usize,
        s: usize,
        prefix: &[usize],
        values: &[f64],
        scale: f64,
        sink: &mut S,
    ) {
        let block = self.layout.policy_block(level);
        let mut probs = vec![0.0; block.rows];
        self.policy_into(params, level, s, prefix, &mut probs);
        let mean: f64 = probs.iter().zip(values).map(|(p, v)| p * v).sum();
        let f = self.features(s, prefix);
        for (c, p) in probs.iter().enumerate() {
            f.scatter(block.offset + c * block.cols, scale * p * (values[c] - mean), sink);
        }
    }

    /// Adds `scale · ∇ log β^ℓ(s, prefix)` to `sink`; `prefix` has length ℓ.
    pub fn add_termination_log_grad<S: GradSink + ?Sized>(
        &self,
        params: &ActorParams,
        level: usize,
        s: usize,
        prefix: &[usize],
        scale: f64,
        sink: &mut S,
    ) {
        let b = self.termination_prob(params, level, s, prefix);
        let block = self.layout.termination_block(level);
        self.features(s, &prefix[..level]).scatter(block.offset, scale * (1.0 - b), sink);
    }

    /// Adds `scale · ∇β^ℓ(s, prefix)` to `sink`.
    pub fn add_termination_grad<S: GradSink + ?Sized>(
        &self,
        params: &ActorParams,
        level: usize,
        s: usize,
        prefix: &[usize],
        scale: f64,
        sink: &mut S,
    ) {
        let b = self.termination_prob(params, level, s, prefix);
        let block = self.layout.termination_block(level);
        self.features(s, &prefix[..level]).scatter(block.offset, scale * b * (1.0 - b), sink);
    }

    /// ψ features for the augmented transition `(s, stack, a) → s'`.
    ///
    /// Action and option log-gradients are taken at `s` with the active
    /// stack, termination log-gradients at `s'` with the same stack (the
    /// options whose termination is decided on arrival).
    pub fn log_grad(
        &self,
        params: &ActorParams,
        s: usize,
        stack: &OptionStack,
        action: usize,
        next_state: usize,
    ) -> Result<LogGradFeatures> {
        self.check_params(params)?;
        let n = self.depth();
        if action >= self.spec.n_actions() {
            return Err(Error::InvalidIndex(format!("action {action}")));
        }
        if next_state >= self.n_states {
            return Err(Error::InvalidIndex(format!("state {next_state}")));
        }
        self.check_context(n, s, stack.prefix(n - 1), n - 1)?;
        let dim = self.layout.total;
        let mut psi_action = vec![0.0; dim];
        self.add_policy_log_grad(params, n, s, stack.prefix(n - 1), action, 1.0, &mut psi_action);
        let mut psi_option = Vec::with_capacity(n - 1);
        let mut psi_beta = Vec::with_capacity(n - 1);
        for level in 1..n {
            let mut g = vec![0.0; dim];
            self.add_policy_log_grad(params, level, s, stack.prefix(level - 1), stack.level(level), 1.0, &mut g);
            psi_option.push(g);
            let mut g = vec![0.0; dim];
            self.add_termination_log_grad(params, level, next_state, stack.prefix(level), 1.0, &mut g);
            psi_beta.push(g);
        }
        Ok(LogGradFeatures {
            psi_action,
            psi_option,
            psi_beta,
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in scores.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in scores.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(h: &Hierarchy, rng: &mut ChaCha8Rng, scale: f64) -> ActorParams {
        let mut p = h.init_params(DEFAULT_BOUND);
        let w: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-scale..scale)).collect();
        p.set_weights(&w).unwrap();
        p
    }

    #[test]
    fn spec_validation() {
        assert!(HierarchySpec::new(0, vec![], 2).is_err());
        assert!(HierarchySpec::new(2, vec![], 2).is_err());
        assert!(HierarchySpec::new(2, vec![0], 2).is_err());
        let spec = HierarchySpec::new(3, vec![2, 3], 4).unwrap();
        assert_eq!(spec.stack_count(), 6);
        assert_eq!(spec.choices(3), 4);
        for idx in 0..6 {
            let p = spec.prefix_from_index(2, idx);
            assert_eq!(spec.prefix_index(&p), idx);
        }
    }

    #[test]
    fn zero_weights_give_uniform_policies() {
        let h = Hierarchy::tabular(HierarchySpec::new(2, vec![3], 2).unwrap(), 4).unwrap();
        let p = h.init_params(DEFAULT_BOUND);
        let probs = h.policy_prob(&p, 1, 2, &[]).unwrap();
        assert!(probs.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(h.termination_prob(&p, 1, 0, &[1]), 0.5);
    }

    #[test]
    fn saturated_weights_stay_strictly_positive() {
        let h = Hierarchy::tabular(HierarchySpec::flat(2).unwrap(), 1).unwrap();
        let mut p = h.init_params(50.0);
        p.set_weights(&[50.0, -50.0]).unwrap();
        let probs = h.policy_prob(&p, 1, 0, &[]).unwrap();
        assert!(probs[0] > 0.999 && probs[1] > 0.0);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let h = Hierarchy::tabular(HierarchySpec::new(2, vec![3], 3).unwrap(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&h, &mut rng, 3.0);
        let block = h.layout().policy_block(2);
        let context = 3; // s = 1, o¹ = 0 → 1 * 3 + 0
        let scores: Vec<f64> = (0..3).map(|c| p.get(block.offset + c * block.cols + context)).collect();
        let z: f64 = scores.iter().map(|x| x.exp()).sum();
        let probs = h.policy_prob(&p, 2, 1, &[0]).unwrap();
        for c in 0..3 {
            assert!((probs[c] - scores[c].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn termination_conventions() {
        let h = Hierarchy::tabular(HierarchySpec::new(3, vec![2, 2], 2).unwrap(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&h, &mut rng, 40.0);
        for s in 0..3 {
            assert_eq!(h.termination_prob(&p, 0, s, &[]), 0.0);
            assert_eq!(h.termination_prob(&p, 3, s, &[1, 1]), 1.0);
        }
    }

    #[test]
    fn invalid_policy_queries_rejected() {
        let h = Hierarchy::tabular(HierarchySpec::new(2, vec![2], 2).unwrap(), 3).unwrap();
        let p = h.init_params(DEFAULT_BOUND);
        assert!(h.policy_prob(&p, 0, 0, &[]).is_err());
        assert!(h.policy_prob(&p, 3, 0, &[0, 0]).is_err());
        assert!(h.policy_prob(&p, 2, 0, &[]).is_err());
        assert!(h.policy_prob(&p, 2, 0, &[2]).is_err());
        assert!(h.policy_prob(&p, 1, 3, &[]).is_err());
    }

    fn with_all_terminations(h: &Hierarchy, value: f64) -> ActorParams {
        let mut p = h.init_params(DEFAULT_BOUND);
        for b in &h.layout().termination {
            for i in b.range() {
                p.set(i, value);
            }
        }
        p
    }

    #[test]
    fn arrival_without_termination_keeps_stack() {
        let h = Hierarchy::tabular(HierarchySpec::new(3, vec![2, 3], 2).unwrap(), 2).unwrap();
        let p = with_all_terminations(&h, -50.0);
        let stack = OptionStack::from_prefix(h.spec(), &[1, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (i, next) = h.sample_arrival(&p, 1, &stack, &mut rng);
            assert_eq!(i, 2);
            assert_eq!(next, stack);
        }
        let dist = h.next_option_distribution(&p, 1, 3, stack.prefix(2)).unwrap();
        assert!((dist[stack.index(h.spec())] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn arrival_with_certain_termination_reselects_everything() {
        let h = Hierarchy::tabular(HierarchySpec::new(3, vec![2, 3], 2).unwrap(), 2).unwrap();
        let p = with_all_terminations(&h, 50.0);
        let stack = OptionStack::from_prefix(h.spec(), &[1, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(h.sample_arrival(&p, 0, &stack, &mut rng).0, 0);
        }
    }

    #[test]
    fn two_level_retention_frequency() {
        let h = Hierarchy::tabular(HierarchySpec::new(2, vec![2], 2).unwrap(), 1).unwrap();
        let p = h.init_params(DEFAULT_BOUND);
        let stack = OptionStack::from_prefix(h.spec(), &[1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 1_000_000;
        let kept = (0..n)
            .filter(|_| h.sample_arrival(&p, 0, &stack, &mut rng).0 == 1)
            .count();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((kept as f64 / n as f64 - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn level_one_distribution_is_root_point_mass() {
        let h = Hierarchy::tabular(HierarchySpec::new(2, vec![3], 2).unwrap(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&h, &mut rng, 1.0);
        assert_eq!(h.next_option_distribution(&p, 1, 1, &[]).unwrap(), vec![1.0]);
    }

    #[test]
    fn next_option_distribution_matches_sampling() {
        let spec = HierarchySpec::new(3, vec![2, 3], 2).unwrap();
        let h = Hierarchy::tabular(spec.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(&h, &mut rng, 1.5);
        let stack = OptionStack::from_prefix(&spec, &[1, 0]).unwrap();
        let s_next = 2;
        let n = 1_000_000;
        let mut full = vec![0usize; spec.stack_count()];
        let mut cond = vec![0usize; spec.prefix_count(1)];
        let mut cond_total = 0usize;
        for _ in 0..n {
            let (i, next) = h.sample_arrival(&p, s_next, &stack, &mut rng);
            full[next.index(&spec)] += 1;
            if i < 2 {
                cond[spec.prefix_index(next.prefix(1))] += 1;
                cond_total += 1;
            }
        }
        let exact = h.next_option_distribution(&p, s_next, 3, stack.prefix(2)).unwrap();
        assert!((exact.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for (k, q) in exact.iter().enumerate() {
            let freq = full[k] as f64 / n as f64;
            let sigma = (q * (1.0 - q) / n as f64).sqrt().max(1e-9);
            assert!((freq - q).abs() < 3.5 * sigma, "stack {k}: {freq} vs {q}");
        }
        let exact = h.next_option_distribution(&p, s_next, 2, stack.prefix(1)).unwrap();
        for (k, q) in exact.iter().enumerate() {
            let freq = cond[k] as f64 / cond_total as f64;
            let sigma = (q * (1.0 - q) / cond_total as f64).sqrt().max(1e-9);
            assert!((freq - q).abs() < 3.5 * sigma, "prefix {k}: {freq} vs {q}");
        }
    }

    #[test]
    fn log_grad_simple_values() {
        let h = Hierarchy::tabular(HierarchySpec::flat(2).unwrap(), 1).unwrap();
        let p = h.init_params(DEFAULT_BOUND);
        let g = h.log_grad(&p, 0, &OptionStack::root(1), 0, 0).unwrap();
        assert_eq!(g.psi_action, vec![0.5, -0.5]);
        assert!(g.psi_option.is_empty() && g.psi_beta.is_empty());

        let h = Hierarchy::tabular(HierarchySpec::new(2, vec![2], 2).unwrap(), 1).unwrap();
        let p = h.init_params(DEFAULT_BOUND);
        let g = h.log_grad(&p, 0, &OptionStack::from_prefix(h.spec(), &[0]).unwrap(), 0, 0).unwrap();
        let tb = h.layout().termination_block(1);
        assert_eq!(g.psi_beta[0][tb.offset], 0.5);
    }

    #[test]
    fn linear_features_validated() {
        let spec = HierarchySpec::new(2, vec![2], 2).unwrap();
        let bad = FeatureMap::Linear(vec![FeatureTable { dim: 2, rows: vec![0.0; 3] }]);
        assert!(Hierarchy::with_features(spec.clone(), 2, bad).is_err());
        let ok = FeatureMap::Linear(vec![
            FeatureTable { dim: 2, rows: vec![1.0; 4] },
            FeatureTable { dim: 3, rows: vec![0.5; 12] },
        ]);
        let h = Hierarchy::with_features(spec, 2, ok).unwrap();
        assert_eq!(h.layout().total, 2 * 2 + 2 * 3 + 3);
    }

    #[test]
    fn projection_clamps_only_after_summing() {
        let h = Hierarchy::tabular(HierarchySpec::flat(2).unwrap(), 1).unwrap();
        let mut p = h.init_params(1.0);
        p.set(0, 1.0);
        let g = SparseGrad(vec![(0, 5.0), (0, -5.5), (1, 3.0)]);
        p.apply_projected(&g, 1.0);
        assert_eq!(p.get(0), 0.5);
        assert_eq!(p.get(1), 1.0);
    }

    #[test]
    fn snapshot_round_trip() {
        let h = Hierarchy::tabular(HierarchySpec::new(3, vec![2, 2], 2).unwrap(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&h, &mut rng, 2.0);
        let back = ActorParams::from_snapshot_json(h.layout(), &p.snapshot_json()).unwrap();
        assert_eq!(back, p);
    }
}
