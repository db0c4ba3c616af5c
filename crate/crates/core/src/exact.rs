//! Exact evaluation of a fixed hierarchical policy.
//!
//! The hierarchy turns the MDP into a Markov chain over augmented states
//! `(s, o^{0:N-1})`. Everything here is computed from that chain with dense
//! direct solves: its stationary distribution, the gain `J`, the
//! differential option values `Q_Ω` at every level, `Q_U`, the value upon
//! arrival `U`, and the hierarchical advantage `A_Ω`.
//!
//! Augmented state `x = s * stack_count + stack_index`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::hierarchy::{ActorParams, Hierarchy, OptionStack};
use crate::mdp::TabularMdp;

/// Pivot ratio below which a factorization is treated as rank deficient.
const RANK_TOLERANCE: f64 = 1e-11;
const STATIONARY_RESIDUAL: f64 = 1e-10;
const POWER_TOLERANCE: f64 = 1e-12;
const POWER_MAX_ITERATIONS: usize = 1_000_000;

/// Row-stochastic kernel over augmented states.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedKernel {
    pub n_states: usize,
    pub n_stacks: usize,
    pub matrix: DMatrix<f64>,
}

impl AugmentedKernel {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn augmented_index(&self, s: usize, stack: usize) -> usize {
        s * self.n_stacks + stack
    }

    /// Largest deviation of a row sum from 1.
    pub fn row_sum_error(&self) -> f64 {
        self.matrix
            .row_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// A stationary policy over primitive actions, `probs[s * A + a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl FlatPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        FlatPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        FlatPolicy {
            n_states: actions.len(),
            n_actions,
            probs,
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// State-to-state kernel `Σ_a π(a|s) P(s'|s,a)` of a flat policy.
pub fn flat_kernel(mdp: &TabularMdp, policy: &FlatPolicy) -> Result<AugmentedKernel> {
    policy.check(mdp)?;
    let n = mdp.n_states();
    let mut m = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for (next, p) in mdp.row(s, a).iter().enumerate() {
                m[(s, next)] += pa * p;
            }
        }
    }
    Ok(AugmentedKernel {
        n_states: n,
        n_stacks: 1,
        matrix: m,
    })
}

fn check_compatible(mdp: &TabularMdp, hierarchy: &Hierarchy, params: &ActorParams) -> Result<()> {
    if mdp.n_states() != hierarchy.n_states() || mdp.n_actions() != hierarchy.spec().n_actions() {
        return Err(Error::DimensionMismatch(format!(
            "MDP has {} states / {} actions, hierarchy expects {} / {}",
            mdp.n_states(),
            mdp.n_actions(),
            hierarchy.n_states(),
            hierarchy.spec().n_actions()
        )));
    }
    if &params.layout != hierarchy.layout() {
        return Err(Error::DimensionMismatch("parameters were built for a different hierarchy".into()));
    }
    Ok(())
}

/// Per augmented state: `π^N(·|s,o)` and the induced next-state distribution.
struct ActionTables {
    /// `[x * A + a]`
    action_probs: Vec<f64>,
    /// `[x * S + s']`
    next_state: Vec<f64>,
}

fn action_tables(mdp: &TabularMdp, hierarchy: &Hierarchy, params: &ActorParams) -> ActionTables {
    let spec = hierarchy.spec();
    let (ns, na, nk) = (mdp.n_states(), mdp.n_actions(), spec.stack_count());
    let n = hierarchy.depth();
    let mut action_probs = vec![0.0; ns * nk * na];
    let mut next_state = vec![0.0; ns * nk * ns];
    for s in 0..ns {
        for k in 0..nk {
            let x = s * nk + k;
            let stack = OptionStack::from_index(spec, k);
            let pi = &mut action_probs[x * na..(x + 1) * na];
            hierarchy.policy_into(params, n, s, stack.prefix(n - 1), pi);
            let row = &mut next_state[x * ns..(x + 1) * ns];
            for (a, pa) in pi.iter().enumerate() {
                for (next, p) in mdp.row(s, a).iter().enumerate() {
                    row[next] += pa * p;
                }
            }
        }
    }
    ActionTables {
        action_probs,
        next_state,
    }
}

/// `[(s' * K + k) * K + k']`: probability of arriving with stack `k'` at `s'`
/// when stack `k` was active.
fn arrival_table(hierarchy: &Hierarchy, params: &ActorParams) -> Vec<f64> {
    let spec = hierarchy.spec();
    let (ns, nk, n) = (hierarchy.n_states(), spec.stack_count(), hierarchy.depth());
    let mut out = vec![0.0; ns * nk * nk];
    for s in 0..ns {
        for k in 0..nk {
            let stack = OptionStack::from_index(spec, k);
            let start = (s * nk + k) * nk;
            hierarchy.next_option_into(params, s, n, stack.prefix(n - 1), &mut out[start..start + nk]);
        }
    }
    out
}

/// The one-step kernel `P^(1)` of the augmented chain: act with `π^N`, step
/// the environment, run the termination cascade and re-select.
pub fn one_step_kernel(mdp: &TabularMdp, hierarchy: &Hierarchy, params: &ActorParams) -> Result<AugmentedKernel> {
    check_compatible(mdp, hierarchy, params)?;
    let tables = action_tables(mdp, hierarchy, params);
    let arrival = arrival_table(hierarchy, params);
    Ok(kernel_from_tables(mdp.n_states(), hierarchy.spec().stack_count(), &tables, &arrival))
}

fn kernel_from_tables(ns: usize, nk: usize, tables: &ActionTables, arrival: &[f64]) -> AugmentedKernel {
    let dim = ns * nk;
    let mut m = DMatrix::zeros(dim, dim);
    for x in 0..dim {
        let k = x % nk;
        for next in 0..ns {
            let p = tables.next_state[x * ns + next];
            if p == 0.0 {
                continue;
            }
            let arr = &arrival[(next * nk + k) * nk..(next * nk + k + 1) * nk];
            for (k2, q) in arr.iter().enumerate() {
                m[(x, next * nk + k2)] += p * q;
            }
        }
    }
    AugmentedKernel {
        n_states: ns,
        n_stacks: nk,
        matrix: m,
    }
}

/// `P^(k)` via `P^(k) = P^(1) · P^(k-1)`.
pub fn k_step_kernel(kernel: &AugmentedKernel, k: usize) -> Result<AugmentedKernel> {
    if k == 0 {
        return Err(Error::Config("k-step kernel needs k >= 1".into()));
    }
    let mut acc = kernel.matrix.clone();
    for _ in 1..k {
        acc = &kernel.matrix * acc;
    }
    Ok(AugmentedKernel {
        matrix: acc,
        ..kernel.clone()
    })
}

/// Stationary distribution `d_π` of an augmented chain.
#[derive(Clone, Debug, PartialEq)]
pub struct StationaryDistribution {
    pub d: Vec<f64>,
}

impl StationaryDistribution {
    /// `‖dP − d‖∞`.
    pub fn residual(&self, kernel: &AugmentedKernel) -> f64 {
        let d = DVector::from_column_slice(&self.d);
        let dp = kernel.matrix.tr_mul(&d);
        (dp - d).amax()
    }
}

/// Solves `A x = b`, refusing when `A` is numerically rank deficient.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn solve_full_rank(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let scale = a.amax().max(1.0);
    let lu = a.full_piv_lu();
    let u = lu.u();
    let min_pivot = (0..u.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > RANK_TOLERANCE * scale) {
        return Err(Error::Singular(format!("{what}: smallest pivot {min_pivot:.3e}")));
    }
    lu.solve(b)
        .ok_or_else(|| Error::Singular(format!("{what}: factorization failed")))
}

/// Unique `d` with `dP = d`, `Σd = 1`.
///
/// Uniqueness is checked through the rank of `(I − P)ᵀ` with one equation
/// replaced by the normalization; a chain with more than one recurrent class
/// makes that system singular and is rejected.
pub fn stationary_distribution(kernel: &AugmentedKernel) -> Result<StationaryDistribution> {
    let n = kernel.dim();
    let mut a = DMatrix::identity(n, n) - kernel.matrix.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let d = solve_full_rank(a, &b, "stationary equations").map_err(|e| match e {
        Error::Singular(msg) => Error::NotUnichain(format!("stationary distribution is not unique ({msg})")),
        other => other,
    })?;
    if d.iter().any(|x| *x < -1e-9) {
        return Err(Error::NotUnichain("stationary solve produced negative mass".into()));
    }
    let mut dist = StationaryDistribution {
        d: d.iter().map(|x| x.max(0.0)).collect(),
    };
    let total: f64 = dist.d.iter().sum();
    dist.d.iter_mut().for_each(|x| *x /= total);
    if dist.residual(kernel) > STATIONARY_RESIDUAL {
        dist = power_iteration(kernel, POWER_TOLERANCE, POWER_MAX_ITERATIONS)?;
    }
    Ok(dist)
}

/// Power iteration on the lazy chain `(I + P)/2`, which shares `P`'s
/// stationary distribution and is aperiodic.
pub fn power_iteration(kernel: &AugmentedKernel, tolerance: f64, max_iterations: usize) -> Result<StationaryDistribution> {
    let n = kernel.dim();
    let pt = kernel.matrix.transpose();
    let mut d = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..max_iterations {
        let next = (&pt * &d + &d) * 0.5;
        let delta = (&next - &d).amax();
        d = next;
        if delta < tolerance {
            let dist = StationaryDistribution { d: d.iter().copied().collect() };
            if dist.residual(kernel) < tolerance * 10.0 {
                return Ok(dist);
            }
        }
    }
    Err(Error::NotUnichain(format!(
        "power iteration did not reach residual {tolerance:e} in {max_iterations} iterations"
    )))
}

/// Differential value tables of a fixed hierarchical policy.
///
/// Values are anchored by `Σ_x d_π(x) Q_Ω(x) = 0` on full stacks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValueTables {
    /// Gain: expected reward per step.
    pub j: f64,
    /// `q_omega[ℓ][s * prefix_count(ℓ) + prefix_index]` for `ℓ ∈ 0..N`.
    pub q_omega: Vec<Vec<f64>>,
    /// `q_u[x * A + a]`.
    pub q_u: Vec<f64>,
    /// Value upon arrival `U(s', o^{0:N-1})`, indexed by augmented state.
    pub u: Vec<f64>,
}

/// `advantage[ℓ][s * prefix_count(ℓ) + prefix_index]` for `ℓ ∈ 0..N`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Advantage {
    pub a_omega: Vec<Vec<f64>>,
}

/// Everything exact evaluation produces for one parameter setting.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub kernel: AugmentedKernel,
    pub stationary: StationaryDistribution,
    /// `[x * S + s']`: `Σ_a π^N(a|x) P(s'|s,a)`, so `μ_Ω(s,o,s') = d(x)·this`.
    pub next_state: Vec<f64>,
    /// `[x * A + a]`
    pub action_probs: Vec<f64>,
    pub values: ValueTables,
    pub advantage: Advantage,
}

impl Evaluation {
    /// `μ_Ω(s, o^{0:N-1}, s')`.
    pub fn mu(&self, x: usize, next: usize) -> f64 {
        self.stationary.d[x] * self.next_state[x * self.kernel.n_states + next]
    }
}

/// Value of arriving at `s'` with `stack` still active, given per-level
/// option values `q(level, prefix)`:
/// `Σ_i (1 − β^i) Q_Ω(s', o^{0:i}) ∏_{k=i+1}^{N-1} β^k`.
///
/// The `i = N-1` summand is the "lower level options terminate" part (only
/// the action re-selects); the rest are the "higher level options
/// terminate" part.
pub fn arrival_value<F>(hierarchy: &Hierarchy, params: &ActorParams, next_state: usize, stack: &OptionStack, mut q: F) -> f64
where
    F: FnMut(usize, &[usize]) -> f64,
{
    let n = hierarchy.depth();
    let mut tail = 1.0;
    let mut total = 0.0;
    for i in (0..n).rev() {
        let b = hierarchy.termination_prob(params, i, next_state, stack.prefix(i));
        let w = (1.0 - b) * tail;
        if w != 0.0 {
            total += w * q(i, stack.prefix(i));
        }
        tail *= b;
        if tail == 0.0 {
            break;
        }
    }
    total
}

/// `A_Ω(s, o^{0:ℓ}) = Q_Ω(s, o^{0:ℓ}) − Σ_{i<ℓ} (1 − β^i) Q_Ω(s, o^{0:i}) ∏_{k=i+1}^{ℓ-1} β^k`.
pub fn advantage_value<F>(hierarchy: &Hierarchy, params: &ActorParams, s: usize, prefix: &[usize], mut q: F) -> f64
where
    F: FnMut(usize, &[usize]) -> f64,
{
    let level = prefix.len();
    let mut tail = 1.0;
    let mut baseline = 0.0;
    for i in (0..level).rev() {
        let b = hierarchy.termination_prob(params, i, s, &prefix[..i]);
        baseline += (1.0 - b) * tail * q(i, &prefix[..i]);
        tail *= b;
        if tail == 0.0 {
            break;
        }
    }
    q(level, prefix) - baseline
}

/// Full exact evaluation: kernel, stationary distribution, gain, values and
/// advantages.
pub fn evaluate(mdp: &TabularMdp, hierarchy: &Hierarchy, params: &ActorParams) -> Result<Evaluation> {
    check_compatible(mdp, hierarchy, params)?;
    let spec = hierarchy.spec();
    let n = hierarchy.depth();
    let (ns, na, nk) = (mdp.n_states(), mdp.n_actions(), spec.stack_count());
    let dim = ns * nk;

    let tables = action_tables(mdp, hierarchy, params);
    let arrival = arrival_table(hierarchy, params);
    let kernel = kernel_from_tables(ns, nk, &tables, &arrival);
    let stationary = stationary_distribution(&kernel)?;

    let mean_reward: Vec<f64> = (0..dim)
        .map(|x| {
            let s = x / nk;
            (0..na).map(|a| tables.action_probs[x * na + a] * mdp.reward(s, a)).sum()
        })
        .collect();
    let j: f64 = stationary.d.iter().zip(&mean_reward).map(|(d, r)| d * r).sum();

    // (I − P + 1 dᵀ) Q = r̄ − J has the anchored differential values as its
    // unique solution whenever the chain is unichain.
    let mut poisson = DMatrix::identity(dim, dim) - &kernel.matrix;
    for row in 0..dim {
        for col in 0..dim {
            poisson[(row, col)] += stationary.d[col];
        }
    }
    let rhs = DVector::from_iterator(dim, mean_reward.iter().map(|r| r - j));
    let q_full = solve_full_rank(poisson, &rhs, "Poisson equation (requires a unichain augmented chain)")?;

    let mut q_omega: Vec<Vec<f64>> = (0..n).map(|l| vec![0.0; ns * spec.prefix_count(l)]).collect();
    q_omega[n - 1] = q_full.iter().copied().collect();
    for level in (0..n - 1).rev() {
        let count = spec.prefix_count(level);
        let k_next = spec.choices(level + 1);
        let mut probs = vec![0.0; k_next];
        for s in 0..ns {
            for p in 0..count {
                let prefix = spec.prefix_from_index(level, p);
                hierarchy.policy_into(params, level + 1, s, &prefix, &mut probs);
                let child = (s * count + p) * k_next;
                q_omega[level][s * count + p] = probs
                    .iter()
                    .enumerate()
                    .map(|(c, pc)| pc * q_omega[level + 1][child + c])
                    .sum();
            }
        }
    }

    let lookup = |q_omega: &Vec<Vec<f64>>, s: usize, level: usize, prefix: &[usize]| {
        q_omega[level][s * spec.prefix_count(level) + spec.prefix_index(prefix)]
    };

    let mut u = vec![0.0; dim];
    for s in 0..ns {
        for k in 0..nk {
            let stack = OptionStack::from_index(spec, k);
            u[s * nk + k] = arrival_value(hierarchy, params, s, &stack, |l, p| lookup(&q_omega, s, l, p));
        }
    }

    let mut q_u = vec![0.0; dim * na];
    for x in 0..dim {
        let (s, k) = (x / nk, x % nk);
        for a in 0..na {
            let future: f64 = mdp
                .row(s, a)
                .iter()
                .enumerate()
                .filter(|(_, p)| **p != 0.0)
                .map(|(next, p)| p * u[next * nk + k])
                .sum();
            q_u[x * na + a] = mdp.reward(s, a) - j + future;
        }
    }

    let mut a_omega: Vec<Vec<f64>> = (0..n).map(|l| vec![0.0; ns * spec.prefix_count(l)]).collect();
    for (level, table) in a_omega.iter_mut().enumerate() {
        let count = spec.prefix_count(level);
        for s in 0..ns {
            for p in 0..count {
                let prefix = spec.prefix_from_index(level, p);
                table[s * count + p] = advantage_value(hierarchy, params, s, &prefix, |l, pr| lookup(&q_omega, s, l, pr));
            }
        }
    }

    Ok(Evaluation {
        kernel,
        stationary,
        next_state: tables.next_state,
        action_probs: tables.action_probs,
        values: ValueTables { j, q_omega, q_u, u },
        advantage: Advantage { a_omega },
    })
}

/// Value tables and advantages of a fixed hierarchical policy.
pub fn solve_values(mdp: &TabularMdp, hierarchy: &Hierarchy, params: &ActorParams) -> Result<(ValueTables, Advantage)> {
    let e = evaluate(mdp, hierarchy, params)?;
    Ok((e.values, e.advantage))
}

/// Gain `J(θ)` only: kernel, stationary distribution, mean reward.
pub fn average_reward(mdp: &TabularMdp, hierarchy: &Hierarchy, params: &ActorParams) -> Result<f64> {
    check_compatible(mdp, hierarchy, params)?;
    let tables = action_tables(mdp, hierarchy, params);
    let arrival = arrival_table(hierarchy, params);
    let (ns, na, nk) = (mdp.n_states(), mdp.n_actions(), hierarchy.spec().stack_count());
    let kernel = kernel_from_tables(ns, nk, &tables, &arrival);
    let d = stationary_distribution(&kernel)?;
    Ok(d
        .d
        .iter()
        .enumerate()
        .map(|(x, dx)| {
            let s = x / nk;
            dx * (0..na).map(|a| tables.action_probs[x * na + a] * mdp.reward(s, a)).sum::<f64>()
        })
        .sum())
}

/// Gain of a flat policy.
pub fn flat_average_reward(mdp: &TabularMdp, policy: &FlatPolicy) -> Result<f64> {
    let kernel = flat_kernel(mdp, policy)?;
    let d = stationary_distribution(&kernel)?;
    Ok((0..mdp.n_states())
        .map(|s| d.d[s] * (0..mdp.n_actions()).map(|a| policy.prob(s, a) * mdp.reward(s, a)).sum::<f64>())
        .sum())
}

fn check_discount(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidDiscount(gamma));
    }
    Ok(())
}

/// Discounted state values of a flat policy: solves `v = r_π + γ P_π v`.
pub fn discounted_values(mdp: &TabularMdp, policy: &FlatPolicy, gamma: f64) -> Result<Vec<f64>> {
    check_discount(gamma)?;
    let kernel = flat_kernel(mdp, policy)?;
    let n = mdp.n_states();
    let a = DMatrix::identity(n, n) - kernel.matrix * gamma;
    let r = DVector::from_iterator(
        n,
        (0..n).map(|s| (0..mdp.n_actions()).map(|a| policy.prob(s, a) * mdp.reward(s, a)).sum::<f64>()),
    );
    let v = a
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::Singular("discounted evaluation".into()))?;
    Ok(v.iter().copied().collect())
}

/// `Q(s, a) = r(s, a) + γ Σ P(s'|s,a) v(s')`.
pub fn discounted_q(mdp: &TabularMdp, values: &[f64], gamma: f64, s: usize, a: usize) -> f64 {
    mdp.reward(s, a)
        + gamma
            * mdp
                .row(s, a)
                .iter()
                .zip(values)
                .map(|(p, v)| p * v)
                .sum::<f64>()
}

/// Optimal discounted values and a greedy deterministic policy, by policy
/// iteration. Ties keep the incumbent action.
pub fn discounted_optimal(mdp: &TabularMdp, gamma: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    check_discount(gamma)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut actions = vec![0usize; ns];
    for _ in 0..10_000 {
        let v = discounted_values(mdp, &FlatPolicy::deterministic(&actions, na), gamma)?;
        let mut changed = false;
        for s in 0..ns {
            let current = discounted_q(mdp, &v, gamma, s, actions[s]);
            let (best, best_q) = (0..na)
                .map(|a| (a, discounted_q(mdp, &v, gamma, s, a)))
                .fold((actions[s], current), |acc, (a, q)| if q > acc.1 + 1e-12 { (a, q) } else { acc });
            if best != actions[s] {
                actions[s] = best;
                changed = true;
            }
            let _ = best_q;
        }
        if !changed {
            return Ok((v, actions));
        }
    }
    Err(Error::Singular("policy iteration did not stabilise".into()))
}

/// JSON export of value tables keyed by state label and option prefix.
pub fn values_json(mdp: &TabularMdp, hierarchy: &Hierarchy, values: &ValueTables, advantage: &Advantage) -> serde_json::Value {
    let spec = hierarchy.spec();
    let n = hierarchy.depth();
    let nk = spec.stack_count();
    let per_level = |tables: &Vec<Vec<f64>>| {
        let mut rows = Vec::new();
        for (level, table) in tables.iter().enumerate() {
            let count = spec.prefix_count(level);
            for (i, v) in table.iter().enumerate() {
                let (s, p) = (i / count, i % count);
                rows.push(json!({
                    "level": level,
                    "state": mdp.label(s),
                    "prefix": spec.prefix_from_index(level, p),
                    "value": v,
                }));
            }
        }
        rows
    };
    let q_u: Vec<_> = values
        .q_u
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (x, a) = (i / mdp.n_actions(), i % mdp.n_actions());
            json!({
                "state": mdp.label(x / nk),
                "prefix": spec.prefix_from_index(n - 1, x % nk),
                "action": a,
                "value": v,
            })
        })
        .collect();
    let u: Vec<_> = values
        .u
        .iter()
        .enumerate()
        .map(|(x, v)| json!({ "state": mdp.label(x / nk), "prefix": spec.prefix_from_index(n - 1, x % nk), "value": v }))
        .collect();
    json!({
        "j": values.j,
        "q_omega": per_level(&values.q_omega),
        "q_u": q_u,
        "u": u,
        "advantage": per_level(&advantage.a_omega),
    })
}
