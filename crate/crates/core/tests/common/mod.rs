//! Independent oracles and invariant checks shared by the integration suites.
//!
//! Everything here is computed from the raw MDP tables and the public
//! probability accessors, without going through the crate's kernel builder,
//! stationary solver or gradient code.

#![allow(dead_code, clippy::needless_range_loop)]

use avgopt::exact::{one_step_kernel, stationary_distribution, AugmentedKernel};
use avgopt::gradient::{random_instance, exact_gradient};
use avgopt::hierarchy::{ActorParams, Hierarchy, HierarchySpec, OptionStack};
use avgopt::mdp::TabularMdp;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

/// Gaussian elimination with partial pivoting on a dense copy.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        assert!(p.abs() > 1e-14, "singular system");
        for row in col + 1..n {
            let f = a[row][col] / p;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// `d` with `dP = d`, `Σd = 1`, by direct elimination.
pub fn stationary_by_elimination(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = if i == j { 1.0 } else { 0.0 } - p[j][i];
        }
    }
    a[n - 1] = vec![1.0; n];
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;
    dense_solve(a, b)
}

/// Left null vector of `I − P` from the SVD of `(I − P)ᵀ`.
pub fn stationary_by_svd(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let m = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - p[j][i]);
    let svd = m.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let v: Vec<f64> = v_t.row(k).iter().copied().collect();
    let total: f64 = v.iter().sum();
    v.iter().map(|x| x / total).collect()
}

pub fn kernel_rows(k: &AugmentedKernel) -> Vec<Vec<f64>> {
    (0..k.dim()).map(|i| k.matrix.row(i).iter().copied().collect()).collect()
}

pub fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for (k, bk) in b.iter().enumerate() {
            let aik = a[i][k];
            if aik != 0.0 {
                for j in 0..m {
                    out[i][j] += aik * bk[j];
                }
            }
        }
    }
    out
}

/// Softmax of the tabular flat weights, `θ[a·S + s]`.
pub fn flat_probs(mdp: &TabularMdp, weights: &[f64]) -> Vec<Vec<f64>> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    (0..ns)
        .map(|s| {
            let m = (0..na).map(|a| weights[a * ns + s]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..na).map(|a| (weights[a * ns + s] - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

pub struct FlatSolution {
    pub d: Vec<f64>,
    pub j: f64,
    /// Bias with `Σ d h = 0`.
    pub h: Vec<f64>,
    pub q: Vec<Vec<f64>>,
}

/// Gain, bias and action values of a flat stochastic policy from
/// `(I − P + 1dᵀ) h = r̄ − J`.
pub fn flat_solution(mdp: &TabularMdp, probs: &[Vec<f64>]) -> FlatSolution {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let p: Vec<Vec<f64>> = (0..ns)
        .map(|s| {
            (0..ns)
                .map(|t| (0..na).map(|a| probs[s][a] * mdp.prob(s, a, t)).sum())
                .collect()
        })
        .collect();
    let rbar: Vec<f64> = (0..ns)
        .map(|s| (0..na).map(|a| probs[s][a] * mdp.reward(s, a)).sum())
        .collect();
    let d = stationary_by_elimination(&p);
    let j: f64 = d.iter().zip(&rbar).map(|(a, b)| a * b).sum();
    let mut a = vec![vec![0.0; ns]; ns];
    for i in 0..ns {
        for k in 0..ns {
            a[i][k] = if i == k { 1.0 } else { 0.0 } - p[i][k] + d[k];
        }
    }
    let h = dense_solve(a, rbar.iter().map(|r| r - j).collect());
    let q = (0..ns)
        .map(|s| {
            (0..na)
                .map(|a| mdp.reward(s, a) - j + (0..ns).map(|t| mdp.prob(s, a, t) * h[t]).sum::<f64>())
                .collect()
        })
        .collect();
    FlatSolution { d, j, h, q }
}

/// Flat policy-gradient theorem: `∂J/∂θ[a·S+s] = d(s) π(a|s) (q(s,a) − v(s))`.
pub fn flat_policy_gradient(mdp: &TabularMdp, weights: &[f64]) -> Vec<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let probs = flat_probs(mdp, weights);
    let sol = flat_solution(mdp, &probs);
    let mut g = vec![0.0; ns * na];
    for s in 0..ns {
        let v: f64 = (0..na).map(|a| probs[s][a] * sol.q[s][a]).sum();
        for a in 0..na {
            g[a * ns + s] = sol.d[s] * probs[s][a] * (sol.q[s][a] - v);
        }
    }
    g
}

/// Relative value iteration on the lazy chain `(I + P)/2`; returns the
/// gain of the flat policy (the lazy chain has half the gain).
pub fn rvi_gain(mdp: &TabularMdp, probs: &[Vec<f64>], iterations: usize) -> f64 {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut h = vec![0.0; ns];
    let mut gain = 0.0;
    for _ in 0..iterations {
        let next: Vec<f64> = (0..ns)
            .map(|s| {
                let mut v = 0.0;
                for a in 0..na {
                    let ev: f64 = (0..ns).map(|t| mdp.prob(s, a, t) * h[t]).sum();
                    v += probs[s][a] * (mdp.reward(s, a) + ev);
                }
                0.5 * (v + h[s])
            })
            .collect();
        gain = next[0] - h[0];
        let anchor = next[0];
        h = next.iter().map(|x| x - anchor).collect();
    }
    2.0 * gain
}

/// Probability of arriving in `next` from `stack` at state `s'`, summed over
/// every termination outcome of the cascade, written out level by level.
pub fn arrival_prob(h: &Hierarchy, params: &ActorParams, s_next: usize, stack: &OptionStack, next: &OptionStack) -> f64 {
    let n = h.depth();
    let mut total = 0.0;
    // `i` is the deepest surviving level: levels i+1..N-1 terminate, i does not.
    for i in 0..n {
        let mut w = 1.0;
        for k in i + 1..n {
            w *= h.termination_prob(params, k, s_next, stack.prefix(k));
        }
        w *= 1.0 - h.termination_prob(params, i, s_next, stack.prefix(i));
        if w == 0.0 || stack.prefix(i) != next.prefix(i) {
            continue;
        }
        for l in i + 1..n {
            let probs = h.policy_prob(params, l, s_next, next.prefix(l - 1)).unwrap();
            w *= probs[next.level(l)];
        }
        total += w;
    }
    total
}

/// `P^(1)` assembled entry by entry from the MDP, `π^N` and [`arrival_prob`].
pub fn naive_kernel(mdp: &TabularMdp, h: &Hierarchy, params: &ActorParams) -> Vec<Vec<f64>> {
    let spec = h.spec();
    let (ns, na, nk) = (mdp.n_states(), mdp.n_actions(), spec.stack_count());
    let stacks: Vec<OptionStack> = (0..nk).map(|i| OptionStack::from_index(spec, i)).collect();
    let mut p = vec![vec![0.0; ns * nk]; ns * nk];
    for s in 0..ns {
        for (ki, stack) in stacks.iter().enumerate() {
            let pi = h.policy_prob(params, h.depth(), s, stack.prefix(h.depth() - 1)).unwrap();
            for t in 0..ns {
                let move_prob: f64 = (0..na).map(|a| pi[a] * mdp.prob(s, a, t)).sum();
                if move_prob == 0.0 {
                    continue;
                }
                for (kj, next) in stacks.iter().enumerate() {
                    p[s * nk + ki][t * nk + kj] += move_prob * arrival_prob(h, params, t, stack, next);
                }
            }
        }
    }
    p
}

/// A random unichain instance drawn from `seed`.
pub fn instance(seed: u64, depth: usize, n_states: usize) -> (TabularMdp, Hierarchy, ActorParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_actions = rng.random_range(2..=3);
    let options: Vec<usize> = (1..depth).map(|_| rng.random_range(2..=3)).collect();
    let spec = HierarchySpec::new(depth, options, n_actions).unwrap();
    random_instance(&mut rng, spec, n_states).unwrap()
}

/// A 3-state, 2-action MDP with moderate mixing and rewards in `[0, 1]`.
pub fn three_state_mdp() -> TabularMdp {
    #[rustfmt::skip]
    let transition = vec![
        0.6, 0.3, 0.1,   0.1, 0.2, 0.7,
        0.3, 0.4, 0.3,   0.5, 0.1, 0.4,
        0.2, 0.2, 0.6,   0.4, 0.5, 0.1,
    ];
    let reward = vec![0.2, 0.8, 0.5, 0.1, 0.9, 0.4];
    TabularMdp::new(3, 2, transition, reward).unwrap()
}

fn close(what: &str, a: f64, b: f64, tol: f64) -> Check {
    if (a - b).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs {b} (|diff| {:.3e} > {tol:e})", (a - b).abs()))
    }
}

// --- invariants, each checked on one random instance -----------------------

/// Every kernel row is a probability vector, and the kernel matches the
/// entry-wise construction.
pub fn check_kernel(seed: u64) -> Check {
    let depth = 1 + (seed % 3) as usize;
    let (mdp, h, params) = instance(seed, depth, 2 + (seed % 4) as usize);
    let k = one_step_kernel(&mdp, &h, &params).map_err(|e| e.to_string())?;
    if k.matrix.iter().any(|x| *x < 0.0) {
        return Err("negative kernel entry".into());
    }
    close("row sum", k.row_sum_error(), 0.0, 1e-12)?;
    let naive = naive_kernel(&mdp, &h, &params);
    for (i, row) in naive.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            close(&format!("P[{i},{j}]"), k.matrix[(i, j)], *x, 1e-12)?;
        }
    }
    Ok(())
}

/// Softmax rows sum to one and stay finite for extreme weights.
pub fn check_policy_normalization(seed: u64) -> Check {
    let (_, h, mut params) = instance(seed, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let scale = [1.0, 20.0, 50.0][(seed % 3) as usize];
    let w: Vec<f64> = (0..params.len()).map(|_| rng.random_range(-scale..=scale)).collect();
    params.set_weights(&w).map_err(|e| e.to_string())?;
    let spec = h.spec().clone();
    for level in 1..=h.depth() {
        for s in 0..h.n_states() {
            for pi in 0..spec.prefix_count(level - 1) {
                let prefix = spec.prefix_from_index(level - 1, pi);
                let p = h.policy_prob(&params, level, s, &prefix).map_err(|e| e.to_string())?;
                if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(format!("bad probabilities {p:?}"));
                }
                close("policy sum", p.iter().sum(), 1.0, 1e-12)?;
            }
        }
    }
    Ok(())
}

/// ψ features against central differences of `log π` and `log β`.
pub fn check_log_grad(seed: u64) -> Check {
    let (mdp, h, params) = instance(seed, 2 + (seed % 2) as usize, 3);
    let spec = h.spec().clone();
    let n = h.depth();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let s = rng.random_range(0..mdp.n_states());
    let s_next = rng.random_range(0..mdp.n_states());
    let stack = OptionStack::from_index(&spec, rng.random_range(0..spec.stack_count()));
    let action = rng.random_range(0..spec.n_actions());
    let psi = h.log_grad(&params, s, &stack, action, s_next).map_err(|e| e.to_string())?;

    let log_pi = |p: &ActorParams, level: usize| -> f64 {
        let choice = if level == n { action } else { stack.level(level) };
        h.policy_prob(p, level, s, stack.prefix(level - 1)).unwrap()[choice].ln()
    };
    let log_beta = |p: &ActorParams, level: usize| h.termination_prob(p, level, s_next, stack.prefix(level)).ln();

    let step = 1e-6;
    let mut probe = params.clone();
    for i in 0..params.len() {
        let c = params.get(i);
        let mut diff = |f: &dyn Fn(&ActorParams) -> f64| {
            probe.set(i, c + step);
            let up = f(&probe);
            probe.set(i, c - step);
            let down = f(&probe);
            probe.set(i, c);
            (up - down) / (2.0 * step)
        };
        close(&format!("ψ_action[{i}]"), psi.psi_action[i], diff(&|p| log_pi(p, n)), 1e-6)?;
        for level in 1..n {
            close(
                &format!("ψ_option[{level}][{i}]"),
                psi.psi_option[level - 1][i],
                diff(&|p| log_pi(p, level)),
                1e-6,
            )?;
            close(
                &format!("ψ_β[{level}][{i}]"),
                psi.psi_beta[level - 1][i],
                diff(&|p| log_beta(p, level)),
                1e-6,
            )?;
        }
    }
    Ok(())
}

/// `P_{π,β}` agrees with the explicit cascade sum and with sampled arrivals.
pub fn check_arrival_distribution(seed: u64, samples: usize) -> Check {
    let (mdp, h, params) = instance(seed, 3, 3);
    let spec = h.spec().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let s_next = rng.random_range(0..mdp.n_states());
    let stack = OptionStack::from_index(&spec, rng.random_range(0..spec.stack_count()));
    let n = h.depth();
    let exact = h
        .next_option_distribution(&params, s_next, n, stack.prefix(n - 1))
        .map_err(|e| e.to_string())?;
    close("arrival mass", exact.iter().sum(), 1.0, 1e-12)?;
    for (k, p) in exact.iter().enumerate() {
        let next = OptionStack::from_index(&spec, k);
        close(&format!("arrival[{k}]"), *p, arrival_prob(&h, &params, s_next, &stack, &next), 1e-12)?;
    }
    let mut counts = vec![0usize; exact.len()];
    for _ in 0..samples {
        let (_, next) = h.sample_arrival(&params, s_next, &stack, &mut rng);
        counts[next.index(&spec)] += 1;
    }
    for (k, p) in exact.iter().enumerate() {
        let freq = counts[k] as f64 / samples as f64;
        let sd = (p * (1.0 - p) / samples as f64).sqrt();
        if (freq - p).abs() > 5.0 * sd + 1e-3 {
            return Err(format!("sampled arrival {k}: {freq} vs {p} (sd {sd:.2e})"));
        }
    }
    Ok(())
}

/// Sampled augmented transitions reproduce one kernel row.
pub fn check_kernel_sampling(seed: u64, samples: usize) -> Check {
    let (mdp, h, params) = instance(seed, 2, 3);
    let spec = h.spec().clone();
    let k = one_step_kernel(&mdp, &h, &params).map_err(|e| e.to_string())?;
    let nk = spec.stack_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    let x = rng.random_range(0..k.dim());
    let (s, stack) = (x / nk, OptionStack::from_index(&spec, x % nk));
    let mut counts = vec![0usize; k.dim()];
    for _ in 0..samples {
        let a = h.sample_action(&params, s, &stack, &mut rng);
        let t = mdp.step(s, a, &mut rng).map_err(|e| e.to_string())?;
        let (_, next) = h.sample_arrival(&params, t.next_state, &stack, &mut rng);
        counts[t.next_state * nk + next.index(&spec)] += 1;
    }
    for (y, c) in counts.iter().enumerate() {
        let p = k.matrix[(x, y)];
        let freq = *c as f64 / samples as f64;
        let sd = (p * (1.0 - p) / samples as f64).sqrt();
        if (freq - p).abs() > 5.0 * sd + 1e-3 {
            return Err(format!("P[{x},{y}] = {p}, sampled {freq}"));
        }
    }
    Ok(())
}

/// The LU stationary solve against an SVD null vector and elimination.
pub fn check_stationary(seed: u64) -> Check {
    let (mdp, h, params) = instance(seed, 1 + (seed % 3) as usize, 2 + (seed % 5) as usize);
    let k = one_step_kernel(&mdp, &h, &params).map_err(|e| e.to_string())?;
    let d = stationary_distribution(&k).map_err(|e| e.to_string())?;
    let rows = kernel_rows(&k);
    let svd = stationary_by_svd(&rows);
    let elim = stationary_by_elimination(&rows);
    for i in 0..rows.len() {
        close(&format!("d[{i}] vs svd"), d.d[i], svd[i], 1e-10)?;
        close(&format!("d[{i}] vs elimination"), d.d[i], elim[i], 1e-10)?;
    }
    close("residual", d.residual(&k), 0.0, 1e-10)
}

/// `J(r + c) = J(r) + c` and `∇J` is unchanged.
pub fn check_reward_shift(seed: u64) -> Check {
    let (mdp, h, params) = instance(seed, 2 + (seed % 2) as usize, 3);
    let c = [-3.0, 0.5, 7.25][(seed % 3) as usize];
    let shifted = mdp.shift_rewards(c);
    let e0 = avgopt::exact::evaluate(&mdp, &h, &params).map_err(|e| e.to_string())?;
    let e1 = avgopt::exact::evaluate(&shifted, &h, &params).map_err(|e| e.to_string())?;
    close("shifted gain", e1.values.j, e0.values.j + c, 1e-9)?;
    let g0 = exact_gradient(&mdp, &h, &params).map_err(|e| e.to_string())?;
    let g1 = exact_gradient(&shifted, &h, &params).map_err(|e| e.to_string())?;
    close("gradient shift", g0.max_abs_diff(&g1), 0.0, 1e-9)
}

/// Determinism of sampling-based code paths under a fixed seed.
pub fn check_determinism(seed: u64) -> Check {
    use avgopt::learner::{train, LearnerConfig};
    let (mdp, h, _) = instance(seed, 2, 4);
    let cfg = LearnerConfig {
        total_steps: 3_000,
        seed,
        ..LearnerConfig::default()
    };
    let a = train(&mdp, &h, &cfg).map_err(|e| e.to_string())?;
    let b = train(&mdp, &h, &cfg).map_err(|e| e.to_string())?;
    if a.curves != b.curves || a.traces != b.traces || a.final_params != b.final_params {
        return Err("two runs with one seed differ".into());
    }
    Ok(())
}
