//! Exact policy gradient of the gain for a hierarchical policy, a
//! finite-difference oracle over `J(θ)`, and the comparison report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact::{average_reward, evaluate, Evaluation};
use crate::hierarchy::{ActorParams, Block, Hierarchy, HierarchySpec, OptionStack, ParamLayout, DEFAULT_BOUND};
use crate::mdp::{random_mdp, TabularMdp};

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const RELATIVE_FLOOR: f64 = 1e-8;

/// A vector in actor-parameter space with per-block views.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientVector {
    #[serde(skip)]
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(layout: &ParamLayout) -> Self {
        GradientVector {
            layout: layout.clone(),
            values: vec![0.0; layout.total],
        }
    }

    pub fn block(&self, block: Block) -> &[f64] {
        &self.values[block.range()]
    }

    pub fn policy(&self, level: usize) -> &[f64] {
        self.block(self.layout.policy_block(level))
    }

    pub fn termination(&self, level: usize) -> &[f64] {
        self.block(self.layout.termination_block(level))
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Which summands of the gradient to include.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradientTerms {
    /// `Σ d Σ_a ∇π^N · Q_U`
    pub action: bool,
    /// `Σ μ Σ_ℓ ∏β · Σ P_{π,β} Σ ∇π^ℓ · Q_Ω`
    pub option: bool,
    /// `−Σ μ Σ_ℓ ∇β^ℓ · A_Ω · ∏β`
    pub termination: bool,
}

impl GradientTerms {
    pub const ALL: GradientTerms = GradientTerms {
        action: true,
        option: true,
        termination: true,
    };
}

/// Exact `∇_θ J`.
pub fn exact_gradient(mdp: &TabularMdp, hierarchy: &Hierarchy, params: &ActorParams) -> Result<GradientVector> {
    let eval = evaluate(mdp, hierarchy, params)?;
    Ok(gradient_from_evaluation(hierarchy, params, &eval, GradientTerms::ALL))
}

/// Same as [`exact_gradient`] with some summands switched off.
pub fn exact_gradient_terms(
    mdp: &TabularMdp,
    hierarchy: &Hierarchy,
    params: &ActorParams,
    terms: GradientTerms,
) -> Result<GradientVector> {
    let eval = evaluate(mdp, hierarchy, params)?;
    Ok(gradient_from_evaluation(hierarchy, params, &eval, terms))
}

/// Assembles the gradient from a finished exact evaluation.
pub fn gradient_from_evaluation(
    hierarchy: &Hierarchy,
    params: &ActorParams,
    eval: &Evaluation,
    terms: GradientTerms,
) -> GradientVector {
    let spec = hierarchy.spec();
    let n = hierarchy.depth();
    let (ns, na, nk) = (hierarchy.n_states(), spec.n_actions(), spec.stack_count());
    let values = &eval.values;
    let mut grad = GradientVector::zeros(hierarchy.layout());
    let g = &mut grad.values;

    if terms.action {
        for x in 0..ns * nk {
            let d = eval.stationary.d[x];
            if d == 0.0 {
                continue;
            }
            let stack = OptionStack::from_index(spec, x % nk);
            hierarchy.add_policy_expectation_grad(
                params,
                n,
                x / nk,
                stack.prefix(n - 1),
                &values.q_u[x * na..(x + 1) * na],
                d,
                g,
            );
        }
    }

    if n == 1 || !(terms.option || terms.termination) {
        return grad;
    }

    // Both remaining summands depend on (s, o) only through the arrival
    // weight ν(s', o) = Σ_s μ_Ω(s, o, s').
    let mut nu = vec![0.0; ns * nk];
    for x in 0..ns * nk {
        let k = x % nk;
        for next in 0..ns {
            nu[next * nk + k] += eval.mu(x, next);
        }
    }

    let q_at = |level: usize, s: usize, prefix: &[usize]| {
        values.q_omega[level][s * spec.prefix_count(level) + spec.prefix_index(prefix)]
    };
    let mut betas = vec![0.0; n + 1];
    let mut dist = Vec::new();
    let mut child_values = Vec::new();
    for next in 0..ns {
        for k in 0..nk {
            let weight = nu[next * nk + k];
            if weight == 0.0 {
                continue;
            }
            let stack = OptionStack::from_index(spec, k);
            for (level, b) in betas.iter_mut().enumerate() {
                *b = hierarchy.termination_prob(params, level, next, stack.prefix(level.min(n - 1)));
            }
            for level in 1..n {
                // ∏_{k=ℓ+1}^{N-1} β^k
                let below: f64 = betas[level + 1..n].iter().product();
                if terms.option {
                    let terminated = betas[level] * below;
                    dist.resize(spec.prefix_count(level - 1), 0.0);
                    hierarchy.next_option_into(params, next, level, stack.prefix(level - 1), &mut dist);
                    for (p, prob) in dist.iter().enumerate() {
                        if *prob == 0.0 {
                            continue;
                        }
                        let mut prefix = spec.prefix_from_index(level - 1, p);
                        child_values.clear();
                        for c in 0..spec.choices(level) {
                            prefix.push(c);
                            child_values.push(q_at(level, next, &prefix));
                            prefix.pop();
                        }
                        hierarchy.add_policy_expectation_grad(
                            params,
                            level,
                            next,
                            &prefix,
                            &child_values,
                            weight * terminated * prob,
                            g,
                        );
                    }
                }
                if terms.termination {
                    let prefix = stack.prefix(level);
                    let adv = eval.advantage.a_omega[level][next * spec.prefix_count(level) + spec.prefix_index(prefix)];
                    hierarchy.add_termination_grad(params, level, next, prefix, -weight * adv * below, g);
                }
            }
        }
    }
    grad
}

/// Central differences of `J(θ)` with step `h`, one coordinate at a time.
pub fn finite_difference_gradient(
    mdp: &TabularMdp,
    hierarchy: &Hierarchy,
    params: &ActorParams,
    h: f64,
) -> Result<GradientVector> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut grad = GradientVector::zeros(hierarchy.layout());
    let mut probe = params.clone();
    for i in 0..params.len() {
        let centre = params.get(i);
        let wrap = |e: Error| Error::Probe {
            coord: i,
            source: Box::new(e),
        };
        probe.weights_mut_unchecked()[i] = centre + h;
        let plus = average_reward(mdp, hierarchy, &probe).map_err(wrap)?;
        probe.weights_mut_unchecked()[i] = centre - h;
        let minus = average_reward(mdp, hierarchy, &probe).map_err(wrap)?;
        probe.weights_mut_unchecked()[i] = centre;
        grad.values[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Random MDP, tabular hierarchy and parameters drawn uniformly from
/// `[-1, 1]`. Draws whose augmented chain is not unichain are discarded.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    spec: HierarchySpec,
    n_states: usize,
) -> Result<(TabularMdp, Hierarchy, ActorParams)> {
    let hierarchy = Hierarchy::tabular(spec.clone(), n_states)?;
    for _ in 0..1000 {
        let mdp = random_mdp(n_states, spec.n_actions(), rng)?;
        let mut params = hierarchy.init_params(DEFAULT_BOUND);
        let weights: Vec<f64> = (0..params.len()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        params.set_weights(&weights)?;
        match average_reward(&mdp, &hierarchy, &params) {
            Ok(_) => return Ok((mdp, hierarchy, params)),
            Err(Error::NotUnichain(_)) | Err(Error::Singular(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NotUnichain("no unichain instance in 1000 draws".into()))
}

/// Per-block relative-error summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockError {
    pub block: String,
    pub max: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckCase {
    pub index: usize,
    pub seed: u64,
    pub depth: usize,
    pub n_states: usize,
    pub options_per_level: Vec<usize>,
    pub n_actions: usize,
    pub n_params: usize,
    pub gradient_norm: f64,
    pub max_relative_error: f64,
    pub blocks: Vec<BlockError>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    pub cases: Vec<GradcheckCase>,
    pub max_relative_error: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>3} {:>5} {:>3} {:>6} {:>7} {:>3} {:>6} {:>11} {:>11}  ok\n",
            "#", "depth", "S", "opts", "actions", "", "params", "|g|inf", "rel.err"
        );
        for c in &self.cases {
            out.push_str(&format!(
                "{:>3} {:>5} {:>3} {:>6} {:>7} {:>3} {:>6} {:>11.4e} {:>11.4e}  {}\n",
                c.index,
                c.depth,
                c.n_states,
                format!("{:?}", c.options_per_level),
                c.n_actions,
                "",
                c.n_params,
                c.gradient_norm,
                c.max_relative_error,
                if c.passed { "pass" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "{} instances, max relative error {:.4e}, tolerance {:.0e}: {}\n",
            self.cases.len(),
            self.max_relative_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

fn gradcheck_case(index: usize, seed: u64) -> Result<GradcheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(2..=3);
    let n_states = rng.random_range(2..=6);
    let n_actions = rng.random_range(2..=3);
    let options: Vec<usize> = (1..depth).map(|_| rng.random_range(2..=3)).collect();
    let spec = HierarchySpec::new(depth, options.clone(), n_actions)?;
    let (mdp, hierarchy, params) = random_instance(&mut rng, spec, n_states)?;
    let exact = exact_gradient(&mdp, &hierarchy, &params)?;
    let fd = finite_difference_gradient(&mdp, &hierarchy, &params, FD_STEP)?;
    let denom = exact.norm_inf().max(RELATIVE_FLOOR);
    let rel: Vec<f64> = exact
        .values
        .iter()
        .zip(&fd.values)
        .map(|(a, b)| (a - b).abs() / denom)
        .collect();
    let blocks = hierarchy
        .layout()
        .named_blocks()
        .into_iter()
        .map(|(name, b)| {
            let mut errs = rel[b.range()].to_vec();
            BlockError {
                block: name,
                max: errs.iter().copied().fold(0.0, f64::max),
                median: median(&mut errs),
            }
        })
        .collect();
    let max_rel = rel.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckCase {
        index,
        seed,
        depth,
        n_states,
        options_per_level: options,
        n_actions,
        n_params: params.len(),
        gradient_norm: exact.norm_inf(),
        max_relative_error: max_rel,
        blocks,
        passed: max_rel < GRADCHECK_TOLERANCE,
    })
}

/// Compares the exact gradient with finite differences on `instances`
/// random problems (depth 2 or 3, up to 6 states, up to 3 options per level
/// and 3 actions).
pub fn gradcheck_report(instances: usize, seed: u64) -> Result<GradcheckReport> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..instances).map(|_| master.random()).collect();
    let cases = seeds
        .par_iter()
        .enumerate()
        .map(|(i, s)| gradcheck_case(i, *s))
        .collect::<Result<Vec<_>>>()?;
    let max_rel = cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed,
        tolerance: GRADCHECK_TOLERANCE,
        step: FD_STEP,
        passed: cases.iter().all(|c| c.passed),
        max_relative_error: max_rel,
        cases,
    })
}
