//! Online two-timescale hierarchical actor-critic.
//!
//! The critic keeps a linear estimate of `Q_Ω` at every prefix level plus a
//! running gain estimate `Ĵ`, and moves on the fast timescale. The actor
//! ascends the sampled direction `Ψ` with a slower step and projects back
//! into the parameter box after every update. A discounted variant with the
//! same architecture serves as the baseline.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{advantage_value, arrival_value};
use crate::hierarchy::{ActorParams, Hierarchy, OptionStack, SparseGrad, DEFAULT_BOUND};
use crate::mdp::{TabularMdp, Transition};

/// What `t` counts in a step-size formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Clock {
    /// Environment steps.
    #[default]
    Global,
    /// Visits: a critic context `(ℓ, s, o^{0:ℓ})` counts its own updates,
    /// the actor counts visits to `s`.
    Visits,
}

/// Polynomially decaying step sizes for actor, critic and gain estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSchedule {
    pub a0: f64,
    pub b0: f64,
    pub eta0: f64,
    pub p_a: f64,
    pub p_b: f64,
    pub actor_clock: Clock,
    /// The gain estimate always runs on environment steps.
    pub critic_clock: Clock,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            a0: 0.01,
            b0: 0.05,
            eta0: 0.05,
            p_a: 0.9,
            p_b: 0.6,
            actor_clock: Clock::Global,
            critic_clock: Clock::Global,
        }
    }
}

impl StepSchedule {
    /// Rejects exponents that break `Σα = Σb = ∞`, `Σ(α² + b²) < ∞` or
    /// `α/b → 0`, i.e. anything outside `0.5 < p_b < p_a ≤ 1`.
    pub fn new(a0: f64, b0: f64, eta0: f64, p_a: f64, p_b: f64) -> Result<Self> {
        let s = StepSchedule {
            a0,
            b0,
            eta0,
            p_a,
            p_b,
            actor_clock: Clock::Global,
            critic_clock: Clock::Global,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a0", self.a0), ("b0", self.b0), ("eta0", self.eta0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSchedule(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.p_b > 0.5 && self.p_b < self.p_a && self.p_a <= 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0.5 < p_b < p_a <= 1, got p_a = {}, p_b = {}",
                self.p_a, self.p_b
            )));
        }
        Ok(())
    }

    pub fn actor(&self, t: u64) -> f64 {
        self.a0 * (1.0 + t as f64).powf(-self.p_a)
    }

    /// Capped at 1: a larger step overshoots the TD target.
    pub fn critic(&self, t: u64) -> f64 {
        (self.b0 * (1.0 + t as f64).powf(-self.p_b)).min(1.0)
    }

    /// Capped at 1 like the critic rate.
    pub fn gain(&self, t: u64) -> f64 {
        (self.eta0 * (1.0 + t as f64).powf(-self.p_b)).min(1.0)
    }
}

/// Step sizes in effect for one transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRates {
    pub actor: f64,
    /// One rate per critic level `0..N`.
    pub critic: Vec<f64>,
    pub gain: f64,
}

impl StepRates {
    /// Rates at environment step `t` of the global clock.
    pub fn global(schedule: &StepSchedule, depth: usize, t: u64) -> Self {
        StepRates {
            actor: schedule.actor(t),
            critic: vec![schedule.critic(t); depth],
            gain: schedule.gain(t),
        }
    }
}

/// Produces [`StepRates`] for each transition under the schedule's clock.
#[derive(Clone, Debug)]
pub struct StepClock {
    schedule: StepSchedule,
    state_visits: Vec<u64>,
    context_visits: Vec<Vec<u64>>,
    rates: StepRates,
}

impl StepClock {
    pub fn new(schedule: StepSchedule, hierarchy: &Hierarchy) -> Self {
        let spec = hierarchy.spec();
        let ns = hierarchy.n_states();
        let state_visits = match schedule.actor_clock {
            Clock::Global => Vec::new(),
            Clock::Visits => vec![0; ns],
        };
        let context_visits = match schedule.critic_clock {
            Clock::Global => Vec::new(),
            Clock::Visits => (0..hierarchy.depth()).map(|l| vec![0; ns * spec.prefix_count(l)]).collect(),
        };
        StepClock {
            schedule,
            state_visits,
            context_visits,
            rates: StepRates::global(&schedule, hierarchy.depth(), 0),
        }
    }

    /// Registers the visit to `(s, stack)` at step `t` and returns the rates
    /// for its update.
    pub fn tick(&mut self, hierarchy: &Hierarchy, t: u64, s: usize, stack: &OptionStack) -> &StepRates {
        let sch = self.schedule;
        let spec = hierarchy.spec();
        self.rates.actor = match sch.actor_clock {
            Clock::Global => sch.actor(t),
            Clock::Visits => {
                self.state_visits[s] += 1;
                sch.actor(self.state_visits[s] - 1)
            }
        };
        match sch.critic_clock {
            Clock::Global => self.rates.critic.iter_mut().for_each(|b| *b = sch.critic(t)),
            Clock::Visits => {
                for (level, counts) in self.context_visits.iter_mut().enumerate() {
                    let c = &mut counts[s * spec.prefix_count(level) + spec.prefix_index(stack.prefix(level))];
                    *c += 1;
                    self.rates.critic[level] = sch.critic(*c - 1);
                }
            }
        }
        self.rates.gain = sch.gain(t);
        &self.rates
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Mode {
    AverageReward,
    Discounted { gamma: f64 },
}

impl Mode {
    pub fn validate(&self) -> Result<()> {
        if let Mode::Discounted { gamma } = *self {
            if !(gamma > 0.0 && gamma < 1.0) {
                return Err(Error::InvalidDiscount(gamma));
            }
        }
        Ok(())
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            Mode::AverageReward => "ar",
            Mode::Discounted { .. } => "dr",
        }
    }
}

/// A traceable scalar: a critic weight or an actor weight, addressed by
/// family, level and position within that level's block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamId {
    Critic { level: usize, index: usize },
    Policy { level: usize, index: usize },
    Termination { level: usize, index: usize },
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Critic { level, index } => write!(f, "critic/{level}/{index}"),
            ParamId::Policy { level, index } => write!(f, "policy/{level}/{index}"),
            ParamId::Termination { level, index } => write!(f, "termination/{level}/{index}"),
        }
    }
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("parameter id `{s}` is not family/level/index"));
        let mut parts = s.split('/');
        let (family, level, index) = (parts.next(), parts.next(), parts.next());
        if parts.next().is_some() {
            return Err(bad());
        }
        let level: usize = level.and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        let index: usize = index.and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        match family {
            Some("critic") => Ok(ParamId::Critic { level, index }),
            Some("policy") => Ok(ParamId::Policy { level, index }),
            Some("termination") => Ok(ParamId::Termination { level, index }),
            _ => Err(bad()),
        }
    }
}

impl ParamId {
    /// Errors if the id does not address an existing coordinate.
    pub fn check(&self, hierarchy: &Hierarchy) -> Result<()> {
        let n = hierarchy.depth();
        let ok = match *self {
            ParamId::Critic { level, index } => level < n && index < hierarchy.feature_dim(level),
            ParamId::Policy { level, index } => {
                (1..=n).contains(&level) && index < hierarchy.layout().policy_block(level).len()
            }
            ParamId::Termination { level, index } => {
                (1..n).contains(&level) && index < hierarchy.layout().termination_block(level).len()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("parameter id {self} does not exist in this hierarchy")))
        }
    }

    pub fn read(&self, params: &ActorParams, critic: &CriticState) -> f64 {
        match *self {
            ParamId::Critic { level, index } => critic.weights[level][index],
            ParamId::Policy { level, index } => params.get(params.layout.policy_block(level).offset + index),
            ParamId::Termination { level, index } => params.get(params.layout.termination_block(level).offset + index),
        }
    }

    /// One critic weight and one primitive-action policy weight, plus one
    /// option policy weight and one termination weight when options exist,
    /// chosen pseudo-randomly from `seed`.
    pub fn default_selection(hierarchy: &Hierarchy, seed: u64) -> Vec<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6365);
        let n = hierarchy.depth();
        let mut ids = vec![
            ParamId::Critic {
                level: n - 1,
                index: rng.random_range(0..hierarchy.feature_dim(n - 1)),
            },
            ParamId::Policy {
                level: n,
                index: rng.random_range(0..hierarchy.layout().policy_block(n).len()),
            },
        ];
        if n > 1 {
            ids.push(ParamId::Policy {
                level: 1,
                index: rng.random_range(0..hierarchy.layout().policy_block(1).len()),
            });
            ids.push(ParamId::Termination {
                level: 1,
                index: rng.random_range(0..hierarchy.layout().termination_block(1).len()),
            });
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub mode: Mode,
    pub schedule: StepSchedule,
    pub total_steps: u64,
    /// Empty means [`ParamId::default_selection`].
    pub trace_param_ids: Vec<String>,
    pub seed: u64,
    pub bound: f64,
    /// Curve and trace sampling period in steps.
    pub record_every: u64,
    /// Window for the moving-average reward curve.
    pub window: usize,
    /// Critic-only run with the actor held fixed.
    pub freeze_actor: bool,
    /// Start state; a uniformly random state when absent.
    pub start_state: Option<usize>,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            mode: Mode::AverageReward,
            schedule: StepSchedule::default(),
            total_steps: 500_000,
            trace_param_ids: Vec::new(),
            seed: 0,
            bound: DEFAULT_BOUND,
            record_every: 100,
            window: 1000,
            freeze_actor: false,
            start_state: None,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        self.schedule.validate()?;
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(Error::Config(format!("projection bound must be positive, got {}", self.bound)));
        }
        if self.record_every == 0 || self.window == 0 {
            return Err(Error::Config("record_every and window must be positive".into()));
        }
        Ok(())
    }

    pub fn trace_ids(&self, hierarchy: &Hierarchy) -> Result<Vec<ParamId>> {
        if self.trace_param_ids.is_empty() {
            return Ok(ParamId::default_selection(hierarchy, self.seed));
        }
        self.trace_param_ids
            .iter()
            .map(|s| {
                let id: ParamId = s.parse()?;
                id.check(hierarchy)?;
                Ok(id)
            })
            .collect()
    }
}

/// Linear critic: `Q̂^ℓ(s, o^{0:ℓ}) = υ^ℓ · φ(s, o^{0:ℓ})` for `ℓ ∈ 0..N`, and `Ĵ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticState {
    pub weights: Vec<Vec<f64>>,
    pub j_hat: f64,
}

impl CriticState {
    pub fn zeros(hierarchy: &Hierarchy) -> Self {
        CriticState {
            weights: (0..hierarchy.depth()).map(|l| vec![0.0; hierarchy.feature_dim(l)]).collect(),
            j_hat: 0.0,
        }
    }

    pub fn q(&self, hierarchy: &Hierarchy, level: usize, s: usize, prefix: &[usize]) -> f64 {
        hierarchy.features(s, prefix).dot(&self.weights[level])
    }

    /// `Û(s', o)`: critic values composed through the termination cascade.
    pub fn arrival(&self, hierarchy: &Hierarchy, params: &ActorParams, next_state: usize, stack: &OptionStack) -> f64 {
        arrival_value(hierarchy, params, next_state, stack, |l, p| self.q(hierarchy, l, next_state, p))
    }

    fn is_finite(&self) -> bool {
        self.j_hat.is_finite() && self.weights.iter().flatten().all(|w| w.is_finite())
    }
}

/// Sampled `Q̂_U(s, o, a)`: `r − Ĵ + Û(s', o)` or `r + γ Û(s', o)`.
pub fn q_u_estimate(
    hierarchy: &Hierarchy,
    params: &ActorParams,
    critic: &CriticState,
    mode: Mode,
    transition: &Transition,
    stack: &OptionStack,
) -> f64 {
    let u = critic.arrival(hierarchy, params, transition.next_state, stack);
    match mode {
        Mode::AverageReward => transition.reward - critic.j_hat + u,
        Mode::Discounted { gamma } => transition.reward + gamma * u,
    }
}

/// `δ_t = Q̂_U − Q̂_Ω(s_t, o_t^{0:N-1})` with the mode's `Q̂_U` estimate.
pub fn td_error(
    hierarchy: &Hierarchy,
    params: &ActorParams,
    critic: &CriticState,
    mode: Mode,
    transition: &Transition,
    stack: &OptionStack,
) -> f64 {
    let n = hierarchy.depth();
    q_u_estimate(hierarchy, params, critic, mode, transition, stack)
        - critic.q(hierarchy, n - 1, transition.state, stack.prefix(n - 1))
}

/// Fast-timescale update. Returns `δ_t`.
///
/// The full-stack level moves along the TD error. Each shallower level
/// tracks the policy-weighted average of the level below it at the visited
/// state, which is the relation the exact tables satisfy.
#[allow(clippy::too_many_arguments)]
pub fn critic_step(
    hierarchy: &Hierarchy,
    params: &ActorParams,
    critic: &mut CriticState,
    mode: Mode,
    transition: &Transition,
    stack: &OptionStack,
    rates: &StepRates,
) -> f64 {
    let n = hierarchy.depth();
    let s = transition.state;
    let delta = td_error(hierarchy, params, critic, mode, transition, stack);
    hierarchy
        .features(s, stack.prefix(n - 1))
        .scatter(0, rates.critic[n - 1] * delta, &mut critic.weights[n - 1]);
    let mut probs = Vec::new();
    let mut prefix = Vec::with_capacity(n);
    for level in (0..n - 1).rev() {
        prefix.clear();
        prefix.extend_from_slice(stack.prefix(level));
        probs.resize(hierarchy.spec().choices(level + 1), 0.0);
        hierarchy.policy_into(params, level + 1, s, &prefix, &mut probs);
        let mut target = 0.0;
        for (c, p) in probs.iter().enumerate() {
            prefix.push(c);
            target += p * critic.q(hierarchy, level + 1, s, &prefix);
            prefix.pop();
        }
        let err = target - critic.q(hierarchy, level, s, &prefix);
        hierarchy
            .features(s, &prefix)
            .scatter(0, rates.critic[level] * err, &mut critic.weights[level]);
    }
    if mode == Mode::AverageReward {
        critic.j_hat += rates.gain * (transition.reward - critic.j_hat);
    }
    delta
}

/// Accumulates the sampled ascent direction `Ψ` into `sink`.
///
/// * action term: `δ_t ψ_{s,o,a}` (the TD error is `Q̂_U` minus a baseline
///   that does not depend on the action);
/// * option term: for each level `ℓ`, the probability that `ℓ` terminates
///   at `s'` times the expected `Σ_c ∇π^ℓ(c|s',p) Q̂^ℓ(s',p+c)` over the
///   re-selected prefix `p`;
/// * termination term: `−Â^ℓ(s', o^{0:ℓ}) ∏_{k>ℓ} β^k ψ_β^ℓ` with
///   `ψ_β = ∇ log β`.
#[allow(clippy::too_many_arguments)]
pub fn actor_direction(
    hierarchy: &Hierarchy,
    params: &ActorParams,
    critic: &CriticState,
    transition: &Transition,
    stack: &OptionStack,
    delta: f64,
    sink: &mut SparseGrad,
) {
    let n = hierarchy.depth();
    let spec = hierarchy.spec();
    let (s, next) = (transition.state, transition.next_state);
    hierarchy.add_policy_log_grad(params, n, s, stack.prefix(n - 1), transition.action, delta, sink);
    if n == 1 {
        return;
    }
    let betas: Vec<f64> = (0..=n)
        .map(|l| hierarchy.termination_prob(params, l, next, stack.prefix(l.min(n - 1))))
        .collect();
    let mut dist = Vec::new();
    let mut values = Vec::new();
    for level in 1..n {
        let below: f64 = betas[level + 1..n].iter().product();
        let terminated = betas[level] * below;
        dist.resize(spec.prefix_count(level - 1), 0.0);
        hierarchy.next_option_into(params, next, level, stack.prefix(level - 1), &mut dist);
        for (p, prob) in dist.iter().enumerate() {
            if *prob == 0.0 {
                continue;
            }
            let mut prefix = spec.prefix_from_index(level - 1, p);
            values.clear();
            for c in 0..spec.choices(level) {
                prefix.push(c);
                values.push(critic.q(hierarchy, level, next, &prefix));
                prefix.pop();
            }
            hierarchy.add_policy_expectation_grad(params, level, next, &prefix, &values, terminated * prob, sink);
        }
        let prefix = stack.prefix(level);
        let adv = advantage_value(hierarchy, params, next, prefix, |l, p| critic.q(hierarchy, l, next, p));
        hierarchy.add_termination_log_grad(params, level, next, prefix, -adv * below, sink);
    }
}

/// Slow-timescale update `θ ← Γ[θ + α_t Ψ]`.
#[allow(clippy::too_many_arguments)]
pub fn actor_step(
    hierarchy: &Hierarchy,
    params: &mut ActorParams,
    critic: &CriticState,
    transition: &Transition,
    stack: &OptionStack,
    delta: f64,
    alpha: f64,
    buffer: &mut SparseGrad,
) {
    buffer.0.clear();
    actor_direction(hierarchy, params, critic, transition, stack, delta, buffer);
    params.apply_projected(buffer, alpha);
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    /// Completed cycles so far.
    pub cycle: u64,
    /// Reward of the last completed cycle, or the moving-average reward per
    /// step when the MDP has no cycle marks. NaN before the first cycle.
    pub value: f64,
    pub j_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleRecord {
    pub cycle: u64,
    /// Step index of the cycle-completing transition.
    pub end_step: u64,
    pub length: u64,
    pub reward: f64,
    /// State the completing transition left from.
    pub end_state: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub step: u64,
    pub param_id: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub steps: u64,
    pub curves: Vec<CurvePoint>,
    pub cycles: Vec<CycleRecord>,
    pub traces: Vec<TracePoint>,
    pub final_params: ActorParams,
    pub final_critic: CriticState,
}

impl RunRecord {
    /// Mean reward of the cycles that finished in the last `fraction` of
    /// the run.
    pub fn final_cycle_reward(&self, fraction: f64) -> Option<f64> {
        let cutoff = (self.steps as f64 * (1.0 - fraction)) as u64;
        let tail: Vec<f64> = self.cycles.iter().filter(|c| c.end_step >= cutoff).map(|c| c.reward).collect();
        if tail.is_empty() {
            None
        } else {
            Some(tail.iter().sum::<f64>() / tail.len() as f64)
        }
    }
}

/// Trains from zero-initialised parameters.
pub fn train(mdp: &TabularMdp, hierarchy: &Hierarchy, config: &LearnerConfig) -> Result<RunRecord> {
    let params = hierarchy.init_params(config.bound);
    train_from(mdp, hierarchy, config, params, CriticState::zeros(hierarchy))
}

/// The continuing-task loop: act, step, critic update, actor update,
/// termination cascade, repeat.
pub fn train_from(
    mdp: &TabularMdp,
    hierarchy: &Hierarchy,
    config: &LearnerConfig,
    mut params: ActorParams,
    mut critic: CriticState,
) -> Result<RunRecord> {
    config.validate()?;
    if mdp.n_states() != hierarchy.n_states() || mdp.n_actions() != hierarchy.spec().n_actions() {
        return Err(Error::DimensionMismatch("MDP and hierarchy disagree on states or actions".into()));
    }
    if &params.layout != hierarchy.layout() || critic.weights.len() != hierarchy.depth() {
        return Err(Error::DimensionMismatch("initial parameters do not fit the hierarchy".into()));
    }
    let trace_ids = config.trace_ids(hierarchy)?;
    let trace_names: Vec<String> = trace_ids.iter().map(|id| id.to_string()).collect();
    let mode = config.mode;
    let cyclic = mdp.has_cycle_marks();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut s = match config.start_state {
        Some(s) if s < mdp.n_states() => s,
        Some(s) => return Err(Error::InvalidIndex(format!("start state {s}"))),
        None => rng.random_range(0..mdp.n_states()),
    };
    let mut stack = hierarchy.initial_stack(&params, s, &mut rng);

    let mut record = RunRecord {
        mode,
        seed: config.seed,
        steps: config.total_steps,
        curves: Vec::new(),
        cycles: Vec::new(),
        traces: Vec::new(),
        final_params: params.clone(),
        final_critic: critic.clone(),
    };
    let mut buffer = SparseGrad::default();
    let mut clock = StepClock::new(config.schedule, hierarchy);
    let mut window = vec![0.0; config.window];
    let mut window_sum = 0.0;
    let mut cycle_reward = 0.0;
    let mut cycle_start = 0u64;
    let mut last_cycle = f64::NAN;

    for t in 0..config.total_steps {
        let action = hierarchy.sample_action(&params, s, &stack, &mut rng);
        let transition = mdp.step(s, action, &mut rng)?;
        let rates = clock.tick(hierarchy, t, s, &stack);
        let delta = critic_step(hierarchy, &params, &mut critic, mode, &transition, &stack, rates);
        if !config.freeze_actor {
            actor_step(hierarchy, &mut params, &critic, &transition, &stack, delta, rates.actor, &mut buffer);
        }
        if !delta.is_finite() || !critic.is_finite() || buffer.0.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::Divergence {
                step: t,
                detail: format!(
                    "state {s}, stack {:?}, action {action}, reward {}, delta {delta}, j_hat {}",
                    stack.ids(),
                    transition.reward,
                    critic.j_hat
                ),
            });
        }
        let (_, next_stack) = hierarchy.sample_arrival(&params, transition.next_state, &stack, &mut rng);

        let slot = (t as usize) % config.window;
        window_sum += transition.reward - window[slot];
        window[slot] = transition.reward;
        cycle_reward += transition.reward;
        if transition.cycle_completed {
            record.cycles.push(CycleRecord {
                cycle: record.cycles.len() as u64 + 1,
                end_step: t,
                length: t + 1 - cycle_start,
                reward: cycle_reward,
                end_state: s,
            });
            last_cycle = cycle_reward;
            cycle_reward = 0.0;
            cycle_start = t + 1;
        }

        if (t + 1) % config.record_every == 0 {
            let step = t + 1;
            let value = if cyclic {
                last_cycle
            } else {
                window_sum / (step.min(config.window as u64)) as f64
            };
            record.curves.push(CurvePoint {
                step,
                cycle: record.cycles.len() as u64,
                value,
                j_hat: critic.j_hat,
            });
            for (id, name) in trace_ids.iter().zip(&trace_names) {
                record.traces.push(TracePoint {
                    step,
                    param_id: name.clone(),
                    value: id.read(&params, &critic),
                });
            }
        }

        s = transition.next_state;
        stack = next_stack;
    }
    record.final_params = params;
    record.final_critic = critic;
    Ok(record)
}
