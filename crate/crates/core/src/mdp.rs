//! Finite tabular MDPs, environment stepping, and the two benchmark
//! environments: the discount trap chain and the parcel-delivery grid.

use std::collections::HashSet;
use std::io::Write;

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-12;

/// A finite MDP with a dense transition kernel `P(s'|s,a)` and reward table `r(s,a)`.
///
/// `cycle_marks[s * n_actions + a]` flags state-action pairs whose transition
/// completes a task cycle (a parcel drop-off, a lap of the trap chain). The
/// learner uses it to split the reward stream into per-cycle totals.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    labels: Option<Vec<String>>,
    cycle_marks: Vec<bool>,
}

/// One sampled environment step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub cycle_completed: bool,
}

impl TabularMdp {
    /// Builds an MDP from row-major tables: `transition[(s * A + a) * S + s']`
    /// and `reward[s * A + a]`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        let mdp = TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            labels: None,
            cycle_marks: vec![false; n_states * n_actions],
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_states {
            return Err(Error::InvalidMdp(format!(
                "{} labels for {} states",
                labels.len(),
                self.n_states
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_cycle_marks(mut self, marks: Vec<bool>) -> Result<Self> {
        if marks.len() != self.n_states * self.n_actions {
            return Err(Error::InvalidMdp(format!(
                "{} cycle marks for {} state-action pairs",
                marks.len(),
                self.n_states * self.n_actions
            )));
        }
        self.cycle_marks = marks;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidMdp("need at least one state and one action".into()));
        }
        if self.transition.len() != ns * na * ns {
            return Err(Error::InvalidMdp(format!(
                "transition table has {} entries, expected {}",
                self.transition.len(),
                ns * na * ns
            )));
        }
        if self.reward.len() != ns * na {
            return Err(Error::InvalidMdp(format!(
                "reward table has {} entries, expected {}",
                self.reward.len(),
                ns * na
            )));
        }
        for s in 0..ns {
            for a in 0..na {
                let row = self.row(s, a);
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(Error::InvalidMdp(format!("row ({s}, {a}) has a negative or non-finite entry")));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_TOLERANCE {
                    return Err(Error::InvalidMdp(format!("row ({s}, {a}) sums to {total}")));
                }
                if !self.reward(s, a).is_finite() {
                    return Err(Error::InvalidMdp(format!("reward ({s}, {a}) is not finite")));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Successor distribution `P(·|s,a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)[next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn is_cycle_mark(&self, s: usize, a: usize) -> bool {
        self.cycle_marks[s * self.n_actions + a]
    }

    pub fn has_cycle_marks(&self) -> bool {
        self.cycle_marks.iter().any(|m| *m)
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn label(&self, s: usize) -> String {
        match &self.labels {
            Some(l) => l[s].clone(),
            None => format!("s{s}"),
        }
    }

    /// Same dynamics with a different reward table.
    pub fn with_rewards(&self, reward: Vec<f64>) -> Result<TabularMdp> {
        let mut out = self.clone();
        out.reward = reward;
        out.validate()?;
        Ok(out)
    }

    /// Same dynamics with `c` added to every reward.
    pub fn shift_rewards(&self, c: f64) -> TabularMdp {
        let mut out = self.clone();
        out.reward.iter_mut().for_each(|r| *r += c);
        out
    }

    fn check_ids(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.n_states || a >= self.n_actions {
            return Err(Error::InvalidIndex(format!(
                "state {s} / action {a} for an MDP with {} states and {} actions",
                self.n_states, self.n_actions
            )));
        }
        Ok(())
    }

    /// Samples one transition from `(s, a)`.
    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<Transition> {
        self.check_ids(s, a)?;
        let next_state = sample_index(self.row(s, a), rng);
        Ok(Transition {
            state: s,
            action: a,
            reward: self.reward(s, a),
            next_state,
            cycle_completed: self.is_cycle_mark(s, a),
        })
    }

    pub fn to_document(&self) -> MdpDocument {
        MdpDocument {
            n_states: self.n_states,
            n_actions: self.n_actions,
            transitions: self.transition.chunks(self.n_states).map(<[f64]>::to_vec).collect(),
            rewards: self.reward.chunks(self.n_actions).map(<[f64]>::to_vec).collect(),
            labels: self.labels.clone(),
            cycle_marks: if self.has_cycle_marks() {
                Some(
                    self.cycle_marks
                        .chunks(self.n_actions)
                        .map(<[bool]>::to_vec)
                        .collect(),
                )
            } else {
                None
            },
        }
    }

    pub fn from_document(doc: MdpDocument) -> Result<Self> {
        let (ns, na) = (doc.n_states, doc.n_actions);
        if doc.transitions.len() != ns * na || doc.transitions.iter().any(|r| r.len() != ns) {
            return Err(Error::InvalidMdp(format!(
                "expected {} transition rows of length {ns}",
                ns * na
            )));
        }
        if doc.rewards.len() != ns || doc.rewards.iter().any(|r| r.len() != na) {
            return Err(Error::InvalidMdp(format!("expected {ns} reward rows of length {na}")));
        }
        let mut mdp = TabularMdp::new(
            ns,
            na,
            doc.transitions.into_iter().flatten().collect(),
            doc.rewards.into_iter().flatten().collect(),
        )?;
        if let Some(labels) = doc.labels {
            mdp = mdp.with_labels(labels)?;
        }
        if let Some(marks) = doc.cycle_marks {
            mdp = mdp.with_cycle_marks(marks.into_iter().flatten().collect())?;
        }
        Ok(mdp)
    }

    /// JSON export. Floats are written in scientific notation with 17
    /// significant digits so that a round trip is bit-exact.
    pub fn to_json(&self) -> Result<String> {
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter);
        self.to_document().serialize(&mut ser)?;
        Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

/// Serialized form of a [`TabularMdp`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    /// One row per `(s, a)` pair in row-major order.
    pub transitions: Vec<Vec<f64>>,
    /// One row per state.
    pub rewards: Vec<Vec<f64>>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_marks: Option<Vec<Vec<bool>>>,
}

/// JSON formatter writing every `f64` with 17 significant digits.
#[derive(Clone, Copy, Debug, Default)]
pub struct PreciseFormatter;

impl serde_json::ser::Formatter for PreciseFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

/// Random MDP: Dirichlet(1) transition rows, rewards uniform on `[-1, 1]`.
pub fn random_mdp<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Result<TabularMdp> {
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let row: Vec<f64> = (0..n_states).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = row.iter().sum();
        transition.extend(row.iter().map(|x| x / total));
    }
    let reward = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..=1.0)).collect();
    TabularMdp::new(n_states, n_actions, transition, reward)
}

pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

// ---------------------------------------------------------------------------
// Trap chain
// ---------------------------------------------------------------------------

pub const TRAP_START: usize = 0;
pub const TRAP_RED: usize = 0;
pub const TRAP_BLUE: usize = 1;

/// Reward placement and probe discounts for the trap chain.
///
/// Edge `k` of a cycle is the transition leaving its `k`-th state. The last
/// state of each cycle is a re-entry point where `red` leads to the first
/// R-cycle state and `blue` to the first B-cycle state, so each committed
/// policy closes its own 4-cycle while mixed policies still see one
/// recurrent class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrapChainSpec {
    pub discount_probe_set: Vec<f64>,
    pub red_cycle_rewards: [f64; 4],
    pub blue_cycle_rewards: [f64; 4],
}

impl Default for TrapChainSpec {
    fn default() -> Self {
        TrapChainSpec {
            discount_probe_set: vec![0.3, 0.5, 0.9, 0.99],
            red_cycle_rewards: [0.0, 2.0, -1.0, 0.0],
            blue_cycle_rewards: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

impl TrapChainSpec {
    /// Id of the `k`-th state (0-based) of the red cycle.
    pub fn red_state(k: usize) -> usize {
        1 + k
    }

    pub fn blue_state(k: usize) -> usize {
        5 + k
    }
}

/// The default 9-state trap chain.
pub fn build_trap_chain() -> TabularMdp {
    build_trap_chain_with(&TrapChainSpec::default()).expect("default trap chain is valid")
}

pub fn build_trap_chain_with(spec: &TrapChainSpec) -> Result<TabularMdp> {
    const N: usize = 9;
    const A: usize = 2;
    let mut transition = vec![0.0; N * A * N];
    let mut reward = vec![0.0; N * A];
    let mut marks = vec![false; N * A];
    let mut set = |s: usize, a: usize, next: usize, r: f64| {
        transition[(s * A + a) * N + next] = 1.0;
        reward[s * A + a] = r;
    };

    set(TRAP_START, TRAP_RED, TrapChainSpec::red_state(0), 0.0);
    set(TRAP_START, TRAP_BLUE, TrapChainSpec::blue_state(0), 0.0);
    for (first, rewards) in [
        (TrapChainSpec::red_state(0), spec.red_cycle_rewards),
        (TrapChainSpec::blue_state(0), spec.blue_cycle_rewards),
    ] {
        for k in 0..3 {
            for a in 0..A {
                set(first + k, a, first + k + 1, rewards[k]);
            }
        }
        set(first + 3, TRAP_RED, TrapChainSpec::red_state(0), rewards[3]);
        set(first + 3, TRAP_BLUE, TrapChainSpec::blue_state(0), rewards[3]);
        marks[(first + 3) * A] = true;
        marks[(first + 3) * A + 1] = true;
    }

    let labels = ["S0", "S11", "S12", "S13", "S14", "S21", "S22", "S23", "S24"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    TabularMdp::new(N, A, transition, reward)?
        .with_labels(labels)?
        .with_cycle_marks(marks)
}

// ---------------------------------------------------------------------------
// Delivery grid
// ---------------------------------------------------------------------------

pub type Cell = (usize, usize);

/// Movement actions, in action-id order.
pub const MOVES: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
pub const MOVE_NAMES: [&str; 4] = ["N", "E", "S", "W"];

/// Layout and rewards of the parcel-delivery grid. Cells are `(x, y)` with
/// `y = 0` the top row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeliveryGridSpec {
    pub width: usize,
    pub height: usize,
    pub walls: Vec<Cell>,
    pub pickup_p1: Cell,
    pub pickup_p2: Cell,
    pub dropoff: Cell,
    /// Blue-green junction, on the P1 route.
    pub trap_junction: Cell,
    /// Red-green junction, on the P2 route.
    pub alt_junction: Cell,
    pub junction_trap_reward: f64,
    pub junction_alt_reward: f64,
    pub parcel_reward_p1: f64,
    pub parcel_reward_p2: f64,
    pub step_reward: f64,
}

impl Default for DeliveryGridSpec {
    fn default() -> Self {
        // Row y = 4 is a wall except at the two junctions, and column x = 5
        // splits the lower half, so P1 is reachable only through the blue
        // junction and P2 only through the red one.
        let mut walls: Vec<Cell> = [0, 1, 2, 4, 5, 7, 8, 9].iter().map(|&x| (x, 4)).collect();
        walls.extend((5..10).map(|y| (5, y)));
        DeliveryGridSpec {
            width: 10,
            height: 10,
            walls,
            pickup_p1: (2, 7),
            pickup_p2: (7, 7),
            dropoff: (4, 0),
            trap_junction: (3, 4),
            alt_junction: (6, 4),
            junction_trap_reward: 20.0,
            junction_alt_reward: 10.0,
            parcel_reward_p1: 50.0,
            parcel_reward_p2: 100.0,
            step_reward: 0.0,
        }
    }
}

/// What the agent carries. `EmptyPastJunction` means a junction bonus has
/// already been paid since the last drop-off; it keeps junction rewards at
/// one per cycle instead of letting the agent farm them by stepping in and
/// out of the junction cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Load {
    Empty,
    EmptyPastJunction,
    FromP1,
    FromP2,
}

impl Load {
    pub const ALL: [Load; 4] = [Load::Empty, Load::EmptyPastJunction, Load::FromP1, Load::FromP2];

    fn index(self) -> usize {
        self as usize
    }

    fn is_empty(self) -> bool {
        matches!(self, Load::Empty | Load::EmptyPastJunction)
    }

    fn tag(self) -> &'static str {
        match self {
            Load::Empty => "empty",
            Load::EmptyPastJunction => "empty*",
            Load::FromP1 => "p1",
            Load::FromP2 => "p2",
        }
    }
}

/// A compiled delivery grid together with its state decoding.
#[derive(Clone, Debug)]
pub struct DeliveryGrid {
    pub spec: DeliveryGridSpec,
    pub mdp: TabularMdp,
    cells: Vec<Cell>,
    cell_index: Vec<Option<usize>>,
}

impl DeliveryGrid {
    pub fn state_of(&self, cell: Cell, load: Load) -> Option<usize> {
        if cell.0 >= self.spec.width || cell.1 >= self.spec.height {
            return None;
        }
        self.cell_index[cell.1 * self.spec.width + cell.0].map(|c| c * Load::ALL.len() + load.index())
    }

    pub fn decode(&self, state: usize) -> (Cell, Load) {
        (self.cells[state / Load::ALL.len()], Load::ALL[state % Load::ALL.len()])
    }

    /// Initial state: empty-handed at the drop-off.
    pub fn start_state(&self) -> usize {
        self.state_of(self.spec.dropoff, Load::Empty).expect("dropoff is a free cell")
    }

    /// The pickup a drop-off from `state` delivers, if the agent is loaded.
    pub fn route_of(&self, state: usize) -> Option<Pickup> {
        match self.decode(state).1 {
            Load::FromP1 => Some(Pickup::P1),
            Load::FromP2 => Some(Pickup::P2),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pickup {
    P1,
    P2,
}

impl DeliveryGridSpec {
    fn validate(&self) -> Result<HashSet<Cell>> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGrid("width and height must be positive".into()));
        }
        let walls: HashSet<Cell> = self.walls.iter().copied().collect();
        let named = [
            ("pickup_p1", self.pickup_p1),
            ("pickup_p2", self.pickup_p2),
            ("dropoff", self.dropoff),
            ("trap_junction", self.trap_junction),
            ("alt_junction", self.alt_junction),
        ];
        for (name, cell) in named {
            if cell.0 >= self.width || cell.1 >= self.height {
                return Err(Error::InvalidGrid(format!("{name} {cell:?} is out of bounds")));
            }
            if walls.contains(&cell) {
                return Err(Error::InvalidGrid(format!("{name} {cell:?} is a wall")));
            }
        }
        for i in 0..named.len() {
            for j in i + 1..named.len() {
                if named[i].1 == named[j].1 {
                    return Err(Error::InvalidGrid(format!(
                        "{} and {} share cell {:?}",
                        named[i].0, named[j].0, named[i].1
                    )));
                }
            }
        }
        let rewards = [
            self.junction_trap_reward,
            self.junction_alt_reward,
            self.parcel_reward_p1,
            self.parcel_reward_p2,
            self.step_reward,
        ];
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidGrid("rewards must be finite".into()));
        }
        Ok(walls)
    }
}

/// Compiles the grid into a deterministic tabular MDP over `cell × load`.
///
/// Moving into a wall or off the grid leaves the agent in place. Events fire
/// on the cell the agent lands on: the drop-off pays the parcel reward and
/// empties the load, a pickup loads an empty agent, and a junction pays its
/// bonus to an agent that has not yet collected one this cycle.
pub fn build_delivery_grid(spec: &DeliveryGridSpec) -> Result<DeliveryGrid> {
    let walls = spec.validate()?;
    let mut cells = Vec::new();
    let mut cell_index = vec![None; spec.width * spec.height];
    for y in 0..spec.height {
        for x in 0..spec.width {
            if !walls.contains(&(x, y)) {
                cell_index[y * spec.width + x] = Some(cells.len());
                cells.push((x, y));
            }
        }
    }
    let n_loads = Load::ALL.len();
    let ns = cells.len() * n_loads;
    let na = MOVES.len();
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na];
    let mut marks = vec![false; ns * na];
    let mut labels = Vec::with_capacity(ns);

    for (ci, &(x, y)) in cells.iter().enumerate() {
        for load in Load::ALL {
            let s = ci * n_loads + load.index();
            labels.push(format!("({x},{y})/{}", load.tag()));
            for (a, (dx, dy)) in MOVES.iter().enumerate() {
                let (tx, ty) = (x as i64 + dx, y as i64 + dy);
                let target = if tx < 0 || ty < 0 || tx >= spec.width as i64 || ty >= spec.height as i64 {
                    (x, y)
                } else {
                    let t = (tx as usize, ty as usize);
                    if walls.contains(&t) {
                        (x, y)
                    } else {
                        t
                    }
                };
                let mut r = spec.step_reward;
                let mut next_load = load;
                if target == spec.dropoff && !load.is_empty() {
                    r += match load {
                        Load::FromP1 => spec.parcel_reward_p1,
                        _ => spec.parcel_reward_p2,
                    };
                    next_load = Load::Empty;
                    marks[s * na + a] = true;
                } else if target == spec.pickup_p1 && load.is_empty() {
                    next_load = Load::FromP1;
                } else if target == spec.pickup_p2 && load.is_empty() {
                    next_load = Load::FromP2;
                } else if target == spec.trap_junction && load == Load::Empty {
                    r += spec.junction_trap_reward;
                    next_load = Load::EmptyPastJunction;
                } else if target == spec.alt_junction && load == Load::Empty {
                    r += spec.junction_alt_reward;
                    next_load = Load::EmptyPastJunction;
                }
                let tc = cell_index[target.1 * spec.width + target.0].expect("target is free");
                let next = tc * n_loads + next_load.index();
                transition[(s * na + a) * ns + next] = 1.0;
                reward[s * na + a] = r;
            }
        }
    }

    let mdp = TabularMdp::new(ns, na, transition, reward)?
        .with_labels(labels)?
        .with_cycle_marks(marks)?;
    let uniform = crate::exact::FlatPolicy::uniform(ns, na);
    crate::exact::stationary_distribution(&crate::exact::flat_kernel(&mdp, &uniform)?).map_err(|e| {
        Error::InvalidGrid(format!("compiled grid is not unichain under the uniform policy: {e}"))
    })?;
    Ok(DeliveryGrid {
        spec: spec.clone(),
        mdp,
        cells,
        cell_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_state() -> TabularMdp {
        // s0 -> uniform over {0, 1}; s1 -> s0 deterministically.
        TabularMdp::new(2, 1, vec![0.5, 0.5, 1.0, 0.0], vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(TabularMdp::new(2, 1, vec![0.5, 0.4, 1.0, 0.0], vec![0.0, 0.0]).is_err());
        assert!(TabularMdp::new(2, 1, vec![1.5, -0.5, 1.0, 0.0], vec![0.0, 0.0]).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![f64::NAN]).is_err());
        assert!(TabularMdp::new(0, 1, vec![], vec![]).is_err());
    }

    #[test]
    fn deterministic_row_always_same_successor() {
        let mdp = two_state();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(mdp.step(1, 0, &mut rng).unwrap().next_state, 0);
        }
    }

    #[test]
    fn uniform_row_frequency_within_three_sigma() {
        let mdp = two_state();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1_000_000;
        let hits = (0..n)
            .filter(|_| mdp.step(0, 0, &mut rng).unwrap().next_state == 1)
            .count();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn step_rejects_invalid_ids() {
        let mdp = two_state();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(mdp.step(2, 0, &mut rng).is_err());
        assert!(mdp.step(0, 1, &mut rng).is_err());
    }

    #[test]
    fn trap_chain_structure() {
        let mdp = build_trap_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = mdp.step(TRAP_START, TRAP_RED, &mut rng).unwrap();
        assert_eq!(mdp.label(t.next_state), "S11");
        let t = mdp.step(TRAP_START, TRAP_BLUE, &mut rng).unwrap();
        assert_eq!(mdp.label(t.next_state), "S21");
        assert_eq!(mdp.reward(TrapChainSpec::red_state(1), 0), 2.0);
        assert_eq!(mdp.reward(TrapChainSpec::red_state(2), 1), -1.0);
        assert_eq!(mdp.reward(TrapChainSpec::blue_state(0), 0), 1.0);
        assert!(mdp.is_cycle_mark(TrapChainSpec::red_state(3), TRAP_RED));
        assert!(!mdp.is_cycle_mark(TRAP_START, TRAP_RED));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mdp = TabularMdp::new(
            2,
            1,
            vec![0.1, 0.9, 1.0 / 3.0, 2.0 / 3.0],
            vec![std::f64::consts::PI, -1e-7],
        )
        .unwrap();
        let text = mdp.to_json().unwrap();
        assert!(text.contains("3.3333333333333331e-1"));
        assert_eq!(TabularMdp::from_json(&text).unwrap(), mdp);
        let trap = build_trap_chain();
        assert_eq!(TabularMdp::from_json(&trap.to_json().unwrap()).unwrap(), trap);
    }

    #[test]
    fn delivery_grid_rewards() {
        let grid = build_delivery_grid(&DeliveryGridSpec::default()).unwrap();
        let spec = &grid.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let south = 2;
        let west = 3;

        // Loaded from P2, one step east of the drop-off, moving west onto it.
        let s = grid.state_of((5, 0), Load::FromP2).unwrap();
        let t = grid.mdp.step(s, west, &mut rng).unwrap();
        assert_eq!(t.reward, 100.0);
        assert!(t.cycle_completed);
        assert_eq!(grid.decode(t.next_state), (spec.dropoff, Load::Empty));
        assert_eq!(grid.route_of(s), Some(Pickup::P2));

        // Crossing the blue-green junction from above.
        let s = grid.state_of((3, 3), Load::Empty).unwrap();
        let t = grid.mdp.step(s, south, &mut rng).unwrap();
        assert_eq!(t.reward, 20.0);
        assert_eq!(grid.decode(t.next_state), ((3, 4), Load::EmptyPastJunction));

        // Second crossing in the same cycle pays nothing.
        let s = grid.state_of((3, 3), Load::EmptyPastJunction).unwrap();
        assert_eq!(grid.mdp.step(s, south, &mut rng).unwrap().reward, 0.0);

        // Plain move.
        let s = grid.state_of((0, 0), Load::Empty).unwrap();
        let t = grid.mdp.step(s, south, &mut rng).unwrap();
        assert_eq!(t.reward, 0.0);
        assert!(!t.cycle_completed);

        // Walls and edges block movement.
        let s = grid.state_of((0, 0), Load::Empty).unwrap();
        assert_eq!(grid.mdp.step(s, west, &mut rng).unwrap().next_state, s);
        let s = grid.state_of((0, 3), Load::Empty).unwrap();
        assert_eq!(grid.mdp.step(s, south, &mut rng).unwrap().next_state, s);
    }

    #[test]
    fn delivery_grid_pickup_loads() {
        let grid = build_delivery_grid(&DeliveryGridSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = grid.state_of((2, 6), Load::EmptyPastJunction).unwrap();
        let t = grid.mdp.step(s, 2, &mut rng).unwrap();
        assert_eq!(grid.decode(t.next_state), ((2, 7), Load::FromP1));
    }

    #[test]
    fn delivery_grid_rejects_bad_specs() {
        let d = DeliveryGridSpec::default();
        let spec = DeliveryGridSpec {
            pickup_p1: d.pickup_p2,
            ..d.clone()
        };
        assert!(build_delivery_grid(&spec).is_err());
        let spec = DeliveryGridSpec {
            dropoff: (20, 0),
            ..d
        };
        assert!(build_delivery_grid(&spec).is_err());
        let mut spec = DeliveryGridSpec::default();
        spec.walls.push(spec.dropoff);
        assert!(build_delivery_grid(&spec).is_err());
        // Walling off the red junction seals the P2 quadrant into its own
        // closed class.
        let mut spec = DeliveryGridSpec::default();
        spec.walls.push((6, 4));
        spec.alt_junction = (6, 3);
        assert!(build_delivery_grid(&spec).is_err());
    }

    #[test]
    fn every_built_row_is_stochastic() {
        let grid = build_delivery_grid(&DeliveryGridSpec::default()).unwrap();
        for mdp in [&grid.mdp, &build_trap_chain()] {
            for s in 0..mdp.n_states() {
                for a in 0..mdp.n_actions() {
                    let total: f64 = mdp.row(s, a).iter().sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
