//! DAG-structured MDPs: hypergrids and prepend/append sequence environments.
//!
//! States form a directed acyclic graph rooted at `s0`. Every pre-terminal
//! state owns a distinguished stop action leading to an augmented terminal
//! state that carries the same encoding with a terminal flag set. Objectives
//! are evaluated on terminal states only and are pure functions of the state
//! and the environment seed.

pub mod objectives;

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::fmt;

/// Characters used to print sequence symbols (20 residue letters plus an
/// end-of-sequence token for alphabets of size 21).
pub const SYMBOL_CHARS: &[u8] = b"ACDEFGHIKLMNPQRSTVWY$";

/// Which MDP family an environment belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    HyperGrid,
    CosineGrid,
    SeqPrependAppend,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EnvKind::HyperGrid => "hypergrid",
            EnvKind::CosineGrid => "cosine-grid",
            EnvKind::SeqPrependAppend => "seq-prepend-append",
        };
        f.write_str(s)
    }
}

/// Named closed-form objectives for multi-objective grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NamedObjective {
    Branin,
    Currin,
    Shubert,
    Beale,
}

impl NamedObjective {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "branin" => Ok(NamedObjective::Branin),
            "currin" => Ok(NamedObjective::Currin),
            "shubert" => Ok(NamedObjective::Shubert),
            "beale" => Ok(NamedObjective::Beale),
            other => Err(Error::config(format!("unknown objective name `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NamedObjective::Branin => "branin",
            NamedObjective::Currin => "currin",
            NamedObjective::Shubert => "shubert",
            NamedObjective::Beale => "beale",
        }
    }
}

/// What `u(x)` is for this environment.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveSpec {
    /// Plateau/peak indicator objective on grids, controlled by `R0`.
    GridPlateau,
    /// Cosine-times-Gaussian landscape on grids, offset by `R0`.
    GridCosine,
    /// One or more of the named normalized objectives (grids, D = 2 only).
    Named(Vec<NamedObjective>),
    /// Size-13 multiset objective over 7 symbols (sequences).
    Bag,
    /// Normalized overlapping n-gram counts (sequences).
    NGrams(Vec<String>),
}

/// Full environment description; hashable, immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvDescriptor {
    pub kind: EnvKind,
    /// Grid dimension D (grids only).
    pub grid_dim: usize,
    /// Grid side length H (grids only).
    pub side: usize,
    /// Additive floor R0 for the grid objectives.
    pub r0: f64,
    /// Alphabet size (sequences only).
    pub alphabet: usize,
    /// Generated sequence length l (sequences only).
    pub max_len: usize,
    pub objectives: ObjectiveSpec,
    /// Seed for the frozen stochastic parts of objectives (bag).
    pub seed: u64,
    /// Maximum number of terminal states `enumerate_terminals` will yield.
    pub enum_cap: usize,
}

impl Default for EnvDescriptor {
    fn default() -> Self {
        EnvDescriptor {
            kind: EnvKind::HyperGrid,
            grid_dim: 2,
            side: 8,
            r0: 0.1,
            alphabet: 4,
            max_len: 6,
            objectives: ObjectiveSpec::GridPlateau,
            seed: 0,
            enum_cap: 10_000_000,
        }
    }
}

/// A position in the environment DAG.
///
/// `cells` holds grid coordinates (length D) or sequence symbols (current
/// length). The initial state is all-zero coordinates or the empty sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    pub cells: Vec<u16>,
    pub terminal: bool,
}

impl State {
    pub fn is_terminal(&self) -> bool {
        self.terminal
    }
}

/// An edge label. The meaning of the index depends on the environment:
///
/// - grids, forward: `0..D` increments coordinate d, `D` is the stop action;
/// - grids, backward: `0..D` decrements coordinate d, `D` undoes the stop;
/// - sequences, forward: `0..A` prepends symbol k, `A..2A` appends symbol k,
///   `2A` is the stop action;
/// - sequences, backward: `0` drops the first symbol, `1` drops the last,
///   `2` undoes the stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionId(pub usize);

/// A complete path from `s0` to a terminal state, with the objective of its
/// terminal and the clean-policy log-probability products cached at sampling
/// time.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `s0, s1, ..., s_k, x` with `x` terminal.
    pub states: Vec<State>,
    /// Forward actions, one per transition (the last one is the stop action).
    pub actions: Vec<ActionId>,
    /// Cached `u(x)`.
    pub objective: Vec<f64>,
    /// `sum_t log P_F(a_t | s_t)` under the clean policy at sampling time.
    pub log_pf: f64,
    /// `sum_t log P_B(b_t | s_{t+1})` at sampling time (0 for forced edges).
    pub log_pb: f64,
}

impl Trajectory {
    pub fn terminal(&self) -> &State {
        self.states.last().expect("trajectory has states")
    }

    /// Scalar objective for D = 1 environments.
    pub fn scalar_u(&self) -> f64 {
        self.objective[0]
    }

    /// Replay a forward action sequence from `s0`; the last action must be
    /// the stop action. Log-probability caches are left at zero.
    pub fn from_actions(env: &Env, actions: &[ActionId]) -> Result<Self> {
        let mut states = vec![env.initial_state()];
        for &a in actions {
            let next = env.step(states.last().expect("nonempty"), a)?;
            states.push(next);
        }
        let last = states.last().expect("nonempty");
        if !last.terminal {
            return Err(Error::contract("action sequence does not reach a terminal"));
        }
        let objective = env.objective(last)?;
        Ok(Trajectory {
            states,
            actions: actions.to_vec(),
            objective,
            log_pf: 0.0,
            log_pb: 0.0,
        })
    }
}

/// Componentwise Pareto dominance: `a` is dominated by `b` iff `a <= b`
/// in every coordinate and `a != b`.
pub fn dominated_by(a: &[f64], b: &[f64]) -> bool {
    debug_assert_eq!(a.len(), b.len());
    let mut strict = false;
    for (x, y) in a.iter().zip(b.iter()) {
        if x > y {
            return false;
        }
        if x < y {
            strict = true;
        }
    }
    strict
}

/// Weak dominance `a ⪯ b`: componentwise `<=`.
pub fn weakly_dominated_by(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| x <= y)
}

/// An immutable environment; all operations are pure functions of
/// `(self, inputs)` and safe for concurrent use.
#[derive(Debug, Clone)]
pub struct Env {
    desc: EnvDescriptor,
    gram_symbols: Vec<Vec<u16>>,
}

impl Env {
    pub fn new(desc: EnvDescriptor) -> Result<Self> {
        match desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => {
                if desc.grid_dim == 0 {
                    return Err(Error::config("grid dimension must be positive"));
                }
                if desc.side < 2 {
                    return Err(Error::config("grid side H must be at least 2"));
                }
                if desc.r0 < 0.0 || !desc.r0.is_finite() {
                    return Err(Error::config("R0 must be finite and nonnegative"));
                }
                match (&desc.kind, &desc.objectives) {
                    (EnvKind::HyperGrid, ObjectiveSpec::GridPlateau) => {}
                    (EnvKind::CosineGrid, ObjectiveSpec::GridCosine) => {}
                    (EnvKind::HyperGrid, ObjectiveSpec::Named(names)) => {
                        if desc.grid_dim != 2 {
                            return Err(Error::config(
                                "named grid objectives are defined on 2-dimensional grids",
                            ));
                        }
                        if names.is_empty() {
                            return Err(Error::config("objective list is empty"));
                        }
                    }
                    _ => {
                        return Err(Error::config(format!(
                            "objective spec does not match environment kind {}",
                            desc.kind
                        )))
                    }
                }
            }
            EnvKind::SeqPrependAppend => {
                if desc.alphabet == 0 || desc.alphabet > SYMBOL_CHARS.len() {
                    return Err(Error::config(format!(
                        "alphabet size must be in 1..={}",
                        SYMBOL_CHARS.len()
                    )));
                }
                if desc.max_len == 0 {
                    return Err(Error::config("max length l must be positive"));
                }
                match &desc.objectives {
                    ObjectiveSpec::Bag => {
                        if desc.alphabet != 7 || desc.max_len != 13 {
                            return Err(Error::config(
                                "bag objective requires alphabet 7 and length 13",
                            ));
                        }
                    }
                    ObjectiveSpec::NGrams(grams) => {
                        if grams.is_empty() {
                            return Err(Error::config("n-gram objective list is empty"));
                        }
                        for g in grams {
                            if g.is_empty() {
                                return Err(Error::config("empty gram"));
                            }
                            if g.len() > desc.max_len {
                                return Err(Error::config(format!(
                                    "gram `{g}` is longer than the sequence length"
                                )));
                            }
                        }
                    }
                    _ => {
                        return Err(Error::config(
                            "sequence environments take bag or n-gram objectives",
                        ))
                    }
                }
            }
        }

        let gram_symbols = match &desc.objectives {
            ObjectiveSpec::NGrams(grams) => {
                let mut out = Vec::with_capacity(grams.len());
                for g in grams {
                    out.push(parse_symbols(g, desc.alphabet)?);
                }
                out
            }
            _ => Vec::new(),
        };

        Ok(Env { desc, gram_symbols })
    }

    pub fn descriptor(&self) -> &EnvDescriptor {
        &self.desc
    }

    pub fn is_grid(&self) -> bool {
        matches!(self.desc.kind, EnvKind::HyperGrid | EnvKind::CosineGrid)
    }

    /// Number of objective components D.
    pub fn objective_dim(&self) -> usize {
        match &self.desc.objectives {
            ObjectiveSpec::GridPlateau | ObjectiveSpec::GridCosine | ObjectiveSpec::Bag => 1,
            ObjectiveSpec::Named(names) => names.len(),
            ObjectiveSpec::NGrams(grams) => grams.len(),
        }
    }

    /// A stable content hash of the descriptor, used to match checkpoints
    /// against configurations.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_string().as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(16);
        for b in digest.iter().take(8) {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    fn canonical_string(&self) -> String {
        let d = &self.desc;
        let obj = match &d.objectives {
            ObjectiveSpec::GridPlateau => "plateau".to_string(),
            ObjectiveSpec::GridCosine => "cosine".to_string(),
            ObjectiveSpec::Named(ns) => ns.iter().map(|n| n.name()).collect::<Vec<_>>().join("+"),
            ObjectiveSpec::Bag => "bag".to_string(),
            ObjectiveSpec::NGrams(gs) => format!("ngram:{}", gs.join("+")),
        };
        format!(
            "kind={};dim={};side={};r0={};alphabet={};len={};obj={};seed={}",
            d.kind, d.grid_dim, d.side, d.r0, d.alphabet, d.max_len, obj, d.seed
        )
    }

    // ---- DAG structure ------------------------------------------------

    pub fn initial_state(&self) -> State {
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => State {
                cells: vec![0; self.desc.grid_dim],
                terminal: false,
            },
            EnvKind::SeqPrependAppend => State {
                cells: Vec::new(),
                terminal: false,
            },
        }
    }

    pub fn is_initial(&self, s: &State) -> bool {
        !s.terminal
            && match self.desc.kind {
                EnvKind::HyperGrid | EnvKind::CosineGrid => s.cells.iter().all(|&c| c == 0),
                EnvKind::SeqPrependAppend => s.cells.is_empty(),
            }
    }

    /// Stop action index for this environment.
    pub fn stop_action(&self) -> ActionId {
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => ActionId(self.desc.grid_dim),
            EnvKind::SeqPrependAppend => ActionId(2 * self.desc.alphabet),
        }
    }

    /// Width of the forward policy head: one logit per possible forward
    /// action including stop.
    pub fn forward_width(&self) -> usize {
        self.stop_action().0 + 1
    }

    /// Width of the backward policy head. The forced undo-stop edge out of a
    /// terminal state is not parametrized.
    pub fn backward_width(&self) -> usize {
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => self.desc.grid_dim,
            EnvKind::SeqPrependAppend => 2,
        }
    }

    /// Legal forward actions from a non-terminal state, in action-index order.
    pub fn forward_actions(&self, s: &State) -> Result<Vec<ActionId>> {
        if s.terminal {
            return Err(Error::contract(
                "forward_actions called on a terminal state",
            ));
        }
        let mut out = Vec::new();
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => {
                let h = self.desc.side as u16;
                for (d, &c) in s.cells.iter().enumerate() {
                    if c + 1 < h {
                        out.push(ActionId(d));
                    }
                }
                out.push(self.stop_action());
            }
            EnvKind::SeqPrependAppend => {
                let a = self.desc.alphabet;
                let len = s.cells.len();
                if len == self.desc.max_len {
                    out.push(self.stop_action());
                } else {
                    // The empty state exposes only append actions: prepending
                    // to the empty sequence would duplicate the same edge.
                    if len > 0 {
                        for k in 0..a {
                            out.push(ActionId(k));
                        }
                    }
                    for k in 0..a {
                        out.push(ActionId(a + k));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Legal backward actions into a non-initial state, in action-index order.
    pub fn backward_actions(&self, s: &State) -> Result<Vec<ActionId>> {
        if self.is_initial(s) {
            return Err(Error::contract(
                "backward_actions called on the initial state",
            ));
        }
        let mut out = Vec::new();
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => {
                if s.terminal {
                    out.push(ActionId(self.desc.grid_dim));
                } else {
                    for (d, &c) in s.cells.iter().enumerate() {
                        if c > 0 {
                            out.push(ActionId(d));
                        }
                    }
                }
            }
            EnvKind::SeqPrependAppend => {
                if s.terminal {
                    out.push(ActionId(2));
                } else {
                    // Length-1 states expose only drop-last, mirroring the
                    // append-only action set at the empty state.
                    if s.cells.len() >= 2 {
                        out.push(ActionId(0));
                    }
                    out.push(ActionId(1));
                }
            }
        }
        Ok(out)
    }

    /// Legality mask over the forward head indices `0..forward_width()`.
    pub fn forward_mask(&self, s: &State) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.forward_width()];
        for a in self.forward_actions(s)? {
            mask[a.0] = true;
        }
        Ok(mask)
    }

    /// Legality mask over the backward head indices `0..backward_width()`.
    /// Only parametrized edges appear; forced undo-stop edges do not.
    pub fn backward_mask(&self, s: &State) -> Result<Vec<bool>> {
        if s.terminal {
            return Err(Error::contract(
                "backward mask of a terminal state is not parametrized",
            ));
        }
        let mut mask = vec![false; self.backward_width()];
        for a in self.backward_actions(s)? {
            mask[a.0] = true;
        }
        Ok(mask)
    }

    pub fn step(&self, s: &State, a: ActionId) -> Result<State> {
        let legal = self.forward_actions(s)?;
        if !legal.contains(&a) {
            return Err(Error::contract(format!(
                "illegal forward action {} at {}",
                a.0,
                self.encode_state(s)
            )));
        }
        let mut next = s.clone();
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => {
                if a == self.stop_action() {
                    next.terminal = true;
                } else {
                    next.cells[a.0] += 1;
                }
            }
            EnvKind::SeqPrependAppend => {
                let alpha = self.desc.alphabet;
                if a == self.stop_action() {
                    next.terminal = true;
                } else if a.0 < alpha {
                    next.cells.insert(0, a.0 as u16);
                } else {
                    next.cells.push((a.0 - alpha) as u16);
                }
            }
        }
        Ok(next)
    }

    pub fn unstep(&self, s: &State, a: ActionId) -> Result<State> {
        let legal = self.backward_actions(s)?;
        if !legal.contains(&a) {
            return Err(Error::contract(format!(
                "illegal backward action {} at {}",
                a.0,
                self.encode_state(s)
            )));
        }
        let mut prev = s.clone();
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => {
                if s.terminal {
                    prev.terminal = false;
                } else {
                    prev.cells[a.0] -= 1;
                }
            }
            EnvKind::SeqPrependAppend => {
                if s.terminal {
                    prev.terminal = false;
                } else if a.0 == 0 {
                    prev.cells.remove(0);
                } else {
                    prev.cells.pop();
                }
            }
        }
        Ok(prev)
    }

    /// The forward action that realizes the edge undone by backward action
    /// `b` at `s`, so that `step(unstep(s, b), mirror) == s`.
    pub fn mirror_forward(&self, s: &State, b: ActionId) -> Result<ActionId> {
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => {
                if s.terminal {
                    Ok(self.stop_action())
                } else {
                    Ok(b)
                }
            }
            EnvKind::SeqPrependAppend => {
                if s.terminal {
                    Ok(self.stop_action())
                } else if b.0 == 0 {
                    Ok(ActionId(s.cells[0] as usize))
                } else {
                    let last = *s.cells.last().ok_or_else(|| {
                        Error::contract("mirror_forward on the empty sequence")
                    })?;
                    Ok(ActionId(self.desc.alphabet + last as usize))
                }
            }
        }
    }

    /// Upper bound on the number of actions in any complete trajectory.
    pub fn max_trajectory_len(&self) -> usize {
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => {
                self.desc.grid_dim * (self.desc.side - 1) + 1
            }
            EnvKind::SeqPrependAppend => self.desc.max_len + 1,
        }
    }

    // ---- Objectives ----------------------------------------------------

    /// Evaluate `u(x)` on a terminal state.
    pub fn objective(&self, x: &State) -> Result<Vec<f64>> {
        if !x.terminal {
            return Err(Error::contract("objective evaluated on a non-terminal state"));
        }
        let d = &self.desc;
        match &d.objectives {
            ObjectiveSpec::GridPlateau => {
                let xs = self.unit_coords(x);
                Ok(vec![objectives::grid_plateau(&xs, d.r0)])
            }
            ObjectiveSpec::GridCosine => {
                let xs = self.unit_coords(x);
                Ok(vec![objectives::grid_cosine(&xs, d.r0)])
            }
            ObjectiveSpec::Named(names) => {
                let xs = self.unit_coords(x);
                names
                    .iter()
                    .map(|n| objectives::named(*n, xs[0], xs[1]))
                    .collect::<Result<Vec<f64>>>()
            }
            ObjectiveSpec::Bag => {
                Ok(vec![objectives::bag(&x.cells, d.seed)?])
            }
            ObjectiveSpec::NGrams(_) => Ok(self
                .gram_symbols
                .iter()
                .map(|g| objectives::ngram(&x.cells, g, d.max_len))
                .collect()),
        }
    }

    /// Map integer grid coordinates to `[0, 1]` via `s^d / (H - 1)`.
    pub fn unit_coords(&self, s: &State) -> Vec<f64> {
        let denom = (self.desc.side - 1) as f64;
        s.cells.iter().map(|&c| c as f64 / denom).collect()
    }

    // ---- Enumeration ----------------------------------------------------

    /// Total number of terminal states, when it fits in a u128.
    pub fn terminal_count(&self) -> Option<u128> {
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => {
                (self.desc.side as u128).checked_pow(self.desc.grid_dim as u32)
            }
            EnvKind::SeqPrependAppend => {
                (self.desc.alphabet as u128).checked_pow(self.desc.max_len as u32)
            }
        }
    }

    pub fn is_enumerable(&self) -> bool {
        matches!(self.terminal_count(), Some(n) if n <= self.desc.enum_cap as u128)
    }

    /// All terminal states, each exactly once.
    pub fn enumerate_terminals(&self) -> Result<Vec<State>> {
        let count = self.terminal_count().unwrap_or(u128::MAX);
        if count > self.desc.enum_cap as u128 {
            return Err(Error::capability(format!(
                "state space has {count} terminals, above the enumeration cap {}; \
                 use sampling-based evaluation",
                self.desc.enum_cap
            )));
        }
        let mut out = Vec::with_capacity(count as usize);
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => {
                let d = self.desc.grid_dim;
                let h = self.desc.side as u16;
                let mut cells = vec![0u16; d];
                loop {
                    out.push(State {
                        cells: cells.clone(),
                        terminal: true,
                    });
                    let mut i = 0;
                    loop {
                        if i == d {
                            return Ok(out);
                        }
                        cells[i] += 1;
                        if cells[i] < h {
                            break;
                        }
                        cells[i] = 0;
                        i += 1;
                    }
                }
            }
            EnvKind::SeqPrependAppend => {
                let a = self.desc.alphabet as u16;
                let l = self.desc.max_len;
                let mut cells = vec![0u16; l];
                loop {
                    out.push(State {
                        cells: cells.clone(),
                        terminal: true,
                    });
                    let mut i = 0;
                    loop {
                        if i == l {
                            return Ok(out);
                        }
                        cells[i] += 1;
                        if cells[i] < a {
                            break;
                        }
                        cells[i] = 0;
                        i += 1;
                    }
                }
            }
        }
    }

    // ---- Tabular indexing ------------------------------------------------

    /// Number of distinct states (interior and terminal) for tabular models.
    pub fn state_count(&self) -> Result<usize> {
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => {
                let n = (self.desc.side as u128)
                    .checked_pow(self.desc.grid_dim as u32)
                    .filter(|&n| 2 * n <= self.desc.enum_cap as u128)
                    .ok_or_else(|| {
                        Error::capability("grid too large for a tabular parametrization")
                    })?;
                Ok(2 * n as usize)
            }
            EnvKind::SeqPrependAppend => {
                let a = self.desc.alphabet as u128;
                let mut interior = 0u128;
                let mut pow = 1u128;
                for _ in 0..=self.desc.max_len {
                    interior += pow;
                    pow = pow.checked_mul(a).ok_or_else(|| {
                        Error::capability("sequence space too large for a tabular parametrization")
                    })?;
                }
                let total = interior + a.pow(self.desc.max_len as u32);
                if total > self.desc.enum_cap as u128 {
                    return Err(Error::capability(
                        "sequence space too large for a tabular parametrization",
                    ));
                }
                Ok(total as usize)
            }
        }
    }

    /// Dense index of a state into `0..state_count()`.
    pub fn state_index(&self, s: &State) -> usize {
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => {
                let h = self.desc.side;
                let mut idx = 0usize;
                for &c in s.cells.iter().rev() {
                    idx = idx * h + c as usize;
                }
                if s.terminal {
                    idx += h.pow(self.desc.grid_dim as u32);
                }
                idx
            }
            EnvKind::SeqPrependAppend => {
                let a = self.desc.alphabet;
                // offset of the length block: sum_{j < len} a^j
                let mut offset = 0usize;
                let mut pow = 1usize;
                for _ in 0..s.cells.len() {
                    offset += pow;
                    pow *= a;
                }
                let mut idx = 0usize;
                for &c in &s.cells {
                    idx = idx * a + c as usize;
                }
                let base = if s.terminal {
                    let mut interior = 0usize;
                    let mut p = 1usize;
                    for _ in 0..=self.desc.max_len {
                        interior += p;
                        p *= a;
                    }
                    interior
                } else {
                    offset
                };
                base + idx
            }
        }
    }

    // ---- Encoding ---------------------------------------------------------

    /// Human-readable stable encoding, used in visit logs.
    pub fn encode_state(&self, s: &State) -> String {
        match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => s
                .cells
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            EnvKind::SeqPrependAppend => {
                if s.cells.is_empty() {
                    "-".to_string()
                } else {
                    s.cells
                        .iter()
                        .map(|&c| SYMBOL_CHARS[c as usize] as char)
                        .collect()
                }
            }
        }
    }

    /// Parse a terminal state back from its `encode_state` form.
    pub fn parse_terminal(&self, text: &str) -> Result<State> {
        let cells = match self.desc.kind {
            EnvKind::HyperGrid | EnvKind::CosineGrid => {
                let mut cells = Vec::new();
                for part in text.split(',') {
                    let c: u16 = part
                        .trim()
                        .parse()
                        .map_err(|_| Error::contract(format!("bad state encoding `{text}`")))?;
                    if c as usize >= self.desc.side {
                        return Err(Error::contract(format!("coordinate out of range in `{text}`")));
                    }
                    cells.push(c);
                }
                if cells.len() != self.desc.grid_dim {
                    return Err(Error::contract(format!("bad coordinate count in `{text}`")));
                }
                cells
            }
            EnvKind::SeqPrependAppend => {
                let mut cells = Vec::new();
                for ch in text.bytes() {
                    let sym = SYMBOL_CHARS[..self.desc.alphabet]
                        .iter()
                        .position(|&c| c == ch)
                        .ok_or_else(|| {
                            Error::contract(format!("symbol `{}` not in alphabet", ch as char))
                        })?;
                    cells.push(sym as u16);
                }
                if cells.len() != self.desc.max_len {
                    return Err(Error::contract(format!(
                        "terminal sequence must have length {}",
                        self.desc.max_len
                    )));
                }
                cells
            }
        };
        Ok(State {
            cells,
            terminal: true,
        })
    }
}

fn parse_symbols(gram: &str, alphabet: usize) -> Result<Vec<u16>> {
    let mut out = Vec::with_capacity(gram.len());
    for ch in gram.bytes() {
        let sym = SYMBOL_CHARS[..alphabet]
            .iter()
            .position(|&c| c == ch)
            .ok_or_else(|| {
                Error::config(format!(
                    "gram symbol `{}` is outside the configured alphabet",
                    ch as char
                ))
            })?;
        out.push(sym as u16);
    }
    Ok(out)
}
