//! Training criteria: the order-preserving loss in batch and pairwise form,
//! the FM/DB/TB/subTB balance losses, backward-KL regularization, and their
//! composition.
//!
//! All probability arithmetic is done in the log domain; learned rewards are
//! represented only by their logarithm. Losses are evaluated on clean
//! policies: sampling-time exploration and temperature never enter here.

mod balance;
mod op;

pub use balance::{db_transition_loss, fm_state_loss, kl_reg, subtb_loss, tb_loss, tb_residual};
pub use op::{op_loss_pareto, op_loss_pairwise, reward_tb, scalarize_preference};

use crate::autodiff::{FlowModel, Heads, NodeId, Tape};
use crate::env::{dominated_by, Env, State, Trajectory};
use crate::error::{Error, Result};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Fm,
    Db,
    Tb,
    SubTb,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fm" => Ok(LossKind::Fm),
            "db" => Ok(LossKind::Db),
            "tb" => Ok(LossKind::Tb),
            "subtb" => Ok(LossKind::SubTb),
            other => Err(Error::config(format!("unknown loss kind `{other}`"))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Fm => "fm",
            LossKind::Db => "db",
            LossKind::Tb => "tb",
            LossKind::SubTb => "subtb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbMode {
    UniformFixed,
    Trainable,
    TrainableKl,
}

impl PbMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PbMode::UniformFixed),
            "trainable" => Ok(PbMode::Trainable),
            "trainable-kl" => Ok(PbMode::TrainableKl),
            other => Err(Error::config(format!("unknown P_B mode `{other}`"))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            PbMode::UniformFixed => "uniform",
            PbMode::Trainable => "trainable",
            PbMode::TrainableKl => "trainable-kl",
        }
    }
    pub fn trainable(&self) -> bool {
        !matches!(self, PbMode::UniformFixed)
    }
}

/// How terminal pairs are formed for the single-objective order-preserving
/// loss; multi-objective batches always use the Pareto-batch form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    Auto,
    SortedNeighbors,
    AllPairs,
    ParetoBatch,
}

impl Pairing {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Pairing::Auto),
            "sorted-neighbors" => Ok(Pairing::SortedNeighbors),
            "all-pairs" => Ok(Pairing::AllPairs),
            "pareto-batch" => Ok(Pairing::ParetoBatch),
            other => Err(Error::config(format!("unknown pairing scheme `{other}`"))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            Pairing::Auto => "auto",
            Pairing::SortedNeighbors => "sorted-neighbors",
            Pairing::AllPairs => "all-pairs",
            Pairing::ParetoBatch => "pareto-batch",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub kind: LossKind,
    pub order_preserving: bool,
    pub lambda_op: f64,
    pub lambda_kl: f64,
    pub lambda_subtb: f64,
    /// Reward exponent for predefined-reward baselines.
    pub beta: f64,
    pub pb: PbMode,
    pub pairing: Pairing,
    /// Forward exploration mixing at sampling time only.
    pub epsilon: f64,
    /// Sampling temperature dividing forward logits at sampling time only.
    pub temperature: f64,
    /// Preference weights for the linear-scalarization baseline (D > 1, OP off).
    pub preference: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Tb,
            order_preserving: true,
            lambda_op: 1.0,
            lambda_kl: 0.0,
            lambda_subtb: 0.9,
            beta: 1.0,
            pb: PbMode::UniformFixed,
            pairing: Pairing::Auto,
            epsilon: 0.0,
            temperature: 1.0,
            preference: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, env: &Env) -> Result<()> {
        let d = env.objective_dim();
        if self.lambda_op < 0.0 || self.lambda_kl < 0.0 {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        if !(self.lambda_subtb > 0.0 && self.lambda_subtb <= 1.0) {
            return Err(Error::config("lambda_subtb must lie in (0, 1]"));
        }
        if self.beta < 1.0 {
            return Err(Error::config("reward exponent beta must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config("exploration epsilon must lie in [0, 1)"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("sampling temperature must be positive"));
        }
        if self.order_preserving
            && d > 1
            && matches!(self.pairing, Pairing::SortedNeighbors | Pairing::AllPairs)
        {
            return Err(Error::config(
                "pairwise order-preserving losses require a single objective; \
                 use pareto-batch pairing for D > 1",
            ));
        }
        if !self.order_preserving && d > 1 {
            let w = self.preference.as_ref().ok_or_else(|| {
                Error::config(
                    "training on a predefined reward with D > 1 requires loss.preference",
                )
            })?;
            if w.len() != d {
                return Err(Error::config(format!(
                    "preference has {} weights for {d} objectives",
                    w.len()
                )));
            }
            check_simplex(w)?;
        }
        if matches!(self.kind, LossKind::Fm) && self.pb.trainable() {
            return Err(Error::config(
                "flow matching does not parametrize P_B; use pb = uniform",
            ));
        }
        if matches!(self.pb, PbMode::TrainableKl) && self.lambda_kl <= 0.0 {
            return Err(Error::config("pb = trainable-kl requires lambda_kl > 0"));
        }
        Ok(())
    }

    /// Pairing scheme after resolving `auto` by objective dimension.
    pub fn resolved_pairing(&self, objective_dim: usize) -> Pairing {
        match self.pairing {
            Pairing::Auto if objective_dim == 1 => Pairing::SortedNeighbors,
            Pairing::Auto => Pairing::ParetoBatch,
            p => p,
        }
    }

    /// `log R(x)` for predefined-reward training: `beta * log u` for a single
    /// objective, `beta * log(w^T u)` under a preference scalarization.
    pub fn log_reward_target(&self, u: &[f64]) -> Result<f64> {
        let base = if u.len() == 1 {
            u[0]
        } else {
            let w = self
                .preference
                .as_ref()
                .ok_or_else(|| Error::config("missing preference for scalarized reward"))?;
            scalarize_preference(u, w)?
        };
        if !(base > 0.0) {
            return Err(Error::contract(format!(
                "predefined reward must be positive for log-domain training, got {base}"
            )));
        }
        Ok(self.beta * base.ln())
    }
}

pub(crate) fn check_simplex(w: &[f64]) -> Result<()> {
    if w.iter().any(|&v| v < 0.0) {
        return Err(Error::contract("preference weights must be nonnegative"));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "preference weights must sum to 1, got {sum}"
        )));
    }
    Ok(())
}

/// Per-batch evaluation context: caches head evaluations and masked
/// log-softmax nodes so repeated states are recorded once per tape.
pub struct LossContext<'a> {
    pub env: &'a Env,
    pub model: &'a FlowModel,
    pub cfg: &'a LossConfig,
    heads: HashMap<State, Heads>,
    pf_logprobs: HashMap<State, NodeId>,
    pb_logprobs: HashMap<State, NodeId>,
}

impl<'a> LossContext<'a> {
    pub fn new(env: &'a Env, model: &'a FlowModel, cfg: &'a LossConfig) -> Self {
        LossContext {
            env,
            model,
            cfg,
            heads: HashMap::new(),
            pf_logprobs: HashMap::new(),
            pb_logprobs: HashMap::new(),
        }
    }

    pub fn heads(&mut self, tape: &mut Tape, s: &State) -> Heads {
        if let Some(h) = self.heads.get(s) {
            return *h;
        }
        let h = self.model.heads_tape(tape, self.env, s);
        self.heads.insert(s.clone(), h);
        h
    }

    /// Forward log-probability vector at a non-terminal state.
    pub fn pf_logprobs(&mut self, tape: &mut Tape, s: &State) -> Result<NodeId> {
        if let Some(&id) = self.pf_logprobs.get(s) {
            return Ok(id);
        }
        let heads = self.heads(tape, s);
        let mask = self.env.forward_mask(s)?;
        let id = tape.masked_log_softmax(heads.pf, &mask);
        self.pf_logprobs.insert(s.clone(), id);
        Ok(id)
    }

    /// Backward log-probability vector at a non-initial interior state.
    pub fn pb_logprobs(&mut self, tape: &mut Tape, s: &State) -> Result<NodeId> {
        if let Some(&id) = self.pb_logprobs.get(s) {
            return Ok(id);
        }
        let heads = self.heads(tape, s);
        let mask = self.env.backward_mask(s)?;
        let id = tape.masked_log_softmax(heads.pb, &mask);
        self.pb_logprobs.insert(s.clone(), id);
        Ok(id)
    }

    /// `log P_F(a | s)` as a scalar node.
    pub fn log_pf_edge(&mut self, tape: &mut Tape, s: &State, a: crate::env::ActionId) -> Result<NodeId> {
        let lp = self.pf_logprobs(tape, s)?;
        Ok(tape.index(lp, a.0))
    }

    /// `log P_B(b | s)` for the backward action `b` undoing the edge into `s`.
    /// Returns `None` for forced edges (the undo of a stop action) and for
    /// states with a single legal backward action under a uniform fixed P_B.
    pub fn log_pb_edge(
        &mut self,
        tape: &mut Tape,
        s: &State,
        b: crate::env::ActionId,
    ) -> Result<Option<NodeId>> {
        if s.terminal {
            return Ok(None); // undo-stop has probability 1
        }
        if self.cfg.pb.trainable() {
            let lp = self.pb_logprobs(tape, s)?;
            Ok(Some(tape.index(lp, b.0)))
        } else {
            let n = self.env.backward_actions(s)?.len();
            if n == 1 {
                return Ok(None);
            }
            Ok(Some(tape.scalar_const(-(n as f64).ln())))
        }
    }

    /// Log of the learned reward of a trajectory's terminal under the
    /// configured parametrization: the trajectory ratio for TB, the terminal
    /// state flow for DB/subTB, and the inflow (the stop-edge flow) for FM.
    pub fn log_learned_reward(&mut self, tape: &mut Tape, traj: &Trajectory) -> Result<NodeId> {
        match self.cfg.kind {
            LossKind::Tb => reward_tb(tape, self, traj),
            LossKind::Db | LossKind::SubTb => {
                let x = traj.terminal().clone();
                Ok(self.heads(tape, &x).flow)
            }
            LossKind::Fm => {
                let x = traj.terminal().clone();
                self.log_inflow(tape, &x)
            }
        }
    }

    /// `log sum_{s'' -> s} F(s'' -> s)` over all in-edges of `s`, with edge
    /// flows read from the parents' forward heads (FM parametrization).
    pub fn log_inflow(&mut self, tape: &mut Tape, s: &State) -> Result<NodeId> {
        let mut edges = Vec::new();
        for b in self.env.backward_actions(s)? {
            let parent = self.env.unstep(s, b)?;
            let a = self.env.mirror_forward(s, b)?;
            let heads = self.heads(tape, &parent);
            edges.push(tape.index(heads.pf, a.0));
        }
        Ok(tape.log_sum_exp(&edges))
    }

    /// `log sum_{s -> s'} F(s -> s')` over all out-edges of `s`.
    pub fn log_outflow(&mut self, tape: &mut Tape, s: &State) -> Result<NodeId> {
        let heads = self.heads(tape, s);
        let mask = self.env.forward_mask(s)?;
        Ok(tape.masked_log_sum_exp(heads.pf, &mask))
    }
}

/// Pareto membership bits for a batch of objective vectors; identical
/// vectors are all retained.
pub fn pareto_membership(us: &[Vec<f64>]) -> Vec<bool> {
    us.iter()
        .map(|u| !us.iter().any(|v| dominated_by(u, v)))
        .collect()
}

/// Per-trajectory MDP constraint loss for the configured balance condition.
/// `terminal_logr` is `Some(log R)` when training against a predefined
/// reward and `None` when the terminal flow itself is the learned reward.
pub fn mdp_loss(
    tape: &mut Tape,
    ctx: &mut LossContext,
    traj: &Trajectory,
    terminal_logr: Option<f64>,
) -> Result<NodeId> {
    match ctx.cfg.kind {
        LossKind::Tb => {
            let target = terminal_logr.ok_or_else(|| {
                Error::contract("trajectory balance requires a terminal log-reward target")
            })?;
            tb_loss(tape, ctx, traj, target)
        }
        LossKind::Db => {
            let mut terms = Vec::new();
            for t in 0..traj.actions.len() {
                terms.push(db_transition_loss(
                    tape,
                    ctx,
                    &traj.states[t],
                    traj.actions[t],
                    &traj.states[t + 1],
                    terminal_logr,
                )?);
            }
            Ok(tape.sum(&terms))
        }
        LossKind::Fm => {
            let mut terms = Vec::new();
            // interior states: in-flow equals out-flow
            for s in &traj.states[1..traj.states.len() - 1] {
                terms.push(fm_state_loss(tape, ctx, s)?);
            }
            // terminal state: in-flow matches the predefined reward
            if let Some(logr) = terminal_logr {
                let inflow = ctx.log_inflow(tape, traj.terminal())?;
                let target = tape.scalar_const(logr);
                let r = tape.sub(inflow, target);
                terms.push(tape.square(r));
            }
            if terms.is_empty() {
                return Ok(tape.scalar_const(0.0));
            }
            Ok(tape.sum(&terms))
        }
        LossKind::SubTb => subtb_loss(tape, ctx, traj, ctx.cfg.lambda_subtb, terminal_logr),
    }
}

/// The full training loss on a batch of trajectories.
///
/// - TB with the order-preserving criterion: the OP loss on the TB-induced
///   learned rewards (the MDP constraint is identically satisfied).
/// - Non-TB with OP: mean MDP constraint loss plus `lambda_op` times the OP
///   loss on terminal state flows.
/// - OP off: mean MDP loss against `log R(x) = beta * log u(x)` (or the
///   preference scalarization).
/// - Plus `lambda_kl` times the backward-KL regularizer when enabled.
pub fn composite_loss(
    tape: &mut Tape,
    env: &Env,
    model: &FlowModel,
    cfg: &LossConfig,
    batch: &[Trajectory],
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::contract("composite loss on an empty batch"));
    }
    cfg.validate(env)?;
    let mut ctx = LossContext::new(env, model, cfg);
    let d = env.objective_dim();

    let mut total = if cfg.order_preserving {
        let entries: Vec<(Vec<f64>, NodeId)> = batch
            .iter()
            .map(|t| {
                let logr = ctx.log_learned_reward(tape, t)?;
                Ok((t.objective.clone(), logr))
            })
            .collect::<Result<_>>()?;

        let op = match cfg.resolved_pairing(d) {
            Pairing::ParetoBatch => op_loss_pareto(tape, &entries)?,
            scheme => {
                let mut pairs = Vec::new();
                match scheme {
                    Pairing::SortedNeighbors => {
                        let mut idx: Vec<usize> = (0..entries.len()).collect();
                        idx.sort_by(|&i, &j| {
                            entries[i].0[0]
                                .partial_cmp(&entries[j].0[0])
                                .expect("finite objectives")
                        });
                        for w in idx.windows(2) {
                            let (i, j) = (w[0], w[1]);
                            pairs.push((
                                entries[i].0[0],
                                entries[i].1,
                                entries[j].0[0],
                                entries[j].1,
                            ));
                        }
                    }
                    Pairing::AllPairs => {
                        for i in 0..entries.len() {
                            for j in (i + 1)..entries.len() {
                                pairs.push((
                                    entries[i].0[0],
                                    entries[i].1,
                                    entries[j].0[0],
                                    entries[j].1,
                                ));
                            }
                        }
                    }
                    _ => unreachable!("auto resolved above"),
                }
                if pairs.is_empty() {
                    return Err(Error::contract(
                        "order-preserving loss needs a batch of at least 2 trajectories",
                    ));
                }
                let sum = op_loss_pairwise(tape, &pairs);
                // sum per pair, averaged over batch pairs for scale stability
                tape.scale(sum, 1.0 / pairs.len() as f64)
            }
        };

        if matches!(cfg.kind, LossKind::Tb) {
            op
        } else {
            let per_traj: Vec<NodeId> = batch
                .iter()
                .map(|t| mdp_loss(tape, &mut ctx, t, None))
                .collect::<Result<_>>()?;
            let mdp = tape.mean(&per_traj);
            let op_scaled = tape.scale(op, cfg.lambda_op);
            tape.add(mdp, op_scaled)
        }
    } else {
        let per_traj: Vec<NodeId> = batch
            .iter()
            .map(|t| {
                let target = cfg.log_reward_target(&t.objective)?;
                mdp_loss(tape, &mut ctx, t, Some(target))
            })
            .collect::<Result<_>>()?;
        tape.mean(&per_traj)
    };

    if matches!(cfg.pb, PbMode::TrainableKl) {
        let per_traj: Vec<NodeId> = batch
            .iter()
            .map(|t| kl_reg(tape, &mut ctx, t))
            .collect::<Result<_>>()?;
        let kl = tape.mean(&per_traj);
        let kl_scaled = tape.scale(kl, cfg.lambda_kl);
        total = tape.add(total, kl_scaled);
    }
    Ok(total)
}

/// Evaluate the composite loss without keeping the tape.
pub fn composite_value(
    env: &Env,
    model: &FlowModel,
    cfg: &LossConfig,
    batch: &[Trajectory],
) -> Result<f64> {
    let mut tape = Tape::new(&model.params);
    let loss = composite_loss(&mut tape, env, model, cfg, batch)?;
    Ok(tape.scalar(loss))
}

/// Evaluate the composite loss and its gradient with respect to every
/// parameter in the store.
pub fn composite_value_and_grad(
    env: &Env,
    model: &FlowModel,
    cfg: &LossConfig,
    batch: &[Trajectory],
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new(&model.params);
    let loss = composite_loss(&mut tape, env, model, cfg, batch)?;
    let value = tape.scalar(loss);
    let grad = tape.backward(loss)?;
    Ok((value, grad))
}

#[cfg(test)]
mod tests;
