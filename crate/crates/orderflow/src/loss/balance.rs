//! Balance (MDP constraint) losses and the backward-KL regularizer.

use super::op::backward_of_edge;
use super::LossContext;
use crate::autodiff::{NodeId, Tape};
use crate::env::{State, Trajectory};
use crate::error::{Error, Result};

/// Trajectory-balance residual
/// `log Z + sum log P_F - log R(x) - sum log P_B` as a tape node.
pub fn tb_residual(
    tape: &mut Tape,
    ctx: &mut LossContext,
    traj: &Trajectory,
    logr_target: f64,
) -> Result<NodeId> {
    if !logr_target.is_finite() {
        return Err(Error::contract("terminal log-reward target must be finite"));
    }
    let mut nodes = vec![ctx.model.log_z_node(tape)];
    let mut weights = vec![1.0];
    for t in 0..traj.actions.len() {
        let pf = ctx.log_pf_edge(tape, &traj.states[t], traj.actions[t])?;
        nodes.push(pf);
        weights.push(1.0);
        let next = &traj.states[t + 1];
        let b = backward_of_edge(ctx, next, t, traj)?;
        if let Some(pb) = ctx.log_pb_edge(tape, next, b)? {
            nodes.push(pb);
            weights.push(-1.0);
        }
    }
    let s = tape.weighted_sum(&nodes, &weights);
    Ok(tape.add_const(s, -logr_target))
}

/// Squared trajectory-balance residual.
pub fn tb_loss(
    tape: &mut Tape,
    ctx: &mut LossContext,
    traj: &Trajectory,
    logr_target: f64,
) -> Result<NodeId> {
    let r = tb_residual(tape, ctx, traj, logr_target)?;
    Ok(tape.square(r))
}

/// Squared detailed-balance residual of one transition,
/// `(log F(s) + log P_F(s'|s) - log F(s') - log P_B(s|s'))^2`.
/// For the stop transition the child flow is the predefined reward when
/// `terminal_logr` is given, and the learned terminal flow otherwise.
pub fn db_transition_loss(
    tape: &mut Tape,
    ctx: &mut LossContext,
    s: &State,
    a: crate::env::ActionId,
    next: &State,
    terminal_logr: Option<f64>,
) -> Result<NodeId> {
    let flow_s = ctx.heads(tape, s).flow;
    let pf = {
        let lp = ctx.pf_logprobs(tape, s)?;
        tape.index(lp, a.0)
    };
    let mut nodes = vec![flow_s, pf];
    let mut weights = vec![1.0, 1.0];
    let mut constant = 0.0;

    match (next.terminal, terminal_logr) {
        (true, Some(logr)) => constant -= logr,
        _ => {
            let flow_next = ctx.heads(tape, next).flow;
            nodes.push(flow_next);
            weights.push(-1.0);
        }
    }
    // backward action mirroring this edge
    let b = ctx
        .env
        .backward_actions(next)?
        .into_iter()
        .find(|&b| {
            ctx.env.unstep(next, b).map(|p| p == *s).unwrap_or(false)
                && ctx.env.mirror_forward(next, b).map(|f| f == a).unwrap_or(false)
        })
        .ok_or_else(|| Error::contract("transition has no backward mirror"))?;
    if let Some(pb) = ctx.log_pb_edge(tape, next, b)? {
        nodes.push(pb);
        weights.push(-1.0);
    }
    let sum = tape.weighted_sum(&nodes, &weights);
    let r = tape.add_const(sum, constant);
    Ok(tape.square(r))
}

/// Squared flow-matching residual at an interior state:
/// `(log sum in-flows - log sum out-flows)^2` with edge flows read from the
/// forward head.
pub fn fm_state_loss(tape: &mut Tape, ctx: &mut LossContext, s: &State) -> Result<NodeId> {
    let inflow = ctx.log_inflow(tape, s)?;
    let outflow = ctx.log_outflow(tape, s)?;
    let r = tape.sub(inflow, outflow);
    Ok(tape.square(r))
}

/// Subtrajectory balance: squared residuals over all subtrajectories
/// `0 <= u < v <= n`, geometrically weighted by `lambda^(v-u)` and normalized
/// by the total weight. The terminal index uses the predefined reward when
/// `terminal_logr` is given.
pub fn subtb_loss(
    tape: &mut Tape,
    ctx: &mut LossContext,
    traj: &Trajectory,
    lambda: f64,
    terminal_logr: Option<f64>,
) -> Result<NodeId> {
    let n = traj.actions.len();
    if n == 0 {
        return Err(Error::contract("empty trajectory"));
    }
    // log F at every state index; index n is the terminal
    let mut log_flow: Vec<NodeId> = Vec::with_capacity(n + 1);
    for (i, s) in traj.states.iter().enumerate() {
        if i == n {
            match terminal_logr {
                Some(logr) => log_flow.push(tape.scalar_const(logr)),
                None => log_flow.push(ctx.heads(tape, s).flow),
            }
        } else {
            log_flow.push(ctx.heads(tape, s).flow);
        }
    }
    // prefix sums of edge log-probabilities
    let zero = tape.scalar_const(0.0);
    let mut pf_prefix = vec![zero];
    let mut pb_prefix = vec![zero];
    for t in 0..n {
        let pf = ctx.log_pf_edge(tape, &traj.states[t], traj.actions[t])?;
        let prev = pf_prefix[t];
        pf_prefix.push(tape.add(prev, pf));
        let next = &traj.states[t + 1];
        let b = backward_of_edge(ctx, next, t, traj)?;
        let prev = pb_prefix[t];
        match ctx.log_pb_edge(tape, next, b)? {
            Some(pb) => pb_prefix.push(tape.add(prev, pb)),
            None => pb_prefix.push(prev),
        }
    }

    let mut terms = Vec::new();
    let mut weights = Vec::new();
    let mut total_weight = 0.0;
    for u in 0..n {
        for v in (u + 1)..=n {
            let w = lambda.powi((v - u) as i32);
            let pf_diff = tape.sub(pf_prefix[v], pf_prefix[u]);
            let pb_diff = tape.sub(pb_prefix[v], pb_prefix[u]);
            let flow_diff = tape.sub(log_flow[u], log_flow[v]);
            let a = tape.add(flow_diff, pf_diff);
            let r = tape.sub(a, pb_diff);
            terms.push(tape.square(r));
            weights.push(w);
            total_weight += w;
        }
    }
    for w in &mut weights {
        *w /= total_weight;
    }
    Ok(tape.weighted_sum(&terms, &weights))
}

/// Mean per-state KL between the trainable backward policy and the uniform
/// distribution over legal backward actions. States with a single legal
/// backward edge carry zero KL between point masses and are skipped, as is
/// the terminal's forced undo edge.
pub fn kl_reg(tape: &mut Tape, ctx: &mut LossContext, traj: &Trajectory) -> Result<NodeId> {
    if !ctx.cfg.pb.trainable() {
        return Err(Error::contract(
            "backward-KL regularization requires a trainable P_B",
        ));
    }
    let mut terms = Vec::new();
    for s in &traj.states[1..traj.states.len() - 1] {
        let mask = ctx.env.backward_mask(s)?;
        let legal = mask.iter().filter(|&&m| m).count();
        if legal < 2 {
            continue;
        }
        let lp = ctx.pb_logprobs(tape, s)?;
        // KL(P_B || U) = sum p log p + log k
        let neg_ent = tape.neg_entropy(lp, &mask);
        terms.push(tape.add_const(neg_ent, (legal as f64).ln()));
    }
    if terms.is_empty() {
        return Ok(tape.scalar_const(0.0));
    }
    Ok(tape.mean(&terms))
}
