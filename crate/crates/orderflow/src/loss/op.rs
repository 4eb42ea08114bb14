//! The order-preserving criterion and the TB-induced learned reward.

use super::{check_simplex, pareto_membership, LossContext};
use crate::autodiff::{NodeId, Tape};
use crate::env::Trajectory;
use crate::error::{Error, Result};

/// Batch form: KL between the uniform distribution on the batch Pareto set
/// and the distribution the learned reward induces on the batch,
/// `P(x | X, R) = R(x) / sum_{x'} R(x')`, computed in the log domain.
pub fn op_loss_pareto(tape: &mut Tape, entries: &[(Vec<f64>, NodeId)]) -> Result<NodeId> {
    if entries.len() < 2 {
        return Err(Error::contract(
            "order-preserving loss needs a batch of at least 2 terminals",
        ));
    }
    let us: Vec<Vec<f64>> = entries.iter().map(|(u, _)| u.clone()).collect();
    let member = pareto_membership(&us);
    let k = member.iter().filter(|&&m| m).count();
    debug_assert!(k >= 1, "a finite batch has a non-dominated element");

    let all: Vec<NodeId> = entries.iter().map(|&(_, id)| id).collect();
    let lse = tape.log_sum_exp(&all);

    // KL(P_y || P(.|X, R)) = lse - (1/k) sum_{Pareto} log R - log k
    let mut nodes = vec![lse];
    let mut weights = vec![1.0];
    for (i, &(_, id)) in entries.iter().enumerate() {
        if member[i] {
            nodes.push(id);
            weights.push(-1.0 / k as f64);
        }
    }
    let s = tape.weighted_sum(&nodes, &weights);
    Ok(tape.add_const(s, -(k as f64).ln()))
}

/// Pairwise form for a single objective. Each pair `(u_a, log Ra, u_b, log Rb)`
/// contributes the KL between the label distribution
/// `P_y(b) = (1[u_b > u_a] + 1[u_b >= u_a]) / 2` and `Rb / (Ra + Rb)`;
/// ties yield the (1/2, 1/2) label. Returns the sum over pairs.
pub fn op_loss_pairwise(tape: &mut Tape, pairs: &[(f64, NodeId, f64, NodeId)]) -> NodeId {
    let mut terms = Vec::with_capacity(pairs.len());
    for &(ua, la, ub, lb) in pairs {
        let lse = tape.log_sum_exp(&[la, lb]);
        let term = if ua < ub {
            // label (0, 1): -log P(b)
            tape.sub(lse, lb)
        } else if ub < ua {
            tape.sub(lse, la)
        } else {
            // label (1/2, 1/2): lse - (la + lb)/2 - log 2
            let m = tape.weighted_sum(&[la, lb], &[0.5, 0.5]);
            let c = tape.sub(lse, m);
            tape.add_const(c, -std::f64::consts::LN_2)
        };
        terms.push(term);
    }
    tape.sum(&terms)
}

/// TB-induced learned reward of a trajectory's terminal:
/// `log R(x) = log Z + sum log P_F - sum log P_B` along the trajectory.
/// Gradients flow into the forward policy, the backward policy (when
/// trainable) and log Z.
pub fn reward_tb(tape: &mut Tape, ctx: &mut LossContext, traj: &Trajectory) -> Result<NodeId> {
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
    Ok(tape.weighted_sum(&nodes, &weights))
}

/// The backward action at `states[t + 1]` undoing forward action `actions[t]`.
pub(super) fn backward_of_edge(
    ctx: &LossContext,
    next: &crate::env::State,
    t: usize,
    traj: &Trajectory,
) -> Result<crate::env::ActionId> {
    for b in ctx.env.backward_actions(next)? {
        if ctx.env.unstep(next, b)? == traj.states[t]
            && ctx.env.mirror_forward(next, b)? == traj.actions[t]
        {
            return Ok(b);
        }
    }
    Err(Error::contract("trajectory edge has no backward mirror"))
}

/// Linear preference scalarization `R_w(x) = w^T u(x)` with `w` on the simplex.
pub fn scalarize_preference(u: &[f64], w: &[f64]) -> Result<f64> {
    if u.len() != w.len() {
        return Err(Error::contract(format!(
            "preference has {} weights for {} objectives",
            w.len(),
            u.len()
        )));
    }
    check_simplex(w)?;
    Ok(u.iter().zip(w.iter()).map(|(a, b)| a * b).sum())
}
