//! Pareto-front extraction, performance indicators, and exploration
//! diagnostics.
//!
//! Conventions: objectives are maximized; dominance is componentwise `<=`.
//! `S` is the full candidate set, `P'` its non-dominated subset, and `P` the
//! reference front. Following the evaluation protocol, identical objective
//! vectors are never de-duplicated in `S` or `P'`.

use crate::autodiff::FlowModel;
use crate::env::{dominated_by, Env, State};
use crate::error::{Error, Result};

/// Where a front came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    TrueFront,
    Estimated,
    ReferenceDiscretization,
}

/// A set of mutually non-dominated objective vectors.
#[derive(Debug, Clone)]
pub struct FrontSet {
    pub points: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

/// Non-dominated subset under componentwise `<=`; duplicates of the same
/// vector are all retained.
pub fn pareto_front(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points
        .iter()
        .filter(|p| !points.iter().any(|q| dominated_by(p, q)))
        .cloned()
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Positive-part distance `|| max(p - s, 0) ||_2` from a generated point `s`
/// toward a reference point `p`.
fn plus_dist(p: &[f64], s: &[f64]) -> f64 {
    p.iter()
        .zip(s)
        .map(|(x, y)| (x - y).max(0.0))
        .map(|d| d * d)
        .sum::<f64>()
        .sqrt()
}

fn check_nonempty(s: &[Vec<f64>], p: &[Vec<f64>]) -> Result<()> {
    if s.is_empty() || p.is_empty() {
        return Err(Error::contract("distance indicators need non-empty sets"));
    }
    Ok(())
}

/// Average distance from each generated point to its closest reference point.
pub fn gd(s: &[Vec<f64>], p: &[Vec<f64>]) -> Result<f64> {
    check_nonempty(s, p)?;
    Ok(s.iter()
        .map(|si| p.iter().map(|pi| euclid(pi, si)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / s.len() as f64)
}

/// Average distance from each reference point to its closest generated point.
pub fn igd(s: &[Vec<f64>], p: &[Vec<f64>]) -> Result<f64> {
    gd(p, s)
}

/// GD with the modified positive-part distance.
pub fn gd_plus(s: &[Vec<f64>], p: &[Vec<f64>]) -> Result<f64> {
    check_nonempty(s, p)?;
    Ok(s.iter()
        .map(|si| p.iter().map(|pi| plus_dist(pi, si)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / s.len() as f64)
}

/// IGD with the modified positive-part distance; weakly Pareto compliant.
pub fn igd_plus(s: &[Vec<f64>], p: &[Vec<f64>]) -> Result<f64> {
    check_nonempty(s, p)?;
    Ok(p.iter()
        .map(|pi| s.iter().map(|si| plus_dist(pi, si)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / p.len() as f64)
}

/// Averaged Hausdorff distance `max(GD(S, P), IGD(S, P))`.
pub fn d_h(s: &[Vec<f64>], p: &[Vec<f64>]) -> Result<f64> {
    Ok(gd(s, p)?.max(igd(s, p)?))
}

/// Hypervolume of the union of boxes `[ref, p]` for maximization fronts,
/// by hyperplane sweeps over the last coordinate. Every front point must
/// dominate the reference point; supported up to D = 4.
pub fn hypervolume(front: &[Vec<f64>], ref_point: &[f64]) -> Result<f64> {
    let d = ref_point.len();
    if d == 0 || d > 4 {
        return Err(Error::contract("hypervolume supports 1 <= D <= 4"));
    }
    for p in front {
        if p.len() != d {
            return Err(Error::contract("dimension mismatch in hypervolume"));
        }
        if p.iter().zip(ref_point).any(|(x, r)| x < r) {
            return Err(Error::contract(format!(
                "front point {p:?} does not dominate the reference point {ref_point:?}"
            )));
        }
    }
    Ok(hv_recurse(front, ref_point))
}

fn hv_recurse(points: &[Vec<f64>], ref_point: &[f64]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let d = ref_point.len();
    if d == 1 {
        return points
            .iter()
            .map(|p| p[0])
            .fold(f64::NEG_INFINITY, f64::max)
            - ref_point[0];
    }
    // distinct slab boundaries on the last coordinate, high to low
    let mut zs: Vec<f64> = points.iter().map(|p| p[d - 1]).collect();
    zs.sort_by(|a, b| b.partial_cmp(a).expect("finite objectives"));
    zs.dedup();
    let mut volume = 0.0;
    for (i, &hi) in zs.iter().enumerate() {
        let lo = if i + 1 < zs.len() {
            zs[i + 1]
        } else {
            ref_point[d - 1]
        };
        if hi <= lo {
            continue;
        }
        let active: Vec<Vec<f64>> = points
            .iter()
            .filter(|p| p[d - 1] >= hi)
            .map(|p| p[..d - 1].to_vec())
            .collect();
        volume += (hi - lo) * hv_recurse(&active, &ref_point[..d - 1]);
    }
    volume
}

/// Pareto-clusters entropy: assign each estimated-front point to its nearest
/// reference point (ties to the lowest reference index) and take the entropy
/// of the cluster histogram with denominator `|P|`.
pub fn pc_entropy(p_prime: &[Vec<f64>], p: &[Vec<f64>]) -> f64 {
    if p.is_empty() || p_prime.is_empty() {
        return 0.0;
    }
    let mut cluster_sizes = vec![0usize; p.len()];
    for s in p_prime {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, r) in p.iter().enumerate() {
            let d = euclid(s, r);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        cluster_sizes[best] += 1;
    }
    let denom = p.len() as f64;
    -cluster_sizes
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let f = c as f64 / denom;
            f * f.ln()
        })
        .sum::<f64>()
}

/// R2 indicator: mean over weight vectors of the best weighted Chebyshev
/// distance to the utopian point `z*`.
pub fn r2_indicator(s: &[Vec<f64>], lambdas: &[Vec<f64>], z_star: &[f64]) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::contract("R2 indicator needs a non-empty set"));
    }
    if lambdas.is_empty() {
        return Err(Error::contract("R2 indicator needs weight vectors"));
    }
    let mut total = 0.0;
    for lam in lambdas {
        let best = s
            .iter()
            .map(|si| {
                lam.iter()
                    .zip(z_star)
                    .zip(si)
                    .map(|((l, z), v)| l * (z - v).abs())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total / lambdas.len() as f64)
}

/// Das-Dennis simplex lattice: all weight vectors with components `k/density`
/// summing to 1. Yields `C(density + dim - 1, dim - 1)` vectors.
pub fn das_dennis(dim: usize, density: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut current = vec![0usize; dim];
    fn rec(pos: usize, remaining: usize, current: &mut Vec<usize>, density: usize, out: &mut Vec<Vec<f64>>) {
        if pos + 1 == current.len() {
            current[pos] = remaining;
            out.push(current.iter().map(|&k| k as f64 / density as f64).collect());
            return;
        }
        for k in 0..=remaining {
            current[pos] = k;
            rec(pos + 1, remaining - k, current, density, out);
        }
    }
    rec(0, density, &mut current, density, &mut out);
    out
}

/// The reference front: the exact Pareto front over all terminals when the
/// environment is enumerable, otherwise a uniform discretization of the
/// faces of `[0, 1]^D` touching the all-ones corner.
pub fn reference_front(env: &Env, resolution: usize) -> Result<FrontSet> {
    if env.is_enumerable() {
        let mut objs = Vec::new();
        for x in env.enumerate_terminals()? {
            objs.push(env.objective(&x)?);
        }
        let mut front = pareto_front(&objs);
        front.sort_by(|a, b| a.partial_cmp(b).expect("finite objectives"));
        front.dedup();
        Ok(FrontSet {
            points: front,
            provenance: Provenance::TrueFront,
        })
    } else {
        let d = env.objective_dim();
        if resolution < 2 {
            return Err(Error::config("face discretization needs resolution >= 2"));
        }
        let mut points = Vec::new();
        let steps: Vec<f64> = (0..resolution)
            .map(|i| i as f64 / (resolution - 1) as f64)
            .collect();
        for face in 0..d {
            let mut idx = vec![0usize; d - 1];
            loop {
                let mut p = Vec::with_capacity(d);
                let mut k = 0;
                for dim in 0..d {
                    if dim == face {
                        p.push(1.0);
                    } else {
                        p.push(steps[idx[k]]);
                        k += 1;
                    }
                }
                points.push(p);
                // odometer
                let mut pos = 0;
                loop {
                    if pos == idx.len() {
                        break;
                    }
                    idx[pos] += 1;
                    if idx[pos] < resolution {
                        break;
                    }
                    idx[pos] = 0;
                    pos += 1;
                }
                if pos == idx.len() {
                    break;
                }
                if idx.iter().all(|&i| i == 0) {
                    break;
                }
            }
        }
        points.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        points.dedup();
        Ok(FrontSet {
            points,
            provenance: Provenance::ReferenceDiscretization,
        })
    }
}

/// The full indicator suite for one batch of generated candidates.
///
/// GD, IGD, GD+ and the averaged Hausdorff distance are computed on the full
/// candidate set `S`; IGD+, hypervolume, PC-entropy and R2 on the estimated
/// front `P' = Pareto(S)`, matching the evaluation protocol.
#[derive(Debug, Clone)]
pub struct IndicatorReport {
    pub gd: f64,
    pub igd: f64,
    pub gd_plus: f64,
    pub igd_plus: f64,
    pub d_h: f64,
    pub hypervolume: f64,
    pub pc_entropy: f64,
    pub r2: f64,
    pub n_candidates: usize,
    pub n_estimated_front: usize,
    pub n_reference: usize,
}

impl IndicatorReport {
    /// Flat `key = value` lines, one per indicator.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("gd", self.gd),
            ("igd", self.igd),
            ("gd_plus", self.gd_plus),
            ("igd_plus", self.igd_plus),
            ("d_h", self.d_h),
            ("hypervolume", self.hypervolume),
            ("pc_entropy", self.pc_entropy),
            ("r2", self.r2),
        ] {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!("n_candidates = {}\n", self.n_candidates));
        out.push_str(&format!("n_estimated_front = {}\n", self.n_estimated_front));
        out.push_str(&format!("n_reference = {}\n", self.n_reference));
        out
    }
}

pub fn evaluate_indicators(
    candidates: &[Vec<f64>],
    reference: &[Vec<f64>],
    hv_ref: &[f64],
    r2_density: usize,
) -> Result<IndicatorReport> {
    if candidates.is_empty() || reference.is_empty() {
        return Err(Error::contract("indicator evaluation needs non-empty sets"));
    }
    let d = reference[0].len();
    let front = pareto_front(candidates);
    let lambdas = das_dennis(d, r2_density);
    let z_star = vec![1.0; d];
    // clip candidates to the reference point for the hypervolume: candidates
    // below it would not dominate it
    let clipped: Vec<Vec<f64>> = front
        .iter()
        .map(|p| {
            p.iter()
                .zip(hv_ref)
                .map(|(x, r)| x.max(*r))
                .collect::<Vec<f64>>()
        })
        .collect();
    Ok(IndicatorReport {
        gd: gd(candidates, reference)?,
        igd: igd(candidates, reference)?,
        gd_plus: gd_plus(candidates, reference)?,
        igd_plus: igd_plus(&front, reference)?,
        d_h: d_h(candidates, reference)?,
        hypervolume: hypervolume(&clipped, hv_ref)?,
        pc_entropy: pc_entropy(&front, reference),
        r2: r2_indicator(&front, &lambdas, &z_star)?,
        n_candidates: candidates.len(),
        n_estimated_front: front.len(),
        n_reference: reference.len(),
    })
}

// ---- single-objective diagnostics ----------------------------------------

/// Terminals attaining the maximal scalar objective.
pub fn maximal_set(env: &Env) -> Result<Vec<State>> {
    if env.objective_dim() != 1 {
        return Err(Error::contract(
            "the maximal set is defined for single-objective environments",
        ));
    }
    let terminals = env.enumerate_terminals()?;
    let mut best = f64::NEG_INFINITY;
    for x in &terminals {
        best = best.max(env.objective(x)?[0]);
    }
    Ok(terminals
        .into_iter()
        .filter(|x| env.objective(x).map(|u| u[0] == best).unwrap_or(false))
        .collect())
}

/// Exploration ratios over a visit log:
/// `r1` distinct visited terminals over all terminals, `r2` distinct visited
/// maximal terminals over all maximal terminals, `r3` distinct maximal
/// terminals within the most recent `window` visits over the window size.
pub fn exploration_ratios(visits: &[State], env: &Env, window: usize) -> Result<(f64, f64, f64)> {
    let total = env
        .terminal_count()
        .ok_or_else(|| Error::capability("terminal count overflow"))? as f64;
    let maximal: std::collections::HashSet<State> = maximal_set(env)?.into_iter().collect();
    let distinct: std::collections::HashSet<&State> = visits.iter().collect();
    let distinct_max = distinct.iter().filter(|s| maximal.contains(**s)).count();
    let start = visits.len().saturating_sub(window);
    let recent_max: std::collections::HashSet<&State> = visits[start..]
        .iter()
        .filter(|s| maximal.contains(*s))
        .collect();
    let r1 = distinct.len() as f64 / total;
    let r2 = distinct_max as f64 / maximal.len() as f64;
    let r3 = recent_max.len() as f64 / window as f64;
    Ok((r1, r2, r3))
}

/// Fraction of the most recent `window` visits that landed on maximal
/// terminals (with multiplicity). This is the exploitation measure behind
/// the final-window comparisons.
pub fn maximal_window_fraction(visits: &[State], env: &Env, window: usize) -> Result<f64> {
    let maximal: std::collections::HashSet<State> = maximal_set(env)?.into_iter().collect();
    let start = visits.len().saturating_sub(window);
    let recent = &visits[start..];
    if recent.is_empty() {
        return Ok(0.0);
    }
    let hits = recent.iter().filter(|s| maximal.contains(*s)).count();
    Ok(hits as f64 / recent.len() as f64)
}

/// L1 distance between the empirical distribution of the most recent
/// `window` visits and the target `u(x)^beta / Z_beta` over all terminals.
pub fn l1_to_target(visits: &[State], env: &Env, beta: f64, window: usize) -> Result<f64> {
    let terminals = env.enumerate_terminals()?;
    let mut z = 0.0;
    let mut target: std::collections::HashMap<&State, f64> = std::collections::HashMap::new();
    for x in &terminals {
        let r = env.objective(x)?[0].powf(beta);
        z += r;
        target.insert(x, r);
    }
    if z <= 0.0 {
        return Err(Error::contract("target distribution has zero mass"));
    }
    let start = visits.len().saturating_sub(window);
    let recent = &visits[start..];
    if recent.is_empty() {
        return Err(Error::contract("empty visit window"));
    }
    let mut counts: std::collections::HashMap<&State, usize> = std::collections::HashMap::new();
    for v in recent {
        *counts.entry(v).or_insert(0) += 1;
    }
    let n = recent.len() as f64;
    let mut l1 = 0.0;
    for x in &terminals {
        let emp = counts.get(x).map(|&c| c as f64 / n).unwrap_or(0.0);
        l1 += (emp - target[x] / z).abs();
    }
    Ok(l1)
}

/// Mean KL between the model's backward policy and the uniform backward
/// distribution, over all interior states where the backward policy has a
/// real choice (at least two legal edges).
pub fn mean_backward_kl(env: &Env, model: &FlowModel) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    // walk every reachable interior state
    let mut stack = vec![env.initial_state()];
    let mut seen = std::collections::HashSet::new();
    while let Some(s) = stack.pop() {
        if !seen.insert(s.clone()) || s.terminal {
            continue;
        }
        if !env.is_initial(&s) {
            let mask = env.backward_mask(&s)?;
            let legal = mask.iter().filter(|&&m| m).count();
            if legal >= 2 {
                let heads = model.heads(env, &s);
                let p = crate::autodiff::softmax_masked(&heads.pb, &mask, 1.0, 0.0)?;
                let mut kl = 0.0;
                for (&pi, &m) in p.iter().zip(&mask) {
                    if m && pi > 0.0 {
                        kl += pi * (pi * legal as f64).ln();
                    }
                }
                total += kl;
                count += 1;
            }
        }
        for a in env.forward_actions(&s)? {
            stack.push(env.step(&s, a)?);
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// Group terminals by distinct objective value and average the learned
/// log-reward per group, sorted by ascending level. The learned reward is
/// read from the terminal state flow, or from the trajectory ratio along a
/// canonical (first-action-greedy) trajectory for TB models.
pub fn reward_landscape(
    env: &Env,
    model: &FlowModel,
    cfg: &crate::loss::LossConfig,
) -> Result<Vec<(f64, f64)>> {
    let terminals = env.enumerate_terminals()?;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(terminals.len());
    for x in &terminals {
        let u = env.objective(x)?[0];
        let logr = crate::train::learned_log_reward(env, model, cfg, x)?;
        pairs.push((u, logr));
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let level = pairs[i].0;
        let mut sum = 0.0;
        let mut count = 0usize;
        while i < pairs.len() && pairs[i].0 == level {
            sum += pairs[i].1;
            count += 1;
            i += 1;
        }
        out.push((level, sum / count as f64));
    }
    Ok(out)
}
