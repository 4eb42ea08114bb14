//! Closed-form minimizers of the neighboring-pair order-preserving loss on
//! ranked chains, their numeric-minimization oracle, and the expected
//! substring-flow analysis for prepend/append sequence MDPs.

use crate::error::{Error, Result};

/// Objective values `u_0 <= ... <= u_n` with a box bound `gamma` on reward
/// ratios: rewards live in `[1/gamma, 1]`.
#[derive(Debug, Clone)]
pub struct RankedChain {
    pub u: Vec<f64>,
    pub gamma: f64,
}

impl RankedChain {
    pub fn new(u: Vec<f64>, gamma: f64) -> Result<Self> {
        if u.len() < 2 {
            return Err(Error::contract("a ranked chain needs at least 2 values"));
        }
        if u.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::contract("chain values must be sorted ascending"));
        }
        if !(gamma > 1.0) {
            return Err(Error::contract("gamma must exceed 1"));
        }
        Ok(RankedChain { u, gamma })
    }

    /// Indices `i` with `u_i < u_{i+1}`.
    pub fn strict_steps(&self) -> Vec<usize> {
        (0..self.u.len() - 1)
            .filter(|&i| self.u[i] < self.u[i + 1])
            .collect()
    }

    /// Indices `i` with `u_i = u_{i+1}`.
    pub fn tie_steps(&self) -> Vec<usize> {
        (0..self.u.len() - 1)
            .filter(|&i| self.u[i] == self.u[i + 1])
            .collect()
    }

    /// Number of strict steps `m`.
    pub fn m(&self) -> usize {
        self.strict_steps().len()
    }

    /// Number of steps `n` (one less than the number of states).
    pub fn n(&self) -> usize {
        self.u.len() - 1
    }
}

/// A minimizer of the neighboring-pair loss on a chain.
#[derive(Debug, Clone)]
pub struct ChainSolution {
    /// Rewards in `[1/gamma, 1]`, one per chain element.
    pub rewards: Vec<f64>,
    /// Consecutive ratio across strict steps.
    pub alpha: f64,
    /// Consecutive ratio across tie steps (`None` when the chain has none).
    pub beta: Option<f64>,
    /// The loss value stated by the proposition's closed form.
    pub stated_loss: f64,
    /// The neighboring-pair loss actually evaluated at `rewards`.
    pub evaluated_loss: f64,
}

/// Neighboring-pair order-preserving loss of a reward assignment on a chain,
/// following the propositions' expansion: strict pairs contribute
/// `-log(r_{i+1} / (r_i + r_{i+1}))`; tie pairs contribute the symmetric
/// cross-entropy `-(log(r_i / s) + log(r_{i+1} / s)) / 2` with
/// `s = r_i + r_{i+1}` (the tie label's own entropy `log 2` is not
/// subtracted).
pub fn neighbor_pair_loss(u: &[f64], log_r: &[f64]) -> f64 {
    assert_eq!(u.len(), log_r.len());
    let mut total = 0.0;
    for i in 1..u.len() {
        let (a, b) = (log_r[i - 1], log_r[i]);
        if u[i - 1] < u[i] {
            total += softplus(a - b);
        } else {
            // lse(a, b) - (a + b) / 2
            let lse = if a > b {
                a + softplus(b - a)
            } else {
                b + softplus(a - b)
            };
            total += lse - 0.5 * (a + b);
        }
    }
    total
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Closed form for a chain of mutually different values: the minimizer of
/// the neighboring-pair loss over `[1/gamma, 1]^{n+1}` is the geometric
/// progression `R(x_i) = gamma^(i/n - 1)`.
///
/// `stated_loss` carries the proposition's published value
/// `n * log(1 + 1/gamma)`; the actually attained minimum, evaluated pair by
/// pair at the returned rewards, is `n * log(1 + gamma^(-1/n))` (the two
/// agree only at `n = 1`, the published value being the unattainable sum of
/// per-pair minima). Both are returned so callers can inspect the gap.
pub fn prop1_closed_form(n: usize, gamma: f64) -> Result<ChainSolution> {
    if n < 1 {
        return Err(Error::contract("prop1 needs n >= 1"));
    }
    if !(gamma > 1.0) {
        return Err(Error::contract("gamma must exceed 1"));
    }
    let rewards: Vec<f64> = (0..=n)
        .map(|i| gamma.powf(i as f64 / n as f64 - 1.0))
        .collect();
    let log_r: Vec<f64> = rewards.iter().map(|r| r.ln()).collect();
    let u: Vec<f64> = (0..=n).map(|i| i as f64).collect();
    Ok(ChainSolution {
        alpha: gamma.powf(1.0 / n as f64),
        beta: None,
        stated_loss: n as f64 * (1.0 + 1.0 / gamma).ln(),
        evaluated_loss: neighbor_pair_loss(&u, &log_r),
        rewards,
    })
}

/// `f1(alpha) = alpha^(m+2) * (1 - 4/(alpha+3))^(n-m)`, strictly increasing
/// for `alpha >= 1`.
pub fn f1(alpha: f64, n: usize, m: usize) -> f64 {
    alpha.powi(m as i32 + 2) * (1.0 - 4.0 / (alpha + 3.0)).powi((n - m) as i32)
}

/// The threshold `gamma_0` solving `f1(gamma_0^(1/(m+1))) = gamma_0`;
/// order preservation of the closed form requires `gamma > gamma_0`.
pub fn gamma0(n: usize, m: usize) -> f64 {
    let g = |gamma: f64| f1(gamma.powf(1.0 / (m as f64 + 1.0)), n, m) - gamma;
    let (mut lo, mut hi) = (1.0 + 1e-9, 1e12);
    if g(lo) >= 0.0 {
        return 1.0; // all-distinct chains: any gamma > 1 preserves order
    }
    if g(hi) < 0.0 {
        return hi;
    }
    for _ in 0..200 {
        let mid = (lo + hi) / 2.0;
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo + hi) / 2.0
}

/// Root of `f1(alpha) = gamma`, bisected to 1e-12 relative width.
pub fn solve_alpha(gamma: f64, n: usize, m: usize) -> f64 {
    let mut lo = 1.0 + 1e-15;
    let mut hi = 2.0;
    while f1(hi, n, m) < gamma {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f1(mid, n, m) < gamma {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) / hi < 1e-13 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Piecewise-geometric closed form on a chain with ties, built around two
/// auxiliary boundary states pinned at `1/gamma` and `1`. Requires
/// `gamma > gamma_0`; rewards follow `r_0 = alpha/gamma`, ratio `alpha`
/// across strict steps and `beta = (alpha-1)/(alpha+3)` across ties.
pub fn prop2_solve(chain: &RankedChain) -> Result<ChainSolution> {
    let (n, m) = (chain.n(), chain.m());
    let g0 = gamma0(n, m);
    if chain.gamma <= g0 {
        return Err(Error::contract(format!(
            "gamma = {} does not exceed the order-preservation threshold gamma_0 = {g0}",
            chain.gamma
        )));
    }
    let alpha = solve_alpha(chain.gamma, n, m);
    let beta = (alpha - 1.0) / (alpha + 3.0);
    let mut rewards = Vec::with_capacity(n + 1);
    let mut log_r = (alpha / chain.gamma).ln();
    rewards.push(log_r.exp());
    for i in 0..n {
        log_r += if chain.u[i] < chain.u[i + 1] {
            alpha.ln()
        } else {
            beta.ln()
        };
        rewards.push(log_r.exp());
    }

    // closed-form loss over the extended chain (two auxiliary strict pairs)
    let stated_loss = -((n - m) as f64) / 2.0 * (beta / ((1.0 + beta) * (1.0 + beta))).ln()
        - (m as f64 + 2.0) * (alpha / (1.0 + alpha)).ln();

    // evaluate on the extended chain to cross-check
    let mut ext_u = vec![f64::NEG_INFINITY];
    ext_u.extend_from_slice(&chain.u);
    ext_u.push(f64::INFINITY);
    let mut ext_lr = vec![-chain.gamma.ln()];
    ext_lr.extend(rewards.iter().map(|r| r.ln()));
    ext_lr.push(0.0);
    let evaluated_loss = neighbor_pair_loss(&ext_u, &ext_lr);

    Ok(ChainSolution {
        rewards,
        alpha,
        beta: Some(beta),
        stated_loss,
        evaluated_loss,
    })
}

/// Numeric oracle: projected gradient descent on the neighboring-pair loss
/// in log-space over the box `[-log gamma, 0]^(n+1)`, fixed step `1e-2`
/// halved whenever the loss increases. With `auxiliaries` the two pinned
/// boundary states of the piecewise construction are appended.
pub fn numeric_minimize_chain(
    u: &[f64],
    gamma: f64,
    auxiliaries: bool,
    iters: usize,
) -> Vec<f64> {
    let n1 = u.len();
    let lo = -gamma.ln();
    // linear ramp start
    let mut theta: Vec<f64> = (0..n1)
        .map(|i| lo * (1.0 - i as f64 / (n1 - 1).max(1) as f64))
        .collect();

    let loss = |theta: &[f64]| -> f64 {
        let mut total = neighbor_pair_loss(u, theta);
        if auxiliaries {
            total += softplus(lo - theta[0]); // pair (x_{-1}, x_0), strict
            total += softplus(theta[n1 - 1]); // pair (x_n, x_{n+1}), strict
        }
        total
    };

    let mut step = 1e-2;
    let mut prev = loss(&theta);
    let mut grad = vec![0.0; n1];
    for _ in 0..iters {
        for g in grad.iter_mut() {
            *g = 0.0;
        }
        for i in 1..n1 {
            let d = theta[i - 1] - theta[i];
            let s = sigmoid(d);
            if u[i - 1] < u[i] {
                grad[i - 1] += s;
                grad[i] -= s;
            } else {
                // d/dtheta of lse(a, b) - (a + b)/2
                grad[i - 1] += s - 0.5;
                grad[i] += 0.5 - s;
            }
        }
        if auxiliaries {
            grad[0] -= sigmoid(lo - theta[0]);
            grad[n1 - 1] += sigmoid(theta[n1 - 1]);
        }
        for i in 0..n1 {
            theta[i] = (theta[i] - step * grad[i]).clamp(lo, 0.0);
        }
        let cur = loss(&theta);
        if cur > prev {
            step *= 0.5;
        }
        prev = cur;
    }
    theta
}

/// One row of a sparsification schedule.
#[derive(Debug, Clone)]
pub struct TrendRow {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrendReport {
    pub rows: Vec<TrendRow>,
    pub loss_strictly_decreasing: bool,
    pub alpha_strictly_increasing: bool,
    pub beta_increasing_toward_one: bool,
}

/// Solve the chain across an increasing `gamma` schedule and verify the
/// sparsification trend: achieved loss strictly decreases, `alpha` grows,
/// `beta` grows toward 1.
pub fn sparsification_trend(chain_u: &[f64], gammas: &[f64]) -> Result<TrendReport> {
    if gammas.len() < 2 {
        return Err(Error::contract("a trend needs at least two gamma values"));
    }
    if gammas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("the gamma schedule must be increasing"));
    }
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let chain = RankedChain::new(chain_u.to_vec(), gamma)?;
        let sol = prop2_solve(&chain)?;
        rows.push(TrendRow {
            gamma,
            alpha: sol.alpha,
            beta: sol.beta.unwrap_or(1.0),
            loss: sol.evaluated_loss,
        });
    }
    let loss_dec = rows.windows(2).all(|w| w[1].loss < w[0].loss);
    let alpha_inc = rows.windows(2).all(|w| w[1].alpha > w[0].alpha);
    let beta_inc = rows
        .windows(2)
        .all(|w| w[1].beta >= w[0].beta && w[1].beta <= 1.0);
    Ok(TrendReport {
        rows,
        loss_strictly_decreasing: loss_dec,
        alpha_strictly_increasing: alpha_inc,
        beta_increasing_toward_one: beta_inc,
    })
}

/// Expected-flow comparison between the longest shared substring of the two
/// top terminals and its competitors, for rewards built by `prop2_solve` on
/// the chain `u_0 < ... < u_n = u(x'_n)`.
#[derive(Debug, Clone)]
pub struct Prop3Report {
    pub alpha: f64,
    /// Shared-substring expected flow `(R(x_n) + R(x'_n)) / (l - k + 1)`.
    pub flow_star: f64,
    /// Worst-case competitor flow `(R(x_n) + sum_{i<n} R(x_i)) / (l - k + 1)`.
    pub flow_competitor: f64,
    /// Whether `alpha > 4`, the proposition's sufficient condition.
    pub condition_met: bool,
    /// Whether the strict separation actually holds for these rewards.
    pub separated: bool,
    /// The proof's sufficient inequality sides `1/(alpha-1)` and
    /// `(alpha-1)/(alpha+3)`.
    pub sufficient_lhs: f64,
    pub sufficient_rhs: f64,
}

/// Build the `n+2`-element chain (one tie at the top), solve it, and compare
/// expected flows through length-`k` substrings of length-`l` strings.
pub fn prop3_expected_flow(l: usize, k: usize, n: usize, gamma: f64) -> Result<Prop3Report> {
    if k > l || k == 0 {
        return Err(Error::contract(
            "substring length k must satisfy 1 <= k <= l",
        ));
    }
    if n < 1 {
        return Err(Error::contract("prop3 needs n >= 1"));
    }
    let mut u: Vec<f64> = (0..=n).map(|i| i as f64).collect();
    u.push(n as f64); // x'_n ties with x_n
    let chain = RankedChain::new(u, gamma)?;
    let sol = prop2_solve(&chain)?;
    let r = &sol.rewards;
    let positions = (l - k + 1) as f64;
    let flow_star = (r[n] + r[n + 1]) / positions;
    let low_sum: f64 = r[..n].iter().sum();
    let flow_competitor = (r[n] + low_sum) / positions;
    let alpha = sol.alpha;
    Ok(Prop3Report {
        alpha,
        flow_star,
        flow_competitor,
        condition_met: alpha > 4.0,
        separated: flow_star > flow_competitor,
        sufficient_lhs: 1.0 / (alpha - 1.0),
        sufficient_rhs: (alpha - 1.0) / (alpha + 3.0),
    })
}

/// Exhaustive build-order enumeration for a length-`l` string: the number of
/// prepend/append interleavings whose length-`k` prefix state sits at offset
/// `a` in the final string, for each `a`. The total over offsets is
/// `2^(l-1)`; a uniform backward policy puts equal probability on every
/// build order, so the flow through the offset-`a` window out of a terminal
/// with reward `R` is `count[a] * R / 2^(l-1)`.
pub fn build_order_window_counts(l: usize, k: usize) -> Result<Vec<u64>> {
    if k == 0 || k > l {
        return Err(Error::contract("window size must satisfy 1 <= k <= l"));
    }
    if l > 24 {
        return Err(Error::capability(
            "exhaustive build-order enumeration is limited to l <= 24",
        ));
    }
    let mut counts = vec![0u64; l - k + 1];
    let orders = 1u64 << (l - 1);
    for pattern in 0..orders {
        // walk the window down from [0, l); bit t decides whether the
        // (t+1)-th removal takes the first or the last character
        let (mut i, mut j) = (0usize, l);
        let mut t = 0;
        while j - i > k {
            if (pattern >> t) & 1 == 1 {
                i += 1; // drop-first, i.e. the forward step was a prepend
            } else {
                j -= 1;
            }
            t += 1;
        }
        counts[i] += 1;
    }
    Ok(counts)
}
