//! Orchestration behind the CLI subcommands: run training with its output
//! files, evaluate multi-objective samplers, emit diagnostics, run the
//! closed-form oracles, and compare configurations across seeds.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::env::{Env, State};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::metrics;
use crate::theory;
use crate::train::{self, sample_trajectory, TrainOutput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// The `# seed=... config=...` stamp carried by every output file.
fn stamp(cfg: &RunConfig) -> String {
    format!("# seed={} config={}\n", cfg.seed, cfg.content_hash())
}

fn write_stamped(path: &Path, cfg: &RunConfig, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, format!("{}{}", stamp(cfg), body))?;
    Ok(())
}

pub fn load_config(
    path: &Path,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = out_override {
        cfg.out = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

/// Paths produced by a training run.
pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub runlog: PathBuf,
    pub visits: PathBuf,
    pub checkpoint: PathBuf,
    pub config_echo: PathBuf,
}

/// Train per the configuration; writes the run log CSV, the visit log, the
/// final checkpoint and a config echo capturing all resolved defaults.
pub fn cmd_train(cfg: &RunConfig) -> Result<(TrainArtifacts, TrainOutput)> {
    let env = cfg.build_env()?;
    let mut model = cfg.build_model(&env)?;
    let out_dir = PathBuf::from(&cfg.out);
    fs::create_dir_all(&out_dir)?;
    let env_hash = env.hash();

    let ckpt_path = out_dir.join("checkpoint.txt");
    let result = train::train(&env, &mut model, &cfg.train, &cfg.loss, |round, m, step| {
        checkpoint::save(&ckpt_path, m, &env_hash, cfg.seed, round, step)
    });
    let output = match result {
        Ok(o) => o,
        Err(Error::Diverged(msg)) => {
            // leave a diagnostic checkpoint behind before reporting
            checkpoint::save(&out_dir.join("diverged.txt"), &model, &env_hash, cfg.seed, 0, 0)?;
            return Err(Error::Diverged(msg));
        }
        Err(e) => return Err(e),
    };

    let artifacts = TrainArtifacts {
        runlog: out_dir.join("runlog.csv"),
        visits: out_dir.join("visits.csv"),
        checkpoint: ckpt_path,
        config_echo: out_dir.join("config.txt"),
        out_dir,
    };
    write_stamped(&artifacts.runlog, cfg, &output.log.to_csv())?;
    let mut visits_body = String::from("terminal\n");
    for s in &output.visits {
        visits_body.push_str(&env.encode_state(s));
        visits_body.push('\n');
    }
    write_stamped(&artifacts.visits, cfg, &visits_body)?;
    write_stamped(&artifacts.config_echo, cfg, &cfg.echo())?;
    Ok((artifacts, output))
}

/// Sample candidates from a trained model.
pub fn sample_candidates(
    env: &Env,
    model: &crate::autodiff::FlowModel,
    cfg: &RunConfig,
    total: usize,
    rounds: usize,
) -> Result<Vec<State>> {
    let mut out = Vec::with_capacity(total);
    let per_round = total.div_ceil(rounds.max(1));
    let mut cache = train::HeadCache::new();
    let mut drawn = 0usize;
    for round in 0..rounds.max(1) {
        for i in 0..per_round {
            if drawn == total {
                break;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(crate::env::objectives::splitmix64(
                cfg.seed ^ ((round as u64) << 32 | i as u64).wrapping_add(0x9e37),
            ));
            let t = train::sample_trajectory_cached(
                env,
                model,
                &mut cache,
                0.0,
                cfg.loss.temperature,
                cfg.loss.pb.trainable(),
                &mut rng,
            )?;
            out.push(t.terminal().clone());
            drawn += 1;
        }
    }
    Ok(out)
}

/// Evaluate a trained multi-objective sampler: draw candidates, compute the
/// indicator suite against the reference front, write the report and the raw
/// objective-vector CSV.
pub fn cmd_eval_moo(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    out_dir: &Path,
) -> Result<metrics::IndicatorReport> {
    let env = cfg.build_env()?;
    let mut model = cfg.build_model(&env)?;
    checkpoint::restore(checkpoint_path, &mut model, &env.hash())?;

    let candidates = sample_candidates(&env, &model, cfg, cfg.eval.candidates, cfg.eval.rounds)?;
    let mut objectives = Vec::with_capacity(candidates.len());
    for x in &candidates {
        objectives.push(env.objective(x)?);
    }
    let reference = metrics::reference_front(&env, cfg.eval.ref_resolution)?;
    let d = env.objective_dim();
    let hv_ref = if cfg.eval.hv_ref.is_empty() {
        vec![0.0; d]
    } else if cfg.eval.hv_ref.len() == d {
        cfg.eval.hv_ref.clone()
    } else {
        return Err(Error::config(format!(
            "eval.hv_ref has {} entries for {d} objectives",
            cfg.eval.hv_ref.len()
        )));
    };
    let report =
        metrics::evaluate_indicators(&objectives, &reference.points, &hv_ref, cfg.eval.r2_density)?;

    fs::create_dir_all(out_dir)?;
    write_stamped(&out_dir.join("report.txt"), cfg, &report.to_kv())?;
    let mut csv = String::from("candidate");
    for k in 0..d {
        let _ = write!(csv, ",u{k}");
    }
    csv.push('\n');
    for (x, u) in candidates.iter().zip(&objectives) {
        csv.push_str(&env.encode_state(x));
        for v in u {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    write_stamped(&out_dir.join("candidates.csv"), cfg, &csv)?;
    Ok(report)
}

/// Exploration ratios, L1-to-target and the learned-reward landscape for an
/// enumerable environment, from the stored visit log and a checkpoint.
pub fn cmd_diagnose(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    visits_path: &Path,
    out_dir: &Path,
) -> Result<String> {
    let env = cfg.build_env()?;
    if !env.is_enumerable() || env.objective_dim() != 1 {
        return Err(Error::capability(
            "diagnostics need an enumerable single-objective environment",
        ));
    }
    let mut model = cfg.build_model(&env)?;
    checkpoint::restore(checkpoint_path, &mut model, &env.hash())?;

    let mut visits = Vec::new();
    for line in fs::read_to_string(visits_path)?.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "terminal" {
            continue;
        }
        visits.push(env.parse_terminal(line)?);
    }
    if visits.is_empty() {
        return Err(Error::contract("the visit log is empty"));
    }

    let (r1, r2, r3) = metrics::exploration_ratios(&visits, &env, cfg.train.recent_window)?;
    let frac = metrics::maximal_window_fraction(&visits, &env, cfg.train.recent_window)?;
    let l1 = metrics::l1_to_target(&visits, &env, cfg.loss.beta, cfg.train.l1_window)?;
    let landscape = metrics::reward_landscape(&env, &model, &cfg.loss)?;

    let mut body = String::new();
    let _ = writeln!(body, "ratio_visited = {r1}");
    let _ = writeln!(body, "ratio_max_found = {r2}");
    let _ = writeln!(body, "ratio_max_recent_distinct = {r3}");
    let _ = writeln!(body, "ratio_max_recent_fraction = {frac}");
    let _ = writeln!(body, "l1_error = {l1}");
    let _ = writeln!(body, "landscape_rows = {}", landscape.len());
    let _ = writeln!(body, "u_level,mean_log_reward");
    for (u, lr) in &landscape {
        let _ = writeln!(body, "{u},{lr}");
    }
    fs::create_dir_all(out_dir)?;
    write_stamped(&out_dir.join("diagnostics.txt"), cfg, &body)?;
    Ok(body)
}

/// Which oracle suite to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleSelect {
    Prop1,
    Prop2,
    Prop3,
    All,
}

impl OracleSelect {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prop1" => Ok(OracleSelect::Prop1),
            "prop2" => Ok(OracleSelect::Prop2),
            "prop3" => Ok(OracleSelect::Prop3),
            "all" => Ok(OracleSelect::All),
            other => Err(Error::config(format!(
                "unknown oracle `{other}`; expected prop1, prop2, prop3 or all"
            ))),
        }
    }
}

/// Optional parameter overrides for the oracle runs.
#[derive(Debug, Clone, Default)]
pub struct OracleParams {
    pub n: Option<usize>,
    pub gamma: Option<f64>,
    pub l: Option<usize>,
    pub k: Option<usize>,
}

/// Run the closed-form verification suites and return (report, all_passed).
pub fn cmd_oracle(which: OracleSelect, params: &OracleParams) -> Result<(String, bool)> {
    let mut report = String::new();
    let mut all_ok = true;
    let row = |report: &mut String, name: &str, ok: bool, detail: String| {
        let _ = writeln!(report, "{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        ok
    };

    if matches!(which, OracleSelect::Prop1 | OracleSelect::All) {
        let ns = params.n.map(|n| vec![n]).unwrap_or_else(|| vec![2, 4, 8]);
        let gammas = params
            .gamma
            .map(|g| vec![g])
            .unwrap_or_else(|| vec![10.0, 1000.0]);
        for &n in &ns {
            for &gamma in &gammas {
                let sol = theory::prop1_closed_form(n, gamma)?;
                let u: Vec<f64> = (0..=n).map(|i| i as f64).collect();
                let theta = theory::numeric_minimize_chain(&u, gamma, false, 100_000);
                let dev = theta
                    .iter()
                    .zip(&sol.rewards)
                    .map(|(t, r)| (t - r.ln()).abs())
                    .fold(0.0, f64::max);
                let stated_dev = (sol.stated_loss - n as f64 * (1.0 + 1.0 / gamma).ln()).abs();
                let attained = n as f64 * (1.0 + gamma.powf(-1.0 / n as f64)).ln();
                let eval_dev = (sol.evaluated_loss - attained).abs();
                let ok = dev < 1e-3 && stated_dev < 1e-10 && eval_dev < 1e-10;
                all_ok &= row(
                    &mut report,
                    "prop1",
                    ok,
                    format!(
                        "n={n} gamma={gamma} coord_dev={dev:.2e} stated={} attained={}",
                        sol.stated_loss, sol.evaluated_loss
                    ),
                );
            }
        }
    }

    if matches!(which, OracleSelect::Prop2 | OracleSelect::All) {
        let gamma = params.gamma.unwrap_or(1e6);
        let mut worst_ratio_dev: f64 = 0.0;
        let mut worst_beta_dev: f64 = 0.0;
        let mut chains = 0usize;
        let mut seed = 0xabcdu64;
        let mut next = || {
            seed = crate::env::objectives::splitmix64(seed);
            seed
        };
        while chains < 50 {
            let n = params.n.unwrap_or(2 + (next() % 7) as usize);
            let mut u = vec![0.0f64];
            for _ in 0..n {
                let step = if next() % 3 == 0 { 0.0 } else { 1.0 };
                let prev = *u.last().expect("nonempty");
                u.push(prev + step);
            }
            if u.windows(2).all(|w| w[0] == w[1]) {
                u[n] += 1.0;
            }
            let chain = theory::RankedChain::new(u.clone(), gamma)?;
            if gamma <= theory::gamma0(chain.n(), chain.m()) {
                continue;
            }
            chains += 1;
            let sol = theory::prop2_solve(&chain)?;
            let beta = sol.beta.unwrap_or(1.0);
            worst_beta_dev =
                worst_beta_dev.max((beta - (sol.alpha - 1.0) / (sol.alpha + 3.0)).abs());
            let theta = theory::numeric_minimize_chain(&u, gamma, true, 400_000);
            for i in 0..chain.n() {
                let d = theta[i + 1] - theta[i];
                let expect = if u[i] < u[i + 1] {
                    sol.alpha.ln()
                } else {
                    beta.ln()
                };
                worst_ratio_dev = worst_ratio_dev.max((d - expect).abs());
            }
        }
        let ok = worst_ratio_dev < 1e-3 && worst_beta_dev < 1e-6;
        all_ok &= row(
            &mut report,
            "prop2",
            ok,
            format!(
                "50 chains gamma={gamma} ratio_dev={worst_ratio_dev:.2e} beta_dev={worst_beta_dev:.2e}"
            ),
        );
    }

    if matches!(which, OracleSelect::Prop3 | OracleSelect::All) {
        let l = params.l.unwrap_or(6);
        let k = params.k.unwrap_or(3);
        let n = params.n.unwrap_or(3);
        let gamma = params.gamma.unwrap_or(1e8);
        let rep = theory::prop3_expected_flow(l, k, n, gamma)?;
        // exhaustive enumeration of build orders
        let counts = theory::build_order_window_counts(l, k)?;
        let total: u64 = counts.iter().sum();
        let binom_ok = {
            fn binom(n: usize, k: usize) -> u64 {
                let mut acc = 1u64;
                for i in 0..k {
                    acc = acc * (n - i) as u64 / (i + 1) as u64;
                }
                acc
            }
            counts
                .iter()
                .enumerate()
                .all(|(a, &c)| c == binom(l - k, a) * (1u64 << (k - 1)))
        };
        let avg = counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .sum::<f64>()
            / counts.len() as f64;
        let avg_ok = (avg - 1.0 / (l - k + 1) as f64).abs() < 1e-12;
        all_ok &= row(
            &mut report,
            "prop3-enumeration",
            binom_ok && avg_ok,
            format!("l={l} k={k}: window counts and R/(l-k+1) average verified over 2^{}", l - 1),
        );
        if rep.condition_met {
            all_ok &= row(
                &mut report,
                "prop3-separation",
                rep.separated,
                format!(
                    "alpha={:.4} > 4: E F(s*) = {:.4e} vs best competitor {:.4e}",
                    rep.alpha, rep.flow_star, rep.flow_competitor
                ),
            );
        } else {
            // the sufficient condition is not met; report without asserting
            let _ = writeln!(
                report,
                "NOTE prop3-separation: condition unmet (alpha={:.4} <= 4), not strictly separated",
                rep.alpha
            );
        }
    }
    Ok((report, all_ok))
}

/// Train every configuration across the shared seed list and emit per-seed
/// values plus mean and standard deviation of the chosen metric.
pub fn cmd_compare(
    config_paths: &[PathBuf],
    seeds: &[u64],
    metric: &str,
    out: Option<&Path>,
) -> Result<String> {
    if config_paths.len() < 2 {
        return Err(Error::config("compare needs at least two configurations"));
    }
    if seeds.is_empty() {
        return Err(Error::config("compare needs at least one seed"));
    }
    let mut configs = Vec::new();
    for p in config_paths {
        configs.push(load_config(p, None, None)?);
    }
    let env_hash = configs[0].build_env()?.hash();
    for (cfg, path) in configs.iter().zip(config_paths) {
        let h = cfg.build_env()?.hash();
        if h != env_hash {
            return Err(Error::config(format!(
                "configuration {} uses env {h}, expected {env_hash}: comparisons must share the environment",
                path.display()
            )));
        }
    }

    let extract = |row: &train::RunRecord| -> Result<f64> {
        Ok(match metric {
            "loss" => row.loss,
            "logz" => row.log_z,
            "r1" => row.ratio_visited,
            "r2" => row.ratio_max_found,
            "r3" => row.ratio_max_recent,
            "l1" => row.l1_error,
            other => return Err(Error::config(format!("unknown metric `{other}`"))),
        })
    };

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); configs.len()];
    for &seed in seeds {
        for (ci, cfg) in configs.iter().enumerate() {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            cfg.train.seed = seed;
            let env = cfg.build_env()?;
            let mut model = cfg.build_model(&env)?;
            let out = train::train(&env, &mut model, &cfg.train, &cfg.loss, |_, _, _| Ok(()))?;
            let last = out
                .log
                .rows
                .last()
                .ok_or_else(|| Error::contract("run produced no rounds"))?;
            columns[ci].push(extract(last)?);
        }
    }

    let mut csv = String::from("seed");
    for p in config_paths {
        let _ = write!(csv, ",{}", p.file_stem().unwrap_or_default().to_string_lossy());
    }
    csv.push('\n');
    for (si, &seed) in seeds.iter().enumerate() {
        let _ = write!(csv, "{seed}");
        for col in &columns {
            let _ = write!(csv, ",{}", col[si]);
        }
        csv.push('\n');
    }
    let _ = write!(csv, "mean");
    for col in &columns {
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let _ = write!(csv, ",{mean}");
    }
    csv.push('\n');
    let _ = write!(csv, "std");
    for col in &columns {
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        let _ = write!(csv, ",{}", var.sqrt());
    }
    csv.push('\n');
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, format!("# metric={metric}\n{csv}"))?;
    }
    Ok(csv)
}

/// Boosted sampling from a trained model: draw `candidates * boost_ratio`
/// terminals, rank by the learned reward, keep the top `candidates`.
pub fn cmd_sample(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    candidates: usize,
    boost_ratio: usize,
    out: Option<&Path>,
) -> Result<Vec<(State, f64)>> {
    let env = cfg.build_env()?;
    let mut model = cfg.build_model(&env)?;
    checkpoint::restore(checkpoint_path, &mut model, &env.hash())?;
    if boost_ratio == 0 {
        return Err(Error::config("boost ratio must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::env::objectives::splitmix64(cfg.seed ^ 0xb005));
    let picked = train::boost_sample(
        &env,
        &model,
        &cfg.loss,
        candidates * boost_ratio,
        candidates,
        &mut rng,
    )?;
    if let Some(path) = out {
        let mut body = String::from("terminal,log_reward\n");
        for (s, lr) in &picked {
            let _ = writeln!(body, "{},{lr}", env.encode_state(s));
        }
        write_stamped(path, cfg, &body)?;
    }
    Ok(picked)
}

/// Learned-reward flavor used by diagnostics for a loss kind.
pub fn reward_source(kind: LossKind) -> &'static str {
    match kind {
        LossKind::Tb => "trajectory-ratio",
        _ => "state-flow",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_all_passes() {
        let (report, ok) = cmd_oracle(OracleSelect::Prop1, &OracleParams::default()).unwrap();
        assert!(ok, "prop1 oracle failed:\n{report}");
        let (report, ok) = cmd_oracle(
            OracleSelect::Prop3,
            &OracleParams {
                l: Some(5),
                k: Some(2),
                ..OracleParams::default()
            },
        )
        .unwrap();
        assert!(ok, "prop3 oracle failed:\n{report}");
    }

    #[test]
    fn oracle_prop3_condition_unmet_still_succeeds() {
        // gamma chosen inside (gamma_0, f1(4)) so that alpha <= 4: the
        // separation is reported, not asserted
        let params = OracleParams {
            gamma: Some(200.0),
            ..OracleParams::default()
        };
        let (report, ok) = cmd_oracle(OracleSelect::Prop3, &params).unwrap();
        assert!(ok, "{report}");
        assert!(report.contains("condition unmet"), "{report}");
    }
}
