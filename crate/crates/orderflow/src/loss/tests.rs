use super::*;
use crate::autodiff::{Activation, FlowModel};
use crate::env::{ActionId, EnvDescriptor, ObjectiveSpec, State};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid_env(d: usize, h: usize) -> Env {
    Env::new(EnvDescriptor {
        grid_dim: d,
        side: h,
        ..EnvDescriptor::default()
    })
    .unwrap()
}

fn tabular(env: &Env, logz: f64) -> FlowModel {
    FlowModel::for_env(env, true, Vec::new(), Activation::Relu, logz, 0).unwrap()
}

fn traj(env: &Env, actions: &[usize]) -> Trajectory {
    let acts: Vec<ActionId> = actions.iter().map(|&a| ActionId(a)).collect();
    Trajectory::from_actions(env, &acts).unwrap()
}

fn set_table(model: &mut FlowModel, slice: &str, row: usize, width: usize, vals: &[f64]) {
    let start = model.params.range(slice).unwrap().start;
    let storage = model.params.values_mut();
    for (k, &v) in vals.iter().enumerate() {
        storage[start + row * width + k] = v;
    }
}

// ---- order-preserving losses -------------------------------------------

#[test]
fn op_pareto_equal_rewards_non_dominated_is_zero() {
    let env = grid_env(1, 2);
    let model = tabular(&env, 0.0);
    let mut tape = Tape::new(&model.params);
    let a = tape.scalar_const(0.7);
    let b = tape.scalar_const(0.7);
    // mutually non-dominated vectors
    let entries = vec![(vec![1.0, 0.0], a), (vec![0.0, 1.0], b)];
    let loss = op_loss_pareto(&mut tape, &entries).unwrap();
    assert!(tape.scalar(loss).abs() < 1e-14);
}

#[test]
fn op_pareto_two_points_hand_value() {
    // u(a) strictly dominated, R = (1/16, 1): loss = -log(1/(1 + 1/16))
    let env = grid_env(1, 2);
    let model = tabular(&env, 0.0);
    let mut tape = Tape::new(&model.params);
    let la = tape.scalar_const((1.0f64 / 16.0).ln());
    let lb = tape.scalar_const(0.0);
    let entries = vec![(vec![0.1, 0.1], la), (vec![0.2, 0.2], lb)];
    let loss = op_loss_pareto(&mut tape, &entries).unwrap();
    let expect = (17.0f64 / 16.0).ln();
    assert!((tape.scalar(loss) - expect).abs() < 1e-12);
}

#[test]
fn op_pareto_matches_bruteforce_probability_vectors() {
    let env = grid_env(1, 2);
    let model = tabular(&env, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let us: Vec<Vec<f64>> = (0..4)
            .map(|_| vec![rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        let logr: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();

        let mut tape = Tape::new(&model.params);
        let entries: Vec<(Vec<f64>, crate::autodiff::NodeId)> = us
            .iter()
            .zip(&logr)
            .map(|(u, &l)| (u.clone(), tape.scalar_const(l)))
            .collect();
        let loss_id = op_loss_pareto(&mut tape, &entries).unwrap();
        let loss = tape.scalar(loss_id);

        // brute force from explicit probability vectors
        let member = pareto_membership(&us);
        let k = member.iter().filter(|&&m| m).count() as f64;
        let z: f64 = logr.iter().map(|l| l.exp()).sum();
        let mut kl = 0.0;
        for i in 0..4 {
            if member[i] {
                let py = 1.0 / k;
                let ph = logr[i].exp() / z;
                kl += py * (py.ln() - ph.ln());
            }
        }
        assert!((loss - kl).abs() < 1e-10, "{loss} vs {kl}");
    }
}

#[test]
fn op_pareto_rejects_tiny_batches() {
    let env = grid_env(1, 2);
    let model = tabular(&env, 0.0);
    let mut tape = Tape::new(&model.params);
    let a = tape.scalar_const(0.0);
    assert!(op_loss_pareto(&mut tape, &[(vec![1.0], a)]).is_err());
}

#[test]
fn op_pairwise_ties_and_chains() {
    let env = grid_env(1, 2);
    let model = tabular(&env, 0.0);

    // equal objectives and equal rewards: zero
    let mut tape = Tape::new(&model.params);
    let a = tape.scalar_const(-1.3);
    let b = tape.scalar_const(-1.3);
    let loss = op_loss_pairwise(&mut tape, &[(0.5, a, 0.5, b)]);
    assert!(tape.scalar(loss).abs() < 1e-14);

    // ranked chain with the geometric rewards gamma^(i/n - 1) over
    // neighboring pairs: every pair has ratio gamma^(-1/n), so the evaluated
    // sum is n * log(1 + gamma^(-1/n)). (For n = 1 this equals
    // n * log(1 + 1/gamma).)
    for (n, gamma) in [(1usize, 16.0f64), (4, 16.0), (6, 1000.0)] {
        let mut tape = Tape::new(&model.params);
        let nodes: Vec<crate::autodiff::NodeId> = (0..=n)
            .map(|i| tape.scalar_const(gamma.ln() * (i as f64 / n as f64 - 1.0)))
            .collect();
        let pairs: Vec<(f64, crate::autodiff::NodeId, f64, crate::autodiff::NodeId)> = (1..=n)
            .map(|i| ((i - 1) as f64, nodes[i - 1], i as f64, nodes[i]))
            .collect();
        let loss = op_loss_pairwise(&mut tape, &pairs);
        let expect = n as f64 * (1.0 + gamma.powf(-1.0 / n as f64)).ln();
        assert!(
            (tape.scalar(loss) - expect).abs() < 1e-12,
            "n={n} gamma={gamma}"
        );
    }
}

// ---- TB-induced rewards and balance losses ------------------------------

#[test]
fn reward_tb_direct_substitution() {
    // One-step grid: log R = log Z + log P_F(stop | s0), no backward terms.
    let env = grid_env(1, 2);
    let cfg = LossConfig::default();

    // log Z = log 2 and P_F = 0.5 gives R = 1
    let model = tabular(&env, (2.0f64).ln());
    let t = traj(&env, &[1]); // stop at s0
    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    let logr = reward_tb(&mut tape, &mut ctx, &t).unwrap();
    assert!((tape.scalar(logr).exp() - 1.0).abs() < 1e-12);

    // a saturated policy gives P_F ~ 1 along the single path; with log Z = 0
    // the learned reward is 1
    let mut model = tabular(&env, 0.0);
    set_table(&mut model, "pf.table", 0, 2, &[-50.0, 50.0]);
    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    let logr = reward_tb(&mut tape, &mut ctx, &t).unwrap();
    assert!((tape.scalar(logr).exp() - 1.0).abs() < 1e-10);
}

#[test]
fn tb_loss_residual_squared() {
    let env = grid_env(1, 2);
    let cfg = LossConfig::default();
    let model = tabular(&env, 0.0);
    let t = traj(&env, &[1]);

    // satisfied constraint: target equals log Z + log P_F
    let satisfied = 0.0 + (0.5f64).ln();
    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    let loss = tb_loss(&mut tape, &mut ctx, &t, satisfied).unwrap();
    assert!(tape.scalar(loss).abs() < 1e-14);

    // residual r gives loss r^2
    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    let loss = tb_loss(&mut tape, &mut ctx, &t, satisfied - 0.7).unwrap();
    assert!((tape.scalar(loss) - 0.49).abs() < 1e-12);

    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    assert!(tb_loss(&mut tape, &mut ctx, &t, f64::NAN).is_err());
}

#[test]
fn db_two_state_chain_balances() {
    // F(s0) = 2, P_F = 0.5, R(x) = 1, P_B = 1 satisfies detailed balance.
    let env = grid_env(1, 2);
    let cfg = LossConfig::default();
    let mut model = tabular(&env, 0.0);
    let s0 = env.initial_state();
    let row = env.state_index(&s0);
    set_table(&mut model, "flow.table", row, 1, &[(2.0f64).ln()]);
    let t = traj(&env, &[1]);
    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    let loss = db_transition_loss(
        &mut tape,
        &mut ctx,
        &t.states[0],
        t.actions[0],
        &t.states[1],
        Some(0.0),
    )
    .unwrap();
    assert!(tape.scalar(loss).abs() < 1e-13);
}

#[test]
fn fm_balanced_state_is_zero() {
    // A state whose in-flow equals its out-flow has zero flow-matching loss.
    // With zero logits every edge has flow 1; state (1) in a 1-D grid of
    // side 3 has one in-edge and (with zero logits) lse over in = 0, while
    // out-edges are inc + stop: lse = log 2. Set the parent edge flow to
    // log 2 to balance.
    let env = grid_env(1, 3);
    let cfg = LossConfig {
        kind: LossKind::Fm,
        ..LossConfig::default()
    };
    let mut model = tabular(&env, 0.0);
    let s0 = env.initial_state();
    let row = env.state_index(&s0);
    // edge flows out of s0: inc gets log 2, stop stays 0
    set_table(&mut model, "pf.table", row, 2, &[(2.0f64).ln(), 0.0]);
    let mid = env.step(&s0, ActionId(0)).unwrap();
    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    let loss = fm_state_loss(&mut tape, &mut ctx, &mid).unwrap();
    assert!(tape.scalar(loss).abs() < 1e-13);
}

#[test]
fn subtb_three_state_chain_hand_enumeration() {
    // trajectory s0 -> s1 -> x on a 1-D grid of side 2
    let env = grid_env(1, 2);
    let cfg = LossConfig {
        kind: LossKind::SubTb,
        order_preserving: false,
        ..LossConfig::default()
    };
    let mut model = tabular(&env, 0.0);
    let s0 = env.initial_state();
    let s1 = env.step(&s0, ActionId(0)).unwrap();
    let (r0, r1) = (env.state_index(&s0), env.state_index(&s1));
    set_table(&mut model, "flow.table", r0, 1, &[0.3]);
    set_table(&mut model, "flow.table", r1, 1, &[-0.2]);
    let t = traj(&env, &[0, 1]);
    let rho = cfg.log_reward_target(&t.objective).unwrap();
    let lambda = 0.9;

    let lpf_inc = (0.5f64).ln(); // zero logits, two legal actions at s0
    let r01 = 0.3 + lpf_inc - (-0.2);
    let r12 = -0.2 + 0.0 - rho; // stop is the only action at s1
    let r02 = 0.3 + lpf_inc + 0.0 - rho;
    let expect =
        (lambda * (r01 * r01 + r12 * r12) + lambda * lambda * (r02 * r02))
            / (2.0 * lambda + lambda * lambda);

    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    let loss = subtb_loss(&mut tape, &mut ctx, &t, lambda, Some(rho)).unwrap();
    assert!((tape.scalar(loss) - expect).abs() < 1e-12);
}

#[test]
fn kl_reg_examples() {
    let env = grid_env(2, 4);
    let cfg = LossConfig {
        pb: PbMode::TrainableKl,
        lambda_kl: 1.0,
        ..LossConfig::default()
    };

    // uniform P_B (zero logits): zero KL
    let model = tabular(&env, 0.0);
    let t = traj(&env, &[0, 1, 2]);
    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    let kl = kl_reg(&mut tape, &mut ctx, &t).unwrap();
    assert!(tape.scalar(kl).abs() < 1e-14);

    // a single backward action at every interior state: zero
    let t_axis = traj(&env, &[0, 0, 2]); // states (1,0), (2,0) each have one parent
    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    let kl = kl_reg(&mut tape, &mut ctx, &t_axis).unwrap();
    assert!(tape.scalar(kl).abs() < 1e-14);

    // P_B = (0.9, 0.1) at the one state with two legal backward actions
    let mut model = tabular(&env, 0.0);
    let s11 = State {
        cells: vec![1, 1],
        terminal: false,
    };
    let row = env.state_index(&s11);
    set_table(&mut model, "pb.table", row, 2, &[(0.9f64).ln(), (0.1f64).ln()]);
    let t = traj(&env, &[0, 1, 2]); // (0,0) -> (1,0) -> (1,1) -> stop
    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    let kl = kl_reg(&mut tape, &mut ctx, &t).unwrap();
    let expect = 0.9 * (1.8f64).ln() + 0.1 * (0.2f64).ln();
    assert!((tape.scalar(kl) - expect).abs() < 1e-12);
}

// ---- scalarization -------------------------------------------------------

#[test]
fn scalarize_preference_examples() {
    assert_eq!(scalarize_preference(&[0.3, 0.9], &[1.0, 0.0]).unwrap(), 0.3);
    assert_eq!(
        scalarize_preference(&[0.2, 0.8], &[0.5, 0.5]).unwrap(),
        0.5
    );
    assert!(scalarize_preference(&[0.2, 0.8], &[0.7, 0.7]).is_err());
    assert!(scalarize_preference(&[0.2, 0.8], &[1.5, -0.5]).is_err());

    // beta = 2 raises the scalarized reward to 0.25
    let cfg = LossConfig {
        order_preserving: false,
        beta: 2.0,
        preference: Some(vec![0.5, 0.5]),
        ..LossConfig::default()
    };
    let target = cfg.log_reward_target(&[0.2, 0.8]).unwrap();
    assert!((target.exp() - 0.25).abs() < 1e-12);
}

// ---- composite -----------------------------------------------------------

#[test]
fn composite_tb_op_symmetric_batch_is_zero() {
    // two mirror trajectories with equal objectives and a symmetric model
    let env = grid_env(2, 4);
    let model = tabular(&env, 0.0);
    let cfg = LossConfig::default();
    let batch = vec![traj(&env, &[0, 1, 2]), traj(&env, &[1, 0, 2])];
    assert_eq!(batch[0].objective, batch[1].objective);
    let v = composite_value(&env, &model, &cfg, &batch).unwrap();
    assert!(v.abs() < 1e-12, "loss {v}");
}

#[test]
fn composite_db_op_lambda_zero_matches_bare_mdp_term() {
    let env = grid_env(2, 4);
    let model = FlowModel::for_env(&env, false, vec![12], Activation::Relu, 0.0, 5).unwrap();
    let cfg = LossConfig {
        kind: LossKind::Db,
        lambda_op: 0.0,
        ..LossConfig::default()
    };
    let batch = vec![traj(&env, &[0, 1, 2]), traj(&env, &[0, 0, 2])];
    let v = composite_value(&env, &model, &cfg, &batch).unwrap();

    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    let parts: Vec<crate::autodiff::NodeId> = batch
        .iter()
        .map(|t| mdp_loss(&mut tape, &mut ctx, t, None).unwrap())
        .collect();
    let mean = tape.mean(&parts);
    let op = {
        let entries: Vec<(Vec<f64>, crate::autodiff::NodeId)> = batch
            .iter()
            .map(|t| {
                let mut c2 = LossContext::new(&env, &model, &cfg);
                let id = c2.log_learned_reward(&mut tape, t).unwrap();
                (t.objective.clone(), id)
            })
            .collect();
        let mut pairs = Vec::new();
        pairs.push((entries[0].0[0], entries[0].1, entries[1].0[0], entries[1].1));
        let s = op_loss_pairwise(&mut tape, &pairs);
        tape.scale(s, 1.0)
    };
    let _ = op; // lambda is zero: only the bare term matters
    let expect = tape.scalar(mean);
    assert_eq!(v.to_bits(), expect.to_bits());
}

#[test]
fn composite_non_tb_matches_hand_assembly() {
    let env = grid_env(2, 4);
    let model = FlowModel::for_env(&env, false, vec![12], Activation::Relu, 0.0, 9).unwrap();
    let cfg = LossConfig {
        kind: LossKind::Db,
        lambda_op: 0.7,
        ..LossConfig::default()
    };
    let batch = vec![
        traj(&env, &[0, 1, 2]),
        traj(&env, &[0, 0, 2]),
        traj(&env, &[1, 2]),
    ];
    let v = composite_value(&env, &model, &cfg, &batch).unwrap();

    // hand assembly: mean MDP + lambda * mean-over-pairs of the sorted chain
    let mut tape = Tape::new(&model.params);
    let mut ctx = LossContext::new(&env, &model, &cfg);
    let parts: Vec<crate::autodiff::NodeId> = batch
        .iter()
        .map(|t| mdp_loss(&mut tape, &mut ctx, t, None).unwrap())
        .collect();
    let mdp = tape.mean(&parts);
    let entries: Vec<(f64, crate::autodiff::NodeId)> = batch
        .iter()
        .map(|t| {
            let id = ctx.log_learned_reward(&mut tape, t).unwrap();
            (t.objective[0], id)
        })
        .collect();
    let mut idx: Vec<usize> = (0..entries.len()).collect();
    idx.sort_by(|&i, &j| entries[i].0.partial_cmp(&entries[j].0).unwrap());
    let pairs: Vec<(f64, crate::autodiff::NodeId, f64, crate::autodiff::NodeId)> = idx
        .windows(2)
        .map(|w| {
            (
                entries[w[0]].0,
                entries[w[0]].1,
                entries[w[1]].0,
                entries[w[1]].1,
            )
        })
        .collect();
    let op_sum = op_loss_pairwise(&mut tape, &pairs);
    let op_mean = tape.scale(op_sum, 1.0 / pairs.len() as f64);
    let op_scaled = tape.scale(op_mean, 0.7);
    let total = tape.add(mdp, op_scaled);
    let expect = tape.scalar(total);
    assert!((v - expect).abs() < 1e-12);
}

#[test]
fn composite_rejects_pairwise_for_multi_objective() {
    let env = Env::new(EnvDescriptor {
        side: 8,
        objectives: ObjectiveSpec::Named(vec![
            crate::env::NamedObjective::Branin,
            crate::env::NamedObjective::Currin,
        ]),
        ..EnvDescriptor::default()
    })
    .unwrap();
    let cfg = LossConfig {
        pairing: Pairing::SortedNeighbors,
        ..LossConfig::default()
    };
    assert!(matches!(cfg.validate(&env), Err(Error::Config(_))));
}

#[test]
fn logit_shift_invariance() {
    // adding a constant to all policy logits leaves TB/DB/subTB losses
    // unchanged within 1e-10
    let env = grid_env(2, 4);
    let batch = vec![traj(&env, &[0, 1, 2]), traj(&env, &[1, 1, 2])];
    for kind in [LossKind::Tb, LossKind::Db, LossKind::SubTb] {
        for op in [true, false] {
            let cfg = LossConfig {
                kind,
                order_preserving: op,
                pb: PbMode::Trainable,
                ..LossConfig::default()
            };
            let mut model = tabular(&env, 0.4);
            let fill = |name: &str, v: f64, m: &mut FlowModel| {
                for x in m.params.slice_mut(name).unwrap() {
                    *x = v;
                }
            };
            fill("pf.table", 0.3, &mut model);
            fill("pb.table", -0.2, &mut model);
            fill("flow.table", 0.1, &mut model);
            let base = composite_value(&env, &model, &cfg, &batch).unwrap();
            fill("pf.table", 0.3 + 5.0, &mut model);
            fill("pb.table", -0.2 + 3.0, &mut model);
            let shifted = composite_value(&env, &model, &cfg, &batch).unwrap();
            assert!(
                (base - shifted).abs() < 1e-10,
                "{kind:?} op={op}: {base} vs {shifted}"
            );
        }
    }
}

#[test]
fn op_loss_is_nonnegative_kl() {
    let env = grid_env(2, 4);
    let model = FlowModel::for_env(&env, false, vec![12], Activation::Relu, 0.0, 21).unwrap();
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let mut batch = Vec::new();
        for _ in 0..4 {
            let mut s = env.initial_state();
            let mut acts = Vec::new();
            while !s.terminal {
                let legal = env.forward_actions(&s).unwrap();
                let a = legal[rng.gen_range(0..legal.len())];
                acts.push(a.0);
                s = env.step(&s, a).unwrap();
            }
            batch.push(traj(&env, &acts));
        }
        let v = composite_value(&env, &model, &cfg, &batch).unwrap();
        assert!(v >= -1e-12, "KL must be nonnegative, got {v}");
    }
}

#[test]
fn gradients_match_finite_differences_smoke() {
    // a quick version of the full acceptance sweep
    let env = grid_env(2, 3);
    let batch = vec![traj(&env, &[0, 1, 2]), traj(&env, &[1, 2]), traj(&env, &[0, 0, 2])];
    for (kind, op, pb) in [
        (LossKind::Tb, true, PbMode::Trainable),
        (LossKind::Db, true, PbMode::UniformFixed),
        (LossKind::Fm, false, PbMode::UniformFixed),
        (LossKind::SubTb, false, PbMode::TrainableKl),
    ] {
        let cfg = LossConfig {
            kind,
            order_preserving: op,
            lambda_kl: if matches!(pb, PbMode::TrainableKl) { 0.5 } else { 0.0 },
            pb,
            ..LossConfig::default()
        };
        let model = FlowModel::for_env(&env, false, vec![10], Activation::LeakyRelu, 0.2, 3).unwrap();
        let (_, grad) = composite_value_and_grad(&env, &model, &cfg, &batch).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        let mut num = 0.0;
        let mut den = 0.0;
        for _ in 0..16 {
            let i = rng.gen_range(0..model.params.len());
            let mut plus = model.clone();
            plus.params.values_mut()[i] += h;
            let mut minus = model.clone();
            minus.params.values_mut()[i] -= h;
            let fp = composite_value(&env, &plus, &cfg, &batch).unwrap();
            let fm = composite_value(&env, &minus, &cfg, &batch).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            num += (grad[i] - fd) * (grad[i] - fd);
            den += fd * fd;
        }
        let rel = (num / den.max(1e-30)).sqrt();
        assert!(rel < 1e-4, "{kind:?} op={op:?}: rel err {rel}");
    }
}
