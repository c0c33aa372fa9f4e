#![allow(dead_code)]

use metacrs::catalog::{generate_catalog, prepare_dataset, DataConfig, Dataset, FmConfig, Role, SyntheticSpec};
use metacrs::encoder::{init_encoder, EmbeddingVars, EncoderConfig};
use metacrs::metalearn::{Env, MetaConfig, MetaParams, run_episode, Learn};
use metacrs::numerics::{finite_diff_check, GradCheckOptions, GradCheckReport, Graph, ParamSet, Tensor};
use metacrs::policy::{
    init_policy, reinforce_loss, rollout, user_posterior, Chooser, Nets, PolicyConfig, ReplayResponder,
    RolloutOptions, SampleMode, SimResponder,
};
use metacrs::recommender::{init_recommender, recommendation_loss};
use metacrs::rng::stream;
use metacrs::simulator::{plan_sessions, returns, Budget, Episode, RewardSpec};
use metacrs::Result;
use rand_chacha::ChaCha8Rng;

pub fn small_data_config(seed: u64) -> DataConfig {
    DataConfig {
        k_pref: 3,
        interactions_per_user: 12,
        fm: FmConfig {
            dim: 8,
            epochs: 5,
            fold_in_epochs: 5,
            seed,
            ..FmConfig::default()
        },
        seed,
        ..DataConfig::default()
    }
}

pub fn small_dataset(seed: u64) -> Dataset {
    let raw = generate_catalog(&SyntheticSpec::small(), seed).unwrap();
    prepare_dataset(&raw, &small_data_config(seed)).unwrap()
}

pub fn small_meta(seed: u64) -> MetaConfig {
    MetaConfig {
        users_per_batch: 3,
        epochs: 3,
        validate_every: 1,
        finetune_episodes: 2,
        budget: Budget {
            exploration: 2,
            support: 3,
            query: 3,
        },
        rollout: RolloutOptions {
            k_a: 4,
            k_i: 4,
            k_rec: 4,
            max_turns: 5,
        },
        encoder: EncoderConfig {
            ff_dim: 16,
            ..EncoderConfig::default()
        },
        policy: PolicyConfig {
            hidden: 8,
            reward_dim: 3,
        },
        seed,
        ..MetaConfig::default()
    }
}

/// Policy, encoder and recommender in one bundle (their names are disjoint).
pub fn composite_params(dim: usize, seed: u64) -> ParamSet {
    let mut rng = stream(seed, &[7]);
    let policy = init_policy(dim, &PolicyConfig { hidden: 6, reward_dim: 3 }, false, &mut rng);
    let enc = init_encoder(&EncoderConfig { ff_dim: 12, ..EncoderConfig::default() }, dim, &mut rng);
    let rec = init_recommender(dim, &mut rng);
    policy.merged(&enc).unwrap().merged(&rec).unwrap()
}

/// Recorded conversation replayed by the composite loss.
pub struct Recorded {
    pub episode: Episode,
    pub steps: Vec<metacrs::policy::StepRecord>,
    pub h0: Vec<f64>,
}

fn composite_nets(g: &mut Graph, ds: &Dataset, ps: &ParamSet, trainable: bool) -> Nets {
    let b = g.bind(ps, trainable);
    Nets {
        policy: b.clone(),
        rec: b.clone(),
        enc: b,
        emb: EmbeddingVars::bind(g, &ds.embeddings, false),
        train_users: None,
    }
}

/// Samples conversations for test users until one succeeds after at least
/// two turns, so both the policy and the recommender terms are present.
pub fn record_successful(ds: &Dataset, ps: &ParamSet, opts: &RolloutOptions, seed: u64) -> Recorded {
    let rewards = RewardSpec::default();
    let items = ds.catalog.items_by_user();
    let hidden = ps.tensor("gru.b_hh").unwrap().len() / 3;
    for round in 0..200u64 {
        for u in ds.users(Role::Test) {
            let sessions = plan_sessions(
                &ds.catalog,
                u,
                &items[u],
                &ds.profile(u).pref_attrs,
                Budget::default(),
                seed,
                round,
            )
            .unwrap();
            let s = &sessions[0];
            let mut g = Graph::new();
            let nets = composite_nets(&mut g, ds, ps, false);
            let mut rng = stream(seed, &[round, u as u64]);
            let h0: Vec<f64> = (0..hidden).map(|i| 0.1 * ((i as f64) * 0.7).sin()).collect();
            let r = rollout(
                &mut g,
                &nets,
                &ds.catalog,
                &mut SimResponder {
                    session: s,
                    catalog: &ds.catalog,
                    rewards: &rewards,
                },
                (u, s.kind, s.target),
                &h0,
                opts,
                Chooser::Policy {
                    rng: &mut rng,
                    mode: SampleMode::Sample,
                },
                None,
            )
            .unwrap();
            if r.episode.success_turns().is_some_and(|k| k >= 2) {
                return Recorded {
                    episode: r.episode,
                    steps: r.steps,
                    h0,
                };
            }
        }
    }
    panic!("no successful conversation found");
}

/// REINFORCE loss plus recommendation loss of a replayed conversation, as a
/// function of every parameter of the composite bundle.
pub fn composite_loss(
    ds: &Dataset,
    ps: &ParamSet,
    rec: &Recorded,
    opts: &RolloutOptions,
    with_grad: bool,
) -> Result<(f64, Option<ParamSet>)> {
    let mut g = Graph::new();
    let nets = composite_nets(&mut g, ds, ps, true);
    let out = rollout::<ChaCha8Rng>(
        &mut g,
        &nets,
        &ds.catalog,
        &mut ReplayResponder::new(&rec.episode.turns),
        (rec.episode.user, rec.episode.kind, rec.episode.target),
        &rec.h0,
        opts,
        Chooser::Forced(&rec.steps),
        None,
    )?;
    let big_r = returns(&out.episode.rewards(), 0.999);
    let l_u = reinforce_loss(&mut g, &out.chosen, &big_r)?;
    let l_r = recommendation_loss(&mut g, &out.rec_turns, out.episode.target, out.episode.success_turns())?
        .expect("recorded conversation succeeded");
    let loss = g.add(l_u, l_r)?;
    let value = g.scalar(loss);
    if !with_grad {
        return Ok((value, None));
    }
    g.backward(loss)?;
    Ok((value, Some(g.collect_grads(&nets.policy, ps)?)))
}

/// Autodiff against central differences (h = 1e-5) on `samples` random
/// coordinates of the encoder → GRU → policy head → recommender composite.
pub fn composite_gradcheck(seed: u64, samples: usize) -> GradCheckReport {
    let ds = small_dataset(seed);
    let ps = composite_params(ds.embeddings.dim(), seed);
    let opts = RolloutOptions {
        k_a: 3,
        k_i: 3,
        k_rec: 3,
        max_turns: 5,
    };
    let rec = record_successful(&ds, &ps, &opts, seed);
    let (_, grads) = composite_loss(&ds, &ps, &rec, &opts, true).unwrap();
    let f = |p: &ParamSet| composite_loss(&ds, p, &rec, &opts, false).map(|(v, _)| v);
    finite_diff_check(
        f,
        &ps,
        &grads.unwrap(),
        1e-3,
        GradCheckOptions {
            step: 1e-5,
            samples,
            seed,
            ..GradCheckOptions::default()
        },
    )
    .unwrap()
}

/// Runs exploration episodes of training users and returns the largest
/// `|Σ_t r_e − (log P(u|s_T) − log P(u|s_0))|`, with the final posterior
/// recomputed from the handed-off hidden state. Also returns the checked
/// episode count and the largest `|Σ_t r_e|` seen.
pub fn telescoping_max_error(ds: &Dataset, cfg: &MetaConfig, params: &MetaParams, users: usize) -> (f64, usize, f64) {
    let env = Env::new(ds, cfg.clone()).unwrap();
    let train = ds.users(Role::Train);
    let dim = ds.embeddings.dim();
    let mut table = Vec::with_capacity(train.len() * dim);
    for &u in &train {
        table.extend_from_slice(ds.embeddings.users.row(u));
    }
    let table = Tensor::matrix(train.len(), dim, table).unwrap();
    let prior = -(train.len() as f64).ln();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut largest = 0.0f64;
    for (pos, &u) in train.iter().enumerate().take(users) {
        let sessions = env.sessions(u, cfg.budget, 0).unwrap();
        let mut h = vec![0.0; cfg.policy.hidden];
        for s in sessions.iter().take(cfg.budget.exploration) {
            let out = run_episode(
                &env,
                &params.explore,
                &params.rec,
                &params.enc,
                s,
                &h,
                SampleMode::Sample,
                Learn::Explore,
                0,
            )
            .unwrap();
            let r_e = metacrs::policy::exploration_rewards(&out.log_post, train.len());
            let total: f64 = r_e.iter().sum();
            let mut g = Graph::new();
            let pb = g.bind(&params.explore, false);
            let hv = g.constant_vec(out.h_final.clone()).unwrap();
            let users = g.constant(table.clone());
            let post = user_posterior(&mut g, &pb, hv, users).unwrap();
            let last = g.value(post).data()[pos];
            worst = worst.max((total - (last - prior)).abs());
            largest = largest.max(total.abs());
            checked += 1;
            h = out.h_final;
        }
    }
    (worst, checked, largest)
}

/// Counts of a random-policy simulation run.
#[derive(Debug, Default)]
pub struct InvariantRun {
    pub episodes: usize,
    pub states: usize,
    pub violations: Vec<String>,
}

/// Drives `n` conversations with uniformly random actions and random item
/// rankings, checking after every turn that the target stays a candidate,
/// accepted and rejected attributes stay disjoint and `V⁺` never grows.
pub fn random_policy_invariants(ds: &Dataset, n: usize, max_turns: usize, seed: u64) -> InvariantRun {
    use metacrs::dialogue::{build_action_space, Action, Candidate, DialogueState};
    use rand::seq::SliceRandom;
    use rand::Rng;

    let rewards = RewardSpec::default();
    let items = ds.catalog.items_by_user();
    let users: Vec<usize> = (0..ds.catalog.n_users()).collect();
    let mut rng = stream(seed, &[11]);
    let mut run = InvariantRun::default();
    let mut round = 0u64;
    while run.episodes < n {
        let u = *users.choose(&mut rng).unwrap();
        let sessions = plan_sessions(&ds.catalog, u, &items[u], &ds.profile(u).pref_attrs, Budget::default(), seed, round)
            .unwrap();
        round += 1;
        for s in sessions {
            if run.episodes >= n {
                break;
            }
            run.episodes += 1;
            let mut state = DialogueState::new(ds.catalog.n_items(), max_turns).unwrap();
            let mut prev = state.candidates().to_vec();
            while !state.is_terminal() {
                let mut ranked = state.candidates().to_vec();
                ranked.shuffle(&mut rng);
                let space = build_action_space(&state, &ds.catalog, &ranked, 5, 5).unwrap();
                if space.is_empty() {
                    break;
                }
                let action = match space.get(rng.gen_range(0..space.len())).unwrap() {
                    Candidate::Attr(p) => Action::Ask { attr: p },
                    Candidate::Item(v) => Action::Recommend {
                        items: metacrs::dialogue::slate_for(v, &ranked, rng.gen_range(1..4)),
                    },
                };
                let (fb, _) = s.respond(&ds.catalog, &rewards, &state, &action).unwrap();
                state = state.apply_feedback(&ds.catalog, &action, fb).unwrap();
                run.states += 1;
                let tag = format!("user {u} episode {} turn {}", s.index, state.turn());
                if !state.is_candidate(s.target) {
                    run.violations.push(format!("{tag}: target left V+"));
                }
                if state.accepted_attrs().iter().any(|p| state.rejected_attrs().contains(p)) {
                    run.violations.push(format!("{tag}: P+ and P- intersect"));
                }
                if state.candidates().iter().any(|v| prev.binary_search(v).is_err()) {
                    run.violations.push(format!("{tag}: V+ grew"));
                }
                if let Err(e) = state.check_invariants(&ds.catalog) {
                    run.violations.push(format!("{tag}: {e}"));
                }
                prev = state.candidates().to_vec();
            }
        }
    }
    run
}

/// Random finished episodes: lengths in `1..=t`, success with probability one half.
pub fn random_traces(n: usize, t: usize, seed: u64) -> Vec<Episode> {
    use metacrs::dialogue::{Action, Feedback, Outcome, TurnRecord};
    use metacrs::simulator::EpisodeKind;
    use rand::Rng;

    let mut rng = stream(seed, &[13]);
    (0..n)
        .map(|_| {
            let success = rng.gen_bool(0.5);
            let len = if success { rng.gen_range(1..=t) } else { t };
            let turns = (0..len)
                .map(|i| {
                    let accept = success && i + 1 == len;
                    let ask = !accept && rng.gen_bool(0.5);
                    TurnRecord {
                        turn: i,
                        action: if ask {
                            Action::Ask { attr: rng.gen_range(0..30) }
                        } else {
                            Action::Recommend {
                                items: vec![rng.gen_range(0..500)],
                            }
                        },
                        feedback: match (ask, accept) {
                            (true, _) => {
                                if rng.gen_bool(0.5) {
                                    Feedback::Confirm
                                } else {
                                    Feedback::Dismiss
                                }
                            }
                            (false, true) => Feedback::Accept,
                            (false, false) => Feedback::Reject,
                        },
                        reward: 0.0,
                        candidates: 500,
                    }
                })
                .collect();
            Episode {
                user: rng.gen_range(0..30),
                kind: EpisodeKind::Query,
                target: 0,
                turns,
                outcome: if success {
                    Outcome::Success { turns: len }
                } else {
                    Outcome::Quit
                },
            }
        })
        .collect()
}

/// Independent tally: successes within `t` turns, failures counted as `t` turns.
pub fn tally(episodes: &[Episode], t: usize) -> (f64, f64) {
    let mut wins = 0usize;
    let mut turns = 0usize;
    for e in episodes {
        let last = e.turns.last().map(|r| r.feedback);
        let won = last == Some(metacrs::dialogue::Feedback::Accept) && e.turns.len() <= t;
        if won {
            wins += 1;
            turns += e.turns.len();
        } else {
            turns += t;
        }
    }
    (wins as f64 / episodes.len() as f64, turns as f64 / episodes.len() as f64)
}

/// Two candidates with equal scores over two recorded turns: the
/// recommendation loss before and after one SGD step with `alpha`.
pub fn two_candidate_fixture(alpha: f64) -> (f64, f64) {
    use metacrs::numerics::sgd_step;
    use metacrs::recommender::{score_items, TurnScores};

    let table = metacrs::catalog::EmbeddingTable {
        users: Tensor::matrix(1, 3, vec![0.0; 3]).unwrap(),
        items: Tensor::matrix(2, 3, vec![1.0, 0.0, 0.5, -0.5, 1.0, 0.0]).unwrap(),
        attrs: Tensor::matrix(1, 3, vec![0.0; 3]).unwrap(),
    };
    let mut rec = ParamSet::new();
    rec.insert("rec.w1", Tensor::zeros(&[3, 3]));
    rec.insert("rec.b1", Tensor::zeros(&[3]));
    let eval = |rec: &ParamSet| {
        let mut g = Graph::new();
        let b = g.bind(rec, true);
        let emb = EmbeddingVars::bind(&mut g, &table, false);
        let s = g.constant_vec(vec![0.4, -0.2, 0.7]).unwrap();
        let turns: Vec<TurnScores> = (0..2)
            .map(|_| TurnScores {
                candidates: vec![0, 1],
                scores: score_items(&mut g, &b, &emb, s, &[0, 1]).unwrap(),
            })
            .collect();
        let loss = recommendation_loss(&mut g, &turns, 1, Some(2)).unwrap().unwrap();
        let v = g.scalar(loss);
        g.backward(loss).unwrap();
        (v, g.collect_grads(&b, rec).unwrap())
    };
    let (before, grads) = eval(&rec);
    sgd_step(&mut rec, &grads, alpha).unwrap();
    let (after, _) = eval(&rec);
    (before, after)
}
