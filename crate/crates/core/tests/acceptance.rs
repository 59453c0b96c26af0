//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Run with `cargo test --test acceptance -- --nocapture`.

use rand::Rng;

use channel_rl::cli::{self, RunConfig};
use channel_rl::dqn::{Architecture, Hyperparams, QNetwork, Transition};
use channel_rl::env::{self, ChannelPlan, LinkModel};
use channel_rl::hil::{self, decode_frame, encode_frame, Frame, MsgType};
use channel_rl::rng;
use channel_rl::sim::{self, SimParams};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {id} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn reference_params(seed: u64, loss_probability: f64) -> SimParams {
    let mut params = SimParams::new(Hyperparams::default(), 2, seed);
    params.link = LinkModel { loss_probability, ack_always_delivered: true };
    params
}

#[test]
fn criterion_1_convergence_trend() {
    let mut rising = 0;
    let mut final_windows = Vec::new();
    for seed in SEEDS {
        let params = reference_params(seed, 0.0);
        let (_, metrics) = sim::run_training(&params).unwrap();
        let first = cli::first_window_mean(&metrics, 100);
        let last = cli::window_mean(&metrics, 100);
        if last > first {
            rising += 1;
        }
        final_windows.push(last);
    }
    let mean_final = final_windows.iter().sum::<f64>() / final_windows.len() as f64;
    let pass = rising >= 4 && mean_final >= 0.95;
    report(
        1,
        "convergence trend",
        pass,
        &format!(
            "rising final window in {rising}/5 seeds, per-seed final-window FSR {:?}, mean {mean_final:.4} (required >= 0.95)",
            final_windows.iter().map(|f| (f * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_2_testing_fsr() {
    let params = reference_params(1, 0.05);
    let (mut agents, _) = sim::run_training(&params).unwrap();
    let metrics = sim::run_testing(&mut agents, &params, 100).unwrap();
    let fsr = sim::mean_fsr(&metrics);
    let pass = (0.86..=0.96).contains(&fsr);
    report(2, "testing FSR", pass, &format!("mean FSR {fsr:.4}, required in [0.86, 0.96]"));
}

#[test]
fn criterion_3_baseline_gap() {
    let mut hits = 0;
    let mut gaps = Vec::new();
    let tmp = tempfile::tempdir().unwrap();
    for seed in SEEDS {
        let config = RunConfig {
            seed,
            loss_probability: 0.05,
            out_dir: tmp.path().join(format!("seed_{seed}")),
            ..Default::default()
        };
        let out = cli::cmd_compare(&config).unwrap();
        if out.improvement_points >= 15.0 {
            hits += 1;
        }
        gaps.push((out.improvement_points * 10.0).round() / 10.0);
    }
    let pass = hits >= 4;
    report(
        3,
        "baseline gap",
        pass,
        &format!("improvement >= 15 points in {hits}/5 seeds, gaps {gaps:?} points"),
    );
}

#[test]
fn criterion_4_oracle_equivalence() {
    let plan = ChannelPlan::default();
    let link = LinkModel::default();
    let slots = 100_000;
    let mut policy_rng = rng::derive(2024, 7);
    let mut worst: f64 = 0.0;

    // 9 random fixed policies plus the uniform pair (10 total)
    let mut policies: Vec<Vec<Vec<f64>>> = (0..9)
        .map(|_| {
            (0..2)
                .map(|_| {
                    let raw: Vec<f64> = (0..3).map(|_| policy_rng.random::<f64>() + 1e-3).collect();
                    let sum: f64 = raw.iter().sum();
                    raw.iter().map(|p| p / sum).collect()
                })
                .collect()
        })
        .collect();
    policies.push(vec![vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3]]);

    for (i, policy) in policies.iter().enumerate() {
        let expected = env::expected_fsr_oracle(&plan, &link, policy).unwrap();
        if i == 9 {
            assert!((expected - 4.0 / 9.0).abs() < 1e-12, "uniform oracle value");
        }
        let mut draw_rng = rng::derive(9000 + i as u64, 0);
        let mut env_rng = rng::derive(9100 + i as u64, 0);
        let mut successes = 0u64;
        for _ in 0..slots {
            let choices: Vec<usize> = policy
                .iter()
                .map(|dist| {
                    let u: f64 = draw_rng.random();
                    let mut acc = 0.0;
                    for (ch, p) in dist.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            return ch;
                        }
                    }
                    dist.len() - 1
                })
                .collect();
            let outcome = env::resolve_slot(&plan, &link, &choices, &mut env_rng).unwrap();
            successes += outcome.agents.iter().filter(|a| a.success).count() as u64;
        }
        let empirical = successes as f64 / (slots as f64 * 2.0);
        worst = worst.max((empirical - expected).abs());
    }
    let pass = worst <= 0.01;
    report(
        4,
        "oracle equivalence",
        pass,
        &format!("worst |monte-carlo - oracle| = {worst:.5} over 10 policies x {slots} slots"),
    );
}

#[test]
fn criterion_5_gradient_check() {
    let mut seed_rng = rng::derive(555, 0);
    let mut worst: f64 = 0.0;
    let step = 1e-4;

    for draw in 0..100 {
        let arch = Architecture::new(4 + (draw % 5), 3);
        let mut net = QNetwork::init(seed_rng.random(), arch);
        // move past the symmetric init and give the target its own weights
        for row in &mut net.theta_target.w2 {
            for w in row.iter_mut() {
                *w += seed_rng.random_range(-0.5..0.5);
            }
        }
        let batch: Vec<Transition> = (0..4)
            .map(|_| {
                Transition::from_ack(
                    seed_rng.random_range(0..2u8),
                    seed_rng.random_range(0..3),
                    seed_rng.random(),
                )
            })
            .collect();
        let targets: Vec<f64> =
            batch.iter().map(|t| net.double_dqn_target(t, 0.6)).collect();
        let (_, grad) = net.loss_and_gradient(&batch, &targets);

        let mut check = |get: &mut dyn FnMut(&mut QNetwork) -> &mut f64, analytic: f64| {
            let orig = *get(&mut net);
            *get(&mut net) = orig + step;
            let up = net.batch_loss(&batch, &targets);
            *get(&mut net) = orig - step;
            let down = net.batch_loss(&batch, &targets);
            *get(&mut net) = orig;
            let numeric = (up - down) / (2.0 * step);
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            worst = worst.max((analytic - numeric).abs() / denom);
        };

        for i in 0..arch.hidden_dim {
            for j in 0..arch.input_dim {
                check(&mut |n| &mut n.theta.w1[i][j], grad.w1[i][j]);
            }
            check(&mut |n| &mut n.theta.b1[i], grad.b1[i]);
        }
        for i in 0..arch.output_dim {
            for j in 0..arch.hidden_dim {
                check(&mut |n| &mut n.theta.w2[i][j], grad.w2[i][j]);
            }
            check(&mut |n| &mut n.theta.b2[i], grad.b2[i]);
        }
    }
    let pass = worst <= 1e-5;
    report(
        5,
        "gradient check",
        pass,
        &format!("worst relative error {worst:.2e} over 100 draws, tolerance 1e-5"),
    );
}

#[test]
fn criterion_6_algorithm_mechanics() {
    // epsilon schedule endpoints and strict decay
    let sched = channel_rl::dqn::EpsilonSchedule::new(500);
    let mut ok = sched.epsilon_at(1).unwrap() == 1.0 && sched.epsilon_at(500).unwrap() == 0.0;
    let mut prev = f64::INFINITY;
    for n in 1..=500 {
        let e = sched.epsilon_at(n).unwrap();
        ok &= e < prev && (0.0..=1.0).contains(&e);
        prev = e;
    }

    // target equals main exactly after each sync and is constant between syncs
    let hp = Hyperparams::default();
    let mut net = QNetwork::init(88, Architecture::new(16, 3));
    let mut sample_rng = rng::derive(12, 0);
    for step in 1..=40u32 {
        let t = Transition::from_ack(
            sample_rng.random_range(0..2u8),
            sample_rng.random_range(0..3),
            sample_rng.random(),
        );
        let frozen = net.theta_target.clone();
        net.train_step(&[t], &hp);
        ok &= net.theta_target == frozen;
        if step % hp.sync_period == 0 {
            net.sync_target();
            ok &= net.theta == net.theta_target;
        }
    }

    // N x T transitions per agent, every stored transition has reward == next_state
    let hp = Hyperparams { episodes: 50, steps_per_episode: 20, ..Default::default() };
    let params = SimParams::new(hp, 2, 4);
    let (agents, metrics) = sim::run_training(&params).unwrap();
    ok &= metrics.len() == 50;
    for agent in &agents {
        ok &= agent.buffer.len() == 50 * 20;
        ok &= agent.buffer.iter().all(|t| t.reward == t.next_state);
    }
    report(6, "algorithm mechanics", ok, "epsilon schedule, sync invariants, transition accounting");
}

#[test]
fn criterion_7_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str| {
        let config = RunConfig { seed: 3, out_dir: tmp.path().join(dir), ..Default::default() };
        cli::cmd_train(&config, false).unwrap();
        std::fs::read(tmp.path().join(dir).join("metrics.csv")).unwrap()
    };
    let csv_a = run("a");
    let csv_b = run("b");
    let csv_identical = csv_a == csv_b;

    let params = reference_params(3, 0.0);
    let (_, sim_metrics) = sim::run_training(&params).unwrap();
    let (_, hil_metrics) = hil::run_hil_training(&params).unwrap();
    let hil_identical = sim_metrics == hil_metrics;

    report(
        7,
        "determinism",
        csv_identical && hil_identical,
        &format!("byte-identical CSVs: {csv_identical}, HIL metrics identical: {hil_identical}"),
    );
}

#[test]
fn criterion_8_protocol() {
    // golden frame with hand-computed XOR checksum
    let frame = Frame::new(MsgType::AssignChannel, 0, vec![0x01]);
    let golden = vec![0x49, 0x54, 0x01, 0x01, 0x00, 0x01, 0x01, 0x1D];
    let mut ok = encode_frame(&frame).unwrap() == golden;

    // round-trip over generated frames
    let mut gen = rng::derive(31337, 0);
    for _ in 0..500 {
        let msg_type = [MsgType::AssignChannel, MsgType::TxResult, MsgType::Ping, MsgType::Pong, MsgType::Error]
            [gen.random_range(0..5)];
        let payload: Vec<u8> =
            (0..gen.random_range(0..=255usize)).map(|_| gen.random()).collect();
        let f = Frame::new(msg_type, gen.random(), payload);
        let bytes = encode_frame(&f).unwrap();
        let (decoded, _) = decode_frame(&bytes).unwrap();
        ok &= decoded == f;
    }

    // every single-bit corruption of the golden frame is detected
    for bit in 0..golden.len() * 8 {
        let mut corrupted = golden.clone();
        corrupted[bit / 8] ^= 1 << (bit % 8);
        if let Ok((f, _)) = decode_frame(&corrupted) {
            ok &= f != frame;
        }
    }

    // resync from up to 64 bytes of random garbage
    for trial in 0..200 {
        let mut garbage_rng = rng::derive(trial, 2);
        let garbage: Vec<u8> =
            (0..garbage_rng.random_range(0..=64usize)).map(|_| garbage_rng.random()).collect();
        let mut bytes = garbage;
        bytes.extend(&golden);
        let recovered = matches!(decode_frame(&bytes), Ok((ref f, _)) if *f == frame);
        ok &= recovered;
    }
    report(8, "protocol", ok, "golden bytes, round-trip, bit-flip detection, resync");
}
