mod common;

use std::time::Instant;

use edgebid::baselines::{
    dqn_policy_step, make_variant, sib_episode, sib_policy, Dqn, DqnConfig, McReading, QLearner, SibConfig, ToyMdp,
    Transition, VariantTag,
};
use edgebid::env::Env;
use edgebid::maddpg::{Maddpg, TrainConfig};
use edgebid::nn::{Head, Mlp};
use edgebid::{stream_rng, Stream};

#[test]
fn full_exploration_is_uniform_over_joint_actions() {
    let sys = common::small_system();
    let dqn = Dqn::new(sys.clone(), DqnConfig::default(), &mut stream_rng(1, Stream::Init)).unwrap();
    let n_actions = dqn.actions.len();
    assert_eq!(n_actions, 9);
    let features = vec![0.5; 6];
    let mut rng = stream_rng(1, Stream::Policy);
    let draws = 90_000;
    let mut counts = vec![0usize; n_actions];
    for _ in 0..draws {
        counts[dqn_policy_step(&features, &dqn.learner.online, 1.0, &mut rng).unwrap()] += 1;
    }
    let expected = draws as f64 / n_actions as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9% quantile of chi-square with 8 degrees of freedom.
    assert!(chi2 < 26.12, "chi-square {chi2}");
}

#[test]
fn toy_mdp_matches_value_iteration() {
    let start = Instant::now();
    let mdp = ToyMdp::two_state();
    let exact = mdp.value_iteration(1e-14);
    let learner = mdp
        .learn(4000, 32, 1e-3, 0.01, &mut stream_rng(2, Stream::Policy))
        .unwrap();
    for (s, row) in exact.iter().enumerate() {
        let q = learner.q_values(&mdp.encode(s)).unwrap();
        for (a, want) in row.iter().enumerate() {
            assert!((q[a] - want).abs() <= 1e-2, "Q({s},{a}) = {} vs {want}", q[a]);
        }
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn zero_learning_rate_keeps_online_net() {
    let net = Mlp::new(&[2, 8, 2], Head::Identity, &mut stream_rng(3, Stream::Init)).unwrap();
    let mut learner = QLearner::new(net.clone(), 0.0, 0.9, 0.01);
    let t = Transition {
        state: vec![1.0, 0.0],
        action: 1,
        reward: 5.0,
        next_state: vec![0.0, 1.0],
        terminal: false,
    };
    for _ in 0..10 {
        learner.td_update(&[&t]).unwrap();
    }
    assert_eq!(learner.online, net);
}

#[test]
fn infeasible_direct_pick_falls_back_to_local() {
    let mut sys = common::small_system();
    for md in &mut sys.devices {
        md.mean_snr = 1e-9;
    }
    let mut dqn = Dqn::new(sys.clone(), DqnConfig::default(), &mut stream_rng(4, Stream::Init)).unwrap();
    let mut env = Env::new(sys, stream_rng(4, Stream::Environment)).unwrap();
    let m = dqn
        .run_episode(&mut env, 0, 1.0, None, &mut stream_rng(4, Stream::Policy))
        .unwrap();
    assert!(m.served.iter().all(|&s| s == 0), "{:?}", m.served);
    assert!(m.spent.iter().all(|&s| s == 0.0));
    assert!(m.ssim.iter().all(|&s| s == 0.0));
}

#[test]
fn sib_ratio_choice() {
    let sys = common::default_system();
    let md = &sys.devices[0];
    let pick = |target: f64| {
        md.ratios[sib_policy(
            md,
            sys.horizon,
            &SibConfig {
                target_ssim: target,
                bid: None,
            },
        )
        .1]
    };
    let s_max = md.surrogate.ssim(1.0);
    assert_eq!(pick(s_max), 1.0);
    assert_eq!(pick(0.26), 0.4);
    assert_eq!(pick(md.surrogate.ssim(0.6) + 1e-9), 0.6);
    assert_eq!(pick(0.0), 0.4);
    let (bid, _) = sib_policy(
        md,
        sys.horizon,
        &SibConfig {
            target_ssim: 0.26,
            bid: None,
        },
    );
    assert!((bid - md.initial_budget / sys.horizon as f64).abs() < 1e-15);
}

#[test]
fn sib_admits_evenly_among_bidders() {
    let mut sys = common::small_system();
    for md in &mut sys.devices {
        md.mean_snr = 1e9;
    }
    let mut env = Env::new(sys, stream_rng(5, Stream::Environment)).unwrap();
    let cfg = SibConfig {
        target_ssim: 0.26,
        bid: Some(0.1),
    };
    let mut served = [0usize; 2];
    for t in 0..2000 {
        let m = sib_episode(&mut env, &cfg, t).unwrap();
        served[0] += m.served[0];
        served[1] += m.served[1];
    }
    let share = served[0] as f64 / (served[0] + served[1]) as f64;
    assert_eq!(served[0] + served[1], 2000 * 10);
    assert!((share - 0.5).abs() < 0.01, "share {share}");
}

#[test]
fn variants_differ_from_base_in_one_field() {
    let base = TrainConfig::default();
    let dd = make_variant(&base, VariantTag::Dd, McReading::default());
    assert_eq!(
        TrainConfig {
            mask_entropy: false,
            ..dd.clone()
        },
        base
    );
    assert!(dd.mask_entropy);
    for tag in [VariantTag::Dt, VariantTag::Mc] {
        let v = make_variant(&base, tag, McReading::default());
        assert!(v.ratio_pin.is_some());
        assert_eq!(TrainConfig { ratio_pin: None, ..v }, base);
    }
    assert_eq!("MC".parse::<VariantTag>().unwrap(), VariantTag::Mc);
    assert!("xx".parse::<VariantTag>().is_err());
}

#[test]
fn pinned_variants_never_change_ratio() {
    let sys = common::small_system();
    let base = TrainConfig {
        episodes: 3,
        batch_episodes: 2,
        hidden_units: 8,
        ..TrainConfig::default()
    };
    for (tag, reading, want) in [
        (VariantTag::Dt, McReading::MaxCompression, [0, 0]),
        (VariantTag::Mc, McReading::MaxCompression, [3, 3]),
        (VariantTag::Mc, McReading::LargestValue, [0, 0]),
    ] {
        let cfg = make_variant(&base, tag, reading);
        let mut m = Maddpg::new(sys.clone(), cfg, &mut stream_rng(6, Stream::Init)).unwrap();
        let mut env = Env::new(sys.clone(), stream_rng(6, Stream::Environment)).unwrap();
        let mut rng = stream_rng(6, Stream::Policy);
        m.train(&mut env, &mut rng, |_| Ok(())).unwrap();
        for t in 0..3 {
            let (ep, _) = m.collect_episode(&mut env, t, &mut rng).unwrap();
            for slot in &ep.slots {
                assert_eq!([slot.actions[0].ratio_index, slot.actions[1].ratio_index], want);
            }
        }
    }
}

#[test]
fn dqn_config_rejects_bad_values() {
    assert!(DqnConfig::default().validate().is_ok());
    assert!(DqnConfig {
        batch_size: 0,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(SibConfig {
        target_ssim: f64::NAN,
        bid: None
    }
    .validate()
    .is_err());
}
