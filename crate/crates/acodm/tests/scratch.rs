//! Temporary calibration harness (deleted before shipping).

use acodm::agent::{AgentConfig, CriticHead, DdpgAgent, ReplayBuffer, ReplayReward, Transition};
use acodm::corpus::DomainWeights;
use acodm::lm_env::AgentState;

fn quad_cfg() -> AgentConfig {
    AgentConfig {
        hidden_width: 32,
        depth: 6,
        gamma: 0.5,
        tau: 0.01,
        minibatch: 64,
        capacity: 5000,
        noise_start: 1.0,
        noise_end: 0.02,
        lr_start: 0.01,
        lr_end: 0.001,
        grad_clip: 1.0,
        logit_clamp: 0.0,
        critic_head: CriticHead::Scalar,
        standardize_rewards: false,
        replay_reward: ReplayReward::Raw,
        warmup_fit_steps: 0,
    }
}

fn run_quadratic(seed: u64, steps: usize, cfg: AgentConfig) -> (f64, Vec<f64>) {
    let k = 4;
    let target = [0.4, 0.3, 0.2, 0.1];
    let s0 = AgentState::zeros(k, 0);
    let state_dim = s0.dim();
    let mut agent = DdpgAgent::new(k, state_dim, cfg.clone(), seed).unwrap();
    let mut buffer = ReplayBuffer::new(cfg.capacity, seed ^ 0xABCD).unwrap();

    for t in 0..steps {
        let frac = t as f64 / (steps - 1) as f64;
        let noise = cfg.noise_start + (cfg.noise_end - cfg.noise_start) * frac;
        let a = agent.act(&s0, noise).unwrap();
        let r: f64 = -a
            .as_slice()
            .iter()
            .zip(&target)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        agent.observe_reward(&[r]);
        buffer.push(Transition {
            state: s0.clone(),
            action: a,
            reward: vec![r],
            state_next: s0.clone(),
        });
        if buffer.len() >= cfg.minibatch {
            let lr = acodm::lm_env::lr_schedule(t, steps, 0, cfg.lr_end, cfg.lr_start).unwrap();
            let batch = buffer.sample(cfg.minibatch);
            let y = agent.td_targets(&batch).unwrap();
            agent.critic_update(&batch, &y, lr).unwrap();
            agent.actor_update(&batch, lr).unwrap();
            agent.soft_update_targets().unwrap();
        }
    }
    let a = agent.act(&s0, 0.0).unwrap();
    let gap: f64 = a
        .as_slice()
        .iter()
        .zip(&target)
        .map(|(x, y)| (x - y).abs())
        .sum();
    (gap, a.as_slice().to_vec())
}

use acodm::corpus::generate;
use acodm::orchestrator::{run_single, Mode, RunConfig, RunVariant};
use acodm::baselines::StaticPolicy;
use std::sync::Arc;

fn steps_to(rows: &[acodm::orchestrator::MetricsRow], thr: f64) -> Option<usize> {
    rows.iter().find(|r| r.mean_val_loss <= thr).map(|r| r.step)
}

fn cal_config(name: &str) -> RunConfig {
    let mut cfg = RunConfig::desk_default();
    cfg.corpus.vocab_size = 32;
    cfg.corpus.docs_per_domain = 60_000;
    cfg.corpus.concentration = vec![0.05, 0.12, 0.3, 0.7, 2.0, 2.0, 2.0, 2.0];
    for m in [&mut cfg.proxy_model, &mut cfg.target_model] {
        m.vocab_size = 32;
        m.context_len = 6;
        m.train_positions_per_doc = 2;
    }
    cfg.target_model.hidden_dim = 160;
    cfg.target_model.n_layers = 2;
    cfg.target_model.embed_dim = 24;
    cfg.target_model.reward_layer_indices = vec![1];
    cfg.target_model.state_layer_indices = vec![0, 1];
    cfg.proxy_model.hidden_dim = 32;
    cfg.proxy_model.n_layers = 1;
    cfg.proxy_model.embed_dim = 8;
    cfg.proxy_model.reward_layer_indices = vec![0];
    cfg.proxy_model.state_layer_indices = vec![0, 0];
    cfg.schedule.steps = 3000;
    cfg.schedule.warmup_steps = 60;
    cfg.schedule.batch_size = 64;
    cfg.schedule.lr_max = 5e-3;
    cfg.schedule.lr_min = 5e-4;
    cfg.schedule.eval_interval = 100;
    cfg.output_dir = std::env::temp_dir().join(name);
    cfg
}

#[test]
#[ignore]
fn calibrate_schedules() {
    use acodm::lm_env::{lr_schedule, LmEnv};
    let t0 = std::time::Instant::now();
    let base = cal_config("acodm_sched_base");
    let corpus = Arc::new(generate(&base.corpus).unwrap());
    let tilt = |live: f64| -> Vec<f64> {
        let dead = (1.0 - 4.0 * live) / 4.0;
        vec![live, live, live, live, dead, dead, dead, dead]
    };
    // (name, schedule fn: t, T -> alpha)
    type Sched = Box<dyn Fn(usize, usize) -> Vec<f64> + Send>;
    let schedules: Vec<(&str, Sched)> = vec![
        ("uniform", Box::new(|_, _| vec![0.125; 8])),
        ("tilt17", {
            let w = tilt(0.17);
            Box::new(move |_, _| w.clone())
        }),
        ("early_tilt", {
            let w = tilt(0.20);
            Box::new(move |t, total| {
                // tilt for the first 40%, uniform afterwards
                if t < total * 2 / 5 {
                    w.clone()
                } else {
                    vec![0.125; 8]
                }
            })
        }),
        ("late_tilt", {
            let w = tilt(0.20);
            Box::new(move |t, total| {
                if t >= total * 3 / 5 {
                    w.clone()
                } else {
                    vec![0.125; 8]
                }
            })
        }),
    ];
    let handles: Vec<_> = schedules
        .into_iter()
        .map(|(name, sched)| {
            let corpus = corpus.clone();
            let cfg = cal_config(&format!("acodm_sched_{name}"));
            std::thread::spawn(move || {
                let total = cfg.schedule.steps;
                let mut env = LmEnv::reset(
                    &cfg.target_model,
                    corpus,
                    total,
                    cfg.schedule.explore_frac,
                    cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
                )
                .unwrap();
                let mut curve = Vec::new();
                curve.push((0, mean_of(&env.validation_losses())));
                for t in 0..total {
                    let lr = lr_schedule(
                        t,
                        total,
                        cfg.schedule.warmup_steps,
                        cfg.schedule.lr_min,
                        cfg.schedule.lr_max,
                    )
                    .unwrap();
                    let alpha =
                        acodm::corpus::DomainWeights::new(sched(t, total)).unwrap();
                    env.step(&alpha, cfg.schedule.batch_size, lr).unwrap();
                    if (t + 1) % 300 == 0 {
                        curve.push((t + 1, mean_of(&env.validation_losses())));
                    }
                }
                (name, curve)
            })
        })
        .collect();
    let mut results = Vec::new();
    for h in handles {
        results.push(h.join().unwrap());
    }
    let uniform_final = results.iter().find(|(n, _)| *n == "uniform").unwrap().1.last().unwrap().1;
    for (name, curve) in &results {
        let reach = curve.iter().find(|(_, l)| *l <= uniform_final).map(|(s, _)| *s);
        let pts: Vec<String> = curve.iter().map(|(s, l)| format!("{s}:{l:.4}")).collect();
        println!("{name}: reach {reach:?} {pts:?}");
    }
    println!("elapsed {:.0}s", t0.elapsed().as_secs_f64());
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
#[ignore]
fn calibrate_mixture_oracle() {
    // is there a static mixture that beats uniform on steps-to-threshold?
    let t0 = std::time::Instant::now();
    let base = cal_config("acodm_mix_base");
    let corpus = Arc::new(generate(&base.corpus).unwrap());
    let mixtures: Vec<(&str, Vec<f64>)> = vec![
        ("uniform", vec![1.0 / 8.0; 8]),
        ("hub30", {
            let mut v = vec![0.1; 8];
            v[0] = 0.3;
            v
        }),
        ("hub44", {
            let mut v = vec![0.08; 8];
            v[0] = 0.44;
            v
        }),
        ("hub65", {
            let mut v = vec![0.05; 8];
            v[0] = 0.65;
            v
        }),
        ("live_skew", vec![0.2125, 0.2125, 0.2125, 0.2125, 0.0375, 0.0375, 0.0375, 0.0375]),
        ("live_heavy", vec![0.24, 0.24, 0.24, 0.24, 0.01, 0.01, 0.01, 0.01]),
    ];
    let handles: Vec<_> = mixtures
        .into_iter()
        .map(|(name, w)| {
            let corpus = corpus.clone();
            let mut cfg = cal_config(&format!("acodm_mix_{name}"));
            std::thread::spawn(move || {
                let out = run_single(
                    &cfg,
                    &cfg.target_model.clone(),
                    corpus,
                    RunVariant::Static(StaticPolicy::new(
                        acodm::corpus::DomainWeights::new(w).unwrap(),
                    )),
                    "metrics.csv",
                )
                .unwrap();
                let curve: Vec<(usize, f64)> = out
                    .rows
                    .iter()
                    .filter(|r| r.step % 300 == 0)
                    .map(|r| (r.step, r.mean_val_loss))
                    .collect();
                (name, curve, out.final_mean_val_loss)
            })
        })
        .collect();
    let mut results = Vec::new();
    for h in handles {
        results.push(h.join().unwrap());
    }
    let uniform_final = results
        .iter()
        .find(|(n, _, _)| *n == "uniform")
        .unwrap()
        .2;
    for (name, curve, final_loss) in &results {
        let reach = curve
            .iter()
            .find(|(_, l)| *l <= uniform_final)
            .map(|(s, _)| *s);
        let pts: Vec<String> = curve.iter().map(|(s, l)| format!("{s}:{l:.4}")).collect();
        println!("{name}: final {final_loss:.4} reach-uniform-final {reach:?} {pts:?}");
    }
    println!("elapsed {:.0}s", t0.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn calibrate_lm_static() {
    // find corpus/model sizes where the LM actually learns under uniform
    let t0 = std::time::Instant::now();
    // (vocab, context, hidden, blocks, ppd, lr)
    let variants: Vec<(&str, usize, usize, usize, usize, usize, f64)> = vec![
        ("v32c4h64b2p4_lr5e-3", 32, 4, 64, 2, 4, 5e-3),
        ("v32c4h64b2p4_lr1e-2", 32, 4, 64, 2, 4, 1e-2),
        ("v32c4h64b3p4_lr5e-3", 32, 4, 64, 3, 4, 5e-3),
        ("v32c4h96b2p8_lr1e-2", 32, 4, 96, 2, 8, 1e-2),
    ];
    let handles: Vec<_> = variants
        .into_iter()
        .map(|(name, vocab, ctx, hidden, blocks, ppd, lr)| {
            std::thread::spawn(move || {
                let mut cfg = RunConfig::desk_default();
                cfg.corpus.vocab_size = vocab;
                cfg.schedule.steps = 1500;
                cfg.schedule.warmup_steps = 30;
                cfg.target_model.vocab_size = vocab;
                cfg.target_model.context_len = ctx;
                cfg.target_model.hidden_dim = hidden;
                cfg.target_model.n_layers = blocks;
                cfg.target_model.reward_layer_indices = vec![blocks - 1];
                cfg.target_model.state_layer_indices = vec![0, blocks - 1];
                cfg.target_model.train_positions_per_doc = ppd;
                cfg.proxy_model.vocab_size = vocab;
                cfg.proxy_model.context_len = ctx;
                cfg.schedule.lr_max = lr;
                cfg.schedule.lr_min = lr / 10.0;
                cfg.schedule.eval_interval = 250;
                cfg.output_dir = std::env::temp_dir().join(format!("acodm_lm_{name}"));
                let corpus = Arc::new(generate(&cfg.corpus).unwrap());
                let out = run_single(
                    &cfg,
                    &cfg.target_model.clone(),
                    corpus,
                    RunVariant::Static(StaticPolicy::uniform(8)),
                    "metrics.csv",
                )
                .unwrap();
                let curve: Vec<(usize, f64)> = out
                    .rows
                    .iter()
                    .filter(|r| r.step % 500 == 0)
                    .map(|r| (r.step, r.mean_val_loss))
                    .collect();
                (name, curve, out.timings.total_s)
            })
        })
        .collect();
    for h in handles {
        let (name, curve, secs) = h.join().unwrap();
        let pts: Vec<String> = curve.iter().map(|(s, l)| format!("{s}:{l:.4}")).collect();
        println!("{name} ({secs:.0}s): {pts:?}");
    }
    println!("elapsed {:.0}s", t0.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn calibrate_speedup() {
    let t0 = std::time::Instant::now();
    let seed = 1u64;
    let mut cfg = cal_config("acodm_cal_static");
    cfg.seed = seed;
    let corpus = Arc::new(generate(&cfg.corpus).unwrap());

    let cfg_static = cfg.clone();
    let corpus_s = corpus.clone();
    let h_static = std::thread::spawn(move || {
        run_single(
            &cfg_static,
            &cfg_static.target_model.clone(),
            corpus_s,
            RunVariant::Static(StaticPolicy::uniform(8)),
            "metrics.csv",
        )
        .unwrap()
    });

    let mut cfg_acodm = cfg.clone();
    cfg_acodm.mode = Mode::AcOdm;
    cfg_acodm.output_dir = std::env::temp_dir().join("acodm_cal_acodm");
    let corpus_a = corpus.clone();
    let h_acodm = std::thread::spawn(move || {
        run_single(
            &cfg_acodm,
            &cfg_acodm.target_model.clone(),
            corpus_a,
            RunVariant::AcOdm {
                agent_updates: true,
            },
            "metrics.csv",
        )
        .unwrap()
    });

    let static_out = h_static.join().unwrap();
    let acodm_out = h_acodm.join().unwrap();
    let thr = static_out.final_mean_val_loss;
    println!(
        "static final loss {thr:.5}; acodm final {:.5}",
        acodm_out.final_mean_val_loss
    );
    println!(
        "steps-to-threshold: static {:?} acodm {:?}",
        steps_to(&static_out.rows, thr),
        steps_to(&acodm_out.rows, thr)
    );
    // inspect the mixture trajectory
    for row in acodm_out.rows.iter().step_by(30) {
        let a: Vec<String> = row.alpha.iter().map(|v| format!("{v:.3}")).collect();
        let r: Vec<String> = row.reward.iter().map(|v| format!("{v:.2}")).collect();
        println!("t={:4} loss={:.4} alpha={a:?} r={r:?}", row.step, row.mean_val_loss);
    }
    println!("overhead acodm: {:.1}%", acodm_out.timings.overhead_frac() * 100.0);
    println!("elapsed {:.0}s", t0.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn calibrate_quadratic_sanity() {
    let t0 = std::time::Instant::now();
    let variants: Vec<(&str, AgentConfig)> = vec![
        ("base", quad_cfg()),
        ("gamma0.2_tau0.02_n128_noise0.01", {
            let mut c = quad_cfg();
            c.gamma = 0.2;
            c.tau = 0.02;
            c.minibatch = 128;
            c.noise_end = 0.01;
            c
        }),
        ("cap1500_std", {
            let mut c = quad_cfg();
            c.capacity = 1500;
            c.standardize_rewards = true;
            c.tau = 0.02;
            c.noise_end = 0.01;
            c
        }),
        ("gamma0.2_cap1500_n128", {
            let mut c = quad_cfg();
            c.gamma = 0.2;
            c.capacity = 1500;
            c.minibatch = 128;
            c.tau = 0.02;
            c.noise_end = 0.01;
            c.lr_end = 0.0005;
            c
        }),
    ];
    let handles: Vec<_> = variants
        .into_iter()
        .map(|(name, cfg)| {
            std::thread::spawn(move || {
                let mut gaps = Vec::new();
                for seed in 1..=5u64 {
                    let (gap, _) = run_quadratic(seed, 5000, cfg.clone());
                    gaps.push(gap);
                }
                let passes = gaps.iter().filter(|&&g| g <= 0.05).count();
                (name, passes, gaps)
            })
        })
        .collect();
    for h in handles {
        let (name, passes, gaps) = h.join().unwrap();
        let gaps_s: Vec<String> = gaps.iter().map(|g| format!("{g:.4}")).collect();
        println!("{name}: {passes}/5 gaps {gaps_s:?}");
    }
    println!("done in {:.1}s", t0.elapsed().as_secs_f64());
}
