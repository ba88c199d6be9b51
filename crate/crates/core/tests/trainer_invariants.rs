use protoego::config::RunConfig;
use protoego::ingest::open_sources;
use protoego::trainer::{ema_update, iteration_rng, sample_batch, TrainState, Trainer, ADAM_BETA1, ADAM_BETA2};

fn tiny() -> RunConfig {
    let overrides: Vec<String> = [
        "backbone.embed_dim=16",
        "backbone.heads=2",
        "backbone.depth=2",
        "backbone.head_hidden=16",
        "backbone.bottleneck_dim=8",
        "backbone.out_dim=12",
        "proto.k=2",
        "proto.tap_layer_mid=1",
        "clip.frames=3",
        "clip.stride_s=0.05",
        "clip.window=64",
        "clip.crop_size=32",
        "temporal.lambda=0.0",
        "optim.batch_size=1",
        "optim.epochs=2",
        "optim.iters_per_epoch=3",
        "optim.warmup_epochs=1",
        "data.synthetic_videos=2",
        "data.synthetic_frames=24",
        "data.frame_size=64",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    RunConfig::from_toml_str("seed = 11", &overrides).unwrap()
}

#[test]
fn teacher_moves_only_by_ema() {
    let cfg = tiny();
    let sources = open_sources(&cfg.data, cfg.seed).unwrap();
    let trainer = Trainer::new(cfg.clone());
    let mut state = TrainState::new(&cfg);
    for _ in 0..3 {
        let before = state.teacher.params.clone();
        let (_, sched) = trainer.step(&mut state, &sources).unwrap();
        let mut expected = before;
        ema_update(&state.student, &mut expected, sched.ema_m);
        assert_eq!(expected, state.teacher.params);
    }
}

#[test]
fn teacher_stays_inside_the_student_history() {
    let cfg = tiny();
    let sources = open_sources(&cfg.data, cfg.seed).unwrap();
    let trainer = Trainer::new(cfg.clone());
    let mut state = TrainState::new(&cfg);
    let flat = |p: &protoego::vit::NetworkParams| -> Vec<f64> {
        (0..p.len()).flat_map(|i| p.value(i).iter().copied().collect::<Vec<_>>()).collect()
    };
    let start = flat(&state.teacher.params);
    let mut lo = start.clone();
    let mut hi = start;
    for _ in 0..5 {
        trainer.step(&mut state, &sources).unwrap();
        let student = flat(&state.student);
        for ((l, h), s) in lo.iter_mut().zip(hi.iter_mut()).zip(&student) {
            *l = l.min(*s);
            *h = h.max(*s);
        }
        for ((t, l), h) in flat(&state.teacher.params).iter().zip(&lo).zip(&hi) {
            let slack = 1e-12 * (1.0 + t.abs());
            assert!(*t >= l - slack && *t <= h + slack);
        }
    }
}

#[test]
fn first_iteration_updates_every_moment_once() {
    let cfg = tiny();
    let sources = open_sources(&cfg.data, cfg.seed).unwrap();
    let trainer = Trainer::new(cfg.clone());
    let mut state = TrainState::new(&cfg);
    trainer.step(&mut state, &sources).unwrap();
    assert_eq!(state.adam.steps, 1);
    // After a single update m = (1−β₁)g and v = (1−β₂)g², so v is pinned by m.
    let k = (1.0 - ADAM_BETA2) / ((1.0 - ADAM_BETA1) * (1.0 - ADAM_BETA1));
    let mut touched = 0;
    for (m, v) in state.adam.m.iter().zip(&state.adam.v) {
        for (a, b) in m.iter().zip(v.iter()) {
            assert!((k * a * a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
        if m.iter().any(|x| *x != 0.0) {
            touched += 1;
        }
    }
    assert_eq!(touched, state.adam.m.len(), "every parameter receives a gradient");
}

#[test]
fn disabled_temporal_term_reports_zero() {
    let mut cfg = tiny();
    cfg.ablation.enable_t = false;
    let sources = open_sources(&cfg.data, cfg.seed).unwrap();
    let trainer = Trainer::new(cfg.clone());
    let mut state = TrainState::new(&cfg);
    for _ in 0..2 {
        let (bundle, _) = trainer.step(&mut state, &sources).unwrap();
        assert_eq!(bundle.l_temp, 0.0);
        assert_eq!(bundle.n_valid_pairs, 0);
        assert!(bundle.l_proto > 0.0 && bundle.l_depth > 0.0);
    }
}

#[test]
fn all_weights_zero_freezes_both_networks() {
    let mut cfg = tiny();
    cfg.weights.gamma_p = 0.0;
    cfg.weights.gamma_d = 0.0;
    cfg.weights.gamma_t = 0.0;
    let sources = open_sources(&cfg.data, cfg.seed).unwrap();
    let trainer = Trainer::new(cfg.clone());
    let mut state = TrainState::new(&cfg);
    let student = state.student.clone();
    let teacher = state.teacher.params.clone();
    for _ in 0..2 {
        let (bundle, _) = trainer.step(&mut state, &sources).unwrap();
        assert_eq!(bundle.l_total, 0.0);
    }
    assert_eq!(state.student, student);
    assert_eq!(state.teacher.params, teacher);
    assert_eq!(state.iteration, 2);
}

#[test]
fn batches_depend_only_on_seed_and_iteration() {
    let cfg = tiny();
    let sources = open_sources(&cfg.data, cfg.seed).unwrap();
    let a = sample_batch(&sources, &cfg, &mut iteration_rng(cfg.seed, 4)).unwrap();
    let b = sample_batch(&sources, &cfg, &mut iteration_rng(cfg.seed, 4)).unwrap();
    assert_eq!(a, b);
    let starts: std::collections::BTreeSet<(String, usize)> = (0..8)
        .map(|i| {
            let clip = &sample_batch(&sources, &cfg, &mut iteration_rng(cfg.seed, i)).unwrap()[0];
            (clip.source_id.clone(), clip.start_index)
        })
        .collect();
    assert!(starts.len() > 1);
}
