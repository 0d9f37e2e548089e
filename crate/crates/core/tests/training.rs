use sphere_distill::checkpoint::Checkpoint;
use sphere_distill::data::{gen_blobs, pair_batch, AugmentConfig};
use sphere_distill::engine::{
    loss_and_gradients, run_training, train_step, ByolModel, Objective, RunOptions, TrainConfig,
    TrainState,
};
use sphere_distill::nn::Mode;
use sphere_distill::ExecPolicy;

fn small_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(8);
    cfg.model.encoder_hidden = vec![16];
    cfg.model.repr_dim = 8;
    cfg.model.proj_hidden = 16;
    cfg.model.pred_hidden = 16;
    cfg.batch_size = 16;
    cfg.seed = seed;
    cfg.epochs = 13;
    cfg.warmup_epochs = 1;
    cfg
}

fn ckpt_bytes(state: &TrainState, cfg: &TrainConfig) -> Vec<u8> {
    Checkpoint::from_state(state, cfg)
        .unwrap()
        .to_bytes()
        .unwrap()
}

#[test]
fn identical_seed_gives_identical_trajectory() {
    let data = gen_blobs(2, 8, 64, 0.05, 1).unwrap();
    let cfg = small_config(3);
    // 128 samples at batch 16: 8 steps per epoch, 104 steps in total
    let a = run_training(&cfg, &data, &RunOptions::default()).unwrap();
    let b = run_training(&cfg, &data, &RunOptions::default()).unwrap();
    assert_eq!(a.metrics.len(), 104);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(ckpt_bytes(&a.state, &cfg), ckpt_bytes(&b.state, &cfg));

    let other = run_training(&small_config(4), &data, &RunOptions::default()).unwrap();
    assert_ne!(a.metrics, other.metrics);
}

#[test]
fn sequential_and_parallel_training_agree_bitwise() {
    let data = gen_blobs(2, 8, 64, 0.05, 2).unwrap();
    let mut cfg = small_config(5);
    cfg.epochs = 3;
    cfg.objective = Objective::ByolMhe;
    cfg.energy_every = 4;
    cfg.policy = ExecPolicy::Sequential;
    let seq = run_training(&cfg, &data, &RunOptions::default()).unwrap();
    cfg.policy = ExecPolicy::Parallel;
    let par = run_training(&cfg, &data, &RunOptions::default()).unwrap();
    assert_eq!(seq.metrics, par.metrics);
    let params = |s: &TrainState| {
        s.model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(params(&seq.state), params(&par.state));
}

#[test]
fn ema_follows_post_update_online_weights() {
    let data = gen_blobs(2, 8, 32, 0.05, 3).unwrap();
    let cfg = small_config(6);
    let mut state = TrainState::new(&cfg, 4).unwrap();
    for step in 0..5 {
        let idx: Vec<usize> = (0..16).map(|i| (i + step * 16) % data.len()).collect();
        let batch = pair_batch(
            &data,
            &idx,
            &AugmentConfig::default(),
            cfg.seed,
            0,
            ExecPolicy::default(),
        )
        .unwrap();
        let before: Vec<_> = state
            .model
            .target_params()
            .into_iter()
            .map(|p| p.value.clone())
            .collect();
        let tau = state.schedule.tau();
        train_step(&mut state, &cfg, &batch).unwrap();
        let online: Vec<_> = state
            .model
            .online_encoder
            .params()
            .into_iter()
            .chain(state.model.online_projector.params())
            .map(|p| p.value.clone())
            .collect();
        for ((xi, theta), after) in before.iter().zip(&online).zip(state.model.target_params()) {
            for ((x, t), a) in xi.data().iter().zip(theta.data()).zip(after.value.data()) {
                assert!((a - (tau * x + (1.0 - tau) * t)).abs() <= 1e-15);
            }
        }
    }
}

#[test]
fn stop_gradient_leaves_target_without_gradient() {
    let data = gen_blobs(2, 8, 16, 0.05, 4).unwrap();
    let mut cfg = small_config(7);
    cfg.model.batch_norm = false;
    let model = ByolModel::init(&cfg.model, 7, true).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let batch = pair_batch(
        &data,
        &idx,
        &AugmentConfig::default(),
        7,
        0,
        ExecPolicy::default(),
    )
    .unwrap();
    let (loss, grads) = loss_and_gradients(&model, &cfg, &batch).unwrap();
    // gradients exist for online parameters only
    assert_eq!(grads.len(), model.online_params().len());

    // yet the loss does depend on the target weights
    let mut moved = model.clone();
    let w = &mut moved.target_encoder.params_mut()[0].value;
    w.data_mut()[0] += 1e-3;
    let (loss2, _) = loss_and_gradients(&moved, &cfg, &batch).unwrap();
    assert_ne!(loss.total, loss2.total);
}

#[test]
fn collapse_run_flattens_representations() {
    let data = gen_blobs(2, 16, 512, 0.05, 0).unwrap();
    let mut cfg = TrainConfig::new(16);
    cfg.batch_size = 64;
    cfg.lars_trust = 0.085;
    cfg.warmup_epochs = 1;
    cfg.epochs = 125;
    cfg.disable_predictor = true;
    cfg.disable_stop_gradient = true;
    // 16 steps per epoch; epoch 31 ends at step 496
    let opts = RunOptions {
        stop_after_epoch: Some(31),
        ..RunOptions::default()
    };
    let run = run_training(&cfg, &data, &opts).unwrap();
    let probe = data.eval_matrix(ExecPolicy::default());
    let h = run.state.model.encode(&probe, Mode::Eval).unwrap();
    let std = sphere_distill::eval::feature_std(&h).unwrap();
    assert!(std < 0.01, "feature std {std}");
}
