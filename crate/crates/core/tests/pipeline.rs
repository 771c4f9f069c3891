use multiview_ssl::augment::AugmentSpec;
use multiview_ssl::backend::cosine_lr;
use multiview_ssl::data::{batch_sampler, SplitPlan};
use multiview_ssl::experiment::{Cohort, CohortSpec};
use multiview_ssl::models::{Checkpoint, EncoderConfig};
use multiview_ssl::pretrain::{pretrain_step, run_pretraining, PretrainConfig, RunOutputs, TrainState};

fn tiny() -> (EncoderConfig, AugmentSpec, PretrainConfig) {
    let encoder = EncoderConfig {
        input_size: 16,
        in_channels: 1,
        widths: vec![8, 16],
        blocks_per_stage: 1,
        proj_hidden: 16,
        proj_out: 8,
    };
    let augment = AugmentSpec { output_size: 16, ..AugmentSpec::default() };
    let cfg = PretrainConfig {
        bank_size: 24,
        patients_per_batch: 8,
        epochs: 3,
        seed: 4,
        ..PretrainConfig::default()
    };
    (encoder, augment, cfg)
}

fn cohort(dir: &std::path::Path) -> Cohort {
    let spec = CohortSpec { patients: 40, image_size: 16, seed: 2, ..CohortSpec::default() };
    Cohort::create(dir, &spec, &SplitPlan::default()).unwrap()
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = cohort(&dir.path().join("data"));
    let (encoder, augment, cfg) = tiny();
    let pool = c.splits.pretrain(1.0);

    let straight = dir.path().join("straight.ckpt");
    let outputs = RunOutputs { checkpoint: Some(straight.clone()), ..RunOutputs::default() };
    let full = run_pretraining(&cfg, &encoder, &augment, &c.data.patients, &pool, &outputs).unwrap();
    assert_eq!(full.history.len(), 3);

    // Stop after the first epoch of the same schedule, checkpoint, resume.
    let mut state = TrainState::new(&encoder, &cfg).unwrap();
    let total = pool.len().div_ceil(cfg.patients_per_batch) * cfg.epochs;
    for batch in batch_sampler(&pool, cfg.patients_per_batch, cfg.seed, 0) {
        let members: Vec<_> = batch.iter().map(|&i| (i, &c.data.patients[i])).collect();
        let lr = cosine_lr(state.step, total, cfg.lr0);
        pretrain_step(&mut state, &cfg, &augment, &members, lr).unwrap();
    }
    state.epoch = 1;
    let paused = dir.path().join("paused.ckpt");
    state.to_checkpoint().save(&paused).unwrap();
    let outputs = RunOutputs { checkpoint: Some(paused.clone()), resume: true, ..RunOutputs::default() };
    let resumed = run_pretraining(&cfg, &encoder, &augment, &c.data.patients, &pool, &outputs).unwrap();

    assert_eq!(resumed.history, full.history[1..]);
    assert_eq!(std::fs::read(&paused).unwrap(), std::fs::read(&straight).unwrap());

    // Resuming with a fresh bank refills it from empty.
    state.to_checkpoint().save(&paused).unwrap();
    let outputs = RunOutputs { checkpoint: Some(paused), resume: true, fresh_bank: true, ..RunOutputs::default() };
    let refilled = run_pretraining(&cfg, &encoder, &augment, &c.data.patients, &pool, &outputs).unwrap();
    assert_ne!(refilled.history, resumed.history);
    assert!(refilled.history[0].bank_occupancy <= full.history[1].bank_occupancy);
}

#[test]
fn two_stage_starts_from_the_init_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let c = cohort(&dir.path().join("data"));
    let (encoder, augment, mut cfg) = tiny();
    cfg.epochs = 1;
    let pool = c.splits.pretrain(1.0);
    let stage1 = run_pretraining(&cfg, &encoder, &augment, &c.data.patients, &pool, &RunOutputs::default()).unwrap();
    let init = dir.path().join("stage1.ckpt");
    stage1.checkpoint().save(&init).unwrap();

    let mut second = cfg.clone();
    second.seed = 99;
    second.init_checkpoint = Some(init.clone());
    let fresh = TrainState::new(&encoder, &second).unwrap().to_checkpoint();
    let stage1_ckpt = Checkpoint::load(&init).unwrap();
    // A different seed alone would start elsewhere.
    assert_ne!(fresh.get("backbone.stem.conv.weight"), stage1_ckpt.get("backbone.stem.conv.weight"));

    // The second stage trains with its own learning rate and bank size.
    second.two_stage.lr0 = 1e-12;
    second.two_stage.bank_size = 16;
    second.weight_decay = 0.0;
    let out = run_pretraining(&second, &encoder, &augment, &c.data.patients, &pool, &RunOutputs::default()).unwrap();
    assert_eq!((out.config.lr0, out.config.bank_size), (1e-12, 16));
    assert_eq!(out.state.bank.capacity(), 16);
    let got = out.checkpoint();
    let (a, b) = (got.get("backbone.stem.conv.weight").unwrap(), stage1_ckpt.get("backbone.stem.conv.weight").unwrap());
    let drift = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(drift < 1e-6, "weights moved by {drift}");
}
