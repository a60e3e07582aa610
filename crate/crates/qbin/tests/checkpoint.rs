use qbin::checkpoint::Checkpoint;
use qbin::fieldio::FieldIoError;
use qbin::pipeline::{self, World};
use qbin_core::config::{GridSpec, RunConfig};
use qbin_core::training::{NoHooks, TrainerState};

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.grid = GridSpec { n_lat: 4, n_lon: 8 };
    c.model.width = 4;
    c.model.cond_hidden = 4;
    c.schedule.phase1 = [1, 2];
    c.schedule.phase2 = [3, 4];
    c.schedule.iters_per_step = 2;
    c.schedule.batch_size = 2;
    c.schedule.group_size = 2;
    c.optimizer.lr = 1e-3;
    c.seed = 9;
    c
}

#[test]
fn resume_from_phase_boundary_is_bit_identical() {
    let cfg = tiny();
    let world = World::generate(&cfg).unwrap();
    let clim = pipeline::build_climatology(&cfg, &world).unwrap();
    let norm = pipeline::fit_normalizer(&cfg, &world).unwrap();
    let data = pipeline::training_data(&cfg, &world, &norm, &clim).unwrap();

    let (model, mut full) = pipeline::init_model(&cfg, cfg.seed).unwrap();
    let mut full_state = TrainerState::new(&cfg.train_config(), &full);
    pipeline::train(
        &cfg,
        &world.grid,
        &data,
        &model,
        &mut full,
        &mut full_state,
        None,
        &mut NoHooks,
    )
    .unwrap();

    let (model2, mut part) = pipeline::init_model(&cfg, cfg.seed).unwrap();
    let mut part_state = TrainerState::new(&cfg.train_config(), &part);
    let boundary = cfg.schedule.phase1_iterations();
    pipeline::train(
        &cfg,
        &world.grid,
        &data,
        &model2,
        &mut part,
        &mut part_state,
        Some(boundary),
        &mut NoHooks,
    )
    .unwrap();
    assert_eq!(part_state.iteration, boundary);

    let bytes = Checkpoint::capture(&model2, &norm, &cfg.train_config(), &part, &part_state)
        .encode()
        .unwrap();
    let ck = Checkpoint::decode(&bytes).unwrap();
    let (model3, mut resumed, mut state) = ck.restore().unwrap();
    assert_eq!(ck.meta.normalizer, norm);
    pipeline::train(
        &cfg,
        &world.grid,
        &data,
        &model3,
        &mut resumed,
        &mut state,
        None,
        &mut NoHooks,
    )
    .unwrap();

    assert_eq!(state, full_state);
    for (a, b) in resumed.iter().zip(full.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &qbin_core::tensor::Tensor| {
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
}

#[test]
fn file_round_trip_and_corruption() {
    let cfg = tiny();
    let (model, store) = pipeline::init_model(&cfg, 3).unwrap();
    let world = World::generate(&cfg).unwrap();
    let norm = pipeline::fit_normalizer(&cfg, &world).unwrap();
    let state = TrainerState::new(&cfg.train_config(), &store);
    let ck = Checkpoint::capture(&model, &norm, &cfg.train_config(), &store, &state);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.qwck");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);

    let bytes = ck.encode().unwrap();
    assert!(matches!(
        Checkpoint::decode(&bytes[..bytes.len() - 1]),
        Err(FieldIoError::Truncated(_))
    ));
    let mut bad = bytes.clone();
    bad[1] = b'!';
    assert!(matches!(
        Checkpoint::decode(&bad),
        Err(FieldIoError::BadMagic(_))
    ));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(
        Checkpoint::decode(&long),
        Err(FieldIoError::BadHeader(_))
    ));
}
