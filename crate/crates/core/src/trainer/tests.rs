use super::*;
use crate::data::{gen_synthetic, split, GeneratorParams, SplitSpec};

fn tiny_setup() -> Setup {
    Setup {
        model: ModelConfig {
            embed_dim: 4,
            source_hidden: vec![8],
            target_hidden: vec![10],
            view_disc_hidden: 8,
            sim_disc_hidden: vec![16, 16],
            symmetric: false,
            ..Default::default()
        },
        batch: BatchSpec { identities: 4, samples: 2, symmetric_anchors: false },
        train: TrainConfig {
            learning_rate: 0.01,
            sim_epochs: 3,
            adv_rounds: 4,
            valid_batches: 3,
            ..Default::default()
        },
        loss: LossConfig::default(),
        seed: 5,
    }
}

fn tiny_data() -> (Dataset, Dataset) {
    let ds = gen_synthetic(&GeneratorParams {
        num_identities: 18,
        samples_per_view: 3,
        latent_dim: 3,
        feature_dim: 6,
        ..Default::default()
    })
    .unwrap();
    let s = split(&ds, &SplitSpec { train: 10, valid: 4, test: 4, seed: 1 }).unwrap();
    (s.train, s.valid)
}

fn fingerprints(m: &Model) -> Vec<String> {
    Group::ALL.iter().map(|&g| m.fingerprint(g)).collect()
}

fn opt(setup: &Setup) -> OptimizerState {
    OptimizerState::new(setup.train.schedule(), setup.train.momentum)
}

#[test]
fn init_asymmetric_and_symmetric() {
    let setup = tiny_setup();
    let m = init_models(&setup, 6).unwrap();
    assert_ne!(m.source.net.num_params(), m.target.net.num_params());

    let mut sym = setup.clone();
    sym.model.symmetric = true;
    let m = init_models(&sym, 6).unwrap();
    assert_eq!(m.source.net.spec().hidden_dims, m.target.net.spec().hidden_dims);
    assert_ne!(m.fingerprint(Group::SourceMap), m.fingerprint(Group::TargetMap));
}

#[test]
fn same_seed_gives_same_initial_loss() {
    let setup = tiny_setup();
    let (train, _) = tiny_data();
    let loss = || {
        let model = init_models(&setup, 6).unwrap();
        let mut trainer = Trainer::new(&train, &setup).unwrap();
        let batch = trainer.next_batch().unwrap();
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &model, &Group::ALL, &[]);
        let l = record_similarity(&mut tape, &bound, &train, &batch, trainer.similarity_objective(), &setup.loss)
            .unwrap();
        tape.value(l).item()
    };
    assert_eq!(loss().to_bits(), loss().to_bits());
}

#[test]
fn each_step_changes_only_its_own_groups() {
    let setup = tiny_setup();
    let (train, _) = tiny_data();
    let mut model = init_models(&setup, 6).unwrap();
    let mut trainer = Trainer::new(&train, &setup).unwrap();
    let mut o = opt(&setup);

    let cases: [(&str, &[Group]); 3] = [
        ("similarity", &[Group::SourceMap, Group::TargetMap, Group::SimDisc]),
        ("view_disc", &[Group::ViewDisc]),
        ("mapping", &[Group::SourceMap, Group::TargetMap]),
    ];
    for (step, updated) in cases {
        let batch = trainer.next_batch().unwrap();
        let before = fingerprints(&model);
        match step {
            "similarity" => trainer.similarity_step(&mut model, &mut o, &batch),
            "view_disc" => trainer.view_disc_step(&mut model, &mut o, &batch),
            _ => trainer.mapping_step(&mut model, &mut o, &batch),
        }
        .unwrap();
        let after = fingerprints(&model);
        for (i, g) in Group::ALL.iter().enumerate() {
            assert_eq!(before[i] != after[i], updated.contains(g), "{step}: group {}", g.name());
        }
    }
}

#[test]
fn frozen_groups_receive_no_gradient() {
    let setup = tiny_setup();
    let (train, _) = tiny_data();
    let model = init_models(&setup, 6).unwrap();
    let mut trainer = Trainer::new(&train, &setup).unwrap();
    let batch = trainer.next_batch().unwrap();
    let maps = [Group::SourceMap, Group::TargetMap];
    let zero = |bound: &Bound, g: Group, grads: &Gradients| {
        bound.grads(g, grads).iter().all(|t| t.data().iter().all(|v| *v == 0.0))
    };

    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &model, &[Group::SourceMap, Group::TargetMap, Group::ViewDisc], &[Group::ViewDisc]);
    let l = record_view_disc(&mut tape, &bound, &train, &batch).unwrap();
    let grads = tape.backward(l).unwrap();
    assert!(maps.iter().all(|&g| zero(&bound, g, &grads)));
    assert!(!zero(&bound, Group::ViewDisc, &grads));

    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &model, &[Group::SourceMap, Group::TargetMap, Group::ViewDisc], &maps);
    let l = record_mapping(&mut tape, &bound, &train, &batch, &crate::objectives::Confusion, trainer.similarity_objective(), &setup.loss)
        .unwrap();
    let grads = tape.backward(l).unwrap();
    assert!(zero(&bound, Group::ViewDisc, &grads));
    assert!(maps.iter().any(|&g| !zero(&bound, g, &grads)));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut setup = tiny_setup();
    setup.train.learning_rate = 0.0;
    let (train, _) = tiny_data();
    let mut model = init_models(&setup, 6).unwrap();
    let before = fingerprints(&model);
    let mut trainer = Trainer::new(&train, &setup).unwrap();
    let (mut a, mut b, mut c) = (opt(&setup), opt(&setup), opt(&setup));
    trainer.similarity_epoch(&mut model, &mut a).unwrap();
    trainer.adversarial_round(&mut model, &mut b, &mut c).unwrap();
    assert_eq!(fingerprints(&model), before);
}

#[test]
fn similarity_loss_trends_down() {
    let setup = tiny_setup();
    let (train, _) = tiny_data();
    let mut model = init_models(&setup, 6).unwrap();
    let mut trainer = Trainer::new(&train, &setup).unwrap();
    let mut o = opt(&setup);
    let losses: Vec<f64> = (0..6).map(|_| trainer.similarity_epoch(&mut model, &mut o).unwrap()).collect();
    // two-epoch moving average
    let smooth: Vec<f64> = losses.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] < w[0]), "losses {losses:?}");
}

#[test]
fn mapping_step_does_not_increase_confusion_loss_on_its_batch() {
    let mut setup = tiny_setup();
    setup.train.learning_rate = 1e-4;
    let (train, _) = tiny_data();
    let mut model = init_models(&setup, 6).unwrap();
    let mut trainer = Trainer::new(&train, &setup).unwrap();
    // make D_d informative first
    let mut dd = OptimizerState::new(LrSchedule { base: 0.05, every: 10, factor: 10.0 }, 0.9);
    for _ in 0..30 {
        let b = trainer.next_batch().unwrap();
        trainer.view_disc_step(&mut model, &mut dd, &b).unwrap();
    }
    let batch = trainer.next_batch().unwrap();
    let eq3 = |m: &Model| {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, m, &[Group::SourceMap, Group::TargetMap, Group::ViewDisc], &[]);
        let l = record_mapping(&mut tape, &bound, &train, &batch, &crate::objectives::Confusion, &crate::objectives::Contrastive, &setup.loss)
            .unwrap();
        tape.value(l).item()
    };
    let before = eq3(&model);
    let mut o = opt(&setup);
    trainer.mapping_step(&mut model, &mut o, &batch).unwrap();
    assert!(eq3(&model) <= before);
}

#[test]
fn fit_is_deterministic_and_returns_best_snapshot() {
    let setup = tiny_setup();
    let (train, valid) = tiny_data();
    let a = fit(&train, &valid, &setup).unwrap();
    let b = fit(&train, &valid, &setup).unwrap();
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert_eq!(fingerprints(&a.model), fingerprints(&b.model));

    let rounds: Vec<&EpochRecord> = a.history.stage(Stage::Adversarial).collect();
    assert_eq!(a.history.stage(Stage::Similarity).count(), 3);
    assert!(!rounds.is_empty() && rounds.len() <= 4);
    let last = rounds.last().unwrap().valid_loss.unwrap();
    assert!(a.best_valid_loss.unwrap() <= last);
    let best = a.best_round.unwrap();
    assert_eq!(rounds[best].valid_loss, a.best_valid_loss);
    let v = Validator::new(&valid, &setup).unwrap();
    assert_eq!(v.total(v.measure(&a.model).unwrap()), a.best_valid_loss.unwrap());
}

#[test]
fn patience_stops_the_adversarial_loop() {
    let mut setup = tiny_setup();
    setup.train.adv_rounds = 40;
    setup.train.patience = 1;
    let (train, valid) = tiny_data();
    let r = fit(&train, &valid, &setup).unwrap();
    let rounds = r.history.stage(Stage::Adversarial).count();
    assert!(rounds < 40);
    assert_eq!(rounds, r.best_round.unwrap() + 2);
}

#[test]
fn observer_can_end_a_stage() {
    let setup = tiny_setup();
    let (train, valid) = tiny_data();
    let mut seen = 0;
    let r = fit_observed(&train, &valid, &setup, &mut |stage, _, _| {
        seen += 1;
        Ok(if stage == Stage::Similarity { Control::EndStage } else { Control::Continue })
    })
    .unwrap();
    assert_eq!(r.history.stage(Stage::Similarity).count(), 1);
    assert_eq!(seen, r.history.records.len());
}

#[test]
fn too_small_validation_set_is_a_contract_error() {
    let setup = tiny_setup();
    let (train, valid) = tiny_data();
    let one = valid.subset(&[0]).unwrap();
    assert!(matches!(fit(&train, &one, &setup), Err(Error::Contract(_))));
}

#[test]
fn invalid_train_config_is_rejected() {
    let mut c = TrainConfig { patience: 0, ..Default::default() };
    assert!(c.validate().unwrap_err().is_validation());
    c.patience = 1;
    c.similarity_objective = "nope".into();
    assert!(c.validate().unwrap_err().is_validation());
}

#[test]
fn combined_mapping_objective_trains() {
    let mut setup = tiny_setup();
    setup.train.mapping_objective = "confusion+similarity".into();
    setup.train.refresh_sim_every = 2;
    let (train, valid) = tiny_data();
    let r = fit(&train, &valid, &setup).unwrap();
    assert!(r.history.stage(Stage::Adversarial).any(|rec| rec.loss_sim.is_some()));
}
