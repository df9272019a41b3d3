use super::*;
use crate::losses::LossWeights;
use crate::synthbench::{generate_runs, generate_world, RunSpec};

fn small_set(places: usize, runs: usize) -> TrainingSet {
    let world = generate_world(11, places).unwrap();
    let runs = generate_runs(&world, &RunSpec::defaults(runs)).unwrap();
    let samples = runs.into_iter().flat_map(|r| r.samples).collect();
    TrainingSet::from_samples(samples, 2).unwrap()
}

fn fast_config(paradigm: Paradigm) -> TrainConfig {
    TrainConfig {
        paradigm,
        preset: match paradigm {
            Paradigm::Combined => LossPreset::SmCmJe,
            Paradigm::TeacherStudent => LossPreset::TeacherStudent,
        },
        epochs: 2,
        ..Default::default()
    }
}

#[test]
fn adam_first_step_matches_closed_form() {
    let hyper = AdamConfig {
        lr: 0.1,
        ..Default::default()
    };
    let mut params = ParamStore::new();
    params.insert("w", Tensor::scalar(1.0));
    let mut grads = ParamStore::new();
    grads.insert("w", Tensor::scalar(0.5));
    let mut state = AdamState::default();
    optimizer_step(&mut params, &grads, &mut state, &hyper).unwrap();
    // m = 0.05, v = 0.00025; bias correction gives m_hat = 0.5, v_hat = 0.25
    let expect = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
    assert!((params.get("w").unwrap().item() - expect).abs() < 1e-15);
    assert_eq!(state.step, 1);

    let before = params.clone();
    let mut zero = ParamStore::new();
    zero.insert("w", Tensor::scalar(0.0));
    let mut fresh = AdamState::default();
    optimizer_step(&mut params, &zero, &mut fresh, &hyper).unwrap();
    assert_eq!(params, before);

    let mut bad = ParamStore::new();
    bad.insert("w", Tensor::zeros(&[2]));
    assert!(optimizer_step(&mut params, &bad, &mut fresh, &hyper).is_err());
}

#[test]
fn grouping_follows_the_20m_rule() {
    let set = small_set(12, 3);
    assert_eq!(set.len(), 12);
    for place in set.places() {
        assert_eq!(place.len(), 3);
        let label = place[0].place_label;
        assert!(place.iter().all(|s| s.place_label == label));
    }
}

#[test]
fn batches_have_the_documented_structure() {
    let set = small_set(10, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = build_batch(&set, 4, 2, &AugmentConfig::default(), &mut rng).unwrap();
    assert_eq!(b.items.len(), 8);
    assert_eq!(b.triplets.len(), 8);
    for &(a, p, n) in &b.triplets {
        assert_eq!(b.items[a].place, b.items[p].place);
        assert_ne!(a, p);
        assert_ne!(b.items[a].place, b.items[n].place);
        assert_ne!(b.items[a].run_id, b.items[p].run_id);
    }
}

#[test]
fn negatives_never_share_the_anchor_place() {
    let set = small_set(8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = AugmentConfig::identity();
    for _ in 0..10_000 {
        let b = build_batch(&set, 4, 2, &cfg, &mut rng).unwrap();
        for &(a, p, n) in &b.triplets {
            assert_eq!(b.items[a].place, b.items[p].place);
            assert_ne!(b.items[a].place, b.items[n].place);
        }
    }
}

#[test]
fn two_place_batches_use_the_opposite_place() {
    let mut set = small_set(8, 2);
    set.places.truncate(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let b = build_batch(&set, 2, 2, &AugmentConfig::identity(), &mut rng).unwrap();
        for &(a, _, n) in &b.triplets {
            assert_eq!(b.items[n].place, 1 - b.items[a].place);
        }
    }
    set.places.truncate(1);
    assert!(build_batch(&set, 2, 2, &AugmentConfig::identity(), &mut rng).is_err());
    let enc = EncoderConfig::default();
    let cfg = TrainConfig {
        places_per_batch: 2,
        ..fast_config(Paradigm::TeacherStudent)
    };
    assert!(train_teacher(&set, &enc, &cfg, &mut |_| {}).is_err());
}

#[test]
fn config_validation() {
    TrainConfig::default().validate().unwrap();
    let bad = TrainConfig {
        places_per_batch: 1,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let mismatch = TrainConfig {
        paradigm: Paradigm::TeacherStudent,
        ..Default::default()
    };
    assert!(mismatch.validate().is_err());
    assert_eq!(
        "teacher-student".parse::<Paradigm>().unwrap(),
        Paradigm::TeacherStudent
    );
    assert!("distill".parse::<Paradigm>().is_err());
    let json = serde_json::to_string(&TrainConfig::default()).unwrap();
    assert!(json.contains("\"combined\"") && json.contains("\"sm+cm+je\""));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let set = small_set(8, 2);
    let enc = EncoderConfig::default();
    let mut cfg = fast_config(Paradigm::Combined);
    cfg.adam.lr = 0.0;
    cfg.epochs = 1;
    let out = train_combined(&set, &enc, &cfg, &mut |_| {}).unwrap();
    assert_eq!(out.checkpoint.params, init_params(&enc, cfg.seed).unwrap());
    assert_eq!(out.log.len(), 1);
    assert!(out.log[0].loss.is_finite());
}

#[test]
fn student_never_touches_the_teacher() {
    let set = small_set(8, 2);
    let enc = EncoderConfig::default();
    let cfg = fast_config(Paradigm::TeacherStudent);
    let teacher = train_teacher(&set, &enc, &cfg, &mut |_| {}).unwrap();
    let init = init_params(&enc, cfg.seed).unwrap();
    // the teacher stage leaves g alone and moves f
    assert_eq!(teacher.checkpoint.params.subset("g."), init.subset("g."));
    assert_ne!(teacher.checkpoint.params.subset("f."), init.subset("f."));

    let student = train_student(&set, &enc, &teacher.checkpoint, &cfg, &mut |_| {}).unwrap();
    let before = Checkpoint::new(enc.clone(), teacher.checkpoint.params.subset("f.")).encode();
    let after = Checkpoint::new(enc.clone(), student.checkpoint.params.subset("f.")).encode();
    assert_eq!(before, after);
    assert_ne!(student.checkpoint.params.subset("g."), init.subset("g."));

    let none = TrainConfig {
        epochs: 0,
        ..cfg.clone()
    };
    let idle = train_student(&set, &enc, &teacher.checkpoint, &none, &mut |_| {}).unwrap();
    assert_eq!(idle.checkpoint.params, teacher.checkpoint.params);

    let other = EncoderConfig {
        clusters: 4,
        ..Default::default()
    };
    assert!(matches!(
        train_student(&set, &other, &teacher.checkpoint, &cfg, &mut |_| {}),
        Err(Error::DigestMismatch)
    ));
}

#[test]
fn je_only_weights_reduce_to_je_gradients() {
    let set = small_set(8, 2);
    let enc = EncoderConfig::default();
    let params = init_params(&enc, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = build_batch(&set, 4, 2, &AugmentConfig::default(), &mut rng).unwrap();
    let weights = LossWeights::new(0.0, 0.0, 1.0).unwrap();
    let grads = |je_only: bool| {
        let mut g = Graph::new(&params);
        let f = embed_batch_images(&mut g, &batch, &enc).unwrap();
        let c = embed_batch_clouds(&mut g, &batch, &enc).unwrap();
        let root = if je_only {
            joint_embedding_loss_graph(&mut g, &f, &c, DistanceKind::L2).unwrap()
        } else {
            combined_loss_graph(
                &mut g,
                &f,
                &c,
                &batch.triplets,
                &weights,
                DistanceKind::L2,
                0.5,
            )
            .unwrap()
            .total
        };
        g.backward(root).unwrap()
    };
    let (a, b) = (grads(false), grads(true));
    for (name, ga) in a.iter() {
        let gb = b.get(name).unwrap();
        let diff = ga
            .data()
            .iter()
            .zip(gb.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{name}: {diff}");
    }
}

#[test]
fn training_is_deterministic_and_logs_epochs() {
    let set = small_set(8, 2);
    let enc = EncoderConfig::default();
    let cfg = fast_config(Paradigm::Combined);
    let mut seen = Vec::new();
    let a = train_combined(&set, &enc, &cfg, &mut |e| seen.push(e.epoch)).unwrap();
    let b = train_combined(&set, &enc, &cfg, &mut |_| {}).unwrap();
    assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(a.checkpoint.history.len(), 2);
    let line = a.log[0].to_json_line();
    let back: EpochLog = serde_json::from_str(&line).unwrap();
    assert_eq!(back, a.log[0]);
    assert!(line.contains("\"stage\":\"combined\""));
}

#[test]
fn combined_training_lowers_the_loss() {
    let set = small_set(12, 2);
    let enc = EncoderConfig::default();
    let cfg = TrainConfig {
        epochs: 15,
        ..fast_config(Paradigm::Combined)
    };
    let out = train_combined(&set, &enc, &cfg, &mut |_| {}).unwrap();
    let first = out.log.first().unwrap().loss;
    let last = out.log.last().unwrap().loss;
    assert!(out.log.iter().all(|e| e.loss.is_finite()));
    assert!(last < first, "first {first}, last {last}");
}
